use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rtb::discrete::*;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let prior = TabularAR::seeded(4, 6, 1.0, &mut rng);
    let reward = SeqReward::seeded(4, 6, 0.8, &mut rng);
    let exact = enumerate_posterior(&prior, &reward);

    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(20000);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(256);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let vargrad: bool = args.get(4).map(|s| s == "v").unwrap_or(false);

    let cfg = DiscreteTrainConfig { iters, batch, lr, use_vargrad: vargrad, ..Default::default() };
    let mut rng2 = ChaCha8Rng::seed_from_u64(11);
    let t0 = std::time::Instant::now();
    let (post, log_z) = train_discrete(&prior, &reward, &cfg, &mut rng2, None);
    let tv = distribution_tv(&post.full_distribution(), &exact.probs);
    println!("iters={iters} batch={batch} lr={lr} vargrad={vargrad}: tv={tv:.5} zerr={:.4} time={:.1}s", (log_z - exact.log_z).abs(), t0.elapsed().as_secs_f64());
}
