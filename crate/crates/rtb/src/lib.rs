pub mod ad;
pub mod baselines;
pub mod discrete;
pub mod diffusion;
pub mod eval;
pub mod exploration;
pub mod losses;
pub mod targets;

