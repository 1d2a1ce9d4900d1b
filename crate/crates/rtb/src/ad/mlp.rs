//! Dense multilayer perceptron on top of the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Buffer, NodeId, Tape};

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Gelu,
}

/// One dense layer, weights row-major `out_dim x in_dim`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// MLP parameters. The activation applies after every layer except the last.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
    pub activation: Activation,
}

/// Gradients in the same shapes as [`MlpParams`].
#[derive(Clone, Debug)]
pub struct MlpGrads {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl MlpParams {
    /// Xavier-uniform weights, zero biases. `sizes` lists in/hidden/out dims,
    /// e.g. `[10, 64, 64, 2]`.
    pub fn seeded<R: Rng>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output dims");
        let layers = sizes
            .windows(2)
            .map(|io| {
                let (n_in, n_out) = (io[0], io[1]);
                let bound = (6.0 / (n_in + n_out) as f64).sqrt();
                let w = (0..n_in * n_out).map(|_| rng.gen_range(-bound..bound)).collect();
                DenseLayer { in_dim: n_in, out_dim: n_out, w, b: vec![0.0; n_out] }
            })
            .collect();
        MlpParams { layers, activation }
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output dims");
        let layers = sizes
            .windows(2)
            .map(|io| DenseLayer {
                in_dim: io[0],
                out_dim: io[1],
                w: vec![0.0; io[0] * io[1]],
                b: vec![0.0; io[1]],
            })
            .collect();
        MlpParams { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().expect("empty MLP").in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("empty MLP").out_dim
    }

    /// Zero the final layer so the net maps everything to 0 while keeping
    /// hidden features trainable.
    pub fn zero_final_layer(&mut self) {
        let last = self.layers.last_mut().expect("empty MLP");
        last.w.iter_mut().for_each(|v| *v = 0.0);
        last.b.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Flat views over all tensors, weights and biases interleaved per layer.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.w.as_slice());
            out.push(l.b.as_slice());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(l.w.as_mut_slice());
            out.push(l.b.as_mut_slice());
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(&l.b).all(|v| v.is_finite()))
    }
}

impl MlpGrads {
    pub fn zeros_like(p: &MlpParams) -> Self {
        MlpGrads {
            w: p.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            b: p.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.w.len() * 2);
        for (w, b) in self.w.iter().zip(&self.b) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.w.iter_mut().chain(self.b.iter_mut()) {
            t.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn add(&mut self, other: &MlpGrads) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Forward pass without a tape; the production path for frozen nets and the
/// sampling loop.
pub fn mlp_forward_raw(params: &MlpParams, input: &[f64]) -> Vec<f64> {
    assert_eq!(input.len(), params.in_dim(), "mlp input length mismatch");
    let n_layers = params.layers.len();
    let mut h = input.to_vec();
    for (k, layer) in params.layers.iter().enumerate() {
        let mut out = layer.b.clone();
        for i in 0..layer.out_dim {
            let row = &layer.w[i * layer.in_dim..(i + 1) * layer.in_dim];
            let mut acc = 0.0;
            for (wij, xj) in row.iter().zip(&h) {
                acc += wij * xj;
            }
            out[i] += acc;
        }
        if k + 1 < n_layers {
            match params.activation {
                Activation::Tanh => out.iter_mut().for_each(|v| *v = v.tanh()),
                Activation::Gelu => out.iter_mut().for_each(|v| *v = super::gelu(*v)),
            }
        }
        h = out;
    }
    h
}

/// Parameter leaves staged once on a tape. Every `forward` call reuses the
/// same leaves, so adjoints accumulate across calls and `grads` returns the
/// total gradient.
pub struct StagedMlp {
    w: Vec<NodeId>,
    b: Vec<NodeId>,
    activation: Activation,
    in_dim: usize,
}

impl StagedMlp {
    pub fn stage(tape: &mut Tape, params: &MlpParams) -> Self {
        let mut w = Vec::with_capacity(params.layers.len());
        let mut b = Vec::with_capacity(params.layers.len());
        for layer in &params.layers {
            w.push(tape.leaf(Buffer::matrix(layer.out_dim, layer.in_dim, layer.w.clone())));
            b.push(tape.leaf(Buffer::vector(layer.b.clone())));
        }
        StagedMlp { w, b, activation: params.activation, in_dim: params.in_dim() }
    }

    pub fn forward(&self, tape: &mut Tape, input: &[f64]) -> NodeId {
        assert_eq!(input.len(), self.in_dim, "mlp input length mismatch");
        let x = tape.leaf_vector(input);
        self.forward_node(tape, x)
    }

    pub fn forward_node(&self, tape: &mut Tape, input: NodeId) -> NodeId {
        let n_layers = self.w.len();
        let mut h = input;
        for k in 0..n_layers {
            let wx = tape.matvec(self.w[k], h);
            h = tape.add(wx, self.b[k]);
            if k + 1 < n_layers {
                h = match self.activation {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Gelu => tape.gelu(h),
                };
            }
        }
        h
    }

    pub fn grads(&self, adjoints: &super::Adjoints, shapes: &MlpParams) -> MlpGrads {
        let w = self
            .w
            .iter()
            .zip(&shapes.layers)
            .map(|(id, l)| adjoints.get_or_zeros(*id, l.w.len()))
            .collect();
        let b = self
            .b
            .iter()
            .zip(&shapes.layers)
            .map(|(id, l)| adjoints.get_or_zeros(*id, l.b.len()))
            .collect();
        MlpGrads { w, b }
    }
}

/// Taped forward pass recording all intermediates for a later backward.
pub fn mlp_forward(tape: &mut Tape, params: &MlpParams, input: &[f64]) -> (StagedMlp, NodeId) {
    let staged = StagedMlp::stage(tape, params);
    let out = staged.forward(tape, input);
    (staged, out)
}
