//! Feedforward networks over the tape.
//!
//! Weights live outside any tape; `bind` pushes them as leaves for one
//! training step so several forward passes can share the same parameter
//! nodes and their gradients accumulate.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tape::{NodeId, Tape};
use crate::tensor::{Matrix, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply_tape(self, tape: &mut Tape, x: NodeId) -> NodeId {
        match self {
            Activation::Linear => x,
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Tanh => tape.tanh(x),
        }
    }

    pub fn apply_scalar(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_name(s: &str) -> Option<Activation> {
        match s {
            "linear" => Some(Activation::Linear),
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// One dense layer: weights are input_dim × output_dim, bias 1 × output_dim.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Matrix,
    pub b: Matrix,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub dims: Vec<usize>,
    pub layers: Vec<Dense>,
    pub hidden: Activation,
    pub output: Activation,
}

/// Parameter leaves of one `Mlp` bound onto a tape, ordered w0, b0, w1, b1, …
#[derive(Debug, Clone)]
pub struct MlpNodes {
    pub ids: Vec<NodeId>,
}

impl Mlp {
    /// He-initialized network; biases start at zero.
    pub fn new(dims: &[usize], hidden: Activation, output: Activation, rng: &mut impl Rng) -> Mlp {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for win in dims.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let w = Matrix::from_fn(fan_in, fan_out, |_, _| {
                let s: f64 = StandardNormal.sample(rng);
                s * std
            });
            layers.push(Dense {
                w,
                b: Matrix::zeros(1, fan_out),
            });
        }
        Mlp {
            dims: dims.to_vec(),
            layers,
            hidden,
            output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Fast inference path (no tape). Validates the input width.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix, TensorError> {
        if x.cols() != self.input_dim() {
            return Err(TensorError::ShapeMismatch {
                op: "mlp_forward",
                lr: x.rows(),
                lc: x.cols(),
                rr: self.input_dim(),
                rc: self.output_dim(),
            });
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = h.matmul(&layer.w);
            for i in 0..z.rows() {
                for j in 0..z.cols() {
                    z.set(i, j, z.get(i, j) + layer.b.get(0, j));
                }
            }
            let act = if li == last { self.output } else { self.hidden };
            h = z.map(|v| act.apply_scalar(v));
        }
        Ok(h)
    }

    pub fn forward_row(&self, x: &[f64]) -> Result<Vec<f64>, TensorError> {
        Ok(self.forward(&Matrix::row_vector(x))?.data().to_vec())
    }

    /// Push all parameters as leaves on the tape.
    pub fn bind(&self, tape: &mut Tape) -> MlpNodes {
        let mut ids = Vec::with_capacity(self.layers.len() * 2);
        for layer in &self.layers {
            ids.push(tape.leaf(layer.w.clone()));
            ids.push(tape.leaf(layer.b.clone()));
        }
        MlpNodes { ids }
    }

    /// Forward pass reusing previously bound parameter leaves.
    pub fn forward_bound(&self, tape: &mut Tape, x: NodeId, nodes: &MlpNodes) -> NodeId {
        assert_eq!(nodes.ids.len(), self.layers.len() * 2);
        let mut h = x;
        let last = self.layers.len() - 1;
        for li in 0..self.layers.len() {
            let w = nodes.ids[2 * li];
            let b = nodes.ids[2 * li + 1];
            let z = tape.matmul(h, w);
            let zb = tape.add_row_broadcast(z, b);
            let act = if li == last { self.output } else { self.hidden };
            h = act.apply_tape(tape, zb);
        }
        h
    }

    /// Bind and run in one call; used when gradients for this net are wanted.
    pub fn forward_tape(&self, tape: &mut Tape, x: NodeId) -> (NodeId, MlpNodes) {
        let nodes = self.bind(tape);
        (self.forward_bound(tape, x, &nodes), nodes)
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in &self.layers {
            out.push(&layer.w);
            out.push(&layer.b);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in &mut self.layers {
            out.push(&mut layer.w);
            out.push(&mut layer.b);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }
}

impl MlpNodes {
    pub fn targets(&self) -> &[NodeId] {
        &self.ids
    }
}

/// dims helper: input, `depth` hidden layers of `width`, output.
pub fn mlp_dims(input: usize, width: usize, depth: usize, output: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(depth + 2);
    dims.push(input);
    dims.extend(std::iter::repeat(width).take(depth));
    dims.push(output);
    dims
}
