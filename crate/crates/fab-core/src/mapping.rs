//! The feasibility-improvement map (encode, project into the latent ball,
//! decode) and the solver networks it attaches to.

use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::fab::{project_latent, FabModel};
use crate::nn::{mlp_dims, Activation, Mlp, MlpNodes};
use crate::subseed;
use crate::tape::{NodeId, Tape};
use crate::tensor::Matrix;

/// A frozen model wrapped as a reusable corrector. Immutable and cheap to
/// share across threads.
#[derive(Debug, Clone)]
pub struct FeasibilityMap {
    model: Arc<FabModel>,
}

impl FeasibilityMap {
    pub fn new(model: FabModel) -> FeasibilityMap {
        FeasibilityMap {
            model: Arc::new(model),
        }
    }

    pub fn model(&self) -> &FabModel {
        &self.model
    }

    pub fn latent_radius(&self) -> f64 {
        self.model.latent_radius()
    }

    pub fn ambient_dim(&self) -> usize {
        self.model.ambient_dim
    }

    /// Single forward pass: encode, ball-project, decode. No iteration.
    pub fn apply(&self, y_raw: &[f64], x: Option<&[f64]>) -> Vec<f64> {
        self.apply_with_latent(y_raw, x).0
    }

    /// Corrected point together with the latent point actually decoded
    /// (whose norm is at most the latent radius by construction).
    pub fn apply_with_latent(&self, y_raw: &[f64], x: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
        let z = self.model.encode_point(y_raw, x);
        let zp = project_latent(&z, self.model.latent_radius());
        let y = self.model.decode_point(&zp, x);
        (y, zp)
    }

    /// Batched correction, fast path.
    pub fn apply_batch(&self, y: &Matrix, x: Option<&Matrix>) -> Matrix {
        let z = self.model.encode_batch(y, x);
        let r = self.model.latent_radius();
        let mut zp = Matrix::zeros(z.rows(), z.cols());
        for i in 0..z.rows() {
            let p = project_latent(z.row(i), r);
            for (j, v) in p.iter().enumerate() {
                zp.set(i, j, *v);
            }
        }
        self.model.decode_batch(&zp, x)
    }

    /// Differentiable correction over the tape with frozen weights. The map
    /// parameters are bound as constant leaves; gradients flow through them
    /// to whatever produced `y_raw`.
    pub fn apply_tape(&self, tape: &mut Tape, y_raw: NodeId, x_raw: Option<NodeId>) -> NodeId {
        let bound = self.model.bind(tape);
        let x_norm = x_raw.map(|x| self.model.normalize_x_tape(tape, x));
        let y_norm = self.model.normalize_y_tape(tape, y_raw);
        let z = self.model.encode_bound(tape, &bound, y_norm, x_norm);
        let zp = self.model.project_latent_tape(tape, z);
        let decoded_norm = self.model.decode_bound(tape, &bound, zp, x_norm);
        self.model.denormalize_y_tape(tape, decoded_norm)
    }

    /// SHA-256 over all weights, little-endian; the freeze contract.
    pub fn weight_hash(&self) -> String {
        weight_hash(&self.model)
    }
}

/// Hex SHA-256 of every parameter tensor of a model, in parameter order.
pub fn weight_hash(model: &FabModel) -> String {
    let mut hasher = Sha256::new();
    for p in model.all_params() {
        for v in p.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex(&hasher.finalize())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Amortized solver: a plain MLP from problem parameters to a candidate
/// point, optionally corrected by an attached feasibility map.
#[derive(Debug, Clone)]
pub struct SolverNet {
    pub mlp: Mlp,
    pub map: Option<FeasibilityMap>,
}

impl SolverNet {
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        hidden: usize,
        depth: usize,
        map: Option<FeasibilityMap>,
        seed: u64,
    ) -> SolverNet {
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "solver-net"));
        let mlp = Mlp::new(
            &mlp_dims(input_dim, hidden, depth, output_dim),
            Activation::Relu,
            Activation::Linear,
            &mut rng,
        );
        SolverNet { mlp, map }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    /// Raw network output followed by the attached correction, if any.
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let raw = self.mlp.forward_row(x).expect("solver input width");
        match &self.map {
            None => raw,
            Some(map) => {
                let cond = map.model().is_conditional().then_some(x);
                map.apply(&raw, cond)
            }
        }
    }

    pub fn predict_batch(&self, x: &Matrix) -> Matrix {
        let raw = self.mlp.forward(x).expect("solver input width");
        match &self.map {
            None => raw,
            Some(map) => {
                let cond = map.model().is_conditional().then_some(x);
                map.apply_batch(&raw, cond)
            }
        }
    }

    /// Training-side forward: returns the (possibly corrected) prediction
    /// node and the solver parameters as backward targets.
    pub fn forward_tape(&self, tape: &mut Tape, x: NodeId) -> (NodeId, MlpNodes) {
        let (raw, nodes) = self.mlp.forward_tape(tape, x);
        let out = match &self.map {
            None => raw,
            Some(map) => {
                let cond = map.model().is_conditional().then_some(x);
                map.apply_tape(tape, raw, cond)
            }
        };
        (out, nodes)
    }
}

/// Per-item wall-clock statistics in milliseconds.
#[derive(Debug, Clone, Copy)]
pub struct TimingStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub n: usize,
}

/// Time `f` once per item after `warmup` thrown-away calls on the first
/// item. Monotone clock; per-item latencies aggregated into mean/std.
pub fn time_per_item<T>(items: &[T], warmup: usize, mut f: impl FnMut(&T)) -> TimingStats {
    assert!(!items.is_empty());
    for _ in 0..warmup {
        f(&items[0]);
    }
    let mut lat = Vec::with_capacity(items.len());
    for item in items {
        let t0 = Instant::now();
        f(item);
        lat.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let mean = lat.iter().sum::<f64>() / lat.len() as f64;
    let var = lat.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / lat.len() as f64;
    TimingStats {
        mean_ms: mean,
        std_ms: var.sqrt(),
        n: lat.len(),
    }
}

/// Per-item latency of the map over a batch of raw points (default warm-up
/// of 10 passes).
pub fn inference_time(map: &FeasibilityMap, batch: &[Vec<f64>], warmup: usize) -> TimingStats {
    time_per_item(batch, warmup, |y| {
        std::hint::black_box(map.apply(y, None));
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fab::FabConfig;
    use crate::findiff::{central_difference, rel_err};
    use crate::tensor::norm2;
    use rand::Rng;

    fn trainedish_model(seed: u64) -> FabModel {
        let cfg = FabConfig {
            hidden_dim: 6,
            encoder_depth: 2,
            decoder_depth: 2,
            disc_depth: 2,
            seed,
            ..FabConfig::default()
        };
        let mut model = FabModel::new(2, 0, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
        for p in model.all_params_mut() {
            for v in p.data_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
        model
    }

    #[test]
    fn decoded_latent_stays_in_the_ball() {
        let map = FeasibilityMap::new(trainedish_model(3));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let y = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let (_, z) = map.apply_with_latent(&y, None);
            assert!(norm2(&z) <= map.latent_radius());
        }
    }

    #[test]
    fn identity_model_is_identity_inside_the_ball() {
        let cfg = FabConfig {
            encoder_depth: 0,
            decoder_depth: 0,
            disc_depth: 1,
            seed: 1,
            ..FabConfig::default()
        };
        let mut model = FabModel::new(2, 0, cfg);
        model.encoder.layers[0].w = Matrix::identity(2);
        model.encoder.layers[0].b = Matrix::zeros(1, 2);
        model.decoders[0].layers[0].w = Matrix::identity(2);
        model.decoders[0].layers[0].b = Matrix::zeros(1, 2);
        let map = FeasibilityMap::new(model);
        let y = [0.3, -0.2]; // norm < 0.5
        let out = map.apply(&y, None);
        assert!((out[0] - y[0]).abs() < 1e-15);
        assert!((out[1] - y[1]).abs() < 1e-15);
    }

    #[test]
    fn apply_is_bit_deterministic() {
        let map = FeasibilityMap::new(trainedish_model(7));
        let y = [1.7, -2.4];
        assert_eq!(map.apply(&y, None), map.apply(&y, None));
        let batch = Matrix::from_rows(&[vec![1.7, -2.4], vec![0.2, 0.9]]);
        assert_eq!(
            map.apply_batch(&batch, None).data(),
            map.apply_batch(&batch, None).data()
        );
    }

    #[test]
    fn batch_apply_matches_single_apply() {
        let map = FeasibilityMap::new(trainedish_model(9));
        let rows = vec![vec![0.4, 1.9], vec![-2.2, 0.3], vec![0.0, 0.0]];
        let batch = Matrix::from_rows(&rows);
        let out = map.apply_batch(&batch, None);
        for (i, row) in rows.iter().enumerate() {
            let single = map.apply(row, None);
            for j in 0..2 {
                assert!((out.get(i, j) - single[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predict_without_attachment_is_the_raw_mlp() {
        let net = SolverNet::new(3, 2, 8, 2, None, 11);
        let x = [0.2, -0.7, 1.1];
        assert_eq!(net.predict(&x), net.mlp.forward_row(&x).unwrap());
    }

    #[test]
    fn predict_gradient_matches_finite_differences_through_the_map() {
        let map = FeasibilityMap::new(trainedish_model(13));
        let mut net = SolverNet::new(3, 2, 4, 2, Some(map), 15);
        let x = vec![0.3, -0.5, 0.8];
        // Objective: squared distance to a target point.
        let target = [0.9, -0.4];
        let eval = |net: &SolverNet, x: &[f64]| {
            let y = net.predict(x);
            (y[0] - target[0]).powi(2) + (y[1] - target[1]).powi(2)
        };

        // Tape gradient through solver + frozen map.
        let mut tape = Tape::new();
        let xid = tape.leaf(Matrix::row_vector(&x));
        let (out, nodes) = net.forward_tape(&mut tape, xid);
        let tgt = tape.constant(Matrix::row_vector(&target));
        let diff = tape.sub(out, tgt);
        let sq = tape.mul(diff, diff);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss, &nodes.ids).unwrap();
        tape.ensure_finite().unwrap();
        let mut flat = Vec::new();
        for (t, g) in nodes.ids.iter().zip(grads) {
            match g {
                Some(id) => flat.extend_from_slice(tape.value(id).data()),
                None => flat.extend(std::iter::repeat(0.0).take(tape.value(*t).len())),
            }
        }

        fn params_of(n: &mut SolverNet) -> Vec<&mut Matrix> {
            n.mlp.params_mut()
        }
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            let idx = rng.random_range(0..flat.len());
            let x2 = x.clone();
            let fd = central_difference(&mut net, params_of, idx, 1e-5, |n| eval(n, &x2));
            let err = rel_err(flat[idx], fd);
            assert!(
                err < 1e-3,
                "solver gradient {idx}: tape {} vs fd {fd} ({err})",
                flat[idx]
            );
        }
    }

    #[test]
    fn solver_predictions_always_decode_in_ball_latents() {
        let map = FeasibilityMap::new(trainedish_model(19));
        let net = SolverNet::new(2, 2, 6, 2, Some(map.clone()), 21);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let y = net.predict(&x);
            let raw = net.mlp.forward_row(&x).unwrap();
            let (_, z) = map.apply_with_latent(&raw, None);
            assert!(norm2(&z) <= map.latent_radius());
            assert_eq!(y, map.apply(&raw, None));
        }
    }

    #[test]
    fn timing_stats_are_finite_and_positive() {
        let map = FeasibilityMap::new(trainedish_model(25));
        let single = vec![vec![0.5, -0.5]];
        let batch: Vec<Vec<f64>> = (0..200).map(|i| vec![i as f64 * 0.01, -0.3]).collect();
        let a = inference_time(&map, &single, 10);
        let b = inference_time(&map, &batch, 10);
        assert!(a.mean_ms >= 0.0 && a.mean_ms.is_finite());
        assert!(b.mean_ms > 0.0 && b.mean_ms.is_finite());
        assert!(b.std_ms >= 0.0);
        // Per-item cost for one item vs many stays within a sane factor.
        let ratio = (a.mean_ms / b.mean_ms).max(b.mean_ms / a.mean_ms);
        assert!(ratio < 100.0, "per-item ratio {ratio}");
    }

    #[test]
    fn weight_hash_changes_with_weights() {
        let m1 = trainedish_model(27);
        let mut m2 = m1.clone();
        let h1 = weight_hash(&m1);
        assert_eq!(h1, weight_hash(&m2));
        m2.encoder.layers[0].w.data_mut()[0] += 1e-12;
        assert_ne!(h1, weight_hash(&m2));
    }
}
