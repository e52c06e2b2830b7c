//! The trained artifact: encoder, decoder bank, mixture net, discriminator,
//! and the latent-ball projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::fab::FabConfig;
use crate::nn::{mlp_dims, Activation, Mlp, MlpNodes};
use crate::subseed;
use crate::tape::{NodeId, Tape};
use crate::tensor::{norm2, Matrix};

/// Per-coordinate standardization statistics, frozen after the phase-1 data
/// pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Normalization {
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
}

impl Normalization {
    pub fn identity(y_dim: usize, x_dim: usize) -> Normalization {
        Normalization {
            y_mean: vec![0.0; y_dim],
            y_std: vec![1.0; y_dim],
            x_mean: vec![0.0; x_dim],
            x_std: vec![1.0; x_dim],
        }
    }

    pub fn fit(values: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let dim = values[0].len();
        let n = values.len() as f64;
        let mut mean = vec![0.0; dim];
        for v in values {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for v in values {
            for ((s, x), m) in var.iter_mut().zip(v).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        let std = var.iter().map(|s| (s / n).sqrt().max(1e-8)).collect();
        (mean, std)
    }

    pub fn normalize_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(&self.y_mean)
            .zip(&self.y_std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn denormalize_y(&self, yn: &[f64]) -> Vec<f64> {
        yn.iter()
            .zip(&self.y_mean)
            .zip(&self.y_std)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }

    pub fn normalize_x(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.x_mean)
            .zip(&self.x_std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

/// Exact projection onto the radius-r ball: identity inside, radial rescale
/// outside, tightened so the returned norm never exceeds r in floats.
pub fn project_latent(z: &[f64], r: f64) -> Vec<f64> {
    assert!(r > 0.0, "latent radius must be positive");
    let n = norm2(z);
    if n <= r {
        return z.to_vec();
    }
    let mut out: Vec<f64> = z.iter().map(|v| v * (r / n)).collect();
    for _ in 0..3 {
        let m = norm2(&out);
        if m <= r {
            break;
        }
        let s = r / m;
        for v in out.iter_mut() {
            *v *= s;
        }
    }
    out
}

/// Uniform samples from the radius-r ball in k dimensions: Gaussian
/// direction scaled by r * U^(1/k).
pub fn sample_ball(k: usize, r: f64, n: usize, seed: u64) -> Vec<Vec<f64>> {
    assert!(n >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_ball_with(&mut rng, k, r, n)
}

pub fn sample_ball_with(rng: &mut ChaCha8Rng, k: usize, r: f64, n: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut dir: Vec<f64>;
        let mut norm;
        loop {
            dir = (0..k).map(|_| StandardNormal.sample(rng)).collect();
            norm = norm2(&dir);
            if norm > 1e-12 {
                break;
            }
        }
        let u: f64 = rng.random_range(0.0..1.0);
        let radius = r * u.powf(1.0 / k as f64);
        for v in dir.iter_mut() {
            *v *= radius / norm;
        }
        out.push(dir);
    }
    out
}

/// Parameter leaves of a whole model bound onto one tape for a training step.
pub struct FabBound {
    pub enc: MlpNodes,
    pub decs: Vec<MlpNodes>,
    pub mix: Option<MlpNodes>,
    pub disc: MlpNodes,
}

impl FabBound {
    /// Autoencoder-side targets (encoder, decoders, mixture), in the same
    /// order as `FabModel::ae_params_mut`.
    pub fn ae_targets(&self) -> Vec<NodeId> {
        let mut out = self.enc.ids.clone();
        for d in &self.decs {
            out.extend_from_slice(&d.ids);
        }
        if let Some(m) = &self.mix {
            out.extend_from_slice(&m.ids);
        }
        out
    }

    pub fn disc_targets(&self) -> Vec<NodeId> {
        self.disc.ids.clone()
    }
}

#[derive(Debug, Clone)]
pub struct FabModel {
    pub config: FabConfig,
    pub ambient_dim: usize,
    /// Problem-parameter width for conditional sets; 0 when input-independent.
    pub x_dim: usize,
    pub encoder: Mlp,
    pub decoders: Vec<Mlp>,
    pub mixture: Option<Mlp>,
    pub disc: Mlp,
    pub norm: Normalization,
}

impl FabModel {
    pub fn new(ambient_dim: usize, x_dim: usize, config: FabConfig) -> FabModel {
        config.validate().expect("invalid FabConfig");
        let k = config.latent_dim.unwrap_or(ambient_dim);
        let enc_dims = mlp_dims(
            ambient_dim + x_dim,
            config.hidden_dim,
            config.encoder_depth,
            k,
        );
        let dec_dims = mlp_dims(
            k + x_dim,
            config.decoder_width(),
            config.decoder_depth,
            ambient_dim,
        );
        let disc_dims = mlp_dims(ambient_dim + x_dim, config.hidden_dim, config.disc_depth, 1);
        let mix_dims = mlp_dims(
            k + x_dim,
            config.hidden_dim,
            config.mixture_depth,
            config.num_decoders,
        );

        let mut enc_rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, "init/encoder"));
        let encoder = Mlp::new(&enc_dims, Activation::Relu, Activation::Linear, &mut enc_rng);
        let decoders: Vec<Mlp> = (0..config.num_decoders)
            .map(|i| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(subseed(config.seed, &format!("init/decoder{i}")));
                Mlp::new(&dec_dims, Activation::Relu, Activation::Linear, &mut rng)
            })
            .collect();
        let mixture = if config.num_decoders > 1 {
            let mut rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, "init/mixture"));
            Some(Mlp::new(
                &mix_dims,
                Activation::Relu,
                Activation::Linear,
                &mut rng,
            ))
        } else {
            None
        };
        let mut disc_rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, "init/disc"));
        let disc = Mlp::new(
            &disc_dims,
            Activation::Relu,
            Activation::Sigmoid,
            &mut disc_rng,
        );

        FabModel {
            norm: Normalization::identity(ambient_dim, x_dim),
            config,
            ambient_dim,
            x_dim,
            encoder,
            decoders,
            mixture,
            disc,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim.unwrap_or(self.ambient_dim)
    }

    pub fn latent_radius(&self) -> f64 {
        self.config.latent_radius
    }

    pub fn is_conditional(&self) -> bool {
        self.x_dim > 0
    }

    pub fn bind(&self, tape: &mut Tape) -> FabBound {
        FabBound {
            enc: self.encoder.bind(tape),
            decs: self.decoders.iter().map(|d| d.bind(tape)).collect(),
            mix: self.mixture.as_ref().map(|m| m.bind(tape)),
            disc: self.disc.bind(tape),
        }
    }

    /// Autoencoder parameters in bind order: encoder, decoders, mixture.
    pub fn ae_params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.encoder.params_mut();
        for d in &mut self.decoders {
            out.extend(d.params_mut());
        }
        if let Some(m) = &mut self.mixture {
            out.extend(m.params_mut());
        }
        out
    }

    pub fn ae_params(&self) -> Vec<&Matrix> {
        let mut out = self.encoder.params();
        for d in &self.decoders {
            out.extend(d.params());
        }
        if let Some(m) = &self.mixture {
            out.extend(m.params());
        }
        out
    }

    pub fn all_params(&self) -> Vec<&Matrix> {
        let mut out = self.ae_params();
        out.extend(self.disc.params());
        out
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.encoder.params_mut();
        for d in &mut self.decoders {
            out.extend(d.params_mut());
        }
        if let Some(m) = &mut self.mixture {
            out.extend(m.params_mut());
        }
        out.extend(self.disc.params_mut());
        out
    }

    // ---- tape-side builders (batched) ------------------------------------

    pub fn normalize_y_tape(&self, tape: &mut Tape, y: NodeId) -> NodeId {
        let m = tape.value(y).rows();
        let mean = tape.constant(Matrix::row_vector(&self.norm.y_mean));
        let mean_rep = tape.repeat_row(mean, m);
        let centered = tape.sub(y, mean_rep);
        let inv: Vec<f64> = self.norm.y_std.iter().map(|s| 1.0 / s).collect();
        let inv = tape.constant(Matrix::row_vector(&inv));
        let inv_rep = tape.repeat_row(inv, m);
        tape.mul(centered, inv_rep)
    }

    pub fn denormalize_y_tape(&self, tape: &mut Tape, yn: NodeId) -> NodeId {
        let m = tape.value(yn).rows();
        let std = tape.constant(Matrix::row_vector(&self.norm.y_std));
        let std_rep = tape.repeat_row(std, m);
        let scaled = tape.mul(yn, std_rep);
        let mean = tape.constant(Matrix::row_vector(&self.norm.y_mean));
        let mean_rep = tape.repeat_row(mean, m);
        tape.add(scaled, mean_rep)
    }

    pub fn normalize_x_tape(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let m = tape.value(x).rows();
        let mean = tape.constant(Matrix::row_vector(&self.norm.x_mean));
        let mean_rep = tape.repeat_row(mean, m);
        let centered = tape.sub(x, mean_rep);
        let inv: Vec<f64> = self.norm.x_std.iter().map(|s| 1.0 / s).collect();
        let inv = tape.constant(Matrix::row_vector(&inv));
        let inv_rep = tape.repeat_row(inv, m);
        tape.mul(centered, inv_rep)
    }

    /// Encoder on normalized inputs; concatenates normalized x when present.
    pub fn encode_bound(
        &self,
        tape: &mut Tape,
        bound: &FabBound,
        y_norm: NodeId,
        x_norm: Option<NodeId>,
    ) -> NodeId {
        let input = match x_norm {
            None => y_norm,
            Some(x) => tape.concat_cols(y_norm, x),
        };
        self.encoder.forward_bound(tape, input, &bound.enc)
    }

    /// Mixture-combined decoder in normalized output space.
    pub fn decode_bound(
        &self,
        tape: &mut Tape,
        bound: &FabBound,
        z: NodeId,
        x_norm: Option<NodeId>,
    ) -> NodeId {
        let input = match x_norm {
            None => z,
            Some(x) => tape.concat_cols(z, x),
        };
        if self.decoders.len() == 1 {
            return self.decoders[0].forward_bound(tape, input, &bound.decs[0]);
        }
        let outs: Vec<NodeId> = self
            .decoders
            .iter()
            .zip(&bound.decs)
            .map(|(d, n)| d.forward_bound(tape, input, n))
            .collect();
        let mixture = self.mixture.as_ref().expect("mixture net for rho > 1");
        let logits = mixture.forward_bound(tape, input, bound.mix.as_ref().unwrap());
        let alpha = tape.softmax_rows(logits);
        let n_out = self.ambient_dim;
        let mut acc: Option<NodeId> = None;
        for (i, out) in outs.into_iter().enumerate() {
            let a_i = tape.slice_cols(alpha, i, i + 1);
            let rep = tape.repeat_col(a_i, n_out);
            let term = tape.mul(rep, out);
            acc = Some(match acc {
                None => term,
                Some(p) => tape.add(p, term),
            });
        }
        acc.unwrap()
    }

    /// Discriminator probability on normalized inputs.
    pub fn disc_bound(
        &self,
        tape: &mut Tape,
        bound: &FabBound,
        y_norm: NodeId,
        x_norm: Option<NodeId>,
    ) -> NodeId {
        let input = match x_norm {
            None => y_norm,
            Some(x) => tape.concat_cols(y_norm, x),
        };
        self.disc.forward_bound(tape, input, &bound.disc)
    }

    /// Latent-ball projection as differentiable tape ops. The clamp keeps
    /// the interior branch (zero scale gradient) at and inside the boundary.
    pub fn project_latent_tape(&self, tape: &mut Tape, z: NodeId) -> NodeId {
        let r = self.latent_radius();
        let norms = tape.row_norms(z);
        let inv = tape.recip(norms);
        let raw = tape.scale(inv, r);
        let s = tape.clamp(raw, f64::NEG_INFINITY, 1.0);
        let k = tape.value(z).cols();
        let rep = tape.repeat_col(s, k);
        tape.mul(z, rep)
    }

    // ---- fast inference paths (no tape) -----------------------------------

    /// Batched mixture decode + denormalization, plain matrix ops.
    pub fn decode_batch(&self, z: &Matrix, x: Option<&Matrix>) -> Matrix {
        let input = match x {
            None => z.clone(),
            Some(xm) => {
                let xn_rows: Vec<Vec<f64>> = (0..xm.rows())
                    .map(|i| self.norm.normalize_x(xm.row(i)))
                    .collect();
                let mut cat = Matrix::zeros(z.rows(), z.cols() + xm.cols());
                for i in 0..z.rows() {
                    for j in 0..z.cols() {
                        cat.set(i, j, z.get(i, j));
                    }
                    for j in 0..xm.cols() {
                        cat.set(i, z.cols() + j, xn_rows[i][j]);
                    }
                }
                cat
            }
        };
        let mut out = if self.decoders.len() == 1 {
            self.decoders[0].forward(&input).expect("decode shapes")
        } else {
            let outs: Vec<Matrix> = self
                .decoders
                .iter()
                .map(|d| d.forward(&input).expect("decode shapes"))
                .collect();
            let logits = self
                .mixture
                .as_ref()
                .unwrap()
                .forward(&input)
                .expect("mixture shapes");
            let mut acc = Matrix::zeros(input.rows(), self.ambient_dim);
            for i in 0..input.rows() {
                let row = logits.row(i);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for &l in row {
                    denom += (l - mx).exp();
                }
                for (d_idx, dec_out) in outs.iter().enumerate() {
                    let w = (row[d_idx] - mx).exp() / denom;
                    for j in 0..self.ambient_dim {
                        acc.set(i, j, acc.get(i, j) + w * dec_out.get(i, j));
                    }
                }
            }
            acc
        };
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                out.set(i, j, out.get(i, j) * self.norm.y_std[j] + self.norm.y_mean[j]);
            }
        }
        out
    }

    /// Mixture weights at a latent point; a probability vector.
    pub fn mixture_weights(&self, z: &[f64], x: Option<&[f64]>) -> Vec<f64> {
        match &self.mixture {
            None => vec![1.0],
            Some(mix) => {
                let input = self.decoder_input(z, x);
                let logits = mix.forward_row(&input).expect("mixture shapes");
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                logits.iter().map(|l| (l - mx).exp() / denom).collect()
            }
        }
    }

    fn decoder_input(&self, z: &[f64], x: Option<&[f64]>) -> Vec<f64> {
        match x {
            None => z.to_vec(),
            Some(xv) => {
                let mut input = z.to_vec();
                input.extend(self.norm.normalize_x(xv));
                input
            }
        }
    }

    /// Batched encode, plain matrix ops.
    pub fn encode_batch(&self, y: &Matrix, x: Option<&Matrix>) -> Matrix {
        let mut input = Matrix::zeros(y.rows(), self.ambient_dim + self.x_dim);
        for i in 0..y.rows() {
            let yn = self.norm.normalize_y(y.row(i));
            for (j, v) in yn.iter().enumerate() {
                input.set(i, j, *v);
            }
            if let Some(xm) = x {
                let xn = self.norm.normalize_x(xm.row(i));
                for (j, v) in xn.iter().enumerate() {
                    input.set(i, self.ambient_dim + j, *v);
                }
            }
        }
        self.encoder.forward(&input).expect("encode shapes")
    }

    pub fn encode_point(&self, y: &[f64], x: Option<&[f64]>) -> Vec<f64> {
        let mut input = self.norm.normalize_y(y);
        if let Some(xv) = x {
            input.extend(self.norm.normalize_x(xv));
        }
        self.encoder.forward_row(&input).expect("encode shapes")
    }

    /// Single-point mixture decode, original output space.
    pub fn decode_point(&self, z: &[f64], x: Option<&[f64]>) -> Vec<f64> {
        let zm = Matrix::row_vector(z);
        let xm = x.map(|v| Matrix::row_vector(v));
        self.decode_batch(&zm, xm.as_ref()).row(0).to_vec()
    }

    /// Fraction of uniform latent-ball samples whose decodes satisfy the
    /// feasibility check.
    pub fn latent_feasibility_rate(
        &self,
        n: usize,
        seed: u64,
        is_feasible: impl Fn(&[f64]) -> bool,
    ) -> f64 {
        let zs = sample_ball(self.latent_dim(), self.latent_radius(), n, seed);
        let mut zm = Matrix::zeros(n, self.latent_dim());
        for (i, z) in zs.iter().enumerate() {
            for (j, v) in z.iter().enumerate() {
                zm.set(i, j, *v);
            }
        }
        let decoded = self.decode_batch(&zm, None);
        let mut feas = 0usize;
        for i in 0..n {
            if is_feasible(decoded.row(i)) {
                feas += 1;
            }
        }
        feas as f64 / n as f64
    }
}
