//! The training losses. Each has a batched tape builder used by the
//! training loops and a standalone scalar entry point.
//!
//! The geometric loss differentiates through a backward pass: Jacobian rows
//! of the decoder are produced as tape nodes by seeded backward calls, so
//! the final backward over the composite loss reaches decoder weights
//! through them.

use crate::fab::model::{FabBound, FabModel};
use crate::fab::FabConfig;
use crate::geometry::LabeledPoint;
use crate::tape::{NodeId, Tape};
use crate::tensor::Matrix;

/// Discriminator outputs are clamped into [PROB_CLAMP, 1 - PROB_CLAMP]
/// before any log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy)]
pub struct Lambdas {
    pub recon: f64,
    pub hinge: f64,
    pub latent: f64,
    pub geom: f64,
}

impl From<&FabConfig> for Lambdas {
    fn from(cfg: &FabConfig) -> Lambdas {
        Lambdas {
            recon: cfg.lambda_recon,
            hinge: cfg.lambda_hinge,
            latent: cfg.lambda_latent,
            geom: cfg.lambda_geom,
        }
    }
}

pub(crate) fn to_matrix(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(rows)
}

/// Split a labeled batch into (Y, X?, labels-as-column).
pub(crate) fn batch_parts(points: &[LabeledPoint]) -> (Matrix, Option<Matrix>, Matrix) {
    let y: Vec<Vec<f64>> = points.iter().map(|p| p.y.clone()).collect();
    let labels = Matrix::from_vec(
        points.len(),
        1,
        points
            .iter()
            .map(|p| if p.label { 1.0 } else { 0.0 })
            .collect(),
    );
    let x = points[0].x.as_ref().map(|_| {
        Matrix::from_rows(
            &points
                .iter()
                .map(|p| p.x.clone().expect("all points conditional"))
                .collect::<Vec<_>>(),
        )
    });
    (to_matrix(&y), x, labels)
}

/// Per-sample squared reconstruction error ‖y - R(E(y,x))‖² as an M×1 node.
/// `z` is the shared encoding of the batch so hinge can reuse it.
pub(crate) fn recon_per_sample(
    tape: &mut Tape,
    model: &FabModel,
    bound: &FabBound,
    y_raw: NodeId,
    x_norm: Option<NodeId>,
    z: NodeId,
) -> NodeId {
    let decoded_norm = model.decode_bound(tape, bound, z, x_norm);
    let decoded = model.denormalize_y_tape(tape, decoded_norm);
    let diff = tape.sub(y_raw, decoded);
    let sq = tape.mul(diff, diff);
    tape.row_sums(sq)
}

/// Per-sample hinge c·relu(‖z‖ - r) + (1-c)·relu(r - ‖z‖) as an M×1 node.
pub(crate) fn hinge_per_sample(
    tape: &mut Tape,
    model: &FabModel,
    z: NodeId,
    labels: &Matrix,
) -> NodeId {
    let r = model.latent_radius();
    let norms = tape.row_norms(z);
    let over = tape.add_scalar(norms, -r);
    let feas_term = tape.relu(over);
    let neg = tape.scale(norms, -1.0);
    let under = tape.add_scalar(neg, r);
    let infeas_term = tape.relu(under);
    let c = tape.constant(labels.clone());
    let c_neg = tape.scale(c, -1.0);
    let c_comp = tape.add_scalar(c_neg, 1.0);
    let feas_side = tape.mul(c, feas_term);
    let infeas_side = tape.mul(c_comp, infeas_term);
    tape.add(feas_side, infeas_side)
}

/// -log D(decoded) per sample, M×1. `decoded_norm` is the decode of the
/// latent batch in normalized space, shared with the geometric loss.
pub(crate) fn latent_per_sample(
    tape: &mut Tape,
    model: &FabModel,
    bound: &FabBound,
    decoded_norm: NodeId,
    x_norm: Option<NodeId>,
) -> NodeId {
    let p = model.disc_bound(tape, bound, decoded_norm, x_norm);
    let pc = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let lp = tape.log(pc);
    tape.scale(lp, -1.0)
}

/// Binary cross-entropy of the discriminator per sample, M×1.
pub(crate) fn disc_per_sample(
    tape: &mut Tape,
    model: &FabModel,
    bound: &FabBound,
    y_norm: NodeId,
    x_norm: Option<NodeId>,
    labels: &Matrix,
) -> NodeId {
    let p = model.disc_bound(tape, bound, y_norm, x_norm);
    let pc = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let lp = tape.log(pc);
    let pneg = tape.scale(p, -1.0);
    let q = tape.add_scalar(pneg, 1.0);
    let qc = tape.clamp(q, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let lq = tape.log(qc);
    let c = tape.constant(labels.clone());
    let c_neg = tape.scale(c, -1.0);
    let c_comp = tape.add_scalar(c_neg, 1.0);
    let pos = tape.mul(c, lp);
    let negt = tape.mul(c_comp, lq);
    let sum = tape.add(pos, negt);
    tape.scale(sum, -1.0)
}

/// Population variance over the batch of log det(J_z J_zᵀ + εI), with J_z the
/// Jacobian of the decoder (to original output space) at each latent sample.
pub(crate) fn geom_loss_node(
    tape: &mut Tape,
    model: &FabModel,
    z: NodeId,
    decoded: NodeId,
    eps: f64,
) -> NodeId {
    let m = tape.value(z).rows();
    assert!(m >= 2, "geometric loss is a variance over at least 2 samples");
    let n = model.ambient_dim;

    // One seeded backward per output coordinate yields all per-sample
    // Jacobian rows at once: row b of the adjoint is ∂decoded[b,i]/∂z[b,:].
    let mut jac_rows = Vec::with_capacity(n);
    for i in 0..n {
        let col = tape.slice_cols(decoded, i, i + 1);
        let s = tape.sum_all(col);
        let grads = tape
            .backward(s, &[z])
            .expect("tape has nodes during geom loss");
        jac_rows.push(grads[0].expect("decoded output must depend on z"));
    }

    // Gram entries as M×1 columns, assembled row-major into M×n².
    let mut entries = vec![None; n * n];
    for i in 0..n {
        for j in i..n {
            let prod = tape.mul(jac_rows[i], jac_rows[j]);
            let d = tape.row_sums(prod);
            entries[i * n + j] = Some(d);
            entries[j * n + i] = Some(d);
        }
    }
    let mut gram = entries[0].unwrap();
    for e in entries.into_iter().skip(1) {
        gram = tape.concat_cols(gram, e.unwrap());
    }
    let mut eps_diag = Matrix::zeros(m, n * n);
    for r in 0..m {
        for i in 0..n {
            eps_diag.set(r, i * n + i, eps);
        }
    }
    let eps_c = tape.constant(eps_diag);
    let regularized = tape.add(gram, eps_c);
    let logdets = tape.batch_logdet_spd(regularized, n);

    let mean = tape.mean_all(logdets);
    let mean_b = tape.broadcast_scalar(mean, m, 1);
    let dev = tape.sub(logdets, mean_b);
    let sq = tape.mul(dev, dev);
    tape.mean_all(sq)
}

/// All pieces of the composite structuring loss for one batch.
pub(crate) struct StrucBuild {
    pub total: NodeId,
    pub recon_mean: f64,
    pub hinge_mean: f64,
    pub latent_mean: f64,
    pub geom: f64,
}

/// Composite loss λ_recon·mean(recon) + λ_hinge·mean(hinge)
/// + λ_latent·mean(latent) + λ_geom·geom. Terms with zero weight are not
/// built, so zeroing weights degenerates exactly to the remaining terms.
#[allow(clippy::too_many_arguments)]
pub(crate) fn build_struc(
    tape: &mut Tape,
    model: &FabModel,
    bound: &FabBound,
    y_raw: NodeId,
    x_norm: Option<NodeId>,
    labels: &Matrix,
    z_ball: NodeId,
    zx_norm: Option<NodeId>,
    lambdas: Lambdas,
    geom_eps: f64,
) -> StrucBuild {
    let mut total: Option<NodeId> = None;
    let mut add_term = |tape: &mut Tape, total: &mut Option<NodeId>, term: NodeId, w: f64| {
        let scaled = tape.scale(term, w);
        *total = Some(match *total {
            None => scaled,
            Some(t) => tape.add(t, scaled),
        });
    };

    let mut recon_mean = 0.0;
    let mut hinge_mean = 0.0;
    let mut latent_mean = 0.0;
    let mut geom_val = 0.0;

    let need_encode = lambdas.recon > 0.0 || lambdas.hinge > 0.0;
    if need_encode {
        let y_norm = model.normalize_y_tape(tape, y_raw);
        let z = model.encode_bound(tape, bound, y_norm, x_norm);
        if lambdas.recon > 0.0 {
            let per = recon_per_sample(tape, model, bound, y_raw, x_norm, z);
            let mean = tape.mean_all(per);
            recon_mean = tape.value(mean).scalar_value();
            add_term(tape, &mut total, mean, lambdas.recon);
        }
        if lambdas.hinge > 0.0 {
            let per = hinge_per_sample(tape, model, z, labels);
            let mean = tape.mean_all(per);
            hinge_mean = tape.value(mean).scalar_value();
            add_term(tape, &mut total, mean, lambdas.hinge);
        }
    }

    if lambdas.latent > 0.0 || lambdas.geom > 0.0 {
        let decoded_norm = model.decode_bound(tape, bound, z_ball, zx_norm);
        if lambdas.latent > 0.0 {
            let per = latent_per_sample(tape, model, bound, decoded_norm, zx_norm);
            let mean = tape.mean_all(per);
            latent_mean = tape.value(mean).scalar_value();
            add_term(tape, &mut total, mean, lambdas.latent);
        }
        if lambdas.geom > 0.0 {
            let decoded = model.denormalize_y_tape(tape, decoded_norm);
            let g = geom_loss_node(tape, model, z_ball, decoded, geom_eps);
            geom_val = tape.value(g).scalar_value();
            add_term(tape, &mut total, g, lambdas.geom);
        }
    }

    let total = total.unwrap_or_else(|| tape.scalar(0.0));
    StrucBuild {
        total,
        recon_mean,
        hinge_mean,
        latent_mean,
        geom: geom_val,
    }
}

// ---- standalone scalar entry points ---------------------------------------

/// ‖y - R(E(y,x))‖² for a single point.
pub fn loss_recon(model: &FabModel, y: &[f64], x: Option<&[f64]>) -> f64 {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let y_id = tape.leaf(Matrix::row_vector(y));
    let x_norm = bind_x(&mut tape, model, x);
    let y_norm = model.normalize_y_tape(&mut tape, y_id);
    let z = model.encode_bound(&mut tape, &bound, y_norm, x_norm);
    let per = recon_per_sample(&mut tape, model, &bound, y_id, x_norm, z);
    tape.value(per).scalar_value()
}

/// c·relu(‖E(y,x)‖ - r) + (1-c)·relu(r - ‖E(y,x)‖) for a single point.
pub fn loss_hinge(model: &FabModel, y: &[f64], x: Option<&[f64]>, c: bool) -> f64 {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let y_id = tape.leaf(Matrix::row_vector(y));
    let x_norm = bind_x(&mut tape, model, x);
    let y_norm = model.normalize_y_tape(&mut tape, y_id);
    let z = model.encode_bound(&mut tape, &bound, y_norm, x_norm);
    let labels = Matrix::scalar(if c { 1.0 } else { 0.0 });
    let per = hinge_per_sample(&mut tape, model, z, &labels);
    tape.value(per).scalar_value()
}

/// -log D(R(z)) for a single latent sample, clamped away from log(0).
pub fn loss_latent(model: &FabModel, z: &[f64], x: Option<&[f64]>) -> f64 {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let z_id = tape.leaf(Matrix::row_vector(z));
    let x_norm = bind_x(&mut tape, model, x);
    let decoded_norm = model.decode_bound(&mut tape, &bound, z_id, x_norm);
    let per = latent_per_sample(&mut tape, model, &bound, decoded_norm, x_norm);
    tape.value(per).scalar_value()
}

/// Binary cross-entropy of the discriminator on one labeled point.
pub fn loss_disc(model: &FabModel, y: &[f64], x: Option<&[f64]>, c: bool) -> f64 {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let y_id = tape.leaf(Matrix::row_vector(y));
    let x_norm = bind_x(&mut tape, model, x);
    let y_norm = model.normalize_y_tape(&mut tape, y_id);
    let labels = Matrix::scalar(if c { 1.0 } else { 0.0 });
    let per = disc_per_sample(&mut tape, model, &bound, y_norm, x_norm, &labels);
    tape.value(per).scalar_value()
}

/// Variance of log det(J Jᵀ + εI) over a latent batch.
pub fn loss_geom(model: &FabModel, z_batch: &[Vec<f64>], xs: Option<&[Vec<f64>]>, eps: f64) -> f64 {
    assert!(z_batch.len() >= 2, "geometric loss needs a batch of >= 2");
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let z = tape.leaf(to_matrix(z_batch));
    let x_norm = xs.map(|v| {
        let x = tape.leaf(to_matrix(v));
        model.normalize_x_tape(&mut tape, x)
    });
    let decoded_norm = model.decode_bound(&mut tape, &bound, z, x_norm);
    let decoded = model.denormalize_y_tape(&mut tape, decoded_norm);
    let g = geom_loss_node(&mut tape, model, z, decoded, eps);
    tape.value(g).scalar_value()
}

/// The weighted composite loss on explicit batches.
pub fn loss_struc(
    model: &FabModel,
    disc_batch: &[LabeledPoint],
    z_batch: &[Vec<f64>],
    lambdas: Lambdas,
    geom_eps: f64,
) -> f64 {
    assert!(!disc_batch.is_empty() && !z_batch.is_empty());
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let (y, x, labels) = batch_parts(disc_batch);
    let y_id = tape.leaf(y);
    let x_norm = x.map(|xm| {
        let id = tape.leaf(xm);
        model.normalize_x_tape(&mut tape, id)
    });
    let z = tape.leaf(to_matrix(z_batch));
    // Conditional decodes reuse the batch's parameters, cycled to the z count.
    let zx_norm = if model.is_conditional() {
        let xs: Vec<Vec<f64>> = (0..z_batch.len())
            .map(|i| disc_batch[i % disc_batch.len()].x.clone().unwrap())
            .collect();
        let id = tape.leaf(to_matrix(&xs));
        Some(model.normalize_x_tape(&mut tape, id))
    } else {
        None
    };
    let build = build_struc(
        &mut tape, model, &bound, y_id, x_norm, &labels, z, zx_norm, lambdas, geom_eps,
    );
    tape.value(build.total).scalar_value()
}

/// Mixture-combined decode of a single latent point (original space).
pub fn mixture_decode(model: &FabModel, z: &[f64], x: Option<&[f64]>) -> Vec<f64> {
    model.decode_point(z, x)
}

fn bind_x(tape: &mut Tape, model: &FabModel, x: Option<&[f64]>) -> Option<NodeId> {
    x.map(|xv| {
        let id = tape.leaf(Matrix::row_vector(xv));
        model.normalize_x_tape(tape, id)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fab::model::sample_ball;
    use crate::findiff::{central_difference, flat_param_count, rel_err};
    use crate::nn::Activation;
    use crate::tensor::logdet_spd;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(seed: u64) -> FabConfig {
        FabConfig {
            hidden_dim: 6,
            encoder_depth: 2,
            decoder_depth: 2,
            disc_depth: 2,
            mixture_depth: 1,
            seed,
            ..FabConfig::default()
        }
    }

    /// Identity autoencoder: depth-0 nets are single linear layers; set them
    /// to the identity.
    fn identity_model() -> FabModel {
        let cfg = FabConfig {
            encoder_depth: 0,
            decoder_depth: 0,
            disc_depth: 1,
            hidden_dim: 4,
            seed: 1,
            ..FabConfig::default()
        };
        let mut model = FabModel::new(2, 0, cfg);
        model.encoder.layers[0].w = Matrix::identity(2);
        model.encoder.layers[0].b = Matrix::zeros(1, 2);
        model.decoders[0].layers[0].w = Matrix::identity(2);
        model.decoders[0].layers[0].b = Matrix::zeros(1, 2);
        model
    }

    #[test]
    fn recon_of_identity_autoencoder_is_zero() {
        let model = identity_model();
        assert!(loss_recon(&model, &[0.4, -0.9], None).abs() < 1e-24);
    }

    #[test]
    fn recon_of_zero_decoder_is_squared_norm() {
        let mut model = identity_model();
        model.decoders[0].layers[0].w = Matrix::zeros(2, 2);
        let l = loss_recon(&model, &[1.0, 0.0], None);
        assert!((l - 1.0).abs() < 1e-15);
    }

    #[test]
    fn recon_matches_independent_forward_composition() {
        let model = FabModel::new(2, 0, tiny_config(3));
        let y = [0.7, -0.3];
        let z = model.encode_point(&y, None);
        let decoded = model.decode_point(&z, None);
        let want: f64 = y
            .iter()
            .zip(&decoded)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let got = loss_recon(&model, &y, None);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn hinge_boundary_identities() {
        // Identity encoder: z = y, so the encoding norm is directly chosen.
        let model = identity_model();
        let r = model.latent_radius();
        // Feasible point exactly on the sphere: zero.
        assert_eq!(loss_hinge(&model, &[r, 0.0], None, true), 0.0);
        // Feasible, norm r + 0.2.
        let l = loss_hinge(&model, &[r + 0.2, 0.0], None, true);
        assert!((l - 0.2).abs() < 1e-12);
        // Infeasible, norm r - 0.1.
        let l = loss_hinge(&model, &[r - 0.1, 0.0], None, false);
        assert!((l - 0.1).abs() < 1e-12);
        // Feasible inside: zero. Infeasible outside: zero.
        assert_eq!(loss_hinge(&model, &[0.1, 0.1], None, true), 0.0);
        assert_eq!(loss_hinge(&model, &[2.0, 0.0], None, false), 0.0);
    }

    #[test]
    fn latent_loss_clamps_and_matches_log() {
        let mut model = identity_model();
        // Discriminator with one hidden layer; zero everything so the output
        // logit is 0 -> sigmoid 0.5 -> loss = ln 2.
        for layer in &mut model.disc.layers {
            layer.w = Matrix::zeros(layer.w.rows(), layer.w.cols());
            layer.b = Matrix::zeros(1, layer.b.cols());
        }
        let l = loss_latent(&model, &[0.1, 0.0], None);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        // Huge output bias -> probability clamped at 1 - 1e-7.
        let last = model.disc.layers.len() - 1;
        model.disc.layers[last].b = Matrix::row_vector(&[50.0]);
        let l = loss_latent(&model, &[0.1, 0.0], None);
        assert!((l - -(1.0f64 - PROB_CLAMP).ln()).abs() < 1e-12);
        assert!(l < 1.1e-7);
    }

    #[test]
    fn disc_loss_is_bce_symmetric() {
        let model = FabModel::new(2, 0, tiny_config(5));
        let mut flipped = model.clone();
        // sigma(-t) = 1 - sigma(t): negate the last layer.
        let last = flipped.disc.layers.len() - 1;
        flipped.disc.layers[last].w = flipped.disc.layers[last].w.map(|v| -v);
        flipped.disc.layers[last].b = flipped.disc.layers[last].b.map(|v| -v);
        let y = [0.3, 0.8];
        let a = loss_disc(&model, &y, None, true);
        let b = loss_disc(&flipped, &y, None, false);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn geom_loss_of_affine_decoder_is_zero() {
        let cfg = FabConfig {
            encoder_depth: 0,
            decoder_depth: 0,
            disc_depth: 1,
            seed: 9,
            ..FabConfig::default()
        };
        let model = FabModel::new(2, 0, cfg);
        let z_batch = sample_ball(2, 0.5, 16, 4);
        let g = loss_geom(&model, &z_batch, None, 1e-6);
        assert!(g.abs() < 1e-9, "affine decoder variance {g}");
    }

    #[test]
    fn geom_loss_two_point_hand_computation() {
        // Relu decoder whose Jacobian is I on the positive quadrant and e*I
        // on the negative quadrant.
        let e = std::f64::consts::E;
        let cfg = FabConfig {
            encoder_depth: 0,
            decoder_depth: 1,
            decoder_width: Some(4),
            disc_depth: 1,
            seed: 2,
            ..FabConfig::default()
        };
        let mut model = FabModel::new(2, 0, cfg);
        model.decoders[0].layers[0].w =
            Matrix::from_rows(&[vec![1.0, 0.0, -1.0, 0.0], vec![0.0, 1.0, 0.0, -1.0]]);
        model.decoders[0].layers[0].b = Matrix::zeros(1, 4);
        model.decoders[0].layers[1].w =
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-e, 0.0], vec![0.0, -e]]);
        model.decoders[0].layers[1].b = Matrix::zeros(1, 2);
        let eps = 1e-6;
        let z_batch = vec![vec![0.3, 0.4], vec![-0.2, -0.35]];
        let got = loss_geom(&model, &z_batch, None, eps);
        // Oracle: direct two-point population variance of the log-dets.
        let ld1 = logdet_spd(&[1.0 + eps, 0.0, 0.0, 1.0 + eps], 2).unwrap();
        let ld2 = logdet_spd(&[e * e + eps, 0.0, 0.0, e * e + eps], 2).unwrap();
        let mean = 0.5 * (ld1 + ld2);
        let want = 0.5 * ((ld1 - mean).powi(2) + (ld2 - mean).powi(2));
        assert!((got - want).abs() < 1e-10, "got {got}, want {want}");
    }

    #[test]
    fn mixture_decode_cases() {
        // rho = 1: identical to the single decoder.
        let model = FabModel::new(2, 0, tiny_config(7));
        let z = [0.2, -0.1];
        let via_mix = mixture_decode(&model, &z, None);
        let direct = {
            let out = model.decoders[0].forward_row(&z).unwrap();
            model.norm.denormalize_y(&out)
        };
        for (a, b) in via_mix.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-14);
        }

        // rho = 2, zeroed mixture net -> logits (0,0) -> arithmetic mean.
        let cfg = FabConfig {
            num_decoders: 2,
            ..tiny_config(8)
        };
        let mut model = FabModel::new(2, 0, cfg);
        let mix = model.mixture.as_mut().unwrap();
        for layer in &mut mix.layers {
            layer.w = Matrix::zeros(layer.w.rows(), layer.w.cols());
            layer.b = Matrix::zeros(1, layer.b.cols());
        }
        let a = model.decoders[0].forward_row(&z).unwrap();
        let b = model.decoders[1].forward_row(&z).unwrap();
        let got = mixture_decode(&model, &z, None);
        for j in 0..2 {
            let want = 0.5 * (a[j] + b[j]);
            assert!((got[j] - want).abs() < 1e-14);
        }

        // rho = 3, saturated logits (10, -10, -10) -> decoder 1 wins.
        let cfg = FabConfig {
            num_decoders: 3,
            ..tiny_config(9)
        };
        let mut model = FabModel::new(2, 0, cfg);
        let mix = model.mixture.as_mut().unwrap();
        let last = mix.layers.len() - 1;
        for layer in &mut mix.layers {
            layer.w = Matrix::zeros(layer.w.rows(), layer.w.cols());
            layer.b = Matrix::zeros(1, layer.b.cols());
        }
        mix.layers[last].b = Matrix::row_vector(&[10.0, -10.0, -10.0]);
        let got = mixture_decode(&model, &z, None);
        let d1 = model.decoders[0].forward_row(&z).unwrap();
        for j in 0..2 {
            assert!((got[j] - d1[j]).abs() < 1e-3);
        }
        let w = model.mixture_weights(&z, None);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn struc_loss_weight_projections() {
        let model = FabModel::new(2, 0, tiny_config(10));
        let set = crate::geometry::ConstraintSet::new(crate::geometry::Family::TwoMoons);
        let batch = set.sample_labeled(8, 0.5, 3).unwrap();
        let z_batch = sample_ball(2, 0.5, 8, 5);
        let zero = Lambdas {
            recon: 0.0,
            hinge: 0.0,
            latent: 0.0,
            geom: 0.0,
        };
        assert_eq!(loss_struc(&model, &batch, &z_batch, zero, 1e-6), 0.0);

        let only_recon = Lambdas {
            recon: 1.0,
            ..zero
        };
        let got = loss_struc(&model, &batch, &z_batch, only_recon, 1e-6);
        let want = batch
            .iter()
            .map(|p| loss_recon(&model, &p.y, None))
            .sum::<f64>()
            / batch.len() as f64;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn struc_loss_matches_independently_accumulated_sum() {
        let model = FabModel::new(2, 0, tiny_config(11));
        let set = crate::geometry::ConstraintSet::new(crate::geometry::Family::StarShaped);
        let batch = set.sample_labeled(6, 0.5, 7).unwrap();
        let z_batch = sample_ball(2, 0.5, 6, 9);
        let lambdas = Lambdas {
            recon: 1.0,
            hinge: 0.1,
            latent: 1.0,
            geom: 0.1,
        };
        let got = loss_struc(&model, &batch, &z_batch, lambdas, 1e-6);
        let recon = batch
            .iter()
            .map(|p| loss_recon(&model, &p.y, None))
            .sum::<f64>()
            / batch.len() as f64;
        let hinge = batch
            .iter()
            .map(|p| loss_hinge(&model, &p.y, None, p.label))
            .sum::<f64>()
            / batch.len() as f64;
        let latent = z_batch
            .iter()
            .map(|z| loss_latent(&model, z, None))
            .sum::<f64>()
            / z_batch.len() as f64;
        let geom = loss_geom(&model, &z_batch, None, 1e-6);
        let want =
            lambdas.recon * recon + lambdas.hinge * hinge + lambdas.latent * latent
                + lambdas.geom * geom;
        assert!((got - want).abs() < 1e-10, "got {got}, want {want}");
    }

    #[test]
    fn relu_decoder_jacobian_equals_active_path_product() {
        let cfg = tiny_config(13);
        let model = FabModel::new(2, 0, cfg);
        let z = [0.21, -0.37];
        let dec = &model.decoders[0];
        let jac = crate::tape::jacobian(
            |tape, zid| {
                let bound = model.bind(tape);
                model.decode_bound(tape, &bound, zid, None)
            },
            &z,
        )
        .unwrap();
        // Explicit mask product: J = W_L D_{L-1} ... D_1 W_1 (row convention
        // transposed since our layers right-multiply).
        let mut acc = Matrix::identity(2);
        let mut h = Matrix::row_vector(&z);
        for (li, layer) in dec.layers.iter().enumerate() {
            acc = acc.matmul(&layer.w);
            let mut pre = h.matmul(&layer.w);
            for j in 0..pre.cols() {
                pre.set(0, j, pre.get(0, j) + layer.b.get(0, j));
            }
            if li + 1 < dec.layers.len() {
                // Apply the relu mask to both the product and the activations.
                let mut masked = Matrix::zeros(acc.rows(), acc.cols());
                for r in 0..acc.rows() {
                    for c in 0..acc.cols() {
                        if pre.get(0, c) > 0.0 {
                            masked.set(r, c, acc.get(r, c));
                        }
                    }
                }
                acc = masked;
                h = pre.map(|v| if v > 0.0 { v } else { 0.0 });
            }
        }
        // acc is input_dim x output_dim; the jacobian is its transpose.
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    rel_err(jac.get(i, j), acc.get(j, i)) < 1e-10,
                    "mismatch at ({i},{j})"
                );
            }
        }
    }

    /// Tape gradient of a loss w.r.t. all autoencoder + discriminator
    /// parameters, flattened in `all_params` order.
    fn tape_gradient(
        model: &FabModel,
        batch: &[LabeledPoint],
        z_batch: &[Vec<f64>],
        lambdas: Lambdas,
        include_disc: bool,
    ) -> Vec<f64> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let (y, x, labels) = batch_parts(batch);
        let y_id = tape.leaf(y.clone());
        let x_norm = x.map(|xm| {
            let id = tape.leaf(xm);
            model.normalize_x_tape(&mut tape, id)
        });
        let z_id = tape.leaf(to_matrix(z_batch));
        let build = build_struc(
            &mut tape, model, &bound, y_id, x_norm, &labels, z_id, None, lambdas, 1e-6,
        );
        let loss = if include_disc {
            let y_norm = model.normalize_y_tape(&mut tape, y_id);
            let per = disc_per_sample(&mut tape, model, &bound, y_norm, None, &labels);
            let disc_mean = tape.mean_all(per);
            tape.add(build.total, disc_mean)
        } else {
            build.total
        };
        let mut targets = bound.ae_targets();
        targets.extend(bound.disc_targets());
        let grads = tape.backward(loss, &targets).unwrap();
        tape.ensure_finite().unwrap();
        let mut flat = Vec::new();
        for (t, g) in targets.iter().zip(grads) {
            match g {
                Some(id) => flat.extend_from_slice(tape.value(id).data()),
                None => flat.extend(std::iter::repeat(0.0).take(tape.value(*t).len())),
            }
        }
        flat
    }

    /// Move every parameter (biases included) off its initialization so the
    /// check runs at a generic point: zero-initialized biases put dead-row
    /// pre-activations exactly on the relu kink, where the subgradient and a
    /// central difference legitimately disagree.
    fn jitter_params(model: &mut FabModel, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in model.all_params_mut() {
            for v in p.data_mut() {
                *v += rng.random_range(-scale..scale);
            }
        }
    }

    fn check_loss_gradients(lambdas: Lambdas, include_disc: bool, seed: u64, probes: usize) {
        let mut model = FabModel::new(2, 0, tiny_config(seed));
        jitter_params(&mut model, seed ^ 0xA5A5, 0.05);
        let set = crate::geometry::ConstraintSet::new(crate::geometry::Family::BlobWithBite);
        let batch = set.sample_labeled(4, 0.5, seed).unwrap();
        let z_batch = sample_ball(2, 0.5, 4, seed + 1);
        let analytic = tape_gradient(&model, &batch, &z_batch, lambdas, include_disc);

        fn params_of(m: &mut FabModel) -> Vec<&mut Matrix> {
            m.all_params_mut()
        }
        let total = flat_param_count(&model.all_params());
        assert_eq!(analytic.len(), total);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let batch2 = batch.clone();
        let z2 = z_batch.clone();
        for _ in 0..probes {
            let idx = rng.random_range(0..total);
            let fd = central_difference(&mut model, params_of, idx, 1e-5, |m| {
                let mut v = loss_struc(m, &batch2, &z2, lambdas, 1e-6);
                if include_disc {
                    v += batch2
                        .iter()
                        .map(|p| loss_disc(m, &p.y, None, p.label))
                        .sum::<f64>()
                        / batch2.len() as f64;
                }
                v
            });
            let err = rel_err(analytic[idx], fd);
            assert!(
                err < 1e-3,
                "gradient mismatch at {idx}: tape {} vs fd {} (rel {err})",
                analytic[idx],
                fd
            );
        }
    }

    #[test]
    fn recon_gradients_match_finite_differences() {
        check_loss_gradients(
            Lambdas {
                recon: 1.0,
                hinge: 0.0,
                latent: 0.0,
                geom: 0.0,
            },
            false,
            21,
            40,
        );
    }

    #[test]
    fn hinge_gradients_match_finite_differences() {
        check_loss_gradients(
            Lambdas {
                recon: 0.0,
                hinge: 1.0,
                latent: 0.0,
                geom: 0.0,
            },
            false,
            22,
            40,
        );
    }

    #[test]
    fn latent_gradients_match_finite_differences() {
        check_loss_gradients(
            Lambdas {
                recon: 0.0,
                hinge: 0.0,
                latent: 1.0,
                geom: 0.0,
            },
            false,
            23,
            40,
        );
    }

    #[test]
    fn geom_gradients_match_finite_differences() {
        check_loss_gradients(
            Lambdas {
                recon: 0.0,
                hinge: 0.0,
                latent: 0.0,
                geom: 1.0,
            },
            false,
            24,
            40,
        );
    }

    #[test]
    fn disc_gradients_match_finite_differences() {
        check_loss_gradients(
            Lambdas {
                recon: 0.0,
                hinge: 0.0,
                latent: 0.0,
                geom: 0.0,
            },
            true,
            25,
            40,
        );
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        check_loss_gradients(
            Lambdas {
                recon: 1.0,
                hinge: 0.1,
                latent: 1.0,
                geom: 0.1,
            },
            false,
            26,
            40,
        );
    }

    #[test]
    fn geom_gradients_through_mixture_match_finite_differences() {
        let cfg = FabConfig {
            num_decoders: 2,
            decoder_width: Some(4),
            ..tiny_config(27)
        };
        let mut model = FabModel::new(2, 0, cfg);
        jitter_params(&mut model, 0x5A5A, 0.05);
        let z_batch = sample_ball(2, 0.5, 3, 30);
        // Analytic gradient of loss_geom alone w.r.t. decoder+mixture params.
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let z_id = tape.leaf(to_matrix(&z_batch));
        let decoded_norm = model.decode_bound(&mut tape, &bound, z_id, None);
        let decoded = model.denormalize_y_tape(&mut tape, decoded_norm);
        let g = geom_loss_node(&mut tape, &model, z_id, decoded, 1e-6);
        let targets = bound.ae_targets();
        let grads = tape.backward(g, &targets).unwrap();
        tape.ensure_finite().unwrap();
        let mut flat = Vec::new();
        for (t, gid) in targets.iter().zip(grads) {
            match gid {
                Some(id) => flat.extend_from_slice(tape.value(id).data()),
                None => flat.extend(std::iter::repeat(0.0).take(tape.value(*t).len())),
            }
        }
        fn params_of(m: &mut FabModel) -> Vec<&mut Matrix> {
            m.ae_params_mut()
        }
        let total = flat.len();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let z2 = z_batch.clone();
        for _ in 0..30 {
            let idx = rng.random_range(0..total);
            let fd = central_difference(&mut model, params_of, idx, 1e-5, |m| {
                loss_geom(m, &z2, None, 1e-6)
            });
            let err = rel_err(flat[idx], fd);
            assert!(err < 1e-3, "mixture geom grad at {idx}: {} vs {fd}", flat[idx]);
        }
    }

    #[test]
    fn conditional_losses_run_and_reconstruct() {
        let disk = crate::geometry::ShiftedDisk::new(0.8);
        let pts = disk.sample_labeled(16, 0.5, 3);
        let cfg = tiny_config(33);
        let model = FabModel::new(2, 2, cfg);
        let p = &pts[0];
        let r = loss_recon(&model, &p.y, p.x.as_deref());
        assert!(r.is_finite());
        let h = loss_hinge(&model, &p.y, p.x.as_deref(), p.label);
        assert!(h.is_finite());
        let l = loss_latent(&model, &[0.1, -0.2], p.x.as_deref());
        assert!(l.is_finite() && l > 0.0);
    }

    #[test]
    fn activation_roundtrip_names() {
        for a in [
            Activation::Linear,
            Activation::Relu,
            Activation::Sigmoid,
            Activation::Tanh,
        ] {
            assert_eq!(Activation::from_name(a.name()), Some(a));
        }
    }
}

