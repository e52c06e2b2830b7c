//! Two-phase training: reconstruction, then adversarial latent structuring
//! with alternating discriminator/autoencoder updates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::adam::{AdamConfig, AdamState};
use crate::fab::losses::{batch_parts, build_struc, disc_per_sample, recon_per_sample, Lambdas};
use crate::fab::model::{sample_ball_with, FabModel, Normalization};
use crate::fab::FabConfig;
use crate::geometry::{ConstraintSet, LabeledPoint, ShiftedDisk};
use crate::tape::Tape;
use crate::tensor::{Matrix, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training dataset")]
    EmptyDataset,
    #[error("phase-1 dataset must contain only feasible points")]
    InfeasibleInPhase1,
    #[error("phase-2 dataset must contain both feasible and infeasible labels")]
    MissingLabelClass,
    #[error("non-finite loss in phase {phase} (epoch {epoch}, step {step}): {source}")]
    NonFinite {
        phase: u8,
        epoch: usize,
        step: usize,
        source: TensorError,
    },
}

/// Membership check used for validation metrics during training.
pub trait FeasibilityCheck: Sync {
    fn is_feasible(&self, y: &[f64], x: Option<&[f64]>) -> bool;
}

impl FeasibilityCheck for ConstraintSet {
    fn is_feasible(&self, y: &[f64], _x: Option<&[f64]>) -> bool {
        self.contains(y)
    }
}

impl FeasibilityCheck for ShiftedDisk {
    fn is_feasible(&self, y: &[f64], x: Option<&[f64]>) -> bool {
        self.membership(x.expect("conditional membership needs x"), y)
    }
}

/// Per-epoch traces; all trace vectors have one entry per epoch of the phase
/// that produced the report (unused losses stay at zero).
#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainReport {
    pub phase: u8,
    pub recon: Vec<f64>,
    pub hinge: Vec<f64>,
    pub latent: Vec<f64>,
    pub geom: Vec<f64>,
    pub disc: Vec<f64>,
    pub val_recon: Vec<f64>,
    pub val_latent_feas: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub disc_updates: u64,
    pub ae_updates: u64,
    pub disc_health_warning: bool,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("epoch,recon,hinge,latent,geom,disc,val_recon,val_latent_feas\n");
        for e in 0..self.recon.len() {
            let get = |v: &Vec<f64>| v.get(e).copied().unwrap_or(0.0);
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                e,
                get(&self.recon),
                get(&self.hinge),
                get(&self.latent),
                get(&self.geom),
                get(&self.disc),
                get(&self.val_recon),
                get(&self.val_latent_feas),
            ));
        }
        out
    }
}

fn shuffle(idx: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
}

fn split_indices(n: usize, val_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(&mut idx, rng);
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

fn gather(data: &[LabeledPoint], idx: &[usize]) -> Vec<LabeledPoint> {
    idx.iter().map(|&i| data[i].clone()).collect()
}

/// Validation reconstruction MSE in the original output space.
fn validation_recon(model: &FabModel, points: &[LabeledPoint]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let (y, x, _) = batch_parts(points);
    let z = model.encode_batch(&y, x.as_ref());
    let decoded = model.decode_batch(&z, x.as_ref());
    let mut total = 0.0;
    for i in 0..y.rows() {
        for j in 0..y.cols() {
            let d = y.get(i, j) - decoded.get(i, j);
            total += d * d;
        }
    }
    total / y.rows() as f64
}

fn validation_latent_feasibility(
    model: &FabModel,
    val: &[LabeledPoint],
    n: usize,
    seed: u64,
    check: &dyn FeasibilityCheck,
) -> f64 {
    if model.is_conditional() {
        // Pair each latent draw with a validation parameter vector.
        if val.is_empty() {
            return 0.0;
        }
        let zs = crate::fab::model::sample_ball(model.latent_dim(), model.latent_radius(), n, seed);
        let mut feas = 0usize;
        for (i, z) in zs.iter().enumerate() {
            let x = val[i % val.len()].x.as_deref();
            let y = model.decode_point(z, x);
            if check.is_feasible(&y, x) {
                feas += 1;
            }
        }
        feas as f64 / n as f64
    } else {
        model.latent_feasibility_rate(n, seed, |y| check.is_feasible(y, None))
    }
}

/// Phase 1: reconstruction-only autoencoder training on feasible points.
/// Normalization statistics are fitted on the dataset and frozen; the
/// discriminator and mixture net are initialized but not updated here.
pub fn train_phase1(
    cfg: &FabConfig,
    ambient_dim: usize,
    data: &[LabeledPoint],
) -> Result<(FabModel, TrainReport), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if data.iter().any(|p| !p.label) {
        return Err(TrainError::InfeasibleInPhase1);
    }
    let x_dim = data[0].x.as_ref().map_or(0, |v| v.len());
    let mut model = FabModel::new(ambient_dim, x_dim, cfg.clone());

    let ys: Vec<Vec<f64>> = data.iter().map(|p| p.y.clone()).collect();
    let (y_mean, y_std) = Normalization::fit(&ys);
    model.norm.y_mean = y_mean;
    model.norm.y_std = y_std;
    if x_dim > 0 {
        let xs: Vec<Vec<f64>> = data.iter().map(|p| p.x.clone().unwrap()).collect();
        let (x_mean, x_std) = Normalization::fit(&xs);
        model.norm.x_mean = x_mean;
        model.norm.x_std = x_std;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(crate::subseed(cfg.seed, "phase1"));
    let (mut train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction, &mut rng);
    let val_points = gather(data, &val_idx);

    let mut adam = AdamState::for_params(&model.ae_params(), AdamConfig::with_lr(cfg.phase1_lr));
    let mut report = TrainReport {
        phase: 1,
        ..TrainReport::default()
    };

    for epoch in 0..cfg.phase1_epochs {
        shuffle(&mut train_idx, &mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (step, chunk) in train_idx.chunks(cfg.phase1_batch).enumerate() {
            let batch = gather(data, chunk);
            let (y, x, _) = batch_parts(&batch);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let y_id = tape.leaf(y);
            let x_norm = x.map(|xm| {
                let id = tape.leaf(xm);
                model.normalize_x_tape(&mut tape, id)
            });
            let y_norm = model.normalize_y_tape(&mut tape, y_id);
            let z = model.encode_bound(&mut tape, &bound, y_norm, x_norm);
            let per = recon_per_sample(&mut tape, &model, &bound, y_id, x_norm, z);
            let loss = tape.mean_all(per);
            let targets = bound.ae_targets();
            let grads = tape.backward(loss, &targets).map_err(|e| nonfinite(1, epoch, step, e))?;
            tape.ensure_finite()
                .map_err(|e| nonfinite(1, epoch, step, e))?;
            let grad_mats: Vec<Option<&Matrix>> =
                grads.iter().map(|g| g.map(|id| tape.value(id))).collect();
            adam.step(&mut model.ae_params_mut(), &grad_mats);
            epoch_loss += tape.value(loss).scalar_value() * batch.len() as f64;
            seen += batch.len();
            report.ae_updates += 1;
        }
        report.recon.push(epoch_loss / seen.max(1) as f64);
        report.hinge.push(0.0);
        report.latent.push(0.0);
        report.geom.push(0.0);
        report.disc.push(0.0);
        report.val_recon.push(validation_recon(&model, &val_points));
        report.val_latent_feas.push(0.0);
        if epoch % 50 == 0 || epoch + 1 == cfg.phase1_epochs {
            log::info!(
                "phase1 epoch {epoch}: train recon {:.3e}, val recon {:.3e}",
                report.recon[epoch],
                report.val_recon[epoch]
            );
        }
    }
    Ok((model, report))
}

/// Phase 2: alternating discriminator and autoencoder updates per batch.
/// Keeps the checkpoint with the best validation latent-feasibility rate.
pub fn train_phase2(
    cfg: &FabConfig,
    mut model: FabModel,
    data: &[LabeledPoint],
    check: &dyn FeasibilityCheck,
) -> Result<(FabModel, TrainReport), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let has_feas = data.iter().any(|p| p.label);
    let has_infeas = data.iter().any(|p| !p.label);
    if !has_feas || !has_infeas {
        return Err(TrainError::MissingLabelClass);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(crate::subseed(cfg.seed, "phase2"));
    let mut ball_rng = ChaCha8Rng::seed_from_u64(crate::subseed(cfg.seed, "phase2/ball"));
    let (mut train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction, &mut rng);
    let val_points = gather(data, &val_idx);
    let val_feas: Vec<LabeledPoint> = val_points.iter().filter(|p| p.label).cloned().collect();

    // Linearly separable health-check set: feasible points vs the same
    // points translated far outside the sampling box.
    let health_pos: Vec<LabeledPoint> = val_feas.iter().take(200).cloned().collect();
    let health_shift = 15.0;
    let health_neg: Vec<LabeledPoint> = health_pos
        .iter()
        .map(|p| {
            let mut q = p.clone();
            q.y[0] += health_shift;
            q.label = false;
            q
        })
        .collect();

    let lambdas = Lambdas::from(cfg);
    let mut disc_adam = AdamState::for_params(
        &model.disc.params(),
        AdamConfig::with_lr(cfg.phase2_lr_disc),
    );
    let mut ae_adam =
        AdamState::for_params(&model.ae_params(), AdamConfig::with_lr(cfg.phase2_lr_ae));

    let mut report = TrainReport {
        phase: 2,
        ..TrainReport::default()
    };
    let latent_val_seed = crate::subseed(cfg.seed, "phase2/latent-val");
    let mut best: Option<(f64, FabModel, usize)> = None;
    let mut stuck_epochs = 0usize;

    for epoch in 0..cfg.phase2_epochs {
        shuffle(&mut train_idx, &mut rng);
        let mut sums = [0.0f64; 5]; // recon, hinge, latent, geom, disc
        let mut seen = 0usize;
        for (step, chunk) in train_idx.chunks(cfg.phase2_batch).enumerate() {
            let batch = gather(data, chunk);
            let (y, x, labels) = batch_parts(&batch);

            // Discriminator: `critic_steps` Adam updates on this batch.
            let mut disc_loss_val = 0.0;
            for _ in 0..cfg.critic_steps {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape);
                let y_id = tape.leaf(y.clone());
                let x_norm = x.clone().map(|xm| {
                    let id = tape.leaf(xm);
                    model.normalize_x_tape(&mut tape, id)
                });
                let y_norm = model.normalize_y_tape(&mut tape, y_id);
                let per = disc_per_sample(&mut tape, &model, &bound, y_norm, x_norm, &labels);
                let loss = tape.mean_all(per);
                let targets = bound.disc_targets();
                let grads = tape
                    .backward(loss, &targets)
                    .map_err(|e| nonfinite(2, epoch, step, e))?;
                tape.ensure_finite()
                    .map_err(|e| nonfinite(2, epoch, step, e))?;
                let grad_mats: Vec<Option<&Matrix>> =
                    grads.iter().map(|g| g.map(|id| tape.value(id))).collect();
                disc_adam.step(&mut model.disc.params_mut(), &grad_mats);
                disc_loss_val = tape.value(loss).scalar_value();
                report.disc_updates += 1;
            }

            // Autoencoder: one update on the composite structuring loss.
            let z_ball = sample_ball_with(
                &mut ball_rng,
                model.latent_dim(),
                model.latent_radius(),
                batch.len(),
            );
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let y_id = tape.leaf(y.clone());
            let x_norm = x.clone().map(|xm| {
                let id = tape.leaf(xm);
                model.normalize_x_tape(&mut tape, id)
            });
            let z_id = tape.leaf(Matrix::from_rows(&z_ball));
            let zx_norm = if model.is_conditional() {
                let xs: Vec<Vec<f64>> = (0..z_ball.len())
                    .map(|i| batch[i % batch.len()].x.clone().unwrap())
                    .collect();
                let id = tape.leaf(Matrix::from_rows(&xs));
                Some(model.normalize_x_tape(&mut tape, id))
            } else {
                None
            };
            let build = build_struc(
                &mut tape,
                &model,
                &bound,
                y_id,
                x_norm,
                &labels,
                z_id,
                zx_norm,
                lambdas,
                cfg.geom_eps,
            );
            let targets = bound.ae_targets();
            let grads = tape
                .backward(build.total, &targets)
                .map_err(|e| nonfinite(2, epoch, step, e))?;
            tape.ensure_finite()
                .map_err(|e| nonfinite(2, epoch, step, e))?;
            let grad_mats: Vec<Option<&Matrix>> =
                grads.iter().map(|g| g.map(|id| tape.value(id))).collect();
            ae_adam.step(&mut model.ae_params_mut(), &grad_mats);
            report.ae_updates += 1;

            let w = batch.len() as f64;
            sums[0] += build.recon_mean * w;
            sums[1] += build.hinge_mean * w;
            sums[2] += build.latent_mean * w;
            sums[3] += build.geom * w;
            sums[4] += disc_loss_val * w;
            seen += batch.len();
        }

        let denom = seen.max(1) as f64;
        report.recon.push(sums[0] / denom);
        report.hinge.push(sums[1] / denom);
        report.latent.push(sums[2] / denom);
        report.geom.push(sums[3] / denom);
        report.disc.push(sums[4] / denom);
        report.val_recon.push(validation_recon(&model, &val_points));

        let feas_rate = validation_latent_feasibility(
            &model,
            &val_points,
            cfg.latent_val_samples,
            latent_val_seed,
            check,
        );
        report.val_latent_feas.push(feas_rate);
        let improved = best.as_ref().map_or(true, |(b, _, _)| feas_rate >= *b);
        if improved {
            best = Some((feas_rate, model.clone(), epoch));
        }

        // Health check: the discriminator should separate an easy set.
        if !health_pos.is_empty() {
            let acc = disc_accuracy(&model, &health_pos, &health_neg);
            if (acc - 0.5).abs() <= 0.02 {
                stuck_epochs += 1;
                if stuck_epochs >= 20 && !report.disc_health_warning {
                    report.disc_health_warning = true;
                    log::warn!(
                        "discriminator stuck at chance accuracy for {stuck_epochs} epochs"
                    );
                }
            } else {
                stuck_epochs = 0;
            }
        }

        if epoch % 25 == 0 || epoch + 1 == cfg.phase2_epochs {
            log::info!(
                "phase2 epoch {epoch}: recon {:.3e}, hinge {:.3e}, latent {:.3e}, geom {:.3e}, disc {:.3e}, latent-feas {:.3}",
                report.recon[epoch], report.hinge[epoch], report.latent[epoch],
                report.geom[epoch], report.disc[epoch], feas_rate
            );
        }
    }

    let final_model = match best {
        Some((_, m, e)) => {
            report.best_epoch = Some(e);
            m
        }
        None => model,
    };
    Ok((final_model, report))
}

fn disc_accuracy(model: &FabModel, pos: &[LabeledPoint], neg: &[LabeledPoint]) -> f64 {
    let score = |points: &[LabeledPoint], want: bool| -> usize {
        points
            .iter()
            .filter(|p| {
                let mut input = model.norm.normalize_y(&p.y);
                if let Some(x) = &p.x {
                    input.extend(model.norm.normalize_x(x));
                }
                let prob = model.disc.forward_row(&input).expect("disc shapes")[0];
                (prob > 0.5) == want
            })
            .count()
    };
    let correct = score(pos, true) + score(neg, false);
    correct as f64 / (pos.len() + neg.len()) as f64
}

fn nonfinite(phase: u8, epoch: usize, step: usize, source: TensorError) -> TrainError {
    TrainError::NonFinite {
        phase,
        epoch,
        step,
        source,
    }
}

/// Wrap bare feasible points for the phase-1 dataset.
pub fn feasible_dataset(points: Vec<Vec<f64>>) -> Vec<LabeledPoint> {
    points
        .into_iter()
        .map(|y| LabeledPoint {
            y,
            x: None,
            label: true,
        })
        .collect()
}
