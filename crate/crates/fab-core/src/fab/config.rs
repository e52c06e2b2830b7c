//! Training configuration. Defaults follow the constrained-optimization
//! hyperparameter table; file keys use the same names (`batch_size`,
//! `epochs`, `lr`, `lambda_recon`, `lambda_hinge`, `lambda_latent`,
//! `lambda_geometric`, `critic_steps`, `hidden_dim`, `num_decoders`,
//! `num_samples`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::kvconfig::{KvError, KvFile};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FabConfig {
    /// Latent width; `None` means "same as the ambient dimension".
    pub latent_dim: Option<usize>,
    pub latent_radius: f64,
    pub hidden_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    /// Decoder width override for capacity sweeps; defaults to `hidden_dim`.
    pub decoder_width: Option<usize>,
    pub disc_depth: usize,
    pub mixture_depth: usize,
    pub num_decoders: usize,
    pub lambda_recon: f64,
    pub lambda_hinge: f64,
    pub lambda_latent: f64,
    pub lambda_geom: f64,
    /// Accepted for config compatibility; no composite-loss term binds it.
    pub lambda_feas: f64,
    pub phase1_epochs: usize,
    pub phase1_lr: f64,
    pub phase1_batch: usize,
    /// Phase-1 feasible dataset size drawn by the pipeline drivers.
    pub num_samples: usize,
    /// Labeled discriminator dataset size drawn by the pipeline drivers.
    pub num_disc_samples: usize,
    pub phase2_epochs: usize,
    pub phase2_lr_ae: f64,
    pub phase2_lr_disc: f64,
    pub phase2_batch: usize,
    pub critic_steps: usize,
    pub geom_eps: f64,
    pub val_fraction: f64,
    /// Latent draws per epoch for the validation feasibility rate.
    pub latent_val_samples: usize,
    pub seed: u64,
}

impl Default for FabConfig {
    fn default() -> Self {
        FabConfig {
            latent_dim: None,
            latent_radius: 0.5,
            hidden_dim: 64,
            encoder_depth: 4,
            decoder_depth: 4,
            decoder_width: None,
            disc_depth: 3,
            mixture_depth: 2,
            num_decoders: 1,
            lambda_recon: 1.0,
            lambda_hinge: 0.1,
            lambda_latent: 1.0,
            lambda_geom: 0.1,
            lambda_feas: 1.0,
            phase1_epochs: 500,
            phase1_lr: 1e-3,
            phase1_batch: 256,
            num_samples: 60_000,
            num_disc_samples: 20_000,
            phase2_epochs: 150,
            phase2_lr_ae: 5e-4,
            phase2_lr_disc: 1e-3,
            phase2_batch: 256,
            critic_steps: 3,
            geom_eps: 1e-6,
            val_fraction: 0.2,
            latent_val_samples: 10_000,
            seed: 0,
        }
    }
}

impl FabConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.latent_radius <= 0.0 {
            return Err("latent_radius must be positive".into());
        }
        if self.num_decoders == 0 {
            return Err("num_decoders must be at least 1".into());
        }
        if self.phase1_batch < 2 || self.phase2_batch < 2 {
            return Err("batch sizes must be at least 2 (geometric loss is a batch variance)".into());
        }
        for (name, l) in [
            ("lambda_recon", self.lambda_recon),
            ("lambda_hinge", self.lambda_hinge),
            ("lambda_latent", self.lambda_latent),
            ("lambda_geometric", self.lambda_geom),
            ("lambda_feasibility", self.lambda_feas),
        ] {
            if l < 0.0 {
                return Err(format!("{name} must be nonnegative"));
            }
        }
        Ok(())
    }

    pub fn decoder_width(&self) -> usize {
        self.decoder_width.unwrap_or(self.hidden_dim)
    }

    pub fn from_file(path: &Path) -> Result<FabConfig, KvError> {
        Self::from_kv(&KvFile::load(path)?)
    }

    pub fn from_kv(kv: &KvFile) -> Result<FabConfig, KvError> {
        let mut cfg = FabConfig::default();
        for key in kv.keys() {
            match key {
                "batch_size" | "epochs" | "lr" | "lambda_recon" | "lambda_hinge"
                | "lambda_latent" | "lambda_geometric" | "lambda_feasibility" | "critic_steps"
                | "hidden_dim" | "num_decoders" | "num_samples" | "num_disc_samples"
                | "phase2_epochs" | "lr_ae" | "lr_disc" | "latent_radius" | "latent_dim"
                | "decoder_width" | "decoder_depth" | "encoder_depth" | "geom_eps" | "seed" => {}
                other => return Err(KvError::UnknownKey(other.to_string())),
            }
        }
        if let Some(v) = kv.usize("batch_size")? {
            cfg.phase1_batch = v;
            cfg.phase2_batch = v;
        }
        if let Some(v) = kv.usize("epochs")? {
            cfg.phase1_epochs = v;
        }
        if let Some(v) = kv.usize("phase2_epochs")? {
            cfg.phase2_epochs = v;
        }
        if let Some(v) = kv.f64("lr")? {
            cfg.phase1_lr = v;
        }
        if let Some(v) = kv.f64("lr_ae")? {
            cfg.phase2_lr_ae = v;
        }
        if let Some(v) = kv.f64("lr_disc")? {
            cfg.phase2_lr_disc = v;
        }
        if let Some(v) = kv.f64("lambda_recon")? {
            cfg.lambda_recon = v;
        }
        if let Some(v) = kv.f64("lambda_hinge")? {
            cfg.lambda_hinge = v;
        }
        if let Some(v) = kv.f64("lambda_latent")? {
            cfg.lambda_latent = v;
        }
        if let Some(v) = kv.f64("lambda_geometric")? {
            cfg.lambda_geom = v;
        }
        if let Some(v) = kv.f64("lambda_feasibility")? {
            cfg.lambda_feas = v;
        }
        if let Some(v) = kv.usize("critic_steps")? {
            cfg.critic_steps = v;
        }
        if let Some(v) = kv.usize("hidden_dim")? {
            cfg.hidden_dim = v;
        }
        if let Some(v) = kv.usize("num_decoders")? {
            cfg.num_decoders = v;
        }
        if let Some(v) = kv.usize("num_samples")? {
            cfg.num_samples = v;
        }
        if let Some(v) = kv.usize("num_disc_samples")? {
            cfg.num_disc_samples = v;
        }
        if let Some(v) = kv.f64("latent_radius")? {
            cfg.latent_radius = v;
        }
        if let Some(v) = kv.usize("latent_dim")? {
            cfg.latent_dim = Some(v);
        }
        if let Some(v) = kv.usize("decoder_width")? {
            cfg.decoder_width = Some(v);
        }
        if let Some(v) = kv.usize("decoder_depth")? {
            cfg.decoder_depth = v;
        }
        if let Some(v) = kv.usize("encoder_depth")? {
            cfg.encoder_depth = v;
        }
        if let Some(v) = kv.f64("geom_eps")? {
            cfg.geom_eps = v;
        }
        if let Some(v) = kv.u64("seed")? {
            cfg.seed = v;
        }
        Ok(cfg)
    }
}
