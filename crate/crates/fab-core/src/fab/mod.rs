//! Autoencoder architectures, losses, latent-ball projection, and the
//! two-phase training procedure.

mod config;
pub mod losses;
pub mod model;
pub mod train;

pub use config::FabConfig;
pub use losses::{
    loss_disc, loss_geom, loss_hinge, loss_latent, loss_recon, loss_struc, mixture_decode,
    Lambdas, PROB_CLAMP,
};
pub use model::{project_latent, sample_ball, FabBound, FabModel, Normalization};
pub use train::{
    feasible_dataset, train_phase1, train_phase2, FeasibilityCheck, TrainError, TrainReport,
};
