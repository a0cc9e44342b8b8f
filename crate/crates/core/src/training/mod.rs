//! Collocation sampling, loss families and the optimizers that train the
//! field estimator.

mod losses;
mod optim;
mod sobol;
mod train;

pub use losses::{
    loss_bc, loss_obs, loss_pc, loss_pde, pde_residual, periodic_times, radiation_residual, total_loss,
    CollocationConfig, CollocationSets, EndCoefficients, LossContext, LossEvaluation, LossTerms, LossWeights,
    ObservationData, PcLosses, PhysicsSetup,
};
pub use optim::{lr_decay, lr_decay_with, AdamState, LbfgsConfig, LbfgsEpoch, LbfgsState};
pub use sobol::sobol2d;
pub use train::{train_gamma, Phase, TrainConfig, TrainControl, TrainLogRow, TrainReport};
