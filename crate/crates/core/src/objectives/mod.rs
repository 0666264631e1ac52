//! Training objectives: cross-entropy, the independence cross-entropy
//! min-max game with a nuisance classifier, the maximum-likelihood term on
//! the nuisances and the variational mutual-information bound.

mod losses;
mod models;
mod trainer;

pub use losses::{
    accuracy, label_entropy, mi_lower_bound, nuisance_cross_entropy, one_hot, picked_log_prob,
    semantic_cross_entropy, semantic_cross_entropy_value, MiBound,
};
pub use models::{mle_nuisance, GaussianPrior, NuisanceClassifier, GAMMA_FLOOR};
pub use trainer::{ce_step, minibatches, train, IceTrainer, IceWeights, LossReport, Objective, TrainOptions};
