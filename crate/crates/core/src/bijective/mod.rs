//! Fully invertible networks: layers with exact inverses and
//! log-determinants, composed into a classifier whose latent code splits
//! into logits and nuisance variables.

mod checkpoint;
mod layers;
mod net;
mod subnet;

pub use checkpoint::{Checkpoint, Section, MAGIC};
pub use layers::{
    dct_matrix, random_orthogonal, squeeze, unsqueeze, zigzag, ActNorm, BijectiveLayer, ChannelMix, Coupling,
    DctReadout, LayerOut, MixInit, ACTNORM_MIN_STD, SCALE_CLAMP,
};
pub use net::{CouplingKind, FullyInvertibleNet, LatentCode, LatentSplit, NetOutput, NetSpec, SplitMode, Stage};
pub use subnet::{Bind, Subnet};
