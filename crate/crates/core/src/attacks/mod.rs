//! Analysis instruments: metamers, decision slices, pre-image checks, the
//! sphere baselines and the post-hoc nuisance probe.

mod baseline;
mod metamer;
mod model;
mod preimage;
mod probe;
mod slice;
mod spheres;

pub use baseline::{BaselineArch, BaselineNet};
pub use metamer::{interpolate_nuisance, metamer_exact, metamer_gradient, GradientMetamerOptions, MetamerResult};
pub use model::{classifier_accuracy, Classifier, FnClassifier, LogitModel, NuisanceView};
pub use preimage::{preimage_membership, PreimageLevel};
pub use probe::{nuisance_codes, train_posthoc_nuisance_probe, train_probe_on_features, ProbeOptions, ProbeReport};
pub use slice::{scan_decision_slice, SliceScan, SLICE_HI, SLICE_LO};
pub use spheres::{adversarial_last_coordinate, misaligned_sphere_classifier, norm_sphere_classifier, AdversarialSpheres};
