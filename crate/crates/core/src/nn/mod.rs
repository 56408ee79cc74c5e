//! Minimal dense-network substrate: a flat parameter registry, affine+activation
//! layers with a recorded tape for reverse-mode gradients, SGD with momentum and
//! weight decay, finite-difference gradient checking and a binary checkpoint.

mod checkpoint;
mod gradcheck;
mod layer;
mod optim;
mod params;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, CheckpointTensor};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use layer::{Activation, DenseLayer, Mlp, Tape};
pub use optim::{Sgd, SgdConfig};
pub use params::{ParamId, ParamStore};
