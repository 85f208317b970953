//! Dense two-class classifier with exact backpropagation and Adam.

mod adam;
mod checkpoint;
mod gradcheck;
mod loss;
mod mlp;

pub use adam::{adam_step, AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use gradcheck::grad_check;
pub use loss::{cross_entropy, softmax, PROB_FLOOR};
pub use mlp::{Dense, ForwardCache, Gradients, MlpModel, Mode, OUTPUT_DIM};
