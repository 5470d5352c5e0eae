//! Prior-augmented vision transformer (PViT) for out-of-distribution detection.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense f64 tensors and a per-forward-pass gradient tape.
//! * [`model`]: the transformer with its prior token, plus [`mlp`], the
//!   small classifier used as the default prior model.
//! * [`prior`]: prior-logit providers (trained model or logits file).
//! * [`train`]: Adam, the warmup/linear-decay schedule and the epoch loop.
//! * [`scoring`]: energy, guidance terms, PGE and the logit baselines.
//! * [`metrics`]: AUROC, FPR at a target TPR, histogram export.
//! * [`data`]: IDX loading, synthetic ID/OOD generation, normalization.
//! * [`checkpoint`]: the binary parameter container.
//! * [`gradcheck`]: central-difference checks of tape gradients.
//!
//! Interchangeable algorithms (guidance terms, baseline scores, OOD
//! generators, prior sources) sit behind small traits and are looked up by
//! name through [`registry`].

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod mlp;
pub mod model;
pub mod prior;
pub mod registry;
pub mod rng;
pub mod scoring;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
