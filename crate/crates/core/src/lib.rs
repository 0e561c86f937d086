//! Desk-scale spectrogram-transformer lab for parameter-efficient
//! fine-tuning.
//!
//! The crate provides, bottom to top:
//!
//! - [`tensor`] / [`tape`]: a dense f64 tensor and a reverse-mode
//!   autodiff tape covering every primitive the models need.
//! - [`store`] / [`checkpoint`]: named parameter storage with a
//!   trainable mask, plus a flat binary record format for persistence.
//! - [`backbone`]: a pre-LN transformer encoder over patchified
//!   spectrograms with a CLS classification head and freeze surface.
//! - [`petl`]: injectable adaptation methods — low-rank updates (LoRA),
//!   bottleneck and convolutional (conformer-style) adapters, prompt and
//!   prefix tuning, bias-only tuning — described by an injection plan.
//! - [`accounting`]: exact trainable-parameter censuses, closed forms,
//!   and budget inversion.
//! - [`harness`]: synthetic tasks, AdamW + cosine schedule, the training
//!   loop, few-shot subsampling, k-fold splits, and a finite-difference
//!   gradient checker.

pub mod accounting;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod petl;
pub mod store;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use store::{ParamId, ParamRole, ParamStore};
pub use tape::{BnState, Tape, Value};
pub use tensor::Tensor;
