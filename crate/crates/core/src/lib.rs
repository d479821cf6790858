//! Frozen slide encoder with a trainable cross-attention modal adapter,
//! text-embedding alignment training, linear-probe and survival evaluation,
//! and a synthetic cohort generator.

pub mod adapter;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod modal;
pub mod numerics;
pub mod pipeline;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{ParamId, ParamStore, Real, StoreKind, Tensor2D};
