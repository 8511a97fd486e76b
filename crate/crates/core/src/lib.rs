//! Motion-estimation based video convolution (MEVC).
//!
//! Non-key frames of a video are convolved by predicting each output pixel
//! from the previous frame's cached layer output at a block-matched offset,
//! then adding the convolution of the (thresholded, sparse) input residual.
//! Key frames, one per group of pictures, run ordinary dense convolution and
//! refresh every layer's cache. Every arithmetic operation is booked in a
//! [`FlopsLedger`](analysis::FlopsLedger) so the closed-form cost model in
//! [`analysis`] can be reconciled against measured counts.
//!
//! Input can be raw Bayer mosaics ([`bayer`]) or seeded synthetic scenes
//! ([`synth`]); [`experiment`] bundles runs, parameter sweeps and the
//! four-setting ablation check used by the `mevc` CLI.

pub mod analysis;
pub mod bayer;
pub mod error;
pub mod experiment;
pub mod fsutil;
pub mod gop;
pub mod layer;
pub mod motion;
pub mod synth;
pub mod tensor;

pub use analysis::{CostModel, FlopCategory, FlopsLedger};
pub use error::{MevcError, Result};
pub use gop::{GopConfig, Network};
pub use layer::{Activation, LayerParams, MevcLayer};
pub use motion::{MotionField, MotionParams, MotionVector};
pub use tensor::{ConvSpec, DenseBlock, FeatureMap, SparseBlock};
