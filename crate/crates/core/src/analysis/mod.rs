//! FLOPs accounting and the closed-form MEVC cost model.
//!
//! [`FlopsLedger`] holds exact integer counters filled in by the kernels.
//! [`CostModel`] predicts the same quantities from layer geometry, the match
//! ratio α and the residual density β. Two candidate counts are supported:
//! the grid-aligned `(2R+1)²` that the search actually evaluates, and the
//! closed-form `(2R+1)²/s²`.

mod report;

pub use report::{build_report, FrameReport, LayerReport, LedgerSummary, ModelSummary, OracleSummary, Report};

use serde::Serialize;

use crate::error::{MevcError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopCategory {
    /// Dense convolution on key frames (and plain `conv2d` calls).
    Key,
    /// SAD evaluations of the motion search.
    MotionEstimation,
    /// Sparse convolution of residual blocks.
    Residual,
    /// Dense per-position convolution for unmatched positions.
    Unmatched,
}

/// Exact operation counters. Counters only grow; `merge` adds another
/// ledger in, which is associative and commutative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FlopsLedger {
    key_flops: u64,
    me_flops: u64,
    res_flops: u64,
    unmatched_flops: u64,
    /// Bytes copied by prediction. Not FLOPs; excluded from `total`.
    bytes_moved: u64,
}

impl FlopsLedger {
    pub fn charge(&mut self, category: FlopCategory, flops: u64) {
        let slot = match category {
            FlopCategory::Key => &mut self.key_flops,
            FlopCategory::MotionEstimation => &mut self.me_flops,
            FlopCategory::Residual => &mut self.res_flops,
            FlopCategory::Unmatched => &mut self.unmatched_flops,
        };
        *slot += flops;
    }

    pub fn add_bytes_moved(&mut self, bytes: u64) {
        self.bytes_moved += bytes;
    }

    pub fn merge(&mut self, other: &FlopsLedger) {
        self.key_flops += other.key_flops;
        self.me_flops += other.me_flops;
        self.res_flops += other.res_flops;
        self.unmatched_flops += other.unmatched_flops;
        self.bytes_moved += other.bytes_moved;
    }

    pub fn key(&self) -> u64 {
        self.key_flops
    }

    pub fn me(&self) -> u64 {
        self.me_flops
    }

    pub fn residual(&self) -> u64 {
        self.res_flops
    }

    pub fn unmatched(&self) -> u64 {
        self.unmatched_flops
    }

    pub fn bytes_moved(&self) -> u64 {
        self.bytes_moved
    }

    pub fn total(&self) -> u64 {
        self.key_flops + self.me_flops + self.res_flops + self.unmatched_flops
    }

    /// Cost of the non-key part, `ME + unmatched + residual`.
    pub fn mevc(&self) -> u64 {
        self.me_flops + self.res_flops + self.unmatched_flops
    }
}

/// Layer geometry plus the measured (or assumed) match statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostModel {
    pub kernel_size: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub search_range: usize,
    /// Match ratio α.
    pub alpha: f64,
    /// Residual density β (nonzero fraction over matched positions).
    pub beta: f64,
}

impl CostModel {
    fn validate(&self) -> Result<()> {
        let dims = [
            self.kernel_size,
            self.stride,
            self.in_channels,
            self.out_channels,
            self.out_h,
            self.out_w,
        ];
        if dims.contains(&0) {
            return Err(MevcError::param("cost model dimensions must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(MevcError::param(format!(
                "alpha={} and beta={} must lie in [0, 1]",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    fn candidates(&self) -> u64 {
        let side = 2 * self.search_range as u64 + 1;
        side * side
    }

    /// `2k²·C_in·H_out·W_out`, the cost of one SAD per output position.
    fn sad_sweep(&self) -> u64 {
        2 * (self.kernel_size * self.kernel_size * self.in_channels) as u64 * (self.out_h * self.out_w) as u64
    }
}

/// Which candidate count the ME term uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateCount {
    /// `(2R+1)²`, one candidate per grid-aligned offset; what `search` evaluates.
    Exact,
    /// `(2R+1)²/s²`, the closed-form count for a search over ±R input pixels.
    StrideScaled,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MevcBreakdown {
    pub me: u64,
    pub unmatched: u64,
    pub res: u64,
}

impl MevcBreakdown {
    pub fn total(&self) -> u64 {
        self.me + self.unmatched + self.res
    }

    pub fn add(&mut self, other: &MevcBreakdown) {
        self.me += other.me;
        self.unmatched += other.unmatched;
        self.res += other.res;
    }
}

fn round_half_up(x: f64) -> u64 {
    (x + 0.5).floor().max(0.0) as u64
}

/// `FLOPs_Conv = 2k²·C_in·C_out·H_out·W_out`.
pub fn model_conv_flops(m: &CostModel) -> Result<u64> {
    m.validate()?;
    Ok(m.sad_sweep() * m.out_channels as u64)
}

/// Predicted non-key frame cost split into ME, unmatched fallback and residual terms.
pub fn model_mevc_flops(m: &CostModel, count: CandidateCount) -> Result<MevcBreakdown> {
    let conv = model_conv_flops(m)? as f64;
    let me = match count {
        CandidateCount::Exact => m.sad_sweep() * m.candidates(),
        CandidateCount::StrideScaled => {
            let s2 = (m.stride * m.stride) as f64;
            round_half_up(m.sad_sweep() as f64 * m.candidates() as f64 / s2)
        }
    };
    Ok(MevcBreakdown {
        me,
        unmatched: round_half_up((1.0 - m.alpha) * conv),
        res: round_half_up(m.alpha * m.beta * conv),
    })
}

/// Closed-form savings ratio `α − αβ − (2R+1)²/(s²·C_out)`. Can be negative.
pub fn acceleration(m: &CostModel) -> f64 {
    let candidates = m.candidates() as f64;
    let s2 = (m.stride * m.stride) as f64;
    m.alpha - m.alpha * m.beta - candidates / (s2 * m.out_channels as f64)
}

/// Savings ratio with the grid-aligned candidate count, `α − αβ − (2R+1)²/C_out`.
/// Equals `1 − mevc/conv` of the exact breakdown.
pub fn acceleration_exact(m: &CostModel) -> f64 {
    m.alpha - m.alpha * m.beta - m.candidates() as f64 / m.out_channels as f64
}

/// One layer's contribution to [`lossy_error_bound`].
#[derive(Debug, Clone, Copy)]
pub struct LayerErrorTerms {
    /// Residual threshold τ used by the layer.
    pub threshold: f64,
    /// `max_o Σ|w[o, ·]|`, the layer's ∞-norm gain.
    pub filter_l1: f64,
    /// Whether residuals are convolved at all.
    pub compensate: bool,
}

/// Upper bound on the max-abs deviation from dense convolution, `frames_since_key`
/// frames after a key frame, for a stack of layers with 1-Lipschitz activations.
///
/// Per layer, every dropped residual value is below τ, so one frame adds at
/// most `τ·‖w‖₁` on top of the error copied from the prediction; after `t`
/// frames that is `t·τ·‖w‖₁`. Input error from the previous layer is
/// amplified by at most `‖w‖₁`. Returns `None` for uncompensated layers,
/// whose error depends on the content rather than τ.
pub fn lossy_error_bound(layers: &[LayerErrorTerms], frames_since_key: usize) -> Option<f64> {
    let t = frames_since_key as f64;
    let mut bound = 0.0f64;
    for l in layers {
        if !l.compensate {
            return None;
        }
        bound = l.filter_l1 * bound + t * l.threshold * l.filter_l1;
    }
    Some(bound)
}
