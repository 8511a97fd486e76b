//! The MEVC operator: dense convolution on key frames, prediction from the
//! cached reference output plus sparse residual convolution on the rest.
//!
//! For a matched position with grid offset `(gy, gx)`,
//!
//! ```text
//! out_t(i, j) = out_{t-1}(i + gy, j + gx) + W * residual(i, j)
//! ```
//!
//! which equals dense convolution of the current input whenever the residual
//! is kept in full (τ = 0), whatever motion vector the search picked. Bias is
//! inherited from the prediction and never re-added on the residual path.
//! The activation is applied after reconstruction; the cache holds the
//! pre-activation output so the next frame predicts in the linear domain.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{FlopCategory, FlopsLedger};
use crate::error::{MevcError, Result};
use crate::motion::{search, MotionField, MotionParams};
use crate::tensor::{conv2d, conv_sparse_block, dense_at, gather_block, ConvSpec, DenseBlock, FeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    #[serde(alias = "none", alias = "linear")]
    Identity,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f32) -> f32 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayerParams {
    #[serde(flatten)]
    pub motion: MotionParams,
    pub activation: Activation,
    /// Convolve residuals on matched positions. Off means prediction only.
    pub compensate: bool,
}

impl Default for LayerParams {
    fn default() -> Self {
        LayerParams {
            motion: MotionParams::default(),
            activation: Activation::Identity,
            compensate: true,
        }
    }
}

/// Reference frame's layer input and pre-activation output.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub prev_input: FeatureMap,
    pub prev_output: FeatureMap,
}

/// Per-frame match statistics of one layer, after off-grid demotion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LayerFrameStats {
    pub positions: usize,
    pub matched: usize,
    pub demoted: usize,
    pub residual_nnz: usize,
    pub block_len: usize,
    pub candidates: usize,
    /// Positions at least R steps from the grid border whose receptive field needs no padding.
    pub interior_positions: usize,
    pub interior_matched: usize,
}

impl LayerFrameStats {
    pub fn alpha(&self) -> f64 {
        if self.positions == 0 {
            0.0
        } else {
            self.matched as f64 / self.positions as f64
        }
    }

    pub fn beta(&self) -> f64 {
        if self.matched == 0 {
            0.0
        } else {
            self.residual_nnz as f64 / (self.matched * self.block_len) as f64
        }
    }

    pub fn add(&mut self, other: &LayerFrameStats) {
        self.positions += other.positions;
        self.matched += other.matched;
        self.demoted += other.demoted;
        self.residual_nnz += other.residual_nnz;
        self.block_len = self.block_len.max(other.block_len);
        self.candidates += other.candidates;
        self.interior_positions += other.interior_positions;
        self.interior_matched += other.interior_matched;
    }
}

#[derive(Debug, Clone)]
pub struct MevcLayer {
    spec: ConvSpec,
    params: LayerParams,
    cache: Option<LayerCache>,
}

impl MevcLayer {
    pub fn new(spec: ConvSpec, params: LayerParams) -> Result<Self> {
        params.motion.validate()?;
        Ok(MevcLayer {
            spec,
            params,
            cache: None,
        })
    }

    /// Builds a layer whose output is followed by a per-channel affine
    /// (a folded normalization), folded into the weights up front.
    pub fn with_affine(spec: ConvSpec, scale: &[f32], shift: &[f32], params: LayerParams) -> Result<Self> {
        Self::new(spec.fold_affine(scale, shift)?, params)
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn params(&self) -> &LayerParams {
        &self.params
    }

    pub fn set_params(&mut self, params: LayerParams) -> Result<()> {
        params.motion.validate()?;
        self.params = params;
        Ok(())
    }

    pub fn cache(&self) -> Option<&LayerCache> {
        self.cache.as_ref()
    }

    pub fn reset(&mut self) {
        self.cache = None;
    }

    fn activate(&self, mut linear: FeatureMap) -> FeatureMap {
        if self.params.activation != Activation::Identity {
            let act = self.params.activation;
            linear.map_in_place(|v| act.apply(v));
        }
        linear
    }

    /// Dense convolution; refreshes the cache.
    pub fn forward_key(&mut self, input: &FeatureMap, ledger: &mut FlopsLedger) -> Result<FeatureMap> {
        let linear = conv2d(input, &self.spec, ledger)?;
        self.cache = Some(LayerCache {
            prev_input: input.clone(),
            prev_output: linear.clone(),
        });
        Ok(self.activate(linear))
    }

    /// Motion-compensated convolution against the cached reference. Returns
    /// the activated output and the motion field (with off-grid matches demoted).
    pub fn forward_nonkey(
        &mut self,
        input: &FeatureMap,
        ledger: &mut FlopsLedger,
    ) -> Result<(FeatureMap, MotionField)> {
        let cache = self.cache.as_ref().ok_or(MevcError::MissingCache)?;
        if input.shape() != cache.prev_input.shape() {
            return Err(MevcError::shape(format!(
                "input {:?} differs from reference {:?}",
                input.shape(),
                cache.prev_input.shape()
            )));
        }
        let spec = &self.spec;
        let mut field = search(input, &cache.prev_input, spec, &self.params.motion, ledger)?;
        let (out_h, out_w) = (field.out_h(), field.out_w());

        let off_grid: Vec<(usize, usize)> = (0..out_h * out_w)
            .filter_map(|idx| {
                let (i, j) = (idx / out_w, idx % out_w);
                let m = field.get(i, j).matched.as_ref()?;
                let (gy, gx) = m.mv.grid_offset();
                let (si, sj) = (i as isize + gy, j as isize + gx);
                let inside = si >= 0 && sj >= 0 && (si as usize) < out_h && (sj as usize) < out_w;
                (!inside).then_some((i, j))
            })
            .collect();
        field.demote_all(&off_grid);

        let c_out = spec.out_channels();
        let compensate = self.params.compensate;
        let reference = &cache.prev_output;
        let field_ref = &field;
        let rows: Vec<Result<(Vec<f32>, FlopsLedger)>> = (0..out_h)
            .into_par_iter()
            .map(|i| {
                let mut ledger = FlopsLedger::default();
                let mut row = vec![0.0f32; out_w * c_out];
                let mut block = DenseBlock::zeros(spec.in_channels(), spec.kernel_size());
                for j in 0..out_w {
                    let slot = &mut row[j * c_out..(j + 1) * c_out];
                    match &field_ref.get(i, j).matched {
                        Some(m) => {
                            let (gy, gx) = m.mv.grid_offset();
                            let (si, sj) = ((i as isize + gy) as usize, (j as isize + gx) as usize);
                            for (o, v) in slot.iter_mut().enumerate() {
                                *v = reference.get(o, si, sj);
                            }
                            ledger.add_bytes_moved((c_out * std::mem::size_of::<f32>()) as u64);
                            if compensate && !m.residual.is_empty() {
                                let delta = conv_sparse_block(&m.residual, spec, &mut ledger)?;
                                for (v, d) in slot.iter_mut().zip(delta) {
                                    *v += d;
                                }
                            }
                        }
                        None => {
                            gather_block(input, spec, i as isize, j as isize, &mut block);
                            dense_at(&block, spec, slot);
                            ledger.charge(FlopCategory::Unmatched, 2 * (spec.block_len() * c_out) as u64);
                        }
                    }
                }
                Ok((row, ledger))
            })
            .collect();

        let mut linear = FeatureMap::zeros(c_out, out_h, out_w);
        let data = linear.data_mut();
        for (i, row) in rows.into_iter().enumerate() {
            let (row, sub) = row?;
            ledger.merge(&sub);
            for j in 0..out_w {
                for o in 0..c_out {
                    data[(o * out_h + i) * out_w + j] = row[j * c_out + o];
                }
            }
        }
        if linear.data().iter().any(|v| !v.is_finite()) {
            return Err(MevcError::NonFinite("reconstructed output"));
        }
        self.cache = Some(LayerCache {
            prev_input: input.clone(),
            prev_output: linear.clone(),
        });
        Ok((self.activate(linear), field))
    }

    /// Dense convolution plus activation without touching the cache or any
    /// shared ledger; the reference path for oracle comparisons.
    pub fn forward_dense(&self, input: &FeatureMap) -> Result<FeatureMap> {
        let linear = conv2d(input, &self.spec, &mut FlopsLedger::default())?;
        Ok(self.activate(linear))
    }

    /// Summarizes a motion field returned by [`forward_nonkey`](Self::forward_nonkey)
    /// for an `in_h x in_w` input.
    pub fn frame_stats(&self, field: &MotionField, in_h: usize, in_w: usize) -> LayerFrameStats {
        let r = self.params.motion.search_range;
        let (k, s, p) = (self.spec.kernel_size(), self.spec.stride(), self.spec.padding());
        let (oh, ow) = (field.out_h(), field.out_w());
        let interior_axis =
            |g: usize, out: usize, len: usize| g >= r && g + r < out && g * s >= p && g * s - p + k <= len;
        let mut stats = LayerFrameStats {
            positions: oh * ow,
            matched: field.matched_count(),
            demoted: field.demoted_count(),
            residual_nnz: field.residual_nnz(),
            block_len: field.block_len(),
            candidates: field.candidates_evaluated(),
            ..Default::default()
        };
        for i in 0..oh {
            for j in 0..ow {
                if interior_axis(i, oh, in_h) && interior_axis(j, ow, in_w) {
                    stats.interior_positions += 1;
                    if field.get(i, j).is_matched() {
                        stats.interior_matched += 1;
                    }
                }
            }
        }
        stats
    }
}
