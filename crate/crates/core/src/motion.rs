//! Sliding-window block matching aligned to a convolution's output grid.
//!
//! The block for output position `(i, j)` is that position's receptive field
//! (`C_in x k x k`, all channels at once). Candidates are whole grid steps,
//! so an offset of `(gy, gx)` steps is a motion vector of `(gx·s, gy·s)`
//! input pixels and the matched reference block is exactly the receptive
//! field of reference output `(i + gy, j + gx)`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use crate::analysis::{FlopCategory, FlopsLedger};
use crate::error::{MevcError, Result};
use crate::tensor::{gather_block, ConvSpec, DenseBlock, FeatureMap, SparseBlock, SparseEntry};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionParams {
    /// Search range R in grid steps; `(2R+1)²` candidates per position.
    pub search_range: usize,
    /// Residual threshold τ. Differences with magnitude below it are dropped.
    pub threshold: f32,
    /// Stop searching once the best candidate's residual density is at or
    /// below this fraction. `None` (or a negative value in JSON) disables it.
    #[serde(deserialize_with = "deserialize_early_stop")]
    pub early_stop_density: Option<f32>,
    /// A position counts as matched iff its residual density is at most this (β_max).
    pub match_max_density: f32,
}

impl Default for MotionParams {
    fn default() -> Self {
        MotionParams {
            search_range: 1,
            threshold: 0.01,
            early_stop_density: Some(0.3),
            match_max_density: 0.9,
        }
    }
}

fn deserialize_early_stop<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f32>, D::Error> {
    let v: Option<f32> = Option::deserialize(d)?;
    Ok(v.filter(|x| *x >= 0.0))
}

impl MotionParams {
    pub fn validate(&self) -> Result<()> {
        if !self.threshold.is_finite() || self.threshold < 0.0 {
            return Err(MevcError::param(format!(
                "threshold must be finite and >= 0, got {}",
                self.threshold
            )));
        }
        if let Some(es) = self.early_stop_density {
            if !(0.0..=1.0).contains(&es) {
                return Err(MevcError::param(format!(
                    "early_stop_density must lie in [0, 1], got {es}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.match_max_density) {
            return Err(MevcError::param(format!(
                "match_max_density must lie in [0, 1], got {}",
                self.match_max_density
            )));
        }
        Ok(())
    }

    pub fn candidate_count(&self) -> usize {
        (2 * self.search_range + 1).pow(2)
    }
}

/// Displacement from a current block to its matched reference block, in
/// input pixels. Always a whole number of stride steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MotionVector {
    step_x: i32,
    step_y: i32,
    stride: u32,
}

impl MotionVector {
    pub fn zero(stride: usize) -> Self {
        Self::from_steps(0, 0, stride)
    }

    /// A vector of `(step_x·s, step_y·s)` pixels.
    pub fn from_steps(step_x: i32, step_y: i32, stride: usize) -> Self {
        MotionVector {
            step_x,
            step_y,
            stride: stride as u32,
        }
    }

    /// Rejects pixel displacements that are not multiples of the stride.
    pub fn new(dx: i32, dy: i32, stride: usize) -> Result<Self> {
        let s = stride as i32;
        if s == 0 || dx % s != 0 || dy % s != 0 {
            return Err(MevcError::param(format!(
                "motion vector ({dx}, {dy}) is not a multiple of stride {stride}"
            )));
        }
        Ok(Self::from_steps(dx / s, dy / s, stride))
    }

    pub fn dx(&self) -> i32 {
        self.step_x * self.stride as i32
    }

    pub fn dy(&self) -> i32 {
        self.step_y * self.stride as i32
    }

    /// Offset on the output grid, `(dy/s, dx/s)`.
    pub fn grid_offset(&self) -> (isize, isize) {
        (self.step_y as isize, self.step_x as isize)
    }

    pub fn is_zero(&self) -> bool {
        self.step_x == 0 && self.step_y == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatch {
    pub mv: MotionVector,
    pub residual: SparseBlock,
}

/// Search outcome at one output position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionMatch {
    /// SAD of the winning candidate.
    pub sad: f32,
    /// Candidates evaluated before the search ended.
    pub candidates: usize,
    /// Winning candidate's thresholded residual density.
    pub density: f64,
    /// Present iff the position is matched.
    pub matched: Option<BlockMatch>,
    /// Set when a match was discarded after the search because its
    /// prediction source lies off the reference output grid.
    pub demoted: bool,
}

impl PositionMatch {
    pub fn is_matched(&self) -> bool {
        self.matched.is_some()
    }
}

/// Per-position matches for one frame at one layer, plus the frame-level α and β.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    out_h: usize,
    out_w: usize,
    block_len: usize,
    positions: Vec<PositionMatch>,
    match_ratio: f64,
    mean_density: f64,
}

impl MotionField {
    pub(crate) fn new(out_h: usize, out_w: usize, block_len: usize, positions: Vec<PositionMatch>) -> Self {
        let mut f = MotionField {
            out_h,
            out_w,
            block_len,
            positions,
            match_ratio: 0.0,
            mean_density: 0.0,
        };
        (f.match_ratio, f.mean_density) = f.recompute_stats();
        f
    }

    pub fn out_h(&self) -> usize {
        self.out_h
    }

    pub fn out_w(&self) -> usize {
        self.out_w
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn get(&self, i: usize, j: usize) -> &PositionMatch {
        &self.positions[i * self.out_w + j]
    }

    pub fn positions(&self) -> &[PositionMatch] {
        &self.positions
    }

    /// Match ratio α = matched / (H_out·W_out).
    pub fn alpha(&self) -> f64 {
        self.match_ratio
    }

    /// Mean residual density β over matched positions (0 when none matched).
    pub fn beta(&self) -> f64 {
        self.mean_density
    }

    pub fn matched_count(&self) -> usize {
        self.positions.iter().filter(|p| p.is_matched()).count()
    }

    pub fn demoted_count(&self) -> usize {
        self.positions.iter().filter(|p| p.demoted).count()
    }

    /// Total residual nonzeros over matched positions.
    pub fn residual_nnz(&self) -> usize {
        self.positions
            .iter()
            .filter_map(|p| p.matched.as_ref())
            .map(|m| m.residual.nnz())
            .sum()
    }

    pub fn candidates_evaluated(&self) -> usize {
        self.positions.iter().map(|p| p.candidates).sum()
    }

    /// α and β computed afresh from the per-position contents.
    pub fn recompute_stats(&self) -> (f64, f64) {
        let total = self.positions.len();
        let matched = self.matched_count();
        let alpha = if total == 0 { 0.0 } else { matched as f64 / total as f64 };
        let beta = if matched == 0 {
            0.0
        } else {
            self.residual_nnz() as f64 / (matched * self.block_len) as f64
        };
        (alpha, beta)
    }

    /// Drops the match at `(i, j)` so the position falls back to dense convolution.
    pub fn demote(&mut self, i: usize, j: usize) {
        self.demote_all(&[(i, j)]);
    }

    pub fn demote_all(&mut self, at: &[(usize, usize)]) {
        for &(i, j) in at {
            let p = &mut self.positions[i * self.out_w + j];
            if p.matched.take().is_some() {
                p.demoted = true;
            }
        }
        (self.match_ratio, self.mean_density) = self.recompute_stats();
    }

    /// Debug dump with columns `i,j,matched,dx,dy,sad,nnz`. `dx`, `dy` and
    /// `nnz` are empty for unmatched positions.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "j", "matched", "dx", "dy", "sad", "nnz"])?;
        for (idx, p) in self.positions.iter().enumerate() {
            let (i, j) = (idx / self.out_w, idx % self.out_w);
            let (matched, dx, dy, nnz) = match &p.matched {
                Some(m) => (
                    "1",
                    m.mv.dx().to_string(),
                    m.mv.dy().to_string(),
                    m.residual.nnz().to_string(),
                ),
                None => ("0", String::new(), String::new(), String::new()),
            };
            w.write_record([
                i.to_string(),
                j.to_string(),
                matched.to_string(),
                dx,
                dy,
                format!("{}", p.sad),
                nnz,
            ])?;
        }
        w.flush().map_err(|e| MevcError::io("motion field csv", e))?;
        Ok(())
    }
}

/// Sum of absolute differences. Charges `2·len` to the ME counter.
pub fn sad(a: &DenseBlock, b: &DenseBlock, ledger: &mut FlopsLedger) -> Result<f32> {
    if !a.same_shape(b) {
        return Err(MevcError::shape(format!(
            "SAD of {}x{}x{} and {}x{}x{} blocks",
            a.channels(),
            a.size(),
            a.size(),
            b.channels(),
            b.size(),
            b.size()
        )));
    }
    ledger.charge(FlopCategory::MotionEstimation, 2 * a.len() as u64);
    Ok(sad_unchecked(a, b))
}

#[inline]
fn sad_unchecked(a: &DenseBlock, b: &DenseBlock) -> f32 {
    a.data()
        .iter()
        .zip(b.data())
        .fold(0.0f32, |acc, (x, y)| acc + (x - y).abs())
}

#[inline]
fn keeps(diff: f32, tau: f32) -> bool {
    diff != 0.0 && diff.abs() >= tau
}

fn check_tau(tau: f32) -> Result<()> {
    if !tau.is_finite() || tau < 0.0 {
        return Err(MevcError::param(format!("threshold must be >= 0, got {tau}")));
    }
    Ok(())
}

/// `current − reference`, keeping only differences with magnitude `>= tau`.
/// With `tau = 0` every nonzero difference is kept.
pub fn threshold_residual(current: &DenseBlock, reference: &DenseBlock, tau: f32) -> Result<SparseBlock> {
    check_tau(tau)?;
    if !current.same_shape(reference) {
        return Err(MevcError::shape("residual of differently shaped blocks"));
    }
    let k = current.size();
    let entries = current
        .data()
        .iter()
        .zip(reference.data())
        .enumerate()
        .filter_map(|(idx, (c, r))| {
            let d = c - r;
            keeps(d, tau).then_some(SparseEntry {
                channel: idx / (k * k),
                dy: (idx / k) % k,
                dx: idx % k,
                value: d,
            })
        })
        .collect();
    Ok(SparseBlock::new((0, 0), entries))
}

fn kept_count(current: &DenseBlock, reference: &DenseBlock, tau: f32) -> usize {
    current
        .data()
        .iter()
        .zip(reference.data())
        .filter(|(c, r)| keeps(**c - **r, tau))
        .count()
}

/// Grid offsets `(gy, gx)` in enumeration order: `(0, 0)` first, then raster order.
pub fn candidate_offsets(search_range: usize) -> Vec<(isize, isize)> {
    let r = search_range as isize;
    let mut v = Vec::with_capacity((2 * search_range + 1).pow(2));
    v.push((0, 0));
    for gy in -r..=r {
        for gx in -r..=r {
            if (gy, gx) != (0, 0) {
                v.push((gy, gx));
            }
        }
    }
    v
}

/// Full-search block matching of every output position of `cur_input`
/// against `ref_input`.
///
/// The winner is the minimum-SAD candidate among those evaluated, ties going
/// to the earlier one. If early stopping is on, the search at a position ends
/// as soon as the current best candidate's residual density is at or below
/// the trigger. A position is matched iff the winner's density is at most
/// `match_max_density`.
pub fn search(
    cur_input: &FeatureMap,
    ref_input: &FeatureMap,
    spec: &ConvSpec,
    params: &MotionParams,
    ledger: &mut FlopsLedger,
) -> Result<MotionField> {
    params.validate()?;
    if cur_input.shape() != ref_input.shape() {
        return Err(MevcError::shape(format!(
            "current {:?} vs reference {:?}",
            cur_input.shape(),
            ref_input.shape()
        )));
    }
    if cur_input.channels() != spec.in_channels() {
        return Err(MevcError::shape(format!(
            "input has {} channels, layer expects {}",
            cur_input.channels(),
            spec.in_channels()
        )));
    }
    let (out_h, out_w) = spec.output_dims(cur_input.height(), cur_input.width())?;
    let offsets = candidate_offsets(params.search_range);
    let block_len = spec.block_len();
    let sad_cost = 2 * block_len as u64;
    let stride = spec.stride();

    let rows: Vec<(Vec<PositionMatch>, u64)> = (0..out_h)
        .into_par_iter()
        .map(|i| {
            let mut cur = DenseBlock::zeros(spec.in_channels(), spec.kernel_size());
            let mut cand = cur.clone();
            let mut best_block = cur.clone();
            let mut row = Vec::with_capacity(out_w);
            let mut evaluated = 0u64;
            for j in 0..out_w {
                gather_block(cur_input, spec, i as isize, j as isize, &mut cur);
                let mut best: Option<(usize, f32)> = None;
                let mut n = 0;
                for (idx, &(gy, gx)) in offsets.iter().enumerate() {
                    gather_block(ref_input, spec, i as isize + gy, j as isize + gx, &mut cand);
                    let cost = sad_unchecked(&cur, &cand);
                    n += 1;
                    if best.is_none_or(|(_, b)| cost < b) {
                        best = Some((idx, cost));
                        std::mem::swap(&mut best_block, &mut cand);
                        if let Some(trigger) = params.early_stop_density {
                            let density = kept_count(&cur, &best_block, params.threshold) as f64 / block_len as f64;
                            if density <= f64::from(trigger) {
                                break;
                            }
                        }
                    }
                }
                evaluated += n as u64;
                let (win, cost) = best.expect("at least the zero candidate is evaluated");
                let (gy, gx) = offsets[win];
                let residual = threshold_residual(&cur, &best_block, params.threshold)
                    .expect("threshold validated")
                    .at((i, j));
                let density = residual.nnz() as f64 / block_len as f64;
                let matched = (density <= f64::from(params.match_max_density)).then(|| BlockMatch {
                    mv: MotionVector::from_steps(gx as i32, gy as i32, stride),
                    residual,
                });
                row.push(PositionMatch {
                    sad: cost,
                    candidates: n,
                    density,
                    matched,
                    demoted: false,
                });
            }
            (row, evaluated * sad_cost)
        })
        .collect();

    let mut positions = Vec::with_capacity(out_h * out_w);
    for (row, flops) in rows {
        positions.extend(row);
        ledger.charge(FlopCategory::MotionEstimation, flops);
    }
    Ok(MotionField::new(out_h, out_w, block_len, positions))
}
