//! Run reports: per-frame and per-layer FLOPs, savings against the all-key
//! baseline, measured match statistics and the cost model evaluated on them.

use std::path::Path;

use serde::Serialize;

use super::{acceleration, acceleration_exact, model_mevc_flops, CandidateCount, FlopsLedger, MevcBreakdown};
use crate::error::{MevcError, Result};
use crate::fsutil::write_atomic;
use crate::gop::SequenceRun;
use crate::layer::LayerFrameStats;

/// Rough FLOPs range of a conventional ISP, per frame, carried as metadata.
pub const ISP_GFLOPS_RANGE: [f64; 2] = [1.0, 100.0];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LedgerSummary {
    pub key_flops: u64,
    pub me_flops: u64,
    pub res_flops: u64,
    pub unmatched_flops: u64,
    pub total_flops: u64,
    pub bytes_moved: u64,
}

impl From<&FlopsLedger> for LedgerSummary {
    fn from(l: &FlopsLedger) -> Self {
        LedgerSummary {
            key_flops: l.key(),
            me_flops: l.me(),
            res_flops: l.residual(),
            unmatched_flops: l.unmatched(),
            total_flops: l.total(),
            bytes_moved: l.bytes_moved(),
        }
    }
}

impl LedgerSummary {
    /// All-key cost: everything booked as dense convolution.
    fn dense(flops: u64) -> Self {
        LedgerSummary {
            key_flops: flops,
            total_flops: flops,
            ..Default::default()
        }
    }
}

/// One row per frame; flat so it serializes straight to CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameReport {
    pub frame: usize,
    pub key: bool,
    pub gop_position: usize,
    pub key_flops: u64,
    pub me_flops: u64,
    pub res_flops: u64,
    pub unmatched_flops: u64,
    pub total_flops: u64,
    pub bytes_moved: u64,
    pub baseline_flops: u64,
    pub delta_flops_pct: f64,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub oracle_max_abs: Option<f32>,
    pub oracle_mean_abs: Option<f64>,
}

/// Cost model summed over the non-key frames of one layer or of the run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ModelVariant {
    pub me_flops: u64,
    pub unmatched_flops: u64,
    pub res_flops: u64,
    pub mevc_flops: u64,
    /// Measured non-key `me + unmatched + res` minus `mevc_flops`.
    pub discrepancy_flops: i64,
    /// `discrepancy_flops / mevc_flops · 100`.
    pub discrepancy_pct: f64,
    /// Closed-form savings ratio at the measured α and β.
    pub acceleration: Option<f64>,
}

impl ModelVariant {
    fn finish(breakdown: MevcBreakdown, measured_mevc: u64, acceleration: Option<f64>) -> Self {
        let mevc = breakdown.total();
        let diff = measured_mevc as i64 - mevc as i64;
        ModelVariant {
            me_flops: breakdown.me,
            unmatched_flops: breakdown.unmatched,
            res_flops: breakdown.res,
            mevc_flops: mevc,
            discrepancy_flops: diff,
            discrepancy_pct: if mevc == 0 {
                0.0
            } else {
                diff as f64 / mevc as f64 * 100.0
            },
            acceleration,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ModelSummary {
    /// Closed-form candidate count `(2R+1)²/s²`.
    pub paper_variant: ModelVariant,
    /// Grid-aligned candidate count `(2R+1)²`, what the search evaluates.
    pub exact_variant: ModelVariant,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub layer: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub search_range: usize,
    pub totals: LedgerSummary,
    pub baseline_flops: u64,
    pub delta_flops_pct: f64,
    pub measured_alpha: Option<f64>,
    pub measured_beta: Option<f64>,
    /// Match ratio over positions away from the padded border and the search margin.
    pub interior_alpha: Option<f64>,
    /// `1 − mevc/conv` over non-key frames.
    pub nonkey_savings: Option<f64>,
    pub model: ModelSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleSummary {
    pub max_abs: f32,
    pub mean_abs: f64,
    pub worst_frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub config: serde_json::Value,
    pub per_layer: Vec<LayerReport>,
    pub per_frame: Vec<FrameReport>,
    pub totals: LedgerSummary,
    pub baseline_totals: LedgerSummary,
    pub delta_flops_pct: f64,
    pub measured_alpha: Option<f64>,
    pub measured_beta: Option<f64>,
    pub interior_alpha: Option<f64>,
    pub model: ModelSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_error: Option<OracleSummary>,
    pub isp_gflops_range: [f64; 2],
}

fn savings_pct(total: u64, baseline: u64) -> f64 {
    if baseline == 0 {
        0.0
    } else {
        (1.0 - total as f64 / baseline as f64) * 100.0
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Per-layer accumulation over the non-key frames.
#[derive(Default)]
struct LayerAcc {
    ledger: FlopsLedger,
    stats: LayerFrameStats,
    nonkey_frames: u64,
    nonkey_mevc: u64,
    closed_form: MevcBreakdown,
    exact: MevcBreakdown,
}

/// Builds the report for a finished run. `config` is embedded verbatim.
pub fn build_report(config: serde_json::Value, run: &SequenceRun) -> Result<Report> {
    let first = run
        .frames
        .first()
        .ok_or_else(|| MevcError::param("cannot report on an empty run"))?;
    let n_layers = first.layers.len();
    let mut accs: Vec<LayerAcc> = (0..n_layers).map(|_| LayerAcc::default()).collect();
    let mut per_frame = Vec::with_capacity(run.frames.len());
    let mut totals = FlopsLedger::default();

    for rec in &run.frames {
        let mut frame_stats = LayerFrameStats::default();
        for (acc, lr) in accs.iter_mut().zip(&rec.layers) {
            acc.ledger.merge(&lr.ledger);
            if let Some(st) = &lr.stats {
                acc.stats.add(st);
                frame_stats.add(st);
                acc.nonkey_frames += 1;
                acc.nonkey_mevc += lr.ledger.mevc();
                let m = lr.dims.cost_model(st.alpha(), st.beta());
                acc.closed_form
                    .add(&model_mevc_flops(&m, CandidateCount::StrideScaled)?);
                acc.exact.add(&model_mevc_flops(&m, CandidateCount::Exact)?);
            }
        }
        totals.merge(&rec.ledger);
        let s = LedgerSummary::from(&rec.ledger);
        per_frame.push(FrameReport {
            frame: rec.index,
            key: rec.key,
            gop_position: rec.gop_position,
            key_flops: s.key_flops,
            me_flops: s.me_flops,
            res_flops: s.res_flops,
            unmatched_flops: s.unmatched_flops,
            total_flops: s.total_flops,
            bytes_moved: s.bytes_moved,
            baseline_flops: run.dense_frame_flops,
            delta_flops_pct: savings_pct(s.total_flops, run.dense_frame_flops),
            alpha: (!rec.key).then(|| frame_stats.alpha()),
            beta: (!rec.key).then(|| frame_stats.beta()),
            oracle_max_abs: rec.oracle.map(|o| o.max_abs),
            oracle_mean_abs: rec.oracle.map(|o| o.mean_abs),
        });
    }

    let n_frames = run.frames.len() as u64;
    let mut all_stats = LayerFrameStats::default();
    let mut closed_form_total = MevcBreakdown::default();
    let mut exact_total = MevcBreakdown::default();
    let mut nonkey_mevc = 0u64;
    let mut per_layer = Vec::with_capacity(n_layers);
    for (idx, acc) in accs.iter().enumerate() {
        let d = first.layers[idx].dims;
        let dense = d.dense_flops();
        let baseline = dense * n_frames;
        all_stats.add(&acc.stats);
        closed_form_total.add(&acc.closed_form);
        exact_total.add(&acc.exact);
        nonkey_mevc += acc.nonkey_mevc;

        let alpha = ratio(acc.stats.matched, acc.stats.positions);
        let beta = ratio(acc.stats.residual_nnz, acc.stats.matched * acc.stats.block_len);
        let model_at = alpha.map(|a| d.cost_model(a, beta.unwrap_or(0.0)));
        let nonkey_dense = dense * acc.nonkey_frames;
        per_layer.push(LayerReport {
            layer: idx,
            kernel_size: d.kernel_size,
            stride: d.stride,
            in_channels: d.in_channels,
            out_channels: d.out_channels,
            out_h: d.out_h,
            out_w: d.out_w,
            search_range: d.search_range,
            totals: LedgerSummary::from(&acc.ledger),
            baseline_flops: baseline,
            delta_flops_pct: savings_pct(acc.ledger.total(), baseline),
            measured_alpha: alpha,
            measured_beta: beta,
            interior_alpha: ratio(acc.stats.interior_matched, acc.stats.interior_positions),
            nonkey_savings: (nonkey_dense > 0).then(|| 1.0 - acc.nonkey_mevc as f64 / nonkey_dense as f64),
            model: ModelSummary {
                paper_variant: ModelVariant::finish(
                    acc.closed_form,
                    acc.nonkey_mevc,
                    model_at.as_ref().map(acceleration),
                ),
                exact_variant: ModelVariant::finish(
                    acc.exact,
                    acc.nonkey_mevc,
                    model_at.as_ref().map(acceleration_exact),
                ),
            },
        });
    }

    let oracle_error = if run.frames.iter().all(|f| f.oracle.is_some()) {
        let mut worst = (0usize, f32::NEG_INFINITY);
        let mut mean_sum = 0.0;
        for rec in &run.frames {
            let o = rec.oracle.expect("checked above");
            if o.max_abs > worst.1 {
                worst = (rec.index, o.max_abs);
            }
            mean_sum += o.mean_abs;
        }
        Some(OracleSummary {
            max_abs: worst.1,
            mean_abs: mean_sum / run.frames.len() as f64,
            worst_frame: worst.0,
        })
    } else {
        None
    };

    let baseline = run.dense_frame_flops * n_frames;
    Ok(Report {
        config,
        per_layer,
        per_frame,
        totals: LedgerSummary::from(&totals),
        baseline_totals: LedgerSummary::dense(baseline),
        delta_flops_pct: savings_pct(totals.total(), baseline),
        measured_alpha: ratio(all_stats.matched, all_stats.positions),
        measured_beta: ratio(all_stats.residual_nnz, all_stats.matched * all_stats.block_len),
        interior_alpha: ratio(all_stats.interior_matched, all_stats.interior_positions),
        model: ModelSummary {
            paper_variant: ModelVariant::finish(closed_form_total, nonkey_mevc, None),
            exact_variant: ModelVariant::finish(exact_total, nonkey_mevc, None),
        },
        oracle_error,
        isp_gflops_range: ISP_GFLOPS_RANGE,
    })
}

impl Report {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    /// `per_frame` as CSV, one header row plus one row per frame.
    pub fn frames_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.per_frame {
            w.serialize(row)?;
        }
        w.into_inner().map_err(|e| MevcError::param(format!("csv buffer: {e}")))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_json()?)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.frames_csv()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gop::{run_sequence, GopConfig, LayerShape, Network};
    use crate::layer::Activation;
    use crate::motion::MotionParams;
    use crate::synth::{generate, SceneKind, SceneSpec};

    fn net(params: &MotionParams) -> Network {
        let shapes = [
            LayerShape {
                out_channels: 8,
                kernel_size: 3,
                stride: 1,
                activation: Activation::Relu,
            },
            LayerShape {
                out_channels: 8,
                kernel_size: 3,
                stride: 2,
                activation: Activation::Identity,
            },
        ];
        Network::random(3, &shapes, params, 11).unwrap()
    }

    fn run(kind: SceneKind, gop: usize, params: MotionParams) -> Report {
        let frames = generate(&SceneSpec::new(kind, 16, 16, 6).with_motion(1, 0).with_seed(2)).unwrap();
        let mut n = net(&params);
        let r = run_sequence(&mut n, &frames, GopConfig { gop_length: gop }, true).unwrap();
        build_report(serde_json::json!({"gop": gop}), &r).unwrap()
    }

    #[test]
    fn all_key_run_has_zero_delta() {
        let r = run(SceneKind::GlobalTranslate, 1, MotionParams::default());
        assert_eq!(r.delta_flops_pct, 0.0);
        assert_eq!(r.totals, r.baseline_totals);
        assert!(r.measured_alpha.is_none());
        assert_eq!(r.oracle_error.unwrap().max_abs, 0.0);
    }

    #[test]
    fn delta_is_self_consistent() {
        let r = run(SceneKind::Static, 6, MotionParams::default());
        let want = (1.0 - r.totals.total_flops as f64 / r.baseline_totals.total_flops as f64) * 100.0;
        assert_eq!(r.delta_flops_pct, want);
        assert!(r.delta_flops_pct > 0.0);
        let sum: u64 = r.per_frame.iter().map(|f| f.total_flops).sum();
        assert_eq!(sum, r.totals.total_flops);
        let layer_sum: u64 = r.per_layer.iter().map(|l| l.totals.total_flops).sum();
        assert_eq!(layer_sum, r.totals.total_flops);
    }

    #[test]
    fn exact_model_reconciles_without_early_stop() {
        let params = MotionParams {
            early_stop_density: None,
            ..MotionParams::default()
        };
        let r = run(SceneKind::GlobalTranslate, 6, params);
        assert_eq!(r.model.exact_variant.discrepancy_flops, 0);
        for l in &r.per_layer {
            assert_eq!(l.model.exact_variant.discrepancy_flops, 0);
            let acc = l.model.exact_variant.acceleration.unwrap();
            assert!((acc - l.nonkey_savings.unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_has_one_row_per_frame() {
        let r = run(SceneKind::Static, 3, MotionParams::default());
        let text = String::from_utf8(r.frames_csv().unwrap()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 6);
        assert!(lines[0].starts_with("frame,key,gop_position,key_flops"));
        let json: serde_json::Value = serde_json::from_slice(&r.to_json().unwrap()).unwrap();
        for key in [
            "config",
            "per_layer",
            "per_frame",
            "totals",
            "baseline_totals",
            "delta_flops_pct",
            "measured_alpha",
            "measured_beta",
            "model",
            "oracle_error",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert!(json["model"].get("paper_variant").is_some());
    }
}
