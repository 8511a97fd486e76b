//! Whole-run drivers: single experiments, parameter sweeps and the
//! four-setting ablation check, plus the invariant checks applied to a run.

use serde::{Deserialize, Serialize};

use crate::analysis::{build_report, lossy_error_bound, LayerErrorTerms, Report};
use crate::error::{MevcError, Result};
use crate::gop::{run_sequence, GopConfig, LayerShape, Network, SequenceRun};
use crate::layer::Activation;
use crate::motion::MotionParams;
use crate::tensor::FeatureMap;

/// Outputs within this distance of the dense network count as identical.
pub const LOSSLESS_TOL: f32 = 1e-4;
/// Smallest max-abs deviation that counts as a measurable error.
pub const MEASURABLE_ERR: f32 = 1e-3;

/// Algorithm parameters of one run. Defaults: GOP 12, τ = 0.01, R = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub gop_length: usize,
    #[serde(flatten)]
    pub motion: MotionParams,
    pub oracle: bool,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            gop_length: 12,
            motion: MotionParams::default(),
            oracle: false,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gop_length == 0 {
            return Err(MevcError::param("gop_length must be >= 1"));
        }
        self.motion.validate()
    }

    pub fn gop(&self) -> GopConfig {
        GopConfig {
            gop_length: self.gop_length,
        }
    }
}

/// Three-layer network used when no network file is given.
pub fn default_shapes() -> Vec<LayerShape> {
    vec![
        LayerShape {
            out_channels: 16,
            kernel_size: 3,
            stride: 1,
            activation: Activation::Relu,
        },
        LayerShape {
            out_channels: 32,
            kernel_size: 3,
            stride: 2,
            activation: Activation::Relu,
        },
        LayerShape {
            out_channels: 32,
            kernel_size: 3,
            stride: 1,
            activation: Activation::Identity,
        },
    ]
}

pub fn default_network(input_channels: usize, cfg: &ExperimentConfig) -> Result<Network> {
    Network::random(input_channels, &default_shapes(), &cfg.motion, cfg.seed)
}

/// Runs `frames` through `net` under `cfg`; `provenance` is merged into the
/// report's `config` next to the resolved parameters.
pub fn run_experiment(
    net: &mut Network,
    frames: &[FeatureMap],
    cfg: &ExperimentConfig,
    provenance: serde_json::Value,
) -> Result<(Report, SequenceRun)> {
    cfg.validate()?;
    net.apply_global(&cfg.motion, true)?;
    let run = run_sequence(net, frames, cfg.gop(), cfg.oracle)?;
    let report = build_report(resolved_config(net, cfg, provenance)?, &run)?;
    Ok((report, run))
}

/// Global parameters, every layer's effective parameters, and caller extras.
pub fn resolved_config(
    net: &Network,
    cfg: &ExperimentConfig,
    provenance: serde_json::Value,
) -> Result<serde_json::Value> {
    let layers: Vec<_> = net.layers().iter().map(|l| *l.params()).collect();
    Ok(serde_json::json!({
        "experiment": cfg,
        "layers": layers,
        "input": provenance,
    }))
}

/// A broken invariant found after a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub frame: Option<usize>,
    pub layer: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match (self.frame, self.layer) {
            (Some(fr), Some(l)) => write!(f, "frame {fr}, layer {l}: {}", self.message),
            (Some(fr), None) => write!(f, "frame {fr}: {}", self.message),
            (None, Some(l)) => write!(f, "layer {l}: {}", self.message),
            (None, None) => f.write_str(&self.message),
        }
    }
}

fn error_terms(net: &Network) -> Vec<LayerErrorTerms> {
    net.layers()
        .iter()
        .map(|l| LayerErrorTerms {
            threshold: l.params().motion.threshold as f64,
            filter_l1: l.spec().max_filter_l1(),
            compensate: l.params().compensate,
        })
        .collect()
}

/// Checks a finished run against the properties that must always hold:
/// ledger bookkeeping, report self-consistency, exact model reconciliation
/// when early stopping is off everywhere, and (with the oracle) losslessness
/// at τ = 0 or the error bound for τ > 0.
pub fn check_invariants(net: &Network, run: &SequenceRun, report: &Report) -> Vec<Violation> {
    let mut out = Vec::new();
    for rec in &run.frames {
        let mut sum = crate::analysis::FlopsLedger::default();
        for lr in &rec.layers {
            sum.merge(&lr.ledger);
        }
        if sum != rec.ledger {
            out.push(Violation {
                frame: Some(rec.index),
                layer: None,
                message: "frame ledger differs from the sum of its layer ledgers".into(),
            });
        }
    }
    let t = &report.totals;
    if t.total_flops != t.key_flops + t.me_flops + t.res_flops + t.unmatched_flops {
        out.push(Violation {
            frame: None,
            layer: None,
            message: "total FLOPs differ from the sum of categories".into(),
        });
    }
    let base = report.baseline_totals.total_flops as f64;
    let want = (1.0 - t.total_flops as f64 / base) * 100.0;
    if (report.delta_flops_pct - want).abs() > 1e-9 {
        out.push(Violation {
            frame: None,
            layer: None,
            message: format!(
                "delta_flops_pct {} disagrees with totals ({want})",
                report.delta_flops_pct
            ),
        });
    }

    let no_early_stop = net
        .layers()
        .iter()
        .all(|l| l.params().motion.early_stop_density.is_none());
    if no_early_stop {
        for l in &report.per_layer {
            let d = l.model.exact_variant.discrepancy_flops;
            if d != 0 {
                out.push(Violation {
                    frame: None,
                    layer: Some(l.layer),
                    message: format!("instrumented FLOPs differ from the exact model by {d}"),
                });
            }
        }
    }

    let terms = error_terms(net);
    let lossless = net
        .layers()
        .iter()
        .all(|l| l.params().compensate && l.params().motion.threshold == 0.0);
    for rec in &run.frames {
        let Some(o) = rec.oracle else { continue };
        if lossless {
            if o.max_abs > LOSSLESS_TOL {
                out.push(Violation {
                    frame: Some(rec.index),
                    layer: None,
                    message: format!("lossless setting deviates from dense output by {}", o.max_abs),
                });
            }
        } else if let Some(bound) = lossy_error_bound(&terms, rec.gop_position) {
            if o.max_abs as f64 > bound + LOSSLESS_TOL as f64 {
                out.push(Violation {
                    frame: Some(rec.index),
                    layer: None,
                    message: format!("output error {} exceeds the threshold bound {bound}", o.max_abs),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Gop,
    Threshold,
    SearchRange,
}

impl std::str::FromStr for SweepAxis {
    type Err = MevcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gop" | "gop_length" => Ok(SweepAxis::Gop),
            "threshold" | "tau" => Ok(SweepAxis::Threshold),
            "search_range" | "range" => Ok(SweepAxis::SearchRange),
            _ => Err(MevcError::param(format!(
                "unknown sweep axis {s:?}; expected gop, threshold or search_range"
            ))),
        }
    }
}

impl SweepAxis {
    fn apply(self, cfg: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut c = *cfg;
        let as_count = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(MevcError::param(format!(
                    "{self:?} sweep needs non-negative integers, got {v}"
                )))
            }
        };
        match self {
            SweepAxis::Gop => c.gop_length = as_count(value)?,
            SweepAxis::Threshold => c.motion.threshold = value as f32,
            SweepAxis::SearchRange => c.motion.search_range = as_count(value)?,
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub total_flops: u64,
    pub gflops: f64,
    pub me_flops: u64,
    pub delta_flops_pct: f64,
    pub measured_alpha: Option<f64>,
    pub measured_beta: Option<f64>,
    pub oracle_max_abs: Option<f32>,
    pub oracle_mean_abs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    /// True when the given values were not ascending and had to be sorted.
    pub reordered: bool,
    pub config: serde_json::Value,
    pub baseline_flops: u64,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.into_inner().map_err(|e| MevcError::param(format!("csv buffer: {e}")))
    }
}

/// One run per axis value on the same frames and network. Values are sorted
/// ascending (with a warning if they were not) and duplicates dropped.
pub fn sweep(
    net: &mut Network,
    frames: &[FeatureMap],
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    provenance: serde_json::Value,
) -> Result<SweepReport> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(MevcError::param("sweep values must be finite"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    sorted.dedup();
    if sorted.len() < 2 {
        return Err(MevcError::param("a sweep needs at least two distinct values"));
    }
    let reordered = sorted.as_slice() != values;
    if reordered {
        log::warn!("sweep values {values:?} reordered to {sorted:?}");
    }

    let mut rows = Vec::with_capacity(sorted.len());
    let mut baseline = 0;
    for &v in &sorted {
        let c = axis.apply(cfg, v)?;
        let (report, _) = run_experiment(net, frames, &c, serde_json::Value::Null)?;
        baseline = report.baseline_totals.total_flops;
        rows.push(SweepRow {
            value: v,
            total_flops: report.totals.total_flops,
            gflops: report.totals.total_flops as f64 / 1e9,
            me_flops: report.totals.me_flops,
            delta_flops_pct: report.delta_flops_pct,
            measured_alpha: report.measured_alpha,
            measured_beta: report.measured_beta,
            oracle_max_abs: report.oracle_error.map(|o| o.max_abs),
            oracle_mean_abs: report.oracle_error.map(|o| o.mean_abs),
        });
    }
    Ok(SweepReport {
        axis,
        reordered,
        config: resolved_config(net, cfg, provenance)?,
        baseline_flops: baseline,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SettingResult {
    pub setting: usize,
    pub name: &'static str,
    pub total_flops: u64,
    pub delta_flops_pct: f64,
    /// Largest deviation from setting 1 over all frames.
    pub max_abs_err: f32,
    pub mean_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub setting: usize,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub config: serde_json::Value,
    pub settings: Vec<SettingResult>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl VerifyReport {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.settings {
            w.serialize(s)?;
        }
        w.into_inner().map_err(|e| MevcError::param(format!("csv buffer: {e}")))
    }

    /// Human-readable pass/fail matrix.
    pub fn matrix(&self) -> String {
        let mut s = String::from("setting  name                        GFLOPs      dFLOPs%   max|err|\n");
        for r in &self.settings {
            s += &format!(
                "{:<8} {:<27} {:<11.6} {:<9.3} {:.3e}\n",
                r.setting,
                r.name,
                r.total_flops as f64 / 1e9,
                r.delta_flops_pct,
                r.max_abs_err
            );
        }
        for c in &self.checks {
            s += &format!(
                "[{}] setting {}: {} ({})\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.setting,
                c.name,
                c.detail
            );
        }
        s
    }
}

/// Runs the network with every layer's threshold and compensation forced.
fn forced_run(
    net: &mut Network,
    frames: &[FeatureMap],
    cfg: &ExperimentConfig,
    gop: usize,
    threshold: Option<f32>,
    compensate: bool,
) -> Result<SequenceRun> {
    net.apply_global(&cfg.motion, compensate)?;
    for layer in net.layers_mut() {
        let mut p = *layer.params();
        p.compensate = compensate;
        if let Some(t) = threshold {
            p.motion.threshold = t;
        }
        layer.set_params(p)?;
    }
    run_sequence(net, frames, GopConfig { gop_length: gop }, false)
}

/// The four-setting ablation: dense convolution; MEVC without residual
/// compensation; with compensation at τ = 0; with compensation at the
/// configured τ. Each MEVC setting is compared against setting 1.
pub fn verify(
    net: &mut Network,
    frames: &[FeatureMap],
    cfg: &ExperimentConfig,
    provenance: serde_json::Value,
) -> Result<VerifyReport> {
    cfg.validate()?;
    let tau = cfg.motion.threshold;
    let dense = forced_run(net, frames, cfg, 1, None, true)?;
    let runs = [
        (1, "full convolution", dense.clone()),
        (
            2,
            "no compensation",
            forced_run(net, frames, cfg, cfg.gop_length, None, false)?,
        ),
        (
            3,
            "compensation, tau=0",
            forced_run(net, frames, cfg, cfg.gop_length, Some(0.0), true)?,
        ),
        (
            4,
            "compensation, threshold",
            forced_run(net, frames, cfg, cfg.gop_length, None, true)?,
        ),
    ];
    // Network is left in setting-4 state; its parameters feed the error bound.
    let terms = error_terms(net);

    let baseline = dense.ledger.total();
    let mut settings = Vec::new();
    let mut per_frame_err: Vec<Vec<f32>> = Vec::new();
    for (id, name, run) in &runs {
        let mut max_abs = 0f32;
        let mut mean = 0f64;
        let mut frame_errs = Vec::with_capacity(frames.len());
        for (a, b) in run.outputs.iter().zip(&dense.outputs) {
            let m = a.max_abs_diff(b)?;
            frame_errs.push(m);
            max_abs = max_abs.max(m);
            mean += a.mean_abs_diff(b)?;
        }
        per_frame_err.push(frame_errs);
        settings.push(SettingResult {
            setting: *id,
            name,
            total_flops: run.ledger.total(),
            delta_flops_pct: (1.0 - run.ledger.total() as f64 / baseline as f64) * 100.0,
            max_abs_err: max_abs,
            mean_abs_err: mean / frames.len() as f64,
        });
    }

    let mut checks = Vec::new();
    let s2 = &settings[1];
    checks.push(Check {
        name: "no-compensation error is measurable",
        setting: 2,
        passed: s2.max_abs_err > MEASURABLE_ERR,
        detail: format!("max|err| {:.3e} > {MEASURABLE_ERR:e}", s2.max_abs_err),
    });
    let s3 = &settings[2];
    checks.push(Check {
        name: "tau=0 output matches full convolution",
        setting: 3,
        passed: s3.max_abs_err <= LOSSLESS_TOL,
        detail: format!("max|err| {:.3e} <= {LOSSLESS_TOL:e}", s3.max_abs_err),
    });

    let run4 = &runs[3].2;
    let mut worst_excess = f64::NEG_INFINITY;
    for (rec, err) in run4.frames.iter().zip(&per_frame_err[3]) {
        let bound = lossy_error_bound(&terms, rec.gop_position).unwrap_or(f64::INFINITY);
        worst_excess = worst_excess.max(*err as f64 - bound);
    }
    checks.push(Check {
        name: "thresholded error within bound",
        setting: 4,
        passed: worst_excess <= LOSSLESS_TOL as f64,
        detail: format!("max(err - bound) {worst_excess:.3e} <= {LOSSLESS_TOL:e}"),
    });

    let (f3, f4) = (settings[2].total_flops, settings[3].total_flops);
    let thresholds: Vec<f32> = net.layers().iter().map(|l| l.params().motion.threshold).collect();
    if thresholds.iter().all(|&t| t == 0.0) {
        checks.push(Check {
            name: "tau=0 config: settings 3 and 4 coincide",
            setting: 4,
            passed: f3 == f4 && runs[2].2.outputs == run4.outputs,
            detail: format!("{f3} == {f4} FLOPs"),
        });
    } else {
        checks.push(Check {
            name: "threshold saves FLOPs over tau=0",
            setting: 4,
            passed: f4 < f3,
            detail: format!("{f4} < {f3} FLOPs (tau={tau})"),
        });
    }

    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport {
        config: resolved_config(net, cfg, provenance)?,
        settings,
        checks,
        passed,
    })
}
