//! Group-of-pictures scheduling over a stack of MEVC layers.
//!
//! The first frame of every GOP goes through every layer densely and
//! resets all caches; the following frames are predicted from the frame
//! immediately before them.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{CostModel, FlopsLedger};
use crate::error::{MevcError, Result};
use crate::layer::{Activation, LayerFrameStats, LayerParams, MevcLayer};
use crate::motion::MotionParams;
use crate::tensor::{weights, ConvSpec, FeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GopConfig {
    pub gop_length: usize,
}

impl Default for GopConfig {
    fn default() -> Self {
        GopConfig { gop_length: 12 }
    }
}

/// Key-frame indices `{0, L, 2L, ...}` below `frame_count`.
pub fn segment(frame_count: usize, gop_length: usize) -> Result<Vec<usize>> {
    if gop_length == 0 {
        return Err(MevcError::param("gop_length must be >= 1"));
    }
    if frame_count == 0 {
        return Err(MevcError::param("frame_count must be >= 1"));
    }
    Ok((0..frame_count).step_by(gop_length).collect())
}

/// Per-layer overrides of the global motion parameters. Absent fields inherit.
/// A negative `early_stop_density` disables early stopping for the layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayerOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub search_range: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub early_stop_density: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub match_max_density: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compensate: Option<bool>,
}

impl LayerOverrides {
    pub fn resolve(&self, global: &MotionParams, compensate: bool) -> LayerParams {
        LayerParams {
            motion: MotionParams {
                search_range: self.search_range.unwrap_or(global.search_range),
                threshold: self.threshold.unwrap_or(global.threshold),
                early_stop_density: match self.early_stop_density {
                    Some(v) if v < 0.0 => None,
                    Some(v) => Some(v),
                    None => global.early_stop_density,
                },
                match_max_density: self.match_max_density.unwrap_or(global.match_max_density),
            },
            activation: self.activation.unwrap_or_default(),
            compensate: self.compensate.unwrap_or(compensate),
        }
    }
}

/// One entry of a network description file. Paths are relative to the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub weights: PathBuf,
    /// Defaults to `weights` with a `.json` extension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar: Option<PathBuf>,
    #[serde(default)]
    pub params: LayerOverrides,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_scale: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_shift: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub layers: Vec<LayerEntry>,
}

/// Shape of a randomly initialized layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub activation: Activation,
}

/// Geometry of one layer at a given input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerDims {
    pub kernel_size: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub search_range: usize,
}

impl LayerDims {
    pub fn dense_flops(&self) -> u64 {
        2 * (self.kernel_size * self.kernel_size * self.in_channels * self.out_channels) as u64
            * (self.out_h * self.out_w) as u64
    }

    pub fn cost_model(&self, alpha: f64, beta: f64) -> CostModel {
        CostModel {
            kernel_size: self.kernel_size,
            stride: self.stride,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            out_h: self.out_h,
            out_w: self.out_w,
            search_range: self.search_range,
            alpha,
            beta,
        }
    }
}

/// An ordered stack of MEVC layers.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<MevcLayer>,
    overrides: Vec<LayerOverrides>,
}

impl Network {
    pub fn new(layers: Vec<MevcLayer>) -> Result<Self> {
        let overrides = layers
            .iter()
            .map(|l| {
                let p = l.params();
                LayerOverrides {
                    activation: Some(p.activation),
                    ..Default::default()
                }
            })
            .collect();
        Self::with_overrides(layers, overrides)
    }

    fn with_overrides(layers: Vec<MevcLayer>, overrides: Vec<LayerOverrides>) -> Result<Self> {
        if layers.is_empty() {
            return Err(MevcError::param("network needs at least one layer"));
        }
        for (idx, pair) in layers.windows(2).enumerate() {
            let (a, b) = (pair[0].spec(), pair[1].spec());
            if a.out_channels() != b.in_channels() {
                return Err(MevcError::shape(format!(
                    "layer {idx} emits {} channels but layer {} expects {}",
                    a.out_channels(),
                    idx + 1,
                    b.in_channels()
                )));
            }
        }
        Ok(Network { layers, overrides })
    }

    /// Seeded He-uniform initialization with `same` padding (`k/2`).
    pub fn random(input_channels: usize, shapes: &[LayerShape], params: &MotionParams, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = input_channels;
        let mut layers = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let k = shape.kernel_size;
            let fan_in = (c_in * k * k) as f32;
            let bound = (6.0 / fan_in).sqrt();
            let w = (0..shape.out_channels * c_in * k * k)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            let b = (0..shape.out_channels).map(|_| rng.gen_range(-0.1f32..0.1)).collect();
            let spec = ConvSpec::new(c_in, shape.out_channels, k, shape.stride, k / 2, w, Some(b))?;
            let lp = LayerParams {
                motion: *params,
                activation: shape.activation,
                compensate: true,
            };
            layers.push(MevcLayer::new(spec, lp)?);
            c_in = shape.out_channels;
        }
        Self::new(layers)
    }

    /// Loads a network description; per-layer parameter blocks override `global`.
    pub fn load(path: &Path, global: &MotionParams) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MevcError::io(path, e))?;
        let file: NetworkFile = serde_json::from_slice(&bytes)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut layers = Vec::with_capacity(file.layers.len());
        let mut overrides = Vec::with_capacity(file.layers.len());
        for entry in &file.layers {
            let wpath = base.join(&entry.weights);
            let spath = match &entry.sidecar {
                Some(s) => base.join(s),
                None => wpath.with_extension("json"),
            };
            let mut spec = weights::load(&wpath, &spath)?;
            match (&entry.post_scale, &entry.post_shift) {
                (None, None) => {}
                (scale, shift) => {
                    let n = spec.out_channels();
                    let ones = vec![1.0; n];
                    let zeros = vec![0.0; n];
                    spec = spec.fold_affine(scale.as_deref().unwrap_or(&ones), shift.as_deref().unwrap_or(&zeros))?;
                }
            }
            layers.push(MevcLayer::new(spec, entry.params.resolve(global, true))?);
            overrides.push(entry.params);
        }
        Self::with_overrides(layers, overrides)
    }

    /// Writes `network.json` plus one weight file and sidecar per layer into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| MevcError::io(dir, e))?;
        let mut entries = Vec::new();
        for (idx, (layer, ov)) in self.layers.iter().zip(&self.overrides).enumerate() {
            let wname = PathBuf::from(format!("layer{idx}.bin"));
            let sname = PathBuf::from(format!("layer{idx}.json"));
            weights::save(layer.spec(), &dir.join(&wname), &dir.join(&sname))?;
            entries.push(LayerEntry {
                weights: wname,
                sidecar: Some(sname),
                params: *ov,
                post_scale: None,
                post_shift: None,
            });
        }
        let path = dir.join("network.json");
        let json = serde_json::to_vec_pretty(&NetworkFile { layers: entries })?;
        crate::fsutil::write_atomic(&path, &json)?;
        Ok(path)
    }

    /// Re-resolves every layer's parameters against new global values.
    pub fn apply_global(&mut self, global: &MotionParams, compensate: bool) -> Result<()> {
        for (layer, ov) in self.layers.iter_mut().zip(&self.overrides) {
            layer.set_params(ov.resolve(global, compensate))?;
        }
        Ok(())
    }

    pub fn layers(&self) -> &[MevcLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [MevcLayer] {
        &mut self.layers
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].spec().in_channels()
    }

    pub fn reset(&mut self) {
        for l in &mut self.layers {
            l.reset();
        }
    }

    /// Geometry of every layer for an input of `h x w`.
    pub fn dims(&self, h: usize, w: usize) -> Result<Vec<LayerDims>> {
        let (mut h, mut w) = (h, w);
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let s = l.spec();
            let (oh, ow) = s.output_dims(h, w)?;
            out.push(LayerDims {
                kernel_size: s.kernel_size(),
                stride: s.stride(),
                in_channels: s.in_channels(),
                out_channels: s.out_channels(),
                in_h: h,
                in_w: w,
                out_h: oh,
                out_w: ow,
                search_range: l.params().motion.search_range,
            });
            (h, w) = (oh, ow);
        }
        Ok(out)
    }

    /// Dense cost of one frame through every layer.
    pub fn dense_flops(&self, h: usize, w: usize) -> Result<u64> {
        Ok(self.dims(h, w)?.iter().map(LayerDims::dense_flops).sum())
    }

    /// Plain dense forward pass; touches no cache.
    pub fn forward_dense(&self, input: &FeatureMap) -> Result<FeatureMap> {
        let mut x = self.layers[0].forward_dense(input)?;
        for l in &self.layers[1..] {
            x = l.forward_dense(&x)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleError {
    pub max_abs: f32,
    pub mean_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRecord {
    pub dims: LayerDims,
    pub ledger: FlopsLedger,
    /// Present on non-key frames.
    pub stats: Option<LayerFrameStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameRecord {
    pub index: usize,
    pub key: bool,
    /// Frames since the last key frame (0 on key frames).
    pub gop_position: usize,
    pub ledger: FlopsLedger,
    pub layers: Vec<LayerRecord>,
    pub oracle: Option<OracleError>,
}

/// Streams frames through a network, one at a time.
pub struct GopRunner<'a> {
    net: &'a mut Network,
    config: GopConfig,
    oracle: bool,
    next_index: usize,
    shape: Option<(usize, usize, usize)>,
}

impl<'a> GopRunner<'a> {
    pub fn new(net: &'a mut Network, config: GopConfig, oracle: bool) -> Result<Self> {
        if config.gop_length == 0 {
            return Err(MevcError::param("gop_length must be >= 1"));
        }
        net.reset();
        Ok(GopRunner {
            net,
            config,
            oracle,
            next_index: 0,
            shape: None,
        })
    }

    pub fn process(&mut self, frame: &FeatureMap) -> Result<(FeatureMap, FrameRecord)> {
        let index = self.next_index;
        match self.shape {
            None => {
                if frame.channels() != self.net.input_channels() {
                    return Err(MevcError::Frame {
                        frame: index,
                        reason: format!(
                            "{} channels, network expects {}",
                            frame.channels(),
                            self.net.input_channels()
                        ),
                    });
                }
                self.shape = Some(frame.shape());
            }
            Some(shape) if shape != frame.shape() => {
                return Err(MevcError::Frame {
                    frame: index,
                    reason: format!("shape {:?} differs from sequence shape {:?}", frame.shape(), shape),
                });
            }
            Some(_) => {}
        }
        let dims = self
            .net
            .dims(frame.height(), frame.width())
            .map_err(|e| MevcError::Frame {
                frame: index,
                reason: e.to_string(),
            })?;

        let gop_position = index % self.config.gop_length;
        let key = gop_position == 0;
        if key {
            self.net.reset();
        }

        let mut x = frame.clone();
        let mut layers = Vec::with_capacity(dims.len());
        let mut total = FlopsLedger::default();
        for (li, (layer, d)) in self.net.layers_mut().iter_mut().zip(&dims).enumerate() {
            let wrap = |e: MevcError| MevcError::Layer {
                frame: index,
                layer: li,
                source: Box::new(e),
            };
            let mut ledger = FlopsLedger::default();
            let (y, stats) = if key {
                (layer.forward_key(&x, &mut ledger).map_err(wrap)?, None)
            } else {
                let (y, field) = layer.forward_nonkey(&x, &mut ledger).map_err(wrap)?;
                let stats = layer.frame_stats(&field, d.in_h, d.in_w);
                (y, Some(stats))
            };
            total.merge(&ledger);
            layers.push(LayerRecord {
                dims: *d,
                ledger,
                stats,
            });
            x = y;
        }

        let oracle = if self.oracle {
            let want = self.net.forward_dense(frame)?;
            Some(OracleError {
                max_abs: x.max_abs_diff(&want)?,
                mean_abs: x.mean_abs_diff(&want)?,
            })
        } else {
            None
        };

        self.next_index += 1;
        Ok((
            x,
            FrameRecord {
                index,
                key,
                gop_position,
                ledger: total,
                layers,
                oracle,
            },
        ))
    }
}

#[derive(Debug, Clone)]
pub struct SequenceRun {
    pub outputs: Vec<FeatureMap>,
    pub frames: Vec<FrameRecord>,
    pub ledger: FlopsLedger,
    /// Dense all-key cost of one frame.
    pub dense_frame_flops: u64,
}

/// Runs every frame through `net`, resetting caches at GOP boundaries. With
/// `oracle`, each output is also compared against the dense network.
pub fn run_sequence<I>(net: &mut Network, frames: I, config: GopConfig, oracle: bool) -> Result<SequenceRun>
where
    I: IntoIterator,
    I::Item: std::borrow::Borrow<FeatureMap>,
{
    use std::borrow::Borrow;
    let mut runner = GopRunner::new(net, config, oracle)?;
    let mut outputs = Vec::new();
    let mut records = Vec::new();
    let mut ledger = FlopsLedger::default();
    for frame in frames {
        let (y, rec) = runner.process(frame.borrow())?;
        ledger.merge(&rec.ledger);
        outputs.push(y);
        records.push(rec);
    }
    if records.is_empty() {
        return Err(MevcError::param("sequence has no frames"));
    }
    let dense_frame_flops = records[0].layers.iter().map(|l| l.dims.dense_flops()).sum();
    Ok(SequenceRun {
        outputs,
        frames: records,
        ledger,
        dense_frame_flops,
    })
}
