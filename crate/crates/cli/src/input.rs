//! Turning `--input`/`--scene` into network-ready frames.

use std::path::{Path, PathBuf};

use mevc::bayer::{self, BayerFrame, BayerPattern};
use mevc::synth::{self, SceneKind, SceneSpec};
use mevc::{FeatureMap, MevcError};
use serde_json::json;

use crate::Failure;

/// How a mosaic enters the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Layout {
    /// Four channels (R, G1, G2, B) at half resolution.
    Packed,
    /// The mosaic itself as one full-resolution channel.
    Plane,
}

impl Layout {
    fn apply(self, f: &BayerFrame) -> FeatureMap {
        match self {
            Layout::Packed => bayer::pack(f),
            Layout::Plane => f.to_plane_map(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Layout::Packed => "packed",
            Layout::Plane => "plane",
        }
    }
}

pub const BUILTIN_SCENES: [&str; 4] = ["static", "translate", "blocks", "noisy"];

fn builtin(name: &str, seed: u64) -> Option<SceneSpec> {
    let base = |kind| SceneSpec::new(kind, 64, 64, 24).with_seed(seed);
    // Motion is even so the mosaic phase, and thus the packed layout, is kept.
    Some(match name {
        "static" => base(SceneKind::Static),
        "translate" => base(SceneKind::GlobalTranslate).with_motion(2, 0),
        "blocks" => base(SceneKind::BlockTranslate).with_motion(2, 2),
        "noisy" => base(SceneKind::NoiseMix).with_motion(2, 0).with_noise(0.03),
        _ => return None,
    })
}

/// A builtin scene name or a path to a scene JSON file. `seed` overrides the
/// file's seed when given.
pub fn resolve_scene(arg: &str, seed: Option<u64>) -> Result<SceneSpec, Failure> {
    let path = Path::new(arg);
    if !path.exists() {
        if let Some(spec) = builtin(arg, seed.unwrap_or(0)) {
            return Ok(spec);
        }
        let msg = format!(
            "scene {arg:?} is neither a file nor one of {}",
            BUILTIN_SCENES.join(", ")
        );
        // A bare word is a mistyped builtin; anything path-like is a missing file.
        let path_like = arg.contains(std::path::MAIN_SEPARATOR) || arg.contains('/') || arg.contains('.');
        return Err(if path_like {
            Failure::Io(msg)
        } else {
            Failure::Usage(msg)
        });
    }
    let bytes = std::fs::read(path).map_err(|e| Failure::Io(format!("{arg}: {e}")))?;
    let mut spec: SceneSpec = serde_json::from_slice(&bytes).map_err(|e| Failure::Usage(format!("{arg}: {e}")))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(spec)
}

pub struct Source {
    pub input: Option<PathBuf>,
    pub sidecar: Option<PathBuf>,
    pub scene: Option<String>,
    pub pattern: BayerPattern,
    pub layout: Layout,
    pub seed: Option<u64>,
}

pub struct Frames {
    pub frames: Vec<FeatureMap>,
    pub provenance: serde_json::Value,
}

pub fn default_sidecar(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

pub fn load(src: &Source) -> Result<Frames, Failure> {
    match (&src.input, &src.scene) {
        (Some(_), Some(_)) => Err(Failure::Usage("give either --input or --scene, not both".into())),
        (None, None) => Err(Failure::Usage(
            "an input is required: --input <raw> or --scene <spec>".into(),
        )),
        (Some(raw), None) => {
            let sidecar = src.sidecar.clone().unwrap_or_else(|| default_sidecar(raw));
            let reader = bayer::load_raw_sequence(raw, &sidecar).map_err(Failure::from)?;
            let meta = *reader.meta();
            let mut frames = Vec::with_capacity(meta.frame_count);
            for f in reader {
                frames.push(src.layout.apply(&f.map_err(Failure::from)?));
            }
            Ok(Frames {
                frames,
                provenance: json!({
                    "raw": raw,
                    "sidecar": sidecar,
                    "meta": meta,
                    "layout": src.layout.name(),
                }),
            })
        }
        (None, Some(scene)) => {
            let spec = resolve_scene(scene, src.seed)?;
            let mosaics = synth::generate_bayer(&spec, src.pattern).map_err(Failure::from)?;
            Ok(Frames {
                frames: mosaics.iter().map(|m| src.layout.apply(m)).collect(),
                provenance: json!({
                    "scene": spec,
                    "pattern": src.pattern,
                    "layout": src.layout.name(),
                }),
            })
        }
    }
}

impl From<MevcError> for Failure {
    fn from(e: MevcError) -> Self {
        let msg = e.to_string();
        match e {
            _ if e.is_io() => Failure::Io(msg),
            MevcError::Truncated { .. } | MevcError::Csv(_) => Failure::Io(msg),
            MevcError::InvalidParam(_) | MevcError::Shape(_) | MevcError::UnknownPattern(_) | MevcError::Json(_) => {
                Failure::Usage(msg)
            }
            _ => Failure::Assertion(msg),
        }
    }
}
