//! Seeded synthetic video with known motion.
//!
//! Motion `(dx, dy)` means every frame is the previous one sampled `(dx, dy)`
//! pixels further along: `frame_t(y, x) = frame_{t-1}(y + dy, x + dx)`. The
//! block found by motion search therefore sits at `+(dx, dy)` in the
//! reference, which is the vector the search reports.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bayer::{mosaic, BayerFrame, BayerPattern};
use crate::error::{MevcError, Result};
use crate::motion::MotionVector;
use crate::tensor::{ConvSpec, FeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Static,
    GlobalTranslate,
    BlockTranslate,
    NoiseMix,
}

/// Rectangle of the moving block on frame 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRect {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub kind: SceneKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub frame_count: usize,
    /// Per-frame `[dx, dy]` in pixels. Ignored by `static`.
    #[serde(default)]
    pub motion: [i32; 2],
    #[serde(default)]
    pub noise_amplitude: f32,
    /// Required by `block_translate`; defaults to the centred half-size block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<BlockRect>,
}

fn default_channels() -> usize {
    3
}

impl SceneSpec {
    pub fn new(kind: SceneKind, height: usize, width: usize, frame_count: usize) -> Self {
        SceneSpec {
            kind,
            seed: 0,
            channels: 3,
            height,
            width,
            frame_count,
            motion: [0, 0],
            noise_amplitude: 0.0,
            block: None,
        }
    }

    pub fn with_motion(mut self, dx: i32, dy: i32) -> Self {
        self.motion = [dx, dy];
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channels = channels;
        self
    }

    pub fn with_noise(mut self, amplitude: f32) -> Self {
        self.noise_amplitude = amplitude;
        self
    }

    pub fn with_block(mut self, block: BlockRect) -> Self {
        self.block = Some(block);
        self
    }

    /// Motion actually applied per frame.
    pub fn effective_motion(&self) -> (i32, i32) {
        match self.kind {
            SceneKind::Static => (0, 0),
            _ => (self.motion[0], self.motion[1]),
        }
    }

    pub fn block_rect(&self) -> BlockRect {
        self.block.unwrap_or(BlockRect {
            y: self.height / 4,
            x: self.width / 4,
            height: (self.height / 2).max(1),
            width: (self.width / 2).max(1),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 || self.frame_count == 0 {
            return Err(MevcError::param("scene dims, channels and frame_count must be >= 1"));
        }
        let (dx, dy) = self.effective_motion();
        if dx.unsigned_abs() as usize >= self.width || dy.unsigned_abs() as usize >= self.height {
            return Err(MevcError::param(format!(
                "motion ({dx}, {dy}) per frame exceeds the {}x{} frame",
                self.height, self.width
            )));
        }
        if !(self.noise_amplitude.is_finite() && self.noise_amplitude >= 0.0) {
            return Err(MevcError::param("noise_amplitude must be finite and >= 0"));
        }
        if self.kind == SceneKind::BlockTranslate {
            let b = self.block_rect();
            if b.height == 0 || b.width == 0 || b.y + b.height > self.height || b.x + b.width > self.width {
                return Err(MevcError::param("block must lie inside the frame"));
            }
        }
        Ok(())
    }

    /// Top-left corner of the moving block on frame `t` (may be off-frame).
    fn block_origin(&self, t: usize) -> (i64, i64) {
        let b = self.block_rect();
        let (dx, dy) = self.effective_motion();
        (b.y as i64 - t as i64 * dy as i64, b.x as i64 - t as i64 * dx as i64)
    }

    fn block_contains(&self, t: usize, y: i64, x: i64) -> bool {
        let b = self.block_rect();
        let (oy, ox) = self.block_origin(t);
        y >= oy && y < oy + b.height as i64 && x >= ox && x < ox + b.width as i64
    }
}

fn texture(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.gen::<f32>()).collect()
}

/// Renders every frame of the scene as a `channels x height x width` map with
/// values in `[0, 1]`.
pub fn generate(spec: &SceneSpec) -> Result<Vec<FeatureMap>> {
    spec.validate()?;
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base = texture(&mut rng, c * h * w);
    let b = spec.block_rect();
    let patch = match spec.kind {
        SceneKind::BlockTranslate => texture(&mut rng, c * b.height * b.width),
        _ => Vec::new(),
    };
    let (dx, dy) = spec.effective_motion();

    let mut frames = Vec::with_capacity(spec.frame_count);
    for t in 0..spec.frame_count {
        let (ty, tx) = (t as i64 * dy as i64, t as i64 * dx as i64);
        let (oy, ox) = spec.block_origin(t);
        let mut frame = FeatureMap::from_fn(c, h, w, |ch, y, x| {
            let (y, x) = (y as i64, x as i64);
            match spec.kind {
                SceneKind::Static => base[(ch * h + y as usize) * w + x as usize],
                SceneKind::GlobalTranslate | SceneKind::NoiseMix => {
                    let (sy, sx) = (y + ty, x + tx);
                    if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                        base[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    }
                }
                SceneKind::BlockTranslate => {
                    if spec.block_contains(t, y, x) {
                        let (py, px) = ((y - oy) as usize, (x - ox) as usize);
                        patch[(ch * b.height + py) * b.width + px]
                    } else {
                        base[(ch * h + y as usize) * w + x as usize]
                    }
                }
            }
        })?;
        if spec.kind == SceneKind::NoiseMix && spec.noise_amplitude > 0.0 {
            let a = spec.noise_amplitude;
            let mut noise = ChaCha8Rng::seed_from_u64(spec.seed);
            noise.set_stream(t as u64 + 1);
            let data: Vec<f32> = frame
                .data()
                .iter()
                .map(|&v| (v + noise.gen_range(-a..=a)).clamp(0.0, 1.0))
                .collect();
            frame = FeatureMap::from_vec(c, h, w, data)?;
        }
        frames.push(frame);
    }
    Ok(frames)
}

/// Renders the scene and samples it through a Bayer mosaic. Needs 3 channels.
pub fn generate_bayer(spec: &SceneSpec, pattern: BayerPattern) -> Result<Vec<BayerFrame>> {
    if spec.channels != 3 {
        return Err(MevcError::param("Bayer scenes need 3 channels"));
    }
    generate(spec)?.iter().map(|f| mosaic(f, pattern)).collect()
}

/// Ground-truth vector at each output position of a layer applied directly to
/// frame `t` (row-major). `None` marks positions whose receptive field
/// straddles a motion boundary or leaves the scene, where no single vector is
/// correct.
pub fn expected_motion(spec: &SceneSpec, t: usize, conv: &ConvSpec) -> Result<Vec<Option<MotionVector>>> {
    spec.validate()?;
    if t == 0 || t >= spec.frame_count {
        return Err(MevcError::param(format!(
            "frame {t} has no predecessor in a {}-frame scene",
            spec.frame_count
        )));
    }
    if spec.kind == SceneKind::NoiseMix && spec.noise_amplitude > 0.0 {
        return Err(MevcError::param("noisy scenes have no exact ground-truth motion"));
    }
    let s = conv.stride();
    let (dx, dy) = spec.effective_motion();
    let mv = MotionVector::new(dx, dy, s)?;
    let zero = MotionVector::zero(s);
    let (oh, ow) = conv.output_dims(spec.height, spec.width)?;
    let (k, p) = (conv.kernel_size() as i64, conv.padding() as i64);

    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            let (y0, x0) = (i as i64 * s as i64 - p, j as i64 * s as i64 - p);
            let rf = || (y0..y0 + k).flat_map(move |y| (x0..x0 + k).map(move |x| (y, x)));
            let inside = |y: i64, x: i64| y >= 0 && y < spec.height as i64 && x >= 0 && x < spec.width as i64;
            let v = match spec.kind {
                SceneKind::Static => Some(zero),
                SceneKind::GlobalTranslate | SceneKind::NoiseMix => Some(mv),
                SceneKind::BlockTranslate => {
                    let fully_in = rf().all(|(y, x)| inside(y, x) && spec.block_contains(t, y, x));
                    let fully_out =
                        rf().all(|(y, x)| !spec.block_contains(t, y, x) && !spec.block_contains(t - 1, y, x));
                    if fully_in {
                        Some(mv)
                    } else if fully_out {
                        Some(zero)
                    } else {
                        None
                    }
                }
            };
            out.push(v);
        }
    }
    Ok(out)
}
