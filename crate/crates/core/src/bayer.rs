//! Bayer mosaics: sampling RGB into a mosaic, packing mosaics into
//! four-channel feature maps and raw sensor file I/O.
//!
//! Raw files are headerless: frames follow each other, each a row-major plane
//! of little-endian unsigned codes (one byte per sample at 8-bit depth, two
//! bytes above that). A JSON sidecar carries the geometry.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, ErrorKind, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MevcError, Result};
use crate::fsutil::write_atomic;
use crate::tensor::FeatureMap;

/// Colour filter arrangement of the top-left 2x2 tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BayerPattern {
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

/// Role of a site within a tile. Packed channels follow this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    R = 0,
    G1 = 1,
    G2 = 2,
    B = 3,
}

impl Site {
    /// Index of the RGB channel this site samples.
    pub fn rgb_channel(self) -> usize {
        match self {
            Site::R => 0,
            Site::G1 | Site::G2 => 1,
            Site::B => 2,
        }
    }
}

impl BayerPattern {
    pub const ALL: [BayerPattern; 4] = [
        BayerPattern::Rggb,
        BayerPattern::Bggr,
        BayerPattern::Grbg,
        BayerPattern::Gbrg,
    ];

    /// Tile layout as `[[top-left, top-right], [bottom-left, bottom-right]]`.
    /// G1 is the green on the tile's first row.
    pub fn tile(self) -> [[Site; 2]; 2] {
        use Site::*;
        match self {
            BayerPattern::Rggb => [[R, G1], [G2, B]],
            BayerPattern::Bggr => [[B, G1], [G2, R]],
            BayerPattern::Grbg => [[G1, R], [B, G2]],
            BayerPattern::Gbrg => [[G1, B], [R, G2]],
        }
    }

    pub fn site(self, y: usize, x: usize) -> Site {
        self.tile()[y & 1][x & 1]
    }

    /// `(row, col)` inside the tile where `site` lives.
    pub fn offset_of(self, site: Site) -> (usize, usize) {
        let t = self.tile();
        for (dy, row) in t.iter().enumerate() {
            for (dx, s) in row.iter().enumerate() {
                if *s == site {
                    return (dy, dx);
                }
            }
        }
        unreachable!("every pattern holds all four sites")
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BayerPattern::Rggb => "RGGB",
            BayerPattern::Bggr => "BGGR",
            BayerPattern::Grbg => "GRBG",
            BayerPattern::Gbrg => "GBRG",
        }
    }
}

impl fmt::Display for BayerPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BayerPattern {
    type Err = MevcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RGGB" => Ok(BayerPattern::Rggb),
            "BGGR" => Ok(BayerPattern::Bggr),
            "GRBG" => Ok(BayerPattern::Grbg),
            "GBRG" => Ok(BayerPattern::Gbrg),
            _ => Err(MevcError::UnknownPattern(s.to_string())),
        }
    }
}

impl TryFrom<String> for BayerPattern {
    type Error = MevcError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BayerPattern> for String {
    fn from(p: BayerPattern) -> String {
        p.as_str().to_string()
    }
}

/// A single-plane mosaic with samples normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BayerFrame {
    pattern: BayerPattern,
    height: usize,
    width: usize,
    plane: Vec<f32>,
}

impl BayerFrame {
    pub fn new(pattern: BayerPattern, height: usize, width: usize, plane: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || !height.is_multiple_of(2) || !width.is_multiple_of(2) {
            return Err(MevcError::shape(format!(
                "Bayer frame must have positive even dims, got {height}x{width}"
            )));
        }
        if plane.len() != height * width {
            return Err(MevcError::shape(format!(
                "Bayer plane {height}x{width} needs {} samples, got {}",
                height * width,
                plane.len()
            )));
        }
        if let Some(v) = plane.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(MevcError::param(format!("Bayer sample {v} outside [0, 1]")));
        }
        Ok(BayerFrame {
            pattern,
            height,
            width,
            plane,
        })
    }

    pub fn pattern(&self) -> BayerPattern {
        self.pattern
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane(&self) -> &[f32] {
        &self.plane
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.plane[y * self.width + x]
    }

    /// The mosaic as a one-channel full-resolution feature map.
    pub fn to_plane_map(&self) -> FeatureMap {
        FeatureMap::from_vec(1, self.height, self.width, self.plane.clone())
            .expect("plane values are finite by construction")
    }
}

/// Samples each pixel of a 3-channel RGB map at the channel its site dictates.
pub fn mosaic(rgb: &FeatureMap, pattern: BayerPattern) -> Result<BayerFrame> {
    if rgb.channels() != 3 {
        return Err(MevcError::shape(format!(
            "mosaic needs 3 channels, got {}",
            rgb.channels()
        )));
    }
    let (h, w) = (rgb.height(), rgb.width());
    let mut plane = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            plane.push(rgb.get(pattern.site(y, x).rgb_channel(), y, x));
        }
    }
    BayerFrame::new(pattern, h, w, plane)
}

/// Gathers each tile into channels `(R, G1, G2, B)` at half resolution.
pub fn pack(frame: &BayerFrame) -> FeatureMap {
    let (hh, hw) = (frame.height / 2, frame.width / 2);
    let offsets = [Site::R, Site::G1, Site::G2, Site::B].map(|s| frame.pattern.offset_of(s));
    FeatureMap::from_fn(4, hh, hw, |c, y, x| {
        let (dy, dx) = offsets[c];
        frame.get(2 * y + dy, 2 * x + dx)
    })
    .expect("plane values are finite by construction")
}

/// Inverse of [`pack`].
pub fn unpack(packed: &FeatureMap, pattern: BayerPattern) -> Result<BayerFrame> {
    if packed.channels() != 4 {
        return Err(MevcError::shape(format!(
            "unpack needs 4 channels, got {}",
            packed.channels()
        )));
    }
    let (h, w) = (2 * packed.height(), 2 * packed.width());
    let mut plane = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let c = pattern.site(y, x) as usize;
            plane[y * w + x] = packed.get(c, y / 2, x / 2);
        }
    }
    BayerFrame::new(pattern, h, w, plane)
}

/// Geometry of a raw sequence file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub width: usize,
    pub height: usize,
    pub pattern: BayerPattern,
    pub bit_depth: u32,
    pub frame_count: usize,
}

impl RawSidecar {
    pub fn validate(&self) -> Result<()> {
        if !(8..=16).contains(&self.bit_depth) {
            return Err(MevcError::param(format!(
                "bit_depth must be in [8, 16], got {}",
                self.bit_depth
            )));
        }
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(2) || !self.height.is_multiple_of(2) {
            return Err(MevcError::shape(format!(
                "raw frames must have positive even dims, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MevcError::io(path, e))?;
        // Parse the pattern separately so an unknown name surfaces as such
        // rather than as a generic JSON error.
        let mut value: serde_json::Value = serde_json::from_slice(&bytes)?;
        if let Some(p) = value.get_mut("pattern") {
            if let Some(s) = p.as_str() {
                let parsed: BayerPattern = s.parse()?;
                *p = serde_json::Value::String(parsed.as_str().into());
            }
        }
        let meta: RawSidecar = serde_json::from_value(value)?;
        meta.validate()?;
        Ok(meta)
    }

    pub fn bytes_per_sample(&self) -> usize {
        if self.bit_depth <= 8 {
            1
        } else {
            2
        }
    }

    pub fn frame_bytes(&self) -> usize {
        self.width * self.height * self.bytes_per_sample()
    }

    pub fn max_code(&self) -> u32 {
        (1u32 << self.bit_depth) - 1
    }
}

/// Streams frames from a raw file, reading one frame at a time.
pub struct RawReader {
    meta: RawSidecar,
    reader: BufReader<File>,
    path: PathBuf,
    next: usize,
    buf: Vec<u8>,
    failed: bool,
}

impl RawReader {
    pub fn meta(&self) -> &RawSidecar {
        &self.meta
    }

    fn read_frame(&mut self) -> Result<BayerFrame> {
        let index = self.next;
        if let Err(e) = self.reader.read_exact(&mut self.buf) {
            return Err(match e.kind() {
                ErrorKind::UnexpectedEof => MevcError::Truncated { frame: index },
                _ => MevcError::io(&self.path, e),
            });
        }
        let max = self.meta.max_code();
        let scale = max as f32;
        let mut plane = Vec::with_capacity(self.meta.width * self.meta.height);
        let codes: Box<dyn Iterator<Item = u32> + '_> = if self.meta.bytes_per_sample() == 1 {
            Box::new(self.buf.iter().map(|&b| b as u32))
        } else {
            Box::new(
                self.buf
                    .chunks_exact(2)
                    .map(|b| u16::from_le_bytes([b[0], b[1]]) as u32),
            )
        };
        for code in codes {
            if code > max {
                return Err(MevcError::Frame {
                    frame: index,
                    reason: format!("sample code {code} exceeds {}-bit range", self.meta.bit_depth),
                });
            }
            plane.push(code as f32 / scale);
        }
        BayerFrame::new(self.meta.pattern, self.meta.height, self.meta.width, plane)
    }
}

impl Iterator for RawReader {
    type Item = Result<BayerFrame>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.next >= self.meta.frame_count {
            return None;
        }
        let frame = self.read_frame();
        self.failed = frame.is_err();
        self.next += 1;
        Some(frame)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = if self.failed {
            0
        } else {
            self.meta.frame_count - self.next
        };
        (0, Some(left))
    }
}

/// Opens a raw sequence for streaming. Frames past `frame_count` are ignored.
pub fn load_raw_sequence(path: &Path, sidecar: &Path) -> Result<RawReader> {
    let meta = RawSidecar::load(sidecar)?;
    let file = File::open(path).map_err(|e| MevcError::io(path, e))?;
    Ok(RawReader {
        buf: vec![0; meta.frame_bytes()],
        meta,
        reader: BufReader::new(file),
        path: path.to_path_buf(),
        next: 0,
        failed: false,
    })
}

/// Quantizes one sample to an integer code (round half away from zero).
pub fn quantize(v: f32, bit_depth: u32) -> u32 {
    let max = ((1u32 << bit_depth) - 1) as f32;
    (v.clamp(0.0, 1.0) * max).round() as u32
}

/// Encodes frames into raw bytes. All frames must share pattern and dims.
pub fn encode_raw(frames: &[BayerFrame], bit_depth: u32) -> Result<(RawSidecar, Vec<u8>)> {
    let first = frames.first().ok_or_else(|| MevcError::param("no frames to write"))?;
    let meta = RawSidecar {
        width: first.width,
        height: first.height,
        pattern: first.pattern,
        bit_depth,
        frame_count: frames.len(),
    };
    meta.validate()?;
    let mut bytes = Vec::with_capacity(meta.frame_bytes() * frames.len());
    for (idx, f) in frames.iter().enumerate() {
        if (f.height, f.width, f.pattern) != (meta.height, meta.width, meta.pattern) {
            return Err(MevcError::Frame {
                frame: idx,
                reason: "frame geometry or pattern differs from frame 0".into(),
            });
        }
        for &v in &f.plane {
            let code = quantize(v, bit_depth);
            if meta.bytes_per_sample() == 1 {
                bytes.push(code as u8);
            } else {
                bytes.extend_from_slice(&(code as u16).to_le_bytes());
            }
        }
    }
    Ok((meta, bytes))
}

pub fn write_raw_sequence(frames: &[BayerFrame], bit_depth: u32, path: &Path, sidecar: &Path) -> Result<RawSidecar> {
    let (meta, bytes) = encode_raw(frames, bit_depth)?;
    write_atomic(path, &bytes)?;
    write_atomic(sidecar, &serde_json::to_vec_pretty(&meta)?)?;
    Ok(meta)
}
