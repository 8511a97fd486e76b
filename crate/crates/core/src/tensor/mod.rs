//! Dense feature maps, the reference 2-D convolution and the sparse residual
//! convolution that every other module builds on.
//!
//! Layouts are fixed: feature maps are `(c, y, x)` row-major, filters are
//! `(C_out, C_in, k, k)` and a receptive-field block is `(c, dy, dx)`, so a
//! block dotted with one output channel's filter slice is exactly one output
//! activation. Padding is zero padding.

mod conv;
pub mod weights;

pub use conv::{conv2d, conv_sparse_block, extract_block};
pub(crate) use conv::{dense_at, gather_block};

use crate::error::{MevcError, Result};

/// A `channels x height x width` volume of `f32` activations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(MevcError::shape(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MevcError::NonFinite("feature map"));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds a map by evaluating `f(c, y, x)` at every element.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::from_vec(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn offset(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.offset(c, y, x)]
    }

    /// Sets one element. Non-finite values are rejected so the finiteness
    /// invariant holds for every map.
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f32) -> Result<()> {
        if !value.is_finite() {
            return Err(MevcError::NonFinite("feature map"));
        }
        let o = self.offset(c, y, x);
        self.data[o] = value;
        Ok(())
    }

    /// Reads with zero padding for coordinates outside the map.
    #[inline]
    pub fn get_padded(&self, c: usize, y: isize, x: isize) -> f32 {
        if y < 0 || x < 0 || y as usize >= self.height || x as usize >= self.width {
            0.0
        } else {
            self.get(c, y as usize, x as usize)
        }
    }

    pub(crate) fn map_in_place(&mut self, f: impl Fn(f32) -> f32) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    fn check_same_shape(&self, other: &FeatureMap) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(MevcError::shape(format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> Result<f32> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub fn mean_abs_diff(&self, other: &FeatureMap) -> Result<f64> {
        self.check_same_shape(other)?;
        if self.data.is_empty() {
            return Ok(0.0);
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f64::from((a - b).abs()))
            .sum();
        Ok(sum / self.data.len() as f64)
    }
}

/// Convolution layer definition. Kernels are square with odd size.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    in_channels: usize,
    out_channels: usize,
    kernel_size: usize,
    stride: usize,
    padding: usize,
    weights: Vec<f32>,
    bias: Option<Vec<f32>>,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        weights: Vec<f32>,
        bias: Option<Vec<f32>>,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(MevcError::param("channel counts must be >= 1"));
        }
        if kernel_size.is_multiple_of(2) {
            return Err(MevcError::param(format!("kernel size must be odd, got {kernel_size}")));
        }
        if stride == 0 {
            return Err(MevcError::param("stride must be >= 1"));
        }
        let expected = out_channels * in_channels * kernel_size * kernel_size;
        if weights.len() != expected {
            return Err(MevcError::shape(format!(
                "weights for {out_channels}x{in_channels}x{kernel_size}x{kernel_size} need {expected} values, got {}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(MevcError::NonFinite("weights"));
        }
        if let Some(b) = &bias {
            if b.len() != out_channels {
                return Err(MevcError::shape(format!(
                    "bias needs {out_channels} values, got {}",
                    b.len()
                )));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(MevcError::NonFinite("bias"));
            }
        }
        Ok(ConvSpec {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
            weights,
            bias,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }

    /// Elements in one receptive-field block, `k² · C_in`.
    pub fn block_len(&self) -> usize {
        self.kernel_size * self.kernel_size * self.in_channels
    }

    /// The flattened `(C_in, k, k)` filter of output channel `o`.
    #[inline]
    pub fn filter(&self, o: usize) -> &[f32] {
        let n = self.block_len();
        &self.weights[o * n..(o + 1) * n]
    }

    /// Output spatial size for an `h x w` input; both must come out >= 1.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |n: usize| -> Option<usize> {
            let padded = n + 2 * self.padding;
            (padded >= self.kernel_size).then(|| (padded - self.kernel_size) / self.stride + 1)
        };
        match (axis(h), axis(w)) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(MevcError::shape(format!(
                "{h}x{w} input too small for k={} p={}",
                self.kernel_size, self.padding
            ))),
        }
    }

    /// Dense convolution cost for an `out_h x out_w` output: `2k²·C_in·C_out·H_out·W_out`.
    pub fn dense_flops(&self, out_h: usize, out_w: usize) -> u64 {
        2 * (self.block_len() * self.out_channels) as u64 * (out_h * out_w) as u64
    }

    /// Largest per-filter L1 norm, `max_o Σ|w[o, ·]|`.
    pub fn max_filter_l1(&self) -> f64 {
        (0..self.out_channels)
            .map(|o| self.filter(o).iter().map(|w| f64::from(w.abs())).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_weight(&self) -> f32 {
        self.weights.iter().fold(0.0f32, |m, w| m.max(w.abs()))
    }

    /// Folds a per-output-channel affine `y -> scale·y + shift` (e.g. a
    /// normalization layer) into the weights and bias.
    pub fn fold_affine(&self, scale: &[f32], shift: &[f32]) -> Result<ConvSpec> {
        if scale.len() != self.out_channels || shift.len() != self.out_channels {
            return Err(MevcError::shape(format!(
                "affine needs {} scale and shift values, got {} and {}",
                self.out_channels,
                scale.len(),
                shift.len()
            )));
        }
        let n = self.block_len();
        let weights = self
            .weights
            .chunks(n)
            .zip(scale)
            .flat_map(|(f, &s)| f.iter().map(move |w| w * s))
            .collect();
        let bias = (0..self.out_channels)
            .map(|o| self.bias.as_ref().map_or(0.0, |b| b[o]) * scale[o] + shift[o])
            .collect();
        ConvSpec::new(
            self.in_channels,
            self.out_channels,
            self.kernel_size,
            self.stride,
            self.padding,
            weights,
            Some(bias),
        )
    }
}

/// A dense `C_in x k x k` receptive-field block in `(c, dy, dx)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock {
    channels: usize,
    size: usize,
    data: Vec<f32>,
}

impl DenseBlock {
    pub fn zeros(channels: usize, size: usize) -> Self {
        DenseBlock {
            channels,
            size,
            data: vec![0.0; channels * size * size],
        }
    }

    pub fn from_vec(channels: usize, size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * size * size {
            return Err(MevcError::shape(format!(
                "block {channels}x{size}x{size} needs {} values, got {}",
                channels * size * size,
                data.len()
            )));
        }
        Ok(DenseBlock { channels, size, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, c: usize, dy: usize, dx: usize) -> f32 {
        self.data[(c * self.size + dy) * self.size + dx]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &DenseBlock) -> bool {
        self.channels == other.channels && self.size == other.size
    }
}

/// One nonzero residual element inside a receptive field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseEntry {
    pub channel: usize,
    pub dy: usize,
    pub dx: usize,
    pub value: f32,
}

/// The nonzero part of a residual block anchored at output position `(i, j)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseBlock {
    pub anchor: (usize, usize),
    pub entries: Vec<SparseEntry>,
}

impl SparseBlock {
    pub fn new(anchor: (usize, usize), entries: Vec<SparseEntry>) -> Self {
        SparseBlock { anchor, entries }
    }

    /// All nonzero elements of `block`, in block order.
    pub fn from_dense(anchor: (usize, usize), block: &DenseBlock) -> Self {
        let k = block.size;
        let entries = block
            .data
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(idx, &value)| SparseEntry {
                channel: idx / (k * k),
                dy: (idx / k) % k,
                dx: idx % k,
                value,
            })
            .collect();
        SparseBlock { anchor, entries }
    }

    pub fn at(mut self, anchor: (usize, usize)) -> Self {
        self.anchor = anchor;
        self
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Expands to a dense block; entries sharing a slot are summed.
    pub fn densify(&self, channels: usize, size: usize) -> Result<DenseBlock> {
        let mut out = DenseBlock::zeros(channels, size);
        for e in &self.entries {
            if e.channel >= channels || e.dy >= size || e.dx >= size {
                return Err(MevcError::KernelBounds {
                    channel: e.channel,
                    dy: e.dy,
                    dx: e.dx,
                });
            }
            out.data[(e.channel * size + e.dy) * size + e.dx] += e.value;
        }
        Ok(out)
    }
}
