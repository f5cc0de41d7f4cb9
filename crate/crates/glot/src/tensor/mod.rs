//! Dense tensors, label maps, and normalization primitives.
//!
//! Everything downstream is built on three small data types:
//!
//! * [`Tensor`]: a dense, row-major `f32` array of rank 1..=4. Feature maps
//!   use channel-first `[C, H, W]` layout. Values are finite by construction;
//!   every public operation validates its output.
//! * [`SegmentationMap`]: per-pixel region labels in `[0, regions)`.
//! * [`VisibilityMap`]: per-pixel flags where 1 marks a position with **no**
//!   visible source correspondence.
//!
//! Arithmetic accumulates in `f64` and rounds back to `f32` on store, in a
//! fixed element order, so identical inputs give bit-identical outputs.

pub mod io;

use crate::error::{Error, Result};

/// Dense row-major `f32` array with rank between 1 and 4.
///
/// The flat index of multi-index `(i0, i1, ...)` is the usual row-major
/// polynomial; for a `[C, H, W]` feature map that is `(c * H + y) * W + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    let mut n: usize = 1;
    for &e in shape {
        n = n.checked_mul(e).ok_or_else(|| Error::InvalidParameter {
            name: "shape",
            reason: format!("element count overflows usize for {:?}", shape),
        })?;
    }
    Ok(n)
}

fn check_rank(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::RankOutOfRange { rank: shape.len() });
    }
    Ok(())
}

fn check_finite(context: &'static str, data: &[f32]) -> Result<()> {
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context, index });
    }
    Ok(())
}

impl Tensor {
    /// Builds a tensor, validating rank, length, and finiteness.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        check_rank(shape)?;
        let expected = checked_numel(shape)?;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        check_finite("Tensor::new", &data)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        check_rank(shape)?;
        let n = checked_numel(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        })
    }

    /// Constant tensor of the given shape.
    pub fn filled(shape: &[usize], value: f32) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: "Tensor::filled",
                index: 0,
            });
        }
        let mut t = Tensor::zeros(shape)?;
        t.data.fill(value);
        Ok(t)
    }

    /// Builds a rank-2 tensor from a `(row, col) -> value` function.
    pub fn from_fn2(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor::new(&[rows, cols], data)
    }

    /// Builds a rank-3 tensor from a `(c, y, x) -> value` function.
    pub fn from_fn3(
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
        Tensor::new(&[channels, height, width], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Total number of stored values.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Consumes the tensor, returning its flat buffer.
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at1(&self, i: usize) -> f32 {
        debug_assert_eq!(self.rank(), 1);
        self.data[i]
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f32 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f32 {
        debug_assert_eq!(self.rank(), 3);
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    #[inline]
    pub fn at4(&self, a: usize, b: usize, c: usize, d: usize) -> f32 {
        debug_assert_eq!(self.rank(), 4);
        self.data[((a * self.shape[1] + b) * self.shape[2] + c) * self.shape[3] + d]
    }

    /// Applies `f` to each element, validating the result stays finite.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Tensor> {
        let data: Vec<f32> = self.data.iter().map(|&v| f(v)).collect();
        check_finite("Tensor::map", &data)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    fn check_same_shape(&self, other: &Tensor, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context,
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Element-wise sum.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "Tensor::add")?;
        let data: Vec<f32> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| ((a as f64) + (b as f64)) as f32)
            .collect();
        check_finite("Tensor::add", &data)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Element-wise difference `self - other`.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "Tensor::sub")?;
        let data: Vec<f32> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| ((a as f64) - (b as f64)) as f32)
            .collect();
        check_finite("Tensor::sub", &data)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Element-wise product.
    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "Tensor::hadamard")?;
        let data: Vec<f32> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| ((a as f64) * (b as f64)) as f32)
            .collect();
        check_finite("Tensor::hadamard", &data)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Multiplies every element by a scalar.
    pub fn scale(&self, factor: f32) -> Result<Tensor> {
        if !factor.is_finite() {
            return Err(Error::InvalidParameter {
                name: "factor",
                reason: "must be finite".into(),
            });
        }
        self.map(|v| ((v as f64) * (factor as f64)) as f32)
    }

    /// Largest absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "Tensor::max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| ((a as f64) - (b as f64)).abs())
            .fold(0.0, f64::max))
    }

    /// True when both tensors hold bit-identical buffers and shapes.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Per-pixel region labels.
///
/// Labels are stored as bytes, so at most 256 regions are supported; the
/// pipeline default is 8. Label 0 conventionally means background, but this
/// type does not enforce that.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    height: usize,
    width: usize,
    regions: usize,
    labels: Vec<u8>,
}

impl SegmentationMap {
    pub fn new(height: usize, width: usize, regions: usize, labels: Vec<u8>) -> Result<Self> {
        if regions == 0 || regions > 256 {
            return Err(Error::InvalidParameter {
                name: "regions",
                reason: format!("must be in 1..=256, got {regions}"),
            });
        }
        if labels.len() != height * width {
            return Err(Error::LengthMismatch {
                shape: vec![height, width],
                expected: height * width,
                got: labels.len(),
            });
        }
        for &l in &labels {
            if (l as usize) >= regions {
                return Err(Error::LabelOutOfRange {
                    label: l as usize,
                    regions,
                });
            }
        }
        Ok(SegmentationMap {
            height,
            width,
            regions,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn label(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.width + x] as usize
    }

    /// Number of pixels carrying each label.
    pub fn region_pixel_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.regions];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// One-hot encoding as a `[regions, H, W]` tensor.
    pub fn one_hot(&self) -> Result<Tensor> {
        let mut data = vec![0.0f32; self.regions * self.height * self.width];
        let plane = self.height * self.width;
        for (p, &l) in self.labels.iter().enumerate() {
            data[(l as usize) * plane + p] = 1.0;
        }
        Tensor::new(&[self.regions, self.height, self.width], data)
    }
}

/// Per-pixel correspondence flags: 1 means the position has no visible
/// source correspondence (it is invisible in the source view).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibilityMap {
    height: usize,
    width: usize,
    flags: Vec<u8>,
}

impl VisibilityMap {
    pub fn new(height: usize, width: usize, flags: Vec<u8>) -> Result<Self> {
        if flags.len() != height * width {
            return Err(Error::LengthMismatch {
                shape: vec![height, width],
                expected: height * width,
                got: flags.len(),
            });
        }
        if let Some(bad) = flags.iter().position(|&f| f > 1) {
            return Err(Error::InvalidParameter {
                name: "flags",
                reason: format!("flag at index {bad} is not 0 or 1"),
            });
        }
        Ok(VisibilityMap {
            height,
            width,
            flags,
        })
    }

    /// All-visible map (every flag 0).
    pub fn all_visible(height: usize, width: usize) -> Self {
        VisibilityMap {
            height,
            width,
            flags: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn flags(&self) -> &[u8] {
        &self.flags
    }

    /// True when the pixel has no visible source correspondence.
    #[inline]
    pub fn invisible(&self, y: usize, x: usize) -> bool {
        self.flags[y * self.width + x] == 1
    }

    pub fn count_invisible(&self) -> usize {
        self.flags.iter().filter(|&&f| f == 1).count()
    }
}

/// Normalizes each channel of a `[C, H, W]` tensor to zero mean and unit
/// variance, returning `(normalized, mu, sigma)` with per-channel statistics
/// as rank-1 tensors.
///
/// `sigma` is the population standard deviation (divisor `H * W`), and
/// `epsilon` is added to it before dividing. `epsilon` may be zero as long as
/// no channel is constant; a constant channel with `epsilon == 0` is
/// rejected rather than producing non-finite output.
pub fn channel_normalize(f: &Tensor, epsilon: f32) -> Result<(Tensor, Tensor, Tensor)> {
    if f.rank() != 3 {
        return Err(Error::ShapeMismatch {
            context: "channel_normalize",
            expected: vec![0, 0, 0],
            got: f.shape().to_vec(),
        });
    }
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(Error::InvalidParameter {
            name: "epsilon",
            reason: format!("must be finite and >= 0, got {epsilon}"),
        });
    }
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let plane = h * w;
    if plane == 0 {
        return Err(Error::InvalidParameter {
            name: "f",
            reason: "spatial extent must be nonzero".into(),
        });
    }

    let mut out = vec![0.0f32; f.len()];
    let mut mu = vec![0.0f32; c];
    let mut sigma = vec![0.0f32; c];
    for ch in 0..c {
        let slice = &f.data()[ch * plane..(ch + 1) * plane];
        let mean = slice.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        let var = slice
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / plane as f64;
        let sd = var.sqrt();
        let denom = sd + epsilon as f64;
        if denom <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "epsilon",
                reason: format!("channel {ch} is constant and epsilon is zero"),
            });
        }
        for (i, &v) in slice.iter().enumerate() {
            out[ch * plane + i] = ((v as f64 - mean) / denom) as f32;
        }
        mu[ch] = mean as f32;
        sigma[ch] = sd as f32;
    }

    Ok((
        Tensor::new(f.shape(), out)?,
        Tensor::new(&[c], mu)?,
        Tensor::new(&[c], sigma)?,
    ))
}
