//! Local structure transfer: self-correlation volumes, modulation-field
//! prediction, and spatially varying convolution.
//!
//! Texture patterns repeat locally. [`self_correlation`] measures that
//! repetition: for every position it records the inner products between the
//! patch around the position and the patches around its `(2d+1)^2` nearby
//! offsets, giving a correlation volume with one channel per offset.
//! [`predict_modulation`] turns each correlation column into per-position
//! convolution taps and a bias via two point-wise projections, and
//! [`loc_conv`] applies those taps as a `k x k` convolution over the
//! channel-normalized feature map, with its own filter at every position.

use crate::error::{Error, Result};
use crate::tensor::{channel_normalize, Tensor};

/// Correlation volume: channel `o` holds `c(i, i + offset_o)` for every
/// position `i`, offsets enumerated row-major over `dy, dx in [-d, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalCorrelationMap {
    patch_radius: usize,
    offset_radius: usize,
    values: Tensor,
}

impl LocalCorrelationMap {
    pub fn new(patch_radius: usize, offset_radius: usize, values: Tensor) -> Result<Self> {
        let side = 2 * offset_radius + 1;
        if values.rank() != 3 || values.shape()[0] != side * side {
            return Err(Error::ShapeMismatch {
                context: "LocalCorrelationMap",
                expected: vec![side * side, 0, 0],
                got: values.shape().to_vec(),
            });
        }
        // the center channel is a patch norm and can never be negative
        let center = side * side / 2;
        let plane = values.shape()[1] * values.shape()[2];
        let lo = values.data()[center * plane..(center + 1) * plane]
            .iter()
            .copied()
            .fold(f32::INFINITY, f32::min);
        if lo < 0.0 {
            return Err(Error::InvalidParameter {
                name: "values",
                reason: format!("center channel has negative entry {lo}"),
            });
        }
        Ok(LocalCorrelationMap {
            patch_radius,
            offset_radius,
            values,
        })
    }

    pub fn patch_radius(&self) -> usize {
        self.patch_radius
    }

    pub fn offset_radius(&self) -> usize {
        self.offset_radius
    }

    /// Number of offset channels, `(2d + 1)^2`.
    pub fn channels(&self) -> usize {
        let side = 2 * self.offset_radius + 1;
        side * side
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Channel index of offset `(dy, dx)`.
    pub fn offset_channel(&self, dy: isize, dx: isize) -> usize {
        let d = self.offset_radius as isize;
        debug_assert!(dy.abs() <= d && dx.abs() <= d);
        ((dy + d) * (2 * d + 1) + (dx + d)) as usize
    }
}

/// Per-position convolution parameters: `k^2` taps and one bias for every
/// `(position, channel)` pair.
///
/// Taps are stored as a rank-4 `[H, W, C, k^2]` tensor (tap index row-major
/// over the `k x k` window), the bias as `[H, W, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationField {
    kernel: usize,
    taps: Tensor,
    bias: Tensor,
}

impl ModulationField {
    pub fn new(kernel: usize, taps: Tensor, bias: Tensor) -> Result<Self> {
        if kernel % 2 == 0 || kernel == 0 {
            return Err(Error::InvalidParameter {
                name: "kernel",
                reason: format!("must be odd and positive, got {kernel}"),
            });
        }
        if taps.rank() != 4 || taps.shape()[3] != kernel * kernel {
            return Err(Error::ShapeMismatch {
                context: "ModulationField taps",
                expected: vec![0, 0, 0, kernel * kernel],
                got: taps.shape().to_vec(),
            });
        }
        if bias.shape() != &taps.shape()[..3] {
            return Err(Error::ShapeMismatch {
                context: "ModulationField bias",
                expected: taps.shape()[..3].to_vec(),
                got: bias.shape().to_vec(),
            });
        }
        Ok(ModulationField { kernel, taps, bias })
    }

    /// Field that makes [`loc_conv`] act as plain channel normalization:
    /// k = 1, all taps 1, zero bias.
    pub fn identity(height: usize, width: usize, channels: usize) -> Result<Self> {
        ModulationField::new(
            1,
            Tensor::filled(&[height, width, channels, 1], 1.0)?,
            Tensor::zeros(&[height, width, channels])?,
        )
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn height(&self) -> usize {
        self.taps.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.taps.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.taps.shape()[2]
    }

    pub fn taps(&self) -> &Tensor {
        &self.taps
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// Tap value for window offset `(wy, wx)`, both in `[-k/2, k/2]`.
    #[inline]
    pub fn tap(&self, y: usize, x: usize, c: usize, wy: isize, wx: isize) -> f32 {
        let half = (self.kernel / 2) as isize;
        let t = ((wy + half) * self.kernel as isize + (wx + half)) as usize;
        self.taps.at4(y, x, c, t)
    }

    #[inline]
    pub fn bias_at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.bias.at3(y, x, c)
    }
}

/// Computes the self-correlation volume of `f` (`[C, H, W]`):
///
/// ```text
/// c(i, i + o) = sum over p in [-r, r]^2 of <f(i + p), f(i + o + p)>
/// ```
///
/// with zero padding outside the frame, one output channel per offset
/// `o in [-d, d]^2`. With `normalize` set, every value is divided by
/// `(2r + 1)^2 * C` to keep magnitudes independent of patch size.
pub fn self_correlation(
    f: &Tensor,
    r: usize,
    d: usize,
    normalize: bool,
) -> Result<LocalCorrelationMap> {
    if f.rank() != 3 {
        return Err(Error::ShapeMismatch {
            context: "self_correlation",
            expected: vec![0, 0, 0],
            got: f.shape().to_vec(),
        });
    }
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let side = 2 * d + 1;
    let (ri, di) = (r as isize, d as isize);
    let (hi, wi) = (h as isize, w as isize);

    // dot product of the feature columns at two (possibly out-of-frame)
    // positions; zero padding makes any out-of-frame factor vanish
    let plane = h * w;
    let dot = |ay: isize, ax: isize, by: isize, bx: isize| -> f64 {
        if ay < 0 || ay >= hi || ax < 0 || ax >= wi || by < 0 || by >= hi || bx < 0 || bx >= wi {
            return 0.0;
        }
        let pa = (ay * wi + ax) as usize;
        let pb = (by * wi + bx) as usize;
        let mut acc = 0.0f64;
        for ch in 0..c {
            acc += f.data()[ch * plane + pa] as f64 * f.data()[ch * plane + pb] as f64;
        }
        acc
    };

    let scale = if normalize {
        1.0 / (((2 * r + 1) * (2 * r + 1) * c) as f64)
    } else {
        1.0
    };

    let mut out = vec![0.0f32; side * side * plane];
    for dy in -di..=di {
        for dx in -di..=di {
            let channel = ((dy + di) * side as isize + (dx + di)) as usize;
            for y in 0..hi {
                for x in 0..wi {
                    let mut acc = 0.0f64;
                    for py in -ri..=ri {
                        for px in -ri..=ri {
                            acc += dot(y + py, x + px, y + dy + py, x + dx + px);
                        }
                    }
                    out[channel * plane + (y * wi + x) as usize] = (acc * scale) as f32;
                }
            }
        }
    }
    LocalCorrelationMap::new(r, d, Tensor::new(&[side * side, h, w], out)?)
}

/// Predicts a modulation field from a correlation volume: at every position
/// the correlation column (length `(2d+1)^2`) is mapped to `C * k^2` taps by
/// `p_f` and to `C` biases by `p_b`.
pub fn predict_modulation(
    f_c: &LocalCorrelationMap,
    p_f: &Tensor,
    p_b: &Tensor,
    k: usize,
) -> Result<ModulationField> {
    if k % 2 == 0 || k == 0 {
        return Err(Error::InvalidParameter {
            name: "k",
            reason: format!("must be odd and positive, got {k}"),
        });
    }
    let corr_channels = f_c.channels();
    if p_b.rank() != 2 || p_b.shape()[1] != corr_channels {
        return Err(Error::ShapeMismatch {
            context: "predict_modulation(p_b)",
            expected: vec![0, corr_channels],
            got: p_b.shape().to_vec(),
        });
    }
    let c = p_b.shape()[0];
    if p_f.rank() != 2 || p_f.shape() != [c * k * k, corr_channels] {
        return Err(Error::ShapeMismatch {
            context: "predict_modulation(p_f)",
            expected: vec![c * k * k, corr_channels],
            got: p_f.shape().to_vec(),
        });
    }
    let values = f_c.values();
    let (h, w) = (values.shape()[1], values.shape()[2]);
    let plane = h * w;
    let kk = k * k;

    let mut taps = vec![0.0f32; h * w * c * kk];
    let mut bias = vec![0.0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            for ch in 0..c {
                for t in 0..kk {
                    let row = ch * kk + t;
                    let mut acc = 0.0f64;
                    for q in 0..corr_channels {
                        acc += p_f.at2(row, q) as f64 * values.data()[q * plane + p] as f64;
                    }
                    taps[((y * w + x) * c + ch) * kk + t] = acc as f32;
                }
                let mut acc = 0.0f64;
                for q in 0..corr_channels {
                    acc += p_b.at2(ch, q) as f64 * values.data()[q * plane + p] as f64;
                }
                bias[(y * w + x) * c + ch] = acc as f32;
            }
        }
    }
    ModulationField::new(
        k,
        Tensor::new(&[h, w, c, kk], taps)?,
        Tensor::new(&[h, w, c], bias)?,
    )
}

/// Spatially varying convolution over channel-normalized features:
///
/// ```text
/// out(c, l) = sum over window offsets p of taps(l, c, p) * norm(c, l + p)  [+ bias]
/// ```
///
/// where `norm = channel_normalize(f, epsilon)` and the window is `k x k`
/// with zero padding. By default the bias at the output position is added
/// once; with `bias_per_tap` the bias of every in-frame window position is
/// summed instead (so a constant bias scales by up to `k^2`).
pub fn loc_conv(
    f: &Tensor,
    field: &ModulationField,
    epsilon: f32,
    bias_per_tap: bool,
) -> Result<Tensor> {
    if f.rank() != 3 {
        return Err(Error::ShapeMismatch {
            context: "loc_conv",
            expected: vec![0, 0, 0],
            got: f.shape().to_vec(),
        });
    }
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    if field.channels() != c || field.height() != h || field.width() != w {
        return Err(Error::ShapeMismatch {
            context: "loc_conv(field)",
            expected: vec![h, w, c, field.kernel() * field.kernel()],
            got: field.taps().shape().to_vec(),
        });
    }
    let (normalized, _, _) = channel_normalize(f, epsilon)?;
    let half = (field.kernel() / 2) as isize;
    let (hi, wi) = (h as isize, w as isize);
    let plane = h * w;

    let mut out = vec![0.0f32; c * plane];
    for ch in 0..c {
        for y in 0..hi {
            for x in 0..wi {
                let mut acc = 0.0f64;
                for wy in -half..=half {
                    for wx in -half..=half {
                        let (ny, nx) = (y + wy, x + wx);
                        if ny < 0 || ny >= hi || nx < 0 || nx >= wi {
                            continue;
                        }
                        let tap = field.tap(y as usize, x as usize, ch, wy, wx) as f64;
                        acc += tap * normalized.data()[ch * plane + (ny * wi + nx) as usize] as f64;
                        if bias_per_tap {
                            acc += field.bias_at(ny as usize, nx as usize, ch) as f64;
                        }
                    }
                }
                if !bias_per_tap {
                    acc += field.bias_at(y as usize, x as usize, ch) as f64;
                }
                out[ch * plane + (y * wi + x) as usize] = acc as f32;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}
