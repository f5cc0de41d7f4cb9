//! Training objectives with analytic gradients where cheap, and a
//! finite-difference checker to keep those gradients honest.
//!
//! All losses reduce by mean over elements so magnitudes do not depend on
//! resolution. Values are computed in f64; gradient maps are returned as
//! f32 tensors shaped like the differentiated input.

use crate::error::{Error, Result};
use crate::stack::{Activation, ConvLayer, ConvStack};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

/// Per-term weights for [`total_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub a_sg: f64,
    pub a_l1: f64,
    pub a_perc: f64,
    pub a_adv: f64,
    /// Focusing strength for the segmentation focal loss.
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            a_sg: 1.0,
            a_l1: 1.0,
            a_perc: 1.0,
            a_adv: 1.0,
            eta: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("a_sg", self.a_sg),
            ("a_l1", self.a_l1),
            ("a_perc", self.a_perc),
            ("a_adv", self.a_adv),
            ("eta", self.eta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParameter {
                    name: "loss",
                    reason: format!("{name} must be finite and nonnegative, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Individual loss values entering the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub sg: f64,
    pub l1: f64,
    pub perc: f64,
    pub adv: f64,
}

/// Weighted sum of the four objective terms.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    w.a_sg * parts.sg + w.a_l1 * parts.l1 + w.a_perc * parts.perc + w.a_adv * parts.adv
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Focal loss for a binary target map.
///
/// Per element, with `p_t` the clamped probability assigned to the true
/// class: `loss = -(1 - p_t)^eta * ln(p_t)`, reduced by mean. The returned
/// gradient is with respect to the raw probability map, evaluated at the
/// clamped value:
///
/// ```text
/// dL/dp_t = eta (1 - p_t)^(eta-1) ln(p_t) - (1 - p_t)^eta / p_t
/// ```
///
/// negated where the target is 0 (there `p_t = 1 - p`). `eta = 0` reduces
/// the whole thing to binary cross-entropy.
pub fn focal_loss(s_g: &Tensor, s_t: &Tensor, eta: f64) -> Result<(f64, Tensor)> {
    if s_g.shape() != s_t.shape() {
        return Err(Error::ShapeMismatch {
            context: "focal_loss",
            expected: s_g.shape().to_vec(),
            got: s_t.shape().to_vec(),
        });
    }
    if eta < 0.0 || !eta.is_finite() {
        return Err(Error::InvalidParameter {
            name: "eta",
            reason: format!("must be finite and nonnegative, got {eta}"),
        });
    }
    if let Some(&bad) = s_t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidParameter {
            name: "s_t",
            reason: format!("target must be binary, found {bad}"),
        });
    }
    let count = s_g.len() as f64;
    let mut total = 0.0f64;
    let mut grad = vec![0.0f32; s_g.len()];
    for (i, (&p_raw, &t)) in s_g.data().iter().zip(s_t.data()).enumerate() {
        let positive = t == 1.0;
        let p_t = if positive {
            clamp_prob(p_raw as f64)
        } else {
            clamp_prob(1.0 - p_raw as f64)
        };
        let one_minus = 1.0 - p_t;
        total += -one_minus.powf(eta) * p_t.ln();
        // eta * (1-p_t)^(eta-1) stays finite at eta = 0 because the factor
        // eta annihilates the negative power before it can blow up
        let d_pt = if eta == 0.0 {
            -1.0 / p_t
        } else {
            eta * one_minus.powf(eta - 1.0) * p_t.ln() - one_minus.powf(eta) / p_t
        };
        let d_raw = if positive { d_pt } else { -d_pt };
        grad[i] = (d_raw / count) as f32;
    }
    Ok((total / count, Tensor::new(s_g.shape(), grad)?))
}

/// One-vs-rest focal loss summed over region classes. `probs` is `[N, H, W]`
/// with per-class probability planes; the target plane for class `n` is the
/// indicator of label `n` in `seg`.
pub fn focal_loss_multiclass(
    probs: &Tensor,
    seg: &crate::tensor::SegmentationMap,
    eta: f64,
) -> Result<(f64, Tensor)> {
    let n = seg.regions();
    if probs.rank() != 3 || probs.shape() != [n, seg.height(), seg.width()] {
        return Err(Error::ShapeMismatch {
            context: "focal_loss_multiclass",
            expected: vec![n, seg.height(), seg.width()],
            got: probs.shape().to_vec(),
        });
    }
    let plane = seg.height() * seg.width();
    let mut total = 0.0f64;
    let mut grad = vec![0.0f32; probs.len()];
    for class in 0..n {
        let p = Tensor::new(
            &[seg.height(), seg.width()],
            probs.data()[class * plane..(class + 1) * plane].to_vec(),
        )?;
        let t = Tensor::from_fn2(seg.height(), seg.width(), |y, x| {
            if seg.label(y, x) == class {
                1.0
            } else {
                0.0
            }
        })?;
        let (value, g) = focal_loss(&p, &t, eta)?;
        total += value;
        grad[class * plane..(class + 1) * plane].copy_from_slice(g.data());
    }
    Ok((total, Tensor::new(probs.shape(), grad)?))
}

/// Mean absolute difference and its subgradient `sign(i_g - i_t) / count`
/// (zero at exact ties).
pub fn l1_loss(i_g: &Tensor, i_t: &Tensor) -> Result<(f64, Tensor)> {
    if i_g.shape() != i_t.shape() {
        return Err(Error::ShapeMismatch {
            context: "l1_loss",
            expected: i_g.shape().to_vec(),
            got: i_t.shape().to_vec(),
        });
    }
    let count = i_g.len() as f64;
    let mut total = 0.0f64;
    let mut grad = vec![0.0f32; i_g.len()];
    for (i, (&a, &b)) in i_g.data().iter().zip(i_t.data()).enumerate() {
        let diff = a as f64 - b as f64;
        total += diff.abs();
        grad[i] = if diff > 0.0 {
            (1.0 / count) as f32
        } else if diff < 0.0 {
            (-1.0 / count) as f32
        } else {
            0.0
        };
    }
    Ok((total / count, Tensor::new(i_g.shape(), grad)?))
}

/// Maps an image to a list of feature layers. Implementations must be
/// deterministic for a fixed construction.
pub trait FeatureExtractor {
    fn extract(&self, image: &Tensor) -> Result<Vec<Tensor>>;
}

/// Fixed seeded three-stage strided convolution stack (3 -> 8 -> 16 -> 32
/// channels, stride 2, leaky rectifier). A stand-in for pretrained
/// perceptual features; weights never change after construction.
pub struct SeededExtractor {
    stack: ConvStack,
}

impl SeededExtractor {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = ConvStack::new(vec![
            ConvLayer::seeded(3, 8, 3, 2, Activation::LeakyRelu(0.2), &mut rng)?,
            ConvLayer::seeded(8, 16, 3, 2, Activation::LeakyRelu(0.2), &mut rng)?,
            ConvLayer::seeded(16, 32, 3, 2, Activation::LeakyRelu(0.2), &mut rng)?,
        ])?;
        Ok(SeededExtractor { stack })
    }

    /// Builds the same architecture from explicit layers (for externally
    /// trained weights).
    pub fn from_layers(layers: Vec<ConvLayer>) -> Result<Self> {
        Ok(SeededExtractor {
            stack: ConvStack::new(layers)?,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.stack.layers().len()
    }
}

impl FeatureExtractor for SeededExtractor {
    fn extract(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        self.stack.forward_all(image)
    }
}

/// Extractor returning the image itself as the only layer; with it,
/// [`perceptual_loss`] collapses to plain mean squared error.
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn extract(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![image.clone()])
    }
}

/// Sum over the selected layers of the mean squared feature difference.
pub fn perceptual_loss(
    i_g: &Tensor,
    i_t: &Tensor,
    extractor: &dyn FeatureExtractor,
    layers: &[usize],
) -> Result<f64> {
    if i_g.shape() != i_t.shape() {
        return Err(Error::ShapeMismatch {
            context: "perceptual_loss",
            expected: i_g.shape().to_vec(),
            got: i_t.shape().to_vec(),
        });
    }
    let fg = extractor.extract(i_g)?;
    let ft = extractor.extract(i_t)?;
    let mut total = 0.0f64;
    for &k in layers {
        if k >= fg.len() {
            return Err(Error::InvalidParameter {
                name: "layers",
                reason: format!("layer {k} out of range, extractor has {}", fg.len()),
            });
        }
        if fg[k].shape() != ft[k].shape() {
            return Err(Error::ShapeMismatch {
                context: "perceptual_loss layer",
                expected: fg[k].shape().to_vec(),
                got: ft[k].shape().to_vec(),
            });
        }
        let mut acc = 0.0f64;
        for (&a, &b) in fg[k].data().iter().zip(ft[k].data()) {
            let d = a as f64 - b as f64;
            acc += d * d;
        }
        total += acc / fg[k].len() as f64;
    }
    Ok(total)
}

/// Discriminator-side objective: mean `ln(1 - D(fake))` plus mean
/// `ln(D(real))`, scores clamped away from 0 and 1 first. Values near 0
/// mean the discriminator separates the batches perfectly.
pub fn adversarial_loss(d_real: &[f32], d_fake: &[f32]) -> Result<f64> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::InvalidParameter {
            name: "scores",
            reason: "adversarial loss needs at least one real and one fake score".into(),
        });
    }
    for (name, batch) in [("d_real", d_real), ("d_fake", d_fake)] {
        if let Some(&bad) = batch.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter {
                name,
                reason: format!("non-finite score {bad}"),
            });
        }
    }
    let real: f64 = d_real
        .iter()
        .map(|&v| clamp_prob(v as f64).ln())
        .sum::<f64>()
        / d_real.len() as f64;
    let fake: f64 = d_fake
        .iter()
        .map(|&v| (1.0 - clamp_prob(v as f64)).ln())
        .sum::<f64>()
        / d_fake.len() as f64;
    Ok(fake + real)
}

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub passed: bool,
}

const FD_MAX_COORDS: usize = 64;

/// Compares the analytic gradient of `loss_fn` against central differences
/// at up to 64 coordinates (sampled with a fixed seed when the input is
/// larger). The relative error at a coordinate is
/// `|g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8)`; the check passes when the
/// worst coordinate stays at or below `tol`.
///
/// The difference quotient divides by the realized f32 step `hi - lo`, not
/// the requested one, so tiny steps do not silently lose precision.
pub fn finite_diff_check<F>(loss_fn: F, input: &Tensor, step: f64, tol: f64) -> Result<FdReport>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "step",
            reason: format!("must be positive and finite, got {step}"),
        });
    }
    let (_, analytic) = loss_fn(input)?;
    if analytic.shape() != input.shape() {
        return Err(Error::ShapeMismatch {
            context: "finite_diff_check gradient",
            expected: input.shape().to_vec(),
            got: analytic.shape().to_vec(),
        });
    }
    let coords: Vec<usize> = if input.len() <= FD_MAX_COORDS {
        (0..input.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut picked: Vec<usize> = (0..FD_MAX_COORDS)
            .map(|_| rng.gen_range(0..input.len()))
            .collect();
        picked.sort_unstable();
        picked.dedup();
        picked
    };

    let mut max_rel = 0.0f64;
    for &idx in &coords {
        let base = input.data()[idx] as f64;
        let hi = (base + step) as f32;
        let lo = (base - step) as f32;
        let mut bumped = input.clone();
        bumped.data_mut()[idx] = hi;
        let (loss_hi, _) = loss_fn(&bumped)?;
        bumped.data_mut()[idx] = lo;
        let (loss_lo, _) = loss_fn(&bumped)?;
        let denom = hi as f64 - lo as f64;
        if denom == 0.0 {
            return Err(Error::InvalidParameter {
                name: "step",
                reason: format!("step {step} vanishes in f32 at coordinate {idx}"),
            });
        }
        let g_fd = (loss_hi - loss_lo) / denom;
        let g_a = analytic.data()[idx] as f64;
        let rel = (g_a - g_fd).abs() / g_a.abs().max(g_fd.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(FdReport {
        max_rel_error: max_rel,
        coords_checked: coords.len(),
        passed: max_rel <= tol,
    })
}
