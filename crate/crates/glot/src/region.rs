//! Region style codes, occlusion masks, and feature modulation.
//!
//! A *style code* is the average feature vector of one labeled region, so a
//! scene with `N` regions and `C` feature channels yields an `N x C`
//! [`StyleCodeMatrix`]. Codes are pooled from visible pixels, optionally
//! remapped by a learned affine ([`style_conv`]), broadcast back onto the
//! pixel grid ([`broadcast_styles`]), and finally injected into a feature
//! map as a per-pixel affine on normalized activations ([`modulate`]).
//!
//! An [`OcclusionMask`] marks the pixels whose style cannot be pooled from
//! the source view: foreground pixels with no visible correspondence.

use crate::error::{Error, Result};
use crate::tensor::{channel_normalize, SegmentationMap, Tensor, VisibilityMap};

/// Per-region style codes: an `N x C` matrix plus a presence flag per region.
///
/// Rows of absent regions (no contributing pixels) are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleCodeMatrix {
    regions: usize,
    channels: usize,
    codes: Vec<f32>,
    presence: Vec<bool>,
}

impl StyleCodeMatrix {
    /// Builds a matrix, enforcing that absent rows are exactly zero.
    pub fn new(
        regions: usize,
        channels: usize,
        codes: Vec<f32>,
        presence: Vec<bool>,
    ) -> Result<Self> {
        if regions == 0 {
            return Err(Error::InvalidParameter {
                name: "regions",
                reason: "must be at least 1".into(),
            });
        }
        if codes.len() != regions * channels {
            return Err(Error::LengthMismatch {
                shape: vec![regions, channels],
                expected: regions * channels,
                got: codes.len(),
            });
        }
        if presence.len() != regions {
            return Err(Error::LengthMismatch {
                shape: vec![regions],
                expected: regions,
                got: presence.len(),
            });
        }
        if let Some(index) = codes.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "StyleCodeMatrix::new",
                index,
            });
        }
        for (n, &present) in presence.iter().enumerate() {
            if !present
                && codes[n * channels..(n + 1) * channels]
                    .iter()
                    .any(|&v| v != 0.0)
            {
                return Err(Error::InvalidParameter {
                    name: "codes",
                    reason: format!("absent region {n} has a nonzero style row"),
                });
            }
        }
        Ok(StyleCodeMatrix {
            regions,
            channels,
            codes,
            presence,
        })
    }

    /// All-zero matrix with every region absent.
    pub fn zeros(regions: usize, channels: usize) -> Result<Self> {
        StyleCodeMatrix::new(
            regions,
            channels,
            vec![0.0; regions * channels],
            vec![false; regions],
        )
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn row(&self, n: usize) -> &[f32] {
        &self.codes[n * self.channels..(n + 1) * self.channels]
    }

    pub fn presence(&self) -> &[bool] {
        &self.presence
    }

    pub fn present(&self, n: usize) -> bool {
        self.presence[n]
    }

    /// The codes as a rank-2 `[N, C]` tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(&[self.regions, self.channels], self.codes.clone())
    }
}

/// Per-pixel occlusion flags: 1 marks a pixel whose appearance must be
/// inferred rather than copied from a visible source position.
///
/// When produced by [`occlusion_mask`], the flags are a subset of the
/// visibility flags (occluded implies invisible).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcclusionMask {
    height: usize,
    width: usize,
    flags: Vec<u8>,
}

impl OcclusionMask {
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
        Ok(OcclusionMask {
            height,
            width,
            flags,
        })
    }

    /// All-clear mask (nothing occluded).
    pub fn empty(height: usize, width: usize) -> Self {
        OcclusionMask {
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

    #[inline]
    pub fn occluded(&self, y: usize, x: usize) -> bool {
        self.flags[y * self.width + x] == 1
    }

    pub fn count_occluded(&self) -> usize {
        self.flags.iter().filter(|&&f| f == 1).count()
    }

    /// The flags as a rank-2 `[H, W]` tensor of 0/1 values.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(
            &[self.height, self.width],
            self.flags.iter().map(|&f| f as f32).collect(),
        )
    }
}

fn check_feature_seg(f: &Tensor, s: &SegmentationMap, context: &'static str) -> Result<()> {
    if f.rank() != 3 || f.shape()[1] != s.height() || f.shape()[2] != s.width() {
        return Err(Error::ShapeMismatch {
            context,
            expected: vec![
                f.shape().first().copied().unwrap_or(0),
                s.height(),
                s.width(),
            ],
            got: f.shape().to_vec(),
        });
    }
    Ok(())
}

/// Averages the feature columns of `f` over each region of `s`.
///
/// Regions with no pixels get a zero row and `presence = false`.
pub fn region_avg_pool(f: &Tensor, s: &SegmentationMap) -> Result<StyleCodeMatrix> {
    region_avg_pool_masked(f, s, None)
}

/// Like [`region_avg_pool`], but pixels flagged in `exclude` do not
/// contribute. A region whose pixels are all excluded is treated as absent.
pub fn region_avg_pool_masked(
    f: &Tensor,
    s: &SegmentationMap,
    exclude: Option<&OcclusionMask>,
) -> Result<StyleCodeMatrix> {
    check_feature_seg(f, s, "region_avg_pool")?;
    if let Some(mask) = exclude {
        if mask.height() != s.height() || mask.width() != s.width() {
            return Err(Error::ShapeMismatch {
                context: "region_avg_pool_masked",
                expected: vec![s.height(), s.width()],
                got: vec![mask.height(), mask.width()],
            });
        }
    }
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let n = s.regions();
    let plane = h * w;
    let mut sums = vec![0.0f64; n * c];
    let mut counts = vec![0usize; n];
    for y in 0..h {
        for x in 0..w {
            if exclude.is_some_and(|m| m.occluded(y, x)) {
                continue;
            }
            let label = s.label(y, x);
            counts[label] += 1;
            let p = y * w + x;
            for ch in 0..c {
                sums[label * c + ch] += f.data()[ch * plane + p] as f64;
            }
        }
    }
    let mut codes = vec![0.0f32; n * c];
    let mut presence = vec![false; n];
    for region in 0..n {
        if counts[region] == 0 {
            continue;
        }
        presence[region] = true;
        for ch in 0..c {
            codes[region * c + ch] = (sums[region * c + ch] / counts[region] as f64) as f32;
        }
    }
    StyleCodeMatrix::new(n, c, codes, presence)
}

/// Marks pixels that are both foreground (per `is_foreground`, indexed by
/// label) and invisible in the source view. Only those pixels need their
/// style inferred.
pub fn occlusion_mask(
    s_g: &SegmentationMap,
    m_vis: &VisibilityMap,
    is_foreground: &[bool],
) -> Result<OcclusionMask> {
    if m_vis.height() != s_g.height() || m_vis.width() != s_g.width() {
        return Err(Error::ShapeMismatch {
            context: "occlusion_mask",
            expected: vec![s_g.height(), s_g.width()],
            got: vec![m_vis.height(), m_vis.width()],
        });
    }
    if is_foreground.len() != s_g.regions() {
        return Err(Error::LengthMismatch {
            shape: vec![s_g.regions()],
            expected: s_g.regions(),
            got: is_foreground.len(),
        });
    }
    let flags = s_g
        .labels()
        .iter()
        .zip(m_vis.flags())
        .map(|(&label, &vis)| u8::from(is_foreground[label as usize] && vis == 1))
        .collect();
    OcclusionMask::new(s_g.height(), s_g.width(), flags)
}

/// Default foreground predicate: every label except 0 is foreground.
pub fn default_foreground(regions: usize) -> Vec<bool> {
    (0..regions).map(|label| label != 0).collect()
}

/// Builds the predicate from an explicit foreground label list.
pub fn foreground_from_labels(regions: usize, labels: &[usize]) -> Result<Vec<bool>> {
    let mut fg = vec![false; regions];
    for &l in labels {
        if l >= regions {
            return Err(Error::LabelOutOfRange { label: l, regions });
        }
        fg[l] = true;
    }
    Ok(fg)
}

/// Masks every pixel whose segmentation label is in `labels` (semantic
/// masking, e.g. "remove the texture of regions 1 and 4").
pub fn mask_from_labels(s: &SegmentationMap, labels: &[usize]) -> Result<OcclusionMask> {
    let selected = foreground_from_labels(s.regions(), labels)?;
    let flags = (0..s.height() * s.width())
        .map(|p| {
            let label = s.labels()[p] as usize;
            u8::from(selected[label])
        })
        .collect();
    OcclusionMask::new(s.height(), s.width(), flags)
}

/// Copies each pixel's region style into a `[C, H, W]` map: column `(y, x)`
/// becomes the style row of the label at `(y, x)`.
pub fn broadcast_styles(st: &StyleCodeMatrix, s: &SegmentationMap) -> Result<Tensor> {
    if st.regions() != s.regions() {
        return Err(Error::InvalidParameter {
            name: "st",
            reason: format!(
                "style matrix has {} regions but segmentation has {}",
                st.regions(),
                s.regions()
            ),
        });
    }
    let (c, h, w) = (st.channels(), s.height(), s.width());
    let plane = h * w;
    let mut data = vec![0.0f32; c * plane];
    for y in 0..h {
        for x in 0..w {
            let row = st.row(s.label(y, x));
            let p = y * w + x;
            for ch in 0..c {
                data[ch * plane + p] = row[ch];
            }
        }
    }
    Tensor::new(&[c, h, w], data)
}

/// Applies the affine map `row -> W * row + b` to each present style row.
/// Absent rows stay zero and the presence vector is preserved.
pub fn style_conv(st: &StyleCodeMatrix, weight: &Tensor, bias: &[f32]) -> Result<StyleCodeMatrix> {
    if weight.rank() != 2 || weight.shape()[1] != st.channels() {
        return Err(Error::ShapeMismatch {
            context: "style_conv",
            expected: vec![bias.len(), st.channels()],
            got: weight.shape().to_vec(),
        });
    }
    let c_out = weight.shape()[0];
    if bias.len() != c_out {
        return Err(Error::LengthMismatch {
            shape: vec![c_out],
            expected: c_out,
            got: bias.len(),
        });
    }
    let c_in = st.channels();
    let mut codes = vec![0.0f32; st.regions() * c_out];
    for region in 0..st.regions() {
        if !st.present(region) {
            continue;
        }
        let row = st.row(region);
        for o in 0..c_out {
            let mut acc = bias[o] as f64;
            for i in 0..c_in {
                acc += weight.at2(o, i) as f64 * row[i] as f64;
            }
            codes[region * c_out + o] = acc as f32;
        }
    }
    StyleCodeMatrix::new(st.regions(), c_out, codes, st.presence().to_vec())
}

/// Injects style into a feature map: `gamma * channel_normalize(f) + beta`,
/// all `[C, H, W]` with per-pixel `gamma`/`beta`.
pub fn modulate(f: &Tensor, gamma: &Tensor, beta: &Tensor, epsilon: f32) -> Result<Tensor> {
    if gamma.shape() != f.shape() {
        return Err(Error::ShapeMismatch {
            context: "modulate(gamma)",
            expected: f.shape().to_vec(),
            got: gamma.shape().to_vec(),
        });
    }
    if beta.shape() != f.shape() {
        return Err(Error::ShapeMismatch {
            context: "modulate(beta)",
            expected: f.shape().to_vec(),
            got: beta.shape().to_vec(),
        });
    }
    let (normalized, _, _) = channel_normalize(f, epsilon)?;
    let data: Vec<f32> = normalized
        .data()
        .iter()
        .zip(gamma.data())
        .zip(beta.data())
        .map(|((&n, &g), &b)| ((g as f64) * (n as f64) + (b as f64)) as f32)
        .collect();
    Tensor::new(f.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_seg(h: usize, w: usize, n: usize, rng: &mut ChaCha8Rng) -> SegmentationMap {
        let labels = (0..h * w).map(|_| rng.gen_range(0..n) as u8).collect();
        SegmentationMap::new(h, w, n, labels).unwrap()
    }

    #[test]
    fn style_matrix_rejects_nonzero_absent_row() {
        let err =
            StyleCodeMatrix::new(2, 2, vec![0.0, 0.0, 1.0, 0.0], vec![false, false]).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter { name: "codes", .. }));
    }

    // Oracle: accumulate per-region pixel lists independently and average.
    #[test]
    fn pool_matches_pixel_list_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = random_seg(4, 4, 3, &mut rng);
        let f = Tensor::from_fn3(2, 4, 4, |_, _, _| rng.gen_range(-3.0..=3.0f32)).unwrap();
        let st = region_avg_pool(&f, &s).unwrap();
        for region in 0..3 {
            for ch in 0..2 {
                let mut values = Vec::new();
                for y in 0..4 {
                    for x in 0..4 {
                        if s.label(y, x) == region {
                            values.push(f.at3(ch, y, x) as f64);
                        }
                    }
                }
                if values.is_empty() {
                    assert!(!st.present(region));
                    assert_eq!(st.row(region)[ch], 0.0);
                } else {
                    let mean = values.iter().sum::<f64>() / values.len() as f64;
                    assert!((st.row(region)[ch] as f64 - mean).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn pool_constant_region_recovers_value_exactly() {
        let s = SegmentationMap::new(2, 2, 2, vec![0, 0, 1, 1]).unwrap();
        let f = Tensor::from_fn3(1, 2, 2, |_, y, _| if y == 0 { 2.5 } else { -7.0 }).unwrap();
        let st = region_avg_pool(&f, &s).unwrap();
        assert_eq!(st.row(0), &[2.5]);
        assert_eq!(st.row(1), &[-7.0]);
    }

    #[test]
    fn pool_empty_region_is_absent_zero() {
        let s = SegmentationMap::new(1, 2, 3, vec![0, 0]).unwrap();
        let f = Tensor::filled(&[2, 1, 2], 1.0).unwrap();
        let st = region_avg_pool(&f, &s).unwrap();
        assert!(st.present(0));
        assert!(!st.present(1));
        assert!(!st.present(2));
        assert_eq!(st.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn masked_pool_ignores_excluded_pixels() {
        let s = SegmentationMap::new(1, 4, 2, vec![1, 1, 1, 0]).unwrap();
        let f = Tensor::new(&[1, 1, 4], vec![10.0, 20.0, 30.0, 5.0]).unwrap();
        let mask = OcclusionMask::new(1, 4, vec![0, 1, 1, 0]).unwrap();
        let st = region_avg_pool_masked(&f, &s, Some(&mask)).unwrap();
        assert_eq!(st.row(1), &[10.0]);
        // fully excluded region becomes absent
        let mask_all = OcclusionMask::new(1, 4, vec![1, 1, 1, 0]).unwrap();
        let st = region_avg_pool_masked(&f, &s, Some(&mask_all)).unwrap();
        assert!(!st.present(1));
        assert_eq!(st.row(1), &[0.0]);
    }

    // Oracle: per-pixel logical AND of foreground and invisibility.
    #[test]
    fn occlusion_mask_matches_and_oracle() {
        let s = SegmentationMap::new(2, 2, 3, vec![0, 1, 2, 1]).unwrap();
        let vis = VisibilityMap::new(2, 2, vec![1, 1, 0, 1]).unwrap();
        let fg = default_foreground(3);
        let mask = occlusion_mask(&s, &vis, &fg).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                let expect = s.label(y, x) != 0 && vis.invisible(y, x);
                assert_eq!(mask.occluded(y, x), expect, "pixel ({y},{x})");
            }
        }
        // background pixel invisible but not foreground: stays clear
        assert!(!mask.occluded(0, 0));
    }

    #[test]
    fn occlusion_respects_custom_foreground_set() {
        let s = SegmentationMap::new(1, 3, 4, vec![1, 2, 3]).unwrap();
        let vis = VisibilityMap::new(1, 3, vec![1, 1, 1]).unwrap();
        let fg = foreground_from_labels(4, &[2]).unwrap();
        let mask = occlusion_mask(&s, &vis, &fg).unwrap();
        assert_eq!(mask.flags(), &[0, 1, 0]);
        assert!(foreground_from_labels(4, &[9]).is_err());
    }

    #[test]
    fn occlusion_all_visible_is_empty() {
        let s = SegmentationMap::new(2, 2, 2, vec![1, 1, 1, 1]).unwrap();
        let vis = VisibilityMap::all_visible(2, 2);
        let mask = occlusion_mask(&s, &vis, &default_foreground(2)).unwrap();
        assert_eq!(mask.count_occluded(), 0);
    }

    #[test]
    fn broadcast_is_per_pixel_row_lookup() {
        let st = StyleCodeMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0], vec![true, true]).unwrap();
        let s = SegmentationMap::new(1, 3, 2, vec![0, 1, 0]).unwrap();
        let out = broadcast_styles(&st, &s).unwrap();
        assert_eq!(out.shape(), &[2, 1, 3]);
        for x in 0..3 {
            let row = st.row(s.label(0, x));
            assert_eq!(out.at3(0, 0, x), row[0]);
            assert_eq!(out.at3(1, 0, x), row[1]);
        }
    }

    // Oracle: dense matrix-vector product per region row.
    #[test]
    fn style_conv_matches_matvec_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c_in = 3;
        let c_out = 4;
        let codes: Vec<f32> = (0..2 * c_in).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let st = StyleCodeMatrix::new(2, c_in, codes, vec![true, true]).unwrap();
        let w = Tensor::from_fn2(c_out, c_in, |_, _| rng.gen_range(-1.0..=1.0f32)).unwrap();
        let b: Vec<f32> = (0..c_out).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let out = style_conv(&st, &w, &b).unwrap();
        for region in 0..2 {
            for o in 0..c_out {
                let mut expect = b[o] as f64;
                for i in 0..c_in {
                    expect += w.at2(o, i) as f64 * st.row(region)[i] as f64;
                }
                assert!((out.row(region)[o] as f64 - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn style_conv_keeps_absent_rows_zero() {
        let st = StyleCodeMatrix::new(2, 2, vec![1.0, -1.0, 0.0, 0.0], vec![true, false]).unwrap();
        let w = Tensor::from_fn2(2, 2, |i, j| if i == j { 1.0 } else { 0.0 }).unwrap();
        // nonzero bias must not leak into absent rows
        let out = style_conv(&st, &w, &[5.0, 5.0]).unwrap();
        assert_eq!(out.row(0), &[6.0, 4.0]);
        assert_eq!(out.row(1), &[0.0, 0.0]);
        assert_eq!(out.presence(), &[true, false]);
    }

    #[test]
    fn modulate_identity_gamma_zero_beta_is_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = Tensor::from_fn3(2, 3, 3, |_, _, _| rng.gen_range(-2.0..=2.0f32)).unwrap();
        let gamma = Tensor::filled(f.shape(), 1.0).unwrap();
        let beta = Tensor::zeros(f.shape()).unwrap();
        let out = modulate(&f, &gamma, &beta, 1e-5).unwrap();
        let (norm, _, _) = channel_normalize(&f, 1e-5).unwrap();
        assert!(out.bit_eq(&norm));
    }

    #[test]
    fn modulate_zero_gamma_returns_beta() {
        let f = Tensor::from_fn3(1, 2, 2, |_, y, x| (y * 2 + x) as f32).unwrap();
        let gamma = Tensor::zeros(f.shape()).unwrap();
        let beta = Tensor::filled(f.shape(), 0.75).unwrap();
        let out = modulate(&f, &gamma, &beta, 1e-5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.75));
    }

    proptest! {
        // Invariant: broadcasting pooled codes reproduces region-constant
        // feature maps.
        #[test]
        fn prop_pool_broadcast_identity(seed in 0u64..150) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = rng.gen_range(2..=6usize);
            let w = rng.gen_range(2..=6usize);
            let n = rng.gen_range(2..=4usize);
            let c = rng.gen_range(1..=3usize);
            let s = random_seg(h, w, n, &mut rng);
            let values: Vec<Vec<f32>> = (0..n)
                .map(|_| (0..c).map(|_| rng.gen_range(-5.0..=5.0)).collect())
                .collect();
            let f = Tensor::from_fn3(c, h, w, |ch, y, x| values[s.label(y, x)][ch]).unwrap();
            let st = region_avg_pool(&f, &s).unwrap();
            let back = broadcast_styles(&st, &s).unwrap();
            prop_assert!(f.max_abs_diff(&back).unwrap() <= 1e-6);
        }

        // Invariant: occlusion flags never exceed visibility flags.
        #[test]
        fn prop_occlusion_subset_of_invisible(seed in 0u64..150) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = rng.gen_range(1..=5usize);
            let w = rng.gen_range(1..=5usize);
            let n = rng.gen_range(1..=4usize);
            let s = random_seg(h, w, n, &mut rng);
            let flags: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..=1u8)).collect();
            let vis = VisibilityMap::new(h, w, flags).unwrap();
            let mask = occlusion_mask(&s, &vis, &default_foreground(n)).unwrap();
            for (m, v) in mask.flags().iter().zip(vis.flags()) {
                prop_assert!(m <= v);
            }
        }

        // Invariant: modulate is homogeneous in (gamma, beta).
        #[test]
        fn prop_modulate_affine_scaling(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Tensor::from_fn3(2, 3, 4, |_, _, _| rng.gen_range(-2.0..=2.0f32)).unwrap();
            let gamma = Tensor::from_fn3(2, 3, 4, |_, _, _| rng.gen_range(-1.0..=1.0f32)).unwrap();
            let beta = Tensor::from_fn3(2, 3, 4, |_, _, _| rng.gen_range(-1.0..=1.0f32)).unwrap();
            let a = rng.gen_range(-2.0..=2.0f32);
            let lhs = modulate(&f, &gamma.scale(a).unwrap(), &beta.scale(a).unwrap(), 1e-5).unwrap();
            let rhs = modulate(&f, &gamma, &beta, 1e-5).unwrap().scale(a).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-6);
        }
    }
}
