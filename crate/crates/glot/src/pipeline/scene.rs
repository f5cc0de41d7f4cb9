//! Synthetic scene generation: elliptical body parts in a target layout,
//! each moved rigidly back to a source layout, with a dense flow field and
//! a visibility map derived from the same motion. The generator is the test
//! bed for the forward pipeline; everything is reproducible from one seed.

use super::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::tensor::{SegmentationMap, Tensor, VisibilityMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One generated example: a source image with its segmentation, the target
/// layout the subject should be re-posed into, the predicted segmentation
/// the pipeline actually conditions on, dense target-to-source flow, and
/// the map of target pixels with no visible source counterpart.
#[derive(Debug, Clone)]
pub struct Scene {
    /// `[3, H, W]` RGB in `[0, 1]`.
    pub source_image: Tensor,
    pub source_seg: SegmentationMap,
    pub target_seg: SegmentationMap,
    /// What a segmentation estimator would hand the pipeline. Equal to
    /// `target_seg` unless label noise was requested.
    pub predicted_seg: SegmentationMap,
    /// `[2, H, W]`; channel 0 is the row offset, channel 1 the column
    /// offset, mapping each target pixel to its source location.
    pub flow: Tensor,
    pub visibility: VisibilityMap,
    pub seed: u64,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.target_seg.height()
    }

    pub fn width(&self) -> usize {
        self.target_seg.width()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let check = |name: &'static str, sh: usize, sw: usize| {
            if sh != h || sw != w {
                return Err(Error::InvalidParameter {
                    name,
                    reason: format!("extent {sh}x{sw} does not match target {h}x{w}"),
                });
            }
            Ok(())
        };
        check(
            "source_seg",
            self.source_seg.height(),
            self.source_seg.width(),
        )?;
        check(
            "predicted_seg",
            self.predicted_seg.height(),
            self.predicted_seg.width(),
        )?;
        check(
            "visibility",
            self.visibility.height(),
            self.visibility.width(),
        )?;
        if self.source_image.shape() != [3, h, w] {
            return Err(Error::InvalidParameter {
                name: "source_image",
                reason: format!(
                    "expected [3, {h}, {w}], got {:?}",
                    self.source_image.shape()
                ),
            });
        }
        if self.flow.shape() != [2, h, w] {
            return Err(Error::InvalidParameter {
                name: "flow",
                reason: format!("expected [2, {h}, {w}], got {:?}", self.flow.shape()),
            });
        }
        let bound = h.max(w) as f32;
        for &v in self.flow.data() {
            if !v.is_finite() || v.abs() >= bound {
                return Err(Error::InvalidParameter {
                    name: "flow",
                    reason: format!("offset {v} exceeds the frame extent {bound}"),
                });
            }
        }
        Ok(())
    }
}

/// Axis-aligned ellipse, the footprint of one region in the target layout.
#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

/// Rigid motion of one region: rotation by `theta` about the target-layout
/// center, then translation by `(ty, tx)`. `apply` maps target coordinates
/// to source coordinates; `invert` goes the other way.
#[derive(Debug, Clone, Copy)]
struct Motion {
    theta: f64,
    ty: f64,
    tx: f64,
    cy: f64,
    cx: f64,
}

impl Motion {
    fn apply(&self, y: f64, x: f64) -> (f64, f64) {
        let (s, c) = (-self.theta).sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        (
            c * dy - s * dx + self.cy + self.ty,
            s * dy + c * dx + self.cx + self.tx,
        )
    }

    fn invert(&self, y: f64, x: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (dy, dx) = (y - self.cy - self.ty, x - self.cx - self.tx);
        (c * dy - s * dx + self.cy, s * dy + c * dx + self.cx)
    }
}

/// Generates a scene from `cfg` extents and motion bounds. Foreground
/// regions are ellipses placed in the target frame and painted in ascending
/// label order, so higher labels occlude lower ones where they overlap. Each
/// region then receives a rigid motion carrying it to its source placement;
/// the flow stores exactly that motion on the region's target pixels, and a
/// target pixel is marked occluded when following its motion lands outside
/// the frame or on a source pixel another region claimed.
///
/// With `max_translation` and `max_rotation` both zero the source equals the
/// target, the flow is identically zero, and nothing is occluded.
pub fn synth_scene(cfg: &PipelineConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let foreground = cfg.foreground()?;
    let labels: Vec<usize> = (0..cfg.regions).filter(|&n| foreground[n]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let ry_hi = 2.0_f64.max(h as f64 / 6.0);
    let rx_hi = 2.0_f64.max(w as f64 / 6.0);
    let ellipses: Vec<Ellipse> = labels
        .iter()
        .map(|_| Ellipse {
            cy: rng.gen_range(0.2 * h as f64..0.8 * h as f64),
            cx: rng.gen_range(0.2 * w as f64..0.8 * w as f64),
            ry: rng.gen_range(2.0..=ry_hi),
            rx: rng.gen_range(2.0..=rx_hi),
        })
        .collect();

    let still = cfg.motion.max_translation == 0.0 && cfg.motion.max_rotation == 0.0;
    let motions: Vec<Motion> = ellipses
        .iter()
        .map(|e| {
            let (t, r) = (cfg.motion.max_translation, cfg.motion.max_rotation);
            Motion {
                theta: if still { 0.0 } else { rng.gen_range(-r..=r) },
                ty: if still { 0.0 } else { rng.gen_range(-t..=t) },
                tx: if still { 0.0 } else { rng.gen_range(-t..=t) },
                cy: e.cy,
                cx: e.cx,
            }
        })
        .collect();

    // Target layout: paint ellipses in ascending label order.
    let mut target = vec![0u8; h * w];
    for (e, &n) in ellipses.iter().zip(&labels) {
        for y in 0..h {
            for x in 0..w {
                if e.contains(y as f64, x as f64) {
                    target[y * w + x] = n as u8;
                }
            }
        }
    }

    // Source layout: a pixel belongs to region n when undoing n's motion
    // lands inside n's ellipse. Ascending order again, so overlaps resolve
    // the same way as in the target frame.
    let mut source = vec![0u8; h * w];
    for (i, (e, m)) in ellipses.iter().zip(&motions).enumerate() {
        let n = labels[i];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = m.invert(y as f64, x as f64);
                if e.contains(sy, sx) {
                    source[y * w + x] = n as u8;
                }
            }
        }
    }

    // Flow on target foreground pixels; identity elsewhere.
    let mut flow = vec![0.0f32; 2 * h * w];
    let mut vis = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let lab = target[y * w + x] as usize;
            if lab == 0 {
                continue;
            }
            let idx = labels
                .iter()
                .position(|&n| n == lab)
                .expect("painted label");
            let m = &motions[idx];
            let (sy, sx) = m.apply(y as f64, x as f64);
            if still {
                // Avoid -0.0 and rounding residue in the exact-identity case.
                debug_assert!((sy - y as f64).abs() < 1e-9 && (sx - x as f64).abs() < 1e-9);
            } else {
                flow[y * w + x] = (sy - y as f64) as f32;
                flow[h * w + y * w + x] = (sx - x as f64) as f32;
            }
            let (ri, ci) = (sy.round(), sx.round());
            let inside = ri >= 0.0 && ci >= 0.0 && ri < h as f64 && ci < w as f64;
            let visible = inside && source[ri as usize * w + ci as usize] as usize == lab;
            if !visible {
                vis[y * w + x] = 1;
            }
        }
    }

    // Source image: flat per-region color plus mild pixel noise.
    let mut colors = vec![[0.05f32, 0.06, 0.08]];
    for _ in 1..cfg.regions {
        colors.push([
            rng.gen_range(0.15..0.95),
            rng.gen_range(0.15..0.95),
            rng.gen_range(0.15..0.95),
        ]);
    }
    let mut image = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let color = colors[source[y * w + x] as usize];
            for (ch, &base) in color.iter().enumerate() {
                let noisy = base + rng.gen_range(-0.03..0.03);
                image[ch * h * w + y * w + x] = noisy.clamp(0.0, 1.0);
            }
        }
    }

    // Optional label corruption for the predicted segmentation.
    let mut predicted = target.clone();
    if cfg.sg_noise_rate > 0.0 {
        for p in predicted.iter_mut() {
            if rng.gen_range(0.0..1.0) < cfg.sg_noise_rate {
                *p = rng.gen_range(0..cfg.regions) as u8;
            }
        }
    }

    let scene = Scene {
        source_image: Tensor::new(&[3, h, w], image)?,
        source_seg: SegmentationMap::new(h, w, cfg.regions, source)?,
        target_seg: SegmentationMap::new(h, w, cfg.regions, target)?,
        predicted_seg: SegmentationMap::new(h, w, cfg.regions, predicted)?,
        flow: Tensor::new(&[2, h, w], flow)?,
        visibility: VisibilityMap::new(h, w, vis)?,
        seed,
    };
    scene.validate()?;
    Ok(scene)
}
