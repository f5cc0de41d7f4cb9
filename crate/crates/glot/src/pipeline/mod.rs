//! The full forward pass: encode, warp, reason over the region graph,
//! modulate, align local structure through a transport plan, and decode.
//!
//! A [`Pipeline`] holds every fixed parameter (seeded convolution stacks,
//! projection matrices, mixing weights), so separate runs with the same
//! config and scene are bit-identical. Two entry points exist:
//!
//! * [`Pipeline::run_pose_transfer`]: re-pose a source image into a target
//!   layout, inferring styles for occluded regions from the region graph.
//! * [`Pipeline::run_inpainting`]: re-synthesize masked pixels of a single
//!   image, pooling styles from the unmasked remainder.
//!
//! Both return their intermediate tensors by stage name for inspection.

pub mod config;
pub mod scene;
pub mod selftest;

pub use config::{default_edges, MotionConfig, OtConfig, PercConfig, PipelineConfig};
pub use scene::{synth_scene, Scene};
pub use selftest::{run_selftest, CheckResult, CheckStatus, SelftestReport};

use crate::error::{Error, Result, StageExt};
use crate::graph::{build_body_graph, graph_reason, merge_styles, SubsetWeights};
use crate::local::{loc_conv, predict_modulation, self_correlation, ModulationField};
use crate::region::{
    broadcast_styles, modulate, occlusion_mask, region_avg_pool_masked, style_conv, OcclusionMask,
    StyleCodeMatrix,
};
use crate::stack::{Activation, ConvLayer, ConvStack};
use crate::tensor::{io, SegmentationMap, Tensor};
use crate::transport::{cost_matrix, sinkhorn, warp_modulation, warp_modulation_raw};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Largest position count the transport plan is solved at directly; bigger
/// frames are average-pooled onto a grid of at most `GRID_H x GRID_W` cells
/// first and the warped parameters upsampled back.
const MAX_PLAN_POSITIONS: usize = 256;
const GRID_H: usize = 16;
const GRID_W: usize = 12;

/// Samples `f` (`[C, H, W]`) at `p + flow(p)` for every position, with
/// bilinear interpolation and zero fill outside the frame. `flow` is
/// `[2, H, W]`: channel 0 holds row offsets, channel 1 column offsets.
///
/// A zero flow reproduces the input exactly, bit for bit.
pub fn warp_source(f: &Tensor, flow: &Tensor) -> Result<Tensor> {
    if f.rank() != 3 {
        return Err(Error::ShapeMismatch {
            context: "warp_source features",
            expected: vec![0, 0, 0],
            got: f.shape().to_vec(),
        });
    }
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    if flow.shape() != [2, h, w] {
        return Err(Error::ShapeMismatch {
            context: "warp_source flow",
            expected: vec![2, h, w],
            got: flow.shape().to_vec(),
        });
    }
    let plane = h * w;
    let sample = |ch: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            f.data()[ch * plane + y as usize * w + x as usize] as f64
        }
    };
    let mut out = vec![0.0f32; c * plane];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let sy = y as f64 + flow.data()[p] as f64;
            let sx = x as f64 + flow.data()[plane + p] as f64;
            let y0 = sy.floor();
            let x0 = sx.floor();
            let (wy, wx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            for ch in 0..c {
                let v = (1.0 - wy) * (1.0 - wx) * sample(ch, y0, x0)
                    + (1.0 - wy) * wx * sample(ch, y0, x0 + 1)
                    + wy * (1.0 - wx) * sample(ch, y0 + 1, x0)
                    + wy * wx * sample(ch, y0 + 1, x0 + 1);
                out[ch * plane + p] = v as f32;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Mean-pools `f` (`[C, H, W]`) over `cell_h x cell_w` cells; edge cells may
/// be smaller and average over what they cover. Cell size 1x1 is exact.
fn avg_pool(f: &Tensor, cell_h: usize, cell_w: usize) -> Result<Tensor> {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let (gh, gw) = (h.div_ceil(cell_h), w.div_ceil(cell_w));
    let mut out = vec![0.0f32; c * gh * gw];
    for ch in 0..c {
        for gy in 0..gh {
            let y_end = ((gy + 1) * cell_h).min(h);
            for gx in 0..gw {
                let x_end = ((gx + 1) * cell_w).min(w);
                let mut sum = 0.0f64;
                let mut count = 0usize;
                for y in gy * cell_h..y_end {
                    for x in gx * cell_w..x_end {
                        sum += f.data()[(ch * h + y) * w + x] as f64;
                        count += 1;
                    }
                }
                out[(ch * gh + gy) * gw + gx] = (sum / count as f64) as f32;
            }
        }
    }
    Tensor::new(&[c, gh, gw], out)
}

/// Bilinearly resizes the leading two axes of `t` (rank 3 or 4) to `h x w`,
/// treating samples as cell centers and clamping at the border.
fn upsample_plane(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (gh, gw) = (t.shape()[0], t.shape()[1]);
    if gh == h && gw == w {
        return Ok(t.clone());
    }
    let m: usize = t.shape()[2..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = h;
    shape[1] = w;
    let axis = |out_i: usize, out_n: usize, in_n: usize| -> (usize, usize, f64) {
        let src =
            ((out_i as f64 + 0.5) * in_n as f64 / out_n as f64 - 0.5).clamp(0.0, (in_n - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(in_n - 1);
        (lo, hi, src - lo as f64)
    };
    let mut out = vec![0.0f32; h * w * m];
    for y in 0..h {
        let (y0, y1, wy) = axis(y, h, gh);
        for x in 0..w {
            let (x0, x1, wx) = axis(x, w, gw);
            let corners = [
                ((y0 * gw + x0) * m, (1.0 - wy) * (1.0 - wx)),
                ((y0 * gw + x1) * m, (1.0 - wy) * wx),
                ((y1 * gw + x0) * m, wy * (1.0 - wx)),
                ((y1 * gw + x1) * m, wy * wx),
            ];
            let dst = (y * w + x) * m;
            for i in 0..m {
                let mut v = 0.0f64;
                for &(base, weight) in &corners {
                    v += weight * t.data()[base + i] as f64;
                }
                out[dst + i] = v as f32;
            }
        }
    }
    Tensor::new(&shape, out)
}

fn upsample_field(field: &ModulationField, h: usize, w: usize) -> Result<ModulationField> {
    ModulationField::new(
        field.kernel(),
        upsample_plane(field.taps(), h, w)?,
        upsample_plane(field.bias(), h, w)?,
    )
}

/// Ordered collection of named intermediate tensors from one run.
#[derive(Debug, Clone, Default)]
pub struct Intermediates {
    entries: Vec<(&'static str, Tensor)>,
}

impl Intermediates {
    fn push(&mut self, name: &'static str, t: Tensor) {
        debug_assert!(self.entries.iter().all(|(n, _)| *n != name));
        self.entries.push((name, t));
    }

    /// Looks a stage up by name; the error lists what is available.
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::UnknownStage {
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (*n, t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Result of one pose-transfer run.
#[derive(Debug, Clone)]
pub struct PoseTransferOutput {
    /// Generated `[3, H, W]` image in `(0, 1)`.
    pub image: Tensor,
    pub intermediates: Intermediates,
    /// Non-fatal conditions, e.g. a transport plan stopping on the
    /// iteration cap instead of the tolerance.
    pub warnings: Vec<String>,
}

/// Result of one inpainting run.
#[derive(Debug, Clone)]
pub struct InpaintOutput {
    /// Input image with masked pixels re-synthesized; unmasked pixels are
    /// copied through untouched.
    pub image: Tensor,
    /// The `[C, H, W]` style map the modulation heads consumed.
    pub conditioning: Tensor,
    /// Styles pooled from unmasked pixels only.
    pub styles_survivor: StyleCodeMatrix,
    /// One propagation pass over the survivors.
    pub styles_reasoned: StyleCodeMatrix,
    /// Survivor styles with absent regions filled in (propagated where the
    /// graph allows, global average otherwise).
    pub styles_filled: StyleCodeMatrix,
    pub warnings: Vec<String>,
}

/// All fixed parameters of the forward pass, derived from one seed (or
/// overridden from tensor files) so runs are reproducible.
#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: PipelineConfig,
    foreground: Vec<bool>,
    edges: Vec<(usize, usize)>,
    encoder: ConvStack,
    pose_encoder: ConvStack,
    style_weight: Tensor,
    style_bias: Vec<f32>,
    gamma_head: ConvLayer,
    beta_head: ConvLayer,
    proj_taps: Tensor,
    proj_bias: Tensor,
    subset_weights: SubsetWeights,
    decoder: ConvStack,
}

/// Reads `<dir>/<name>.glt` if it exists, insisting on `shape`; otherwise
/// hands back the seeded fallback.
fn override_tensor(dir: Option<&Path>, name: &str, fallback: Tensor) -> Result<Tensor> {
    let Some(dir) = dir else {
        return Ok(fallback);
    };
    let path = dir.join(format!("{name}.glt"));
    if !path.exists() {
        return Ok(fallback);
    }
    let loaded = io::load_tensor(&path)?;
    if loaded.shape() != fallback.shape() {
        return Err(Error::InvalidParameter {
            name: "weights_dir",
            reason: format!(
                "{} has shape {:?}, expected {:?}",
                path.display(),
                loaded.shape(),
                fallback.shape()
            ),
        });
    }
    Ok(loaded)
}

impl Pipeline {
    /// Builds every fixed parameter from `cfg.param_seed`. Each component
    /// draws from its own seed stream, so adding or reordering components
    /// does not disturb the others. When `cfg.weights_dir` is set, any file
    /// named after a component (`encoder_0.glt`, `pose_0.glt`,
    /// `style_weight.glt`, `gamma_head.glt`, `beta_head.glt`, `proj_taps.glt`,
    /// `proj_bias.glt`, `subset_w0.glt`..`subset_w2.glt`, `decoder_0.glt`,
    /// `decoder_1.glt`) replaces the seeded weight; biases stay fixed.
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.feature_channels;
        let n = cfg.regions;
        let dir = cfg.weights_dir.as_deref();
        let stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.param_seed);
            rng.set_stream(s);
            rng
        };
        let leaky = Activation::LeakyRelu(0.2);

        let conv = |name: &str,
                    c_in: usize,
                    c_out: usize,
                    k: usize,
                    activation: Activation,
                    bias: f32,
                    rng: &mut ChaCha8Rng|
         -> Result<ConvLayer> {
            let seeded = ConvLayer::seeded(c_in, c_out, k, 1, activation, rng)?;
            let weight = override_tensor(dir, name, seeded.weight().clone())?;
            ConvLayer::new(weight, vec![bias; c_out], 1, activation)
        };

        let mut rng = stream(1);
        let encoder = ConvStack::new(vec![
            conv("encoder_0", 3, c, 3, leaky, 0.0, &mut rng)?,
            conv("encoder_1", c, c, 3, leaky, 0.0, &mut rng)?,
        ])?;
        let mut rng = stream(2);
        let pose_encoder = ConvStack::new(vec![
            conv("pose_0", n, c, 3, leaky, 0.0, &mut rng)?,
            conv("pose_1", c, c, 3, leaky, 0.0, &mut rng)?,
        ])?;

        let mut rng = stream(3);
        let bound = (1.0 / c as f32).sqrt();
        let seeded = Tensor::from_fn2(c, c, |_, _| rng.gen_range(-bound..=bound))?;
        let style_weight = override_tensor(dir, "style_weight", seeded)?;

        // Zero conditioning must mean "leave the features alone": the scale
        // head biases to 1, the shift head to 0.
        let gamma_head = conv(
            "gamma_head",
            c,
            c,
            1,
            Activation::Linear,
            1.0,
            &mut stream(4),
        )?;
        let beta_head = conv(
            "beta_head",
            c,
            c,
            1,
            Activation::Linear,
            0.0,
            &mut stream(5),
        )?;

        let q = (2 * cfg.d + 1) * (2 * cfg.d + 1);
        let bound = (1.0 / q as f32).sqrt();
        let mut rng = stream(6);
        let taps = Tensor::from_fn2(c * cfg.k * cfg.k, q, |_, _| rng.gen_range(-bound..=bound))?;
        let proj_taps = override_tensor(dir, "proj_taps", taps)?;
        let mut rng = stream(7);
        let bias = Tensor::from_fn2(c, q, |_, _| rng.gen_range(-bound..=bound))?;
        let proj_bias = override_tensor(dir, "proj_bias", bias)?;

        let seeded = SubsetWeights::seeded(c, stream(8).gen::<u64>())?;
        let subset_weights = SubsetWeights::new(
            override_tensor(dir, "subset_w0", seeded.matrix(0).clone())?,
            override_tensor(dir, "subset_w1", seeded.matrix(1).clone())?,
            override_tensor(dir, "subset_w2", seeded.matrix(2).clone())?,
        )?;

        let mut rng = stream(9);
        let decoder = ConvStack::new(vec![
            conv("decoder_0", c, c, 3, leaky, 0.0, &mut rng)?,
            conv("decoder_1", c, 3, 3, Activation::Sigmoid, 0.0, &mut rng)?,
        ])?;

        Ok(Pipeline {
            foreground: cfg.foreground()?,
            edges: cfg.graph_edges(),
            cfg,
            encoder,
            pose_encoder,
            style_weight,
            style_bias: vec![0.0; c],
            gamma_head,
            beta_head,
            proj_taps,
            proj_bias,
            subset_weights,
            decoder,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    fn check_extent(&self, name: &'static str, h: usize, w: usize) -> Result<()> {
        if h != self.cfg.height || w != self.cfg.width {
            return Err(Error::InvalidParameter {
                name,
                reason: format!(
                    "extent {h}x{w} does not match the configured {}x{}",
                    self.cfg.height, self.cfg.width
                ),
            });
        }
        Ok(())
    }

    /// Scale and shift maps from a conditioning style map.
    fn heads(&self, conditioning: &Tensor) -> Result<(Tensor, Tensor)> {
        let gamma = self.gamma_head.forward(conditioning)?;
        let beta = self.beta_head.forward(conditioning)?;
        Ok((gamma, beta))
    }

    /// Full re-posing pass. See the stage names pushed into
    /// [`PoseTransferOutput::intermediates`] for the dataflow; any operator
    /// failure is tagged with its stage.
    pub fn run_pose_transfer(&self, scene: &Scene) -> Result<PoseTransferOutput> {
        scene.validate()?;
        self.check_extent("scene", scene.height(), scene.width())?;
        if scene.predicted_seg.regions() != self.cfg.regions {
            return Err(Error::InvalidParameter {
                name: "scene",
                reason: format!(
                    "{} regions in scene, {} configured",
                    scene.predicted_seg.regions(),
                    self.cfg.regions
                ),
            });
        }
        let (h, w) = (self.cfg.height, self.cfg.width);
        let mut im = Intermediates::default();
        let mut warnings = Vec::new();

        let f_s = self.encoder.forward(&scene.source_image).stage("encode")?;
        im.push("f_s", f_s.clone());

        let warped = warp_source(&f_s, &scene.flow).stage("warp")?;
        im.push("warped", warped.clone());

        let pose = scene.predicted_seg.one_hot().stage("pose_encode")?;
        let f_p = self.pose_encoder.forward(&pose).stage("pose_encode")?;
        im.push("f_p", f_p.clone());

        let fused = warped.add(&f_p).stage("fuse")?;
        im.push("fused", fused.clone());

        let m_oc = occlusion_mask(&scene.predicted_seg, &scene.visibility, &self.foreground)
            .stage("occlusion")?;
        im.push("occlusion", m_oc.to_tensor().stage("occlusion")?);

        let pooled =
            region_avg_pool_masked(&warped, &scene.predicted_seg, Some(&m_oc)).stage("styles")?;
        let st = style_conv(&pooled, &self.style_weight, &self.style_bias).stage("styles")?;
        im.push("styles", st.to_tensor().stage("styles")?);

        let graph = build_body_graph(&scene.predicted_seg, &self.edges).stage("graph")?;
        let st_reasoned = graph_reason(&st, &graph, &self.subset_weights).stage("graph")?;
        im.push("styles_reasoned", st_reasoned.to_tensor().stage("graph")?);

        let conditioning =
            merge_styles(&st, &st_reasoned, &m_oc, &scene.predicted_seg).stage("merge")?;
        im.push("conditioning", conditioning.clone());

        let (gamma, beta) = self.heads(&conditioning).stage("heads")?;
        im.push("gamma", gamma.clone());
        im.push("beta", beta.clone());

        let f_o = modulate(&fused, &gamma, &beta, self.cfg.epsilon).stage("modulate")?;
        im.push("f_o", f_o.clone());

        // Local structure transfer runs on a coarse grid when the frame is
        // too large for a dense position-to-position plan.
        let (cell_h, cell_w) = if h * w <= MAX_PLAN_POSITIONS {
            (1, 1)
        } else {
            (h.div_ceil(GRID_H), w.div_ceil(GRID_W))
        };
        let grid_s = avg_pool(&f_s, cell_h, cell_w).stage("correlate")?;
        let grid_o = avg_pool(&f_o, cell_h, cell_w).stage("correlate")?;

        let corr = self_correlation(
            &grid_s,
            self.cfg.r,
            self.cfg.d,
            self.cfg.normalize_correlation,
        )
        .stage("correlate")?;
        im.push("correlation", corr.values().clone());

        let field = predict_modulation(&corr, &self.proj_taps, &self.proj_bias, self.cfg.k)
            .stage("predict")?;
        im.push("field_taps", field.taps().clone());
        im.push("field_bias", field.bias().clone());

        let cost = cost_matrix(&grid_s, &grid_o, self.cfg.epsilon).stage("cost")?;
        im.push("cost", cost.values().clone());

        let positions = cost.rows();
        let uniform = vec![1.0f32 / positions as f32; positions];
        let ot = &self.cfg.ot;
        let plan = sinkhorn(
            &cost,
            &uniform,
            &uniform,
            ot.eps_reg,
            ot.tau,
            ot.mode,
            ot.max_iters,
            ot.tol,
        )
        .stage("plan")?;
        if !plan.converged() {
            warnings.push(format!(
                "transport plan stopped at the {}-iteration cap with marginal violation {:.3e}",
                plan.iterations(),
                plan.max_violation()
            ));
        }
        im.push("plan", plan.matrix().clone());

        // Rows of the transposed plan index generated positions, so the
        // warped field is indexed like `f_o`.
        let aligned = if ot.strict_warp {
            warp_modulation_raw(&plan.transposed(), &field)
        } else {
            warp_modulation(&plan.transposed(), &field)
        }
        .stage("align")?;
        let field_full = upsample_field(&aligned, h, w).stage("align")?;
        im.push("aligned_taps", field_full.taps().clone());
        im.push("aligned_bias", field_full.bias().clone());

        let f_g = loc_conv(&f_o, &field_full, self.cfg.epsilon, self.cfg.bias_per_tap)
            .stage("locconv")?;
        im.push("f_g", f_g.clone());

        let image = self.decoder.forward(&f_g).stage("decode")?;
        im.push("image", image.clone());

        Ok(PoseTransferOutput {
            image,
            intermediates: im,
            warnings,
        })
    }

    /// Re-synthesizes the masked pixels of `image`. Styles are pooled from
    /// unmasked pixels; regions left with nothing take one propagation pass
    /// per hop from their surviving neighbors, and regions the graph cannot
    /// reach fall back to the average surviving style (with a warning).
    /// Unmasked pixels pass through bit-exact.
    pub fn run_inpainting(
        &self,
        image: &Tensor,
        seg: &SegmentationMap,
        mask: &OcclusionMask,
    ) -> Result<InpaintOutput> {
        if image.rank() != 3 || image.shape()[0] != 3 {
            return Err(Error::ShapeMismatch {
                context: "run_inpainting image",
                expected: vec![3, seg.height(), seg.width()],
                got: image.shape().to_vec(),
            });
        }
        let (h, w) = (image.shape()[1], image.shape()[2]);
        self.check_extent("image", h, w)?;
        if seg.height() != h || seg.width() != w || mask.height() != h || mask.width() != w {
            return Err(Error::ShapeMismatch {
                context: "run_inpainting seg/mask",
                expected: vec![h, w],
                got: vec![seg.height(), seg.width()],
            });
        }
        if seg.regions() != self.cfg.regions {
            return Err(Error::InvalidParameter {
                name: "seg",
                reason: format!(
                    "{} regions in segmentation, {} configured",
                    seg.regions(),
                    self.cfg.regions
                ),
            });
        }
        let mut warnings = Vec::new();

        let f = self.encoder.forward(image).stage("encode")?;
        let pooled = region_avg_pool_masked(&f, seg, Some(mask)).stage("styles")?;
        let survivor = style_conv(&pooled, &self.style_weight, &self.style_bias).stage("styles")?;
        let graph = build_body_graph(seg, &self.edges).stage("graph")?;
        let reasoned = graph_reason(&survivor, &graph, &self.subset_weights).stage("graph")?;

        // Fill absent rows outward from the survivors: regions one hop away
        // take the first propagation pass verbatim, farther regions take
        // later passes computed from the already-filled matrix. Rows that
        // are once filled never change.
        let nr = survivor.regions();
        let c = survivor.channels();
        let mut codes: Vec<f32> = Vec::with_capacity(nr * c);
        let mut presence = survivor.presence().to_vec();
        for region in 0..nr {
            codes.extend_from_slice(survivor.row(region));
        }
        let mut pass = reasoned.clone();
        loop {
            let mut adopted = false;
            for region in 0..nr {
                if !presence[region] && pass.present(region) {
                    codes[region * c..(region + 1) * c].copy_from_slice(pass.row(region));
                    presence[region] = true;
                    adopted = true;
                }
            }
            if !adopted {
                break;
            }
            let cur = StyleCodeMatrix::new(nr, c, codes.clone(), presence.clone()).stage("fill")?;
            pass = graph_reason(&cur, &graph, &self.subset_weights).stage("fill")?;
        }

        // Whatever is still absent has no path to a survivor.
        let counts = seg.region_pixel_counts();
        let present_rows: Vec<usize> = (0..nr).filter(|&r| survivor.present(r)).collect();
        let mean_row: Vec<f32> = if present_rows.is_empty() {
            vec![0.0; c]
        } else {
            (0..c)
                .map(|ch| {
                    let sum: f64 = present_rows
                        .iter()
                        .map(|&r| survivor.row(r)[ch] as f64)
                        .sum();
                    (sum / present_rows.len() as f64) as f32
                })
                .collect()
        };
        for region in 0..nr {
            if presence[region] || counts[region] == 0 {
                continue;
            }
            codes[region * c..(region + 1) * c].copy_from_slice(&mean_row);
            presence[region] = true;
            if present_rows.is_empty() {
                warnings.push(format!(
                    "region {region} is fully masked and nothing is visible anywhere; styled with zeros"
                ));
            } else {
                warnings.push(format!(
                    "region {region} has no visible pixels and no graph path to a visible region; \
                     filled from the average of visible region styles"
                ));
            }
        }
        let filled = StyleCodeMatrix::new(nr, c, codes, presence).stage("fill")?;

        let conditioning = broadcast_styles(&filled, seg).stage("broadcast")?;
        let (gamma, beta) = self.heads(&conditioning).stage("heads")?;
        let modulated = modulate(&f, &gamma, &beta, self.cfg.epsilon).stage("modulate")?;
        let decoded = self.decoder.forward(&modulated).stage("decode")?;

        // Hard copy outside the mask; only masked pixels change.
        let plane = h * w;
        let mut out = image.data().to_vec();
        for y in 0..h {
            for x in 0..w {
                if mask.occluded(y, x) {
                    for ch in 0..3 {
                        out[ch * plane + y * w + x] = decoded.data()[ch * plane + y * w + x];
                    }
                }
            }
        }
        let blended = Tensor::new(&[3, h, w], out).stage("blend")?;

        Ok(InpaintOutput {
            image: blended,
            conditioning,
            styles_survivor: survivor,
            styles_reasoned: reasoned,
            styles_filled: filled,
            warnings,
        })
    }
}
