//! Built-in verification suite: one deterministic pass over every module's
//! core invariants, gradient checks included, reported as JSON.
//!
//! Policy: a `fail` fails the suite; a `warn` does not. The only check that
//! can warn is the transport-marginal one, since a config may legitimately
//! set a tolerance/iteration budget the solver cannot meet (the plan is
//! still usable, just less converged). The report contains no timings, so
//! identical configs produce byte-identical JSON.

use super::config::PipelineConfig;
use super::scene::synth_scene;
use super::{warp_source, Pipeline};
use crate::error::Result;
use crate::graph::{
    graph_reason, partition_neighbors, BodyGraph, SubsetWeights, SUBSET_CLOSER, SUBSET_FARTHER,
};
use crate::local::{loc_conv, self_correlation, ModulationField};
use crate::objectives::{
    adversarial_loss, finite_diff_check, focal_loss, l1_loss, perceptual_loss, IdentityExtractor,
};
use crate::region::{
    broadcast_styles, occlusion_mask, region_avg_pool, OcclusionMask, StyleCodeMatrix,
};
use crate::tensor::{channel_normalize, io, SegmentationMap, Tensor, VisibilityMap};
use crate::transport::{cost_matrix, sinkhorn, warp_modulation, CostMatrix, OtMode, TransportPlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Warn,
    Fail,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub status: CheckStatus,
    /// The quantity the check graded (largest deviation, violation count,
    /// ...); -1 when the check errored before measuring anything.
    pub metric: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelftestReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

type Outcome = Result<(CheckStatus, f64, String)>;

fn finish(name: &'static str, outcome: Outcome) -> CheckResult {
    match outcome {
        Ok((status, metric, detail)) => CheckResult {
            name,
            status,
            metric,
            detail,
        },
        Err(e) => CheckResult {
            name,
            status: CheckStatus::Fail,
            metric: -1.0,
            detail: e.to_string(),
        },
    }
}

/// Pass iff `metric <= tol`.
fn graded(metric: f64, tol: f64, detail: String) -> Outcome {
    let status = if metric <= tol {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    Ok((status, metric, detail))
}

fn exact(ok: bool, detail: String) -> Outcome {
    graded(if ok { 0.0 } else { 1.0 }, 0.0, detail)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Result<Tensor> {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect())
}

/// Runs every check against `cfg` and collects the report.
pub fn run_selftest(cfg: &PipelineConfig) -> SelftestReport {
    let mut checks: Vec<CheckResult> = Vec::new();

    checks.push(finish(
        "config_validates",
        (|| {
            cfg.validate()?;
            exact(true, "configuration passed validation".into())
        })(),
    ));

    checks.push(finish(
        "tensor_roundtrip",
        (|| {
            let t = random_tensor(&[2, 3, 4], 1, -5.0, 5.0)?;
            let back = io::from_glt_bytes(&io::to_glt_bytes(&t))?;
            exact(
                back.bit_eq(&t),
                "serialize/deserialize preserves every bit".into(),
            )
        })(),
    ));

    checks.push(finish(
        "normalize_moments",
        (|| {
            let f = random_tensor(&[3, 8, 6], 2, -2.0, 3.0)?;
            let (norm, _, _) = channel_normalize(&f, 0.0)?;
            let plane = 48;
            let mut worst = 0.0f64;
            for c in 0..3 {
                let vals = &norm.data()[c * plane..(c + 1) * plane];
                let mean: f64 = vals.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
                let var: f64 =
                    vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / plane as f64;
                worst = worst.max(mean.abs()).max((var.sqrt() - 1.0).abs());
            }
            graded(
                worst,
                1e-5,
                "normalized channels have zero mean, unit deviation".into(),
            )
        })(),
    ));

    checks.push(finish(
        "pool_broadcast_identity",
        (|| {
            let (h, w) = (6, 8);
            let labels: Vec<u8> = (0..h * w)
                .map(|p| {
                    let (y, x) = (p / w, p % w);
                    (2 * usize::from(y >= h / 2) + usize::from(x >= w / 2)) as u8
                })
                .collect();
            let seg = SegmentationMap::new(h, w, 4, labels)?;
            let f = Tensor::from_fn3(3, h, w, |c, y, x| (seg.label(y, x) * 4 + c) as f32 * 0.31)?;
            let back = broadcast_styles(&region_avg_pool(&f, &seg)?, &seg)?;
            graded(
                back.max_abs_diff(&f)?,
                1e-6,
                "pooling then broadcasting region-constant features is lossless".into(),
            )
        })(),
    ));

    checks.push(finish(
        "occlusion_conjunction",
        (|| {
            let seg = SegmentationMap::new(2, 2, 2, vec![0, 1, 1, 0])?;
            let vis = VisibilityMap::new(2, 2, vec![1, 1, 0, 0])?;
            let mask = occlusion_mask(&seg, &vis, &[false, true])?;
            exact(
                mask.flags() == [0, 1, 0, 0],
                "mask flags exactly foreground-and-invisible pixels".into(),
            )
        })(),
    ));

    checks.push(finish(
        "graph_dense_oracle",
        (|| {
            // Star graph, one absent leaf; the propagation matrix is rebuilt
            // here from the partition lists and applied in plain f64.
            let g = BodyGraph::from_parts(
                4,
                &[(0, 1), (0, 2), (0, 3)],
                vec![(0.0, 0.0), (0.0, 2.0), (2.0, 0.0), (0.0, 5.0)],
                (0.5, 0.5),
            )?;
            let mut r = rng(3);
            let c = 3;
            let mut codes: Vec<f32> = (0..4 * c).map(|_| r.gen_range(-1.0..1.0f32)).collect();
            codes[2 * c..3 * c].fill(0.0); // region 2 absent
            let st = StyleCodeMatrix::new(4, c, codes, vec![true, true, false, true])?;
            let w = SubsetWeights::seeded(c, 17)?;
            let got = graph_reason(&st, &g, &w)?;

            let partition = partition_neighbors(&g);
            let mut worst = 0.0f64;
            for i in 0..4 {
                let members = &partition[i];
                let mut subset_size = [0usize; 3];
                for &(_, label) in members {
                    subset_size[label as usize] += 1;
                }
                let mut expect = vec![0.0f64; c];
                let mut any_present = false;
                for &(j, label) in members {
                    any_present |= st.present(j);
                    let m = w.matrix(label);
                    for out_ch in 0..c {
                        let mut dot = 0.0f64;
                        for in_ch in 0..c {
                            dot += st.row(j)[in_ch] as f64 * m.at2(in_ch, out_ch) as f64;
                        }
                        expect[out_ch] += dot / subset_size[label as usize] as f64;
                    }
                }
                if !any_present {
                    expect.fill(0.0);
                }
                for ch in 0..c {
                    worst = worst.max((got.row(i)[ch] as f64 - expect[ch]).abs());
                }
            }
            graded(
                worst,
                1e-5,
                "reasoned rows match the dense propagation matrix".into(),
            )
        })(),
    ));

    checks.push(finish(
        "partition_antisymmetry",
        (|| {
            let g = BodyGraph::from_parts(
                3,
                &[(0, 1), (1, 2)],
                vec![(0.0, 0.0), (0.0, 3.0), (0.0, 6.0)],
                (0.0, 1.0),
            )?;
            let partition = partition_neighbors(&g);
            let label_of = |i: usize, j: usize| {
                partition[i]
                    .iter()
                    .find(|&&(m, _)| m == j)
                    .map(|&(_, l)| l)
                    .expect("neighbor present in partition")
            };
            let mut violations = 0.0;
            for &(a, b) in g.edges() {
                let ab = label_of(a, b);
                let ba = label_of(b, a);
                let antisymmetric = (ab == SUBSET_CLOSER && ba == SUBSET_FARTHER)
                    || (ab == SUBSET_FARTHER && ba == SUBSET_CLOSER)
                    || ab == ba;
                if !antisymmetric {
                    violations += 1.0;
                }
            }
            graded(
                violations,
                0.0,
                "closer/farther labels swap across each edge".into(),
            )
        })(),
    ));

    checks.push(finish(
        "correlation_oracle",
        (|| {
            let f = random_tensor(&[2, 4, 4], 4, -1.0, 1.0)?;
            let (r, d) = (1usize, 1usize);
            let corr = self_correlation(&f, r, d, false)?;
            let dot = |ay: isize, ax: isize, by: isize, bx: isize| -> f64 {
                if ay < 0 || ax < 0 || by < 0 || bx < 0 || ay >= 4 || ax >= 4 || by >= 4 || bx >= 4
                {
                    return 0.0;
                }
                (0..2)
                    .map(|c| {
                        f.at3(c, ay as usize, ax as usize) as f64
                            * f.at3(c, by as usize, bx as usize) as f64
                    })
                    .sum()
            };
            let mut worst = 0.0f64;
            for y in 0..4isize {
                for x in 0..4isize {
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            let mut expect = 0.0f64;
                            for py in -1..=1isize {
                                for px in -1..=1isize {
                                    expect += dot(y + py, x + px, y + dy + py, x + dx + px);
                                }
                            }
                            let ch = corr.offset_channel(dy, dx);
                            let got = corr.values().at3(ch, y as usize, x as usize) as f64;
                            worst = worst.max((got - expect).abs());
                        }
                    }
                }
            }
            graded(
                worst,
                1e-5,
                "correlation volume matches the brute-force sum".into(),
            )
        })(),
    ));

    checks.push(finish(
        "correlation_cauchy_schwarz",
        (|| {
            let f = random_tensor(&[3, 5, 5], 5, -2.0, 2.0)?;
            let d = 2usize;
            let corr = self_correlation(&f, 1, d, false)?;
            let center = corr.offset_channel(0, 0);
            let mut worst = 0.0f64;
            let di = d as isize;
            for y in 0..5usize {
                for x in 0..5usize {
                    for dy in -di..=di {
                        for dx in -di..=di {
                            let (ny, nx) = (y as isize + dy, x as isize + dx);
                            if ny < 0 || nx < 0 || ny >= 5 || nx >= 5 {
                                continue;
                            }
                            let cross = corr.values().at3(corr.offset_channel(dy, dx), y, x) as f64;
                            let own = corr.values().at3(center, y, x) as f64;
                            let other = corr.values().at3(center, ny as usize, nx as usize) as f64;
                            worst = worst.max(cross.abs() - (own * other).sqrt());
                        }
                    }
                }
            }
            graded(
                worst,
                1e-4,
                "no cross term exceeds its geometric-mean bound".into(),
            )
        })(),
    ));

    checks.push(finish(
        "locconv_oracle",
        (|| {
            let f = random_tensor(&[2, 4, 4], 6, -1.5, 1.5)?;
            let k = 3usize;
            let taps = random_tensor(&[4, 4, 2, 9], 7, -0.8, 0.8)?;
            let bias = random_tensor(&[4, 4, 2], 8, -0.3, 0.3)?;
            let field = ModulationField::new(k, taps, bias)?;
            let eps = 1e-5f32;
            let got = loc_conv(&f, &field, eps, false)?;
            let (norm, _, _) = channel_normalize(&f, eps)?;
            let mut worst = 0.0f64;
            for c in 0..2usize {
                for y in 0..4usize {
                    for x in 0..4usize {
                        let mut expect = field.bias_at(y, x, c) as f64;
                        for wy in -1..=1isize {
                            for wx in -1..=1isize {
                                let (ny, nx) = (y as isize + wy, x as isize + wx);
                                if ny < 0 || nx < 0 || ny >= 4 || nx >= 4 {
                                    continue;
                                }
                                expect += field.tap(y, x, c, wy, wx) as f64
                                    * norm.at3(c, ny as usize, nx as usize) as f64;
                            }
                        }
                        worst = worst.max((got.at3(c, y, x) as f64 - expect).abs());
                    }
                }
            }
            graded(
                worst,
                1e-5,
                "per-position filtering matches the window sum".into(),
            )
        })(),
    ));

    checks.push(finish(
        "locconv_identity",
        (|| {
            let f = random_tensor(&[3, 4, 5], 9, -2.0, 2.0)?;
            let eps = 1e-5f32;
            let field = ModulationField::identity(4, 5, 3)?;
            let got = loc_conv(&f, &field, eps, false)?;
            let (norm, _, _) = channel_normalize(&f, eps)?;
            exact(
                got.bit_eq(&norm),
                "unit field reduces to plain normalization".into(),
            )
        })(),
    ));

    checks.push(finish(
        "cost_bounds",
        (|| {
            let a = random_tensor(&[3, 3, 4], 10, -1.0, 1.0)?;
            let b = random_tensor(&[3, 3, 4], 11, -1.0, 1.0)?;
            let c = cost_matrix(&a, &b, 1e-5)?;
            let mut worst = 0.0f64;
            for &v in c.values().data() {
                worst = worst.max((-(v as f64)).max(v as f64 - 2.0));
            }
            // Matching a map against itself: self-similarity is maximal, so the
            // diagonal sits at the bottom of the cost range.
            let self_cost = cost_matrix(&a, &a, 1e-5)?;
            for i in 0..12 {
                worst = worst.max(self_cost.values().at2(i, i) as f64 - 1e-3);
            }
            graded(
                worst,
                0.0,
                "costs stay in [0, 2] with near-zero self-match diagonal".into(),
            )
        })(),
    ));

    checks.push(finish(
        "sinkhorn_marginals",
        (|| {
            let a = random_tensor(&[2, 2, 4], 12, -1.0, 1.0)?;
            let b = random_tensor(&[2, 2, 4], 13, -1.0, 1.0)?;
            let cost = cost_matrix(&a, &b, 1e-5)?;
            let uniform = vec![1.0f32 / 8.0; 8];
            let ot = &cfg.ot;
            let plan = sinkhorn(
                &cost,
                &uniform,
                &uniform,
                ot.eps_reg,
                ot.tau,
                ot.mode,
                ot.max_iters,
                ot.tol,
            )?;
            let status = if plan.converged() {
                CheckStatus::Pass
            } else {
                CheckStatus::Warn
            };
            Ok((
                status,
                plan.max_violation(),
                format!(
                    "{} solve finished after {} iterations (converged: {})",
                    ot.mode,
                    plan.iterations(),
                    plan.converged()
                ),
            ))
        })(),
    ));

    checks.push(finish(
        "sinkhorn_lp_oracle",
        (|| {
            let cost = CostMatrix::new(Tensor::new(&[2, 2], vec![0.3, 1.0, 1.0, 0.3])?)?;
            let m = vec![0.5f32, 0.5];
            let plan = sinkhorn(&cost, &m, &m, 0.01, 1.0, OtMode::Balanced, 20_000, 1e-9)?;
            // Feasible 2x2 plans form a segment; the entropic cost must land
            // within 2% of the cheaper endpoint (mass on the 0.3 diagonal).
            let lp = 0.3f64;
            let rel = (plan.transport_cost(&cost)? - lp).abs() / lp;
            graded(
                rel,
                0.02,
                "entropic cost sits on the linear-program optimum".into(),
            )
        })(),
    ));

    checks.push(finish(
        "warp_plan_identity",
        (|| {
            let n = 4usize;
            let eye = Tensor::from_fn2(n, n, |i, j| if i == j { 0.25 } else { 0.0 })?;
            let uniform = vec![0.25f32; n];
            let plan = TransportPlan::from_matrix(eye, uniform.clone(), uniform, OtMode::Balanced)?;
            let taps = random_tensor(&[2, 2, 3, 1], 14, -1.0, 1.0)?;
            let bias = random_tensor(&[2, 2, 3], 15, -1.0, 1.0)?;
            let field = ModulationField::new(1, taps, bias)?;
            let warped = warp_modulation(&plan, &field)?;
            let diff = warped
                .taps()
                .max_abs_diff(field.taps())?
                .max(warped.bias().max_abs_diff(field.bias())?);
            graded(
                diff,
                0.0,
                "an identity plan leaves the field untouched".into(),
            )
        })(),
    ));

    checks.push(finish(
        "focal_bce_equality",
        (|| {
            let mut r = rng(16);
            let probs = Tensor::new(
                &[1, 6, 6],
                (0..36).map(|_| r.gen_range(0.01..0.99)).collect(),
            )?;
            let target = Tensor::new(
                &[1, 6, 6],
                (0..36)
                    .map(|_| f32::from(r.gen_range(0..2) as u8))
                    .collect(),
            )?;
            let (focal, _) = focal_loss(&probs, &target, 0.0)?;
            let mut bce = 0.0f64;
            for (&p, &t) in probs.data().iter().zip(target.data()) {
                let pt = if t == 1.0 { p as f64 } else { 1.0 - p as f64 };
                bce -= pt.clamp(1e-7, 1.0 - 1e-7).ln();
            }
            bce /= 36.0;
            graded(
                (focal - bce).abs(),
                1e-7,
                "zero focusing power reduces to cross-entropy".into(),
            )
        })(),
    ));

    checks.push(finish(
        "focal_hand_value",
        (|| {
            let p = Tensor::new(&[1, 1, 1], vec![0.5])?;
            let t = Tensor::new(&[1, 1, 1], vec![1.0])?;
            let (loss, _) = focal_loss(&p, &t, 2.0)?;
            let expect = 0.25 * 2.0f64.ln();
            graded(
                (loss - expect).abs(),
                1e-6,
                format!("0.25 * ln 2 = {expect:.6}"),
            )
        })(),
    ));

    checks.push(finish(
        "focal_gradient_check",
        (|| {
            let probs = random_tensor(&[1, 5, 5], 18, 0.15, 0.85)?;
            let mut r = rng(19);
            let target = Tensor::new(
                &[1, 5, 5],
                (0..25)
                    .map(|_| f32::from(r.gen_range(0..2) as u8))
                    .collect(),
            )?;
            let report = finite_diff_check(|x| focal_loss(x, &target, 2.0), &probs, 1e-4, 1e-3)?;
            graded(
                report.max_rel_error,
                1e-3,
                format!(
                    "central differences over {} coordinates",
                    report.coords_checked
                ),
            )
        })(),
    ));

    checks.push(finish(
        "l1_gradient_check",
        (|| {
            let i_g = random_tensor(&[2, 4, 4], 20, -1.0, 1.0)?;
            let mut r = rng(21);
            let shifted: Vec<f32> = i_g
                .data()
                .iter()
                .map(|&v| {
                    let mag = r.gen_range(0.2..0.5f32);
                    v + if r.gen_range(0..2) == 0 { -mag } else { mag }
                })
                .collect();
            let i_t = Tensor::new(&[2, 4, 4], shifted)?;
            let report = finite_diff_check(|x| l1_loss(x, &i_t), &i_g, 1e-5, 1e-4)?;
            graded(
                report.max_rel_error,
                1e-4,
                format!(
                    "central differences over {} coordinates",
                    report.coords_checked
                ),
            )
        })(),
    ));

    checks.push(finish(
        "adversarial_hand_value",
        (|| {
            let loss = adversarial_loss(&[0.5], &[0.5])?;
            let expect = 2.0 * 0.5f64.ln();
            graded(
                (loss - expect).abs(),
                1e-9,
                format!("2 * ln 0.5 = {expect:.6}"),
            )
        })(),
    ));

    checks.push(finish(
        "perceptual_identity_zero",
        (|| {
            let img = random_tensor(&[3, 6, 5], 22, 0.0, 1.0)?;
            let loss = perceptual_loss(&img, &img, &IdentityExtractor, &[0])?;
            graded(
                loss,
                0.0,
                "identical inputs have exactly zero distance".into(),
            )
        })(),
    ));

    checks.push(finish(
        "scene_determinism",
        (|| {
            let a = synth_scene(cfg, 5)?;
            let b = synth_scene(cfg, 5)?;
            exact(
                a.source_image.bit_eq(&b.source_image)
                    && a.flow.bit_eq(&b.flow)
                    && a.source_seg.labels() == b.source_seg.labels()
                    && a.target_seg.labels() == b.target_seg.labels()
                    && a.visibility.flags() == b.visibility.flags(),
                "one seed generates one scene".into(),
            )
        })(),
    ));

    checks.push(finish(
        "scene_zero_motion",
        (|| {
            let mut still = cfg.clone();
            still.motion.max_translation = 0.0;
            still.motion.max_rotation = 0.0;
            let s = synth_scene(&still, 6)?;
            let bad = s.flow.data().iter().filter(|&&v| v != 0.0).count()
                + s.visibility.flags().iter().filter(|&&f| f != 0).count()
                + usize::from(s.source_seg.labels() != s.target_seg.labels());
            graded(
                bad as f64,
                0.0,
                "no motion means identity flow, full visibility, equal layouts".into(),
            )
        })(),
    ));

    checks.push(finish(
        "pipeline_determinism",
        (|| {
            let p = Pipeline::new(cfg.clone())?;
            let scene = synth_scene(cfg, 1)?;
            let a = p.run_pose_transfer(&scene)?;
            let b = p.run_pose_transfer(&scene)?;
            exact(
                a.image.bit_eq(&b.image),
                "re-running a scene reproduces the image bit for bit".into(),
            )
        })(),
    ));

    checks.push(finish(
        "pipeline_finite",
        (|| {
            let p = Pipeline::new(cfg.clone())?;
            let scene = synth_scene(cfg, 2)?;
            let out = p.run_pose_transfer(&scene)?;
            let mut bad = 0usize;
            for (_, t) in out.intermediates.iter() {
                bad += t.data().iter().filter(|v| !v.is_finite()).count();
            }
            graded(
                bad as f64,
                0.0,
                format!("{} intermediates inspected", out.intermediates.len()),
            )
        })(),
    ));

    checks.push(finish(
        "inpaint_empty_mask",
        (|| {
            let p = Pipeline::new(cfg.clone())?;
            let scene = synth_scene(cfg, 3)?;
            let mask = OcclusionMask::empty(cfg.height, cfg.width);
            let out = p.run_inpainting(&scene.source_image, &scene.source_seg, &mask)?;
            exact(
                out.image.bit_eq(&scene.source_image),
                "nothing masked, nothing changed".into(),
            )
        })(),
    ));

    checks.push(finish(
        "warp_source_identity",
        (|| {
            let f = random_tensor(&[2, 5, 6], 23, -1.0, 1.0)?;
            let flow = Tensor::zeros(&[2, 5, 6])?;
            exact(
                warp_source(&f, &flow)?.bit_eq(&f),
                "zero flow is the identity warp".into(),
            )
        })(),
    ));

    let passed = checks.iter().all(|c| c.status != CheckStatus::Fail);
    SelftestReport { passed, checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_passes_everything() {
        let report = run_selftest(&PipelineConfig::default());
        for c in &report.checks {
            assert_eq!(
                c.status,
                CheckStatus::Pass,
                "{}: {} ({})",
                c.name,
                c.detail,
                c.metric
            );
        }
        assert!(report.passed);
    }

    #[test]
    fn starved_transport_budget_warns_but_passes() {
        let mut cfg = PipelineConfig::default();
        cfg.ot.tol = 1e-12;
        cfg.ot.max_iters = 1;
        let report = run_selftest(&cfg);
        let marginal = report
            .checks
            .iter()
            .find(|c| c.name == "sinkhorn_marginals")
            .unwrap();
        assert_eq!(marginal.status, CheckStatus::Warn);
        assert!(report.passed, "warnings must not fail the suite");
    }

    #[test]
    fn report_json_is_stable() {
        let cfg = PipelineConfig::default();
        let a = run_selftest(&cfg).to_json();
        let b = run_selftest(&cfg).to_json();
        assert_eq!(a, b);
        let parsed: serde_json::Value = serde_json::from_str(&a).unwrap();
        assert!(parsed["passed"].as_bool().unwrap());
        assert!(parsed["checks"].as_array().unwrap().len() >= 20);
    }

    #[test]
    fn invalid_config_fails_the_first_check() {
        let mut cfg = PipelineConfig::default();
        cfg.k = 4; // even kernel: invalid
        let report = run_selftest(&cfg);
        assert!(!report.passed);
        assert_eq!(report.checks[0].name, "config_validates");
        assert_eq!(report.checks[0].status, CheckStatus::Fail);
    }
}
