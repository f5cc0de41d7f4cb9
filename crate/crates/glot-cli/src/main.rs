//! Command line front end: pose transfer on synthetic scenes, texture
//! inpainting, intermediate dumps, and the self-test suite.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use glot::pipeline::{run_selftest, synth_scene, Pipeline, PipelineConfig};
use glot::region::{mask_from_labels, OcclusionMask};
use glot::tensor::io;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "glot",
    version,
    about = "Occlusion-aware person-image generation toolkit (desk scale)"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene, re-pose it, and write the results.
    ///
    /// The output directory receives the generated image (image.ppm), the
    /// scene inputs (source.ppm, source_seg.pgm, target_seg.pgm,
    /// predicted_seg.pgm, visibility.pgm), and the dense flow (flow.glt).
    PoseTransfer {
        /// JSON config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scene seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-synthesize the masked pixels of an image.
    Inpaint {
        /// Input image (PPM).
        #[arg(long)]
        image: PathBuf,
        /// Region labels (PGM).
        #[arg(long)]
        seg: PathBuf,
        /// Mask bitmap (PGM, nonzero = replace). Mutually exclusive with
        /// --mask-labels.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Region labels whose pixels are replaced, e.g. "1,4".
        #[arg(long, value_delimiter = ',')]
        mask_labels: Option<Vec<usize>>,
        /// JSON config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output image path (PPM).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in verification suite and print its JSON report.
    ///
    /// Exits nonzero only when a check fails; warnings are reported but do
    /// not affect the exit status.
    Selftest {
        /// JSON config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run pose transfer and write intermediate tensors as GLT files.
    DumpIntermediates {
        /// JSON config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scene seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stage name, or "all" for every stage.
        #[arg(long)]
        stage: String,
        /// Output directory (created if missing); defaults to the
        /// working directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            PipelineConfig::from_file(p).with_context(|| format!("loading config {}", p.display()))
        }
    }
}

fn report_warnings(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn pose_transfer(config: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let pipeline = Pipeline::new(cfg.clone())?;
    let scene = synth_scene(&cfg, seed)?;
    let result = pipeline.run_pose_transfer(&scene)?;
    report_warnings(&result.warnings);

    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    io::save_ppm(out.join("image.ppm"), &result.image)?;
    io::save_ppm(out.join("source.ppm"), &scene.source_image)?;
    io::save_segmentation(out.join("source_seg.pgm"), &scene.source_seg)?;
    io::save_segmentation(out.join("target_seg.pgm"), &scene.target_seg)?;
    io::save_segmentation(out.join("predicted_seg.pgm"), &scene.predicted_seg)?;
    io::save_flags(
        out.join("visibility.pgm"),
        scene.height(),
        scene.width(),
        scene.visibility.flags(),
    )?;
    io::save_tensor(out.join("flow.glt"), &scene.flow)?;
    println!("wrote {}", out.join("image.ppm").display());
    Ok(())
}

fn inpaint(
    image: &Path,
    seg: &Path,
    mask: Option<&Path>,
    mask_labels: Option<&[usize]>,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let pipeline = Pipeline::new(cfg.clone())?;
    let image = io::load_ppm(image)?;
    let seg = io::load_segmentation(seg, Some(cfg.regions))?;
    let mask = match (mask, mask_labels) {
        (Some(path), None) => {
            let (h, w, flags) = io::load_flags(path)?;
            OcclusionMask::new(h, w, flags)?
        }
        (None, Some(labels)) => mask_from_labels(&seg, labels)?,
        (None, None) => bail!("one of --mask or --mask-labels is required"),
        (Some(_), Some(_)) => bail!("--mask and --mask-labels are mutually exclusive"),
    };
    let result = pipeline.run_inpainting(&image, &seg, &mask)?;
    report_warnings(&result.warnings);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    io::save_ppm(out, &result.image)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn selftest(config: Option<&Path>) -> Result<bool> {
    let cfg = load_config(config)?;
    let report = run_selftest(&cfg);
    println!("{}", report.to_json());
    Ok(report.passed)
}

fn dump_intermediates(config: Option<&Path>, seed: u64, stage: &str, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let pipeline = Pipeline::new(cfg.clone())?;
    let scene = synth_scene(&cfg, seed)?;
    let result = pipeline.run_pose_transfer(&scene)?;
    report_warnings(&result.warnings);

    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    if stage == "all" {
        for (name, tensor) in result.intermediates.iter() {
            io::save_tensor(out.join(format!("{name}.glt")), tensor)?;
        }
        println!(
            "wrote {} stages to {}",
            result.intermediates.len(),
            out.display()
        );
    } else {
        let tensor = result.intermediates.get(stage)?;
        let path = out.join(format!("{stage}.glt"));
        io::save_tensor(&path, tensor)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::PoseTransfer { config, seed, out } => pose_transfer(config.as_deref(), seed, &out),
        Command::Inpaint {
            image,
            seg,
            mask,
            mask_labels,
            config,
            out,
        } => inpaint(
            &image,
            &seg,
            mask.as_deref(),
            mask_labels.as_deref(),
            config.as_deref(),
            &out,
        ),
        Command::Selftest { config } => {
            if !selftest(config.as_deref())? {
                std::process::exit(1);
            }
            Ok(())
        }
        Command::DumpIntermediates {
            config,
            seed,
            stage,
            out,
        } => dump_intermediates(config.as_deref(), seed, &stage, &out),
    }
}
