use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use splatlight::brdf::bake_lut;
use splatlight::envmap::{self, RotationAxis};
use splatlight::io;
use splatlight::pipeline::{self, LightSource, SkySource};
use splatlight::raster::Camera;
use splatlight::sh::ShCoefficients;
use splatlight::synthetic;
use splatlight::trainer::TrainConfig;

/// Relightable Gaussian splatting: training, rendering and evaluation.
#[derive(Parser)]
#[command(name = "splatlight", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bake the split-sum BRDF lookup table.
    BakeLut {
        /// Output file.
        #[arg(long)]
        out: PathBuf,
        /// Texels per axis.
        #[arg(long, default_value_t = splatlight::brdf::DEFAULT_LUT_RESOLUTION)]
        resolution: usize,
        /// Importance samples per texel.
        #[arg(long, default_value_t = splatlight::brdf::DEFAULT_LUT_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = splatlight::brdf::DEFAULT_LUT_SEED)]
        seed: u64,
    },
    /// Train a model on a dataset directory.
    Fit {
        /// TOML training configuration; defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (cameras.txt, points.txt, images/, masks_sky/, masks_occluder/).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and the training log.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        lut: LutArg,
    },
    /// Render one view with color, depth, albedo and normal maps.
    Render {
        #[command(flatten)]
        view: ViewArgs,
        #[command(flatten)]
        light: LightArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// File name stem of the outputs.
        #[arg(long, default_value = "render")]
        name: String,
        #[command(flatten)]
        lut: LutArg,
    },
    /// Render one view under an environment map rotated through a full turn.
    Relight {
        #[command(flatten)]
        view: ViewArgs,
        /// Environment map (.pfm or .png).
        #[arg(long)]
        envmap: PathBuf,
        /// Number of evenly spaced rotations.
        #[arg(long, default_value_t = 8)]
        steps: usize,
        /// Rotation axis: x, y or z.
        #[arg(long, default_value = "y")]
        axis: RotationAxis,
        /// Training image whose sky is used; a white sky otherwise.
        #[arg(long)]
        sky_from: Option<String>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        lut: LutArg,
    },
    /// Masked PSNR, SSIM, MSE and MAE on a test set, written as CSV.
    Eval {
        /// Checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test directory with cameras.txt, images/, optional masks and lights/ or envmaps/.
        #[arg(long)]
        test: PathBuf,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        lut: LutArg,
    },
    /// Project an environment map onto spherical harmonics.
    EnvmapToSh {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        degree: usize,
    },
    /// Reconstruct an environment map from SH coefficients.
    ShToEnvmap {
        #[arg(long)]
        input: PathBuf,
        /// Output map (.pfm, or gamma-encoded .png).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
    },
    /// Write a synthetic wall dataset (train/ and test/) for trying the pipeline.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        /// Image width and height in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        lut: LutArg,
    },
    /// Rotate an environment map.
    RotateEnvmap {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Angle in radians.
        #[arg(long, allow_hyphen_values = true)]
        angle: f64,
        /// Rotation axis: x, y or z.
        #[arg(long, default_value = "y")]
        axis: RotationAxis,
    },
}

#[derive(Args)]
struct LutArg {
    /// BRDF lookup table; baked and saved here if missing, baked in memory if omitted.
    #[arg(long)]
    lut: Option<PathBuf>,
}

#[derive(Args)]
struct ViewArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training image whose camera is used.
    #[arg(long, conflicts_with = "pose")]
    camera: Option<String>,
    /// File with one camera line in cameras.txt format.
    #[arg(long)]
    pose: Option<PathBuf>,
}

#[derive(Args)]
struct LightArgs {
    /// Training image whose decoded light is used.
    #[arg(long, group = "light_source")]
    light_from: Option<String>,
    /// SH coefficient file.
    #[arg(long, group = "light_source")]
    light_sh: Option<PathBuf>,
    /// Environment map (.pfm or .png), projected to degree 4.
    #[arg(long, group = "light_source")]
    envmap: Option<PathBuf>,
    /// Environment rotation in radians.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    rotation: f64,
    /// Environment rotation axis: x, y or z.
    #[arg(long, default_value = "y")]
    axis: RotationAxis,
    /// Training image whose sky is used; defaults to the light image, else white.
    #[arg(long)]
    sky_from: Option<String>,
    /// Force a white sky.
    #[arg(long, conflicts_with = "sky_from")]
    white_sky: bool,
}

fn view_camera(ckpt: &io::Checkpoint, view: &ViewArgs) -> Result<Camera> {
    match (&view.camera, &view.pose) {
        (Some(id), _) => ckpt.camera(id).copied().with_context(|| format!("unknown image id {id:?}")),
        (None, Some(p)) => {
            let cams = io::read_cameras(p)?;
            match cams.as_slice() {
                [(_, c)] => Ok(*c),
                _ => bail!("{}: expected exactly one camera line", p.display()),
            }
        }
        (None, None) => bail!("either --camera or --pose is required"),
    }
}

fn read_sh(path: &Path) -> Result<ShCoefficients> {
    ShCoefficients::from_text(&io::read_text(path)?).with_context(|| path.display().to_string())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BakeLut { out, resolution, samples, seed } => {
            bake_lut(resolution, samples, seed)?.write(&out)?;
        }
        Command::Fit { config, data, out, resume, lut } => {
            let config = match config {
                Some(p) => io::load_config(&p)?,
                None => TrainConfig::default(),
            };
            let lut = pipeline::load_or_bake_lut(lut.lut.as_deref())?;
            let total = config.iterations;
            let ckpt = pipeline::fit(&data, &out, &config, resume, &lut, |it, _, loss| {
                if (it + 1) % 100 == 0 || it + 1 == total {
                    eprintln!("iteration {:>6}/{total}  loss {loss:.6}", it + 1);
                }
            })?;
            eprintln!(
                "wrote {} ({} foreground, {} sky gaussians)",
                out.join(pipeline::FINAL_CHECKPOINT).display(),
                ckpt.state.model.scene.foreground.len(),
                ckpt.state.model.scene.sky.len()
            );
        }
        Command::Render { view, light, out, name, lut } => {
            let ckpt = io::load_checkpoint(&view.checkpoint)?;
            let camera = view_camera(&ckpt, &view)?;
            let source = match (&light.light_from, &light.light_sh, &light.envmap) {
                (Some(id), _, _) => LightSource::Trained(id.clone()),
                (_, Some(p), _) => LightSource::Sh(read_sh(p)?),
                (_, _, Some(p)) => LightSource::Envmap { map: envmap::load_map(p)?, angle: light.rotation, axis: light.axis },
                _ => bail!("one of --light-from, --light-sh or --envmap is required"),
            };
            let sky = match (&light.sky_from, &light.light_from) {
                _ if light.white_sky => SkySource::White,
                (Some(id), _) | (None, Some(id)) => SkySource::Trained(id.clone()),
                (None, None) => SkySource::White,
            };
            let sh = pipeline::resolve_light(&ckpt, &source)?;
            let sky = pipeline::resolve_sky(&ckpt, &sky)?;
            let lut = pipeline::load_or_bake_lut(lut.lut.as_deref())?;
            let r = pipeline::render_view(&ckpt.state.model, &camera, &sh, &sky, &lut, ckpt.config.blur)?;
            pipeline::write_rendered(&out, &name, &r)?;
        }
        Command::Relight { view, envmap: path, steps, axis, sky_from, out, lut } => {
            if steps == 0 {
                bail!("--steps must be positive");
            }
            let ckpt = io::load_checkpoint(&view.checkpoint)?;
            let camera = view_camera(&ckpt, &view)?;
            let map = envmap::load_map(&path)?;
            let sky = match sky_from {
                Some(id) => SkySource::Trained(id),
                None => SkySource::White,
            };
            let sky = pipeline::resolve_sky(&ckpt, &sky)?;
            let lut = pipeline::load_or_bake_lut(lut.lut.as_deref())?;
            for k in 0..steps {
                let angle = 2.0 * PI * k as f64 / steps as f64;
                let source = LightSource::Envmap { map: map.clone(), angle, axis };
                let sh = pipeline::resolve_light(&ckpt, &source)?;
                let r = pipeline::render_view(&ckpt.state.model, &camera, &sh, &sky, &lut, ckpt.config.blur)?;
                pipeline::write_rendered(&out, &format!("relight_{k:03}"), &r)?;
            }
        }
        Command::Eval { checkpoint, test, out, lut } => {
            let ckpt = io::load_checkpoint(&checkpoint)?;
            let lut = pipeline::load_or_bake_lut(lut.lut.as_deref())?;
            let report = pipeline::evaluate_test_set(&ckpt, &test, &lut)?;
            io::write_atomic(&out, report.to_csv().as_bytes())?;
            let a = report.average;
            println!("psnr {:.4} ssim {:.4} mse {:.6} mae {:.6}", a.psnr, a.ssim, a.mse, a.mae);
        }
        Command::EnvmapToSh { input, out, degree } => {
            let sh = envmap::map_to_sh(&envmap::load_map(&input)?, degree)?;
            io::write_atomic(&out, sh.to_text().as_bytes())?;
        }
        Command::ShToEnvmap { input, out, width, height } => {
            if width == 0 || height == 0 {
                bail!("map dimensions must be positive");
            }
            envmap::save_map(&out, &envmap::sh_to_map(&read_sh(&input)?, width, height))?;
        }
        Command::MakeSynthetic { out, size, seed, lut } => {
            if size < 8 {
                bail!("--size must be at least 8");
            }
            let lut = pipeline::load_or_bake_lut(lut.lut.as_deref())?;
            let set = synthetic::build(seed, size, &lut)?;
            synthetic::write_set(&set, &out, &lut)?;
        }
        Command::RotateEnvmap { input, out, angle, axis } => {
            envmap::save_map(&out, &envmap::rotate_map(&envmap::load_map(&input)?, angle, axis))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
