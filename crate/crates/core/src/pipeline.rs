//! End-to-end operations on files: fitting with checkpoints, rendering,
//! relighting and masked evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::brdf::{bake_lut, default_lut, BrdfError, BrdfLut, DEFAULT_LUT_RESOLUTION, DEFAULT_LUT_SAMPLES, DEFAULT_LUT_SEED};
use crate::envmap::{self, EquirectMap, RotationAxis};
use crate::io::{self, Checkpoint, IoError, RgbBuffer};
use crate::losses::LossTerms;
use crate::metrics::{masked_metrics, MetricsError, MetricsReport};
use crate::model::{decode_lights, shade_scene, Model, ModelError};
use crate::raster::{Camera, RasterError};
use crate::render::{render, ColorMode};
use crate::sh::{BlurExponent, ShCoefficients, ShError, UnitDirection};
use crate::shading::{gaussian_normal, LIGHT_DEGREE, SKY_DEGREE};
use crate::trainer::{initialize, run, TrainConfig, TrainError, TrainState};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Brdf(#[from] BrdfError),
    #[error(transparent)]
    Sh(#[from] ShError),
    #[error("unknown image id {0:?}")]
    UnknownImage(String),
    #[error("{0}")]
    Invalid(String),
}

/// Loads the LUT at `path`, baking and saving the default table if the file
/// does not exist. Without a path the default table is baked in memory.
pub fn load_or_bake_lut(path: Option<&Path>) -> Result<BrdfLut, PipelineError> {
    match path {
        Some(p) if p.exists() => Ok(BrdfLut::read(p)?),
        Some(p) => {
            let lut = bake_lut(DEFAULT_LUT_RESOLUTION, DEFAULT_LUT_SAMPLES, DEFAULT_LUT_SEED)?;
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|source| IoError::Io { path: parent.to_path_buf(), source })?;
            }
            lut.write(p)?;
            // Same f32-rounded values a later run reads back from the file.
            Ok(BrdfLut::from_bytes(&lut.to_bytes())?)
        }
        None => Ok(default_lut()),
    }
}

pub const FINAL_CHECKPOINT: &str = "final";
pub const TRAIN_LOG: &str = "train_log.csv";

pub fn checkpoint_name(iteration: usize) -> String {
    format!("ckpt_{iteration:06}")
}

/// Most recent `ckpt_NNNNNN` directory in `out`.
pub fn latest_checkpoint(out: &Path) -> Result<Option<(usize, PathBuf)>, IoError> {
    if !out.exists() {
        return Ok(None);
    }
    let entries = fs::read_dir(out).map_err(|source| IoError::Io { path: out.to_path_buf(), source })?;
    let mut best = None;
    for entry in entries.flatten() {
        let name = entry.file_name();
        let Some(it) = name.to_str().and_then(|n| n.strip_prefix("ckpt_")).and_then(|n| n.parse::<usize>().ok()) else {
            continue;
        };
        if entry.path().is_dir() && best.as_ref().is_none_or(|(b, _)| it > *b) {
            best = Some((it, entry.path()));
        }
    }
    Ok(best)
}

fn log_header() -> String {
    let mut s = String::from("iteration,view");
    for n in LossTerms::NAMES {
        let _ = write!(s, ",{n}");
    }
    s.push_str(",total,fg_leak\n");
    s
}

/// Trains on the dataset in `data`, writing periodic checkpoints, a CSV
/// training log and a final checkpoint into `out`. With `resume`, training
/// continues from the newest periodic checkpoint in `out`.
pub fn fit(
    data: &Path,
    out: &Path,
    config: &TrainConfig,
    resume: bool,
    lut: &BrdfLut,
    mut progress: impl FnMut(usize, &LossTerms, f64),
) -> Result<Checkpoint, PipelineError> {
    config.validate()?;
    let dataset = io::load_dataset(data)?;
    for v in &dataset.views {
        v.validate()?;
    }
    let image_ids: Vec<String> = dataset.views.iter().map(|v| v.id.clone()).collect();
    let cameras: Vec<(String, Camera)> = dataset.views.iter().map(|v| (v.id.clone(), v.camera)).collect();
    fs::create_dir_all(out).map_err(|source| IoError::Io { path: out.to_path_buf(), source })?;
    let log_path = out.join(TRAIN_LOG);

    let resumed = if resume { latest_checkpoint(out)? } else { None };
    let (mut state, mut log) = match resumed {
        Some((_, dir)) => {
            let ckpt = io::load_checkpoint(&dir)?;
            if ckpt.image_ids != image_ids {
                return Err(PipelineError::Invalid(format!(
                    "{} was trained on different images than {}",
                    dir.display(),
                    data.display()
                )));
            }
            let start = ckpt.state.iteration;
            let previous = if log_path.exists() { io::read_text(&log_path)? } else { String::new() };
            let mut log = log_header();
            for line in previous.lines().skip(1) {
                if line.split(',').next().and_then(|i| i.parse::<usize>().ok()).is_some_and(|i| i < start) {
                    log.push_str(line);
                    log.push('\n');
                }
            }
            (ckpt.state, log)
        }
        None => (initialize(&dataset.points, dataset.views.len(), config)?, log_header()),
    };

    let checkpoint = |state: &TrainState, name: &str, log: &str| -> Result<(), IoError> {
        io::write_atomic(&log_path, log.as_bytes())?;
        io::save_checkpoint(
            &out.join(name),
            &Checkpoint { state: state.clone(), image_ids: image_ids.clone(), cameras: cameras.clone(), config: config.clone() },
        )
    };
    let mut io_error = None;
    run(&mut state, &dataset.views, lut, config, config.iterations, |s, r| {
        let view = crate::trainer::view_for_iteration(config.seed, r.iteration, dataset.views.len());
        let _ = write!(log, "{},{}", r.iteration, image_ids[view]);
        for v in r.terms.values() {
            let _ = write!(log, ",{v}");
        }
        let _ = writeln!(log, ",{},{}", r.total, r.fg_leak);
        progress(r.iteration, &r.terms, r.total);
        if config.checkpoint_interval > 0 && s.iteration % config.checkpoint_interval == 0 {
            if let Err(e) = checkpoint(s, &checkpoint_name(s.iteration), &log) {
                io_error = Some(e);
                return Err(TrainError::Config("checkpoint write failed".into()));
            }
        }
        Ok(())
    })
    .map_err(|e| match io_error.take() {
        Some(io) => PipelineError::Io(io),
        None => e.into(),
    })?;
    checkpoint(&state, FINAL_CHECKPOINT, &log)?;
    Ok(Checkpoint { state, image_ids, cameras, config: config.clone() })
}

/// Where the foreground illumination comes from.
#[derive(Debug, Clone)]
pub enum LightSource {
    /// The light decoded for a training image.
    Trained(String),
    Sh(ShCoefficients),
    /// An environment map rotated by `angle` radians before projection.
    Envmap { map: EquirectMap, angle: f64, axis: RotationAxis },
}

#[derive(Debug, Clone)]
pub enum SkySource {
    /// The sky decoded for a training image.
    Trained(String),
    White,
}

fn trained_lights(ckpt: &Checkpoint, id: &str) -> Result<(ShCoefficients, ShCoefficients), PipelineError> {
    let index = ckpt.image_index(id).ok_or_else(|| PipelineError::UnknownImage(id.to_string()))?;
    Ok(decode_lights(&ckpt.state.model, index)?)
}

pub fn resolve_light(ckpt: &Checkpoint, source: &LightSource) -> Result<ShCoefficients, PipelineError> {
    let light = match source {
        LightSource::Trained(id) => trained_lights(ckpt, id)?.0,
        LightSource::Sh(sh) => sh.clone(),
        LightSource::Envmap { map, angle, axis } => {
            envmap::map_to_sh(&envmap::rotate_map(map, *angle, *axis), LIGHT_DEGREE)?
        }
    };
    if light.degree() > LIGHT_DEGREE {
        return Err(ShError::DegreeTooHigh(light.degree()).into());
    }
    Ok(light)
}

pub fn resolve_sky(ckpt: &Checkpoint, source: &SkySource) -> Result<ShCoefficients, PipelineError> {
    match source {
        SkySource::Trained(id) => Ok(trained_lights(ckpt, id)?.1),
        SkySource::White => Ok(ShCoefficients::constant(SKY_DEGREE, [1.0; 3])?),
    }
}

/// Color, depth and attribute maps of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub width: usize,
    pub height: usize,
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
    pub albedo: Vec<f64>,
    pub normal: Vec<f64>,
}

/// Renders `model` from `camera` under the given light and sky, together
/// with blended albedo (clamped to `[0, 1]`) and normal `(n + 1)/2` maps to
/// which sky Gaussians contribute nothing.
pub fn render_view(
    model: &Model,
    camera: &Camera,
    light: &ShCoefficients,
    sky: &ShCoefficients,
    lut: &BrdfLut,
    blur: BlurExponent,
) -> Result<Rendered, PipelineError> {
    let scene = &model.scene;
    let colors = shade_scene(scene, camera, light, sky, lut, blur)?;
    let out = render(scene, camera, &colors, ColorMode::Full)?;
    let center = camera.center();
    let mut albedo: Vec<[f64; 3]> = scene.foreground.iter().map(|g| g.material.albedo).collect();
    let mut normal: Vec<[f64; 3]> = scene
        .foreground
        .par_iter()
        .map(|g| {
            let to_camera = UnitDirection::normalize(center - g.position)
                .unwrap_or_else(|_| UnitDirection::from_spherical(0.0, 0.0));
            let n = gaussian_normal(&g.rotation, &g.scales(), &to_camera);
            [n.x(), n.y(), n.z()].map(|v| 0.5 * (v + 1.0))
        })
        .collect();
    albedo.resize(colors.len(), [0.0; 3]);
    normal.resize(colors.len(), [0.0; 3]);
    let albedo = render(scene, camera, &albedo, ColorMode::Full)?.color.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let normal = render(scene, camera, &normal, ColorMode::Full)?.color;
    Ok(Rendered {
        width: out.width,
        height: out.height,
        color: out.color,
        depth: out.depth,
        alpha: out.alpha,
        albedo,
        normal,
    })
}

/// Writes `{stem}.png`, `{stem}_depth.pfm`, `{stem}_albedo.png` and
/// `{stem}_normal.png` into `dir`.
pub fn write_rendered(dir: &Path, stem: &str, r: &Rendered) -> Result<(), IoError> {
    let (w, h) = (r.width, r.height);
    io::write_png(&dir.join(format!("{stem}.png")), &RgbBuffer::new(w, h, r.color.clone()))?;
    io::write_pfm_gray(&dir.join(format!("{stem}_depth.pfm")), w, h, &r.depth)?;
    io::write_png(&dir.join(format!("{stem}_albedo.png")), &RgbBuffer::new(w, h, r.albedo.clone()))?;
    io::write_png(&dir.join(format!("{stem}_normal.png")), &RgbBuffer::new(w, h, r.normal.clone()))
}

/// Per-image metrics and their average.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<(String, MetricsReport)>,
    pub average: MetricsReport,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<(String, MetricsReport)>) -> Result<Self, PipelineError> {
        if rows.is_empty() {
            return Err(PipelineError::Invalid("empty test set".into()));
        }
        let n = rows.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| rows.iter().map(|(_, m)| f(m)).sum::<f64>() / n;
        let average = MetricsReport { psnr: avg(|m| m.psnr), ssim: avg(|m| m.ssim), mse: avg(|m| m.mse), mae: avg(|m| m.mae) };
        Ok(Self { rows, average })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image_id,psnr,ssim,mse,mae\n");
        for (id, m) in self.rows.iter().map(|(id, m)| (id.as_str(), m)).chain([("avg", &self.average)]) {
            let _ = writeln!(s, "{id},{},{},{},{}", m.psnr, m.ssim, m.mse, m.mae);
        }
        s
    }
}

/// Light for a test image: `lights/{id}.txt` (SH text), else
/// `envmaps/{id}.pfm` or `.png`, else the trained light of image `id`.
pub fn test_light(ckpt: &Checkpoint, test_dir: &Path, id: &str) -> Result<ShCoefficients, PipelineError> {
    let sh_path = test_dir.join("lights").join(format!("{id}.txt"));
    if sh_path.exists() {
        let text = io::read_text(&sh_path)?;
        let sh = ShCoefficients::from_text(&text)
            .map_err(|e| IoError::Format { path: sh_path.clone(), msg: e.to_string() })?;
        return resolve_light(ckpt, &LightSource::Sh(sh));
    }
    for ext in ["pfm", "png"] {
        let p = test_dir.join("envmaps").join(format!("{id}.{ext}"));
        if p.exists() {
            let map = envmap::load_map(&p)?;
            return resolve_light(ckpt, &LightSource::Envmap { map, angle: 0.0, axis: RotationAxis::Y });
        }
    }
    if ckpt.image_index(id).is_some() {
        return resolve_light(ckpt, &LightSource::Trained(id.to_string()));
    }
    Err(PipelineError::Invalid(format!("test image {id} has no light in lights/, envmaps/ or the checkpoint")))
}

/// Evaluates every image of the test dataset in `test_dir` (same layout as a
/// training dataset; `points.txt` may be absent) with a white sky. Pixels in
/// the sky or occluder masks are excluded.
pub fn evaluate_test_set(ckpt: &Checkpoint, test_dir: &Path, lut: &BrdfLut) -> Result<EvalReport, PipelineError> {
    let cameras = io::read_cameras(&test_dir.join("cameras.txt"))?;
    if cameras.is_empty() {
        return Err(PipelineError::Invalid("empty test set".into()));
    }
    let white = resolve_sky(ckpt, &SkySource::White)?;
    let mut rows = Vec::with_capacity(cameras.len());
    for (id, camera) in &cameras {
        let light = test_light(ckpt, test_dir, id)?;
        let img_path = test_dir.join("images").join(format!("{id}.png"));
        let reference = io::read_png(&img_path)?;
        if (reference.width, reference.height) != (camera.width, camera.height) {
            return Err(IoError::Format { path: img_path, msg: "image size does not match its camera".into() }.into());
        }
        let mask = |sub: &str| -> Result<Vec<bool>, IoError> {
            let p = test_dir.join(sub).join(format!("{id}.png"));
            if p.exists() {
                io::read_mask(&p, camera.width, camera.height)
            } else {
                Ok(vec![false; camera.pixel_count()])
            }
        };
        let excluded: Vec<bool> =
            mask("masks_sky")?.into_iter().zip(mask("masks_occluder")?).map(|(a, b)| a || b).collect();
        let r = render_view(&ckpt.state.model, camera, &light, &white, lut, ckpt.config.blur)?;
        let m = masked_metrics(&r.color, &reference.data, camera.width, camera.height, &excluded)?;
        rows.push((id.clone(), m));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    EvalReport::from_rows(rows)
}
