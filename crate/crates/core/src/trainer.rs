//! Optimization loop: Adam over every parameter group, the position
//! learning-rate schedule, density control, and constraint re-projection.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::appearance::{AppearanceMlp, EmbeddingTable};
use crate::brdf::BrdfLut;
use crate::geometry::sigmoid;
use crate::losses::{LossTerms, LossWeights};
use crate::model::{evaluate, Model, ModelError, TrainingView};
use crate::scene::{
    init_scene, split_foreground_gaussian, split_sky_gaussian, ForegroundGaussian, SceneError, SeedPoint,
    SkyGaussian, DEFAULT_SKY_COUNT_SCALE, FG_PARAMS, SKY_PARAMS,
};
use crate::sh::BlurExponent;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no training views")]
    NoViews,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    pub lr_embedding: f64,
    pub lr_mlp: f64,
    pub lr_roughness: f64,
    pub lr_albedo: f64,
    pub lr_radius: f64,
    /// Foreground positions and sky angles decay exponentially between these.
    pub lr_position_init: f64,
    pub lr_position_final: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub densify_interval: usize,
    pub densify_from: usize,
    pub densify_until: usize,
    /// Densification threshold at the start of the window (NDC units).
    pub densify_threshold: f64,
    /// Log growth of the threshold across the window.
    pub densify_growth: f64,
    /// Gaussians larger than this fraction of the scene extent are split, smaller ones cloned.
    pub percent_dense: f64,
    pub prune_opacity: f64,
    pub max_gaussians: usize,
    pub sky_count_scale: f64,
    pub checkpoint_interval: usize,
    pub blur: BlurExponent,
    #[serde(flatten)]
    pub losses: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            seed: 0,
            lr_embedding: 2e-4,
            lr_mlp: 2e-4,
            lr_roughness: 2e-4,
            lr_albedo: 2e-3,
            lr_radius: 1e-4,
            lr_position_init: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_rotation: 1e-3,
            lr_scale: 5e-3,
            lr_opacity: 5e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-15,
            densify_interval: 100,
            densify_from: 500,
            densify_until: 1500,
            densify_threshold: 2e-4,
            densify_growth: 3f64.ln(),
            percent_dense: 0.01,
            prune_opacity: 0.005,
            max_gaussians: 5000,
            sky_count_scale: DEFAULT_SKY_COUNT_SCALE,
            checkpoint_interval: 1000,
            blur: BlurExponent::default(),
            losses: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let rates = [
            ("lr_embedding", self.lr_embedding),
            ("lr_mlp", self.lr_mlp),
            ("lr_roughness", self.lr_roughness),
            ("lr_albedo", self.lr_albedo),
            ("lr_radius", self.lr_radius),
            ("lr_position_init", self.lr_position_init),
            ("lr_position_final", self.lr_position_final),
            ("lr_rotation", self.lr_rotation),
            ("lr_scale", self.lr_scale),
            ("lr_opacity", self.lr_opacity),
        ];
        if let Some((name, v)) = rates.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(TrainError::Config(format!("{name} = {v} must be a non-negative number")));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(TrainError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.densify_from > self.densify_until {
            return Err(TrainError::Config("densify_from must not exceed densify_until".into()));
        }
        if self.densify_interval == 0 || self.checkpoint_interval == 0 {
            return Err(TrainError::Config("intervals must be positive".into()));
        }
        if self.losses.light_samples == 0 || !(0.0..=1.0).contains(&self.losses.rec_l1) {
            return Err(TrainError::Config("light_samples must be ≥ 1 and rec_l1 in [0, 1]".into()));
        }
        Ok(())
    }

    /// Position (and sky angle) learning rate at `iteration`.
    pub fn position_lr(&self, iteration: usize) -> f64 {
        if self.lr_position_init == 0.0 || self.lr_position_final == 0.0 {
            return 0.0;
        }
        let t = (iteration as f64 / self.iterations.max(1) as f64).clamp(0.0, 1.0);
        ((1.0 - t) * self.lr_position_init.ln() + t * self.lr_position_final.ln()).exp()
    }

    /// Densification threshold at `iteration`, growing exponentially from
    /// `densify_threshold` at the window start to `densify_threshold · e^growth`
    /// at its end.
    pub fn densify_threshold_at(&self, iteration: usize) -> f64 {
        let span = (self.densify_until - self.densify_from).max(1) as f64;
        let t = ((iteration as f64 - self.densify_from as f64) / span).clamp(0.0, 1.0);
        self.densify_threshold * (self.densify_growth * t).exp()
    }
}

/// First and second moments of one flat parameter group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub foreground: Moments,
    pub sky: Moments,
    pub radius: Moments,
    pub mlp: Moments,
    pub embeddings: Moments,
}

impl OptimizerState {
    pub fn new(model: &Model) -> Self {
        Self {
            step: 0,
            foreground: Moments::zeros(model.scene.foreground.len() * FG_PARAMS),
            sky: Moments::zeros(model.scene.sky.len() * SKY_PARAMS),
            radius: Moments::zeros(1),
            mlp: Moments::zeros(model.mlp.params.len()),
            embeddings: Moments::zeros(model.embeddings.values.len()),
        }
    }
}

/// Everything needed to continue training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: OptimizerState,
    /// Next iteration to run.
    pub iteration: usize,
    /// Accumulated screen-space gradient norms per Gaussian (foreground first).
    pub grad_accum: Vec<f64>,
    pub grad_count: Vec<f64>,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let n = model.scene.foreground.len() + model.scene.sky.len();
        Self { optimizer: OptimizerState::new(&model), model, iteration: 0, grad_accum: vec![0.0; n], grad_count: vec![0.0; n] }
    }
}

/// Purpose tags that keep per-iteration random streams independent.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Light = 0,
    Densify = 1,
    Order = 2,
    Init = 3,
}

/// Random stream for `(seed, index, purpose)`, independent of history.
pub fn stream_rng(seed: u64, index: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(4) + purpose as u64);
    rng
}

/// Fresh model from a seed point cloud.
pub fn initialize(points: &[SeedPoint], views: usize, config: &TrainConfig) -> Result<TrainState, TrainError> {
    let mut rng = stream_rng(config.seed, 0, Stream::Init);
    let scene = init_scene(points, config.sky_count_scale, &mut rng)?;
    let mlp = AppearanceMlp::new(&mut rng);
    let embeddings = EmbeddingTable::new(views, &mut rng);
    Ok(TrainState::new(Model { scene, mlp, embeddings }))
}

/// Index of the view used at `iteration`: a fresh seeded permutation per epoch.
pub fn view_for_iteration(seed: u64, iteration: usize, views: usize) -> usize {
    let epoch = iteration / views;
    let mut order: Vec<usize> = (0..views).collect();
    order.shuffle(&mut stream_rng(seed, epoch as u64, Stream::Order));
    order[iteration % views]
}

#[allow(clippy::too_many_arguments)]
fn adam(
    params: &mut [f64],
    grads: &[f64],
    moments: &mut Moments,
    lr: impl Fn(usize) -> f64,
    c: &TrainConfig,
    bias1: f64,
    bias2: f64,
) {
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i];
        let m = &mut moments.m[i];
        let v = &mut moments.v[i];
        *m = c.adam_beta1 * *m + (1.0 - c.adam_beta1) * g;
        *v = c.adam_beta2 * *v + (1.0 - c.adam_beta2) * g * g;
        let rate = lr(i);
        if rate != 0.0 {
            *p -= rate / bias1 * *m / ((*v).sqrt() / bias2.sqrt() + c.adam_epsilon);
        }
    }
}

/// Loss report of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    pub terms: LossTerms,
    pub total: f64,
    pub fg_leak: f64,
}

/// One forward/backward/update on `view`, followed by constraint clamping
/// and densification statistics.
pub fn train_step(
    state: &mut TrainState,
    view: &TrainingView,
    lut: &BrdfLut,
    config: &TrainConfig,
) -> Result<StepReport, TrainError> {
    let it = state.iteration;
    let mut rng = stream_rng(config.seed, it as u64, Stream::Light);
    let eval = evaluate(&state.model, view, lut, config.blur, &config.losses, it, &mut rng)?;
    let opt = &mut state.optimizer;
    opt.step += 1;
    let bias1 = 1.0 - config.adam_beta1.powi(opt.step as i32);
    let bias2 = 1.0 - config.adam_beta2.powi(opt.step as i32);
    let pos_lr = config.position_lr(it);

    let scene = &mut state.model.scene;
    let mut fg: Vec<f64> = scene.foreground.iter().flat_map(|g| g.to_array()).collect();
    let fg_grad: Vec<f64> = eval.grad.scene.foreground.iter().flatten().copied().collect();
    let fg_lr = |i: usize| match i % FG_PARAMS {
        0..=2 => pos_lr,
        3..=6 => config.lr_rotation,
        7..=9 => config.lr_scale,
        10 => config.lr_opacity,
        11..=13 => config.lr_albedo,
        _ => config.lr_roughness,
    };
    adam(&mut fg, &fg_grad, &mut opt.foreground, fg_lr, config, bias1, bias2);
    for (g, chunk) in scene.foreground.iter_mut().zip(fg.chunks_exact(FG_PARAMS)) {
        *g = ForegroundGaussian::from_array(chunk.try_into().expect("chunk size"));
    }

    let mut sky: Vec<f64> = scene.sky.iter().flat_map(|g| g.to_array()).collect();
    let sky_grad: Vec<f64> = eval.grad.scene.sky.iter().flatten().copied().collect();
    let sky_lr = |i: usize| match i % SKY_PARAMS {
        0..=1 => pos_lr,
        2..=5 => config.lr_rotation,
        6..=8 => config.lr_scale,
        _ => config.lr_opacity,
    };
    adam(&mut sky, &sky_grad, &mut opt.sky, sky_lr, config, bias1, bias2);
    for (g, chunk) in scene.sky.iter_mut().zip(sky.chunks_exact(SKY_PARAMS)) {
        *g = SkyGaussian::from_array(chunk.try_into().expect("chunk size"));
    }

    let mut radius = [scene.dome.radius];
    adam(&mut radius, &[eval.grad.scene.radius], &mut opt.radius, |_| config.lr_radius, config, bias1, bias2);
    scene.dome.radius = radius[0];
    scene.clamp_constraints();

    adam(&mut state.model.mlp.params, &eval.grad.mlp, &mut opt.mlp, |_| config.lr_mlp, config, bias1, bias2);
    adam(
        &mut state.model.embeddings.values,
        &eval.grad.embeddings,
        &mut opt.embeddings,
        |_| config.lr_embedding,
        config,
        bias1,
        bias2,
    );

    if it < config.densify_until {
        for (i, seen) in eval.in_view.iter().enumerate() {
            if *seen {
                state.grad_accum[i] += eval.ndc_gradients[i];
                state.grad_count[i] += 1.0;
            }
        }
    }
    state.iteration += 1;
    Ok(StepReport { iteration: it, terms: eval.terms, total: eval.total, fg_leak: eval.fg_leak })
}

/// Clones or splits Gaussians whose mean screen-space gradient exceeds
/// `threshold`, then prunes nearly transparent ones. Moments of new
/// Gaussians start at zero; accumulators are reset.
pub fn densify_and_prune(state: &mut TrainState, threshold: f64, config: &TrainConfig, rng: &mut impl Rng) {
    let scene = &state.model.scene;
    let nf = scene.foreground.len();
    let extent = scene.dome.radius;
    let mut budget = config.max_gaussians.saturating_sub(nf + scene.sky.len());
    let hot = |i: usize| state.grad_count[i] > 0.0 && state.grad_accum[i] / state.grad_count[i] >= threshold;
    let zero_fg = [0.0; FG_PARAMS];
    let zero_sky = [0.0; SKY_PARAMS];
    let opt = &state.optimizer;

    let mut fg: Vec<(ForegroundGaussian, [f64; FG_PARAMS], [f64; FG_PARAMS])> = Vec::with_capacity(nf);
    for (i, g) in scene.foreground.iter().enumerate() {
        let m: [f64; FG_PARAMS] = opt.foreground.m[i * FG_PARAMS..(i + 1) * FG_PARAMS].try_into().unwrap();
        let v: [f64; FG_PARAMS] = opt.foreground.v[i * FG_PARAMS..(i + 1) * FG_PARAMS].try_into().unwrap();
        if !hot(i) || budget == 0 {
            fg.push((*g, m, v));
            continue;
        }
        budget -= 1;
        let largest = g.scales().iter().copied().fold(0.0, f64::max);
        if largest <= config.percent_dense * extent {
            fg.push((*g, m, v));
            fg.push((*g, zero_fg, zero_fg));
        } else {
            for child in split_foreground_gaussian(g, rng) {
                fg.push((child, zero_fg, zero_fg));
            }
        }
    }
    let mut sky: Vec<(SkyGaussian, [f64; SKY_PARAMS], [f64; SKY_PARAMS])> = Vec::with_capacity(scene.sky.len());
    for (s, g) in scene.sky.iter().enumerate() {
        let m: [f64; SKY_PARAMS] = opt.sky.m[s * SKY_PARAMS..(s + 1) * SKY_PARAMS].try_into().unwrap();
        let v: [f64; SKY_PARAMS] = opt.sky.v[s * SKY_PARAMS..(s + 1) * SKY_PARAMS].try_into().unwrap();
        if !hot(nf + s) || budget == 0 {
            sky.push((*g, m, v));
            continue;
        }
        budget -= 1;
        for child in split_sky_gaussian(g, &scene.dome, rng) {
            sky.push((child, zero_sky, zero_sky));
        }
    }
    fg.retain(|(g, _, _)| sigmoid(g.opacity_logit) >= config.prune_opacity);
    sky.retain(|(g, _, _)| sigmoid(g.opacity_logit) >= config.prune_opacity);

    let opt = &mut state.optimizer;
    opt.foreground.m = fg.iter().flat_map(|(_, m, _)| *m).collect();
    opt.foreground.v = fg.iter().flat_map(|(_, _, v)| *v).collect();
    opt.sky.m = sky.iter().flat_map(|(_, m, _)| *m).collect();
    opt.sky.v = sky.iter().flat_map(|(_, _, v)| *v).collect();
    let scene = &mut state.model.scene;
    scene.foreground = fg.into_iter().map(|(g, _, _)| g).collect();
    scene.sky = sky.into_iter().map(|(g, _, _)| g).collect();
    let n = scene.foreground.len() + scene.sky.len();
    state.grad_accum = vec![0.0; n];
    state.grad_count = vec![0.0; n];
}

/// Whether densification runs after the step that produced `iteration`.
pub fn densify_due(config: &TrainConfig, iteration: usize) -> bool {
    let done = iteration + 1;
    done >= config.densify_from && done <= config.densify_until && done % config.densify_interval == 0 && done > 0
}

/// Runs training from `state.iteration` up to `until`, calling `on_step`
/// after every step (for logging and checkpointing).
pub fn run(
    state: &mut TrainState,
    views: &[TrainingView],
    lut: &BrdfLut,
    config: &TrainConfig,
    until: usize,
    mut on_step: impl FnMut(&TrainState, &StepReport) -> Result<(), TrainError>,
) -> Result<(), TrainError> {
    if views.is_empty() {
        return Err(TrainError::NoViews);
    }
    config.validate()?;
    while state.iteration < until.min(config.iterations) {
        let it = state.iteration;
        let view = &views[view_for_iteration(config.seed, it, views.len())];
        let report = train_step(state, view, lut, config)?;
        if densify_due(config, it) {
            let mut rng = stream_rng(config.seed, it as u64, Stream::Densify);
            densify_and_prune(state, config.densify_threshold_at(it + 1), config, &mut rng);
        }
        on_step(state, &report)?;
    }
    Ok(())
}
