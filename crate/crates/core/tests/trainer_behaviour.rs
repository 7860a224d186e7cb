mod common;

use std::f64::consts::{FRAC_PI_2, PI};

use proptest::prelude::*;
use splatlight::brdf::{bake_lut, BrdfLut};
use splatlight::geometry::{inverse_sigmoid, sigmoid};
use splatlight::losses::LossWeights;
use splatlight::model::{evaluate, TrainingView};
use splatlight::scene::sky_position;
use splatlight::synthetic;
use splatlight::trainer::{
    densify_and_prune, densify_due, initialize, run, stream_rng, train_step, view_for_iteration, Stream, TrainConfig,
    TrainState,
};

fn lut() -> BrdfLut {
    bake_lut(16, 256, 2).unwrap()
}

fn toy_state(seed: u64) -> TrainState {
    TrainState::new(common::toy_model(seed, 8, 4, 2))
}

fn toy_views() -> Vec<TrainingView> {
    vec![common::toy_view(21, 0), common::toy_view(22, 1)]
}

#[test]
fn zero_learning_rates_leave_parameters_unchanged() {
    let lut = lut();
    let config = TrainConfig {
        lr_embedding: 0.0,
        lr_mlp: 0.0,
        lr_roughness: 0.0,
        lr_albedo: 0.0,
        lr_radius: 0.0,
        lr_position_init: 0.0,
        lr_position_final: 0.0,
        lr_rotation: 0.0,
        lr_scale: 0.0,
        lr_opacity: 0.0,
        ..Default::default()
    };
    let mut state = toy_state(1);
    state.iteration = 2500;
    let before = state.model.clone();
    let views = toy_views();
    for i in 0..3 {
        let report = train_step(&mut state, &views[i % 2], &lut, &config).unwrap();
        assert!(report.total.is_finite() && report.total > 0.0);
        assert!(report.terms.rec > 0.0);
    }
    assert_eq!(state.model, before);
    assert_eq!(state.iteration, 2503);
}

fn loss_curve(seed: u64) -> (Vec<f64>, TrainState) {
    let lut = lut();
    let config = TrainConfig { iterations: 30, seed, densify_from: 5, densify_until: 25, densify_interval: 5, ..Default::default() };
    let mut state = toy_state(3);
    let mut curve = vec![];
    run(&mut state, &toy_views(), &lut, &config, 30, |_, r| {
        curve.push(r.total);
        Ok(())
    })
    .unwrap();
    (curve, state)
}

#[test]
fn identical_seeds_give_identical_runs() {
    let (a, sa) = loss_curve(7);
    let (b, sb) = loss_curve(7);
    assert_eq!(a.len(), 30);
    assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    assert_eq!(sa, sb);
    let (c, _) = loss_curve(8);
    assert_ne!(a, c);
}

#[test]
fn two_hundred_steps_reduce_reconstruction_loss_on_one_image() {
    let lut = lut();
    let set = synthetic::build(4, 24, &lut).unwrap();
    let mut view = set.views[0].clone();
    view.index = 0;
    let mut losses = LossWeights::default();
    losses.warmup_iterations = 0;
    let config = TrainConfig { iterations: 200, losses, densify_from: 1000, densify_until: 1000, ..Default::default() };
    let mut state = initialize(&set.points, 1, &config).unwrap();
    let rec = |s: &TrainState| {
        evaluate(&s.model, &view, &lut, config.blur, &config.losses, 0, &mut common::rng(0)).unwrap().terms.rec
    };
    let start = rec(&state);
    run(&mut state, std::slice::from_ref(&view), &lut, &config, 200, |_, _| Ok(())).unwrap();
    let end = rec(&state);
    assert!(end < start, "rec loss {start} -> {end}");
}

#[test]
fn constraints_hold_after_every_step() {
    let lut = lut();
    // Large rates push parameters hard against their bounds.
    let config = TrainConfig {
        lr_position_init: 0.5,
        lr_position_final: 0.5,
        lr_radius: 5.0,
        lr_roughness: 0.5,
        lr_albedo: 0.5,
        ..Default::default()
    };
    let mut state = toy_state(5);
    state.iteration = 2500;
    let views = toy_views();
    for i in 0..20 {
        train_step(&mut state, &views[i % 2], &lut, &config).unwrap();
        let scene = &state.model.scene;
        scene.validate().unwrap();
        assert!(scene.dome.radius > 0.0);
        for g in &scene.foreground {
            assert!(g.material.albedo.iter().all(|a| (0.0..=1.0).contains(a)));
            assert!((0.0..=1.0).contains(&g.material.roughness));
        }
        for g in &scene.sky {
            assert!((0.0..=FRAC_PI_2).contains(&g.theta) && (0.0..=PI).contains(&g.phi));
            let r = (sky_position(g, &scene.dome) - scene.dome.center()).norm();
            assert!((r - scene.dome.radius).abs() < 1e-9 * scene.dome.radius.max(1.0));
        }
    }
}

#[test]
fn densify_threshold_endpoints() {
    let config = TrainConfig::default();
    assert_eq!(config.densify_threshold_at(config.densify_from), config.densify_threshold);
    let end = config.densify_threshold_at(config.densify_until);
    assert!((end - config.densify_threshold * config.densify_growth.exp()).abs() < 1e-18);
    assert!((end - 6e-4).abs() < 1e-15);
}

#[test]
fn densify_schedule_window() {
    let config = TrainConfig::default();
    let due: Vec<usize> = (0..3000).filter(|it| densify_due(&config, *it)).map(|it| it + 1).collect();
    assert_eq!(due, (5..=15).map(|k| k * 100).collect::<Vec<_>>());
}

#[test]
fn cold_gradients_only_prune() {
    let mut state = toy_state(6);
    state.model.scene.foreground[0].opacity_logit = inverse_sigmoid(0.001);
    state.model.scene.sky[1].opacity_logit = inverse_sigmoid(0.004);
    let n = state.grad_accum.len();
    state.grad_accum = vec![1e-5; n];
    state.grad_count = vec![1.0; n];
    let before = state.model.scene.clone();
    densify_and_prune(&mut state, 2e-4, &TrainConfig::default(), &mut stream_rng(0, 0, Stream::Densify));
    let scene = &state.model.scene;
    assert_eq!(scene.foreground, before.foreground[1..].to_vec());
    let mut sky = before.sky.clone();
    sky.remove(1);
    assert_eq!(scene.sky, sky);
    assert_eq!(state.optimizer.foreground.m.len(), scene.foreground.len() * splatlight::scene::FG_PARAMS);
    assert!(state.grad_accum.iter().all(|g| *g == 0.0));
}

#[test]
fn hot_gradients_clone_small_and_split_large() {
    let mut state = toy_state(7);
    let extent = state.model.scene.dome.radius;
    state.model.scene.foreground[0].log_scales = [(0.001 * extent).ln(); 3];
    state.model.scene.foreground[1].log_scales = [(0.5 * extent).ln(), -3.0, -3.0];
    let (nf, ns) = (state.model.scene.foreground.len(), state.model.scene.sky.len());
    let mut accum = vec![0.0; nf + ns];
    accum[0] = 1.0;
    accum[1] = 1.0;
    accum[nf] = 1.0;
    state.grad_accum = accum;
    state.grad_count = vec![1.0; nf + ns];
    let g0 = state.model.scene.foreground[0];
    let g1 = state.model.scene.foreground[1];
    let dome = state.model.scene.dome;
    densify_and_prune(&mut state, 0.5, &TrainConfig::default(), &mut stream_rng(1, 0, Stream::Densify));
    let scene = &state.model.scene;
    assert_eq!(scene.foreground.len(), nf + 2);
    assert_eq!(scene.foreground[0], g0);
    assert_eq!(scene.foreground[1], g0);
    for child in &scene.foreground[2..4] {
        assert!((child.log_scales[0] - (g1.log_scales[0] - 1.6f64.ln())).abs() < 1e-12);
        assert_eq!(child.material, g1.material);
    }
    assert_eq!(scene.sky.len(), ns + 1);
    for child in &scene.sky[..2] {
        assert!((0.0..=FRAC_PI_2).contains(&child.theta) && (0.0..=PI).contains(&child.phi));
        let r = (sky_position(child, &dome) - dome.center()).norm();
        assert!((r - dome.radius).abs() < 1e-9);
    }
}

#[test]
fn densification_respects_the_gaussian_budget() {
    let mut state = toy_state(8);
    let n = state.grad_accum.len();
    state.grad_accum = vec![1.0; n];
    state.grad_count = vec![1.0; n];
    let config = TrainConfig { max_gaussians: n + 3, ..Default::default() };
    densify_and_prune(&mut state, 0.5, &config, &mut stream_rng(2, 0, Stream::Densify));
    assert_eq!(state.model.scene.foreground.len() + state.model.scene.sky.len(), n + 3);
}

#[test]
fn view_order_is_a_permutation_per_epoch() {
    for views in [1usize, 2, 5, 12] {
        for epoch in 0..4 {
            let mut seen: Vec<usize> = (0..views).map(|i| view_for_iteration(3, epoch * views + i, views)).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..views).collect::<Vec<_>>());
        }
    }
    let a: Vec<usize> = (0..24).map(|i| view_for_iteration(1, i, 12)).collect();
    let b: Vec<usize> = (0..24).map(|i| view_for_iteration(2, i, 12)).collect();
    assert_ne!(a, b);
}

#[test]
fn invalid_configs_are_rejected() {
    for config in [
        TrainConfig { lr_mlp: -1.0, ..Default::default() },
        TrainConfig { lr_albedo: f64::NAN, ..Default::default() },
        TrainConfig { adam_beta1: 1.0, ..Default::default() },
        TrainConfig { densify_from: 10, densify_until: 5, ..Default::default() },
        TrainConfig { densify_interval: 0, ..Default::default() },
    ] {
        assert!(config.validate().is_err());
    }
    assert!(run(&mut toy_state(1), &[], &lut(), &TrainConfig::default(), 1, |_, _| Ok(())).is_err());
}

#[test]
fn position_rate_decays_exponentially() {
    let config = TrainConfig { iterations: 1000, ..Default::default() };
    assert!((config.position_lr(0) - 1.6e-4).abs() < 1e-18);
    assert!((config.position_lr(1000) - 1.6e-6).abs() < 1e-18);
    assert!((config.position_lr(500) - 1.6e-5).abs() < 1e-17);
}

proptest! {
    #[test]
    fn densify_threshold_is_non_decreasing(a in 0usize..3000, b in 0usize..3000) {
        let config = TrainConfig::default();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(config.densify_threshold_at(lo) <= config.densify_threshold_at(hi));
    }

    #[test]
    fn pruning_removes_exactly_the_transparent(opacities in proptest::collection::vec(0.0001f64..0.02, 12)) {
        let mut state = toy_state(9);
        for (g, o) in state.model.scene.foreground.iter_mut().zip(&opacities) {
            g.opacity_logit = inverse_sigmoid(*o);
        }
        let config = TrainConfig::default();
        let keep = state.model.scene.foreground.iter().filter(|g| sigmoid(g.opacity_logit) >= config.prune_opacity).count();
        densify_and_prune(&mut state, 1.0, &config, &mut stream_rng(0, 0, Stream::Densify));
        prop_assert_eq!(state.model.scene.foreground.len(), keep);
    }
}
