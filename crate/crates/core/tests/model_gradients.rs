mod common;

use rand::Rng;
use splatlight::brdf::{bake_lut, BrdfLut};
use splatlight::losses::LossWeights;
use splatlight::model::{evaluate, Model, TrainingView};
use splatlight::scene::{ForegroundGaussian, SkyGaussian, FG_PARAMS, SKY_PARAMS};
use splatlight::sh::BlurExponent;

const H: f64 = 1e-4;

fn total(model: &Model, view: &TrainingView, lut: &BrdfLut, iteration: usize) -> f64 {
    let w = LossWeights::default();
    evaluate(model, view, lut, BlurExponent::default(), &w, iteration, &mut common::rng(77)).unwrap().total
}

fn check(analytic: f64, model: &Model, x: f64, set: impl Fn(&mut Model, f64), view: &TrainingView, lut: &BrdfLut, it: usize, what: &str) {
    let f = |v: f64| {
        let mut m = model.clone();
        set(&mut m, v);
        total(&m, view, lut, it)
    };
    common::assert_grad_close(analytic, common::central_difference(f, x, H), 1e-4, 1e-7, what);
}

#[test]
fn total_loss_gradients_match_finite_differences() {
    let lut = bake_lut(32, 256, 5).unwrap();
    let mut model = common::toy_model(51, 10, 4, 3);
    // Push the decoded light partly negative so the positivity term is active.
    for (name, _, range) in splatlight::appearance::AppearanceMlp::tensors() {
        if name == "light_head.bias" {
            for (k, v) in model.mlp.params[range].iter_mut().enumerate() {
                if k % 25 != 0 {
                    *v = if k % 2 == 0 { 0.5 } else { -0.5 };
                }
            }
        }
    }
    let view = common::toy_view(52, 1);
    let it = 2500;
    let eval = evaluate(&model, &view, &lut, BlurExponent::default(), &LossWeights::default(), it, &mut common::rng(77)).unwrap();
    assert!(eval.terms.values().iter().all(|v| *v > 0.0), "{:?}", eval.terms);
    let g = &eval.grad;
    for i in 0..model.scene.foreground.len() {
        for k in 0..FG_PARAMS {
            let x = model.scene.foreground[i].to_array()[k];
            let set = |m: &mut Model, v: f64| {
                let mut a = m.scene.foreground[i].to_array();
                a[k] = v;
                m.scene.foreground[i] = ForegroundGaussian::from_array(&a);
            };
            check(g.scene.foreground[i][k], &model, x, set, &view, &lut, it, &format!("fg {i}.{k}"));
        }
    }
    for i in 0..model.scene.sky.len() {
        for k in 0..SKY_PARAMS {
            let x = model.scene.sky[i].to_array()[k];
            let set = |m: &mut Model, v: f64| {
                let mut a = m.scene.sky[i].to_array();
                a[k] = v;
                m.scene.sky[i] = SkyGaussian::from_array(&a);
            };
            check(g.scene.sky[i][k], &model, x, set, &view, &lut, it, &format!("sky {i}.{k}"));
        }
    }
    check(g.scene.radius, &model, model.scene.dome.radius, |m, v| m.scene.dome.radius = v, &view, &lut, it, "radius");
    let row = view.index * 128;
    for k in 0..128 {
        let x = model.embeddings.values[row + k];
        check(g.embeddings[row + k], &model, x, |m, v| m.embeddings.values[row + k] = v, &view, &lut, it, &format!("embedding {k}"));
    }
    assert!(g.embeddings[..row].iter().chain(&g.embeddings[row + 128..]).all(|v| *v == 0.0));
    // Every MLP tensor, sampled.
    let mut rng = common::rng(53);
    for (name, _, range) in splatlight::appearance::AppearanceMlp::tensors() {
        for _ in 0..6 {
            let k = rng.random_range(range.clone());
            let x = model.mlp.params[k];
            check(g.mlp[k], &model, x, |m, v| m.mlp.params[k] = v, &view, &lut, it, &format!("{name}[{k}]"));
        }
    }
}

#[test]
fn warmup_only_trains_separation() {
    let lut = bake_lut(32, 256, 5).unwrap();
    let model = common::toy_model(54, 8, 4, 2);
    let view = common::toy_view(55, 0);
    let w = LossWeights::default();
    let e = evaluate(&model, &view, &lut, BlurExponent::default(), &w, 100, &mut common::rng(1)).unwrap();
    assert_eq!(e.total, w.fg_sky * e.terms.fg_sky);
    // Materials and the light only affect the separation term through colors;
    // sky coefficients are untouched unless a sky color leaks onto foreground.
    let h = 1e-5;
    let f = |m: &Model| evaluate(m, &view, &lut, BlurExponent::default(), &w, 100, &mut common::rng(1)).unwrap().total;
    for i in 0..model.scene.foreground.len() {
        let mut a = model.scene.foreground[i];
        a.material.roughness += h;
        let mut m = model.clone();
        m.scene.foreground[i] = a;
        let mut b = model.scene.foreground[i];
        b.material.roughness -= h;
        let mut m2 = model.clone();
        m2.scene.foreground[i] = b;
        let fd = (f(&m) - f(&m2)) / (2.0 * h);
        common::assert_grad_close(e.grad.scene.foreground[i][14], fd, 1e-4, 1e-9, "roughness");
    }
}
