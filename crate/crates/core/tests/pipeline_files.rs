mod common;

use std::path::Path;

use splatlight::brdf::{bake_lut, BrdfLut};
use splatlight::envmap::{EquirectMap, RotationAxis};
use splatlight::io;
use splatlight::metrics::masked_metrics;
use splatlight::model::{evaluate, shade_scene};
use splatlight::pipeline::{
    self, checkpoint_name, evaluate_test_set, fit, render_view, resolve_light, resolve_sky, LightSource, SkySource,
    FINAL_CHECKPOINT, TRAIN_LOG,
};
use splatlight::render::{render, ColorMode};
use splatlight::sh::{ShCoefficients, UnitDirection};
use splatlight::synthetic;
use splatlight::trainer::TrainConfig;

fn lut() -> BrdfLut {
    bake_lut(16, 256, 3).unwrap()
}

fn write_data(dir: &Path, lut: &BrdfLut) {
    let set = synthetic::build(1, 24, lut).unwrap();
    synthetic::write_set(&set, dir, lut).unwrap();
}

fn small_config() -> TrainConfig {
    TrainConfig {
        iterations: 40,
        checkpoint_interval: 20,
        densify_from: 10,
        densify_until: 30,
        densify_interval: 10,
        ..Default::default()
    }
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn zero_iterations_writes_the_initial_checkpoint() {
    let lut = lut();
    let tmp = tempfile::tempdir().unwrap();
    write_data(tmp.path(), &lut);
    let config = TrainConfig { iterations: 0, ..Default::default() };
    let out = tmp.path().join("run");
    let ckpt = fit(&tmp.path().join("train"), &out, &config, false, &lut, |_, _, _| {}).unwrap();
    assert_eq!(ckpt.state.iteration, 0);
    let loaded = io::load_checkpoint(&out.join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(io::read_text(&out.join(TRAIN_LOG)).unwrap().lines().count(), 1);
}

#[test]
fn resumed_fit_matches_an_unbroken_run() {
    let lut = lut();
    let tmp = tempfile::tempdir().unwrap();
    write_data(tmp.path(), &lut);
    let data = tmp.path().join("train");
    let config = small_config();
    let full = tmp.path().join("full");
    fit(&data, &full, &config, false, &lut, |_, _, _| {}).unwrap();
    assert!(full.join(checkpoint_name(20)).is_dir());
    assert!(full.join(checkpoint_name(40)).is_dir());

    // Interrupted after the first checkpoint: only ckpt_000020 and the log survive.
    let resumed = tmp.path().join("resumed");
    std::fs::create_dir_all(resumed.join(checkpoint_name(20))).unwrap();
    for (name, bytes) in read_dir_bytes(&full.join(checkpoint_name(20))) {
        std::fs::write(resumed.join(checkpoint_name(20)).join(name), bytes).unwrap();
    }
    std::fs::write(resumed.join(TRAIN_LOG), std::fs::read(full.join(TRAIN_LOG)).unwrap()).unwrap();
    let mut steps = vec![];
    fit(&data, &resumed, &config, true, &lut, |it, _, _| steps.push(it)).unwrap();
    assert_eq!(steps, (20..40).collect::<Vec<_>>());

    assert_eq!(read_dir_bytes(&full.join(FINAL_CHECKPOINT)), read_dir_bytes(&resumed.join(FINAL_CHECKPOINT)));
    assert_eq!(std::fs::read(full.join(TRAIN_LOG)).unwrap(), std::fs::read(resumed.join(TRAIN_LOG)).unwrap());
}

#[test]
fn resume_without_checkpoint_starts_fresh_and_mismatched_data_is_rejected() {
    let lut = lut();
    let tmp = tempfile::tempdir().unwrap();
    write_data(tmp.path(), &lut);
    let config = TrainConfig { iterations: 3, ..Default::default() };
    let a = fit(&tmp.path().join("train"), &tmp.path().join("a"), &config, true, &lut, |_, _, _| {}).unwrap();
    assert_eq!(a.state.iteration, 3);
    io::save_checkpoint(&tmp.path().join("b").join(checkpoint_name(1)), &a).unwrap();
    let err = fit(&tmp.path().join("test"), &tmp.path().join("b"), &config, true, &lut, |_, _, _| {}).unwrap_err();
    assert!(err.to_string().contains("different images"), "{err}");
}

#[test]
fn unreadable_dataset_names_the_file() {
    let lut = lut();
    let tmp = tempfile::tempdir().unwrap();
    write_data(tmp.path(), &lut);
    std::fs::write(tmp.path().join("train/images/light1_view2.png"), b"not a png").unwrap();
    let err = fit(&tmp.path().join("train"), &tmp.path().join("o"), &small_config(), false, &lut, |_, _, _| {})
        .unwrap_err()
        .to_string();
    assert!(err.contains("light1_view2.png"), "{err}");
}

fn trained(tmp: &Path, lut: &BrdfLut) -> io::Checkpoint {
    write_data(tmp, lut);
    let config = TrainConfig { iterations: 30, ..Default::default() };
    fit(&tmp.join("train"), &tmp.join("run"), &config, false, lut, |_, _, _| {}).unwrap()
}

#[test]
fn trained_light_render_reproduces_the_training_render() {
    let lut = lut();
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = trained(tmp.path(), &lut);
    let ds = io::load_dataset(&tmp.path().join("train")).unwrap();
    let view = &ds.views[5];
    let light = resolve_light(&ckpt, &LightSource::Trained(view.id.clone())).unwrap();
    let sky = resolve_sky(&ckpt, &SkySource::Trained(view.id.clone())).unwrap();
    let r = render_view(&ckpt.state.model, &view.camera, &light, &sky, &lut, ckpt.config.blur).unwrap();
    let eval = evaluate(&ckpt.state.model, view, &lut, ckpt.config.blur, &ckpt.config.losses, 0, &mut common::rng(0)).unwrap();
    assert_eq!(r.color, eval.color);
}

#[test]
fn white_sky_saturates_to_white() {
    let lut = lut();
    let mut model = common::toy_model(4, 0, 12, 1);
    for g in &mut model.scene.sky {
        g.opacity_logit = 8.0;
        g.log_scales = [0.5; 3];
    }
    let scene = model.scene.clone();
    let cam = common::toy_camera();
    let light = ShCoefficients::constant(4, [0.5; 3]).unwrap();
    let tmp_ckpt = io::Checkpoint {
        state: splatlight::trainer::TrainState::new(model),
        image_ids: vec!["a".into()],
        cameras: vec![("a".into(), cam)],
        config: TrainConfig::default(),
    };
    let white = resolve_sky(&tmp_ckpt, &SkySource::White).unwrap();
    let colors = shade_scene(&scene, &cam, &light, &white, &lut, Default::default()).unwrap();
    let out = render(&scene, &cam, &colors, ColorMode::SkyOnly).unwrap();
    let mut saturated = 0;
    for p in 0..cam.pixel_count() {
        for c in 0..3 {
            assert!((out.color[p * 3 + c] - out.alpha[p]).abs() < 1e-12);
        }
        if out.alpha[p] > 0.9999 {
            saturated += 1;
            assert!(out.color[p * 3..p * 3 + 3].iter().all(|v| (v - 1.0).abs() < 1e-4));
        }
    }
    assert!(saturated > 0);
}

#[test]
fn attribute_maps_ignore_sky_gaussians() {
    let lut = lut();
    let model = common::toy_model(6, 0, 10, 1);
    let cam = common::toy_camera();
    let light = ShCoefficients::constant(4, [0.5; 3]).unwrap();
    let white = ShCoefficients::constant(1, [1.0; 3]).unwrap();
    let r = render_view(&model, &cam, &light, &white, &lut, Default::default()).unwrap();
    assert!(r.alpha.iter().any(|a| *a > 0.5));
    assert!(r.albedo.iter().all(|v| *v == 0.0));
    assert!(r.normal.iter().all(|v| *v == 0.0));
}

#[test]
fn normal_map_of_a_facing_wall_is_the_view_axis() {
    let lut = lut();
    let set = synthetic::build(2, 24, &lut).unwrap();
    let model = splatlight::model::Model {
        scene: set.scene.clone(),
        mlp: splatlight::appearance::AppearanceMlp::new(&mut common::rng(1)),
        embeddings: splatlight::appearance::EmbeddingTable::new(1, &mut common::rng(2)),
    };
    let cam = set.views[2].camera;
    let r = render_view(&model, &cam, &set.test_light, &set.train_skies[0], &lut, Default::default()).unwrap();
    let center = 12 * 24 + 12;
    let a = r.alpha[center];
    assert!(a > 0.95, "{a}");
    // The wall faces −y, so the blended normal (n + 1)/2 is about (0.5, 0, 0.5)·alpha.
    let n: Vec<f64> = r.normal[center * 3..center * 3 + 3].iter().map(|v| v / a).collect();
    assert!((n[0] - 0.5).abs() < 0.01 && n[1] < 0.01 && (n[2] - 0.5).abs() < 0.01, "{n:?}");
    for (a, gt) in r.albedo.iter().zip(&r.color) {
        assert!((0.0..=1.0).contains(a) && gt.is_finite());
    }
    assert!(r.depth[center] > 2.0 && r.depth[center] < 4.0);
}

#[test]
fn envmap_full_turn_relights_identically() {
    let lut = lut();
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = trained(tmp.path(), &lut);
    let map = EquirectMap::from_fn(64, 32, |t, p| {
        let d = UnitDirection::from_spherical(t, p);
        [0.4 + 0.6 * d.z().max(0.0), 0.5 + 0.3 * d.x().abs(), 0.6]
    });
    let white = resolve_sky(&ckpt, &SkySource::White).unwrap();
    let cam = ckpt.cameras[0].1;
    let render_at = |angle: f64| {
        let light = resolve_light(&ckpt, &LightSource::Envmap { map: map.clone(), angle, axis: RotationAxis::Y }).unwrap();
        render_view(&ckpt.state.model, &cam, &light, &white, &lut, ckpt.config.blur).unwrap().color
    };
    let (a, b) = (render_at(0.0), render_at(2.0 * std::f64::consts::PI));
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-3));
    let c = render_at(1.0);
    assert!(a.iter().zip(&c).any(|(x, y)| (x - y).abs() > 1e-3));
}

#[test]
fn unknown_image_ids_are_errors() {
    let lut = lut();
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = trained(tmp.path(), &lut);
    assert!(matches!(
        resolve_light(&ckpt, &LightSource::Trained("nope".into())),
        Err(pipeline::PipelineError::UnknownImage(_))
    ));
    assert!(resolve_sky(&ckpt, &SkySource::Trained("nope".into())).is_err());
}

#[test]
fn evaluation_report_and_pairing() {
    let lut = lut();
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = trained(tmp.path(), &lut);
    let test = tmp.path().join("test");
    let report = evaluate_test_set(&ckpt, &test, &lut).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report, evaluate_test_set(&ckpt, &test, &lut).unwrap());

    // Direct recomputation with the SH light and the exclusion mask.
    let ds = io::load_dataset(&test).unwrap();
    let v = &ds.views[0];
    let light = ShCoefficients::from_text(&io::read_text(&test.join("lights/test.txt")).unwrap()).unwrap();
    let white = ShCoefficients::constant(1, [1.0; 3]).unwrap();
    let r = render_view(&ckpt.state.model, &v.camera, &light, &white, &lut, ckpt.config.blur).unwrap();
    let m = masked_metrics(&r.color, &v.image, v.camera.width, v.camera.height, &v.sky_mask).unwrap();
    assert_eq!(report.rows[0], ("test".to_string(), m));
    assert_eq!(report.average, m);

    let csv = report.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "image_id,psnr,ssim,mse,mae");
    assert!(lines[1].starts_with("test,"));
    assert!(lines[2].starts_with("avg,"));

    std::fs::remove_file(test.join("lights/test.txt")).unwrap();
    let err = evaluate_test_set(&ckpt, &test, &lut).unwrap_err().to_string();
    assert!(err.contains("no light"), "{err}");
}

#[test]
fn training_views_evaluate_with_their_trained_lights() {
    let lut = lut();
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = trained(tmp.path(), &lut);
    let report = evaluate_test_set(&ckpt, &tmp.path().join("train"), &lut).unwrap();
    assert_eq!(report.rows.len(), 12);
    let ids: Vec<&str> = report.rows.iter().map(|(id, _)| id.as_str()).collect();
    assert_eq!(ids, ckpt.image_ids.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(report.rows.iter().all(|(_, m)| m.psnr.is_finite() && m.mse >= 0.0));
}

#[test]
fn empty_test_set_is_an_error() {
    let lut = lut();
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = trained(tmp.path(), &lut);
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    std::fs::write(empty.join("cameras.txt"), "# nothing\n").unwrap();
    assert!(evaluate_test_set(&ckpt, &empty, &lut).is_err());
}

#[test]
fn lut_is_baked_when_missing() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("sub/lut.bin");
    let baked = pipeline::load_or_bake_lut(Some(&p)).unwrap();
    assert!(p.exists());
    assert_eq!(pipeline::load_or_bake_lut(Some(&p)).unwrap(), baked);
}
