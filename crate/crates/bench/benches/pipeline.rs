use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::{Vector2, Vector3};

use skytrack_core::model_fitting::{fit_vehicle, FitConfig, FitInit};
use skytrack_core::pipeline::{reconstruct_scene, PipelineConfig};
use skytrack_core::semantic_map::fixtures::four_way_intersection;
use skytrack_core::state_estimation::EkfConfig;
use skytrack_core::synth::{generate_with_prior, presets, PriorSpec};

fn benches(c: &mut Criterion) {
    let prior = PriorSpec::default().build().unwrap();
    let scene = generate_with_prior(&presets::intersection(2.0), 0, prior.clone()).unwrap();

    let frame = scene.detections.iter().find(|f| !f.detections.is_empty()).unwrap();
    let det = &frame.detections[0];
    let camera = scene.spec.camera.model_at(frame.time(scene.spec.frame_rate));
    let b_t = prior.templates["sedan"].clone();
    let cfg = FitConfig::default();
    c.bench_function("fit_vehicle", |b| {
        b.iter(|| fit_vehicle(black_box(det), &prior, &camera, &b_t, &cfg, FitInit::Auto { previous_heading: None }).unwrap())
    });

    let fit = fit_vehicle(det, &prior, &camera, &b_t, &cfg, FitInit::Auto { previous_heading: None }).unwrap();
    let ekf = EkfConfig::default();
    let state = skytrack_core::EkfState::from_fit(&fit, 2.7, &ekf).unwrap();
    let z = Vector3::new(fit.pose.x + 0.3, fit.pose.y, fit.pose.heading);
    c.bench_function("ekf_predict_update", |b| {
        b.iter(|| state.predict(1.0 / 30.0, &ekf).unwrap().update(black_box(&z), &ekf).unwrap())
    });

    let map = four_way_intersection();
    let points: Vec<Vector2<f64>> = (0..1000).map(|i| Vector2::new((i % 40) as f64 * 3.0 - 60.0, (i / 40) as f64 * 4.8 - 60.0)).collect();
    c.bench_function("map_locate_1000", |b| {
        b.iter(|| points.iter().filter(|p| map.locate(black_box(p)).is_some()).count())
    });

    let stationary = generate_with_prior(&presets::stationary(1.0), 0, prior.clone()).unwrap();
    let pipeline = PipelineConfig::default();
    let mut group = c.benchmark_group("reconstruct");
    group.sample_size(10);
    group.bench_function("stationary_scene", |b| b.iter(|| reconstruct_scene(black_box(&stationary), &pipeline).unwrap()));
    group.bench_function("intersection_scene", |b| b.iter(|| reconstruct_scene(black_box(&scene), &pipeline).unwrap()));
    group.finish();
}

criterion_group!(pipeline, benches);
criterion_main!(pipeline);
