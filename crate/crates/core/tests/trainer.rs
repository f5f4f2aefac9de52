use std::time::Instant;

use sparseseg::annotations::{rasterize, AnnotationKind, LabelMap};
use sparseseg::festa::FestaConfig;
use sparseseg::model::{image_to_tensor, init_weights, ModelConfig};
use sparseseg::synth::{generate_scene, simulate_scribbles, SceneSpec, ScribblePolicy};
use sparseseg::trainer::{mean_cross_entropy, train, train_from, Sample, TrainConfig};
use sparseseg::Error;

fn scribbled(spec: &SceneSpec, level: AnnotationKind) -> Sample {
    let scene = generate_scene(spec).unwrap();
    let policy = ScribblePolicy::new(level, spec.seed);
    let ann = simulate_scribbles(&scene.labels, spec.num_classes, &policy).unwrap();
    let labels = rasterize(&ann.annotations, spec.height, spec.width, spec.num_classes, policy.dilation_radius)
        .unwrap()
        .labels;
    Sample::new(image_to_tensor(&scene.image), labels).unwrap()
}

fn small_spec(seed: u64) -> SceneSpec {
    SceneSpec { seed, height: 64, width: 64, num_classes: 3, min_region: 50, ..Default::default() }
}

fn no_festa() -> FestaConfig {
    FestaConfig { lambda: 0.0, ..Default::default() }
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let s = scribbled(&small_spec(1), AnnotationKind::Line);
    let model = ModelConfig::new(3);
    let cfg = TrainConfig { lr: 0.0, max_steps: 3, batch_size: 2, ..Default::default() };
    let out = train(&[s], &[], &model, &no_festa(), &cfg).unwrap();
    assert_eq!(out.weights, init_weights(&model, cfg.seed).unwrap());
    assert_eq!(out.history.len(), 3);
}

#[test]
fn same_seed_same_history() {
    let s = scribbled(&small_spec(2), AnnotationKind::Line);
    let v = scribbled(&small_spec(3), AnnotationKind::Line);
    let model = ModelConfig::new(3);
    let cfg = TrainConfig { max_steps: 4, batch_size: 2, eval_every: 2, lr: 1e-3, seed: 9, ..Default::default() };
    let a = train(std::slice::from_ref(&s), std::slice::from_ref(&v), &model, &FestaConfig::default(), &cfg).unwrap();
    let b = train(&[s], &[v], &model, &FestaConfig::default(), &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.weights, b.weights);
    assert!(a.history[1].val_loss.is_some() && a.history[0].val_loss.is_none());
}

#[test]
fn learning_rate_decays_at_most_twice() {
    let s = scribbled(&small_spec(4), AnnotationKind::Polygon);
    let model = ModelConfig::new(3);
    let cfg = TrainConfig {
        lr: 1e-12,
        max_steps: 6,
        batch_size: 1,
        eval_every: 1,
        plateau_patience: 1,
        ..Default::default()
    };
    let out = train(std::slice::from_ref(&s), std::slice::from_ref(&s), &model, &no_festa(), &cfg).unwrap();
    let lrs: Vec<f64> = out.history.iter().map(|r| r.lr).collect();
    assert_eq!(lrs, vec![1e-12, 1e-13, 1e-14, 1e-14, 1e-14, 1e-14]);
    assert!((lrs[5] - cfg.lr / 100.0).abs() < 1e-26);
}

#[test]
fn unlabeled_samples_do_not_change_training() {
    let s = scribbled(&small_spec(5), AnnotationKind::Point);
    let blank = Sample::new(s.image.clone(), LabelMap::unlabeled(64, 64)).unwrap();
    let model = ModelConfig::new(3);
    let cfg = TrainConfig { max_steps: 3, batch_size: 2, lr: 1e-3, ..Default::default() };
    let a = train(std::slice::from_ref(&s), &[], &model, &no_festa(), &cfg).unwrap();
    let b = train(&[blank.clone(), s], &[], &model, &no_festa(), &cfg).unwrap();
    assert_eq!(a.history, b.history);
    let err = train(&[blank], &[], &model, &no_festa(), &cfg).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
}

#[test]
fn smoke_training_lowers_cross_entropy() {
    let spec = SceneSpec { seed: 11, ..Default::default() };
    let s = scribbled(&spec, AnnotationKind::Line);
    let model = ModelConfig::new(spec.num_classes);
    let cfg = TrainConfig { seed: 11, ..Default::default() };
    let init = init_weights(&model, cfg.seed).unwrap();
    let before = mean_cross_entropy(&init, std::slice::from_ref(&s), &cfg, None).unwrap();
    let start = Instant::now();
    let out = train_from(init, std::slice::from_ref(&s), &[], &no_festa(), &cfg).unwrap();
    let elapsed = start.elapsed();
    let after = mean_cross_entropy(&out.weights, &[s], &cfg, None).unwrap();
    println!("{} steps in {elapsed:?}: CE {before:.4} -> {after:.4}", cfg.max_steps);
    assert!(after < before);
}
