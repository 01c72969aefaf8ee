//! Parameter goldens, learnability smoke tests and eval-mode invariants of
//! the model families.

mod common;

use common::uniform;
use dendrite::models::{Family, Model, ModelSpec};
use dendrite::results::reference_tables;
use dendrite::sparse::Backend;
use dendrite::tensor::Tensor;
use dendrite::train::{evaluate, AdamState};
use dendrite::tree::ParamCount;
use dendrite::count_parameters;

/// Rows whose published bias count disagrees with the closed form.
const INCONSISTENT: [(Family, usize); 2] = [(Family::MlnBinary, 4), (Family::MlnMulti, 4)];

#[test]
fn parameter_tables() {
    for row in &reference_tables().parameters {
        let spec = ModelSpec::new(row.family, row.width, 0.0);
        let model = Model::<f32>::build(&spec, 0, Backend::Sparse).unwrap();
        let realized = model.classifier_parameter_count();
        assert_eq!(realized, spec.classifier_parameters().unwrap());
        let published = ParamCount::new(row.weights, row.biases);
        if INCONSISTENT.contains(&(row.family, row.width)) {
            assert_eq!(realized.weights, row.weights);
            assert_ne!(realized, published);
        } else {
            assert_eq!(realized, published, "{spec}");
            assert_eq!(row.total, realized.total);
        }
    }
    assert_eq!(count_parameters(1024, 1, 4).unwrap(), ParamCount::new(1364, 341));
    assert_eq!(count_parameters(1024, 10, 4).unwrap(), ParamCount::new(13640, 3410));
}

#[test]
fn reference_backend_allocates_the_same_counts() {
    for spec in [ModelSpec::MlnBinary { b: 2, p: 0.0 }, ModelSpec::MlnMulti { b: 32, p: 0.0 }, ModelSpec::ConvMln { b: 4, p: 0.0 }] {
        let a = Model::<f32>::build(&spec, 0, Backend::Reference).unwrap();
        let b = Model::<f32>::build(&spec, 0, Backend::Sparse).unwrap();
        assert_eq!(a.parameter_count(), b.parameter_count());
    }
}

fn toy_batch(binary: bool) -> (Tensor<f32>, Vec<usize>) {
    let data: Vec<f32> = uniform(8 * 1024, 0.0, 1.0, 11, 1).into_iter().map(|v| v as f32).collect();
    let labels = (0..8).map(|i| if binary { i % 2 } else { i }).collect();
    (Tensor::new(data, &[8, 1, 32, 32]).unwrap(), labels)
}

/// 200 Adam steps on 8 fixed examples must fit them exactly.
fn overfits(spec: ModelSpec) {
    let mut model = Model::<f32>::build(&spec, 1, Backend::Sparse).unwrap();
    let params: Vec<_> = model.parameters().into_iter().map(|(_, p)| p).collect();
    let mut adam = AdamState::for_params(&params);
    let (x, labels) = toy_batch(spec.task().is_binary());
    let lr = spec.family().default_learning_rate();
    for _ in 0..200 {
        model.train();
        model.zero_grad();
        let logits = model.forward(&x).unwrap();
        model.loss(&logits, &labels).unwrap().backward().unwrap();
        adam.step(&params, lr).unwrap();
    }
    model.eval();
    assert_eq!(model.classify(&x).unwrap(), labels, "{spec} did not fit 8 examples");
}

#[test]
fn binary_families_overfit() {
    for b in [2, 4, 32] {
        overfits(ModelSpec::MlnBinary { b, p: 0.0 });
    }
    for h in [2, 3] {
        overfits(ModelSpec::MlpBinary { h, p: 0.0 });
    }
}

#[test]
fn multiclass_families_overfit() {
    for b in [2, 4, 32] {
        overfits(ModelSpec::MlnMulti { b, p: 0.0 });
    }
    for h in [11, 14, 30] {
        overfits(ModelSpec::MlpMulti { h, p: 0.0 });
    }
}

#[test]
fn conv_families_overfit() {
    for b in [2, 4, 16] {
        overfits(ModelSpec::ConvMln { b, p: 0.0 });
    }
    for h in [11, 16, 29] {
        overfits(ModelSpec::ConvMlp { h, p: 0.0 });
    }
}

#[test]
fn eval_ignores_dropout_and_batch_order() {
    let px: Vec<u8> = uniform(40 * 1024, 0.0, 256.0, 3, 1).into_iter().map(|v| v as u8).collect();
    let labels: Vec<usize> = (0..40).map(|i| i % 10).collect();
    let ds = dendrite::data::Dataset::new(px, labels, dendrite::data::Split::Val, dendrite::data::ClassMapping::Identity).unwrap();
    for family in [Family::MlnMulti, Family::MlpMulti, Family::ConvMln] {
        let width = match family {
            Family::MlpMulti => 11,
            Family::ConvMln => 16,
            _ => 32,
        };
        let mut plain = Model::<f32>::build(&ModelSpec::new(family, width, 0.0), 4, Backend::Sparse).unwrap();
        let mut dropped = Model::<f32>::build(&ModelSpec::new(family, width, 0.5), 4, Backend::Sparse).unwrap();
        let (l1, a1) = evaluate(&mut plain, &ds, 128).unwrap();
        let (l2, a2) = evaluate(&mut dropped, &ds, 7).unwrap();
        assert_eq!(a1, a2, "{family}");
        assert!((l1 - l2).abs() < 1e-6, "{family}: {l1} vs {l2}");
    }
}

#[test]
fn predictions_are_probabilities() {
    let (x, _) = toy_batch(true);
    let mut m = Model::<f32>::build(&ModelSpec::MlnBinary { b: 32, p: 0.0 }, 0, Backend::Reference).unwrap();
    let p = m.predict(&x).unwrap();
    assert_eq!(p.shape(), &[8, 1]);
    assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let mut m = Model::<f32>::build(&ModelSpec::ConvMlp { h: 11, p: 0.0 }, 0, Backend::Reference).unwrap();
    m.eval();
    let p = m.predict(&x).unwrap();
    assert_eq!(p.shape(), &[8, 10]);
}

/// Variance of the first layer's pre-activations on random images.
fn first_layer_variance(spec: ModelSpec) -> f64 {
    let model = Model::<f64>::build(&spec, 9, Backend::Sparse).unwrap();
    let (name, w) = model.parameters().into_iter().next().unwrap();
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let w = w.to_vec();
    let xs = uniform(32 * 1024, 0.0, 1.0, 21, 1);
    let mut pre = Vec::new();
    for x in xs.chunks(1024) {
        for j in 0..rows {
            let input = |k: usize| if name.starts_with("dendritic") { x[(j * cols + k) % 1024] } else { x[k] };
            pre.push((0..cols).map(|k| w[j * cols + k] * input(k)).sum::<f64>());
        }
    }
    let n = pre.len() as f64;
    let mean = pre.iter().sum::<f64>() / n;
    pre.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

#[test]
fn initial_preactivation_scale_matches_control() {
    let pairs = [
        (ModelSpec::MlnBinary { b: 2, p: 0.0 }, ModelSpec::MlpBinary { h: 2, p: 0.0 }),
        (ModelSpec::MlnBinary { b: 32, p: 0.0 }, ModelSpec::MlpBinary { h: 3, p: 0.0 }),
        (ModelSpec::MlnMulti { b: 32, p: 0.0 }, ModelSpec::MlpMulti { h: 30, p: 0.0 }),
    ];
    for (tree, mlp) in pairs {
        let (a, b) = (first_layer_variance(tree), first_layer_variance(mlp));
        let ratio = a / b;
        assert!((1.0 / 3.0..=3.0).contains(&ratio), "{tree} {a} vs {mlp} {b}");
    }
}
