//! Trainer behaviour on small synthetic datasets.

mod common;

use common::uniform;
use dendrite::data::{ClassMapping, Dataset, Split, TaskData};
use dendrite::models::{Model, ModelSpec};
use dendrite::sparse::Backend;
use dendrite::tensor::Tensor;
use dendrite::train::{aggregate, best_epoch, run_trials, select_dropout, train_trial, AdamState, Stat, TrainConfig};
use proptest::prelude::*;

/// Images whose mean brightness depends on the label, so the task is
/// learnable but not trivial.
fn synthetic(n: usize, classes: usize, split: Split, seed: u64) -> Dataset {
    let noise = uniform(n * 1024, 0.0, 128.0, seed, 1);
    let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % classes).collect();
    let pixels = noise
        .chunks(1024)
        .zip(&labels)
        .flat_map(|(img, &l)| img.iter().map(move |&v| (v + 12.0 * l as f64) as u8))
        .collect();
    let mapping = if classes == 2 { ClassMapping::FourNine } else { ClassMapping::Identity };
    Dataset::new(pixels, labels, split, mapping).unwrap()
}

fn task(classes: usize) -> TaskData {
    TaskData {
        train: synthetic(96, classes, Split::Train, 1),
        val: synthetic(40, classes, Split::Val, 2),
    }
}

fn config(spec: ModelSpec, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::new(spec);
    c.epochs = epochs;
    c.batch = 16;
    c.trials = 2;
    c.backend = Backend::Sparse;
    c
}

#[test]
fn repeated_trials_are_identical() {
    let data = task(10);
    let c = config(ModelSpec::MlnMulti { b: 32, p: 0.3 }, 2);
    let a = run_trials(&c, &data).unwrap();
    let b = run_trials(&c, &data).unwrap();
    assert_eq!(a.len(), 2);
    for (x, y) in a.iter().zip(&b) {
        assert!(x.same_results(y));
    }
    assert_eq!((a[0].seed, a[1].seed), (0, 1));
    assert!(!a[0].same_results(&a[1]));
}

#[test]
fn seeds_offset_by_base_seed() {
    let data = task(2);
    let mut c = config(ModelSpec::MlnBinary { b: 32, p: 0.0 }, 1);
    c.base_seed = 10;
    let r = train_trial(&c, &data, 3).unwrap();
    assert_eq!(r.seed, 13);
    assert_eq!(r.params.total, 1089);
}

#[test]
fn masked_weights_stay_zero_on_reference_backend() {
    let spec = ModelSpec::MlnBinary { b: 4, p: 0.0 };
    let mut model = Model::<f32>::build(&spec, 5, Backend::Reference).unwrap();
    let params: Vec<Tensor<f32>> = model.parameters().into_iter().map(|(_, p)| p).collect();
    let mut adam = AdamState::for_params(&params);
    let data = task(2).train;
    let x = data.tensor::<f32>(&(0..32).collect::<Vec<_>>());
    let labels = data.labels()[..32].to_vec();
    model.train();
    for _ in 0..100 {
        model.zero_grad();
        let logits = model.forward(&x).unwrap();
        model.loss(&logits, &labels).unwrap().backward().unwrap();
        adam.step(&params, 0.05).unwrap();
    }
    let layer = model.dendritic_layers().next().unwrap();
    let plan = layer.plan().clone();
    for (i, w) in layer.weights().iter().enumerate() {
        let m = plan.mask(i);
        let w = w.to_vec();
        let mut moved = 0;
        for r in 0..m.rows {
            for c in 0..m.cols {
                let v = w[r * m.cols + c];
                if m.get(r, c) {
                    moved += usize::from(v != 0.0);
                } else {
                    assert_eq!(v, 0.0, "layer {i} ({r}, {c})");
                }
            }
        }
        assert!(moved > 0);
    }
}

#[test]
fn backends_train_alike() {
    let data = task(2);
    let mut c = config(ModelSpec::MlnBinary { b: 4, p: 0.2 }, 3);
    let sparse = train_trial(&c, &data, 0).unwrap();
    c.backend = Backend::Reference;
    let reference = train_trial(&c, &data, 0).unwrap();
    assert_eq!(sparse.params, reference.params);
    for (s, r) in sparse.epochs.iter().zip(&reference.epochs) {
        assert!((s.train_loss - r.train_loss).abs() < 1e-4, "{s:?} vs {r:?}");
        assert!((s.val_loss - r.val_loss).abs() < 1e-4, "{s:?} vs {r:?}");
    }
}

#[test]
fn grad_probe_covers_every_tree_layer() {
    let data = task(10);
    let mut c = config(ModelSpec::MlnMulti { b: 2, p: 0.0 }, 1);
    c.grad_probe = true;
    let r = train_trial(&c, &data, 0).unwrap();
    let norms = r.epochs[0].grad_norms.as_ref().unwrap();
    assert_eq!(norms.len(), 10);
    assert!(norms.iter().all(|n| n.is_finite() && *n > 0.0), "{norms:?}");
}

#[test]
fn divergence_marks_trial_failed() {
    let data = task(2);
    let mut c = config(ModelSpec::MlpBinary { h: 2, p: 0.0 }, 3);
    c.learning_rate = Some(1e38);
    let r = train_trial(&c, &data, 0).unwrap();
    assert!(!r.succeeded());
    assert_eq!(r.best_epoch, None);
    assert!(aggregate(&[r]).is_err());
}

#[test]
fn summary_uses_best_epochs() {
    let data = task(2);
    let c = config(ModelSpec::MlnBinary { b: 32, p: 0.0 }, 4);
    let reports = run_trials(&c, &data).unwrap();
    let s = aggregate(&reports).unwrap();
    let accs: Vec<f64> = reports.iter().map(|r| r.best().unwrap().val_acc).collect();
    assert_eq!(s.val_acc, Stat::of(&accs));
    for r in &reports {
        let losses: Vec<f64> = r.epochs.iter().map(|e| e.val_loss).collect();
        assert_eq!(r.best_epoch, best_epoch(&losses));
    }
    let choice = select_dropout(&[s.clone(), s]).unwrap();
    assert_eq!(choice.by_val_acc, 0);
}

#[test]
fn sample_std() {
    let s = Stat::of(&[0.90, 0.92, 0.94]);
    assert!((s.mean - 0.92).abs() < 1e-12);
    assert!((s.std - 0.02).abs() < 1e-12);
    assert_eq!(Stat::of(&[0.5]).std, 0.0);
}

proptest! {
    #[test]
    fn best_epoch_matches_brute_force(losses in prop::collection::vec(prop_oneof![0.0f64..2.0, Just(1.0)], 1..40)) {
        let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
        let expected = losses.iter().position(|&l| l == min);
        prop_assert_eq!(best_epoch(&losses), expected);
    }
}
