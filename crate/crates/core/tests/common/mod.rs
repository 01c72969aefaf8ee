#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use dendrite::data::{fetch_mnist, load_mnist, mnist_present, TaskData};
use dendrite::models::{cnn_trunk, stream_rng, DendriticLayer, Head, Layer, Model};
use dendrite::sparse::{pack, Backend, CompiledTree, SparseTree};
use dendrite::tensor::{self, no_grad, Element, Tensor};
use dendrite::tree::{density_gain_init, MaskedTree, LEAKY_SLOPE};
use dendrite::TreePlan;
use rand::Rng;

/// Finite-difference step for whole models, where the loss sums many terms.
pub const H_MODEL: f64 = 1e-5;

/// Uniform values in `[lo, hi)` from `(seed, stream)`.
pub fn uniform(n: usize, lo: f64, hi: f64, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, stream);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn param(shape: &[usize], seed: u64, stream: u64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::parameter(uniform(n, -1.0, 1.0, seed, stream), shape).unwrap()
}

/// `sum(y * r)` for a fixed random `r`, turning any output into a scalar
/// with a non-trivial upstream gradient.
pub fn project(y: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let r = Tensor::new(uniform(y.numel(), -1.0, 1.0, seed, 99), y.shape()).unwrap();
    tensor::sum(&tensor::mul(y, &r).unwrap())
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Largest relative error between autograd and central differences over
/// every element of every tensor in `wrt`.
pub fn gradcheck(wrt: &[Tensor<f64>], f: &mut dyn FnMut() -> Tensor<f64>, h: f64) -> f64 {
    for t in wrt {
        t.zero_grad();
    }
    f().backward().unwrap();
    let analytic: Vec<Vec<f64>> = wrt
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let mut worst = 0.0f64;
    for (t, a) in wrt.iter().zip(&analytic) {
        for (k, &ak) in a.iter().enumerate() {
            let orig = t.data()[k];
            t.data_mut()[k] = orig + h;
            let up = no_grad(|| f().item());
            t.data_mut()[k] = orig - h;
            let down = no_grad(|| f().item());
            t.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(ak, numeric, 1e-6));
        }
    }
    worst
}

/// Workspace MNIST directory, or `$MNIST_DIR`.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

/// Loads MNIST, downloading it when missing. `None` if unavailable.
pub fn mnist() -> Option<TaskData> {
    let dir = mnist_dir();
    if !mnist_present(&dir) {
        if let Err(e) = fetch_mnist(&dir) {
            eprintln!("MNIST unavailable ({e}); skipping");
            return None;
        }
    }
    Some(load_mnist(&dir, false).expect("MNIST files load"))
}

pub fn model_check(model: &mut Model<f64>, x: &Tensor<f64>, labels: &[usize], seed: u64) -> f64 {
    let params: Vec<Tensor<f64>> = model.parameters().into_iter().map(|(_, p)| p).collect();
    for (i, (name, p)) in model.parameters().iter().enumerate() {
        if !name.ends_with("weight") {
            let shift = uniform(p.numel(), -0.1, 0.1, seed, 100 + i as u64);
            p.data_mut().iter_mut().zip(shift).for_each(|(v, d)| *v += d);
        }
    }
    let mut f = || {
        let logits = model.forward(x).unwrap();
        model.loss(&logits, labels).unwrap()
    };
    gradcheck(&params, &mut f, H_MODEL)
}

/// Worst gradcheck error of a 16-input, 2-neuron, b=4 tree model.
pub fn tiny_mln_error(seed: u64, backend: Backend) -> f64 {
    let mut rng = stream_rng(seed, 1);
    let layers = vec![
        ("flatten".to_string(), Layer::Flatten),
        ("tile".to_string(), Layer::Tile(2)),
        (
            "dendritic".to_string(),
            Layer::Dendritic(DendriticLayer::new(TreePlan::repeated(16, 2, 4).unwrap(), backend, &mut rng).unwrap()),
        ),
    ];
    let mut m = Model::from_layers(layers, Head::Softmax, &[1, 4, 4], seed);
    let x = Tensor::new(uniform(5 * 16, 0.0, 1.0, seed, 2), &[5, 1, 4, 4]).unwrap();
    model_check(&mut m, &x, &[0, 1, 1, 0, 1], seed)
}

/// Worst gradcheck error of a conv/BN/pool stack with 2 filters on 8x8
/// inputs feeding two b=2 trees.
pub fn tiny_conv_mln_error(seed: u64) -> f64 {
    let mut rng = stream_rng(seed, 1);
    let mut layers = cnn_trunk::<f64, _>(1, &[2], &mut rng).unwrap();
    layers.push(("tile".into(), Layer::Tile(2)));
    layers.push((
        "dendritic".into(),
        Layer::Dendritic(DendriticLayer::new(TreePlan::repeated(32, 2, 2).unwrap(), Backend::Sparse, &mut rng).unwrap()),
    ));
    let mut m = Model::from_layers(layers, Head::Softmax, &[1, 8, 8], seed);
    let x = Tensor::new(uniform(4 * 64, 0.0, 1.0, seed, 2), &[4, 1, 8, 8]).unwrap();
    model_check(&mut m, &x, &[0, 1, 0, 1], seed)
}

pub fn max_diff<T: Element>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (*x - *y).abs().as_f64()).fold(0.0, f64::max)
}

/// Runs the same forward and backward on the masked reference, the
/// autograd sparse tree and the compiled tree; returns the largest
/// absolute difference seen.
pub fn compare<T: Element>((b, depth, outputs, batch, seed): (usize, usize, usize, usize, u64)) -> f64 {
    let plan = Arc::new(TreePlan::repeated(b.pow(depth as u32), outputs, b).unwrap());
    let mut rng = stream_rng(seed, 1);
    let params = density_gain_init::<T, _>(&plan, &mut rng);
    let xs: Vec<T> = (0..batch * plan.inputs()).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
    let up: Vec<T> = (0..batch * outputs).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
    let upstream = Tensor::new(up, &[batch, outputs]).unwrap();
    let slope = T::lit(LEAKY_SLOPE);

    let x_ref = Tensor::parameter(xs.clone(), &[batch, plan.inputs()]).unwrap();
    let reference = MaskedTree::new(Arc::clone(&plan), &params).unwrap();
    let y_ref = reference.forward(&x_ref, slope).unwrap();
    tensor::sum(&tensor::mul(&y_ref, &upstream).unwrap()).backward().unwrap();

    let x_sp = Tensor::parameter(xs.clone(), &[batch, plan.inputs()]).unwrap();
    let sparse = SparseTree::new(Arc::clone(&plan), &pack(&plan, &params).unwrap()).unwrap();
    let y_sp = sparse.forward(&x_sp, slope).unwrap();
    tensor::sum(&tensor::mul(&y_sp, &upstream).unwrap()).backward().unwrap();

    let mut compiled = CompiledTree::compile(Arc::clone(&plan), &params, slope).unwrap();
    let y_c = compiled.forward(&Tensor::new(xs, &[batch, plan.inputs()]).unwrap()).unwrap();
    let grads = compiled.backward(&upstream).unwrap();

    let mut worst = 0.0f64;
    worst = worst.max(max_diff(&y_ref.to_vec(), &y_sp.to_vec()));
    worst = worst.max(max_diff(&y_ref.to_vec(), &y_c.to_vec()));
    let gx = x_ref.grad().unwrap();
    worst = worst.max(max_diff(&gx, &x_sp.grad().unwrap()));
    worst = worst.max(max_diff(&gx, &grads.input));
    for (i, d) in plan.layers().iter().enumerate() {
        let dense = reference.weights[i].grad().unwrap();
        let mask = plan.mask(i);
        let mut unmasked = Vec::with_capacity(d.out_units * b);
        for j in 0..d.out_units {
            for k in plan.children(i, j) {
                unmasked.push(dense[j * d.in_units + k]);
            }
            for k in 0..d.in_units {
                if !mask.get(j, k) {
                    assert_eq!(dense[j * d.in_units + k], T::zero(), "masked gradient leaked");
                }
            }
        }
        worst = worst.max(max_diff(&unmasked, &sparse.weights[i].grad().unwrap()));
        worst = worst.max(max_diff(&unmasked, &grads.weights[i]));
        let db = reference.biases[i].grad().unwrap();
        worst = worst.max(max_diff(&db, &sparse.biases[i].grad().unwrap()));
        worst = worst.max(max_diff(&db, &grads.biases[i]));
    }
    worst
}

