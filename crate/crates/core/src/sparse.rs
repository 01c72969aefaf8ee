//! Tree-exploiting execution of dendritic layers.
//!
//! Only the `b` unmasked weights of each unit are stored (packed `out x b`,
//! row `j` holding the weights of children `j*b .. j*b + b`). Forward and
//! backward visit children in ascending order, so results match the
//! masked-dense reference accumulation order exactly.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Element, Tensor};
use crate::tree::{density_gain_weights, DendriticParams, LayerParams, TreePlan};

/// Execution strategy for dendritic layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Full weight matrices multiplied by their masks.
    #[default]
    Reference,
    /// Packed per-unit weights with gather-style evaluation.
    Sparse,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Reference => "reference",
            Backend::Sparse => "sparse",
        })
    }
}

impl FromStr for Backend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Backend::Reference),
            "sparse" => Ok(Backend::Sparse),
            other => Err(Error::config("backend", format!("unknown backend {other:?}"))),
        }
    }
}

/// Calls `$f::<B>` for the common branching factors and `$f::<0>` (runtime
/// width) otherwise.
macro_rules! dispatch_b {
    ($b:expr, $f:ident($($arg:expr),* $(,)?)) => {
        match $b {
            2 => $f::<T, 2>($($arg),*),
            4 => $f::<T, 4>($($arg),*),
            8 => $f::<T, 8>($($arg),*),
            16 => $f::<T, 16>($($arg),*),
            32 => $f::<T, 32>($($arg),*),
            _ => $f::<T, 0>($($arg),*),
        }
    };
}

/// Forward kernel for one tree layer over a batch of `n` rows.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_forward<T: Element>(
    x: &[T],
    n: usize,
    in_units: usize,
    b: usize,
    weights: &[T],
    bias: &[T],
    slope: T,
    pre: &mut [T],
    out: &mut [T],
) {
    dispatch_b!(b, forward_kernel(x, n, in_units, b, weights, bias, slope, pre, out))
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn forward_kernel<T: Element, const B: usize>(
    x: &[T],
    n: usize,
    in_units: usize,
    b: usize,
    weights: &[T],
    bias: &[T],
    slope: T,
    pre: &mut [T],
    out: &mut [T],
) {
    let b = if B == 0 { b } else { B };
    let out_units = in_units / b;
    let x = &x[..n * in_units];
    for ((xr, pr), or) in x
        .chunks_exact(in_units)
        .zip(pre.chunks_exact_mut(out_units))
        .zip(out.chunks_exact_mut(out_units))
    {
        for ((p, o), ((xc, wc), &bj)) in pr
            .iter_mut()
            .zip(or.iter_mut())
            .zip(xr.chunks_exact(b).zip(weights.chunks_exact(b)).zip(bias))
        {
            let mut acc = T::zero();
            for k in 0..b {
                acc = acc + xc[k] * wc[k];
            }
            let v = acc + bj;
            *p = v;
            *o = if v > T::zero() { v } else { slope * v };
        }
    }
}

/// Backward kernel: accumulates into `dw` and `dbias`, overwrites `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_backward<T: Element>(
    x: &[T],
    n: usize,
    in_units: usize,
    b: usize,
    weights: &[T],
    pre: &[T],
    slope: T,
    dy: &[T],
    dw: &mut [T],
    dbias: &mut [T],
    dx: Option<&mut [T]>,
) {
    dispatch_b!(b, backward_kernel(x, n, in_units, b, weights, pre, slope, dy, dw, dbias, dx))
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn backward_kernel<T: Element, const B: usize>(
    x: &[T],
    n: usize,
    in_units: usize,
    b: usize,
    weights: &[T],
    pre: &[T],
    slope: T,
    dy: &[T],
    dw: &mut [T],
    dbias: &mut [T],
    mut dx: Option<&mut [T]>,
) {
    let b = if B == 0 { b } else { B };
    let out_units = in_units / b;
    let g: Vec<T> = dy[..n * out_units]
        .iter()
        .zip(pre)
        .map(|(&d, &p)| if p > T::zero() { d } else { slope * d })
        .collect();
    for (s, gr) in g.chunks_exact(out_units).enumerate() {
        let xr = &x[s * in_units..(s + 1) * in_units];
        for ((db, &gj), (dwc, xc)) in dbias
            .iter_mut()
            .zip(gr)
            .zip(dw.chunks_exact_mut(b).zip(xr.chunks_exact(b)))
        {
            *db = *db + gj;
            for k in 0..b {
                dwc[k] = dwc[k] + gj * xc[k];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxr = &mut dx[s * in_units..(s + 1) * in_units];
            for ((dxc, wc), &gj) in dxr.chunks_exact_mut(b).zip(weights.chunks_exact(b)).zip(gr) {
                for k in 0..b {
                    dxc[k] = gj * wc[k];
                }
            }
        }
    }
}

/// One packed tree layer as a differentiable operation:
/// `x: [N, out*b]`, `weights: [out, b]`, `bias: [out]` -> `[N, out]`.
pub fn tree_layer<T: Element>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    slope: T,
) -> Result<Tensor<T>> {
    let (&[n, in_units], &[out_units, b]) = (x.shape(), weights.shape()) else {
        return Err(Error::dim(
            "tree_layer",
            format!("input {:?}, packed weights {:?}", x.shape(), weights.shape()),
        ));
    };
    if out_units * b != in_units || bias.numel() != out_units {
        return Err(Error::dim(
            "tree_layer",
            format!(
                "input {:?}, packed weights {:?}, bias {:?}",
                x.shape(),
                weights.shape(),
                bias.shape()
            ),
        ));
    }
    let mut pre = vec![T::zero(); n * out_units];
    let mut out = vec![T::zero(); n * out_units];
    layer_forward(
        &x.data(),
        n,
        in_units,
        b,
        &weights.data(),
        &bias.data(),
        slope,
        &mut pre,
        &mut out,
    );
    Ok(Tensor::from_op(
        out,
        vec![n, out_units],
        "tree_layer",
        vec![x.clone(), weights.clone(), bias.clone()],
        Box::new(move |g, _, inputs| {
            let (x, w, bias) = (&inputs[0], &inputs[1], &inputs[2]);
            let mut dw = vec![T::zero(); out_units * b];
            let mut db = vec![T::zero(); out_units];
            let mut dx = x.requires_grad().then(|| vec![T::zero(); n * in_units]);
            layer_backward(
                &x.data(),
                n,
                in_units,
                b,
                &w.data(),
                &pre,
                slope,
                g,
                &mut dw,
                &mut db,
                dx.as_deref_mut(),
            );
            w.accumulate_grad(&dw);
            bias.accumulate_grad(&db);
            if let Some(dx) = dx {
                x.accumulate_grad(&dx);
            }
        }),
    ))
}

/// Packed weights (`out x b`) and biases of one tree layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedLayer<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// Extracts the unmasked weights of dense reference parameters.
pub fn pack<T: Element>(plan: &TreePlan, params: &DendriticParams<T>) -> Result<Vec<PackedLayer<T>>> {
    params.check(plan)?;
    let b = plan.branching();
    Ok(params
        .layers
        .iter()
        .zip(plan.layers())
        .map(|(p, d)| {
            let mut weights = Vec::with_capacity(d.out_units * b);
            for j in 0..d.out_units {
                let row = &p.weight[j * d.in_units..(j + 1) * d.in_units];
                weights.extend_from_slice(&row[j * b..(j + 1) * b]);
            }
            PackedLayer {
                weights,
                bias: p.bias.clone(),
            }
        })
        .collect())
}

/// Scatters packed weights back into dense masked matrices.
pub fn unpack<T: Element>(plan: &TreePlan, layers: &[PackedLayer<T>]) -> Result<DendriticParams<T>> {
    check_packed(plan, layers)?;
    let b = plan.branching();
    let layers = layers
        .iter()
        .zip(plan.layers())
        .map(|(p, d)| {
            let mut weight = vec![T::zero(); d.out_units * d.in_units];
            for j in 0..d.out_units {
                weight[j * d.in_units + j * b..j * d.in_units + (j + 1) * b]
                    .copy_from_slice(&p.weights[j * b..(j + 1) * b]);
            }
            LayerParams {
                weight,
                bias: p.bias.clone(),
            }
        })
        .collect();
    Ok(DendriticParams { layers })
}

fn check_packed<T>(plan: &TreePlan, layers: &[PackedLayer<T>]) -> Result<()> {
    if layers.len() != plan.depth() {
        return Err(Error::Inconsistent(format!(
            "{} packed layers for a depth-{} plan",
            layers.len(),
            plan.depth()
        )));
    }
    for (i, (p, d)) in layers.iter().zip(plan.layers()).enumerate() {
        if p.weights.len() != d.out_units * plan.branching() || p.bias.len() != d.out_units {
            return Err(Error::Inconsistent(format!(
                "packed layer {i}: {} weights / {} biases for {} units of branching {}",
                p.weights.len(),
                p.bias.len(),
                d.out_units,
                plan.branching()
            )));
        }
    }
    Ok(())
}

/// Density-gain initialization drawn directly in packed layout. Consumes the
/// RNG identically to [`crate::tree::density_gain_init`].
pub fn packed_init<T: Element, R: Rng + ?Sized>(plan: &TreePlan, rng: &mut R) -> Vec<PackedLayer<T>> {
    (0..plan.depth())
        .map(|i| PackedLayer {
            weights: density_gain_weights(plan, i, rng),
            bias: vec![T::zero(); plan.layers()[i].out_units],
        })
        .collect()
}

struct ForwardCache<T> {
    batch: usize,
    /// Input to each layer; entry 0 is the network input.
    activations: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
}

/// Gradients produced by [`CompiledTree::backward`], in packed layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrads<T> {
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
    pub input: Vec<T>,
}

/// A tree ready for standalone sparse evaluation, with scratch space for
/// the activations of the most recent forward pass.
pub struct CompiledTree<T: Element> {
    plan: Arc<TreePlan>,
    layers: Vec<PackedLayer<T>>,
    slope: T,
    cache: Option<ForwardCache<T>>,
}

impl<T: Element> CompiledTree<T> {
    pub fn compile(plan: Arc<TreePlan>, params: &DendriticParams<T>, slope: T) -> Result<Self> {
        let layers = pack(&plan, params)?;
        Ok(Self {
            plan,
            layers,
            slope,
            cache: None,
        })
    }

    pub fn from_packed(plan: Arc<TreePlan>, layers: Vec<PackedLayer<T>>, slope: T) -> Result<Self> {
        check_packed(&plan, &layers)?;
        Ok(Self {
            plan,
            layers,
            slope,
            cache: None,
        })
    }

    pub fn plan(&self) -> &TreePlan {
        &self.plan
    }

    pub fn layers(&self) -> &[PackedLayer<T>] {
        &self.layers
    }

    pub fn packed_shapes(&self) -> Vec<(usize, usize)> {
        self.plan
            .layers()
            .iter()
            .map(|d| (d.out_units, self.plan.branching()))
            .collect()
    }

    pub fn packed_weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    pub fn decompile(&self) -> DendriticParams<T> {
        unpack(&self.plan, &self.layers).expect("compiled layers match their plan")
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let inputs = self.plan.inputs();
        let [n, width] = *x.shape() else {
            return Err(Error::dim("sparse_forward", format!("expected N x {inputs}, got {:?}", x.shape())));
        };
        if width != inputs {
            return Err(Error::dim("sparse_forward", format!("expected N x {inputs}, got {:?}", x.shape())));
        }
        let b = self.plan.branching();
        let mut activations = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(self.plan.depth());
        for (layer, d) in self.layers.iter().zip(self.plan.layers()) {
            let mut p = vec![T::zero(); n * d.out_units];
            let mut o = vec![T::zero(); n * d.out_units];
            layer_forward(
                activations.last().unwrap(),
                n,
                d.in_units,
                b,
                &layer.weights,
                &layer.bias,
                self.slope,
                &mut p,
                &mut o,
            );
            pre.push(p);
            activations.push(o);
        }
        let out = activations.pop().unwrap();
        self.cache = Some(ForwardCache {
            batch: n,
            activations,
            pre,
        });
        Tensor::new(out, &[n, self.plan.outputs()])
    }

    /// Gradients of `sum(upstream * y)` for the `y` of the last forward pass.
    pub fn backward(&self, upstream: &Tensor<T>) -> Result<SparseGrads<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Usage("sparse backward called before forward".into()))?;
        if upstream.shape() != [cache.batch, self.plan.outputs()] {
            return Err(Error::dim(
                "sparse_backward",
                format!(
                    "upstream {:?} for output {:?}",
                    upstream.shape(),
                    [cache.batch, self.plan.outputs()]
                ),
            ));
        }
        let b = self.plan.branching();
        let depth = self.plan.depth();
        let mut weights = vec![Vec::new(); depth];
        let mut biases = vec![Vec::new(); depth];
        let mut grad = upstream.to_vec();
        for i in (0..depth).rev() {
            let d = self.plan.layers()[i];
            let mut dw = vec![T::zero(); d.out_units * b];
            let mut db = vec![T::zero(); d.out_units];
            let mut dx = vec![T::zero(); cache.batch * d.in_units];
            layer_backward(
                &cache.activations[i],
                cache.batch,
                d.in_units,
                b,
                &self.layers[i].weights,
                &cache.pre[i],
                self.slope,
                &grad,
                &mut dw,
                &mut db,
                Some(&mut dx),
            );
            weights[i] = dw;
            biases[i] = db;
            grad = dx;
        }
        Ok(SparseGrads {
            weights,
            biases,
            input: grad,
        })
    }
}

/// Trainable packed tree used by models on the sparse backend.
#[derive(Debug, Clone)]
pub struct SparseTree<T: Element> {
    plan: Arc<TreePlan>,
    pub weights: Vec<Tensor<T>>,
    pub biases: Vec<Tensor<T>>,
}

impl<T: Element> SparseTree<T> {
    pub fn new(plan: Arc<TreePlan>, layers: &[PackedLayer<T>]) -> Result<Self> {
        check_packed(&plan, layers)?;
        let b = plan.branching();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (p, d) in layers.iter().zip(plan.layers()) {
            weights.push(Tensor::parameter(p.weights.clone(), &[d.out_units, b])?);
            biases.push(Tensor::parameter(p.bias.clone(), &[d.out_units])?);
        }
        Ok(Self {
            plan,
            weights,
            biases,
        })
    }

    pub fn plan(&self) -> &Arc<TreePlan> {
        &self.plan
    }

    pub fn forward(&self, x: &Tensor<T>, slope: T) -> Result<Tensor<T>> {
        if x.shape().len() != 2 || x.shape()[1] != self.plan.inputs() {
            return Err(Error::dim(
                "sparse_forward",
                format!("expected N x {}, got {:?}", self.plan.inputs(), x.shape()),
            ));
        }
        let mut z = x.clone();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            z = tree_layer(&z, w, b, slope)?;
        }
        Ok(z)
    }

    pub fn packed(&self) -> Vec<PackedLayer<T>> {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| PackedLayer {
                weights: w.to_vec(),
                bias: b.to_vec(),
            })
            .collect()
    }
}

/// One timing row of [`benchmark`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub backend: Backend,
    pub inputs: usize,
    pub outputs: usize,
    pub branching: usize,
    pub batch: usize,
    pub median_ns: u128,
    /// Multiplies per sample in one forward pass.
    pub op_count: usize,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "backend,I,O,b,batch,median_ns,op_count";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.backend, self.inputs, self.outputs, self.branching, self.batch, self.median_ns, self.op_count
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub reference: BenchRow,
    pub sparse: BenchRow,
    /// Reference median time over sparse median time.
    pub speedup: f64,
    /// `(dense, sparse)` multiplies per sample for each layer.
    pub layer_op_counts: Vec<(usize, usize)>,
}

impl BenchReport {
    pub fn rows(&self) -> [&BenchRow; 2] {
        [&self.reference, &self.sparse]
    }
}

fn median(mut xs: Vec<u128>) -> u128 {
    xs.sort_unstable();
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2
    }
}

/// Median wall time of one forward + backward pass on both backends.
pub fn benchmark<R: Rng + ?Sized>(plan: &TreePlan, batch: usize, reps: usize, rng: &mut R) -> Result<BenchReport> {
    if reps < 10 {
        return Err(Error::Parameter(format!("benchmark needs at least 10 repetitions, got {reps}")));
    }
    if batch == 0 {
        return Err(Error::Parameter("benchmark batch must be positive".into()));
    }
    let plan = Arc::new(plan.clone());
    let params = crate::tree::density_gain_init::<f32, _>(&plan, rng);
    let x: Vec<f32> = (0..batch * plan.inputs()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::new(x, &[batch, plan.inputs()])?;
    let upstream = Tensor::full(&[batch, plan.outputs()], 1.0f32);
    let slope = crate::tree::LEAKY_SLOPE as f32;

    let reference = crate::tree::MaskedTree::new(Arc::clone(&plan), &params)?;
    let time_reference = || -> Result<u128> {
        let start = Instant::now();
        let y = reference.forward(&x, slope)?;
        tensor::sum(&y).backward()?;
        let elapsed = start.elapsed().as_nanos();
        reference.weights.iter().chain(&reference.biases).for_each(Tensor::zero_grad);
        Ok(elapsed)
    };
    time_reference()?;
    let reference_ns = median((0..reps).map(|_| time_reference()).collect::<Result<_>>()?);

    let mut compiled = CompiledTree::compile(Arc::clone(&plan), &params, slope)?;
    let mut time_sparse = || -> Result<u128> {
        let start = Instant::now();
        compiled.forward(&x)?;
        let grads = compiled.backward(&upstream)?;
        let elapsed = start.elapsed().as_nanos();
        std::hint::black_box(grads);
        Ok(elapsed)
    };
    time_sparse()?;
    let sparse_ns = median((0..reps).map(|_| time_sparse()).collect::<Result<_>>()?);

    let row = |backend, median_ns, op_count| BenchRow {
        backend,
        inputs: plan.inputs(),
        outputs: plan.outputs(),
        branching: plan.branching(),
        batch,
        median_ns,
        op_count,
    };
    Ok(BenchReport {
        reference: row(Backend::Reference, reference_ns, plan.dense_op_count()),
        sparse: row(Backend::Sparse, sparse_ns, plan.sparse_op_count()),
        speedup: reference_ns as f64 / sparse_ns.max(1) as f64,
        layer_op_counts: plan
            .layers()
            .iter()
            .map(|d| (d.out_units * d.in_units, d.out_units * plan.branching()))
            .collect(),
    })
}
