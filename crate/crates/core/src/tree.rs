//! Tree-structured dendritic layers: plans, masks, initialization and the
//! masked-dense reference forward pass.
//!
//! A plan with `I` inputs, `O` roots and branching `b` has `d = log_b(I/O)`
//! layers. Layer `i` (1-based) maps `I / b^(i-1)` units to `I / b^i` units and
//! unit `j` of that layer reads the contiguous inputs `j*b .. j*b + b`.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Element, Tensor};

/// LeakyReLU negative slope used on every tree layer.
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub in_units: usize,
    pub out_units: usize,
}

/// Binary mask of one tree layer, `out_units x in_units`, with
/// `M[j, k] = 1` iff `k / b == j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub branching: usize,
}

impl Mask {
    pub fn get(&self, row: usize, col: usize) -> bool {
        col / self.branching == row
    }

    pub fn row_nnz(&self, row: usize) -> usize {
        (0..self.cols).filter(|&k| self.get(row, k)).count()
    }

    pub fn col_nnz(&self, col: usize) -> usize {
        (0..self.rows).filter(|&j| self.get(j, col)).count()
    }

    /// Row-major dense 0/1 matrix.
    pub fn to_dense<T: Element>(&self) -> Vec<T> {
        let mut m = vec![T::zero(); self.rows * self.cols];
        for j in 0..self.rows {
            for c in 0..self.branching {
                m[j * self.cols + j * self.branching + c] = T::one();
            }
        }
        m
    }
}

/// Shapes and connectivity of a balanced dendritic tree layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreePlan {
    inputs: usize,
    outputs: usize,
    branching: usize,
    layers: Vec<LayerDims>,
}

impl TreePlan {
    /// Plans `outputs` disjoint trees over `inputs` leaves.
    pub fn new(inputs: usize, outputs: usize, branching: usize) -> Result<Self> {
        if branching < 2 {
            return Err(Error::Parameter(format!(
                "branching factor must be at least 2, got {branching}"
            )));
        }
        if inputs == 0 || outputs == 0 {
            return Err(Error::Parameter("inputs and outputs must be positive".into()));
        }
        let depth = exact_log(inputs, outputs, branching).ok_or(Error::Structure {
            inputs,
            outputs,
            branching,
            nearest: nearest_valid_inputs(inputs, outputs, branching),
        })?;
        let layers = (1..=depth)
            .map(|i| LayerDims {
                in_units: inputs / branching.pow(i as u32 - 1),
                out_units: inputs / branching.pow(i as u32),
            })
            .collect();
        Ok(Self {
            inputs,
            outputs,
            branching,
            layers,
        })
    }

    /// Plan for `neurons` trees that each see the same `inputs_per_neuron`
    /// features (the input is tiled `neurons` times).
    pub fn repeated(inputs_per_neuron: usize, neurons: usize, branching: usize) -> Result<Self> {
        Self::new(inputs_per_neuron * neurons, neurons, branching).map_err(|e| match e {
            Error::Structure { nearest, .. } => Error::Structure {
                inputs: inputs_per_neuron,
                outputs: 1,
                branching,
                nearest: nearest / neurons,
            },
            other => other,
        })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[LayerDims] {
        &self.layers
    }

    pub fn mask(&self, layer: usize) -> Mask {
        let d = self.layers[layer];
        Mask {
            rows: d.out_units,
            cols: d.in_units,
            branching: self.branching,
        }
    }

    /// Inputs of unit `unit` in layer `layer` (0-based).
    pub fn children(&self, layer: usize, unit: usize) -> Range<usize> {
        debug_assert!(unit < self.layers[layer].out_units);
        unit * self.branching..(unit + 1) * self.branching
    }

    /// Unmasked weights actually stored by a sparse layout.
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.out_units * self.branching).sum()
    }

    pub fn bias_count(&self) -> usize {
        self.layers.iter().map(|l| l.out_units).sum()
    }

    /// Multiply count of a masked-dense forward pass per sample.
    pub fn dense_op_count(&self) -> usize {
        self.layers.iter().map(|l| l.out_units * l.in_units).sum()
    }

    /// Multiply count of a tree-exploiting forward pass per sample.
    pub fn sparse_op_count(&self) -> usize {
        self.weight_count()
    }

    /// Root index whose subtree contains input `k`.
    pub fn root_of(&self, input: usize) -> usize {
        input / (self.inputs / self.outputs)
    }
}

fn exact_log(inputs: usize, outputs: usize, b: usize) -> Option<usize> {
    if !inputs.is_multiple_of(outputs) {
        return None;
    }
    let mut ratio = inputs / outputs;
    let mut depth = 0;
    while ratio > 1 {
        if !ratio.is_multiple_of(b) {
            return None;
        }
        ratio /= b;
        depth += 1;
    }
    (depth >= 1).then_some(depth)
}

fn nearest_valid_inputs(inputs: usize, outputs: usize, b: usize) -> usize {
    let mut best = outputs * b;
    let mut candidate = best;
    while candidate < inputs.saturating_mul(b) {
        if candidate.abs_diff(inputs) < best.abs_diff(inputs) {
            best = candidate;
        }
        match candidate.checked_mul(b) {
            Some(c) => candidate = c,
            None => break,
        }
    }
    best
}

/// Weights, biases and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub weights: usize,
    pub biases: usize,
    pub total: usize,
}

impl ParamCount {
    pub fn new(weights: usize, biases: usize) -> Self {
        Self {
            weights,
            biases,
            total: weights + biases,
        }
    }
}

impl std::ops::Add for ParamCount {
    type Output = ParamCount;
    fn add(self, rhs: Self) -> Self {
        ParamCount::new(self.weights + rhs.weights, self.biases + rhs.biases)
    }
}

/// Closed-form parameter count of `neurons` trees with `inputs_per_neuron`
/// leaves each: `(I - 1) / (b - 1)` internal nodes per tree, each with `b`
/// weights and one bias.
pub fn count_parameters(inputs_per_neuron: usize, neurons: usize, branching: usize) -> Result<ParamCount> {
    TreePlan::repeated(inputs_per_neuron, neurons, branching)?;
    let nodes = (inputs_per_neuron - 1) / (branching - 1);
    Ok(ParamCount::new(branching * nodes * neurons, nodes * neurons))
}

/// Dense per-layer parameters of a tree: `weight` is `out x in` row-major
/// with zeros at masked positions.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DendriticParams<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Element> DendriticParams<T> {
    pub fn check(&self, plan: &TreePlan) -> Result<()> {
        if self.layers.len() != plan.depth() {
            return Err(Error::Inconsistent(format!(
                "{} parameter layers for a depth-{} plan",
                self.layers.len(),
                plan.depth()
            )));
        }
        for (i, (p, d)) in self.layers.iter().zip(plan.layers()).enumerate() {
            if p.weight.len() != d.out_units * d.in_units || p.bias.len() != d.out_units {
                return Err(Error::Inconsistent(format!(
                    "layer {i}: weight {} / bias {} for {}x{}",
                    p.weight.len(),
                    p.bias.len(),
                    d.out_units,
                    d.in_units
                )));
            }
        }
        Ok(())
    }
}

/// Standard deviation of the density-gain He initialization for a layer
/// with `fan_in` inputs and `fan_out` outputs.
///
/// The variance `2 / (fan_in * density)` with `density = fan_in / (fan_in *
/// fan_out)` simplifies to `2 * fan_out / fan_in = 2 / b`.
pub fn density_gain_std(fan_in: usize, fan_out: usize) -> f64 {
    let density = fan_in as f64 / (fan_in as f64 * fan_out as f64);
    (2.0 / (fan_in as f64 * density)).sqrt()
}

/// Unmasked weights of one layer drawn in `(unit, child)` order, the order
/// shared by the dense and packed layouts.
pub fn density_gain_weights<T: Element, R: Rng + ?Sized>(
    plan: &TreePlan,
    layer: usize,
    rng: &mut R,
) -> Vec<T> {
    let d = plan.layers()[layer];
    let normal = Normal::new(0.0, density_gain_std(d.in_units, d.out_units)).expect("finite std");
    (0..d.out_units * plan.branching())
        .map(|_| T::lit(normal.sample(rng)))
        .collect()
}

/// He initialization with density gain on the unmasked weights; masked
/// weights and all biases are zero.
pub fn density_gain_init<T: Element, R: Rng + ?Sized>(plan: &TreePlan, rng: &mut R) -> DendriticParams<T> {
    let b = plan.branching();
    let layers = (0..plan.depth())
        .map(|i| {
            let d = plan.layers()[i];
            let packed = density_gain_weights::<T, _>(plan, i, rng);
            let mut weight = vec![T::zero(); d.out_units * d.in_units];
            for j in 0..d.out_units {
                for c in 0..b {
                    weight[j * d.in_units + j * b + c] = packed[j * b + c];
                }
            }
            LayerParams {
                weight,
                bias: vec![T::zero(); d.out_units],
            }
        })
        .collect();
    DendriticParams { layers }
}

/// Masked-dense tree: full weight matrices multiplied by their masks on
/// every forward pass.
#[derive(Debug, Clone)]
pub struct MaskedTree<T: Element> {
    plan: Arc<TreePlan>,
    pub weights: Vec<Tensor<T>>,
    pub biases: Vec<Tensor<T>>,
    masks: Vec<Tensor<T>>,
}

impl<T: Element> MaskedTree<T> {
    /// Wraps `params` as trainable tensors.
    pub fn new(plan: Arc<TreePlan>, params: &DendriticParams<T>) -> Result<Self> {
        params.check(&plan)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut masks = Vec::new();
        for (i, p) in params.layers.iter().enumerate() {
            let d = plan.layers()[i];
            let shape = [d.out_units, d.in_units];
            weights.push(Tensor::parameter(p.weight.clone(), &shape)?);
            biases.push(Tensor::parameter(p.bias.clone(), &[d.out_units])?);
            masks.push(Tensor::new(plan.mask(i).to_dense(), &shape)?);
        }
        Ok(Self {
            plan,
            weights,
            biases,
            masks,
        })
    }

    pub fn plan(&self) -> &Arc<TreePlan> {
        &self.plan
    }

    pub fn forward(&self, x: &Tensor<T>, slope: T) -> Result<Tensor<T>> {
        if x.shape().len() != 2 || x.shape()[1] != self.plan.inputs() {
            return Err(Error::dim(
                "dendritic_forward",
                format!("expected N x {}, got {:?}", self.plan.inputs(), x.shape()),
            ));
        }
        let mut z = x.clone();
        for ((w, m), b) in self.weights.iter().zip(&self.masks).zip(&self.biases) {
            let masked = tensor::mul(w, m)?;
            z = tensor::leaky_relu(&tensor::linear(&z, &masked, b)?, slope)?;
        }
        Ok(z)
    }

    /// Current values with masked positions forced to zero.
    pub fn params(&self) -> DendriticParams<T> {
        let layers = self
            .weights
            .iter()
            .zip(&self.masks)
            .zip(&self.biases)
            .map(|((w, m), b)| LayerParams {
                weight: w.data().iter().zip(m.data().iter()).map(|(&w, &m)| w * m).collect(),
                bias: b.to_vec(),
            })
            .collect();
        DendriticParams { layers }
    }
}

/// Reference forward pass `f_d o ... o f_1 (x)` with
/// `f_i(z) = LeakyReLU((W_i * M_i) z + b_i)`.
pub fn dendritic_forward<T: Element>(
    x: &Tensor<T>,
    params: &DendriticParams<T>,
    plan: &TreePlan,
    slope: T,
) -> Result<Tensor<T>> {
    let tree = MaskedTree::new(Arc::new(plan.clone()), params)?;
    tensor::no_grad(|| tree.forward(x, slope))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn small_plan_masks() {
        let plan = TreePlan::new(4, 1, 2).unwrap();
        assert_eq!(plan.depth(), 2);
        assert_eq!(plan.mask(0).to_dense::<f32>(), vec![1., 1., 0., 0., 0., 0., 1., 1.]);
        assert_eq!(plan.mask(1).to_dense::<f32>(), vec![1., 1.]);
    }

    #[test]
    fn single_neuron_b32_is_two_layers() {
        let plan = TreePlan::new(1024, 1, 32).unwrap();
        assert_eq!(
            plan.layers(),
            &[
                LayerDims { in_units: 1024, out_units: 32 },
                LayerDims { in_units: 32, out_units: 1 }
            ]
        );
    }

    #[test]
    fn multi_neuron_needs_repeated_inputs() {
        let err = TreePlan::new(1024, 10, 2).unwrap_err();
        assert!(matches!(err, Error::Structure { inputs: 1024, outputs: 10, branching: 2, .. }));
        let plan = TreePlan::new(10240, 10, 2).unwrap();
        assert_eq!(plan.depth(), 10);
    }

    #[test]
    fn structure_error_reports_nearest() {
        match TreePlan::new(1000, 1, 2).unwrap_err() {
            Error::Structure { nearest, .. } => assert_eq!(nearest, 1024),
            e => panic!("{e}"),
        }
        match TreePlan::repeated(1024, 1, 3).unwrap_err() {
            Error::Structure { nearest, .. } => assert_eq!(nearest, 729),
            e => panic!("{e}"),
        }
        assert!(TreePlan::new(4, 4, 2).is_err());
        assert!(TreePlan::new(4, 1, 1).is_err());
    }

    #[test]
    fn closed_form_matches_table_rows() {
        assert_eq!(count_parameters(1024, 1, 2).unwrap(), ParamCount::new(2046, 1023));
        assert_eq!(count_parameters(1024, 1, 32).unwrap(), ParamCount::new(1056, 33));
        assert_eq!(count_parameters(256, 10, 16).unwrap(), ParamCount::new(2720, 170));
        assert_eq!(count_parameters(1024, 1, 4).unwrap(), ParamCount::new(1364, 341));
        assert!(count_parameters(1024, 1, 3).is_err());
    }

    #[test]
    fn density_gain_variance_is_two_over_b() {
        for b in [2usize, 4, 32] {
            let s = density_gain_std(1024, 1024 / b);
            assert!((s * s - 2.0 / b as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_seeded_and_respects_mask() {
        let plan = TreePlan::new(128, 2, 4).unwrap();
        let a: DendriticParams<f64> = density_gain_init(&plan, &mut ChaCha8Rng::seed_from_u64(9));
        let b: DendriticParams<f64> = density_gain_init(&plan, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        for (i, layer) in a.layers.iter().enumerate() {
            let m = plan.mask(i);
            for j in 0..m.rows {
                for k in 0..m.cols {
                    if !m.get(j, k) {
                        assert_eq!(layer.weight[j * m.cols + k], 0.0);
                    }
                }
            }
            assert!(layer.bias.iter().all(|&v| v == 0.0));
        }
    }

    fn ones(plan: &TreePlan) -> DendriticParams<f64> {
        DendriticParams {
            layers: (0..plan.depth())
                .map(|i| {
                    let d = plan.layers()[i];
                    LayerParams {
                        weight: plan.mask(i).to_dense(),
                        bias: vec![0.0; d.out_units],
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn hand_computed_forward() {
        let plan = TreePlan::new(4, 1, 2).unwrap();
        let params = ones(&plan);
        let x = Tensor::new(vec![1.0; 4], &[1, 4]).unwrap();
        let y = dendritic_forward(&x, &params, &plan, 0.1).unwrap();
        assert_eq!(y.to_vec(), vec![4.0]);
        let x = Tensor::new(vec![-1.0; 4], &[1, 4]).unwrap();
        let y = dendritic_forward(&x, &params, &plan, 0.1).unwrap().item();
        assert!((y - -0.04).abs() < 1e-15, "{y}");
    }

    #[test]
    fn masked_positions_are_inert() {
        let plan = TreePlan::new(16, 1, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params: DendriticParams<f32> = density_gain_init(&plan, &mut rng);
        let x = Tensor::new((0..32).map(|i| (i as f32 * 0.37).sin()).collect(), &[2, 16]).unwrap();
        let base = dendritic_forward(&x, &params, &plan, 0.1).unwrap().to_vec();
        let mut noisy = params.clone();
        for (i, layer) in noisy.layers.iter_mut().enumerate() {
            let m = plan.mask(i);
            for j in 0..m.rows {
                for k in 0..m.cols {
                    if !m.get(j, k) {
                        layer.weight[j * m.cols + k] = 123.0;
                    }
                }
            }
        }
        let y = dendritic_forward(&x, &noisy, &plan, 0.1).unwrap().to_vec();
        assert_eq!(base, y);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let plan = TreePlan::new(4, 1, 2).unwrap();
        let x = Tensor::new(vec![0.0; 3], &[1, 3]).unwrap();
        assert!(matches!(
            dendritic_forward(&x, &ones(&plan), &plan, 0.1),
            Err(Error::Dimension { .. })
        ));
    }
}
