//! Dense tensors with tape-free reverse-mode automatic differentiation.
//!
//! Every operation that has at least one input requiring a gradient records
//! an [`OpNode`]-like closure on its output. [`Tensor::backward`] walks the
//! resulting DAG in reverse topological order and accumulates gradients into
//! each input, so a tensor used twice receives the sum of both contributions.
//!
//! Tensors are reference counted with `Rc` and therefore confined to the
//! thread that built the graph. Independent graphs (one per training trial)
//! can live on separate threads.

mod conv;
mod loss;
mod ops;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::iter::Sum;
use std::rc::Rc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use conv::{batchnorm2d, conv2d, maxpool2d, BatchNormState};
pub use loss::{binary_cross_entropy_with_logits, cross_entropy};
pub use ops::{
    add, add_bias, dropout, flatten, leaky_relu, linear, matmul, mul, relu, reshape, scale,
    sigmoid, softmax, sum, tile, Mode,
};

/// Floating point element type of a tensor. `f32` for training, `f64` for
/// gradient verification.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + Sum + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Element for f32 {}
impl Element for f64 {}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any graph nodes on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Gradient closure: `(grad_out, out_data, inputs)`. It must accumulate into
/// the inputs that require gradients.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[T], &[Tensor<T>])>;

pub(crate) struct OpNode<T: Element> {
    kind: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Element> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    node: Option<OpNode<T>>,
}

/// An n-dimensional array of `T` in row-major order.
///
/// Cloning a `Tensor` is cheap and yields a handle to the same storage.
pub struct Tensor<T: Element = f32>(Rc<Inner<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.op_kind())
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    fn leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        let grad = requires_grad.then(|| vec![T::zero(); data.len()]);
        Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(grad),
            node: None,
        }))
    }

    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(&data, shape)?;
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// A leaf that accumulates gradients.
    pub fn parameter(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(&data, shape)?;
        Ok(Self::leaf(data, shape.to_vec(), true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::leaf(vec![value; n], shape.to_vec(), false)
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![value], vec![1], false)
    }

    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        kind: &'static str,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let requires_grad = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = requires_grad.then(|| OpNode {
            kind,
            inputs,
            backward,
        });
        Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            node,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    /// Mutable access to the elements, used by optimizers for in-place
    /// updates of leaves.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        let data = self.0.data.borrow();
        assert_eq!(data.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub fn op_kind(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.kind)
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.0.grad.borrow_mut().as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Copy of the elements as a new leaf without gradient tracking.
    pub fn detach(&self) -> Self {
        Self::leaf(self.to_vec(), self.0.shape.clone(), false)
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                debug_assert_eq!(acc.len(), g.len());
                acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Nodes reachable from `self` that require gradients, in topological
    /// order (inputs before outputs).
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Inner<T>> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(Rc::as_ptr(&t.0)) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for input in node.inputs.iter().rev() {
                    if input.requires_grad() && !visited.contains(&Rc::as_ptr(&input.0)) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Back-propagates from this scalar, accumulating into every reachable
    /// leaf that requires a gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward() needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Usage(
                "backward() on a tensor that is not connected to any parameter".into(),
            ));
        }
        let order = self.topo_order();
        for t in &order {
            if !t.is_leaf() {
                *t.0.grad.borrow_mut() = None;
            }
        }
        self.accumulate_grad(&[T::one()]);
        for t in order.iter().rev() {
            let Some(node) = &t.0.node else { continue };
            let grad = t.0.grad.borrow();
            if let Some(g) = grad.as_ref() {
                let out = t.0.data.borrow();
                (node.backward)(g, &out, &node.inputs);
            }
        }
        Ok(())
    }
}

fn check_shape<T>(data: &[T], shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::dim("tensor", format!("shape {shape:?} must be non-empty and positive")));
    }
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::dim(
            "tensor",
            format!("{} elements do not fill shape {shape:?} ({n})", data.len()),
        ));
    }
    Ok(())
}
