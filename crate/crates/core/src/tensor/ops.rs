use rand::Rng;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Whether stochastic and batch-statistic layers behave as in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

fn rank2(op: &'static str, t: &Tensor<impl Element>) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

#[inline]
pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub(crate) fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    y.iter_mut().zip(x).for_each(|(y, &x)| *y = *y + alpha * x);
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = rank2("matmul", a)?;
    let (k2, n) = rank2("matmul", b)?;
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("inner dimensions differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    {
        let (ad, bd) = (a.data(), b.data());
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(ad[i * k + p], &bd[p * n..(p + 1) * n], row);
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![m, n],
        "matmul",
        vec![a.clone(), b.clone()],
        Box::new(move |g, _, inputs| {
            let (a, b) = (&inputs[0], &inputs[1]);
            if a.requires_grad() {
                let bd = b.data();
                let mut da = vec![T::zero(); m * k];
                for i in 0..m {
                    for p in 0..k {
                        da[i * k + p] = dot(&g[i * n..(i + 1) * n], &bd[p * n..(p + 1) * n]);
                    }
                }
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let ad = a.data();
                let mut db = vec![T::zero(); k * n];
                for i in 0..m {
                    for p in 0..k {
                        axpy(ad[i * k + p], &g[i * n..(i + 1) * n], &mut db[p * n..(p + 1) * n]);
                    }
                }
                b.accumulate_grad(&db);
            }
        }),
    ))
}

/// Affine map `x W^T + bias` for `x: [N, in]`, `w: [out, in]`, `bias: [out]`.
///
/// Each output is accumulated over `in` in ascending order and the bias is
/// added last.
pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, fan_in) = rank2("linear", x)?;
    let (fan_out, w_in) = rank2("linear", w)?;
    if w_in != fan_in || bias.numel() != fan_out {
        return Err(Error::dim(
            "linear",
            format!(
                "input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                bias.shape()
            ),
        ));
    }
    let mut out = vec![T::zero(); n * fan_out];
    {
        let (xd, wd, bd) = (x.data(), w.data(), bias.data());
        for s in 0..n {
            let xr = &xd[s * fan_in..(s + 1) * fan_in];
            for j in 0..fan_out {
                out[s * fan_out + j] = dot(xr, &wd[j * fan_in..(j + 1) * fan_in]) + bd[j];
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![n, fan_out],
        "linear",
        vec![x.clone(), w.clone(), bias.clone()],
        Box::new(move |g, _, inputs| {
            let (x, w, bias) = (&inputs[0], &inputs[1], &inputs[2]);
            if x.requires_grad() {
                let wd = w.data();
                let mut dx = vec![T::zero(); n * fan_in];
                for s in 0..n {
                    let row = &mut dx[s * fan_in..(s + 1) * fan_in];
                    for j in 0..fan_out {
                        let gj = g[s * fan_out + j];
                        if gj != T::zero() {
                            axpy(gj, &wd[j * fan_in..(j + 1) * fan_in], row);
                        }
                    }
                }
                x.accumulate_grad(&dx);
            }
            if w.requires_grad() {
                let xd = x.data();
                let mut dw = vec![T::zero(); fan_out * fan_in];
                for s in 0..n {
                    let xr = &xd[s * fan_in..(s + 1) * fan_in];
                    for j in 0..fan_out {
                        axpy(g[s * fan_out + j], xr, &mut dw[j * fan_in..(j + 1) * fan_in]);
                    }
                }
                w.accumulate_grad(&dw);
            }
            if bias.requires_grad() {
                let mut db = vec![T::zero(); fan_out];
                for s in 0..n {
                    db.iter_mut()
                        .zip(&g[s * fan_out..(s + 1) * fan_out])
                        .for_each(|(d, &v)| *d = *d + v);
                }
                bias.accumulate_grad(&db);
            }
        }),
    ))
}

/// Adds `bias: [F]` to every row of `x: [N, F]`.
pub fn add_bias<T: Element>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f) = rank2("add_bias", x)?;
    if bias.numel() != f {
        return Err(Error::dim(
            "add_bias",
            format!("input {:?}, bias {:?}", x.shape(), bias.shape()),
        ));
    }
    let out = {
        let (xd, bd) = (x.data(), bias.data());
        xd.iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % f])
            .collect()
    };
    Ok(Tensor::from_op(
        out,
        vec![n, f],
        "add_bias",
        vec![x.clone(), bias.clone()],
        Box::new(move |g, _, inputs| {
            inputs[0].accumulate_grad(g);
            if inputs[1].requires_grad() {
                let mut db = vec![T::zero(); f];
                for (i, &v) in g.iter().enumerate() {
                    db[i % f] = db[i % f] + v;
                }
                inputs[1].accumulate_grad(&db);
            }
        }),
    ))
}

fn same_shape(op: &'static str, a: &Tensor<impl Element>, b: &Tensor<impl Element>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let out = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_op(
        out,
        a.shape().to_vec(),
        "add",
        vec![a.clone(), b.clone()],
        Box::new(|g, _, inputs| {
            inputs[0].accumulate_grad(g);
            inputs[1].accumulate_grad(g);
        }),
    ))
}

/// Elementwise product.
pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let out = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    Ok(Tensor::from_op(
        out,
        a.shape().to_vec(),
        "mul",
        vec![a.clone(), b.clone()],
        Box::new(|g, _, inputs| {
            let (a, b) = (&inputs[0], &inputs[1]);
            if a.requires_grad() {
                let da: Vec<T> = g.iter().zip(b.data().iter()).map(|(&g, &y)| g * y).collect();
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let db: Vec<T> = g.iter().zip(a.data().iter()).map(|(&g, &x)| g * x).collect();
                b.accumulate_grad(&db);
            }
        }),
    ))
}

pub fn scale<T: Element>(x: &Tensor<T>, c: T) -> Tensor<T> {
    let out = x.data().iter().map(|&v| v * c).collect();
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        "scale",
        vec![x.clone()],
        Box::new(move |g, _, inputs| {
            let d: Vec<T> = g.iter().map(|&v| v * c).collect();
            inputs[0].accumulate_grad(&d);
        }),
    )
}

/// Sum of all elements as a one-element tensor.
pub fn sum<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let total = x.data().iter().fold(T::zero(), |a, &v| a + v);
    let n = x.numel();
    Tensor::from_op(
        vec![total],
        vec![1],
        "sum",
        vec![x.clone()],
        Box::new(move |g, _, inputs| inputs[0].accumulate_grad(&vec![g[0]; n])),
    )
}

fn unary<T: Element>(
    x: &Tensor<T>,
    kind: &'static str,
    f: impl Fn(T) -> T,
    // derivative from (input, output)
    df: impl Fn(T, T) -> T + 'static,
) -> Tensor<T> {
    let out = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        kind,
        vec![x.clone()],
        Box::new(move |g, out, inputs| {
            let xd = inputs[0].data();
            let d: Vec<T> = g
                .iter()
                .zip(xd.iter().zip(out))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            drop(xd);
            inputs[0].accumulate_grad(&d);
        }),
    )
}

/// `max(x, slope * x)`; the subgradient at zero is `slope`.
pub fn leaky_relu<T: Element>(x: &Tensor<T>, slope: T) -> Result<Tensor<T>> {
    if !(slope >= T::zero() && slope < T::one()) {
        return Err(Error::Parameter(format!(
            "leaky_relu slope must lie in [0, 1), got {slope}"
        )));
    }
    Ok(unary(
        x,
        "leaky_relu",
        move |v| if v > T::zero() { v } else { slope * v },
        move |v, _| if v > T::zero() { T::one() } else { slope },
    ))
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    unary(
        x,
        "relu",
        |v| if v > T::zero() { v } else { T::zero() },
        |v, _| if v > T::zero() { T::one() } else { T::zero() },
    )
}

pub(crate) fn sigmoid_scalar<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    unary(x, "sigmoid", sigmoid_scalar, |_, y| y * (T::one() - y))
}

/// Row-wise softmax of `x: [N, C]`.
pub fn softmax<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c) = rank2("softmax", x)?;
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(c) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z = z + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / z);
    }
    Ok(Tensor::from_op(
        out,
        vec![n, c],
        "softmax",
        vec![x.clone()],
        Box::new(move |g, y, inputs| {
            let mut dx = vec![T::zero(); n * c];
            for s in 0..n {
                let (gr, yr) = (&g[s * c..(s + 1) * c], &y[s * c..(s + 1) * c]);
                let inner = dot(gr, yr);
                for k in 0..c {
                    dx[s * c + k] = yr[k] * (gr[k] - inner);
                }
            }
            inputs[0].accumulate_grad(&dx);
        }),
    ))
}

/// Same elements, new shape.
pub fn reshape<T: Element>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if shape.iter().product::<usize>() != x.numel() {
        return Err(Error::dim(
            "reshape",
            format!("cannot view {:?} as {shape:?}", x.shape()),
        ));
    }
    Ok(Tensor::from_op(
        x.to_vec(),
        shape.to_vec(),
        "reshape",
        vec![x.clone()],
        Box::new(|g, _, inputs| inputs[0].accumulate_grad(g)),
    ))
}

/// `[N, ...] -> [N, F]`, keeping the batch dimension.
pub fn flatten<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.shape()[0];
    let f = x.numel() / n;
    reshape(x, &[n, f]).expect("flatten preserves element count")
}

/// Repeats each row of `x: [N, F]` `times` times: `[N, F * times]`.
pub fn tile<T: Element>(x: &Tensor<T>, times: usize) -> Result<Tensor<T>> {
    let (n, f) = rank2("tile", x)?;
    if times == 0 {
        return Err(Error::Parameter("tile count must be positive".into()));
    }
    let mut out = Vec::with_capacity(n * f * times);
    {
        let xd = x.data();
        for row in xd.chunks_exact(f) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![n, f * times],
        "tile",
        vec![x.clone()],
        Box::new(move |g, _, inputs| {
            let mut dx = vec![T::zero(); n * f];
            for s in 0..n {
                let row = &mut dx[s * f..(s + 1) * f];
                for r in 0..times {
                    let off = (s * times + r) * f;
                    row.iter_mut()
                        .zip(&g[off..off + f])
                        .for_each(|(d, &v)| *d = *d + v);
                }
            }
            inputs[0].accumulate_grad(&dx);
        }),
    ))
}

/// Inverted dropout: in training mode each element is zeroed with
/// probability `p` and survivors are scaled by `1 / (1 - p)`. Identity in
/// evaluation mode.
pub fn dropout<T: Element, R: Rng + ?Sized>(
    x: &Tensor<T>,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!(
            "dropout probability must lie in [0, 1), got {p}"
        )));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x.clone());
    }
    let keep = T::lit(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.numel())
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok(Tensor::from_op(
        out,
        x.shape().to_vec(),
        "dropout",
        vec![x.clone()],
        Box::new(move |g, _, inputs| {
            let d: Vec<T> = g.iter().zip(&mask).map(|(&g, &m)| g * m).collect();
            inputs[0].accumulate_grad(&d);
        }),
    ))
}
