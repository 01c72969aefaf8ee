use super::ops::sigmoid_scalar;
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Mean over the batch of `-log softmax(logits)[label]`, computed with the
/// max-subtracted log-sum-exp.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let [n, c] = *logits.shape() else {
        return Err(Error::dim(
            "cross_entropy",
            format!("logits must be N x C, got {:?}", logits.shape()),
        ));
    };
    if labels.len() != n {
        return Err(Error::dim(
            "cross_entropy",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {bad} outside [0, {c})")));
    }
    let mut probs = vec![T::zero(); n * c];
    let mut total = T::zero();
    {
        let ld = logits.data();
        for s in 0..n {
            let row = &ld[s * c..(s + 1) * c];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let z = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
            let lse = max + z.ln();
            total = total + (lse - row[labels[s]]);
            for k in 0..c {
                probs[s * c + k] = (row[k] - lse).exp();
            }
        }
    }
    let nf = T::from_usize(n).unwrap();
    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        vec![total / nf],
        vec![1],
        "cross_entropy",
        vec![logits.clone()],
        Box::new(move |g, _, inputs| {
            let k = g[0] / nf;
            let mut d: Vec<T> = probs.iter().map(|&p| p * k).collect();
            for (s, &l) in labels.iter().enumerate() {
                d[s * c + l] = d[s * c + l] - k;
            }
            inputs[0].accumulate_grad(&d);
        }),
    ))
}

/// Mean binary cross entropy of `sigmoid(logit)` against labels in {0, 1},
/// in the fused form `max(z, 0) - z*y + ln(1 + exp(-|z|))`.
pub fn binary_cross_entropy_with_logits<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<Tensor<T>> {
    let n = logits.numel();
    if logits.shape()[0] != n || labels.len() != n {
        return Err(Error::dim(
            "binary_cross_entropy",
            format!("logits {:?} with {} labels", logits.shape(), labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Data(format!("binary label {bad} is not 0 or 1")));
    }
    let targets: Vec<T> = labels.iter().map(|&l| T::from_usize(l).unwrap()).collect();
    let total = {
        let ld = logits.data();
        ld.iter().zip(&targets).fold(T::zero(), |acc, (&z, &y)| {
            acc + z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
        })
    };
    let nf = T::from_usize(n).unwrap();
    Ok(Tensor::from_op(
        vec![total / nf],
        vec![1],
        "binary_cross_entropy",
        vec![logits.clone()],
        Box::new(move |g, _, inputs| {
            let k = g[0] / nf;
            let d: Vec<T> = inputs[0]
                .data()
                .iter()
                .zip(&targets)
                .map(|(&z, &y)| (sigmoid_scalar(z) - y) * k)
                .collect();
            inputs[0].accumulate_grad(&d);
        }),
    ))
}
