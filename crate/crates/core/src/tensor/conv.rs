use super::ops::Mode;
use super::{Element, Tensor};
use crate::error::{Error, Result};

fn rank4(op: &'static str, t: &Tensor<impl Element>) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::dim(op, format!("expected N x C x H x W, got {s:?}"))),
    }
}

/// Stride-1 cross-correlation with zero "same" padding (`k / 2`) for an odd
/// square kernel, plus a per-channel bias. The CNN trunk uses `k = 5`, pad 2.
pub fn conv2d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, cin, h, wd] = rank4("conv2d", x)?;
    let [cout, wcin, kh, kw] = rank4("conv2d", w)?;
    if wcin != cin {
        return Err(Error::dim(
            "conv2d",
            format!("input has {cin} channels, kernel expects {wcin} ({:?} vs {:?})", x.shape(), w.shape()),
        ));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::dim("conv2d", format!("kernel must be square and odd, got {kh}x{kw}")));
    }
    if bias.numel() != cout {
        return Err(Error::dim("conv2d", format!("bias {:?} for {cout} filters", bias.shape())));
    }
    let k = kh;
    let pad = k / 2;
    let plane = h * wd;
    // Output rows/cols that read input (i + ki - pad) inside [0, h).
    let span = move |ki: usize, len: usize| {
        let lo = pad.saturating_sub(ki);
        let hi = (len + pad).saturating_sub(ki).min(len);
        (lo, hi)
    };

    let mut out = vec![T::zero(); n * cout * plane];
    {
        let (xd, wdat, bd) = (x.data(), w.data(), bias.data());
        for s in 0..n {
            for co in 0..cout {
                let o = &mut out[(s * cout + co) * plane..(s * cout + co + 1) * plane];
                o.iter_mut().for_each(|v| *v = bd[co]);
                for ci in 0..cin {
                    let xi = &xd[(s * cin + ci) * plane..(s * cin + ci + 1) * plane];
                    for ki in 0..k {
                        let (r0, r1) = span(ki, h);
                        for kj in 0..k {
                            let wv = wdat[((co * cin + ci) * k + ki) * k + kj];
                            let (c0, c1) = span(kj, wd);
                            if c0 >= c1 {
                                continue;
                            }
                            for r in r0..r1 {
                                let src = (r + ki - pad) * wd;
                                let orow = &mut o[r * wd + c0..r * wd + c1];
                                let xrow = &xi[src + c0 + kj - pad..src + c1 + kj - pad];
                                orow.iter_mut().zip(xrow).for_each(|(a, &b)| *a = *a + wv * b);
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(Tensor::from_op(
        out,
        vec![n, cout, h, wd],
        "conv2d",
        vec![x.clone(), w.clone(), bias.clone()],
        Box::new(move |g, _, inputs| {
            let (x, w, bias) = (&inputs[0], &inputs[1], &inputs[2]);
            if bias.requires_grad() {
                let mut db = vec![T::zero(); cout];
                for s in 0..n {
                    for (co, d) in db.iter_mut().enumerate() {
                        let go = &g[(s * cout + co) * plane..(s * cout + co + 1) * plane];
                        *d = go.iter().fold(*d, |a, &v| a + v);
                    }
                }
                bias.accumulate_grad(&db);
            }
            let need_x = x.requires_grad();
            let need_w = w.requires_grad();
            if !need_x && !need_w {
                return;
            }
            let (xd, wdat) = (x.data(), w.data());
            let mut dx = vec![T::zero(); if need_x { n * cin * plane } else { 0 }];
            let mut dw = vec![T::zero(); if need_w { cout * cin * k * k } else { 0 }];
            for s in 0..n {
                for co in 0..cout {
                    let go = &g[(s * cout + co) * plane..(s * cout + co + 1) * plane];
                    for ci in 0..cin {
                        let base = (s * cin + ci) * plane;
                        for ki in 0..k {
                            let (r0, r1) = span(ki, h);
                            for kj in 0..k {
                                let widx = ((co * cin + ci) * k + ki) * k + kj;
                                let (c0, c1) = span(kj, wd);
                                if c0 >= c1 {
                                    continue;
                                }
                                let wv = wdat[widx];
                                let mut acc = T::zero();
                                for r in r0..r1 {
                                    let xs = base + (r + ki - pad) * wd + c0 + kj - pad;
                                    let len = c1 - c0;
                                    let grow = &go[r * wd + c0..r * wd + c1];
                                    if need_w {
                                        let xrow = &xd[xs..xs + len];
                                        acc = grow.iter().zip(xrow).fold(acc, |a, (&gv, &xv)| a + gv * xv);
                                    }
                                    if need_x {
                                        let drow = &mut dx[xs..xs + len];
                                        drow.iter_mut().zip(grow).for_each(|(d, &gv)| *d = *d + wv * gv);
                                    }
                                }
                                if need_w {
                                    dw[widx] = dw[widx] + acc;
                                }
                            }
                        }
                    }
                }
            }
            drop((xd, wdat));
            if need_x {
                x.accumulate_grad(&dx);
            }
            if need_w {
                w.accumulate_grad(&dw);
            }
        }),
    ))
}

/// Non-overlapping 2x2 max pooling with stride 2. Gradient flows to the
/// first maximal element in row-major order within each window.
pub fn maxpool2d<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = rank4("maxpool2d", x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim("maxpool2d", format!("spatial size {h}x{w} must be even")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    {
        let xd = x.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
    }
    let total = x.numel();
    Ok(Tensor::from_op(
        out,
        vec![n, c, oh, ow],
        "maxpool2d",
        vec![x.clone()],
        Box::new(move |g, _, inputs| {
            let mut dx = vec![T::zero(); total];
            for (&idx, &gv) in argmax.iter().zip(g) {
                dx[idx] = dx[idx] + gv;
            }
            inputs[0].accumulate_grad(&dx);
        }),
    ))
}

/// Running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> BatchNormState<T> {
    /// Mean 0, variance 1, momentum 0.1, epsilon 1e-5.
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Per-channel batch normalization with affine `gamma`, `beta`.
///
/// Training mode normalizes with the biased batch variance and folds the
/// unbiased variance into the running estimate; evaluation mode uses the
/// running estimates.
pub fn batchnorm2d<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = rank4("batchnorm2d", x)?;
    if gamma.numel() != c || beta.numel() != c || state.running_mean.len() != c {
        return Err(Error::dim(
            "batchnorm2d",
            format!("{c} channels but gamma {:?}, beta {:?}", gamma.shape(), beta.shape()),
        ));
    }
    let plane = h * w;
    let count = n * plane;
    let eps = T::lit(state.eps);
    let (mean, var) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::dim(
                    "batchnorm2d",
                    format!("training needs at least 2 values per channel, got {count}"),
                ));
            }
            let xd = x.data();
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let m = T::from_usize(count).unwrap();
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    let p = &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                    s = p.iter().fold(s, |a, &v| a + v);
                }
                let mu = s / m;
                let mut ss = T::zero();
                for b in 0..n {
                    let p = &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                    ss = p.iter().fold(ss, |a, &v| a + (v - mu) * (v - mu));
                }
                mean[ch] = mu;
                var[ch] = ss / m;
            }
            let mom = T::lit(state.momentum);
            let unbias = m / (m - T::one());
            for ch in 0..c {
                state.running_mean[ch] = (T::one() - mom) * state.running_mean[ch] + mom * mean[ch];
                state.running_var[ch] =
                    (T::one() - mom) * state.running_var[ch] + mom * var[ch] * unbias;
            }
            (mean, var)
        }
        Mode::Eval => (state.running_mean.clone(), state.running_var.clone()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut out = vec![T::zero(); x.numel()];
    {
        let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![n, c, h, w],
        "batchnorm2d",
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, _, inputs| {
            let (x, gamma, beta) = (&inputs[0], &inputs[1], &inputs[2]);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * plane;
                    for i in off..off + plane {
                        dgamma[ch] = dgamma[ch] + g[i] * xhat[i];
                        dbeta[ch] = dbeta[ch] + g[i];
                    }
                }
            }
            if x.requires_grad() {
                let gd = gamma.data();
                let mut dx = vec![T::zero(); g.len()];
                match mode {
                    Mode::Train => {
                        let m = T::from_usize(count).unwrap();
                        for b in 0..n {
                            for ch in 0..c {
                                let off = (b * c + ch) * plane;
                                let k = gd[ch] * inv_std[ch] / m;
                                for i in off..off + plane {
                                    dx[i] = k * (m * g[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                                }
                            }
                        }
                    }
                    Mode::Eval => {
                        for b in 0..n {
                            for ch in 0..c {
                                let off = (b * c + ch) * plane;
                                for i in off..off + plane {
                                    dx[i] = g[i] * gd[ch] * inv_std[ch];
                                }
                            }
                        }
                    }
                }
                drop(gd);
                x.accumulate_grad(&dx);
            }
            gamma.accumulate_grad(&dgamma);
            beta.accumulate_grad(&dbeta);
        }),
    ))
}
