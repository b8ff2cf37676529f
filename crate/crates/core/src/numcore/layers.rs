//! Feed-forward layers: dense, 3×3 same-padded convolution, 2×2 max-pool,
//! batch normalization, inverted dropout and ReLU.

use rand::Rng as _;
use rayon::prelude::*;

use super::par::chunked_sum;
use super::{Mode, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub struct DenseGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

fn check_dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    x.expect_rank(2, "dense input")?;
    w.expect_rank(2, "dense weight")?;
    let (n, din, dout) = (x.dim(0), x.dim(1), w.dim(1));
    if w.dim(0) != din {
        return Err(Error::shape("dense input vs weight", x.shape(), w.shape()));
    }
    if b.shape() != [dout] {
        return Err(Error::shape("dense bias vs weight", b.shape(), w.shape()));
    }
    Ok((n, din, dout))
}

/// y = x·W + b for x [batch, in], W [in, out], b [out].
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, din, dout) = check_dense(x, w, b)?;
    let mut y = vec![0.0; n * dout];
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    y.par_chunks_mut(dout).enumerate().for_each(|(r, yr)| {
        yr.copy_from_slice(bd);
        let xr = &xd[r * din..(r + 1) * din];
        for (i, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &wd[i * dout..(i + 1) * dout];
            for (yv, &wv) in yr.iter_mut().zip(wr) {
                *yv += xv * wv;
            }
        }
    });
    Tensor::new(vec![n, dout], y)
}

pub fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<DenseGrads> {
    let (n, din, dout) = (x.dim(0), x.dim(1), w.dim(1));
    if dy.shape() != [n, dout] {
        return Err(Error::shape("dense upstream gradient", dy.shape(), &[n, dout]));
    }
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![0.0; n * din];
    dx.par_chunks_mut(din).enumerate().for_each(|(r, dxr)| {
        let dyr = &dyd[r * dout..(r + 1) * dout];
        for (i, v) in dxr.iter_mut().enumerate() {
            let wr = &wd[i * dout..(i + 1) * dout];
            *v = wr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        }
    });
    let acc = chunked_sum(n, din * dout + dout, |rows, acc| {
        let (dw, db) = acc.split_at_mut(din * dout);
        for r in rows {
            let xr = &xd[r * din..(r + 1) * din];
            let dyr = &dyd[r * dout..(r + 1) * dout];
            for (i, &xv) in xr.iter().enumerate() {
                let row = &mut dw[i * dout..(i + 1) * dout];
                for (d, &g) in row.iter_mut().zip(dyr) {
                    *d += xv * g;
                }
            }
            for (d, &g) in db.iter_mut().zip(dyr) {
                *d += g;
            }
        }
    });
    let (dw, db) = acc.split_at(din * dout);
    Ok(DenseGrads {
        dx: Tensor::new(vec![n, din], dx)?,
        dw: Tensor::new(vec![din, dout], dw.to_vec())?,
        db: Tensor::new(vec![dout], db.to_vec())?,
    })
}

pub struct ConvGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

fn check_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<[usize; 5]> {
    x.expect_rank(4, "conv input")?;
    w.expect_rank(4, "conv kernel")?;
    let [n, c, h, wd] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    let o = w.dim(0);
    if w.dim(1) != c || w.dim(2) != 3 || w.dim(3) != 3 {
        return Err(Error::shape("conv input vs kernel", x.shape(), w.shape()));
    }
    if b.shape() != [o] {
        return Err(Error::shape("conv bias vs kernel", b.shape(), w.shape()));
    }
    Ok([n, c, h, wd, o])
}

/// Valid output rows for kernel offset `d` (0..3) with padding 1.
#[inline]
fn span(d: usize, len: usize) -> std::ops::Range<usize> {
    match d {
        0 => 1..len,
        1 => 0..len,
        _ => 0..len.saturating_sub(1),
    }
}

/// 3×3 stride-1 cross-correlation with zero same-padding.
/// x [batch, c_in, H, W], w [c_out, c_in, 3, 3], b [c_out].
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, c, h, wid, o] = check_conv(x, w, b)?;
    let plane = h * wid;
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut y = vec![0.0; n * o * plane];
    y.par_chunks_mut(o * plane).enumerate().for_each(|(s, ys)| {
        let xs = &xd[s * c * plane..(s + 1) * c * plane];
        for oc in 0..o {
            let out = &mut ys[oc * plane..(oc + 1) * plane];
            out.fill(bd[oc]);
            for ic in 0..c {
                let xin = &xs[ic * plane..(ic + 1) * plane];
                for di in 0..3 {
                    for dj in 0..3 {
                        let wv = wd[((oc * c + ic) * 3 + di) * 3 + dj];
                        for i in span(di, h) {
                            let xi = (i + di - 1) * wid;
                            let oi = i * wid;
                            for j in span(dj, wid) {
                                out[oi + j] += wv * xin[xi + j + dj - 1];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![n, o, h, wid], y)
}

pub fn conv2d_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<ConvGrads> {
    let [n, c, h, wid] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    let o = w.dim(0);
    if dy.shape() != [n, o, h, wid] {
        return Err(Error::shape("conv upstream gradient", dy.shape(), &[n, o, h, wid]));
    }
    let plane = h * wid;
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());

    let mut dx = vec![0.0; n * c * plane];
    dx.par_chunks_mut(c * plane).enumerate().for_each(|(s, dxs)| {
        let dys = &dyd[s * o * plane..(s + 1) * o * plane];
        for oc in 0..o {
            let g = &dys[oc * plane..(oc + 1) * plane];
            for ic in 0..c {
                let dxi = &mut dxs[ic * plane..(ic + 1) * plane];
                for di in 0..3 {
                    for dj in 0..3 {
                        let wv = wd[((oc * c + ic) * 3 + di) * 3 + dj];
                        for i in span(di, h) {
                            let xi = (i + di - 1) * wid;
                            let oi = i * wid;
                            for j in span(dj, wid) {
                                dxi[xi + j + dj - 1] += wv * g[oi + j];
                            }
                        }
                    }
                }
            }
        }
    });

    let wlen = o * c * 9;
    let acc = chunked_sum(n, wlen + o, |samples, acc| {
        let (dw, db) = acc.split_at_mut(wlen);
        for s in samples {
            let xs = &xd[s * c * plane..(s + 1) * c * plane];
            let dys = &dyd[s * o * plane..(s + 1) * o * plane];
            for oc in 0..o {
                let g = &dys[oc * plane..(oc + 1) * plane];
                db[oc] += g.iter().sum::<f64>();
                for ic in 0..c {
                    let xin = &xs[ic * plane..(ic + 1) * plane];
                    for di in 0..3 {
                        for dj in 0..3 {
                            let mut sum = 0.0;
                            for i in span(di, h) {
                                let xi = (i + di - 1) * wid;
                                let oi = i * wid;
                                for j in span(dj, wid) {
                                    sum += xin[xi + j + dj - 1] * g[oi + j];
                                }
                            }
                            dw[((oc * c + ic) * 3 + di) * 3 + dj] += sum;
                        }
                    }
                }
            }
        }
    });
    let (dw, db) = acc.split_at(wlen);
    Ok(ConvGrads {
        dx: Tensor::new(vec![n, c, h, wid], dx)?,
        dw: Tensor::new(w.shape().to_vec(), dw.to_vec())?,
        db: Tensor::new(vec![o], db.to_vec())?,
    })
}

/// Output of a 2×2 max-pool plus the flat input index each output came from.
pub struct Pooled {
    pub y: Tensor,
    pub argmax: Vec<usize>,
}

/// Non-overlapping 2×2 max over the last two axes; odd trailing rows and
/// columns are dropped. Ties route to the first position in row-major order.
pub fn maxpool2d_forward(x: &Tensor) -> Result<Pooled> {
    let rank = x.shape().len();
    if rank < 2 {
        return Err(Error::shape("maxpool input", x.shape(), &[2, 2]));
    }
    let (h, w) = (x.dim(rank - 2), x.dim(rank - 1));
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!("maxpool needs H, W >= 2, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let lead: usize = x.shape()[..rank - 2].iter().product();
    let xd = x.data();
    let mut y = Vec::with_capacity(lead * oh * ow);
    let mut argmax = Vec::with_capacity(lead * oh * ow);
    for l in 0..lead {
        let base = l * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                y.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[rank - 2] = oh;
    shape[rank - 1] = ow;
    Ok(Pooled { y: Tensor::new(shape, y)?, argmax })
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], dy: &Tensor) -> Result<Tensor> {
    if dy.len() != argmax.len() {
        return Err(Error::shape("maxpool upstream gradient", dy.shape(), &[argmax.len()]));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        d[idx] += g;
    }
    Ok(dx)
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Saved values of a train-mode batch-norm pass.
pub struct NormCache {
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

fn bn_layout(x: &Tensor, gamma: &Tensor) -> Result<(usize, usize, usize)> {
    if x.shape().len() < 2 {
        return Err(Error::shape("batchnorm input", x.shape(), &[0, 0]));
    }
    let (n, c) = (x.dim(0), x.dim(1));
    let inner: usize = x.shape()[2..].iter().product();
    if gamma.shape() != [c] {
        return Err(Error::shape("batchnorm gamma vs channels", gamma.shape(), &[c]));
    }
    Ok((n, c, inner))
}

/// Per-channel normalization over batch and spatial axes. Train mode uses
/// batch statistics (biased variance); infer mode uses the running ones.
pub fn batchnorm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    mode: Mode,
) -> Result<(Tensor, Option<NormCache>)> {
    let (n, c, inner) = bn_layout(x, gamma)?;
    for t in [beta, running_mean, running_var] {
        if t.shape() != [c] {
            return Err(Error::shape("batchnorm parameter vs channels", t.shape(), &[c]));
        }
    }
    let xd = x.data();
    let idx = |s: usize, ch: usize, k: usize| (s * c + ch) * inner + k;
    let (mean, var) = match mode {
        Mode::Infer => (running_mean.data().to_vec(), running_var.data().to_vec()),
        Mode::Train => {
            if n < 2 {
                return Err(Error::invalid(format!("batchnorm in train mode needs batch >= 2, got {n}")));
            }
            let count = (n * inner) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    for k in 0..inner {
                        s += xd[idx(b, ch, k)];
                    }
                }
                let mu = s / count;
                let mut v = 0.0;
                for b in 0..n {
                    for k in 0..inner {
                        let d = xd[idx(b, ch, k)] - mu;
                        v += d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = v / count;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut x_hat = vec![0.0; xd.len()];
    let mut y = vec![0.0; xd.len()];
    let (g, bt) = (gamma.data(), beta.data());
    for b in 0..n {
        for ch in 0..c {
            for k in 0..inner {
                let i = idx(b, ch, k);
                let xh = (xd[i] - mean[ch]) * inv_std[ch];
                x_hat[i] = xh;
                y[i] = g[ch] * xh + bt[ch];
            }
        }
    }
    let y = Tensor::new(x.shape().to_vec(), y)?;
    Ok(match mode {
        Mode::Infer => (y, None),
        Mode::Train => (
            y,
            Some(NormCache {
                x_hat: Tensor::new(x.shape().to_vec(), x_hat)?,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            }),
        ),
    })
}

/// Running statistics after one train-mode batch.
pub fn batchnorm_running_update(running_mean: &Tensor, running_var: &Tensor, cache: &NormCache) -> (Tensor, Tensor) {
    let upd = |r: &Tensor, b: &[f64]| {
        Tensor::new(
            r.shape().to_vec(),
            r.data()
                .iter()
                .zip(b)
                .map(|(r, b)| BN_MOMENTUM * r + (1.0 - BN_MOMENTUM) * b)
                .collect(),
        )
        .expect("same shape")
    };
    (upd(running_mean, &cache.batch_mean), upd(running_var, &cache.batch_var))
}

pub struct NormGrads {
    pub dx: Tensor,
    pub dgamma: Tensor,
    pub dbeta: Tensor,
}

/// Backward of train-mode batch norm, including the batch-statistics path.
pub fn batchnorm_backward(cache: &NormCache, gamma: &Tensor, dy: &Tensor) -> Result<NormGrads> {
    let x_hat = &cache.x_hat;
    if dy.shape() != x_hat.shape() {
        return Err(Error::shape("batchnorm upstream gradient", dy.shape(), x_hat.shape()));
    }
    let (n, c, inner) = bn_layout(x_hat, gamma)?;
    let count = (n * inner) as f64;
    let idx = |s: usize, ch: usize, k: usize| (s * c + ch) * inner + k;
    let (xh, g, gd) = (x_hat.data(), dy.data(), gamma.data());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            for k in 0..inner {
                let i = idx(b, ch, k);
                dgamma[ch] += g[i] * xh[i];
                dbeta[ch] += g[i];
            }
        }
    }
    let mut dx = vec![0.0; xh.len()];
    for ch in 0..c {
        // sums of dx_hat and dx_hat * x_hat over the channel
        let s1 = gd[ch] * dbeta[ch];
        let s2 = gd[ch] * dgamma[ch];
        let scale = cache.inv_std[ch] / count;
        for b in 0..n {
            for k in 0..inner {
                let i = idx(b, ch, k);
                dx[i] = scale * (count * gd[ch] * g[i] - s1 - xh[i] * s2);
            }
        }
    }
    Ok(NormGrads {
        dx: Tensor::new(x_hat.shape().to_vec(), dx)?,
        dgamma: Tensor::new(vec![c], dgamma)?,
        dbeta: Tensor::new(vec![c], dbeta)?,
    })
}

/// Inverted-dropout mask: 0 with probability `rate`, else 1/(1-rate).
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    let keep = 1.0 / (1.0 - rate);
    Ok(Tensor::from_fn(shape, |_| if rate > 0.0 && rng.random::<f64>() < rate { 0.0 } else { keep }))
}

/// Applies dropout; infer mode and rate 0 are the identity.
pub fn dropout_forward(x: &Tensor, rate: f64, mode: Mode, rng: &mut Rng) -> Result<(Tensor, Option<Tensor>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let mask = dropout_mask(x.shape(), rate, rng)?;
    Ok((mul(x, &mask)?, Some(mask)))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("elementwise product", a.shape(), b.shape()));
    }
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect())
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient through ReLU given its input.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if x.shape() != dy.shape() {
        return Err(Error::shape("relu upstream gradient", dy.shape(), x.shape()));
    }
    Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(dy.data()).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect(),
    )
}

/// Concatenates two [batch, *] tensors along the feature axis.
pub fn concat_features(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dim(0) != b.dim(0) {
        return Err(Error::shape("feature concat", a.shape(), b.shape()));
    }
    let n = a.dim(0);
    let (wa, wb) = (a.len() / n.max(1), b.len() / n.max(1));
    let mut out = Vec::with_capacity(a.len() + b.len());
    for r in 0..n {
        out.extend_from_slice(&a.data()[r * wa..(r + 1) * wa]);
        out.extend_from_slice(&b.data()[r * wb..(r + 1) * wb]);
    }
    Tensor::new(vec![n, wa + wb], out)
}

pub fn split_features(x: &Tensor, left: usize) -> Result<(Tensor, Tensor)> {
    x.expect_rank(2, "feature split")?;
    let (n, w) = (x.dim(0), x.dim(1));
    if left > w {
        return Err(Error::shape("feature split", x.shape(), &[n, left]));
    }
    let mut a = Vec::with_capacity(n * left);
    let mut b = Vec::with_capacity(n * (w - left));
    for r in 0..n {
        let row = &x.data()[r * w..(r + 1) * w];
        a.extend_from_slice(&row[..left]);
        b.extend_from_slice(&row[left..]);
    }
    Ok((Tensor::new(vec![n, left], a)?, Tensor::new(vec![n, w - left], b)?))
}
