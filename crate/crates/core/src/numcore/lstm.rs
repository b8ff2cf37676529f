//! LSTM cell and bidirectional encoder with backpropagation through time.
//!
//! Gate layout in the fused kernels is `[input, forget, cell, output]`, each
//! `hidden` wide: `wx` is [in, 4H], `wh` is [H, 4H], `b` is [4H].

use rayon::prelude::*;

use super::par::chunked_map_sum;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
pub struct LstmParams<'a> {
    pub wx: &'a Tensor,
    pub wh: &'a Tensor,
    pub b: &'a Tensor,
}

impl<'a> LstmParams<'a> {
    pub fn hidden(&self) -> usize {
        self.wh.dim(0)
    }

    pub fn input(&self) -> usize {
        self.wx.dim(0)
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden();
        if self.wh.shape() != [h, 4 * h] {
            return Err(Error::shape("lstm recurrent kernel", self.wh.shape(), &[h, 4 * h]));
        }
        if self.wx.shape().len() != 2 || self.wx.dim(1) != 4 * h {
            return Err(Error::shape("lstm input kernel", self.wx.shape(), &[self.wx.dim(0), 4 * h]));
        }
        if self.b.shape() != [4 * h] {
            return Err(Error::shape("lstm bias", self.b.shape(), &[4 * h]));
        }
        Ok(())
    }

    fn grad_len(&self) -> usize {
        let h = self.hidden();
        self.input() * 4 * h + h * 4 * h + 4 * h
    }
}

pub struct LstmGrads {
    pub dwx: Tensor,
    pub dwh: Tensor,
    pub db: Tensor,
}

impl LstmGrads {
    fn from_flat(p: &LstmParams<'_>, flat: &[f64]) -> Result<Self> {
        let h = p.hidden();
        let nx = p.input() * 4 * h;
        let nh = h * 4 * h;
        Ok(Self {
            dwx: Tensor::new(p.wx.shape().to_vec(), flat[..nx].to_vec())?,
            dwh: Tensor::new(p.wh.shape().to_vec(), flat[nx..nx + nh].to_vec())?,
            db: Tensor::new(vec![4 * h], flat[nx + nh..].to_vec())?,
        })
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Per-sample values of one step needed by the backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    x: Vec<f64>,
    /// Previous hidden state after the recurrent-dropout mask.
    h_in: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates, `[i, f, g, o]`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// One step for a single sample; returns (h, c, cache).
fn step_one(p: &LstmParams<'_>, x: &[f64], h_prev: &[f64], c_prev: &[f64], mask: Option<&[f64]>) -> (Vec<f64>, Vec<f64>, StepCache) {
    let h = p.hidden();
    let g4 = 4 * h;
    let (wx, wh) = (p.wx.data(), p.wh.data());
    let h_in: Vec<f64> = match mask {
        Some(m) => h_prev.iter().zip(m).map(|(a, b)| a * b).collect(),
        None => h_prev.to_vec(),
    };
    let mut z = p.b.data().to_vec();
    for (i, &xv) in x.iter().enumerate() {
        for (zv, &w) in z.iter_mut().zip(&wx[i * g4..(i + 1) * g4]) {
            *zv += xv * w;
        }
    }
    for (i, &hv) in h_in.iter().enumerate() {
        if hv == 0.0 {
            continue;
        }
        for (zv, &w) in z.iter_mut().zip(&wh[i * g4..(i + 1) * g4]) {
            *zv += hv * w;
        }
    }
    for (j, v) in z.iter_mut().enumerate() {
        *v = if (2 * h..3 * h).contains(&j) { v.tanh() } else { sigmoid(*v) };
    }
    let mut c = vec![0.0; h];
    let mut tanh_c = vec![0.0; h];
    let mut h_out = vec![0.0; h];
    for u in 0..h {
        c[u] = z[h + u] * c_prev[u] + z[u] * z[2 * h + u];
        tanh_c[u] = c[u].tanh();
        h_out[u] = z[3 * h + u] * tanh_c[u];
    }
    let cache = StepCache { x: x.to_vec(), h_in, c_prev: c_prev.to_vec(), gates: z, tanh_c };
    (h_out, c, cache)
}

/// Backward of one step for a single sample. Accumulates parameter grads
/// into `acc` (flat `[dwx, dwh, db]`) and returns (dx, dh_prev, dc_prev).
fn step_one_backward(
    p: &LstmParams<'_>,
    cache: &StepCache,
    dh: &[f64],
    dc: &[f64],
    mask: Option<&[f64]>,
    acc: &mut [f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let h = p.hidden();
    let g4 = 4 * h;
    let nin = p.input();
    let gt = &cache.gates;
    let mut dz = vec![0.0; g4];
    let mut dc_prev = vec![0.0; h];
    for u in 0..h {
        let (i, f, g, o) = (gt[u], gt[h + u], gt[2 * h + u], gt[3 * h + u]);
        let tc = cache.tanh_c[u];
        let dct = dc[u] + dh[u] * o * (1.0 - tc * tc);
        dz[u] = dct * g * i * (1.0 - i);
        dz[h + u] = dct * cache.c_prev[u] * f * (1.0 - f);
        dz[2 * h + u] = dct * i * (1.0 - g * g);
        dz[3 * h + u] = dh[u] * tc * o * (1.0 - o);
        dc_prev[u] = dct * f;
    }
    let (wx, wh) = (p.wx.data(), p.wh.data());
    let (dwx, rest) = acc.split_at_mut(nin * g4);
    let (dwh, db) = rest.split_at_mut(h * g4);
    let mut dx = vec![0.0; nin];
    for (i, &xv) in cache.x.iter().enumerate() {
        let row = &mut dwx[i * g4..(i + 1) * g4];
        let wrow = &wx[i * g4..(i + 1) * g4];
        let mut s = 0.0;
        for j in 0..g4 {
            row[j] += xv * dz[j];
            s += wrow[j] * dz[j];
        }
        dx[i] = s;
    }
    let mut dh_prev = vec![0.0; h];
    for (i, &hv) in cache.h_in.iter().enumerate() {
        let row = &mut dwh[i * g4..(i + 1) * g4];
        let wrow = &wh[i * g4..(i + 1) * g4];
        let mut s = 0.0;
        for j in 0..g4 {
            row[j] += hv * dz[j];
            s += wrow[j] * dz[j];
        }
        dh_prev[i] = match mask {
            Some(m) => s * m[i],
            None => s,
        };
    }
    for (d, g) in db.iter_mut().zip(&dz) {
        *d += g;
    }
    (dx, dh_prev, dc_prev)
}

/// Cache of a batched single step.
pub struct LstmStepCache {
    steps: Vec<StepCache>,
    mask: Option<Tensor>,
}

/// One LSTM step over a batch: x [B, in], h_prev/c_prev [B, H]. The optional
/// recurrent-dropout mask [B, H] multiplies h_prev in the recurrent term.
pub fn lstm_step(
    x: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
    p: LstmParams<'_>,
    mask: Option<&Tensor>,
) -> Result<(Tensor, Tensor, LstmStepCache)> {
    p.check()?;
    x.expect_rank(2, "lstm step input")?;
    let (n, hid) = (x.dim(0), p.hidden());
    if x.dim(1) != p.input() {
        return Err(Error::shape("lstm step input vs kernel", x.shape(), p.wx.shape()));
    }
    for t in [Some(h_prev), Some(c_prev), mask].into_iter().flatten() {
        if t.shape() != [n, hid] {
            return Err(Error::shape("lstm state", t.shape(), &[n, hid]));
        }
    }
    let results: Vec<_> = (0..n)
        .into_par_iter()
        .map(|s| step_one(&p, x.row(s), h_prev.row(s), c_prev.row(s), mask.map(|m| m.row(s))))
        .collect();
    let mut hs = Vec::with_capacity(n * hid);
    let mut cs = Vec::with_capacity(n * hid);
    let mut steps = Vec::with_capacity(n);
    for (h, c, cache) in results {
        hs.extend(h);
        cs.extend(c);
        steps.push(cache);
    }
    Ok((
        Tensor::new(vec![n, hid], hs)?,
        Tensor::new(vec![n, hid], cs)?,
        LstmStepCache { steps, mask: mask.cloned() },
    ))
}

pub struct StepGrads {
    pub dx: Tensor,
    pub dh_prev: Tensor,
    pub dc_prev: Tensor,
    pub params: LstmGrads,
}

pub fn lstm_step_backward(cache: &LstmStepCache, dh: &Tensor, dc: &Tensor, p: LstmParams<'_>) -> Result<StepGrads> {
    let n = cache.steps.len();
    let hid = p.hidden();
    for t in [dh, dc] {
        if t.shape() != [n, hid] {
            return Err(Error::shape("lstm step upstream gradient", t.shape(), &[n, hid]));
        }
    }
    let (per, flat) = chunked_map_sum(n, p.grad_len(), |s, acc| {
        step_one_backward(&p, &cache.steps[s], dh.row(s), dc.row(s), cache.mask.as_ref().map(|m| m.row(s)), acc)
    });
    let mut dx = Vec::with_capacity(n * p.input());
    let mut dhp = Vec::with_capacity(n * hid);
    let mut dcp = Vec::with_capacity(n * hid);
    for (a, b, c) in per {
        dx.extend(a);
        dhp.extend(b);
        dcp.extend(c);
    }
    Ok(StepGrads {
        dx: Tensor::new(vec![n, p.input()], dx)?,
        dh_prev: Tensor::new(vec![n, hid], dhp)?,
        dc_prev: Tensor::new(vec![n, hid], dcp)?,
        params: LstmGrads::from_flat(&p, &flat)?,
    })
}

/// Runs one sample's sequence (k steps of `nin` features, read in the given
/// order) from zero state; returns the final hidden state and step caches.
fn run_sequence(p: &LstmParams<'_>, seq: &[f64], order: &[usize], mask: Option<&[f64]>) -> (Vec<f64>, Vec<StepCache>) {
    let (h, nin) = (p.hidden(), p.input());
    let mut hs = vec![0.0; h];
    let mut cs = vec![0.0; h];
    let mut caches = Vec::with_capacity(order.len());
    for &t in order {
        let (hn, cn, cache) = step_one(p, &seq[t * nin..(t + 1) * nin], &hs, &cs, mask);
        hs = hn;
        cs = cn;
        caches.push(cache);
    }
    (hs, caches)
}

/// BPTT for one sample; writes dseq (in original time order) and
/// accumulates parameter grads into `acc`.
fn run_sequence_backward(
    p: &LstmParams<'_>,
    caches: &[StepCache],
    order: &[usize],
    dh_final: &[f64],
    mask: Option<&[f64]>,
    dseq: &mut [f64],
    acc: &mut [f64],
) {
    let (h, nin) = (p.hidden(), p.input());
    let mut dh = dh_final.to_vec();
    let mut dc = vec![0.0; h];
    for (cache, &t) in caches.iter().zip(order).rev() {
        let (dx, dhp, dcp) = step_one_backward(p, cache, &dh, &dc, mask, acc);
        for (d, v) in dseq[t * nin..(t + 1) * nin].iter_mut().zip(dx) {
            *d += v;
        }
        dh = dhp;
        dc = dcp;
    }
}

/// Recurrent-dropout masks [B, H] for the two directions; `None` disables.
#[derive(Clone, Default)]
pub struct BiMasks {
    pub forward: Option<Tensor>,
    pub backward: Option<Tensor>,
}

pub struct BiLstmCache {
    fwd: Vec<Vec<StepCache>>,
    bwd: Vec<Vec<StepCache>>,
    masks: BiMasks,
    k: usize,
    nin: usize,
}

/// Bidirectional encoder over seq [B, k, in]: concatenation of the forward
/// LSTM's final hidden state and the backward LSTM's final hidden state
/// (after reading the reversed sequence). Output [B, 2H].
pub fn bilstm_forward(seq: &Tensor, fwd: LstmParams<'_>, bwd: LstmParams<'_>, masks: BiMasks) -> Result<(Tensor, BiLstmCache)> {
    fwd.check()?;
    bwd.check()?;
    seq.expect_rank(3, "bilstm input")?;
    let (n, k, nin) = (seq.dim(0), seq.dim(1), seq.dim(2));
    if k == 0 {
        return Err(Error::invalid("bilstm needs a non-empty sequence"));
    }
    if nin != fwd.input() || nin != bwd.input() || fwd.hidden() != bwd.hidden() {
        return Err(Error::shape("bilstm input vs kernels", seq.shape(), fwd.wx.shape()));
    }
    let h = fwd.hidden();
    for m in [&masks.forward, &masks.backward].into_iter().flatten() {
        if m.shape() != [n, h] {
            return Err(Error::shape("bilstm recurrent mask", m.shape(), &[n, h]));
        }
    }
    let order_f: Vec<usize> = (0..k).collect();
    let order_b: Vec<usize> = (0..k).rev().collect();
    let per: Vec<_> = (0..n)
        .into_par_iter()
        .map(|s| {
            let x = seq.row(s);
            let (hf, cf) = run_sequence(&fwd, x, &order_f, masks.forward.as_ref().map(|m| m.row(s)));
            let (hb, cb) = run_sequence(&bwd, x, &order_b, masks.backward.as_ref().map(|m| m.row(s)));
            (hf, cf, hb, cb)
        })
        .collect();
    let mut out = Vec::with_capacity(n * 2 * h);
    let mut cache = BiLstmCache { fwd: Vec::with_capacity(n), bwd: Vec::with_capacity(n), masks, k, nin };
    for (hf, cf, hb, cb) in per {
        out.extend(hf);
        out.extend(hb);
        cache.fwd.push(cf);
        cache.bwd.push(cb);
    }
    Ok((Tensor::new(vec![n, 2 * h], out)?, cache))
}

pub struct BiLstmGrads {
    pub dseq: Tensor,
    pub forward: LstmGrads,
    pub backward: LstmGrads,
}

pub fn bilstm_backward(cache: &BiLstmCache, dout: &Tensor, fwd: LstmParams<'_>, bwd: LstmParams<'_>) -> Result<BiLstmGrads> {
    let n = cache.fwd.len();
    let h = fwd.hidden();
    if dout.shape() != [n, 2 * h] {
        return Err(Error::shape("bilstm upstream gradient", dout.shape(), &[n, 2 * h]));
    }
    let (k, nin) = (cache.k, cache.nin);
    let order_f: Vec<usize> = (0..k).collect();
    let order_b: Vec<usize> = (0..k).rev().collect();
    let lf = fwd.grad_len();
    let lb = bwd.grad_len();

    let (rows, flat) = chunked_map_sum(n, lf + lb, |s, acc| {
        let g = dout.row(s);
        let mut ds = vec![0.0; k * nin];
        let (af, ab) = acc.split_at_mut(lf);
        run_sequence_backward(&fwd, &cache.fwd[s], &order_f, &g[..h], cache.masks.forward.as_ref().map(|m| m.row(s)), &mut ds, af);
        run_sequence_backward(&bwd, &cache.bwd[s], &order_b, &g[h..], cache.masks.backward.as_ref().map(|m| m.row(s)), &mut ds, ab);
        ds
    });
    let dseq: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(BiLstmGrads {
        dseq: Tensor::new(vec![n, k, nin], dseq)?,
        forward: LstmGrads::from_flat(&fwd, &flat[..lf])?,
        backward: LstmGrads::from_flat(&bwd, &flat[lf..])?,
    })
}
