use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::arch::ArchConfig;
use crate::abstraction::Sample;
use crate::error::{Error, Result};
use crate::numcore::checkpoint;
use crate::numcore::layers::{self, NormCache, BN_EPS};
use crate::numcore::loss;
use crate::numcore::lstm::{self, BiLstmCache, BiMasks, LstmParams};
use crate::numcore::{ParamSet, Tensor};
use crate::rng::{self, tag, Rng};

/// Model inputs for a batch: sequences [B, k, 2] and regions [B, 1, M, M].
#[derive(Debug, Clone)]
pub struct Batch {
    pub seq: Tensor,
    pub region: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_samples<'a, I>(samples: I, k: usize, m: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Sample>,
    {
        let mut seq = Vec::new();
        let mut region = Vec::new();
        let mut labels = Vec::new();
        for s in samples {
            if s.sequence.deltas.len() != k || s.region.m != m {
                return Err(Error::Shape {
                    context: "sample (k, M) vs model",
                    left: vec![s.sequence.deltas.len(), s.region.m],
                    right: vec![k, m],
                });
            }
            for d in &s.sequence.deltas {
                seq.push(d.dx);
                seq.push(d.dy);
            }
            region.extend_from_slice(&s.region.values);
            labels.push(s.label.class_index);
        }
        let n = labels.len();
        Ok(Self {
            seq: Tensor::new(vec![n, k, 2], seq)?,
            region: Tensor::new(vec![n, 1, m, m], region)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Whether batch norm uses batch statistics or the running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Batch,
    Running,
}

/// Frozen dropout masks for one forward/backward pass.
#[derive(Clone, Default)]
pub struct DropoutMasks {
    pub recurrent: BiMasks,
    pub cnn: Vec<Option<Tensor>>,
    pub dense: Vec<Option<Tensor>>,
}

#[derive(Clone, Copy)]
pub struct ForwardCtx<'a> {
    pub norm: NormMode,
    pub masks: Option<&'a DropoutMasks>,
}

impl ForwardCtx<'_> {
    pub const INFER: ForwardCtx<'static> = ForwardCtx { norm: NormMode::Running, masks: None };
}

#[derive(Debug, Clone, Copy)]
struct LstmIdx {
    fwd: [usize; 3],
    bwd: [usize; 3],
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    w: usize,
    b: usize,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    lstm: Option<LstmIdx>,
    blocks: Vec<BlockIdx>,
    dense: Vec<(usize, usize)>,
    out: (usize, usize),
}

struct BlockCache {
    input: Tensor,
    pre_relu: Tensor,
    relu_shape: Vec<usize>,
    argmax: Vec<usize>,
    pooled: Tensor,
    norm: Option<NormCache>,
    mask: Option<Tensor>,
}

struct DenseCache {
    input: Tensor,
    pre_relu: Tensor,
    mask: Option<Tensor>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache {
    batch: usize,
    lstm: Option<BiLstmCache>,
    blocks: Vec<BlockCache>,
    cnn_out_shape: Vec<usize>,
    dense: Vec<DenseCache>,
    head_input: Tensor,
    pub probs: Tensor,
    norm: NormMode,
}

pub struct Gradients {
    pub params: ParamSet,
    pub dseq: Tensor,
    pub dregion: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub arch: ArchConfig,
    pub params: ParamSet,
    layout: Layout,
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    arch: ArchConfig,
    seed: u64,
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, r: &mut Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -limit, limit, r)
}

impl Model {
    /// Builds a model with parameters initialized from `arch.seed`.
    pub fn build(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let mut p = ParamSet::new();
        let mut counter = 0u64;
        let mut next_rng = || {
            counter += 1;
            rng::stream(arch.seed, &[tag::INIT, counter])
        };

        let lstm = if arch.variant.uses_sequence() {
            let h = arch.lstm_hidden;
            let mut dir = |name: &str| -> Result<[usize; 3]> {
                let wx = p.push(format!("{name}.wx"), glorot(&[2, 4 * h], 2, 4 * h, &mut next_rng()), true)?;
                let wh = p.push(format!("{name}.wh"), glorot(&[h, 4 * h], h, 4 * h, &mut next_rng()), true)?;
                let mut b = Tensor::zeros(&[4 * h]);
                b.data_mut()[h..2 * h].fill(1.0);
                let b = p.push(format!("{name}.b"), b, true)?;
                Ok([wx, wh, b])
            };
            let fwd = dir("lstm_fwd")?;
            let bwd = dir("lstm_bwd")?;
            Some(LstmIdx { fwd, bwd })
        } else {
            None
        };

        let mut blocks = Vec::new();
        if arch.variant.uses_region() {
            let mut cin = 1;
            for (i, &c) in arch.cnn_filters.iter().enumerate() {
                let w = p.push(format!("conv{i}.w"), glorot(&[c, cin, 3, 3], cin * 9, c * 9, &mut next_rng()), true)?;
                let b = p.push(format!("conv{i}.b"), Tensor::zeros(&[c]), true)?;
                let gamma = p.push(format!("bn{i}.gamma"), Tensor::filled(&[c], 1.0), true)?;
                let beta = p.push(format!("bn{i}.beta"), Tensor::zeros(&[c]), true)?;
                let mean = p.push(format!("bn{i}.running_mean"), Tensor::zeros(&[c]), false)?;
                let var = p.push(format!("bn{i}.running_var"), Tensor::filled(&[c], 1.0), false)?;
                blocks.push(BlockIdx { w, b, gamma, beta, mean, var });
                cin = c;
            }
        }

        let mut width = arch.lstm_width() + arch.cnn_width();
        let mut dense = Vec::new();
        for (i, &d) in arch.dense_sizes.iter().enumerate() {
            let w = p.push(format!("dense{i}.w"), glorot(&[width, d], width, d, &mut next_rng()), true)?;
            let b = p.push(format!("dense{i}.b"), Tensor::zeros(&[d]), true)?;
            dense.push((w, b));
            width = d;
        }
        let n = arch.n_classes();
        let ow = p.push("out.w", glorot(&[width, n], width, n, &mut next_rng()), true)?;
        let ob = p.push("out.b", Tensor::zeros(&[n]), true)?;

        Ok(Self { arch: arch.clone(), params: p, layout: Layout { lstm, blocks, dense, out: (ow, ob) } })
    }

    pub fn n_classes(&self) -> usize {
        self.arch.n_classes()
    }

    pub fn batch(&self, samples: &[Sample]) -> Result<Batch> {
        Batch::from_samples(samples, self.arch.k, self.arch.m)
    }

    /// Replaces the parameters after checking names and shapes.
    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        self.params.check_same_layout(&params)?;
        self.params = params;
        Ok(())
    }

    /// Draws every dropout mask a train-mode pass over `batch` rows needs.
    pub fn draw_masks(&self, batch: usize, r: &mut Rng) -> Result<DropoutMasks> {
        let a = &self.arch;
        let mut masks = DropoutMasks::default();
        if a.variant.uses_sequence() && a.recurrent_dropout > 0.0 {
            let shape = [batch, a.lstm_hidden];
            masks.recurrent = BiMasks {
                forward: Some(layers::dropout_mask(&shape, a.recurrent_dropout, r)?),
                backward: Some(layers::dropout_mask(&shape, a.recurrent_dropout, r)?),
            };
        }
        if a.variant.uses_region() {
            for (&c, &side) in a.cnn_filters.iter().zip(&a.cnn_sides()) {
                let m = (a.dropout > 0.0).then(|| layers::dropout_mask(&[batch, c, side, side], a.dropout, r));
                masks.cnn.push(m.transpose()?);
            }
        }
        for &d in &a.dense_sizes {
            let m = (a.dropout > 0.0).then(|| layers::dropout_mask(&[batch, d], a.dropout, r));
            masks.dense.push(m.transpose()?);
        }
        Ok(masks)
    }

    fn lstm_params<'a>(p: &'a ParamSet, idx: [usize; 3]) -> LstmParams<'a> {
        LstmParams { wx: p.get(idx[0]), wh: p.get(idx[1]), b: p.get(idx[2]) }
    }

    fn check_inputs(&self, seq: &Tensor, region: &Tensor) -> Result<usize> {
        let (k, m) = (self.arch.k, self.arch.m);
        let n = seq.shape().first().copied().unwrap_or(0);
        if seq.shape() != [n, k, 2] {
            return Err(Error::shape("sequence batch", seq.shape(), &[n, k, 2]));
        }
        if region.shape() != [n, 1, m, m] {
            return Err(Error::shape("region batch", region.shape(), &[n, 1, m, m]));
        }
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        Ok(n)
    }

    /// Forward pass with explicit parameters. Returns probabilities [B, n]
    /// inside the cache.
    pub fn forward_with(&self, p: &ParamSet, seq: &Tensor, region: &Tensor, ctx: ForwardCtx<'_>) -> Result<ForwardCache> {
        let n = self.check_inputs(seq, region)?;
        let l = &self.layout;
        let empty = DropoutMasks::default();
        let masks = ctx.masks.unwrap_or(&empty);

        let mut features: Option<Tensor> = None;
        let mut lstm_cache = None;
        if let Some(idx) = l.lstm {
            let (h, cache) = lstm::bilstm_forward(
                seq,
                Self::lstm_params(p, idx.fwd),
                Self::lstm_params(p, idx.bwd),
                masks.recurrent.clone(),
            )?;
            features = Some(h);
            lstm_cache = Some(cache);
        }

        let mut blocks = Vec::with_capacity(l.blocks.len());
        let mut cnn_out_shape = Vec::new();
        if !l.blocks.is_empty() {
            let mut x = region.clone();
            for (i, b) in l.blocks.iter().enumerate() {
                let z = layers::conv2d_forward(&x, p.get(b.w), p.get(b.b))?;
                let a = layers::relu_forward(&z);
                let pooled = layers::maxpool2d_forward(&a)?;
                let mode = match ctx.norm {
                    NormMode::Batch => crate::numcore::Mode::Train,
                    NormMode::Running => crate::numcore::Mode::Infer,
                };
                let (y, norm) =
                    layers::batchnorm_forward(&pooled.y, p.get(b.gamma), p.get(b.beta), p.get(b.mean), p.get(b.var), mode)?;
                let mask = masks.cnn.get(i).cloned().flatten();
                let out = match &mask {
                    Some(m) => layers::mul(&y, m)?,
                    None => y,
                };
                blocks.push(BlockCache {
                    input: x,
                    pre_relu: z,
                    relu_shape: a.shape().to_vec(),
                    argmax: pooled.argmax,
                    pooled: pooled.y,
                    norm,
                    mask,
                });
                x = out;
            }
            cnn_out_shape = x.shape().to_vec();
            let width = x.len() / n;
            let flat = x.reshape(&[n, width])?;
            features = Some(match features {
                Some(h) => layers::concat_features(&h, &flat)?,
                None => flat,
            });
        }
        let mut h = features.ok_or_else(|| Error::invalid("model has no input branch"))?;

        let mut dense = Vec::with_capacity(l.dense.len());
        for (i, &(w, b)) in l.dense.iter().enumerate() {
            let z = layers::dense_forward(&h, p.get(w), p.get(b))?;
            let a = layers::relu_forward(&z);
            let mask = masks.dense.get(i).cloned().flatten();
            let out = match &mask {
                Some(m) => layers::mul(&a, m)?,
                None => a,
            };
            dense.push(DenseCache { input: h, pre_relu: z, mask });
            h = out;
        }
        let logits = layers::dense_forward(&h, p.get(l.out.0), p.get(l.out.1))?;
        let probs = loss::softmax(&logits)?;
        Ok(ForwardCache {
            batch: n,
            lstm: lstm_cache,
            blocks,
            cnn_out_shape,
            dense,
            head_input: h,
            probs,
            norm: ctx.norm,
        })
    }

    pub fn forward(&self, seq: &Tensor, region: &Tensor, ctx: ForwardCtx<'_>) -> Result<ForwardCache> {
        self.forward_with(&self.params, seq, region, ctx)
    }

    /// Probabilities in inference mode.
    pub fn predict_batch(&self, batch: &Batch) -> Result<Tensor> {
        Ok(self.forward(&batch.seq, &batch.region, ForwardCtx::INFER)?.probs)
    }

    /// Gradients of the batch-mean cross-entropy w.r.t. parameters and inputs.
    pub fn backward_with(&self, p: &ParamSet, cache: &ForwardCache, labels: &[usize]) -> Result<Gradients> {
        let l = &self.layout;
        let n = cache.batch;
        let mut grads = p.zeros_like();
        let dlogits = loss::softmax_cross_entropy_backward(&cache.probs, labels)?;
        let g = layers::dense_backward(&cache.head_input, p.get(l.out.0), &dlogits)?;
        *grads.get_mut(l.out.0) = g.dw;
        *grads.get_mut(l.out.1) = g.db;
        let mut dh = g.dx;
        for (dc, &(w, b)) in cache.dense.iter().zip(&l.dense).rev() {
            if let Some(m) = &dc.mask {
                dh = layers::mul(&dh, m)?;
            }
            let dz = layers::relu_backward(&dc.pre_relu, &dh)?;
            let g = layers::dense_backward(&dc.input, p.get(w), &dz)?;
            *grads.get_mut(w) = g.dw;
            *grads.get_mut(b) = g.db;
            dh = g.dx;
        }

        let lstm_width = self.arch.lstm_width();
        let (dl, dcnn) = match (l.lstm.is_some(), !l.blocks.is_empty()) {
            (true, true) => {
                let (a, b) = layers::split_features(&dh, lstm_width)?;
                (Some(a), Some(b))
            }
            (true, false) => (Some(dh), None),
            (false, true) => (None, Some(dh)),
            (false, false) => (None, None),
        };

        let (k, m) = (self.arch.k, self.arch.m);
        let mut dregion = Tensor::zeros(&[n, 1, m, m]);
        if let Some(d) = dcnn {
            let mut d = d.reshape(&cache.cnn_out_shape)?;
            for (bc, b) in cache.blocks.iter().zip(&l.blocks).rev() {
                if let Some(mask) = &bc.mask {
                    d = layers::mul(&d, mask)?;
                }
                let (dpool, dgamma, dbeta) = match (&bc.norm, cache.norm) {
                    (Some(nc), NormMode::Batch) => {
                        let g = layers::batchnorm_backward(nc, p.get(b.gamma), &d)?;
                        (g.dx, g.dgamma, g.dbeta)
                    }
                    _ => norm_running_backward(&bc.pooled, p.get(b.gamma), p.get(b.mean), p.get(b.var), &d)?,
                };
                *grads.get_mut(b.gamma) = dgamma;
                *grads.get_mut(b.beta) = dbeta;
                let da = layers::maxpool2d_backward(&bc.relu_shape, &bc.argmax, &dpool)?;
                let dz = layers::relu_backward(&bc.pre_relu, &da)?;
                let g = layers::conv2d_backward(&bc.input, p.get(b.w), &dz)?;
                *grads.get_mut(b.w) = g.dw;
                *grads.get_mut(b.b) = g.db;
                d = g.dx;
            }
            dregion = d;
        }

        let mut dseq = Tensor::zeros(&[n, k, 2]);
        if let (Some(d), Some(idx), Some(lc)) = (dl, l.lstm, &cache.lstm) {
            let g = lstm::bilstm_backward(lc, &d, Self::lstm_params(p, idx.fwd), Self::lstm_params(p, idx.bwd))?;
            let [a, b, c] = idx.fwd;
            *grads.get_mut(a) = g.forward.dwx;
            *grads.get_mut(b) = g.forward.dwh;
            *grads.get_mut(c) = g.forward.db;
            let [a, b, c] = idx.bwd;
            *grads.get_mut(a) = g.backward.dwx;
            *grads.get_mut(b) = g.backward.dwh;
            *grads.get_mut(c) = g.backward.db;
            dseq = g.dseq;
        }
        Ok(Gradients { params: grads, dseq, dregion })
    }

    pub fn backward(&self, cache: &ForwardCache, labels: &[usize]) -> Result<Gradients> {
        self.backward_with(&self.params, cache, labels)
    }

    /// Moves the running batch-norm statistics toward the batch statistics
    /// recorded in `cache`.
    pub fn apply_running_updates(&mut self, cache: &ForwardCache) {
        for (bc, b) in cache.blocks.iter().zip(&self.layout.blocks) {
            if let Some(nc) = &bc.norm {
                let (m, v) = layers::batchnorm_running_update(self.params.get(b.mean), self.params.get(b.var), nc);
                *self.params.get_mut(b.mean) = m;
                *self.params.get_mut(b.var) = v;
            }
        }
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let d = Descriptor { arch: self.arch.clone(), seed: self.arch.seed };
        checkpoint::write_checkpoint(w, &d, &self.params)
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let (d, params): (Descriptor, ParamSet) = checkpoint::read_checkpoint(r)?;
        let mut model = Self::build(&d.arch)?;
        model.set_params(params)?;
        Ok(model)
    }
}

/// Backward of batch norm evaluated with fixed running statistics.
fn norm_running_backward(
    x: &Tensor,
    gamma: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c) = (x.dim(0), x.dim(1));
    let inner = x.len() / (n * c).max(1);
    let inv: Vec<f64> = var.data().iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            for i in 0..inner {
                let j = (s * c + ch) * inner + i;
                let g = dy.data()[j];
                dx[j] = g * gamma.data()[ch] * inv[ch];
                dgamma[ch] += g * (x.data()[j] - mean.data()[ch]) * inv[ch];
                dbeta[ch] += g;
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), dx)?, Tensor::new(vec![c], dgamma)?, Tensor::new(vec![c], dbeta)?))
}

/// Whole-model batch loss as a finite-difference target. Tensors are
/// `[seq, region, params...]` in parameter order.
pub struct ModelLossTarget<'a> {
    pub model: &'a Model,
    pub labels: Vec<usize>,
    pub masks: Option<DropoutMasks>,
    pub norm: NormMode,
}

impl ModelLossTarget<'_> {
    pub fn tensors(&self, batch: &Batch) -> Vec<Tensor> {
        let mut t = vec![batch.seq.clone(), batch.region.clone()];
        t.extend(self.model.params.iter().map(|p| p.tensor.clone()));
        t
    }

    fn unpack(&self, t: &[Tensor]) -> Result<ParamSet> {
        let mut p = self.model.params.clone();
        if t.len() != p.len() + 2 {
            return Err(Error::invalid("tensor count differs from model layout"));
        }
        for (i, x) in t[2..].iter().enumerate() {
            *p.get_mut(i) = x.clone();
        }
        Ok(p)
    }

    fn ctx(&self) -> ForwardCtx<'_> {
        ForwardCtx { norm: self.norm, masks: self.masks.as_ref() }
    }
}

impl crate::numcore::gradcheck::GradCheckTarget for ModelLossTarget<'_> {
    fn loss(&self, t: &[Tensor]) -> Result<f64> {
        let p = self.unpack(t)?;
        let cache = self.model.forward_with(&p, &t[0], &t[1], self.ctx())?;
        loss::cross_entropy_labels(&self.labels, &cache.probs)
    }

    fn gradients(&self, t: &[Tensor]) -> Result<Vec<Tensor>> {
        let p = self.unpack(t)?;
        let cache = self.model.forward_with(&p, &t[0], &t[1], self.ctx())?;
        let g = self.model.backward_with(&p, &cache, &self.labels)?;
        let mut out = vec![g.dseq, g.dregion];
        out.extend(g.params.iter().map(|q| q.tensor.clone()));
        Ok(out)
    }
}
