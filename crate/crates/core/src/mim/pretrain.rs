//! Encoder-decoder masked image modeling and the effective-rank diagnostic.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{build_model, Bound, ForwardCtx, Model, ModelSpec, ParamKind, ParamStore};
use crate::numerics::{AdamW, AdamWConfig, Graph, Tensor, Var};

use super::{make_mask, MaskPlan, MimError, SparsityMap};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MimConfig {
    pub patch_size: usize,
    pub mask_ratio: f64,
    pub decoder_width: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub bn_momentum: f32,
    pub seed: u64,
}

impl Default for MimConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            mask_ratio: 0.6,
            decoder_width: 128,
            decoder_layers: 2,
            decoder_heads: 4,
            batch_size: 16,
            optim: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

struct DecoderLayer {
    ln1: (usize, usize),
    q: (usize, usize),
    k: (usize, usize),
    v: (usize, usize),
    o: (usize, usize),
    ln2: (usize, usize),
    fc1: (usize, usize),
    fc2: (usize, usize),
}

/// Small pre-norm softmax transformer mapping encoder tokens to patch pixels.
pub struct Decoder {
    pub params: ParamStore,
    pub width: usize,
    pub heads: usize,
    pub tokens: usize,
    pub in_features: usize,
    pub patch_pixels: usize,
    embed: (usize, usize),
    mask_token: usize,
    pos: usize,
    layers: Vec<DecoderLayer>,
    ln_f: (usize, usize),
    out: (usize, usize),
}

impl Decoder {
    pub fn new(in_features: usize, tokens: usize, patch_pixels: usize, cfg: &MimConfig, seed: u64) -> Result<Self, MimError> {
        let (w, heads) = (cfg.decoder_width, cfg.decoder_heads);
        if heads == 0 || w % heads != 0 {
            return Err(MimError::InvalidParameter(format!("decoder width {w} not divisible by {heads} heads")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut linear = |p: &mut ParamStore, name: &str, i: usize, o: usize| {
            let b = (6.0 / (i + o) as f32).sqrt();
            let wt = Tensor::from_fn(&[i, o], |_| rng.gen_range(-b..b));
            (p.add(format!("{name}.w"), wt, ParamKind::Weight), p.add(format!("{name}.b"), Tensor::zeros(&[o]), ParamKind::Weight))
        };
        let norm = |p: &mut ParamStore, name: &str| {
            (p.add(format!("{name}.gamma"), Tensor::ones(&[w]), ParamKind::Weight), p.add(format!("{name}.beta"), Tensor::zeros(&[w]), ParamKind::Weight))
        };
        let embed = linear(&mut p, "dec.embed", in_features, w);
        let mut layers = Vec::new();
        for l in 0..cfg.decoder_layers {
            let n = format!("dec.l{l}");
            layers.push(DecoderLayer {
                ln1: norm(&mut p, &format!("{n}.ln1")),
                q: linear(&mut p, &format!("{n}.q"), w, w),
                k: linear(&mut p, &format!("{n}.k"), w, w),
                v: linear(&mut p, &format!("{n}.v"), w, w),
                o: linear(&mut p, &format!("{n}.o"), w, w),
                ln2: norm(&mut p, &format!("{n}.ln2")),
                fc1: linear(&mut p, &format!("{n}.fc1"), w, 2 * w),
                fc2: linear(&mut p, &format!("{n}.fc2"), 2 * w, w),
            });
        }
        let ln_f = norm(&mut p, "dec.ln_f");
        let out = linear(&mut p, "dec.out", w, patch_pixels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mask_token = p.add("dec.mask_token", Tensor::from_fn(&[w], |_| rng.gen_range(-0.02..0.02)), ParamKind::Weight);
        let pos = p.add("dec.pos", Tensor::from_fn(&[tokens, w], |_| rng.gen_range(-0.02..0.02)), ParamKind::Weight);
        Ok(Self { params: p, width: w, heads, tokens, in_features, patch_pixels, embed, mask_token, pos, layers, ln_f, out })
    }

    fn linear(g: &mut Graph<f32>, b: &Bound, x: Var, (w, bias): (usize, usize)) -> Result<Var, MimError> {
        let y = g.matmul(x, b.var(w))?;
        Ok(g.add_bias(y, b.var(bias))?)
    }

    fn norm(g: &mut Graph<f32>, b: &Bound, x: Var, (gamma, beta): (usize, usize)) -> Result<Var, MimError> {
        Ok(g.layernorm(x, b.var(gamma), b.var(beta), 1e-5)?)
    }

    fn attention(&self, g: &mut Graph<f32>, b: &Bound, x: Var, layer: &DecoderLayer, n: usize) -> Result<Var, MimError> {
        let (l, w, h) = (self.tokens, self.width, self.heads);
        let dh = w / h;
        let split = |g: &mut Graph<f32>, y: Var| -> Result<Var, MimError> {
            let y = g.reshape(y, &[n, l, h, dh])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            Ok(g.reshape(y, &[n * h, l, dh])?)
        };
        let q = Self::linear(g, b, x, layer.q)?;
        let q = split(g, q)?;
        let k = Self::linear(g, b, x, layer.k)?;
        let k = split(g, k)?;
        let v = Self::linear(g, b, x, layer.v)?;
        let v = split(g, v)?;
        let kt = g.permute(k, &[0, 2, 1])?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, 1.0 / (dh as f32).sqrt());
        let a = g.softmax(s);
        let o = g.matmul(a, v)?;
        let o = g.reshape(o, &[n, h, l, dh])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[n * l, w])?;
        Self::linear(g, b, o, layer.o)
    }

    /// `[N, C, h, w]` encoder tokens to `[N, L, patch_pixels]`; rows flagged in
    /// `masked` (`[N, L]`) are replaced by the mask token first.
    pub fn forward(&self, g: &mut Graph<f32>, b: &Bound, feats: Var, masked: Arc<[bool]>) -> Result<Var, MimError> {
        let s = g.shape(feats).to_vec();
        let (n, c, l) = (s[0], s[1], s[2] * s[3]);
        if c != self.in_features || l != self.tokens {
            return Err(MimError::InvalidParameter(format!("decoder built for {} tokens of {}, got {s:?}", self.tokens, self.in_features)));
        }
        let w = self.width;
        let x = g.reshape(feats, &[n, c, l])?;
        let x = g.permute(x, &[0, 2, 1])?;
        let x = g.reshape(x, &[n * l, c])?;
        let x = Self::linear(g, b, x, self.embed)?;
        let x = g.reshape(x, &[n, l, w])?;
        let x = g.replace_rows(x, b.var(self.mask_token), masked)?;
        let mut x = g.add_broadcast(x, b.var(self.pos))?;
        for layer in &self.layers {
            let h = Self::norm(g, b, x, layer.ln1)?;
            let h = g.reshape(h, &[n * l, w])?;
            let a = self.attention(g, b, h, layer, n)?;
            let a = g.reshape(a, &[n, l, w])?;
            x = g.add(x, a)?;
            let h = Self::norm(g, b, x, layer.ln2)?;
            let h = g.reshape(h, &[n * l, w])?;
            let h = Self::linear(g, b, h, layer.fc1)?;
            let h = g.gelu(h);
            let h = Self::linear(g, b, h, layer.fc2)?;
            let h = g.reshape(h, &[n, l, w])?;
            x = g.add(x, h)?;
        }
        let x = Self::norm(g, b, x, self.ln_f)?;
        let x = g.reshape(x, &[n * l, w])?;
        let x = Self::linear(g, b, x, self.out)?;
        Ok(g.reshape(x, &[n, l, self.patch_pixels])?)
    }
}

/// `[N, C, H, W]` to `[N, L, C * p * p]`, patches in row-major grid order.
pub fn patchify(x: &Tensor<f32>, p: usize) -> Result<Tensor<f32>, MimError> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(MimError::Indivisible { h, w, p });
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for py in 0..gh {
            for px in 0..gw {
                for ch in 0..c {
                    for y in 0..p {
                        for xx in 0..p {
                            out.push(x.data()[((b * c + ch) * h + py * p + y) * w + px * p + xx]);
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[n, gh * gw, c * p * p], out)?)
}

/// Standardizes each patch (last axis) to zero mean and unit variance, with the
/// standard deviation floored at `1e-6`.
pub fn normalize_patches(t: &Tensor<f32>) -> Tensor<f32> {
    let k = *t.shape().last().unwrap();
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(k) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / k as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / k as f64;
        let std = var.sqrt().max(1e-6);
        row.iter_mut().for_each(|v| *v = ((*v as f64 - mean) / std) as f32);
    }
    Tensor::new(t.shape(), out).unwrap()
}

/// Mean squared error over the masked patches only; `masked` is `[N, L]`.
pub fn masked_mse(g: &mut Graph<f32>, pred: Var, target: &Tensor<f32>, masked: &[bool]) -> Result<Var, MimError> {
    let k = *target.shape().last().unwrap();
    let count = masked.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(MimError::InvalidParameter("no masked patches".into()));
    }
    let weights = Tensor::new(target.shape(), masked.iter().flat_map(|&m| std::iter::repeat_n(m as u8 as f32, k)).collect())?;
    let t = g.constant(target.clone());
    let d = g.sub(pred, t)?;
    let sq = g.mul(d, d)?;
    let wv = g.constant(weights);
    let sq = g.mul(sq, wv)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / (count * k) as f32))
}

/// Effective rank of a `[n, c]` matrix; `degenerate` marks the all-zero case, defined as 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EffectiveRank {
    pub value: f64,
    pub degenerate: bool,
}

pub fn effective_rank(z: &Tensor<f64>) -> Result<EffectiveRank, MimError> {
    if z.ndim() != 2 || !z.all_finite() {
        return Err(MimError::InvalidParameter(format!("effective rank needs a finite matrix, got {:?}", z.shape())));
    }
    let m = nalgebra::DMatrix::from_row_slice(z.shape()[0], z.shape()[1], z.data());
    let sv = m.singular_values();
    let total: f64 = sv.iter().sum();
    if total == 0.0 {
        return Ok(EffectiveRank { value: 1.0, degenerate: true });
    }
    let h: f64 = sv.iter().map(|&s| s / total).filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum();
    Ok(EffectiveRank { value: h.exp(), degenerate: false })
}

/// Loss and rank time series of a pretraining run; `ranks` holds `(step, rank)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MimReport {
    pub losses: Vec<f64>,
    pub ranks: Vec<(usize, f64)>,
}

/// Encoder with sparse convolutions, decoder and their shared optimizer.
pub struct MimPretrainer {
    pub encoder: Model,
    pub decoder: Decoder,
    pub cfg: MimConfig,
    opt: AdamW,
    pub steps: usize,
}

impl MimPretrainer {
    pub fn new(spec: &ModelSpec, cfg: MimConfig) -> Result<Self, MimError> {
        if spec.neuron.t_steps != 1 {
            return Err(MimError::InvalidParameter("pretraining uses t_steps = 1".into()));
        }
        let mut encoder = build_model(spec, cfg.seed)?;
        encoder.sparse_conv = true;
        let stride = spec.total_stride();
        if stride != cfg.patch_size {
            return Err(MimError::InvalidParameter(format!(
                "patch size {} must equal the encoder stride {stride} so tokens align with patches",
                cfg.patch_size
            )));
        }
        let [c, h, w] = spec.input_shape;
        if h % stride != 0 || w % stride != 0 {
            return Err(MimError::Indivisible { h, w, p: stride });
        }
        let feat = spec.blocks().last().map(|b| b.channels).unwrap_or(c);
        let tokens = (h / stride) * (w / stride);
        let decoder = Decoder::new(feat, tokens, c * stride * stride, &cfg, cfg.seed.wrapping_add(1))?;
        Ok(Self { encoder, decoder, cfg, opt: AdamW::new(cfg.optim), steps: 0 })
    }

    fn plans(&self, n: usize) -> Result<Vec<MaskPlan>, MimError> {
        let [_, h, w] = self.encoder.spec.input_shape;
        (0..n)
            .map(|i| {
                let seed = self.cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add((self.steps * 4096 + i) as u64);
                make_mask((h, w), self.cfg.patch_size, self.cfg.mask_ratio, seed)
            })
            .collect()
    }

    /// Spike rates of the encoder's output tokens.
    fn encode(&self, g: &mut Graph<f32>, b: &Bound, x: Var, ctx: &mut ForwardCtx) -> Result<Var, MimError> {
        let u = self.encoder.features(g, b, x, ctx)?;
        Ok(self.encoder.output_spikes(g, b, u, ctx)?)
    }

    /// One optimizer step on `batch`; returns the loss before the update.
    pub fn step(&mut self, batch: &Tensor<f32>) -> Result<f64, MimError> {
        let n = batch.shape()[0];
        let plans = self.plans(n)?;
        let smap = SparsityMap::from_plans(&plans, 1);
        let [c, h, w] = self.encoder.spec.input_shape;
        let vis: Vec<bool> = plans.iter().flat_map(|p| p.pixel_visibility()).collect();
        let mut masked_input = batch.clone();
        for (i, v) in masked_input.data_mut().iter_mut().enumerate() {
            let (b, pix) = (i / (c * h * w), i % (h * w));
            if !vis[b * h * w + pix] {
                *v = 0.0;
            }
        }
        let token_mask: Vec<bool> = plans.iter().flat_map(|p| p.masked.iter().copied()).collect();
        let target = normalize_patches(&patchify(batch, self.cfg.patch_size)?);

        let mut g = Graph::new();
        let be = self.encoder.bind(&mut g, true);
        let bd = self.decoder.params.bind(&mut g, true);
        let x = g.constant(masked_input);
        let mut ctx = ForwardCtx::new(self.encoder.spec.neuron, true);
        ctx.sparsity = Some(smap);
        let feats = self.encode(&mut g, &be, x, &mut ctx)?;
        let pred = self.decoder.forward(&mut g, &bd, feats, Arc::from(token_mask.clone()))?;
        let loss = masked_mse(&mut g, pred, &target, &token_mask)?;
        let l = g.value(loss).item() as f64;
        if !l.is_finite() {
            return Err(MimError::NonFiniteLoss { step: self.steps });
        }
        g.backward(loss)?;
        let mut grads = self.encoder.params.collect_grads(&g, &be);
        grads.extend(self.decoder.params.collect_grads(&g, &bd));
        self.encoder.apply_bn_stats(&ctx.bn_stats, self.cfg.bn_momentum);
        let mut params = self.encoder.params.weights_mut();
        params.extend(self.decoder.params.weights_mut());
        self.opt.step(&mut params, &grads)?;
        self.steps += 1;
        Ok(l)
    }

    /// Eval-mode encoder output tokens `[N * L, C]` of a fully visible batch.
    pub fn tokens(&self, batch: &Tensor<f32>) -> Result<Tensor<f64>, MimError> {
        let mut g = Graph::new();
        let b = self.encoder.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let mut ctx = ForwardCtx::new(self.encoder.spec.neuron, false);
        let z = self.encode(&mut g, &b, x, &mut ctx)?;
        let s = g.shape(z).to_vec();
        let (n, c, l) = (s[0], s[1], s[2] * s[3]);
        let v = g.value(z).data();
        let mut out = Vec::with_capacity(v.len());
        for bi in 0..n {
            for t in 0..l {
                for ch in 0..c {
                    out.push(v[(bi * c + ch) * l + t] as f64);
                }
            }
        }
        Ok(Tensor::new(&[n * l, c], out)?)
    }

    /// `steps` updates over shuffled minibatches of `data`, recording the effective
    /// rank of `heldout` tokens before any update, after step 1 and every `rank_every` steps.
    pub fn run(&mut self, data: &Tensor<f32>, heldout: &Tensor<f32>, steps: usize, rank_every: usize) -> Result<MimReport, MimError> {
        let n = data.shape()[0];
        let bs = self.cfg.batch_size.min(n).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0xda7a);
        let mut order: Vec<usize> = (0..n).collect();
        let mut cursor = n;
        let mut report = MimReport::default();
        report.ranks.push((0, effective_rank(&self.tokens(heldout)?)?.value));
        for s in 1..=steps {
            if cursor + bs > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let batch = crate::engine::gather_rows(data, &order[cursor..cursor + bs]);
            cursor += bs;
            report.losses.push(self.step(&batch)?);
            if rank_every > 0 && (s == 1 || s % rank_every == 0 || s == steps) {
                report.ranks.push((s, effective_rank(&self.tokens(heldout)?)?.value));
            }
        }
        Ok(report)
    }
}

pub fn mim_pretrain_step(trainer: &mut MimPretrainer, batch: &Tensor<f32>) -> Result<f64, MimError> {
    trainer.step(batch)
}

/// The same weights with dense convolutions, for fine-tuning.
pub fn finetune_convert(encoder: &Model) -> Model {
    let mut m = encoder.clone();
    m.sparse_conv = false;
    m
}
