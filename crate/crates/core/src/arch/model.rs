use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mim::SparsityMap;
use crate::neuron::{fire_d, fire_d_var, Counts, NeuronConfig, ResetMode};
use crate::numerics::{Graph, Tensor, Var, BN_EPS};

use super::params::{Bound, ParamKind, ParamStore};
use super::spec::{BlockKind, ModelSpec};
use super::ArchError;

/// One spiking-neuron layer; `id` indexes [`Model::sites`].
#[derive(Clone, Debug, PartialEq)]
pub struct SnSite {
    pub id: usize,
    pub name: String,
}

/// Bias-free convolution followed by batch normalization. Linear layers are
/// 1x1 instances acting on every token.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub w: usize,
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
}

impl ConvBn {
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.padding();
        ((h + 2 * p - self.kernel) / self.stride + 1, (w + 2 * p - self.kernel) / self.stride + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SepConv {
    pub sn_in: SnSite,
    pub pw1: ConvBn,
    pub sn_pw: SnSite,
    pub dw: ConvBn,
    pub sn_dw: SnSite,
    pub pw2: ConvBn,
}

/// `fc2(SN(fc1(SN(u))))`; 3x3 convs for the conv block, 1x1 for the transformer MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMixer {
    pub sn_in: SnSite,
    pub fc1: ConvBn,
    pub sn_mid: SnSite,
    pub fc2: ConvBn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub sn_in: SnSite,
    pub q: ConvBn,
    pub sn_q: SnSite,
    pub k: ConvBn,
    pub sn_k: SnSite,
    pub v: ConvBn,
    pub sn_v: SnSite,
    pub sn_attn: SnSite,
    pub proj: ConvBn,
    pub heads: usize,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    /// First layer: real-valued image in, membrane out.
    Encode { conv: ConvBn },
    Downsample { sn: SnSite, conv: ConvBn },
    Conv { sep: SepConv, mixer: ChannelMixer },
    Transformer { sep: SepConv, attn: Attention, mlp: ChannelMixer },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub sn: SnSite,
    /// `[in_features, classes]`.
    pub w: usize,
    pub b: usize,
    pub in_features: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub blocks: Vec<Block>,
    pub head: Head,
    pub sites: Vec<SnSite>,
    /// Convolutions compute only at active centers when a sparsity map is supplied.
    pub sparse_conv: bool,
}

/// Batch statistics observed by one training-mode normalization.
#[derive(Clone, Debug)]
pub struct BnStat {
    pub mean_id: usize,
    pub var_id: usize,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Per-forward options and observations.
#[derive(Clone, Debug)]
pub struct ForwardCtx {
    pub training: bool,
    pub neuron: NeuronConfig,
    /// Carry membrane state between successive forwards (multi-step tasks).
    pub stateful: bool,
    pub states: HashMap<usize, Var>,
    pub record: bool,
    /// Integer activation of every spiking layer, in execution order.
    pub activations: Vec<(usize, Counts)>,
    pub spike_vars: Vec<Var>,
    pub residual_operands: Vec<(Var, Var)>,
    pub sparsity: Option<SparsityMap>,
    pub skip_pre_attention_sepconv: bool,
    /// When false the separable conv feeds the depthwise output straight into the
    /// last pointwise conv, dropping the spiking layer between them.
    pub sepconv_mid_sn: bool,
    pub bn_stats: Vec<BnStat>,
}

impl ForwardCtx {
    pub fn new(neuron: NeuronConfig, training: bool) -> Self {
        Self {
            training,
            neuron,
            stateful: neuron.t_steps > 1,
            states: HashMap::new(),
            record: false,
            activations: Vec::new(),
            spike_vars: Vec::new(),
            residual_operands: Vec::new(),
            sparsity: None,
            skip_pre_attention_sepconv: false,
            sepconv_mid_sn: true,
            bn_stats: Vec::new(),
        }
    }

    pub fn recording(mut self) -> Self {
        self.record = true;
        self
    }

    pub fn reset_state(&mut self) {
        self.states.clear();
    }
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
    sites: Vec<SnSite>,
}

impl Builder {
    fn site(&mut self, name: String) -> SnSite {
        let s = SnSite { id: self.sites.len(), name };
        self.sites.push(s.clone());
        s
    }

    fn uniform(&mut self, shape: &[usize], bound: f32) -> Tensor<f32> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
    }

    fn conv(&mut self, name: String, cin: usize, cout: usize, kernel: usize, stride: usize, groups: usize) -> ConvBn {
        let fan_in = cin / groups * kernel * kernel;
        let w = self.uniform(&[cout, cin / groups, kernel, kernel], (6.0 / fan_in as f32).sqrt());
        let w = self.store.add(format!("{name}.w"), w, ParamKind::Weight);
        let gamma = self.store.add(format!("{name}.bn.gamma"), Tensor::ones(&[cout]), ParamKind::Weight);
        let beta = self.store.add(format!("{name}.bn.beta"), Tensor::zeros(&[cout]), ParamKind::Weight);
        let mean = self.store.add(format!("{name}.bn.running_mean"), Tensor::zeros(&[cout]), ParamKind::Buffer);
        let var = self.store.add(format!("{name}.bn.running_var"), Tensor::ones(&[cout]), ParamKind::Buffer);
        ConvBn { name, cin, cout, kernel, stride, groups, w, gamma, beta, mean, var }
    }

    fn sep_conv(&mut self, p: &str, c: usize) -> SepConv {
        let hidden = 2 * c;
        SepConv {
            sn_in: self.site(format!("{p}.sep.sn_in")),
            pw1: self.conv(format!("{p}.sep.pw1"), c, hidden, 1, 1, 1),
            sn_pw: self.site(format!("{p}.sep.sn_pw")),
            dw: self.conv(format!("{p}.sep.dw"), hidden, hidden, 3, 1, hidden),
            sn_dw: self.site(format!("{p}.sep.sn_dw")),
            pw2: self.conv(format!("{p}.sep.pw2"), hidden, c, 1, 1, 1),
        }
    }

    fn mixer(&mut self, p: &str, c: usize, hidden: usize, kernel: usize) -> ChannelMixer {
        ChannelMixer {
            sn_in: self.site(format!("{p}.sn_in")),
            fc1: self.conv(format!("{p}.fc1"), c, hidden, kernel, 1, 1),
            sn_mid: self.site(format!("{p}.sn_mid")),
            fc2: self.conv(format!("{p}.fc2"), hidden, c, kernel, 1, 1),
        }
    }
}

/// Assembles a model with parameters drawn deterministically from `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model, ArchError> {
    spec.validate()?;
    let mut b = Builder { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed), sites: Vec::new() };
    let mut blocks = Vec::new();
    let mut channels = spec.input_shape[0];
    for (si, stage) in spec.stages.iter().enumerate() {
        for (bi, bs) in stage.iter().enumerate() {
            let p = format!("s{si}.b{bi}");
            let c = bs.channels;
            let block = match bs.kind {
                BlockKind::Downsample if blocks.is_empty() => {
                    Block::Encode { conv: b.conv(format!("{p}.conv"), channels, c, 3, 2, 1) }
                }
                BlockKind::Downsample => Block::Downsample {
                    sn: b.site(format!("{p}.sn")),
                    conv: b.conv(format!("{p}.conv"), channels, c, 3, 2, 1),
                },
                BlockKind::ConvBlock => Block::Conv {
                    sep: b.sep_conv(&p, c),
                    mixer: b.mixer(&format!("{p}.cc"), c, bs.hidden_channels(), 3),
                },
                BlockKind::TransformerBlock => {
                    let sep = b.sep_conv(&p, c);
                    let cv = bs.value_channels();
                    let a = format!("{p}.attn");
                    let attn = Attention {
                        sn_in: b.site(format!("{a}.sn_in")),
                        q: b.conv(format!("{a}.q"), c, c, 1, 1, 1),
                        sn_q: b.site(format!("{a}.sn_q")),
                        k: b.conv(format!("{a}.k"), c, c, 1, 1, 1),
                        sn_k: b.site(format!("{a}.sn_k")),
                        v: b.conv(format!("{a}.v"), c, cv, 1, 1, 1),
                        sn_v: b.site(format!("{a}.sn_v")),
                        sn_attn: b.site(format!("{a}.sn_attn")),
                        proj: b.conv(format!("{a}.proj"), cv, c, 1, 1, 1),
                        heads: bs.heads,
                        scale: spec.attn_scale.unwrap_or(1.0 / ((c / bs.heads) as f64).sqrt()),
                    };
                    let mlp = b.mixer(&format!("{p}.mlp"), c, bs.hidden_channels(), 1);
                    Block::Transformer { sep, attn, mlp }
                }
            };
            blocks.push(block);
            channels = c;
        }
    }
    let sn = b.site("head.sn".into());
    let bound = 1.0 / (channels as f32).sqrt();
    let w = b.uniform(&[channels, spec.num_classes], bound);
    let w = b.store.add("head.w", w, ParamKind::Weight);
    let bias = b.store.add("head.b", Tensor::zeros(&[spec.num_classes]), ParamKind::Weight);
    let head = Head { sn, w, b: bias, in_features: channels, classes: spec.num_classes };
    Ok(Model { spec: spec.clone(), params: b.store, blocks, head, sites: b.sites, sparse_conv: false })
}

struct Pass<'a> {
    model: &'a Model,
    g: &'a mut Graph<f32>,
    bound: &'a Bound,
    ctx: &'a mut ForwardCtx,
}

impl Pass<'_> {
    fn conv_bn(&mut self, c: &ConvBn, x: Var) -> Result<Var, ArchError> {
        let w = self.bound.var(c.w);
        let s = self.g.shape(x).to_vec();
        let center = match (&self.ctx.sparsity, self.model.sparse_conv) {
            (Some(map), true) => {
                if s.len() != 4 || map.batch != s[0] {
                    return Err(ArchError::InvalidInput(format!("sparsity map for batch {} on input {s:?}", map.batch)));
                }
                let (oh, ow) = c.out_hw(s[2], s[3]);
                Some(map.at(oh, ow).ok_or_else(|| {
                    ArchError::InvalidInput(format!("{}: sparsity map has no {oh}x{ow} level", c.name))
                })?)
            }
            _ => None,
        };
        let out = match &center {
            Some(m) => self.g.conv2d_masked(x, w, None, c.stride, c.padding(), c.groups, m.clone())?,
            None => self.g.conv2d(x, w, None, c.stride, c.padding(), c.groups)?,
        };
        let (gamma, beta) = (self.bound.var(c.gamma), self.bound.var(c.beta));
        let y = if self.ctx.training {
            let (y, mean, var) = self.g.batchnorm_train(out, gamma, beta, BN_EPS as f32)?;
            self.ctx.bn_stats.push(BnStat { mean_id: c.mean, var_id: c.var, mean, var });
            y
        } else {
            let store = &self.model.params;
            self.g.channel_affine(out, gamma, beta, store.value(c.mean).data(), store.value(c.var).data(), BN_EPS as f32)?
        };
        Ok(match center {
            Some(m) => self.g.spatial_mask(y, m)?,
            None => y,
        })
    }

    /// Charges the site with `x`, fires `round(clip(u / v_th, 0, D))` and returns
    /// the rate `s / D` consumed by the next layer.
    fn sn(&mut self, site: &SnSite, x: Var) -> Result<Var, ArchError> {
        let cfg = self.ctx.neuron;
        let d = cfg.d_cap;
        let u = match self.ctx.states.get(&site.id) {
            Some(&h) if self.ctx.stateful => {
                let bh = self.g.scale(h, cfg.beta as f32);
                self.g.add(bh, x)?
            }
            _ => x,
        };
        let pre = if cfg.v_th == 1.0 { u } else { self.g.scale(u, (1.0 / cfg.v_th) as f32) };
        let s = fire_d_var(self.g, pre, d);
        debug_assert!(self.g.value(s).data().iter().all(|&v| v.fract() == 0.0 && (0.0..=d as f32).contains(&v)));
        if self.ctx.stateful {
            let h = match cfg.reset_mode {
                ResetMode::None => u,
                ResetMode::Soft => {
                    let vs = self.g.scale(s, cfg.v_th as f32);
                    self.g.sub(u, vs)?
                }
                ResetMode::Hard => {
                    let fired = self.g.value(s).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    let keep = self.g.constant(fired.map(|m| 1.0 - m));
                    let reset = self.g.constant(fired.map(|m| m * cfg.v_reset as f32));
                    let kept = self.g.mul(u, keep)?;
                    self.g.add(kept, reset)?
                }
            };
            self.ctx.states.insert(site.id, h);
        }
        if self.ctx.record {
            self.ctx.activations.push((site.id, fire_d(self.g.value(s), d)));
            self.ctx.spike_vars.push(s);
        }
        Ok(self.g.scale(s, 1.0 / d as f32))
    }

    fn residual(&mut self, a: Var, b: Var) -> Result<Var, ArchError> {
        if self.ctx.record {
            self.ctx.residual_operands.push((a, b));
        }
        Ok(self.g.add(a, b)?)
    }

    fn sep_conv(&mut self, sep: &SepConv, u: Var) -> Result<Var, ArchError> {
        let s = self.sn(&sep.sn_in, u)?;
        let a = self.conv_bn(&sep.pw1, s)?;
        let s = self.sn(&sep.sn_pw, a)?;
        let b = self.conv_bn(&sep.dw, s)?;
        let c = if self.ctx.sepconv_mid_sn { self.sn(&sep.sn_dw, b)? } else { b };
        self.conv_bn(&sep.pw2, c)
    }

    fn mixer(&mut self, m: &ChannelMixer, u: Var) -> Result<Var, ArchError> {
        let s = self.sn(&m.sn_in, u)?;
        let a = self.conv_bn(&m.fc1, s)?;
        let s = self.sn(&m.sn_mid, a)?;
        self.conv_bn(&m.fc2, s)
    }

    fn attention(&mut self, at: &Attention, u: Var) -> Result<Var, ArchError> {
        let d = self.ctx.neuron.d_cap as f32;
        let s = self.sn(&at.sn_in, u)?;
        let q = self.conv_bn(&at.q, s)?;
        let q = self.sn(&at.sn_q, q)?;
        let k = self.conv_bn(&at.k, s)?;
        let k = self.sn(&at.sn_k, k)?;
        let v = self.conv_bn(&at.v, s)?;
        let v = self.sn(&at.sn_v, v)?;
        // rates are counts / D, so the product is A / D^3 for integer A = Q (K^T V)
        let a = self.g.linear_attention(q, k, v, at.heads)?;
        let ua = self.g.scale(a, at.scale as f32 * d);
        let sa = self.sn(&at.sn_attn, ua)?;
        self.conv_bn(&at.proj, sa)
    }

    fn block(&mut self, block: &Block, u: Var) -> Result<Var, ArchError> {
        match block {
            Block::Encode { conv } => self.conv_bn(conv, u),
            Block::Downsample { sn, conv } => {
                let s = self.sn(sn, u)?;
                self.conv_bn(conv, s)
            }
            Block::Conv { sep, mixer } => {
                let y = self.sep_conv(sep, u)?;
                let u1 = self.residual(u, y)?;
                let y = self.mixer(mixer, u1)?;
                self.residual(u1, y)
            }
            Block::Transformer { sep, attn, mlp } => {
                let u1 = if self.ctx.skip_pre_attention_sepconv {
                    u
                } else {
                    let y = self.sep_conv(sep, u)?;
                    self.residual(u, y)?
                };
                let y = self.attention(attn, u1)?;
                let u2 = self.residual(u1, y)?;
                let y = self.mixer(mlp, u2)?;
                self.residual(u2, y)
            }
        }
    }

    fn head(&mut self, u: Var) -> Result<Var, ArchError> {
        let s = self.sn(&self.model.head.sn.clone(), u)?;
        let m = self.g.mean_spatial(s)?;
        let z = self.g.matmul(m, self.bound.var(self.model.head.w))?;
        Ok(self.g.add_bias(z, self.bound.var(self.model.head.b))?)
    }
}

impl Model {
    pub fn bind(&self, g: &mut Graph<f32>, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    fn pass<'a>(&'a self, g: &'a mut Graph<f32>, bound: &'a Bound, ctx: &'a mut ForwardCtx) -> Pass<'a> {
        Pass { model: self, g, bound, ctx }
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), ArchError> {
        if shape.len() != 4 || shape[1..] != self.spec.input_shape {
            return Err(ArchError::InvalidInput(format!(
                "expected [N, {:?}], got {shape:?}",
                self.spec.input_shape
            )));
        }
        Ok(())
    }

    /// Final membrane potential `[N, C, h, w]` before the head's spiking layer.
    pub fn features(&self, g: &mut Graph<f32>, bound: &Bound, x: Var, ctx: &mut ForwardCtx) -> Result<Var, ArchError> {
        self.check_input(g.shape(x))?;
        let mut pass = self.pass(g, bound, ctx);
        let mut u = x;
        for block in &self.blocks {
            u = pass.block(block, u)?;
        }
        Ok(u)
    }

    /// Spike rates `s / D` of the head's spiking layer for feature membrane `u`.
    pub fn output_spikes(&self, g: &mut Graph<f32>, bound: &Bound, u: Var, ctx: &mut ForwardCtx) -> Result<Var, ArchError> {
        let site = self.head.sn.clone();
        self.pass(g, bound, ctx).sn(&site, u)
    }

    pub fn forward(&self, g: &mut Graph<f32>, bound: &Bound, x: Var, ctx: &mut ForwardCtx) -> Result<Var, ArchError> {
        let u = self.features(g, bound, x, ctx)?;
        self.pass(g, bound, ctx).head(u)
    }

    pub fn spike_sep_conv(&self, g: &mut Graph<f32>, bound: &Bound, sep: &SepConv, u: Var, ctx: &mut ForwardCtx) -> Result<Var, ArchError> {
        self.pass(g, bound, ctx).sep_conv(sep, u)
    }

    pub fn channel_conv(&self, g: &mut Graph<f32>, bound: &Bound, m: &ChannelMixer, u: Var, ctx: &mut ForwardCtx) -> Result<Var, ArchError> {
        self.pass(g, bound, ctx).mixer(m, u)
    }

    pub fn e_sdsa(&self, g: &mut Graph<f32>, bound: &Bound, at: &Attention, u: Var, ctx: &mut ForwardCtx) -> Result<Var, ArchError> {
        if g.shape(u).len() != 4 || g.shape(u)[1] != at.q.cin {
            return Err(ArchError::InvalidInput(format!("attention expects {} channels, got {:?}", at.q.cin, g.shape(u))));
        }
        self.pass(g, bound, ctx).attention(at, u)
    }

    /// Runs block `index` on membrane `u`.
    pub fn block_forward(&self, g: &mut Graph<f32>, bound: &Bound, index: usize, u: Var, ctx: &mut ForwardCtx) -> Result<Var, ArchError> {
        let block = self.blocks.get(index).ok_or_else(|| ArchError::InvalidInput(format!("no block {index}")))?;
        self.pass(g, bound, ctx).block(block, u)
    }

    /// Folds the batch statistics of a training forward into the running buffers.
    pub fn apply_bn_stats(&mut self, stats: &[BnStat], momentum: f32) {
        for s in stats {
            for (r, &m) in self.params.value_mut(s.mean_id).data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - momentum) * *r + momentum * m;
            }
            for (r, &v) in self.params.value_mut(s.var_id).data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - momentum) * *r + momentum * v;
            }
        }
    }

    /// Replaces the running statistics with those of one training-mode pass over `x`.
    pub fn calibrate_bn(&mut self, x: &Tensor<f32>) -> Result<(), ArchError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let mut ctx = ForwardCtx::new(NeuronConfig { t_steps: 1, ..self.spec.neuron }, true);
        self.features(&mut g, &bound, xv, &mut ctx)?;
        self.apply_bn_stats(&ctx.bn_stats, 1.0);
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.count_weights()
    }

    /// Eval-mode logits of a static batch.
    pub fn eval_logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, ArchError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let mut ctx = ForwardCtx::new(NeuronConfig { t_steps: 1, ..self.spec.neuron }, false);
        let z = self.forward(&mut g, &bound, xv, &mut ctx)?;
        Ok(g.value(z).clone())
    }

    /// Every convolution with its normalization, in execution order.
    pub fn conv_layers(&self) -> Vec<&ConvBn> {
        let mut out = Vec::new();
        for b in &self.blocks {
            match b {
                Block::Encode { conv } | Block::Downsample { conv, .. } => out.push(conv),
                Block::Conv { sep, mixer } => {
                    out.extend([&sep.pw1, &sep.dw, &sep.pw2, &mixer.fc1, &mixer.fc2]);
                }
                Block::Transformer { sep, attn, mlp } => {
                    out.extend([&sep.pw1, &sep.dw, &sep.pw2, &attn.q, &attn.k, &attn.v, &attn.proj, &mlp.fc1, &mlp.fc2]);
                }
            }
        }
        out
    }
}

