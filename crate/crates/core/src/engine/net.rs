//! Inference graph compiled from a trained [`Model`].
//!
//! Normalization is folded into every convolution and the `1 / D` rate scaling of
//! spike inputs is baked into the weights, so spiking layers pass raw binary
//! spikes. Weights are quantized once onto a fixed-point grid; membranes are exact
//! sums of those quantized terms, which makes every execution order agree bit for bit.

use crate::arch::{Block, ConvBn, Model};
use crate::neuron::{fire_value, NeuronConfig, ResetMode};
use crate::numerics::BN_EPS;

/// Fractional bits of the membrane fixed-point grid.
pub const FRAC_BITS: u32 = 48;

pub fn to_fixed(v: f64) -> i128 {
    (v * (1u64 << FRAC_BITS) as f64).round() as i128
}

pub fn from_fixed(v: i128) -> f64 {
    v as f64 / (1u64 << FRAC_BITS) as f64
}

/// Convolution with normalization folded in.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedConv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub wq: Vec<i128>,
    pub bq: Vec<i128>,
}

impl FoldedConv {
    fn fold(model: &Model, c: &ConvBn, in_scale: f64, in_hw: (usize, usize)) -> Self {
        let p = &model.params;
        let (w, gamma, beta) = (p.value(c.w).data(), p.value(c.gamma).data(), p.value(c.beta).data());
        let (mean, var) = (p.value(c.mean).data(), p.value(c.var).data());
        let per_out = w.len() / c.cout;
        let mut weight = Vec::with_capacity(w.len());
        let mut bias = Vec::with_capacity(c.cout);
        for co in 0..c.cout {
            let s = gamma[co] as f64 / (var[co] as f64 + BN_EPS).sqrt();
            weight.extend(w[co * per_out..(co + 1) * per_out].iter().map(|&x| x as f64 * s * in_scale));
            bias.push(beta[co] as f64 - mean[co] as f64 * s);
        }
        let wq = weight.iter().map(|&v| to_fixed(v)).collect();
        let bq = bias.iter().map(|&v| to_fixed(v)).collect();
        Self {
            name: c.name.clone(),
            cin: c.cin,
            cout: c.cout,
            kernel: c.kernel,
            stride: c.stride,
            padding: c.padding(),
            groups: c.groups,
            in_hw,
            out_hw: c.out_hw(in_hw.0, in_hw.1),
            weight,
            bias,
            wq,
            bq,
        }
    }

    pub fn in_per_group(&self) -> usize {
        self.cin / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.cout / self.groups
    }

    /// Output rows (or columns) reached from input coordinate `i` along an axis of `out` extent.
    pub fn reach(&self, i: usize, out: usize) -> std::ops::Range<usize> {
        let (s, p, k) = (self.stride as i64, self.padding as i64, self.kernel as i64);
        let i = i as i64;
        // need 0 <= i - o*s + p < k
        let lo = (i + p - k + 1).max(0);
        let lo = (lo + s - 1) / s;
        let hi = ((i + p) / s + 1).min(out as i64);
        if hi <= lo {
            0..0
        } else {
            lo as usize..hi as usize
        }
    }

    /// Adds `mult` copies of the weights fed by input `(ci, iy, ix)` into `mem`;
    /// returns the number of accumulations performed.
    pub fn scatter(&self, mem: &mut [i128], ci: usize, iy: usize, ix: usize, mult: i128) -> u64 {
        let (oh, ow) = self.out_hw;
        let (cin_g, cout_g, k) = (self.in_per_group(), self.out_per_group(), self.kernel);
        let group = ci / cin_g;
        let local = ci % cin_g;
        let (ys, xs) = (self.reach(iy, oh), self.reach(ix, ow));
        let mut ops = 0u64;
        for co in group * cout_g..(group + 1) * cout_g {
            let wbase = (co * cin_g + local) * k * k;
            for oy in ys.clone() {
                let ky = iy + self.padding - oy * self.stride;
                for ox in xs.clone() {
                    let kx = ix + self.padding - ox * self.stride;
                    mem[(co * oh + oy) * ow + ox] += mult * self.wq[wbase + ky * k + kx];
                    ops += 1;
                }
            }
        }
        ops
    }

    /// Fresh membrane bank holding the bias.
    pub fn bias_bank(&self) -> Vec<i128> {
        let plane = self.out_hw.0 * self.out_hw.1;
        self.bq.iter().flat_map(|&b| std::iter::repeat_n(b, plane)).collect()
    }

    /// Real-valued convolution of a `[C, H, W]` image, quantized onto the membrane grid.
    pub fn encode(&self, x: &[f32]) -> Vec<i128> {
        let (h, w) = self.in_hw;
        let (oh, ow) = self.out_hw;
        let (cin_g, cout_g, k) = (self.in_per_group(), self.out_per_group(), self.kernel);
        let mut out = vec![0i128; self.cout * oh * ow];
        for co in 0..self.cout {
            let group = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = self.bias[co];
                    for local in 0..cin_g {
                        let ci = group * cin_g + local;
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as i64 - self.padding as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as i64 - self.padding as i64;
                                if ix < 0 || ix >= w as i64 {
                                    continue;
                                }
                                let xv = x[(ci * h + iy as usize) * w + ix as usize] as f64;
                                acc += xv * self.weight[((co * cin_g + local) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = to_fixed(acc);
                }
            }
        }
        out
    }

    /// Nominal multiply-accumulates of one dense evaluation.
    pub fn macs(&self) -> u64 {
        (self.cout * self.out_hw.0 * self.out_hw.1 * self.in_per_group() * self.kernel * self.kernel) as u64
    }
}

/// Linear readout over spatially pooled spikes.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedHead {
    pub in_features: usize,
    pub classes: usize,
    /// `[in_features, classes]`, already divided by `H * W * D`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub wq: Vec<i128>,
    pub bq: Vec<i128>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeOp {
    /// Real-valued input image to membrane.
    Encode { conv: FoldedConv },
    /// Spikes of `src` to a membrane.
    Project { src: usize, conv: FoldedConv },
    Residual { a: usize, b: usize },
    /// Membrane of `src` to spikes; thresholds and resets are in units of `unit`.
    Fire { src: usize, site: usize, unit: f64 },
    /// Integer `Q (K^T V)` per head, membrane in units of one product term.
    Attention { q: usize, k: usize, v: usize, heads: usize },
    Head { src: usize, head: FoldedHead },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: NodeOp,
    /// Per-sample `[C, H, W]` of the node's output.
    pub shape: [usize; 3],
}

impl Node {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_fire(&self) -> bool {
        matches!(self.op, NodeOp::Fire { .. })
    }

    pub fn inputs(&self) -> Vec<usize> {
        match &self.op {
            NodeOp::Encode { .. } => vec![],
            NodeOp::Project { src, .. } | NodeOp::Fire { src, .. } | NodeOp::Head { src, .. } => vec![*src],
            NodeOp::Residual { a, b } => vec![*a, *b],
            NodeOp::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpikingNet {
    pub nodes: Vec<Node>,
    pub neuron: NeuronConfig,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

impl SpikingNet {
    pub fn d_cap(&self) -> u32 {
        self.neuron.d_cap
    }

    pub fn fire_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].is_fire()).collect()
    }

    /// Nodes reading the output of `id`.
    pub fn consumers(&self, id: usize) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].inputs().contains(&id)).collect()
    }

    pub fn head_node(&self) -> usize {
        self.nodes.iter().position(|n| matches!(n.op, NodeOp::Head { .. })).expect("compiled net has a head")
    }

    /// Dense multiply-accumulates of the encoding layer.
    pub fn encode_macs(&self) -> u64 {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                NodeOp::Encode { conv } => conv.macs(),
                _ => 0,
            })
            .sum()
    }

    /// One window of a spiking neuron: integrate, fire up to `D`, carry.
    pub fn fire_window(&self, unit: f64, h_prev: f64, m: f64) -> (u32, f64) {
        let cfg = &self.neuron;
        let u = cfg.beta * h_prev + m;
        let th = cfg.v_th * unit;
        let count = fire_value(u / th, cfg.d_cap) as u32;
        let h = match cfg.reset_mode {
            ResetMode::None => u,
            ResetMode::Soft => u - th * count as f64,
            ResetMode::Hard => {
                if count > 0 {
                    cfg.v_reset * unit
                } else {
                    u
                }
            }
        };
        (count, h)
    }
}

struct Compiler<'a> {
    model: &'a Model,
    nodes: Vec<Node>,
    d: f64,
}

impl Compiler<'_> {
    fn push(&mut self, name: String, op: NodeOp, shape: [usize; 3]) -> usize {
        self.nodes.push(Node { name, op, shape });
        self.nodes.len() - 1
    }

    fn hw(&self, id: usize) -> (usize, usize) {
        let s = self.nodes[id].shape;
        (s[1], s[2])
    }

    fn fire(&mut self, site: &crate::arch::SnSite, src: usize) -> usize {
        self.fire_with_unit(site, src, 1.0)
    }

    fn fire_with_unit(&mut self, site: &crate::arch::SnSite, src: usize, unit: f64) -> usize {
        let shape = self.nodes[src].shape;
        self.push(site.name.clone(), NodeOp::Fire { src, site: site.id, unit }, shape)
    }

    fn project(&mut self, c: &ConvBn, src: usize) -> usize {
        let conv = FoldedConv::fold(self.model, c, 1.0 / self.d, self.hw(src));
        let (oh, ow) = conv.out_hw;
        let shape = [conv.cout, oh, ow];
        self.push(c.name.clone(), NodeOp::Project { src, conv }, shape)
    }

    fn residual(&mut self, a: usize, b: usize) -> usize {
        let name = format!("{}+{}", self.nodes[a].name, self.nodes[b].name);
        let shape = self.nodes[a].shape;
        self.push(name, NodeOp::Residual { a, b }, shape)
    }

    fn sep(&mut self, sep: &crate::arch::SepConv, u: usize) -> usize {
        let s = self.fire(&sep.sn_in, u);
        let a = self.project(&sep.pw1, s);
        let s = self.fire(&sep.sn_pw, a);
        let b = self.project(&sep.dw, s);
        let s = self.fire(&sep.sn_dw, b);
        self.project(&sep.pw2, s)
    }

    fn mixer(&mut self, m: &crate::arch::ChannelMixer, u: usize) -> usize {
        let s = self.fire(&m.sn_in, u);
        let a = self.project(&m.fc1, s);
        let s = self.fire(&m.sn_mid, a);
        self.project(&m.fc2, s)
    }
}

/// Exports `model` for spike-driven execution.
pub fn compile(model: &Model) -> SpikingNet {
    let d = model.spec.neuron.d_cap as f64;
    let mut c = Compiler { model, nodes: Vec::new(), d };
    let [ci, h, w] = model.spec.input_shape;
    let mut cur = usize::MAX;
    for block in &model.blocks {
        cur = match block {
            Block::Encode { conv } => {
                let f = FoldedConv::fold(model, conv, 1.0, (h, w));
                debug_assert_eq!(f.cin, ci);
                let shape = [f.cout, f.out_hw.0, f.out_hw.1];
                c.push(conv.name.clone(), NodeOp::Encode { conv: f }, shape)
            }
            Block::Downsample { sn, conv } => {
                let s = c.fire(sn, cur);
                c.project(conv, s)
            }
            Block::Conv { sep, mixer } => {
                let y = c.sep(sep, cur);
                let u1 = c.residual(cur, y);
                let y = c.mixer(mixer, u1);
                c.residual(u1, y)
            }
            Block::Transformer { sep, attn, mlp } => {
                let y = c.sep(sep, cur);
                let u1 = c.residual(cur, y);
                let s = c.fire(&attn.sn_in, u1);
                let q = c.project(&attn.q, s);
                let q = c.fire(&attn.sn_q, q);
                let k = c.project(&attn.k, s);
                let k = c.fire(&attn.sn_k, k);
                let v = c.project(&attn.v, s);
                let v = c.fire(&attn.sn_v, v);
                let shape = c.nodes[v].shape;
                let a = c.push(format!("{}.qkv", attn.q.name.trim_end_matches(".q")), NodeOp::Attention { q, k, v, heads: attn.heads }, shape);
                // training fires round(A * scale / D^2); the threshold absorbs the constant
                let sa = c.fire_with_unit(&attn.sn_attn, a, d * d / attn.scale);
                let y = c.project(&attn.proj, sa);
                let u2 = c.residual(u1, y);
                let y = c.mixer(mlp, u2);
                c.residual(u2, y)
            }
        };
    }
    let s = c.fire(&model.head.sn, cur);
    let [ch, hh, hw] = c.nodes[s].shape;
    let p = &model.params;
    let scale = 1.0 / ((hh * hw) as f64 * d);
    let weight: Vec<f64> = p.value(model.head.w).data().iter().map(|&v| v as f64 * scale).collect();
    let bias: Vec<f64> = p.value(model.head.b).data().iter().map(|&v| v as f64).collect();
    let head = FoldedHead {
        in_features: ch,
        classes: model.head.classes,
        wq: weight.iter().map(|&v| to_fixed(v)).collect(),
        bq: bias.iter().map(|&v| to_fixed(v)).collect(),
        weight,
        bias,
    };
    c.push("head".into(), NodeOp::Head { src: s, head }, [model.head.classes, 1, 1]);
    SpikingNet { nodes: c.nodes, neuron: model.spec.neuron, input_shape: model.spec.input_shape, num_classes: model.spec.num_classes }
}
