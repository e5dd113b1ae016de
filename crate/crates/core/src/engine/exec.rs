//! Integer, synchronous-expanded and asynchronous event-driven execution of a [`SpikingNet`].

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::neuron::{expand_to_spikes, Counts, SpikeRecord, SpikeTrain};
use crate::numerics::Tensor;

use super::net::{from_fixed, FoldedConv, FoldedHead, NodeOp, SpikingNet, FRAC_BITS};
use super::EngineError;

/// Integer activations of one spiking layer, one `[N, C, H, W]` tensor per window.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCounts {
    pub node: usize,
    pub name: String,
    pub windows: Vec<Counts>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntegerRun {
    /// `[N, classes]`, averaged over windows.
    pub logits: Tensor<f64>,
    pub activations: Vec<LayerCounts>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyncRun {
    pub logits: Tensor<f64>,
    pub records: Vec<SpikeRecord>,
    pub accumulations: u64,
}

/// One spike. `layer` indexes the spiking layers in execution order and
/// `micro_step` counts expanded steps from 1 to `T * D`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub layer: usize,
    pub channel: usize,
    pub y: usize,
    pub x: usize,
    pub micro_step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsyncRun {
    pub logits: Tensor<f64>,
    /// Events of each sample in emission order.
    pub traces: Vec<Vec<Event>>,
    pub accumulations: u64,
    pub peak_queue: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AsyncConfig {
    pub seed: u64,
    /// Queue bound per consumer port, in events per source neuron.
    pub capacity_factor: f64,
}

impl Default for AsyncConfig {
    fn default() -> Self {
        Self { seed: 0, capacity_factor: 16.0 }
    }
}

/// Flips one expanded spike, for negative controls.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fault {
    pub layer: usize,
    pub sample: usize,
    pub neuron: usize,
    pub step: usize,
}

/// Checks frame shapes and returns the batch size.
fn check_frames(net: &SpikingNet, frames: &[Tensor<f32>]) -> Result<usize, EngineError> {
    let first = frames.first().ok_or_else(|| EngineError::InvalidInput("no input frames".into()))?;
    let n = first.shape().first().copied().unwrap_or(0);
    for f in frames {
        if f.ndim() != 4 || f.shape()[0] != n || f.shape()[1..] != net.input_shape {
            return Err(EngineError::InvalidInput(format!(
                "frame {:?} does not match [N, {:?}]",
                f.shape(),
                net.input_shape
            )));
        }
    }
    Ok(n)
}

fn sample_slice(frame: &Tensor<f32>, n: usize) -> &[f32] {
    let len: usize = frame.shape()[1..].iter().product();
    &frame.data()[n * len..(n + 1) * len]
}

fn head_accumulate(head: &FoldedHead, logits: &mut [i128], c: usize, mult: i128) -> u64 {
    let k = head.classes;
    for (l, w) in logits.iter_mut().zip(&head.wq[c * k..(c + 1) * k]) {
        *l += mult * w;
    }
    k as u64
}

/// Integer `Q (K^T V)` per head on token-major `[C, L]` counts.
fn attention_counts(q: &[u32], k: &[u32], v: &[u32], cq: usize, cv: usize, l: usize, heads: usize) -> Vec<i128> {
    let (dq, dv) = (cq / heads, cv / heads);
    let mut out = vec![0i128; cv * l];
    for h in 0..heads {
        let mut kv = vec![0i64; dq * dv];
        for i in 0..dq {
            for j in 0..dv {
                let (kr, vr) = (&k[(h * dq + i) * l..][..l], &v[(h * dv + j) * l..][..l]);
                kv[i * dv + j] = kr.iter().zip(vr).map(|(&a, &b)| a as i64 * b as i64).sum();
            }
        }
        for j in 0..dv {
            for t in 0..l {
                let a: i64 = (0..dq).map(|i| q[(h * dq + i) * l + t] as i64 * kv[i * dv + j]).sum();
                out[(h * dv + j) * l + t] = (a as i128) << FRAC_BITS;
            }
        }
    }
    out
}

fn fixed_logits(acc: &[i128], windows: usize) -> Vec<f64> {
    acc.iter().map(|&v| from_fixed(v) / windows as f64).collect()
}

fn encode_conv(net: &SpikingNet, id: usize) -> &FoldedConv {
    match &net.nodes[id].op {
        NodeOp::Encode { conv } | NodeOp::Project { conv, .. } => conv,
        _ => unreachable!("node {id} has no convolution"),
    }
}

enum Buf {
    Empty,
    Mem(Vec<i128>),
    Spk(Vec<u32>),
}

impl Buf {
    fn mem(&self) -> &[i128] {
        match self {
            Buf::Mem(m) => m,
            _ => panic!("expected membrane"),
        }
    }

    fn spk(&self) -> &[u32] {
        match self {
            Buf::Spk(s) => s,
            _ => panic!("expected spikes"),
        }
    }
}

/// Fires every neuron of `mem` for one window, updating the carried state.
fn fire_bank(net: &SpikingNet, unit: f64, mem: &[i128], h: &mut [f64]) -> Vec<u32> {
    mem.iter()
        .zip(h.iter_mut())
        .map(|(&m, hs)| {
            let (c, next) = net.fire_window(unit, *hs, from_fixed(m));
            *hs = next;
            c
        })
        .collect()
}

/// Reference execution: every spiking layer emits its integer activation once per window.
pub fn infer_integer(net: &SpikingNet, frames: &[Tensor<f32>]) -> Result<IntegerRun, EngineError> {
    let n = check_frames(net, frames)?;
    let fires = net.fire_nodes();
    let mut acts: Vec<LayerCounts> = fires
        .iter()
        .map(|&f| LayerCounts {
            node: f,
            name: net.nodes[f].name.clone(),
            windows: (0..frames.len()).map(|_| Counts::zeros(&batch_shape(n, net.nodes[f].shape))).collect(),
        })
        .collect();
    let mut logits = vec![0.0; n * net.num_classes];
    for s in 0..n {
        let mut state: Vec<Vec<f64>> = net.nodes.iter().map(|nd| if nd.is_fire() { vec![0.0; nd.len()] } else { vec![] }).collect();
        let mut acc = vec![0i128; net.num_classes];
        for (t, frame) in frames.iter().enumerate() {
            let mut bufs: Vec<Buf> = (0..net.nodes.len()).map(|_| Buf::Empty).collect();
            for (id, node) in net.nodes.iter().enumerate() {
                bufs[id] = match &node.op {
                    NodeOp::Encode { conv } => Buf::Mem(conv.encode(sample_slice(frame, s))),
                    NodeOp::Project { src, conv } => {
                        let mut mem = conv.bias_bank();
                        let (h, w) = conv.in_hw;
                        for (i, &c) in bufs[*src].spk().iter().enumerate() {
                            if c > 0 {
                                conv.scatter(&mut mem, i / (h * w), (i / w) % h, i % w, c as i128);
                            }
                        }
                        Buf::Mem(mem)
                    }
                    NodeOp::Residual { a, b } => {
                        Buf::Mem(bufs[*a].mem().iter().zip(bufs[*b].mem()).map(|(x, y)| x + y).collect())
                    }
                    NodeOp::Fire { src, unit, .. } => {
                        let counts = fire_bank(net, *unit, bufs[*src].mem(), &mut state[id]);
                        let li = fires.iter().position(|&f| f == id).unwrap();
                        let len = counts.len();
                        acts[li].windows[t].data[s * len..(s + 1) * len].copy_from_slice(&counts);
                        Buf::Spk(counts)
                    }
                    NodeOp::Attention { q, k, v, heads } => {
                        let (cq, cv) = (net.nodes[*q].shape[0], net.nodes[*v].shape[0]);
                        let l = node.shape[1] * node.shape[2];
                        Buf::Mem(attention_counts(bufs[*q].spk(), bufs[*k].spk(), bufs[*v].spk(), cq, cv, l, *heads))
                    }
                    NodeOp::Head { src, head } => {
                        let hw = net.nodes[*src].shape[1] * net.nodes[*src].shape[2];
                        acc.iter_mut().zip(&head.bq).for_each(|(a, b)| *a += b);
                        for (i, &c) in bufs[*src].spk().iter().enumerate() {
                            if c > 0 {
                                head_accumulate(head, &mut acc, i / hw, c as i128);
                            }
                        }
                        Buf::Empty
                    }
                };
            }
        }
        logits[s * net.num_classes..(s + 1) * net.num_classes].copy_from_slice(&fixed_logits(&acc, frames.len()));
    }
    Ok(IntegerRun { logits: Tensor::new(&[n, net.num_classes], logits)?, activations: acts })
}

fn batch_shape(n: usize, s: [usize; 3]) -> Vec<usize> {
    vec![n, s[0], s[1], s[2]]
}

/// Dense synchronous execution over `T * D` micro-steps: every spiking layer
/// re-expresses its activation as a front-loaded binary train and downstream
/// layers accumulate one weight per spike per micro-step.
pub fn infer_sync_expanded(net: &SpikingNet, frames: &[Tensor<f32>]) -> Result<SyncRun, EngineError> {
    infer_sync_with_fault(net, frames, None)
}

pub fn infer_sync_with_fault(net: &SpikingNet, frames: &[Tensor<f32>], fault: Option<Fault>) -> Result<SyncRun, EngineError> {
    let n = check_frames(net, frames)?;
    let d = net.d_cap() as usize;
    let steps = frames.len() * d;
    let fires = net.fire_nodes();
    let mut trains: Vec<SpikeTrain> = fires.iter().map(|&f| SpikeTrain::zeros(steps, &batch_shape(n, net.nodes[f].shape))).collect();
    let mut logits = vec![0.0; n * net.num_classes];
    let mut ops = 0u64;
    for s in 0..n {
        let mut state: Vec<Vec<f64>> = net.nodes.iter().map(|nd| if nd.is_fire() { vec![0.0; nd.len()] } else { vec![] }).collect();
        let mut acc = vec![0i128; net.num_classes];
        for (t, frame) in frames.iter().enumerate() {
            let mut mems: Vec<Vec<i128>> = vec![Vec::new(); net.nodes.len()];
            // per fire node: D binary planes of this window
            let mut planes: Vec<Vec<Vec<u8>>> = vec![Vec::new(); net.nodes.len()];
            for (id, node) in net.nodes.iter().enumerate() {
                match &node.op {
                    NodeOp::Encode { conv } => mems[id] = conv.encode(sample_slice(frame, s)),
                    NodeOp::Project { src, conv } => {
                        let mut mem = conv.bias_bank();
                        let (h, w) = conv.in_hw;
                        for plane in &planes[*src] {
                            for (i, &b) in plane.iter().enumerate() {
                                if b == 1 {
                                    ops += conv.scatter(&mut mem, i / (h * w), (i / w) % h, i % w, 1);
                                }
                            }
                        }
                        mems[id] = mem;
                    }
                    NodeOp::Residual { a, b } => mems[id] = mems[*a].iter().zip(&mems[*b]).map(|(x, y)| x + y).collect(),
                    NodeOp::Fire { src, unit, .. } => {
                        let counts = fire_bank(net, *unit, &mems[*src], &mut state[id]);
                        let len = counts.len();
                        let mut train = expand_to_spikes(&Counts { shape: vec![len], data: counts }, net.d_cap())?;
                        let li = fires.iter().position(|&f| f == id).unwrap();
                        if let Some(f) = fault.filter(|f| f.layer == li && f.sample == s && t == f.step / d) {
                            let bit = &mut train.step_mut(f.step % d)[f.neuron];
                            *bit ^= 1;
                        }
                        for step in 0..d {
                            let dst = &mut trains[li].step_mut(t * d + step)[s * len..(s + 1) * len];
                            dst.copy_from_slice(train.step(step));
                        }
                        planes[id] = (0..d).map(|step| train.step(step).to_vec()).collect();
                    }
                    NodeOp::Attention { q, k, v, heads } => {
                        let (cq, cv) = (net.nodes[*q].shape[0], net.nodes[*v].shape[0]);
                        let l = node.shape[1] * node.shape[2];
                        let (dq, dv) = (cq / heads, cv / heads);
                        let mut vsum = vec![0i64; cv * l];
                        for plane in &planes[*v] {
                            vsum.iter_mut().zip(plane).for_each(|(a, &b)| *a += b as i64);
                        }
                        let mut kv = vec![0i64; heads * dq * dv];
                        for plane in &planes[*k] {
                            for (i, &b) in plane.iter().enumerate() {
                                if b == 1 {
                                    let (ch, tok) = (i / l, i % l);
                                    let (h, qi) = (ch / dq, ch % dq);
                                    for j in 0..dv {
                                        kv[(h * dq + qi) * dv + j] += vsum[(h * dv + j) * l + tok];
                                    }
                                    ops += dv as u64;
                                }
                            }
                        }
                        let mut a = vec![0i64; cv * l];
                        for plane in &planes[*q] {
                            for (i, &b) in plane.iter().enumerate() {
                                if b == 1 {
                                    let (ch, tok) = (i / l, i % l);
                                    let (h, qi) = (ch / dq, ch % dq);
                                    for j in 0..dv {
                                        a[(h * dv + j) * l + tok] += kv[(h * dq + qi) * dv + j];
                                    }
                                    ops += dv as u64;
                                }
                            }
                        }
                        mems[id] = a.into_iter().map(|x| (x as i128) << FRAC_BITS).collect();
                    }
                    NodeOp::Head { src, head } => {
                        let hw = net.nodes[*src].shape[1] * net.nodes[*src].shape[2];
                        acc.iter_mut().zip(&head.bq).for_each(|(a, b)| *a += b);
                        for plane in &planes[*src] {
                            for (i, &b) in plane.iter().enumerate() {
                                if b == 1 {
                                    ops += head_accumulate(head, &mut acc, i / hw, 1);
                                }
                            }
                        }
                    }
                }
            }
        }
        logits[s * net.num_classes..(s + 1) * net.num_classes].copy_from_slice(&fixed_logits(&acc, frames.len()));
    }
    let records = fires
        .iter()
        .zip(trains)
        .enumerate()
        .map(|(li, (&f, train))| SpikeRecord::new(li, net.nodes[f].name.clone(), train))
        .collect();
    Ok(SyncRun { logits: Tensor::new(&[n, net.num_classes], logits)?, records, accumulations: ops })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Port {
    Main,
    Q,
    K,
    V,
}

/// Per-node state of the asynchronous executor within one window.
struct AsyncNode {
    closed: bool,
    mem: Vec<i128>,
    /// Fire nodes: integer activation and next micro-step to emit (1-based).
    counts: Option<Vec<u32>>,
    next_step: usize,
    queues: [VecDeque<(usize, usize, usize)>; 3],
    // attention accumulators
    vsum: Vec<i64>,
    kv: Vec<i64>,
    attn: Vec<i64>,
}

impl AsyncNode {
    fn queue(&mut self, port: Port) -> &mut VecDeque<(usize, usize, usize)> {
        match port {
            Port::Main | Port::Q => &mut self.queues[0],
            Port::K => &mut self.queues[1],
            Port::V => &mut self.queues[2],
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Action {
    Fire(usize),
    Emit(usize),
    Drain(usize, Port),
    Close(usize),
}

struct AsyncCtx<'a> {
    net: &'a SpikingNet,
    fires: Vec<usize>,
    /// `(consumer, port)` pairs of each node.
    consumers: Vec<Vec<(usize, Port)>>,
    capacity: Vec<usize>,
    peak: usize,
    ops: u64,
}

impl AsyncCtx<'_> {
    fn producer_done(&self, nodes: &[AsyncNode], src: usize, consumer: usize, port: Port) -> bool {
        nodes[src].closed && {
            let q = match port {
                Port::Main | Port::Q => &nodes[consumer].queues[0],
                Port::K => &nodes[consumer].queues[1],
                Port::V => &nodes[consumer].queues[2],
            };
            q.is_empty()
        }
    }

    fn runnable(&self, nodes: &[AsyncNode]) -> Vec<Action> {
        let mut out = Vec::new();
        for (id, node) in self.net.nodes.iter().enumerate() {
            let st = &nodes[id];
            if st.closed {
                continue;
            }
            match &node.op {
                NodeOp::Encode { .. } => {}
                NodeOp::Fire { src, .. } => {
                    if st.counts.is_none() {
                        if nodes[*src].closed {
                            out.push(Action::Fire(id));
                        }
                    } else {
                        out.push(Action::Emit(id));
                    }
                }
                NodeOp::Project { src, .. } | NodeOp::Head { src, .. } => {
                    if !st.queues[0].is_empty() {
                        out.push(Action::Drain(id, Port::Main));
                    } else if nodes[*src].closed {
                        out.push(Action::Close(id));
                    }
                }
                NodeOp::Residual { a, b } => {
                    if nodes[*a].closed && nodes[*b].closed {
                        out.push(Action::Close(id));
                    }
                }
                NodeOp::Attention { q, k, v, .. } => {
                    let v_done = self.producer_done(nodes, *v, id, Port::V);
                    let k_done = v_done && self.producer_done(nodes, *k, id, Port::K);
                    let q_done = k_done && self.producer_done(nodes, *q, id, Port::Q);
                    if !st.queues[2].is_empty() {
                        out.push(Action::Drain(id, Port::V));
                    }
                    if v_done && !st.queues[1].is_empty() {
                        out.push(Action::Drain(id, Port::K));
                    }
                    if k_done && !st.queues[0].is_empty() {
                        out.push(Action::Drain(id, Port::Q));
                    }
                    if q_done {
                        out.push(Action::Close(id));
                    }
                }
            }
        }
        out
    }
}

/// Event-driven execution without a global clock. Spiking layers emit their
/// canonical trains micro-step by micro-step into bounded per-consumer queues;
/// consumers drain queues in randomized order and close once every producer
/// has closed and its queue is empty.
pub fn infer_async_event(net: &SpikingNet, frames: &[Tensor<f32>], cfg: AsyncConfig) -> Result<AsyncRun, EngineError> {
    let n = check_frames(net, frames)?;
    let d = net.d_cap() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut consumers = vec![Vec::new(); net.nodes.len()];
    for (id, node) in net.nodes.iter().enumerate() {
        match &node.op {
            NodeOp::Project { src, .. } | NodeOp::Head { src, .. } => consumers[*src].push((id, Port::Main)),
            NodeOp::Attention { q, k, v, .. } => {
                consumers[*q].push((id, Port::Q));
                consumers[*k].push((id, Port::K));
                consumers[*v].push((id, Port::V));
            }
            _ => {}
        }
    }
    let capacity = net.nodes.iter().map(|nd| ((nd.len() as f64 * cfg.capacity_factor).ceil() as usize).max(1)).collect();
    let mut ctx = AsyncCtx { net, fires: net.fire_nodes(), consumers, capacity, peak: 0, ops: 0 };
    let mut logits = vec![0.0; n * net.num_classes];
    let mut traces = Vec::with_capacity(n);
    for s in 0..n {
        let mut state: Vec<Vec<f64>> = net.nodes.iter().map(|nd| if nd.is_fire() { vec![0.0; nd.len()] } else { vec![] }).collect();
        let mut acc = vec![0i128; net.num_classes];
        let mut trace = Vec::new();
        for (t, frame) in frames.iter().enumerate() {
            let head = run_async_window(&mut ctx, &mut state, sample_slice(frame, s), t, d, &mut rng, &mut trace)?;
            acc.iter_mut().zip(head).for_each(|(a, h)| *a += h);
        }
        logits[s * net.num_classes..(s + 1) * net.num_classes].copy_from_slice(&fixed_logits(&acc, frames.len()));
        traces.push(trace);
    }
    Ok(AsyncRun { logits: Tensor::new(&[n, net.num_classes], logits)?, traces, accumulations: ctx.ops, peak_queue: ctx.peak })
}

fn run_async_window(
    ctx: &mut AsyncCtx,
    state: &mut [Vec<f64>],
    image: &[f32],
    t: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
    trace: &mut Vec<Event>,
) -> Result<Vec<i128>, EngineError> {
    let net = ctx.net;
    let mut nodes: Vec<AsyncNode> = net
        .nodes
        .iter()
        .map(|nd| {
            let mut st = AsyncNode {
                closed: false,
                mem: Vec::new(),
                counts: None,
                next_step: 1,
                queues: Default::default(),
                vsum: Vec::new(),
                kv: Vec::new(),
                attn: Vec::new(),
            };
            match &nd.op {
                NodeOp::Encode { conv } => {
                    st.mem = conv.encode(image);
                    st.closed = true;
                }
                NodeOp::Project { conv, .. } => st.mem = conv.bias_bank(),
                NodeOp::Head { head, .. } => st.mem = head.bq.clone(),
                NodeOp::Attention { q, v, heads, .. } => {
                    let (cq, cv) = (net.nodes[*q].shape[0], net.nodes[*v].shape[0]);
                    let l = nd.shape[1] * nd.shape[2];
                    st.vsum = vec![0; cv * l];
                    st.kv = vec![0; (cq / heads) * (cv / heads) * heads];
                    st.attn = vec![0; cv * l];
                }
                _ => {}
            }
            st
        })
        .collect();
    loop {
        let actions = ctx.runnable(&nodes);
        if actions.is_empty() {
            break;
        }
        match actions[rng.gen_range(0..actions.len())] {
            Action::Fire(id) => {
                let NodeOp::Fire { src, unit, .. } = &net.nodes[id].op else { unreachable!() };
                let counts = fire_bank(net, *unit, &nodes[*src].mem, &mut state[id]);
                nodes[id].counts = Some(counts);
            }
            Action::Emit(id) => {
                let step = nodes[id].next_step;
                let layer = ctx.fires.iter().position(|&f| f == id).unwrap();
                let [_, h, w] = net.nodes[id].shape;
                let counts = nodes[id].counts.take().unwrap();
                for (i, &c) in counts.iter().enumerate() {
                    if c as usize >= step {
                        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
                        trace.push(Event { layer, channel: ch, y, x, micro_step: t * d + step });
                        for &(cons, port) in &ctx.consumers[id] {
                            let q = nodes[cons].queue(port);
                            q.push_back((ch, y, x));
                            let len = q.len();
                            ctx.peak = ctx.peak.max(len);
                            if len > ctx.capacity[id] {
                                return Err(EngineError::QueueOverflow {
                                    node: net.nodes[cons].name.clone(),
                                    peak: len,
                                    capacity: ctx.capacity[id],
                                });
                            }
                        }
                    }
                }
                nodes[id].counts = Some(counts);
                nodes[id].next_step += 1;
                if step == d {
                    nodes[id].closed = true;
                }
            }
            Action::Drain(id, port) => {
                let take = rng.gen_range(1..=nodes[id].queue(port).len().min(32));
                for _ in 0..take {
                    let (ch, y, x) = nodes[id].queue(port).pop_front().unwrap();
                    ctx.ops += deliver(net, &mut nodes[id], id, port, ch, y, x);
                }
            }
            Action::Close(id) => {
                match &net.nodes[id].op {
                    NodeOp::Residual { a, b } => {
                        nodes[id].mem = nodes[*a].mem.iter().zip(&nodes[*b].mem).map(|(x, y)| x + y).collect();
                    }
                    NodeOp::Attention { .. } => {
                        nodes[id].mem = nodes[id].attn.iter().map(|&x| (x as i128) << FRAC_BITS).collect();
                    }
                    _ => {}
                }
                nodes[id].closed = true;
            }
        }
    }
    let head = net.head_node();
    if !nodes[head].closed {
        return Err(EngineError::InvalidInput("event execution stalled before the readout closed".into()));
    }
    Ok(std::mem::take(&mut nodes[head].mem))
}

/// Applies one spike arriving at `id`; returns accumulations performed.
fn deliver(net: &SpikingNet, st: &mut AsyncNode, id: usize, port: Port, ch: usize, y: usize, x: usize) -> u64 {
    let node = &net.nodes[id];
    match &node.op {
        NodeOp::Project { .. } => encode_conv(net, id).scatter(&mut st.mem, ch, y, x, 1),
        NodeOp::Head { src, head } => {
            let _ = src;
            head_accumulate(head, &mut st.mem, ch, 1)
        }
        NodeOp::Attention { q, v, heads, .. } => {
            let (cq, cv) = (net.nodes[*q].shape[0], net.nodes[*v].shape[0]);
            let (dq, dv) = (cq / heads, cv / heads);
            let w = node.shape[2];
            let l = node.shape[1] * w;
            let tok = y * w + x;
            match port {
                Port::V => {
                    st.vsum[ch * l + tok] += 1;
                    0
                }
                Port::K => {
                    let (h, qi) = (ch / dq, ch % dq);
                    for j in 0..dv {
                        st.kv[(h * dq + qi) * dv + j] += st.vsum[(h * dv + j) * l + tok];
                    }
                    dv as u64
                }
                Port::Q | Port::Main => {
                    let (h, qi) = (ch / dq, ch % dq);
                    for j in 0..dv {
                        st.attn[(h * dv + j) * l + tok] += st.kv[(h * dq + qi) * dv + j];
                    }
                    dv as u64
                }
            }
        }
        _ => 0,
    }
}

/// Writes `layer,channel,y,x,micro_step` lines with a header.
pub fn trace_to_csv(trace: &[Event]) -> String {
    let mut s = String::from("layer,channel,y,x,micro_step\n");
    for e in trace {
        s.push_str(&format!("{},{},{},{},{}\n", e.layer, e.channel, e.y, e.x, e.micro_step));
    }
    s
}
