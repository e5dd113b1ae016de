//! Runs all three executors on the same input and compares them.

use std::fmt::Write as _;

use crate::numerics::Tensor;

use super::exec::{infer_async_event, infer_integer, infer_sync_with_fault, AsyncConfig, Fault};
use super::net::SpikingNet;
use super::EngineError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMatch {
    pub name: String,
    /// Neuron-windows compared, over the batch.
    pub compared: usize,
    pub sync_matched: usize,
    pub async_matched: usize,
}

impl LayerMatch {
    pub fn all_match(&self) -> bool {
        self.sync_matched == self.compared && self.async_matched == self.compared
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Executor {
    Sync,
    Async,
}

/// One neuron whose spike sum disagrees with its integer activation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeuronDiff {
    pub executor: Executor,
    pub layer: String,
    pub sample: usize,
    pub window: usize,
    pub neuron: usize,
    pub integer: u32,
    pub spikes: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceReport {
    pub layers: Vec<LayerMatch>,
    /// Per sample, max |integer - sync| over classes.
    pub max_abs_sync: Vec<f64>,
    pub max_abs_async: Vec<f64>,
    /// Max relative logit deviation of either expanded mode from integer mode.
    pub max_rel: f64,
    /// First mismatching neurons, at most [`EquivalenceReport::MAX_DIFFS`].
    pub diffs: Vec<NeuronDiff>,
    pub total_mismatches: usize,
}

impl EquivalenceReport {
    pub const MAX_DIFFS: usize = 64;

    pub fn layers_match(&self) -> bool {
        self.total_mismatches == 0
    }

    pub fn passed(&self, rel_tol: f64) -> bool {
        self.layers_match() && self.max_rel <= rel_tol
    }

    pub fn match_fraction(&self) -> f64 {
        let total: usize = self.layers.iter().map(|l| 2 * l.compared).sum();
        let ok: usize = self.layers.iter().map(|l| l.sync_matched + l.async_matched).sum();
        if total == 0 {
            1.0
        } else {
            ok as f64 / total as f64
        }
    }

    /// Error carrying the per-neuron differences when any layer mismatches.
    pub fn ensure(&self, rel_tol: f64) -> Result<(), EngineError> {
        if self.passed(rel_tol) {
            return Ok(());
        }
        let mut msg = format!("{} mismatching neurons, max relative logit deviation {:e}", self.total_mismatches, self.max_rel);
        for d in &self.diffs {
            let _ = write!(
                msg,
                "\n  {:?} {} sample {} window {} neuron {}: integer {} spikes {}",
                d.executor, d.layer, d.sample, d.window, d.neuron, d.integer, d.spikes
            );
        }
        Err(EngineError::Mismatch(msg))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,compared,sync_matched,async_matched\n");
        for l in &self.layers {
            let _ = writeln!(s, "{},{},{},{}", l.name, l.compared, l.sync_matched, l.async_matched);
        }
        s
    }
}

fn rel_dev(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / a.abs().max(b.abs()).max(1e-12)
    }
}

fn logit_devs(reference: &Tensor<f64>, other: &Tensor<f64>, classes: usize) -> (Vec<f64>, f64) {
    let mut per_sample = Vec::new();
    let mut rel = 0.0f64;
    for (r, o) in reference.data().chunks(classes).zip(other.data().chunks(classes)) {
        per_sample.push(r.iter().zip(o).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        rel = r.iter().zip(o).map(|(&a, &b)| rel_dev(a, b)).fold(rel, f64::max);
    }
    (per_sample, rel)
}

/// Compares integer activations with the spike sums of both expanded executors.
/// `fault` corrupts one spike of the synchronous expansion.
pub fn equivalence_report(
    net: &SpikingNet,
    frames: &[Tensor<f32>],
    async_cfg: AsyncConfig,
    fault: Option<Fault>,
) -> Result<EquivalenceReport, EngineError> {
    let int = infer_integer(net, frames)?;
    let sync = infer_sync_with_fault(net, frames, fault)?;
    let asy = infer_async_event(net, frames, async_cfg)?;
    let d = net.d_cap() as usize;
    let n = int.logits.shape()[0];
    let mut layers = Vec::new();
    let mut diffs = Vec::new();
    let mut total = 0;
    for (li, acts) in int.activations.iter().enumerate() {
        let len = net.nodes[acts.node].len();
        let mut m = LayerMatch { name: acts.name.clone(), compared: 0, sync_matched: 0, async_matched: 0 };
        // async spike sums from the trace, per sample and window
        let [_, h, w] = net.nodes[acts.node].shape;
        let mut event_counts = vec![0u32; acts.windows.len() * n * len];
        for (s, trace) in asy.traces.iter().enumerate() {
            for e in trace.iter().filter(|e| e.layer == li) {
                let win = (e.micro_step - 1) / d;
                event_counts[(win * n + s) * len + (e.channel * h + e.y) * w + e.x] += 1;
            }
        }
        let train = &sync.records[li].spikes;
        for (win, counts) in acts.windows.iter().enumerate() {
            for (i, &c) in counts.data.iter().enumerate() {
                let spikes = (win * d..(win + 1) * d).map(|step| train.get(step, i) as u32).sum::<u32>();
                let events = event_counts[win * n * len + i];
                m.compared += 1;
                for (exec, got) in [(Executor::Sync, spikes), (Executor::Async, events)] {
                    if got == c {
                        match exec {
                            Executor::Sync => m.sync_matched += 1,
                            Executor::Async => m.async_matched += 1,
                        }
                    } else {
                        total += 1;
                        if diffs.len() < EquivalenceReport::MAX_DIFFS {
                            diffs.push(NeuronDiff {
                                executor: exec,
                                layer: acts.name.clone(),
                                sample: i / len,
                                window: win,
                                neuron: i % len,
                                integer: c,
                                spikes: got,
                            });
                        }
                    }
                }
            }
        }
        layers.push(m);
    }
    let k = net.num_classes;
    let (max_abs_sync, rs) = logit_devs(&int.logits, &sync.logits, k);
    let (max_abs_async, ra) = logit_devs(&int.logits, &asy.logits, k);
    Ok(EquivalenceReport { layers, max_abs_sync, max_abs_async, max_rel: rs.max(ra), diffs, total_mismatches: total })
}
