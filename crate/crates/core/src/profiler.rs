//! Spike statistics, synaptic-operation counts, energy estimates and spike maps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::engine::{NodeOp, SpikingNet};
use crate::neuron::SpikeRecord;

#[derive(Debug, Error)]
pub enum ProfilerError {
    #[error("invalid energy model: {0}")]
    InvalidEnergyModel(String),
    #[error("records do not match the network: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Joules per accumulate and per multiply-accumulate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyModel {
    pub e_ac: f64,
    pub e_mac: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self { e_ac: 0.9e-12, e_mac: 4.6e-12 }
    }
}

impl EnergyModel {
    pub fn new(e_ac: f64, e_mac: f64) -> Result<Self, ProfilerError> {
        if !(e_ac > 0.0 && e_mac > 0.0 && e_ac.is_finite() && e_mac.is_finite()) {
            return Err(ProfilerError::InvalidEnergyModel(format!("e_ac {e_ac}, e_mac {e_mac}")));
        }
        Ok(Self { e_ac, e_mac })
    }
}

/// Fraction of all recorded neurons spiking at each micro-step.
pub fn nsfr_series(records: &[SpikeRecord]) -> Vec<f64> {
    let Some(steps) = records.iter().map(|r| r.spikes.steps).max() else {
        return Vec::new();
    };
    let neurons: usize = records.iter().map(|r| r.spikes.neurons()).sum();
    (0..steps)
        .map(|d| {
            let fired: u64 = records
                .iter()
                .filter(|r| d < r.spikes.steps)
                .map(|r| r.spikes.step(d).iter().map(|&b| b as u64).sum::<u64>())
                .sum();
            if neurons == 0 {
                0.0
            } else {
                fired as f64 / neurons as f64
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSops {
    pub name: String,
    pub spikes: u64,
    pub sops: u64,
}

/// Output positions along one axis whose kernel window covers input `i`.
fn covering(i: usize, n_out: usize, kernel: usize, stride: usize, padding: usize) -> u64 {
    // o * stride - padding <= i <= o * stride - padding + kernel - 1
    let hi = (i + padding) / stride;
    let lo_num = (i + padding + 1).saturating_sub(kernel);
    let lo = lo_num.div_ceil(stride);
    if n_out == 0 || lo > hi.min(n_out - 1) {
        0
    } else {
        (hi.min(n_out - 1) - lo + 1) as u64
    }
}

/// Accumulations one spike at `(y, x)` of fire node `src` triggers downstream.
fn fan_out(net: &SpikingNet, src: usize, y: usize, x: usize) -> u64 {
    let mut total = 0;
    for node in &net.nodes {
        total += match &node.op {
            NodeOp::Project { src: s, conv } if *s == src => {
                let (oh, ow) = conv.out_hw;
                let per_group = (conv.cout / conv.groups) as u64;
                covering(y, oh, conv.kernel, conv.stride, conv.padding)
                    * covering(x, ow, conv.kernel, conv.stride, conv.padding)
                    * per_group
            }
            NodeOp::Attention { q, k, v, heads } => {
                let dv = (net.nodes[*v].shape[0] / heads) as u64;
                // V spikes only update counters; K and Q spikes each add one row of dv values
                (u64::from(*q == src) + u64::from(*k == src)) * dv
            }
            NodeOp::Head { src: s, head } if *s == src => head.classes as u64,
            _ => 0,
        };
    }
    total
}

/// SOPs per spiking layer: every spike times its downstream fan-out.
pub fn count_sops(records: &[SpikeRecord], net: &SpikingNet) -> Result<Vec<LayerSops>, ProfilerError> {
    let fires = net.fire_nodes();
    records
        .iter()
        .map(|r| {
            let &node = fires.get(r.layer_id).ok_or_else(|| ProfilerError::Mismatch(format!("no spiking layer {}", r.layer_id)))?;
            let [c, h, w] = net.nodes[node].shape;
            let per = c * h * w;
            if r.spikes.neurons() % per.max(1) != 0 {
                return Err(ProfilerError::Mismatch(format!("{}: {} neurons for shape {:?}", r.name, r.spikes.neurons(), [c, h, w])));
            }
            let fan: Vec<u64> = (0..per).map(|i| fan_out(net, node, (i / w) % h, i % w)).collect();
            let counts = r.spikes.sum_over_steps();
            let spikes = counts.total();
            let sops = counts.data.iter().enumerate().map(|(i, &s)| s as u64 * fan[i % per]).sum();
            Ok(LayerSops { name: r.name.clone(), spikes, sops })
        })
        .collect()
}

/// Spike layers at `e_ac` per SOP plus the real-valued encoding layer at `e_mac` per MAC.
pub fn estimate_energy(sops: u64, encode_macs: u64, em: &EnergyModel) -> f64 {
    sops as f64 * em.e_ac + encode_macs as f64 * em.e_mac
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub layers: Vec<LayerSops>,
    pub nsfr: Vec<f64>,
    pub total_sops: u64,
    /// Encoding MACs for the whole evaluated batch.
    pub encode_macs: u64,
    pub energy_j: f64,
    pub mean_spikes_per_neuron: f64,
    pub samples: usize,
}

impl EnergyReport {
    pub fn per_sample_energy(&self) -> f64 {
        self.energy_j / self.samples.max(1) as f64
    }

    pub fn sops_csv(&self) -> String {
        let mut s = String::from("# sops = spikes x fan-out; conv fan-out = covered output positions x out-channels per group; attention K and Q spikes add dv values each, V spikes add none; readout fan-out = classes\nlayer,spikes,sops\n");
        for l in &self.layers {
            let _ = writeln!(s, "{},{},{}", l.name, l.spikes, l.sops);
        }
        s
    }

    pub fn nsfr_csv(&self) -> String {
        let mut s = String::from("step,nsfr\n");
        for (i, v) in self.nsfr.iter().enumerate() {
            let _ = writeln!(s, "{},{}", i + 1, v);
        }
        s
    }

    /// `key: value` lines.
    pub fn summary(&self) -> String {
        format!(
            "samples: {}\ntotal_sops: {}\nencode_macs: {}\nenergy_j: {:e}\nenergy_per_sample_j: {:e}\nmean_spikes_per_neuron: {}\nsteps: {}\n",
            self.samples,
            self.total_sops,
            self.encode_macs,
            self.energy_j,
            self.per_sample_energy(),
            self.mean_spikes_per_neuron,
            self.nsfr.len()
        )
    }
}

/// Full report on records of a batch of `samples` inputs.
pub fn profile(records: &[SpikeRecord], net: &SpikingNet, samples: usize, em: &EnergyModel) -> Result<EnergyReport, ProfilerError> {
    let layers = count_sops(records, net)?;
    let total_sops = layers.iter().map(|l| l.sops).sum();
    let windows = records.first().map(|r| r.spikes.steps / net.d_cap().max(1) as usize).unwrap_or(1);
    let encode_macs = net.encode_macs() * (samples * windows) as u64;
    let neurons: usize = records.iter().map(|r| r.spikes.neurons()).sum();
    let spikes: u64 = layers.iter().map(|l| l.spikes).sum();
    Ok(EnergyReport {
        nsfr: nsfr_series(records),
        total_sops,
        encode_macs,
        energy_j: estimate_energy(total_sops, encode_macs, em),
        mean_spikes_per_neuron: if neurons == 0 { 0.0 } else { spikes as f64 / neurons as f64 },
        layers,
        samples,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapReduce {
    /// One map per micro-step, averaged over batch and channels.
    Channel,
    /// Additionally averaged over micro-steps.
    ChannelTime,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpikeMap {
    pub layer: String,
    /// `None` for a time-reduced map.
    pub step: Option<usize>,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SpikeMap {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Binary grayscale image, 0 to 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    /// Space-separated rows.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.width.max(1)) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }
}

pub fn export_spike_map(records: &[SpikeRecord], reduce: MapReduce) -> Vec<SpikeMap> {
    let mut out = Vec::new();
    for r in records {
        let s = r.firing_rate_map.shape();
        let (steps, h, w) = (s[0], s[1], s[2]);
        let plane = |d: usize| r.firing_rate_map.data()[d * h * w..(d + 1) * h * w].to_vec();
        match reduce {
            MapReduce::Channel => {
                for d in 0..steps {
                    out.push(SpikeMap { layer: r.name.clone(), step: Some(d + 1), height: h, width: w, values: plane(d) });
                }
            }
            MapReduce::ChannelTime => {
                let mut acc = vec![0.0; h * w];
                for d in 0..steps {
                    acc.iter_mut().zip(plane(d)).for_each(|(a, v)| *a += v);
                }
                acc.iter_mut().for_each(|a| *a /= steps.max(1) as f64);
                out.push(SpikeMap { layer: r.name.clone(), step: None, height: h, width: w, values: acc });
            }
        }
    }
    out
}

/// Writes each map as `<layer>[_tN].pgm` and `.txt` under `dir`.
pub fn write_spike_maps(dir: &Path, maps: &[SpikeMap]) -> Result<Vec<PathBuf>, ProfilerError> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for m in maps {
        let stem = match m.step {
            Some(d) => format!("{}_t{d}", m.layer.replace(['/', '+'], "_")),
            None => m.layer.replace(['/', '+'], "_"),
        };
        let pgm = dir.join(format!("{stem}.pgm"));
        std::fs::write(&pgm, m.to_pgm())?;
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt, m.to_text())?;
        paths.push(pgm);
        paths.push(txt);
    }
    Ok(paths)
}
