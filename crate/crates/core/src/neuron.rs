//! Spiking-neuron dynamics and the integer fire function.
//!
//! Training fires integers `round(clip(u, 0, D))`; inference re-expresses each
//! integer `n` as a window of `D` binary spikes with the first `n` set. An IF
//! neuron with soft reset and unit threshold, fed `u + 0.5` once at the start of
//! the window, produces exactly that train.

use thiserror::Error;

use crate::numerics::{Graph, NumericsError, Real, SurrogateSpec, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuronError {
    #[error("invalid neuron config: {0}")]
    InvalidConfig(String),
    #[error("integer activation {value} at index {index} outside [0, {d_cap}]")]
    OutOfRange { index: usize, value: u32, d_cap: u32 },
    #[error("timestep {t} outside [1, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Post-spike membrane rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResetMode {
    None,
    Hard,
    Soft,
}

impl ResetMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ResetMode::None => "none",
            ResetMode::Hard => "hard",
            ResetMode::Soft => "soft",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(ResetMode::None),
            "hard" => Some(ResetMode::Hard),
            "soft" => Some(ResetMode::Soft),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeuronConfig {
    /// Membrane decay; 1 gives IF, anything else LIF.
    pub beta: f64,
    pub v_th: f64,
    pub v_reset: f64,
    pub reset_mode: ResetMode,
    /// Largest integer a neuron may fire in one training step (`D`).
    pub d_cap: u32,
    /// Training timesteps (`T`); inference runs `T * D` micro-steps.
    pub t_steps: usize,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        Self { beta: 1.0, v_th: 1.0, v_reset: 0.0, reset_mode: ResetMode::Soft, d_cap: 4, t_steps: 1 }
    }
}

impl NeuronConfig {
    pub fn validate(&self) -> Result<(), NeuronError> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(NeuronError::InvalidConfig(format!("beta {} not in (0, 1]", self.beta)));
        }
        if !(self.v_th > 0.0) {
            return Err(NeuronError::InvalidConfig(format!("v_th {} must be positive", self.v_th)));
        }
        if !self.v_reset.is_finite() {
            return Err(NeuronError::InvalidConfig("v_reset must be finite".into()));
        }
        if self.d_cap < 1 {
            return Err(NeuronError::InvalidConfig("d_cap must be >= 1".into()));
        }
        if self.t_steps < 1 {
            return Err(NeuronError::InvalidConfig("t_steps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn is_if(&self) -> bool {
        self.beta == 1.0
    }

    pub fn expanded_steps(&self) -> usize {
        self.t_steps * self.d_cap as usize
    }

    /// Membrane carried into the next window after `count` spikes were fired from `u`.
    pub fn carry(&self, u: f64, count: u32) -> f64 {
        match self.reset_mode {
            ResetMode::None => u,
            ResetMode::Soft => u - self.v_th * count as f64,
            ResetMode::Hard => {
                if count > 0 {
                    self.v_reset
                } else {
                    u
                }
            }
        }
    }

    /// One training step of an SFA neuron: charge, fire an integer, carry.
    /// Returns `(u, count, h_next)`.
    pub fn window_step(&self, h_prev: f64, x: f64) -> (f64, u32, f64) {
        let u = self.beta * h_prev + x;
        let count = fire_value(u / self.v_th, self.d_cap) as u32;
        (u, count, self.carry(u, count))
    }
}

/// `round(clip(u, 0, D))` with halves rounded up, i.e. `floor(clip(u, 0, D) + 0.5)`.
#[inline]
pub fn fire_value<T: Real>(u: T, d_cap: u32) -> T {
    let cap = T::of(d_cap as f64);
    let clipped = if u.is_nan() { T::zero() } else { u.max(T::zero()).min(cap) };
    (clipped + T::of(0.5)).floor()
}

/// Integer activations with their tensor shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Counts {
    pub shape: Vec<usize>,
    pub data: Vec<u32>,
}

impl Counts {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0; shape.iter().product()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.data.iter().map(|&v| v as u64).sum()
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(&self.shape, self.data.iter().map(|&v| T::of(v as f64)).collect()).expect("counts shape")
    }
}

/// Binary spikes over `steps` micro-steps, laid out `[step][neuron]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeTrain {
    pub steps: usize,
    pub shape: Vec<usize>,
    pub bits: Vec<u8>,
}

impl SpikeTrain {
    pub fn zeros(steps: usize, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self { steps, shape: shape.to_vec(), bits: vec![0; steps * n] }
    }

    pub fn neurons(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn step(&self, d: usize) -> &[u8] {
        let n = self.neurons();
        &self.bits[d * n..(d + 1) * n]
    }

    pub fn step_mut(&mut self, d: usize) -> &mut [u8] {
        let n = self.neurons();
        &mut self.bits[d * n..(d + 1) * n]
    }

    pub fn get(&self, d: usize, neuron: usize) -> u8 {
        self.bits[d * self.neurons() + neuron]
    }

    /// Spike count per neuron over all steps.
    pub fn sum_over_steps(&self) -> Counts {
        let n = self.neurons();
        let mut data = vec![0u32; n];
        for d in 0..self.steps {
            data.iter_mut().zip(self.step(d)).for_each(|(c, &b)| *c += b as u32);
        }
        Counts { shape: self.shape.clone(), data }
    }

    pub fn total_spikes(&self) -> u64 {
        self.bits.iter().map(|&b| b as u64).sum()
    }

    /// True when, inside every window of `window` steps, no 0 is followed by a 1.
    pub fn is_front_loaded(&self, window: usize) -> bool {
        let n = self.neurons();
        if window == 0 || self.steps % window != 0 {
            return false;
        }
        (0..n).all(|i| {
            (0..self.steps / window).all(|w| {
                let mut seen_zero = false;
                for d in w * window..(w + 1) * window {
                    match self.get(d, i) {
                        0 => seen_zero = true,
                        _ if seen_zero => return false,
                        _ => {}
                    }
                }
                true
            })
        })
    }
}

/// Expanded spikes of one layer plus the per-step firing-rate map.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeRecord {
    pub layer_id: usize,
    pub name: String,
    /// Shape `[N, C, H, W]` over `T * D` steps.
    pub spikes: SpikeTrain,
    /// `[steps, H, W]`, averaged over batch and channels.
    pub firing_rate_map: Tensor<f64>,
}

impl SpikeRecord {
    pub fn new(layer_id: usize, name: String, spikes: SpikeTrain) -> Self {
        let sh = &spikes.shape;
        let (h, w) = (sh[sh.len() - 2], sh[sh.len() - 1]);
        let planes: usize = sh[..sh.len() - 2].iter().product();
        let mut map = vec![0.0; spikes.steps * h * w];
        for d in 0..spikes.steps {
            let st = spikes.step(d);
            let dst = &mut map[d * h * w..(d + 1) * h * w];
            for p in 0..planes {
                dst.iter_mut().zip(&st[p * h * w..(p + 1) * h * w]).for_each(|(m, &b)| *m += b as f64);
            }
        }
        map.iter_mut().for_each(|m| *m /= planes.max(1) as f64);
        let firing_rate_map = Tensor::new(&[spikes.steps, h, w], map).expect("rate map shape");
        Self { layer_id, name, spikes, firing_rate_map }
    }

    pub fn steps(&self) -> usize {
        self.spikes.steps
    }

    /// Fraction of neurons firing at each step.
    pub fn rate_per_step(&self) -> Vec<f64> {
        let n = self.spikes.neurons().max(1) as f64;
        (0..self.spikes.steps).map(|d| self.spikes.step(d).iter().map(|&b| b as f64).sum::<f64>() / n).collect()
    }
}

/// Integer fire function over a whole tensor.
pub fn fire_d<T: Real>(u: &Tensor<T>, d_cap: u32) -> Counts {
    Counts { shape: u.shape().to_vec(), data: u.data().iter().map(|&v| fire_value(v, d_cap).as_f64() as u32).collect() }
}

/// Integer fire function on the tape, with the rectangular `[0, D]` surrogate.
pub fn fire_d_var<T: Real>(g: &mut Graph<T>, u: Var, d_cap: u32) -> Var {
    g.custom_grad(u, |v| fire_value(v, d_cap), SurrogateSpec::for_cap(d_cap))
}

/// Canonical front-loaded expansion: value `n` becomes `n` ones then `D - n` zeros.
pub fn expand_to_spikes(counts: &Counts, d_cap: u32) -> Result<SpikeTrain, NeuronError> {
    if let Some((index, &value)) = counts.data.iter().enumerate().find(|(_, &v)| v > d_cap) {
        return Err(NeuronError::OutOfRange { index, value, d_cap });
    }
    let d = d_cap as usize;
    let mut train = SpikeTrain::zeros(d, &counts.shape);
    for step in 0..d {
        let plane = train.step_mut(step);
        plane.iter_mut().zip(&counts.data).for_each(|(b, &c)| *b = u8::from((c as usize) > step));
    }
    Ok(train)
}

/// Spike train of an IF neuron with soft reset and unit threshold over `D`
/// steps, charged once with `u + 0.5` at the first step.
pub fn if_sr_emit<T: Real>(u: &Tensor<T>, d_cap: u32) -> SpikeTrain {
    let d = d_cap as usize;
    let mut train = SpikeTrain::zeros(d, u.shape());
    let n = u.len();
    let half = T::of(0.5);
    for (i, &ui) in u.data().iter().enumerate() {
        let mut membrane = T::zero();
        for step in 0..d {
            let input = if step == 0 { ui + half } else { T::zero() };
            membrane += input;
            if membrane >= T::one() {
                train.bits[step * n + i] = 1;
                membrane -= T::one();
            }
        }
    }
    train
}

/// One timestep of binary dynamics: charge, Heaviside fire, reset.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput<T: Real> {
    pub u: Tensor<T>,
    pub s: Tensor<T>,
    pub h: Tensor<T>,
}

pub fn step_dynamics<T: Real>(cfg: &NeuronConfig, h_prev: &Tensor<T>, x: &Tensor<T>) -> Result<StepOutput<T>, NeuronError> {
    let beta = T::of(cfg.beta);
    let v_th = T::of(cfg.v_th);
    let v_reset = T::of(cfg.v_reset);
    let u = h_prev.zip_map(x, |h, xi| beta * h + xi)?;
    let s = u.map(|v| if v - v_th >= T::zero() { T::one() } else { T::zero() });
    let h = u.zip_map(&s, |ui, si| match cfg.reset_mode {
        ResetMode::None => ui,
        ResetMode::Hard => ui * (T::one() - si) + v_reset * si,
        ResetMode::Soft => ui - v_th * si,
    })?;
    Ok(StepOutput { u, s, h })
}

/// `ReLU(u) - fire_d(u) / D`.
pub fn forward_error_value(u: f64, d_cap: u32) -> f64 {
    u.max(0.0) - fire_value(u, d_cap) / d_cap as f64
}

/// Gradient error of the rectangular surrogate against `fire_d / D`, in its
/// piecewise form: 0 below 0, `u - round(u) / D` inside `[0, D)`, 1 from `D` on.
pub fn backward_error_value(u: f64, d_cap: u32) -> f64 {
    let d = d_cap as f64;
    if u < 0.0 {
        0.0
    } else if u < d {
        u - (u + 0.5).floor() / d
    } else {
        1.0
    }
}

/// Gap between the continuous rate `clip(u, 0, D) / D` and the fired rate
/// `fire_d(u) / D`; bounded by `1 / (2D)` in magnitude.
pub fn rate_quantization_error_value(u: f64, d_cap: u32) -> f64 {
    let d = d_cap as f64;
    (u.clamp(0.0, d) - fire_value(u, d_cap)) / d
}

pub fn forward_error<T: Real>(u: &Tensor<T>, d_cap: u32) -> Tensor<T> {
    u.map(|v| T::of(forward_error_value(v.as_f64(), d_cap)))
}

pub fn backward_error<T: Real>(u: &Tensor<T>, d_cap: u32) -> Tensor<T> {
    u.map(|v| T::of(backward_error_value(v.as_f64(), d_cap)))
}

/// Which dynamics govern expanded timestep `t_global`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Phase {
    /// Unit-threshold soft-reset emission inside window `window` (1-based).
    IntraWindow { window: usize, micro_step: usize },
    /// Last micro-step of a window that is followed by another: the configured
    /// integration and reset carry the membrane across.
    Boundary { window: usize, reset: ResetMode, beta: f64 },
}

/// Dynamics selector for `t_global` in `[1, T * D]`.
pub fn hybrid_reset_schedule(cfg: &NeuronConfig, t_global: usize) -> Result<Phase, NeuronError> {
    let d = cfg.d_cap as usize;
    let max = cfg.expanded_steps();
    if t_global == 0 || t_global > max {
        return Err(NeuronError::TimestepOutOfRange { t: t_global, max });
    }
    let window = (t_global - 1) / d + 1;
    let micro_step = (t_global - 1) % d + 1;
    if micro_step == d && window < cfg.t_steps {
        Ok(Phase::Boundary { window, reset: cfg.reset_mode, beta: cfg.beta })
    } else {
        Ok(Phase::IntraWindow { window, micro_step })
    }
}

/// Scalar trace of a single neuron run through `T` windows of `D` micro-steps.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridTrace {
    /// Binary spikes over `T * D` micro-steps.
    pub spikes: Vec<u8>,
    /// Membrane state entering each window (before integrating that window's input).
    pub window_start: Vec<f64>,
    /// Spike count per window.
    pub counts: Vec<u32>,
}

/// Runs the hybrid schedule micro-step by micro-step for one neuron whose
/// window `t` receives spatial input `inputs[t]`.
pub fn simulate_hybrid(cfg: &NeuronConfig, inputs: &[f64]) -> Result<HybridTrace, NeuronError> {
    cfg.validate()?;
    if inputs.len() != cfg.t_steps {
        return Err(NeuronError::InvalidConfig(format!("{} inputs for {} windows", inputs.len(), cfg.t_steps)));
    }
    let d = cfg.d_cap as usize;
    let mut spikes = Vec::with_capacity(cfg.expanded_steps());
    let mut window_start = Vec::with_capacity(cfg.t_steps);
    let mut counts = Vec::with_capacity(cfg.t_steps);
    let mut h = 0.0;
    let mut u = 0.0;
    let mut membrane = 0.0;
    let mut count = 0u32;
    for t_global in 1..=cfg.expanded_steps() {
        let micro = (t_global - 1) % d + 1;
        let window = (t_global - 1) / d;
        if micro == 1 {
            window_start.push(h);
            u = cfg.beta * h + inputs[window];
            membrane = u / cfg.v_th + 0.5;
            count = 0;
        }
        let fired = membrane >= 1.0;
        if fired {
            membrane -= 1.0;
            count += 1;
        }
        spikes.push(u8::from(fired));
        match hybrid_reset_schedule(cfg, t_global)? {
            Phase::Boundary { .. } => h = cfg.carry(u, count),
            Phase::IntraWindow { micro_step, .. } if micro_step == d => h = cfg.carry(u, count),
            Phase::IntraWindow { .. } => {}
        }
        if micro == d {
            counts.push(count);
        }
    }
    Ok(HybridTrace { spikes, window_start, counts })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: f32) -> Tensor<f32> {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    #[test]
    fn hard_and_soft_reset_steps() {
        let cfg = NeuronConfig { reset_mode: ResetMode::Hard, ..Default::default() };
        let out = step_dynamics(&cfg, &t1(0.0), &t1(1.5)).unwrap();
        assert_eq!((out.u.item(), out.s.item(), out.h.item()), (1.5, 1.0, 0.0));
        let cfg = NeuronConfig { reset_mode: ResetMode::Soft, ..Default::default() };
        let out = step_dynamics(&cfg, &t1(0.0), &t1(1.5)).unwrap();
        assert_eq!((out.s.item(), out.h.item()), (1.0, 0.5));
    }

    #[test]
    fn no_reset_keeps_firing_after_threshold_crossing() {
        let cfg = NeuronConfig { reset_mode: ResetMode::None, ..Default::default() };
        let mut h = t1(0.0);
        let inputs = [0.2, 1.2, 0.0, 0.0, 0.0];
        let mut fired = Vec::new();
        for x in inputs {
            let out = step_dynamics(&cfg, &h, &t1(x)).unwrap();
            fired.push(out.s.item());
            h = out.h;
        }
        assert_eq!(fired, vec![0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn heaviside_fires_at_exact_threshold() {
        let cfg = NeuronConfig { reset_mode: ResetMode::Soft, ..Default::default() };
        let out = step_dynamics(&cfg, &t1(0.0), &t1(1.0)).unwrap();
        assert_eq!(out.s.item(), 1.0);
    }

    #[test]
    fn fire_value_examples() {
        assert_eq!(fire_value(2.4f32, 4), 2.0);
        assert_eq!(fire_value(-3.0f32, 4), 0.0);
        assert_eq!(fire_value(9.0f32, 4), 4.0);
        assert_eq!(fire_value(2.5f32, 4), 3.0);
        assert_eq!(fire_value(0.5f64, 1), 1.0);
        assert_eq!(fire_value(f32::NAN, 4), 0.0);
    }

    #[test]
    fn expansion_examples() {
        let c = Counts { shape: vec![2], data: vec![3, 0] };
        let t = expand_to_spikes(&c, 4).unwrap();
        let per_neuron: Vec<Vec<u8>> = (0..2).map(|i| (0..4).map(|d| t.get(d, i)).collect()).collect();
        assert_eq!(per_neuron, vec![vec![1, 1, 1, 0], vec![0, 0, 0, 0]]);
        assert!(t.is_front_loaded(4));
        let bad = Counts { shape: vec![1], data: vec![5] };
        assert!(matches!(expand_to_spikes(&bad, 4), Err(NeuronError::OutOfRange { value: 5, .. })));
    }

    #[test]
    fn if_sr_matches_hand_simulation() {
        let t = if_sr_emit(&t1(3.2), 4);
        assert_eq!(t.bits, vec![1, 1, 1, 0]);
        let t = if_sr_emit(&t1(0.4), 4);
        assert_eq!(t.bits, vec![0, 0, 0, 0]);
    }

    #[test]
    fn front_loading_detects_gaps() {
        let t = SpikeTrain { steps: 3, shape: vec![1], bits: vec![1, 0, 1] };
        assert!(!t.is_front_loaded(3));
        assert!(t.is_front_loaded(1));
    }

    #[test]
    fn error_branches() {
        assert_eq!(forward_error_value(-2.0, 4), 0.0);
        assert_eq!(forward_error_value(4.0, 4), 3.0);
        assert_eq!(backward_error_value(-0.5, 4), 0.0);
        assert_eq!(backward_error_value(8.0, 4), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(NeuronConfig::default().validate().is_ok());
        for bad in [
            NeuronConfig { beta: 0.0, ..Default::default() },
            NeuronConfig { beta: 1.5, ..Default::default() },
            NeuronConfig { v_th: 0.0, ..Default::default() },
            NeuronConfig { d_cap: 0, ..Default::default() },
            NeuronConfig { t_steps: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        assert!(NeuronConfig::default().is_if());
        assert!(!NeuronConfig { beta: 0.5, ..Default::default() }.is_if());
    }

    #[test]
    fn schedule_for_single_window_is_pure_expansion() {
        let cfg = NeuronConfig { t_steps: 1, d_cap: 4, ..Default::default() };
        for t in 1..=4 {
            assert!(matches!(hybrid_reset_schedule(&cfg, t).unwrap(), Phase::IntraWindow { window: 1, .. }));
        }
        assert!(hybrid_reset_schedule(&cfg, 0).is_err());
        assert!(hybrid_reset_schedule(&cfg, 5).is_err());
    }

    #[test]
    fn schedule_marks_window_boundaries() {
        let cfg = NeuronConfig { t_steps: 2, d_cap: 3, ..Default::default() };
        let phases: Vec<_> = (1..=6).map(|t| hybrid_reset_schedule(&cfg, t).unwrap()).collect();
        assert!(matches!(phases[2], Phase::Boundary { window: 1, .. }));
        assert!(matches!(phases[5], Phase::IntraWindow { window: 2, micro_step: 3 }));
        assert_eq!(phases.iter().filter(|p| matches!(p, Phase::Boundary { .. })).count(), 1);
    }

    #[test]
    fn hard_reset_boundary_starts_next_window_at_reset_value() {
        let cfg = NeuronConfig { t_steps: 2, d_cap: 3, beta: 1.0, reset_mode: ResetMode::Hard, v_reset: -0.25, ..Default::default() };
        let trace = simulate_hybrid(&cfg, &[2.2, 0.1]).unwrap();
        assert_eq!(trace.window_start, vec![0.0, -0.25]);
        assert_eq!(&trace.spikes[..3], &[1, 1, 0]);
    }

    #[test]
    fn soft_reset_boundary_carries_residual() {
        // window 1: u = 2.2 fires round(2.2) = 2, residual 0.2
        // window 2: u = 0.2 + 0.9 = 1.1 fires 1, residual 0.1
        let cfg = NeuronConfig { t_steps: 2, d_cap: 3, beta: 1.0, reset_mode: ResetMode::Soft, ..Default::default() };
        let trace = simulate_hybrid(&cfg, &[2.2, 0.9]).unwrap();
        assert!((trace.window_start[1] - 0.2).abs() < 1e-12);
        assert_eq!(trace.counts, vec![2, 1]);
        assert_eq!(trace.spikes, vec![1, 1, 0, 1, 0, 0]);
    }

    #[test]
    fn hybrid_counts_match_window_step() {
        let cfg = NeuronConfig { t_steps: 3, d_cap: 4, beta: 0.7, reset_mode: ResetMode::Soft, ..Default::default() };
        let inputs = [3.7, -0.4, 2.6];
        let trace = simulate_hybrid(&cfg, &inputs).unwrap();
        let mut h = 0.0;
        for (t, &x) in inputs.iter().enumerate() {
            let (_, c, next) = cfg.window_step(h, x);
            assert_eq!(trace.counts[t], c);
            h = next;
        }
    }
}
