//! Cross-entropy training with integer activations and surrogate gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{Bound, ForwardCtx, Model};
use crate::numerics::{AdamW, AdamWConfig, Graph, Tensor, Var};

use super::data::{Dataset, FrameDataset};
use super::EngineError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub bn_momentum: f32,
    pub seed: u64,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            optim: AdamWConfig { lr: 2e-3, ..AdamWConfig::default() },
            bn_momentum: 0.1,
            seed: 0,
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    /// Accuracy of the training-mode predictions seen during each epoch.
    pub epoch_accuracy: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.step_losses.last().copied()
    }
}

fn check_batch(cfg: &TrainConfig, n: usize) -> Result<(), EngineError> {
    if cfg.batch_size == 0 || n == 0 {
        return Err(EngineError::InvalidInput("empty dataset or zero batch size".into()));
    }
    Ok(())
}

/// Shared epoch loop. `step` runs one batch and returns `(loss, correct)`.
fn run_epochs(
    model: &mut Model,
    n: usize,
    cfg: &TrainConfig,
    mut step: impl FnMut(&Model, &[usize], &mut Graph<f32>, &Bound) -> Result<(Var, usize, ForwardCtx), EngineError>,
) -> Result<TrainReport, EngineError> {
    check_batch(cfg, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optim);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut last_good = model.params.clone();
    'outer: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| report.step_losses.len() >= m) {
                break 'outer;
            }
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let (loss, ok, ctx) = step(model, batch, &mut g, &bound)?;
            let l = g.value(loss).item() as f64;
            let grads = if l.is_finite() {
                g.backward(loss)?;
                model.params.collect_grads(&g, &bound)
            } else {
                Vec::new()
            };
            if !l.is_finite() || grads.iter().any(|t| !t.all_finite()) {
                model.params = last_good;
                return Err(EngineError::Diverged { step: report.step_losses.len(), loss: l });
            }
            last_good.clone_from(&model.params);
            model.apply_bn_stats(&ctx.bn_stats, cfg.bn_momentum);
            opt.step(&mut model.params.weights_mut(), &grads)?;
            report.step_losses.push(l);
            loss_sum += l * batch.len() as f64;
            correct += ok;
            seen += batch.len();
        }
        if seen > 0 {
            report.epoch_losses.push(loss_sum / seen as f64);
            report.epoch_accuracy.push(correct as f64 / seen as f64);
        }
    }
    Ok(report)
}

fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    logits.argmax_rows().iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// One-timestep training on static images. On a non-finite loss or gradient the
/// model is restored to the last parameters whose loss and gradient were finite
/// and the error is returned.
pub fn train_static(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport, EngineError> {
    if model.spec.neuron.t_steps != 1 {
        return Err(EngineError::InvalidInput("static training needs t_steps = 1".into()));
    }
    run_epochs(model, data.len(), cfg, |model, batch, g, bound| {
        let (x, labels) = data.select(batch);
        let xv = g.constant(x);
        let mut ctx = ForwardCtx::new(model.spec.neuron, true);
        let logits = model.forward(g, bound, xv, &mut ctx)?;
        let ok = count_correct(g.value(logits), &labels);
        Ok((g.cross_entropy(logits, &labels)?, ok, ctx))
    })
}

/// Logits of every step of a multi-step forward, membranes carried across steps.
pub fn dynamic_forward(
    model: &Model,
    g: &mut Graph<f32>,
    bound: &Bound,
    frames: &[Var],
    ctx: &mut ForwardCtx,
) -> Result<Vec<Var>, EngineError> {
    ctx.stateful = true;
    ctx.reset_state();
    frames.iter().map(|&x| Ok(model.forward(g, bound, x, ctx)?)).collect()
}

/// Backpropagation through `T` steps; the loss is the mean per-step cross-entropy.
pub fn train_dynamic(model: &mut Model, data: &FrameDataset, cfg: &TrainConfig) -> Result<TrainReport, EngineError> {
    let t = model.spec.neuron.t_steps;
    if t < 2 || data.t_steps() != t {
        return Err(EngineError::InvalidInput(format!("dynamic training needs t_steps >= 2 matching {} frames", data.t_steps())));
    }
    run_epochs(model, data.len(), cfg, |model, batch, g, bound| {
        let (frames, labels) = data.select(batch);
        let vars: Vec<Var> = frames.into_iter().map(|f| g.constant(f)).collect();
        let mut ctx = ForwardCtx::new(model.spec.neuron, true);
        let steps = dynamic_forward(model, g, bound, &vars, &mut ctx)?;
        let mut total: Option<Var> = None;
        let mut mean_logits = g.value(steps[0]).map(|_| 0.0);
        for &z in &steps {
            mean_logits = mean_logits.zip_map(g.value(z), |a, b| a + b)?;
            let l = g.cross_entropy(z, &labels)?;
            total = Some(match total {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        let loss = g.scale(total.unwrap(), 1.0 / t as f32);
        Ok((loss, count_correct(&mean_logits, &labels), ctx))
    })
}

/// Eval-mode logits averaged over steps, `[N, classes]`.
pub fn dynamic_eval_logits(model: &Model, frames: &[Tensor<f32>]) -> Result<Tensor<f32>, EngineError> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let vars: Vec<Var> = frames.iter().map(|f| g.constant(f.clone())).collect();
    let mut ctx = ForwardCtx::new(model.spec.neuron, false);
    let steps = dynamic_forward(model, &mut g, &bound, &vars, &mut ctx)?;
    let mut acc = g.value(steps[0]).map(|_| 0.0);
    for z in &steps {
        acc = acc.zip_map(g.value(*z), |a, b| a + b)?;
    }
    Ok(acc.map(|v| v / steps.len() as f32))
}

/// Eval-mode accuracy on static images, in batches of 256.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64, EngineError> {
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, labels) = data.select(chunk);
        correct += count_correct(&model.eval_logits(&x)?, &labels);
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

pub fn evaluate_dynamic(model: &Model, data: &FrameDataset) -> Result<f64, EngineError> {
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (frames, labels) = data.select(chunk);
        correct += count_correct(&dynamic_eval_logits(model, &frames)?, &labels);
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}
