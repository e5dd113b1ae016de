//! Subcommands and the artifacts they write under `--out`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use sfa_core::arch::{build_model, Model, ModelSpec};
use sfa_core::engine::{
    blobs, compile, equivalence_report, evaluate, evaluate_dynamic, gather_rows, infer_async_event, infer_integer,
    infer_sync_expanded, moving_bar, shapes, train_dynamic, train_static, AsyncConfig, Dataset, ExecutionMode,
    FrameDataset, SpikingNet, TrainConfig, TrainReport,
};
use sfa_core::mim::{finetune_convert, MimConfig, MimPretrainer};
use sfa_core::numerics::{AdamWConfig, Tensor};
use sfa_core::profiler::{export_spike_map, profile, write_spike_maps, EnergyModel};

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, ExperimentConfig, KeyValues, Task};
use crate::datasets::{load_event_dataset, load_idx_dataset, load_idx_images};
use crate::CliError;

#[derive(Parser, Debug, Clone)]
#[command(name = "sfa", version, about = "Integer-trained spiking networks with spike-driven inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// Experiment config of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Executor for inference commands.
    #[arg(long, global = true, value_parser = ["integer", "sync", "async"])]
    pub mode: Option<String>,
    /// Largest integer activation, overriding `neuron.d_cap`.
    #[arg(long = "d-cap", global = true, value_name = "N")]
    pub d_cap: Option<u32>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Model checkpoint to load.
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Train a classifier with integer activations.
    Train,
    /// Masked image modeling with a sparse-convolution encoder.
    PretrainMim,
    /// Train a classifier starting from a pretrained encoder checkpoint.
    Finetune,
    /// Evaluate a checkpoint with one of the executors.
    Infer,
    /// Compare integer, expanded and event-driven execution neuron by neuron.
    EquivCheck,
    /// Count synaptic operations and estimate energy.
    Profile,
    /// Export per-layer firing maps as PGM and text.
    SpikeMap,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::PretrainMim => "pretrain-mim",
            Command::Finetune => "finetune",
            Command::Infer => "infer",
            Command::EquivCheck => "equiv-check",
            Command::Profile => "profile",
            Command::SpikeMap => "spike-map",
        }
    }
}

/// Config file plus command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut kv = match &cli.common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            KeyValues::parse(&text)?
        }
        None => KeyValues::default(),
    };
    let c = &cli.common;
    if let Some(s) = c.seed {
        kv.set("seed", s.to_string());
    }
    if let Some(d) = c.d_cap {
        kv.set("neuron.d_cap", d.to_string());
    }
    if let Some(m) = &c.mode {
        kv.set("run.mode", m.clone());
    }
    if let Some(o) = &c.out {
        kv.set("out", o.display().to_string());
    }
    if let Some(p) = &c.checkpoint {
        kv.set("run.checkpoint", p.display().to_string());
    }
    let default_task = if cli.command == Command::PretrainMim { Task::MimPretrain } else { Task::ClassifyStatic };
    let cfg = ExperimentConfig::resolve(kv, default_task)?;
    match (cli.command, cfg.task) {
        (Command::PretrainMim, Task::MimPretrain) => {}
        (Command::PretrainMim, t) | (_, t @ Task::MimPretrain) => {
            return Err(CliError::Config(format!("{} cannot run task {}", cli.command.name(), t.as_str())))
        }
        _ => {}
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<String, CliError> {
    let cfg = resolve_config(cli)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::Io(format!("{}: {e}", cfg.out.display())))?;
    let out = Output { dir: cfg.out.clone() };
    out.write("manifest.txt", &format!("# sfa {}\n{}", cli.command.name(), cfg.to_text()))?;
    match cli.command {
        Command::Train => train(&cfg, &out, None),
        Command::Finetune => {
            let ck = Checkpoint::load(require_checkpoint(&cfg)?)?;
            train(&cfg, &out, Some(finetune_convert(&ck.to_model()?)))
        }
        Command::PretrainMim => pretrain(&cfg, &out),
        Command::Infer => infer(&cfg, &out),
        Command::EquivCheck => equiv_check(&cfg, &out),
        Command::Profile => profile_cmd(&cfg, &out),
        Command::SpikeMap => spike_map(&cfg, &out),
    }
}

struct Output {
    dir: PathBuf,
}

impl Output {
    fn write(&self, name: &str, contents: &str) -> Result<(), CliError> {
        let p = self.dir.join(name);
        std::fs::write(&p, contents).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

fn require_checkpoint(cfg: &ExperimentConfig) -> Result<&Path, CliError> {
    cfg.checkpoint.as_deref().ok_or_else(|| CliError::Config("this command needs --checkpoint".into()))
}

/// Train and test data, static images or per-step frames.
enum Split {
    Static(Dataset, Dataset),
    Dynamic(FrameDataset, FrameDataset),
}

impl Split {
    fn sample_shape(&self) -> [usize; 3] {
        match self {
            Split::Static(d, _) => d.sample_shape(),
            Split::Dynamic(d, _) => {
                let s = d.frames[0].shape();
                [s[1], s[2], s[3]]
            }
        }
    }

    fn num_classes(&self) -> usize {
        match self {
            Split::Static(d, _) => d.num_classes,
            Split::Dynamic(d, _) => d.num_classes,
        }
    }

    /// Test frames and labels, cut to `limit` samples unless it is 0.
    fn eval(&self, limit: usize) -> (Vec<Tensor<f32>>, Vec<usize>) {
        let (frames, labels) = match self {
            Split::Static(_, t) => (vec![t.images.clone()], t.labels.clone()),
            Split::Dynamic(_, t) => (t.frames.clone(), t.labels.clone()),
        };
        if limit == 0 || limit >= labels.len() {
            return (frames, labels);
        }
        let idx: Vec<usize> = (0..limit).collect();
        (frames.iter().map(|f| gather_rows(f, &idx)).collect(), labels[..limit].to_vec())
    }

    /// Images for BN calibration of a fresh model.
    fn calibration(&self) -> &Tensor<f32> {
        match self {
            Split::Static(d, _) => &d.images,
            Split::Dynamic(d, _) => &d.frames[0],
        }
    }
}

fn train_count(cfg: &ExperimentConfig, n: usize) -> usize {
    ((n as f64 * cfg.data.train_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

fn load_split(cfg: &ExperimentConfig, t_steps: usize) -> Result<Split, CliError> {
    let d = &cfg.data;
    Ok(match &d.source {
        DataSource::Blobs => {
            let all = blobs(d.samples, d.size, d.seed);
            let (a, b) = all.split(train_count(cfg, all.len()));
            Split::Static(a, b)
        }
        DataSource::MovingBar => {
            let fd = moving_bar(d.samples, d.size, d.duration_us, d.seed).to_frames(t_steps)?;
            let (a, b) = fd.split(train_count(cfg, fd.len()));
            Split::Dynamic(a, b)
        }
        DataSource::Idx { train_images, train_labels: Some(trl), test_images, test_labels: Some(tel) } => Split::Static(
            load_idx_dataset(train_images, trl, d.classes)?,
            load_idx_dataset(test_images, tel, d.classes)?,
        ),
        DataSource::Events { train_dir, test_dir } => {
            Split::Dynamic(load_event_dataset(train_dir)?.to_frames(t_steps)?, load_event_dataset(test_dir)?.to_frames(t_steps)?)
        }
        other => return Err(CliError::Config(format!("{} data cannot be used for classification", other.name()))),
    })
}

fn model_spec(cfg: &ExperimentConfig, input_shape: [usize; 3], classes: usize) -> ModelSpec {
    let mut spec = ModelSpec::toy(input_shape, classes, cfg.channels, cfg.heads, cfg.neuron);
    spec.attn_scale = cfg.attn_scale;
    spec
}

fn check_fit(model: &Model, split: &Split) -> Result<(), CliError> {
    let s = &model.spec;
    if s.input_shape != split.sample_shape() || s.num_classes != split.num_classes() {
        return Err(CliError::Config(format!(
            "model takes {:?} inputs with {} classes, data has {:?} with {}",
            s.input_shape,
            s.num_classes,
            split.sample_shape(),
            split.num_classes()
        )));
    }
    let dynamic = matches!(split, Split::Dynamic(..));
    if dynamic != (s.neuron.t_steps > 1) {
        return Err(CliError::Config(format!("model has t_steps = {} which does not suit this data", s.neuron.t_steps)));
    }
    Ok(())
}

/// Checkpoint model if one is configured, otherwise a fresh model with calibrated normalization.
fn model_and_data(cfg: &ExperimentConfig, fresh_allowed: bool) -> Result<(Model, Split), CliError> {
    match &cfg.checkpoint {
        Some(p) => {
            let m = Checkpoint::load(p)?.to_model()?;
            let split = load_split(cfg, m.spec.neuron.t_steps)?;
            check_fit(&m, &split)?;
            Ok((m, split))
        }
        None if fresh_allowed => {
            let split = load_split(cfg, cfg.neuron.t_steps)?;
            let mut m = build_model(&model_spec(cfg, split.sample_shape(), split.num_classes()), cfg.seed)?;
            m.calibrate_bn(split.calibration())?;
            Ok((m, split))
        }
        None => Err(CliError::Config("this command needs --checkpoint".into())),
    }
}

fn async_config(cfg: &ExperimentConfig) -> AsyncConfig {
    AsyncConfig { seed: cfg.seed, capacity_factor: cfg.async_capacity }
}

fn engine_logits(net: &SpikingNet, frames: &[Tensor<f32>], cfg: &ExperimentConfig) -> Result<Tensor<f64>, CliError> {
    Ok(match cfg.mode {
        ExecutionMode::Integer => infer_integer(net, frames)?.logits,
        ExecutionMode::SyncExpanded => infer_sync_expanded(net, frames)?.logits,
        ExecutionMode::AsyncEvent => infer_async_event(net, frames, async_config(cfg))?.logits,
    })
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64
}

fn predictions_csv(pred: &[usize], labels: &[usize]) -> String {
    let mut s = String::from("index,label,prediction\n");
    for (i, (p, l)) in pred.iter().zip(labels).enumerate() {
        let _ = writeln!(s, "{i},{l},{p}");
    }
    s
}

fn train_csvs(out: &Output, report: &TrainReport) -> Result<(), CliError> {
    let mut m = String::from("epoch,loss,train_accuracy\n");
    for (i, (l, a)) in report.epoch_losses.iter().zip(&report.epoch_accuracy).enumerate() {
        let _ = writeln!(m, "{},{l},{a}", i + 1);
    }
    out.write("metrics.csv", &m)?;
    let mut s = String::from("step,loss\n");
    for (i, l) in report.step_losses.iter().enumerate() {
        let _ = writeln!(s, "{},{l}", i + 1);
    }
    out.write("steps.csv", &s)
}

fn train(cfg: &ExperimentConfig, out: &Output, start: Option<Model>) -> Result<String, CliError> {
    let (mut model, split) = match start {
        Some(m) => {
            let split = load_split(cfg, m.spec.neuron.t_steps)?;
            check_fit(&m, &split)?;
            (m, split)
        }
        None => {
            let split = load_split(cfg, cfg.neuron.t_steps)?;
            (build_model(&model_spec(cfg, split.sample_shape(), split.num_classes()), cfg.seed)?, split)
        }
    };
    let t = &cfg.train;
    let tc = TrainConfig {
        epochs: t.epochs,
        batch_size: t.batch_size,
        optim: AdamWConfig { lr: t.lr, weight_decay: t.weight_decay, ..AdamWConfig::default() },
        bn_momentum: t.bn_momentum,
        seed: cfg.seed,
        max_steps: t.max_steps,
    };
    let report = match &split {
        Split::Static(train, _) => train_static(&mut model, train, &tc)?,
        Split::Dynamic(train, _) => train_dynamic(&mut model, train, &tc)?,
    };
    let float_acc = match &split {
        Split::Static(_, test) => evaluate(&model, test)?,
        Split::Dynamic(_, test) => evaluate_dynamic(&model, test)?,
    };
    let (frames, labels) = split.eval(0);
    let net = compile(&model);
    let pred = engine_logits(&net, &frames, cfg)?.argmax_rows();
    let acc = accuracy(&pred, &labels);
    train_csvs(out, &report)?;
    out.write("predictions.csv", &predictions_csv(&pred, &labels))?;
    let summary = format!(
        "mode: {}\ntest_samples: {}\ntest_accuracy: {acc}\ntest_accuracy_training_forward: {float_acc}\nsteps: {}\nfinal_loss: {}\n",
        cfg.mode.as_str(),
        labels.len(),
        report.step_losses.len(),
        report.final_loss().unwrap_or(f64::NAN)
    );
    out.write("eval.txt", &summary)?;
    let meta = BTreeMap::from([
        ("seed".to_string(), cfg.seed.to_string()),
        ("steps".to_string(), report.step_losses.len().to_string()),
        ("test_accuracy".to_string(), acc.to_string()),
    ]);
    Checkpoint::from_model(&model, meta).save(&out.path("model.sfa"))?;
    Ok(summary)
}

fn mim_images(cfg: &ExperimentConfig) -> Result<(Tensor<f32>, Tensor<f32>), CliError> {
    let d = &cfg.data;
    Ok(match &d.source {
        DataSource::Shapes => (shapes(d.samples, d.size, d.seed), shapes(d.heldout, d.size, d.seed.wrapping_add(1))),
        DataSource::Blobs => {
            let all = blobs(d.samples + d.heldout, d.size, d.seed);
            let (a, b) = all.split(d.samples);
            (a.images, b.images)
        }
        DataSource::Idx { train_images, test_images, .. } => {
            let held = load_idx_images(test_images)?;
            let n = d.heldout.min(held.shape()[0]);
            (load_idx_images(train_images)?, gather_rows(&held, &(0..n).collect::<Vec<_>>()))
        }
        other => return Err(CliError::Config(format!("{} data cannot be used for pretraining", other.name()))),
    })
}

fn pretrain(cfg: &ExperimentConfig, out: &Output) -> Result<String, CliError> {
    let (data, heldout) = mim_images(cfg)?;
    let s = data.shape();
    let spec = model_spec(cfg, [s[1], s[2], s[3]], cfg.data.classes);
    let m = &cfg.mim;
    let mc = MimConfig {
        patch_size: m.patch_size,
        mask_ratio: m.mask_ratio,
        decoder_width: m.decoder_width,
        decoder_layers: m.decoder_layers,
        decoder_heads: m.decoder_heads,
        batch_size: m.batch_size,
        optim: AdamWConfig { lr: m.lr, ..AdamWConfig::default() },
        bn_momentum: cfg.train.bn_momentum,
        seed: cfg.seed,
    };
    let mut trainer = MimPretrainer::new(&spec, mc)?;
    let report = trainer.run(&data, &heldout, m.steps, m.rank_every)?;
    let mut losses = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        let _ = writeln!(losses, "{},{l}", i + 1);
    }
    out.write("metrics.csv", &losses)?;
    let mut ranks = String::from("step,effective_rank\n");
    for (step, r) in &report.ranks {
        let _ = writeln!(ranks, "{step},{r}");
    }
    out.write("rank.csv", &ranks)?;
    let first = report.ranks.iter().find(|(s, _)| *s == 1).or(report.ranks.first()).map_or(f64::NAN, |r| r.1);
    let last = report.ranks.last().map_or(f64::NAN, |r| r.1);
    let summary = format!(
        "steps: {}\nfinal_loss: {}\nrank_step1: {first}\nrank_final: {last}\n",
        report.losses.len(),
        report.losses.last().copied().unwrap_or(f64::NAN)
    );
    out.write("summary.txt", &summary)?;
    let meta = BTreeMap::from([
        ("seed".to_string(), cfg.seed.to_string()),
        ("mim_steps".to_string(), report.losses.len().to_string()),
    ]);
    Checkpoint::from_model(&trainer.encoder, meta).save(&out.path("encoder.sfa"))?;
    Ok(summary)
}

fn infer(cfg: &ExperimentConfig, out: &Output) -> Result<String, CliError> {
    let (model, split) = model_and_data(cfg, false)?;
    let (frames, labels) = split.eval(cfg.eval_samples);
    let pred = engine_logits(&compile(&model), &frames, cfg)?.argmax_rows();
    let acc = accuracy(&pred, &labels);
    out.write("predictions.csv", &predictions_csv(&pred, &labels))?;
    let summary = format!("mode: {}\ntest_samples: {}\ntest_accuracy: {acc}\n", cfg.mode.as_str(), labels.len());
    out.write("eval.txt", &summary)?;
    Ok(summary)
}

fn equiv_check(cfg: &ExperimentConfig, out: &Output) -> Result<String, CliError> {
    let (model, split) = model_and_data(cfg, true)?;
    let (frames, _) = split.eval(cfg.eval_samples);
    let report = equivalence_report(&compile(&model), &frames, async_config(cfg), None)?;
    out.write("equivalence.csv", &report.to_csv())?;
    let summary = format!(
        "samples: {}\nlayers: {}\nmatch_fraction: {}\nmismatches: {}\nmax_rel_logit_diff: {}\npassed: {}\n",
        frames[0].shape()[0],
        report.layers.len(),
        report.match_fraction(),
        report.total_mismatches,
        report.max_rel,
        report.passed(1e-4)
    );
    out.write("summary.txt", &summary)?;
    report.ensure(1e-4)?;
    Ok(summary)
}

fn profile_cmd(cfg: &ExperimentConfig, out: &Output) -> Result<String, CliError> {
    let (model, split) = model_and_data(cfg, true)?;
    let (frames, _) = split.eval(cfg.eval_samples);
    let n = frames[0].shape()[0];
    let net = compile(&model);
    let sync = infer_sync_expanded(&net, &frames)?;
    let rep = profile(&sync.records, &net, n, &EnergyModel::new(cfg.e_ac, cfg.e_mac)?)?;
    let measured = match cfg.mode {
        ExecutionMode::Integer => rep.total_sops,
        ExecutionMode::SyncExpanded => sync.accumulations,
        ExecutionMode::AsyncEvent => infer_async_event(&net, &frames, async_config(cfg))?.accumulations,
    };
    out.write("sops.csv", &rep.sops_csv())?;
    out.write("nsfr.csv", &rep.nsfr_csv())?;
    let summary = format!("mode: {}\nmeasured_accumulations: {measured}\n{}", cfg.mode.as_str(), rep.summary());
    out.write("summary.txt", &summary)?;
    if measured != rep.total_sops {
        return Err(CliError::Failed(format!("executor performed {measured} accumulations, counted {} SOPs", rep.total_sops)));
    }
    Ok(summary)
}

fn spike_map(cfg: &ExperimentConfig, out: &Output) -> Result<String, CliError> {
    let (model, split) = model_and_data(cfg, true)?;
    let (frames, _) = split.eval(cfg.eval_samples);
    let sync = infer_sync_expanded(&compile(&model), &frames)?;
    let maps = export_spike_map(&sync.records, cfg.map_reduce);
    let paths = write_spike_maps(&out.path("maps"), &maps)?;
    let mut index = String::from("layer,step,file,max_rate\n");
    for (m, p) in maps.iter().zip(paths.chunks(2)) {
        let step = m.step.map_or("all".to_string(), |s| s.to_string());
        let file = p[0].file_name().unwrap().to_string_lossy();
        let _ = writeln!(index, "{},{step},{file},{}", m.layer, m.max());
    }
    out.write("maps.csv", &index)?;
    Ok(format!("maps: {}\n", maps.len()))
}
