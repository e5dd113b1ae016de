//! Flat `key = value` experiment configuration with dotted namespaces.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sfa_core::engine::ExecutionMode;
use sfa_core::neuron::{NeuronConfig, ResetMode};
use sfa_core::profiler::MapReduce;

use crate::CliError;

/// Parsed lines of a config file, keyed by dotted name. Later lines override earlier ones.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)));
            };
            let k = k.trim();
            if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_') {
                return Err(CliError::Config(format!("line {}: bad key {k:?}", i + 1)));
            }
            entries.insert(k.to_string(), (v.trim().to_string(), i + 1));
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), (value.into(), 0));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.remove(key)
    }

    /// Removes and parses `key`, if present.
    pub fn take_parsed<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|e| {
                let at = if line > 0 { format!("line {line}: ") } else { String::new() };
                CliError::Config(format!("{at}{key} = {v:?}: {e}"))
            }),
        }
    }

    fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.take_parsed(key)?.unwrap_or(default))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    ClassifyStatic,
    ClassifyDynamic,
    MimPretrain,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::ClassifyStatic => "classify_static",
            Task::ClassifyDynamic => "classify_dynamic",
            Task::MimPretrain => "mim_pretrain",
        }
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "classify_static" => Ok(Task::ClassifyStatic),
            "classify_dynamic" => Ok(Task::ClassifyDynamic),
            "mim_pretrain" => Ok(Task::MimPretrain),
            _ => Err("expected classify_static, classify_dynamic or mim_pretrain".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Blobs,
    Shapes,
    MovingBar,
    Idx { train_images: PathBuf, train_labels: Option<PathBuf>, test_images: PathBuf, test_labels: Option<PathBuf> },
    Events { train_dir: PathBuf, test_dir: PathBuf },
}

impl DataSource {
    pub fn name(&self) -> &'static str {
        match self {
            DataSource::Blobs => "blobs",
            DataSource::Shapes => "shapes",
            DataSource::MovingBar => "moving_bar",
            DataSource::Idx { .. } => "idx",
            DataSource::Events { .. } => "events",
        }
    }

    pub fn is_synthetic(&self) -> bool {
        matches!(self, DataSource::Blobs | DataSource::Shapes | DataSource::MovingBar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Synthetic sample count.
    pub samples: usize,
    /// Synthetic image side.
    pub size: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub duration_us: u32,
    /// Held-out images for the rank diagnostic.
    pub heldout: usize,
    pub classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub bn_momentum: f32,
    pub max_steps: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MimSettings {
    pub steps: usize,
    pub rank_every: usize,
    pub patch_size: usize,
    pub mask_ratio: f64,
    pub decoder_width: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub data: DataConfig,
    pub channels: usize,
    pub heads: usize,
    pub attn_scale: Option<f64>,
    pub neuron: NeuronConfig,
    pub train: TrainSettings,
    pub mim: MimSettings,
    /// Evaluation inputs for inference commands; 0 means the whole test split.
    pub eval_samples: usize,
    pub mode: ExecutionMode,
    pub async_capacity: f64,
    pub checkpoint: Option<PathBuf>,
    pub e_ac: f64,
    pub e_mac: f64,
    pub map_reduce: MapReduce,
    pub seed: u64,
    pub out: PathBuf,
}

fn opt_to_string<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn parse_opt<T: FromStr>(kv: &mut KeyValues, key: &str) -> Result<Option<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    match kv.take_parsed::<String>(key)? {
        None => Ok(None),
        Some(s) if s == "none" => Ok(None),
        Some(s) => s.parse().map(Some).map_err(|e| CliError::Config(format!("{key} = {s:?}: {e}"))),
    }
}

fn existing(kv: &mut KeyValues, key: &str, required: bool) -> Result<Option<PathBuf>, CliError> {
    match kv.take_parsed::<String>(key)? {
        None if required => Err(CliError::Config(format!("{key} is required for this data source"))),
        None => Ok(None),
        Some(p) => {
            let p = PathBuf::from(p);
            if !p.exists() {
                return Err(CliError::Config(format!("{key}: {} does not exist", p.display())));
            }
            Ok(Some(p))
        }
    }
}

pub fn parse_reduce(s: &str) -> Result<MapReduce, CliError> {
    match s {
        "channel" => Ok(MapReduce::Channel),
        "channel_time" => Ok(MapReduce::ChannelTime),
        _ => Err(CliError::Config(format!("spike_map.reduce = {s:?}: expected channel or channel_time"))),
    }
}

fn reduce_str(r: MapReduce) -> &'static str {
    match r {
        MapReduce::Channel => "channel",
        MapReduce::ChannelTime => "channel_time",
    }
}

impl ExperimentConfig {
    /// Resolves every key, with defaults chosen by `task` unless the file names one.
    /// Unknown keys, missing seeds and nonexistent paths are errors.
    pub fn resolve(mut kv: KeyValues, default_task: Task) -> Result<Self, CliError> {
        let task = kv.take_parsed::<Task>("task")?.unwrap_or(default_task);
        let default_source = match task {
            Task::ClassifyStatic => "blobs",
            Task::ClassifyDynamic => "moving_bar",
            Task::MimPretrain => "shapes",
        };
        let source_name: String = kv.take_or("data.source", default_source.to_string())?;
        let source = match source_name.as_str() {
            "blobs" => DataSource::Blobs,
            "shapes" => DataSource::Shapes,
            "moving_bar" => DataSource::MovingBar,
            "idx" => {
                let labels = task != Task::MimPretrain;
                DataSource::Idx {
                    train_images: existing(&mut kv, "data.train_images", true)?.unwrap(),
                    train_labels: existing(&mut kv, "data.train_labels", labels)?,
                    test_images: existing(&mut kv, "data.test_images", true)?.unwrap(),
                    test_labels: existing(&mut kv, "data.test_labels", labels)?,
                }
            }
            "events" => DataSource::Events {
                train_dir: existing(&mut kv, "data.train_dir", true)?.unwrap(),
                test_dir: existing(&mut kv, "data.test_dir", true)?.unwrap(),
            },
            other => return Err(CliError::Config(format!("data.source = {other:?}: expected blobs, shapes, moving_bar, idx or events"))),
        };
        let dynamic_source = matches!(source, DataSource::MovingBar | DataSource::Events { .. });
        match task {
            Task::ClassifyDynamic if !dynamic_source => {
                return Err(CliError::Config(format!("classify_dynamic needs an event source, not {source_name}")))
            }
            Task::ClassifyStatic | Task::MimPretrain if dynamic_source => {
                return Err(CliError::Config(format!("{} needs an image source, not {source_name}", task.as_str())))
            }
            Task::ClassifyStatic if source == DataSource::Shapes => {
                return Err(CliError::Config("shapes carry no labels; use it for mim_pretrain".into()))
            }
            _ => {}
        }
        let default_samples = match source {
            DataSource::MovingBar => 320,
            DataSource::Shapes => 128,
            _ => 600,
        };
        let default_classes = match source {
            DataSource::MovingBar => 4,
            DataSource::Idx { .. } => 10,
            _ => 3,
        };
        let data = DataConfig {
            samples: kv.take_or("data.samples", default_samples)?,
            size: kv.take_or("data.size", 16)?,
            seed: kv.take_or("data.seed", 0)?,
            train_fraction: kv.take_or("data.train_fraction", 0.75)?,
            duration_us: kv.take_or("data.duration_us", 10_000)?,
            heldout: kv.take_or("data.heldout", 32)?,
            classes: kv.take_or("data.classes", default_classes)?,
            source,
        };
        if !(data.train_fraction > 0.0 && data.train_fraction < 1.0) {
            return Err(CliError::Config(format!("data.train_fraction = {} must lie in (0, 1)", data.train_fraction)));
        }
        let default_neuron = NeuronConfig { t_steps: if task == Task::ClassifyDynamic { 2 } else { 1 }, ..NeuronConfig::default() };
        let reset: String = kv.take_or("neuron.reset", default_neuron.reset_mode.as_str().to_string())?;
        let neuron = NeuronConfig {
            beta: kv.take_or("neuron.beta", default_neuron.beta)?,
            v_th: kv.take_or("neuron.v_th", default_neuron.v_th)?,
            v_reset: kv.take_or("neuron.v_reset", default_neuron.v_reset)?,
            reset_mode: ResetMode::parse(&reset)
                .ok_or_else(|| CliError::Config(format!("neuron.reset = {reset:?}: expected none, hard or soft")))?,
            d_cap: kv.take_or("neuron.d_cap", default_neuron.d_cap)?,
            t_steps: kv.take_or("neuron.t_steps", default_neuron.t_steps)?,
        };
        neuron.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let train = TrainSettings {
            epochs: kv.take_or("train.epochs", 8)?,
            batch_size: kv.take_or("train.batch_size", 32)?,
            lr: kv.take_or("train.lr", 2e-3)?,
            weight_decay: kv.take_or("train.weight_decay", 0.0)?,
            bn_momentum: kv.take_or("train.bn_momentum", 0.1)?,
            max_steps: parse_opt(&mut kv, "train.max_steps")?,
        };
        let mim = MimSettings {
            steps: kv.take_or("mim.steps", 200)?,
            rank_every: kv.take_or("mim.rank_every", 20)?,
            patch_size: kv.take_or("mim.patch_size", 4)?,
            mask_ratio: kv.take_or("mim.mask_ratio", 0.6)?,
            decoder_width: kv.take_or("mim.decoder_width", 128)?,
            decoder_layers: kv.take_or("mim.decoder_layers", 2)?,
            decoder_heads: kv.take_or("mim.decoder_heads", 4)?,
            batch_size: kv.take_or("mim.batch_size", 16)?,
            lr: kv.take_or("mim.lr", 1e-3)?,
        };
        let mode: String = kv.take_or("run.mode", "integer".to_string())?;
        let mode = ExecutionMode::parse(&mode)
            .ok_or_else(|| CliError::Config(format!("run.mode = {mode:?}: expected integer, sync or async")))?;
        let reduce: String = kv.take_or("spike_map.reduce", "channel_time".to_string())?;
        let seed = kv
            .take_parsed("seed")?
            .ok_or_else(|| CliError::Config("seed is mandatory (set `seed = N` or pass --seed)".into()))?;
        let cfg = Self {
            task,
            data,
            channels: kv.take_or("model.channels", 8)?,
            heads: kv.take_or("model.heads", 2)?,
            attn_scale: parse_opt(&mut kv, "model.attn_scale")?,
            neuron,
            train,
            mim,
            eval_samples: kv.take_or("eval.samples", 0)?,
            mode,
            async_capacity: kv.take_or("run.async_capacity", 16.0)?,
            checkpoint: existing(&mut kv, "run.checkpoint", false)?,
            e_ac: kv.take_or("energy.e_ac", 0.9e-12)?,
            e_mac: kv.take_or("energy.e_mac", 4.6e-12)?,
            map_reduce: parse_reduce(&reduce)?,
            seed,
            out: kv.take_or("out", PathBuf::from("out"))?,
        };
        if let Some(k) = kv.keys().next() {
            return Err(CliError::Config(format!("unknown key {k:?}")));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, default_task: Task) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::resolve(KeyValues::parse(&text)?, default_task)
    }

    /// Every resolved key in a form [`ExperimentConfig::resolve`] reads back unchanged.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("task", self.task.as_str().into());
        put("seed", self.seed.to_string());
        put("out", self.out.display().to_string());
        put("data.source", self.data.source.name().into());
        match &self.data.source {
            DataSource::Idx { train_images, train_labels, test_images, test_labels } => {
                put("data.train_images", train_images.display().to_string());
                if let Some(p) = train_labels {
                    put("data.train_labels", p.display().to_string());
                }
                put("data.test_images", test_images.display().to_string());
                if let Some(p) = test_labels {
                    put("data.test_labels", p.display().to_string());
                }
            }
            DataSource::Events { train_dir, test_dir } => {
                put("data.train_dir", train_dir.display().to_string());
                put("data.test_dir", test_dir.display().to_string());
            }
            _ => {}
        }
        let d = &self.data;
        put("data.samples", d.samples.to_string());
        put("data.size", d.size.to_string());
        put("data.seed", d.seed.to_string());
        put("data.train_fraction", d.train_fraction.to_string());
        put("data.duration_us", d.duration_us.to_string());
        put("data.heldout", d.heldout.to_string());
        put("data.classes", d.classes.to_string());
        put("model.channels", self.channels.to_string());
        put("model.heads", self.heads.to_string());
        put("model.attn_scale", opt_to_string(&self.attn_scale));
        let n = &self.neuron;
        put("neuron.beta", n.beta.to_string());
        put("neuron.v_th", n.v_th.to_string());
        put("neuron.v_reset", n.v_reset.to_string());
        put("neuron.reset", n.reset_mode.as_str().into());
        put("neuron.d_cap", n.d_cap.to_string());
        put("neuron.t_steps", n.t_steps.to_string());
        let t = &self.train;
        put("train.epochs", t.epochs.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.lr", t.lr.to_string());
        put("train.weight_decay", t.weight_decay.to_string());
        put("train.bn_momentum", t.bn_momentum.to_string());
        put("train.max_steps", opt_to_string(&t.max_steps));
        let m = &self.mim;
        put("mim.steps", m.steps.to_string());
        put("mim.rank_every", m.rank_every.to_string());
        put("mim.patch_size", m.patch_size.to_string());
        put("mim.mask_ratio", m.mask_ratio.to_string());
        put("mim.decoder_width", m.decoder_width.to_string());
        put("mim.decoder_layers", m.decoder_layers.to_string());
        put("mim.decoder_heads", m.decoder_heads.to_string());
        put("mim.batch_size", m.batch_size.to_string());
        put("mim.lr", m.lr.to_string());
        put("eval.samples", self.eval_samples.to_string());
        put("run.mode", self.mode.as_str().into());
        put("run.async_capacity", self.async_capacity.to_string());
        if let Some(p) = &self.checkpoint {
            put("run.checkpoint", p.display().to_string());
        }
        put("energy.e_ac", self.e_ac.to_string());
        put("energy.e_mac", self.e_mac.to_string());
        put("spike_map.reduce", reduce_str(self.map_reduce).into());
        s
    }
}
