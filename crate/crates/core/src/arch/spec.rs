use crate::neuron::NeuronConfig;

use super::ArchError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    ConvBlock,
    TransformerBlock,
    Downsample,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::ConvBlock => "conv_block",
            BlockKind::TransformerBlock => "transformer_block",
            BlockKind::Downsample => "downsample",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "conv_block" | "conv" => Some(BlockKind::ConvBlock),
            "transformer_block" | "transformer" => Some(BlockKind::TransformerBlock),
            "downsample" | "down" => Some(BlockKind::Downsample),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub channels: usize,
    pub heads: usize,
    /// Channel expansion of the value projection.
    pub gamma: f64,
    pub mlp_ratio: f64,
}

impl BlockSpec {
    pub fn downsample(channels: usize) -> Self {
        Self { kind: BlockKind::Downsample, channels, heads: 1, gamma: 2.0, mlp_ratio: 4.0 }
    }

    pub fn conv(channels: usize) -> Self {
        Self { kind: BlockKind::ConvBlock, channels, heads: 1, gamma: 2.0, mlp_ratio: 4.0 }
    }

    pub fn transformer(channels: usize, heads: usize) -> Self {
        Self { kind: BlockKind::TransformerBlock, channels, heads, gamma: 2.0, mlp_ratio: 4.0 }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_mlp_ratio(mut self, ratio: f64) -> Self {
        self.mlp_ratio = ratio;
        self
    }

    pub fn value_channels(&self) -> usize {
        (self.gamma * self.channels as f64).round() as usize
    }

    pub fn hidden_channels(&self) -> usize {
        (self.mlp_ratio * self.channels as f64).round() as usize
    }

    fn validate(&self, at: &str) -> Result<(), ArchError> {
        let bad = |msg: String| Err(ArchError::InvalidSpec(format!("{at}: {msg}")));
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if self.kind == BlockKind::Downsample {
            return Ok(());
        }
        let scaled = self.mlp_ratio * self.channels as f64;
        if !(self.mlp_ratio > 0.0) || (scaled - scaled.round()).abs() > 1e-9 || scaled.round() < 1.0 {
            return bad(format!("mlp_ratio {} x {} channels is not a positive integer", self.mlp_ratio, self.channels));
        }
        if self.kind == BlockKind::TransformerBlock {
            if self.heads == 0 || self.channels % self.heads != 0 {
                return bad(format!("{} heads do not divide {} channels", self.heads, self.channels));
            }
            let v = self.gamma * self.channels as f64;
            if !(self.gamma >= 1.0) || (v - v.round()).abs() > 1e-9 {
                return bad(format!("gamma {} x {} channels is not an integer >= channels", self.gamma, self.channels));
            }
            if self.value_channels() % self.heads != 0 {
                return bad(format!("{} heads do not divide {} value channels", self.heads, self.value_channels()));
            }
        }
        Ok(())
    }
}

/// Stages of blocks on a `[C, H, W]` input.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub stages: Vec<Vec<BlockSpec>>,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub neuron: NeuronConfig,
    /// Attention scale; `None` means `1 / sqrt(channels / heads)`.
    pub attn_scale: Option<f64>,
}

impl ModelSpec {
    /// Two stages of two blocks, channels `c` then `2c`.
    pub fn toy(input_shape: [usize; 3], num_classes: usize, c: usize, heads: usize, neuron: NeuronConfig) -> Self {
        Self {
            stages: vec![
                vec![BlockSpec::downsample(c), BlockSpec::conv(c)],
                vec![BlockSpec::downsample(2 * c), BlockSpec::transformer(2 * c, heads)],
            ],
            input_shape,
            num_classes,
            neuron,
            attn_scale: None,
        }
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BlockSpec> {
        self.stages.iter().flatten()
    }

    /// Product of all downsample strides.
    pub fn total_stride(&self) -> usize {
        1 << self.blocks().filter(|b| b.kind == BlockKind::Downsample).count()
    }

    /// Channel count and spatial extent of the final feature map.
    pub fn output_geometry(&self) -> (usize, usize, usize) {
        let [_, mut h, mut w] = self.input_shape;
        let mut c = self.input_shape[0];
        for b in self.blocks() {
            if b.kind == BlockKind::Downsample {
                h = h.div_ceil(2);
                w = w.div_ceil(2);
            }
            c = b.channels;
        }
        (c, h, w)
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        self.neuron.validate()?;
        let [c_in, mut h, mut w] = self.input_shape;
        if c_in == 0 || h == 0 || w == 0 {
            return Err(ArchError::InvalidSpec(format!("input shape {:?} has a zero extent", self.input_shape)));
        }
        if self.num_classes < 1 {
            return Err(ArchError::InvalidSpec("num_classes must be >= 1".into()));
        }
        if self.stages.iter().all(|s| s.is_empty()) {
            return Err(ArchError::InvalidSpec("model has no blocks".into()));
        }
        if let Some(s) = self.attn_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(ArchError::InvalidSpec(format!("attention scale {s} must be positive")));
            }
        }
        let mut channels: Option<usize> = None;
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, b) in stage.iter().enumerate() {
                let at = format!("stage {si} block {bi} ({})", b.kind.as_str());
                b.validate(&at)?;
                match b.kind {
                    BlockKind::Downsample => {
                        if h < 2 || w < 2 {
                            return Err(ArchError::InvalidSpec(format!(
                                "{at}: resolution {h}x{w} cannot be reduced further"
                            )));
                        }
                        h = h.div_ceil(2);
                        w = w.div_ceil(2);
                    }
                    _ => match channels {
                        None => {
                            return Err(ArchError::InvalidSpec(format!(
                                "{at}: the first block must be a downsample that encodes the input"
                            )))
                        }
                        Some(c) if c != b.channels => {
                            return Err(ArchError::InvalidSpec(format!(
                                "{at}: channel mismatch, input has {c} channels but block declares {}",
                                b.channels
                            )))
                        }
                        _ => {}
                    },
                }
                channels = Some(b.channels);
            }
        }
        Ok(())
    }
}
