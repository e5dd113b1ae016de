//! Versioned binary archive of a model: spec, neuron settings, metadata and raw tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"SFASNN"  u32 version
//! u32 header length, header bytes   (`key = value` lines)
//! u32 tensor count, then per tensor:
//!   u32 name length, name bytes, u8 kind (0 weight, 1 buffer), u8 dtype (0 = f32),
//!   u32 rank, u64 dims[rank], f32 data[product(dims)]
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sfa_core::arch::{build_model, BlockKind, BlockSpec, Model, ModelSpec, ParamKind};
use sfa_core::neuron::{NeuronConfig, ResetMode};
use sfa_core::numerics::Tensor;

use crate::config::KeyValues;
use crate::CliError;

pub const MAGIC: &[u8; 6] = b"SFASNN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub sparse_conv: bool,
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

fn bad(offset: usize, msg: impl Into<String>) -> CliError {
    CliError::Checkpoint(format!("byte {offset}: {}", msg.into()))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        if self.buf.len() - self.pos < n {
            return Err(bad(self.pos, format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CliError> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CliError> {
        let at = self.pos;
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?.to_vec()).map_err(|_| bad(at, "string is not UTF-8"))
    }
}

fn block_to_str(b: &BlockSpec) -> String {
    format!("{}/{}/{}/{}/{}", b.kind.as_str(), b.channels, b.heads, b.gamma, b.mlp_ratio)
}

fn block_from_str(s: &str) -> Result<BlockSpec, CliError> {
    let f: Vec<&str> = s.split('/').collect();
    let err = || CliError::Checkpoint(format!("bad block {s:?}"));
    if f.len() != 5 {
        return Err(err());
    }
    Ok(BlockSpec {
        kind: BlockKind::parse(f[0]).ok_or_else(err)?,
        channels: f[1].parse().map_err(|_| err())?,
        heads: f[2].parse().map_err(|_| err())?,
        gamma: f[3].parse().map_err(|_| err())?,
        mlp_ratio: f[4].parse().map_err(|_| err())?,
    })
}

fn header(spec: &ModelSpec, sparse_conv: bool, meta: &BTreeMap<String, String>) -> String {
    let mut s = String::new();
    let [c, h, w] = spec.input_shape;
    let _ = writeln!(s, "model.input_shape = {c},{h},{w}");
    let _ = writeln!(s, "model.num_classes = {}", spec.num_classes);
    let _ = writeln!(s, "model.attn_scale = {}", spec.attn_scale.map_or("none".into(), |v| v.to_string()));
    let _ = writeln!(s, "model.stages = {}", spec.stages.len());
    for (i, st) in spec.stages.iter().enumerate() {
        let blocks: Vec<String> = st.iter().map(block_to_str).collect();
        let _ = writeln!(s, "model.stage{i} = {}", blocks.join(" "));
    }
    let n = &spec.neuron;
    let _ = writeln!(s, "neuron.beta = {}", n.beta);
    let _ = writeln!(s, "neuron.v_th = {}", n.v_th);
    let _ = writeln!(s, "neuron.v_reset = {}", n.v_reset);
    let _ = writeln!(s, "neuron.reset = {}", n.reset_mode.as_str());
    let _ = writeln!(s, "neuron.d_cap = {}", n.d_cap);
    let _ = writeln!(s, "neuron.t_steps = {}", n.t_steps);
    let _ = writeln!(s, "sparse_conv = {sparse_conv}");
    for (k, v) in meta {
        let _ = writeln!(s, "meta.{k} = {v}");
    }
    s
}

fn parse_header(text: &str) -> Result<(ModelSpec, bool, BTreeMap<String, String>), CliError> {
    let kv = KeyValues::parse(text).map_err(|e| CliError::Checkpoint(e.to_string()))?;
    let get = |k: &str| kv.get(k).ok_or_else(|| CliError::Checkpoint(format!("header lacks {k}")));
    let num = |k: &str| -> Result<f64, CliError> { get(k)?.parse().map_err(|_| CliError::Checkpoint(format!("bad {k}"))) };
    let dims: Vec<usize> = get("model.input_shape")?.split(',').map(|d| d.trim().parse()).collect::<Result<_, _>>()
        .map_err(|_| CliError::Checkpoint("bad model.input_shape".into()))?;
    let input_shape: [usize; 3] = dims.try_into().map_err(|_| CliError::Checkpoint("model.input_shape needs 3 dims".into()))?;
    let stages = (0..num("model.stages")? as usize)
        .map(|i| get(&format!("model.stage{i}"))?.split_whitespace().map(block_from_str).collect())
        .collect::<Result<Vec<Vec<BlockSpec>>, CliError>>()?;
    let reset = get("neuron.reset")?;
    let neuron = NeuronConfig {
        beta: num("neuron.beta")?,
        v_th: num("neuron.v_th")?,
        v_reset: num("neuron.v_reset")?,
        reset_mode: ResetMode::parse(reset).ok_or_else(|| CliError::Checkpoint(format!("bad reset {reset:?}")))?,
        d_cap: num("neuron.d_cap")? as u32,
        t_steps: num("neuron.t_steps")? as usize,
    };
    let attn_scale = match get("model.attn_scale")? {
        "none" => None,
        _ => Some(num("model.attn_scale")?),
    };
    let spec = ModelSpec { stages, input_shape, num_classes: num("model.num_classes")? as usize, neuron, attn_scale };
    let sparse_conv = get("sparse_conv")? == "true";
    let meta = kv.keys().filter_map(|k| k.strip_prefix("meta.").map(|m| (m.to_string(), kv.get(k).unwrap().to_string()))).collect();
    Ok((spec, sparse_conv, meta))
}

impl Checkpoint {
    pub fn from_model(model: &Model, metadata: BTreeMap<String, String>) -> Self {
        let tensors = model
            .params
            .entries()
            .iter()
            .map(|e| TensorEntry { name: e.name.clone(), kind: e.kind, value: e.value.clone() })
            .collect();
        Self { spec: model.spec.clone(), sparse_conv: model.sparse_conv, metadata, tensors }
    }

    /// Rebuilds the model from its spec and overwrites every tensor by name.
    pub fn to_model(&self) -> Result<Model, CliError> {
        let mut m = build_model(&self.spec, 0).map_err(|e| CliError::Checkpoint(e.to_string()))?;
        if m.params.len() != self.tensors.len() {
            return Err(CliError::Checkpoint(format!("{} tensors stored, model has {}", self.tensors.len(), m.params.len())));
        }
        for t in &self.tensors {
            let id = m.params.id(&t.name).ok_or_else(|| CliError::Checkpoint(format!("unknown tensor {}", t.name)))?;
            if m.params.entries()[id].kind != t.kind || m.params.value(id).shape() != t.value.shape() {
                return Err(CliError::Checkpoint(format!("tensor {} has kind or shape {:?} unlike the model", t.name, t.value.shape())));
            }
            *m.params.value_mut(id) = t.value.clone();
        }
        m.sparse_conv = self.sparse_conv;
        Ok(m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let h = header(&self.spec, self.sparse_conv, &self.metadata);
        out.extend_from_slice(&(h.len() as u32).to_le_bytes());
        out.extend_from_slice(h.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(match t.kind {
                ParamKind::Weight => 0,
                ParamKind::Buffer => 1,
            });
            out.push(0);
            out.extend_from_slice(&(t.value.shape().len() as u32).to_le_bytes());
            for &d in t.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CliError> {
        let mut r = Reader { buf, pos: 0 };
        if r.bytes(MAGIC.len())? != MAGIC {
            return Err(bad(0, "not an SFASNN checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CliError::Checkpoint(format!("format version {version}, this build reads {VERSION}")));
        }
        let at = r.pos;
        let text = r.string()?;
        let (spec, sparse_conv, metadata) = parse_header(&text).map_err(|e| bad(at, e.to_string()))?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = r.string()?;
            let at = r.pos;
            let kind = match r.u8()? {
                0 => ParamKind::Weight,
                1 => ParamKind::Buffer,
                k => return Err(bad(at, format!("tensor {name}: unknown kind {k}"))),
            };
            let at = r.pos;
            let dtype = r.u8()?;
            if dtype != 0 {
                return Err(bad(at, format!("tensor {name}: unsupported dtype {dtype}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.bytes(n.checked_mul(4).ok_or_else(|| bad(r.pos, "tensor too large"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let value = Tensor::new(&shape, data).map_err(|e| bad(at, e.to_string()))?;
            tensors.push(TensorEntry { name, kind, value });
        }
        if r.pos != buf.len() {
            return Err(bad(r.pos, "trailing bytes"));
        }
        Ok(Self { spec, sparse_conv, metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let buf = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&buf).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))
    }
}
