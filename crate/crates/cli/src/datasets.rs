//! IDX image sets and per-sample event recordings.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sfa_core::engine::{Dataset, EventDataset, EventSample, RawEvent};
use sfa_core::numerics::Tensor;

use crate::config::KeyValues;
use crate::CliError;

pub const IDX_IMAGES: u32 = 0x0000_0803;
pub const IDX_LABELS: u32 = 0x0000_0801;

fn parse_err(path: &Path, offset: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::Parse(format!("{}: byte {offset}: {msg}", path.display()))
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn be_u32(buf: &[u8], at: usize, path: &Path) -> Result<u32, CliError> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| parse_err(path, at, format!("truncated header, file has {} bytes", buf.len())))
}

/// Header dims and payload offset, after checking the magic and payload length.
fn idx_header(buf: &[u8], magic: u32, path: &Path) -> Result<(Vec<usize>, usize), CliError> {
    let found = be_u32(buf, 0, path)?;
    if found != magic {
        return Err(parse_err(path, 0, format!("magic {found:#010x}, expected {magic:#010x}")));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank).map(|i| be_u32(buf, 4 + 4 * i, path).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
    let start = 4 + 4 * rank;
    let need: usize = dims.iter().product();
    if buf.len() - start < need {
        return Err(parse_err(path, buf.len(), format!("truncated payload: {need} bytes declared, {} present", buf.len() - start)));
    }
    if buf.len() - start > need {
        return Err(parse_err(path, start + need, "trailing bytes after payload"));
    }
    Ok((dims, start))
}

/// `[N, 1, H, W]` images scaled by `1 / 255`.
pub fn load_idx_images(path: &Path) -> Result<Tensor<f32>, CliError> {
    let buf = read(path)?;
    let (dims, start) = idx_header(&buf, IDX_IMAGES, path)?;
    let data = buf[start..].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(&[dims[0], 1, dims[1], dims[2]], data).map_err(|e| parse_err(path, start, e))
}

pub fn load_idx_labels(path: &Path, num_classes: usize) -> Result<Vec<usize>, CliError> {
    let buf = read(path)?;
    let (_, start) = idx_header(&buf, IDX_LABELS, path)?;
    buf[start..]
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if (l as usize) < num_classes {
                Ok(l as usize)
            } else {
                Err(parse_err(path, start + i, format!("label {l} outside {num_classes} classes")))
            }
        })
        .collect()
}

pub fn load_idx_dataset(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset, CliError> {
    let x = load_idx_images(images)?;
    let y = load_idx_labels(labels, num_classes)?;
    if y.len() != x.shape()[0] {
        return Err(CliError::Parse(format!("{} images but {} labels", x.shape()[0], y.len())));
    }
    Dataset::new(x, y, num_classes).map_err(|e| CliError::Parse(e.to_string()))
}

/// Inverse of [`load_idx_images`] for `[N, 1, H, W]` data in `[0, 1]`.
pub fn write_idx_images(path: &Path, images: &Tensor<f32>) -> Result<(), CliError> {
    let s = images.shape();
    let mut out = IDX_IMAGES.to_be_bytes().to_vec();
    for d in [s[0], s[2], s[3]] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, out).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<(), CliError> {
    let mut out = IDX_LABELS.to_be_bytes().to_vec();
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    std::fs::write(path, out).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

// Event recordings live in a directory: `index.txt` holds the sensor geometry and
// a `file label` line per sample; each sample file is a flat run of little-endian
// u32 quadruples (t_us, x, y, polarity).

fn sample_name(i: usize) -> String {
    format!("sample_{i:05}.ev")
}

pub fn write_event_dataset(dir: &Path, data: &EventDataset) -> Result<(), CliError> {
    let io = |p: &Path, e: std::io::Error| CliError::Io(format!("{}: {e}", p.display()));
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut index = format!(
        "height = {}\nwidth = {}\nduration_us = {}\nclasses = {}\n",
        data.height, data.width, data.duration_us, data.num_classes
    );
    for (i, s) in data.samples.iter().enumerate() {
        let name = sample_name(i);
        let mut buf = Vec::with_capacity(16 * s.events.len());
        for e in &s.events {
            for v in [e.t_us, e.x, e.y, e.polarity] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let p = dir.join(&name);
        std::fs::write(&p, buf).map_err(|e| io(&p, e))?;
        let _ = writeln!(index, "sample.{i} = {name} {}", s.label);
    }
    let p = dir.join("index.txt");
    std::fs::write(&p, index).map_err(|e| io(&p, e))
}

fn read_events(path: &Path, h: usize, w: usize, num_classes: usize, label: usize) -> Result<EventSample, CliError> {
    let buf = read(path)?;
    if buf.len() % 16 != 0 {
        return Err(parse_err(path, buf.len() - buf.len() % 16, "truncated event record"));
    }
    if label >= num_classes {
        return Err(CliError::Parse(format!("{}: label {label} outside {num_classes} classes", path.display())));
    }
    let events = buf
        .chunks_exact(16)
        .enumerate()
        .map(|(i, c)| {
            let f = |k: usize| u32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap());
            let e = RawEvent { t_us: f(0), x: f(1), y: f(2), polarity: f(3) };
            if e.x as usize >= w || e.y as usize >= h {
                return Err(parse_err(path, 16 * i, format!("event at ({}, {}) outside the {w}x{h} sensor", e.x, e.y)));
            }
            if e.polarity > 1 {
                return Err(parse_err(path, 16 * i + 12, format!("polarity {}", e.polarity)));
            }
            Ok(e)
        })
        .collect::<Result<_, _>>()?;
    Ok(EventSample { events, label })
}

pub fn load_event_dataset(dir: &Path) -> Result<EventDataset, CliError> {
    let index_path = dir.join("index.txt");
    let text = std::fs::read_to_string(&index_path).map_err(|e| CliError::Io(format!("{}: {e}", index_path.display())))?;
    let kv = KeyValues::parse(&text).map_err(|e| CliError::Parse(format!("{}: {e}", index_path.display())))?;
    let field = |k: &str| -> Result<usize, CliError> {
        kv.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CliError::Parse(format!("{}: missing or bad {k}", index_path.display())))
    };
    let (h, w, classes) = (field("height")?, field("width")?, field("classes")?);
    let duration_us = field("duration_us")? as u32;
    let mut entries: Vec<(usize, PathBuf, usize)> = Vec::new();
    for k in kv.keys() {
        let Some(i) = k.strip_prefix("sample.") else { continue };
        let bad = || CliError::Parse(format!("{}: bad entry {k}", index_path.display()));
        let i: usize = i.parse().map_err(|_| bad())?;
        let (file, label) = kv.get(k).unwrap().split_once(' ').ok_or_else(bad)?;
        entries.push((i, dir.join(file.trim()), label.trim().parse().map_err(|_| bad())?));
    }
    entries.sort_by_key(|e| e.0);
    let samples = entries.iter().map(|(_, p, l)| read_events(p, h, w, classes, *l)).collect::<Result<_, _>>()?;
    Ok(EventDataset { height: h, width: w, duration_us, num_classes: classes, samples })
}
