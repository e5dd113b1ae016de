//! In-memory datasets and the synthetic generators used by tests and the CLI.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::Tensor;

use super::EngineError;

/// Labeled static images, `[N, C, H, W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self, EngineError> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(EngineError::InvalidInput(format!("{} labels for images {:?}", labels.len(), images.shape())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(EngineError::InvalidInput(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Self { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn select(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (gather_rows(&self.images, idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// First `n` samples and the rest.
    pub fn split(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let (a, b): (Vec<usize>, Vec<usize>) = ((0..n).collect(), (n..self.len()).collect());
        let part = |idx: &[usize]| {
            let (images, labels) = self.select(idx);
            Dataset { images, labels, num_classes: self.num_classes }
        };
        (part(&a), part(&b))
    }
}

pub fn gather_rows(t: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let per: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(per * idx.len());
    for &i in idx {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, data).expect("gather shape")
}

/// One sensor event. Polarity 1 is ON, 0 is OFF.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RawEvent {
    pub t_us: u32,
    pub x: u32,
    pub y: u32,
    pub polarity: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventSample {
    pub events: Vec<RawEvent>,
    pub label: usize,
}

/// Event recordings sharing one sensor and recording length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventDataset {
    pub height: usize,
    pub width: usize,
    pub duration_us: u32,
    pub num_classes: usize,
    pub samples: Vec<EventSample>,
}

/// Labeled frame sequences: `frames[t]` is `[N, 2, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameDataset {
    pub frames: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl FrameDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn t_steps(&self) -> usize {
        self.frames.len()
    }

    pub fn select(&self, idx: &[usize]) -> (Vec<Tensor<f32>>, Vec<usize>) {
        (self.frames.iter().map(|f| gather_rows(f, idx)).collect(), idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn split(&self, n: usize) -> (FrameDataset, FrameDataset) {
        let n = n.min(self.len());
        let part = |idx: Vec<usize>| {
            let (frames, labels) = self.select(&idx);
            FrameDataset { frames, labels, num_classes: self.num_classes }
        };
        (part((0..n).collect()), part((n..self.len()).collect()))
    }
}

/// Bins `events` into `t_steps` uniform time slices of `[0, duration_us)`,
/// left-inclusive; events at or after the end land in the last slice. Each
/// frame is `[2, H, W]` with per-polarity counts clipped to 255 and scaled to `[0, 1]`.
pub fn bin_events(
    events: &[RawEvent],
    t_steps: usize,
    duration_us: u32,
    height: usize,
    width: usize,
) -> Result<Vec<Tensor<f32>>, EngineError> {
    if t_steps == 0 || duration_us == 0 {
        return Err(EngineError::InvalidInput("binning needs t_steps >= 1 and a positive duration".into()));
    }
    let plane = height * width;
    let mut counts = vec![vec![0u32; 2 * plane]; t_steps];
    for (i, e) in events.iter().enumerate() {
        if e.x as usize >= width || e.y as usize >= height || e.polarity > 1 {
            return Err(EngineError::InvalidInput(format!(
                "event {i} at ({}, {}) polarity {} outside a {width}x{height} sensor",
                e.x, e.y, e.polarity
            )));
        }
        let t = ((e.t_us as u64 * t_steps as u64) / duration_us as u64).min(t_steps as u64 - 1) as usize;
        counts[t][e.polarity as usize * plane + e.y as usize * width + e.x as usize] += 1;
    }
    Ok(counts
        .into_iter()
        .map(|c| Tensor::new(&[2, height, width], c.into_iter().map(|v| v.min(255) as f32 / 255.0).collect()).unwrap())
        .collect())
}

impl EventDataset {
    pub fn to_frames(&self, t_steps: usize) -> Result<FrameDataset, EngineError> {
        let plane = 2 * self.height * self.width;
        let mut frames = vec![Vec::with_capacity(plane * self.samples.len()); t_steps];
        for s in &self.samples {
            for (dst, f) in frames.iter_mut().zip(bin_events(&s.events, t_steps, self.duration_us, self.height, self.width)?) {
                dst.extend_from_slice(f.data());
            }
        }
        let n = self.samples.len();
        Ok(FrameDataset {
            frames: frames.into_iter().map(|d| Tensor::new(&[n, 2, self.height, self.width], d).unwrap()).collect(),
            labels: self.samples.iter().map(|s| s.label).collect(),
            num_classes: self.num_classes,
        })
    }
}

/// Three classes of single Gaussian blobs told apart by their width. Centers,
/// amplitudes and background noise vary per image.
pub fn blobs(n: usize, size: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.08).unwrap();
    let sigmas = [0.09f32, 0.16, 0.26];
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 3;
        let s = sigmas[label] * size as f32 * rng.gen_range(0.85..1.15);
        let (cy, cx) = (rng.gen_range(0.3..0.7) * size as f32, rng.gen_range(0.3..0.7) * size as f32);
        let amp = rng.gen_range(0.6f32..1.0);
        for y in 0..size {
            for x in 0..size {
                let r2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                let v = amp * (-r2 / (2.0 * s * s)).exp() + noise.sample(&mut rng);
                data.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(label);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let images = Tensor::new(&[n, 1, size, size], data).unwrap();
    let labels_shuffled = order.iter().map(|&i| labels[i]).collect();
    Dataset { images: gather_rows(&images, &order), labels: labels_shuffled, num_classes: 3 }
}

/// Direction labels of [`moving_bar`].
pub const BAR_DIRECTIONS: [&str; 4] = ["left_to_right", "right_to_left", "top_to_bottom", "bottom_to_top"];

/// A bar of width `bar` sweeping the whole sensor in one of four directions.
/// Every pixel sees one ON event as the bar arrives and one OFF event as it
/// leaves, so the time-collapsed recording is the same for every direction.
pub fn moving_bar(n: usize, size: usize, duration_us: u32, seed: u64) -> EventDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bar = (size / 4).max(1);
    let travel = (size + bar) as f64;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 4;
        let jitter = rng.gen_range(0.0..0.5);
        let at = |pos: f64| -> u32 { (((pos + jitter) / (travel + 0.5)) * duration_us as f64) as u32 };
        let mut events = Vec::new();
        for a in 0..size {
            // distance along the motion axis at which the leading/trailing edge reaches line `a`
            let along = match label {
                0 | 2 => a,
                _ => size - 1 - a,
            };
            let (on, off) = (at((along + 1) as f64), at((along + 1 + bar) as f64));
            for b in 0..size {
                let (x, y) = if label < 2 { (a, b) } else { (b, a) };
                events.push(RawEvent { t_us: on, x: x as u32, y: y as u32, polarity: 1 });
                events.push(RawEvent { t_us: off, x: x as u32, y: y as u32, polarity: 0 });
            }
        }
        for _ in 0..size {
            events.push(RawEvent {
                t_us: rng.gen_range(0..duration_us),
                x: rng.gen_range(0..size as u32),
                y: rng.gen_range(0..size as u32),
                polarity: rng.gen_range(0..2),
            });
        }
        events.sort_by_key(|e| e.t_us);
        samples.push(EventSample { events, label });
    }
    samples.shuffle(&mut rng);
    EventDataset { height: size, width: size, duration_us, num_classes: 4, samples }
}

/// Unlabeled images of 1 to 3 filled rectangles and discs on a dim textured background.
pub fn shapes(n: usize, size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0f32; n * size * size];
    for img in data.chunks_mut(size * size) {
        let (fy, fx) = (rng.gen_range(0.5..2.0f32), rng.gen_range(0.5..2.0f32));
        for (i, v) in img.iter_mut().enumerate() {
            let (y, x) = ((i / size) as f32 / size as f32, (i % size) as f32 / size as f32);
            *v = 0.1 + 0.05 * (6.28 * (fy * y + fx * x)).sin();
        }
        for _ in 0..rng.gen_range(1..=3) {
            let level = rng.gen_range(0.4f32..1.0);
            let (cy, cx) = (rng.gen_range(0..size) as f32, rng.gen_range(0..size) as f32);
            let r = rng.gen_range(size as f32 * 0.1..size as f32 * 0.3);
            let disc = rng.gen_bool(0.5);
            for (i, v) in img.iter_mut().enumerate() {
                let (dy, dx) = ((i / size) as f32 - cy, (i % size) as f32 - cx);
                let inside = if disc { dy * dy + dx * dx <= r * r } else { dy.abs() <= r && dx.abs() <= r * 0.7 };
                if inside {
                    *v = level;
                }
            }
        }
    }
    Tensor::new(&[n, 1, size, size], data).unwrap()
}
