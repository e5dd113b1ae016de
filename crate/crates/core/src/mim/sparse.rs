//! Sparse and vanilla convolution on spike or integer maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::neuron::fire_value;
use crate::numerics::{conv2d_forward, ConvGeom, Tensor};

use super::{MimError, SparsityMap};

fn conv(
    x: &Tensor<f32>,
    w: &Tensor<f32>,
    b: Option<&Tensor<f32>>,
    stride: usize,
    padding: usize,
    center: Option<&[bool]>,
) -> Result<Tensor<f32>, MimError> {
    let geom = ConvGeom::new(x.shape(), w.shape(), stride, padding, 1)?;
    if let Some(b) = b {
        if b.shape() != [geom.out_channels] {
            return Err(MimError::InvalidParameter(format!("bias {:?} for {} channels", b.shape(), geom.out_channels)));
        }
    }
    let out = conv2d_forward(x.data(), w.data(), b.map(|b| b.data()), &geom, center);
    Ok(Tensor::new(&geom.out_shape(), out)?)
}

/// Convolution computed only where the output center is active in `smap`;
/// every inactive center is exactly 0, bias included.
pub fn spike_sparse_conv(
    x: &Tensor<f32>,
    w: &Tensor<f32>,
    b: Option<&Tensor<f32>>,
    stride: usize,
    padding: usize,
    smap: &SparsityMap,
) -> Result<Tensor<f32>, MimError> {
    let geom = ConvGeom::new(x.shape(), w.shape(), stride, padding, 1)?;
    let mask = smap.at(geom.out_h, geom.out_w).filter(|_| smap.batch == geom.batch).ok_or_else(|| {
        MimError::InvalidParameter(format!("no {}x{} level for batch {} in sparsity map", geom.out_h, geom.out_w, geom.batch))
    })?;
    conv(x, w, b, stride, padding, Some(&mask))
}

/// Convolution at every position.
pub fn vanilla_spike_conv(
    x: &Tensor<f32>,
    w: &Tensor<f32>,
    b: Option<&Tensor<f32>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<f32>, MimError> {
    conv(x, w, b, stride, padding, None)
}

/// Membrane and integer spikes of one stack layer.
#[derive(Clone, Debug, PartialEq)]
pub struct StackLayer {
    pub membrane: Tensor<f32>,
    pub spikes: Tensor<f32>,
}

/// Bias-free 3x3 stride-1 convolutions, each followed by the integer fire function.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack {
    pub weights: Vec<Tensor<f32>>,
    pub d_cap: u32,
}

impl ConvStack {
    /// Random weights with a positive mean, so activity survives the fire function.
    pub fn random(channels: usize, in_channels: usize, depth: usize, d_cap: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..depth)
            .map(|l| {
                let cin = if l == 0 { in_channels } else { channels };
                let bound = 2.0 / (cin * 9) as f32;
                Tensor::from_fn(&[channels, cin, 3, 3], |_| rng.gen_range(-0.5 * bound..1.5 * bound) * 2.0)
            })
            .collect();
        Self { weights, d_cap }
    }

    /// Runs every layer; sparse when `smap` is given.
    pub fn forward(&self, x: &Tensor<f32>, smap: Option<&SparsityMap>) -> Result<Vec<StackLayer>, MimError> {
        let mut cur = x.clone();
        let mut out = Vec::with_capacity(self.weights.len());
        for w in &self.weights {
            let membrane = match smap {
                Some(m) => spike_sparse_conv(&cur, w, None, 1, 1, m)?,
                None => vanilla_spike_conv(&cur, w, None, 1, 1)?,
            };
            let spikes = membrane.map(|u| fire_value(u, self.d_cap));
            cur = spikes.clone();
            out.push(StackLayer { membrane, spikes });
        }
        Ok(out)
    }
}
