use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::MimError;

/// Random patch mask over an image grid; `masked[i]` is true for hidden patches.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub patch_size: usize,
    pub ratio: f64,
    pub grid: (usize, usize),
    pub masked: Vec<bool>,
    pub seed: u64,
}

impl MaskPlan {
    pub fn num_patches(&self) -> usize {
        self.masked.len()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| self.masked[i]).collect()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| !self.masked[i]).collect()
    }

    /// Pixel-level visibility `[H, W]`.
    pub fn pixel_visibility(&self) -> Vec<bool> {
        let (gh, gw) = self.grid;
        let p = self.patch_size;
        let (h, w) = (gh * p, gw * p);
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = !self.masked[(y / p) * gw + x / p];
            }
        }
        out
    }
}

/// Masks `round(n * mu)` of the `n` patches of an `(H, W)` image, at least one when `mu > 0`
/// and at most `n - 1` so that some context stays visible.
pub fn make_mask(image_hw: (usize, usize), patch_size: usize, mu: f64, seed: u64) -> Result<MaskPlan, MimError> {
    let (h, w) = image_hw;
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 || h == 0 || w == 0 {
        return Err(MimError::Indivisible { h, w, p: patch_size });
    }
    if !(0.0..1.0).contains(&mu) {
        return Err(MimError::InvalidParameter(format!("mask ratio {mu} not in [0, 1)")));
    }
    let grid = (h / patch_size, w / patch_size);
    let n = grid.0 * grid.1;
    let mut r2 = (n as f64 * mu).round() as usize;
    if mu > 0.0 {
        r2 = r2.max(1);
    }
    if n > 1 {
        r2 = r2.min(n - 1);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = vec![false; n];
    for i in sample(&mut rng, n, r2).into_iter() {
        masked[i] = true;
    }
    Ok(MaskPlan { patch_size, ratio: mu, grid, masked, seed })
}

/// Active-position maps for a batch at successive resolutions, each `[N, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityMap {
    pub batch: usize,
    levels: Vec<(usize, usize, Arc<[bool]>)>,
}

impl SparsityMap {
    /// Builds the pyramid from per-sample `[H, W]` maps by 2x2 any-coverage pooling,
    /// down to `min_extent`.
    pub fn from_pixels(maps: &[Vec<bool>], h: usize, w: usize, min_extent: usize) -> Self {
        let batch = maps.len();
        let mut data: Vec<bool> = maps.iter().flat_map(|m| m.iter().copied()).collect();
        let (mut ch, mut cw) = (h, w);
        let mut levels = vec![(ch, cw, Arc::from(data.clone()))];
        while ch > min_extent.max(1) && cw > min_extent.max(1) {
            let (nh, nw) = (ch.div_ceil(2), cw.div_ceil(2));
            let mut next = vec![false; batch * nh * nw];
            for b in 0..batch {
                for y in 0..ch {
                    for x in 0..cw {
                        if data[(b * ch + y) * cw + x] {
                            next[(b * nh + y / 2) * nw + x / 2] = true;
                        }
                    }
                }
            }
            data = next;
            ch = nh;
            cw = nw;
            levels.push((ch, cw, Arc::from(data.clone())));
        }
        Self { batch, levels }
    }

    pub fn from_plans(plans: &[MaskPlan], min_extent: usize) -> Self {
        let (gh, gw) = plans[0].grid;
        let p = plans[0].patch_size;
        let maps: Vec<Vec<bool>> = plans.iter().map(|m| m.pixel_visibility()).collect();
        Self::from_pixels(&maps, gh * p, gw * p, min_extent)
    }

    pub fn all_active(batch: usize, h: usize, w: usize) -> Self {
        Self::from_pixels(&vec![vec![true; h * w]; batch], h, w, 1)
    }

    /// Map at resolution `h x w`, if the pyramid has one.
    pub fn at(&self, h: usize, w: usize) -> Option<Arc<[bool]>> {
        self.levels.iter().find(|(lh, lw, _)| *lh == h && *lw == w).map(|(_, _, m)| m.clone())
    }

    pub fn resolutions(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|(h, w, _)| (*h, *w)).collect()
    }

    pub fn active_fraction(&self, h: usize, w: usize) -> Option<f64> {
        self.at(h, w).map(|m| m.iter().filter(|&&b| b).count() as f64 / m.len() as f64)
    }
}
