//! Direct 2-D cross-correlation kernels over NCHW buffers.
//!
//! Both passes walk the same loop nest so that an optional center mask
//! (active output positions) only ever removes work, never reorders it.

use super::{NumericsError, Real};

/// Resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self, NumericsError> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(NumericsError::ShapeMismatch {
                op: "conv2d",
                detail: format!("expected 4-D input and weight, got {x_shape:?} and {w_shape:?}"),
            });
        }
        let (batch, in_channels, in_h, in_w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (out_channels, cin_g, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if stride == 0 {
            return Err(NumericsError::InvalidParameter("conv2d stride must be >= 1".into()));
        }
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(NumericsError::InvalidParameter(format!(
                "conv2d groups {groups} must divide in ({in_channels}) and out ({out_channels}) channels"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(NumericsError::InvalidParameter(format!(
                "conv2d kernel must be square and odd, got {kh}x{kw}"
            )));
        }
        if cin_g != in_channels / groups {
            return Err(NumericsError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "weight expects {cin_g} input channels per group, input gives {}",
                    in_channels / groups
                ),
            });
        }
        if padding >= kh && padding > 0 {
            return Err(NumericsError::InvalidParameter(format!(
                "conv2d padding {padding} must be smaller than kernel {kh}"
            )));
        }
        if in_h + 2 * padding < kh || in_w + 2 * padding < kw {
            return Err(NumericsError::InvalidParameter(format!(
                "conv2d kernel {kh} larger than padded input {in_h}x{in_w} (pad {padding})"
            )));
        }
        let out_h = (in_h + 2 * padding - kh) / stride + 1;
        let out_w = (in_w + 2 * padding - kw) / stride + 1;
        Ok(Self {
            batch,
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel: kh,
            stride,
            padding,
            groups,
            out_h,
            out_w,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Output columns `ox` whose tap `kx` lands inside the input row.
    pub(crate) fn valid_range(&self, tap: usize, in_extent: usize, out_extent: usize) -> (usize, usize) {
        let pad = self.padding as i64;
        let s = self.stride as i64;
        let t = tap as i64;
        // ix = ox*s + t - pad must satisfy 0 <= ix < in_extent
        let lo = (pad - t).max(0);
        let lo = (lo + s - 1) / s;
        let hi_num = in_extent as i64 - 1 + pad - t;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(out_extent as i64);
        if lo >= hi {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }
}

/// Forward pass. `center` marks active output positions as `[N, out_h, out_w]`;
/// inactive positions are exactly zero (bias included).
pub fn conv2d_forward<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
    center: Option<&[bool]>,
) -> Vec<T> {
    let plane_out = g.out_h * g.out_w;
    let plane_in = g.in_h * g.in_w;
    let k = g.kernel;
    let (cin_g, cout_g) = (g.in_per_group(), g.out_per_group());
    let mut out = vec![T::zero(); g.batch * g.out_channels * plane_out];
    for n in 0..g.batch {
        let mask = center.map(|m| &m[n * plane_out..(n + 1) * plane_out]);
        for co in 0..g.out_channels {
            let group = co / cout_g;
            let base = (n * g.out_channels + co) * plane_out;
            let dst = &mut out[base..base + plane_out];
            let b = bias.map_or(T::zero(), |b| b[co]);
            match mask {
                Some(m) => dst.iter_mut().zip(m).for_each(|(d, &on)| {
                    if on {
                        *d = b
                    }
                }),
                None => dst.iter_mut().for_each(|d| *d = b),
            }
            for ic in 0..cin_g {
                let ci = group * cin_g + ic;
                let src = &x[(n * g.in_channels + ci) * plane_in..(n * g.in_channels + ci + 1) * plane_in];
                let wbase = (co * cin_g + ic) * k * k;
                for ky in 0..k {
                    let (oy0, oy1) = g.valid_range(ky, g.in_h, g.out_h);
                    for kx in 0..k {
                        let wv = w[wbase + ky * k + kx];
                        let (ox0, ox1) = g.valid_range(kx, g.in_w, g.out_w);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.padding;
                            let row = &src[iy * g.in_w..(iy + 1) * g.in_w];
                            for ox in ox0..ox1 {
                                let o = oy * g.out_w + ox;
                                if let Some(m) = mask {
                                    if !m[o] {
                                        continue;
                                    }
                                }
                                let ix = ox * g.stride + kx - g.padding;
                                dst[o] += wv * row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients `(dx, dw, db)` for upstream gradient `gout` of shape `out_shape()`.
pub fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    center: Option<&[bool]>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane_out = g.out_h * g.out_w;
    let plane_in = g.in_h * g.in_w;
    let k = g.kernel;
    let (cin_g, cout_g) = (g.in_per_group(), g.out_per_group());
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.out_channels];
    for n in 0..g.batch {
        let mask = center.map(|m| &m[n * plane_out..(n + 1) * plane_out]);
        for co in 0..g.out_channels {
            let group = co / cout_g;
            let base = (n * g.out_channels + co) * plane_out;
            let go = &gout[base..base + plane_out];
            db[co] += match mask {
                Some(m) => go.iter().zip(m).filter(|(_, &on)| on).map(|(v, _)| *v).sum(),
                None => go.iter().copied().sum(),
            };
            for ic in 0..cin_g {
                let ci = group * cin_g + ic;
                let off = (n * g.in_channels + ci) * plane_in;
                let wbase = (co * cin_g + ic) * k * k;
                for ky in 0..k {
                    let (oy0, oy1) = g.valid_range(ky, g.in_h, g.out_h);
                    for kx in 0..k {
                        let wv = w[wbase + ky * k + kx];
                        let (ox0, ox1) = g.valid_range(kx, g.in_w, g.out_w);
                        let mut acc = T::zero();
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.padding;
                            for ox in ox0..ox1 {
                                let o = oy * g.out_w + ox;
                                if let Some(m) = mask {
                                    if !m[o] {
                                        continue;
                                    }
                                }
                                let ix = ox * g.stride + kx - g.padding;
                                let i = off + iy * g.in_w + ix;
                                acc += go[o] * x[i];
                                dx[i] += wv * go[o];
                            }
                        }
                        dw[wbase + ky * k + kx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_rejects_bad_parameters() {
        assert!(ConvGeom::new(&[1, 2, 5, 5], &[2, 2, 3, 3], 0, 1, 1).is_err());
        assert!(ConvGeom::new(&[1, 3, 5, 5], &[3, 1, 3, 3], 1, 1, 2).is_err());
        assert!(ConvGeom::new(&[1, 2, 5, 5], &[2, 2, 2, 2], 1, 0, 1).is_err());
        assert!(ConvGeom::new(&[1, 2, 5, 5], &[2, 2, 3, 3], 1, 3, 1).is_err());
        let g = ConvGeom::new(&[1, 2, 5, 5], &[4, 2, 3, 3], 2, 1, 1).unwrap();
        assert_eq!(g.out_shape(), [1, 4, 3, 3]);
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for stride in 1..=3 {
            for pad in 0..=2 {
                let g = ConvGeom::new(&[1, 1, 7, 7], &[1, 1, 5, 5], stride, pad, 1).unwrap();
                for tap in 0..5 {
                    let (lo, hi) = g.valid_range(tap, 7, g.out_w);
                    let brute: Vec<usize> = (0..g.out_w)
                        .filter(|&o| {
                            let ix = (o * stride + tap) as i64 - pad as i64;
                            (0..7).contains(&ix)
                        })
                        .collect();
                    assert_eq!((lo..hi).collect::<Vec<_>>(), brute, "stride {stride} pad {pad} tap {tap}");
                }
            }
        }
    }
}
