//! Grouped 2-D cross-correlation kernels.
//!
//! Layouts are NCHW for activations and `[C_out, C_in / groups, K, K]` for
//! weights. The kernels loop over whole output rows so that the innermost
//! loop is a contiguous (or fixed-stride) slice walk.

use crate::{Error, Result};

/// Fully resolved dimensions of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub out_height: usize,
    pub out_width: usize,
}

/// Output length of a strided, padded window along one axis.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ConvGeometry {
    /// Validates `x: [N, C_in, H, W]` against `w: [C_out, C_in/groups, K, K]`.
    pub fn resolve(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if x_shape.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d input must be 4-D [N,C,H,W], got {x_shape:?}"
            )));
        }
        if w_shape.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d weight must be 4-D [C_out,C_in/groups,K,K], got {w_shape:?}"
            )));
        }
        let (batch, in_channels, height, width) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (out_channels, per_group, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if groups == 0 || in_channels % groups != 0 {
            return Err(Error::shape(format!(
                "input channels {in_channels} not divisible by groups {groups}"
            )));
        }
        if out_channels % groups != 0 {
            return Err(Error::shape(format!(
                "output channels {out_channels} not divisible by groups {groups}"
            )));
        }
        if per_group != in_channels / groups {
            return Err(Error::shape(format!(
                "weight input-channel dim is {per_group}, expected C_in/groups = {}",
                in_channels / groups
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(format!(
                "kernel must be square and odd, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let out_height = conv_output_len(height, kh, stride, padding)
            .ok_or_else(|| Error::shape(format!("height {height} too small for kernel {kh}")))?;
        let out_width = conv_output_len(width, kw, stride, padding)
            .ok_or_else(|| Error::shape(format!("width {width} too small for kernel {kw}")))?;
        Ok(ConvGeometry {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel: kh,
            stride,
            padding,
            groups,
            out_height,
            out_width,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height, self.out_width]
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Output column range `[lo, hi)` whose input column `ox*s + kx - p` is in bounds.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if p > kx { (p - kx).div_ceil(s) } else { 0 };
        let hi = if self.width + p > kx {
            ((self.width - 1 + p - kx) / s + 1).min(self.out_width)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Input row for output row `oy` and kernel row `ky`, if in bounds.
    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        (iy >= 0 && (iy as usize) < self.height).then_some(iy as usize)
    }
}

pub fn forward(g: &ConvGeometry, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (cin_g, cout_g) = (g.in_per_group(), g.out_per_group());
    let (hw_in, hw_out) = (g.height * g.width, g.out_height * g.out_width);
    let k = g.kernel;
    let mut y = vec![0.0; g.batch * g.out_channels * hw_out];
    for n in 0..g.batch {
        for oc in 0..g.out_channels {
            let group = oc / cout_g;
            let out = &mut y[(n * g.out_channels + oc) * hw_out..][..hw_out];
            if let Some(b) = bias {
                out.iter_mut().for_each(|v| *v = b[oc]);
            }
            for icg in 0..cin_g {
                let ic = group * cin_g + icg;
                let plane = &x[(n * g.in_channels + ic) * hw_in..][..hw_in];
                let wk = &w[(oc * cin_g + icg) * k * k..][..k * k];
                if k == 1 && g.stride == 1 && g.padding == 0 {
                    let wv = wk[0];
                    out.iter_mut().zip(plane).for_each(|(o, xv)| *o += wv * xv);
                    continue;
                }
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wk[ky * k + kx];
                        let (lo, hi) = g.valid_cols(kx);
                        for oy in 0..g.out_height {
                            let Some(iy) = g.input_row(oy, ky) else { continue };
                            let row = &plane[iy * g.width..][..g.width];
                            let orow = &mut out[oy * g.out_width..][..g.out_width];
                            for ox in lo..hi {
                                orow[ox] += wv * row[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradients with respect to input, weight and bias. Each is only computed
/// when requested.
pub fn backward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (cin_g, cout_g) = (g.in_per_group(), g.out_per_group());
    let (hw_in, hw_out) = (g.height * g.width, g.out_height * g.out_width);
    let k = g.kernel;
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    let db = want_db.then(|| {
        let mut db = vec![0.0; g.out_channels];
        for n in 0..g.batch {
            for (oc, acc) in db.iter_mut().enumerate() {
                *acc += gy[(n * g.out_channels + oc) * hw_out..][..hw_out]
                    .iter()
                    .sum::<f64>();
            }
        }
        db
    });
    if dx.is_none() && dw.is_none() {
        return (dx, dw, db);
    }
    let pointwise = k == 1 && g.stride == 1 && g.padding == 0;
    for n in 0..g.batch {
        for oc in 0..g.out_channels {
            let group = oc / cout_g;
            let gout = &gy[(n * g.out_channels + oc) * hw_out..][..hw_out];
            for icg in 0..cin_g {
                let ic = group * cin_g + icg;
                let xoff = (n * g.in_channels + ic) * hw_in;
                let woff = (oc * cin_g + icg) * k * k;
                if pointwise {
                    if let Some(dw) = dw.as_mut() {
                        let plane = &x[xoff..][..hw_in];
                        dw[woff] += gout.iter().zip(plane).map(|(a, b)| a * b).sum::<f64>();
                    }
                    if let Some(dx) = dx.as_mut() {
                        let wv = w[woff];
                        dx[xoff..][..hw_in]
                            .iter_mut()
                            .zip(gout)
                            .for_each(|(d, gv)| *d += wv * gv);
                    }
                    continue;
                }
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = woff + ky * k + kx;
                        let wv = w[widx];
                        let (lo, hi) = g.valid_cols(kx);
                        let mut wacc = 0.0;
                        for oy in 0..g.out_height {
                            let Some(iy) = g.input_row(oy, ky) else { continue };
                            let grow = &gout[oy * g.out_width..][..g.out_width];
                            if dw.is_some() {
                                let row = &x[xoff + iy * g.width..][..g.width];
                                for ox in lo..hi {
                                    wacc += grow[ox] * row[ox * g.stride + kx - g.padding];
                                }
                            }
                            if let Some(dx) = dx.as_mut() {
                                let drow = &mut dx[xoff + iy * g.width..][..g.width];
                                for ox in lo..hi {
                                    drow[ox * g.stride + kx - g.padding] += wv * grow[ox];
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}
