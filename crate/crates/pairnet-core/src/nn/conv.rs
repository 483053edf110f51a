//! 2-D convolution with stride 1 and same padding (odd kernels only).
//!
//! Layout: input [C_in, H, W], kernels [C_out, C_in, k, k], bias [C_out],
//! output [C_out, H, W]. The kernels below iterate so the innermost loop runs
//! over contiguous row spans, which keeps the f64 arithmetic vectorizable.

use super::tape::{Tape, Value};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub(crate) fn conv2d_forward(
    x: &[f64],
    (c_in, h, w): (usize, usize, usize),
    kernels: &[f64],
    c_out: usize,
    k: usize,
    bias: &[f64],
) -> Vec<f64> {
    let pad = k / 2;
    let mut out = vec![0.0; c_out * h * w];
    for co in 0..c_out {
        let o_base = co * h * w;
        out[o_base..o_base + h * w].fill(bias[co]);
        for ci in 0..c_in {
            let x_base = ci * h * w;
            for dy in 0..k {
                // oy + dy - pad must land in [0, h)
                let oy_lo = pad.saturating_sub(dy);
                let oy_hi = (h + pad).saturating_sub(dy).min(h);
                for dx in 0..k {
                    let kv = kernels[((co * c_in + ci) * k + dy) * k + dx];
                    if kv == 0.0 {
                        continue;
                    }
                    let ox_lo = pad.saturating_sub(dx);
                    let ox_hi = (w + pad).saturating_sub(dx).min(w);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy + dy - pad;
                        let o_off = o_base + oy * w;
                        let i_off = x_base + iy * w + ox_lo + dx - pad;
                        let orow = &mut out[o_off + ox_lo..o_off + ox_hi];
                        let irow = &x[i_off..i_off + (ox_hi - ox_lo)];
                        for (o, i) in orow.iter_mut().zip(irow.iter()) {
                            *o += kv * i;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the input: for every kernel offset, scatter the output
/// gradient back onto the input positions it read.
pub(crate) fn conv2d_backward_input(
    g: &[f64],
    (c_in, h, w): (usize, usize, usize),
    kernels: &[f64],
    c_out: usize,
    k: usize,
) -> Vec<f64> {
    let pad = k / 2;
    let mut gx = vec![0.0; c_in * h * w];
    for ci in 0..c_in {
        let x_base = ci * h * w;
        for co in 0..c_out {
            let o_base = co * h * w;
            for dy in 0..k {
                // oy = iy + pad - dy must land in [0, h)
                let iy_lo = dy.saturating_sub(pad);
                let iy_hi = (h + dy).saturating_sub(pad).min(h);
                for dx in 0..k {
                    let kv = kernels[((co * c_in + ci) * k + dy) * k + dx];
                    if kv == 0.0 {
                        continue;
                    }
                    let ix_lo = dx.saturating_sub(pad);
                    let ix_hi = (w + dx).saturating_sub(pad).min(w);
                    if ix_lo >= ix_hi {
                        continue;
                    }
                    for iy in iy_lo..iy_hi {
                        let oy = iy + pad - dy;
                        let x_off = x_base + iy * w;
                        let g_off = o_base + oy * w + ix_lo + pad - dx;
                        let xrow = &mut gx[x_off + ix_lo..x_off + ix_hi];
                        let grow = &g[g_off..g_off + (ix_hi - ix_lo)];
                        for (xg, og) in xrow.iter_mut().zip(grow.iter()) {
                            *xg += kv * og;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Gradient w.r.t. the kernels: per-offset dot products of the output
/// gradient with the shifted input.
pub(crate) fn conv2d_backward_kernels(
    g: &[f64],
    x: &[f64],
    (c_in, h, w): (usize, usize, usize),
    c_out: usize,
    k: usize,
) -> Vec<f64> {
    let pad = k / 2;
    let mut gk = vec![0.0; c_out * c_in * k * k];
    for co in 0..c_out {
        let o_base = co * h * w;
        for ci in 0..c_in {
            let x_base = ci * h * w;
            for dy in 0..k {
                let oy_lo = pad.saturating_sub(dy);
                let oy_hi = (h + pad).saturating_sub(dy).min(h);
                for dx in 0..k {
                    let ox_lo = pad.saturating_sub(dx);
                    let ox_hi = (w + pad).saturating_sub(dx).min(w);
                    let mut acc = 0.0;
                    if ox_lo < ox_hi {
                        for oy in oy_lo..oy_hi {
                            let iy = oy + dy - pad;
                            let g_off = o_base + oy * w;
                            let x_off = x_base + iy * w + ox_lo + dx - pad;
                            let grow = &g[g_off + ox_lo..g_off + ox_hi];
                            let xrow = &x[x_off..x_off + (ox_hi - ox_lo)];
                            for (gv, xv) in grow.iter().zip(xrow.iter()) {
                                acc += gv * xv;
                            }
                        }
                    }
                    gk[((co * c_in + ci) * k + dy) * k + dx] = acc;
                }
            }
        }
    }
    gk
}

impl Tape {
    /// Same-padding stride-1 convolution; kernel side must be odd.
    pub fn conv2d(&mut self, x: Value, kernels: Value, bias: Value) -> Result<Value> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernels).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() != 3 || ks.len() != 4 || bs.len() != 1 {
            return Err(Error::shape(
                "conv2d",
                format!("x{xs:?} kernels{ks:?} bias{bs:?}"),
            ));
        }
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let (c_out, kc_in, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc_in != c_in || bs[0] != c_out {
            return Err(Error::shape(
                "conv2d",
                format!("x{xs:?} kernels{ks:?} bias{bs:?}"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be square and odd, got {kh}x{kw}"),
            ));
        }
        let k = kh;
        let dims = (c_in, h, w);
        let out = conv2d_forward(
            self.value(x).data(),
            dims,
            self.value(kernels).data(),
            c_out,
            k,
            self.value(bias).data(),
        );
        let out = Tensor::from_parts(vec![c_out, h, w], out);
        Ok(self.push_node(
            out,
            Box::new(move |g, vals, grads| {
                let gx = conv2d_backward_input(g.data(), dims, vals[kernels.0].data(), c_out, k);
                let gk = conv2d_backward_kernels(g.data(), vals[x.0].data(), dims, c_out, k);
                let mut gb = vec![0.0; c_out];
                for (co, slot) in gb.iter_mut().enumerate() {
                    *slot = g.data()[co * h * w..(co + 1) * h * w].iter().sum();
                }
                super::tape::accumulate(&mut grads[x.0], &gx);
                super::tape::accumulate(&mut grads[kernels.0], &gk);
                super::tape::accumulate(&mut grads[bias.0], &gb);
            }),
        ))
    }
}
