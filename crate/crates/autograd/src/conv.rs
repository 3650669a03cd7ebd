//! im2col-based 1-D convolution kernels over contiguous `[batch, channels, time]`
//! buffers. Both the forward and the adjoint paths live here so that the
//! transposed convolution can reuse them.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Geometry of a 1-D convolution. Padding is zero padding and may be
/// asymmetric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            dilation: 1,
            pad_left: 0,
            pad_right: 0,
            groups: 1,
        }
    }

    /// Output length of a forward convolution over `len` input samples.
    pub fn out_len(&self, len: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = len + self.pad_left + self.pad_right;
        if padded < span {
            0
        } else {
            (padded - span) / self.stride + 1
        }
    }

    /// Output length of the transposed convolution over `len` input samples.
    pub fn transposed_out_len(&self, len: usize) -> usize {
        let full = (len - 1) * self.stride + self.dilation * (self.kernel - 1) + 1;
        full - self.pad_left - self.pad_right
    }
}

// Upper bound on the number of elements of one column buffer.
const COL_BUDGET: usize = 1 << 22;

fn chunk_len(rows: usize, total: usize) -> usize {
    (COL_BUDGET / rows.max(1)).clamp(1, total.max(1))
}

/// cols[(c*K + k), j] = x[c, (t0 + j)*s + k*d - pad_left], zero outside.
fn im2col(
    x: &[f64],
    channels: usize,
    len: usize,
    g: &ConvGeom,
    t0: usize,
    nt: usize,
    cols: &mut [f64],
) {
    let k = g.kernel;
    for c in 0..channels {
        let xc = &x[c * len..(c + 1) * len];
        for kk in 0..k {
            let row = &mut cols[(c * k + kk) * nt..(c * k + kk + 1) * nt];
            let off = (kk * g.dilation) as isize - g.pad_left as isize;
            for (j, r) in row.iter_mut().enumerate() {
                let pos = ((t0 + j) * g.stride) as isize + off;
                *r = if pos >= 0 && (pos as usize) < len {
                    xc[pos as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `x`.
fn col2im(
    cols: &[f64],
    channels: usize,
    len: usize,
    g: &ConvGeom,
    t0: usize,
    nt: usize,
    x: &mut [f64],
) {
    let k = g.kernel;
    for c in 0..channels {
        let xc = &mut x[c * len..(c + 1) * len];
        for kk in 0..k {
            let row = &cols[(c * k + kk) * nt..(c * k + kk + 1) * nt];
            let off = (kk * g.dilation) as isize - g.pad_left as isize;
            for (j, r) in row.iter().enumerate() {
                let pos = ((t0 + j) * g.stride) as isize + off;
                if pos >= 0 && (pos as usize) < len {
                    xc[pos as usize] += r;
                }
            }
        }
    }
}

fn view2(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("contiguous matrix")
}

fn view2_mut(data: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("contiguous matrix")
}

/// Shape bundle for a convolution call.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len_in: usize,
    pub len_out: usize,
}

/// Forward convolution. `w` is `[c_out, c_in / groups, kernel]`.
pub fn conv1d_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    d: ConvDims,
    g: &ConvGeom,
    out: &mut [f64],
) {
    let cig = d.c_in / g.groups;
    let cog = d.c_out / g.groups;
    let rows = cig * g.kernel;
    let step = chunk_len(rows, d.len_out);
    let mut cols = vec![0.0; rows * step];
    let mut tmp = vec![0.0; cog * step];
    for b in 0..d.batch {
        for gi in 0..g.groups {
            let xg = &x[(b * d.c_in + gi * cig) * d.len_in..(b * d.c_in + (gi + 1) * cig) * d.len_in];
            let wg = view2(&w[gi * cog * rows..(gi + 1) * cog * rows], cog, rows);
            let mut t0 = 0;
            while t0 < d.len_out {
                let nt = step.min(d.len_out - t0);
                im2col(xg, cig, d.len_in, g, t0, nt, &mut cols[..rows * nt]);
                let cv = view2(&cols[..rows * nt], rows, nt);
                let mut tv = view2_mut(&mut tmp[..cog * nt], cog, nt);
                general_mat_mul(1.0, &wg, &cv, 0.0, &mut tv);
                for o in 0..cog {
                    let oc = gi * cog + o;
                    let bias_v = bias.map_or(0.0, |bb| bb[oc]);
                    let dst = &mut out[(b * d.c_out + oc) * d.len_out + t0..][..nt];
                    for (dv, sv) in dst.iter_mut().zip(&tmp[o * nt..(o + 1) * nt]) {
                        *dv = sv + bias_v;
                    }
                }
                t0 += nt;
            }
        }
    }
}

/// Backward of [`conv1d_forward`]. Any of the gradient buffers may be
/// omitted; present buffers are accumulated into.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    d: ConvDims,
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let cig = d.c_in / g.groups;
    let cog = d.c_out / g.groups;
    let rows = cig * g.kernel;
    let step = chunk_len(rows, d.len_out);
    let mut cols = vec![0.0; rows * step];
    let mut dy_chunk = vec![0.0; cog * step];
    for b in 0..d.batch {
        for gi in 0..g.groups {
            let x_off = (b * d.c_in + gi * cig) * d.len_in;
            let xg = &x[x_off..x_off + cig * d.len_in];
            let wg = view2(&w[gi * cog * rows..(gi + 1) * cog * rows], cog, rows);
            let mut t0 = 0;
            while t0 < d.len_out {
                let nt = step.min(d.len_out - t0);
                for o in 0..cog {
                    let src = &dy[(b * d.c_out + gi * cog + o) * d.len_out + t0..][..nt];
                    dy_chunk[o * nt..(o + 1) * nt].copy_from_slice(src);
                }
                let dyv = view2(&dy_chunk[..cog * nt], cog, nt);
                if let Some(dw) = dw.as_deref_mut() {
                    im2col(xg, cig, d.len_in, g, t0, nt, &mut cols[..rows * nt]);
                    let cv = view2(&cols[..rows * nt], rows, nt);
                    let mut dwg = view2_mut(&mut dw[gi * cog * rows..(gi + 1) * cog * rows], cog, rows);
                    general_mat_mul(1.0, &dyv, &cv.t(), 1.0, &mut dwg);
                }
                if let Some(dx) = dx.as_deref_mut() {
                    let mut cv = view2_mut(&mut cols[..rows * nt], rows, nt);
                    general_mat_mul(1.0, &wg.t(), &dyv, 0.0, &mut cv);
                    col2im(&cols[..rows * nt], cig, d.len_in, g, t0, nt, &mut dx[x_off..x_off + cig * d.len_in]);
                }
                if let Some(db) = db.as_deref_mut() {
                    for o in 0..cog {
                        db[gi * cog + o] += dy_chunk[o * nt..(o + 1) * nt].iter().sum::<f64>();
                    }
                }
                t0 += nt;
            }
        }
    }
}

/// Transposed convolution. `w` is `[c_in, c_out / groups, kernel]`; here
/// `d.len_in` is the (short) input length and `d.len_out` the upsampled one.
pub fn conv_transpose1d_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    d: ConvDims,
    g: &ConvGeom,
    out: &mut [f64],
) {
    let cig = d.c_in / g.groups;
    let cog = d.c_out / g.groups;
    let rows = cog * g.kernel;
    let step = chunk_len(rows, d.len_in);
    let mut cols = vec![0.0; rows * step];
    let mut x_chunk = vec![0.0; cig * step];
    for v in out.iter_mut() {
        *v = 0.0;
    }
    for b in 0..d.batch {
        for gi in 0..g.groups {
            let wg = view2(&w[gi * cig * rows..(gi + 1) * cig * rows], cig, rows);
            let y_off = (b * d.c_out + gi * cog) * d.len_out;
            let mut t0 = 0;
            while t0 < d.len_in {
                let nt = step.min(d.len_in - t0);
                for c in 0..cig {
                    let src = &x[(b * d.c_in + gi * cig + c) * d.len_in + t0..][..nt];
                    x_chunk[c * nt..(c + 1) * nt].copy_from_slice(src);
                }
                let xv = view2(&x_chunk[..cig * nt], cig, nt);
                let mut cv = view2_mut(&mut cols[..rows * nt], rows, nt);
                general_mat_mul(1.0, &wg.t(), &xv, 0.0, &mut cv);
                col2im(&cols[..rows * nt], cog, d.len_out, g, t0, nt, &mut out[y_off..y_off + cog * d.len_out]);
                t0 += nt;
            }
        }
        if let Some(bias) = bias {
            for (c, bv) in bias.iter().enumerate() {
                for v in &mut out[(b * d.c_out + c) * d.len_out..][..d.len_out] {
                    *v += bv;
                }
            }
        }
    }
}

/// Backward of [`conv_transpose1d_forward`]; gradients are accumulated.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose1d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    d: ConvDims,
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let cig = d.c_in / g.groups;
    let cog = d.c_out / g.groups;
    let rows = cog * g.kernel;
    let step = chunk_len(rows, d.len_in);
    let mut cols = vec![0.0; rows * step];
    let mut x_chunk = vec![0.0; cig * step];
    let mut dx_chunk = vec![0.0; cig * step];
    for b in 0..d.batch {
        for gi in 0..g.groups {
            let wg = view2(&w[gi * cig * rows..(gi + 1) * cig * rows], cig, rows);
            let y_off = (b * d.c_out + gi * cog) * d.len_out;
            let dyg = &dy[y_off..y_off + cog * d.len_out];
            let mut t0 = 0;
            while t0 < d.len_in {
                let nt = step.min(d.len_in - t0);
                im2col(dyg, cog, d.len_out, g, t0, nt, &mut cols[..rows * nt]);
                let cv = view2(&cols[..rows * nt], rows, nt);
                if let Some(dx) = dx.as_deref_mut() {
                    let mut dxv = view2_mut(&mut dx_chunk[..cig * nt], cig, nt);
                    general_mat_mul(1.0, &wg, &cv, 0.0, &mut dxv);
                    for c in 0..cig {
                        let dst = &mut dx[(b * d.c_in + gi * cig + c) * d.len_in + t0..][..nt];
                        for (a, s) in dst.iter_mut().zip(&dx_chunk[c * nt..(c + 1) * nt]) {
                            *a += s;
                        }
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    for c in 0..cig {
                        let src = &x[(b * d.c_in + gi * cig + c) * d.len_in + t0..][..nt];
                        x_chunk[c * nt..(c + 1) * nt].copy_from_slice(src);
                    }
                    let xv = view2(&x_chunk[..cig * nt], cig, nt);
                    let mut dwg = view2_mut(&mut dw[gi * cig * rows..(gi + 1) * cig * rows], cig, rows);
                    general_mat_mul(1.0, &xv, &cv.t(), 1.0, &mut dwg);
                }
                t0 += nt;
            }
        }
        if let Some(db) = db.as_deref_mut() {
            for (c, dbv) in db.iter_mut().enumerate() {
                *dbv += dy[(b * d.c_out + c) * d.len_out..][..d.len_out].iter().sum::<f64>();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Direct nested-loop reference convolution.
    fn naive_conv(x: &[f64], w: &[f64], d: ConvDims, g: &ConvGeom) -> Vec<f64> {
        let cig = d.c_in / g.groups;
        let cog = d.c_out / g.groups;
        let mut out = vec![0.0; d.batch * d.c_out * d.len_out];
        for b in 0..d.batch {
            for o in 0..d.c_out {
                let gi = o / cog;
                for t in 0..d.len_out {
                    let mut acc = 0.0;
                    for c in 0..cig {
                        for k in 0..g.kernel {
                            let pos = (t * g.stride + k * g.dilation) as isize - g.pad_left as isize;
                            if pos >= 0 && (pos as usize) < d.len_in {
                                acc += w[(o * cig + c) * g.kernel + k]
                                    * x[(b * d.c_in + gi * cig + c) * d.len_in + pos as usize];
                            }
                        }
                    }
                    out[(b * d.c_out + o) * d.len_out + t] = acc;
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919 % 101) as f64 / 101.0 - 0.5) * scale).collect()
    }

    #[test]
    fn forward_matches_naive_loops() {
        let g = ConvGeom {
            kernel: 5,
            stride: 2,
            dilation: 3,
            pad_left: 4,
            pad_right: 3,
            groups: 2,
        };
        let len_in = 23;
        let d = ConvDims {
            batch: 2,
            c_in: 4,
            c_out: 6,
            len_in,
            len_out: g.out_len(len_in),
        };
        let x = ramp(d.batch * d.c_in * len_in, 2.0);
        let w = ramp(d.c_out * 2 * g.kernel, 1.0);
        let mut out = vec![0.0; d.batch * d.c_out * d.len_out];
        conv1d_forward(&x, &w, None, d, &g, &mut out);
        let reference = naive_conv(&x, &w, d, &g);
        for (a, b) in out.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_is_adjoint_of_forward() {
        // <conv(x), y> == <x, conv_t(y)> when both share weights and geometry.
        let g = ConvGeom {
            kernel: 8,
            stride: 4,
            dilation: 1,
            pad_left: 2,
            pad_right: 2,
            groups: 1,
        };
        let long = 40;
        let short = g.out_len(long);
        assert_eq!(g.transposed_out_len(short), long);
        let fwd = ConvDims {
            batch: 1,
            c_in: 3,
            c_out: 2,
            len_in: long,
            len_out: short,
        };
        let x = ramp(3 * long, 1.0);
        let y = ramp(2 * short, 3.0);
        let w = ramp(2 * 3 * 8, 1.0);
        let mut cx = vec![0.0; 2 * short];
        conv1d_forward(&x, &w, None, fwd, &g, &mut cx);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();

        // conv weight [c_out=2, c_in=3, K] is a transposed weight [c_in'=2, c_out'=3, K].
        let tdims = ConvDims {
            batch: 1,
            c_in: 2,
            c_out: 3,
            len_in: short,
            len_out: long,
        };
        let mut ty = vec![0.0; 3 * long];
        conv_transpose1d_forward(&y, &w, None, tdims, &g, &mut ty);
        let rhs: f64 = ty.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn out_len_same_padding() {
        let g = ConvGeom {
            kernel: 40,
            pad_left: 20,
            pad_right: 19,
            ..ConvGeom::new(40)
        };
        assert_eq!(g.out_len(344), 344);
    }
}
