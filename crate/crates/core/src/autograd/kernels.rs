//! Plain-slice kernels behind the tape primitives.

use rayon::prelude::*;

/// Geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Output extent of a sliding window, or `None` if the window does not fit.
pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfolds one `[C,H,W]` sample into `[C*kh*kw, out_h*out_w]` columns.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        dst[oi * g.out_w + oj] = if ii >= 0
                            && jj >= 0
                            && (ii as usize) < g.height
                            && (jj as usize) < g.width
                        {
                            x[(c * g.height + ii as usize) * g.width + jj as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Folds column gradients back onto a `[C,H,W]` sample, accumulating overlaps.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.height {
                        continue;
                    }
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj as usize >= g.width {
                            continue;
                        }
                        dx[(c * g.height + ii as usize) * g.width + jj as usize] +=
                            src[oi * g.out_w + oj];
                    }
                }
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += a[m,n] * b[k,n]^T`
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Batched forward convolution. Returns `(output, cached columns)`.
pub(crate) fn conv_forward(
    x: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    batch: usize,
    filters: usize,
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; batch * rows * ncols];
    let mut out = vec![0.0; batch * filters * ncols];
    cols.par_chunks_mut(rows * ncols)
        .zip(out.par_chunks_mut(filters * ncols))
        .zip(x.par_chunks(g.sample_len()))
        .for_each(|((c, o), xs)| {
            im2col(xs, g, c);
            if let Some(b) = bias {
                for (f, row) in o.chunks_mut(ncols).enumerate() {
                    row.fill(b[f]);
                }
            }
            gemm_acc(kernel, c, o, filters, rows, ncols);
        });
    (out, cols)
}

/// Batched convolution backward. Returns `(dx, dkernel, dbias)`; each is
/// computed only when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    dout: &[f64],
    cols: &[f64],
    kernel: &[f64],
    batch: usize,
    filters: usize,
    g: &ConvGeom,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    type Grads = (Option<Vec<f64>>, Option<Vec<f64>>);
    let per_sample: Vec<Grads> = (0..batch)
        .into_par_iter()
        .map(|s| {
            let d = &dout[s * filters * ncols..(s + 1) * filters * ncols];
            let c = &cols[s * rows * ncols..(s + 1) * rows * ncols];
            let dk = want_dk.then(|| {
                let mut dk = vec![0.0; filters * rows];
                gemm_nt_acc(d, c, &mut dk, filters, ncols, rows);
                dk
            });
            let dx = want_dx.then(|| {
                let mut dcols = vec![0.0; rows * ncols];
                gemm_tn_acc(kernel, d, &mut dcols, filters, rows, ncols);
                let mut dx = vec![0.0; g.sample_len()];
                col2im(&dcols, g, &mut dx);
                dx
            });
            (dx, dk)
        })
        .collect();

    let mut dbias = vec![0.0; filters];
    for s in 0..batch {
        for (f, db) in dbias.iter_mut().enumerate() {
            let start = (s * filters + f) * ncols;
            *db += dout[start..start + ncols].iter().sum::<f64>();
        }
    }

    let mut dk_total = want_dk.then(|| vec![0.0; filters * rows]);
    let mut dx_total = want_dx.then(|| Vec::with_capacity(batch * g.sample_len()));
    for (dx, dk) in per_sample {
        if let (Some(total), Some(dk)) = (dk_total.as_mut(), dk) {
            for (t, v) in total.iter_mut().zip(dk) {
                *t += v;
            }
        }
        if let (Some(total), Some(dx)) = (dx_total.as_mut(), dx) {
            total.extend(dx);
        }
    }
    (dx_total, dk_total, dbias)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut out = vec![0.0; 8];
        gemm_acc(&a, &b, &mut out, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(out[i * 4 + j], want);
            }
        }
        // a (2x3) * a^T -> 2x2
        let mut nt = vec![0.0; 4];
        gemm_nt_acc(&a, &a, &mut nt, 2, 3, 2);
        assert_eq!(nt[1], (0..3).map(|p| a[p] * a[3 + p]).sum::<f64>());
        // a^T (3x2) * a (2x3) -> 3x3
        let mut tn = vec![0.0; 9];
        gemm_tn_acc(&a, &a, &mut tn, 2, 3, 3);
        assert_eq!(tn[2], a[0] * a[2] + a[3] * a[5]);
    }

    #[test]
    fn extents() {
        assert_eq!(out_extent(3, 3, 1, 0), Some(1));
        assert_eq!(out_extent(4, 1, 2, 0), Some(2));
        assert_eq!(out_extent(5, 3, 2, 1), Some(3));
        assert_eq!(out_extent(2, 3, 1, 0), None);
        assert_eq!(out_extent(2, 3, 1, 1), Some(2));
    }
}
