//! Raw slice kernels shared by the tape's forward and backward rules.

/// `c[m×n] = op(a)[m×k] · op(b)[k×n] + beta · c`.
///
/// `a` is stored `[m, k]` (or `[k, m]` when `a_t`); `b` is stored `[k, n]`
/// (or `[n, k]` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a stride-1 square-kernel convolution over `[N, C, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    /// Rows of the patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    /// Columns of the patch matrix.
    pub fn positions(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

/// Expands `x` into a `[C·k·k, N·Ho·Wo]` patch matrix.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let cols_n = g.positions();
    let mut cols = vec![0.0; g.patch_len() * cols_n];
    for c in 0..g.in_ch {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.batch {
                    let src = &x[(n * g.in_ch + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..ho {
                        let iy = oy + ky;
                        if iy < g.pad || iy - g.pad >= g.h {
                            continue;
                        }
                        let iy = iy - g.pad;
                        let base = n * ho * wo + oy * wo;
                        for ox in 0..wo {
                            let ix = ox + kx;
                            if ix < g.pad || ix - g.pad >= g.w {
                                continue;
                            }
                            dst[base + ox] = src[iy * g.w + ix - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto `dx`.
pub fn col2im_add(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let cols_n = g.positions();
    for c in 0..g.in_ch {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &dcols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.batch {
                    let dst = &mut dx[(n * g.in_ch + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..ho {
                        let iy = oy + ky;
                        if iy < g.pad || iy - g.pad >= g.h {
                            continue;
                        }
                        let iy = iy - g.pad;
                        let base = n * ho * wo + oy * wo;
                        for ox in 0..wo {
                            let ix = ox + kx;
                            if ix < g.pad || ix - g.pad >= g.w {
                                continue;
                            }
                            dst[iy * g.w + ix - g.pad] += src[base + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 stride-2 max pooling over the last two axes with ceil-mode output
/// size (edge windows are clipped). Returns values and the flat argmax of
/// every output cell; ties resolve to the first maximum in scan order.
pub fn maxpool2(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_ix = 0;
                for iy in 2 * oy..(2 * oy + 2).min(h) {
                    for ix in 2 * ox..(2 * ox + 2).min(w) {
                        let v = x[base + iy * w + ix];
                        if v > best {
                            best = v;
                            best_ix = base + iy * w + ix;
                        }
                    }
                }
                out.push(best);
                arg.push(best_ix);
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_for_all_transpose_flags() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, 0.0);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pooling_ceil_mode_clips_edges() {
        // 3x3 plane -> 2x2 output
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        let (out, arg) = maxpool2(&x, 1, 3, 3);
        assert_eq!(out, vec![4.0, 5.0, 7.0, 8.0]);
        assert_eq!(arg, vec![4, 5, 7, 8]);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom {
            batch: 2,
            in_ch: 2,
            h: 4,
            w: 3,
            k: 3,
            pad: 1,
        };
        let x: Vec<f64> = (0..2 * 2 * 4 * 3).map(|i| (i as f64 * 0.3).sin()).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.len()];
        col2im_add(&y, &g, &mut dx);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
