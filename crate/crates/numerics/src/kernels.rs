//! Raw slice kernels behind the tape ops.
//!
//! Every output element is accumulated in a fixed order that does not depend
//! on how many rows are processed together, so a sample's result is bitwise
//! identical whether it is evaluated alone or inside a batch.

/// `c[m x n] += a[m x k] * b[k x n]`
pub fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[k x n] += a[m x k]^T * b[m x n]`
pub fn gemm_at_b(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m x k] += a[m x n] * b[k x n]^T`
pub fn gemm_a_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * k + p] += s;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn cols(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output columns `oj` whose input column `oj * stride + kj - pad` lies inside `0..w`.
fn valid_cols(g: &ConvGeom, kj: usize) -> std::ops::Range<usize> {
    let lo = if kj >= g.pad { 0 } else { (g.pad - kj).div_ceil(g.stride) };
    let hi = if g.w + g.pad > kj { (g.w + g.pad - kj - 1) / g.stride + 1 } else { 0 };
    lo.min(g.out_w)..hi.min(g.out_w).max(lo.min(g.out_w))
}

/// Unfolds one `[in_ch, h, w]` sample into `[in_ch*kh*kw, out_h*out_w]`.
pub fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                let cols = valid_cols(g, kj);
                for oi in 0..g.out_h {
                    let out = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..(c * g.h + ii as usize + 1) * g.w];
                    out[..cols.start].fill(0.0);
                    out[cols.end..].fill(0.0);
                    if g.stride == 1 {
                        let j0 = cols.start + kj - g.pad;
                        out[cols.clone()].copy_from_slice(&src[j0..j0 + cols.len()]);
                    } else {
                        for oj in cols.clone() {
                            out[oj] = src[oj * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into `dx`.
pub fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                let cols = valid_cols(g, kj);
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    let base = (c * g.h + ii as usize) * g.w;
                    let s = &src[oi * g.out_w..(oi + 1) * g.out_w];
                    for oj in cols.clone() {
                        dx[base + oj * g.stride + kj - g.pad] += s[oj];
                    }
                }
            }
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise `softmax(x / tau)` with max subtraction.
pub fn softmax_rows(x: &[f64], cols: usize, tau: f64, out: &mut [f64]) {
    for (row, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = ((v - max) / tau).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_matches_direct_indexing() {
        for (h, w, k, stride, pad) in [(5, 4, 3, 1, 1), (6, 6, 3, 2, 1), (4, 5, 2, 2, 0), (3, 3, 3, 1, 2), (7, 5, 1, 3, 0)] {
            let g = ConvGeom {
                in_ch: 2,
                h,
                w,
                kh: k,
                kw: k,
                stride,
                pad,
                out_h: (h + 2 * pad - k) / stride + 1,
                out_w: (w + 2 * pad - k) / stride + 1,
            };
            let x: Vec<f64> = (0..2 * h * w).map(|v| v as f64 + 1.0).collect();
            let mut col = vec![f64::NAN; g.cols() * g.positions()];
            im2col(&x, &g, &mut col);
            for c in 0..2 {
                for ki in 0..k {
                    for kj in 0..k {
                        for oi in 0..g.out_h {
                            for oj in 0..g.out_w {
                                let ii = (oi * stride + ki) as isize - pad as isize;
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                let inside = ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w;
                                let want = if inside { x[(c * h + ii as usize) * w + jj as usize] } else { 0.0 };
                                let row = (c * k + ki) * k + kj;
                                assert_eq!(col[row * g.positions() + oi * g.out_w + oj], want);
                            }
                        }
                    }
                }
            }
            // col2im is the adjoint: <im2col(x), y> == <x, col2im(y)>
            let y: Vec<f64> = (0..col.len()).map(|v| ((v * 7) % 11) as f64 - 5.0).collect();
            let mut dx = vec![0.0; x.len()];
            col2im(&y, &g, &mut dx);
            let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
            assert_eq!(lhs, rhs);
        }
    }

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

    fn seq(n: usize, s: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 * s).sin() * 3.0).round() / 2.0).collect()
    }

    #[test]
    fn gemm_variants_agree_with_triple_loop() {
        let (m, k, n) = (3, 4, 5);
        let a = seq(m * k, 0.7);
        let b = seq(k * n, 1.3);
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm(&a, &b, &mut c, m, k, n);
        assert_eq!(c, want);

        // a^T stored as k x m
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm_at_b(&at, &b, &mut c2, k, m, n);
        assert_eq!(c2, want);

        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c3 = vec![0.0; m * n];
        gemm_a_bt(&a, &bt, &mut c3, m, k, n);
        assert_eq!(c3, want);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { in_ch: 2, h: 5, w: 4, kh: 3, kw: 3, stride: 2, pad: 1, out_h: 3, out_w: 2 };
        let x = seq(2 * 5 * 4, 0.9);
        let y = seq(g.cols() * g.positions(), 0.4);
        let mut col = vec![0.0; g.cols() * g.positions()];
        im2col(&x, &g, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.len()];
        col2im(&y, &g, &mut dx);
        let rhs: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
