//! Raw numeric kernels on contiguous row-major slices.
//!
//! Kernels that parallelize do so over disjoint output rows only, and every
//! output element is reduced in a fixed order, so results are bitwise
//! identical regardless of thread count.

use rayon::prelude::*;

use super::tensor::Real;

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

fn for_rows<F: Real>(out: &mut [F], row_len: usize, work: usize, f: impl Fn(usize, &mut [F]) + Sync + Send) {
    if row_len == 0 {
        return;
    }
    if work >= PAR_THRESHOLD && out.len() > row_len {
        out.par_chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
    } else {
        out.chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
    }
}

#[inline]
fn axpy<F: Real>(acc: &mut [F], alpha: F, x: &[F]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += alpha * v;
    }
}

#[inline]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut s = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for_rows(&mut out, n, m * k * n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &v) in arow.iter().enumerate() {
            axpy(row, v, &b[kk * n..(kk + 1) * n]);
        }
    });
    out
}

/// `a[m×k]ᵀ · b[m×n]`, a `k×n` result.
pub fn matmul_at_b<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); k * n];
    for_rows(&mut out, n, m * k * n, |kk, row| {
        for i in 0..m {
            let v = a[i * k + kk];
            axpy(row, v, &b[i * n..(i + 1) * n]);
        }
    });
    out
}

/// `a[m×n] · b[k×n]ᵀ`, an `m×k` result.
pub fn matmul_a_bt<F: Real>(a: &[F], b: &[F], m: usize, n: usize, k: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * k];
    for_rows(&mut out, k, m * k * n, |i, row| {
        let arow = &a[i * n..(i + 1) * n];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(arow, &b[j * n..(j + 1) * n]);
        }
    });
    out
}

/// Resolved geometry of a 2-D convolution over NHWC data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub ho: usize,
    pub wo: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub groups: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn tap_len(&self) -> usize {
        self.cin_g() * self.cout
    }

    /// Input row/col feeding output position `o` through kernel offset `k`.
    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Output row/col that reads input position `i` through kernel offset `k`.
    #[inline]
    fn dst(&self, i: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let num = (i + pad) as isize - k as isize;
        if num < 0 || !(num as usize).is_multiple_of(self.stride) {
            return None;
        }
        let o = num as usize / self.stride;
        (o < extent).then_some(o)
    }

    pub(crate) fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.groups == 1 && self.pad_top == 0 && self.pad_left == 0
    }
}

/// `px[co] += Σ_ci xin[ci] · tap[ci, co]` honoring groups.
#[inline]
fn conv_accumulate<F: Real>(g: &ConvGeom, px: &mut [F], xin: &[F], tap: &[F]) {
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    if g.groups == 1 {
        for (ci, &v) in xin.iter().enumerate() {
            axpy(px, v, &tap[ci * g.cout..(ci + 1) * g.cout]);
        }
    } else if cin_g == 1 && cout_g == 1 {
        for ((o, &v), &wv) in px.iter_mut().zip(xin).zip(tap) {
            *o += v * wv;
        }
    } else {
        for grp in 0..g.groups {
            let out = &mut px[grp * cout_g..(grp + 1) * cout_g];
            for cl in 0..cin_g {
                let v = xin[grp * cin_g + cl];
                let row = &tap[cl * g.cout + grp * cout_g..cl * g.cout + (grp + 1) * cout_g];
                axpy(out, v, row);
            }
        }
    }
}

/// `dx[ci] += Σ_co tap[ci, co] · dy[co]` honoring groups.
#[inline]
fn conv_accumulate_input<F: Real>(g: &ConvGeom, dx: &mut [F], dy: &[F], tap: &[F]) {
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    if g.groups == 1 {
        for (ci, d) in dx.iter_mut().enumerate() {
            *d += dot(&tap[ci * g.cout..(ci + 1) * g.cout], dy);
        }
    } else if cin_g == 1 && cout_g == 1 {
        for ((d, &gy), &wv) in dx.iter_mut().zip(dy).zip(tap) {
            *d += gy * wv;
        }
    } else {
        for grp in 0..g.groups {
            let dyg = &dy[grp * cout_g..(grp + 1) * cout_g];
            for cl in 0..cin_g {
                let row = &tap[cl * g.cout + grp * cout_g..cl * g.cout + (grp + 1) * cout_g];
                dx[grp * cin_g + cl] += dot(row, dyg);
            }
        }
    }
}

/// `slab[ci, co] += xin[ci] · dy[co]` honoring groups.
#[inline]
fn conv_accumulate_weight<F: Real>(g: &ConvGeom, slab: &mut [F], xin: &[F], dy: &[F]) {
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    if g.groups == 1 {
        for (ci, &v) in xin.iter().enumerate() {
            axpy(&mut slab[ci * g.cout..(ci + 1) * g.cout], v, dy);
        }
    } else if cin_g == 1 && cout_g == 1 {
        for ((s, &v), &gy) in slab.iter_mut().zip(xin).zip(dy) {
            *s += v * gy;
        }
    } else {
        for grp in 0..g.groups {
            let dyg = &dy[grp * cout_g..(grp + 1) * cout_g];
            for cl in 0..cin_g {
                let v = xin[grp * cin_g + cl];
                let row = &mut slab[cl * g.cout + grp * cout_g..cl * g.cout + (grp + 1) * cout_g];
                axpy(row, v, dyg);
            }
        }
    }
}

fn conv_work(g: &ConvGeom) -> usize {
    g.n * g.ho * g.wo * g.kh * g.kw * g.tap_len()
}

pub fn conv2d_forward<F: Real>(x: &[F], w: &[F], bias: Option<&[F]>, g: &ConvGeom) -> Vec<F> {
    if g.is_pointwise() {
        let rows = g.n * g.h * g.w;
        let mut out = matmul(x, w, rows, g.cin, g.cout);
        if let Some(b) = bias {
            add_bias_inplace(&mut out, b);
        }
        return out;
    }
    let mut out = vec![F::zero(); g.n * g.ho * g.wo * g.cout];
    for_rows(&mut out, g.wo * g.cout, conv_work(g), |r, row| {
        let (n, oy) = (r / g.ho, r % g.ho);
        for ox in 0..g.wo {
            let px = &mut row[ox * g.cout..(ox + 1) * g.cout];
            if let Some(b) = bias {
                px.copy_from_slice(b);
            }
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.pad_top, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.pad_left, g.w) else { continue };
                    let base = ((n * g.h + iy) * g.w + ix) * g.cin;
                    let tap = &w[(ky * g.kw + kx) * g.tap_len()..][..g.tap_len()];
                    conv_accumulate(g, px, &x[base..base + g.cin], tap);
                }
            }
        }
    });
    out
}

pub fn conv2d_backward_input<F: Real>(dy: &[F], w: &[F], g: &ConvGeom) -> Vec<F> {
    if g.is_pointwise() {
        return matmul_a_bt(dy, w, g.n * g.h * g.w, g.cout, g.cin);
    }
    let mut dx = vec![F::zero(); g.n * g.h * g.w * g.cin];
    for_rows(&mut dx, g.w * g.cin, conv_work(g), |r, row| {
        let (n, iy) = (r / g.h, r % g.h);
        for ix in 0..g.w {
            let px = &mut row[ix * g.cin..(ix + 1) * g.cin];
            for ky in 0..g.kh {
                let Some(oy) = g.dst(iy, ky, g.pad_top, g.ho) else { continue };
                for kx in 0..g.kw {
                    let Some(ox) = g.dst(ix, kx, g.pad_left, g.wo) else { continue };
                    let base = ((n * g.ho + oy) * g.wo + ox) * g.cout;
                    let tap = &w[(ky * g.kw + kx) * g.tap_len()..][..g.tap_len()];
                    conv_accumulate_input(g, px, &dy[base..base + g.cout], tap);
                }
            }
        }
    });
    dx
}

pub fn conv2d_backward_weight<F: Real>(x: &[F], dy: &[F], g: &ConvGeom) -> Vec<F> {
    if g.is_pointwise() {
        return matmul_at_b(x, dy, g.n * g.h * g.w, g.cin, g.cout);
    }
    let mut dw = vec![F::zero(); g.kh * g.kw * g.tap_len()];
    let work = conv_work(g);
    let body = |t: usize, slab: &mut [F]| {
        let (ky, kx) = (t / g.kw, t % g.kw);
        for n in 0..g.n {
            for oy in 0..g.ho {
                let Some(iy) = g.src(oy, ky, g.pad_top, g.h) else { continue };
                for ox in 0..g.wo {
                    let Some(ix) = g.src(ox, kx, g.pad_left, g.w) else { continue };
                    let xb = ((n * g.h + iy) * g.w + ix) * g.cin;
                    let yb = ((n * g.ho + oy) * g.wo + ox) * g.cout;
                    conv_accumulate_weight(g, slab, &x[xb..xb + g.cin], &dy[yb..yb + g.cout]);
                }
            }
        }
    };
    if work >= PAR_THRESHOLD {
        dw.par_chunks_mut(g.tap_len()).enumerate().for_each(|(t, s)| body(t, s));
    } else {
        dw.chunks_mut(g.tap_len()).enumerate().for_each(|(t, s)| body(t, s));
    }
    dw
}

/// Sum over all leading axes, leaving the last (channel) axis.
pub fn sum_to_last<F: Real>(dy: &[F], c: usize) -> Vec<F> {
    let mut out = vec![F::zero(); c];
    for px in dy.chunks(c) {
        for (o, &v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    out
}

pub fn add_bias_inplace<F: Real>(data: &mut [F], b: &[F]) {
    for px in data.chunks_mut(b.len()) {
        for (o, &v) in px.iter_mut().zip(b) {
            *o += v;
        }
    }
}

/// Transposed convolution with kernel size equal to stride.
/// Shapes: `x[n,h,w,cin]`, `w[s,s,cin,cout]`, output `[n,h·s,w·s,cout]`.
#[derive(Debug, Clone, Copy)]
pub struct TConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

pub fn tconv_forward<F: Real>(x: &[F], w: &[F], bias: Option<&[F]>, g: &TConvGeom) -> Vec<F> {
    let (s, ho, wo) = (g.stride, g.h * g.stride, g.w * g.stride);
    let tap_len = g.cin * g.cout;
    let mut out = vec![F::zero(); g.n * ho * wo * g.cout];
    for_rows(&mut out, wo * g.cout, g.n * ho * wo * tap_len, |r, row| {
        let (n, oy) = (r / ho, r % ho);
        let (iy, ky) = (oy / s, oy % s);
        for ox in 0..wo {
            let (ix, kx) = (ox / s, ox % s);
            let px = &mut row[ox * g.cout..(ox + 1) * g.cout];
            if let Some(b) = bias {
                px.copy_from_slice(b);
            }
            let xin = &x[((n * g.h + iy) * g.w + ix) * g.cin..][..g.cin];
            let tap = &w[(ky * s + kx) * tap_len..][..tap_len];
            for (ci, &v) in xin.iter().enumerate() {
                axpy(px, v, &tap[ci * g.cout..(ci + 1) * g.cout]);
            }
        }
    });
    out
}

pub fn tconv_backward_input<F: Real>(dy: &[F], w: &[F], g: &TConvGeom) -> Vec<F> {
    let (s, ho, wo) = (g.stride, g.h * g.stride, g.w * g.stride);
    let tap_len = g.cin * g.cout;
    let mut dx = vec![F::zero(); g.n * g.h * g.w * g.cin];
    for_rows(&mut dx, g.w * g.cin, g.n * ho * wo * tap_len, |r, row| {
        let (n, iy) = (r / g.h, r % g.h);
        for ix in 0..g.w {
            let px = &mut row[ix * g.cin..(ix + 1) * g.cin];
            for ky in 0..s {
                for kx in 0..s {
                    let (oy, ox) = (iy * s + ky, ix * s + kx);
                    let gy = &dy[((n * ho + oy) * wo + ox) * g.cout..][..g.cout];
                    let tap = &w[(ky * s + kx) * tap_len..][..tap_len];
                    for (ci, d) in px.iter_mut().enumerate() {
                        *d += dot(&tap[ci * g.cout..(ci + 1) * g.cout], gy);
                    }
                }
            }
        }
    });
    dx
}

pub fn tconv_backward_weight<F: Real>(x: &[F], dy: &[F], g: &TConvGeom) -> Vec<F> {
    let (s, ho, wo) = (g.stride, g.h * g.stride, g.w * g.stride);
    let tap_len = g.cin * g.cout;
    let mut dw = vec![F::zero(); s * s * tap_len];
    for_rows(&mut dw, tap_len, g.n * ho * wo * tap_len, |t, slab| {
        let (ky, kx) = (t / s, t % s);
        for n in 0..g.n {
            for iy in 0..g.h {
                for ix in 0..g.w {
                    let xin = &x[((n * g.h + iy) * g.w + ix) * g.cin..][..g.cin];
                    let (oy, ox) = (iy * s + ky, ix * s + kx);
                    let gy = &dy[((n * ho + oy) * wo + ox) * g.cout..][..g.cout];
                    for (ci, &v) in xin.iter().enumerate() {
                        axpy(&mut slab[ci * g.cout..(ci + 1) * g.cout], v, gy);
                    }
                }
            }
        }
    });
    dw
}

/// Nearest-neighbour upsampling of `[n,h,w,c]` by an integer factor.
pub fn upsample_nearest<F: Real>(x: &[F], n: usize, h: usize, w: usize, c: usize, s: usize) -> Vec<F> {
    let (ho, wo) = (h * s, w * s);
    let mut out = vec![F::zero(); n * ho * wo * c];
    for (r, row) in out.chunks_mut(wo * c).enumerate() {
        let (b, oy) = (r / ho, r % ho);
        let src = &x[(b * h + oy / s) * w * c..][..w * c];
        for (ox, px) in row.chunks_mut(c).enumerate() {
            px.copy_from_slice(&src[(ox / s) * c..(ox / s + 1) * c]);
        }
    }
    out
}

/// Adjoint of [`upsample_nearest`]: sums each `s×s` block.
pub fn upsample_nearest_backward<F: Real>(dy: &[F], n: usize, h: usize, w: usize, c: usize, s: usize) -> Vec<F> {
    let (ho, wo) = (h * s, w * s);
    let mut dx = vec![F::zero(); n * h * w * c];
    for (r, row) in dy.chunks(wo * c).enumerate() {
        let (b, oy) = (r / ho, r % ho);
        let dst = &mut dx[(b * h + oy / s) * w * c..][..w * c];
        for (ox, px) in row.chunks(c).enumerate() {
            for (d, &v) in dst[(ox / s) * c..(ox / s + 1) * c].iter_mut().zip(px) {
                *d += v;
            }
        }
    }
    dx
}

/// Row-major axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute<F: Real>(x: &[F], shape: &[usize], perm: &[usize]) -> Vec<F> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..x.len() {
        out.push(x[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub const GELU_COEF: f64 = 0.044_715;
/// `sqrt(2/π)`
pub const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// GELU, tanh form: `0.5·x·(1 + tanh(sqrt(2/π)·(x + 0.044715·x³)))`.
pub fn gelu<F: Real>(x: F) -> F {
    let half = F::lit(0.5);
    let inner = F::lit(GELU_SCALE) * (x + F::lit(GELU_COEF) * x * x * x);
    half * x * (F::one() + inner.tanh())
}

pub fn gelu_grad<F: Real>(x: F) -> F {
    let half = F::lit(0.5);
    let c = F::lit(GELU_COEF);
    let k = F::lit(GELU_SCALE);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + F::lit(3.0) * c * x * x)
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes_matrix() {
        let x: Vec<f64> = (0..6).map(|v| v as f64).collect();
        assert_eq!(permute(&x, &[2, 3], &[1, 0]), vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn permute_roundtrip_rank4() {
        let shape = [2, 3, 4, 5];
        let x: Vec<f64> = (0..120).map(|v| v as f64).collect();
        let y = permute(&x, &shape, &[0, 2, 1, 3]);
        let back = permute(&y, &[2, 4, 3, 5], &[0, 2, 1, 3]);
        assert_eq!(x, back);
    }

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3×4
        let ab = matmul(&a, &b, 2, 3, 4);
        let at = permute(&a, &[2, 3], &[1, 0]);
        let bt = permute(&b, &[3, 4], &[1, 0]);
        assert_eq!(matmul_at_b(&at, &b, 3, 2, 4), ab);
        assert_eq!(matmul_a_bt(&a, &bt, 2, 3, 4), ab);
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
