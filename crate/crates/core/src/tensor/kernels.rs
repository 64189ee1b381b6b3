//! Slice-level numeric kernels. No allocation, no shape checks; callers in
//! the graph validate dimensions first. Summation order is fixed so results
//! are bit-reproducible.

use super::{is_masked, Scalar};

#[inline]
pub fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + a * xv;
    }
}

#[inline]
pub fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = x.len() / 8;
    for c in 0..chunks {
        let xs = &x[c * 8..c * 8 + 8];
        let ys = &y[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] = acc[l] + xs[l] * ys[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..x.len() {
        tail = tail + x[i] * y[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

const MR: usize = 4;
const NR: usize = 8;

/// `c[m,n] += a[m,k] · b[k,n]`, register-blocked. Every output element
/// accumulates its `k` products in increasing `p` order.
pub fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[T::zero(); NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
            }
            for p in 0..k {
                let bp: &[T; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for l in 0..NR {
                        row[l] = row[l] + av * bp[l];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
            }
            j += NR;
        }
        for r in 0..MR {
            gemm_row_tail(&a[(i + r) * k..(i + r + 1) * k], b, &mut c[(i + r) * n..(i + r + 1) * n], k, n, j);
        }
        i += MR;
    }
    for r in i..m {
        let arow = &a[r * k..(r + 1) * k];
        let crow = &mut c[r * n..(r + 1) * n];
        let mut j = 0;
        while j + NR <= n {
            let mut acc: [T; NR] = crow[j..j + NR].try_into().unwrap();
            for (p, &av) in arow.iter().enumerate() {
                let bp: &[T; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
                for l in 0..NR {
                    acc[l] = acc[l] + av * bp[l];
                }
            }
            crow[j..j + NR].copy_from_slice(&acc);
            j += NR;
        }
        gemm_row_tail(arow, b, crow, k, n, j);
    }
}

#[inline]
fn gemm_row_tail<T: Scalar>(arow: &[T], b: &[T], crow: &mut [T], k: usize, n: usize, from: usize) {
    for j in from..n {
        let mut s = crow[j];
        for p in 0..k {
            s = s + arow[p] * b[p * n + j];
        }
        crow[j] = s;
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            *cv = *cv + dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`, accumulating over `i` in increasing order.
pub fn gemm_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let mut p = 0;
    while p + MR <= k {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[T::zero(); NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(p + r) * n + j..(p + r) * n + j + NR]);
            }
            for i in 0..m {
                let bi: &[T; NR] = b[i * n + j..i * n + j + NR].try_into().unwrap();
                let ai = &a[i * k + p..i * k + p + MR];
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = ai[r];
                    for l in 0..NR {
                        row[l] = row[l] + av * bi[l];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(p + r) * n + j..(p + r) * n + j + NR].copy_from_slice(row);
            }
            j += NR;
        }
        for r in p..p + MR {
            tn_tail(a, b, c, m, k, n, r, j);
        }
        p += MR;
    }
    for r in p..k {
        tn_tail(a, b, c, m, k, n, r, 0);
    }
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn tn_tail<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, p: usize, from: usize) {
    for j in from..n {
        let mut s = c[p * n + j];
        for i in 0..m {
            s = s + a[i * k + p] * b[i * n + j];
        }
        c[p * n + j] = s;
    }
}

/// Softmax over the middle axis of an `[outer, len, inner]` view. Positions at
/// or below the negative sentinel are treated as masked and receive exactly 0.
/// Returns false if some slice is fully masked.
pub fn softmax_strided<T: Scalar>(x: &[T], y: &mut [T], outer: usize, len: usize, inner: usize) -> bool {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            let mut any = false;
            for l in 0..len {
                let v = x[base + l * inner];
                if !is_masked(v) {
                    any = true;
                    if v > max {
                        max = v;
                    }
                }
            }
            if !any {
                return false;
            }
            let mut sum = 0f64;
            for l in 0..len {
                let v = x[base + l * inner];
                let e = if is_masked(v) { T::zero() } else { (v - max).exp() };
                y[base + l * inner] = e;
                sum += e.as_f64();
            }
            let s = T::of(sum);
            for l in 0..len {
                let p = &mut y[base + l * inner];
                *p = *p / s;
            }
        }
    }
    true
}

/// Geometry of a "same"-padded 2-D convolution over NHWC data.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h.div_ceil(self.stride)
    }
    pub fn out_w(&self) -> usize {
        self.w.div_ceil(self.stride)
    }
    fn pad_h(&self) -> isize {
        ((self.kh - 1) / 2) as isize
    }
    fn pad_w(&self) -> isize {
        ((self.kw - 1) / 2) as isize
    }

    /// Calls `f(out_index, in_index, kernel_tap)` for every valid
    /// (output pixel, kernel tap) pair, in a fixed order.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let (ph, pw) = (self.pad_h(), self.pad_w());
        for b in 0..self.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = (b * oh + oy) * ow + ox;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - ph;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - pw;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let i = (b * self.h + iy as usize) * self.w + ix as usize;
                            f(o, i, ky * self.kw + kx);
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `ox` of a stride-1 row whose tap `kx` lands inside the
/// input, with the matching first input column.
#[inline]
fn tap_span(g: &ConvGeom, kx: usize) -> Option<(usize, usize, usize)> {
    let pw = g.pad_w();
    let lo = (pw - kx as isize).max(0) as usize;
    let hi = ((g.w as isize + pw - kx as isize).min(g.out_w() as isize)).max(0) as usize;
    (lo < hi).then(|| (lo, hi - lo, (lo as isize + kx as isize - pw) as usize))
}

/// Calls `f(first_out, first_in, count, tap)` for every run of output pixels
/// in one row that see a contiguous run of input pixels through one tap.
/// Stride 1 only.
#[inline]
fn for_each_run(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ph = g.pad_h();
    for b in 0..g.n {
        for oy in 0..oh {
            for ky in 0..g.kh {
                let iy = (oy + ky) as isize - ph;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    if let Some((ox, count, ix)) = tap_span(g, kx) {
                        f((b * oh + oy) * ow + ox, (b * g.h + iy as usize) * g.w + ix, count, ky * g.kw + kx);
                    }
                }
            }
        }
    }
}

/// Direct convolution (cross-correlation), no im2col buffer.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], k: &[T], bias: Option<&[T]>, out: &mut [T], relu: bool) {
    let (cin, cout) = (g.cin, g.cout);
    if let Some(bias) = bias {
        for o in out.chunks_exact_mut(cout) {
            o.copy_from_slice(bias);
        }
    }
    if g.stride == 1 {
        for_each_run(g, |o, i, count, tap| {
            let kt = &k[tap * cin * cout..(tap + 1) * cin * cout];
            gemm_acc(&x[i * cin..(i + count) * cin], kt, &mut out[o * cout..(o + count) * cout], count, cin, cout);
        });
    } else {
        g.for_each_tap(|o, i, tap| {
            let orow = &mut out[o * cout..(o + 1) * cout];
            let xin = &x[i * cin..(i + 1) * cin];
            let kt = &k[tap * cin * cout..(tap + 1) * cin * cout];
            for (c, &xv) in xin.iter().enumerate() {
                axpy(orow, xv, &kt[c * cout..(c + 1) * cout]);
            }
        });
    }
    if relu {
        for v in out.iter_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
    }
}

/// Accumulates input and kernel gradients of a convolution given the output
/// gradient `gy` (already masked by the relu derivative when fused).
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    k: &[T],
    gy: &[T],
    mut gx: Option<&mut [T]>,
    mut gk: Option<&mut [T]>,
) {
    let (cin, cout) = (g.cin, g.cout);
    if g.stride == 1 {
        // per-tap transposed kernels, [cout, cin]
        let taps = g.kh * g.kw;
        let mut kt_t = vec![T::zero(); k.len()];
        for t in 0..taps {
            for c in 0..cin {
                for j in 0..cout {
                    kt_t[t * cin * cout + j * cin + c] = k[t * cin * cout + c * cout + j];
                }
            }
        }
        for_each_run(g, |o, i, count, tap| {
            let grows = &gy[o * cout..(o + count) * cout];
            if let Some(gx) = gx.as_deref_mut() {
                gemm_acc(grows, &kt_t[tap * cin * cout..(tap + 1) * cin * cout], &mut gx[i * cin..(i + count) * cin], count, cout, cin);
            }
            if let Some(gk) = gk.as_deref_mut() {
                gemm_tn_acc(&x[i * cin..(i + count) * cin], grows, &mut gk[tap * cin * cout..(tap + 1) * cin * cout], count, cin, cout);
            }
        });
        return;
    }
    g.for_each_tap(|o, i, tap| {
        let grow = &gy[o * cout..(o + 1) * cout];
        let kt = &k[tap * cin * cout..(tap + 1) * cin * cout];
        if let Some(gx) = gx.as_deref_mut() {
            let gxi = &mut gx[i * cin..(i + 1) * cin];
            for (c, v) in gxi.iter_mut().enumerate() {
                *v = *v + dot(grow, &kt[c * cout..(c + 1) * cout]);
            }
        }
        if let Some(gk) = gk.as_deref_mut() {
            let xin = &x[i * cin..(i + 1) * cin];
            let gkt = &mut gk[tap * cin * cout..(tap + 1) * cin * cout];
            for (c, &xv) in xin.iter().enumerate() {
                axpy(&mut gkt[c * cout..(c + 1) * cout], xv, grow);
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64).sin()).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm_acc(&a, &b, &mut c, 2, 3, 4);
        // b transposed to 4x3
        let mut bt = vec![0.0; 12];
        for p in 0..3 {
            for j in 0..4 {
                bt[j * 3 + p] = b[p * 4 + j];
            }
        }
        let mut c2 = vec![0.0; 8];
        gemm_nt_acc(&a, &bt, &mut c2, 2, 3, 4);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
        // aᵀ as 3x2 then tn with it gives a·b again
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for p in 0..3 {
                at[p * 2 + i] = a[i * 3 + p];
            }
        }
        let mut c3 = vec![0.0; 8];
        gemm_tn_acc(&at, &b, &mut c3, 3, 2, 4);
        for (x, y) in c.iter().zip(&c3) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dot_handles_tails() {
        let x: Vec<f64> = (0..19).map(|v| v as f64).collect();
        let naive: f64 = x.iter().map(|v| v * v).sum();
        assert_eq!(dot(&x, &x), naive);
    }
}
