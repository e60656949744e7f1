//! Dense kernels behind the tensor ops. Everything here works on plain slices
//! in NCHW layout; shapes are validated by the callers in `ops`.

use alloc::vec;
use alloc::vec::Vec;

use super::scalar::Real;

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kernel, stride, pad }
    }

    /// Output side for an input side, or `None` when the kernel does not fit.
    pub fn out_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.pad;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox * stride + kj - pad` lies in
/// `0..w`, as a half-open range.
fn valid_cols(g: ConvGeom, kj: usize, w: usize, ow: usize) -> (usize, usize) {
    let off = kj as isize - g.pad as isize;
    let s = g.stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi = ((w as isize - off) + s - 1) / s;
    (lo.clamp(0, ow as isize) as usize, hi.clamp(0, ow as isize) as usize)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let k = g.kernel;
    let plane = oh * ow;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kj, w, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let seg = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        seg.fill(T::zero());
                        continue;
                    }
                    seg[..lo].fill(T::zero());
                    seg[hi..].fill(T::zero());
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        seg[lo..hi].copy_from_slice(&srow[start..start + hi - lo]);
                    } else {
                        for (out, v) in seg[lo..hi].iter_mut().zip(srow[start..].iter().step_by(g.stride)) {
                            *out = *v;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    x: &mut [T],
) {
    let k = g.kernel;
    let plane = oh * ow;
    for ci in 0..c {
        let dst = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kj, w, ow);
                if lo >= hi {
                    continue;
                }
                let start = lo * g.stride + kj - g.pad;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let seg = &src[oy * ow + lo..oy * ow + hi];
                    for (d, v) in drow[start..].iter_mut().step_by(g.stride).zip(seg) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

/// `y[n] = W · im2col(x[n])`; `x: [n, ci, h, w]`, `weight: [co, ci, k, k]`.
pub fn conv2d<T: Real>(
    x: &[T],
    [n, ci, h, w]: [usize; 4],
    weight: &[T],
    co: usize,
    g: ConvGeom,
) -> (Vec<T>, [usize; 4]) {
    let oh = g.out_len(h).expect("kernel larger than padded input");
    let ow = g.out_len(w).expect("kernel larger than padded input");
    let plane = oh * ow;
    let ikk = ci * g.kernel * g.kernel;
    let mut out = vec![T::zero(); n * co * plane];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ikk * plane] };
    for s in 0..n {
        let xs = &x[s * ci * h * w..(s + 1) * ci * h * w];
        let b: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, ci, h, w, g, oh, ow, &mut col);
            &col
        };
        let ys = &mut out[s * co * plane..(s + 1) * co * plane];
        unsafe {
            T::gemm(
                co,
                ikk,
                plane,
                T::one(),
                weight.as_ptr(),
                ikk as isize,
                1,
                b.as_ptr(),
                plane as isize,
                1,
                T::zero(),
                ys.as_mut_ptr(),
                plane as isize,
                1,
            );
        }
    }
    (out, [n, co, oh, ow])
}

/// Adjoint of [`conv2d`] in its input: maps `y: [n, co, oh, ow]` back to
/// `[n, ci, h, w]` through `weight: [co, ci, k, k]`.
pub fn conv2d_transpose<T: Real>(
    y: &[T],
    [n, co, oh, ow]: [usize; 4],
    weight: &[T],
    ci: usize,
    g: ConvGeom,
    [h, w]: [usize; 2],
) -> Vec<T> {
    let plane = oh * ow;
    let ikk = ci * g.kernel * g.kernel;
    let mut out = vec![T::zero(); n * ci * h * w];
    let mut col = vec![T::zero(); ikk * plane];
    for s in 0..n {
        let ys = &y[s * co * plane..(s + 1) * co * plane];
        let xs = &mut out[s * ci * h * w..(s + 1) * ci * h * w];
        let dst: &mut [T] = if g.is_pointwise() { xs } else { &mut col };
        unsafe {
            // dst[ikk, plane] = W^T[ikk, co] · y[co, plane]
            T::gemm(
                ikk,
                co,
                plane,
                T::one(),
                weight.as_ptr(),
                1,
                ikk as isize,
                ys.as_ptr(),
                plane as isize,
                1,
                T::zero(),
                dst.as_mut_ptr(),
                plane as isize,
                1,
            );
        }
        if !g.is_pointwise() {
            col2im(&col, ci, h, w, g, oh, ow, xs);
        }
    }
    out
}

/// Adjoint of [`conv2d`] in its weight: `dW = Σ_n y[n] · im2col(x[n])^T`.
pub fn conv2d_weight<T: Real>(
    x: &[T],
    [n, ci, h, w]: [usize; 4],
    y: &[T],
    [yn, co, oh, ow]: [usize; 4],
    g: ConvGeom,
) -> Vec<T> {
    assert_eq!(n, yn, "batch mismatch in conv weight kernel");
    let plane = oh * ow;
    let ikk = ci * g.kernel * g.kernel;
    let mut out = vec![T::zero(); co * ikk];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ikk * plane] };
    for s in 0..n {
        let xs = &x[s * ci * h * w..(s + 1) * ci * h * w];
        let b: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, ci, h, w, g, oh, ow, &mut col);
            &col
        };
        let ys = &y[s * co * plane..(s + 1) * co * plane];
        unsafe {
            // out[co, ikk] += y[co, plane] · col^T[plane, ikk]
            T::gemm(
                co,
                plane,
                ikk,
                T::one(),
                ys.as_ptr(),
                plane as isize,
                1,
                b.as_ptr(),
                1,
                plane as isize,
                T::one(),
                out.as_mut_ptr(),
                ikk as isize,
                1,
            );
        }
    }
    out
}

/// Mean over non-overlapping `k × k` windows.
pub fn avg_pool<T: Real>(x: &[T], [n, c, h, w]: [usize; 4], k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let scale = T::one() / T::of((k * k) as f64);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            let oy = y / k;
            for xx in 0..w {
                dst[oy * ow + xx / k] += src[y * w + xx];
            }
        }
        for v in dst.iter_mut() {
            *v *= scale;
        }
    }
    out
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Real>(x: &[T], [n, c, h, w]: [usize; 4], k: usize) -> Vec<T> {
    let (oh, ow) = (h * k, w * k);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let srow = &src[(y / k) * w..(y / k + 1) * w];
            for (xx, v) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                *v = srow[xx / k];
            }
        }
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Pads `shape` with leading ones to `rank`.
pub fn align_shape(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut out = vec![1; rank - shape.len()];
    out.extend_from_slice(shape);
    out
}

/// Walks `big` in row-major order, pairing each trailing run with the
/// offset of the matching element in the broadcast source `small`.
/// Calls `f(big_offset, small_offset, run_len, small_is_constant_over_run)`.
fn broadcast_runs(big: &[usize], small: &[usize], mut f: impl FnMut(usize, usize, usize, bool)) {
    let rank = big.len();
    let small = align_shape(small, rank);
    let sstr = strides(&small);
    // Largest suffix that is uniformly "same" or uniformly "broadcast".
    let mut k = rank;
    let mut kind: Option<bool> = None;
    while k > 0 {
        let d = k - 1;
        let bcast = small[d] == 1 && big[d] != 1;
        let same = small[d] == big[d];
        let this = if big[d] == 1 {
            kind.unwrap_or(false)
        } else if bcast {
            true
        } else {
            debug_assert!(same);
            false
        };
        match kind {
            None => kind = Some(this),
            Some(kd) if kd != this => break,
            _ => {}
        }
        k -= 1;
    }
    let constant = kind.unwrap_or(false);
    let run: usize = big[k..].iter().product();
    let outer: usize = big[..k].iter().product();
    let mut idx = vec![0usize; k];
    for o in 0..outer {
        let mut soff = 0;
        for d in 0..k {
            if small[d] != 1 {
                soff += idx[d] * sstr[d];
            }
        }
        f(o * run, soff, run, constant);
        for d in (0..k).rev() {
            idx[d] += 1;
            if idx[d] < big[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub fn broadcast_to<T: Real>(x: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    let total: usize = to.iter().product();
    let mut out = vec![T::zero(); total];
    broadcast_runs(to, from, |bo, so, run, constant| {
        if constant {
            out[bo..bo + run].fill(x[so]);
        } else {
            out[bo..bo + run].copy_from_slice(&x[so..so + run]);
        }
    });
    out
}

/// Reverse of [`broadcast_to`]: sums `x: from` down onto `to`.
pub fn sum_to<T: Real>(x: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    let total: usize = to.iter().product();
    let mut out = vec![T::zero(); total];
    broadcast_runs(from, to, |bo, so, run, constant| {
        if constant {
            let s: T = x[bo..bo + run].iter().copied().sum();
            out[so] += s;
        } else {
            for (d, v) in out[so..so + run].iter_mut().zip(&x[bo..bo + run]) {
                *d += *v;
            }
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], xs: [usize; 4], w: &[f64], co: usize, g: ConvGeom) -> Vec<f64> {
        let [n, ci, h, wd] = xs;
        let oh = g.out_len(h).unwrap();
        let ow = g.out_len(wd).unwrap();
        let k = g.kernel;
        let mut out = vec![0.0; n * co * oh * ow];
        for s in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x[((s * ci + c) * h + iy as usize) * wd + ix as usize]
                                        * w[((o * ci + c) * k + ki) * k + kj];
                                }
                            }
                        }
                        out[((s * co + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn seq(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed;
        (0..n)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &g in &[ConvGeom::new(4, 2, 1), ConvGeom::new(3, 1, 1), ConvGeom::new(1, 1, 0)] {
            let xs = [2, 3, 6, 6];
            let x = seq(2 * 3 * 36, 1);
            let w = seq(5 * 3 * g.kernel * g.kernel, 2);
            let (y, _) = conv2d(&x, xs, &w, 5, g);
            let expect = naive_conv(&x, xs, &w, 5, g);
            for (a, b) in y.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_and_weight_kernels_are_adjoints() {
        // <conv(x, w), y> == <x, convT(y, w)> == <w, convW(x, y)>
        let g = ConvGeom::new(4, 2, 1);
        let xs = [2, 3, 8, 8];
        let x = seq(2 * 3 * 64, 3);
        let w = seq(4 * 3 * 16, 4);
        let (cx, ys) = conv2d(&x, xs, &w, 4, g);
        let y = seq(cx.len(), 5);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let xt = conv2d_transpose(&y, ys, &w, 3, g, [8, 8]);
        let mid: f64 = x.iter().zip(&xt).map(|(a, b)| a * b).sum();
        let wt = conv2d_weight(&x, xs, &y, ys, g);
        let rhs: f64 = w.iter().zip(&wt).map(|(a, b)| a * b).sum();
        assert!((lhs - mid).abs() < 1e-10);
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn broadcast_and_sum_to_roundtrip_counts() {
        let x = [1.0f64, 2.0, 3.0];
        let b = broadcast_to(&x, &[1, 3, 1, 1], &[2, 3, 2, 2]);
        assert_eq!(b.len(), 24);
        assert_eq!(&b[0..4], &[1.0; 4]);
        assert_eq!(&b[12..16], &[1.0; 4]);
        let s = sum_to(&b, &[2, 3, 2, 2], &[1, 3, 1, 1]);
        assert_eq!(s, vec![8.0, 16.0, 24.0]);
        let s = sum_to(&b, &[2, 3, 2, 2], &[]);
        assert_eq!(s, vec![48.0]);
        let b2 = broadcast_to(&[1.0f64, 2.0], &[2, 1, 1, 1], &[2, 3, 1, 2]);
        assert_eq!(b2, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0]);
        let mixed = broadcast_to(&[1.0f64, 2.0], &[1, 2], &[3, 2]);
        assert_eq!(mixed, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn pooling_pairs() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let p = avg_pool(&x, [1, 1, 4, 4], 2);
        assert_eq!(p, vec![2.5, 4.5, 10.5, 12.5]);
        let u = upsample_nearest(&p, [1, 1, 2, 2], 2);
        assert_eq!(&u[0..4], &[2.5, 2.5, 4.5, 4.5]);
    }
}
