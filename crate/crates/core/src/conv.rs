//! Direct same-padded convolution for odd kernels, stride 1.
//!
//! Inputs are copied into a zero-padded buffer whose rows are rounded up to a
//! whole number of lanes, so the inner loops never branch on borders. Each
//! output lane accumulates its taps in the same order whatever the lane
//! width, so forward results do not depend on the instruction set picked at
//! runtime.

use crate::tensor::Scalar;

/// Output channels computed together.
const OB: usize = 8;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub cin: usize,
    pub cout: usize,
    pub dims: [usize; 3],
    pub kernel: [usize; 3],
}

impl Geometry {
    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn blocks(&self) -> usize {
        self.cout.div_ceil(OB)
    }
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Padded extent `[dp, hp, wp]` for lane width `lanes`.
fn padded(dims: [usize; 3], kernel: [usize; 3], lanes: usize) -> [usize; 3] {
    [
        dims[0] + kernel[0] - 1,
        dims[1] + kernel[1] - 1,
        round_up(dims[2], lanes) + kernel[2] - 1,
    ]
}

fn pad_item<T: Scalar>(x: &[T], c: usize, dims: [usize; 3], kernel: [usize; 3], lanes: usize, buf: &mut Vec<T>) {
    let [d, h, w] = dims;
    let [dp, hp, wp] = padded(dims, kernel, lanes);
    let (oz, oy, ox) = (kernel[0] / 2, kernel[1] / 2, kernel[2] / 2);
    buf.clear();
    buf.resize(c * dp * hp * wp, T::zero());
    for ci in 0..c {
        for z in 0..d {
            for y in 0..h {
                let src = &x[((ci * d + z) * h + y) * w..][..w];
                let dst = ((ci * dp + z + oz) * hp + y + oy) * wp + ox;
                buf[dst..dst + w].copy_from_slice(src);
            }
        }
    }
}

/// `[cout, cin, taps]` -> `[block][cin][taps][OB]`, missing outputs zero.
pub(crate) fn pack_weights<T: Scalar>(w: &[T], geo: &Geometry) -> Vec<T> {
    let kv = geo.taps();
    let mut out = vec![T::zero(); geo.blocks() * geo.cin * kv * OB];
    for o in 0..geo.cout {
        let (blk, lane) = (o / OB, o % OB);
        for ci in 0..geo.cin {
            for k in 0..kv {
                out[((blk * geo.cin + ci) * kv + k) * OB + lane] = w[(o * geo.cin + ci) * kv + k];
            }
        }
    }
    out
}

#[inline(always)]
fn forward_lanes<T: Scalar, const L: usize>(xp: &[T], geo: &Geometry, wpk: &[T], out: &mut [T]) {
    let [d, h, w] = geo.dims;
    let [kd, kh, kw] = geo.kernel;
    let [dp, hp, wp] = padded(geo.dims, geo.kernel, L);
    let kv = geo.taps();
    let wr = round_up(w, L);
    for blk in 0..geo.blocks() {
        let wblk = &wpk[blk * geo.cin * kv * OB..][..geo.cin * kv * OB];
        let nout = OB.min(geo.cout - blk * OB);
        for z in 0..d {
            for y in 0..h {
                for xc in (0..wr).step_by(L) {
                    let mut acc = [[T::zero(); L]; OB];
                    for ci in 0..geo.cin {
                        for kz in 0..kd {
                            for ky in 0..kh {
                                let row = &xp[((ci * dp + z + kz) * hp + y + ky) * wp + xc..][..L + kw - 1];
                                let wt = &wblk[((ci * kd + kz) * kh + ky) * kw * OB..][..kw * OB];
                                for kx in 0..kw {
                                    let xin: &[T; L] = row[kx..kx + L].try_into().expect("lane slice");
                                    let wv: &[T; OB] = wt[kx * OB..(kx + 1) * OB].try_into().expect("block slice");
                                    for o in 0..OB {
                                        for l in 0..L {
                                            acc[o][l] = wv[o].mul_add(xin[l], acc[o][l]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let valid = L.min(w - xc);
                    for (o, a) in acc.iter().enumerate().take(nout) {
                        let orow = &mut out[(((blk * OB + o) * d + z) * h + y) * w + xc..][..valid];
                        for (dst, &v) in orow.iter_mut().zip(a) {
                            *dst += v;
                        }
                    }
                }
            }
        }
    }
}

/// `gw[o, ci, tap] += sum_p gy[o, p] * x[ci, p + tap]`. `gyp` holds `gy` with
/// rows padded to `round_up(w, L)` by zeros.
#[inline(always)]
fn weight_grad_lanes<T: Scalar, const L: usize>(xp: &[T], gyp: &[T], geo: &Geometry, gw: &mut [T]) {
    let [d, h, w] = geo.dims;
    let [kd, kh, kw] = geo.kernel;
    let [dp, hp, wp] = padded(geo.dims, geo.kernel, L);
    let kv = geo.taps();
    let wr = round_up(w, L);
    let zero_rows = [[T::zero(); L]; OB];
    for blk in 0..geo.blocks() {
        let nout = OB.min(geo.cout - blk * OB);
        for ci in 0..geo.cin {
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = [[T::zero(); L]; OB];
                        for z in 0..d {
                            for y in 0..h {
                                let xrow = &xp[((ci * dp + z + kz) * hp + y + ky) * wp + kx..][..wr];
                                for xc in (0..wr).step_by(L) {
                                    let xin: &[T; L] = xrow[xc..xc + L].try_into().expect("lane slice");
                                    for o in 0..OB {
                                        let g: &[T; L] = if o < nout {
                                            gyp[(((blk * OB + o) * d + z) * h + y) * wr + xc..][..L]
                                                .try_into()
                                                .expect("lane slice")
                                        } else {
                                            &zero_rows[o]
                                        };
                                        for l in 0..L {
                                            acc[o][l] = g[l].mul_add(xin[l], acc[o][l]);
                                        }
                                    }
                                }
                            }
                        }
                        let tap = (kz * kh + ky) * kw + kx;
                        for (o, a) in acc.iter().enumerate().take(nout) {
                            gw[((blk * OB + o) * geo.cin + ci) * kv + tap] += a.iter().copied().sum::<T>();
                        }
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use super::{padded, round_up, Geometry, OB};
    use std::arch::x86_64::*;

    const L: usize = 16;

    fn tail_mask(valid: usize) -> __mmask16 {
        if valid >= L {
            0xffff
        } else {
            ((1u32 << valid) - 1) as __mmask16
        }
    }

    /// # Safety
    /// Requires AVX-512F; buffers laid out as in `forward_lanes` with `L = 16`.
    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn forward(xp: &[f32], geo: &Geometry, wpk: &[f32], out: &mut [f32]) {
        let [d, h, w] = geo.dims;
        let [kd, kh, kw] = geo.kernel;
        let [dp, hp, wp] = padded(geo.dims, geo.kernel, L);
        let kv = geo.taps();
        let wr = round_up(w, L);
        assert!(xp.len() >= geo.cin * dp * hp * wp && wpk.len() >= geo.blocks() * geo.cin * kv * OB);
        assert!(out.len() >= geo.cout * d * h * w);
        for blk in 0..geo.blocks() {
            let wblk = wpk.as_ptr().add(blk * geo.cin * kv * OB);
            let nout = OB.min(geo.cout - blk * OB);
            for z in 0..d {
                for y in 0..h {
                    for xc in (0..wr).step_by(L) {
                        let mut acc = [_mm512_setzero_ps(); OB];
                        for ci in 0..geo.cin {
                            for kz in 0..kd {
                                for ky in 0..kh {
                                    let row = xp.as_ptr().add(((ci * dp + z + kz) * hp + y + ky) * wp + xc);
                                    let wt = wblk.add(((ci * kd + kz) * kh + ky) * kw * OB);
                                    for kx in 0..kw {
                                        let xin = _mm512_loadu_ps(row.add(kx));
                                        let wv = wt.add(kx * OB);
                                        for (o, a) in acc.iter_mut().enumerate() {
                                            *a = _mm512_fmadd_ps(_mm512_set1_ps(*wv.add(o)), xin, *a);
                                        }
                                    }
                                }
                            }
                        }
                        let m = tail_mask(w - xc);
                        for (o, a) in acc.iter().enumerate().take(nout) {
                            let p = out.as_mut_ptr().add((((blk * OB + o) * d + z) * h + y) * w + xc);
                            let cur = _mm512_maskz_loadu_ps(m, p);
                            _mm512_mask_storeu_ps(p, m, _mm512_add_ps(cur, *a));
                        }
                    }
                }
            }
        }
    }

    /// # Safety
    /// Requires AVX-512F; `gyp` holds `blocks * OB` zero-padded channels of
    /// rows rounded up to 16 lanes.
    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn weight_grad(xp: &[f32], gyp: &[f32], geo: &Geometry, gw: &mut [f32]) {
        let [d, h, w] = geo.dims;
        let [kd, kh, kw] = geo.kernel;
        let [dp, hp, wp] = padded(geo.dims, geo.kernel, L);
        let kv = geo.taps();
        let wr = round_up(w, L);
        let plane = d * h * wr;
        assert!(xp.len() >= geo.cin * dp * hp * wp && gyp.len() >= geo.blocks() * OB * plane);
        assert!(gw.len() >= geo.cout * geo.cin * kv);
        if kw == 3 {
            return weight_grad_kx3(xp, gyp, geo, gw);
        }
        for blk in 0..geo.blocks() {
            let nout = OB.min(geo.cout - blk * OB);
            let gblk = gyp.as_ptr().add(blk * OB * plane);
            for ci in 0..geo.cin {
                for kz in 0..kd {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut acc = [_mm512_setzero_ps(); OB];
                            for z in 0..d {
                                for y in 0..h {
                                    let xrow = xp.as_ptr().add(((ci * dp + z + kz) * hp + y + ky) * wp + kx);
                                    let grow = gblk.add((z * h + y) * wr);
                                    for xc in (0..wr).step_by(L) {
                                        let xin = _mm512_loadu_ps(xrow.add(xc));
                                        for (o, a) in acc.iter_mut().enumerate() {
                                            *a = _mm512_fmadd_ps(_mm512_loadu_ps(grow.add(o * plane + xc)), xin, *a);
                                        }
                                    }
                                }
                            }
                            let tap = (kz * kh + ky) * kw + kx;
                            for (o, a) in acc.iter().enumerate().take(nout) {
                                gw[((blk * OB + o) * geo.cin + ci) * kv + tap] += _mm512_reduce_add_ps(*a);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Width-3 kernels: the three horizontal taps share every load of `gy`,
    /// four output channels at a time.
    #[target_feature(enable = "avx512f")]
    unsafe fn weight_grad_kx3(xp: &[f32], gyp: &[f32], geo: &Geometry, gw: &mut [f32]) {
        const HALF: usize = OB / 2;
        let [d, h, w] = geo.dims;
        let [kd, kh, _] = geo.kernel;
        let [dp, hp, wp] = padded(geo.dims, geo.kernel, L);
        let kv = geo.taps();
        let wr = round_up(w, L);
        let plane = d * h * wr;
        for blk in 0..geo.blocks() {
            for half in 0..2 {
                let o0 = blk * OB + half * HALF;
                if o0 >= geo.cout {
                    continue;
                }
                let nout = HALF.min(geo.cout - o0);
                let gbase = gyp.as_ptr().add(o0 * plane);
                for ci in 0..geo.cin {
                    for kz in 0..kd {
                        for ky in 0..kh {
                            let mut acc = [[_mm512_setzero_ps(); HALF]; 3];
                            for z in 0..d {
                                for y in 0..h {
                                    let xrow = xp.as_ptr().add(((ci * dp + z + kz) * hp + y + ky) * wp);
                                    let grow = gbase.add((z * h + y) * wr);
                                    for xc in (0..wr).step_by(L) {
                                        let g = [
                                            _mm512_loadu_ps(grow.add(xc)),
                                            _mm512_loadu_ps(grow.add(plane + xc)),
                                            _mm512_loadu_ps(grow.add(2 * plane + xc)),
                                            _mm512_loadu_ps(grow.add(3 * plane + xc)),
                                        ];
                                        for (kx, ak) in acc.iter_mut().enumerate() {
                                            let xin = _mm512_loadu_ps(xrow.add(xc + kx));
                                            for (a, &gv) in ak.iter_mut().zip(&g) {
                                                *a = _mm512_fmadd_ps(gv, xin, *a);
                                            }
                                        }
                                    }
                                }
                            }
                            for (kx, ak) in acc.iter().enumerate() {
                                let tap = (kz * kh + ky) * 3 + kx;
                                for (o, a) in ak.iter().enumerate().take(nout) {
                                    gw[((o0 + o) * geo.cin + ci) * kv + tap] += _mm512_reduce_add_ps(*a);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Isa {
    Avx512,
    Portable,
}

/// The vector path only exists for `f32`; other scalars use the portable loops.
fn isa<T: Scalar>() -> Isa {
    #[cfg(target_arch = "x86_64")]
    {
        if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>() && is_x86_feature_detected!("avx512f") {
            return Isa::Avx512;
        }
    }
    Isa::Portable
}

fn lanes(isa: Isa) -> usize {
    if isa == Isa::Avx512 {
        16
    } else {
        8
    }
}

#[cfg(target_arch = "x86_64")]
fn as_f32<T: Scalar>(s: &[T]) -> &[f32] {
    assert_eq!(std::any::TypeId::of::<T>(), std::any::TypeId::of::<f32>());
    // SAFETY: T is f32, checked above.
    unsafe { std::slice::from_raw_parts(s.as_ptr().cast(), s.len()) }
}

#[cfg(target_arch = "x86_64")]
fn as_f32_mut<T: Scalar>(s: &mut [T]) -> &mut [f32] {
    assert_eq!(std::any::TypeId::of::<T>(), std::any::TypeId::of::<f32>());
    // SAFETY: T is f32, checked above.
    unsafe { std::slice::from_raw_parts_mut(s.as_mut_ptr().cast(), s.len()) }
}

/// Reusable scratch buffers.
#[derive(Default)]
pub(crate) struct Scratch<T> {
    pad: Vec<T>,
    grad: Vec<T>,
}

/// Adds the correlation of one item `x` (`[cin, d, h, w]`) with packed
/// weights into `out` (`[cout, d, h, w]`).
pub(crate) fn forward_item<T: Scalar>(x: &[T], geo: &Geometry, wpk: &[T], out: &mut [T], scratch: &mut Scratch<T>) {
    let isa = isa::<T>();
    pad_item(x, geo.cin, geo.dims, geo.kernel, lanes(isa), &mut scratch.pad);
    let xp = &scratch.pad;
    match isa {
        // SAFETY: AVX-512F was detected at runtime and T is f32.
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => unsafe { avx512::forward(as_f32(xp), geo, as_f32(wpk), as_f32_mut(out)) },
        _ => forward_lanes::<T, 8>(xp, geo, wpk, out),
    }
}

/// Accumulates the weight gradient of one item into `gw` (`[cout, cin, taps]`).
pub(crate) fn weight_grad_item<T: Scalar>(x: &[T], gy: &[T], geo: &Geometry, gw: &mut [T], scratch: &mut Scratch<T>) {
    let isa = isa::<T>();
    let l = lanes(isa);
    pad_item(x, geo.cin, geo.dims, geo.kernel, l, &mut scratch.pad);
    let [d, h, w] = geo.dims;
    let wr = round_up(w, l);
    scratch.grad.clear();
    scratch.grad.resize(geo.blocks() * OB * d * h * wr, T::zero());
    for (src, dst) in gy[..geo.cout * d * h * w].chunks(w).zip(scratch.grad.chunks_mut(wr)) {
        dst[..w].copy_from_slice(src);
    }
    let (xp, gyp) = (&scratch.pad, &scratch.grad);
    match isa {
        // SAFETY: AVX-512F was detected at runtime and T is f32.
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => unsafe { avx512::weight_grad(as_f32(xp), as_f32(gyp), geo, as_f32_mut(gw)) },
        _ => weight_grad_lanes::<T, 8>(xp, gyp, geo, gw),
    }
}

/// `[cout, cin, k...]` -> `[cin, cout, k...]` with every kernel reversed: the
/// input gradient is the forward correlation of the output gradient with it.
pub(crate) fn flipped_transpose<T: Scalar>(w: &[T], geo: &Geometry) -> Vec<T> {
    let kv = geo.taps();
    let mut out = vec![T::zero(); w.len()];
    for o in 0..geo.cout {
        for i in 0..geo.cin {
            let src = &w[(o * geo.cin + i) * kv..][..kv];
            let dst = &mut out[(i * geo.cout + o) * kv..][..kv];
            for (k, &v) in src.iter().enumerate() {
                dst[kv - 1 - k] = v;
            }
        }
    }
    out
}
