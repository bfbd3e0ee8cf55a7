//! Raw numeric kernels over flat row-major buffers.
//!
//! Everything here is shape-checked by the caller in `graph.rs`. The heavy
//! kernels are generic over [`Real`] so the same code runs as `f64` (gradient
//! checks, tests) or `f32` (training throughput).

use matrixmultiply::{dgemm, sgemm};

pub(crate) trait Real:
    Copy
    + Default
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = a·b + beta·c` with explicit element strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:ident) => {
        impl Real for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |r: usize, cidx: usize, rs: isize, cs: isize| {
                    (r as isize - 1) * rs + (cidx as isize - 1) * cs + 1
                };
                assert!(k == 0 || span(m, k, rsa, csa) as usize <= a.len());
                assert!(k == 0 || span(k, n, rsb, csb) as usize <= b.len());
                assert!(span(m, n, rsc, csc) as usize <= c.len());
                // SAFETY: the asserts above bound every index the kernel touches
                // (all strides used in this crate are non-negative).
                unsafe {
                    $gemm(
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
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, sgemm);
impl_real!(f64, dgemm);

pub(crate) fn cast<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64(x)).collect()
}

fn uncast<T: Real>(v: Vec<T>) -> Vec<f64> {
    v.into_iter().map(T::to_f64).collect()
}

/// Row-major `[m,k]·[k,n]`, optionally with either operand transposed in storage.
pub(crate) fn matmul<T: Real>(
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    a_trans: bool,
    b_trans: bool,
) -> Vec<f64> {
    let a: Vec<T> = cast(a);
    let b: Vec<T> = cast(b);
    let mut c = vec![T::default(); m * n];
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    T::gemm(
        m,
        k,
        n,
        &a,
        rsa,
        csa,
        &b,
        rsb,
        csb,
        T::default(),
        &mut c,
        n as isize,
        1,
    );
    uncast(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn out_hw(&self) -> usize {
        self.ho * self.wo
    }
}

impl ConvGeom {
    /// Output positions `o` along an axis of `extent` whose tap `t` lands
    /// inside the input, as a half-open range.
    fn valid_range(&self, t: usize, extent: usize, out: usize) -> (usize, usize) {
        // o·stride + t − pad ∈ [0, extent)
        let lo = self.pad.saturating_sub(t).div_ceil(self.stride);
        let hi = if extent + self.pad > t {
            ((extent + self.pad - t - 1) / self.stride + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Unfold `x` into a `[ci·k·k, ho·wo]` patch matrix (zero padding).
fn im2col<T: Real>(x: &[f64], g: &ConvGeom) -> Vec<T> {
    let ohw = g.out_hw();
    let mut cols = vec![T::default(); g.patch() * ohw];
    for ci in 0..g.ci {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..g.k {
                let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let drow = &mut dst[oy * g.wo + ox0..oy * g.wo + ox1];
                    let ix0 = ox0 * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, &v) in drow.iter_mut().zip(&src[ix0..]) {
                            *d = T::from_f64(v);
                        }
                    } else {
                        for (d, &v) in drow.iter_mut().zip(src[ix0..].iter().step_by(g.stride)) {
                            *d = T::from_f64(v);
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the input.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [f64]) {
    let ohw = g.out_hw();
    for ci in 0..g.ci {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
            for kx in 0..g.k {
                let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let drow = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * g.wo + ox0..oy * g.wo + ox1];
                    let ix0 = ox0 * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, v) in drow[ix0..].iter_mut().zip(srow) {
                            *d += v.to_f64();
                        }
                    } else {
                        for (d, v) in drow[ix0..].iter_mut().step_by(g.stride).zip(srow) {
                            *d += v.to_f64();
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    g: &ConvGeom,
) -> Vec<f64> {
    let cols: Vec<T> = if g.is_pointwise() {
        cast(x)
    } else {
        im2col(x, g)
    };
    let wt: Vec<T> = cast(w);
    let ohw = g.out_hw();
    let mut y = vec![T::default(); g.co * ohw];
    let kk = g.patch();
    T::gemm(
        g.co,
        kk,
        ohw,
        &wt,
        kk as isize,
        1,
        &cols,
        ohw as isize,
        1,
        T::default(),
        &mut y,
        ohw as isize,
        1,
    );
    let mut y = uncast(y);
    if let Some(b) = b {
        for (row, &bias) in y.chunks_mut(ohw).zip(b) {
            row.iter_mut().for_each(|v| *v += bias);
        }
    }
    y
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Vec<f64>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads {
    let ohw = g.out_hw();
    let kk = g.patch();
    let db = dy.chunks(ohw).map(|r| r.iter().sum()).collect();
    let dyt: Vec<T> = cast(dy);

    let dw = need_dw.then(|| {
        let cols: Vec<T> = if g.is_pointwise() {
            cast(x)
        } else {
            im2col(x, g)
        };
        // dW[co, kk] = dY[co, ohw] · colsᵀ
        let mut dw = vec![T::default(); g.co * kk];
        T::gemm(
            g.co,
            ohw,
            kk,
            &dyt,
            ohw as isize,
            1,
            &cols,
            1,
            ohw as isize,
            T::default(),
            &mut dw,
            kk as isize,
            1,
        );
        uncast(dw)
    });

    let dx = need_dx.then(|| {
        let wt: Vec<T> = cast(w);
        // dCols[kk, ohw] = Wᵀ · dY
        let mut dcols = vec![T::default(); kk * ohw];
        T::gemm(
            kk,
            g.co,
            ohw,
            &wt,
            1,
            kk as isize,
            &dyt,
            ohw as isize,
            1,
            T::default(),
            &mut dcols,
            ohw as isize,
            1,
        );
        if g.is_pointwise() {
            uncast(dcols)
        } else {
            let mut dx = vec![0.0; g.ci * g.h * g.w];
            col2im(&dcols, g, &mut dx);
            dx
        }
    });

    ConvGrads { dx, dw, db }
}

/// Per-axis interpolation table for half-pixel (align-corners = false) bilinear resizing.
#[derive(Clone, Debug)]
pub(crate) struct LerpAxis {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

pub(crate) fn lerp_axis(input: usize, output: usize) -> LerpAxis {
    let scale = input as f64 / output as f64;
    let mut lo = Vec::with_capacity(output);
    let mut hi = Vec::with_capacity(output);
    let mut frac = Vec::with_capacity(output);
    for d in 0..output {
        let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
        lo.push(i0);
        hi.push(i1);
        frac.push(src - i0 as f64);
    }
    LerpAxis { lo, hi, frac }
}

pub(crate) fn resize_forward(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ay = lerp_axis(h, oh);
    let ax = lerp_axis(w, ow);
    let mut y = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut y[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let (r0, r1, fy) = (ay.lo[oy] * w, ay.hi[oy] * w, ay.frac[oy]);
            for ox in 0..ow {
                let (c0, c1, fx) = (ax.lo[ox], ax.hi[ox], ax.frac[ox]);
                let top = src[r0 + c0] * (1.0 - fx) + src[r0 + c1] * fx;
                let bot = src[r1 + c0] * (1.0 - fx) + src[r1 + c1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    y
}

pub(crate) fn resize_backward(
    dy: &[f64],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ay = lerp_axis(h, oh);
    let ax = lerp_axis(w, ow);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let g = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        let d = &mut dx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (r0, r1, fy) = (ay.lo[oy] * w, ay.hi[oy] * w, ay.frac[oy]);
            for ox in 0..ow {
                let (c0, c1, fx) = (ax.lo[ox], ax.hi[ox], ax.frac[ox]);
                let v = g[oy * ow + ox];
                d[r0 + c0] += v * (1.0 - fy) * (1.0 - fx);
                d[r0 + c1] += v * (1.0 - fy) * fx;
                d[r1 + c0] += v * fy * (1.0 - fx);
                d[r1 + c1] += v * fy * fx;
            }
        }
    }
    dx
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeom {
    fn in_range(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

/// Box mean with a fixed `k²` divisor; padded cells count as zeros.
pub(crate) fn avgpool_forward(x: &[f64], g: &PoolGeom) -> Vec<f64> {
    let norm = 1.0 / (g.k * g.k) as f64;
    let mut out = vec![0.0; g.c * g.ho * g.wo];
    let mut rows = vec![0.0; g.h * g.wo];
    for ch in 0..g.c {
        let src = &x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        rows.iter_mut().for_each(|v| *v = 0.0);
        for iy in 0..g.h {
            for ox in 0..g.wo {
                let mut s = 0.0;
                for kx in 0..g.k {
                    if let Some(ix) = g.in_range(ox, kx, g.w) {
                        s += src[iy * g.w + ix];
                    }
                }
                rows[iy * g.wo + ox] = s;
            }
        }
        let dst = &mut out[ch * g.ho * g.wo..(ch + 1) * g.ho * g.wo];
        for oy in 0..g.ho {
            for ky in 0..g.k {
                if let Some(iy) = g.in_range(oy, ky, g.h) {
                    for ox in 0..g.wo {
                        dst[oy * g.wo + ox] += rows[iy * g.wo + ox];
                    }
                }
            }
            dst[oy * g.wo..(oy + 1) * g.wo]
                .iter_mut()
                .for_each(|v| *v *= norm);
        }
    }
    out
}

pub(crate) fn avgpool_backward(dy: &[f64], g: &PoolGeom) -> Vec<f64> {
    let norm = 1.0 / (g.k * g.k) as f64;
    let mut dx = vec![0.0; g.c * g.h * g.w];
    let mut rows = vec![0.0; g.h * g.wo];
    for ch in 0..g.c {
        let src = &dy[ch * g.ho * g.wo..(ch + 1) * g.ho * g.wo];
        rows.iter_mut().for_each(|v| *v = 0.0);
        for oy in 0..g.ho {
            for ky in 0..g.k {
                if let Some(iy) = g.in_range(oy, ky, g.h) {
                    for ox in 0..g.wo {
                        rows[iy * g.wo + ox] += src[oy * g.wo + ox];
                    }
                }
            }
        }
        let dst = &mut dx[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for iy in 0..g.h {
            for ox in 0..g.wo {
                let v = rows[iy * g.wo + ox] * norm;
                for kx in 0..g.k {
                    if let Some(ix) = g.in_range(ox, kx, g.w) {
                        dst[iy * g.w + ix] += v;
                    }
                }
            }
        }
    }
    dx
}

/// Separable filtering keeping only fully covered windows: output is `(h−k+1)×(w−k+1)`.
pub(crate) fn separable_valid_forward(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
) -> Vec<f64> {
    let k = kernel.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut out = vec![0.0; c * oh * ow];
    let mut tmp = vec![0.0; h * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for x0 in 0..ow {
                tmp[y * ow + x0] = kernel
                    .iter()
                    .zip(&row[x0..x0 + k])
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y0 in 0..oh {
            let drow = &mut dst[y0 * ow..(y0 + 1) * ow];
            for (i, &kv) in kernel.iter().enumerate() {
                let trow = &tmp[(y0 + i) * ow..(y0 + i + 1) * ow];
                drow.iter_mut().zip(trow).for_each(|(d, t)| *d += kv * t);
            }
        }
    }
    out
}

pub(crate) fn separable_valid_backward(
    dy: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
) -> Vec<f64> {
    let k = kernel.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut dx = vec![0.0; c * h * w];
    let mut dtmp = vec![0.0; h * ow];
    for ch in 0..c {
        let g = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        dtmp.iter_mut().for_each(|v| *v = 0.0);
        for y0 in 0..oh {
            let grow = &g[y0 * ow..(y0 + 1) * ow];
            for (i, &kv) in kernel.iter().enumerate() {
                let trow = &mut dtmp[(y0 + i) * ow..(y0 + i + 1) * ow];
                trow.iter_mut().zip(grow).for_each(|(t, d)| *t += kv * d);
            }
        }
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x0 in 0..ow {
                let v = dtmp[y * ow + x0];
                for (j, &kv) in kernel.iter().enumerate() {
                    dst[y * w + x0 + j] += kv * v;
                }
            }
        }
    }
    dx
}

/// Geometry of grouped dynamic filtering: `x` is `C×H×W`, filters are `G×H×W×K×K`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct DynGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub groups: usize,
    pub k: usize,
}

impl DynGeom {
    /// Offsets `(u, v)` are enumerated as tap indices `0..k`, shifted by `k/2`.
    #[inline]
    fn tap(&self, y: usize, x: usize, t: usize, s: usize) -> Option<usize> {
        let r = (self.k / 2) as isize;
        let iy = y as isize + t as isize - r;
        let ix = x as isize + s as isize - r;
        (iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w)
            .then(|| iy as usize * self.w + ix as usize)
    }
}

pub(crate) fn dynamic_filter_forward(x: &[f64], f: &[f64], g: &DynGeom) -> Vec<f64> {
    let hw = g.h * g.w;
    let kk = g.k * g.k;
    let per_group = g.c / g.groups;
    let mut y = vec![0.0; g.c * hw];
    for c in 0..g.c {
        let grp = c / per_group;
        let plane = &x[c * hw..(c + 1) * hw];
        let fgrp = &f[grp * hw * kk..(grp + 1) * hw * kk];
        for py in 0..g.h {
            for px in 0..g.w {
                let p = py * g.w + px;
                let taps = &fgrp[p * kk..(p + 1) * kk];
                let mut acc = 0.0;
                for t in 0..g.k {
                    for s in 0..g.k {
                        if let Some(q) = g.tap(py, px, t, s) {
                            acc += taps[t * g.k + s] * plane[q];
                        }
                    }
                }
                y[c * hw + p] = acc;
            }
        }
    }
    y
}

pub(crate) fn dynamic_filter_backward(
    x: &[f64],
    f: &[f64],
    dy: &[f64],
    g: &DynGeom,
) -> (Vec<f64>, Vec<f64>) {
    let hw = g.h * g.w;
    let kk = g.k * g.k;
    let per_group = g.c / g.groups;
    let mut dx = vec![0.0; x.len()];
    let mut df = vec![0.0; f.len()];
    for c in 0..g.c {
        let grp = c / per_group;
        for py in 0..g.h {
            for px in 0..g.w {
                let p = py * g.w + px;
                let gy = dy[c * hw + p];
                let base = (grp * hw + p) * kk;
                for t in 0..g.k {
                    for s in 0..g.k {
                        if let Some(q) = g.tap(py, px, t, s) {
                            df[base + t * g.k + s] += gy * x[c * hw + q];
                            dx[c * hw + q] += gy * f[base + t * g.k + s];
                        }
                    }
                }
            }
        }
    }
    (dx, df)
}

/// Neumaier-compensated sum; keeps reductions over large maps accurate to
/// a few ulps of the result.
pub fn compensated_sum(xs: &[f64]) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}
