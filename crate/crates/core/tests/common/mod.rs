//! Independent reference implementations shared by the oracle suites and
//! the acceptance runner. Everything here is a direct loop over the
//! definition, kept separate from the library code paths.

#![allow(clippy::needless_range_loop)]
#![allow(dead_code)]

use mmft::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: usize = 8;
pub const W: usize = 8;

pub fn random_pair(seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fg = rng.random_range(0.1..0.7);
    let gt = Tensor::from_fn([1, H, W], |_| rng.random_bool(fg) as u8 as f64);
    // mix exact threshold levels with arbitrary reals
    let pred = Tensor::from_fn([1, H, W], |_| {
        if rng.random_bool(0.3) {
            rng.random_range(0..=255) as f64 / 255.0
        } else {
            rng.random::<f64>()
        }
    });
    (pred, gt)
}

/// A pair whose ground truth has both classes.
pub fn mixed_pair(seed: u64) -> (Tensor, Tensor) {
    (0..)
        .map(|k| random_pair(seed * 1000 + k))
        .find(|(_, g)| g.data().contains(&1.0) && g.data().contains(&0.0))
        .unwrap()
}

pub fn binarize(pred: &Tensor, i: usize) -> Vec<f64> {
    let t = i as f64 / 255.0;
    pred.data()
        .iter()
        .map(|&p| if p >= t { 1.0 } else { 0.0 })
        .collect()
}

pub fn oracle_f_max(pred: &Tensor, gt: &Tensor, beta2: f64) -> f64 {
    let mut best = 0.0f64;
    for i in 0..256 {
        let b = binarize(pred, i);
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for (&bv, &g) in b.iter().zip(gt.data()) {
            match (bv == 1.0, g == 1.0) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                _ => {}
            }
        }
        let precision = if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) };
        let recall = tp / (tp + fneg);
        let f = if beta2 * precision + recall == 0.0 {
            0.0
        } else {
            (1.0 + beta2) * precision * recall / (beta2 * precision + recall)
        };
        best = best.max(f);
    }
    best
}

/// Mann–Whitney statistic on scores quantized to the threshold grid, in
/// integer half-units so the result is exact before the final division.
pub fn oracle_auc(pred: &Tensor, gt: &Tensor) -> f64 {
    let q: Vec<usize> = pred
        .data()
        .iter()
        .map(|&p| (0..256).filter(|&i| p >= i as f64 / 255.0).count())
        .collect();
    let (mut twice_u, mut pairs) = (0u64, 0u64);
    for (a, &ga) in gt.data().iter().enumerate() {
        for (b, &gb) in gt.data().iter().enumerate() {
            if ga == 1.0 && gb == 0.0 {
                pairs += 1;
                if q[a] > q[b] {
                    twice_u += 2;
                } else if q[a] == q[b] {
                    twice_u += 1;
                }
            }
        }
    }
    twice_u as f64 / (2 * pairs) as f64
}

pub fn oracle_e_at(b: &[f64], gt: &[f64]) -> f64 {
    let n = gt.len() as f64;
    let fg: f64 = gt.iter().sum();
    if fg == 0.0 {
        return b.iter().map(|v| 1.0 - v).sum::<f64>() / n;
    }
    if fg == n {
        return b.iter().sum::<f64>() / n;
    }
    let mb = b.iter().sum::<f64>() / n;
    let mg = fg / n;
    let mut total = 0.0;
    for (&bv, &g) in b.iter().zip(gt) {
        let (dp, dg) = (bv - mb, g - mg);
        let phi = 2.0 * dp * dg / (dp * dp + dg * dg + f64::EPSILON);
        total += (1.0 + phi) * (1.0 + phi) / 4.0;
    }
    total / n
}

pub fn oracle_e_max(pred: &Tensor, gt: &Tensor) -> f64 {
    (0..256)
        .map(|i| oracle_e_at(&binarize(pred, i), gt.data()))
        .fold(0.0, f64::max)
}

pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn oracle_s(pred: &Tensor, gt: &Tensor) -> f64 {
    let (p, g) = (pred.data(), gt.data());
    let n = g.len() as f64;
    let mg = g.iter().sum::<f64>() / n;
    if mg == 0.0 {
        return 1.0 - p.iter().sum::<f64>() / n;
    }
    if mg == 1.0 {
        return p.iter().sum::<f64>() / n;
    }
    // object term
    let fg_vals: Vec<f64> = (0..p.len())
        .filter(|&i| g[i] == 1.0)
        .map(|i| p[i])
        .collect();
    let bg_vals: Vec<f64> = (0..p.len())
        .filter(|&i| g[i] == 0.0)
        .map(|i| 1.0 - p[i])
        .collect();
    let obj = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        2.0 * m / (m * m + 1.0 + sample_std(v) + f64::EPSILON)
    };
    let s_obj = mg * obj(&fg_vals) + (1.0 - mg) * obj(&bg_vals);

    // region term
    let coords: Vec<(f64, f64)> = (0..g.len())
        .filter(|&i| g[i] == 1.0)
        .map(|i| ((i / W) as f64, (i % W) as f64))
        .collect();
    let cy = (coords.iter().map(|c| c.0).sum::<f64>() / coords.len() as f64).round_ties_even()
        as usize
        + 1;
    let cx = (coords.iter().map(|c| c.1).sum::<f64>() / coords.len() as f64).round_ties_even()
        as usize
        + 1;
    let (cx, cy) = (cx.min(W), cy.min(H));
    let quad = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>| -> (f64, f64) {
        let idx: Vec<usize> = rows
            .flat_map(|r| cols.clone().map(move |c| r * W + c))
            .collect();
        if idx.is_empty() {
            return (0.0, 0.0);
        }
        let k = idx.len() as f64;
        let x = idx.iter().map(|&i| p[i]).sum::<f64>() / k;
        let y = idx.iter().map(|&i| g[i]).sum::<f64>() / k;
        let d = if idx.len() > 1 { k - 1.0 } else { 1.0 };
        let sx = idx.iter().map(|&i| (p[i] - x).powi(2)).sum::<f64>() / d;
        let sy = idx.iter().map(|&i| (g[i] - y).powi(2)).sum::<f64>() / d;
        let sxy = idx.iter().map(|&i| (p[i] - x) * (g[i] - y)).sum::<f64>() / d;
        let a = 4.0 * x * y * sxy;
        let b = (x * x + y * y) * (sx + sy);
        let ssim = if a != 0.0 {
            a / (b + f64::EPSILON)
        } else if b == 0.0 {
            1.0
        } else {
            0.0
        };
        (k / n, ssim)
    };
    let qs = [
        quad(0..cy, 0..cx),
        quad(0..cy, cx..W),
        quad(cy..H, 0..cx),
        quad(cy..H, cx..W),
    ];
    let s_reg: f64 = qs.iter().map(|(w, s)| w * s).sum();
    (0.5 * s_obj + 0.5 * s_reg).max(0.0)
}

/// Weighted F with every linear step as an explicit dense matrix.
pub fn oracle_weighted_f(pred: &Tensor, gt: &Tensor) -> f64 {
    let (p, g) = (pred.data(), gt.data());
    let n = g.len();
    let e: Vec<f64> = (0..n).map(|i| (p[i] - g[i]).abs()).collect();
    // nearest foreground by exhaustive search; ties to the lowest index
    let mut dist = vec![0.0; n];
    let mut near = vec![0usize; n];
    for i in 0..n {
        if g[i] == 1.0 {
            near[i] = i;
            continue;
        }
        let (yi, xi) = ((i / W) as f64, (i % W) as f64);
        let mut best = (f64::INFINITY, 0);
        for j in 0..n {
            if g[j] == 1.0 {
                let d = ((yi - (j / W) as f64).powi(2) + (xi - (j % W) as f64).powi(2)).sqrt();
                if d < best.0 {
                    best = (d, j);
                }
            }
        }
        dist[i] = best.0;
        near[i] = best.1;
    }
    // propagation matrix Et = P·E
    let mut prop = vec![vec![0.0; n]; n];
    for i in 0..n {
        prop[i][near[i]] = 1.0;
    }
    let et: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| prop[i][j] * e[j]).sum())
        .collect();
    // blur matrix for a zero-padded 7×7 σ=5 Gaussian
    let mut kern = [[0.0; 7]; 7];
    let mut ksum = 0.0;
    for (a, row) in kern.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (a as f64 - 3.0, b as f64 - 3.0);
            *v = (-(dx * dx + dy * dy) / (2.0 * 25.0)).exp();
            ksum += *v;
        }
    }
    let mut blur = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let dy = (j / W) as isize - (i / W) as isize;
            let dx = (j % W) as isize - (i % W) as isize;
            if dy.abs() <= 3 && dx.abs() <= 3 {
                blur[i][j] = kern[(dy + 3) as usize][(dx + 3) as usize] / ksum;
            }
        }
    }
    let ea: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| blur[i][j] * et[j]).sum())
        .collect();
    let ew: Vec<f64> = (0..n)
        .map(|i| {
            if g[i] == 1.0 {
                e[i].min(ea[i])
            } else {
                e[i] * (2.0 - (0.5f64.ln() / 5.0 * dist[i]).exp())
            }
        })
        .collect();
    let pos: f64 = g.iter().sum();
    let fg_err: f64 = (0..n).filter(|&i| g[i] == 1.0).map(|i| ew[i]).sum();
    let bg_err: f64 = (0..n).filter(|&i| g[i] == 0.0).map(|i| ew[i]).sum();
    let tpw = pos - fg_err;
    let r = 1.0 - fg_err / pos;
    let prec = tpw / (tpw + bg_err + f64::EPSILON);
    2.0 * r * prec / (r + prec + f64::EPSILON)
}

/// `[rmse, rmse_log, abs_rel, sq_rel, δ<1.25, δ<1.25², δ<1.25³]` over valid pixels.
pub fn oracle_depth(pred: &Tensor, gt: &Tensor, valid: &Tensor, eps: f64) -> [f64; 7] {
    let (mut n, mut se, mut sl, mut ar, mut sr, mut d) = (0.0, 0.0, 0.0, 0.0, 0.0, [0.0; 3]);
    for i in 0..gt.numel() {
        if valid.data()[i] == 0.0 {
            continue;
        }
        let p = pred.data()[i].max(eps);
        let g = gt.data()[i].max(eps);
        n += 1.0;
        se += (p - g) * (p - g);
        sl += (p.ln() - g.ln()) * (p.ln() - g.ln());
        ar += (p - g).abs() / g;
        sr += (p - g) * (p - g) / g;
        let ratio = if p > g { p / g } else { g / p };
        for (k, c) in d.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *c += 1.0;
            }
        }
    }
    [
        (se / n).sqrt(),
        (sl / n).sqrt(),
        ar / n,
        sr / n,
        d[0] / n,
        d[1] / n,
        d[2] / n,
    ]
}

/// `out[c,y,x] = Σ_{u,v} f[c/(C/G), y, x, u, v] · x[c, y+u−⌊K/2⌋, x+v−⌊K/2⌋]`, zero outside.
pub fn dynamic_filter_loops(x: &Tensor, f: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (groups, k) = (f.shape()[0], f.shape()[3]);
    let per_group = c / groups;
    let r = (k / 2) as isize;
    let mut out = Tensor::zeros([c, h, w]);
    for ch in 0..c {
        let grp = ch / per_group;
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for u in 0..k {
                    for v in 0..k {
                        let sy = y as isize + u as isize - r;
                        let sx = xx as isize + v as isize - r;
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        let fv = f.data()[(((grp * h + y) * w + xx) * k + u) * k + v];
                        acc += fv * x.data()[(ch * h + sy as usize) * w + sx as usize];
                    }
                }
                out.data_mut()[(ch * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i * m + j] += a[i * k + t] * b[t * m + j];
            }
        }
    }
    out
}

/// Multi-head attention written out head by head. Weights are `d_m×(nh·dk)`
/// for q/k/v and `(nh·dk)×d_m` for the output.
#[allow(clippy::too_many_arguments)]
pub fn mhsa_loops(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    wo: &[f64],
    n: usize,
    d_m: usize,
    nh: usize,
    dk: usize,
) -> Vec<f64> {
    let inner = nh * dk;
    let qp = matmul(q, wq, n, d_m, inner);
    let kp = matmul(k, wk, n, d_m, inner);
    let vp = matmul(v, wv, n, d_m, inner);
    let mut cat = vec![0.0; n * inner];
    for head in 0..nh {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    (0..dk)
                        .map(|t| qp[i * inner + head * dk + t] * kp[j * inner + head * dk + t])
                        .sum::<f64>()
                        / (dk as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..dk {
                cat[i * inner + head * dk + t] = (0..n)
                    .map(|j| e[j] / z * vp[j * inner + head * dk + t])
                    .sum();
            }
        }
    }
    matmul(&cat, wo, n, inner, d_m)
}

/// Dilation and erosion by per-pixel window scan; outside cells are 0.
pub fn window_morph(mask: &Tensor, m: usize) -> (Tensor, Tensor) {
    let (h, w) = (mask.shape()[1], mask.shape()[2]);
    let r = (m / 2) as isize;
    let at = |y: isize, x: isize| {
        y >= 0
            && x >= 0
            && y < h as isize
            && x < w as isize
            && mask.data()[y as usize * w + x as usize] == 1.0
    };
    let mut dil = Tensor::zeros([1, h, w]);
    let mut ero = Tensor::zeros([1, h, w]);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut any = false;
            let mut all = true;
            for dy in -r..=r {
                for dx in -r..=r {
                    let v = at(y + dy, x + dx);
                    any |= v;
                    all &= v;
                }
            }
            dil.data_mut()[y as usize * w + x as usize] = any as u8 as f64;
            ero.data_mut()[y as usize * w + x as usize] = all as u8 as f64;
        }
    }
    (dil, ero)
}

pub fn random_mask(rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = (rng.random_range(1..24), rng.random_range(1..24));
    let density: f64 = rng.random_range(0.05..0.95);
    Tensor::from_fn([1, h, w], |_| rng.random_bool(density) as u8 as f64)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}
