//! Saliency and depth evaluation metrics.
//!
//! Saliency maps are compared against binary ground truth with the usual
//! 256-level threshold sweep `t_i = i/255`, a pixel counting as foreground
//! when `pred ≥ t_i`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const THRESHOLDS: usize = 256;
/// `β²` of the max F-measure.
pub const F_BETA2: f64 = 0.3;
/// `α` of the S-measure.
pub const S_ALPHA: f64 = 0.5;
/// Floor applied to depth values before ratios and logs.
pub const DEPTH_EPS: f64 = 1e-6;
const EPS: f64 = f64::EPSILON;

/// Report keys in output order.
pub const SALIENCY_KEYS: [&str; 6] = [
    "f_max",
    "f_weighted",
    "s_measure",
    "e_measure",
    "mae",
    "auc",
];
pub const DEPTH_KEYS: [&str; 7] = ["rmse", "rmse_log", "abs_rel", "sq_rel", "p1", "p2", "p3"];

fn check_pair(op: &'static str, pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(op, pred.shape(), gt.shape()));
    }
    Ok(())
}

fn check_binary(op: &'static str, gt: &Tensor) -> Result<()> {
    if gt.data().iter().all(|&v| v == 0.0 || v == 1.0) {
        Ok(())
    } else {
        Err(Error::invalid(op, "ground truth is not binary"))
    }
}

/// Number of thresholds `i/255` (i = 0..=255) that `p` reaches.
fn level(p: f64) -> usize {
    let mut i = (p * 255.0).floor().clamp(0.0, 255.0) as usize;
    // settle rounding at bin edges against the exact comparison
    while i < 255 && (i + 1) as f64 / 255.0 <= p {
        i += 1;
    }
    while i > 0 && (i as f64 / 255.0) > p {
        i -= 1;
    }
    if p < 0.0 {
        0
    } else {
        i + 1
    }
}

/// Per-threshold `(TP, FP)` counts and the foreground size.
struct Sweep {
    tp: [f64; THRESHOLDS],
    fp: [f64; THRESHOLDS],
    pos: f64,
    neg: f64,
}

fn sweep(pred: &Tensor, gt: &Tensor) -> Sweep {
    let mut hist_fg = [0.0; THRESHOLDS + 1];
    let mut hist_bg = [0.0; THRESHOLDS + 1];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let l = level(p);
        if g == 1.0 {
            hist_fg[l] += 1.0;
        } else {
            hist_bg[l] += 1.0;
        }
    }
    // predicted positive at threshold i ⇔ level > i
    let mut tp = [0.0; THRESHOLDS];
    let mut fp = [0.0; THRESHOLDS];
    let (mut cf, mut cb) = (0.0, 0.0);
    for i in (0..THRESHOLDS).rev() {
        cf += hist_fg[i + 1];
        cb += hist_bg[i + 1];
        tp[i] = cf;
        fp[i] = cb;
    }
    let pos = hist_fg.iter().sum();
    let neg = hist_bg.iter().sum();
    Sweep { tp, fp, pos, neg }
}

pub fn mae(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair("mae", pred, gt)?;
    let n = pred.numel() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / n)
}

/// `F = (1+β²)PR / (β²P + R)`; precision is 1 when nothing is predicted.
pub fn f_measure(tp: f64, fp: f64, pos: f64, beta2: f64) -> f64 {
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 1.0 };
    let r = if pos > 0.0 { tp / pos } else { 0.0 };
    let den = beta2 * p + r;
    if den > 0.0 {
        (1.0 + beta2) * p * r / den
    } else {
        0.0
    }
}

/// Best F-measure over the threshold sweep.
pub fn f_beta_max(pred: &Tensor, gt: &Tensor, beta2: f64) -> Result<f64> {
    check_pair("f_beta_max", pred, gt)?;
    check_binary("f_beta_max", gt)?;
    let s = sweep(pred, gt);
    if s.pos == 0.0 {
        return Err(Error::invalid(
            "f_beta_max",
            "ground truth has no foreground",
        ));
    }
    Ok((0..THRESHOLDS)
        .map(|i| f_measure(s.tp[i], s.fp[i], s.pos, beta2))
        .fold(0.0, f64::max))
}

/// Area under the ROC curve through the 256 threshold points plus `(0,0)`.
///
/// Every trapezoid is a product of integer counts, so the area is
/// accumulated exactly and divided once.
pub fn auc(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair("auc", pred, gt)?;
    check_binary("auc", gt)?;
    let s = sweep(pred, gt);
    if s.pos == 0.0 || s.neg == 0.0 {
        return Err(Error::invalid(
            "auc",
            "ground truth must contain both classes",
        ));
    }
    let mut twice_area = 0.0;
    for i in 0..THRESHOLDS {
        let (fp_next, tp_next) = if i + 1 < THRESHOLDS {
            (s.fp[i + 1], s.tp[i + 1])
        } else {
            (0.0, 0.0)
        };
        twice_area += (s.fp[i] - fp_next) * (s.tp[i] + tp_next);
    }
    Ok(twice_area / (2.0 * s.pos * s.neg))
}

fn plane(t: &Tensor) -> (usize, usize, &[f64]) {
    let (h, w) = t.hw();
    (h, w, t.data())
}

/// Mean over `pred` where `mask` holds, and the sample standard deviation.
fn masked_mean_std(pred: &[f64], mask: impl Fn(usize) -> bool) -> (f64, f64, usize) {
    let vals: Vec<f64> = pred
        .iter()
        .enumerate()
        .filter(|(i, _)| mask(*i))
        .map(|(_, &v)| v)
        .collect();
    let n = vals.len();
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = vals.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, std, n)
}

fn s_object(pred: &[f64], gt: &[f64]) -> f64 {
    let score = |fg: bool| {
        let (x, sigma, n) = masked_mean_std(
            &pred
                .iter()
                .zip(gt)
                .map(|(&p, &g)| if fg { p * g } else { (1.0 - p) * (1.0 - g) })
                .collect::<Vec<_>>(),
            |i| (gt[i] == 1.0) == fg,
        );
        if n == 0 {
            0.0
        } else {
            2.0 * x / (x * x + 1.0 + sigma + EPS)
        }
    };
    let u = gt.iter().sum::<f64>() / gt.len() as f64;
    u * score(true) + (1.0 - u) * score(false)
}

/// Structural similarity of one quadrant, as used by the region term.
fn quadrant_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let x = pred.iter().sum::<f64>() / n;
    let y = gt.iter().sum::<f64>() / n;
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        sx += (p - x).powi(2);
        sy += (g - y).powi(2);
        sxy += (p - x) * (g - y);
    }
    let d = if n > 1.0 { n - 1.0 } else { 1.0 };
    let (sx, sy, sxy) = (sx / d, sy / d, sxy / d);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Split point `(x, y)`: the rounded foreground centroid plus one, or the
/// image center when there is no foreground.
fn centroid(gt: &[f64], h: usize, w: usize) -> (usize, usize) {
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
    for (i, &g) in gt.iter().enumerate() {
        if g == 1.0 {
            sy += (i / w) as f64;
            sx += (i % w) as f64;
            n += 1.0;
        }
    }
    if n == 0.0 {
        (
            (w as f64 / 2.0).round_ties_even() as usize,
            (h as f64 / 2.0).round_ties_even() as usize,
        )
    } else {
        (
            (sx / n).round_ties_even() as usize + 1,
            (sy / n).round_ties_even() as usize + 1,
        )
    }
}

fn s_region(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    let (x, y) = centroid(gt, h, w);
    let (x, y) = (x.min(w), y.min(h));
    let area = (h * w) as f64;
    let mut score = 0.0;
    for (r0, r1) in [(0, y), (y, h)] {
        for (c0, c1) in [(0, x), (x, w)] {
            if r1 <= r0 || c1 <= c0 {
                continue;
            }
            let mut p = Vec::with_capacity((r1 - r0) * (c1 - c0));
            let mut g = Vec::with_capacity(p.capacity());
            for r in r0..r1 {
                p.extend_from_slice(&pred[r * w + c0..r * w + c1]);
                g.extend_from_slice(&gt[r * w + c0..r * w + c1]);
            }
            score += (p.len() as f64 / area) * quadrant_ssim(&p, &g);
        }
    }
    score
}

/// Structure measure `α·S_object + (1−α)·S_region`.
pub fn s_measure(pred: &Tensor, gt: &Tensor, alpha: f64) -> Result<f64> {
    check_pair("s_measure", pred, gt)?;
    check_binary("s_measure", gt)?;
    let (h, w, g) = plane(gt);
    let p = pred.data();
    let n = g.len() as f64;
    let y = g.iter().sum::<f64>() / n;
    let mean_p = p.iter().sum::<f64>() / n;
    Ok(if y == 0.0 {
        1.0 - mean_p
    } else if y == 1.0 {
        mean_p
    } else {
        (alpha * s_object(p, g) + (1.0 - alpha) * s_region(p, g, h, w)).max(0.0)
    })
}

/// Enhanced alignment of a binary prediction with counts `(tp, fp)`.
///
/// Every pixel falls in one of four (pred, gt) classes, and the alignment
/// term is constant within a class, so the mean is a weighted sum of four
/// values. Normalized by the pixel count.
fn e_measure_counts(tp: f64, fp: f64, pos: f64, n: f64) -> f64 {
    let pred_fg = tp + fp;
    if pos == 0.0 {
        return (n - pred_fg) / n;
    }
    if pos == n {
        return pred_fg / n;
    }
    let fn_ = pos - tp;
    let tn = n - pred_fg - fn_;
    let mp = pred_fg / n;
    let mg = pos / n;
    let part = |a: f64, b: f64| {
        let align = 2.0 * a * b / (a * a + b * b + EPS);
        (align + 1.0).powi(2) / 4.0
    };
    (tp * part(1.0 - mp, 1.0 - mg)
        + fp * part(1.0 - mp, -mg)
        + fn_ * part(-mp, 1.0 - mg)
        + tn * part(-mp, -mg))
        / n
}

/// E-measure of the prediction binarized at threshold index `i`.
pub fn e_measure_at(pred: &Tensor, gt: &Tensor, i: usize) -> Result<f64> {
    check_pair("e_measure", pred, gt)?;
    check_binary("e_measure", gt)?;
    let s = sweep(pred, gt);
    Ok(e_measure_counts(
        s.tp[i.min(THRESHOLDS - 1)],
        s.fp[i.min(THRESHOLDS - 1)],
        s.pos,
        pred.numel() as f64,
    ))
}

/// Maximum E-measure over the threshold sweep.
pub fn e_measure(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair("e_measure", pred, gt)?;
    check_binary("e_measure", gt)?;
    let s = sweep(pred, gt);
    let n = pred.numel() as f64;
    Ok((0..THRESHOLDS)
        .map(|i| e_measure_counts(s.tp[i], s.fp[i], s.pos, n))
        .fold(0.0, f64::max))
}

/// For every background pixel, the squared distance to and the index of the
/// nearest foreground pixel (ties go to the smallest row-major index).
/// Foreground pixels map to themselves.
pub fn nearest_foreground(gt: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    // per column: nearest foreground row, preferring the one above on ties
    let mut col_row: Vec<Option<usize>> = vec![None; h * w];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if gt[y * w + x] == 1.0 {
                last = Some(y);
            }
            col_row[y * w + x] = last;
        }
        let mut next: Option<usize> = None;
        for y in (0..h).rev() {
            if gt[y * w + x] == 1.0 {
                next = Some(y);
            }
            let slot = &mut col_row[y * w + x];
            if let Some(nb) = next {
                match *slot {
                    Some(a) if y - a <= nb - y => {}
                    _ => *slot = Some(nb),
                }
            }
        }
    }
    let mut dist = vec![0.0; h * w];
    let mut idx = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if gt[i] == 1.0 {
                idx[i] = i;
                continue;
            }
            let mut best: Option<(usize, usize, usize)> = None; // (d², row, col)
            for xc in 0..w {
                if let Some(r) = col_row[y * w + xc] {
                    let d2 = r.abs_diff(y).pow(2) + xc.abs_diff(x).pow(2);
                    let cand = (d2, r, xc);
                    if best.is_none_or(|b| cand < b) {
                        best = Some(cand);
                    }
                }
            }
            let (d2, r, c) = best.expect("foreground exists");
            dist[i] = d2 as f64;
            idx[i] = r * w + c;
        }
    }
    (dist, idx)
}

/// 7×7 Gaussian with σ = 5, normalized.
fn gauss7() -> [[f64; 7]; 7] {
    let mut k = [[0.0; 7]; 7];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (y, x) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(x * x + y * y) / 50.0).exp();
            total += *v;
        }
    }
    k.iter_mut().flatten().for_each(|v| *v /= total);
    k
}

/// Weighted F-measure (β² = 1): errors are spread to background pixels
/// from their nearest foreground pixel, smoothed by a 7×7 Gaussian (σ 5,
/// zero padding), capped by the raw error on the foreground, and weighted
/// by `2 − 0.5^(dist/5)` on the background.
pub fn weighted_f(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair("weighted_f", pred, gt)?;
    check_binary("weighted_f", gt)?;
    let (h, w, g) = plane(gt);
    if !g.contains(&1.0) {
        return Err(Error::invalid(
            "weighted_f",
            "ground truth has no foreground",
        ));
    }
    let p = pred.data();
    let (dist2, nearest) = nearest_foreground(g, h, w);
    let e: Vec<f64> = p.iter().zip(g).map(|(p, g)| (p - g).abs()).collect();
    let et: Vec<f64> = (0..h * w).map(|i| e[nearest[i]]).collect();
    let k = gauss7();
    let mut ea = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (dy, row) in k.iter().enumerate() {
                let yy = y as isize + dy as isize - 3;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for (dx, kv) in row.iter().enumerate() {
                    let xx = x as isize + dx as isize - 3;
                    if xx >= 0 && xx < w as isize {
                        acc += kv * et[yy as usize * w + xx as usize];
                    }
                }
            }
            ea[y * w + x] = acc;
        }
    }
    let (mut tpw_loss, mut fpw, mut pos) = (0.0, 0.0, 0.0);
    for i in 0..h * w {
        if g[i] == 1.0 {
            tpw_loss += if ea[i] < e[i] { ea[i] } else { e[i] };
            pos += 1.0;
        } else {
            let b = 2.0 - (0.5f64.ln() / 5.0 * dist2[i].sqrt()).exp();
            fpw += e[i] * b;
        }
    }
    let tpw = pos - tpw_loss;
    let r = 1.0 - tpw_loss / pos;
    let prec = tpw / (tpw + fpw + EPS);
    Ok(2.0 * r * prec / (r + prec + EPS))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMetrics {
    pub rmse: f64,
    pub rmse_log: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
}

impl DepthMetrics {
    pub fn values(&self) -> [f64; 7] {
        [
            self.rmse,
            self.rmse_log,
            self.abs_rel,
            self.sq_rel,
            self.p1,
            self.p2,
            self.p3,
        ]
    }
}

/// Standard depth errors over pixels with `valid > 0`; both maps are floored at `eps`.
pub fn depth_metrics(pred: &Tensor, gt: &Tensor, valid: &Tensor, eps: f64) -> Result<DepthMetrics> {
    check_pair("depth_metrics", pred, gt)?;
    check_pair("depth_metrics", valid, gt)?;
    let (mut n, mut se, mut sle, mut ar, mut sr) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut within = [0.0; 3];
    for ((&p, &g), &v) in pred.data().iter().zip(gt.data()).zip(valid.data()) {
        if v <= 0.0 {
            continue;
        }
        let (p, g) = (p.max(eps), g.max(eps));
        let d = p - g;
        n += 1.0;
        se += d * d;
        sle += (p.ln() - g.ln()).powi(2);
        ar += d.abs() / g;
        sr += d * d / g;
        let ratio = (p / g).max(g / p);
        for (k, slot) in within.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *slot += 1.0;
            }
        }
    }
    if n == 0.0 {
        return Err(Error::invalid("depth_metrics", "no valid depth pixels"));
    }
    Ok(DepthMetrics {
        rmse: (se / n).sqrt(),
        rmse_log: (sle / n).sqrt(),
        abs_rel: ar / n,
        sq_rel: sr / n,
        p1: within[0] / n,
        p2: within[1] / n,
        p3: within[2] / n,
    })
}

/// Named metric values in a fixed order; metrics that are undefined for an
/// input (e.g. depth without ground truth) are absent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    entries: Vec<(String, f64)>,
}

impl MetricReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: &str, value: f64) {
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.iter().find(|(k, _)| k == key).map(|e| e.1)
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All saliency metrics; undefined ones (e.g. single-class ground truth) are skipped.
    pub fn saliency(pred: &Tensor, gt: &Tensor) -> Result<Self> {
        let mut r = MetricReport::new();
        let defined = |v: Result<f64>| match v {
            Ok(v) => Ok(Some(v)),
            Err(Error::InvalidArgument { .. }) => Ok(None),
            Err(e) => Err(e),
        };
        let values = [
            defined(f_beta_max(pred, gt, F_BETA2))?,
            defined(weighted_f(pred, gt))?,
            Some(s_measure(pred, gt, S_ALPHA)?),
            Some(e_measure(pred, gt)?),
            Some(mae(pred, gt)?),
            defined(auc(pred, gt))?,
        ];
        for (k, v) in SALIENCY_KEYS.iter().zip(values) {
            if let Some(v) = v {
                r.insert(k, v);
            }
        }
        Ok(r)
    }

    pub fn add_depth(&mut self, d: &DepthMetrics) {
        for (k, v) in DEPTH_KEYS.iter().zip(d.values()) {
            self.insert(k, v);
        }
    }

    /// `key = value` lines.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Per-key mean over the reports that define the key.
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let mut out = MetricReport::new();
        for key in SALIENCY_KEYS.iter().chain(&DEPTH_KEYS) {
            let vals: Vec<f64> = reports.iter().filter_map(|r| r.get(key)).collect();
            if !vals.is_empty() {
                out.insert(key, vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        out
    }
}

/// CSV header for per-image rows.
pub fn csv_header() -> String {
    let mut cols = vec!["image"];
    cols.extend(SALIENCY_KEYS);
    cols.extend(DEPTH_KEYS);
    cols.join(",")
}

/// One CSV row; undefined metrics are empty cells.
pub fn csv_row(name: &str, r: &MetricReport) -> String {
    let mut cells = vec![name.to_string()];
    for key in SALIENCY_KEYS.iter().chain(&DEPTH_KEYS) {
        cells.push(r.get(key).map(|v| format!("{v}")).unwrap_or_default());
    }
    cells.join(",")
}
