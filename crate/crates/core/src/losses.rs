//! Depth (L1 + SSIM), saliency (weighted BCE + weighted IoU) and contour
//! (BCE) supervision, summed over every decoder level.

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{SideOutputs, Task, LEVELS};
use crate::tensor::kernels::{self, PoolGeom};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Supervised levels.
    pub levels: usize,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    pub weight_pool_k: usize,
    pub weight_gain: f64,
    /// Probabilities are clamped to `[eps, 1−eps]` inside BCE.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            levels: LEVELS,
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
            weight_pool_k: 31,
            weight_gain: 5.0,
            eps: 1e-7,
        }
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

fn check_map(op: &'static str, g: &Graph, pred: Var, gt: &Tensor) -> Result<()> {
    if g.shape(pred) != gt.shape() {
        return Err(Error::shape(op, g.shape(pred), gt.shape()));
    }
    if gt.rank() != 3 || gt.shape()[0] != 1 {
        return Err(Error::invalid(
            op,
            format!("expected a 1×H×W map, got {:?}", gt.shape()),
        ));
    }
    Ok(())
}

fn check_levels(op: &'static str, preds: &[Var], cfg: &LossConfig) -> Result<()> {
    if preds.len() != cfg.levels {
        return Err(Error::invalid(
            op,
            format!(
                "expected {} supervised maps, got {}",
                cfg.levels,
                preds.len()
            ),
        ));
    }
    Ok(())
}

/// `1 − mean(SSIM)` over all fully-inside Gaussian windows.
pub fn ssim_loss(g: &mut Graph, pred: Var, gt: Var, cfg: &LossConfig) -> Result<Var> {
    if g.shape(pred) != g.shape(gt) {
        return Err(Error::shape("ssim_loss", g.shape(pred), g.shape(gt)));
    }
    let (h, w) = g.value(pred).hw();
    if h < cfg.ssim_window || w < cfg.ssim_window {
        return Err(Error::invalid(
            "ssim_loss",
            format!("{h}x{w} map is smaller than the {} window", cfg.ssim_window),
        ));
    }
    let win = gaussian_window(cfg.ssim_window, cfg.ssim_sigma);
    let xx = g.mul(pred, pred)?;
    let yy = g.mul(gt, gt)?;
    let xy = g.mul(pred, gt)?;
    let mu_x = g.separable_filter_valid(pred, &win)?;
    let mu_y = g.separable_filter_valid(gt, &win)?;
    let e_xx = g.separable_filter_valid(xx, &win)?;
    let e_yy = g.separable_filter_valid(yy, &win)?;
    let e_xy = g.separable_filter_valid(xy, &win)?;
    let mx2 = g.mul(mu_x, mu_x)?;
    let my2 = g.mul(mu_y, mu_y)?;
    let mxy = g.mul(mu_x, mu_y)?;
    let var_x = g.sub(e_xx, mx2)?;
    let var_y = g.sub(e_yy, my2)?;
    let cov = g.sub(e_xy, mxy)?;

    let a = g.scale(mxy, 2.0)?;
    let a = g.shift(a, cfg.ssim_c1)?;
    let b = g.scale(cov, 2.0)?;
    let b = g.shift(b, cfg.ssim_c2)?;
    let num = g.mul(a, b)?;
    let c = g.add(mx2, my2)?;
    let c = g.shift(c, cfg.ssim_c1)?;
    let d = g.add(var_x, var_y)?;
    let d = g.shift(d, cfg.ssim_c2)?;
    let den = g.mul(c, d)?;
    let ssim = g.div(num, den)?;
    let m = g.mean(ssim)?;
    let neg = g.neg(m)?;
    g.shift(neg, 1.0)
}

/// One level of depth supervision: masked mean absolute error plus SSIM
/// between the masked prediction and the ground truth.
pub fn depth_level_loss(
    g: &mut Graph,
    pred: Var,
    gt: &Tensor,
    valid: &Tensor,
    cfg: &LossConfig,
) -> Result<Var> {
    check_map("depth_loss", g, pred, gt)?;
    if valid.shape() != gt.shape() {
        return Err(Error::shape("depth_loss", gt.shape(), valid.shape()));
    }
    let n_valid: f64 = valid.data().iter().sum();
    if n_valid <= 0.0 {
        return Err(Error::invalid("depth_loss", "valid mask is empty"));
    }
    let gt_v = g.constant(gt.clone());
    let mask = g.constant(valid.clone());
    let masked = g.mul(pred, mask)?;
    let diff = g.sub(masked, gt_v)?;
    let ad = g.abs(diff)?;
    let l1 = g.sum(ad)?;
    let l1 = g.scale(l1, 1.0 / n_valid)?;
    let ls = ssim_loss(g, masked, gt_v, cfg)?;
    g.add(l1, ls)
}

/// `Σ_levels (l_1 + l_ssim)`.
pub fn depth_loss(
    g: &mut Graph,
    preds: &[Var],
    gt: &Tensor,
    valid: &Tensor,
    cfg: &LossConfig,
) -> Result<Var> {
    check_levels("depth_loss", preds, cfg)?;
    sum_levels(g, preds, |g, p| depth_level_loss(g, p, gt, valid, cfg))
}

/// `1 + gain·|avgpool_k(gt) − gt|` with zero padding and a fixed `k²` divisor.
pub fn weight_map(gt: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let &[c, h, w] = gt.shape() else {
        return Err(Error::invalid(
            "weight_map",
            format!("expected C×H×W, got {:?}", gt.shape()),
        ));
    };
    let k = cfg.weight_pool_k;
    let geom = PoolGeom {
        c,
        h,
        w,
        k,
        stride: 1,
        pad: k / 2,
        ho: h,
        wo: w,
    };
    let pooled = kernels::avgpool_forward(gt.data(), &geom);
    let data = pooled
        .iter()
        .zip(gt.data())
        .map(|(a, g)| 1.0 + cfg.weight_gain * (a - g).abs())
        .collect();
    Tensor::new(gt.shape().to_vec(), data)
}

/// `Σ w·bce / Σ w` with clamped probabilities; `w = None` means uniform.
fn weighted_bce(
    g: &mut Graph,
    pred: Var,
    gt: &Tensor,
    w: Option<&Tensor>,
    eps: f64,
) -> Result<Var> {
    let (pos, negw, total): (Vec<f64>, Vec<f64>, f64) = match w {
        Some(w) => (
            gt.data().iter().zip(w.data()).map(|(g, w)| g * w).collect(),
            gt.data()
                .iter()
                .zip(w.data())
                .map(|(g, w)| (1.0 - g) * w)
                .collect(),
            w.data().iter().sum(),
        ),
        None => (
            gt.data().to_vec(),
            gt.data().iter().map(|g| 1.0 - g).collect(),
            gt.numel() as f64,
        ),
    };
    let shape = gt.shape().to_vec();
    let pc = g.clamp(pred, eps, 1.0 - eps)?;
    let lp = g.ln(pc)?;
    let q = g.neg(pc)?;
    let q = g.shift(q, 1.0)?;
    let lq = g.ln(q)?;
    let pos = g.constant(Tensor::new(shape.clone(), pos)?);
    let negw = g.constant(Tensor::new(shape, negw)?);
    let a = g.mul(lp, pos)?;
    let b = g.mul(lq, negw)?;
    let s = g.add(a, b)?;
    let s = g.sum(s)?;
    g.scale(s, -1.0 / total)
}

/// `1 − Σ w·p·g / Σ w·(p + g − p·g)`.
fn weighted_iou(g: &mut Graph, pred: Var, gt: &Tensor, w: &Tensor) -> Result<Var> {
    let wg: Vec<f64> = gt.data().iter().zip(w.data()).map(|(g, w)| g * w).collect();
    let wg_sum: f64 = wg.iter().sum();
    let wg = g.constant(Tensor::new(gt.shape().to_vec(), wg)?);
    let wv = g.constant(w.clone());
    let inter = g.mul(pred, wg)?;
    let inter = g.sum(inter)?;
    let wp = g.mul(pred, wv)?;
    let wp = g.sum(wp)?;
    // Σw(p + g − pg) = Σwp + Σwg − Σwpg
    let union = g.sub(wp, inter)?;
    let union = g.shift(union, wg_sum)?;
    let ratio = g.div(inter, union)?;
    let neg = g.neg(ratio)?;
    g.shift(neg, 1.0)
}

pub fn saliency_level_loss(g: &mut Graph, pred: Var, gt: &Tensor, cfg: &LossConfig) -> Result<Var> {
    check_map("saliency_loss", g, pred, gt)?;
    let w = weight_map(gt, cfg)?;
    saliency_level_loss_weighted(g, pred, gt, &w, cfg)
}

fn saliency_level_loss_weighted(
    g: &mut Graph,
    pred: Var,
    gt: &Tensor,
    w: &Tensor,
    cfg: &LossConfig,
) -> Result<Var> {
    let bce = weighted_bce(g, pred, gt, Some(w), cfg.eps)?;
    let iou = weighted_iou(g, pred, gt, w)?;
    g.add(bce, iou)
}

/// `Σ_levels (l_bce^w + l_iou^w)`.
pub fn saliency_loss(g: &mut Graph, preds: &[Var], gt: &Tensor, cfg: &LossConfig) -> Result<Var> {
    check_levels("saliency_loss", preds, cfg)?;
    for &p in preds {
        check_map("saliency_loss", g, p, gt)?;
    }
    let w = weight_map(gt, cfg)?;
    sum_levels(g, preds, |g, p| {
        saliency_level_loss_weighted(g, p, gt, &w, cfg)
    })
}

/// Plain mean BCE for one level.
pub fn bce_loss(g: &mut Graph, pred: Var, gt: &Tensor, cfg: &LossConfig) -> Result<Var> {
    check_map("bce", g, pred, gt)?;
    weighted_bce(g, pred, gt, None, cfg.eps)
}

/// `Σ_levels l_bce`.
pub fn contour_loss(g: &mut Graph, preds: &[Var], gt: &Tensor, cfg: &LossConfig) -> Result<Var> {
    check_levels("contour_loss", preds, cfg)?;
    sum_levels(g, preds, |g, p| bce_loss(g, p, gt, cfg))
}

fn sum_levels(
    g: &mut Graph,
    preds: &[Var],
    mut f: impl FnMut(&mut Graph, Var) -> Result<Var>,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &p in preds {
        let l = f(g, p)?;
        acc = Some(match acc {
            Some(a) => g.add(a, l)?,
            None => l,
        });
    }
    acc.ok_or_else(|| Error::invalid("loss", "no supervised levels"))
}

/// Graph handles of the total loss and its parts.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    /// `None` when the sample carries no valid depth.
    pub depth: Option<Var>,
    pub saliency: Var,
    pub contour: Var,
    /// `levels[i][task]` per-level terms, finest first; depth is `None` when skipped.
    pub levels: Vec<[Option<Var>; 3]>,
}

/// Scalar values of a [`LossVars`].
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub l_d: f64,
    pub l_s: f64,
    pub l_c: f64,
    pub total: f64,
    /// `per_level[i] = [depth, saliency, contour]`.
    pub per_level: Vec<[f64; 3]>,
}

impl LossVars {
    pub fn report(&self, g: &Graph) -> LossReport {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        LossReport {
            l_d: val(self.depth),
            l_s: g.value(self.saliency).item(),
            l_c: g.value(self.contour).item(),
            total: g.value(self.total).item(),
            per_level: self.levels.iter().map(|l| l.map(val)).collect(),
        }
    }
}

/// `L = L_d + L_s + L_c` over all side outputs.
///
/// Samples without any valid depth contribute no depth term.
pub fn total_loss(
    g: &mut Graph,
    side: &SideOutputs,
    sample: &Sample,
    cfg: &LossConfig,
) -> Result<LossVars> {
    if cfg.levels != LEVELS {
        return Err(Error::invalid(
            "total_loss",
            format!(
                "{} supervised levels configured but the decoder has {LEVELS}",
                cfg.levels
            ),
        ));
    }
    let w = weight_map(&sample.saliency_gt, cfg)?;
    let has_depth = sample.has_depth();
    let mut levels = Vec::with_capacity(LEVELS);
    for maps in &side.maps {
        let d = if has_depth {
            Some(depth_level_loss(
                g,
                maps[Task::Depth.index()],
                &sample.depth_gt,
                &sample.valid_mask,
                cfg,
            )?)
        } else {
            None
        };
        let sal = maps[Task::Saliency.index()];
        check_map("saliency_loss", g, sal, &sample.saliency_gt)?;
        let s = saliency_level_loss_weighted(g, sal, &sample.saliency_gt, &w, cfg)?;
        let c = bce_loss(g, maps[Task::Contour.index()], &sample.contour_gt, cfg)?;
        levels.push([d, Some(s), Some(c)]);
    }
    let sum_task = |g: &mut Graph, t: usize| -> Result<Option<Var>> {
        let vars: Vec<Var> = levels.iter().filter_map(|l| l[t]).collect();
        if vars.is_empty() {
            return Ok(None);
        }
        sum_levels(g, &vars, |_, v| Ok(v)).map(Some)
    };
    let depth = sum_task(g, 0)?;
    let saliency = sum_task(g, 1)?.expect("saliency is always supervised");
    let contour = sum_task(g, 2)?.expect("contour is always supervised");
    let sc = g.add(saliency, contour)?;
    let total = match depth {
        Some(d) => g.add(d, sc)?,
        None => sc,
    };
    Ok(LossVars {
        total,
        depth,
        saliency,
        contour,
        levels,
    })
}
