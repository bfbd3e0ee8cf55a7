//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Precision, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Check at most this many randomly chosen coordinates per leaf.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tol: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LeafReport {
    pub leaf: usize,
    pub shape: Vec<usize>,
    pub coords_checked: usize,
    /// Coordinates whose ±h evaluations straddle a ReLU/abs/clamp kink;
    /// central differences are meaningless there, so they are not compared.
    pub coords_skipped: usize,
    pub max_rel_err: f64,
    /// Coordinate with the largest relative error, with (analytic, numeric).
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }

    pub fn coords_checked(&self) -> usize {
        self.leaves.iter().map(|l| l.coords_checked).sum()
    }

    pub fn coords_skipped(&self) -> usize {
        self.leaves.iter().map(|l| l.coords_skipped).sum()
    }
}

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

struct Eval {
    value: f64,
    kinks: u64,
    grads: Vec<Vec<f64>>,
}

fn evaluate<F>(f: &F, leaves: &[Tensor], analytic: bool) -> Result<Eval>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_precision(Precision::Double);
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    if g.value(root).numel() != 1 {
        return Err(Error::Graph(format!(
            "grad_check needs a scalar function, got shape {:?}",
            g.shape(root)
        )));
    }
    let value = g.value(root).item();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let kinks = g.kink_signature();
    if !analytic {
        return Ok(Eval {
            value,
            kinks,
            grads: Vec::new(),
        });
    }
    g.backward(root)?;
    let grads = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    Ok(Eval {
        value,
        kinks,
        grads,
    })
}

/// Compare reverse-mode gradients of the scalar function `f` against
/// central differences at `leaves`.
///
/// `f` receives a fresh double-precision graph and one trainable var per leaf.
/// Coordinates whose perturbation moves any ReLU/abs/clamp input across its
/// kink are counted in `coords_skipped` instead of compared.
pub fn grad_check<F>(f: F, leaves: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if opts.h.is_nan() || opts.h <= 0.0 {
        return Err(Error::invalid(
            "grad_check",
            format!("step {} must be positive", opts.h),
        ));
    }
    let base = evaluate(&f, leaves, true)?;
    let analytic = &base.grads;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::with_capacity(leaves.len());
    let mut work = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut report = LeafReport {
            leaf: li,
            shape: leaf.shape().to_vec(),
            coords_checked: 0,
            coords_skipped: 0,
            max_rel_err: 0.0,
            worst: None,
        };
        for &c in &coords {
            let orig = leaf.data()[c];
            work[li].data_mut()[c] = orig + opts.h;
            let plus = evaluate(&f, &work, false)?;
            work[li].data_mut()[c] = orig - opts.h;
            let minus = evaluate(&f, &work, false)?;
            work[li].data_mut()[c] = orig;
            if plus.kinks != base.kinks || minus.kinks != base.kinks {
                report.coords_skipped += 1;
                continue;
            }
            report.coords_checked += 1;
            let numeric = (plus.value - minus.value) / (2.0 * opts.h);
            let a = analytic[li][c];
            let err = relative_error(a, numeric);
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((c, a, numeric));
            }
        }
        reports.push(report);
    }
    let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        leaves: reports,
        max_rel_err,
        tol: opts.tol,
    })
}
