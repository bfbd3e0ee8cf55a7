use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

use super::TrainConfig;

/// First and second moments per parameter plus the number of steps taken.
///
/// Moments are kept `f32`-representable, like the parameters, so a
/// checkpointed run resumes on exactly the same trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            params
                .ids()
                .map(|id| Tensor::zeros(params.value(id).shape().to_vec()))
                .collect()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// Bias-corrected update of one flat buffer at step `t` (1-based).
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    theta: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for i in 0..theta.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One optimizer step over every parameter. Nothing is modified when any
/// gradient is non-finite.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid(
            "adam_step",
            format!(
                "{} parameters, {} gradients, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (id, g) in params.ids().zip(grads) {
        if g.shape() != params.value(id).shape() {
            return Err(Error::shape(
                "adam_step",
                params.value(id).shape(),
                g.shape(),
            ));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "adam_step",
                format!(
                    "non-finite gradient {} at {}[{i}], step aborted",
                    g.data()[i],
                    params.name(id)
                ),
            ));
        }
    }
    state.step += 1;
    let t = state.step;
    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        params.update(id, |theta| {
            adam_update(
                theta,
                grads[k].data(),
                m.data_mut(),
                v.data_mut(),
                t,
                lr,
                cfg.beta1,
                cfg.beta2,
                cfg.eps,
            )
        });
        for x in m.data_mut().iter_mut().chain(v.data_mut()) {
            *x = *x as f32 as f64;
        }
    }
    Ok(())
}

/// `lr₀ · rate^⌊epoch / decay_step⌋`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.decay_rate.powi((epoch / cfg.decay_step) as i32)
}
