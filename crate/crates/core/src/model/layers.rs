use rand::Rng;

use super::params::{Bound, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{Graph, Var};

/// Square 2-D convolution with bias; `pad = k/2` keeps the extent at stride 1.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// He-initialized weights (`gain = √2`), zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_gain(store, name, c_in, c_out, k, stride, 2f64.sqrt(), rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_gain<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add_normal(
            format!("{name}.w"),
            &[c_out, c_in, k, k],
            c_in * k * k,
            gain,
            rng,
        );
        let b = store.add_zeros(format!("{name}.b"), &[c_out]);
        Conv {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }

    pub fn forward_relu(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = self.forward(g, p, x)?;
        g.relu(y)
    }
}

/// Token-wise affine map `x·W + b` on `N×d_in`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add_normal(format!("{name}.w"), &[d_in, d_out], d_in, gain, rng);
        let b = bias.then(|| store.add_zeros(format!("{name}.b"), &[d_out]));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        match self.b {
            Some(b) => g.add(y, p.var(b)),
            None => Ok(y),
        }
    }
}
