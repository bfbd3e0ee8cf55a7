use rand::Rng;

use super::config::MftConfig;
use super::decoder::Mdb;
use super::layers::{Conv, Linear};
use super::params::{Bound, ParamStore};
use super::{FeatureTriple, Task};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

const PE_TEMPERATURE: f64 = 10000.0;

/// Fixed 2-D sine/cosine encoding, `N×d_m` with `N = h·w` in row-major order.
///
/// The first half of each vector encodes the row, the second half the
/// column; within a half, entries come in `(sin, cos)` pairs of decreasing
/// frequency. Positions are integer pixel indices, so `(0,0)` maps to
/// alternating zeros and ones.
pub fn positional_encoding(h: usize, w: usize, d_m: usize) -> Result<Tensor> {
    if d_m == 0 || !d_m.is_multiple_of(4) {
        return Err(Error::invalid(
            "positional_encoding",
            format!("d_m {d_m} must be a positive multiple of 4"),
        ));
    }
    let half = d_m / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|j| PE_TEMPERATURE.powf(-((2 * j) as f64) / half as f64))
        .collect();
    let mut data = Vec::with_capacity(h * w * d_m);
    for y in 0..h {
        for x in 0..w {
            for pos in [y as f64, x as f64] {
                for f in &freqs {
                    let (s, c) = (pos * f).sin_cos();
                    data.push(s);
                    data.push(c);
                }
            }
        }
    }
    Tensor::new(vec![h * w, d_m], data)
}

/// Multi-head attention projections; the per-head matrices are stored side
/// by side, so `wq`, `wk`, `wv` are `d_m×(nh·d_k)` and `wo` is `(nh·d_k)×d_m`.
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub nh: usize,
    /// Per-head query/key/value width.
    pub d_k: usize,
}

impl Mhsa {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_m: usize,
        nh: usize,
        d_k: usize,
        out_gain: f64,
        rng: &mut R,
    ) -> Self {
        let inner = nh * d_k;
        Mhsa {
            wq: Linear::new(store, &format!("{name}.wq"), d_m, inner, false, 1.0, rng),
            wk: Linear::new(store, &format!("{name}.wk"), d_m, inner, false, 1.0, rng),
            wv: Linear::new(store, &format!("{name}.wv"), d_m, inner, false, 1.0, rng),
            wo: Linear::new(
                store,
                &format!("{name}.wo"),
                inner,
                d_m,
                false,
                out_gain,
                rng,
            ),
            nh,
            d_k,
        }
    }

    /// `Concat_i(softmax(q W_i^q (k W_i^k)ᵀ / √d_k) v W_i^v) W^O` on `N×d_m` sequences.
    pub fn forward(&self, g: &mut Graph, p: &Bound, q: Var, k: Var, v: Var) -> Result<Var> {
        let shape = g.shape(q).to_vec();
        let &[n, _] = shape.as_slice() else {
            return Err(Error::invalid(
                "mhsa",
                format!("expected N×d_m tokens, got {shape:?}"),
            ));
        };
        for other in [k, v] {
            if g.shape(other) != shape.as_slice() {
                return Err(Error::shape("mhsa", &shape, g.shape(other)));
            }
        }
        let (nh, dk) = (self.nh, self.d_k);
        let qp = self.wq.forward(g, p, q)?;
        let kp = self.wk.forward(g, p, k)?;
        let vp = self.wv.forward(g, p, v)?;
        let qh = g.reshape(qp, &[n, nh, dk])?;
        let qh = g.permute(qh, &[1, 0, 2])?;
        let kt = g.reshape(kp, &[n, nh, dk])?;
        let kt = g.permute(kt, &[1, 2, 0])?;
        let vh = g.reshape(vp, &[n, nh, dk])?;
        let vh = g.permute(vh, &[1, 0, 2])?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
        let attn = g.softmax(scores, 2)?;
        let heads = g.matmul(attn, vh)?;
        let heads = g.permute(heads, &[1, 0, 2])?;
        let cat = g.reshape(heads, &[n, nh * dk])?;
        self.wo.forward(g, p, cat)
    }
}

/// One transformer iteration: attention with positions on queries and
/// keys only, then a two-layer ReLU FFN, each with a residual.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attn: Mhsa,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

impl TransformerLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &MftConfig,
        rng: &mut R,
    ) -> Self {
        // keep the residual stream from growing with depth
        let out_gain = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        let hidden = cfg.ffn_mult * cfg.d_m;
        TransformerLayer {
            attn: Mhsa::new(
                store,
                &format!("{name}.attn"),
                cfg.d_m,
                cfg.nh,
                cfg.d_k,
                out_gain,
                rng,
            ),
            ffn1: Linear::new(
                store,
                &format!("{name}.ffn1"),
                cfg.d_m,
                hidden,
                true,
                2f64.sqrt(),
                rng,
            ),
            ffn2: Linear::new(
                store,
                &format!("{name}.ffn2"),
                hidden,
                cfg.d_m,
                true,
                out_gain,
                rng,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, t: Var, pos: Var) -> Result<Var> {
        if g.shape(t) != g.shape(pos) {
            return Err(Error::shape("transformer_layer", g.shape(t), g.shape(pos)));
        }
        let qk = g.add(t, pos)?;
        let a = self.attn.forward(g, p, qk, qk, t)?;
        let mid = g.add(t, a)?;
        let h = self.ffn1.forward(g, p, mid)?;
        let h = g.relu(h)?;
        let f = self.ffn2.forward(g, p, h)?;
        g.add(mid, f)
    }
}

/// Concatenates the three `C×H×W` streams on channels and lays the result
/// out as `H·W` tokens of width `3C`.
pub fn aggregate_modalities(g: &mut Graph, t: &FeatureTriple) -> Result<Var> {
    let s = g.shape(t[0]).to_vec();
    for v in &t[1..] {
        if g.shape(*v) != s.as_slice() {
            return Err(Error::shape("aggregate_modalities", &s, g.shape(*v)));
        }
    }
    let cat = g.concat(t, 0)?;
    let flat = g.reshape(cat, &[3 * s[0], s[1] * s[2]])?;
    g.permute(flat, &[1, 0])
}

/// Inverse of the token layout: `N×d` back to `d×H×W`.
pub fn tokens_to_map(g: &mut Graph, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let d = g.shape(tokens)[1];
    let t = g.permute(tokens, &[1, 0])?;
    g.reshape(t, &[d, h, w])
}

/// Two 1×1 convs producing per-pixel grouped kernels.
#[derive(Clone, Debug)]
pub struct FilterGenerator {
    pub conv1: Conv,
    pub conv2: Conv,
    pub groups: usize,
    pub kernel: usize,
}

impl FilterGenerator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c: usize,
        cfg: &MftConfig,
        rng: &mut R,
    ) -> Self {
        let kk = cfg.kernel * cfg.kernel;
        let hidden = (c / 2).max(1);
        FilterGenerator {
            conv1: Conv::new(store, &format!("{name}.conv1"), c, hidden, 1, 1, rng),
            conv2: Conv::with_gain(
                store,
                &format!("{name}.conv2"),
                hidden,
                cfg.groups * kk,
                1,
                1,
                1.0 / kk as f64,
                rng,
            ),
            groups: cfg.groups,
            kernel: cfg.kernel,
        }
    }

    /// `G×H×W×K×K` filters; output channel `g·K² + u·K + v` holds tap `(u,v)` of group `g`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, f_m: Var) -> Result<Var> {
        let s = g.shape(f_m).to_vec();
        let &[c, h, w] = s.as_slice() else {
            return Err(Error::invalid(
                "generate_dynamic_filters",
                format!("expected C×H×W, got {s:?}"),
            ));
        };
        if c % self.groups != 0 {
            return Err(Error::invalid(
                "generate_dynamic_filters",
                format!("{c} channels not divisible by {} groups", self.groups),
            ));
        }
        let kk = self.kernel * self.kernel;
        let hidden = self.conv1.forward_relu(g, p, f_m)?;
        let raw = self.conv2.forward(g, p, hidden)?;
        let r = g.reshape(raw, &[self.groups, kk, h, w])?;
        let r = g.permute(r, &[0, 2, 3, 1])?;
        g.reshape(r, &[self.groups, h, w, self.kernel, self.kernel])
    }
}

/// Applies grouped per-pixel kernels with zero padding.
pub fn apply_grouped_dynamic_filter(g: &mut Graph, x: Var, f: Var) -> Result<Var> {
    g.dynamic_filter(x, f)
}

/// Transformer over the concatenated level-5 streams followed by one
/// modality-specific filter per stream, added back residually.
#[derive(Clone, Debug)]
pub struct MftBlock {
    pub cfg: MftConfig,
    pub layers: Vec<TransformerLayer>,
    /// Per-stream 1×1 projection of the fused map down to the stream width.
    pub proj: [Conv; 3],
    pub generators: [FilterGenerator; 3],
    pub msf: bool,
}

impl MftBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        c: usize,
        cfg: &MftConfig,
        msf: bool,
        rng: &mut R,
    ) -> Self {
        let layers = (0..cfg.layers)
            .map(|i| TransformerLayer::new(store, &format!("mft.layer{}", i + 1), cfg, rng))
            .collect();
        let proj = Task::ALL.map(|t| {
            Conv::with_gain(
                store,
                &format!("mft.proj.{}", t.short()),
                cfg.d_m,
                c,
                1,
                1,
                1.0,
                rng,
            )
        });
        let generators = Task::ALL.map(|t| {
            FilterGenerator::new(store, &format!("mft.filter.{}", t.short()), c, cfg, rng)
        });
        MftBlock {
            cfg: cfg.clone(),
            layers,
            proj,
            generators,
            msf,
        }
    }

    /// Runs the stacked layers on `N×d_m` tokens.
    pub fn transform(&self, g: &mut Graph, p: &Bound, tokens: Var, pos: Var) -> Result<Var> {
        let mut t = tokens;
        for layer in &self.layers {
            t = layer.forward(g, p, t, pos)?;
        }
        Ok(t)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, t: &FeatureTriple) -> Result<FeatureTriple> {
        let s = g.shape(t[0]).to_vec();
        let (h, w) = (s[1], s[2]);
        if 3 * s[0] != self.cfg.d_m {
            return Err(Error::invalid(
                "mft_block",
                format!(
                    "three {}-channel streams do not make d_m = {}",
                    s[0], self.cfg.d_m
                ),
            ));
        }
        let tokens = aggregate_modalities(g, t)?;
        let pos = g.constant(positional_encoding(h, w, self.cfg.d_m)?);
        let fused = self.transform(g, p, tokens, pos)?;
        let tmff = tokens_to_map(g, fused, h, w)?;
        let mut out = *t;
        for m in 0..3 {
            let x = self.proj[m].forward(g, p, tmff)?;
            let v = if self.msf {
                let f = self.generators[m].forward(g, p, t[m])?;
                apply_grouped_dynamic_filter(g, x, f)?
            } else {
                x
            };
            out[m] = g.add(t[m], v)?;
        }
        Ok(out)
    }
}

/// Single-head non-local (embedded Gaussian) attention over the summed
/// streams, then squeeze-and-expand. Stand-in for the transformer in
/// ablations.
#[derive(Clone, Debug)]
pub struct NonLocalBlock {
    pub theta: Linear,
    pub phi: Linear,
    pub g: Linear,
    pub out: Linear,
    pub mdb: Mdb,
}

impl NonLocalBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, c: usize, rng: &mut R) -> Self {
        let inner = (c / 2).max(1);
        NonLocalBlock {
            theta: Linear::new(store, "nonlocal.theta", c, inner, false, 1.0, rng),
            phi: Linear::new(store, "nonlocal.phi", c, inner, false, 1.0, rng),
            g: Linear::new(store, "nonlocal.g", c, inner, false, 1.0, rng),
            out: Linear::new(store, "nonlocal.out", inner, c, false, 0.5, rng),
            mdb: Mdb::new(store, "nonlocal.mdb", c, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, t: &FeatureTriple) -> Result<FeatureTriple> {
        let s = g.shape(t[0]).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let sum = g.add(t[0], t[1])?;
        let sum = g.add(sum, t[2])?;
        let flat = g.reshape(sum, &[c, h * w])?;
        let x = g.permute(flat, &[1, 0])?;
        let th = self.theta.forward(g, p, x)?;
        let ph = self.phi.forward(g, p, x)?;
        let gv = self.g.forward(g, p, x)?;
        let pt = g.permute(ph, &[1, 0])?;
        let a = g.matmul(th, pt)?;
        let a = g.softmax(a, 1)?;
        let y = g.matmul(a, gv)?;
        let y = self.out.forward(g, p, y)?;
        let y = g.add(x, y)?;
        let fused = tokens_to_map(g, y, h, w)?;
        let f_dsc = self.mdb.squeeze.forward_relu(g, p, fused)?;
        self.mdb.expand(g, p, t, f_dsc)
    }
}
