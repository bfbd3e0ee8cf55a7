use rand::Rng;

use super::config::{EncoderConfig, LEVELS};
use super::layers::Conv;
use super::params::{Bound, ParamStore};
use super::{FeatureTriple, Task};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Encoder outputs, finest first: level `i` is `channels[i] × (S/2^(i+1))²`.
pub type FeaturePyramid = [Var; LEVELS];

/// Per level: two 3×3 conv+ReLU, then a stride-2 3×3 downsampling conv
/// without activation.
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    stages: Vec<[Conv; 3]>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let mut c_in = 3;
        let stages = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let stage = [
                    Conv::new(store, &format!("enc{}.conv1", i + 1), c_in, c, 3, 1, rng),
                    Conv::new(store, &format!("enc{}.conv2", i + 1), c, c, 3, 1, rng),
                    Conv::with_gain(store, &format!("enc{}.down", i + 1), c, c, 3, 2, 1.0, rng),
                ];
                c_in = c;
                stage
            })
            .collect();
        Encoder {
            cfg: cfg.clone(),
            stages,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn encode(&self, g: &mut Graph, p: &Bound, rgb: Var) -> Result<FeaturePyramid> {
        let s = self.cfg.input_size;
        if g.shape(rgb) != [3, s, s] {
            return Err(Error::invalid(
                "encode",
                format!("expected a 3×{s}×{s} image, got {:?}", g.shape(rgb)),
            ));
        }
        let mut x = rgb;
        let mut levels = [rgb; LEVELS];
        for (level, [c1, c2, down]) in levels.iter_mut().zip(&self.stages) {
            x = c1.forward_relu(g, p, x)?;
            x = c2.forward_relu(g, p, x)?;
            x = down.forward(g, p, x)?;
            *level = x;
        }
        Ok(levels)
    }
}

/// Three independent 3×3 conv+ReLU heads that start the task streams from
/// the coarsest encoder level.
#[derive(Clone, Debug)]
pub struct Stems {
    pub heads: [Conv; 3],
}

impl Stems {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        Stems {
            heads: Task::ALL.map(|t| {
                Conv::new(
                    store,
                    &format!("stem.{}", t.short()),
                    c_in,
                    c_out,
                    3,
                    1,
                    rng,
                )
            }),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, e5: Var) -> Result<FeatureTriple> {
        let c_in = g.value(p.var(self.heads[0].w)).shape()[1];
        if g.shape(e5)[0] != c_in {
            return Err(Error::invalid(
                "modality_stems",
                format!("expected {c_in} input channels, got {:?}", g.shape(e5)),
            ));
        }
        let mut out = [e5; 3];
        for (o, head) in out.iter_mut().zip(&self.heads) {
            *o = head.forward_relu(g, p, e5)?;
        }
        Ok(out)
    }
}
