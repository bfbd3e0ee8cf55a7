//! Toy encoder, multi-modal decoder and the level-5 fusion blocks.

mod config;
pub mod decoder;
pub mod encoder;
mod layers;
pub mod mft;
mod params;

pub use config::{EncoderConfig, Fusion, MftConfig, ModelConfig, LEVELS};
pub use layers::{Conv, Linear};
pub use params::{Bound, ParamId, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use self::decoder::{Decoder, Mdb};
use self::encoder::{Encoder, Stems};
use self::mft::{MftBlock, NonLocalBlock};
use crate::error::Result;
use crate::tensor::{Graph, Precision, Tensor, Var};

/// The three dense prediction tasks, in stream order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Depth,
    Saliency,
    Contour,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Depth, Task::Saliency, Task::Contour];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short(self) -> &'static str {
        match self {
            Task::Depth => "d",
            Task::Saliency => "s",
            Task::Contour => "c",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Depth => "depth",
            Task::Saliency => "saliency",
            Task::Contour => "contour",
        }
    }
}

/// Depth, saliency and contour streams of identical shape, in [`Task`] order.
pub type FeatureTriple = [Var; 3];

/// `maps[level][task]`, each `1×S×S` in `(0,1)`; level 0 is the finest.
#[derive(Clone, Copy, Debug)]
pub struct SideOutputs {
    pub maps: [[Var; 3]; LEVELS],
}

impl SideOutputs {
    /// Final predictions: the finest level.
    pub fn final_maps(&self) -> [Var; 3] {
        self.maps[0]
    }

    /// One task's map at every level, finest first.
    pub fn task(&self, t: Task) -> [Var; LEVELS] {
        self.maps.map(|l| l[t.index()])
    }
}

/// Level-5 fusion in use.
#[derive(Clone, Debug)]
pub enum FusionBlock {
    Mft(MftBlock),
    Conv(Mdb),
    NonLocal(NonLocalBlock),
}

impl FusionBlock {
    pub fn forward(&self, g: &mut Graph, p: &Bound, t: &FeatureTriple) -> Result<FeatureTriple> {
        match self {
            FusionBlock::Mft(b) => b.forward(g, p, t),
            FusionBlock::Conv(b) => b.forward(g, p, t),
            FusionBlock::NonLocal(b) => b.forward(g, p, t),
        }
    }
}

/// Network structure plus its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub stems: Stems,
    pub decoder: Decoder,
    pub fusion: FusionBlock,
}

/// Final maps of one forward pass, each `1×S×S`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub depth: Tensor,
    pub saliency: Tensor,
    pub contour: Tensor,
}

impl Model {
    /// Builds a randomly initialized model; deterministic in `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &cfg.encoder, &mut rng);
        let c5 = cfg.decoder_channels[LEVELS - 1];
        let stems = Stems::new(&mut params, cfg.encoder.channels[LEVELS - 1], c5, &mut rng);
        let fusion = match cfg.fusion {
            Fusion::Mft => {
                FusionBlock::Mft(MftBlock::new(&mut params, c5, &cfg.mft, cfg.msf, &mut rng))
            }
            Fusion::Conv => FusionBlock::Conv(Mdb::new(&mut params, "mdb5", c5, &mut rng)),
            Fusion::NonLocal => {
                FusionBlock::NonLocal(NonLocalBlock::new(&mut params, c5, &mut rng))
            }
        };
        let decoder = Decoder::new(&mut params, &cfg, &mut rng);
        Ok(Model {
            cfg,
            params,
            encoder,
            stems,
            decoder,
            fusion,
        })
    }

    pub fn input_size(&self) -> usize {
        self.cfg.encoder.input_size
    }

    /// Full forward pass from a `3×S×S` image to the 15 side maps.
    pub fn forward(&self, g: &mut Graph, p: &Bound, rgb: Var) -> Result<SideOutputs> {
        let pyramid = self.encoder.encode(g, p, rgb)?;
        let top = self.stems.forward(g, p, pyramid[LEVELS - 1])?;
        self.decoder
            .decode(g, p, &pyramid, top, |g, t| self.fusion.forward(g, p, t))
    }

    /// Inference on one image; needs only the RGB input.
    pub fn predict(&self, rgb: &Tensor, precision: Precision) -> Result<Prediction> {
        let mut g = Graph::with_precision(precision);
        let p = self.params.bind(&mut g, false);
        let x = g.constant(rgb.clone());
        let out = self.forward(&mut g, &p, x)?.final_maps();
        Ok(Prediction {
            depth: g.value(out[0]).clone(),
            saliency: g.value(out[1]).clone(),
            contour: g.value(out[2]).clone(),
        })
    }
}
