use rand::Rng;

use super::config::{ModelConfig, LEVELS};
use super::encoder::FeaturePyramid;
use super::layers::Conv;
use super::params::{Bound, ParamStore};
use super::{FeatureTriple, SideOutputs, Task};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

fn check_triple(op: &'static str, g: &Graph, t: &FeatureTriple) -> Result<()> {
    for v in &t[1..] {
        if g.shape(*v) != g.shape(t[0]) {
            return Err(Error::shape(op, g.shape(t[0]), g.shape(*v)));
        }
    }
    Ok(())
}

/// Squeeze-and-expand fusion of the three task streams at one level.
#[derive(Clone, Debug)]
pub struct Mdb {
    pub squeeze: Conv,
    pub expand: [Conv; 3],
}

impl Mdb {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> Self {
        Mdb {
            squeeze: Conv::new(store, &format!("{name}.squeeze"), c, c, 3, 1, rng),
            expand: Task::ALL.map(|t| {
                Conv::with_gain(
                    store,
                    &format!("{name}.expand.{}", t.short()),
                    c,
                    c,
                    3,
                    1,
                    1.0,
                    rng,
                )
            }),
        }
    }

    /// `ReLU(Conv(F_D + F_S + F_C))`.
    pub fn squeeze(&self, g: &mut Graph, p: &Bound, t: &FeatureTriple) -> Result<Var> {
        check_triple("squeeze", g, t)?;
        let sum = g.add(t[0], t[1])?;
        let sum = g.add(sum, t[2])?;
        self.squeeze.forward_relu(g, p, sum)
    }

    /// `F_m + Conv_m(F_DSC)` for each stream.
    pub fn expand(
        &self,
        g: &mut Graph,
        p: &Bound,
        t: &FeatureTriple,
        f_dsc: Var,
    ) -> Result<FeatureTriple> {
        check_triple("expand", g, t)?;
        if g.shape(f_dsc) != g.shape(t[0]) {
            return Err(Error::shape("expand", g.shape(t[0]), g.shape(f_dsc)));
        }
        let mut out = *t;
        for (o, conv) in out.iter_mut().zip(&self.expand) {
            let y = conv.forward(g, p, f_dsc)?;
            *o = g.add(*o, y)?;
        }
        Ok(out)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, t: &FeatureTriple) -> Result<FeatureTriple> {
        let f = self.squeeze(g, p, t)?;
        self.expand(g, p, t, f)
    }
}

/// 1×1 conv to one logit channel, bilinear upsample to `size×size`, sigmoid.
pub fn side_head(g: &mut Graph, p: &Bound, head: &Conv, f: Var, size: usize) -> Result<Var> {
    let logits = head.forward(g, p, f)?;
    let up = g.resize_bilinear(logits, size, size)?;
    g.sigmoid(up)
}

/// Top-down path from level `i` into level `i−1`.
#[derive(Clone, Debug)]
pub struct Merge {
    pub up: [Conv; 3],
    pub lateral: [Conv; 3],
}

impl Merge {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_coarse: usize,
        c_fine: usize,
        c_skip: usize,
        rng: &mut R,
    ) -> Self {
        Merge {
            up: Task::ALL.map(|t| {
                Conv::with_gain(
                    store,
                    &format!("{name}.up.{}", t.short()),
                    c_coarse,
                    c_fine,
                    3,
                    1,
                    1.0,
                    rng,
                )
            }),
            lateral: Task::ALL.map(|t| {
                Conv::with_gain(
                    store,
                    &format!("{name}.lateral.{}", t.short()),
                    c_skip,
                    c_fine,
                    1,
                    1,
                    1.0,
                    rng,
                )
            }),
        }
    }

    /// Per stream: `ReLU(Conv3(up2(F_en)) + Conv1(skip))`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        enhanced: &FeatureTriple,
        skip: Var,
    ) -> Result<FeatureTriple> {
        check_triple("top_down_merge", g, enhanced)?;
        let (h, w) = (g.shape(enhanced[0])[1], g.shape(enhanced[0])[2]);
        let skip_hw = (g.shape(skip)[1], g.shape(skip)[2]);
        if skip_hw != (2 * h, 2 * w) {
            return Err(Error::shape(
                "top_down_merge",
                g.shape(enhanced[0]),
                g.shape(skip),
            ));
        }
        let mut out = *enhanced;
        for (m, o) in out.iter_mut().enumerate() {
            let up = g.resize_bilinear(enhanced[m], 2 * h, 2 * w)?;
            let top = self.up[m].forward(g, p, up)?;
            let lat = self.lateral[m].forward(g, p, skip)?;
            let sum = g.add(top, lat)?;
            *o = g.relu(sum)?;
        }
        Ok(out)
    }
}

/// Side heads for every level, squeeze-and-expand blocks for levels 2–4
/// and the top-down merges. Level 5 fusion is supplied by the caller.
///
/// The finest level's squeeze-and-expand has no consumer (only its side
/// outputs are used), so it is not built.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub input_size: usize,
    /// `heads[level][task]`.
    pub heads: Vec<[Conv; 3]>,
    /// `mdbs[j]` serves level `j+2`.
    pub mdbs: Vec<Mdb>,
    /// `merges[i]` goes from level `i+2` into level `i+1`.
    pub merges: Vec<Merge>,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let dc = cfg.decoder_channels;
        let heads = (0..LEVELS)
            .map(|i| {
                Task::ALL.map(|t| {
                    Conv::with_gain(
                        store,
                        &format!("side{}.{}", i + 1, t.short()),
                        dc[i],
                        1,
                        1,
                        1,
                        1.0,
                        rng,
                    )
                })
            })
            .collect();
        let mdbs = (1..LEVELS - 1)
            .map(|i| Mdb::new(store, &format!("mdb{}", i + 1), dc[i], rng))
            .collect();
        let merges = (0..LEVELS - 1)
            .map(|i| {
                Merge::new(
                    store,
                    &format!("merge{}", i + 1),
                    dc[i + 1],
                    dc[i],
                    cfg.encoder.channels[i],
                    rng,
                )
            })
            .collect();
        Decoder {
            input_size: cfg.encoder.input_size,
            heads,
            mdbs,
            merges,
        }
    }

    /// Runs the decoder from the level-5 stream triple down to level 1.
    ///
    /// Side maps are read from each level's features before fusion; `fuse`
    /// is the level-5 fusion block.
    pub fn decode(
        &self,
        g: &mut Graph,
        p: &Bound,
        pyramid: &FeaturePyramid,
        top: FeatureTriple,
        fuse: impl Fn(&mut Graph, &FeatureTriple) -> Result<FeatureTriple>,
    ) -> Result<SideOutputs> {
        let mut maps = [[top[0]; 3]; LEVELS];
        let mut t = top;
        for level in (0..LEVELS).rev() {
            for (task, head) in self.heads[level].iter().enumerate() {
                maps[level][task] = side_head(g, p, head, t[task], self.input_size)?;
            }
            if level == 0 {
                break;
            }
            let enhanced = if level == LEVELS - 1 {
                fuse(g, &t)?
            } else {
                self.mdbs[level - 1].forward(g, p, &t)?
            };
            t = self.merges[level - 1].forward(g, p, &enhanced, pyramid[level - 1])?;
        }
        Ok(SideOutputs { maps })
    }
}
