//! Named finite-difference gradient checks for every graph operation, the
//! model's building blocks, the losses, and a full reduced model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{generate_synthetic, Sample};
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig};
use crate::model::decoder::{self, Mdb, Merge};
use crate::model::encoder::{Encoder, Stems};
use crate::model::mft::{self, FilterGenerator, MftBlock, Mhsa, NonLocalBlock, TransformerLayer};
use crate::model::{
    Bound, Conv, EncoderConfig, MftConfig, Model, ModelConfig, ParamStore, SideOutputs, LEVELS,
};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Graph, Tensor, Var};

pub const OPS: [&str; 27] = [
    "add",
    "add_broadcast",
    "sub",
    "mul",
    "div",
    "scale",
    "shift",
    "neg",
    "relu",
    "sigmoid",
    "ln",
    "abs",
    "clamp",
    "sum",
    "mean",
    "concat",
    "reshape",
    "permute",
    "matmul",
    "matmul_batched",
    "conv2d",
    "conv2d_strided",
    "softmax",
    "resize_bilinear",
    "avgpool",
    "separable_filter_valid",
    "dynamic_filter",
];

pub const MODULES: [&str; 14] = [
    "mhsa",
    "transformer",
    "filter",
    "mft",
    "mdb",
    "merge",
    "side_head",
    "encoder",
    "stems",
    "nonlocal",
    "depth_loss",
    "saliency_loss",
    "contour_loss",
    "total_loss",
];

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values with magnitude in `[0.1, 1)` and random sign, clear of kinks at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ w ⊙ x` with fixed pseudo-random weights, so every output element
/// contributes with a different coefficient.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = uniform(&mut rng, g.shape(x), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    g.sum(p)
}

fn options(seed: u64, max_coords: Option<usize>) -> GradCheckOptions {
    GradCheckOptions {
        max_coords,
        seed,
        ..GradCheckOptions::default()
    }
}

/// Gradient check of one graph operation on random inputs.
pub fn check_op(name: &str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = options(seed, None);
    let ws = seed;
    let s = [2, 3, 4];
    macro_rules! unary {
        ($leaf:expr, |$g:ident, $x:ident| $body:expr) => {
            grad_check(
                |$g, v| {
                    let $x = v[0];
                    let y = $body?;
                    weighted_sum($g, y, ws)
                },
                &[$leaf],
                &opts,
            )
        };
    }
    macro_rules! binary {
        ($a:expr, $b:expr, |$g:ident, $x:ident, $y:ident| $body:expr) => {
            grad_check(
                |$g, v| {
                    let ($x, $y) = (v[0], v[1]);
                    let out = $body?;
                    weighted_sum($g, out, ws)
                },
                &[$a, $b],
                &opts,
            )
        };
    }
    match name {
        "add" => binary!(
            uniform(&mut rng, &s, -1.0, 1.0),
            uniform(&mut rng, &s, -1.0, 1.0),
            |g, a, b| g.add(a, b)
        ),
        "add_broadcast" => binary!(
            uniform(&mut rng, &s, -1.0, 1.0),
            uniform(&mut rng, &[3, 4], -1.0, 1.0),
            |g, a, b| g.add(a, b)
        ),
        "sub" => binary!(
            uniform(&mut rng, &s, -1.0, 1.0),
            uniform(&mut rng, &[4], -1.0, 1.0),
            |g, a, b| g.sub(a, b)
        ),
        "mul" => binary!(
            uniform(&mut rng, &s, -1.0, 1.0),
            uniform(&mut rng, &[3, 4], -1.0, 1.0),
            |g, a, b| g.mul(a, b)
        ),
        "div" => binary!(
            uniform(&mut rng, &s, -1.0, 1.0),
            uniform(&mut rng, &s, 0.5, 1.5),
            |g, a, b| g.div(a, b)
        ),
        "scale" => unary!(uniform(&mut rng, &s, -1.0, 1.0), |g, x| g.scale(x, -1.7)),
        "shift" => unary!(uniform(&mut rng, &s, -1.0, 1.0), |g, x| {
            let y = g.shift(x, 0.3)?;
            g.mul(y, y)
        }),
        "neg" => unary!(uniform(&mut rng, &s, -1.0, 1.0), |g, x| g.neg(x)),
        "relu" => unary!(away_from_zero(&mut rng, &s), |g, x| g.relu(x)),
        "sigmoid" => unary!(uniform(&mut rng, &s, -3.0, 3.0), |g, x| g.sigmoid(x)),
        "ln" => unary!(uniform(&mut rng, &s, 0.2, 2.0), |g, x| g.ln(x)),
        "abs" => unary!(away_from_zero(&mut rng, &s), |g, x| g.abs(x)),
        "clamp" => {
            // keep inputs off the clamp bounds ±0.5
            let x = Tensor::from_fn(s.to_vec(), |_| {
                let v: f64 = rng.random_range(-1.0..1.0);
                if (v.abs() - 0.5).abs() < 0.05 {
                    v * 1.3
                } else {
                    v
                }
            });
            unary!(x, |g, x| g.clamp(x, -0.5, 0.5))
        }
        "sum" => unary!(uniform(&mut rng, &s, -1.0, 1.0), |g, x| {
            let y = g.sum(x)?;
            g.mul(y, y)
        }),
        "mean" => unary!(uniform(&mut rng, &s, -1.0, 1.0), |g, x| {
            let y = g.mean(x)?;
            g.mul(y, y)
        }),
        "concat" => binary!(
            uniform(&mut rng, &s, -1.0, 1.0),
            uniform(&mut rng, &[2, 5, 4], -1.0, 1.0),
            |g, a, b| g.concat(&[a, b, a], 1)
        ),
        "reshape" => unary!(uniform(&mut rng, &s, -1.0, 1.0), |g, x| {
            let r = g.reshape(x, &[6, 4])?;
            g.mul(r, r)
        }),
        "permute" => unary!(uniform(&mut rng, &s, -1.0, 1.0), |g, x| {
            let r = g.permute(x, &[2, 0, 1])?;
            g.mul(r, r)
        }),
        "matmul" => binary!(
            uniform(&mut rng, &[4, 5], -1.0, 1.0),
            uniform(&mut rng, &[5, 3], -1.0, 1.0),
            |g, a, b| g.matmul(a, b)
        ),
        "matmul_batched" => binary!(
            uniform(&mut rng, &[2, 4, 5], -1.0, 1.0),
            uniform(&mut rng, &[2, 5, 3], -1.0, 1.0),
            |g, a, b| g.matmul(a, b)
        ),
        "conv2d" | "conv2d_strided" => {
            let stride = if name == "conv2d" { 1 } else { 2 };
            let leaves = [
                uniform(&mut rng, &[3, 7, 7], -1.0, 1.0),
                uniform(&mut rng, &[4, 3, 3, 3], -1.0, 1.0),
                uniform(&mut rng, &[4], -1.0, 1.0),
                uniform(&mut rng, &[2, 3, 1, 1], -1.0, 1.0),
            ];
            grad_check(
                |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), stride, 1)?;
                    let z = g.conv2d(v[0], v[3], None, stride, 0)?;
                    let a = weighted_sum(g, y, ws)?;
                    let b = weighted_sum(g, z, ws + 1)?;
                    g.add(a, b)
                },
                &leaves,
                &opts,
            )
        }
        "softmax" => unary!(uniform(&mut rng, &s, -2.0, 2.0), |g, x| {
            let a = g.softmax(x, 2)?;
            let b = g.softmax(x, 1)?;
            g.add(a, b)
        }),
        "resize_bilinear" => unary!(uniform(&mut rng, &[2, 5, 5], -1.0, 1.0), |g, x| {
            let up = g.resize_bilinear(x, 8, 11)?;
            let down = g.resize_bilinear(up, 3, 4)?;
            let z = g.resize_bilinear(down, 5, 5)?;
            g.mul(z, x)
        }),
        "avgpool" => unary!(uniform(&mut rng, &[2, 6, 6], -1.0, 1.0), |g, x| {
            let a = g.avgpool(x, 3, 1, 1)?;
            let b = g.avgpool(x, 3, 2, 1)?;
            let b = g.resize_bilinear(b, 6, 6)?;
            g.mul(a, b)
        }),
        "separable_filter_valid" => unary!(uniform(&mut rng, &[2, 7, 6], -1.0, 1.0), |g, x| {
            let y = g.separable_filter_valid(x, &[0.25, 0.5, 0.25])?;
            g.mul(y, y)
        }),
        "dynamic_filter" => binary!(
            uniform(&mut rng, &[4, 5, 5], -1.0, 1.0),
            uniform(&mut rng, &[2, 5, 5, 3, 3], -1.0, 1.0),
            |g, x, f| g.dynamic_filter(x, f)
        ),
        _ => Err(Error::invalid("gradcheck", format!("unknown op '{name}'"))),
    }
}

/// Checks `f` with respect to every parameter in `store` and every tensor
/// in `inputs`; `f` receives the bound parameters and the input vars.
///
/// Parameters are nudged by up to ±0.1 first: zero-initialized biases
/// behind dead ReLUs would otherwise put whole feature maps exactly on a
/// kink, and near-uniform attention at initialization has gradients too
/// small to resolve against finite-difference round-off.
fn check_with_store(
    store: &ParamStore,
    inputs: Vec<Tensor>,
    opts: &GradCheckOptions,
    f: impl Fn(&mut Graph, &Bound, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let n = store.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x717e);
    let mut leaves: Vec<Tensor> = store
        .ids()
        .map(|id| {
            let v = store.value(id);
            Tensor::from_fn(v.shape().to_vec(), |i| {
                v.data()[i] + rng.random_range(-0.1..0.1)
            })
        })
        .collect();
    leaves.extend(inputs);
    grad_check(
        |g, vars| {
            let p = Bound::from_vars(vars[..n].to_vec());
            f(g, &p, &vars[n..])
        },
        &leaves,
        opts,
    )
}

fn small_mft(d_m: usize) -> MftConfig {
    MftConfig {
        nh: 2,
        d_m,
        d_k: 3,
        layers: 2,
        groups: 2,
        kernel: 3,
        ffn_mult: 2,
    }
}

/// Five `1×12×12` maps strictly inside `(0,1)`.
fn level_maps(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    (0..LEVELS)
        .map(|_| uniform(rng, &[1, 12, 12], 0.05, 0.95))
        .collect()
}

fn binary_map(rng: &mut ChaCha8Rng, p: f64) -> Tensor {
    Tensor::from_fn([1, 12, 12], |_| rng.random_bool(p) as u8 as f64)
}

/// Depth ground truth at least 0.02 away from every prediction, so the
/// L1 term stays clear of its kink.
fn depth_gt_for(rng: &mut ChaCha8Rng, preds: &[Tensor]) -> Tensor {
    Tensor::from_fn([1, 12, 12], |i| loop {
        let v: f64 = rng.random_range(0.1..0.9);
        if preds.iter().all(|p| (p.data()[i] - v).abs() > 0.02) {
            break v;
        }
    })
}

fn loss_sample(rng: &mut ChaCha8Rng, preds: &[Tensor]) -> Sample {
    let saliency_gt = binary_map(rng, 0.4);
    Sample {
        rgb: uniform(rng, &[3, 12, 12], 0.0, 1.0),
        depth_gt: depth_gt_for(rng, preds),
        contour_gt: binary_map(rng, 0.2),
        valid_mask: binary_map(rng, 0.8),
        saliency_gt,
    }
}

/// Gradient check of one model block or loss. `max_coords` caps the
/// coordinates checked per leaf.
pub fn check_module(name: &str, seed: u64, max_coords: Option<usize>) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = options(seed, max_coords);
    let mut store = ParamStore::new();
    let ws = seed;
    match name {
        "mhsa" => {
            let m = Mhsa::new(&mut store, "mhsa", 8, 2, 3, 1.0, &mut rng);
            let inputs = vec![
                uniform(&mut rng, &[4, 8], -1.0, 1.0),
                uniform(&mut rng, &[4, 8], -1.0, 1.0),
            ];
            check_with_store(&store, inputs, &opts, |g, p, x| {
                let y = m.forward(g, p, x[0], x[0], x[1])?;
                weighted_sum(g, y, ws)
            })
        }
        "transformer" => {
            let cfg = small_mft(8);
            let layer = TransformerLayer::new(&mut store, "layer", &cfg, &mut rng);
            let pos = mft::positional_encoding(2, 3, 8)?;
            let inputs = vec![uniform(&mut rng, &[6, 8], -1.0, 1.0)];
            check_with_store(&store, inputs, &opts, |g, p, x| {
                let pos = g.constant(pos.clone());
                let y = layer.forward(g, p, x[0], pos)?;
                weighted_sum(g, y, ws)
            })
        }
        "filter" => {
            let cfg = small_mft(12);
            let gen = FilterGenerator::new(&mut store, "filter", 4, &cfg, &mut rng);
            let inputs = vec![
                uniform(&mut rng, &[4, 4, 4], -1.0, 1.0),
                uniform(&mut rng, &[4, 4, 4], -1.0, 1.0),
            ];
            check_with_store(&store, inputs, &opts, |g, p, x| {
                let f = gen.forward(g, p, x[0])?;
                let y = mft::apply_grouped_dynamic_filter(g, x[1], f)?;
                weighted_sum(g, y, ws)
            })
        }
        "mft" => {
            let cfg = small_mft(12);
            let block = MftBlock::new(&mut store, 4, &cfg, true, &mut rng);
            let inputs = (0..3)
                .map(|_| uniform(&mut rng, &[4, 3, 3], -1.0, 1.0))
                .collect();
            check_with_store(&store, inputs, &opts, |g, p, x| {
                let out = block.forward(g, p, &[x[0], x[1], x[2]])?;
                let cat = g.concat(&out, 0)?;
                weighted_sum(g, cat, ws)
            })
        }
        "nonlocal" => {
            let block = NonLocalBlock::new(&mut store, 4, &mut rng);
            let inputs = (0..3)
                .map(|_| uniform(&mut rng, &[4, 3, 3], -1.0, 1.0))
                .collect();
            check_with_store(&store, inputs, &opts, |g, p, x| {
                let out = block.forward(g, p, &[x[0], x[1], x[2]])?;
                let cat = g.concat(&out, 0)?;
                weighted_sum(g, cat, ws)
            })
        }
        "mdb" => {
            let block = Mdb::new(&mut store, "mdb", 3, &mut rng);
            let inputs = (0..3)
                .map(|_| uniform(&mut rng, &[3, 5, 5], -1.0, 1.0))
                .collect();
            check_with_store(&store, inputs, &opts, |g, p, x| {
                let out = block.forward(g, p, &[x[0], x[1], x[2]])?;
                let cat = g.concat(&out, 0)?;
                weighted_sum(g, cat, ws)
            })
        }
        "merge" => {
            let block = Merge::new(&mut store, "merge", 4, 3, 2, &mut rng);
            let mut inputs: Vec<Tensor> = (0..3)
                .map(|_| uniform(&mut rng, &[4, 3, 3], -1.0, 1.0))
                .collect();
            inputs.push(uniform(&mut rng, &[2, 6, 6], -1.0, 1.0));
            check_with_store(&store, inputs, &opts, |g, p, x| {
                let out = block.forward(g, p, &[x[0], x[1], x[2]], x[3])?;
                let cat = g.concat(&out, 0)?;
                weighted_sum(g, cat, ws)
            })
        }
        "side_head" => {
            let head = Conv::with_gain(&mut store, "head", 3, 1, 1, 1, 1.0, &mut rng);
            let inputs = vec![uniform(&mut rng, &[3, 4, 4], -1.0, 1.0)];
            check_with_store(&store, inputs, &opts, |g, p, x| {
                let y = decoder::side_head(g, p, &head, x[0], 8)?;
                weighted_sum(g, y, ws)
            })
        }
        "encoder" => {
            let cfg = EncoderConfig {
                channels: [2, 2, 3, 3, 4],
                input_size: 32,
            };
            let enc = Encoder::new(&mut store, &cfg, &mut rng);
            let inputs = vec![uniform(&mut rng, &[3, 32, 32], 0.0, 1.0)];
            check_with_store(&store, inputs, &opts, |g, p, x| {
                let pyr = enc.encode(g, p, x[0])?;
                let mut acc = weighted_sum(g, pyr[0], ws)?;
                for (i, &f) in pyr.iter().enumerate().skip(1) {
                    let s = weighted_sum(g, f, ws + i as u64)?;
                    acc = g.add(acc, s)?;
                }
                Ok(acc)
            })
        }
        "stems" => {
            let stems = Stems::new(&mut store, 4, 3, &mut rng);
            let inputs = vec![uniform(&mut rng, &[4, 2, 2], -1.0, 1.0)];
            check_with_store(&store, inputs, &opts, |g, p, x| {
                let out = stems.forward(g, p, x[0])?;
                let cat = g.concat(&out, 0)?;
                weighted_sum(g, cat, ws)
            })
        }
        "depth_loss" => {
            let preds = level_maps(&mut rng);
            let gt = depth_gt_for(&mut rng, &preds);
            let valid = binary_map(&mut rng, 0.8);
            let cfg = LossConfig::default();
            grad_check(
                |g, v| losses::depth_loss(g, v, &gt, &valid, &cfg),
                &preds,
                &opts,
            )
        }
        "saliency_loss" => {
            let preds = level_maps(&mut rng);
            let gt = binary_map(&mut rng, 0.4);
            let cfg = LossConfig::default();
            grad_check(|g, v| losses::saliency_loss(g, v, &gt, &cfg), &preds, &opts)
        }
        "contour_loss" => {
            let preds = level_maps(&mut rng);
            let gt = binary_map(&mut rng, 0.2);
            let cfg = LossConfig::default();
            grad_check(|g, v| losses::contour_loss(g, v, &gt, &cfg), &preds, &opts)
        }
        "total_loss" => {
            let preds: Vec<Tensor> = (0..3 * LEVELS)
                .map(|_| uniform(&mut rng, &[1, 12, 12], 0.05, 0.95))
                .collect();
            let sample = loss_sample(&mut rng, &preds);
            let cfg = LossConfig::default();
            grad_check(
                |g, v| {
                    let side = SideOutputs {
                        maps: std::array::from_fn(|l| std::array::from_fn(|t| v[3 * l + t])),
                    };
                    Ok(losses::total_loss(g, &side, &sample, &cfg)?.total)
                },
                &preds,
                &opts,
            )
        }
        _ => Err(Error::invalid(
            "gradcheck",
            format!("unknown module '{name}'"),
        )),
    }
}

/// End-to-end check of a reduced model on a synthetic image: the scalar is
/// a fixed random weighting of all fifteen side outputs. At most
/// `max_coords` coordinates are checked per parameter tensor.
///
/// The losses are checked separately on free-standing maps; composing them
/// here would bury small parameter gradients under the round-off of
/// `ln(1 − p)` for saturated probabilities.
pub fn check_model(seed: u64, max_coords: Option<usize>) -> Result<GradCheckReport> {
    let model = Model::new(ModelConfig::reduced(), seed)?;
    let s = model.input_size();
    let rgb = generate_synthetic(seed, s, s, 3)?.rgb;
    check_with_store(
        &model.params,
        Vec::new(),
        &options(seed, max_coords),
        |g, p, _| {
            let x = g.constant(rgb.clone());
            let side = model.forward(g, p, x)?;
            let maps: Vec<Var> = side.maps.iter().flatten().copied().collect();
            let all = g.concat(&maps, 0)?;
            weighted_sum(g, all, seed)
        },
    )
}

/// Runs a named scope: `op:<name>`, `op` (all ops), `module:<name>`,
/// `module` (all modules) or `model`.
pub fn check_scope(scope: &str, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let module_coords = Some(24);
    let model_coords = Some(4);
    match scope.split_once(':') {
        Some(("op", name)) => Ok(vec![(format!("op:{name}"), check_op(name, seed)?)]),
        Some(("module", name)) => Ok(vec![(
            format!("module:{name}"),
            check_module(name, seed, module_coords)?,
        )]),
        None if scope == "op" => OPS
            .iter()
            .map(|n| Ok((format!("op:{n}"), check_op(n, seed)?)))
            .collect(),
        None if scope == "module" => MODULES
            .iter()
            .map(|n| Ok((format!("module:{n}"), check_module(n, seed, module_coords)?)))
            .collect(),
        None if scope == "model" => Ok(vec![(
            "model".to_string(),
            check_model(seed, model_coords)?,
        )]),
        _ => Err(Error::invalid(
            "gradcheck",
            format!("unknown scope '{scope}' (expected op[:name], module[:name] or model)"),
        )),
    }
}
