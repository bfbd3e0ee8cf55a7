use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adam_step, lr_schedule, Checkpoint};
use crate::data::{self, augment, AugmentConfig, MorphConfig, NamedSample, Sample};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig, LossReport};
use crate::metrics::{self, depth_metrics, MetricReport, DEPTH_EPS};
use crate::model::{Model, Prediction};
use crate::tensor::{Graph, Precision, Tensor};

/// Batch-mean losses of one optimizer step, measured before the update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    /// 1-based.
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossReport,
}

pub const LOSS_LOG: &str = "loss_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.mmft";

impl StepLog {
    pub fn csv_header() -> &'static str {
        "step,epoch,lr,total,l_d,l_s,l_c"
    }

    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{:e},{},{},{},{}",
            self.step, self.epoch, self.lr, l.total, l.l_d, l.l_s, l.l_c
        )
    }
}

fn tagged(name: &str, e: Error) -> Error {
    if e.is_io() {
        e
    } else {
        Error::Dataset(format!("{name}: {e}"))
    }
}

/// Element-wise mean of loss reports.
pub fn mean_loss(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let levels = reports.first().map_or(0, |r| r.per_level.len());
    let avg = |f: &dyn Fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    LossReport {
        l_d: avg(&|r| r.l_d),
        l_s: avg(&|r| r.l_s),
        l_c: avg(&|r| r.l_c),
        total: avg(&|r| r.total),
        per_level: (0..levels)
            .map(|i| [0, 1, 2].map(|t| avg(&|r| r.per_level[i][t])))
            .collect(),
    }
}

/// Loss of one sample and, when `with_grads`, the parameter gradients.
pub fn sample_loss(
    model: &Model,
    sample: &Sample,
    precision: Precision,
    with_grads: bool,
) -> Result<(LossReport, Option<Vec<Tensor>>)> {
    let mut g = Graph::with_precision(precision);
    let p = model.params.bind(&mut g, with_grads);
    let x = g.constant(sample.rgb.clone());
    let side = model.forward(&mut g, &p, x)?;
    let loss = total_loss(&mut g, &side, sample, &LossConfig::default())?;
    let report = loss.report(&g);
    if !with_grads {
        return Ok((report, None));
    }
    g.backward(loss.total)?;
    Ok((report, Some(p.grads(&g))))
}

/// Mean loss over a dataset without updating anything.
pub fn dataset_loss(
    model: &Model,
    data: &[NamedSample],
    precision: Precision,
) -> Result<LossReport> {
    let reports = data
        .iter()
        .map(|s| {
            sample_loss(model, &s.sample, precision, false)
                .map(|r| r.0)
                .map_err(|e| tagged(&s.name, e))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_loss(&reports))
}

/// Resizes every sample to the model input size.
pub fn prepare(data: &[NamedSample], size: usize, morph: MorphConfig) -> Result<Vec<NamedSample>> {
    data.iter()
        .map(|s| {
            let sample =
                data::resize_sample(&s.sample, size, morph).map_err(|e| tagged(&s.name, e))?;
            sample.validate(morph).map_err(|e| tagged(&s.name, e))?;
            Ok(NamedSample {
                name: s.name.clone(),
                sample,
            })
        })
        .collect()
}

/// Sample order of one epoch; a pure function of seed and epoch so that a
/// resumed run sees the same batches.
fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn open_log(out: &Path, fresh: bool) -> Result<File> {
    let path = out.join(LOSS_LOG);
    if fresh || !path.exists() {
        let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{}", StepLog::csv_header()).map_err(|e| Error::io(&path, e))?;
        Ok(f)
    } else {
        OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))
    }
}

/// Total optimizer steps a run with this configuration takes over `n` samples.
pub fn planned_steps(cfg: &super::TrainConfig, n: usize) -> u64 {
    if cfg.steps > 0 {
        cfg.steps as u64
    } else {
        (cfg.epochs * n.div_ceil(cfg.batch)) as u64
    }
}

/// Trains from `ck` (fresh or resumed) until the planned step count.
///
/// With `out`, appends to `loss_log.csv`, writes `step_NNNNNN.mmft` every
/// `checkpoint_every` steps and `final.mmft` at the end.
pub fn train(
    data: &[NamedSample],
    mut ck: Checkpoint,
    out: Option<&Path>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<(Checkpoint, Vec<StepLog>)> {
    let cfg = ck.config.clone();
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    let morph = MorphConfig::new(cfg.morph_m)?;
    let data = prepare(data, cfg.input_size, morph)?;
    let n = data.len();
    let per_epoch = n.div_ceil(cfg.batch);
    let total = planned_steps(&cfg, n);
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(open_log(dir, ck.step() == 0)?)
        }
        None => None,
    };
    let aug_cfg = AugmentConfig::default();
    let mut logs = Vec::new();
    while ck.step() < total {
        let s = ck.step() as usize;
        let (epoch, b) = (s / per_epoch, s % per_epoch);
        let order = epoch_order(cfg.seed, epoch, n);
        let batch = &order[b * cfg.batch..((b + 1) * cfg.batch).min(n)];
        let lr = lr_schedule(epoch, &cfg);

        let mut grads: Option<Vec<Tensor>> = None;
        let mut reports = Vec::with_capacity(batch.len());
        for (j, &i) in batch.iter().enumerate() {
            let item = &data[i];
            let augmented;
            let sample = if cfg.augment {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa06);
                rng.set_stream((s * cfg.batch + j) as u64);
                augmented = augment(&item.sample, &aug_cfg, morph, &mut rng)
                    .map_err(|e| tagged(&item.name, e))?;
                &augmented
            } else {
                &item.sample
            };
            let (report, g) = sample_loss(&ck.model, sample, cfg.precision, true)
                .map_err(|e| tagged(&item.name, e))?;
            let g = g.expect("gradients requested");
            reports.push(report);
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, x) in acc.iter_mut().zip(&g) {
                        for (p, q) in a.data_mut().iter_mut().zip(x.data()) {
                            *p += q;
                        }
                    }
                }
            }
        }
        let mut grads = grads.expect("non-empty batch");
        let inv = 1.0 / batch.len() as f64;
        for t in &mut grads {
            t.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        adam_step(&mut ck.model.params, &grads, &mut ck.adam, lr, &cfg)?;

        let entry = StepLog {
            step: ck.step(),
            epoch,
            lr,
            loss: mean_loss(&reports),
        };
        on_step(&entry);
        if let (Some(f), Some(dir)) = (&mut log_file, out) {
            let path = dir.join(LOSS_LOG);
            writeln!(f, "{}", entry.csv_row()).map_err(|e| Error::io(&path, e))?;
            if cfg.checkpoint_every > 0 && entry.step.is_multiple_of(cfg.checkpoint_every as u64) {
                ck.save(dir.join(format!("step_{:06}.mmft", entry.step)))?;
            }
        }
        logs.push(entry);
    }
    if let Some(dir) = out {
        ck.save(dir.join(FINAL_CHECKPOINT))?;
    }
    Ok((ck, logs))
}

/// Metrics of one prediction. Depth metrics are skipped when the sample has no depth.
pub fn score(pred: &Prediction, sample: &Sample) -> Result<MetricReport> {
    let mut r = MetricReport::saliency(&pred.saliency, &sample.saliency_gt)?;
    if sample.has_depth() {
        r.add_depth(&depth_metrics(
            &pred.depth,
            &sample.depth_gt,
            &sample.valid_mask,
            DEPTH_EPS,
        )?);
    }
    Ok(r)
}

/// Per-image metrics and their means.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<(String, MetricReport)>,
    pub mean: MetricReport,
}

impl Evaluation {
    pub fn from_rows(rows: Vec<(String, MetricReport)>) -> Self {
        let reports: Vec<MetricReport> = rows.iter().map(|r| r.1.clone()).collect();
        Evaluation {
            mean: MetricReport::mean(&reports),
            rows,
        }
    }

    /// Header, one row per image, then a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = metrics::csv_header();
        s.push('\n');
        for (name, r) in &self.rows {
            s += &metrics::csv_row(name, r);
            s.push('\n');
        }
        s += &metrics::csv_row("mean", &self.mean);
        s.push('\n');
        s
    }
}

/// Runs the model on every sample (resized to the input size) and scores the finest outputs.
pub fn evaluate(
    model: &Model,
    data: &[NamedSample],
    precision: Precision,
    morph: MorphConfig,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Dataset("no evaluation samples".into()));
    }
    let data = prepare(data, model.input_size(), morph)?;
    let rows = data
        .iter()
        .map(|s| {
            let pred = model
                .predict(&s.sample.rgb, precision)
                .map_err(|e| tagged(&s.name, e))?;
            let r = score(&pred, &s.sample).map_err(|e| tagged(&s.name, e))?;
            Ok((s.name.clone(), r))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation::from_rows(rows))
}

pub const PREDICTION_FILES: [&str; 3] = ["depth.pgm", "saliency.pgm", "contour.pgm"];

/// Predicts from an RGB image file alone and writes the three maps as PGM.
pub fn predict_image(
    model: &Model,
    image: impl AsRef<Path>,
    out: impl AsRef<Path>,
    precision: Precision,
) -> Result<Prediction> {
    let (image, out) = (image.as_ref(), out.as_ref());
    let rgb = data::load_image(image)?;
    if rgb.shape()[0] != 3 {
        return Err(Error::invalid(
            "predict",
            format!("{} is not a colour (P6) image", image.display()),
        ));
    }
    let s = model.input_size();
    let rgb = if rgb.hw() == (s, s) {
        rgb
    } else {
        data::resize_bilinear_tensor(&rgb, s, s)
    };
    let pred = model.predict(&rgb, precision)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (file, map) in PREDICTION_FILES
        .iter()
        .zip([&pred.depth, &pred.saliency, &pred.contour])
    {
        data::save_image(map, out.join(file))?;
    }
    Ok(pred)
}
