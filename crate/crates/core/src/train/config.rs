use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Fusion, ModelConfig};
use crate::tensor::Precision;

/// Network size the training run starts from, before per-key overrides.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Preset {
    /// Transformer and filters at full size, toy encoder.
    #[default]
    Full,
    /// Narrow model for quick runs and tests.
    Reduced,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "reduced" => Ok(Preset::Reduced),
            _ => Err(Error::Config(format!(
                "unknown model preset '{s}' (full, reduced)"
            ))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Full => "full",
            Preset::Reduced => "reduced",
        })
    }
}

/// Everything a training run depends on. Serialized as flat `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub input_size: usize,
    pub batch: usize,
    pub epochs: usize,
    /// Total optimizer steps; 0 means `epochs` full passes.
    pub steps: usize,
    pub lr: f64,
    /// Epochs between learning-rate decays.
    pub decay_step: usize,
    pub decay_rate: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub model: Preset,
    pub fusion: Fusion,
    pub msf: bool,
    /// Transformer iterations; 0 keeps the preset's value.
    pub layers: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub augment: bool,
    pub precision: Precision,
    /// Structuring element side for contour ground truth.
    pub morph_m: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            input_size: 352,
            batch: 12,
            epochs: 50,
            steps: 0,
            lr: 1e-4,
            decay_step: 30,
            decay_rate: 0.9,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            model: Preset::Full,
            fusion: Fusion::Mft,
            msf: true,
            layers: 0,
            checkpoint_every: 0,
            augment: false,
            precision: Precision::Single,
            morph_m: 3,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "bad value '{value}' for {key}, expected true/false"
        ))),
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 19] = [
        "input_size",
        "batch",
        "epochs",
        "steps",
        "lr",
        "decay_step",
        "decay_rate",
        "seed",
        "beta1",
        "beta2",
        "eps",
        "model",
        "fusion",
        "msf",
        "layers",
        "checkpoint_every",
        "augment",
        "precision",
        "morph_m",
    ];

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "input_size" => self.input_size = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "decay_step" => self.decay_step = parse(key, value)?,
            "decay_rate" => self.decay_rate = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "model" => self.model = value.parse()?,
            "fusion" => self.fusion = value.parse()?,
            "msf" => self.msf = parse_bool(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "precision" => {
                self.precision = match value {
                    "single" => Precision::Single,
                    "double" => Precision::Double,
                    _ => {
                        return Err(Error::Config(format!(
                            "bad precision '{value}' (single, double)"
                        )))
                    }
                }
            }
            "morph_m" => self.morph_m = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "input_size" => self.input_size.to_string(),
            "batch" => self.batch.to_string(),
            "epochs" => self.epochs.to_string(),
            "steps" => self.steps.to_string(),
            "lr" => format!("{:e}", self.lr),
            "decay_step" => self.decay_step.to_string(),
            "decay_rate" => self.decay_rate.to_string(),
            "seed" => self.seed.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "eps" => format!("{:e}", self.eps),
            "model" => self.model.to_string(),
            "fusion" => self.fusion.to_string(),
            "msf" => self.msf.to_string(),
            "layers" => self.layers.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "augment" => self.augment.to_string(),
            "precision" => match self.precision {
                Precision::Single => "single".into(),
                Precision::Double => "double".into(),
            },
            "morph_m" => self.morph_m.to_string(),
            _ => return None,
        })
    }

    /// Every key, one `key = value` line each; `parse` reads it back exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("known key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_size < 32 || !self.input_size.is_multiple_of(32) {
            return bad(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            ));
        }
        for (k, v) in [
            ("batch", self.batch),
            ("epochs", self.epochs),
            ("decay_step", self.decay_step),
        ] {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad(format!("decay_rate {} must lie in (0, 1]", self.decay_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad(format!("eps {} must be positive", self.eps));
        }
        if self.morph_m.is_multiple_of(2) {
            return bad(format!("morph_m {} must be odd", self.morph_m));
        }
        self.model_config()?.validate()
    }

    /// Network configuration implied by the preset and overrides.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = match self.model {
            Preset::Full => ModelConfig::default(),
            Preset::Reduced => ModelConfig::reduced(),
        };
        m.encoder.input_size = self.input_size;
        m.fusion = self.fusion;
        m.msf = self.msf;
        if self.layers > 0 {
            m.mft.layers = self.layers;
        }
        Ok(m)
    }
}
