//! Binary checkpoints: `MMFT`, version, record count, then named tensors of
//! little-endian `f32`. Run metadata travels as a byte-valued `meta` record.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{AdamState, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MMFT";
pub const FORMAT_VERSION: u32 = 1;
const META: &str = "meta";
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

/// Model parameters, optimizer state and the configuration that built them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
}

struct Record {
    name: String,
    dims: Vec<usize>,
    values: Vec<f32>,
}

fn put_record(out: &mut Vec<u8>, name: &str, dims: &[usize], values: impl Iterator<Item = f32>) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend((d as u32).to_le_bytes());
    }
    for v in values {
        out.extend(v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn record(&mut self) -> Result<Record> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        let rank = self.take(1)?[0] as usize;
        let dims = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| Error::Checkpoint(format!("{name}: dims overflow")))?;
        let values = self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Record { name, dims, values })
    }
}

impl Checkpoint {
    /// Fresh model and optimizer state for `config`.
    pub fn init(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model_config()?, config.seed)?;
        let adam = AdamState::new(&model.params);
        Ok(Checkpoint {
            config,
            model,
            adam,
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    fn meta_text(&self) -> String {
        format!("step = {}\n{}", self.adam.step, self.config.to_text())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params = &self.model.params;
        let mut out = Vec::with_capacity(12 + params.numel() * 12);
        out.extend(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend((1 + 3 * params.len() as u32).to_le_bytes());
        let meta = self.meta_text();
        put_record(&mut out, META, &[meta.len()], meta.bytes().map(f32::from));
        let f32s = |t: &Tensor| {
            t.data()
                .iter()
                .map(|&v| v as f32)
                .collect::<Vec<_>>()
                .into_iter()
        };
        for (k, id) in params.ids().enumerate() {
            let v = params.value(id);
            let name = params.name(id);
            put_record(&mut out, name, v.shape(), f32s(v));
            put_record(
                &mut out,
                &format!("{M_PREFIX}{name}"),
                v.shape(),
                f32s(&self.adam.m[k]),
            );
            put_record(
                &mut out,
                &format!("{V_PREFIX}{name}"),
                v.shape(),
                f32s(&self.adam.v[k]),
            );
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Checkpoint(
                "bad magic, not an MMFT checkpoint".into(),
            ));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut records: HashMap<String, Record> = HashMap::new();
        for _ in 0..count {
            let rec = r.record()?;
            if records.contains_key(&rec.name) {
                return Err(Error::Checkpoint(format!("duplicate record {}", rec.name)));
            }
            records.insert(rec.name.clone(), rec);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }

        let meta = records
            .remove(META)
            .ok_or_else(|| Error::Checkpoint("missing meta record".into()))?;
        let text: String = meta
            .values
            .iter()
            .map(|&v| ((0.0..=255.0).contains(&v) && v.fract() == 0.0).then_some(v as u8 as char))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Checkpoint("meta record is not text".into()))?;
        let (step_line, cfg_text) = text.split_once('\n').unwrap_or((&text, ""));
        let step = step_line
            .strip_prefix("step = ")
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| Error::Checkpoint("meta record lacks a step counter".into()))?;
        let config = TrainConfig::parse(cfg_text)
            .map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;

        let mut ck = Checkpoint::init(config)?;
        ck.adam.step = step;
        let ids: Vec<_> = ck.model.params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let name = ck.model.params.name(id).to_string();
            let shape = ck.model.params.value(id).shape().to_vec();
            let mut take = |key: String| -> Result<Tensor> {
                let rec = records
                    .remove(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing record {key}")))?;
                if rec.dims != shape {
                    return Err(Error::Checkpoint(format!(
                        "{key}: stored dims {:?}, model expects {shape:?}",
                        rec.dims
                    )));
                }
                Tensor::new(
                    shape.clone(),
                    rec.values.iter().map(|&v| v as f64).collect(),
                )
            };
            let value = take(name.clone())?;
            ck.adam.m[k] = take(format!("{M_PREFIX}{name}"))?;
            ck.adam.v[k] = take(format!("{V_PREFIX}{name}"))?;
            ck.model.params.set(id, value)?;
        }
        if let Some(extra) = records.keys().min() {
            return Err(Error::Checkpoint(format!(
                "record {extra} does not belong to the model"
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
