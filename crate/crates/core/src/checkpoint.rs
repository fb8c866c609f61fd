//! Checkpoint files: a `key = value` text header terminated by `end_header`,
//! followed by one binary block per parameter array.
//!
//! Block layout (little endian): `u32` name length, UTF-8 name, `u32` rank,
//! `u64` per dimension, then `f64` values. Blocks appear in
//! [`EncoderModel::named_params`] order, so saving a loaded checkpoint
//! reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gating::GateParams;
use crate::model::{EncoderModel, ModelConfig, GATE_LOGITS, GATE_SENSITIVITY};
use crate::tensor::Array;
use crate::training::TrainConfig;

const MAGIC: &str = "budattn-checkpoint";
const FORMAT_VERSION: u32 = 1;
const END_HEADER: &str = "end_header";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: EncoderModel,
    /// Configuration of the run that produced the weights.
    pub train: Option<TrainConfig>,
    pub best_val_accuracy: f64,
    pub epoch: usize,
    /// Free-form provenance such as data seed or warm-start source.
    pub meta: BTreeMap<String, String>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("{MAGIC}\nformat_version = {FORMAT_VERSION}\n");
        let mut line = |k: &str, v: &str| -> Result<()> {
            if v.contains('\n') || k.contains('=') || k.contains('\n') {
                return Err(bad(format!("header entry `{k}` cannot contain newlines or `=`")));
            }
            header.push_str(&format!("{k} = {v}\n"));
            Ok(())
        };
        for (k, v) in self.model.config.to_kv() {
            line(&format!("model.{k}"), &v)?;
        }
        match &self.model.gates {
            Some(g) => {
                line("gate.present", "true")?;
                line("gate.tau", &format!("{:?}", g.tau))?;
                line("gate.eps", &format!("{:?}", g.eps))?;
            }
            None => line("gate.present", "false")?,
        }
        match &self.train {
            Some(t) => {
                line("train.present", "true")?;
                for (k, v) in t.to_kv() {
                    line(&format!("train.{k}"), &v)?;
                }
            }
            None => line("train.present", "false")?,
        }
        line("best_val_accuracy", &format!("{:?}", self.best_val_accuracy))?;
        line("epoch", &self.epoch.to_string())?;
        for (k, v) in &self.meta {
            line(&format!("meta.{k}"), v)?;
        }
        let params = self.model.named_params();
        line("params", &params.len().to_string())?;
        header.push_str(END_HEADER);
        header.push('\n');

        let mut out = header.into_bytes();
        for (name, array) in params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(array.ndim() as u32).to_le_bytes());
            for &d in array.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in array.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let marker = format!("\n{END_HEADER}\n");
        let split = bytes
            .windows(marker.len())
            .position(|w| w == marker.as_bytes())
            .ok_or_else(|| bad("missing end_header"))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8"))?;
        let mut body = Reader {
            bytes: &bytes[split + marker.len()..],
        };
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("not a checkpoint file"));
        }
        let mut kv = BTreeMap::new();
        let mut meta = BTreeMap::new();
        let mut train_pairs = Vec::new();
        let mut model_cfg = ModelConfig::default();
        for l in lines {
            let (k, v) = l.split_once(" = ").ok_or_else(|| bad(format!("malformed header line `{l}`")))?;
            if let Some(m) = k.strip_prefix("meta.") {
                meta.insert(m.to_string(), v.to_string());
            } else if let Some(m) = k.strip_prefix("model.") {
                model_cfg.set(m, v).map_err(bad)?;
            } else if k != "train.present" && k.starts_with("train.") {
                train_pairs.push((&k[6..], v));
            } else {
                kv.insert(k, v);
            }
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("missing header key `{k}`")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse::<f64>().map_err(|e| bad(format!("{k}: {e}"))) };
        let int = |k: &str| -> Result<usize> { get(k)?.parse::<usize>().map_err(|e| bad(format!("{k}: {e}"))) };
        let version = int("format_version")?;
        if version != FORMAT_VERSION as usize {
            return Err(bad(format!("unsupported format_version {version}")));
        }
        model_cfg.validate()?;
        let has_gates = get("gate.present")? == "true";
        let train = if get("train.present")? == "true" {
            let t = TrainConfig::from_kv(train_pairs).map_err(bad)?;
            t.validate()?;
            Some(t)
        } else {
            None
        };
        let count = int("params")?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let (name, array) = body.block()?;
            if arrays.insert(name.clone(), array).is_some() {
                return Err(bad(format!("duplicate parameter `{name}`")));
            }
        }
        if !body.bytes.is_empty() {
            return Err(bad(format!("{} trailing bytes", body.bytes.len())));
        }
        let gates = if has_gates {
            let logits = arrays.remove(GATE_LOGITS).ok_or_else(|| bad("missing gate logits"))?;
            let sens = arrays.remove(GATE_SENSITIVITY).ok_or_else(|| bad("missing gate sensitivity"))?;
            Some(GateParams::new(logits, sens, num("gate.tau")?, num("gate.eps")?)?)
        } else {
            None
        };
        let reference = EncoderModel::new(model_cfg.clone(), 0)?;
        for (name, want) in &reference.params {
            match arrays.get(name) {
                Some(a) if a.shape() == want.shape() => {}
                Some(a) => {
                    return Err(bad(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        a.shape(),
                        want.shape()
                    )))
                }
                None => return Err(bad(format!("missing parameter `{name}`"))),
            }
        }
        if let Some(extra) = arrays.keys().find(|k| !reference.params.contains_key(*k)) {
            return Err(bad(format!("unexpected parameter `{extra}`")));
        }
        if let Some(g) = &gates {
            if g.layers() != model_cfg.layers || g.heads() != model_cfg.heads {
                return Err(bad("gate shape does not match the model"));
            }
        }
        Ok(Checkpoint {
            model: EncoderModel {
                config: model_cfg,
                params: arrays,
                gates,
            },
            train,
            best_val_accuracy: num("best_val_accuracy")?,
            epoch: int("epoch")?,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(bad("truncated parameter block"));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn block(&mut self) -> Result<(String, Array)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| bad("parameter name is not UTF-8"))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| bad("parameter too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Array::from_vec(&shape, data)?))
    }
}
