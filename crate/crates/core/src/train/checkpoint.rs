//! Binary checkpoint: `AFPMCKPT`, a little-endian `u32` header length, a JSON
//! header, then little-endian `f32` tensors in manifest order. Optimizer
//! moments follow the parameters when present (`m` first, then `v`).

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{OptimizerState, TrainConfig};
use crate::align::AlignedLayout;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

const MAGIC: &[u8; 8] = b"AFPMCKPT";
const FORMAT_VERSION: u32 = 1;

/// Trained model plus everything needed to resume or evaluate it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub layout: AlignedLayout,
    pub class_names: Vec<String>,
    pub params: ModelParams<f32>,
    pub optimizer: Option<OptimizerState>,
    /// Configuration of the last training run, if any.
    pub train: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    layout: AlignedLayout,
    class_names: Vec<String>,
    train: Option<TrainConfig>,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the payload.
    offset: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (name, t) in self.params.names().into_iter().zip(self.params.tensors()) {
            tensors.push(TensorEntry { name, shape: t.shape.clone(), offset });
            offset += t.len();
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            model: self.model.clone(),
            layout: self.layout.clone(),
            class_names: self.class_names.clone(),
            train: self.train.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Json { path: "<checkpoint header>".into(), source: e })?;
        let mut out = Vec::with_capacity(12 + json.len() + offset * 12);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut push = |p: &ModelParams<f32>| {
            for v in p.flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        push(&self.params);
        if let Some(o) = &self.optimizer {
            push(&o.m);
            push(&o.v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::data(origin.display().to_string(), msg.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Json { path: origin.into(), source: e })?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {}", header.format_version)));
        }
        header.model.validate()?;
        let payload: Vec<f32> = bytes[12 + hlen..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if (bytes.len() - 12 - hlen) % 4 != 0 {
            return Err(bad("payload is not a whole number of f32 values"));
        }

        // every value is overwritten from the payload below
        let mut params = ModelParams::<f32>::init(&header.model, &mut ChaCha8Rng::seed_from_u64(0));
        let names = params.names();
        if names.len() != header.tensors.len() {
            return Err(bad("tensor manifest does not match model configuration"));
        }
        let mut expected = 0;
        for ((name, t), entry) in names.iter().zip(params.tensors()).zip(&header.tensors) {
            if *name != entry.name || t.shape != entry.shape || entry.offset != expected {
                return Err(bad(&format!("tensor manifest entry {} does not match model configuration", entry.name)));
            }
            expected += t.len();
        }
        let n = params.count();
        let want = if header.optimizer_step.is_some() { 3 * n } else { n };
        if payload.len() != want {
            return Err(bad(&format!("payload holds {} values, expected {want}", payload.len())));
        }
        params.load_flat(&payload[..n]);
        let optimizer = header.optimizer_step.map(|step| {
            let mut m = params.zeros_like();
            let mut v = params.zeros_like();
            m.load_flat(&payload[n..2 * n]);
            v.load_flat(&payload[2 * n..]);
            OptimizerState { m, v, step }
        });
        Ok(Checkpoint {
            model: header.model,
            layout: header.layout,
            class_names: header.class_names,
            params,
            optimizer,
            train: header.train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::AlignStages;
    use crate::data::Task;

    fn sample() -> Checkpoint {
        let mut model = ModelConfig::preset(Task::Erp, 28, 256);
        model.transformer.depth = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ModelParams::init(&model, &mut rng);
        let mut m = params.zeros_like();
        m.lnf_gain.data[0] = 1.5e-7;
        let mut v = params.clone();
        v.scale(f32::MIN_POSITIVE);
        Checkpoint {
            layout: AlignedLayout::new(Task::Erp, AlignStages::default()),
            class_names: vec!["nontarget".into(), "target".into()],
            optimizer: Some(OptimizerState { m, v, step: 17 }),
            train: Some(TrainConfig::default()),
            model,
            params,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4], Path::new("x")).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT\0\0\0\0", Path::new("x")).is_err());
        let mut no_opt = ck.clone();
        no_opt.optimizer = None;
        let b2 = no_opt.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&b2, Path::new("x")).unwrap(), no_opt);
    }
}
