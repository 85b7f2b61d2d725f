//! Serializable model snapshot.
//!
//! Full-precision tensors are stored by value; quantized base weights are
//! stored as codes and restored by dequantizing, so a loaded model computes
//! bit-identical outputs.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::nf4::{codebook, nf4_dequantize, QuantizedTensor};
use super::{ModelConfig, PfgaModel};
use crate::error::{Error, Result};

pub const FORMAT: &str = "evstllm-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub shape: (usize, usize),
    pub trainable: bool,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredQuantized {
    pub name: String,
    pub tensor: QuantizedTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub codebook: Vec<f64>,
    pub tensors: Vec<StoredTensor>,
    pub quantized: Vec<StoredQuantized>,
}

impl PfgaModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let quantized: Vec<StoredQuantized> =
            self.quantized().map(|(name, q)| StoredQuantized { name: name.to_string(), tensor: q.clone() }).collect();
        let tensors = self
            .store()
            .tensors()
            .iter()
            .filter(|t| !quantized.iter().any(|q| q.name == t.name))
            .map(|t| StoredTensor {
                name: t.name.clone(),
                shape: t.value.dim(),
                trainable: t.trainable,
                data: t.value.iter().copied().collect(),
            })
            .collect();
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            config: self.config().clone(),
            codebook: codebook().to_vec(),
            tensors,
            quantized,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::param(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        if ck.codebook != codebook() {
            return Err(Error::param("checkpoint codebook differs from this build"));
        }
        let mut model = PfgaModel::new(ck.config.clone(), 0)?;
        let mut seen = vec![false; model.store().len()];
        let mut place = |model: &mut PfgaModel, name: &str, value: Array2<f64>, trainable: Option<bool>| -> Result<()> {
            let id = model.store().find(name).ok_or_else(|| Error::param(format!("unknown tensor '{name}'")))?;
            if model.store().get(id).dim() != value.dim() {
                return Err(Error::shape(format!("tensor '{name}' has shape {:?}", value.dim())));
            }
            if trainable.is_some_and(|t| t != model.store().is_trainable(id)) {
                return Err(Error::param(format!("tensor '{name}' has a different trainable flag")));
            }
            *model.store_mut().get_mut(id) = value;
            seen[id] = true;
            Ok(())
        };
        for t in &ck.tensors {
            let value = Array2::from_shape_vec(t.shape, t.data.clone()).map_err(|e| Error::shape(e.to_string()))?;
            place(&mut model, &t.name, value, Some(t.trainable))?;
        }
        let mut quantized = Vec::with_capacity(ck.quantized.len());
        for q in &ck.quantized {
            if q.tensor.packed.len() != q.tensor.len().div_ceil(2) || q.tensor.scales.len() != q.tensor.n_blocks().div_ceil(super::nf4::SUPERBLOCK) {
                return Err(Error::shape(format!("quantized tensor '{}' is truncated", q.name)));
            }
            place(&mut model, &q.name, nf4_dequantize(&q.tensor), None)?;
            let id = model.store().find(&q.name).expect("placed above");
            quantized.push((id, q.tensor.clone()));
        }
        if let Some(id) = seen.iter().position(|s| !s) {
            return Err(Error::param(format!("checkpoint lacks tensor '{}'", model.store().tensor(id).name)));
        }
        if quantized.len() != model.quantized.len() {
            return Err(Error::param("checkpoint quantized tensor set does not match the config"));
        }
        model.quantized = quantized;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::{sample, tiny_config};
    use super::super::FreezeMode;
    use super::*;
    use crate::domain::StationGraph;

    #[test]
    fn roundtrip_reproduces_outputs() {
        for mode in [FreezeMode::Partial, FreezeMode::None] {
            let cfg = tiny_config(mode);
            let mut model = PfgaModel::new(cfg.clone(), 3).unwrap();
            for id in model.store().trainable_ids() {
                model.store_mut().get_mut(id).mapv_inplace(|v| v + 0.123456789);
            }
            let ck = model.to_checkpoint();
            let back = PfgaModel::from_checkpoint(&ck).unwrap();
            assert_eq!(back, model);
            let s = sample(&cfg, 4, 5);
            let g = StationGraph::complete(4);
            assert_eq!(back.predict(&s, &g).unwrap(), model.predict(&s, &g).unwrap());
        }
    }

    #[test]
    fn rejects_tampered_checkpoints() {
        let model = PfgaModel::new(tiny_config(FreezeMode::Partial), 3).unwrap();
        let mut ck = model.to_checkpoint();
        ck.tensors.pop();
        assert!(PfgaModel::from_checkpoint(&ck).is_err());
        let mut ck = model.to_checkpoint();
        ck.version = 99;
        assert!(PfgaModel::from_checkpoint(&ck).is_err());
        let mut ck = model.to_checkpoint();
        ck.tensors[0].shape = (1, 1);
        assert!(PfgaModel::from_checkpoint(&ck).is_err());
    }
}
