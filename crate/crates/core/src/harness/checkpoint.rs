//! Text checkpoints. Every tensor value is a hexadecimal float so a save and
//! load round-trips bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{file_error, Error, Result};
use crate::model::{AnyModel, GistModel, Variant};
use crate::numerics::Tensor;
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::Scalar;

use super::config::TrainConfig;

const FORMAT: &str = "gist-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Hexadecimal float literals, row-major.
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<TensorRecord>,
    pub v: Vec<TensorRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub variant: Variant,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub optimizer: OptimizerRecord,
    pub params: Vec<TensorRecord>,
}

fn encode<S: Scalar>(store: &ParamStore<S>) -> Result<Vec<TensorRecord>> {
    store
        .iter()
        .map(|(name, t)| {
            if !t.is_finite() {
                return Err(Error::NonFinite { op: "checkpoint encode" });
            }
            Ok(TensorRecord {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.data().iter().map(|v| hexfloat2::format(v.as_f64())).collect(),
            })
        })
        .collect()
}

fn decode<S: Scalar>(records: &[TensorRecord]) -> Result<ParamStore<S>> {
    let mut store = ParamStore::new();
    for r in records {
        let data = r
            .values
            .iter()
            .map(|v| {
                hexfloat2::parse::<f64>(v)
                    .map(S::lit)
                    .map_err(|_| Error::Data(format!("bad hex float `{v}` in `{}`", r.name)))
            })
            .collect::<Result<Vec<S>>>()?;
        let t = Tensor::new(r.shape.clone(), data).map_err(|e| Error::Data(format!("tensor `{}`: {e}", r.name)))?;
        store.insert(r.name.clone(), t).map_err(|_| Error::Data(format!("duplicate tensor `{}`", r.name)))?;
    }
    Ok(store)
}

impl Checkpoint {
    pub fn capture<S: Scalar>(
        config: &TrainConfig,
        epoch: usize,
        model: &AnyModel<S>,
        adam: &AdamState<S>,
    ) -> Result<Self> {
        Ok(Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            variant: model.variant(),
            config: config.clone(),
            epoch,
            optimizer: OptimizerRecord {
                config: adam.config,
                step: adam.step,
                m: encode(&adam.m)?,
                v: encode(&adam.v)?,
            },
            params: encode(model.params())?,
        })
    }

    /// Rebuilds the model and optimizer, checking layouts against the stored config.
    pub fn restore<S: Scalar>(&self) -> Result<(AnyModel<S>, AdamState<S>)> {
        let params = decode::<S>(&self.params)?;
        let model = AnyModel::from_params(self.variant, self.config.vanilla, self.config.transformer, params)
            .map_err(|e| Error::Data(format!("checkpoint does not match its config: {e}")))?;
        let m = decode::<S>(&self.optimizer.m)?;
        let v = decode::<S>(&self.optimizer.v)?;
        if !model.params().matches_layout(&m) || !model.params().matches_layout(&v) {
            return Err(Error::Data("optimizer moments do not match the parameters".into()));
        }
        Ok((model, AdamState { config: self.optimizer.config, step: self.optimizer.step, m, v }))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Parse { line: e.line(), msg: e.to_string() })?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::Data(format!("unsupported checkpoint format {} v{}", ck.format, ck.version)));
        }
        if ck.variant != ck.config.variant {
            return Err(Error::Data("checkpoint variant tag disagrees with its config".into()));
        }
        Ok(ck)
    }

    /// Writes through a temporary file so an existing checkpoint survives a failed write.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_json()?).map_err(file_error(&tmp))?;
        std::fs::rename(&tmp, path).map_err(file_error(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(file_error(path))?)
    }
}
