//! Two-layer GELU MLP over flattened pixels, the default prior model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::{Init, Params};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{Network, Sample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpClassifier {
    config: MlpConfig,
    params: Params,
}

impl MlpClassifier {
    pub fn new(config: MlpConfig, seed: u64) -> Result<Self> {
        if config.input_dim == 0 || config.hidden == 0 || config.num_classes == 0 {
            return Err(Error::Invalid(format!("MLP dimensions must be positive: {config:?}")));
        }
        let mut init = Init::new(seed);
        let mut params = Params::new();
        params.push("fc1.weight", init.normal(vec![config.input_dim, config.hidden]));
        params.push("fc1.bias", init.zeros(vec![config.hidden]));
        params.push("fc2.weight", init.normal(vec![config.hidden, config.num_classes]));
        params.push("fc2.bias", init.zeros(vec![config.num_classes]));
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn logits(&self, pixels: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let z = self.batch_logits(&mut tape, &vars, &[Sample { pixels, prior: &[] }])?;
        Ok(tape.value(z).data().to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_string(&self.config).expect("config serializes");
        checkpoint::write(path, &header, self.params.iter())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = checkpoint::read(path)?;
        let config: MlpConfig = serde_json::from_str(&header)
            .map_err(|e| Error::Format(format!("{}: not a prior-model checkpoint: {e}", path.display())))?;
        let mut m = Self::new(config, 0)?;
        m.params
            .load_from(tensors)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(m)
    }
}

impl Network for MlpClassifier {
    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn batch_logits(&self, tape: &mut Tape, vars: &[Var], batch: &[Sample<'_>]) -> Result<Var> {
        let d = self.config.input_dim;
        let mut x = Vec::with_capacity(batch.len() * d);
        for s in batch {
            if s.pixels.len() != d {
                return Err(Error::Shape(format!("MLP input has {} values, expected {d}", s.pixels.len())));
            }
            x.extend_from_slice(s.pixels);
        }
        let x = tape.constant(Tensor::matrix(batch.len(), d, x)?);
        let h = tape.matmul(x, vars[0])?;
        let h = tape.add_row(h, vars[1])?;
        let h = tape.gelu(h);
        let z = tape.matmul(h, vars[2])?;
        tape.add_row(z, vars[3])
    }
}
