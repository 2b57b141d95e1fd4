//! Optional TOML config file. Keys mirror the library config structs; any
//! key the file sets is overridden by the matching command-line flag.

use std::path::Path;

use funcspace::embsearch::{Optimizer, SearchConfig, SoftCountForm};
use funcspace::funcae::Gates;
use funcspace::genlab::GenConfig;
use funcspace::netrep::ActivationKind;
use serde::{Deserialize, Serialize};

use crate::error::{usage, CliError};

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub gen: GenSection,
    pub train: TrainSection,
    pub search: SearchSection,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSection {
    pub activation: Option<ActivationKind>,
    pub input_dim: Option<usize>,
    pub output_dim: Option<usize>,
    pub n_max: Option<usize>,
    pub l_max: Option<usize>,
    pub hidden_min: Option<usize>,
    pub hidden_max: Option<usize>,
    pub removal_fractions: Option<Vec<f64>>,
    pub weight_range: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub loss: Option<String>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub chunk: Option<usize>,
    pub d_z: Option<usize>,
    pub gates: Option<Gates>,
    pub out_init_scale: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub iterations: Option<usize>,
    pub lr_z: Option<f64>,
    pub lr_t: Option<f64>,
    pub alpha: Option<f64>,
    /// 0 selects full-batch steps.
    pub minibatch: Option<usize>,
    pub decoders: Option<Vec<usize>>,
    pub restarts: Option<usize>,
    pub seed: Option<u64>,
    pub soft_count: Option<SoftCountForm>,
    pub gates: Option<Gates>,
    pub optimizer: Option<Optimizer>,
    pub val_every: Option<usize>,
}

pub fn load(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Takes the flag if given, else the file value.
pub fn pick<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

impl GenSection {
    pub fn apply(&self, base: &mut GenConfig) {
        let s = self.clone();
        if let Some(v) = s.input_dim {
            base.input_dim = v;
        }
        if let Some(v) = s.output_dim {
            base.output_dim = v;
        }
        if let Some(v) = s.n_max {
            base.n_max = v;
        }
        if let Some(v) = s.l_max {
            base.l_max = v;
        }
        if let Some(v) = s.hidden_min {
            base.hidden_min = v;
        }
        if let Some(v) = s.hidden_max {
            base.hidden_max = v;
        }
        if let Some(v) = s.removal_fractions {
            base.removal_fractions = v;
        }
        if let Some(v) = s.weight_range {
            base.weight_range = v;
        }
        if let Some(v) = s.seed {
            base.seed = v;
        }
    }
}

impl SearchSection {
    pub fn apply(&self, base: &mut SearchConfig) {
        let s = self.clone();
        if let Some(v) = s.iterations {
            base.iterations = v;
        }
        if let Some(v) = s.lr_z {
            base.lr_z = v;
        }
        if let Some(v) = s.lr_t {
            base.lr_t = v;
        }
        if let Some(v) = s.alpha {
            base.alpha = v;
        }
        if let Some(v) = s.minibatch {
            base.minibatch = (v > 0).then_some(v);
        }
        if let Some(v) = s.decoders {
            base.decoders = v;
        }
        if let Some(v) = s.restarts {
            base.restarts = v;
        }
        if let Some(v) = s.seed {
            base.seed = v;
        }
        if let Some(v) = s.soft_count {
            base.soft_count = v;
        }
        if let Some(v) = s.gates {
            base.gates = v;
        }
        if let Some(v) = s.optimizer {
            base.optimizer = v;
        }
        if let Some(v) = s.val_every {
            base.val_every = v;
        }
    }
}
