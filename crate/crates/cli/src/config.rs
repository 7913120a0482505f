//! The shared TOML run configuration. Every key is optional; command-line
//! flags take precedence over the file, and built-in defaults fill the rest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub paths: Paths,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub prune: PruneSection,
    pub eval: EvalSection,
    pub classifier: ClassifierSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub eval_corpus: Option<PathBuf>,
    pub records: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub stats: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub schedule: Option<PathBuf>,
    pub plan: Option<PathBuf>,
    pub pruned: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub tasks: Option<usize>,
    pub records_per_task: Option<usize>,
    pub eval_frac: Option<f64>,
    pub tokenizer: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: Option<usize>,
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub max_seq: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_len: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub method: Option<String>,
    pub origin: Option<String>,
    #[serde(rename = "G")]
    pub g: Option<f64>,
    pub k: Option<f64>,
    pub x0: Option<f64>,
    pub n_frozen: Option<usize>,
    pub rho_cap: Option<f64>,
    /// Task that holds the plain-text language-modeling corpus.
    pub lm_task: Option<String>,
    /// Explicit task weights for general pruning.
    pub weights: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub context_len: Option<usize>,
    pub window_len: Option<usize>,
    pub n_samples: Option<usize>,
    pub prompt_len: Option<usize>,
    pub gen_len: Option<usize>,
    pub repeats: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
    }
}
