//! Run configuration: one TOML document covering dataset, model, training and
//! analysis settings. Every field has a default, so an empty file is valid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vlprobe::model::{AdamConfig, TrainConfig};
use vlprobe::probe::{prompt, LibraryParams, ProbeParams};
use vlprobe::{EncoderKind, Error, ModelConfig, Result, Scheme};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    /// Position scheme name, checked against the known schemes.
    pub scheme: String,
    /// Model-initialization and batch-order seeds used by `pipeline`.
    pub seeds: Vec<u64>,
    /// Evaluation worker threads; 1 is the deterministic single-thread mode.
    pub threads: usize,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub analysis: AnalysisSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub seed: u64,
    pub vocab_size: usize,
    pub patch_dim: usize,
    pub cell_side: usize,
    pub min_distance: f64,
    pub num_keys: usize,
    pub train_size: usize,
    pub disjoint_keys: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub head_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_dim: usize,
    pub rope_base: f64,
    pub encoder: EncoderKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    /// Value of every coordinate of the masking / background patch.
    pub background: f64,
    pub region_rows: usize,
    pub region_cols: usize,
    /// Pixels per matrix entry in PGM output.
    pub pgm_cell: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs"),
            scheme: Scheme::Bapa.to_string(),
            seeds: vec![0, 1, 2],
            threads: 1,
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

impl Default for DatasetSection {
    fn default() -> Self {
        let lib = LibraryParams::default();
        let probe = ProbeParams::default();
        Self {
            seed: 0,
            vocab_size: lib.vocab_size,
            patch_dim: lib.patch_dim,
            cell_side: lib.cell_side,
            min_distance: lib.min_distance,
            num_keys: probe.num_keys,
            train_size: probe.train_size,
            disjoint_keys: probe.disjoint_keys,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            embed_dim: m.embed_dim,
            head_dim: m.head_dim,
            num_heads: m.num_heads,
            num_layers: m.num_layers,
            mlp_dim: m.mlp_dim,
            rope_base: m.rope_base,
            encoder: m.encoder,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.adam.lr,
        }
    }
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            background: 0.0,
            region_rows: 3,
            region_cols: 3,
            pgm_cell: 16,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn scheme(&self) -> Result<Scheme> {
        self.scheme.parse()
    }

    pub fn library_params(&self) -> LibraryParams {
        let d = &self.dataset;
        LibraryParams {
            vocab_size: d.vocab_size,
            patch_dim: d.patch_dim,
            cell_side: d.cell_side,
            min_distance: d.min_distance,
            seed: d.seed,
        }
    }

    pub fn probe_params(&self) -> ProbeParams {
        ProbeParams {
            num_keys: self.dataset.num_keys,
            train_size: self.dataset.train_size,
            disjoint_keys: self.dataset.disjoint_keys,
        }
    }

    pub fn model_config(&self, scheme: Scheme, seed: u64) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            embed_dim: m.embed_dim,
            head_dim: m.head_dim,
            num_heads: m.num_heads,
            num_layers: m.num_layers,
            mlp_dim: m.mlp_dim,
            patch_dim: self.dataset.patch_dim,
            text_vocab_size: prompt::text_vocab_size(self.dataset.vocab_size),
            scheme,
            rope_base: m.rope_base,
            encoder: m.encoder,
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            adam: AdamConfig {
                lr: self.train.lr,
                ..AdamConfig::default()
            },
            seed,
        }
    }

    /// Checks every module precondition that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        let scheme = self.scheme()?;
        self.model_config(scheme, 0).validate()?;
        let d = &self.dataset;
        if d.vocab_size < 10 {
            return Err(Error::Config(format!("vocab_size must be at least 10, got {}", d.vocab_size)));
        }
        if d.num_keys == 0 || d.num_keys > d.vocab_size - 9 {
            return Err(Error::Config(format!(
                "num_keys must be in 1..={}, got {}",
                d.vocab_size - 9,
                d.num_keys
            )));
        }
        if d.patch_dim == 0 || d.cell_side == 0 || d.train_size == 0 {
            return Err(Error::Config("patch_dim, cell_side and train_size must be positive".into()));
        }
        if self.train.batch_size == 0 || !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(Error::Config("batch_size must be positive and lr a positive number".into()));
        }
        if self.seeds.is_empty() || self.threads == 0 {
            return Err(Error::Config("need at least one seed and one thread".into()));
        }
        let a = &self.analysis;
        if a.region_rows == 0 || a.region_cols == 0 || a.pgm_cell == 0 || !a.background.is_finite() {
            return Err(Error::Config("analysis settings must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn background_patch(&self) -> Vec<f64> {
        vec![self.analysis.background; self.dataset.patch_dim]
    }
}
