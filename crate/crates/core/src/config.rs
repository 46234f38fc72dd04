//! Run configuration: one TOML file for every command.
//!
//! ```toml
//! seed = 7
//!
//! [paths]
//! data_dir = "data"   # grammar.json, embeddings.txt, corpus.jsonl
//! run_dir = "run"     # checkpoint.json, metrics.csv, traces.jsonl, reports
//! # pos = "pos.tsv"   # optional POS tags for the interpret command
//!
//! [corpus]
//! size = 5000         # sequences written by gen-data
//! heldout = 500       # trailing sequences kept out of training
//!
//! [grammar]           # synthetic grammar; see `GrammarParams`
//! [model]             # n_symbols, n_roles, d_symbols, d_roles, d_word, gate_enabled, gated_feedback
//! [objective]         # c_q, task, target, q_aggregation
//! [train]             # epochs, batch_size, rho, eps, clip_norm
//! [gradcheck]         # tolerance, h, sequences, full_sweep_limit, sample_per_group
//! [interpret]         # direction, thresholds, symbol_mode, top_k, polysemy_words
//! ```
//!
//! `seed` is set once at the top level; `grammar.seed` and `train.seed` are
//! rejected. Unknown keys anywhere are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cell::Hyper;
use crate::data::{self, GrammarParams};
use crate::error::{Error, IoContext, Result};
use crate::interpret::InterpretConfig;
use crate::objective::{ObjectiveConfig, TaskKind};
use crate::train::{FdOptions, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    pub pos: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data_dir: "data".into(), run_dir: "run".into(), pos: None }
    }
}

impl Paths {
    pub fn grammar(&self) -> PathBuf {
        self.data_dir.join("grammar.json")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.data_dir.join("embeddings.txt")
    }
    pub fn corpus(&self) -> PathBuf {
        self.data_dir.join("corpus.jsonl")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.run_dir.join("checkpoint.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.run_dir.join("metrics.csv")
    }
    pub fn traces(&self) -> PathBuf {
        self.run_dir.join("traces.jsonl")
    }
    pub fn report_csv(&self) -> PathBuf {
        self.run_dir.join("report.csv")
    }
    pub fn report_json(&self) -> PathBuf {
        self.run_dir.join("report.json")
    }
    pub fn symbols(&self) -> PathBuf {
        self.run_dir.join("symbols.json")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub size: usize,
    pub heldout: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { size: 5000, heldout: 500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub tolerance: f64,
    pub h: f64,
    /// Leading corpus sequences in the checked batch.
    pub sequences: usize,
    pub full_sweep_limit: usize,
    pub sample_per_group: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        let fd = FdOptions::default();
        Self {
            tolerance: 1e-5,
            h: fd.h,
            sequences: 4,
            full_sweep_limit: fd.full_sweep_limit,
            sample_per_group: fd.sample_per_group,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusConfig,
    pub grammar: GrammarParams,
    pub model: Hyper,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub gradcheck: GradcheckConfig,
    pub interpret: InterpretConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let grammar = GrammarParams::default();
        Self {
            seed: 0,
            paths: Paths::default(),
            corpus: CorpusConfig::default(),
            model: Hyper {
                n_symbols: 20,
                n_roles: 8,
                d_symbols: 8,
                d_roles: 8,
                d_word: grammar.d_word,
                gate_enabled: false,
                gated_feedback: false,
            },
            grammar,
            objective: ObjectiveConfig::default(),
            train: TrainConfig::default(),
            gradcheck: GradcheckConfig::default(),
            interpret: InterpretConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses, propagates the top-level seed, and validates.
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for section in ["grammar", "train"] {
            if raw.get(section).and_then(|s| s.get("seed")).is_some() {
                return Err(Error::Config(format!("{section}.seed is not allowed; set `seed` at the top level")));
            }
        }
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).io_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        let mut v = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for section in ["grammar", "train"] {
            if let Some(toml::Value::Table(t)) = v.get_mut(section) {
                t.remove("seed");
            }
        }
        Ok(v.to_string())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.grammar.seed = seed;
        self.train.seed = seed;
    }

    /// Seed for the corpus sampler.
    pub fn corpus_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    /// Seed for parameter initialization.
    pub fn init_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    pub fn n_labels(&self) -> usize {
        data::n_labels(self.objective.target, self.grammar.n_classes, self.grammar.n_roles)
    }

    pub fn fd_options(&self) -> FdOptions {
        FdOptions {
            h: self.gradcheck.h,
            full_sweep_limit: self.gradcheck.full_sweep_limit,
            sample_per_group: self.gradcheck.sample_per_group,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grammar.validate()?;
        self.model.validate()?;
        self.objective.validate()?;
        self.train.validate()?;
        self.interpret.thresholds.validate(self.model.n_roles)?;
        if self.model.d_word != self.grammar.d_word {
            return Err(Error::Config(format!(
                "model.d_word = {} but grammar.d_word = {}",
                self.model.d_word, self.grammar.d_word
            )));
        }
        if self.corpus.size == 0 || self.corpus.heldout >= self.corpus.size {
            return Err(Error::Config(format!(
                "corpus.heldout ({}) must be smaller than corpus.size ({})",
                self.corpus.heldout, self.corpus.size
            )));
        }
        let g = &self.gradcheck;
        if !(g.tolerance > 0.0) || !(g.h > 0.0 && g.h.is_finite()) {
            return Err(Error::Config("gradcheck.tolerance and gradcheck.h must be positive".into()));
        }
        if g.sequences == 0 || g.sequences > self.corpus.size {
            return Err(Error::Config(format!("gradcheck.sequences must lie in 1..={}", self.corpus.size)));
        }
        if g.sample_per_group == 0 {
            return Err(Error::Config("gradcheck.sample_per_group must be positive".into()));
        }
        if self.interpret.top_k == 0 {
            return Err(Error::Config("interpret.top_k must be positive".into()));
        }
        if self.objective.task == TaskKind::TokenClassification && self.n_labels() == 0 {
            return Err(Error::Config("token head would have no labels".into()));
        }
        Ok(())
    }
}
