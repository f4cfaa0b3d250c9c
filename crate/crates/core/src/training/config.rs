use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Component switches for ablation runs. All off by default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    pub no_inc_loss: bool,
    pub no_topic_nodes: bool,
    pub no_topic_pointer: bool,
    pub no_dge: bool,
    pub fixed_topic_matrix: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the topic-model loss.
    pub gamma: f64,
    /// Weight of the inconsistency loss.
    pub tau: f64,
    pub topics: usize,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub encoder_layers: usize,
    pub ntm_hidden: usize,
    pub batch_size: usize,
    pub beam: usize,
    pub length_penalty: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub dropout: f64,
    pub seed: u64,
    pub kl_anneal: bool,
    pub max_doc_len: usize,
    pub max_docs: usize,
    pub max_summary_len: usize,
    pub max_decode_len: usize,
    pub seq_vocab_size: usize,
    pub bow_vocab_size: usize,
    /// Keep only this many word edges per topic node; 0 keeps all.
    pub topic_word_top_r: usize,
    pub ablations: Ablations,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            tau: 0.3,
            topics: 10,
            layers: 3,
            heads: 4,
            dim: 64,
            encoder_layers: 2,
            ntm_hidden: 256,
            batch_size: 8,
            beam: 5,
            length_penalty: 1.0,
            patience: 3,
            max_epochs: 1000,
            lr: 1e-3,
            grad_clip: 2.0,
            dropout: 0.1,
            seed: 42,
            kl_anneal: true,
            max_doc_len: 128,
            max_docs: 4,
            max_summary_len: 62,
            max_decode_len: 64,
            seq_vocab_size: 20_000,
            bow_vocab_size: 5_000,
            topic_word_top_r: 0,
            ablations: Ablations::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 30] = [
        "gamma",
        "tau",
        "topics",
        "layers",
        "heads",
        "dim",
        "encoder_layers",
        "ntm_hidden",
        "batch_size",
        "beam",
        "length_penalty",
        "patience",
        "max_epochs",
        "lr",
        "grad_clip",
        "dropout",
        "seed",
        "kl_anneal",
        "max_doc_len",
        "max_docs",
        "max_summary_len",
        "max_decode_len",
        "seq_vocab_size",
        "bow_vocab_size",
        "topic_word_top_r",
        "no_inc_loss",
        "no_topic_nodes",
        "no_topic_pointer",
        "no_dge",
        "fixed_topic_matrix",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "gamma" => self.gamma = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "topics" => self.topics = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "encoder_layers" => self.encoder_layers = parse(key, v)?,
            "ntm_hidden" => self.ntm_hidden = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "beam" => self.beam = parse(key, v)?,
            "length_penalty" => self.length_penalty = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "kl_anneal" => self.kl_anneal = parse(key, v)?,
            "max_doc_len" => self.max_doc_len = parse(key, v)?,
            "max_docs" => self.max_docs = parse(key, v)?,
            "max_summary_len" => self.max_summary_len = parse(key, v)?,
            "max_decode_len" => self.max_decode_len = parse(key, v)?,
            "seq_vocab_size" => self.seq_vocab_size = parse(key, v)?,
            "bow_vocab_size" => self.bow_vocab_size = parse(key, v)?,
            "topic_word_top_r" => self.topic_word_top_r = parse(key, v)?,
            "no_inc_loss" => self.ablations.no_inc_loss = parse(key, v)?,
            "no_topic_nodes" => self.ablations.no_topic_nodes = parse(key, v)?,
            "no_topic_pointer" => self.ablations.no_topic_pointer = parse(key, v)?,
            "no_dge" => self.ablations.no_dge = parse(key, v)?,
            "fixed_topic_matrix" => self.ablations.fixed_topic_matrix = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key = value, got {line:?}")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let a = &self.ablations;
        let values: [String; 30] = [
            self.gamma.to_string(),
            self.tau.to_string(),
            self.topics.to_string(),
            self.layers.to_string(),
            self.heads.to_string(),
            self.dim.to_string(),
            self.encoder_layers.to_string(),
            self.ntm_hidden.to_string(),
            self.batch_size.to_string(),
            self.beam.to_string(),
            self.length_penalty.to_string(),
            self.patience.to_string(),
            self.max_epochs.to_string(),
            self.lr.to_string(),
            self.grad_clip.to_string(),
            self.dropout.to_string(),
            self.seed.to_string(),
            self.kl_anneal.to_string(),
            self.max_doc_len.to_string(),
            self.max_docs.to_string(),
            self.max_summary_len.to_string(),
            self.max_decode_len.to_string(),
            self.seq_vocab_size.to_string(),
            self.bow_vocab_size.to_string(),
            self.topic_word_top_r.to_string(),
            a.no_inc_loss.to_string(),
            a.no_topic_nodes.to_string(),
            a.no_topic_pointer.to_string(),
            a.no_dge.to_string(),
            a.fixed_topic_matrix.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in Self::KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma >= 0.0 && self.tau >= 0.0) {
            return fail("gamma and tau must be non-negative");
        }
        if self.patience == 0 {
            return fail("patience must be at least 1");
        }
        if self.topics == 0 {
            return fail("topic count must be at least 1");
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return fail("heads must divide dim");
        }
        if self.batch_size == 0 || self.beam == 0 {
            return fail("batch_size and beam must be positive");
        }
        if self.max_docs == 0 || self.max_doc_len == 0 {
            return fail("max_docs and max_doc_len must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        Ok(())
    }

    /// Graph encoder depth after ablations.
    pub fn effective_layers(&self) -> usize {
        if self.ablations.no_dge {
            0
        } else {
            self.layers
        }
    }

    /// Weight of the inconsistency term in the total loss.
    pub fn effective_tau(&self) -> f64 {
        if self.ablations.no_inc_loss {
            0.0
        } else {
            self.tau
        }
    }
}
