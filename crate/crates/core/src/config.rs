//! Pipeline configuration: a flat `key = value` UTF-8 file with `#`
//! comments. Unset keys keep their defaults.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hieas2s::MemoryVariant;

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    // paths
    pub corpus: String,
    pub taxonomy: String,
    pub tones: String,
    pub patterns: String,
    pub checkpoint_dir: String,

    // dims
    pub d: usize,
    pub h: usize,
    pub attn: usize,

    // shared training settings
    pub lr: f64,
    pub batch: usize,
    pub clip: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    pub min_count: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// keep pre-trained embeddings fixed while training the LMs and
    /// the seq2seq model
    pub freeze_embedding: bool,

    // per-model epochs
    pub embed_epochs: usize,
    pub lm_epochs: usize,
    pub hie_epochs: usize,

    // embedding pre-training
    pub embed_window: usize,
    pub embed_k_noise: usize,
    pub embed_lr: f64,

    // LDA
    pub lda_topics: usize,
    /// 0 means the 50/K default
    pub lda_alpha: f64,
    pub lda_beta: f64,
    pub lda_iters: usize,

    // decoding
    pub beam: usize,
    pub target_len: usize,
    pub variant: MemoryVariant,

    // seeds
    pub seed_split: u64,
    pub seed_embed: u64,
    pub seed_lda: u64,
    pub seed_bflm: u64,
    pub seed_hie: u64,
    pub seed_generate: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            corpus: "corpus.jsonl".into(),
            taxonomy: "taxonomy.json".into(),
            tones: "tones.tsv".into(),
            patterns: "patterns.tsv".into(),
            checkpoint_dir: "checkpoints".into(),
            d: 64,
            h: 64,
            attn: 64,
            lr: 0.001,
            batch: 128,
            clip: 5.0,
            dropout: 0.2,
            weight_decay: 0.0,
            min_count: 2,
            n_val: 0,
            n_test: 0,
            freeze_embedding: false,
            embed_epochs: 5,
            lm_epochs: 10,
            hie_epochs: 10,
            embed_window: 2,
            embed_k_noise: 16,
            embed_lr: 0.05,
            lda_topics: 100,
            lda_alpha: 0.0,
            lda_beta: 0.01,
            lda_iters: 500,
            beam: 10,
            target_len: 5,
            variant: MemoryVariant::Tile,
            seed_split: 42,
            seed_embed: 1,
            seed_lda: 2,
            seed_bflm: 3,
            seed_hie: 4,
            seed_generate: 5,
        }
    }
}

impl PipelineConfig {
    pub fn effective_lda_alpha(&self) -> f64 {
        if self.lda_alpha > 0.0 {
            self.lda_alpha
        } else {
            50.0 / self.lda_topics as f64
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut text = String::new();
        File::open(path)
            .and_then(|mut f| f.read_to_string(&mut text))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = PipelineConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config(format!(
                "line {}: expected key = value, got {raw:?}",
                lineno + 1
            )))?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                Error::Config(format!("line {}: {key} = {value:?}: {what}", lineno + 1))
            };
            macro_rules! num {
                ($field:expr, $ty:ty) => {
                    $field = value.parse::<$ty>().map_err(|_| bad("not a number"))?
                };
            }
            match key {
                "corpus" => config.corpus = value.to_string(),
                "taxonomy" => config.taxonomy = value.to_string(),
                "tones" => config.tones = value.to_string(),
                "patterns" => config.patterns = value.to_string(),
                "checkpoint_dir" => config.checkpoint_dir = value.to_string(),
                "d" => num!(config.d, usize),
                "h" => num!(config.h, usize),
                "attn" => num!(config.attn, usize),
                "lr" => num!(config.lr, f64),
                "batch" => num!(config.batch, usize),
                "clip" => num!(config.clip, f64),
                "dropout" => num!(config.dropout, f64),
                "weight_decay" => num!(config.weight_decay, f64),
                "min_count" => num!(config.min_count, usize),
                "freeze_embedding" => {
                    config.freeze_embedding = match value {
                        "true" => true,
                        "false" => false,
                        _ => return Err(bad("expected true or false")),
                    }
                }
                "n_val" => num!(config.n_val, usize),
                "n_test" => num!(config.n_test, usize),
                "embed_epochs" => num!(config.embed_epochs, usize),
                "lm_epochs" => num!(config.lm_epochs, usize),
                "hie_epochs" => num!(config.hie_epochs, usize),
                "embed_window" => num!(config.embed_window, usize),
                "embed_k_noise" => num!(config.embed_k_noise, usize),
                "embed_lr" => num!(config.embed_lr, f64),
                "lda_topics" => num!(config.lda_topics, usize),
                "lda_alpha" => num!(config.lda_alpha, f64),
                "lda_beta" => num!(config.lda_beta, f64),
                "lda_iters" => num!(config.lda_iters, usize),
                "beam" => num!(config.beam, usize),
                "target_len" => num!(config.target_len, usize),
                "variant" => config.variant = MemoryVariant::from_tag(value)?,
                "seed_split" => num!(config.seed_split, u64),
                "seed_embed" => num!(config.seed_embed, u64),
                "seed_lda" => num!(config.seed_lda, u64),
                "seed_bflm" => num!(config.seed_bflm, u64),
                "seed_hie" => num!(config.seed_hie, u64),
                "seed_generate" => num!(config.seed_generate, u64),
                other => return Err(Error::Config(format!("line {}: unknown key {other:?}", lineno + 1))),
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let positives: [(&str, f64); 12] = [
            ("d", self.d as f64),
            ("h", self.h as f64),
            ("attn", self.attn as f64),
            ("lr", self.lr),
            ("batch", self.batch as f64),
            ("clip", self.clip),
            ("min_count", self.min_count as f64),
            ("embed_window", self.embed_window as f64),
            ("embed_k_noise", self.embed_k_noise as f64),
            ("lda_topics", self.lda_topics as f64),
            ("lda_iters", self.lda_iters as f64),
            ("beam", self.beam as f64),
        ];
        for (name, v) in positives {
            if v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.target_len != 5 && self.target_len != 7 {
            return Err(Error::Config(format!(
                "target_len must be 5 or 7, got {}",
                self.target_len
            )));
        }
        Ok(())
    }
}
