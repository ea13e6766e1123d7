use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::init_lora_with;
use crate::adapters::LoraAdapter;
use crate::clusterer::{
    BirchParams, Linkage, DEFAULT_BRANCHING, DEFAULT_K, DEFAULT_MAX_ITER, DEFAULT_RATIO,
    DEFAULT_SAMPLE_CAP, DEFAULT_THRESHOLD,
};
use crate::corpus::{TaskFamily, Vocab};
use crate::ensemble::{DEFAULT_MAX_NEW_TOKENS, ENSEMBLE_EXTRA, SC_SAMPLES, SC_TEMPERATURE};
use crate::error::{Error, Result};
use crate::gradfeat::DEFAULT_D_PROJ;
use crate::model::{LinearKind, LmConfig};
use crate::seeding::derive_seed;
use crate::trainer::{
    PretrainLoss, TrainConfig, BASE_LR, DEFAULT_BATCH, DEFAULT_EPOCHS, EXPERT_LR,
};

/// Environment variable that replaces `run_dir`.
pub const OUT_DIR_ENV: &str = "ELREA_OUT_DIR";

/// Flat key-value run configuration. Every field has a default, so a config
/// file only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub run_dir: PathBuf,
    /// JSONL corpora; the synthetic generator is used when unset.
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub families: Vec<String>,
    pub train_per_family: usize,
    pub test_per_family: usize,
    /// Size of the separate corpus the backbone is pretrained on.
    pub pretrain_per_family: usize,

    pub l_max: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub backbone_epochs: usize,
    pub backbone_lr: f64,
    pub backbone_loss: PretrainLoss,

    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Short names: q, k, v, o, gate, up, down.
    pub targets: Vec<String>,

    pub epochs: usize,
    pub base_lr: f64,
    pub expert_epochs: usize,
    pub expert_lr: f64,
    pub batch_size: usize,

    pub d_proj: usize,
    pub sample_cap: usize,
    pub k_initial: usize,
    pub birch_threshold: f64,
    pub birch_branching: usize,
    pub linkage: Linkage,
    pub rebalance_ratio: f64,
    pub rebalance_max_iter: usize,

    pub max_new_tokens: usize,
    pub top_k: Option<usize>,
    pub sc_samples: usize,
    pub sc_temperature: f64,
    pub lora_ens_extra: usize,
    pub mole_epochs: usize,
    pub mole_lr: f64,
    /// Baselines trained and evaluated by `elrea all`.
    pub baselines: Vec<String>,

    pub seed_data: u64,
    pub seed_init: u64,
    pub seed_shuffle: u64,
    pub seed_projection: u64,
    pub seed_cluster: u64,
    pub seed_decode: u64,
    pub seed_tiebreak: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let rank = 8;
        PipelineConfig {
            run_dir: PathBuf::from("runs/default"),
            train_path: None,
            test_path: None,
            families: TaskFamily::ALL
                .iter()
                .map(|f| f.name().to_string())
                .collect(),
            train_per_family: 1000,
            test_per_family: 100,
            pretrain_per_family: 1000,
            l_max: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            backbone_epochs: 4,
            backbone_lr: 3e-3,
            backbone_loss: PretrainLoss::Response,
            rank,
            alpha: 4.0 * rank as f64,
            dropout: 0.1,
            targets: LinearKind::ALL
                .iter()
                .map(|k| k.short().to_string())
                .collect(),
            epochs: DEFAULT_EPOCHS,
            base_lr: BASE_LR,
            expert_epochs: DEFAULT_EPOCHS,
            expert_lr: EXPERT_LR,
            batch_size: DEFAULT_BATCH,
            d_proj: DEFAULT_D_PROJ,
            sample_cap: DEFAULT_SAMPLE_CAP,
            k_initial: DEFAULT_K,
            birch_threshold: DEFAULT_THRESHOLD,
            birch_branching: DEFAULT_BRANCHING,
            linkage: Linkage::Single,
            rebalance_ratio: DEFAULT_RATIO,
            rebalance_max_iter: DEFAULT_MAX_ITER,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            top_k: None,
            sc_samples: SC_SAMPLES,
            sc_temperature: SC_TEMPERATURE,
            lora_ens_extra: ENSEMBLE_EXTRA,
            mole_epochs: 1,
            mole_lr: EXPERT_LR,
            baselines: Vec::new(),
            seed_data: 1,
            seed_init: 2,
            seed_shuffle: 3,
            seed_projection: 4,
            seed_cluster: 5,
            seed_decode: 6,
            seed_tiebreak: 7,
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let c: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads `path`; relative corpus paths resolve against the file's
    /// directory and `ELREA_OUT_DIR`, when set, replaces `run_dir`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut c.train_path, &mut c.test_path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            c.run_dir = PathBuf::from(dir);
        }
        Ok(c)
    }

    /// Replaces every named seed with one derived from `seed`. Derived
    /// seeds keep 63 bits so the config still round-trips through TOML.
    pub fn reseed(&mut self, seed: u64) {
        let seeds = [
            &mut self.seed_data,
            &mut self.seed_init,
            &mut self.seed_shuffle,
            &mut self.seed_projection,
            &mut self.seed_cluster,
            &mut self.seed_decode,
            &mut self.seed_tiebreak,
        ];
        for (i, s) in seeds.into_iter().enumerate() {
            *s = derive_seed(seed, &[i as u64]) >> 1;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.train_path.is_some() != self.test_path.is_some() {
            return bad("train_path and test_path must be set together");
        }
        if self.train_path.is_none() && self.families.is_empty() {
            return bad("no task families");
        }
        for f in &self.families {
            TaskFamily::from_name(f)?;
        }
        if self.targets.is_empty() {
            return bad("no adapter targets");
        }
        self.target_kinds()?;
        if self.rank == 0 || self.epochs == 0 || self.expert_epochs == 0 || self.batch_size == 0 {
            return bad("rank, epochs, expert_epochs and batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.top_k == Some(0) {
            return bad("top_k must be at least 1");
        }
        if self.sc_samples == 0 || self.sc_temperature <= 0.0 {
            return bad("self-consistency needs samples >= 1 and temperature > 0");
        }
        for b in &self.baselines {
            super::Method::from_name(b)?;
        }
        self.birch().validate()
    }

    pub fn target_kinds(&self) -> Result<Vec<LinearKind>> {
        self.targets
            .iter()
            .map(|t| {
                LinearKind::from_short(t)
                    .ok_or_else(|| Error::Config(format!("unknown adapter target `{t}`")))
            })
            .collect()
    }

    pub fn lm_config(&self, vocab: &Vocab) -> LmConfig {
        LmConfig {
            vocab_size: vocab.size(),
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            l_max: self.l_max,
        }
    }

    pub fn init_adapter(&self, lm: &LmConfig) -> Result<LoraAdapter> {
        init_lora_with(
            lm,
            self.rank,
            self.alpha,
            self.dropout,
            &self.target_kinds()?,
            self.seed_init,
        )
    }

    pub fn birch(&self) -> BirchParams {
        BirchParams {
            threshold: self.birch_threshold,
            branching: self.birch_branching,
            k: self.k_initial,
            linkage: self.linkage,
        }
    }

    pub fn base_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            eta0: self.base_lr,
            batch_size: self.batch_size,
            seed: self.seed_shuffle,
        }
    }

    /// Expert `c` (zero-based) of the partition named by `tag`.
    pub fn expert_train(&self, tag: u64, c: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.expert_epochs,
            eta0: self.expert_lr,
            batch_size: self.batch_size,
            seed: derive_seed(self.seed_shuffle, &[tag, c as u64]),
        }
    }

    pub fn backbone_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.backbone_epochs,
            eta0: self.backbone_lr,
            batch_size: self.batch_size,
            seed: derive_seed(self.seed_shuffle, &[0xb0]),
        }
    }
}
