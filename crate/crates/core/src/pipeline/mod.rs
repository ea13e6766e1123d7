//! Staged command-line workflow.
//!
//! Every stage writes into its own directory under `run_dir` together with a
//! `manifest.json` that records the stage's config hash, its seeds and the
//! SHA-256 of each output file. Downstream stages refuse to read an upstream
//! directory whose manifest is missing, was produced under a different
//! configuration, or whose files changed since. Wall-clock measurements go
//! to `run_dir/timing/` only, so everything else is byte-reproducible.

mod config;
mod eval;
mod serve;
mod stages;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub use config::{PipelineConfig, OUT_DIR_ENV};
pub use eval::{answers_match, exact_match, EvalReport, TagScore};
pub use serve::{Answer, Deployment};
pub use stages::run_all;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Base,
    Elrea,
    MoeRouting,
    MoeMerging,
    Mole,
    LoraEns,
    SelfConsistency,
    RandomCluster,
    Uniform,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Base,
        Method::Elrea,
        Method::MoeRouting,
        Method::MoeMerging,
        Method::Mole,
        Method::LoraEns,
        Method::SelfConsistency,
        Method::RandomCluster,
        Method::Uniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Elrea => "elrea",
            Method::MoeRouting => "moe-routing",
            Method::MoeMerging => "moe-merging",
            Method::Mole => "mole",
            Method::LoraEns => "lora-ens",
            Method::SelfConsistency => "self-consistency",
            Method::RandomCluster => "random-cluster",
            Method::Uniform => "uniform",
        }
    }

    pub fn from_name(s: &str) -> Result<Method> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }

    /// Methods that need their own training stage.
    pub fn needs_training(self) -> bool {
        matches!(self, Method::Mole | Method::LoraEns | Method::RandomCluster)
    }

    /// Methods whose weights come from gradient routing, so top-k applies.
    pub fn uses_routing(self) -> bool {
        matches!(
            self,
            Method::Elrea | Method::MoeRouting | Method::MoeMerging
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A generation variant: method plus optional top-k truncation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Variant {
    pub method: Method,
    pub top_k: Option<usize>,
}

impl Variant {
    pub fn new(method: Method, top_k: Option<usize>) -> Variant {
        Variant {
            method,
            top_k: top_k.filter(|_| method.uses_routing()),
        }
    }

    pub fn key(&self) -> String {
        match self.top_k {
            Some(k) => format!("{}-top{k}", self.method),
            None => self.method.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    InitBackbone,
    TrainBase,
    GradFeatures,
    Cluster,
    TrainExperts,
    Route,
    Baseline(Method),
    Generate(Variant),
    Evaluate(Variant),
    Report,
}

impl Stage {
    /// Command that produces this stage, as typed on the CLI.
    pub fn command(&self) -> String {
        match self {
            Stage::Synth => "synth".into(),
            Stage::InitBackbone => "init-backbone".into(),
            Stage::TrainBase => "train-base".into(),
            Stage::GradFeatures => "grad-features".into(),
            Stage::Cluster => "cluster".into(),
            Stage::TrainExperts => "train-experts".into(),
            Stage::Route => "route".into(),
            Stage::Baseline(m) => format!("baseline {m}"),
            Stage::Generate(v) | Stage::Evaluate(v) => {
                let verb = if matches!(self, Stage::Generate(_)) {
                    "generate"
                } else {
                    "evaluate"
                };
                match v.top_k {
                    Some(k) => format!("{verb} --method {} --top-k {k}", v.method),
                    None => format!("{verb} --method {}", v.method),
                }
            }
            Stage::Report => "report".into(),
        }
    }

    /// Directory relative to the run root.
    pub fn dir(&self) -> PathBuf {
        match self {
            Stage::Synth => "data".into(),
            Stage::InitBackbone => "backbone".into(),
            Stage::TrainBase => "base".into(),
            Stage::GradFeatures => "features".into(),
            Stage::Cluster => "clusters".into(),
            Stage::TrainExperts => "experts".into(),
            Stage::Route => "routing".into(),
            Stage::Baseline(m) => Path::new("baselines").join(m.name()),
            Stage::Generate(v) => Path::new("generations").join(v.key()),
            Stage::Evaluate(v) => Path::new("eval").join(v.key()),
            Stage::Report => "report".into(),
        }
    }

    /// File stem under `timing/`.
    pub fn timing_name(&self) -> String {
        self.dir().to_string_lossy().replace('/', "-")
    }

    pub fn upstream(&self) -> Vec<Stage> {
        match self {
            Stage::Synth => vec![],
            Stage::InitBackbone => vec![Stage::Synth],
            Stage::TrainBase => vec![Stage::InitBackbone],
            Stage::GradFeatures => vec![Stage::TrainBase],
            Stage::Cluster => vec![Stage::GradFeatures],
            Stage::TrainExperts => vec![Stage::Cluster],
            Stage::Route => vec![Stage::Cluster],
            Stage::Baseline(Method::Mole) => vec![Stage::TrainExperts],
            Stage::Baseline(Method::RandomCluster) => vec![Stage::Cluster],
            Stage::Baseline(_) => vec![Stage::TrainBase],
            Stage::Generate(v) => match v.method {
                Method::Base | Method::SelfConsistency => vec![Stage::TrainBase],
                Method::Elrea | Method::MoeRouting | Method::MoeMerging | Method::Uniform => {
                    vec![Stage::TrainExperts, Stage::Route]
                }
                m => vec![Stage::Baseline(m)],
            },
            Stage::Evaluate(v) => {
                let mut up = vec![Stage::Generate(*v)];
                if v.method != Method::Base {
                    up.push(Stage::Generate(Variant::new(Method::Base, None)));
                }
                up
            }
            Stage::Report => vec![Stage::Route],
        }
    }

    /// Config fields that influence this stage's outputs.
    fn fields(&self, c: &PipelineConfig) -> Result<Value> {
        Ok(match self {
            Stage::Synth => json!({
                "train": file_digest(c.train_path.as_deref())?,
                "test": file_digest(c.test_path.as_deref())?,
                "families": c.families,
                "train_per_family": c.train_per_family,
                "test_per_family": c.test_per_family,
                "pretrain_per_family": c.pretrain_per_family,
                "l_max": c.l_max,
                "seed_data": c.seed_data,
            }),
            Stage::InitBackbone => json!({
                "dims": [c.d_model, c.n_layers, c.n_heads, c.d_ff],
                "backbone_epochs": c.backbone_epochs,
                "backbone_lr": c.backbone_lr,
                "backbone_loss": c.backbone_loss,
                "batch_size": c.batch_size,
                "seed_init": c.seed_init,
                "seed_shuffle": c.seed_shuffle,
            }),
            Stage::TrainBase => json!({
                "rank": c.rank,
                "alpha": c.alpha,
                "dropout": c.dropout,
                "targets": c.targets,
                "epochs": c.epochs,
                "base_lr": c.base_lr,
                "batch_size": c.batch_size,
                "seed_init": c.seed_init,
                "seed_shuffle": c.seed_shuffle,
            }),
            Stage::GradFeatures => json!({
                "d_proj": c.d_proj,
                "seed_projection": c.seed_projection,
            }),
            Stage::Cluster => json!({
                "sample_cap": c.sample_cap,
                "birch": [c.birch_threshold, c.birch_branching as f64],
                "linkage": c.linkage,
                "k_initial": c.k_initial,
                "rebalance": [c.rebalance_ratio, c.rebalance_max_iter as f64],
                "seed_cluster": c.seed_cluster,
            }),
            Stage::TrainExperts | Stage::Baseline(Method::RandomCluster) => json!({
                "expert_epochs": c.expert_epochs,
                "expert_lr": c.expert_lr,
                "batch_size": c.batch_size,
                "seed_shuffle": c.seed_shuffle,
                "seed_cluster": c.seed_cluster,
            }),
            Stage::Route | Stage::Report => json!({}),
            Stage::Baseline(Method::Mole) => json!({
                "mole_epochs": c.mole_epochs,
                "mole_lr": c.mole_lr,
                "batch_size": c.batch_size,
                "seed_shuffle": c.seed_shuffle,
            }),
            Stage::Baseline(Method::LoraEns) => json!({ "lora_ens_extra": c.lora_ens_extra }),
            Stage::Baseline(m) => {
                return Err(Error::Config(format!(
                    "`{m}` has no training stage; run `generate --method {m}`"
                )))
            }
            Stage::Generate(v) => json!({
                "method": v.method.name(),
                "top_k": v.top_k,
                "max_new_tokens": c.max_new_tokens,
                "sc": if v.method == Method::SelfConsistency {
                    json!([c.sc_samples as f64, c.sc_temperature, c.seed_decode as f64, c.seed_tiebreak as f64])
                } else {
                    Value::Null
                },
            }),
            Stage::Evaluate(_) => json!({}),
        })
    }

    /// Hash of this stage's fields chained with every upstream hash.
    pub fn config_hash(&self, c: &PipelineConfig) -> Result<String> {
        let up: Vec<String> = self
            .upstream()
            .iter()
            .map(|s| s.config_hash(c))
            .collect::<Result<_>>()?;
        let doc = json!({
            "stage": self.command(),
            "fields": self.fields(c)?,
            "upstream": up,
        });
        Ok(sha256_hex(doc.to_string().as_bytes()))
    }
}

fn file_digest(path: Option<&Path>) -> Result<Value> {
    match path {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            Ok(json!(sha256_hex(&bytes)))
        }
        None => Ok(Value::Null),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Handle on one run directory under one configuration.
pub struct Run {
    pub config: PipelineConfig,
    pub root: PathBuf,
}

impl Run {
    pub fn new(config: PipelineConfig) -> Run {
        let root = config.run_dir.clone();
        Run { config, root }
    }

    pub fn path(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.dir())
    }

    /// Checks the stage's manifest against the current configuration and
    /// its recorded output hashes; returns the stage directory.
    pub fn require(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self.path(stage);
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|_| Error::MissingStage {
            stage: stage.command(),
            artifact: mpath.display().to_string(),
        })?;
        let m: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", mpath.display())))?;
        let expected = stage.config_hash(&self.config)?;
        let found = m["config_hash"].as_str().unwrap_or_default().to_string();
        if found != expected {
            return Err(Error::HashMismatch {
                artifact: format!("{} (rerun `{}`)", mpath.display(), stage.command()),
                found,
                expected,
            });
        }
        let outputs = m["outputs"].as_object().cloned().unwrap_or_default();
        for (rel, h) in outputs {
            let p = dir.join(&rel);
            let bytes = fs::read(&p).map_err(|_| Error::MissingStage {
                stage: stage.command(),
                artifact: p.display().to_string(),
            })?;
            let got = sha256_hex(&bytes);
            if Some(got.as_str()) != h.as_str() {
                return Err(Error::HashMismatch {
                    artifact: p.display().to_string(),
                    found: got,
                    expected: h.as_str().unwrap_or_default().to_string(),
                });
            }
        }
        Ok(dir)
    }

    /// Empties the stage directory so stale files cannot survive a rerun.
    fn fresh_dir(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self.path(stage);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    /// Hashes every file under the stage directory and writes the manifest.
    fn seal(&self, stage: Stage, info: Value) -> Result<()> {
        let dir = self.path(stage);
        let mut outputs = serde_json::Map::new();
        for rel in list_files(&dir)? {
            if rel == "manifest.json" {
                continue;
            }
            let p = dir.join(&rel);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            outputs.insert(rel, json!(sha256_hex(&bytes)));
        }
        let up: serde_json::Map<String, Value> = stage
            .upstream()
            .iter()
            .map(|s| Ok((s.command(), json!(s.config_hash(&self.config)?))))
            .collect::<Result<_>>()?;
        let c = &self.config;
        let m = json!({
            "stage": stage.command(),
            "config_hash": stage.config_hash(c)?,
            "upstream": up,
            "seeds": {
                "data": c.seed_data,
                "init": c.seed_init,
                "shuffle": c.seed_shuffle,
                "projection": c.seed_projection,
                "cluster": c.seed_cluster,
                "decode": c.seed_decode,
                "tiebreak": c.seed_tiebreak,
            },
            "outputs": outputs,
            "info": info,
        });
        let p = dir.join("manifest.json");
        fs::write(&p, serde_json::to_string_pretty(&m).unwrap() + "\n")
            .map_err(|e| Error::io(&p, e))
    }

    fn record_time(&self, stage: Stage, timing: Value) -> Result<()> {
        let dir = self.root.join("timing");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let p = dir.join(format!("{}.json", stage.timing_name()));
        fs::write(&p, serde_json::to_string_pretty(&timing).unwrap() + "\n")
            .map_err(|e| Error::io(&p, e))
    }

    fn read_time(&self, stage: Stage) -> Option<Value> {
        let p = self
            .root
            .join("timing")
            .join(format!("{}.json", stage.timing_name()));
        serde_json::from_str(&fs::read_to_string(p).ok()?).ok()
    }
}

/// Relative paths of every regular file below `dir`, sorted.
pub fn list_files(dir: &Path) -> Result<Vec<String>> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let p = entry.path();
            if p.is_dir() {
                walk(base, &p, out)?;
            } else {
                out.push(
                    p.strip_prefix(base)
                        .unwrap()
                        .to_string_lossy()
                        .replace('\\', "/"),
                );
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

/// Runs one stage and records its wall time.
pub fn run_stage(run: &Run, stage: Stage) -> Result<()> {
    stages::execute(run, stage)
}
