use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::eval::{answers_match, EvalReport};
use super::{Method, Run, Stage, Variant};
use crate::adapters::LoraAdapter;
use crate::checkpoint::{self, Checkpoint};
use crate::clusterer::{birch_fit, cluster_report, dominant_shares, rebalance, ClusterModel};
use crate::corpus::{
    extract_answer, load_jsonl, synth_generate, tokenize, tokenize_all, write_jsonl, Example,
    TokenSequence, Vocab,
};
use crate::ensemble::{
    generate_mix, lora_ensembles, memory_estimate, moe_lambdas, moe_merge, mole_gate_csv,
    mole_train, random_cluster_partition, self_consistency, uniform_weights, Ensemble,
    GenerationResult,
};
use crate::error::{Error, Result};
use crate::gradfeat::{build_feature_matrix, FeatureMatrix, ProjectionSpec};
use crate::model::{init_backbone, AdapterMix, GateSet, ParameterStore};
use crate::router::{route_batch, routing_csv, summary_csv, RoutedInstance, RoutingWeights};
use crate::seeding::derive_seed;
use crate::trainer::{pretrain_backbone, train, EpochRecord, TrainConfig, TrainRun};

/// Seed-path tags that keep the expert partitions' streams apart.
const TAG_ELREA_EXPERTS: u64 = 0xe1;
const TAG_RANDOM_EXPERTS: u64 = 0xe2;
const TAG_RANDOM_PARTITION: u64 = 0xe3;
const TAG_MOLE: u64 = 0xe4;

/// Feature columns kept in the inspection CSV.
const CSV_DIMS: usize = 16;

pub(super) fn execute(run: &Run, stage: Stage) -> Result<()> {
    for up in stage.upstream() {
        run.require(up)?;
    }
    let clock = Instant::now();
    let mut timing = match stage {
        Stage::Synth => synth(run)?,
        Stage::InitBackbone => init_backbone_stage(run)?,
        Stage::TrainBase => train_base(run)?,
        Stage::GradFeatures => grad_features(run)?,
        Stage::Cluster => cluster(run)?,
        Stage::TrainExperts => train_experts(run)?,
        Stage::Route => route(run)?,
        Stage::Baseline(m) => baseline(run, m)?,
        Stage::Generate(v) => generate(run, v)?,
        Stage::Evaluate(v) => evaluate(run, v)?,
        Stage::Report => report(run)?,
    };
    timing["seconds"] = json!(clock.elapsed().as_secs_f64());
    run.record_time(stage, timing)
}

/// Every stage needed for ELREA plus the configured baselines, then the
/// evaluations and the report.
pub fn run_all(run: &Run, top_k: Option<usize>) -> Result<()> {
    let mut stages = vec![
        Stage::Synth,
        Stage::InitBackbone,
        Stage::TrainBase,
        Stage::GradFeatures,
        Stage::Cluster,
        Stage::TrainExperts,
        Stage::Route,
    ];
    let mut methods = vec![Method::Base, Method::Elrea];
    for b in &run.config.baselines {
        let m = Method::from_name(b)?;
        if m.needs_training() {
            stages.push(Stage::Baseline(m));
        }
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    for &m in &methods {
        stages.push(Stage::Generate(Variant::new(m, top_k.or(run.config.top_k))));
    }
    for &m in &methods {
        stages.push(Stage::Evaluate(Variant::new(m, top_k.or(run.config.top_k))));
    }
    stages.push(Stage::Report);
    for s in stages {
        eprintln!("[elrea] {}", s.command());
        execute(run, s)?;
    }
    Ok(())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- data

struct Data {
    vocab: Vocab,
    train: Vec<Example>,
    test: Vec<Example>,
}

impl Data {
    fn load(run: &Run) -> Result<Data> {
        let dir = run.path(Stage::Synth);
        Ok(Data {
            vocab: Vocab::load(&dir.join("vocab.txt"))?,
            train: load_jsonl(&dir.join("train.jsonl"))?,
            test: load_jsonl(&dir.join("test.jsonl"))?,
        })
    }

    /// Tokenized training items; over-length examples are dropped.
    fn train_items(&self, l_max: usize) -> Result<Vec<(String, TokenSequence)>> {
        let (kept, _) = tokenize_all(&self.train, &self.vocab, l_max)?;
        Ok(kept
            .into_iter()
            .map(|(i, s)| (self.train[i].id.clone(), s))
            .collect())
    }

    /// Test prompts (`BOS instr SEP`) that leave room for at least one token.
    fn test_prompts(&self, l_max: usize) -> Result<Vec<(usize, TokenSequence)>> {
        let mut out = Vec::new();
        for (i, ex) in self.test.iter().enumerate() {
            let prompt = Example {
                response: String::new(),
                ..ex.clone()
            };
            match tokenize(&prompt, &self.vocab, l_max - 1) {
                Ok(s) => out.push((i, s)),
                Err(Error::OverLength { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    fn train_tags(&self) -> BTreeMap<String, String> {
        self.train
            .iter()
            .map(|e| (e.id.clone(), e.source_tag.clone()))
            .collect()
    }
}

fn prefixed(examples: Vec<Example>, prefix: &str) -> Vec<Example> {
    examples
        .into_iter()
        .map(|e| Example {
            id: format!("{prefix}{}", e.id),
            ..e
        })
        .collect()
}

fn synth(run: &Run) -> Result<Value> {
    let c = &run.config;
    let dir = run.fresh_dir(Stage::Synth)?;
    let (train, test, pretrain) = match (&c.train_path, &c.test_path) {
        (Some(tr), Some(te)) => {
            let train = load_jsonl(tr)?;
            let test = load_jsonl(te)?;
            (train.clone(), test, train)
        }
        _ => {
            let mix = |n: usize| -> Vec<(String, usize)> {
                c.families.iter().map(|f| (f.clone(), n)).collect()
            };
            let train = prefixed(
                synth_generate(&mix(c.train_per_family), c.seed_data)?,
                "train-",
            );
            let test = prefixed(
                synth_generate(&mix(c.test_per_family), derive_seed(c.seed_data, &[1]))?,
                "test-",
            );
            let pretrain = prefixed(
                synth_generate(&mix(c.pretrain_per_family), derive_seed(c.seed_data, &[2]))?,
                "pre-",
            );
            (train, test, pretrain)
        }
    };
    let vocab = Vocab::from_symbols(
        Vocab::printable_ascii().symbols().iter().copied().chain(
            train
                .iter()
                .chain(&test)
                .chain(&pretrain)
                .flat_map(|e| e.instruction.chars().chain(e.response.chars())),
        ),
    );
    write_jsonl(&dir.join("train.jsonl"), &train)?;
    write_jsonl(&dir.join("test.jsonl"), &test)?;
    write_jsonl(&dir.join("pretrain.jsonl"), &pretrain)?;
    vocab.save(&dir.join("vocab.txt"))?;
    let (_, dropped_train) = tokenize_all(&train, &vocab, c.l_max)?;
    let (_, dropped_pre) = tokenize_all(&pretrain, &vocab, c.l_max)?;
    run.seal(
        Stage::Synth,
        json!({
            "train": train.len(),
            "test": test.len(),
            "pretrain": pretrain.len(),
            "vocab_size": vocab.size(),
            "discarded_over_length": { "train": dropped_train, "pretrain": dropped_pre },
        }),
    )?;
    Ok(json!({}))
}

// ------------------------------------------------------------ backbone

pub(super) fn load_backbone(run: &Run) -> Result<ParameterStore> {
    ParameterStore::load(&run.path(Stage::InitBackbone).join("backbone.ckpt"))
}

fn init_backbone_stage(run: &Run) -> Result<Value> {
    let c = &run.config;
    let data = Data::load(run)?;
    let pre = load_jsonl(&run.path(Stage::Synth).join("pretrain.jsonl"))?;
    let (kept, _) = tokenize_all(&pre, &data.vocab, c.l_max)?;
    let seqs: Vec<TokenSequence> = kept.into_iter().map(|(_, s)| s).collect();
    let lm = c.lm_config(&data.vocab);
    lm.validate()?;
    let init = init_backbone(&lm, c.seed_init)?;
    let dir = run.fresh_dir(Stage::InitBackbone)?;
    let (params, curve) = if c.backbone_epochs == 0 {
        (init, Vec::new())
    } else {
        pretrain_backbone(&init, &seqs, &c.backbone_train(), c.backbone_loss)?
    };
    params.save(&dir.join("backbone.ckpt"), c.seed_init)?;
    let mut csv = String::from("epoch,mean_loss\n");
    for (e, l) in curve.iter().enumerate() {
        let _ = writeln!(csv, "{},{l:.17e}", e + 1);
    }
    write(&dir.join("curve.csv"), csv)?;
    run.seal(
        Stage::InitBackbone,
        json!({ "params": params.param_count(), "sequences": seqs.len() }),
    )?;
    Ok(json!({}))
}

// ------------------------------------------------------------ training

fn epoch_dir(dir: &Path, e: usize) -> PathBuf {
    dir.join(format!("epoch-{e}"))
}

fn save_run_epochs(dir: &Path, seed: u64) -> impl FnMut(&EpochRecord) -> Result<()> + '_ {
    move |r: &EpochRecord| r.save(&epoch_dir(dir, r.epoch), seed)
}

pub(super) fn load_epochs(dir: &Path, epochs: usize) -> Result<Vec<EpochRecord>> {
    (1..=epochs)
        .map(|e| EpochRecord::load(&epoch_dir(dir, e)))
        .collect()
}

pub(super) fn load_final(dir: &Path, epochs: usize) -> Result<LoraAdapter> {
    LoraAdapter::load(&epoch_dir(dir, epochs).join("adapter.ckpt"))
}

fn train_base(run: &Run) -> Result<Value> {
    let c = &run.config;
    let data = Data::load(run)?;
    let backbone = load_backbone(run)?;
    let seqs: Vec<TokenSequence> = data
        .train_items(c.l_max)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    let init = c.init_adapter(&backbone.config)?;
    let dir = run.fresh_dir(Stage::TrainBase)?;
    let cfg = c.base_train();
    let tr = train(
        &backbone,
        &init,
        &seqs,
        &cfg,
        None,
        save_run_epochs(&dir, cfg.seed),
    )?;
    let losses: Vec<f64> = tr.epochs.iter().map(EpochRecord::mean_loss).collect();
    run.seal(
        Stage::TrainBase,
        json!({ "sequences": seqs.len(), "adapter_params": init.param_count(), "epoch_mean_loss": losses }),
    )?;
    Ok(json!({ "train_seconds": tr.seconds() }))
}

fn grad_features(run: &Run) -> Result<Value> {
    let c = &run.config;
    let data = Data::load(run)?;
    let backbone = load_backbone(run)?;
    let epochs = load_epochs(&run.path(Stage::TrainBase), c.epochs)?;
    let spec = ProjectionSpec::new(c.seed_projection, c.d_proj, epochs[0].adapter.param_count())?;
    let dir = run.path(Stage::GradFeatures);
    // Progress chunks from an interrupted run survive; everything else goes.
    if dir.exists() {
        for entry in fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .flatten()
        {
            let p = entry.path();
            if !p
                .file_name()
                .is_some_and(|n| n.to_string_lossy().starts_with("progress-"))
            {
                let r = if p.is_dir() {
                    fs::remove_dir_all(&p)
                } else {
                    fs::remove_file(&p)
                };
                r.map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    // Chunks are keyed by this stage's hash so a changed config never
    // resumes from stale rows.
    let hash = Stage::GradFeatures.config_hash(c)?;
    let progress = |split: &str| dir.join(format!("progress-{split}-{}", &hash[..12]));
    let train_items = data.train_items(c.l_max)?;
    let clock = Instant::now();
    let train_p = progress("train");
    let train_fm = build_feature_matrix(&backbone, &epochs, &train_items, &spec, Some(&train_p))?;
    let train_seconds = clock.elapsed().as_secs_f64();
    let test_items: Vec<(String, TokenSequence)> = data
        .test_prompts(c.l_max)?
        .into_iter()
        .map(|(i, s)| (data.test[i].id.clone(), s))
        .collect();
    let clock = Instant::now();
    let test_p = progress("test");
    let test_fm = build_feature_matrix(&backbone, &epochs, &test_items, &spec, Some(&test_p))?;
    let test_seconds = clock.elapsed().as_secs_f64();
    train_fm.save(&dir, "train")?;
    test_fm.save(&dir, "test")?;
    train_fm.write_csv(&dir.join("train_features.csv"), CSV_DIMS)?;
    for p in [train_p, test_p] {
        fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    run.seal(
        Stage::GradFeatures,
        json!({
            "source_dim": spec.source_dim,
            "d_proj": spec.d_proj,
            "train_rows": train_fm.len(),
            "train_excluded": train_fm.excluded.len(),
            "test_rows": test_fm.len(),
            "test_excluded": test_fm.excluded.len(),
        }),
    )?;
    Ok(json!({ "train_seconds": train_seconds, "test_seconds": test_seconds }))
}

fn cluster(run: &Run) -> Result<Value> {
    let c = &run.config;
    let data = Data::load(run)?;
    let features = FeatureMatrix::load(&run.path(Stage::GradFeatures), "train")?;
    let dir = run.fresh_dir(Stage::Cluster)?;
    let initial = birch_fit(&features, c.sample_cap, &c.birch(), c.seed_cluster)?;
    let model = rebalance(
        &initial,
        &features,
        c.rebalance_max_iter,
        c.rebalance_ratio,
        &c.birch(),
        c.sample_cap,
        c.seed_cluster,
    )?;
    model.save(&dir)?;
    let tags = data.train_tags();
    write(&dir.join("report.csv"), cluster_report(&model, &tags)?)?;
    let shares = dominant_shares(&model, &tags)?;
    run.seal(
        Stage::Cluster,
        json!({
            "initial_sizes": initial.sizes(),
            "sizes": model.sizes(),
            "clusters": model.n_clusters(),
            "rebalance_iterations": model.history.len(),
            "dominant_shares": shares,
        }),
    )?;
    Ok(json!({}))
}

fn cluster_dir(dir: &Path, c: usize) -> PathBuf {
    dir.join(format!("cluster-{:02}", c + 1))
}

/// Trains one expert per group from the final base adapter.
fn train_partition(
    run: &Run,
    groups: &[Vec<usize>],
    items: &[(String, TokenSequence)],
    dir: &Path,
    tag: u64,
) -> Result<(Vec<TrainRun>, f64)> {
    let backbone = load_backbone(run)?;
    let base = load_final(&run.path(Stage::TrainBase), run.config.epochs)?;
    let mut runs = Vec::new();
    let mut seconds = 0.0;
    for (c, members) in groups.iter().enumerate() {
        let seqs: Vec<TokenSequence> = members.iter().map(|&i| items[i].1.clone()).collect();
        let cfg = run.config.expert_train(tag, c);
        let d = cluster_dir(dir, c);
        let tr = train(
            &backbone,
            &base,
            &seqs,
            &cfg,
            None,
            save_run_epochs(&d, cfg.seed),
        )?;
        seconds += tr.seconds();
        runs.push(tr);
    }
    Ok((runs, seconds))
}

/// Indices into `items` for each cluster of `model`.
fn groups_of(model: &ClusterModel, items: &[(String, TokenSequence)]) -> Result<Vec<Vec<usize>>> {
    let index: BTreeMap<&str, usize> = items
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (id.as_str(), i))
        .collect();
    let mut groups = vec![Vec::new(); model.n_clusters()];
    for (id, &l) in model.ids.iter().zip(&model.labels) {
        let i = *index
            .get(id.as_str())
            .ok_or_else(|| Error::Cluster(format!("clustered id {id} is not a training item")))?;
        groups[l].push(i);
    }
    Ok(groups)
}

fn train_experts(run: &Run) -> Result<Value> {
    let data = Data::load(run)?;
    let items = data.train_items(run.config.l_max)?;
    let model = ClusterModel::load(&run.path(Stage::Cluster))?;
    let groups = groups_of(&model, &items)?;
    let dir = run.fresh_dir(Stage::TrainExperts)?;
    let (runs, seconds) = train_partition(run, &groups, &items, &dir, TAG_ELREA_EXPERTS)?;
    let losses: Vec<f64> = runs
        .iter()
        .map(|r| r.epochs.last().unwrap().mean_loss())
        .collect();
    run.seal(
        Stage::TrainExperts,
        json!({ "experts": runs.len(), "sizes": model.sizes(), "final_mean_loss": losses }),
    )?;
    Ok(json!({ "train_seconds": seconds }))
}

pub(super) fn load_experts(dir: &Path, n: usize, epochs: usize) -> Result<Vec<LoraAdapter>> {
    (0..n)
        .map(|c| load_final(&cluster_dir(dir, c), epochs))
        .collect()
}

// ------------------------------------------------------------- routing

#[derive(Serialize, Deserialize)]
struct StoredRoute {
    id: String,
    weights: RoutingWeights,
    note: Option<String>,
}

fn route(run: &Run) -> Result<Value> {
    let features = FeatureMatrix::load(&run.path(Stage::GradFeatures), "test")?;
    let model = ClusterModel::load(&run.path(Stage::Cluster))?;
    let dir = run.fresh_dir(Stage::Route)?;
    let routed = route_batch(&features, &model.centroids);
    let c = model.n_clusters();
    write(&dir.join("weights.csv"), routing_csv(&routed, c))?;
    write(&dir.join("summary.csv"), summary_csv(&routed, c))?;
    let stored: Vec<StoredRoute> = routed
        .iter()
        .map(|r| StoredRoute {
            id: r.id.clone(),
            weights: r.weights.clone(),
            note: r.note.clone(),
        })
        .collect();
    write(
        &dir.join("weights.json"),
        serde_json::to_string(&stored).unwrap() + "\n",
    )?;
    let fallbacks = routed.iter().filter(|r| r.note.is_some()).count();
    run.seal(
        Stage::Route,
        json!({ "instances": routed.len(), "clusters": c, "fallbacks": fallbacks }),
    )?;
    Ok(json!({}))
}

fn load_routes(run: &Run) -> Result<BTreeMap<String, RoutedInstance>> {
    let p = run.path(Stage::Route).join("weights.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let stored: Vec<StoredRoute> =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(stored
        .into_iter()
        .map(|s| {
            (
                s.id.clone(),
                RoutedInstance {
                    id: s.id,
                    weights: s.weights,
                    note: s.note,
                },
            )
        })
        .collect())
}

// ----------------------------------------------------------- baselines

fn save_gates(path: &Path, gates: &GateSet, n_adapters: usize) -> Result<()> {
    let mut ck = Checkpoint::new(json!({ "kind": "mole-gates", "adapters": n_adapters }));
    for (name, g) in gates {
        ck.push(
            name.clone(),
            vec![n_adapters, g.len() / n_adapters.max(1)],
            g.clone(),
        );
    }
    ck.write(path)
}

fn load_gates(path: &Path) -> Result<GateSet> {
    let ck = Checkpoint::read(path)?;
    checkpoint::expect_kind(&ck, "mole-gates")?;
    Ok(ck.arrays.into_iter().map(|(n, _, d)| (n, d)).collect())
}

fn baseline(run: &Run, m: Method) -> Result<Value> {
    let c = &run.config;
    let data = Data::load(run)?;
    let items = data.train_items(c.l_max)?;
    let stage = Stage::Baseline(m);
    stage.config_hash(c)?;
    match m {
        Method::Mole => {
            let backbone = load_backbone(run)?;
            let base = load_final(&run.path(Stage::TrainBase), c.epochs)?;
            let n = ClusterModel::load(&run.path(Stage::Cluster))?.n_clusters();
            let experts = load_experts(&run.path(Stage::TrainExperts), n, c.expert_epochs)?;
            let adapters: Vec<&LoraAdapter> = std::iter::once(&base).chain(&experts).collect();
            let seqs: Vec<TokenSequence> = items.into_iter().map(|(_, s)| s).collect();
            let cfg = TrainConfig {
                epochs: c.mole_epochs,
                eta0: c.mole_lr,
                batch_size: c.batch_size,
                seed: derive_seed(c.seed_shuffle, &[TAG_MOLE]),
            };
            let clock = Instant::now();
            let (gates, losses) = mole_train(&backbone, &adapters, &seqs, &cfg)?;
            let seconds = clock.elapsed().as_secs_f64();
            let dir = run.fresh_dir(stage)?;
            save_gates(&dir.join("gates.ckpt"), &gates, adapters.len())?;
            let prompts: Vec<TokenSequence> = data
                .test_prompts(c.l_max)?
                .into_iter()
                .map(|(_, s)| s)
                .collect();
            write(
                &dir.join("gates.csv"),
                mole_gate_csv(&backbone, &adapters, &gates, &prompts)?,
            )?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in losses.iter().enumerate() {
                let _ = writeln!(csv, "{i},{l:.17e}");
            }
            write(&dir.join("loss.csv"), csv)?;
            run.seal(
                stage,
                json!({ "adapters": adapters.len(), "steps": losses.len() }),
            )?;
            Ok(json!({ "train_seconds": seconds }))
        }
        Method::LoraEns => {
            let backbone = load_backbone(run)?;
            let template = c.init_adapter(&backbone.config)?;
            let seqs: Vec<TokenSequence> = items.into_iter().map(|(_, s)| s).collect();
            let runs = lora_ensembles(
                &backbone,
                &template,
                &seqs,
                &c.base_train(),
                c.lora_ens_extra,
            )?;
            let dir = run.fresh_dir(stage)?;
            let mut seconds = 0.0;
            for (i, r) in runs.iter().enumerate() {
                let d = dir.join(format!("member-{:02}", i + 1));
                let mut save = save_run_epochs(&d, r.config.seed);
                for e in &r.epochs {
                    save(e)?;
                }
                seconds += r.seconds();
            }
            run.seal(stage, json!({ "members": runs.len() }))?;
            Ok(json!({ "train_seconds": seconds }))
        }
        Method::RandomCluster => {
            let model = ClusterModel::load(&run.path(Stage::Cluster))?;
            let labels = random_cluster_partition(
                items.len(),
                &model.sizes(),
                derive_seed(c.seed_cluster, &[TAG_RANDOM_PARTITION]),
            )?;
            let mut groups = vec![Vec::new(); model.n_clusters()];
            for (i, &l) in labels.iter().enumerate() {
                groups[l].push(i);
            }
            let dir = run.fresh_dir(stage)?;
            let mut csv = String::from("id,cluster\n");
            for ((id, _), l) in items.iter().zip(&labels) {
                let _ = writeln!(csv, "{id},{}", l + 1);
            }
            write(&dir.join("assignments.csv"), csv)?;
            let (runs, seconds) = train_partition(run, &groups, &items, &dir, TAG_RANDOM_EXPERTS)?;
            run.seal(
                stage,
                json!({ "experts": runs.len(), "sizes": model.sizes() }),
            )?;
            Ok(json!({ "train_seconds": seconds }))
        }
        _ => Err(Error::Config(format!(
            "`{m}` has no training stage; run `generate --method {m}`"
        ))),
    }
}

// ---------------------------------------------------------- generation

#[derive(Serialize, Deserialize)]
struct GenLine {
    id: String,
    prompt: String,
    generation: String,
    answer: Option<String>,
    /// Per-cluster weights, when the method has them.
    weights: Option<Vec<f64>>,
    w_base: Option<f64>,
    truncated: bool,
    memory_bytes: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    samples: Option<Vec<String>>,
}

/// Adapters and weights a variant decodes with.
enum Decoder {
    Single(LoraAdapter),
    Ensemble {
        adapters: Vec<LoraAdapter>,
        weights: Weights,
    },
    Routed {
        adapters: Vec<LoraAdapter>,
        weights: Weights,
        merge: bool,
    },
    Gated {
        adapters: Vec<LoraAdapter>,
        gates: GateSet,
    },
    SelfConsistency(LoraAdapter),
}

enum Weights {
    Fixed(RoutingWeights),
    PerInstance(BTreeMap<String, RoutedInstance>, Option<usize>),
}

impl Weights {
    fn for_id(&self, id: &str) -> Result<RoutingWeights> {
        match self {
            Weights::Fixed(w) => Ok(w.clone()),
            Weights::PerInstance(map, k) => {
                let w = &map
                    .get(id)
                    .ok_or_else(|| Error::Weights(format!("no routing weights for {id}")))?
                    .weights;
                Ok(match k {
                    Some(k) => w.top_k(*k),
                    None => w.clone(),
                })
            }
        }
    }
}

fn decoder(run: &Run, v: Variant) -> Result<Decoder> {
    let c = &run.config;
    let base = load_final(&run.path(Stage::TrainBase), c.epochs)?;
    let elrea_experts = |base: LoraAdapter| -> Result<Vec<LoraAdapter>> {
        let n = ClusterModel::load(&run.path(Stage::Cluster))?.n_clusters();
        let mut all = vec![base];
        all.extend(load_experts(
            &run.path(Stage::TrainExperts),
            n,
            c.expert_epochs,
        )?);
        Ok(all)
    };
    Ok(match v.method {
        Method::Base => Decoder::Single(base),
        Method::SelfConsistency => Decoder::SelfConsistency(base),
        Method::Elrea => Decoder::Ensemble {
            adapters: elrea_experts(base)?,
            weights: Weights::PerInstance(load_routes(run)?, v.top_k),
        },
        Method::Uniform => {
            let adapters = elrea_experts(base)?;
            let w = uniform_weights(adapters.len() - 1);
            Decoder::Ensemble {
                adapters,
                weights: Weights::Fixed(w),
            }
        }
        Method::MoeRouting | Method::MoeMerging => Decoder::Routed {
            adapters: elrea_experts(base)?,
            weights: Weights::PerInstance(load_routes(run)?, v.top_k),
            merge: v.method == Method::MoeMerging,
        },
        Method::Mole => {
            let adapters = elrea_experts(base)?;
            let gates = load_gates(&run.path(Stage::Baseline(Method::Mole)).join("gates.ckpt"))?;
            Decoder::Gated { adapters, gates }
        }
        Method::LoraEns => {
            let dir = run.path(Stage::Baseline(Method::LoraEns));
            let mut adapters = vec![base];
            for i in 0..c.lora_ens_extra {
                adapters.push(load_final(
                    &dir.join(format!("member-{:02}", i + 1)),
                    c.epochs,
                )?);
            }
            let w = uniform_weights(adapters.len() - 1);
            Decoder::Ensemble {
                adapters,
                weights: Weights::Fixed(w),
            }
        }
        Method::RandomCluster => {
            let n = ClusterModel::load(&run.path(Stage::Cluster))?.n_clusters();
            let mut adapters = vec![base];
            adapters.extend(load_experts(
                &run.path(Stage::Baseline(Method::RandomCluster)),
                n,
                c.expert_epochs,
            )?);
            let w = uniform_weights(n);
            Decoder::Ensemble {
                adapters,
                weights: Weights::Fixed(w),
            }
        }
    })
}

struct Decoded {
    line: GenLine,
    seconds: f64,
}

fn decode_one(
    run: &Run,
    backbone: &ParameterStore,
    vocab: &Vocab,
    dec: &Decoder,
    idx: usize,
    ex: &Example,
    prompt: &TokenSequence,
) -> Result<Decoded> {
    let c = &run.config;
    let max_new = c.max_new_tokens;
    let finish = |g: GenerationResult,
                  w: Option<&RoutingWeights>,
                  adapters: &[LoraAdapter],
                  active: usize| {
        let text = g.text(vocab);
        let refs: Vec<&LoraAdapter> = adapters.iter().collect();
        Decoded {
            line: GenLine {
                id: ex.id.clone(),
                prompt: ex.instruction.clone(),
                answer: extract_answer(&text).map(str::to_string),
                generation: text,
                weights: w.map(|w| w.cluster.clone()),
                w_base: w.map(|w| w.base),
                truncated: g.truncated,
                memory_bytes: memory_estimate(
                    backbone,
                    &refs,
                    active,
                    prompt.len() + g.tokens.len(),
                ),
                samples: None,
            },
            seconds: g.seconds,
        }
    };
    let toks = &prompt.tokens;
    Ok(match dec {
        Decoder::Single(a) => {
            let g = generate_mix(backbone, &AdapterMix::Single(a), toks, max_new)?;
            finish(g, None, std::slice::from_ref(a), 1)
        }
        Decoder::Ensemble { adapters, weights } => {
            let w = weights.for_id(&ex.id)?;
            let e = Ensemble::new(backbone, adapters.iter().collect())?;
            let g = e.generate(toks, || Ok(w.as_vec()), max_new)?;
            let active = g.counters.peak_adapters;
            finish(g, Some(&w), adapters, active)
        }
        Decoder::Routed {
            adapters,
            weights,
            merge,
        } => {
            let w = weights.for_id(&ex.id)?;
            let refs: Vec<&LoraAdapter> = adapters.iter().collect();
            let g = if *merge {
                let merged = moe_merge(&refs, &w.as_vec())?;
                generate_mix(backbone, &AdapterMix::Single(&merged), toks, max_new)?
            } else {
                let mix = AdapterMix::Routed {
                    experts: refs,
                    lambdas: moe_lambdas(&w.as_vec())?,
                };
                generate_mix(backbone, &mix, toks, max_new)?
            };
            finish(g, Some(&w), adapters, 1)
        }
        Decoder::Gated { adapters, gates } => {
            let mix = AdapterMix::Gated {
                experts: adapters.iter().collect(),
                gates,
            };
            let g = generate_mix(backbone, &mix, toks, max_new)?;
            finish(g, None, adapters, 1)
        }
        Decoder::SelfConsistency(a) => {
            let clock = Instant::now();
            let seeds = (
                derive_seed(c.seed_decode, &[idx as u64]),
                derive_seed(c.seed_tiebreak, &[idx as u64]),
            );
            let vote = self_consistency(
                backbone,
                a,
                toks,
                vocab,
                c.sc_samples,
                c.sc_temperature,
                max_new,
                seeds,
            )?;
            let longest = vote
                .generations
                .iter()
                .map(|g| g.chars().count())
                .max()
                .unwrap_or(0);
            Decoded {
                line: GenLine {
                    id: ex.id.clone(),
                    prompt: ex.instruction.clone(),
                    generation: vote.generations[0].clone(),
                    answer: vote.answer.clone(),
                    weights: None,
                    w_base: None,
                    truncated: false,
                    memory_bytes: memory_estimate(backbone, &[a], 1, prompt.len() + longest),
                    samples: Some(vote.generations),
                },
                seconds: clock.elapsed().as_secs_f64(),
            }
        }
    })
}

fn generate(run: &Run, v: Variant) -> Result<Value> {
    let c = &run.config;
    let data = Data::load(run)?;
    let backbone = load_backbone(run)?;
    let dec = decoder(run, v)?;
    let prompts = data.test_prompts(c.l_max)?;
    let clock = Instant::now();
    let decoded: Vec<Decoded> = prompts
        .par_iter()
        .map(|(i, p)| decode_one(run, &backbone, &data.vocab, &dec, *i, &data.test[*i], p))
        .collect::<Result<_>>()?;
    let wall = clock.elapsed().as_secs_f64();
    let dir = run.fresh_dir(Stage::Generate(v))?;
    let mut out = String::new();
    let mut times = String::new();
    for d in &decoded {
        out.push_str(&serde_json::to_string(&d.line).unwrap());
        out.push('\n');
        times.push_str(
            &serde_json::to_string(&json!({ "id": d.line.id, "seconds": d.seconds })).unwrap(),
        );
        times.push('\n');
    }
    write(&dir.join("generations.jsonl"), out)?;
    let tdir = run.root.join("timing");
    fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    write(
        &tdir.join(format!("{}.jsonl", Stage::Generate(v).timing_name())),
        times,
    )?;
    let mem = decoded
        .iter()
        .map(|d| d.line.memory_bytes)
        .max()
        .unwrap_or(0);
    let truncated = decoded.iter().filter(|d| d.line.truncated).count();
    run.seal(
        Stage::Generate(v),
        json!({
            "method": v.method.name(),
            "top_k": v.top_k,
            "instances": decoded.len(),
            "skipped_over_length": data.test.len() - prompts.len(),
            "truncated": truncated,
            "peak_memory_bytes": mem,
        }),
    )?;
    Ok(json!({ "inference_seconds": wall }))
}

fn load_generations(run: &Run, v: Variant) -> Result<Vec<GenLine>> {
    let p = run.path(Stage::Generate(v)).join("generations.jsonl");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    text.lines()
        .enumerate()
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn score(run: &Run, data: &Data, v: Variant) -> Result<EvalReport> {
    let gold: BTreeMap<&str, &Example> = data.test.iter().map(|e| (e.id.as_str(), e)).collect();
    let lines = load_generations(run, v)?;
    let mut outcomes = Vec::with_capacity(lines.len());
    for l in &lines {
        let ex = gold
            .get(l.id.as_str())
            .ok_or_else(|| Error::Config(format!("generation for unknown test id {}", l.id)))?;
        outcomes.push((
            ex.source_tag.as_str(),
            answers_match(l.answer.as_deref(), &ex.response),
        ));
    }
    Ok(EvalReport::from_outcomes(&v.key(), outcomes))
}

fn evaluate(run: &Run, v: Variant) -> Result<Value> {
    let data = Data::load(run)?;
    let mut report = score(run, &data, v)?;
    if v.method != Method::Base {
        report.reference = Some(score(run, &data, Variant::new(Method::Base, None))?.tags);
    }
    let dir = run.fresh_dir(Stage::Evaluate(v))?;
    write(&dir.join("report.csv"), report.to_csv())?;
    run.seal(
        Stage::Evaluate(v),
        json!({ "micro": report.micro(), "macro": report.macro_avg() }),
    )?;
    Ok(json!({}))
}

// -------------------------------------------------------------- report

fn seconds(run: &Run, stage: Stage, key: &str) -> Option<f64> {
    run.read_time(stage).and_then(|t| t[key].as_f64())
}

/// Base-vs-ELREA timing table; missing measurements are left blank.
pub(super) fn timing_table(run: &Run) -> (String, Option<f64>) {
    let base = seconds(run, Stage::TrainBase, "train_seconds");
    let feat_train = seconds(run, Stage::GradFeatures, "train_seconds");
    let feat_test = seconds(run, Stage::GradFeatures, "test_seconds");
    let clus = seconds(run, Stage::Cluster, "seconds");
    let experts = seconds(run, Stage::TrainExperts, "train_seconds");
    let inf_base = seconds(
        run,
        Stage::Generate(Variant::new(Method::Base, None)),
        "inference_seconds",
    );
    let inf_elrea = seconds(
        run,
        Stage::Generate(Variant::new(Method::Elrea, run.config.top_k)),
        "inference_seconds",
    );
    let total = match (base, feat_train, feat_test, clus, experts) {
        (Some(a), Some(b), Some(c), Some(d), Some(e)) => Some(a + b + c + d + e),
        _ => None,
    };
    let f = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.3}"));
    let mut out = String::from("step,base_seconds,elrea_seconds\n");
    let _ = writeln!(out, "fine-tune base adapter,{},{}", f(base), f(base));
    let _ = writeln!(out, "train gradient features,,{}", f(feat_train));
    let _ = writeln!(out, "test gradient features,,{}", f(feat_test));
    let _ = writeln!(out, "clustering,,{}", f(clus));
    let _ = writeln!(out, "fine-tune experts,,{}", f(experts));
    let _ = writeln!(out, "fine-tuning total,{},{}", f(base), f(total));
    let _ = writeln!(out, "inference,{},{}", f(inf_base), f(inf_elrea));
    let ratio = match (total, base) {
        (Some(t), Some(b)) if b > 0.0 => Some(t / b),
        _ => None,
    };
    let _ = writeln!(out, "fine-tuning ratio,1.000,{}", f(ratio));
    (out, ratio)
}

fn report(run: &Run) -> Result<Value> {
    let dir = run.fresh_dir(Stage::Report)?;
    let cl = run.path(Stage::Cluster);
    fs::copy(cl.join("report.csv"), dir.join("cluster_distribution.csv"))
        .map_err(|e| Error::io(&cl, e))?;
    let rt = run.path(Stage::Route);
    fs::copy(rt.join("summary.csv"), dir.join("routing_weights.csv"))
        .map_err(|e| Error::io(&rt, e))?;
    let data = Data::load(run)?;
    let mut acc = String::from("method,micro,macro,delta_micro,delta_macro\n");
    let mut included = Vec::new();
    let base = Variant::new(Method::Base, None);
    let base_report = run
        .require(Stage::Generate(base))
        .ok()
        .map(|_| score(run, &data, base))
        .transpose()?;
    for m in Method::ALL {
        for v in [Variant::new(m, None), Variant::new(m, run.config.top_k)] {
            if included.contains(&v.key()) || run.require(Stage::Evaluate(v)).is_err() {
                continue;
            }
            let r = score(run, &data, v)?;
            let (d_micro, d_macro) = match &base_report {
                Some(b) => (
                    format!("{:+.4}", 100.0 * (r.micro() - b.micro())),
                    format!("{:+.4}", 100.0 * (r.macro_avg() - b.macro_avg())),
                ),
                None => (String::new(), String::new()),
            };
            let _ = writeln!(
                acc,
                "{},{:.4},{:.4},{d_micro},{d_macro}",
                v.key(),
                100.0 * r.micro(),
                100.0 * r.macro_avg()
            );
            included.push(v.key());
        }
    }
    write(&dir.join("accuracy.csv"), acc)?;
    let (table, ratio) = timing_table(run);
    let tdir = run.root.join("timing");
    fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    write(&tdir.join("table.csv"), table)?;
    run.seal(Stage::Report, json!({ "methods": included }))?;
    Ok(json!({ "fine_tuning_ratio": ratio }))
}
