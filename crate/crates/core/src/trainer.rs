//! Adam fine-tuning with a linearly decaying learning rate, per-epoch
//! adapter checkpoints and optimizer snapshots.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adapters::LoraAdapter;
use crate::checkpoint::{self, Checkpoint};
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::model::{loss_and_grad, AdapterMix, Dropout, GradSelector, LossMask, ParameterStore};
use crate::seeding::{rng_for, TAG_DROPOUT, TAG_PERMUTE};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;
pub const BASE_LR: f64 = 5e-5;
pub const EXPERT_LR: f64 = 2e-5;
pub const DEFAULT_EPOCHS: usize = 2;
pub const DEFAULT_BATCH: usize = 16;

/// `η(t) = η₀ (1 − t / T)` for zero-based step `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearDecay {
    pub eta0: f64,
    pub total_steps: u64,
}

impl LinearDecay {
    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.eta0;
        }
        let frac = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.eta0 * (1.0 - frac)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    /// Completed steps.
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LinearDecay,
}

impl AdamState {
    pub fn new(dim: usize, schedule: LinearDecay) -> Self {
        AdamState {
            t: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            schedule,
        }
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// Learning rate the next step will use.
    pub fn next_lr(&self) -> f64 {
        self.schedule.lr(self.t)
    }

    /// Learning rate used by the most recent step (the next one if none ran).
    pub fn last_lr(&self) -> f64 {
        self.schedule.lr(self.t.saturating_sub(1))
    }

    fn check(&self, n: usize) -> Result<()> {
        if n != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                actual: n,
            });
        }
        Ok(())
    }

    /// One in-place step; returns nothing, `params` and the moments move.
    pub fn step_in_place(&mut self, grad: &[f64], params: &mut [f64]) -> Result<()> {
        self.check(grad.len())?;
        self.check(params.len())?;
        let lr = self.next_lr();
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..grad.len() {
            let g = grad[i];
            let m = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            self.m[i] = m;
            self.v[i] = v;
            params[i] -= lr * (m / c1) / ((v / c2).sqrt() + self.eps);
        }
        Ok(())
    }

    /// `η · m̂ / (√v̂ + ε)` after a hypothetical step with `grad`; the state is
    /// left untouched.
    pub fn transform(&self, grad: &[f64], eta: f64) -> Result<Vec<f64>> {
        self.check(grad.len())?;
        let t = (self.t + 1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        Ok(grad
            .iter()
            .zip(self.m.iter().zip(&self.v))
            .map(|(&g, (&m, &v))| {
                let m = (self.beta1 * m + (1.0 - self.beta1) * g) / c1;
                let v = (self.beta2 * v + (1.0 - self.beta2) * g * g) / c2;
                eta * m / (v.sqrt() + self.eps)
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new(json!({
            "kind": "adam",
            "t": self.t,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "eta0": self.schedule.eta0,
            "total_steps": self.schedule.total_steps,
        }));
        ck.push("m", vec![self.dim()], self.m.clone());
        ck.push("v", vec![self.dim()], self.v.clone());
        ck.write(path)
    }

    pub fn load(path: &Path) -> Result<AdamState> {
        let ck = Checkpoint::read(path)?;
        checkpoint::expect_kind(&ck, "adam")?;
        let mf = &ck.manifest;
        let mut arrays = ck.arrays.iter();
        let (m, v) = match (arrays.next(), arrays.next()) {
            (Some((mn, _, m)), Some((vn, _, v))) if mn == "m" && vn == "v" => {
                (m.clone(), v.clone())
            }
            _ => return Err(Error::Checkpoint("adam snapshot needs m and v".into())),
        };
        Ok(AdamState {
            t: checkpoint::get_u64(mf, "t")?,
            m,
            v,
            beta1: checkpoint::get_f64(mf, "beta1")?,
            beta2: checkpoint::get_f64(mf, "beta2")?,
            eps: checkpoint::get_f64(mf, "eps")?,
            schedule: LinearDecay {
                eta0: checkpoint::get_f64(mf, "eta0")?,
                total_steps: checkpoint::get_u64(mf, "total_steps")?,
            },
        })
    }
}

/// Functional Adam step: returns the advanced state and updated parameters.
pub fn adam_step(state: &AdamState, grad: &[f64], params: &[f64]) -> Result<(AdamState, Vec<f64>)> {
    let mut s = state.clone();
    let mut p = params.to_vec();
    s.step_in_place(grad, &mut p)?;
    Ok((s, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub eta0: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: DEFAULT_EPOCHS,
            eta0: BASE_LR,
            batch_size: DEFAULT_BATCH,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.batch_size.max(1)) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// One-based epoch index.
    pub epoch: usize,
    pub adapter: LoraAdapter,
    pub adam: AdamState,
    /// Mean scheduled learning rate over the epoch's steps.
    pub eta_mean: f64,
    /// Rate of the epoch's final step.
    pub eta_final: f64,
    pub batch_losses: Vec<f64>,
    pub batch_lrs: Vec<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn mean_loss(&self) -> f64 {
        self.batch_losses.iter().sum::<f64>() / self.batch_losses.len().max(1) as f64
    }

    /// Writes `adapter.ckpt`, `adam.ckpt`, `meta` and `loss.csv` into `dir`.
    /// Wall time is kept out of these files so reruns are byte-identical.
    pub fn save(&self, dir: &Path, seed: u64) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.adapter.save(&dir.join("adapter.ckpt"))?;
        self.adam.save(&dir.join("adam.ckpt"))?;
        let meta = json!({
            "epoch": self.epoch,
            "seed": seed,
            "eta_mean": self.eta_mean,
            "eta_final": self.eta_final,
            "steps": self.batch_losses.len(),
            "mean_loss": self.mean_loss(),
        });
        let p = dir.join("meta");
        fs::write(&p, serde_json::to_string_pretty(&meta).unwrap() + "\n")
            .map_err(|e| Error::io(&p, e))?;
        let mut csv = String::from("step,lr,loss\n");
        for (i, (lr, loss)) in self.batch_lrs.iter().zip(&self.batch_losses).enumerate() {
            csv.push_str(&format!("{i},{lr:e},{loss:.17e}\n"));
        }
        let p = dir.join("loss.csv");
        fs::write(&p, csv).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<EpochRecord> {
        let adapter = LoraAdapter::load(&dir.join("adapter.ckpt"))?;
        let adam = AdamState::load(&dir.join("adam.ckpt"))?;
        let p = dir.join("meta");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let meta: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let p = dir.join("loss.csv");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut batch_lrs = Vec::new();
        let mut batch_losses = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|e| Error::Parse {
                    line: n + 1,
                    message: e.to_string(),
                })
            };
            if f.len() != 3 {
                return Err(Error::Parse {
                    line: n + 1,
                    message: "expected step,lr,loss".into(),
                });
            }
            batch_lrs.push(parse(f[1])?);
            batch_losses.push(parse(f[2])?);
        }
        Ok(EpochRecord {
            epoch: checkpoint::get_u64(&meta, "epoch")? as usize,
            adapter,
            adam,
            eta_mean: checkpoint::get_f64(&meta, "eta_mean")?,
            eta_final: checkpoint::get_f64(&meta, "eta_final")?,
            batch_losses,
            batch_lrs,
            seconds: 0.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
}

impl TrainRun {
    pub fn final_adapter(&self) -> &LoraAdapter {
        &self.epochs.last().expect("train run has epochs").adapter
    }

    pub fn seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum()
    }
}

pub(crate) struct EpochStats {
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
}

/// One pass over a seeded permutation of `0..n`. `prepare` turns the flat
/// parameters into whatever `grad` needs once per batch; `grad` returns the
/// loss and flat gradient for one item. The batch gradient is the mean of
/// per-item gradients, reduced in batch order.
pub(crate) fn run_epoch<M, P, G>(
    n: usize,
    cfg: &TrainConfig,
    epoch: usize,
    state: &mut AdamState,
    params: &mut [f64],
    prepare: P,
    grad: G,
) -> Result<EpochStats>
where
    M: Sync,
    P: Fn(&[f64]) -> Result<M>,
    G: Fn(&M, usize, &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)> + Sync,
{
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(cfg.seed, &[TAG_PERMUTE, epoch as u64]));
    let mut stats = EpochStats {
        losses: Vec::new(),
        lrs: Vec::new(),
    };
    for batch in order.chunks(cfg.batch_size.max(1)) {
        let model = prepare(params)?;
        let parts: Vec<(f64, Vec<f64>)> = batch
            .par_iter()
            .map(|&i| {
                let mut rng = rng_for(cfg.seed, &[TAG_DROPOUT, epoch as u64, i as u64]);
                grad(&model, i, &mut rng)
            })
            .collect::<Result<_>>()?;
        let inv = 1.0 / batch.len() as f64;
        let mut g = vec![0.0; params.len()];
        let mut loss = 0.0;
        for (l, gi) in &parts {
            loss += l;
            for (a, b) in g.iter_mut().zip(gi) {
                *a += b;
            }
        }
        g.iter_mut().for_each(|x| *x *= inv);
        stats.lrs.push(state.next_lr());
        stats.losses.push(loss * inv);
        state.step_in_place(&g, params)?;
    }
    Ok(stats)
}

/// Where to pick up a run: the record of the last completed epoch.
pub type Resume<'a> = Option<&'a EpochRecord>;

/// Tunes `init` on `data` with the backbone frozen. `on_epoch` sees every
/// finished epoch (used to persist checkpoints as they land).
pub fn train(
    backbone: &ParameterStore,
    init: &LoraAdapter,
    data: &[TokenSequence],
    cfg: &TrainConfig,
    resume: Resume<'_>,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainRun> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let masks: Vec<LossMask> = data.iter().map(LossMask::response).collect();
    for (i, m) in masks.iter().enumerate() {
        if m.count() == 0 {
            return Err(Error::Mask(format!(
                "training sequence {i} has no response token"
            )));
        }
    }
    let total = cfg.steps_per_epoch(data.len()) * cfg.epochs as u64;
    let schedule = LinearDecay {
        eta0: cfg.eta0,
        total_steps: total,
    };
    let (mut adapter, mut state, start) = match resume {
        Some(r) => (r.adapter.clone(), r.adam.clone(), r.epoch),
        None => (
            init.clone(),
            AdamState::new(init.param_count(), schedule),
            0,
        ),
    };
    if state.schedule != schedule {
        return Err(Error::Config(
            "resume snapshot was trained with a different schedule".into(),
        ));
    }
    let mut params = adapter.flatten();
    let mut epochs = Vec::new();
    for epoch in start + 1..=cfg.epochs {
        let clock = Instant::now();
        let template = adapter.clone();
        let stats = run_epoch(
            data.len(),
            cfg,
            epoch,
            &mut state,
            &mut params,
            |flat| LoraAdapter::unflatten(flat, &template),
            |a, i, rng| {
                let g = loss_and_grad(
                    backbone,
                    &AdapterMix::Single(a),
                    &data[i],
                    &masks[i],
                    GradSelector::AdapterOnly.into(),
                    Some(Dropout { p: a.dropout, rng }),
                )?;
                Ok((
                    g.loss,
                    g.adapter.expect("adapter gradient requested").flatten(),
                ))
            },
        )?;
        adapter.assign_flat(&params)?;
        let record = EpochRecord {
            epoch,
            adapter: adapter.clone(),
            adam: state.clone(),
            eta_mean: stats.lrs.iter().sum::<f64>() / stats.lrs.len() as f64,
            eta_final: *stats.lrs.last().unwrap(),
            batch_losses: stats.losses,
            batch_lrs: stats.lrs,
            seconds: clock.elapsed().as_secs_f64(),
        };
        on_epoch(&record)?;
        epochs.push(record);
    }
    Ok(TrainRun {
        config: *cfg,
        epochs,
    })
}

/// Which tokens the backbone is pretrained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainLoss {
    /// Every token after BOS.
    All,
    /// Response tokens only, as for an instruction-tuned model.
    Response,
}

/// Full-parameter training of the backbone; returns the trained store and
/// per-epoch mean losses.
pub fn pretrain_backbone(
    init: &ParameterStore,
    data: &[TokenSequence],
    cfg: &TrainConfig,
    loss: PretrainLoss,
) -> Result<(ParameterStore, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let total = cfg.steps_per_epoch(data.len()) * cfg.epochs as u64;
    let mut state = AdamState::new(
        init.param_count(),
        LinearDecay {
            eta0: cfg.eta0,
            total_steps: total,
        },
    );
    let masks: Vec<LossMask> = data
        .iter()
        .map(|s| match loss {
            PretrainLoss::All => LossMask::all(s.len()),
            PretrainLoss::Response => LossMask::response(s),
        })
        .collect();
    let mut params = init.flatten();
    let mut curve = Vec::new();
    for epoch in 1..=cfg.epochs {
        let stats = run_epoch(
            data.len(),
            cfg,
            epoch,
            &mut state,
            &mut params,
            |flat| {
                let mut p = init.clone();
                p.assign_flat(flat)?;
                Ok(p)
            },
            |p, i, _| {
                let g = loss_and_grad(
                    p,
                    &AdapterMix::None,
                    &data[i],
                    &masks[i],
                    GradSelector::BackboneOnly.into(),
                    None,
                )?;
                Ok((g.loss, g.flatten()))
            },
        )?;
        curve.push(stats.losses.iter().sum::<f64>() / stats.losses.len() as f64);
    }
    let mut out = init.clone();
    out.assign_flat(&params)?;
    Ok((out, curve))
}

/// `Σ_e η_e ⟨g_train_e, g_valid_e⟩`.
pub fn trajectory_influence(
    g_train: &[Vec<f64>],
    g_valid: &[Vec<f64>],
    etas: &[f64],
) -> Result<f64> {
    if g_train.len() != g_valid.len() || g_train.len() != etas.len() {
        return Err(Error::Dimension {
            expected: etas.len(),
            actual: g_train.len().max(g_valid.len()),
        });
    }
    let mut s = 0.0;
    for ((a, b), eta) in g_train.iter().zip(g_valid).zip(etas) {
        if a.len() != b.len() {
            return Err(Error::Dimension {
                expected: a.len(),
                actual: b.len(),
            });
        }
        s += eta * crate::model::linalg::dot(a, b);
    }
    Ok(s)
}
