//! Weighted-logit ensemble decoding and the comparison strategies.
//!
//! Adapter lists are always ordered `[base, expert 1, …, expert C]`, the same
//! order as [`RoutingWeights::as_vec`].

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{merge_weighted, LoraAdapter};
use crate::corpus::{extract_answer, TokenSequence, Vocab, EOS};
use crate::error::{Error, Result};
use crate::model::linalg::softmax_in_place;
use crate::model::{
    forward, gate_trace, loss_and_grad, AdapterMix, GateSet, LossMask, ParameterStore, Wants,
};
use crate::router::RoutingWeights;
use crate::seeding::{derive_seed, rng_for, TAG_DECODE};
use crate::trainer::{run_epoch, train, AdamState, LinearDecay, TrainConfig, TrainRun, EXPERT_LR};

pub const DEFAULT_MAX_NEW_TOKENS: usize = 32;
pub const SC_SAMPLES: usize = 5;
pub const SC_TEMPERATURE: f64 = 1.0;
pub const ENSEMBLE_EXTRA: usize = 3;

/// Argmax of `Σ_k w_k · logits_k`, ties to the lowest token id.
pub fn ensemble_next_token(logit_rows: &[&[f64]], weights: &[f64]) -> Result<u32> {
    let first = logit_rows
        .first()
        .ok_or_else(|| Error::Weights("no logit rows".into()))?;
    if logit_rows.len() != weights.len() {
        return Err(Error::Dimension {
            expected: logit_rows.len(),
            actual: weights.len(),
        });
    }
    if !(weights.iter().sum::<f64>() > 0.0) {
        return Err(Error::Weights("total weight must be positive".into()));
    }
    let v = first.len();
    let mut acc = vec![0.0; v];
    for (row, &w) in logit_rows.iter().zip(weights) {
        if row.len() != v {
            return Err(Error::Dimension {
                expected: v,
                actual: row.len(),
            });
        }
        if w != 0.0 {
            acc.iter_mut().zip(*row).for_each(|(a, l)| *a += w * l);
        }
    }
    Ok(argmax(&acc))
}

fn argmax(v: &[f64]) -> u32 {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub route_calls: usize,
    pub steps: usize,
    pub forward_passes: usize,
    /// Most adapters evaluated in one step.
    pub peak_adapters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    /// Generated ids, EOS excluded.
    pub tokens: Vec<u32>,
    pub hit_eos: bool,
    /// The context reached `l_max` before EOS.
    pub truncated: bool,
    /// Weight snapshot used for every step.
    pub weights: Vec<f64>,
    pub counters: Counters,
    pub seconds: f64,
}

impl GenerationResult {
    pub fn text(&self, vocab: &Vocab) -> String {
        vocab.decode(&self.tokens)
    }
}

/// Shared loop: `next` sees the full context and returns the next id.
fn decode_loop(
    prompt: &[u32],
    l_max: usize,
    max_new: usize,
    mut next: impl FnMut(&[u32]) -> Result<u32>,
) -> Result<(Vec<u32>, bool, bool)> {
    let mut ctx = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        if ctx.len() >= l_max {
            return Ok((out, false, true));
        }
        let t = next(&ctx)?;
        if t == EOS {
            return Ok((out, true, false));
        }
        out.push(t);
        ctx.push(t);
    }
    Ok((out, false, false))
}

fn last_row(logits: Vec<f64>, vocab: usize) -> Vec<f64> {
    logits[logits.len() - vocab..].to_vec()
}

/// Backbone plus the `[base, experts…]` adapter list.
pub struct Ensemble<'a> {
    pub backbone: &'a ParameterStore,
    pub adapters: Vec<&'a LoraAdapter>,
}

impl<'a> Ensemble<'a> {
    pub fn new(backbone: &'a ParameterStore, adapters: Vec<&'a LoraAdapter>) -> Result<Self> {
        if adapters.is_empty() {
            return Err(Error::Weights("ensemble needs at least one adapter".into()));
        }
        Ok(Ensemble { backbone, adapters })
    }

    /// Greedy decoding over `Σ_k w_k · logits_k`. `route` is called exactly
    /// once, before the first step; adapters with zero weight are skipped.
    pub fn generate(
        &self,
        prompt: &[u32],
        route: impl FnOnce() -> Result<Vec<f64>>,
        max_new: usize,
    ) -> Result<GenerationResult> {
        let clock = Instant::now();
        let mut counters = Counters::default();
        let weights = route()?;
        counters.route_calls += 1;
        if weights.len() != self.adapters.len() {
            return Err(Error::Dimension {
                expected: self.adapters.len(),
                actual: weights.len(),
            });
        }
        if !(weights.iter().sum::<f64>() > 0.0) {
            return Err(Error::Weights("total weight must be positive".into()));
        }
        let active: Vec<usize> = (0..weights.len()).filter(|&k| weights[k] != 0.0).collect();
        let vocab = self.backbone.config.vocab_size;
        let (tokens, hit_eos, truncated) =
            decode_loop(prompt, self.backbone.config.l_max, max_new, |ctx| {
                let rows: Vec<Vec<f64>> = active
                    .par_iter()
                    .map(|&k| {
                        Ok(last_row(
                            forward(self.backbone, &AdapterMix::Single(self.adapters[k]), ctx)?,
                            vocab,
                        ))
                    })
                    .collect::<Result<_>>()?;
                counters.steps += 1;
                counters.forward_passes += rows.len();
                counters.peak_adapters = counters.peak_adapters.max(rows.len());
                let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
                let w: Vec<f64> = active.iter().map(|&k| weights[k]).collect();
                ensemble_next_token(&refs, &w)
            })?;
        Ok(GenerationResult {
            tokens,
            hit_eos,
            truncated,
            weights,
            counters,
            seconds: clock.elapsed().as_secs_f64(),
        })
    }
}

/// Greedy decoding with one forward pass per step under `mix`.
pub fn generate_mix(
    backbone: &ParameterStore,
    mix: &AdapterMix<'_>,
    prompt: &[u32],
    max_new: usize,
) -> Result<GenerationResult> {
    let clock = Instant::now();
    let mut counters = Counters::default();
    let vocab = backbone.config.vocab_size;
    let (tokens, hit_eos, truncated) =
        decode_loop(prompt, backbone.config.l_max, max_new, |ctx| {
            counters.steps += 1;
            counters.forward_passes += 1;
            counters.peak_adapters = 1;
            Ok(argmax(&last_row(forward(backbone, mix, ctx)?, vocab)))
        })?;
    Ok(GenerationResult {
        tokens,
        hit_eos,
        truncated,
        weights: Vec::new(),
        counters,
        seconds: clock.elapsed().as_secs_f64(),
    })
}

/// Ancestral sampling from `softmax(logits / temperature)`.
pub fn sample_generate(
    backbone: &ParameterStore,
    mix: &AdapterMix<'_>,
    prompt: &[u32],
    max_new: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GenerationResult> {
    if !(temperature > 0.0) {
        return Err(Error::Config(
            "sampling temperature must be positive".into(),
        ));
    }
    let clock = Instant::now();
    let mut counters = Counters::default();
    let vocab = backbone.config.vocab_size;
    let (tokens, hit_eos, truncated) =
        decode_loop(prompt, backbone.config.l_max, max_new, |ctx| {
            counters.steps += 1;
            counters.forward_passes += 1;
            let mut p: Vec<f64> = last_row(forward(backbone, mix, ctx)?, vocab)
                .iter()
                .map(|l| l / temperature)
                .collect();
            softmax_in_place(&mut p);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    return Ok(i as u32);
                }
            }
            Ok((vocab - 1) as u32)
        })?;
    Ok(GenerationResult {
        tokens,
        hit_eos,
        truncated,
        weights: Vec::new(),
        counters,
        seconds: clock.elapsed().as_secs_f64(),
    })
}

/// `λ_c = w_c / Σ w`, base included.
pub fn moe_lambdas(weights: &[f64]) -> Result<Vec<f64>> {
    let s: f64 = weights.iter().sum();
    if !(s > 0.0) {
        return Err(Error::Weights("total weight must be positive".into()));
    }
    Ok(weights.iter().map(|w| w / s).collect())
}

/// Layer-level routing: every adapted layer adds `Σ λ_c s A_c (B_cᵀ x)`.
pub fn moe_routing_forward(
    backbone: &ParameterStore,
    adapters: &[&LoraAdapter],
    weights: &[f64],
    tokens: &[u32],
) -> Result<Vec<f64>> {
    let lambdas = moe_lambdas(weights)?;
    forward(
        backbone,
        &AdapterMix::Routed {
            experts: adapters.to_vec(),
            lambdas,
        },
        tokens,
    )
}

/// Factor-wise merge with the normalized weights.
pub fn moe_merge(adapters: &[&LoraAdapter], weights: &[f64]) -> Result<LoraAdapter> {
    merge_weighted(adapters, &moe_lambdas(weights)?)
}

pub fn moe_merging_forward(
    backbone: &ParameterStore,
    adapters: &[&LoraAdapter],
    weights: &[f64],
    tokens: &[u32],
) -> Result<Vec<f64>> {
    let merged = moe_merge(adapters, weights)?;
    forward(backbone, &AdapterMix::Single(&merged), tokens)
}

/// Zero gates (uniform mixture) for every adapted layer.
pub fn mole_init(adapters: &[&LoraAdapter]) -> Result<GateSet> {
    let first = adapters
        .first()
        .ok_or_else(|| Error::Weights("MoLE needs adapters".into()))?;
    Ok(first
        .layers
        .iter()
        .map(|(name, p)| (name.clone(), vec![0.0; adapters.len() * p.d_in]))
        .collect())
}

fn flatten_gates(g: &GateSet) -> Vec<f64> {
    g.values().flatten().copied().collect()
}

fn unflatten_gates(flat: &[f64], template: &GateSet) -> GateSet {
    let mut off = 0;
    template
        .iter()
        .map(|(k, v)| {
            let out = flat[off..off + v.len()].to_vec();
            off += v.len();
            (k.clone(), out)
        })
        .collect()
}

/// Trains only the gates on the response-token NTP loss; adapters and the
/// backbone stay frozen. Returns the gates and per-step losses.
pub fn mole_train(
    backbone: &ParameterStore,
    adapters: &[&LoraAdapter],
    data: &[TokenSequence],
    cfg: &TrainConfig,
) -> Result<(GateSet, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let template = mole_init(adapters)?;
    let mut params = flatten_gates(&template);
    let total = cfg.steps_per_epoch(data.len()) * cfg.epochs as u64;
    let mut state = AdamState::new(
        params.len(),
        LinearDecay {
            eta0: cfg.eta0,
            total_steps: total,
        },
    );
    let masks: Vec<LossMask> = data.iter().map(LossMask::response).collect();
    let mut losses = Vec::new();
    for epoch in 1..=cfg.epochs {
        let stats = run_epoch(
            data.len(),
            cfg,
            epoch,
            &mut state,
            &mut params,
            |flat| Ok(unflatten_gates(flat, &template)),
            |gates, i, _| {
                let mix = AdapterMix::Gated {
                    experts: adapters.to_vec(),
                    gates,
                };
                let wants = Wants {
                    gates: true,
                    ..Default::default()
                };
                let g = loss_and_grad(backbone, &mix, &data[i], &masks[i], wants, None)?;
                Ok((
                    g.loss,
                    flatten_gates(&g.gates.expect("gate gradient requested")),
                ))
            },
        )?;
        losses.extend(stats.losses);
    }
    Ok((unflatten_gates(&params, &template), losses))
}

/// Default MoLE schedule: one epoch at the reduced expert rate.
pub fn mole_config(seed: u64, batch_size: usize) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        eta0: EXPERT_LR,
        batch_size,
        seed,
    }
}

pub fn mole_forward(
    backbone: &ParameterStore,
    adapters: &[&LoraAdapter],
    gates: &GateSet,
    tokens: &[u32],
) -> Result<Vec<f64>> {
    forward(
        backbone,
        &AdapterMix::Gated {
            experts: adapters.to_vec(),
            gates,
        },
        tokens,
    )
}

/// Mean gate probability per layer and adapter over all tokens of `seqs`:
/// `layer, adapter, mean_lambda` rows (adapter 0 is the base).
pub fn mole_gate_csv(
    backbone: &ParameterStore,
    adapters: &[&LoraAdapter],
    gates: &GateSet,
    seqs: &[TokenSequence],
) -> Result<String> {
    let n = adapters.len();
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    let mix = AdapterMix::Gated {
        experts: adapters.to_vec(),
        gates,
    };
    for s in seqs {
        for (layer, lam) in gate_trace(backbone, &mix, &s.tokens)? {
            let e = sums.entry(layer).or_insert_with(|| (vec![0.0; n], 0));
            for row in lam.chunks(n) {
                e.0.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                e.1 += 1;
            }
        }
    }
    let mut out = String::from("layer,adapter,mean_lambda\n");
    for (layer, (s, count)) in sums {
        for (c, v) in s.iter().enumerate() {
            out.push_str(&format!("{layer},{c},{:.12}\n", v / count.max(1) as f64));
        }
    }
    Ok(out)
}

/// Trains `n_extra` adapters from fresh initializations on the full data,
/// each with its own seed.
pub fn lora_ensembles(
    backbone: &ParameterStore,
    template: &LoraAdapter,
    data: &[TokenSequence],
    cfg: &TrainConfig,
    n_extra: usize,
) -> Result<Vec<TrainRun>> {
    (0..n_extra)
        .map(|i| {
            let seed = derive_seed(cfg.seed, &[0x1e5, i as u64]);
            let init = template.fresh_like(&backbone.config, seed)?;
            let c = TrainConfig { seed, ..*cfg };
            train(backbone, &init, data, &c, None, |_| Ok(()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vote {
    /// `None` when no sample produced a parsable answer.
    pub answer: Option<String>,
    pub answers: Vec<Option<String>>,
    pub generations: Vec<String>,
}

/// Most frequent parsable answer; ties are broken by a seeded pick among
/// the tied answers (sorted, so the pick does not depend on vote order).
pub fn majority_vote(answers: &[Option<String>], seed: u64) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in answers.iter().flatten() {
        *counts.entry(a.as_str()).or_default() += 1;
    }
    let top = *counts.values().max()?;
    let tied: Vec<&str> = counts
        .iter()
        .filter(|(_, c)| **c == top)
        .map(|(a, _)| *a)
        .collect();
    let pick = tied.choose(&mut rng_for(seed, &[TAG_DECODE, u64::MAX]))?;
    Some(pick.to_string())
}

/// `n` temperature samples from one adapter, answers extracted and voted.
/// Sampling draws from `sample_seed`, the tie-break from `tie_seed`.
#[allow(clippy::too_many_arguments)]
pub fn self_consistency(
    backbone: &ParameterStore,
    adapter: &LoraAdapter,
    prompt: &[u32],
    vocab: &Vocab,
    n: usize,
    temperature: f64,
    max_new: usize,
    (sample_seed, tie_seed): (u64, u64),
) -> Result<Vote> {
    if n == 0 {
        return Err(Error::Config(
            "self-consistency needs at least one sample".into(),
        ));
    }
    let mut answers = Vec::with_capacity(n);
    let mut generations = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = rng_for(sample_seed, &[TAG_DECODE, i as u64]);
        let g = sample_generate(
            backbone,
            &AdapterMix::Single(adapter),
            prompt,
            max_new,
            temperature,
            &mut rng,
        )?;
        let text = g.text(vocab);
        answers.push(extract_answer(&text).map(str::to_string));
        generations.push(text);
    }
    Ok(Vote {
        answer: majority_vote(&answers, tie_seed),
        answers,
        generations,
    })
}

/// Seeded permutation of `0..n` cut into consecutive blocks of `sizes`;
/// returns the block index per item.
pub fn random_cluster_partition(n: usize, sizes: &[usize], seed: u64) -> Result<Vec<usize>> {
    if sizes.iter().sum::<usize>() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: sizes.iter().sum(),
        });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_for(seed, &[crate::seeding::TAG_PERMUTE, u64::MAX]));
    let mut labels = vec![0; n];
    let mut off = 0;
    for (c, &s) in sizes.iter().enumerate() {
        for &i in &perm[off..off + s] {
            labels[i] = c;
        }
        off += s;
    }
    Ok(labels)
}

/// Every adapter, base included, weighted exactly 1.
pub fn uniform_weights(c: usize) -> RoutingWeights {
    RoutingWeights {
        cluster: vec![1.0; c],
        base: 1.0,
        cosines: Vec::new(),
        standardized: Vec::new(),
    }
}

/// Rough bytes held during decoding: weights of the backbone and every
/// active adapter plus per-adapter activations over `context` tokens.
pub fn memory_estimate(
    backbone: &ParameterStore,
    adapters: &[&LoraAdapter],
    active: usize,
    context: usize,
) -> usize {
    let c = &backbone.config;
    let weights = backbone.param_count() + adapters.iter().map(|a| a.param_count()).sum::<usize>();
    let per_token = c.n_layers * (8 * c.d_model + 3 * c.d_ff + c.n_heads * context) + c.vocab_size;
    8 * (weights + active.max(1) * context * per_token)
}
