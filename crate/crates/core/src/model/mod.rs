//! Small decoder-only transformer with exact reverse-mode gradients.

pub mod linalg;
mod transformer;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Role, TokenSequence};
use crate::error::{Error, Result};

pub use transformer::{
    forward, forward_with, gate_trace, loss_and_grad, AdapterMix, Dropout, GateSet, GradSelector,
    Grads, Wants,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub l_max: usize,
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.l_max,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("all model dimensions must be >= 1".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `(name, d_out, d_in)` for every adaptable linear layer, in name order.
    pub fn linear_layers(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for layer in 0..self.n_layers {
            for kind in LinearKind::ALL {
                let (d_out, d_in) = kind.shape(self);
                out.push((kind.param_name(layer), d_out, d_in));
            }
        }
        out.sort();
        out
    }
}

/// The seven adaptable projection families of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinearKind {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl LinearKind {
    pub const ALL: [LinearKind; 7] = [
        LinearKind::Q,
        LinearKind::K,
        LinearKind::V,
        LinearKind::O,
        LinearKind::Gate,
        LinearKind::Up,
        LinearKind::Down,
    ];

    pub fn suffix(self) -> &'static str {
        match self {
            LinearKind::Q => "attn.q_proj",
            LinearKind::K => "attn.k_proj",
            LinearKind::V => "attn.v_proj",
            LinearKind::O => "attn.o_proj",
            LinearKind::Gate => "mlp.gate_proj",
            LinearKind::Up => "mlp.up_proj",
            LinearKind::Down => "mlp.down_proj",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            LinearKind::Q => "q",
            LinearKind::K => "k",
            LinearKind::V => "v",
            LinearKind::O => "o",
            LinearKind::Gate => "gate",
            LinearKind::Up => "up",
            LinearKind::Down => "down",
        }
    }

    pub fn from_short(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.short() == name)
    }

    pub fn param_name(self, layer: usize) -> String {
        format!("blocks.{layer:02}.{}", self.suffix())
    }

    /// `(d_out, d_in)`
    pub fn shape(self, c: &LmConfig) -> (usize, usize) {
        match self {
            LinearKind::Q | LinearKind::K | LinearKind::V | LinearKind::O => (c.d_model, c.d_model),
            LinearKind::Gate | LinearKind::Up => (c.d_ff, c.d_model),
            LinearKind::Down => (c.d_model, c.d_ff),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Backbone parameters keyed by name; iteration order is sorted name order,
/// which is also the flatten order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    pub config: LmConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("backbone has no parameter `{name}`"))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.tensors.values() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension {
                expected: self.param_count(),
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        for t in self.tensors.values_mut() {
            let n = t.len();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Deterministic initialization: scaled normals for matrices, unit gains
/// and zero offsets for layer norms.
pub fn init_backbone(config: &LmConfig, seed: u64) -> Result<ParameterStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let mut tensors = BTreeMap::new();

    // Fixed creation order so the stream is independent of map internals.
    let normal = |shape: &[usize], std: f64, rng: &mut ChaCha8Rng| {
        let dist = Normal::new(0.0, std).expect("valid std");
        Tensor {
            shape: shape.to_vec(),
            data: (0..shape.iter().product::<usize>())
                .map(|_| dist.sample(rng))
                .collect(),
        }
    };

    tensors.insert(
        "embed.tok".to_string(),
        normal(&[config.vocab_size, d], 0.5, &mut rng),
    );
    tensors.insert(
        "embed.pos".to_string(),
        normal(&[config.l_max, d], 0.1, &mut rng),
    );
    let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
    for layer in 0..config.n_layers {
        for norm in ["ln1", "ln2"] {
            tensors.insert(
                format!("blocks.{layer:02}.{norm}.gain"),
                Tensor::filled(&[d], 1.0),
            );
            tensors.insert(
                format!("blocks.{layer:02}.{norm}.bias"),
                Tensor::zeros(&[d]),
            );
        }
        for kind in LinearKind::ALL {
            let (d_out, d_in) = kind.shape(config);
            let mut std = 1.0 / (d_in as f64).sqrt();
            if matches!(kind, LinearKind::O | LinearKind::Down) {
                std *= residual_scale;
            }
            tensors.insert(
                kind.param_name(layer),
                normal(&[d_out, d_in], std, &mut rng),
            );
        }
    }
    tensors.insert("final_ln.gain".to_string(), Tensor::filled(&[d], 1.0));
    tensors.insert("final_ln.bias".to_string(), Tensor::zeros(&[d]));
    tensors.insert(
        "head".to_string(),
        normal(&[config.vocab_size, d], 1.0 / (d as f64).sqrt(), &mut rng),
    );

    Ok(ParameterStore {
        config: *config,
        tensors,
    })
}

/// Positions contributing to the NLL sum. Position 0 has no left context
/// and may never be selected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossMask(pub Vec<bool>);

impl LossMask {
    /// Response tokens only (the supervised fine-tuning mask).
    pub fn response(seq: &TokenSequence) -> Self {
        LossMask(
            seq.roles
                .iter()
                .enumerate()
                .map(|(t, r)| t > 0 && *r == Role::Resp)
                .collect(),
        )
    }

    /// Instruction tokens after BOS, predicted from their left context.
    pub fn instruction(seq: &TokenSequence) -> Self {
        LossMask(
            seq.roles
                .iter()
                .enumerate()
                .map(|(t, r)| t > 0 && *r == Role::Instr)
                .collect(),
        )
    }

    pub fn all(len: usize) -> Self {
        LossMask((0..len).map(|t| t > 0).collect())
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|m| **m).count()
    }

    pub(crate) fn check(&self, len: usize) -> Result<()> {
        if self.0.len() != len {
            return Err(Error::Mask(format!(
                "mask length {} != sequence length {len}",
                self.0.len()
            )));
        }
        if self.0.first() == Some(&true) {
            return Err(Error::Mask("position 0 has no left context".into()));
        }
        if self.count() == 0 {
            return Err(Error::Mask("no position selected".into()));
        }
        Ok(())
    }
}

/// Summed next-token NLL: `-Σ_{t ∈ mask} log softmax(logits[t-1])[tokens[t]]`.
/// `logits` is row-major `len × vocab`.
pub fn ntp_loss(logits: &[f64], vocab: usize, seq: &TokenSequence, mask: &LossMask) -> Result<f64> {
    mask.check(seq.len())?;
    if logits.len() != seq.len() * vocab {
        return Err(Error::Dimension {
            expected: seq.len() * vocab,
            actual: logits.len(),
        });
    }
    let mut loss = 0.0;
    for t in 1..seq.len() {
        if !mask.0[t] {
            continue;
        }
        let row = &logits[(t - 1) * vocab..t * vocab];
        loss += linalg::log_sum_exp(row) - row[seq.tokens[t] as usize];
    }
    Ok(loss)
}

/// Fraction of backbone parameters that a rank-`r` adapter over the given
/// `(d_out, d_in)` linear shapes adds.
pub fn lora_trainable_fraction(
    linear_shapes: &[(usize, usize)],
    total_params: usize,
    r: usize,
) -> f64 {
    let lora: usize = linear_shapes.iter().map(|(o, i)| (o + i) * r).sum();
    lora as f64 / total_params as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> LmConfig {
        LmConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            l_max: 10,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_backbone(&tiny(), 5).unwrap();
        let b = init_backbone(&tiny(), 5).unwrap();
        assert_eq!(a, b);
        let c = init_backbone(&tiny(), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn head_dim_and_divisibility() {
        let mut c = LmConfig {
            vocab_size: 99,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            l_max: 256,
        };
        assert_eq!(c.head_dim(), 16);
        c.d_model = 63;
        assert!(init_backbone(&c, 0).is_err());
    }

    #[test]
    fn flatten_order_is_sorted_names() {
        let store = init_backbone(&tiny(), 1).unwrap();
        let names: Vec<_> = store.names().collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        let flat = store.flatten();
        let mut copy = store.clone();
        copy.assign_flat(&flat).unwrap();
        assert_eq!(copy, store);
    }

    fn seq(tokens: Vec<u32>) -> TokenSequence {
        let roles = vec![Role::Instr; tokens.len()];
        TokenSequence { tokens, roles }
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let s = seq(vec![0, 1, 2]);
        let logits = vec![0.0; 3 * 4];
        let one = LossMask(vec![false, true, false]);
        let two = LossMask(vec![false, true, true]);
        assert!((ntp_loss(&logits, 4, &s, &one).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((ntp_loss(&logits, 4, &s, &two).unwrap() - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!((4f64.ln() - 1.3862944).abs() < 1e-7);
    }

    #[test]
    fn confident_correct_logits_give_zero_loss() {
        let s = seq(vec![0, 3]);
        let mut logits = vec![0.0; 2 * 4];
        logits[3] = 1e9;
        let loss = ntp_loss(&logits, 4, &s, &LossMask(vec![false, true])).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn mask_errors() {
        let s = seq(vec![0, 1]);
        let logits = vec![0.0; 8];
        assert!(ntp_loss(&logits, 4, &s, &LossMask(vec![false, false])).is_err());
        assert!(ntp_loss(&logits, 4, &s, &LossMask(vec![true, true])).is_err());
        assert!(ntp_loss(&logits, 4, &s, &LossMask(vec![false])).is_err());
    }

    #[test]
    fn gemma_2b_shaped_lora_fraction() {
        // 18 blocks, d_model 2048, multi-query attention (k/v out 256),
        // d_ff 16384, tied 256000-token embedding.
        let (d, kv, ff, layers, vocab) = (2048usize, 256usize, 16384usize, 18usize, 256_000usize);
        let per_block = [(d, d), (kv, d), (kv, d), (d, d), (ff, d), (ff, d), (d, ff)];
        let shapes: Vec<_> = (0..layers).flat_map(|_| per_block).collect();
        let block_params: usize = per_block.iter().map(|(o, i)| o * i).sum::<usize>() + 2 * d;
        let total = vocab * d + layers * block_params + d;
        assert_eq!(total, 2_506_172_416);
        let frac = lora_trainable_fraction(&shapes, total, 8);
        assert!((frac * 100.0 - 0.39).abs() < 0.005, "{}", frac * 100.0);
    }
}
