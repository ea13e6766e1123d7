//! Low-rank adapters: creation, flattening and weighted factor merging.
//!
//! Each adapted linear layer `W (d_out × d_in)` gets a pair `A (d_out × r)`,
//! `B (d_in × r)` so that `ΔW = A Bᵀ` and the layer computes
//! `W x + (α / r) · A (Bᵀ x)`. `B` starts at zero, which makes a fresh
//! adapter an exact no-op.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::model::{LinearKind, LmConfig};

pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub d_out: usize,
    pub d_in: usize,
    /// `d_out × r`, row-major.
    pub a: Vec<f64>,
    /// `d_in × r`, row-major.
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Keyed by backbone linear-layer name; iteration order is flatten order.
    pub layers: BTreeMap<String, LoraPair>,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn param_count(&self) -> usize {
        self.layers.values().map(|p| p.a.len() + p.b.len()).sum()
    }

    pub fn zeros_like(&self) -> LoraAdapter {
        LoraAdapter {
            layers: self
                .layers
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        LoraPair {
                            d_out: p.d_out,
                            d_in: p.d_in,
                            a: vec![0.0; p.a.len()],
                            b: vec![0.0; p.b.len()],
                        },
                    )
                })
                .collect(),
            ..*self
        }
    }

    /// Layer order, then `A` before `B`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in self.layers.values() {
            out.extend_from_slice(&p.a);
            out.extend_from_slice(&p.b);
        }
        out
    }

    pub fn unflatten(flat: &[f64], template: &LoraAdapter) -> Result<LoraAdapter> {
        let mut out = template.clone();
        out.assign_flat(flat)?;
        Ok(out)
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension {
                expected: self.param_count(),
                actual: flat.len(),
            });
        }
        let mut off = 0;
        for p in self.layers.values_mut() {
            let (na, nb) = (p.a.len(), p.b.len());
            p.a.copy_from_slice(&flat[off..off + na]);
            off += na;
            p.b.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Materialized `ΔW = A Bᵀ` (without the α/r scale) for one layer.
    pub fn dense_delta(&self, name: &str) -> Option<Vec<f64>> {
        let p = self.layers.get(name)?;
        let r = self.rank;
        let mut w = vec![0.0; p.d_out * p.d_in];
        crate::model::linalg::mm_nt(p.d_out, r, p.d_in, &p.a, &p.b, &mut w, false);
        Some(w)
    }

    fn same_shape(&self, other: &LoraAdapter) -> bool {
        self.rank == other.rank
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|((ka, a), (kb, b))| ka == kb && a.d_out == b.d_out && a.d_in == b.d_in)
    }

    /// Projection families this adapter covers.
    pub fn target_kinds(&self) -> Vec<LinearKind> {
        LinearKind::ALL
            .into_iter()
            .filter(|k| self.layers.keys().any(|n| n.ends_with(k.suffix())))
            .collect()
    }

    /// A freshly initialized adapter with the same rank, scale, dropout and
    /// targets.
    pub fn fresh_like(&self, config: &LmConfig, seed: u64) -> Result<LoraAdapter> {
        init_lora_with(
            config,
            self.rank,
            self.alpha,
            self.dropout,
            &self.target_kinds(),
            seed,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let targets: Vec<&str> = self.layers.keys().map(String::as_str).collect();
        let mut ck = Checkpoint::new(json!({
            "kind": "lora-adapter",
            "rank": self.rank,
            "alpha": self.alpha,
            "dropout": self.dropout,
            "targets": targets,
        }));
        for (name, p) in &self.layers {
            ck.push(format!("{name}.A"), vec![p.d_out, self.rank], p.a.clone());
            ck.push(format!("{name}.B"), vec![p.d_in, self.rank], p.b.clone());
        }
        ck.write(path)
    }

    pub fn load(path: &Path) -> Result<LoraAdapter> {
        let ck = Checkpoint::read(path)?;
        checkpoint::expect_kind(&ck, "lora-adapter")?;
        let m = &ck.manifest;
        let rank = checkpoint::get_u64(m, "rank")? as usize;
        let alpha = checkpoint::get_f64(m, "alpha")?;
        let dropout = checkpoint::get_f64(m, "dropout")?;
        let mut layers = BTreeMap::new();
        let mut arrays = ck.arrays.into_iter();
        while let Some((a_name, a_shape, a)) = arrays.next() {
            let (b_name, b_shape, b) = arrays
                .next()
                .ok_or_else(|| Error::Checkpoint("unpaired adapter factor".into()))?;
            let layer = a_name
                .strip_suffix(".A")
                .filter(|l| b_name.strip_suffix(".B") == Some(l))
                .ok_or_else(|| Error::Checkpoint(format!("bad factor pair {a_name}/{b_name}")))?;
            layers.insert(
                layer.to_string(),
                LoraPair {
                    d_out: a_shape[0],
                    d_in: b_shape[0],
                    a,
                    b,
                },
            );
        }
        Ok(LoraAdapter {
            rank,
            alpha,
            dropout,
            layers,
        })
    }
}

/// Adapter over all seven projection families with `α = 4r`, `p = 0.1`.
pub fn init_lora(config: &LmConfig, r: usize, seed: u64) -> Result<LoraAdapter> {
    init_lora_with(
        config,
        r,
        4.0 * r as f64,
        DEFAULT_DROPOUT,
        &LinearKind::ALL,
        seed,
    )
}

pub fn init_lora_with(
    config: &LmConfig,
    r: usize,
    alpha: f64,
    dropout: f64,
    targets: &[LinearKind],
    seed: u64,
) -> Result<LoraAdapter> {
    config.validate()?;
    if r == 0 || r > config.d_model {
        return Err(Error::Config(format!(
            "rank {r} must be in 1..={}",
            config.d_model
        )));
    }
    if targets.is_empty() {
        return Err(Error::Config("adapter has no target layers".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = BTreeMap::new();
    for (name, d_out, d_in) in config.linear_layers() {
        if !targets.iter().any(|k| name.ends_with(k.suffix())) {
            continue;
        }
        let dist = Normal::new(0.0, 1.0 / (d_out as f64).sqrt()).expect("valid std");
        let a = (0..d_out * r).map(|_| dist.sample(&mut rng)).collect();
        layers.insert(
            name,
            LoraPair {
                d_out,
                d_in,
                a,
                b: vec![0.0; d_in * r],
            },
        );
    }
    Ok(LoraAdapter {
        rank: r,
        alpha,
        dropout,
        layers,
    })
}

/// Factor-wise convex combination: `A = Σ λ_c A_c`, `B = Σ λ_c B_c`.
/// Weights are used as given; callers normalize them.
pub fn merge_weighted(adapters: &[&LoraAdapter], weights: &[f64]) -> Result<LoraAdapter> {
    let first = adapters
        .first()
        .ok_or_else(|| Error::Weights("no adapters to merge".into()))?;
    if adapters.len() != weights.len() {
        return Err(Error::Dimension {
            expected: adapters.len(),
            actual: weights.len(),
        });
    }
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::Weights(
            "merge weights must be finite and >= 0".into(),
        ));
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Weights("merge weights sum to zero".into()));
    }
    if let Some(bad) = adapters.iter().position(|a| !first.same_shape(a)) {
        return Err(Error::Config(format!(
            "adapter {bad} has a different shape"
        )));
    }
    let mut out = first.zeros_like();
    for (adapter, &w) in adapters.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (dst, src) in out.layers.values_mut().zip(adapter.layers.values()) {
            dst.a.iter_mut().zip(&src.a).for_each(|(d, s)| *d += w * s);
            dst.b.iter_mut().zip(&src.b).for_each(|(d, s)| *d += w * s);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Role, TokenSequence};
    use crate::model::{forward, init_backbone, AdapterMix};

    fn cfg() -> LmConfig {
        LmConfig {
            vocab_size: 13,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            l_max: 12,
        }
    }

    fn randomized(seed: u64) -> LoraAdapter {
        let mut a = init_lora(&cfg(), 2, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let dist = Normal::new(0.0, 0.3).unwrap();
        for p in a.layers.values_mut() {
            p.b.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
        }
        a
    }

    #[test]
    fn fresh_adapter_is_a_no_op() {
        let params = init_backbone(&cfg(), 1).unwrap();
        let adapter = init_lora(&cfg(), 2, 9).unwrap();
        let tokens = [1, 5, 7, 3, 9];
        let base = forward(&params, &AdapterMix::None, &tokens).unwrap();
        let adapted = forward(&params, &AdapterMix::Single(&adapter), &tokens).unwrap();
        assert_eq!(base, adapted);
    }

    #[test]
    fn defaults_and_rank_bounds() {
        let big = LmConfig {
            d_model: 64,
            d_ff: 128,
            ..cfg()
        };
        let a = init_lora(&big, DEFAULT_RANK, 0).unwrap();
        assert_eq!(a.rank, 8);
        assert_eq!(a.alpha, 32.0);
        assert_eq!(a.dropout, 0.1);
        assert_eq!(a.layers.len(), 7 * 2);
        assert!(init_lora(&big, 64, 0).is_ok());
        assert!(init_lora(&big, 65, 0).is_err());
    }

    #[test]
    fn flatten_length_and_round_trip() {
        let a = randomized(3);
        let expected: usize = cfg()
            .linear_layers()
            .iter()
            .map(|(_, o, i)| o * 2 + i * 2)
            .sum();
        let flat = a.flatten();
        assert_eq!(flat.len(), expected);
        assert_eq!(LoraAdapter::unflatten(&flat, &a).unwrap(), a);
        assert!(LoraAdapter::unflatten(&flat[1..], &a).is_err());
        assert_ne!(randomized(4).flatten(), flat);
    }

    #[test]
    fn merge_identity_and_idempotence() {
        let a = randomized(1);
        let b = randomized(2);
        assert_eq!(merge_weighted(&[&a, &b], &[1.0, 0.0]).unwrap(), a);
        let m = merge_weighted(&[&a, &a], &[0.3, 0.7]).unwrap();
        for (x, y) in m.flatten().iter().zip(a.flatten()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(merge_weighted(&[&a, &b], &[0.0, 0.0]).is_err());
        let other = init_lora(&cfg(), 3, 0).unwrap();
        assert!(merge_weighted(&[&a, &other], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn merged_delta_differs_from_mixed_deltas() {
        // rank-1 on a 2x2 layer: A1 = B2 = e1, A2 = B1 = e2.
        let pair = |a: [f64; 2], b: [f64; 2]| LoraPair {
            d_out: 2,
            d_in: 2,
            a: a.to_vec(),
            b: b.to_vec(),
        };
        let mk = |p: LoraPair| LoraAdapter {
            rank: 1,
            alpha: 1.0,
            dropout: 0.0,
            layers: [("l".to_string(), p)].into_iter().collect(),
        };
        let q1 = mk(pair([1.0, 0.0], [0.0, 1.0]));
        let q2 = mk(pair([0.0, 1.0], [1.0, 0.0]));
        let merged = merge_weighted(&[&q1, &q2], &[0.5, 0.5]).unwrap();
        let dm = merged.dense_delta("l").unwrap();
        let d1 = q1.dense_delta("l").unwrap();
        let d2 = q2.dense_delta("l").unwrap();
        let mixed: Vec<f64> = d1.iter().zip(&d2).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
        // (½e1+½e2)(½e2+½e1)ᵀ = ¼·ones, while ½(e1e2ᵀ + e2e1ᵀ) has a zero diagonal.
        assert_eq!(dm, vec![0.25; 4]);
        assert_eq!(mixed, vec![0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn adapted_layer_matches_dense_delta() {
        // Fold ΔW into a copy of the backbone and compare full forwards.
        let params = init_backbone(&cfg(), 2).unwrap();
        let adapter = randomized(5);
        let mut folded = params.clone();
        for name in adapter.layers.keys() {
            let delta = adapter.dense_delta(name).unwrap();
            let w = folded.tensors.get_mut(name).unwrap();
            w.data
                .iter_mut()
                .zip(&delta)
                .for_each(|(w, d)| *w += adapter.scale() * d);
        }
        let tokens = [1, 4, 6, 2, 8, 3];
        let a = forward(&params, &AdapterMix::Single(&adapter), &tokens).unwrap();
        let b = forward(&folded, &AdapterMix::None, &tokens).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
        let _ = TokenSequence {
            tokens: tokens.to_vec(),
            roles: vec![Role::Instr; 6],
        };
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.ckpt");
        let a = randomized(11);
        a.save(&path).unwrap();
        assert_eq!(LoraAdapter::load(&path).unwrap(), a);
    }

    proptest::proptest! {
        #[test]
        fn merge_is_linear(w in 0.01f64..1.0, s in 0.1f64..3.0) {
            let a = randomized(21);
            let b = randomized(22);
            let m = merge_weighted(&[&a, &b], &[w, 1.0 - w + 0.01]).unwrap();
            let ms = merge_weighted(&[&a, &b], &[s * w, s * (1.0 - w + 0.01)]).unwrap();
            for (x, y) in m.flatten().iter().zip(ms.flatten()) {
                proptest::prop_assert!((s * x - y).abs() < 1e-12);
            }
        }
    }
}
