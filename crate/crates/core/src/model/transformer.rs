//! Pre-norm causal transformer: forward pass with activation caches and the
//! matching hand-written backward pass.
//!
//! Adapted linear layers compute `W x + s · Σ_c λ_c · A_c (B_cᵀ x)` with
//! `s = α / r`; `A_c` is `d_out × r`, `B_c` is `d_in × r`. A single adapter
//! is the case `λ = [1]`; MoE routing fixes `λ` per call; MoLE computes
//! `λ(x) = softmax(G x)` per token from a gate matrix `G` (experts × d_in).

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::linalg::{mm_nn, mm_nt, mm_strided, mm_tn, softmax_in_place};
use super::{LinearKind, LossMask, ParameterStore};
use crate::adapters::LoraAdapter;
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Per-layer MoLE gate matrices, `n_experts × d_in` row-major.
pub type GateSet = BTreeMap<String, Vec<f64>>;

/// Which adapters participate in a forward pass and how they are mixed.
#[derive(Debug, Clone)]
pub enum AdapterMix<'a> {
    None,
    Single(&'a LoraAdapter),
    /// Layer-level routing with fixed, already-normalized weights.
    Routed {
        experts: Vec<&'a LoraAdapter>,
        lambdas: Vec<f64>,
    },
    /// Per-token learned gating.
    Gated {
        experts: Vec<&'a LoraAdapter>,
        gates: &'a GateSet,
    },
}

impl AdapterMix<'_> {
    fn experts(&self) -> Vec<&LoraAdapter> {
        match self {
            AdapterMix::None => Vec::new(),
            AdapterMix::Single(a) => vec![*a],
            AdapterMix::Routed { experts, .. } | AdapterMix::Gated { experts, .. } => {
                experts.clone()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            AdapterMix::Routed { experts, lambdas } if experts.len() != lambdas.len() => {
                Err(Error::Dimension {
                    expected: experts.len(),
                    actual: lambdas.len(),
                })
            }
            AdapterMix::Gated { experts, gates } => {
                for (name, g) in gates.iter() {
                    let d_in = experts
                        .first()
                        .and_then(|a| a.layers.get(name))
                        .map(|p| p.d_in)
                        .ok_or_else(|| Error::Config(format!("gate for unadapted layer {name}")))?;
                    if g.len() != experts.len() * d_in {
                        return Err(Error::Dimension {
                            expected: experts.len() * d_in,
                            actual: g.len(),
                        });
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Adapter-path dropout, active only during training.
pub struct Dropout<'r> {
    pub p: f64,
    pub rng: &'r mut ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradSelector {
    AdapterOnly,
    BackboneOnly,
    All,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Wants {
    pub backbone: bool,
    pub adapter: bool,
    pub gates: bool,
}

impl From<GradSelector> for Wants {
    fn from(s: GradSelector) -> Self {
        Wants {
            backbone: matches!(s, GradSelector::BackboneOnly | GradSelector::All),
            adapter: matches!(s, GradSelector::AdapterOnly | GradSelector::All),
            gates: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Grads {
    pub loss: f64,
    pub backbone: Option<BTreeMap<String, Vec<f64>>>,
    /// Gradient w.r.t. the single adapter, in adapter shape.
    pub adapter: Option<LoraAdapter>,
    pub gates: Option<GateSet>,
}

impl Grads {
    /// Flat vector in stable order: backbone names, then adapter layers.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(b) = &self.backbone {
            for v in b.values() {
                out.extend_from_slice(v);
            }
        }
        if let Some(a) = &self.adapter {
            out.extend(a.flatten());
        }
        out
    }
}

struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

#[derive(Default)]
struct LinearCache {
    x: Vec<f64>,
    drop: Option<Vec<f64>>,
    /// Per expert `T × r`: `B_cᵀ x` rows (after dropout).
    h: Vec<Vec<f64>>,
    /// Per expert `T × d_out`: `A_c h` rows, kept for gating.
    z: Vec<Vec<f64>>,
    /// `T × C` gate probabilities.
    lambda: Vec<f64>,
}

struct BlockCache {
    ln1: NormCache,
    q: LinearCache,
    k: LinearCache,
    v: LinearCache,
    qv: Vec<f64>,
    kv: Vec<f64>,
    vv: Vec<f64>,
    probs: Vec<f64>,
    o: LinearCache,
    ln2: NormCache,
    gate: LinearCache,
    up: LinearCache,
    gate_out: Vec<f64>,
    up_out: Vec<f64>,
    down: LinearCache,
}

struct Cache {
    tokens: Vec<u32>,
    blocks: Vec<BlockCache>,
    lnf: NormCache,
    hf: Vec<f64>,
}

struct Engine<'a, 'r> {
    params: &'a ParameterStore,
    mix: &'a AdapterMix<'a>,
    experts: Vec<&'a LoraAdapter>,
    dropout: Option<Dropout<'r>>,
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let th = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn layer_norm(x: &[f64], t: usize, d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, NormCache) {
    let mut y = vec![0.0; t * d];
    let mut xhat = vec![0.0; t * d];
    let mut rstd = vec![0.0; t];
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[i * d + j] = xh;
            y[i * d + j] = xh * gain[j] + bias[j];
        }
    }
    (y, NormCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &[f64],
    cache: &NormCache,
    t: usize,
    d: usize,
    gain: &[f64],
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Vec<f64> {
    if let Some((dg, db)) = grads {
        for i in 0..t {
            for j in 0..d {
                dg[j] += dy[i * d + j] * cache.xhat[i * d + j];
                db[j] += dy[i * d + j];
            }
        }
    }
    let mut dx = vec![0.0; t * d];
    for i in 0..t {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let dxh: Vec<f64> = (0..d).map(|j| dy[i * d + j] * gain[j]).collect();
        let mean_dxh = dxh.iter().sum::<f64>() / d as f64;
        let mean_dxh_xh = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[i * d + j] = cache.rstd[i] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    dx
}

impl<'a> Engine<'a, '_> {
    fn linear_forward(&mut self, name: &str, x: &[f64], t: usize) -> (Vec<f64>, LinearCache) {
        let w = self.params.get(name);
        let (d_out, d_in) = (w.shape[0], w.shape[1]);
        let mut y = vec![0.0; t * d_out];
        mm_nt(t, d_in, d_out, x, &w.data, &mut y, false);

        let mut cache = LinearCache {
            x: x.to_vec(),
            ..Default::default()
        };
        if self.experts.iter().all(|a| !a.layers.contains_key(name)) {
            return (y, cache);
        }

        let xin: Vec<f64> = match self.dropout.as_mut() {
            Some(dp) if dp.p > 0.0 => {
                let keep = 1.0 / (1.0 - dp.p);
                let mask: Vec<f64> = (0..t * d_in)
                    .map(|_| {
                        if dp.rng.random::<f64>() < dp.p {
                            0.0
                        } else {
                            keep
                        }
                    })
                    .collect();
                let dropped = x.iter().zip(&mask).map(|(a, m)| a * m).collect();
                cache.drop = Some(mask);
                dropped
            }
            _ => x.to_vec(),
        };

        let n = self.experts.len();
        let gated = matches!(self.mix, AdapterMix::Gated { .. });
        if let AdapterMix::Gated { gates, .. } = self.mix {
            let g = &gates[name];
            let mut lam = vec![0.0; t * n];
            mm_nt(t, d_in, n, x, g, &mut lam, false);
            for row in lam.chunks_mut(n) {
                softmax_in_place(row);
            }
            cache.lambda = lam;
        }

        for (c, adapter) in self.experts.iter().enumerate() {
            let Some(pair) = adapter.layers.get(name) else {
                cache.h.push(Vec::new());
                cache.z.push(Vec::new());
                continue;
            };
            let r = adapter.rank;
            let s = adapter.scale();
            let mut h = vec![0.0; t * r];
            mm_nn(t, d_in, r, &xin, &pair.b, &mut h, false);
            let mut z = vec![0.0; t * d_out];
            mm_nt(t, r, d_out, &h, &pair.a, &mut z, false);
            match self.mix {
                AdapterMix::Gated { .. } => {
                    for i in 0..t {
                        let l = s * cache.lambda[i * n + c];
                        for j in 0..d_out {
                            y[i * d_out + j] += l * z[i * d_out + j];
                        }
                    }
                }
                AdapterMix::Routed { lambdas, .. } => {
                    let l = s * lambdas[c];
                    y.iter_mut().zip(&z).for_each(|(yi, zi)| *yi += l * zi);
                }
                _ => y.iter_mut().zip(&z).for_each(|(yi, zi)| *yi += s * zi),
            }
            cache.h.push(h);
            cache.z.push(if gated { z } else { Vec::new() });
        }
        (y, cache)
    }

    #[allow(clippy::too_many_arguments)]
    fn linear_backward(
        &self,
        name: &str,
        dy: &[f64],
        cache: &LinearCache,
        t: usize,
        wants: Wants,
        grads: &mut GradAcc,
    ) -> Vec<f64> {
        let w = self.params.get(name);
        let (d_out, d_in) = (w.shape[0], w.shape[1]);
        let mut dx = vec![0.0; t * d_in];
        mm_nn(t, d_out, d_in, dy, &w.data, &mut dx, false);
        if wants.backbone {
            let dw = grads.backbone_slot(name, d_out * d_in);
            mm_tn(d_out, t, d_in, dy, &cache.x, dw, true);
        }
        if cache.h.is_empty() {
            return dx;
        }

        let n = self.experts.len();
        let mut dxin = vec![0.0; t * d_in];
        let mut dlam = if cache.lambda.is_empty() {
            Vec::new()
        } else {
            vec![0.0; t * n]
        };
        let xin: Vec<f64> = match &cache.drop {
            Some(m) => cache.x.iter().zip(m).map(|(a, b)| a * b).collect(),
            None => cache.x.clone(),
        };

        for (c, adapter) in self.experts.iter().enumerate() {
            let Some(pair) = adapter.layers.get(name) else {
                continue;
            };
            let r = adapter.rank;
            let s = adapter.scale();
            // Effective upstream gradient into this expert's path.
            let dyc: Vec<f64> = match self.mix {
                AdapterMix::Gated { .. } => {
                    let z = &cache.z[c];
                    for i in 0..t {
                        let mut acc = 0.0;
                        for j in 0..d_out {
                            acc += dy[i * d_out + j] * z[i * d_out + j];
                        }
                        dlam[i * n + c] = s * acc;
                    }
                    (0..t * d_out)
                        .map(|idx| s * cache.lambda[(idx / d_out) * n + c] * dy[idx])
                        .collect()
                }
                AdapterMix::Routed { lambdas, .. } => {
                    dy.iter().map(|g| s * lambdas[c] * g).collect()
                }
                _ => dy.iter().map(|g| s * g).collect(),
            };
            if wants.adapter {
                let slot = grads.adapter_slot(name, pair);
                mm_tn(d_out, t, r, &dyc, &cache.h[c], &mut slot.a, true);
            }
            let mut dh = vec![0.0; t * r];
            mm_nn(t, d_out, r, &dyc, &pair.a, &mut dh, false);
            if wants.adapter {
                let slot = grads.adapter_slot(name, pair);
                mm_tn(d_in, t, r, &xin, &dh, &mut slot.b, true);
            }
            mm_nt(t, r, d_in, &dh, &pair.b, &mut dxin, true);
        }

        match &cache.drop {
            Some(m) => dx
                .iter_mut()
                .zip(dxin.iter().zip(m))
                .for_each(|(d, (g, k))| *d += g * k),
            None => dx.iter_mut().zip(&dxin).for_each(|(d, g)| *d += g),
        }

        if let AdapterMix::Gated { gates, .. } = self.mix {
            // softmax backward: dz = λ ⊙ (dλ − Σ λ dλ)
            let mut dz = vec![0.0; t * n];
            for i in 0..t {
                let lam = &cache.lambda[i * n..(i + 1) * n];
                let dl = &dlam[i * n..(i + 1) * n];
                let inner: f64 = lam.iter().zip(dl).map(|(a, b)| a * b).sum();
                for c in 0..n {
                    dz[i * n + c] = lam[c] * (dl[c] - inner);
                }
            }
            mm_nn(t, n, d_in, &dz, &gates[name], &mut dx, true);
            if wants.gates {
                let slot = grads.gate_slot(name, n * d_in);
                mm_tn(n, t, d_in, &dz, &cache.x, slot, true);
            }
        }
        dx
    }

    fn run(&mut self, tokens: &[u32]) -> (Vec<f64>, Cache) {
        let cfg = self.params.config;
        let (t, d, nh, dh, ff, vocab) = (
            tokens.len(),
            cfg.d_model,
            cfg.n_heads,
            cfg.head_dim(),
            cfg.d_ff,
            cfg.vocab_size,
        );
        let tok = self.params.get("embed.tok");
        let pos = self.params.get("embed.pos");
        let mut x = vec![0.0; t * d];
        for (i, &id) in tokens.iter().enumerate() {
            let id = id as usize;
            for j in 0..d {
                x[i * d + j] = tok.data[id * d + j] + pos.data[i * d + j];
            }
        }

        let scale = 1.0 / (dh as f64).sqrt();
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for layer in 0..cfg.n_layers {
            let p = |s: &str| format!("blocks.{layer:02}.{s}");
            let (u1, ln1) = layer_norm(
                &x,
                t,
                d,
                &self.params.get(&p("ln1.gain")).data,
                &self.params.get(&p("ln1.bias")).data,
            );
            let (qv, qc) = self.linear_forward(&LinearKind::Q.param_name(layer), &u1, t);
            let (kv, kc) = self.linear_forward(&LinearKind::K.param_name(layer), &u1, t);
            let (vv, vc) = self.linear_forward(&LinearKind::V.param_name(layer), &u1, t);

            let mut probs = vec![0.0; nh * t * t];
            let mut attn = vec![0.0; t * d];
            for h in 0..nh {
                let off = h * dh;
                let ph = &mut probs[h * t * t..(h + 1) * t * t];
                mm_strided(
                    t,
                    dh,
                    t,
                    scale,
                    (&qv[off..], d as isize, 1),
                    (&kv[off..], 1, d as isize),
                    0.0,
                    (ph, t as isize, 1),
                );
                for i in 0..t {
                    let row = &mut ph[i * t..(i + 1) * t];
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].iter_mut().for_each(|v| *v = 0.0);
                }
                mm_strided(
                    t,
                    t,
                    dh,
                    1.0,
                    (ph, t as isize, 1),
                    (&vv[off..], d as isize, 1),
                    0.0,
                    (&mut attn[off..], d as isize, 1),
                );
            }
            let (o_out, oc) = self.linear_forward(&LinearKind::O.param_name(layer), &attn, t);
            let x_in = std::mem::take(&mut x);
            let hres: Vec<f64> = x_in.iter().zip(&o_out).map(|(a, b)| a + b).collect();

            let (u2, ln2) = layer_norm(
                &hres,
                t,
                d,
                &self.params.get(&p("ln2.gain")).data,
                &self.params.get(&p("ln2.bias")).data,
            );
            let (gate_out, gc) = self.linear_forward(&LinearKind::Gate.param_name(layer), &u2, t);
            let (up_out, uc) = self.linear_forward(&LinearKind::Up.param_name(layer), &u2, t);
            let m: Vec<f64> = gate_out
                .iter()
                .zip(&up_out)
                .map(|(g, u)| gelu(*g) * u)
                .collect();
            debug_assert_eq!(m.len(), t * ff);
            let (down_out, dc) = self.linear_forward(&LinearKind::Down.param_name(layer), &m, t);
            x = hres.iter().zip(&down_out).map(|(a, b)| a + b).collect();

            blocks.push(BlockCache {
                ln1,
                q: qc,
                k: kc,
                v: vc,
                qv,
                kv,
                vv,
                probs,
                o: oc,
                ln2,
                gate: gc,
                up: uc,
                gate_out,
                up_out,
                down: dc,
            });
        }

        let (hf, lnf) = layer_norm(
            &x,
            t,
            d,
            &self.params.get("final_ln.gain").data,
            &self.params.get("final_ln.bias").data,
        );
        let mut logits = vec![0.0; t * vocab];
        mm_nt(
            t,
            d,
            vocab,
            &hf,
            &self.params.get("head").data,
            &mut logits,
            false,
        );
        (
            logits,
            Cache {
                tokens: tokens.to_vec(),
                blocks,
                lnf,
                hf,
            },
        )
    }

    fn backward(&self, dlogits: &[f64], cache: &Cache, wants: Wants, grads: &mut GradAcc) {
        let cfg = self.params.config;
        let (t, d, nh, dh, vocab) = (
            cache.tokens.len(),
            cfg.d_model,
            cfg.n_heads,
            cfg.head_dim(),
            cfg.vocab_size,
        );
        let scale = 1.0 / (dh as f64).sqrt();
        let head = self.params.get("head");
        let mut dhf = vec![0.0; t * d];
        mm_nn(t, vocab, d, dlogits, &head.data, &mut dhf, false);
        if wants.backbone {
            let slot = grads.backbone_slot("head", vocab * d);
            mm_tn(vocab, t, d, dlogits, &cache.hf, slot, true);
        }
        let mut dx = {
            let gain = &self.params.get("final_ln.gain").data;
            if wants.backbone {
                let (dg, db) = grads.norm_slots("final_ln", d);
                layer_norm_backward(&dhf, &cache.lnf, t, d, gain, Some((dg, db)))
            } else {
                layer_norm_backward(&dhf, &cache.lnf, t, d, gain, None)
            }
        };

        for layer in (0..cfg.n_layers).rev() {
            let bc = &cache.blocks[layer];
            let p = |s: &str| format!("blocks.{layer:02}.{s}");

            // MLP branch; dx is the gradient w.r.t. the block output.
            let dm = self.linear_backward(
                &LinearKind::Down.param_name(layer),
                &dx,
                &bc.down,
                t,
                wants,
                grads,
            );
            let mut dgate = vec![0.0; dm.len()];
            let mut dup = vec![0.0; dm.len()];
            for i in 0..dm.len() {
                let g = bc.gate_out[i];
                dup[i] = dm[i] * gelu(g);
                dgate[i] = dm[i] * bc.up_out[i] * gelu_grad(g);
            }
            let mut du2 = self.linear_backward(
                &LinearKind::Gate.param_name(layer),
                &dgate,
                &bc.gate,
                t,
                wants,
                grads,
            );
            let du2b = self.linear_backward(
                &LinearKind::Up.param_name(layer),
                &dup,
                &bc.up,
                t,
                wants,
                grads,
            );
            du2.iter_mut().zip(&du2b).for_each(|(a, b)| *a += b);
            let gain2 = &self.params.get(&p("ln2.gain")).data;
            let dh_ln = if wants.backbone {
                let (dg, db) = grads.norm_slots(&p("ln2"), d);
                layer_norm_backward(&du2, &bc.ln2, t, d, gain2, Some((dg, db)))
            } else {
                layer_norm_backward(&du2, &bc.ln2, t, d, gain2, None)
            };
            // gradient w.r.t. the attention residual output
            let dhres: Vec<f64> = dx.iter().zip(&dh_ln).map(|(a, b)| a + b).collect();

            let dattn = self.linear_backward(
                &LinearKind::O.param_name(layer),
                &dhres,
                &bc.o,
                t,
                wants,
                grads,
            );
            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            let mut dp = vec![0.0; t * t];
            for h in 0..nh {
                let off = h * dh;
                let ph = &bc.probs[h * t * t..(h + 1) * t * t];
                mm_strided(
                    t,
                    dh,
                    t,
                    1.0,
                    (&dattn[off..], d as isize, 1),
                    (&bc.vv[off..], 1, d as isize),
                    0.0,
                    (&mut dp, t as isize, 1),
                );
                mm_strided(
                    t,
                    t,
                    dh,
                    1.0,
                    (ph, 1, t as isize),
                    (&dattn[off..], d as isize, 1),
                    0.0,
                    (&mut dv[off..], d as isize, 1),
                );
                for i in 0..t {
                    let prow = &ph[i * t..(i + 1) * t];
                    let drow = &mut dp[i * t..(i + 1) * t];
                    let inner: f64 = (0..=i).map(|j| prow[j] * drow[j]).sum();
                    for j in 0..t {
                        drow[j] = if j <= i {
                            prow[j] * (drow[j] - inner)
                        } else {
                            0.0
                        };
                    }
                }
                mm_strided(
                    t,
                    t,
                    dh,
                    scale,
                    (&dp, t as isize, 1),
                    (&bc.kv[off..], d as isize, 1),
                    0.0,
                    (&mut dq[off..], d as isize, 1),
                );
                mm_strided(
                    t,
                    t,
                    dh,
                    scale,
                    (&dp, 1, t as isize),
                    (&bc.qv[off..], d as isize, 1),
                    0.0,
                    (&mut dk[off..], d as isize, 1),
                );
            }
            let mut du1 = self.linear_backward(
                &LinearKind::Q.param_name(layer),
                &dq,
                &bc.q,
                t,
                wants,
                grads,
            );
            for (kind, g, c) in [(LinearKind::K, &dk, &bc.k), (LinearKind::V, &dv, &bc.v)] {
                let part = self.linear_backward(&kind.param_name(layer), g, c, t, wants, grads);
                du1.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
            }
            let gain1 = &self.params.get(&p("ln1.gain")).data;
            let dx_ln = if wants.backbone {
                let (dg, db) = grads.norm_slots(&p("ln1"), d);
                layer_norm_backward(&du1, &bc.ln1, t, d, gain1, Some((dg, db)))
            } else {
                layer_norm_backward(&du1, &bc.ln1, t, d, gain1, None)
            };
            dx = dhres.iter().zip(&dx_ln).map(|(a, b)| a + b).collect();
        }

        if wants.backbone {
            let vocab_d = cfg.vocab_size * d;
            let dtok = grads.backbone_slot("embed.tok", vocab_d);
            for (i, &id) in cache.tokens.iter().enumerate() {
                let id = id as usize;
                for j in 0..d {
                    dtok[id * d + j] += dx[i * d + j];
                }
            }
            let dpos = grads.backbone_slot("embed.pos", cfg.l_max * d);
            for i in 0..t {
                for j in 0..d {
                    dpos[i * d + j] += dx[i * d + j];
                }
            }
        }
    }
}

struct GradAcc {
    backbone: BTreeMap<String, Vec<f64>>,
    adapter: Option<LoraAdapter>,
    gates: GateSet,
}

impl GradAcc {
    fn backbone_slot(&mut self, name: &str, len: usize) -> &mut [f64] {
        self.backbone
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; len])
    }

    fn norm_slots(&mut self, prefix: &str, d: usize) -> (&mut [f64], &mut [f64]) {
        let gain = format!("{prefix}.gain");
        let bias = format!("{prefix}.bias");
        self.backbone
            .entry(gain.clone())
            .or_insert_with(|| vec![0.0; d]);
        self.backbone
            .entry(bias.clone())
            .or_insert_with(|| vec![0.0; d]);
        // Two distinct keys; split borrows through an iterator.
        let mut it = self
            .backbone
            .iter_mut()
            .filter(|(k, _)| **k == gain || **k == bias);
        let (k1, v1) = it.next().expect("inserted");
        let (_, v2) = it.next().expect("inserted");
        if *k1 == bias {
            (v2, v1)
        } else {
            (v1, v2)
        }
    }

    fn adapter_slot(
        &mut self,
        name: &str,
        _like: &crate::adapters::LoraPair,
    ) -> &mut crate::adapters::LoraPair {
        self.adapter
            .as_mut()
            .and_then(|a| a.layers.get_mut(name))
            .expect("adapter gradient template covers every adapted layer")
    }

    fn gate_slot(&mut self, name: &str, len: usize) -> &mut [f64] {
        self.gates
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; len])
    }
}

fn check_len(params: &ParameterStore, seq_len: usize) -> Result<()> {
    if seq_len == 0 {
        return Err(Error::Mask("empty sequence".into()));
    }
    if seq_len > params.config.l_max {
        return Err(Error::OverLength {
            len: seq_len,
            max: params.config.l_max,
        });
    }
    Ok(())
}

/// Inference logits, `len × vocab` row-major. Dropout is never applied.
pub fn forward(params: &ParameterStore, mix: &AdapterMix<'_>, tokens: &[u32]) -> Result<Vec<f64>> {
    forward_with(params, mix, tokens, None)
}

pub fn forward_with(
    params: &ParameterStore,
    mix: &AdapterMix<'_>,
    tokens: &[u32],
    dropout: Option<Dropout<'_>>,
) -> Result<Vec<f64>> {
    check_len(params, tokens.len())?;
    mix.validate()?;
    let mut engine = Engine {
        params,
        mix,
        experts: mix.experts(),
        dropout,
    };
    Ok(engine.run(tokens).0)
}

/// Per-layer gate probabilities (`T × experts`) from a gated forward pass.
pub fn gate_trace(
    params: &ParameterStore,
    mix: &AdapterMix<'_>,
    tokens: &[u32],
) -> Result<BTreeMap<String, Vec<f64>>> {
    check_len(params, tokens.len())?;
    mix.validate()?;
    if !matches!(mix, AdapterMix::Gated { .. }) {
        return Err(Error::Config("gate trace needs a gated mix".into()));
    }
    let mut engine = Engine {
        params,
        mix,
        experts: mix.experts(),
        dropout: None,
    };
    let (_, cache) = engine.run(tokens);
    let mut out = BTreeMap::new();
    for (l, b) in cache.blocks.into_iter().enumerate() {
        let pairs = [
            (LinearKind::Q, b.q),
            (LinearKind::K, b.k),
            (LinearKind::V, b.v),
            (LinearKind::O, b.o),
            (LinearKind::Gate, b.gate),
            (LinearKind::Up, b.up),
            (LinearKind::Down, b.down),
        ];
        for (kind, c) in pairs {
            if !c.lambda.is_empty() {
                out.insert(kind.param_name(l), c.lambda);
            }
        }
    }
    Ok(out)
}

/// Summed NTP loss over `mask` and its exact gradient for the requested
/// parameter groups.
pub fn loss_and_grad(
    params: &ParameterStore,
    mix: &AdapterMix<'_>,
    seq: &TokenSequence,
    mask: &LossMask,
    wants: Wants,
    dropout: Option<Dropout<'_>>,
) -> Result<Grads> {
    check_len(params, seq.len())?;
    mask.check(seq.len())?;
    mix.validate()?;
    if !(wants.backbone || wants.adapter || wants.gates) {
        return Err(Error::Config("empty gradient selector".into()));
    }
    if wants.adapter && !matches!(mix, AdapterMix::Single(_)) {
        return Err(Error::Config(
            "adapter gradients require a single adapter".into(),
        ));
    }
    if wants.gates && !matches!(mix, AdapterMix::Gated { .. }) {
        return Err(Error::Config("gate gradients require a gated mix".into()));
    }

    let vocab = params.config.vocab_size;
    let mut engine = Engine {
        params,
        mix,
        experts: mix.experts(),
        dropout,
    };
    let (logits, cache) = engine.run(&seq.tokens);

    let t = seq.len();
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; t * vocab];
    for pos in 1..t {
        if !mask.0[pos] {
            continue;
        }
        let row = &logits[(pos - 1) * vocab..pos * vocab];
        let target = seq.tokens[pos] as usize;
        loss += super::linalg::log_sum_exp(row) - row[target];
        let drow = &mut dlogits[(pos - 1) * vocab..pos * vocab];
        drow.copy_from_slice(row);
        softmax_in_place(drow);
        drow[target] -= 1.0;
    }

    let mut acc = GradAcc {
        backbone: BTreeMap::new(),
        adapter: match mix {
            AdapterMix::Single(a) if wants.adapter => Some(a.zeros_like()),
            _ => None,
        },
        gates: GateSet::new(),
    };
    engine.backward(&dlogits, &cache, wants, &mut acc);

    let backbone = wants.backbone.then(|| {
        let mut full = BTreeMap::new();
        for (name, tensor) in &params.tensors {
            let g = acc
                .backbone
                .remove(name)
                .unwrap_or_else(|| vec![0.0; tensor.len()]);
            full.insert(name.clone(), g);
        }
        full
    });
    let gates = wants.gates.then(|| {
        let AdapterMix::Gated { gates, .. } = mix else {
            unreachable!()
        };
        gates
            .iter()
            .map(|(k, v)| {
                let g = acc.gates.remove(k).unwrap_or_else(|| vec![0.0; v.len()]);
                (k.clone(), g)
            })
            .collect()
    });
    Ok(Grads {
        loss,
        backbone,
        adapter: acc.adapter,
        gates,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    use super::*;
    use crate::adapters::init_lora;
    use crate::corpus::Role;
    use crate::model::{init_backbone, ntp_loss, LmConfig};

    fn cfg() -> LmConfig {
        LmConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            l_max: 10,
        }
    }

    fn sample_seq(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> TokenSequence {
        let tokens = (0..len)
            .map(|_| rng.random_range(0..vocab as u32))
            .collect();
        let split = len / 2;
        let roles = (0..len)
            .map(|i| if i < split { Role::Instr } else { Role::Resp })
            .collect();
        TokenSequence { tokens, roles }
    }

    fn random_adapter(c: &LmConfig, seed: u64) -> LoraAdapter {
        let mut a = init_lora(c, 2, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let dist = Normal::new(0.0, 0.2).unwrap();
        for p in a.layers.values_mut() {
            p.b.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
        }
        a
    }

    fn loss_of(
        params: &ParameterStore,
        mix: &AdapterMix<'_>,
        seq: &TokenSequence,
        mask: &LossMask,
    ) -> f64 {
        let logits = forward(params, mix, &seq.tokens).unwrap();
        ntp_loss(&logits, params.config.vocab_size, seq, mask).unwrap()
    }

    /// Central differences, h = 1e-5; agreement within 1e-6 relative, with
    /// an absolute floor for coordinates whose gradient is numerically zero.
    fn agrees(analytic: f64, numeric: f64) -> bool {
        let diff = (analytic - numeric).abs();
        diff <= 1e-6 * analytic.abs().max(numeric.abs()) || diff <= 1e-9
    }

    const H: f64 = 1e-5;

    #[test]
    fn adapter_and_backbone_gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let c = cfg();
            let params = init_backbone(&c, seed).unwrap();
            assert!(params.param_count() < 10_000);
            let adapter = random_adapter(&c, seed + 50);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
            let seq = sample_seq(&mut rng, 7, c.vocab_size);
            let mask = LossMask::all(seq.len());

            let g = loss_and_grad(
                &params,
                &AdapterMix::Single(&adapter),
                &seq,
                &mask,
                GradSelector::All.into(),
                None,
            )
            .unwrap();

            let flat_a = adapter.flatten();
            let grad_a = g.adapter.as_ref().unwrap().flatten();
            for _ in 0..20 {
                let i = rng.random_range(0..flat_a.len());
                let mut plus = flat_a.clone();
                plus[i] += H;
                let mut minus = flat_a.clone();
                minus[i] -= H;
                let ap = LoraAdapter::unflatten(&plus, &adapter).unwrap();
                let am = LoraAdapter::unflatten(&minus, &adapter).unwrap();
                let num = (loss_of(&params, &AdapterMix::Single(&ap), &seq, &mask)
                    - loss_of(&params, &AdapterMix::Single(&am), &seq, &mask))
                    / (2.0 * H);
                assert!(
                    agrees(grad_a[i], num),
                    "seed {seed} adapter[{i}]: {} vs {num}",
                    grad_a[i]
                );
            }

            let flat_p = params.flatten();
            let grad_p: Vec<f64> = g
                .backbone
                .as_ref()
                .unwrap()
                .values()
                .flatten()
                .copied()
                .collect();
            assert_eq!(grad_p.len(), flat_p.len());
            for _ in 0..20 {
                let i = rng.random_range(0..flat_p.len());
                let mut pp = params.clone();
                let mut v = flat_p.clone();
                v[i] += H;
                pp.assign_flat(&v).unwrap();
                let mut pm = params.clone();
                v[i] -= 2.0 * H;
                pm.assign_flat(&v).unwrap();
                let num = (loss_of(&pp, &AdapterMix::Single(&adapter), &seq, &mask)
                    - loss_of(&pm, &AdapterMix::Single(&adapter), &seq, &mask))
                    / (2.0 * H);
                assert!(
                    agrees(grad_p[i], num),
                    "seed {seed} backbone[{i}]: {} vs {num}",
                    grad_p[i]
                );
            }
        }
    }

    #[test]
    fn gate_gradients_match_finite_differences() {
        let c = cfg();
        let params = init_backbone(&c, 3).unwrap();
        let experts = [
            random_adapter(&c, 1),
            random_adapter(&c, 2),
            random_adapter(&c, 3),
        ];
        let refs: Vec<&LoraAdapter> = experts.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let dist = Normal::new(0.0, 0.5).unwrap();
        let gates: GateSet = experts[0]
            .layers
            .iter()
            .map(|(k, p)| {
                (
                    k.clone(),
                    (0..3 * p.d_in).map(|_| dist.sample(&mut rng)).collect(),
                )
            })
            .collect();
        let seq = sample_seq(&mut rng, 6, c.vocab_size);
        let mask = LossMask::all(seq.len());
        let mix = AdapterMix::Gated {
            experts: refs.clone(),
            gates: &gates,
        };
        let wants = Wants {
            gates: true,
            ..Default::default()
        };
        let g = loss_and_grad(&params, &mix, &seq, &mask, wants, None).unwrap();
        let grads = g.gates.unwrap();
        let names: Vec<String> = gates.keys().cloned().collect();
        for _ in 0..30 {
            let name = &names[rng.random_range(0..names.len())];
            let i = rng.random_range(0..gates[name].len());
            let mut gp = gates.clone();
            gp.get_mut(name).unwrap()[i] += H;
            let mut gm = gates.clone();
            gm.get_mut(name).unwrap()[i] -= H;
            let lp = loss_of(
                &params,
                &AdapterMix::Gated {
                    experts: refs.clone(),
                    gates: &gp,
                },
                &seq,
                &mask,
            );
            let lm = loss_of(
                &params,
                &AdapterMix::Gated {
                    experts: refs.clone(),
                    gates: &gm,
                },
                &seq,
                &mask,
            );
            let num = (lp - lm) / (2.0 * H);
            assert!(
                agrees(grads[name][i], num),
                "{name}[{i}]: {} vs {num}",
                grads[name][i]
            );
        }
    }

    #[test]
    fn dropout_path_gradient_matches_fixed_mask() {
        // With a fixed seed the dropout mask is reproducible, so the loss is a
        // deterministic function of the adapter and can be differenced.
        let c = cfg();
        let params = init_backbone(&c, 4).unwrap();
        let adapter = random_adapter(&c, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seq = sample_seq(&mut rng, 6, c.vocab_size);
        let mask = LossMask::all(seq.len());
        let run = |a: &LoraAdapter| {
            let mut r = ChaCha8Rng::seed_from_u64(17);
            let logits = forward_with(
                &params,
                &AdapterMix::Single(a),
                &seq.tokens,
                Some(Dropout {
                    p: 0.3,
                    rng: &mut r,
                }),
            )
            .unwrap();
            ntp_loss(&logits, c.vocab_size, &seq, &mask).unwrap()
        };
        let mut r = ChaCha8Rng::seed_from_u64(17);
        let g = loss_and_grad(
            &params,
            &AdapterMix::Single(&adapter),
            &seq,
            &mask,
            GradSelector::AdapterOnly.into(),
            Some(Dropout {
                p: 0.3,
                rng: &mut r,
            }),
        )
        .unwrap();
        let ga = g.adapter.unwrap().flatten();
        let flat = adapter.flatten();
        for _ in 0..20 {
            let i = rng.random_range(0..flat.len());
            let mut p = flat.clone();
            p[i] += H;
            let mut m = flat.clone();
            m[i] -= H;
            let num = (run(&LoraAdapter::unflatten(&p, &adapter).unwrap())
                - run(&LoraAdapter::unflatten(&m, &adapter).unwrap()))
                / (2.0 * H);
            assert!(agrees(ga[i], num), "[{i}] {} vs {num}", ga[i]);
        }
    }

    #[test]
    fn zero_b_gives_zero_a_gradient() {
        let c = cfg();
        let params = init_backbone(&c, 1).unwrap();
        let adapter = init_lora(&c, 2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq = sample_seq(&mut rng, 8, c.vocab_size);
        let g = loss_and_grad(
            &params,
            &AdapterMix::Single(&adapter),
            &seq,
            &LossMask::all(8),
            GradSelector::AdapterOnly.into(),
            None,
        )
        .unwrap();
        assert_eq!(g.flatten().len(), adapter.param_count());
        let ga = g.adapter.unwrap();
        assert!(ga.layers.values().all(|p| p.a.iter().all(|v| *v == 0.0)));
        assert!(ga.layers.values().any(|p| p.b.iter().any(|v| *v != 0.0)));
    }

    #[test]
    fn empty_selector_is_rejected() {
        let c = cfg();
        let params = init_backbone(&c, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq = sample_seq(&mut rng, 4, c.vocab_size);
        assert!(loss_and_grad(
            &params,
            &AdapterMix::None,
            &seq,
            &LossMask::all(4),
            Wants::default(),
            None
        )
        .is_err());
    }

    #[test]
    fn logits_are_causal() {
        let c = cfg();
        let params = init_backbone(&c, 6).unwrap();
        let adapter = random_adapter(&c, 6);
        let mix = AdapterMix::Single(&adapter);
        let a = [1u32, 2, 3, 4, 5, 6];
        for t in 0..a.len() {
            let mut b = a;
            b[t] = 9;
            let la = forward(&params, &mix, &a).unwrap();
            let lb = forward(&params, &mix, &b).unwrap();
            let v = c.vocab_size;
            assert_eq!(la[..t * v], lb[..t * v]);
            assert_ne!(la[t * v..(t + 1) * v], lb[t * v..(t + 1) * v]);
        }
    }

    #[test]
    fn over_length_is_rejected() {
        let c = cfg();
        let params = init_backbone(&c, 6).unwrap();
        assert!(forward(&params, &AdapterMix::None, &[1; 11]).is_err());
    }

    #[test]
    fn loss_is_a_sum_over_masked_positions() {
        let c = cfg();
        let params = init_backbone(&c, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let seq = sample_seq(&mut rng, 8, c.vocab_size);
        let total = loss_of(&params, &AdapterMix::None, &seq, &LossMask::all(8));
        let mut parts = 0.0;
        for t in 1..8 {
            let mut m = vec![false; 8];
            m[t] = true;
            parts += loss_of(&params, &AdapterMix::None, &seq, &LossMask(m));
        }
        assert!((total - parts).abs() < 1e-12);
    }
}
