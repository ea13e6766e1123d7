//! Per-instance gradient directions.
//!
//! For every checkpoint the instruction-token gradient w.r.t. the adapter is
//! passed through the Adam moment transform of that checkpoint's optimizer
//! snapshot. The per-epoch features are averaged, projected with a seeded
//! ±1 matrix and normalized to unit length.
//!
//! Projection is linear, so averaging before or after projecting gives the
//! same vector; averaging first means one projection per instance.

use std::fs;
use std::path::{Path, PathBuf};

use rand::RngCore;
use rayon::prelude::*;
use serde_json::json;

use crate::adapters::LoraAdapter;
use crate::checkpoint::{self, Checkpoint};
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::model::linalg::{mm_strided, norm};
use crate::model::{loss_and_grad, AdapterMix, GradSelector, LossMask, ParameterStore};
use crate::seeding::{rng_for, TAG_PROJECT};
use crate::trainer::{AdamState, EpochRecord};

pub const DEFAULT_D_PROJ: usize = 8192;
/// Rows of `R` regenerated together.
const BLOCK_ROWS: usize = 256;
/// Instances projected per GEMM (and persisted per progress chunk).
const CHUNK: usize = 1024;
const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionSpec {
    pub seed: u64,
    pub d_proj: usize,
    pub source_dim: usize,
}

impl ProjectionSpec {
    pub fn new(seed: u64, d_proj: usize, source_dim: usize) -> Result<Self> {
        if d_proj == 0 || source_dim == 0 {
            return Err(Error::Config(
                "projection dimensions must be positive".into(),
            ));
        }
        Ok(ProjectionSpec {
            seed,
            d_proj,
            source_dim,
        })
    }

    fn blocks(&self) -> usize {
        self.d_proj.div_ceil(BLOCK_ROWS)
    }

    fn block_rows(&self, b: usize) -> usize {
        BLOCK_ROWS.min(self.d_proj - b * BLOCK_ROWS)
    }

    /// Sign bits of block `b`, row-major, least significant bit first; a set
    /// bit is +1. Each block has its own stream, so any block can be rebuilt
    /// alone.
    fn block_bits(&self, b: usize) -> Vec<u64> {
        let n = self.block_rows(b) * self.source_dim;
        let mut rng = rng_for(self.seed, &[TAG_PROJECT, b as u64]);
        (0..n.div_ceil(64)).map(|_| rng.next_u64()).collect()
    }

    /// Rows `[b·BLOCK_ROWS, …)` of `R`, row-major, entries ±1.
    pub fn block(&self, b: usize) -> Vec<f64> {
        let bits = self.block_bits(b);
        (0..self.block_rows(b) * self.source_dim)
            .map(|k| {
                if bits[k / 64] >> (k % 64) & 1 == 1 {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect()
    }
}

/// `R g` for one vector.
pub fn project(g: &[f64], spec: &ProjectionSpec) -> Result<Vec<f64>> {
    project_rows(g, 1, spec)
}

/// `R gᵢ` for `n` row-major source vectors; output is `n × d_proj`.
pub fn project_rows(rows: &[f64], n: usize, spec: &ProjectionSpec) -> Result<Vec<f64>> {
    if rows.len() != n * spec.source_dim {
        return Err(Error::Dimension {
            expected: n * spec.source_dim,
            actual: rows.len(),
        });
    }
    let (s, d) = (spec.source_dim, spec.d_proj);
    let mut out = vec![0.0; n * d];
    for b in 0..spec.blocks() {
        let r = spec.block(b);
        let lo = b * BLOCK_ROWS;
        let k = r.len() / s;
        // out[:, lo..lo+k] = G (n×s) · Rbᵀ (s×k)
        mm_strided(
            n,
            s,
            k,
            1.0,
            (rows, s as isize, 1),
            (&r, 1, s as isize),
            0.0,
            (&mut out[lo..], d as isize, 1),
        );
    }
    Ok(out)
}

/// `η · m̂ / (√v̂ + ε)` for this gradient against a read-only snapshot.
pub fn adam_feature(grad: &[f64], state: &AdamState, eta: f64) -> Result<Vec<f64>> {
    state.transform(grad, eta)
}

/// Adapter gradient of the summed NLL over instruction positions after BOS.
/// Only the instruction prefix is run: later tokens cannot reach those
/// positions through causal attention.
pub fn instruction_gradient(
    backbone: &ParameterStore,
    adapter: &LoraAdapter,
    seq: &TokenSequence,
) -> Result<Vec<f64>> {
    let prefix = seq.instruction_prefix();
    let mask = LossMask::instruction(&prefix);
    if mask.count() == 0 {
        return Err(Error::Mask("no instruction position after BOS".into()));
    }
    let g = loss_and_grad(
        backbone,
        &AdapterMix::Single(adapter),
        &prefix,
        &mask,
        GradSelector::AdapterOnly.into(),
        None,
    )?;
    Ok(g.adapter.expect("adapter gradient requested").flatten())
}

/// `δ = mean / ‖mean‖` over per-epoch features.
pub fn epoch_avg_normalize(features: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = features.first().ok_or(Error::EmptyDataset)?;
    let mut mean = vec![0.0; first.len()];
    for f in features {
        if f.len() != first.len() {
            return Err(Error::Dimension {
                expected: first.len(),
                actual: f.len(),
            });
        }
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x;
        }
    }
    let e = features.len() as f64;
    mean.iter_mut().for_each(|m| *m /= e);
    normalize(mean)
}

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = norm(&v);
    if !(n >= ZERO_NORM) {
        return Err(Error::ZeroDirection);
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// A checkpoint as the feature extractor sees it.
#[derive(Debug, Clone, Copy)]
pub struct Snapshot<'a> {
    pub adapter: &'a LoraAdapter,
    pub adam: &'a AdamState,
    pub eta: f64,
}

impl<'a> Snapshot<'a> {
    /// Uses the rate of the checkpoint's final step.
    pub fn of(e: &'a EpochRecord) -> Self {
        Snapshot {
            adapter: &e.adapter,
            adam: &e.adam,
            eta: e.eta_final,
        }
    }
}

/// Epoch-mean Adam feature in adapter-parameter space (before projection).
pub fn source_feature(
    backbone: &ParameterStore,
    snapshots: &[Snapshot<'_>],
    seq: &TokenSequence,
) -> Result<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    for s in snapshots {
        let g = instruction_gradient(backbone, s.adapter, seq)?;
        let f = adam_feature(&g, s.adam, s.eta)?;
        match acc.as_mut() {
            None => acc = Some(f),
            Some(a) => a.iter_mut().zip(&f).for_each(|(x, y)| *x += y),
        }
    }
    let mut a = acc.ok_or(Error::EmptyDataset)?;
    let e = snapshots.len() as f64;
    a.iter_mut().for_each(|x| *x /= e);
    Ok(a)
}

/// Unit directions keyed by instance id. Instances whose feature could not
/// be formed are listed in `excluded` with the reason.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub ids: Vec<String>,
    pub d_proj: usize,
    /// `ids.len() × d_proj`, row-major.
    pub data: Vec<f64>,
    pub excluded: Vec<(String, String)>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d_proj..(i + 1) * self.d_proj]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// `<dir>/<split>.bin` (raw LE f64), `<split>.ids`, `<split>.excluded`.
    pub fn save(&self, dir: &Path, split: &str) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bin = dir.join(format!("{split}.bin"));
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let ids = dir.join(format!("{split}.ids"));
        let mut text = format!("# d_proj={}\n", self.d_proj);
        for id in &self.ids {
            text.push_str(id);
            text.push('\n');
        }
        fs::write(&ids, text).map_err(|e| Error::io(&ids, e))?;
        let exc = dir.join(format!("{split}.excluded"));
        let mut text = String::new();
        for (id, why) in &self.excluded {
            text.push_str(&format!("{id}\t{why}\n"));
        }
        fs::write(&exc, text).map_err(|e| Error::io(&exc, e))?;
        Ok(vec![bin, ids, exc])
    }

    pub fn load(dir: &Path, split: &str) -> Result<FeatureMatrix> {
        let ids_path = dir.join(format!("{split}.ids"));
        let text = fs::read_to_string(&ids_path).map_err(|e| Error::io(&ids_path, e))?;
        let mut lines = text.lines();
        let d_proj = lines
            .next()
            .and_then(|h| h.strip_prefix("# d_proj="))
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: "expected `# d_proj=<n>` header".into(),
            })?;
        let ids: Vec<String> = lines.map(str::to_string).collect();
        let bin = dir.join(format!("{split}.bin"));
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() != 8 * ids.len() * d_proj {
            return Err(Error::Dimension {
                expected: 8 * ids.len() * d_proj,
                actual: bytes.len(),
            });
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let exc = dir.join(format!("{split}.excluded"));
        let text = fs::read_to_string(&exc).map_err(|e| Error::io(&exc, e))?;
        let excluded = text
            .lines()
            .filter_map(|l| l.split_once('\t'))
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        Ok(FeatureMatrix {
            ids,
            d_proj,
            data,
            excluded,
        })
    }

    /// Inspection export: id plus the first `max_dims` coordinates.
    pub fn write_csv(&self, path: &Path, max_dims: usize) -> Result<()> {
        let k = max_dims.min(self.d_proj);
        let mut out = String::from("id");
        for j in 0..k {
            out.push_str(&format!(",d{j}"));
        }
        out.push('\n');
        for (i, id) in self.ids.iter().enumerate() {
            out.push_str(id);
            for v in &self.row(i)[..k] {
                out.push_str(&format!(",{v:.9}"));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

struct Chunk {
    ids: Vec<String>,
    rows: Vec<f64>,
    excluded: Vec<(String, String)>,
}

fn chunk_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("chunk-{k:05}.ckpt"))
}

fn load_chunk(path: &Path, expect: &[String], d_proj: usize) -> Option<Chunk> {
    let ck = Checkpoint::read(path).ok()?;
    checkpoint::expect_kind(&ck, "feature-chunk").ok()?;
    let all: Vec<String> = serde_json::from_value(ck.manifest["all"].clone()).ok()?;
    if all != expect || checkpoint::get_u64(&ck.manifest, "d_proj").ok()? as usize != d_proj {
        return None;
    }
    let ids: Vec<String> = serde_json::from_value(ck.manifest["ids"].clone()).ok()?;
    let excluded: Vec<(String, String)> =
        serde_json::from_value(ck.manifest["excluded"].clone()).ok()?;
    let rows = ck.arrays.into_iter().next()?.2;
    (rows.len() == ids.len() * d_proj).then_some(Chunk {
        ids,
        rows,
        excluded,
    })
}

fn save_chunk(path: &Path, all: &[String], c: &Chunk, d_proj: usize) -> Result<()> {
    let mut ck = Checkpoint::new(json!({
        "kind": "feature-chunk",
        "d_proj": d_proj,
        "all": all,
        "ids": c.ids,
        "excluded": c.excluded,
    }));
    ck.push("rows", vec![c.ids.len(), d_proj], c.rows.clone());
    ck.write(path)
}

/// Features for `items` from the run's checkpoints. With `progress` set,
/// every finished chunk is persisted there and reused on the next call.
pub fn build_feature_matrix(
    backbone: &ParameterStore,
    epochs: &[EpochRecord],
    items: &[(String, TokenSequence)],
    spec: &ProjectionSpec,
    progress: Option<&Path>,
) -> Result<FeatureMatrix> {
    if epochs.is_empty() {
        return Err(Error::MissingStage {
            stage: "train-base".into(),
            artifact: "epoch checkpoints".into(),
        });
    }
    let snaps: Vec<Snapshot<'_>> = epochs.iter().map(Snapshot::of).collect();
    if snaps[0].adapter.param_count() != spec.source_dim {
        return Err(Error::Dimension {
            expected: spec.source_dim,
            actual: snaps[0].adapter.param_count(),
        });
    }
    if let Some(dir) = progress {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = FeatureMatrix {
        ids: Vec::new(),
        d_proj: spec.d_proj,
        data: Vec::new(),
        excluded: Vec::new(),
    };
    for (k, part) in items.chunks(CHUNK).enumerate() {
        let all: Vec<String> = part.iter().map(|(id, _)| id.clone()).collect();
        let cached = progress.and_then(|d| load_chunk(&chunk_path(d, k), &all, spec.d_proj));
        let chunk = match cached {
            Some(c) => c,
            None => {
                let c = feature_chunk(backbone, &snaps, part, spec)?;
                if let Some(d) = progress {
                    save_chunk(&chunk_path(d, k), &all, &c, spec.d_proj)?;
                }
                c
            }
        };
        out.ids.extend(chunk.ids);
        out.data.extend(chunk.rows);
        out.excluded.extend(chunk.excluded);
    }
    Ok(out)
}

fn feature_chunk(
    backbone: &ParameterStore,
    snaps: &[Snapshot<'_>],
    part: &[(String, TokenSequence)],
    spec: &ProjectionSpec,
) -> Result<Chunk> {
    let feats: Vec<Result<Vec<f64>>> = part
        .par_iter()
        .map(|(_, seq)| source_feature(backbone, snaps, seq))
        .collect();
    let mut ok_ids = Vec::new();
    let mut excluded = Vec::new();
    let mut src = Vec::new();
    for ((id, _), f) in part.iter().zip(feats) {
        match f {
            Ok(v) => {
                ok_ids.push(id.clone());
                src.extend(v);
            }
            Err(e) => excluded.push((id.clone(), e.to_string())),
        }
    }
    let projected = project_rows(&src, ok_ids.len(), spec)?;
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (id, row) in ok_ids.into_iter().zip(projected.chunks_exact(spec.d_proj)) {
        match normalize(row.to_vec()) {
            Ok(v) => {
                ids.push(id);
                rows.extend(v);
            }
            Err(e) => excluded.push((id, e.to_string())),
        }
    }
    Ok(Chunk {
        ids,
        rows,
        excluded,
    })
}

/// Direction for a single instance, or `None` when it has no usable
/// feature (such instances are routed to the base adapter alone).
pub fn instance_direction(
    backbone: &ParameterStore,
    epochs: &[EpochRecord],
    seq: &TokenSequence,
    spec: &ProjectionSpec,
) -> Result<Option<Vec<f64>>> {
    let snaps: Vec<Snapshot<'_>> = epochs.iter().map(Snapshot::of).collect();
    let src = match source_feature(backbone, &snaps, seq) {
        Ok(s) => s,
        Err(Error::Mask(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    match normalize(project(&src, spec)?) {
        Ok(v) => Ok(Some(v)),
        Err(Error::ZeroDirection) => Ok(None),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::adapters::init_lora;
    use crate::corpus::Role;
    use crate::model::{init_backbone, LmConfig};
    use crate::trainer::{train, LinearDecay, TrainConfig};

    fn seq(tokens: &[u32], n_instr: usize) -> TokenSequence {
        TokenSequence {
            tokens: tokens.to_vec(),
            roles: (0..tokens.len())
                .map(|t| if t < n_instr { Role::Instr } else { Role::Resp })
                .collect(),
        }
    }

    fn setup() -> (
        ParameterStore,
        Vec<EpochRecord>,
        Vec<(String, TokenSequence)>,
    ) {
        let c = LmConfig {
            vocab_size: 9,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 12,
            l_max: 12,
        };
        let p = init_backbone(&c, 1).unwrap();
        let a = init_lora(&c, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let items: Vec<(String, TokenSequence)> = (0..30)
            .map(|i| {
                let len = rng.random_range(5..10);
                let toks: Vec<u32> = (0..len).map(|_| rng.random_range(0..9)).collect();
                (format!("x{i:02}"), seq(&toks, 3))
            })
            .collect();
        let data: Vec<TokenSequence> = items.iter().map(|(_, s)| s.clone()).collect();
        let cfg = TrainConfig {
            epochs: 2,
            eta0: 1e-2,
            batch_size: 8,
            seed: 1,
        };
        let run = train(&p, &a, &data, &cfg, None, |_| Ok(())).unwrap();
        (p, run.epochs, items)
    }

    #[test]
    fn fresh_state_feature_is_eta_times_sign() {
        let mut s = AdamState::new(
            4,
            LinearDecay {
                eta0: 1.0,
                total_steps: 1,
            },
        );
        s.eps = 0.0;
        let f = adam_feature(&[0.5, -0.5, 0.5, -0.5], &s, 0.3).unwrap();
        assert_eq!(f, vec![0.3, -0.3, 0.3, -0.3]);
        let z = adam_feature(&[0.0; 4], &AdamState::new(4, s.schedule), 0.3).unwrap();
        assert_eq!(z, vec![0.0; 4]);
        assert!(adam_feature(&[0.0; 3], &s, 0.3).is_err());
    }

    #[test]
    fn projection_is_linear_and_regenerable() {
        let spec = ProjectionSpec::new(3, 300, 50).unwrap();
        assert_eq!(spec.block(1), spec.block(1));
        assert!(spec.block(0).iter().all(|x| *x == 1.0 || *x == -1.0));
        let ones = spec.block(0).iter().filter(|x| **x > 0.0).count();
        assert!((ones as f64 / (256.0 * 50.0) - 0.5).abs() < 0.02);
        assert_eq!(project(&[0.0; 50], &spec).unwrap(), vec![0.0; 300]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let (pa, pb, pab) = (
            project(&a, &spec).unwrap(),
            project(&b, &spec).unwrap(),
            project(&ab, &spec).unwrap(),
        );
        for i in 0..300 {
            assert!((pa[i] + pb[i] - pab[i]).abs() < 1e-9);
        }
        // brute-force row 257 (second block)
        let row = &spec.block(1)[50..100];
        let want: f64 = row.iter().zip(&a).map(|(r, x)| r * x).sum();
        assert!((pa[257] - want).abs() < 1e-12);
        let both = project_rows(&[a.clone(), b.clone()].concat(), 2, &spec).unwrap();
        assert_eq!(&both[..300], &pa[..]);
        assert_eq!(&both[300..], &pb[..]);
        assert!(project(&a[..49], &spec).is_err());
    }

    #[test]
    fn projection_matches_naive_product() {
        // ragged words, blocks and batch sizes
        for (seed, d, src, n) in [
            (1, 1300, 77, 45),
            (2, 9, 64, 1),
            (3, 1024, 8, 33),
            (4, 257, 131, 70),
        ] {
            let spec = ProjectionSpec::new(seed, d, src).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g: Vec<f64> = (0..n * src).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = project_rows(&g, n, &spec).unwrap();
            let r: Vec<f64> = (0..spec.blocks()).flat_map(|b| spec.block(b)).collect();
            for i in 0..n {
                for row in 0..d {
                    let want: f64 = (0..src).map(|c| r[row * src + c] * g[i * src + c]).sum();
                    assert!((got[i * d + row] - want).abs() < 1e-12, "{seed} {i} {row}");
                }
            }
        }
    }

    #[test]
    fn small_jl_inner_products() {
        let (s, d) = (2000, 2048);
        let spec = ProjectionSpec::new(9, d, s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut unit = || {
            let v: Vec<f64> = (0..s).map(|_| rng.random_range(-1.0..1.0)).collect();
            normalize(v).unwrap()
        };
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..20).map(|_| (unit(), unit())).collect();
        for (x, y) in &pairs {
            let (px, py) = (project(x, &spec).unwrap(), project(y, &spec).unwrap());
            let est = crate::model::linalg::dot(&px, &py) / d as f64;
            let truth = crate::model::linalg::dot(x, y);
            assert!((est - truth).abs() < 0.1, "{est} vs {truth}");
        }
    }

    #[test]
    fn epoch_average_cases() {
        assert_eq!(
            epoch_avg_normalize(&[vec![3.0, 4.0]]).unwrap(),
            vec![0.6, 0.8]
        );
        assert!(matches!(
            epoch_avg_normalize(&[vec![1.0, 2.0], vec![-1.0, -2.0]]),
            Err(Error::ZeroDirection)
        ));
        let a = epoch_avg_normalize(&[vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap();
        let b = epoch_avg_normalize(&[vec![3.0, 6.0], vec![1.5, -3.0]]).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-15));
    }

    #[test]
    fn instruction_gradient_ignores_response() {
        let (p, epochs, _) = setup();
        let a = &epochs[1].adapter;
        let s1 = seq(&[1, 4, 5, 3, 6, 7, 2], 4);
        let s2 = seq(&[1, 4, 5, 3, 8, 8, 8, 2], 4);
        let g1 = instruction_gradient(&p, a, &s1).unwrap();
        assert_eq!(g1, instruction_gradient(&p, a, &s2).unwrap());
        assert_eq!(g1, instruction_gradient(&p, a, &s1).unwrap());
        // general-mask oracle on the untruncated sequence
        let full = loss_and_grad(
            &p,
            &AdapterMix::Single(a),
            &s1,
            &LossMask::instruction(&s1),
            GradSelector::AdapterOnly.into(),
            None,
        )
        .unwrap()
        .adapter
        .unwrap()
        .flatten();
        assert!(g1
            .iter()
            .zip(&full)
            .all(|(x, y)| (x - y).abs() <= 1e-12 * y.abs().max(1.0)));
        assert!(matches!(
            instruction_gradient(&p, a, &seq(&[1, 5, 2], 1)),
            Err(Error::Mask(_))
        ));
    }

    #[test]
    fn feature_matrix_rows_are_unit_resumable_and_order_free() {
        let (p, epochs, items) = setup();
        let dim = epochs[0].adapter.param_count();
        let spec = ProjectionSpec::new(4, 512, dim).unwrap();
        let fm = build_feature_matrix(&p, &epochs, &items, &spec, None).unwrap();
        assert_eq!(fm.len() + fm.excluded.len(), items.len());
        for i in 0..fm.len() {
            assert!((norm(fm.row(i)) - 1.0).abs() < 1e-9);
        }

        let dir = tempfile::tempdir().unwrap();
        let a = build_feature_matrix(&p, &epochs, &items, &spec, Some(dir.path())).unwrap();
        assert_eq!(a, fm);
        assert!(chunk_path(dir.path(), 0).exists());
        let b = build_feature_matrix(&p, &epochs, &items, &spec, Some(dir.path())).unwrap();
        assert_eq!(a, b);

        let mut rev = items.clone();
        rev.reverse();
        let r = build_feature_matrix(&p, &epochs, &rev, &spec, None).unwrap();
        for (i, id) in fm.ids.iter().enumerate() {
            assert_eq!(fm.row(i), r.row(r.position(id).unwrap()));
        }

        let saved = tempfile::tempdir().unwrap();
        fm.save(saved.path(), "train").unwrap();
        assert_eq!(FeatureMatrix::load(saved.path(), "train").unwrap(), fm);
        fm.write_csv(&saved.path().join("train.csv"), 4).unwrap();

        let one = instance_direction(&p, &epochs, &items[0].1, &spec)
            .unwrap()
            .unwrap();
        assert!(one
            .iter()
            .zip(fm.row(0))
            .all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn feature_averages_per_epoch_adam_features() {
        let (p, epochs, items) = setup();
        let s = &items[3].1;
        let per_epoch: Vec<Vec<f64>> = epochs
            .iter()
            .map(|e| {
                let g = instruction_gradient(&p, &e.adapter, s).unwrap();
                adam_feature(&g, &e.adam, e.eta_final).unwrap()
            })
            .collect();
        let spec = ProjectionSpec::new(1, 64, per_epoch[0].len()).unwrap();
        let projected: Vec<Vec<f64>> = per_epoch
            .iter()
            .map(|f| project(f, &spec).unwrap())
            .collect();
        let want = epoch_avg_normalize(&projected).unwrap();
        let got = instance_direction(&p, &epochs, s, &spec).unwrap().unwrap();
        assert!(want.iter().zip(&got).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}
