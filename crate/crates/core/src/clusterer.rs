//! BIRCH clustering of unit gradient directions, the size-rebalancing loop,
//! centroids and per-cluster source reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradfeat::FeatureMatrix;
use crate::model::linalg::{dot, mm_nt, norm};
use crate::seeding::{derive_seed, rng_for, TAG_SAMPLE};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_BRANCHING: usize = 50;
pub const DEFAULT_K: usize = 5;
pub const DEFAULT_SAMPLE_CAP: usize = 5000;
pub const DEFAULT_MAX_ITER: usize = 3;
pub const DEFAULT_RATIO: f64 = 5.0;

/// How CF leaf entries are merged down to `K` global clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    #[default]
    Single,
    /// Minimum increase in within-cluster variance, entries weighted by count.
    Ward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BirchParams {
    pub threshold: f64,
    pub branching: usize,
    pub k: usize,
    pub linkage: Linkage,
}

impl Default for BirchParams {
    fn default() -> Self {
        BirchParams {
            threshold: DEFAULT_THRESHOLD,
            branching: DEFAULT_BRANCHING,
            k: DEFAULT_K,
            linkage: Linkage::Single,
        }
    }
}

impl BirchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) || self.branching < 2 || self.k < 2 {
            return Err(Error::Config(format!(
                "BIRCH needs threshold > 0, branching >= 2, K >= 2 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// Clustering feature: count, linear sum, sum of squared norms.
#[derive(Debug, Clone, PartialEq)]
pub struct Cf {
    pub n: usize,
    pub ls: Vec<f64>,
    pub ss: f64,
}

impl Cf {
    fn point(x: &[f64]) -> Cf {
        Cf {
            n: 1,
            ls: x.to_vec(),
            ss: dot(x, x),
        }
    }

    fn empty(dim: usize) -> Cf {
        Cf {
            n: 0,
            ls: vec![0.0; dim],
            ss: 0.0,
        }
    }

    fn add(&mut self, o: &Cf) {
        self.n += o.n;
        self.ss += o.ss;
        self.ls.iter_mut().zip(&o.ls).for_each(|(a, b)| *a += b);
    }

    fn add_point(&mut self, x: &[f64]) {
        self.n += 1;
        self.ss += dot(x, x);
        self.ls.iter_mut().zip(x).for_each(|(a, b)| *a += b);
    }

    pub fn centroid(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.ls.iter().map(|v| v / n).collect()
    }

    /// Squared distance from this entry's centroid to `x`.
    fn dist2(&self, x: &[f64]) -> f64 {
        let n = self.n as f64;
        self.ls
            .iter()
            .zip(x)
            .map(|(l, xi)| {
                let d = l / n - xi;
                d * d
            })
            .sum()
    }

    fn dist2_cf(&self, o: &Cf) -> f64 {
        let (n, m) = (self.n as f64, o.n as f64);
        self.ls
            .iter()
            .zip(&o.ls)
            .map(|(a, b)| {
                let d = a / n - b / m;
                d * d
            })
            .sum()
    }

    /// Radius of this entry after absorbing `x`.
    fn radius_with(&self, x: &[f64]) -> f64 {
        let n = (self.n + 1) as f64;
        let ss = self.ss + dot(x, x);
        let mut c2 = 0.0;
        for (l, xi) in self.ls.iter().zip(x) {
            let c = (l + xi) / n;
            c2 += c * c;
        }
        (ss / n - c2).max(0.0).sqrt()
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(Vec<Cf>),
    Internal(Vec<(Cf, usize)>),
}

/// Height-balanced CF-tree with leaf entries of bounded radius.
#[derive(Debug, Clone)]
pub struct CfTree {
    threshold: f64,
    branching: usize,
    dim: usize,
    nodes: Vec<Node>,
    root: usize,
}

impl CfTree {
    pub fn new(dim: usize, threshold: f64, branching: usize) -> Self {
        CfTree {
            threshold,
            branching,
            dim,
            nodes: vec![Node::Leaf(Vec::new())],
            root: 0,
        }
    }

    pub fn insert(&mut self, x: &[f64]) {
        if let Some((cf_a, cf_b, sibling)) = self.insert_at(self.root, x) {
            let old = self.root;
            self.nodes
                .push(Node::Internal(vec![(cf_a, old), (cf_b, sibling)]));
            self.root = self.nodes.len() - 1;
        }
    }

    /// Inserts below `idx`. On overflow the node is split in two and the
    /// CFs of both halves plus the new sibling index are returned.
    fn insert_at(&mut self, idx: usize, x: &[f64]) -> Option<(Cf, Cf, usize)> {
        let overflow = match &mut self.nodes[idx] {
            Node::Leaf(entries) => {
                let best = closest(entries.iter(), x);
                match best {
                    Some(j) if entries[j].radius_with(x) <= self.threshold => {
                        entries[j].add_point(x);
                    }
                    _ => entries.push(Cf::point(x)),
                }
                entries.len() > self.branching
            }
            Node::Internal(children) => {
                let j = closest(children.iter().map(|(cf, _)| cf), x)
                    .expect("internal node has children");
                let child = children[j].1;
                match self.insert_at(child, x) {
                    None => {
                        if let Node::Internal(children) = &mut self.nodes[idx] {
                            children[j].0.add_point(x);
                        }
                    }
                    Some((cf_a, cf_b, sibling)) => {
                        if let Node::Internal(children) = &mut self.nodes[idx] {
                            children[j].0 = cf_a;
                            children.push((cf_b, sibling));
                        }
                    }
                }
                match &self.nodes[idx] {
                    Node::Internal(c) => c.len() > self.branching,
                    Node::Leaf(_) => unreachable!(),
                }
            }
        };
        overflow.then(|| self.split(idx))
    }

    fn split(&mut self, idx: usize) -> (Cf, Cf, usize) {
        let node = std::mem::replace(&mut self.nodes[idx], Node::Leaf(Vec::new()));
        let (left, right) = match node {
            Node::Leaf(entries) => {
                let (l, r) = partition_farthest(entries, |e| e);
                (Node::Leaf(l), Node::Leaf(r))
            }
            Node::Internal(children) => {
                let (l, r) = partition_farthest(children, |c| &c.0);
                (Node::Internal(l), Node::Internal(r))
            }
        };
        let (cf_l, cf_r) = (self.summary(&left), self.summary(&right));
        self.nodes[idx] = left;
        self.nodes.push(right);
        (cf_l, cf_r, self.nodes.len() - 1)
    }

    fn summary(&self, node: &Node) -> Cf {
        let mut s = Cf::empty(self.dim);
        match node {
            Node::Leaf(e) => e.iter().for_each(|c| s.add(c)),
            Node::Internal(c) => c.iter().for_each(|(cf, _)| s.add(cf)),
        }
        s
    }

    /// Leaf entries in tree order.
    pub fn leaf_entries(&self) -> Vec<&Cf> {
        let mut out = Vec::new();
        self.collect(self.root, &mut out);
        out
    }

    fn collect<'a>(&'a self, idx: usize, out: &mut Vec<&'a Cf>) {
        match &self.nodes[idx] {
            Node::Leaf(e) => out.extend(e.iter()),
            Node::Internal(c) => c.iter().for_each(|(_, i)| self.collect(*i, out)),
        }
    }

    /// Checks that every stored child CF equals the sum over that child's
    /// contents and that no leaf entry exceeds the threshold radius.
    pub fn check_consistency(&self, tol: f64) -> Result<()> {
        self.check_node(self.root, tol).map(|_| ())
    }

    fn check_node(&self, idx: usize, tol: f64) -> Result<Cf> {
        let bad = |m: String| Err(Error::Cluster(m));
        match &self.nodes[idx] {
            Node::Leaf(entries) => {
                for e in entries {
                    let c = e.centroid();
                    let r2 = e.ss / e.n as f64 - dot(&c, &c);
                    if r2.max(0.0).sqrt() > self.threshold + tol {
                        return bad(format!("leaf entry radius {} above threshold", r2.sqrt()));
                    }
                }
                Ok(self.summary(&self.nodes[idx]))
            }
            Node::Internal(children) => {
                let mut total = Cf::empty(self.dim);
                for (cf, child) in children {
                    let actual = self.check_node(*child, tol)?;
                    if actual.n != cf.n
                        || (actual.ss - cf.ss).abs() > tol
                        || actual
                            .ls
                            .iter()
                            .zip(&cf.ls)
                            .any(|(a, b)| (a - b).abs() > tol)
                    {
                        return bad(format!("node {child}: stored CF differs from its contents"));
                    }
                    total.add(cf);
                }
                Ok(total)
            }
        }
    }
}

fn closest<'a>(cfs: impl Iterator<Item = &'a Cf>, x: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, cf) in cfs.enumerate() {
        let d = cf.dist2(x);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((j, d));
        }
    }
    best.map(|(j, _)| j)
}

/// Splits around the farthest pair of entries; each entry joins the closer
/// seed (ties to the first).
fn partition_farthest<T>(items: Vec<T>, cf: impl Fn(&T) -> &Cf) -> (Vec<T>, Vec<T>) {
    let mut far = (0, 1, -1.0);
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            let d = cf(&items[i]).dist2_cf(cf(&items[j]));
            if d > far.2 {
                far = (i, j, d);
            }
        }
    }
    let (si, sj) = (far.0, far.1);
    let (ci, cj) = (cf(&items[si]).clone(), cf(&items[sj]).clone());
    let mut left = Vec::new();
    let mut right = Vec::new();
    for (k, it) in items.into_iter().enumerate() {
        let go_left = if k == si {
            true
        } else if k == sj {
            false
        } else {
            cf(&it).dist2_cf(&ci) <= cf(&it).dist2_cf(&cj)
        };
        if go_left {
            left.push(it);
        } else {
            right.push(it);
        }
    }
    (left, right)
}

/// Single linkage over `points` (row-major `m × dim`): minimum spanning tree
/// by Prim on squared distances, then the `k − 1` heaviest edges are cut.
/// Components are numbered by their smallest member index.
pub fn single_linkage(points: &[f64], m: usize, dim: usize, k: usize) -> Vec<usize> {
    let mut gram = vec![0.0; m * m];
    mm_nt(m, dim, m, points, points, &mut gram, false);
    let d2 =
        |i: usize, j: usize| (gram[i * m + i] + gram[j * m + j] - 2.0 * gram[i * m + j]).max(0.0);
    let mut in_tree = vec![false; m];
    let mut best = vec![f64::INFINITY; m];
    let mut parent = vec![usize::MAX; m];
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(m.saturating_sub(1));
    best[0] = 0.0;
    for _ in 0..m {
        let mut u = usize::MAX;
        for v in 0..m {
            if !in_tree[v] && (u == usize::MAX || best[v] < best[u]) {
                u = v;
            }
        }
        in_tree[u] = true;
        if parent[u] != usize::MAX {
            edges.push((best[u], parent[u], u));
        }
        for v in 0..m {
            if !in_tree[v] {
                let d = d2(u, v);
                if d < best[v] {
                    best[v] = d;
                    parent[v] = u;
                }
            }
        }
    }
    // keep the m − k lightest edges (stable on ties)
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by(|&a, &b| edges[a].0.total_cmp(&edges[b].0).then(a.cmp(&b)));
    let mut uf: Vec<usize> = (0..m).collect();
    fn find(uf: &mut [usize], mut x: usize) -> usize {
        while uf[x] != x {
            uf[x] = uf[uf[x]];
            x = uf[x];
        }
        x
    }
    for &e in order.iter().take(m.saturating_sub(k)) {
        let (_, a, b) = edges[e];
        let (ra, rb) = (find(&mut uf, a), find(&mut uf, b));
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        uf[hi] = lo;
    }
    let mut label_of_root = BTreeMap::new();
    (0..m)
        .map(|i| {
            let r = find(&mut uf, i);
            let next = label_of_root.len();
            *label_of_root.entry(r).or_insert(next)
        })
        .collect()
}

/// Ward agglomeration of `m` weighted points down to `k` groups. Squared
/// distances between group centroids are updated in place after each
/// merge; the cheapest merge costs n_a n_b / (n_a + n_b) d. Ties merge the
/// lowest index pair; groups are numbered by their smallest member.
pub fn ward_linkage(points: &[f64], weights: &[f64], m: usize, dim: usize, k: usize) -> Vec<usize> {
    let mut gram = vec![0.0; m * m];
    mm_nt(m, dim, m, points, points, &mut gram, false);
    let mut d = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            d[i * m + j] = (gram[i * m + i] + gram[j * m + j] - 2.0 * gram[i * m + j]).max(0.0);
        }
    }
    let mut n = weights.to_vec();
    let mut alive = vec![true; m];
    let mut root: Vec<usize> = (0..m).collect();
    for _ in 0..m.saturating_sub(k) {
        let mut best = (f64::INFINITY, 0, 0);
        for i in (0..m).filter(|&i| alive[i]) {
            for j in (i + 1..m).filter(|&j| alive[j]) {
                let cost = n[i] * n[j] / (n[i] + n[j]) * d[i * m + j];
                if cost < best.0 {
                    best = (cost, i, j);
                }
            }
        }
        let (_, i, j) = best;
        for q in (0..m).filter(|&q| alive[q] && q != i && q != j) {
            let nij = n[i] + n[j];
            let v = (n[i] * d[q * m + i] + n[j] * d[q * m + j]) / nij
                - n[i] * n[j] * d[i * m + j] / (nij * nij);
            d[q * m + i] = v;
            d[i * m + q] = v;
        }
        n[i] += n[j];
        alive[j] = false;
        root.iter_mut().filter(|r| **r == j).for_each(|r| *r = i);
    }
    let mut label_of_root = BTreeMap::new();
    root.iter()
        .map(|&r| {
            let next = label_of_root.len();
            *label_of_root.entry(r).or_insert(next)
        })
        .collect()
}

fn unit(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = norm(&v);
    if !(n >= 1e-12) {
        return Err(Error::ZeroDirection);
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// Index of the centroid with the largest inner product (nearest on the
/// sphere); ties go to the lowest index.
fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let s = dot(x, mu);
        if s > best.1 {
            best = (c, s);
        }
    }
    best.0
}

/// Clusters the rows listed in `rows`; returns a label in `0..C` for each.
fn fit_subset(
    data: &[f64],
    dim: usize,
    rows: &[usize],
    sample_cap: usize,
    params: &BirchParams,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    params.validate()?;
    if rows.len() < params.k {
        return Err(Error::Cluster(format!(
            "{} points cannot form {} clusters",
            rows.len(),
            params.k
        )));
    }
    let mut sample: Vec<usize> = rows.to_vec();
    sample.shuffle(&mut rng_for(seed, &[TAG_SAMPLE]));
    sample.truncate(sample_cap.max(params.k));

    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut tree = CfTree::new(dim, params.threshold, params.branching);
    for &i in &sample {
        tree.insert(row(i));
    }
    let entries = tree.leaf_entries();
    if entries.len() < params.k {
        return Err(Error::Cluster(format!(
            "features collapse to {} subcluster(s); cannot form {}",
            entries.len(),
            params.k
        )));
    }
    let flat: Vec<f64> = entries.iter().flat_map(|e| e.centroid()).collect();
    let groups = match params.linkage {
        Linkage::Single => single_linkage(&flat, entries.len(), dim, params.k),
        Linkage::Ward => {
            let w: Vec<f64> = entries.iter().map(|e| e.n as f64).collect();
            ward_linkage(&flat, &w, entries.len(), dim, params.k)
        }
    };
    let mut sums = vec![Cf::empty(dim); params.k];
    for (e, g) in entries.iter().zip(&groups) {
        sums[*g].add(e);
    }
    let centroids: Vec<Vec<f64>> = sums
        .iter()
        .map(|s| unit(s.ls.clone()))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = rows
        .par_iter()
        .map(|&i| nearest(row(i), &centroids))
        .collect();
    Ok((compact(&labels), sample))
}

/// Renumbers labels to `0..C` keeping their relative order and dropping
/// values that never occur.
fn compact(labels: &[usize]) -> Vec<usize> {
    let present: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    let map: BTreeMap<usize, usize> = present
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l, i))
        .collect();
    labels.iter().map(|l| map[l]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    /// One-based cluster number before the split.
    pub cluster: usize,
    pub size: usize,
    pub sizes: Vec<usize>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebalanceStep {
    pub iteration: usize,
    pub min_size: usize,
    pub target_k: usize,
    pub splits: Vec<SplitRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub ids: Vec<String>,
    /// Zero-based cluster index per instance; files use `index + 1`.
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub k_initial: usize,
    pub history: Vec<RebalanceStep>,
    pub sample_ids: Vec<String>,
}

impl ClusterModel {
    pub fn n_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_clusters()];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }

    pub fn members(&self, c: usize) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i] == c)
            .collect()
    }

    pub fn label_of(&self, id: &str) -> Option<usize> {
        self.ids
            .iter()
            .position(|x| x == id)
            .map(|i| self.labels[i])
    }

    /// `assignments.csv`, `centroids.bin` (C × d, LE f64), `history.log`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut csv = String::from("id,cluster\n");
        for (id, l) in self.ids.iter().zip(&self.labels) {
            let _ = writeln!(csv, "{id},{}", l + 1);
        }
        write(&dir.join("assignments.csv"), csv.as_bytes())?;
        let d = self.centroids.first().map_or(0, Vec::len);
        let mut bin = Vec::with_capacity(8 * d * self.n_clusters() + 16);
        bin.extend_from_slice(&(self.n_clusters() as u64).to_le_bytes());
        bin.extend_from_slice(&(d as u64).to_le_bytes());
        for c in &self.centroids {
            c.iter()
                .for_each(|v| bin.extend_from_slice(&v.to_le_bytes()));
        }
        write(&dir.join("centroids.bin"), &bin)?;
        let log = serde_json::json!({
            "k_initial": self.k_initial,
            "sizes": self.sizes(),
            "history": self.history,
            "sample_ids": self.sample_ids,
        });
        write(
            &dir.join("history.log"),
            (serde_json::to_string_pretty(&log).unwrap() + "\n").as_bytes(),
        )
    }

    pub fn load(dir: &Path) -> Result<ClusterModel> {
        let p = dir.join("assignments.csv");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            let (id, c) = line.rsplit_once(',').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: "expected id,cluster".into(),
            })?;
            let c: usize = c.parse().map_err(|_| Error::Parse {
                line: n + 1,
                message: format!("bad cluster number {c:?}"),
            })?;
            ids.push(id.to_string());
            labels.push(c.checked_sub(1).ok_or_else(|| Error::Parse {
                line: n + 1,
                message: "cluster numbers start at 1".into(),
            })?);
        }
        let centroids = read_centroids(&dir.join("centroids.bin"))?;
        let p = dir.join("history.log");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let log: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Cluster(e.to_string()))?;
        let history = serde_json::from_value(log["history"].clone())
            .map_err(|e| Error::Cluster(e.to_string()))?;
        let sample_ids = serde_json::from_value(log["sample_ids"].clone())
            .map_err(|e| Error::Cluster(e.to_string()))?;
        Ok(ClusterModel {
            ids,
            labels,
            centroids,
            k_initial: log["k_initial"].as_u64().unwrap_or(DEFAULT_K as u64) as usize,
            history,
            sample_ids,
        })
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_centroids(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::Cluster("centroid file too short".into()));
    }
    let c = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 8 * c * d {
        return Err(Error::Dimension {
            expected: 16 + 8 * c * d,
            actual: bytes.len(),
        });
    }
    let vals: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(vals.chunks(d.max(1)).take(c).map(<[f64]>::to_vec).collect())
}

/// CF-tree on a seeded sample of at most `sample_cap` rows, linkage of the
/// leaf entries down to `K`, then every row to its nearest cluster.
pub fn birch_fit(
    features: &FeatureMatrix,
    sample_cap: usize,
    params: &BirchParams,
    seed: u64,
) -> Result<ClusterModel> {
    let rows: Vec<usize> = (0..features.len()).collect();
    let (labels, sample) = fit_subset(
        &features.data,
        features.d_proj,
        &rows,
        sample_cap,
        params,
        seed,
    )?;
    let centroids = centroids(features, &labels)?;
    Ok(ClusterModel {
        ids: features.ids.clone(),
        labels,
        centroids,
        k_initial: params.k,
        history: Vec::new(),
        sample_ids: sample.iter().map(|&i| features.ids[i].clone()).collect(),
    })
}

/// Splits clusters larger than `ratio × smallest`; iteration `i` targets
/// `max(2, K_initial − i)` sub-clusters. A cluster whose members cannot be
/// split is left whole and the reason recorded.
pub fn rebalance(
    model: &ClusterModel,
    features: &FeatureMatrix,
    max_iter: usize,
    ratio: f64,
    params: &BirchParams,
    sample_cap: usize,
    seed: u64,
) -> Result<ClusterModel> {
    let mut labels = model.labels.clone();
    let mut history = Vec::new();
    for it in 1..=max_iter {
        let c = labels.iter().max().map_or(0, |m| m + 1);
        let mut sizes = vec![0usize; c];
        labels.iter().for_each(|&l| sizes[l] += 1);
        let min = *sizes.iter().min().unwrap_or(&0);
        let over: Vec<usize> = (0..c)
            .filter(|&j| sizes[j] as f64 > ratio * min as f64)
            .collect();
        if over.is_empty() {
            break;
        }
        let target = model.k_initial.saturating_sub(it).max(2);
        let sub_params = BirchParams {
            k: target,
            ..*params
        };
        let mut step = RebalanceStep {
            iteration: it,
            min_size: min,
            target_k: target,
            splits: Vec::new(),
        };
        // new label = (old cluster, sub-cluster) pairs, numbered in order
        let mut pieces: Vec<Vec<usize>> = (0..c).map(|_| vec![0]).collect();
        let mut sub_labels: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &j in &over {
            let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == j).collect();
            let s = derive_seed(seed, &[it as u64, j as u64]);
            match split_cluster(
                &features.data,
                features.d_proj,
                &members,
                sample_cap,
                &sub_params,
                s,
            ) {
                Ok((sub, note)) => {
                    let k = sub.iter().max().unwrap() + 1;
                    let mut sz = vec![0; k];
                    sub.iter().for_each(|&l| sz[l] += 1);
                    step.splits.push(SplitRecord {
                        cluster: j + 1,
                        size: members.len(),
                        sizes: sz,
                        note,
                    });
                    pieces[j] = (0..k).collect();
                    for (m, l) in members.iter().zip(sub) {
                        sub_labels.entry(*m).or_default().push(l);
                    }
                }
                Err(e) => step.splits.push(SplitRecord {
                    cluster: j + 1,
                    size: members.len(),
                    sizes: vec![members.len()],
                    note: Some(format!("left whole: {e}")),
                }),
            }
        }
        let mut offset = vec![0; c];
        let mut next = 0;
        for j in 0..c {
            offset[j] = next;
            next += pieces[j].len();
        }
        for (i, l) in labels.iter_mut().enumerate() {
            let sub = sub_labels.get(&i).map_or(0, |v| v[0]);
            *l = offset[*l] + sub;
        }
        let changed = step.splits.iter().any(|s| s.sizes.len() > 1);
        history.push(step);
        if !changed {
            break;
        }
    }
    let centroids = centroids(features, &labels)?;
    Ok(ClusterModel {
        ids: model.ids.clone(),
        labels,
        centroids,
        k_initial: model.k_initial,
        history,
        sample_ids: model.sample_ids.clone(),
    })
}

/// Sub-clustering for one oversized cluster. When the members collapse to
/// fewer CF entries than the target, the absorption threshold is halved a
/// few times before giving up.
fn split_cluster(
    data: &[f64],
    dim: usize,
    members: &[usize],
    sample_cap: usize,
    params: &BirchParams,
    seed: u64,
) -> Result<(Vec<usize>, Option<String>)> {
    let mut p = *params;
    let mut last = None;
    for attempt in 0..4 {
        match fit_subset(data, dim, members, sample_cap, &p, seed) {
            Ok((labels, _)) => {
                let note = (attempt > 0).then(|| format!("threshold lowered to {}", p.threshold));
                return Ok((labels, note));
            }
            Err(e) => last = Some(e),
        }
        p.threshold /= 2.0;
    }
    Err(last.unwrap())
}

/// `δ̄_c = mean / ‖mean‖` of each cluster's rows; labels must cover `0..C`.
pub fn centroids(features: &FeatureMatrix, labels: &[usize]) -> Result<Vec<Vec<f64>>> {
    if labels.len() != features.len() {
        return Err(Error::Dimension {
            expected: features.len(),
            actual: labels.len(),
        });
    }
    let c = labels.iter().max().map_or(0, |m| m + 1);
    let d = features.d_proj;
    let mut sums = vec![vec![0.0; d]; c];
    let mut counts = vec![0usize; c];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        sums[l]
            .iter_mut()
            .zip(features.row(i))
            .for_each(|(a, b)| *a += b);
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(j, (s, n))| {
            if n == 0 {
                return Err(Error::Cluster(format!("cluster {} is empty", j + 1)));
            }
            let mean: Vec<f64> = s.iter().map(|v| v / n as f64).collect();
            unit(mean)
                .map_err(|_| Error::Cluster(format!("cluster {} has a zero-norm mean", j + 1)))
        })
        .collect()
}

/// Counts per cluster (rows) and source tag (columns, sorted), plus totals.
pub fn cluster_report(model: &ClusterModel, tags: &BTreeMap<String, String>) -> Result<String> {
    let table = report_counts(model, tags)?;
    let names: Vec<&String> = table
        .first()
        .map(|r| r.keys().collect())
        .unwrap_or_default();
    let mut out = String::from("cluster");
    for n in &names {
        let _ = write!(out, ",{n}");
    }
    out.push_str(",total\n");
    for (c, row) in table.iter().enumerate() {
        let _ = write!(out, "{}", c + 1);
        for n in &names {
            let _ = write!(out, ",{}", row[*n]);
        }
        let _ = writeln!(out, ",{}", row.values().sum::<usize>());
    }
    Ok(out)
}

/// Per-cluster tag counts over every tag that occurs anywhere.
pub fn report_counts(
    model: &ClusterModel,
    tags: &BTreeMap<String, String>,
) -> Result<Vec<BTreeMap<String, usize>>> {
    let all: std::collections::BTreeSet<&String> = model
        .ids
        .iter()
        .map(|id| {
            tags.get(id)
                .ok_or_else(|| Error::Cluster(format!("no source tag for {id}")))
        })
        .collect::<Result<_>>()?;
    let empty: BTreeMap<String, usize> = all.iter().map(|t| ((*t).clone(), 0)).collect();
    let mut table = vec![empty; model.n_clusters()];
    for (id, &l) in model.ids.iter().zip(&model.labels) {
        *table[l].get_mut(&tags[id]).unwrap() += 1;
    }
    Ok(table)
}

/// Largest single-tag share in each cluster.
pub fn dominant_shares(model: &ClusterModel, tags: &BTreeMap<String, String>) -> Result<Vec<f64>> {
    Ok(report_counts(model, tags)?
        .iter()
        .map(|row| {
            let total: usize = row.values().sum();
            *row.values().max().unwrap_or(&0) as f64 / total.max(1) as f64
        })
        .collect())
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut ra: BTreeMap<usize, u64> = BTreeMap::new();
    let mut rb: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let c2 = |n: u64| (n * n.saturating_sub(1) / 2) as f64;
    let index: f64 = table.values().map(|&n| c2(n)).sum();
    let sa: f64 = ra.values().map(|&n| c2(n)).sum();
    let sb: f64 = rb.values().map(|&n| c2(n)).sum();
    let total = c2(a.len() as u64);
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if (max - expected).abs() < f64::EPSILON {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
