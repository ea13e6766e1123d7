//! Expert weights from cosine similarity between a test direction and the
//! cluster centroids.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradfeat::FeatureMatrix;
use crate::model::linalg::{dot, softmax_in_place};

/// Below this spread the standardization is undefined and weights go uniform.
pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingWeights {
    /// `w_c`, one per cluster.
    pub cluster: Vec<f64>,
    pub base: f64,
    pub cosines: Vec<f64>,
    pub standardized: Vec<f64>,
}

impl RoutingWeights {
    /// Only the base adapter contributes.
    pub fn base_only(c: usize) -> Self {
        RoutingWeights {
            cluster: vec![0.0; c],
            base: 1.0,
            cosines: Vec::new(),
            standardized: Vec::new(),
        }
    }

    /// Fallback for instances without a usable direction: uniform cluster
    /// weights next to a full base weight.
    pub fn featureless(c: usize) -> Self {
        RoutingWeights {
            cluster: vec![1.0 / c.max(1) as f64; c],
            base: 1.0,
            cosines: Vec::new(),
            standardized: Vec::new(),
        }
    }

    /// `[w_base, w_1, …, w_C]`, the order adapters are listed in.
    pub fn as_vec(&self) -> Vec<f64> {
        std::iter::once(self.base)
            .chain(self.cluster.iter().copied())
            .collect()
    }

    pub fn max_cosine(&self) -> Option<f64> {
        self.cosines.iter().copied().reduce(f64::max)
    }

    /// Keeps the `k` largest cluster weights (ties to the lower index),
    /// renormalized to sum 1; the base weight is untouched.
    pub fn top_k(&self, k: usize) -> RoutingWeights {
        if k >= self.cluster.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.cluster.len()).collect();
        idx.sort_by(|&a, &b| self.cluster[b].total_cmp(&self.cluster[a]).then(a.cmp(&b)));
        let mut out = self.clone();
        out.cluster.iter_mut().for_each(|w| *w = 0.0);
        let kept: f64 = idx[..k].iter().map(|&i| self.cluster[i]).sum();
        for &i in &idx[..k] {
            out.cluster[i] = if kept > 0.0 {
                self.cluster[i] / kept
            } else {
                1.0 / k as f64
            };
        }
        out
    }
}

/// `(z, softmax(z))` with `z` the cosines standardized by their mean and
/// population standard deviation. A spread below [`SIGMA_FLOOR`] gives
/// `z = 0` and uniform weights.
pub fn standardize_softmax(cosines: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = cosines.len() as f64;
    let mu = cosines.iter().sum::<f64>() / n;
    let sigma = (cosines.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n).sqrt();
    if sigma < SIGMA_FLOOR {
        return (vec![0.0; cosines.len()], vec![1.0 / n; cosines.len()]);
    }
    let z: Vec<f64> = cosines.iter().map(|x| (x - mu) / sigma).collect();
    let mut w = z.clone();
    softmax_in_place(&mut w);
    (z, w)
}

/// Softmax over the standardized cosines; `w_base = 1 − max cos`.
pub fn route(delta: &[f64], centroids: &[Vec<f64>]) -> Result<RoutingWeights> {
    if centroids.is_empty() {
        return Ok(RoutingWeights::base_only(0));
    }
    let mut cosines = Vec::with_capacity(centroids.len());
    for c in centroids {
        if c.len() != delta.len() {
            return Err(Error::Dimension {
                expected: delta.len(),
                actual: c.len(),
            });
        }
        cosines.push(dot(delta, c).clamp(-1.0, 1.0));
    }
    let max = cosines.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (standardized, cluster) = standardize_softmax(&cosines);
    Ok(RoutingWeights {
        cluster,
        base: 1.0 - max,
        cosines,
        standardized,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutedInstance {
    pub id: String,
    pub weights: RoutingWeights,
    /// Why the instance fell back, if it did.
    pub note: Option<String>,
}

/// Routes every row of `features`; ids listed in `features.excluded` get the
/// featureless fallback. Output order: feature rows, then excluded ids.
pub fn route_batch(features: &FeatureMatrix, centroids: &[Vec<f64>]) -> Vec<RoutedInstance> {
    let c = centroids.len();
    let mut out: Vec<RoutedInstance> = (0..features.len())
        .map(|i| match route(features.row(i), centroids) {
            Ok(w) => RoutedInstance {
                id: features.ids[i].clone(),
                weights: w,
                note: None,
            },
            Err(e) => RoutedInstance {
                id: features.ids[i].clone(),
                weights: RoutingWeights::featureless(c),
                note: Some(e.to_string()),
            },
        })
        .collect();
    out.extend(features.excluded.iter().map(|(id, why)| RoutedInstance {
        id: id.clone(),
        weights: RoutingWeights::featureless(c),
        note: Some(why.clone()),
    }));
    out
}

/// `id, w_1..w_C, w_base, max_cos, note` rows.
pub fn routing_csv(routed: &[RoutedInstance], c: usize) -> String {
    let mut out = String::from("id");
    for j in 1..=c {
        let _ = write!(out, ",w_{j}");
    }
    out.push_str(",w_base,max_cos,note\n");
    for r in routed {
        out.push_str(&r.id);
        for w in &r.weights.cluster {
            let _ = write!(out, ",{w:.12}");
        }
        let mc = r
            .weights
            .max_cosine()
            .map_or(String::new(), |m| format!("{m:.12}"));
        let note = r.note.as_deref().unwrap_or("").replace([',', '\n'], ";");
        let _ = writeln!(out, ",{:.12},{mc},{note}", r.weights.base);
    }
    out
}

/// Mean weight per cluster (and for the base adapter) over all instances.
pub fn mean_weights(routed: &[RoutedInstance], c: usize) -> (Vec<f64>, f64) {
    let n = routed.len().max(1) as f64;
    let mut m = vec![0.0; c];
    let mut base = 0.0;
    for r in routed {
        m.iter_mut()
            .zip(&r.weights.cluster)
            .for_each(|(a, b)| *a += b / n);
        base += r.weights.base / n;
    }
    (m, base)
}

pub fn summary_csv(routed: &[RoutedInstance], c: usize) -> String {
    let (m, base) = mean_weights(routed, c);
    let mut out = String::from("adapter,mean_weight\n");
    for (j, w) in m.iter().enumerate() {
        let _ = writeln!(out, "{},{w:.12}", j + 1);
    }
    let _ = writeln!(out, "base,{base:.12}");
    out
}
