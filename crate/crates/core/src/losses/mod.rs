//! Training losses of the three network branches with analytic gradients.
//!
//! Gradients are flattened row-major in the layout of the differentiated
//! input: `N x C` logits, `N x 3` offsets or `N x 5` embeddings.

pub mod gradcheck;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::features::{Embedding, EMBEDDING_DIM};
use crate::model::{ClassId, InstanceId, UNASSIGNED};

/// Vectors at or below this norm are left out of the cosine term.
pub const COSINE_CUTOFF: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// Mean negative log-softmax of the labelled class, differentiated with
/// respect to the logits.
pub fn cross_entropy(logits: &[f64], num_classes: usize, labels: &[ClassId]) -> Result<LossValue> {
    if num_classes == 0 || logits.len() != labels.len() * num_classes {
        return Err(Error::invalid("logits must be N x C for N labels"));
    }
    if labels.is_empty() {
        return Err(Error::invalid("cross entropy needs at least one point"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= num_classes) {
        return Err(Error::invalid(format!("label {l} outside {num_classes} classes")));
    }
    let n = labels.len() as f64;
    let mut value = 0.0;
    let mut gradient = Vec::with_capacity(logits.len());
    for (row, &label) in logits.chunks(num_classes).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        value += lse - row[label as usize];
        for (c, z) in row.iter().enumerate() {
            let p = (z - lse).exp();
            gradient.push((p - if c == label as usize { 1.0 } else { 0.0 }) / n);
        }
    }
    Ok(LossValue {
        value: value / n,
        gradient,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetWeights {
    pub l1: f64,
    pub cosine: f64,
}

impl Default for OffsetWeights {
    fn default() -> Self {
        Self { l1: 1.0, cosine: 1.0 }
    }
}

fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// L1 endpoint distance averaged over all points plus cosine distance
/// averaged over points whose predicted and true offsets are both non-zero.
pub fn offset_loss(pred: &[[f64; 3]], gt: &[[f64; 3]], weights: OffsetWeights) -> Result<LossValue> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::invalid(
            "offset loss needs equally many, non-zero predictions and targets",
        ));
    }
    let n = pred.len() as f64;
    let valid: Vec<bool> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| norm3(p) > COSINE_CUTOFF && norm3(g) > COSINE_CUTOFF)
        .collect();
    let n_cos = valid.iter().filter(|&&v| v).count();

    let mut l1 = 0.0;
    let mut cos = 0.0;
    let mut gradient = vec![0.0; pred.len() * 3];
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        for a in 0..3 {
            let d = p[a] - g[a];
            l1 += d.abs();
            if d != 0.0 {
                gradient[3 * i + a] += weights.l1 * d.signum() / n;
            }
        }
        if valid[i] {
            let (np, ng) = (norm3(p), norm3(g));
            let dot = p[0] * g[0] + p[1] * g[1] + p[2] * g[2];
            cos += 1.0 - dot / (np * ng);
            for a in 0..3 {
                let d_cos = g[a] / (np * ng) - dot * p[a] / (np * np * np * ng);
                gradient[3 * i + a] -= weights.cosine * d_cos / n_cos as f64;
            }
        }
    }
    let cos_term = if n_cos > 0 { cos / n_cos as f64 } else { 0.0 };
    Ok(LossValue {
        value: weights.l1 * l1 / n + weights.cosine * cos_term,
        gradient,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminativeParams {
    pub delta_v: f64,
    pub delta_d: f64,
    pub var_weight: f64,
    pub dist_weight: f64,
    pub reg_weight: f64,
}

impl Default for DiscriminativeParams {
    fn default() -> Self {
        Self {
            delta_v: 0.5,
            delta_d: 1.5,
            var_weight: 1.0,
            dist_weight: 1.0,
            reg_weight: 0.001,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff(a: &Embedding, b: &Embedding) -> Embedding {
    std::array::from_fn(|d| a[d] - b[d])
}

/// Per-instance member lists and embedding means, instances in id order.
pub(crate) fn instance_means(emb: &[Embedding], ids: &[InstanceId]) -> (Vec<Vec<usize>>, Vec<Embedding>) {
    let mut members: BTreeMap<InstanceId, Vec<usize>> = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        if id != UNASSIGNED {
            members.entry(id).or_default().push(i);
        }
    }
    let members: Vec<Vec<usize>> = members.into_values().collect();
    let means = members
        .iter()
        .map(|m| {
            let mut mu = [0.0; EMBEDDING_DIM];
            for &i in m {
                for d in 0..EMBEDDING_DIM {
                    mu[d] += emb[i][d];
                }
            }
            mu.map(|s| s / m.len() as f64)
        })
        .collect();
    (members, means)
}

/// Pull-push-regularize loss on instance embeddings. Points labelled `-1`
/// do not take part and receive zero gradient.
pub fn discriminative_loss(emb: &[Embedding], ids: &[InstanceId], params: DiscriminativeParams) -> Result<LossValue> {
    if emb.len() != ids.len() {
        return Err(Error::invalid("embeddings and instance ids differ in length"));
    }
    let (members, means) = instance_means(emb, ids);
    let k = members.len();
    if k == 0 {
        return Err(Error::invalid("discriminative loss needs at least one instance"));
    }
    let kf = k as f64;
    let mut gradient = vec![0.0; emb.len() * EMBEDDING_DIM];
    // gradient of the loss with respect to each instance mean
    let mut d_mean = vec![[0.0; EMBEDDING_DIM]; k];

    let mut var = 0.0;
    for (c, m) in members.iter().enumerate() {
        let size = m.len() as f64;
        let coef = params.var_weight / (kf * size);
        for &i in m {
            let d = diff(&means[c], &emb[i]);
            let r = norm(&d);
            let h = r - params.delta_v;
            if h > 0.0 {
                var += h * h / size;
                for a in 0..EMBEDDING_DIM {
                    let g = coef * 2.0 * h * d[a] / r;
                    d_mean[c][a] += g;
                    gradient[i * EMBEDDING_DIM + a] -= g;
                }
            }
        }
    }
    var /= kf;

    let mut dist = 0.0;
    if k > 1 {
        let coef = params.dist_weight / (kf * (kf - 1.0));
        for a in 0..k {
            for b in 0..k {
                if a == b {
                    continue;
                }
                let d = diff(&means[a], &means[b]);
                let r = norm(&d);
                let h = 2.0 * params.delta_d - r;
                if h > 0.0 {
                    dist += h * h;
                    if r > 0.0 {
                        for x in 0..EMBEDDING_DIM {
                            let g = coef * 2.0 * h * d[x] / r;
                            d_mean[a][x] -= g;
                            d_mean[b][x] += g;
                        }
                    }
                }
            }
        }
        dist /= kf * (kf - 1.0);
    }

    let mut reg = 0.0;
    for (c, mu) in means.iter().enumerate() {
        let r = norm(mu);
        reg += r;
        if r > 0.0 {
            for a in 0..EMBEDDING_DIM {
                d_mean[c][a] += params.reg_weight / kf * mu[a] / r;
            }
        }
    }
    reg /= kf;

    for (c, m) in members.iter().enumerate() {
        let size = m.len() as f64;
        for &i in m {
            for a in 0..EMBEDDING_DIM {
                gradient[i * EMBEDDING_DIM + a] += d_mean[c][a] / size;
            }
        }
    }
    Ok(LossValue {
        value: params.var_weight * var + params.dist_weight * dist + params.reg_weight * reg,
        gradient,
    })
}
