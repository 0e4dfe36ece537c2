//! Central finite-difference checks of the analytic loss gradients on seeded
//! random inputs, skipping inputs near a hinge or norm kink.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    cross_entropy, discriminative_loss, instance_means, offset_loss, DiscriminativeParams, OffsetWeights, COSINE_CUTOFF,
};
use crate::error::Result;
use crate::features::{Embedding, EMBEDDING_DIM};
use crate::model::{ClassId, InstanceId};
use crate::rng::derived_rng;

pub const STEP: f64 = 1e-5;
/// Inputs with any kink activation closer than this are redrawn.
pub const KINK_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckResult {
    pub loss: &'static str,
    pub trials: usize,
    pub max_relative_error: f64,
}

pub fn numeric_gradient(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = n(analytic).max(n(numeric));
    if scale == 0.0 {
        0.0
    } else {
        n(&d) / scale
    }
}

fn to_rows<const D: usize>(flat: &[f64]) -> Vec<[f64; D]> {
    flat.chunks(D).map(|c| std::array::from_fn(|d| c[d])).collect()
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    let g = Normal::new(0.0, sigma).expect("positive sigma");
    (0..n).map(|_| g.sample(rng)).collect()
}

fn check_cross_entropy(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, c) = (8, 5);
    let logits = gaussian(rng, n * c, 2.0);
    let labels: Vec<ClassId> = (0..n).map(|_| rng.random_range(0..c as ClassId)).collect();
    let analytic = cross_entropy(&logits, c, &labels)?.gradient;
    let numeric = numeric_gradient(|x| Ok(cross_entropy(x, c, &labels)?.value), &logits, STEP)?;
    Ok(relative_error(&analytic, &numeric))
}

fn offset_near_kink(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> bool {
    pred.iter().zip(gt).any(|(p, g)| {
        let np = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        (0..3).any(|a| (p[a] - g[a]).abs() < KINK_MARGIN) || (np - COSINE_CUTOFF).abs() < KINK_MARGIN
    })
}

fn check_offset(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = 10;
    let (pred, gt) = loop {
        let pred = to_rows::<3>(&gaussian(rng, n * 3, 1.0));
        let mut gt = to_rows::<3>(&gaussian(rng, n * 3, 1.0));
        // points sitting on their centroid have a zero target
        gt[0] = [0.0; 3];
        if !offset_near_kink(&pred, &gt) {
            break (pred, gt);
        }
    };
    let w = OffsetWeights::default();
    let flat: Vec<f64> = pred.iter().flatten().copied().collect();
    let analytic = offset_loss(&pred, &gt, w)?.gradient;
    let numeric = numeric_gradient(|x| Ok(offset_loss(&to_rows::<3>(x), &gt, w)?.value), &flat, STEP)?;
    Ok(relative_error(&analytic, &numeric))
}

fn disc_near_kink(emb: &[Embedding], ids: &[InstanceId], p: &DiscriminativeParams) -> bool {
    let (members, means) = instance_means(emb, ids);
    let dist = |a: &Embedding, b: &Embedding| (0..EMBEDDING_DIM).map(|d| (a[d] - b[d]).powi(2)).sum::<f64>().sqrt();
    let zero = [0.0; EMBEDDING_DIM];
    members.iter().zip(&means).any(|(m, mu)| {
        dist(mu, &zero) < KINK_MARGIN || m.iter().any(|&i| (dist(mu, &emb[i]) - p.delta_v).abs() < KINK_MARGIN)
    }) || means.iter().enumerate().any(|(a, ma)| {
        means[..a]
            .iter()
            .any(|mb| (2.0 * p.delta_d - dist(ma, mb)).abs() < KINK_MARGIN || dist(ma, mb) < KINK_MARGIN)
    })
}

fn check_discriminative(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = 20;
    let p = DiscriminativeParams::default();
    let ids: Vec<InstanceId> = (0..n)
        .map(|i| if i % 7 == 6 { -1 } else { (i % 3) as InstanceId })
        .collect();
    let emb = loop {
        let mut emb = to_rows::<EMBEDDING_DIM>(&gaussian(rng, n * EMBEDDING_DIM, 0.8));
        for (e, &id) in emb.iter_mut().zip(&ids) {
            if id >= 0 {
                e[id as usize] += 1.0;
            }
        }
        if !disc_near_kink(&emb, &ids, &p) {
            break emb;
        }
    };
    let flat: Vec<f64> = emb.iter().flatten().copied().collect();
    let analytic = discriminative_loss(&emb, &ids, p)?.gradient;
    let numeric = numeric_gradient(
        |x| Ok(discriminative_loss(&to_rows::<EMBEDDING_DIM>(x), &ids, p)?.value),
        &flat,
        STEP,
    )?;
    Ok(relative_error(&analytic, &numeric))
}

/// Maximum relative gradient error of every loss over `trials` inputs.
pub fn run_gradchecks(seed: u64, trials: usize) -> Result<Vec<GradcheckResult>> {
    type Check = fn(&mut ChaCha8Rng) -> Result<f64>;
    let checks: [(&'static str, Check); 3] = [
        ("cross_entropy", check_cross_entropy),
        ("offset_loss", check_offset),
        ("discriminative_loss", check_discriminative),
    ];
    checks
        .iter()
        .enumerate()
        .map(|(k, (name, check))| {
            let mut rng = derived_rng(seed, &[100 + k as u64]);
            let mut worst: f64 = 0.0;
            for _ in 0..trials {
                worst = worst.max(check(&mut rng)?);
            }
            Ok(GradcheckResult {
                loss: name,
                trials,
                max_relative_error: worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_losses_pass() {
        for r in run_gradchecks(0, 20).unwrap() {
            assert!(r.max_relative_error < 1e-5, "{r:?}");
        }
    }

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
    }
}
