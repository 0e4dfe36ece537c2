//! Candidate scoring and pruning: size filter, score-ordered NMS, score
//! filter, then point ownership among the survivors.

use std::cmp::Ordering;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::{instance_iou, iou_from_counts, membership, IndexSet, InstanceCandidate, InstanceId, Labeling};
use crate::sampling::Block;

/// Scores the candidates of one block with their expected best IoU against
/// any true object.
pub trait Scorer: Sync {
    fn score_block(&self, block: &Block, candidates: &[InstanceCandidate]) -> Result<Vec<f64>>;
}

/// Max IoU of `candidate` over `gt`; 0 when `gt` is empty.
pub fn oracle_score(candidate: &IndexSet, gt: &[IndexSet]) -> Result<f64> {
    gt.iter()
        .map(|g| instance_iou(candidate, g))
        .try_fold(0.0, |best, iou| Ok(f64::max(best, iou?)))
}

/// Max IoU of candidate `index` with any candidate of a different origin, or
/// 1 when every candidate shares its origin.
pub fn consensus_score(index: usize, candidates: &[InstanceCandidate]) -> Result<f64> {
    let me = candidates
        .get(index)
        .ok_or_else(|| Error::invalid("candidate index out of range"))?;
    let others: Vec<&InstanceCandidate> = candidates.iter().filter(|c| c.origin() != me.origin()).collect();
    if others.is_empty() {
        return Ok(1.0);
    }
    others
        .iter()
        .map(|c| instance_iou(me.points(), c.points()))
        .try_fold(0.0, |best, iou| Ok(f64::max(best, iou?)))
}

/// Scores candidates by their best IoU with a whole ground-truth instance,
/// so fragments of objects cut by the block boundary score low.
#[derive(Debug, Clone)]
pub struct OracleScorer {
    instance: Vec<InstanceId>,
    size: HashMap<InstanceId, usize>,
}

impl OracleScorer {
    /// `gt` labels the cloud the blocks index into.
    pub fn new(gt: &Labeling) -> Self {
        let mut size: HashMap<InstanceId, usize> = HashMap::new();
        for &ins in gt.instance() {
            if ins >= 0 {
                *size.entry(ins).or_default() += 1;
            }
        }
        Self {
            instance: gt.instance().to_vec(),
            size,
        }
    }
}

impl Scorer for OracleScorer {
    fn score_block(&self, block: &Block, candidates: &[InstanceCandidate]) -> Result<Vec<f64>> {
        let ids = block.global_ids();
        if ids.as_slice().last().is_some_and(|&i| i >= self.instance.len()) {
            return Err(Error::contract("block points lack ground-truth labels"));
        }
        candidates
            .iter()
            .map(|c| {
                if !c.points().is_subset(ids) {
                    return Err(Error::contract("candidate reaches outside its block"));
                }
                let mut inter: HashMap<InstanceId, usize> = HashMap::new();
                for p in c.points().iter() {
                    let ins = self.instance[p];
                    if ins >= 0 {
                        *inter.entry(ins).or_default() += 1;
                    }
                }
                Ok(inter
                    .iter()
                    .map(|(ins, &n)| iou_from_counts(n, c.len(), self.size[ins]))
                    .fold(0.0, f64::max))
            })
            .collect()
    }
}

/// Agreement between generators as a label-free score.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConsensusScorer;

impl ConsensusScorer {
    pub fn scores(candidates: &[InstanceCandidate]) -> Vec<f64> {
        let first_origin = candidates.first().map(|c| c.origin());
        if candidates.iter().all(|c| Some(c.origin()) == first_origin) {
            return vec![1.0; candidates.len()];
        }
        let members = membership(candidates.iter().map(|c| c.points()));
        candidates
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let mut inter: HashMap<usize, usize> = HashMap::new();
                for p in c.points().iter() {
                    for &j in &members[&p] {
                        if candidates[j].origin() != c.origin() {
                            *inter.entry(j).or_default() += 1;
                        }
                    }
                }
                debug_assert!(!inter.contains_key(&k));
                inter
                    .iter()
                    .map(|(&j, &n)| iou_from_counts(n, c.len(), candidates[j].len()))
                    .fold(0.0, f64::max)
            })
            .collect()
    }
}

impl Scorer for ConsensusScorer {
    fn score_block(&self, _block: &Block, candidates: &[InstanceCandidate]) -> Result<Vec<f64>> {
        Ok(Self::scores(candidates))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneParams {
    pub min_size: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for PruneParams {
    fn default() -> Self {
        Self {
            min_size: 10,
            score_threshold: 0.6,
            nms_iou: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PruneCounts {
    pub input: usize,
    pub after_size: usize,
    pub after_nms: usize,
    pub after_score: usize,
}

impl std::ops::AddAssign for PruneCounts {
    fn add_assign(&mut self, o: Self) {
        self.input += o.input;
        self.after_size += o.after_size;
        self.after_nms += o.after_nms;
        self.after_score += o.after_score;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pruned {
    /// Survivors in decreasing priority.
    pub kept: Vec<InstanceCandidate>,
    /// Points each survivor owns after overlaps go to the higher priority;
    /// aligned with `kept`, possibly empty.
    pub owned: Vec<IndexSet>,
    pub counts: PruneCounts,
}

impl Pruned {
    /// Non-empty owned point sets with their candidates.
    pub fn instances(&self) -> impl Iterator<Item = (&InstanceCandidate, &IndexSet)> {
        self.kept.iter().zip(&self.owned).filter(|(_, o)| !o.is_empty())
    }
}

/// Score descending, then larger first, then lower first point id.
pub fn priority_order(a: &InstanceCandidate, b: &InstanceCandidate) -> Ordering {
    b.score()
        .total_cmp(&a.score())
        .then(b.len().cmp(&a.len()))
        .then(a.points().first().cmp(&b.points().first()))
}

pub fn prune(candidates: Vec<InstanceCandidate>, params: &PruneParams) -> Result<Pruned> {
    if !(0.0..=1.0).contains(&params.score_threshold) || !(0.0..=1.0).contains(&params.nms_iou) {
        return Err(Error::invalid("prune thresholds must lie in [0, 1]"));
    }
    let input = candidates.len();
    let mut pool: Vec<InstanceCandidate> = candidates.into_iter().filter(|c| c.len() >= params.min_size).collect();
    let after_size = pool.len();

    pool.sort_by(priority_order);
    let mut nms: Vec<InstanceCandidate> = Vec::new();
    for c in pool {
        let suppressed = nms
            .iter()
            .any(|k| iou_from_counts(c.points().intersection_len(k.points()), c.len(), k.len()) > params.nms_iou);
        if !suppressed {
            nms.push(c);
        }
    }
    let after_nms = nms.len();

    let kept: Vec<InstanceCandidate> = nms
        .into_iter()
        .filter(|c| c.score() >= params.score_threshold)
        .collect();
    let mut taken = std::collections::HashSet::new();
    let owned = kept
        .iter()
        .map(|c| IndexSet::new(c.points().iter().filter(|&p| taken.insert(p)).collect()))
        .collect();
    Ok(Pruned {
        counts: PruneCounts {
            input,
            after_size,
            after_nms,
            after_score: kept.len(),
        },
        kept,
        owned,
    })
}
