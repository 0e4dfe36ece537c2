//! Stitching per-block results into one labeling of the subsampled cloud,
//! and nearest-neighbour transfer back to the original points.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    iou_from_counts, ClassId, IndexSet, InstanceId, Labeling, PointCloud, SemanticTaxonomy, UNASSIGNED,
};
use crate::spatial::KdTree;

/// One block's semantic vote for one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticVote {
    pub point: usize,
    pub class_id: ClassId,
    pub confidence: f64,
}

/// Final instances and semantic votes of one block, in global ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BlockLabels {
    pub center: [f64; 2],
    pub instances: Vec<IndexSet>,
    pub votes: Vec<SemanticVote>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPanoptic {
    /// Instance label per point, from 1, or -1.
    pub instance: Vec<InstanceId>,
    /// Fused class per point; `None` where no block voted.
    pub semantic: Vec<Option<ClassId>>,
}

impl GlobalPanoptic {
    pub fn num_instances(&self) -> usize {
        self.instance.iter().copied().max().unwrap_or(0).max(0) as usize
    }
}

fn block_order(a: &BlockLabels, b: &BlockLabels) -> Ordering {
    a.center[0]
        .total_cmp(&b.center[0])
        .then(a.center[1].total_cmp(&b.center[1]))
}

fn instance_order(a: &IndexSet, b: &IndexSet) -> Ordering {
    b.len().cmp(&a.len()).then(a.first().cmp(&b.first()))
}

/// Greedy block merge over `num_points` subsampled points. Blocks run in
/// (x, y) order of their centres, instances in decreasing size. A partly
/// labelled instance joins the existing label of highest IoU above
/// `iou_threshold`; only unlabelled points are ever written.
pub fn block_merge(blocks: &[BlockLabels], num_points: usize, iou_threshold: f64) -> Result<GlobalPanoptic> {
    let mut order: Vec<&BlockLabels> = blocks.iter().collect();
    order.sort_by(|a, b| block_order(a, b));

    let mut label = vec![UNASSIGNED; num_points];
    // label_size[q] is the current extent of label q
    let mut label_size: Vec<usize> = vec![0];
    for block in &order {
        let mut instances: Vec<&IndexSet> = block.instances.iter().collect();
        instances.sort_by(|a, b| instance_order(a, b));
        for inst in instances {
            if inst.is_empty() {
                return Err(Error::contract("block instance without points"));
            }
            if inst.as_slice().last().is_some_and(|&p| p >= num_points) {
                return Err(Error::contract("instance point outside the cloud"));
            }
            let mut overlap: Vec<(InstanceId, usize)> = Vec::new();
            for p in inst.iter() {
                let l = label[p];
                if l != UNASSIGNED {
                    match overlap.iter_mut().find(|(q, _)| *q == l) {
                        Some(e) => e.1 += 1,
                        None => overlap.push((l, 1)),
                    }
                }
            }
            let assigned: usize = overlap.iter().map(|e| e.1).sum();
            if assigned == inst.len() {
                continue;
            }
            let target = if assigned == 0 {
                None
            } else {
                overlap.sort_unstable();
                let mut best: Option<(InstanceId, f64)> = None;
                for &(q, n) in &overlap {
                    let iou = iou_from_counts(n, label_size[q as usize], inst.len());
                    if best.is_none_or(|(_, b)| iou > b) {
                        best = Some((q, iou));
                    }
                }
                best.filter(|&(_, iou)| iou > iou_threshold).map(|(q, _)| q)
            };
            let q = target.unwrap_or_else(|| {
                label_size.push(0);
                (label_size.len() - 1) as InstanceId
            });
            for p in inst.iter() {
                if label[p] == UNASSIGNED {
                    label[p] = q;
                    label_size[q as usize] += 1;
                }
            }
        }
    }

    Ok(GlobalPanoptic {
        instance: label,
        semantic: fuse_semantics(blocks, num_points)?,
    })
}

/// Majority class over the blocks that voted for each point; ties go to the
/// class with the most confident single vote, then to the lower class.
pub fn fuse_semantics(blocks: &[BlockLabels], num_points: usize) -> Result<Vec<Option<ClassId>>> {
    // (class, count, best confidence) per point
    let mut tally: Vec<Vec<(ClassId, usize, f64)>> = vec![Vec::new(); num_points];
    for v in blocks.iter().flat_map(|b| &b.votes) {
        let t = tally
            .get_mut(v.point)
            .ok_or_else(|| Error::contract("semantic vote for a point outside the cloud"))?;
        match t.iter_mut().find(|e| e.0 == v.class_id) {
            Some(e) => {
                e.1 += 1;
                e.2 = e.2.max(v.confidence);
            }
            None => t.push((v.class_id, 1, v.confidence)),
        }
    }
    Ok(tally
        .into_iter()
        .map(|t| {
            t.into_iter()
                .min_by(|a, b| b.1.cmp(&a.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp(&b.0)))
                .map(|e| e.0)
        })
        .collect())
}

/// Labels for every original point from its nearest subsampled point (lower
/// index on ties); instances of stuff points become -1.
pub fn upsample_labels(
    original: &PointCloud,
    subsampled: &PointCloud,
    labels: &GlobalPanoptic,
    taxonomy: &SemanticTaxonomy,
) -> Result<Labeling> {
    if subsampled.is_empty() {
        return Err(Error::contract("cannot upsample from an empty cloud"));
    }
    if labels.instance.len() != subsampled.len() || labels.semantic.len() != subsampled.len() {
        return Err(Error::contract("labels do not match the subsampled cloud"));
    }
    let tree = KdTree::new(subsampled.positions().to_vec());
    let rows: Vec<(ClassId, InstanceId)> = original
        .positions()
        .par_iter()
        .map(|p| {
            let (j, _) = tree.nearest(p).expect("non-empty tree");
            let class = labels.semantic[j]
                .ok_or_else(|| Error::contract(format!("subsampled point {j} is not covered by any block")))?;
            let ins = if taxonomy.is_stuff(class) {
                UNASSIGNED
            } else {
                labels.instance[j]
            };
            Ok((class, ins))
        })
        .collect::<Result<_>>()?;
    let (sem, ins) = rows.into_iter().unzip();
    Labeling::new(sem, ins)
}
