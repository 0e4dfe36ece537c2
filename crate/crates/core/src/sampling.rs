//! Input data generation: voxel-grid subsampling, class-balanced and regular
//! cylinder centres, cylinder cutting and training-time augmentation.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{majority_vote, IndexSet, Labeling, PointCloud};
use crate::rng::{derived_rng, STREAM_AUGMENT, STREAM_CENTERS};
use crate::spatial::KdTree;

/// Voxel key and original member ids of every subsampled point.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VoxelMap {
    keys: Vec<[i64; 3]>,
    members: Vec<Vec<usize>>,
    original_len: usize,
}

impl VoxelMap {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, i: usize) -> [i64; 3] {
        self.keys[i]
    }

    /// Original point ids represented by subsampled point `i`, ascending.
    pub fn members(&self, i: usize) -> &[usize] {
        &self.members[i]
    }

    pub fn original_len(&self) -> usize {
        self.original_len
    }

    /// Per-voxel mean of a per-original-point column.
    pub fn reduce_mean(&self, values: &[f64]) -> Vec<f64> {
        self.members
            .iter()
            .map(|m| m.iter().map(|&i| values[i]).sum::<f64>() / m.len() as f64)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Subsampled {
    pub cloud: PointCloud,
    pub labels: Option<Labeling>,
    pub map: VoxelMap,
}

/// One point per occupied voxel at the barycentre of its members, with
/// majority-vote labels. Output order follows first occupancy in input order.
pub fn voxel_subsample(cloud: &PointCloud, labels: Option<&Labeling>, voxel: f64) -> Result<Subsampled> {
    if !(voxel.is_finite() && voxel > 0.0) {
        return Err(Error::invalid(format!("voxel size must be > 0, got {voxel}")));
    }
    if let Some(l) = labels {
        if l.len() != cloud.len() {
            return Err(Error::invalid(format!("{} labels for {} points", l.len(), cloud.len())));
        }
    }
    let mut slot: HashMap<[i64; 3], usize> = HashMap::new();
    let mut keys = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, p) in cloud.positions().iter().enumerate() {
        let key = [
            (p[0] / voxel).floor() as i64,
            (p[1] / voxel).floor() as i64,
            (p[2] / voxel).floor() as i64,
        ];
        let s = *slot.entry(key).or_insert_with(|| {
            keys.push(key);
            members.push(Vec::new());
            keys.len() - 1
        });
        members[s].push(i);
    }

    let positions: Vec<[f64; 3]> = members
        .iter()
        .map(|m| {
            let mut acc = [0.0; 3];
            for &i in m {
                for a in 0..3 {
                    acc[a] += cloud.positions()[i][a];
                }
            }
            let n = m.len() as f64;
            [acc[0] / n, acc[1] / n, acc[2] / n]
        })
        .collect();

    let map = VoxelMap {
        keys,
        members,
        original_len: cloud.len(),
    };
    let mut out = PointCloud::new(positions)?;
    for (name, values) in cloud.attributes() {
        out = out.with_attribute(name.clone(), map.reduce_mean(values))?;
    }
    let labels = labels
        .map(|l| {
            let sem = map
                .members
                .iter()
                .map(|m| majority_vote(m.iter().map(|&i| l.semantic()[i])).expect("voxel non-empty"))
                .collect();
            let ins = map
                .members
                .iter()
                .map(|m| majority_vote(m.iter().map(|&i| l.instance()[i])).expect("voxel non-empty"))
                .collect();
            Labeling::new(sem, ins)
        })
        .transpose()?;
    Ok(Subsampled {
        cloud: out,
        labels,
        map,
    })
}

/// Per-point sampling weights `sqrt(1 / N_c)` for class frequencies `N_c`.
pub fn class_balanced_weights(labels: &Labeling) -> Vec<f64> {
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for &c in labels.semantic() {
        *counts.entry(c).or_default() += 1;
    }
    labels
        .semantic()
        .iter()
        .map(|c| (1.0 / counts[c] as f64).sqrt())
        .collect()
}

/// Draws `k` point ids with replacement, weighted by inverse square-root
/// class frequency.
pub fn class_balanced_seeds(labels: &Labeling, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::invalid("need at least one centre"));
    }
    if labels.is_empty() {
        return Err(Error::invalid("class-balanced sampling needs labeled points"));
    }
    let dist = WeightedIndex::new(class_balanced_weights(labels))
        .map_err(|e| Error::invalid(format!("bad sampling weights: {e}")))?;
    let mut rng = derived_rng(seed, &[STREAM_CENTERS]);
    Ok((0..k).map(|_| dist.sample(&mut rng)).collect())
}

/// Training cylinder centres: the (x, y) of class-balanced random points.
pub fn class_balanced_centers(cloud: &PointCloud, labels: &Labeling, k: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
    if labels.len() != cloud.len() {
        return Err(Error::invalid("labels do not match the cloud"));
    }
    Ok(class_balanced_seeds(labels, k, seed)?
        .into_iter()
        .map(|i| {
            let p = cloud.positions()[i];
            [p[0], p[1]]
        })
        .collect())
}

/// Regular test-time centres from the min corner of `[lo, hi]` with spacing
/// `step`, `ceil(extent / step) + 1` per axis, ordered by (x, y).
pub fn grid_centers(lo: [f64; 2], hi: [f64; 2], step: f64) -> Result<Vec<[f64; 2]>> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::invalid(format!("grid step must be > 0, got {step}")));
    }
    let count = |a: usize| ((hi[a] - lo[a]).max(0.0) / step).ceil() as usize + 1;
    let (nx, ny) = (count(0), count(1));
    let mut out = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            out.push([lo[0] + i as f64 * step, lo[1] + j as f64 * step]);
        }
    }
    Ok(out)
}

/// A vertical cylinder of points, recentred on its axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    global_ids: IndexSet,
    local: Vec<[f64; 3]>,
    center: [f64; 2],
    radius: f64,
}

impl Block {
    pub fn global_ids(&self) -> &IndexSet {
        &self.global_ids
    }

    /// Local coordinates, aligned with `global_ids`.
    pub fn local_positions(&self) -> &[[f64; 3]] {
        &self.local
    }

    pub fn center(&self) -> [f64; 2] {
        self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn len(&self) -> usize {
        self.local.len()
    }

    pub fn is_empty(&self) -> bool {
        self.local.is_empty()
    }
}

/// 2D index over a cloud's horizontal coordinates for cylinder queries.
#[derive(Debug, Clone)]
pub struct CylinderIndex {
    tree: KdTree<2>,
    positions: Vec<[f64; 3]>,
}

impl CylinderIndex {
    pub fn new(cloud: &PointCloud) -> Self {
        let xy = cloud.positions().iter().map(|p| [p[0], p[1]]).collect();
        Self {
            tree: KdTree::new(xy),
            positions: cloud.positions().to_vec(),
        }
    }

    /// All points with horizontal distance `<= radius` from `center`,
    /// regardless of height. May be empty.
    pub fn cut(&self, center: [f64; 2], radius: f64) -> Result<Block> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::invalid(format!("cylinder radius must be > 0, got {radius}")));
        }
        let ids = self.tree.within_radius(&center, radius);
        let local = ids
            .iter()
            .map(|&i| {
                let p = self.positions[i];
                [p[0] - center[0], p[1] - center[1], p[2]]
            })
            .collect();
        Ok(Block {
            global_ids: IndexSet::from_sorted(ids)?,
            local,
            center,
            radius,
        })
    }
}

/// Cuts one cylinder; build a [`CylinderIndex`] once when cutting many.
pub fn cut_cylinder(cloud: &PointCloud, center: [f64; 2], radius: f64) -> Result<Block> {
    CylinderIndex::new(cloud).cut(center, radius)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    /// Per-axis Gaussian jitter, metres.
    pub jitter_sigma: f64,
    /// Rotation angle drawn uniformly from `[0, max_rotation)`.
    pub max_rotation: f64,
    pub scale_range: (f64, f64),
    pub reflect_prob: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            jitter_sigma: 0.01,
            max_rotation: 2.0 * PI,
            scale_range: (0.9, 1.1),
            reflect_prob: 0.5,
        }
    }
}

/// Concrete random choices of one augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw {
    pub jitter: Vec<[f64; 3]>,
    pub angle: f64,
    pub scale: [f64; 3],
    pub reflect_y: bool,
}

impl AugmentDraw {
    pub fn identity(n: usize) -> Self {
        Self {
            jitter: vec![[0.0; 3]; n],
            angle: 0.0,
            scale: [1.0; 3],
            reflect_y: false,
        }
    }
}

pub fn draw_augmentation(n: usize, params: &AugmentParams, seed: u64) -> Result<AugmentDraw> {
    let (lo, hi) = params.scale_range;
    if !(params.jitter_sigma >= 0.0 && params.max_rotation >= 0.0 && lo > 0.0 && hi >= lo) {
        return Err(Error::invalid("bad augmentation parameters"));
    }
    if !(0.0..=1.0).contains(&params.reflect_prob) {
        return Err(Error::invalid("reflection probability outside [0, 1]"));
    }
    let mut rng = derived_rng(seed, &[STREAM_AUGMENT]);
    let normal = Normal::new(0.0, params.jitter_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let jitter = (0..n)
        .map(|_| {
            [
                normal.sample(&mut rng),
                normal.sample(&mut rng),
                normal.sample(&mut rng),
            ]
        })
        .collect();
    let angle = if params.max_rotation > 0.0 {
        rng.random_range(0.0..params.max_rotation)
    } else {
        0.0
    };
    let mut scale = [1.0; 3];
    for s in &mut scale {
        *s = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    }
    let reflect_y = rng.random_bool(params.reflect_prob);
    Ok(AugmentDraw {
        jitter,
        angle,
        scale,
        reflect_y,
    })
}

/// Applies jitter, rotation about the cylinder axis, per-axis scaling and
/// optional y reflection, in that order. Membership is unchanged.
pub fn apply_augmentation(block: &Block, draw: &AugmentDraw) -> Result<Block> {
    if draw.jitter.len() != block.len() {
        return Err(Error::invalid("augmentation drawn for a different block size"));
    }
    let (s, c) = draw.angle.sin_cos();
    let local = block
        .local
        .iter()
        .zip(&draw.jitter)
        .map(|(p, j)| {
            let (x, y, z) = (p[0] + j[0], p[1] + j[1], p[2] + j[2]);
            let (x, y) = if draw.angle == 0.0 {
                (x, y)
            } else {
                (c * x - s * y, s * x + c * y)
            };
            let (x, y, z) = (x * draw.scale[0], y * draw.scale[1], z * draw.scale[2]);
            [x, if draw.reflect_y { -y } else { y }, z]
        })
        .collect();
    Ok(Block { local, ..block.clone() })
}

pub fn augment(block: &Block, params: &AugmentParams, seed: u64) -> Result<Block> {
    let draw = draw_augmentation(block.len(), params, seed)?;
    apply_augmentation(block, &draw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.to_vec()).unwrap()
    }

    #[test]
    fn single_voxel_collapses_to_mean() {
        let c = cloud(&[[0.01, 0.01, 0.01], [0.05, 0.02, 0.10], [0.09, 0.11, 0.04]]);
        let l = Labeling::new(vec![1, 2, 2], vec![3, 4, 4]).unwrap();
        let s = voxel_subsample(&c, Some(&l), 0.12).unwrap();
        assert_eq!(s.cloud.len(), 1);
        let p = s.cloud.positions()[0];
        let mean = [0.05, 0.14 / 3.0, 0.05];
        for a in 0..3 {
            assert!((p[a] - mean[a]).abs() < 1e-15);
        }
        let l = s.labels.unwrap();
        assert_eq!(l.semantic(), &[2]);
        assert_eq!(l.instance(), &[4]);
        assert_eq!(s.map.members(0), &[0, 1, 2]);
    }

    #[test]
    fn sparse_grid_is_unchanged() {
        let pts: Vec<[f64; 3]> = (0..27)
            .map(|i| [(i % 3) as f64 * 0.5, ((i / 3) % 3) as f64 * 0.5, (i / 9) as f64 * 0.5])
            .collect();
        let s = voxel_subsample(&cloud(&pts), None, 0.12).unwrap();
        assert_eq!(s.cloud.len(), 27);
    }

    #[test]
    fn npm3d_voxel_density() {
        let density = 1.0 / (0.12f64 * 0.12 * 0.12);
        assert_eq!(density.round(), 579.0);
        let density = 1.0 / (0.2f64 * 0.2 * 0.2);
        assert_eq!(density.round(), 125.0);
    }

    #[test]
    fn voxel_map_partitions_points() {
        let pts: Vec<[f64; 3]> = (0..500)
            .map(|i| {
                let t = i as f64 * 0.37;
                [t.sin() * 2.0, t.cos() * 1.5, (t * 0.1).fract()]
            })
            .collect();
        let s = voxel_subsample(&cloud(&pts), None, 0.3).unwrap();
        let mut all: Vec<usize> = (0..s.map.len()).flat_map(|i| s.map.members(i).to_vec()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..500).collect::<Vec<_>>());
        // at most one output point per voxel
        let mut keys: Vec<[i64; 3]> = (0..s.map.len()).map(|i| s.map.key(i)).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), s.cloud.len());
    }

    #[test]
    fn grid_center_counts() {
        assert_eq!(grid_centers([0.0, 0.0], [10.0, 10.0], 5.0).unwrap().len(), 9);
        assert_eq!(grid_centers([0.0, 0.0], [3.0, 3.0], 5.0).unwrap().len(), 4);
        assert_eq!(grid_centers([2.0, 2.0], [2.0, 2.0], 5.0).unwrap(), vec![[2.0, 2.0]]);
        assert!(grid_centers([0.0, 0.0], [1.0, 1.0], 0.0).is_err());
        let g = grid_centers([0.0, 0.0], [10.0, 10.0], 5.0).unwrap();
        assert!(g.windows(2).all(|w| (w[0][0], w[0][1]) < (w[1][0], w[1][1])));
    }

    #[test]
    fn cylinder_boundary_and_height() {
        let c = cloud(&[[3.0, 0.0, 0.0], [3.0001, 0.0, 0.0], [0.0, 0.0, 100.0], [1.0, 1.0, -5.0]]);
        let b = cut_cylinder(&c, [0.0, 0.0], 3.0).unwrap();
        assert_eq!(b.global_ids().as_slice(), &[0, 2, 3]);
        assert_eq!(b.local_positions()[1], [0.0, 0.0, 100.0]);

        let b = cut_cylinder(&c, [50.0, 50.0], 3.0).unwrap();
        assert!(b.is_empty());
        let b = cut_cylinder(&c, [1.0, 1.0], 0.5).unwrap();
        assert_eq!(b.local_positions(), &[[0.0, 0.0, -5.0]]);
    }

    #[test]
    fn class_balanced_is_deterministic() {
        let l = Labeling::new(vec![0, 0, 0, 1], vec![-1; 4]).unwrap();
        let a = class_balanced_seeds(&l, 50, 9).unwrap();
        assert_eq!(a, class_balanced_seeds(&l, 50, 9).unwrap());
        assert_ne!(a, class_balanced_seeds(&l, 50, 10).unwrap());
        let w = class_balanced_weights(&l);
        assert!((w[0] - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(w[3], 1.0);
    }

    #[test]
    fn two_class_weight_ratio() {
        let mut sem = vec![0u32; 100];
        sem.push(1);
        let l = Labeling::new(sem, vec![-1; 101]).unwrap();
        let w = class_balanced_weights(&l);
        assert!((w[100] / w[0] - 10.0).abs() < 1e-12);
        let mass0: f64 = w[..100].iter().sum();
        assert!((mass0 / w[100] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_uniform() {
        let l = Labeling::new(vec![4; 7], vec![-1; 7]).unwrap();
        let w = class_balanced_weights(&l);
        assert!(w.iter().all(|&x| x == w[0]));
    }

    fn block() -> Block {
        let c = cloud(&[[1.0, 2.0, 3.0], [-0.5, 0.25, 1.0], [0.0, -1.0, 0.0]]);
        cut_cylinder(&c, [0.0, 0.0], 10.0).unwrap()
    }

    #[test]
    fn identity_augmentation() {
        let b = block();
        let params = AugmentParams {
            jitter_sigma: 0.0,
            max_rotation: 0.0,
            scale_range: (1.0, 1.0),
            reflect_prob: 0.0,
        };
        assert_eq!(augment(&b, &params, 3).unwrap(), b);
    }

    #[test]
    fn reflection_is_involution() {
        let b = block();
        let mut d = AugmentDraw::identity(b.len());
        d.reflect_y = true;
        let once = apply_augmentation(&b, &d).unwrap();
        assert_ne!(once, b);
        assert_eq!(apply_augmentation(&once, &d).unwrap(), b);
    }

    #[test]
    fn scale_applies_exactly() {
        let b = block();
        let mut d = AugmentDraw::identity(b.len());
        d.scale = [1.1, 1.0, 1.0];
        let out = apply_augmentation(&b, &d).unwrap();
        for (p, q) in b.local_positions().iter().zip(out.local_positions()) {
            assert_eq!(q[0], p[0] * 1.1);
            assert_eq!(q[1], p[1]);
        }
    }

    #[test]
    fn augmentation_is_seeded() {
        let b = block();
        let p = AugmentParams::default();
        assert_eq!(augment(&b, &p, 1).unwrap(), augment(&b, &p, 1).unwrap());
        let d = draw_augmentation(3, &p, 1).unwrap();
        assert!(d.scale.iter().all(|s| (0.9..=1.1).contains(s)));
        assert!((0.0..2.0 * PI).contains(&d.angle));
    }

    proptest! {
        #[test]
        fn grid_blocks_cover_every_point(
            pts in proptest::collection::vec(prop::array::uniform3(-20.0f64..20.0), 1..150),
            radius in 1.0f64..8.0,
        ) {
            let c = cloud(&pts);
            let (lo, hi) = c.bounds_xy().unwrap();
            let idx = CylinderIndex::new(&c);
            let mut covered = vec![false; pts.len()];
            for center in grid_centers(lo, hi, radius).unwrap() {
                let b = idx.cut(center, radius).unwrap();
                for (g, l) in b.global_ids().iter().zip(b.local_positions()) {
                    covered[g] = true;
                    prop_assert!(l[0] * l[0] + l[1] * l[1] <= radius * radius + 1e-9);
                }
            }
            prop_assert!(covered.iter().all(|&c| c));
        }

        #[test]
        fn subsample_density_bounded(
            pts in proptest::collection::vec(prop::array::uniform3(0.0f64..1.0), 1..400),
        ) {
            let s = voxel_subsample(&cloud(&pts), None, 0.25).unwrap();
            // unit cube spans at most 5 voxels per axis when a coordinate hits 1.0
            prop_assert!(s.cloud.len() <= 125);
            for i in 0..s.map.len() {
                let k = s.map.key(i);
                let p = s.cloud.positions()[i];
                for a in 0..3 {
                    prop_assert!((p[a] / 0.25).floor() as i64 >= k[a] - 1);
                    prop_assert!((p[a] / 0.25).floor() as i64 <= k[a] + 1);
                }
            }
        }
    }
}
