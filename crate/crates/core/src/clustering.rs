//! Instance candidate generation: region growing on raw or offset-shifted
//! coordinates and flat-kernel mean-shift on embeddings.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{Embedding, FeatureSet};
use crate::model::{majority_vote, ClassId, IndexSet, InstanceCandidate, Origin, SemanticTaxonomy};
use crate::sampling::Block;
use crate::spatial::{dist2, KdTree};

/// Which generators contribute candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Setting {
    /// Embedding mean-shift.
    I,
    /// Region growing on shifted coordinates.
    II,
    /// II plus region growing on raw coordinates.
    III,
    /// I plus II.
    IV,
    /// I, II and raw-coordinate region growing.
    V,
}

impl Setting {
    pub const ALL: [Setting; 5] = [Setting::I, Setting::II, Setting::III, Setting::IV, Setting::V];

    pub fn uses_embedding(self) -> bool {
        matches!(self, Setting::I | Setting::IV | Setting::V)
    }

    pub fn uses_offset(self) -> bool {
        self != Setting::I
    }

    pub fn uses_raw(self) -> bool {
        matches!(self, Setting::III | Setting::V)
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::I => "I",
            Setting::II => "II",
            Setting::III => "III",
            Setting::IV => "IV",
            Setting::V => "V",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" => Ok(Setting::I),
            "II" => Ok(Setting::II),
            "III" => Ok(Setting::III),
            "IV" => Ok(Setting::IV),
            "V" => Ok(Setting::V),
            _ => Err(Error::invalid(format!("unknown setting `{s}`, expected I..V"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterParams {
    pub region_growing_radius: f64,
    pub meanshift_bandwidth: f64,
    pub meanshift_max_iter: usize,
    pub meanshift_tol: f64,
    pub setting: Setting,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            region_growing_radius: 0.03,
            meanshift_bandwidth: 0.6,
            meanshift_max_iter: 300,
            meanshift_tol: 1e-4,
            setting: Setting::IV,
        }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.region_growing_radius) || !positive(self.meanshift_bandwidth) || !positive(self.meanshift_tol)
        {
            return Err(Error::invalid("clustering radii and tolerance must be > 0"));
        }
        if self.meanshift_max_iter == 0 {
            return Err(Error::invalid("meanshift_max_iter must be >= 1"));
        }
        Ok(())
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

fn groups_by_root(uf: &mut UnionFind, n: usize) -> Vec<IndexSet> {
    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut out: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        let r = uf.find(i);
        let s = *slot.entry(r).or_insert_with(|| {
            out.push(Vec::new());
            out.len() - 1
        });
        out[s].push(i);
    }
    out.into_iter().map(IndexSet::new).collect()
}

fn bits<const D: usize>(v: &[f64; D]) -> [u64; D] {
    v.map(f64::to_bits)
}

/// Connected components of the graph joining points of equal class at
/// distance `<= radius`, ordered by smallest member.
pub fn region_grow(points: &[[f64; 3]], class_of: &[ClassId], radius: f64) -> Result<Vec<IndexSet>> {
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::invalid(format!(
            "region growing radius must be > 0, got {radius}"
        )));
    }
    if points.len() != class_of.len() {
        return Err(Error::invalid("points and classes differ in length"));
    }
    let n = points.len();
    let mut uf = UnionFind::new(n);

    // Coincident points (common after perfect offsets) are joined up front
    // so the radius search only runs once per distinct location.
    let mut first: HashMap<([u64; 3], ClassId), usize> = HashMap::new();
    let mut reps = Vec::new();
    for i in 0..n {
        match first.entry((bits(&points[i]), class_of[i])) {
            std::collections::hash_map::Entry::Occupied(e) => uf.union(*e.get(), i),
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(i);
                reps.push(i);
            }
        }
    }
    let tree = KdTree::new(reps.iter().map(|&i| points[i]).collect());
    for (k, &i) in reps.iter().enumerate() {
        tree.for_each_within(&points[i], radius, |j| {
            if j > k && class_of[reps[j]] == class_of[i] {
                uf.union(i, reps[j]);
            }
        });
    }
    Ok(groups_by_root(&mut uf, n))
}

pub fn shift_points(positions: &[[f64; 3]], offsets: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    if positions.len() != offsets.len() {
        return Err(Error::invalid("positions and offsets differ in length"));
    }
    Ok(positions
        .iter()
        .zip(offsets)
        .map(|(p, o)| [p[0] + o[0], p[1] + o[1], p[2] + o[2]])
        .collect())
}

fn converge(tree: &KdTree<5>, start: Embedding, bandwidth: f64, max_iter: usize, tol: f64) -> Embedding {
    let pts = tree.points();
    let mut mode = start;
    for _ in 0..max_iter {
        let mut sum = [0.0; 5];
        let mut n = 0usize;
        tree.for_each_within(&mode, bandwidth, |j| {
            for d in 0..5 {
                sum[d] += pts[j][d];
            }
            n += 1;
        });
        if n == 0 {
            break;
        }
        let next = sum.map(|s| s / n as f64);
        let shift = dist2(&next, &mode).sqrt();
        mode = next;
        if shift < tol {
            break;
        }
    }
    mode
}

/// Flat-kernel mean-shift seeded at every point. Modes strictly closer than
/// `bandwidth / 2` to an earlier surviving mode join it; clusters are ordered
/// by smallest member.
pub fn mean_shift(emb: &[Embedding], bandwidth: f64, max_iter: usize, tol: f64) -> Result<Vec<IndexSet>> {
    if !(bandwidth.is_finite() && bandwidth > 0.0 && tol > 0.0) || max_iter == 0 {
        return Err(Error::invalid("mean-shift needs bandwidth > 0, tol > 0, max_iter >= 1"));
    }
    if emb.is_empty() {
        return Ok(Vec::new());
    }
    let tree = KdTree::new(emb.to_vec());

    let mut seed_of: HashMap<[u64; 5], usize> = HashMap::new();
    let mut seeds: Vec<Embedding> = Vec::new();
    let which: Vec<usize> = emb
        .iter()
        .map(|e| {
            *seed_of.entry(bits(e)).or_insert_with(|| {
                seeds.push(*e);
                seeds.len() - 1
            })
        })
        .collect();
    let modes: Vec<Embedding> = seeds
        .par_iter()
        .map(|&s| converge(&tree, s, bandwidth, max_iter, tol))
        .collect();

    let merge2 = (bandwidth / 2.0).powi(2);
    let mut reps: Vec<Embedding> = Vec::new();
    let mut rep_of_seed: Vec<Option<usize>> = vec![None; seeds.len()];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for (i, &s) in which.iter().enumerate() {
        let r = match rep_of_seed[s] {
            Some(r) => r,
            None => {
                let m = &modes[s];
                let mut best: Option<(usize, f64)> = None;
                for (r, rep) in reps.iter().enumerate() {
                    let d = dist2(m, rep);
                    if d < merge2 && best.is_none_or(|(_, bd)| d < bd) {
                        best = Some((r, d));
                    }
                }
                let r = best.map_or_else(
                    || {
                        reps.push(*m);
                        clusters.push(Vec::new());
                        reps.len() - 1
                    },
                    |(r, _)| r,
                );
                rep_of_seed[s] = Some(r);
                r
            }
        };
        clusters[r].push(i);
    }
    Ok(clusters.into_iter().map(IndexSet::new).collect())
}

/// Candidates of one block in generator order embedding, offset, raw. Only
/// points predicted as a thing class take part. Point ids are global.
pub fn generate_candidates(
    block: &Block,
    features: &FeatureSet,
    taxonomy: &SemanticTaxonomy,
    params: &ClusterParams,
) -> Result<Vec<InstanceCandidate>> {
    params.validate()?;
    if features.len() != block.len() {
        return Err(Error::contract(format!(
            "features cover {} points, block has {}",
            features.len(),
            block.len()
        )));
    }
    let predicted: Vec<ClassId> = (0..features.len()).map(|k| features.predicted_class(k)).collect();
    let things: Vec<usize> = (0..block.len()).filter(|&k| taxonomy.is_thing(predicted[k])).collect();
    if things.is_empty() {
        return Ok(Vec::new());
    }
    let classes: Vec<ClassId> = things.iter().map(|&k| predicted[k]).collect();
    let local = block.local_positions();
    let global = block.global_ids().as_slice();

    let to_candidates = |groups: Vec<IndexSet>, origin: Origin| -> Result<Vec<InstanceCandidate>> {
        groups
            .into_iter()
            .map(|g| {
                let class = majority_vote(g.iter().map(|j| classes[j])).expect("groups are non-empty");
                let ids = IndexSet::from_sorted(g.iter().map(|j| global[things[j]]).collect())?;
                InstanceCandidate::new(ids, class, origin)
            })
            .collect()
    };

    let mut out = Vec::new();
    if params.setting.uses_embedding() {
        let emb: Vec<Embedding> = things.iter().map(|&k| features.embeddings()[k]).collect();
        let groups = mean_shift(
            &emb,
            params.meanshift_bandwidth,
            params.meanshift_max_iter,
            params.meanshift_tol,
        )?;
        out.extend(to_candidates(groups, Origin::Embedding)?);
    }
    if params.setting.uses_offset() {
        let pos: Vec<[f64; 3]> = things.iter().map(|&k| local[k]).collect();
        let off: Vec<[f64; 3]> = things.iter().map(|&k| features.offsets()[k]).collect();
        let shifted = shift_points(&pos, &off)?;
        out.extend(to_candidates(
            region_grow(&shifted, &classes, params.region_growing_radius)?,
            Origin::Offset,
        )?);
    }
    if params.setting.uses_raw() {
        let pos: Vec<[f64; 3]> = things.iter().map(|&k| local[k]).collect();
        out.extend(to_candidates(
            region_grow(&pos, &classes, params.region_growing_radius)?,
            Origin::Raw,
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{OracleNoise, OracleProvider};
    use crate::model::{ClassKind, Labeling, PointCloud};
    use crate::sampling::cut_cylinder;
    use proptest::prelude::*;

    #[test]
    fn setting_names() {
        for s in Setting::ALL {
            assert_eq!(s.to_string().parse::<Setting>().unwrap(), s);
        }
        assert!("VI".parse::<Setting>().is_err());
        assert!(Setting::V.uses_embedding() && Setting::V.uses_offset() && Setting::V.uses_raw());
        assert!(!Setting::I.uses_offset());
        assert!(!Setting::IV.uses_raw());
    }

    #[test]
    fn region_grow_examples() {
        let pts = [[0.0, 0.0, 0.0], [0.02, 0.0, 0.0]];
        assert_eq!(region_grow(&pts, &[1, 1], 0.03).unwrap().len(), 1);
        assert_eq!(region_grow(&pts, &[1, 2], 0.03).unwrap().len(), 2);
        let chain: Vec<[f64; 3]> = (0..10).map(|i| [i as f64 * 0.25, 0.0, 0.0]).collect();
        assert_eq!(region_grow(&chain, &[1; 10], 0.25).unwrap().len(), 1);
        assert_eq!(region_grow(&chain, &[1; 10], 0.2499).unwrap().len(), 10);
    }

    #[test]
    fn shift_examples() {
        let p = [[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]];
        assert_eq!(shift_points(&p, &[[0.0; 3]; 2]).unwrap(), p);
        let a = [[0.5, 0.25, 1.0], [2.0, 0.0, -1.0]];
        let b = [[0.25, 0.5, 0.0], [1.0, 1.0, 1.0]];
        let ab: Vec<[f64; 3]> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| [x[0] + y[0], x[1] + y[1], x[2] + y[2]])
            .collect();
        assert_eq!(
            shift_points(&shift_points(&p, &a).unwrap(), &b).unwrap(),
            shift_points(&p, &ab).unwrap()
        );
    }

    #[test]
    fn mean_shift_examples() {
        let mut emb = vec![[0.0; 5]; 4];
        emb.extend(vec![[3.0, 0.0, 0.0, 0.0, 0.0]; 3]);
        emb.push([0.0; 5]);
        let c = mean_shift(&emb, 0.6, 300, 1e-4).unwrap();
        assert_eq!(
            c,
            vec![IndexSet::new(vec![0, 1, 2, 3, 7]), IndexSet::new(vec![4, 5, 6])]
        );
        assert_eq!(mean_shift(&[[1.0; 5]; 6], 0.6, 300, 1e-4).unwrap().len(), 1);
        assert_eq!(
            mean_shift(&[[1.0; 5]], 0.6, 300, 1e-4).unwrap(),
            vec![IndexSet::new(vec![0])]
        );
    }

    #[test]
    fn mean_shift_merges_close_modes() {
        // two points 0.5 apart: each window contains both, both seeds converge
        // to the midpoint
        let emb = [[0.0; 5], [0.5, 0.0, 0.0, 0.0, 0.0]];
        assert_eq!(mean_shift(&emb, 0.6, 300, 1e-4).unwrap().len(), 1);
        // 0.7 apart with bandwidth 0.6: windows are disjoint, modes stay apart
        let emb = [[0.0; 5], [0.7, 0.0, 0.0, 0.0, 0.0]];
        assert_eq!(mean_shift(&emb, 0.6, 300, 1e-4).unwrap().len(), 2);
    }

    fn taxonomy() -> SemanticTaxonomy {
        SemanticTaxonomy::from_kinds([
            ("ground", ClassKind::Stuff),
            ("tree", ClassKind::Thing),
            ("car", ClassKind::Thing),
        ])
        .unwrap()
    }

    fn three_instances() -> (Block, Labeling) {
        let mut pts = Vec::new();
        let mut sem = Vec::new();
        let mut ins = Vec::new();
        for (k, c) in [[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]].iter().enumerate() {
            for i in 0..20 {
                let t = i as f64 * 0.31;
                pts.push([c[0] + t.cos(), c[1] + t.sin(), 1.0 + 0.05 * i as f64]);
                sem.push(1 + (k as u32 % 2));
                ins.push(k as i64 * 10);
            }
        }
        for i in 0..30 {
            pts.push([i as f64 * 0.2 - 3.0, -3.0, 0.0]);
            sem.push(0);
            ins.push(-1);
        }
        let cloud = PointCloud::new(pts).unwrap();
        (
            cut_cylinder(&cloud, [1.0, 1.0], 20.0).unwrap(),
            Labeling::new(sem, ins).unwrap(),
        )
    }

    #[test]
    fn oracle_setting_iv_recovers_instances() {
        let (block, gt) = three_instances();
        let p = OracleProvider::new(gt.clone(), taxonomy(), OracleNoise::default()).unwrap();
        let f = p.provide(&block, 0, 0).unwrap();
        let cands = generate_candidates(&block, &f, &taxonomy(), &ClusterParams::default()).unwrap();
        let expected: Vec<IndexSet> = (0..3)
            .map(|k| IndexSet::new((k * 20..(k + 1) * 20).collect()))
            .collect();
        for origin in [Origin::Embedding, Origin::Offset] {
            let sets: Vec<IndexSet> = cands
                .iter()
                .filter(|c| c.origin() == origin)
                .map(|c| c.points().clone())
                .collect();
            assert_eq!(sets, expected, "{origin}");
        }
        assert_eq!(cands[1].class_id(), 2);
        assert!(cands.iter().all(|c| c.origin() != Origin::Raw));
    }

    #[test]
    fn all_stuff_gives_nothing() {
        let (block, gt) = three_instances();
        let stuff = Labeling::new(vec![0; gt.len()], vec![-1; gt.len()]).unwrap();
        let p = OracleProvider::new(stuff, taxonomy(), OracleNoise::default()).unwrap();
        let f = p.provide(&block, 0, 0).unwrap();
        let params = ClusterParams {
            setting: Setting::II,
            ..Default::default()
        };
        assert!(generate_candidates(&block, &f, &taxonomy(), &params)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn setting_v_composes() {
        let (block, gt) = three_instances();
        let noise = OracleNoise {
            offset_sigma: 0.02,
            embedding_sigma: 0.1,
            ..Default::default()
        };
        let p = OracleProvider::new(gt, taxonomy(), noise).unwrap();
        let f = p.provide(&block, 3, 0).unwrap();
        let run = |setting| {
            let params = ClusterParams {
                setting,
                region_growing_radius: 0.4,
                ..Default::default()
            };
            generate_candidates(&block, &f, &taxonomy(), &params).unwrap()
        };
        let v = run(Setting::V);
        let mut expected = run(Setting::IV);
        expected.extend(run(Setting::III).into_iter().filter(|c| c.origin() == Origin::Raw));
        assert_eq!(v, expected);
    }

    fn brute_components(points: &[[f64; 3]], class_of: &[ClassId], r: f64) -> Vec<IndexSet> {
        let n = points.len();
        let mut label: Vec<usize> = (0..n).collect();
        loop {
            let mut changed = false;
            for i in 0..n {
                for j in 0..n {
                    if class_of[i] == class_of[j] && dist2(&points[i], &points[j]) <= r * r && label[j] < label[i] {
                        label[i] = label[j];
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, l) in label.into_iter().enumerate() {
            groups.entry(l).or_default().push(i);
        }
        groups.into_values().map(IndexSet::new).collect()
    }

    proptest! {
        #[test]
        fn region_grow_matches_brute_force(
            pts in proptest::collection::vec((prop::array::uniform3(0.0f64..2.0), 1u32..3), 1..60),
            r in 0.05f64..0.6,
        ) {
            let (p, c): (Vec<_>, Vec<_>) = pts.into_iter().unzip();
            let got = region_grow(&p, &c, r).unwrap();
            prop_assert_eq!(&got, &brute_components(&p, &c, r));
            let total: usize = got.iter().map(IndexSet::len).sum();
            prop_assert_eq!(total, p.len());
        }

        #[test]
        fn region_grow_is_monotone(
            pts in proptest::collection::vec(prop::array::uniform3(0.0f64..2.0), 1..60),
            r in 0.05f64..0.6,
            shrink in 0.1f64..1.0,
        ) {
            let c = vec![1; pts.len()];
            let coarse = region_grow(&pts, &c, r).unwrap();
            for fine in region_grow(&pts, &c, r * shrink).unwrap() {
                prop_assert!(coarse.iter().any(|g| fine.is_subset(g)));
            }
        }

        #[test]
        fn region_grow_order_free(
            pts in proptest::collection::vec(prop::array::uniform3(0.0f64..2.0), 2..40),
            r in 0.05f64..0.6,
        ) {
            let c = vec![1; pts.len()];
            let fwd = region_grow(&pts, &c, r).unwrap();
            let rev: Vec<[f64; 3]> = pts.iter().rev().copied().collect();
            let n = pts.len();
            let mut back: Vec<IndexSet> = region_grow(&rev, &c, r)
                .unwrap()
                .into_iter()
                .map(|g| g.iter().map(|i| n - 1 - i).collect())
                .collect();
            back.sort();
            let mut fwd_sorted = fwd.clone();
            fwd_sorted.sort();
            prop_assert_eq!(fwd_sorted, back);
        }

        #[test]
        fn mean_shift_partitions(
            emb in proptest::collection::vec(prop::array::uniform5(-2.0f64..2.0), 1..50),
        ) {
            let a = mean_shift(&emb, 0.6, 300, 1e-4).unwrap();
            prop_assert_eq!(&a, &mean_shift(&emb, 0.6, 300, 1e-4).unwrap());
            let mut all: Vec<usize> = a.iter().flat_map(|g| g.iter()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..emb.len()).collect::<Vec<_>>());
        }
    }
}
