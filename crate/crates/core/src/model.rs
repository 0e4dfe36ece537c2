//! Shared domain types: point clouds, labelings, the semantic taxonomy,
//! sorted index sets and instance candidates.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub type ClassId = u32;
pub type InstanceId = i64;

/// Instance id of points that belong to no instance.
pub const UNASSIGNED: InstanceId = -1;

/// Columnar 3D point cloud with optional scalar attributes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    attributes: BTreeMap<String, Vec<f64>>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>) -> Result<Self> {
        if let Some(i) = positions.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            positions,
            attributes: BTreeMap::new(),
        })
    }

    pub fn with_attribute(mut self, name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if values.len() != self.positions.len() {
            return Err(Error::invalid(format!(
                "attribute `{name}` has {} values for {} points",
                values.len(),
                self.positions.len()
            )));
        }
        self.attributes.insert(name, values);
        Ok(self)
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn attribute(&self, name: &str) -> Option<&[f64]> {
        self.attributes.get(name).map(Vec::as_slice)
    }

    pub fn attributes(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.attributes
    }

    /// Axis-aligned (x, y) bounds, `None` for an empty cloud.
    pub fn bounds_xy(&self) -> Option<([f64; 2], [f64; 2])> {
        let first = self.positions.first()?;
        let mut lo = [first[0], first[1]];
        let mut hi = lo;
        for p in &self.positions {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        Some((lo, hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassKind {
    /// Countable objects that form instances.
    Thing,
    /// Amorphous regions such as road or ground.
    Stuff,
}

impl fmt::Display for ClassKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassKind::Thing => "thing",
            ClassKind::Stuff => "stuff",
        })
    }
}

impl FromStr for ClassKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "thing" => Ok(ClassKind::Thing),
            "stuff" => Ok(ClassKind::Stuff),
            other => Err(Error::invalid(format!("unknown class kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticClass {
    pub id: ClassId,
    pub name: String,
    pub kind: ClassKind,
}

/// Ordered list of semantic classes with ids contiguous from 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticTaxonomy {
    classes: Vec<SemanticClass>,
}

impl SemanticTaxonomy {
    pub fn new(classes: Vec<SemanticClass>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::invalid("taxonomy needs at least one class"));
        }
        for (i, c) in classes.iter().enumerate() {
            if c.id as usize != i {
                return Err(Error::invalid(format!(
                    "class ids must be contiguous from 0, found {} at position {i}",
                    c.id
                )));
            }
        }
        Ok(Self { classes })
    }

    /// Builds a taxonomy from `(name, kind)` pairs, numbering them in order.
    pub fn from_kinds<S: Into<String>>(entries: impl IntoIterator<Item = (S, ClassKind)>) -> Result<Self> {
        let classes = entries
            .into_iter()
            .enumerate()
            .map(|(i, (name, kind))| SemanticClass {
                id: i as ClassId,
                name: name.into(),
                kind,
            })
            .collect();
        Self::new(classes)
    }

    pub fn classes(&self) -> &[SemanticClass] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn contains(&self, id: ClassId) -> bool {
        (id as usize) < self.classes.len()
    }

    pub fn kind(&self, id: ClassId) -> Option<ClassKind> {
        self.classes.get(id as usize).map(|c| c.kind)
    }

    pub fn is_thing(&self, id: ClassId) -> bool {
        self.kind(id) == Some(ClassKind::Thing)
    }

    pub fn is_stuff(&self, id: ClassId) -> bool {
        self.kind(id) == Some(ClassKind::Stuff)
    }
}

/// Per-point semantic class and instance id, for ground truth or predictions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Labeling {
    semantic: Vec<ClassId>,
    instance: Vec<InstanceId>,
}

impl Labeling {
    pub fn new(semantic: Vec<ClassId>, instance: Vec<InstanceId>) -> Result<Self> {
        if semantic.len() != instance.len() {
            return Err(Error::invalid(format!(
                "semantic has {} entries but instance has {}",
                semantic.len(),
                instance.len()
            )));
        }
        if let Some(i) = instance.iter().position(|&id| id < UNASSIGNED) {
            return Err(Error::invalid(format!(
                "point {i} has instance id {}; only -1 may be negative",
                instance[i]
            )));
        }
        Ok(Self { semantic, instance })
    }

    pub fn semantic(&self) -> &[ClassId] {
        &self.semantic
    }

    pub fn instance(&self) -> &[InstanceId] {
        &self.instance
    }

    pub fn len(&self) -> usize {
        self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semantic.is_empty()
    }

    pub fn into_parts(self) -> (Vec<ClassId>, Vec<InstanceId>) {
        (self.semantic, self.instance)
    }

    /// Checks every class id against the taxonomy and, when `final_output`
    /// is set, that stuff points carry no instance.
    pub fn validate(&self, taxonomy: &SemanticTaxonomy, final_output: bool) -> Result<()> {
        for (i, (&c, &ins)) in self.semantic.iter().zip(&self.instance).enumerate() {
            if !taxonomy.contains(c) {
                return Err(Error::invalid(format!("point {i}: class {c} not in taxonomy")));
            }
            if final_output && taxonomy.is_stuff(c) && ins != UNASSIGNED {
                return Err(Error::invalid(format!(
                    "point {i}: stuff class {c} carries instance {ins}"
                )));
            }
        }
        Ok(())
    }

    /// Labels of the given points, in the given order.
    pub fn select(&self, ids: &[usize]) -> Labeling {
        Labeling {
            semantic: ids.iter().map(|&i| self.semantic[i]).collect(),
            instance: ids.iter().map(|&i| self.instance[i]).collect(),
        }
    }
}

/// Strictly increasing, duplicate-free list of point indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct IndexSet(Vec<usize>);

impl IndexSet {
    /// Sorts and deduplicates arbitrary indices.
    pub fn new(mut ids: Vec<usize>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        IndexSet(ids)
    }

    pub fn from_sorted(ids: Vec<usize>) -> Result<Self> {
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("index set must be strictly increasing"));
        }
        Ok(IndexSet(ids))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn first(&self) -> Option<usize> {
        self.0.first().copied()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.0.binary_search(&id).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn intersection_len(&self, other: &IndexSet) -> usize {
        let (a, b) = (&self.0, &other.0);
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    pub fn is_subset(&self, other: &IndexSet) -> bool {
        self.intersection_len(other) == self.len()
    }
}

impl FromIterator<usize> for IndexSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        IndexSet::new(iter.into_iter().collect())
    }
}

/// Intersection over union of two point sets.
///
/// Two empty sets have no defined overlap and are rejected.
pub fn instance_iou(a: &IndexSet, b: &IndexSet) -> Result<f64> {
    if a.is_empty() && b.is_empty() {
        return Err(Error::invalid("IoU of two empty sets is undefined"));
    }
    let inter = a.intersection_len(b);
    Ok(iou_from_counts(inter, a.len(), b.len()))
}

/// IoU from an intersection size and the two set sizes.
#[inline]
pub(crate) fn iou_from_counts(inter: usize, a: usize, b: usize) -> f64 {
    let union = a + b - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Most frequent value; ties go to the smallest value.
pub fn majority_vote<T: Ord + Copy>(values: impl IntoIterator<Item = T>) -> Option<T> {
    let mut counts: BTreeMap<T, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    let mut best: Option<(T, usize)> = None;
    for (v, n) in counts {
        if best.is_none_or(|(_, m)| n > m) {
            best = Some((v, n));
        }
    }
    best.map(|(v, _)| v)
}

/// One ground-truth or predicted instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub id: InstanceId,
    pub points: IndexSet,
    /// Modal semantic class of the member points.
    pub class_id: ClassId,
}

/// Groups points by non-negative instance id, ordered by id.
pub fn extract_instances(labeling: &Labeling) -> Vec<Instance> {
    let mut groups: BTreeMap<InstanceId, Vec<usize>> = BTreeMap::new();
    for (i, &id) in labeling.instance().iter().enumerate() {
        if id >= 0 {
            groups.entry(id).or_default().push(i);
        }
    }
    groups
        .into_iter()
        .map(|(id, pts)| {
            let class_id =
                majority_vote(pts.iter().map(|&i| labeling.semantic()[i])).expect("instance groups are non-empty");
            Instance {
                id,
                // indices were pushed in increasing order
                points: IndexSet(pts),
                class_id,
            }
        })
        .collect()
}

/// Which generator produced a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Origin {
    /// Region growing on raw coordinates.
    Raw,
    /// Region growing on offset-shifted coordinates.
    Offset,
    /// Mean-shift on the embedding.
    Embedding,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Raw => "raw",
            Origin::Offset => "offset",
            Origin::Embedding => "embedding",
        })
    }
}

impl FromStr for Origin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Origin::Raw),
            "offset" => Ok(Origin::Offset),
            "embedding" => Ok(Origin::Embedding),
            other => Err(Error::invalid(format!("unknown candidate origin `{other}`"))),
        }
    }
}

/// A tentative instance: global point ids, a class, and a quality score.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCandidate {
    points: IndexSet,
    class_id: ClassId,
    score: f64,
    origin: Origin,
}

impl InstanceCandidate {
    pub fn new(points: IndexSet, class_id: ClassId, origin: Origin) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("candidate has no points"));
        }
        Ok(Self {
            points,
            class_id,
            score: 0.0,
            origin,
        })
    }

    pub fn with_score(mut self, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid(format!("candidate score {score} outside [0, 1]")));
        }
        self.score = score;
        Ok(self)
    }

    pub fn points(&self) -> &IndexSet {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn class_id(&self) -> ClassId {
        self.class_id
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }
}

/// For every point, the list of set indices that contain it.
pub(crate) fn membership<'a>(sets: impl IntoIterator<Item = &'a IndexSet>) -> HashMap<usize, Vec<usize>> {
    let mut map: HashMap<usize, Vec<usize>> = HashMap::new();
    for (k, s) in sets.into_iter().enumerate() {
        for p in s.iter() {
            map.entry(p).or_default().push(k);
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(v: &[usize]) -> IndexSet {
        IndexSet::new(v.to_vec())
    }

    #[test]
    fn iou_examples() {
        assert_eq!(instance_iou(&set(&[1, 2, 3]), &set(&[2, 3, 4])).unwrap(), 0.5);
        assert_eq!(instance_iou(&set(&[1, 2]), &set(&[1, 2])).unwrap(), 1.0);
        assert_eq!(instance_iou(&set(&[1]), &set(&[2])).unwrap(), 0.0);
        assert_eq!(instance_iou(&set(&[]), &set(&[2])).unwrap(), 0.0);
        assert!(matches!(
            instance_iou(&set(&[]), &set(&[])),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn from_sorted_rejects_duplicates() {
        assert!(IndexSet::from_sorted(vec![1, 1, 2]).is_err());
        assert!(IndexSet::from_sorted(vec![3, 2]).is_err());
        assert!(IndexSet::from_sorted(vec![0, 2, 9]).is_ok());
    }

    #[test]
    fn extract_examples() {
        let l = Labeling::new(vec![0, 0, 0, 0], vec![0, 0, 1, -1]).unwrap();
        let inst = extract_instances(&l);
        assert_eq!(inst.len(), 2);
        assert_eq!(inst[0].points.len(), 2);
        assert_eq!(inst[1].points.len(), 1);

        let l = Labeling::new(vec![3, 1], vec![-1, -1]).unwrap();
        assert!(extract_instances(&l).is_empty());

        let l = Labeling::new(vec![1, 1, 2], vec![5, 5, 5]).unwrap();
        let inst = extract_instances(&l);
        assert_eq!(inst.len(), 1);
        assert_eq!(inst[0].class_id, 1);
    }

    #[test]
    fn majority_ties_go_low() {
        assert_eq!(majority_vote([2u32, 1, 2, 1]), Some(1));
        assert_eq!(majority_vote([-1i64, 4, 4]), Some(4));
        assert_eq!(majority_vote(Vec::<u32>::new()), None);
    }

    #[test]
    fn labeling_rejects_bad_ids() {
        assert!(Labeling::new(vec![0], vec![-2]).is_err());
        assert!(Labeling::new(vec![0, 1], vec![0]).is_err());
        let tax = SemanticTaxonomy::from_kinds([("ground", ClassKind::Stuff), ("tree", ClassKind::Thing)]).unwrap();
        let l = Labeling::new(vec![0, 1], vec![3, 3]).unwrap();
        assert!(l.validate(&tax, false).is_ok());
        assert!(l.validate(&tax, true).is_err());
        let l = Labeling::new(vec![2], vec![-1]).unwrap();
        assert!(l.validate(&tax, false).is_err());
    }

    #[test]
    fn taxonomy_requires_contiguous_ids() {
        let bad = vec![SemanticClass {
            id: 1,
            name: "x".into(),
            kind: ClassKind::Thing,
        }];
        assert!(SemanticTaxonomy::new(bad).is_err());
        assert!(SemanticTaxonomy::new(vec![]).is_err());
    }

    #[test]
    fn cloud_rejects_nan() {
        assert!(PointCloud::new(vec![[0.0, f64::NAN, 0.0]]).is_err());
        let c = PointCloud::new(vec![[0.0; 3]]).unwrap();
        assert!(c.with_attribute("intensity", vec![1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(
            a in proptest::collection::vec(0usize..40, 1..30),
            b in proptest::collection::vec(0usize..40, 1..30),
        ) {
            let (a, b) = (IndexSet::new(a), IndexSet::new(b));
            let ab = instance_iou(&a, &b).unwrap();
            let ba = instance_iou(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab == 1.0, a == b);
            prop_assert_eq!(ab == 0.0, a.intersection_len(&b) == 0);
        }

        #[test]
        fn extract_is_relabel_invariant(
            ids in proptest::collection::vec(-1i64..6, 0..60),
            shift in 1i64..100,
        ) {
            let sem = vec![1u32; ids.len()];
            let relabeled: Vec<i64> = ids.iter().map(|&i| if i < 0 { -1 } else { (5 - i) * 7 + shift }).collect();
            let a = extract_instances(&Labeling::new(sem.clone(), ids).unwrap());
            let b = extract_instances(&Labeling::new(sem, relabeled).unwrap());
            let mut sa: Vec<_> = a.into_iter().map(|i| i.points).collect();
            let mut sb: Vec<_> = b.into_iter().map(|i| i.points).collect();
            sa.sort();
            sb.sort();
            prop_assert_eq!(sa, sb);
        }
    }
}
