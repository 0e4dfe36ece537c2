//! Evaluation: semantic mIoU, instance coverage, detection precision and
//! recall, and panoptic quality. Undefined values are `None`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{
    extract_instances, iou_from_counts, membership, ClassId, IndexSet, InstanceId, Labeling, SemanticTaxonomy,
    UNASSIGNED,
};
use crate::pcio::format_sig9;

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticScores {
    /// IoU per class id; `None` when the class is absent from both sides.
    pub per_class: Vec<Option<f64>>,
    pub miou: Option<f64>,
}

fn check_lengths(pred: &Labeling, gt: &Labeling) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::contract(format!(
            "prediction has {} points, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn semantic_miou(pred: &Labeling, gt: &Labeling, taxonomy: &SemanticTaxonomy) -> Result<SemanticScores> {
    check_lengths(pred, gt)?;
    let c = taxonomy.len();
    let (mut inter, mut union) = (vec![0usize; c], vec![0usize; c]);
    for (&p, &g) in pred.semantic().iter().zip(gt.semantic()) {
        if p as usize >= c || g as usize >= c {
            return Err(Error::contract(format!("class id outside the taxonomy: {}", p.max(g))));
        }
        if p == g {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[g as usize] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| (union[k] > 0).then(|| inter[k] as f64 / union[k] as f64))
        .collect();
    let miou = mean(per_class.iter().flatten().copied());
    Ok(SemanticScores { per_class, miou })
}

/// Best IoU of each `gt` set against any of `pred`.
fn best_ious(pred: &[IndexSet], gt: &[IndexSet]) -> Vec<f64> {
    let owner = membership(pred);
    gt.iter()
        .map(|g| {
            let mut inter: HashMap<usize, usize> = HashMap::new();
            for p in g.iter() {
                for &k in owner.get(&p).into_iter().flatten() {
                    *inter.entry(k).or_default() += 1;
                }
            }
            inter
                .iter()
                .map(|(&k, &n)| iou_from_counts(n, pred[k].len(), g.len()))
                .fold(0.0, f64::max)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coverage {
    pub mcov: Option<f64>,
    pub mwcov: Option<f64>,
}

pub fn coverage(pred: &[IndexSet], gt: &[IndexSet]) -> Coverage {
    let best = best_ious(pred, gt);
    let total: usize = gt.iter().map(IndexSet::len).sum();
    Coverage {
        mcov: mean(best.iter().copied()),
        mwcov: (total > 0).then(|| {
            let weighted = gt.iter().zip(&best).fold(0.0, |acc, (g, b)| acc + g.len() as f64 * b);
            weighted / total as f64
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matching {
    /// (pred index, gt index, IoU) of true positives.
    pub tp: Vec<(usize, usize, f64)>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
}

/// Greedy one-to-one matching by decreasing IoU; a pair is a true positive
/// iff its IoU exceeds `threshold`.
pub fn match_instances(pred: &[IndexSet], gt: &[IndexSet], threshold: f64) -> Matching {
    let owner = membership(pred);
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (j, g) in gt.iter().enumerate() {
        let mut inter: BTreeMap<usize, usize> = BTreeMap::new();
        for p in g.iter() {
            for &k in owner.get(&p).into_iter().flatten() {
                *inter.entry(k).or_default() += 1;
            }
        }
        for (k, n) in inter {
            pairs.push((iou_from_counts(n, pred[k].len(), g.len()), k, j));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut pred_used, mut gt_used) = (vec![false; pred.len()], vec![false; gt.len()]);
    let mut tp = Vec::new();
    for (iou, k, j) in pairs {
        if iou <= threshold {
            break;
        }
        if !pred_used[k] && !gt_used[j] {
            pred_used[k] = true;
            gt_used[j] = true;
            tp.push((k, j, iou));
        }
    }
    Matching {
        tp,
        fp: (0..pred.len()).filter(|&k| !pred_used[k]).collect(),
        fn_: (0..gt.len()).filter(|&j| !gt_used[j]).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: f64,
    pub matching: Matching,
}

pub fn detection_prf(pred: &[IndexSet], gt: &[IndexSet], threshold: f64) -> Detection {
    let matching = match_instances(pred, gt, threshold);
    let tp = matching.tp.len() as f64;
    let precision = (!pred.is_empty()).then(|| tp / pred.len() as f64);
    let recall = (!gt.is_empty()).then(|| tp / gt.len() as f64);
    let (p, r) = (precision.unwrap_or(0.0), recall.unwrap_or(0.0));
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    Detection {
        precision,
        recall,
        f1,
        matching,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassPanoptic {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ClassPanoptic {
    fn from_matches(iou_sum: f64, tp: usize, fp: usize, fn_: usize) -> Option<Self> {
        let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
        (denom > 0.0).then(|| ClassPanoptic {
            pq: iou_sum / denom,
            sq: if tp > 0 { iou_sum / tp as f64 } else { 0.0 },
            rq: tp as f64 / denom,
            tp,
            fp,
            fn_,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panoptic {
    pub per_class: Vec<Option<ClassPanoptic>>,
    pub pq: Option<f64>,
    pub sq: Option<f64>,
    pub rq: Option<f64>,
}

fn thing_segments(l: &Labeling, class: ClassId) -> Vec<IndexSet> {
    let mut seg: BTreeMap<InstanceId, Vec<usize>> = BTreeMap::new();
    for (i, (&c, &ins)) in l.semantic().iter().zip(l.instance()).enumerate() {
        if c == class && ins != UNASSIGNED {
            seg.entry(ins).or_default().push(i);
        }
    }
    seg.into_values().map(IndexSet::new).collect()
}

/// Panoptic, segmentation and recognition quality. Thing segments are the
/// (class, instance) groups; a stuff class is one segment per side. Segments
/// match at IoU above `threshold`. Means run over classes present in `gt`.
pub fn panoptic_quality(
    pred: &Labeling,
    gt: &Labeling,
    taxonomy: &SemanticTaxonomy,
    threshold: f64,
) -> Result<Panoptic> {
    check_lengths(pred, gt)?;
    let mut per_class = Vec::with_capacity(taxonomy.len());
    for class in taxonomy.classes() {
        let (p, g) = if taxonomy.is_thing(class.id) {
            (thing_segments(pred, class.id), thing_segments(gt, class.id))
        } else {
            let whole = |l: &Labeling| -> Vec<IndexSet> {
                let s: Vec<usize> = (0..l.len()).filter(|&i| l.semantic()[i] == class.id).collect();
                if s.is_empty() {
                    vec![]
                } else {
                    vec![IndexSet::new(s)]
                }
            };
            (whole(pred), whole(gt))
        };
        let m = match_instances(&p, &g, threshold);
        let iou_sum = m.tp.iter().fold(0.0, |acc, t| acc + t.2);
        per_class.push(ClassPanoptic::from_matches(
            iou_sum,
            m.tp.len(),
            m.fp.len(),
            m.fn_.len(),
        ));
    }
    let present: Vec<&ClassPanoptic> = taxonomy
        .classes()
        .iter()
        .filter(|c| gt.semantic().contains(&c.id))
        .filter_map(|c| per_class[c.id as usize].as_ref())
        .collect();
    Ok(Panoptic {
        pq: mean(present.iter().map(|c| c.pq)),
        sq: mean(present.iter().map(|c| c.sq)),
        rq: mean(present.iter().map(|c| c.rq)),
        per_class,
    })
}

/// Fraction of point pairs on which two partitions agree; `-1` is an
/// ordinary label here.
pub fn rand_index(a: &[InstanceId], b: &[InstanceId]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract("partitions differ in length"));
    }
    let n = a.len() as u128;
    if n < 2 {
        return Ok(1.0);
    }
    let pairs = |k: u128| k * k.saturating_sub(1) / 2;
    let mut joint: HashMap<(InstanceId, InstanceId), u128> = HashMap::new();
    let mut ra: HashMap<InstanceId, u128> = HashMap::new();
    let mut rb: HashMap<InstanceId, u128> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let both: u128 = joint.values().map(|&k| pairs(k)).sum();
    let sa: u128 = ra.values().map(|&k| pairs(k)).sum();
    let sb: u128 = rb.values().map(|&k| pairs(k)).sum();
    let total = pairs(n);
    let agree = total + 2 * both - sa - sb;
    Ok(agree as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub semantic: SemanticScores,
    pub coverage: Coverage,
    pub detection: Detection,
    pub panoptic: Panoptic,
}

/// All metrics for one prediction. Instances for coverage and detection are
/// class-agnostic groups of equal instance id.
pub fn evaluate(
    pred: &Labeling,
    gt: &Labeling,
    taxonomy: &SemanticTaxonomy,
    match_threshold: f64,
) -> Result<MetricsReport> {
    check_lengths(pred, gt)?;
    let sets = |l: &Labeling| -> Vec<IndexSet> { extract_instances(l).into_iter().map(|i| i.points).collect() };
    let (p, g) = (sets(pred), sets(gt));
    Ok(MetricsReport {
        class_names: taxonomy.classes().iter().map(|c| c.name.clone()).collect(),
        semantic: semantic_miou(pred, gt, taxonomy)?,
        coverage: coverage(&p, &g),
        detection: detection_prf(&p, &g, match_threshold),
        panoptic: panoptic_quality(pred, gt, taxonomy, match_threshold)?,
    })
}

fn show(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), format_sig9)
}

impl MetricsReport {
    /// Metric name and value pairs in report order.
    pub fn entries(&self) -> Vec<(String, Option<f64>)> {
        let mut out = vec![
            ("miou".to_string(), self.semantic.miou),
            ("mcov".to_string(), self.coverage.mcov),
            ("mwcov".to_string(), self.coverage.mwcov),
            ("mprec".to_string(), self.detection.precision),
            ("mrec".to_string(), self.detection.recall),
            ("f1".to_string(), Some(self.detection.f1)),
            ("pq".to_string(), self.panoptic.pq),
            ("sq".to_string(), self.panoptic.sq),
            ("rq".to_string(), self.panoptic.rq),
        ];
        for (name, iou) in self.class_names.iter().zip(&self.semantic.per_class) {
            out.push((format!("iou.{name}"), *iou));
        }
        for (name, pc) in self.class_names.iter().zip(&self.panoptic.per_class) {
            out.push((format!("pq.{name}"), pc.map(|c| c.pq)));
            out.push((format!("sq.{name}"), pc.map(|c| c.sq)));
            out.push((format!("rq.{name}"), pc.map(|c| c.rq)));
        }
        out
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries().into_iter().find(|(k, _)| k == key).and_then(|(_, v)| v)
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {}", show(v));
        }
        s
    }

    /// Tab-separated `metric value` table with a header.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tvalue\n");
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}\t{}", show(v));
        }
        s
    }

    /// Detection matches: `tp pred gt iou`, `fp pred`, `fn gt` lines, indices
    /// into the instance lists ordered by instance id.
    pub fn format_matches(&self) -> String {
        let m = &self.detection.matching;
        let mut s = String::new();
        for (k, j, iou) in &m.tp {
            let _ = writeln!(s, "tp {k} {j} {}", format_sig9(*iou));
        }
        for k in &m.fp {
            let _ = writeln!(s, "fp {k}");
        }
        for j in &m.fn_ {
            let _ = writeln!(s, "fn {j}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ClassKind;
    use proptest::prelude::*;

    fn taxonomy() -> SemanticTaxonomy {
        SemanticTaxonomy::from_kinds([
            ("ground", ClassKind::Stuff),
            ("tree", ClassKind::Thing),
            ("car", ClassKind::Thing),
            ("pole", ClassKind::Thing),
        ])
        .unwrap()
    }

    fn set(r: std::ops::Range<usize>) -> IndexSet {
        IndexSet::new(r.collect())
    }

    #[test]
    fn miou_examples() {
        let gt = Labeling::new(vec![0, 0, 1, 1, 2, 2], vec![-1; 6]).unwrap();
        let s = semantic_miou(&gt, &gt, &taxonomy()).unwrap();
        assert_eq!(s.per_class, vec![Some(1.0), Some(1.0), Some(1.0), None]);
        assert_eq!(s.miou, Some(1.0));

        // binary: n = 4 points of class 1, half predicted as class 0
        let gt = Labeling::new(vec![1, 1, 1, 1, 0, 0, 0, 0], vec![-1; 8]).unwrap();
        let pred = Labeling::new(vec![1, 1, 0, 0, 0, 0, 1, 1], vec![-1; 8]).unwrap();
        let s = semantic_miou(&pred, &gt, &taxonomy()).unwrap();
        assert!((s.per_class[1].unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(semantic_miou(&pred, &Labeling::new(vec![0], vec![-1]).unwrap(), &taxonomy()).is_err());
    }

    #[test]
    fn coverage_examples() {
        let gt = [set(0..10), set(10..40)];
        let c = coverage(&gt, &gt);
        assert_eq!((c.mcov, c.mwcov), (Some(1.0), Some(1.0)));
        let c = coverage(&[], &gt);
        assert_eq!((c.mcov, c.mwcov), (Some(0.0), Some(0.0)));
        let c = coverage(&[set(0..10), set(10..25)], &gt);
        assert_eq!(c.mcov, Some(0.75));
        assert_eq!(c.mwcov, Some(0.625));
        assert_eq!(coverage(&gt, &[]).mcov, None);
    }

    #[test]
    fn detection_examples() {
        let gt = [set(0..10), set(10..20)];
        let d = detection_prf(&gt, &gt, 0.5);
        assert_eq!((d.precision, d.recall, d.f1), (Some(1.0), Some(1.0), 1.0));

        // IoU 6/10 against gt 0, and a spurious one
        let pred = [set(0..6), set(50..60)];
        let d = detection_prf(&pred, &gt, 0.5);
        assert_eq!((d.precision, d.recall, d.f1), (Some(0.5), Some(0.5), 0.5));
        assert_eq!(d.matching.tp, vec![(0, 0, 0.6)]);

        let d = detection_prf(&[set(0..5)], &[set(0..10)], 0.5);
        assert!(d.matching.tp.is_empty());
    }

    #[test]
    fn panoptic_examples() {
        let t = taxonomy();
        let gt = Labeling::new(vec![1; 10], vec![4; 10]).unwrap();
        let p = panoptic_quality(&gt, &gt, &t, 0.5).unwrap();
        assert_eq!((p.pq, p.sq, p.rq), (Some(1.0), Some(1.0), Some(1.0)));

        // prediction covers 6 of 10 gt points: IoU 0.6
        let mut ins = vec![0; 6];
        ins.extend([-1; 4]);
        let pred = Labeling::new(vec![1; 10], ins).unwrap();
        let c = panoptic_quality(&pred, &gt, &t, 0.5).unwrap().per_class[1].unwrap();
        assert!((c.pq - 0.6).abs() < 1e-15 && (c.sq - 0.6).abs() < 1e-15 && c.rq == 1.0);

        let pred = Labeling::new(vec![1; 10], vec![-1; 10]).unwrap();
        let c = panoptic_quality(&pred, &gt, &t, 0.5).unwrap().per_class[1].unwrap();
        assert_eq!((c.pq, c.rq, c.fn_), (0.0, 0.0, 1));
    }

    #[test]
    fn rand_index_basics() {
        assert_eq!(rand_index(&[1, 1, 2, -1], &[7, 7, 3, 5]).unwrap(), 1.0);
        // pairs: (0,1) agree-same, (0,2) disagree, (1,2) disagree
        assert!((rand_index(&[1, 1, 1], &[1, 1, 2]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn report_formats() {
        let gt = Labeling::new(vec![0, 1, 1], vec![-1, 2, 2]).unwrap();
        let r = evaluate(&gt, &gt, &taxonomy(), 0.5).unwrap();
        let text = r.to_text();
        assert!(text.contains("pq = 1\n"));
        assert!(text.contains("iou.pole = none\n"));
        assert!(r.to_tsv().starts_with("metric\tvalue\nmiou\t1\n"));
        assert_eq!(r.get("f1"), Some(1.0));
        assert_eq!(r.format_matches(), "tp 0 0 1\n");
    }

    fn arb_labeling() -> impl Strategy<Value = Labeling> {
        proptest::collection::vec((0u32..4, -1i64..5), 1..80).prop_map(|v| {
            let (s, i): (Vec<_>, Vec<_>) = v
                .into_iter()
                .map(|(c, ins)| if c == 0 { (c, -1) } else { (c, ins) })
                .unzip();
            Labeling::new(s, i).unwrap()
        })
    }

    proptest! {
        #[test]
        fn pq_decomposes(pred in arb_labeling(), seed in 0u64..1000) {
            let gt = Labeling::new(
                pred.semantic().iter().enumerate().map(|(i, &c)| if (i as u64 + seed) % 5 == 0 { 1 } else { c }).collect(),
                pred.instance().iter().enumerate().map(|(i, &x)| if (i as u64 * seed) % 3 == 0 { x } else { 2 }).collect(),
            ).unwrap();
            let p = panoptic_quality(&pred, &gt, &taxonomy(), 0.5).unwrap();
            for c in p.per_class.iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&c.pq));
                if c.tp > 0 {
                    prop_assert!((c.pq - c.sq * c.rq).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn metrics_relabel_invariant(gt in arb_labeling(), shift in 1i64..50) {
            let relabeled = Labeling::new(
                gt.semantic().to_vec(),
                gt.instance().iter().map(|&i| if i < 0 { i } else { (i + shift) * 3 }).collect(),
            ).unwrap();
            let a = evaluate(&gt, &gt, &taxonomy(), 0.5).unwrap();
            let b = evaluate(&relabeled, &gt, &taxonomy(), 0.5).unwrap();
            prop_assert_eq!(a.to_text(), b.to_text());
        }

        #[test]
        fn removing_spurious_prediction_helps(
            gt_sets in proptest::collection::vec((0usize..50, 1usize..20), 1..6),
            spurious in (100usize..150, 1usize..20),
        ) {
            let gt: Vec<IndexSet> = gt_sets.iter().map(|&(s, l)| set(s..s + l)).collect();
            let mut pred = gt.clone();
            let without = detection_prf(&pred, &gt, 0.5);
            pred.push(set(spurious.0..spurious.0 + spurious.1));
            let with = detection_prf(&pred, &gt, 0.5);
            prop_assert!(without.precision >= with.precision);
        }
    }
}
