use std::collections::BTreeMap;

use panoseg::clustering::Setting;
use panoseg::features::codebook;
use panoseg::metrics::evaluate;
use panoseg::pcio::{format_cloud, parse_cloud, FeatureColumns, PipelineConfig, Profile};
use panoseg::pipeline::{segment, ProviderKind, ScorerKind, SegmentInput, SegmentOptions};
use panoseg::synth::{generate_scene, Scene, SceneSpec};
use panoseg::{Labeling, UNASSIGNED};

fn small_scene(seed: u64) -> Scene {
    let mut spec = SceneSpec {
        seed,
        extent: 30.0,
        ground_density: 4.0,
        ..SceneSpec::default()
    };
    spec.tree.count = 4;
    spec.car.count = 3;
    spec.pole.count = 3;
    generate_scene(&spec).unwrap()
}

fn options(provider: ProviderKind, scorer: ScorerKind, setting: Setting) -> SegmentOptions {
    let mut config = PipelineConfig::defaults(Profile::Npm3d);
    config.setting = setting;
    SegmentOptions {
        config,
        provider,
        scorer,
        workers: 2,
    }
}

/// Perfect network outputs for every point: one-hot classes, offsets to
/// the instance centroid and one codebook vector per instance.
fn perfect_columns(s: &Scene) -> FeatureColumns {
    let n = s.cloud.len();
    let ids: Vec<i64> = {
        let mut v: Vec<i64> = s
            .labels
            .instance()
            .iter()
            .copied()
            .filter(|&i| i != UNASSIGNED)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let codes = codebook(ids.len());
    let mut sums: BTreeMap<i64, ([f64; 3], f64)> = BTreeMap::new();
    for (p, &id) in s.cloud.positions().iter().zip(s.labels.instance()) {
        let e = sums.entry(id).or_insert(([0.0; 3], 0.0));
        for a in 0..3 {
            e.0[a] += p[a];
        }
        e.1 += 1.0;
    }
    let mut cols = FeatureColumns::new();
    for (a, name) in ["off_x", "off_y", "off_z"].into_iter().enumerate() {
        let v = (0..n)
            .map(|i| {
                let id = s.labels.instance()[i];
                if id == UNASSIGNED {
                    0.0
                } else {
                    let (sum, count) = sums[&id];
                    sum[a] / count - s.cloud.positions()[i][a]
                }
            })
            .collect();
        cols.insert(name, v);
    }
    for d in 0..5 {
        let v = s
            .labels
            .instance()
            .iter()
            .map(|&id| match ids.binary_search(&id) {
                Ok(k) => codes[k][d],
                Err(_) => 0.0,
            })
            .collect();
        cols.insert(format!("emb_{d}"), v);
    }
    for c in 0..s.taxonomy.len() as u32 {
        let v = s
            .labels
            .semantic()
            .iter()
            .map(|&x| if x == c { 1.0 } else { 0.0 })
            .collect();
        cols.insert(format!("p_{c}"), v);
    }
    cols
}

#[test]
fn oracle_round_trip_through_text_files() {
    let s = small_scene(4);
    let text = format_cloud(&s.cloud, Some(&s.labels), None).unwrap();
    let data = parse_cloud(text.as_bytes()).unwrap();
    let input = SegmentInput {
        cloud: &data.cloud,
        labels: data.labels.as_ref(),
        features: None,
        taxonomy: &s.taxonomy,
    };
    let out = segment(input, &options(ProviderKind::Oracle, ScorerKind::Oracle, Setting::IV)).unwrap();
    let written = format_cloud(&data.cloud, Some(&out.labels), None).unwrap();
    let pred = parse_cloud(written.as_bytes()).unwrap().labels.unwrap();
    let report = evaluate(&pred, &s.labels, &s.taxonomy, 0.5).unwrap();
    assert_eq!(report.panoptic.pq, Some(1.0));
    assert_eq!(out.report.counts.merged_instances, s.objects.len());
}

#[test]
fn file_features_recover_the_scene() {
    let s = small_scene(9);
    let cols = perfect_columns(&s);
    let input = SegmentInput {
        cloud: &s.cloud,
        labels: None,
        features: Some(&cols),
        taxonomy: &s.taxonomy,
    };
    let out = segment(input, &options(ProviderKind::File, ScorerKind::Consensus, Setting::IV)).unwrap();
    let report = evaluate(&out.labels, &s.labels, &s.taxonomy, 0.5).unwrap();
    assert_eq!(report.semantic.miou, Some(1.0));
    assert!(report.detection.f1 >= 0.9, "f1 {}", report.detection.f1);
}

#[test]
fn missing_feature_column_is_reported() {
    let s = small_scene(2);
    let mut cols = FeatureColumns::new();
    for (name, v) in perfect_columns(&s).columns() {
        if name != "emb_3" {
            cols.insert(name.clone(), v.clone());
        }
    }
    let input = SegmentInput {
        cloud: &s.cloud,
        labels: None,
        features: Some(&cols),
        taxonomy: &s.taxonomy,
    };
    let err = segment(input, &options(ProviderKind::File, ScorerKind::Consensus, Setting::I)).unwrap_err();
    assert!(err.is_input_error());
    assert!(err.to_string().contains("emb_3"), "{err}");
}

#[test]
fn stage_counts_shrink_through_pruning() {
    let s = small_scene(5);
    let input = SegmentInput {
        cloud: &s.cloud,
        labels: Some(&s.labels),
        features: None,
        taxonomy: &s.taxonomy,
    };
    let mut opts = options(ProviderKind::Oracle, ScorerKind::Consensus, Setting::V);
    opts.config.offset_sigma = 0.05;
    opts.config.embedding_sigma = 0.3;
    let c = segment(input, &opts).unwrap().report.counts;
    assert_eq!(
        c.prune.input,
        c.embedding_candidates + c.offset_candidates + c.raw_candidates
    );
    assert!(c.prune.input >= c.prune.after_size);
    assert!(c.prune.after_size >= c.prune.after_nms);
    assert!(c.prune.after_nms >= c.prune.after_score);
    assert!(c.prune.after_score >= c.block_instances);
    assert!(c.subsampled <= c.points);
}

#[test]
fn settings_change_only_the_candidate_pool() {
    let s = small_scene(8);
    let input = SegmentInput {
        cloud: &s.cloud,
        labels: Some(&s.labels),
        features: None,
        taxonomy: &s.taxonomy,
    };
    let two = segment(input, &options(ProviderKind::Oracle, ScorerKind::Oracle, Setting::II)).unwrap();
    let four = segment(input, &options(ProviderKind::Oracle, ScorerKind::Oracle, Setting::IV)).unwrap();
    assert_eq!(two.report.counts.embedding_candidates, 0);
    assert_eq!(
        two.report.counts.offset_candidates,
        four.report.counts.offset_candidates
    );
    assert_eq!(two.report.counts.blocks, four.report.counts.blocks);
    assert_eq!(two.subsampled, four.subsampled);
}

#[test]
fn unlabelled_input_needs_file_features() {
    let s = small_scene(1);
    let input = SegmentInput {
        cloud: &s.cloud,
        labels: None,
        features: None,
        taxonomy: &s.taxonomy,
    };
    let err = segment(input, &options(ProviderKind::File, ScorerKind::Consensus, Setting::IV)).unwrap_err();
    assert!(err.is_input_error());
    let labels = Labeling::new(vec![0; 3], vec![UNASSIGNED; 3]).unwrap();
    let bad = SegmentInput {
        labels: Some(&labels),
        ..input
    };
    assert!(segment(bad, &options(ProviderKind::Oracle, ScorerKind::Oracle, Setting::IV)).is_err());
}
