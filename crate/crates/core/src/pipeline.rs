//! End-to-end segmentation: subsample, cut grid cylinders, provide features,
//! generate, score and prune candidates per block, merge, upsample.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::clustering::{generate_candidates, ClusterParams};
use crate::error::{Error, Result, Stage, StageExt};
use crate::features::{file_provide, FeatureSet, OracleNoise, OracleProvider};
use crate::merge::{block_merge, upsample_labels, BlockLabels, GlobalPanoptic, SemanticVote};
use crate::model::{Labeling, Origin, PointCloud, SemanticTaxonomy};
use crate::pcio::{CandidateBlock, FeatureColumns, PipelineConfig};
use crate::sampling::{grid_centers, voxel_subsample, Block, CylinderIndex, VoxelMap};
use crate::selection::{prune, ConsensusScorer, OracleScorer, PruneCounts, PruneParams, Scorer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    /// Features emulated from ground-truth labels.
    Oracle,
    /// Features read from `off_*`, `emb_*` and `p_*` columns.
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorerKind {
    Oracle,
    Consensus,
}

impl std::str::FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "file" => Ok(Self::File),
            _ => Err(Error::invalid(format!("unknown provider `{s}` (oracle|file)"))),
        }
    }
}

impl std::str::FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "consensus" => Ok(Self::Consensus),
            _ => Err(Error::invalid(format!("unknown scorer `{s}` (oracle|consensus)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SegmentOptions {
    pub config: PipelineConfig,
    pub provider: ProviderKind,
    pub scorer: ScorerKind,
    /// Worker threads; 0 uses the rayon default.
    pub workers: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SegmentInput<'a> {
    pub cloud: &'a PointCloud,
    pub labels: Option<&'a Labeling>,
    pub features: Option<&'a FeatureColumns>,
    pub taxonomy: &'a SemanticTaxonomy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StageCounts {
    pub points: usize,
    pub subsampled: usize,
    pub grid_centers: usize,
    pub blocks: usize,
    pub embedding_candidates: usize,
    pub offset_candidates: usize,
    pub raw_candidates: usize,
    pub prune: PruneCounts,
    pub block_instances: usize,
    pub merged_instances: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub timings: Vec<(Stage, Duration)>,
    pub counts: StageCounts,
}

impl RunReport {
    pub fn counts_text(&self) -> String {
        let c = &self.counts;
        let rows = [
            ("points", c.points),
            ("subsampled", c.subsampled),
            ("grid_centers", c.grid_centers),
            ("blocks", c.blocks),
            ("candidates.embedding", c.embedding_candidates),
            ("candidates.offset", c.offset_candidates),
            ("candidates.raw", c.raw_candidates),
            ("prune.input", c.prune.input),
            ("prune.after_size", c.prune.after_size),
            ("prune.after_nms", c.prune.after_nms),
            ("prune.after_score", c.prune.after_score),
            ("block_instances", c.block_instances),
            ("merged_instances", c.merged_instances),
        ];
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn timings_text(&self) -> String {
        let mut s = String::new();
        for (stage, d) in &self.timings {
            let _ = writeln!(s, "time.{stage} = {:.3}s", d.as_secs_f64());
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct SegmentOutput {
    /// Final labels of the original points.
    pub labels: Labeling,
    pub subsampled: PointCloud,
    pub merged: GlobalPanoptic,
    /// Scored candidates of every non-empty block before pruning.
    pub candidates: Vec<CandidateBlock>,
    pub report: RunReport,
}

/// Per-voxel means of every feature column.
pub fn subsample_features(map: &VoxelMap, columns: &FeatureColumns) -> Result<FeatureColumns> {
    let mut out = FeatureColumns::new();
    for (name, values) in columns.columns() {
        if values.len() != map.original_len() {
            return Err(Error::contract(format!(
                "feature column `{name}` does not match the cloud"
            )));
        }
        out.insert(name.clone(), map.reduce_mean(values));
    }
    Ok(out)
}

struct BlockResult {
    candidates: CandidateBlock,
    labels: BlockLabels,
    prune: PruneCounts,
}

enum Provider {
    Oracle(OracleProvider),
    File(FeatureColumns),
}

fn timed<T>(timings: &mut Vec<(Stage, Duration)>, stage: Stage, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().stage(stage);
    timings.push((stage, start.elapsed()));
    out
}

pub fn segment(input: SegmentInput<'_>, options: &SegmentOptions) -> Result<SegmentOutput> {
    let cfg = &options.config;
    cfg.validate()?;
    let taxonomy = input.taxonomy;
    if let Some(l) = input.labels {
        if l.len() != input.cloud.len() {
            return Err(Error::invalid("labels do not match the cloud"));
        }
        l.validate(taxonomy, false)?;
    }
    let mut report = RunReport::default();
    report.counts.points = input.cloud.len();
    if input.cloud.is_empty() {
        return Ok(SegmentOutput {
            labels: Labeling::new(vec![], vec![])?,
            subsampled: PointCloud::default(),
            merged: GlobalPanoptic {
                instance: vec![],
                semantic: vec![],
            },
            candidates: vec![],
            report,
        });
    }
    let needs_gt = options.provider == ProviderKind::Oracle || options.scorer == ScorerKind::Oracle;
    if needs_gt && input.labels.is_none() {
        return Err(Error::contract(
            "the oracle provider and scorer need ground-truth labels",
        ));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;

    let mut timings = Vec::new();
    let sub = timed(&mut timings, Stage::Subsample, || {
        voxel_subsample(input.cloud, input.labels, cfg.voxel_size)
    })?;
    report.counts.subsampled = sub.cloud.len();

    let provider = match options.provider {
        ProviderKind::Oracle => {
            let noise = OracleNoise {
                sem_flip_prob: cfg.sem_flip_prob,
                offset_sigma: cfg.offset_sigma,
                embedding_sigma: cfg.embedding_sigma,
            };
            let gt = sub.labels.clone().expect("checked above");
            Provider::Oracle(OracleProvider::new(gt, taxonomy.clone(), noise).stage(Stage::Features)?)
        }
        ProviderKind::File => {
            let cols = input
                .features
                .ok_or_else(|| Error::Format("the file provider needs feature columns".into()))
                .stage(Stage::Features)?;
            Provider::File(subsample_features(&sub.map, cols).stage(Stage::Features)?)
        }
    };
    let scorer: Box<dyn Scorer> = match options.scorer {
        ScorerKind::Oracle => Box::new(OracleScorer::new(sub.labels.as_ref().expect("checked above"))),
        ScorerKind::Consensus => Box::new(ConsensusScorer),
    };

    let (blocks, centers) = timed(&mut timings, Stage::Blocks, || {
        let (lo, hi) = sub.cloud.bounds_xy().expect("non-empty cloud");
        let centers = grid_centers(lo, hi, cfg.grid_step())?;
        let index = CylinderIndex::new(&sub.cloud);
        let blocks: Vec<Block> = pool.install(|| {
            centers
                .par_iter()
                .map(|&c| index.cut(c, cfg.cylinder_radius))
                .collect::<Result<Vec<_>>>()
        })?;
        Ok((
            blocks.into_iter().filter(|b| !b.is_empty()).collect::<Vec<_>>(),
            centers.len(),
        ))
    })?;
    report.counts.grid_centers = centers;
    report.counts.blocks = blocks.len();

    let cluster = ClusterParams {
        region_growing_radius: cfg.region_growing_radius,
        meanshift_bandwidth: cfg.meanshift_bandwidth,
        meanshift_max_iter: cfg.meanshift_max_iter,
        meanshift_tol: cfg.meanshift_tol,
        setting: cfg.setting,
    };
    let prune_params = PruneParams {
        min_size: cfg.min_cluster_size,
        score_threshold: cfg.score_threshold,
        nms_iou: cfg.nms_iou_threshold,
    };

    let start = Instant::now();
    let results: Vec<BlockResult> = pool.install(|| {
        blocks
            .par_iter()
            .enumerate()
            .map(|(k, block)| {
                let features: FeatureSet = match &provider {
                    Provider::Oracle(p) => p.provide(block, cfg.seed, k as u64),
                    Provider::File(cols) => file_provide(block, cols, taxonomy.len()),
                }
                .stage(Stage::Features)?;
                let raw = generate_candidates(block, &features, taxonomy, &cluster).stage(Stage::Candidates)?;
                let scores = scorer.score_block(block, &raw).stage(Stage::Scoring)?;
                let scored = raw
                    .into_iter()
                    .zip(scores)
                    .map(|(c, s)| c.with_score(s))
                    .collect::<Result<Vec<_>>>()
                    .stage(Stage::Scoring)?;
                let pruned = prune(scored.clone(), &prune_params).stage(Stage::Prune)?;
                let votes = block
                    .global_ids()
                    .iter()
                    .enumerate()
                    .map(|(i, point)| SemanticVote {
                        point,
                        class_id: features.predicted_class(i),
                        confidence: features.max_prob(i),
                    })
                    .collect();
                Ok(BlockResult {
                    labels: BlockLabels {
                        center: block.center(),
                        instances: pruned.instances().map(|(_, o)| o.clone()).collect(),
                        votes,
                    },
                    candidates: CandidateBlock {
                        center: block.center(),
                        candidates: scored,
                    },
                    prune: pruned.counts,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    timings.push((Stage::Candidates, start.elapsed()));

    let mut candidates = Vec::with_capacity(results.len());
    let mut block_labels = Vec::with_capacity(results.len());
    for r in results {
        for c in &r.candidates.candidates {
            match c.origin() {
                Origin::Embedding => report.counts.embedding_candidates += 1,
                Origin::Offset => report.counts.offset_candidates += 1,
                Origin::Raw => report.counts.raw_candidates += 1,
            }
        }
        report.counts.prune += r.prune;
        report.counts.block_instances += r.labels.instances.len();
        candidates.push(r.candidates);
        block_labels.push(r.labels);
    }

    let merged = timed(&mut timings, Stage::Merge, || {
        block_merge(&block_labels, sub.cloud.len(), cfg.merge_iou_threshold)
    })?;
    report.counts.merged_instances = merged.num_instances();

    let labels = timed(&mut timings, Stage::Upsample, || {
        pool.install(|| upsample_labels(input.cloud, &sub.cloud, &merged, taxonomy))
    })?;
    report.timings = timings;

    Ok(SegmentOutput {
        labels,
        subsampled: sub.cloud,
        merged,
        candidates,
        report,
    })
}

/// Prunes stored per-block candidates and merges them over `num_points`
/// subsampled points. Returns the instance label per point.
pub fn merge_candidate_blocks(
    blocks: &[CandidateBlock],
    num_points: usize,
    config: &PipelineConfig,
) -> Result<(GlobalPanoptic, PruneCounts)> {
    let params = PruneParams {
        min_size: config.min_cluster_size,
        score_threshold: config.score_threshold,
        nms_iou: config.nms_iou_threshold,
    };
    let mut counts = PruneCounts::default();
    let mut labels = Vec::with_capacity(blocks.len());
    for b in blocks {
        let pruned = prune(b.candidates.clone(), &params).stage(Stage::Prune)?;
        counts += pruned.counts;
        labels.push(BlockLabels {
            center: b.center,
            instances: pruned.instances().map(|(_, o)| o.clone()).collect(),
            votes: pruned
                .instances()
                .flat_map(|(c, o)| {
                    o.iter().map(|point| SemanticVote {
                        point,
                        class_id: c.class_id(),
                        confidence: c.score(),
                    })
                })
                .collect(),
        });
    }
    let merged = block_merge(&labels, num_points, config.merge_iou_threshold).stage(Stage::Merge)?;
    Ok((merged, counts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::evaluate;
    use crate::pcio::Profile;
    use crate::synth::{generate_scene, SceneSpec};

    fn small_scene() -> crate::synth::Scene {
        let mut spec = SceneSpec {
            extent: 20.0,
            seed: 5,
            ..Default::default()
        };
        spec.set("tree_count", "3").unwrap();
        spec.set("car_count", "2").unwrap();
        spec.set("pole_count", "2").unwrap();
        generate_scene(&spec).unwrap()
    }

    fn options(workers: usize) -> SegmentOptions {
        let mut config = PipelineConfig::defaults(Profile::Npm3d);
        config.cylinder_radius = 12.0;
        SegmentOptions {
            config,
            provider: ProviderKind::Oracle,
            scorer: ScorerKind::Oracle,
            workers,
        }
    }

    #[test]
    fn oracle_round_trip_small() {
        let scene = small_scene();
        let input = SegmentInput {
            cloud: &scene.cloud,
            labels: Some(&scene.labels),
            features: None,
            taxonomy: &scene.taxonomy,
        };
        let out = segment(input, &options(2)).unwrap();
        let r = evaluate(&out.labels, &scene.labels, &scene.taxonomy, 0.5).unwrap();
        assert_eq!(r.panoptic.pq, Some(1.0), "{}", r.to_text());
        assert_eq!(out.report.counts.merged_instances, 7);
        let c = out.report.counts.prune;
        assert!(c.input >= c.after_size && c.after_size >= c.after_nms && c.after_nms >= c.after_score);
    }

    #[test]
    fn worker_count_does_not_matter() {
        let scene = small_scene();
        let input = SegmentInput {
            cloud: &scene.cloud,
            labels: Some(&scene.labels),
            features: None,
            taxonomy: &scene.taxonomy,
        };
        let mut o1 = options(1);
        o1.config.offset_sigma = 0.1;
        o1.config.embedding_sigma = 0.3;
        o1.scorer = ScorerKind::Consensus;
        let mut o4 = o1.clone();
        o4.workers = 4;
        let a = segment(input, &o1).unwrap();
        let b = segment(input, &o4).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.candidates, b.candidates);
    }

    #[test]
    fn empty_cloud_is_noop() {
        let scene = small_scene();
        let cloud = PointCloud::default();
        let input = SegmentInput {
            cloud: &cloud,
            labels: None,
            features: None,
            taxonomy: &scene.taxonomy,
        };
        let out = segment(input, &options(1)).unwrap();
        assert!(out.labels.is_empty());
    }

    #[test]
    fn oracle_needs_labels() {
        let scene = small_scene();
        let input = SegmentInput {
            cloud: &scene.cloud,
            labels: None,
            features: None,
            taxonomy: &scene.taxonomy,
        };
        assert!(matches!(segment(input, &options(1)), Err(Error::Contract(_))));
    }
}
