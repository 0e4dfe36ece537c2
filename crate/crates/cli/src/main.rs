use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use panoseg::clustering::Setting;
use panoseg::losses::gradcheck::run_gradchecks;
use panoseg::merge::{upsample_labels, GlobalPanoptic};
use panoseg::metrics::evaluate;
use panoseg::pcio::{
    format_sig9, format_taxonomy, read_candidate_blocks, read_cloud, read_config, read_taxonomy,
    write_candidate_blocks, write_cloud, PipelineConfig, Profile,
};
use panoseg::pipeline::{
    merge_candidate_blocks, segment, subsample_features, ProviderKind, ScorerKind, SegmentInput, SegmentOptions,
};
use panoseg::sampling::{class_balanced_centers, grid_centers, voxel_subsample, CylinderIndex};
use panoseg::synth::{generate_scene, read_scene_spec, synthetic_taxonomy, SceneSpec};
use panoseg::{Error, Labeling, Result, SemanticTaxonomy};

#[derive(Parser)]
#[command(
    name = "panoseg",
    version,
    about = "Bottom-up panoptic segmentation of LiDAR point clouds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled scene.
    Synth(SynthArgs),
    /// Voxel-subsample a cloud, averaging features and voting labels.
    Subsample(SubsampleArgs),
    /// List block centres and their point counts.
    Blocks(BlocksArgs),
    /// Run the full pipeline and write labels for every input point.
    Segment(SegmentArgs),
    /// Prune and merge stored per-block candidates.
    Merge(MergeArgs),
    /// Compare predicted labels against ground truth.
    Eval(EvalArgs),
    /// Check analytic loss gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

/// Options shared by the pipeline commands. Flags override config values.
#[derive(Args)]
struct ConfigArgs {
    /// Key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "npm3d")]
    profile: Profile,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    voxel_size: Option<f64>,
    #[arg(long)]
    cylinder_radius: Option<f64>,
    #[arg(long)]
    grid_step: Option<f64>,
    #[arg(long)]
    region_growing_radius: Option<f64>,
    #[arg(long)]
    meanshift_bandwidth: Option<f64>,
    #[arg(long)]
    min_cluster_size: Option<usize>,
    #[arg(long)]
    score_threshold: Option<f64>,
    #[arg(long)]
    nms_iou_threshold: Option<f64>,
    #[arg(long)]
    merge_iou_threshold: Option<f64>,
    /// Candidate generators: I, II, III, IV or V.
    #[arg(long)]
    setting: Option<Setting>,
    /// Any other config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = read_config(self.config.as_deref(), self.profile)?;
        for kv in &self.sets {
            let (k, v) = split_assignment(kv)?;
            cfg.set(k, v)?;
        }
        let flags = [
            ("voxel_size", self.voxel_size.map(|v| v.to_string())),
            ("cylinder_radius", self.cylinder_radius.map(|v| v.to_string())),
            ("grid_step", self.grid_step.map(|v| v.to_string())),
            (
                "region_growing_radius",
                self.region_growing_radius.map(|v| v.to_string()),
            ),
            ("meanshift_bandwidth", self.meanshift_bandwidth.map(|v| v.to_string())),
            ("min_cluster_size", self.min_cluster_size.map(|v| v.to_string())),
            ("score_threshold", self.score_threshold.map(|v| v.to_string())),
            ("nms_iou_threshold", self.nms_iou_threshold.map(|v| v.to_string())),
            ("merge_iou_threshold", self.merge_iou_threshold.map(|v| v.to_string())),
            ("setting", self.setting.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Scene spec file; defaults are used for missing keys.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Override one scene key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, short)]
    output: PathBuf,
    /// Also write the taxonomy of the synthetic classes.
    #[arg(long)]
    taxonomy_out: Option<PathBuf>,
}

#[derive(Args)]
struct SubsampleArgs {
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct BlocksArgs {
    #[arg(long, short)]
    input: PathBuf,
    /// Draw this many class-balanced centres instead of the test-time grid.
    #[arg(long, value_name = "K")]
    class_balanced: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    /// Taxonomy file; defaults to the synthetic classes.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long, default_value = "oracle")]
    provider: ProviderKind,
    #[arg(long, default_value = "oracle")]
    scorer: ScorerKind,
    /// Worker threads; 0 picks one per core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Write the scored per-block candidates to this file.
    #[arg(long)]
    candidates_out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct MergeArgs {
    /// Subsampled cloud the candidate ids refer to, with a `sem` column.
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// Directory for `metrics.txt`, `metrics.tsv` and `matches.txt`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
}

fn split_assignment(kv: &str) -> Result<(&str, &str)> {
    kv.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Error::InvalidArgument(format!("expected key=value, got `{kv}`")))
}

/// Attaches the file name to I/O errors.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

/// Writes to stdout, treating a closed pipe as success.
fn emit(text: &str) -> Result<()> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn load_taxonomy(path: Option<&Path>) -> Result<SemanticTaxonomy> {
    match path {
        Some(p) => at(p, read_taxonomy(p)),
        None => Ok(synthetic_taxonomy()),
    }
}

fn labels_of(path: &Path, what: &str) -> Result<(panoseg::PointCloud, Labeling)> {
    let data = at(path, read_cloud(path))?;
    let labels = data
        .labels
        .ok_or_else(|| Error::Format(format!("{what} cloud `{}` has no sem/ins columns", path.display())))?;
    Ok((data.cloud, labels))
}

fn run_synth(a: &SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => at(p, read_scene_spec(p))?,
        None => SceneSpec::default(),
    };
    for kv in &a.sets {
        let (k, v) = split_assignment(kv)?;
        spec.set(k, v)?;
    }
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let scene = generate_scene(&spec)?;
    at(
        &a.output,
        write_cloud(&a.output, &scene.cloud, Some(&scene.labels), None),
    )?;
    if let Some(p) = &a.taxonomy_out {
        at(p, fs::write(p, format_taxonomy(&scene.taxonomy)).map_err(Error::from))?;
    }
    println!("points = {}", scene.cloud.len());
    println!("instances = {}", scene.objects.len());
    Ok(())
}

fn run_subsample(a: &SubsampleArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let data = at(&a.input, read_cloud(&a.input))?;
    let sub = voxel_subsample(&data.cloud, data.labels.as_ref(), cfg.voxel_size)?;
    let features = data
        .features
        .as_ref()
        .map(|f| subsample_features(&sub.map, f))
        .transpose()?;
    at(
        &a.output,
        write_cloud(&a.output, &sub.cloud, sub.labels.as_ref(), features.as_ref()),
    )?;
    println!("points = {}", data.cloud.len());
    println!("subsampled = {}", sub.cloud.len());
    Ok(())
}

fn run_blocks(a: &BlocksArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let data = at(&a.input, read_cloud(&a.input))?;
    let centers = match a.class_balanced {
        Some(k) => {
            let labels = data
                .labels
                .as_ref()
                .ok_or_else(|| Error::Format("class-balanced sampling needs a `sem` column".into()))?;
            class_balanced_centers(&data.cloud, labels, k, cfg.seed)?
        }
        None => match data.cloud.bounds_xy() {
            Some((lo, hi)) => grid_centers(lo, hi, cfg.grid_step())?,
            None => vec![],
        },
    };
    let index = CylinderIndex::new(&data.cloud);
    let mut out = String::from("# center_x center_y points\n");
    for c in centers {
        let block = index.cut(c, cfg.cylinder_radius)?;
        let _ = writeln!(out, "{} {} {}", format_sig9(c[0]), format_sig9(c[1]), block.len());
    }
    emit(&out)
}

fn run_segment(a: &SegmentArgs) -> Result<()> {
    let config = a.cfg.resolve()?;
    let taxonomy = load_taxonomy(a.taxonomy.as_deref())?;
    let data = at(&a.input, read_cloud(&a.input))?;
    let options = SegmentOptions {
        config,
        provider: a.provider,
        scorer: a.scorer,
        workers: a.workers,
    };
    let input = SegmentInput {
        cloud: &data.cloud,
        labels: data.labels.as_ref(),
        features: data.features.as_ref(),
        taxonomy: &taxonomy,
    };
    let out = segment(input, &options)?;
    at(&a.output, write_cloud(&a.output, &data.cloud, Some(&out.labels), None))?;
    if let Some(p) = &a.candidates_out {
        at(p, write_candidate_blocks(p, &out.candidates))?;
    }
    emit(&out.report.counts_text())?;
    emit(&out.report.timings_text())
}

fn run_merge(a: &MergeArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let taxonomy = load_taxonomy(a.taxonomy.as_deref())?;
    let (cloud, base) = labels_of(&a.input, "input")?;
    let blocks = at(&a.candidates, read_candidate_blocks(&a.candidates))?;
    let (merged, counts) = merge_candidate_blocks(&blocks, cloud.len(), &cfg)?;
    // points outside every kept candidate keep their input class
    let semantic = merged
        .semantic
        .iter()
        .zip(base.semantic())
        .map(|(fused, &c)| Some(fused.unwrap_or(c)))
        .collect();
    let merged = GlobalPanoptic {
        instance: merged.instance,
        semantic,
    };
    let labels = if cloud.is_empty() {
        Labeling::new(vec![], vec![])?
    } else {
        upsample_labels(&cloud, &cloud, &merged, &taxonomy)?
    };
    at(&a.output, write_cloud(&a.output, &cloud, Some(&labels), None))?;
    println!("prune.input = {}", counts.input);
    println!("prune.after_size = {}", counts.after_size);
    println!("prune.after_nms = {}", counts.after_nms);
    println!("prune.after_score = {}", counts.after_score);
    println!("merged_instances = {}", merged.num_instances());
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let taxonomy = load_taxonomy(a.taxonomy.as_deref())?;
    let (pred_cloud, pred) = labels_of(&a.pred, "prediction")?;
    let (gt_cloud, gt) = labels_of(&a.gt, "ground-truth")?;
    if pred_cloud.len() != gt_cloud.len() {
        return Err(Error::Contract(format!(
            "prediction has {} points, ground truth {}",
            pred_cloud.len(),
            gt_cloud.len()
        )));
    }
    let report = evaluate(&pred, &gt, &taxonomy, cfg.match_iou_threshold)?;
    emit(&report.to_text())?;
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.txt"), report.to_text())?;
        fs::write(dir.join("metrics.tsv"), report.to_tsv())?;
        fs::write(dir.join("matches.txt"), report.format_matches())?;
    }
    Ok(())
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<()> {
    for r in run_gradchecks(a.seed, a.trials)? {
        println!("{} = {:.3e} ({} trials)", r.loss, r.max_relative_error, r.trials);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Subsample(a) => run_subsample(a),
        Command::Blocks(a) => run_blocks(a),
        Command::Segment(a) => run_segment(a),
        Command::Merge(a) => run_merge(a),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}
