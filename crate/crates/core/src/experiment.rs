//! Experiment harness: one configuration file drives data generation,
//! training, sampling, aggregation and evaluation, plus the three studies
//! (hypothesis count, confidence filtering, conditioning ablation).
//!
//! Artifacts live under a fixed layout:
//!
//! ```text
//! <out>/data/{train,test}.jsonl
//! <out>/ckpt/model.ckpt          ckpt/ablation-<condition>.ckpt
//! <out>/hyp/test.jsonl
//! <out>/agg/<strategy>.jsonl     agg/<strategy>_confidence.csv
//! <out>/reports/report.{json,csv} and one CSV + JSON pair per study
//! <out>/manifest.json
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregate::{aggregate, confidence, confidence_filter, ScoredFrame, Strategy};
use crate::denoiser::{ConditioningMask, DenoiserConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, mpjpe, MetricReport};
use crate::pose::io::{
    read_hypotheses, read_poses, write_hypotheses, write_poses, write_predictions, Dims,
    HypothesesEntry, LabelledPose, POSE_FILE_VERSION,
};
use crate::pose::{generate_synthetic_dataset, GeneratorConfig, PoseSample, SkeletonSpec};
use crate::rng::{derive_seed, stream};
use crate::sampler::{sample_dataset, HypothesisSet, SamplerConfig};
use crate::trainer::{load_checkpoint, TrainConfig, TrainState, CHECKPOINT_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkeletonRef {
    /// Built-in skeleton; ignored when `file` is set.
    pub preset: String,
    /// JSON skeleton description.
    pub file: Option<PathBuf>,
}

impl Default for SkeletonRef {
    fn default() -> Self {
        Self {
            preset: "toy8".into(),
            file: None,
        }
    }
}

impl SkeletonRef {
    pub fn resolve(&self) -> Result<SkeletonSpec> {
        let spec = match &self.file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| {
                    Error::Config(format!("skeleton file {}: {e}", path.display()))
                })?
            }
            None => SkeletonSpec::preset(&self.preset)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_count: usize,
    pub test_count: usize,
    /// Existing dataset files; when set they replace generated data.
    pub train_file: Option<PathBuf>,
    pub test_file: Option<PathBuf>,
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_count: 5000,
            test_count: 500,
            train_file: None,
            test_file: None,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregateConfig {
    pub strategy: Strategy,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Median,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub per_action: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { per_action: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub hypothesis_counts: Vec<usize>,
    pub recalls: Vec<f64>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            hypothesis_counts: vec![1, 5, 10, 20, 40],
            recalls: vec![1.0, 0.9, 0.8, 0.7, 0.6, 0.5],
        }
    }
}

/// Complete description of an experiment.
///
/// `seed` is mandatory. It replaces the seeds of the train and sampler
/// sections, so a single number fixes every random stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub skeleton: SkeletonRef,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: DenoiserConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub aggregate: AggregateConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub study: StudyConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            output_dir: default_output_dir(),
            skeleton: SkeletonRef::default(),
            data: DataConfig::default(),
            model: DenoiserConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            aggregate: AggregateConfig::default(),
            eval: EvalConfig::default(),
            study: StudyConfig::default(),
        }
        .resolved()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Propagates the global seed into the stage sections.
    pub fn resolved(mut self) -> Self {
        self.train.seed = self.seed;
        self.sampler.seed = self.seed;
        self
    }

    /// Checks shapes, ranges and referenced files without doing any work.
    pub fn validate(&self) -> Result<()> {
        for (what, path) in [
            ("skeleton.file", &self.skeleton.file),
            ("data.train_file", &self.data.train_file),
            ("data.test_file", &self.data.test_file),
        ] {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(Error::Config(format!("{what}: {} does not exist", p.display())));
                }
            }
        }
        let skeleton = self.skeleton.resolve()?;
        self.model.validate()?;
        self.train.validate()?;
        self.data.generator.validate()?;
        self.sampler.validate(self.train.schedule.steps)?;
        if self.model.joints != skeleton.joint_count() {
            return Err(Error::Config(format!(
                "model.joints is {} but skeleton `{}` has {} joints",
                self.model.joints,
                skeleton.name,
                skeleton.joint_count()
            )));
        }
        let gen = &self.data.generator;
        if gen.feature_levels != self.model.levels || gen.feature_dim != self.model.dim {
            return Err(Error::Config(format!(
                "generator features are L={} d={}, model expects L={} d={}",
                gen.feature_levels, gen.feature_dim, self.model.levels, self.model.dim
            )));
        }
        if self.data.train_file.is_none() && self.data.train_count == 0 {
            return Err(Error::Config("data.train_count must be positive".into()));
        }
        if self.data.test_file.is_none() && self.data.test_count == 0 {
            return Err(Error::Config("data.test_count must be positive".into()));
        }
        if self.study.hypothesis_counts.is_empty() || self.study.hypothesis_counts.contains(&0) {
            return Err(Error::Config("study.hypothesis_counts must be positive".into()));
        }
        if let Some(r) = self.study.recalls.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::Config(format!("study.recalls: {r} is outside (0, 1]")));
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Paths of the fixed artifact layout under one output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn train_data(&self) -> PathBuf {
        self.root.join("data/train.jsonl")
    }

    pub fn test_data(&self) -> PathBuf {
        self.root.join("data/test.jsonl")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("ckpt/model.ckpt")
    }

    pub fn ablation_checkpoint(&self, c: Conditioning) -> PathBuf {
        self.root.join(format!("ckpt/ablation-{}.ckpt", c.slug()))
    }

    pub fn hypotheses(&self) -> PathBuf {
        self.root.join("hyp/test.jsonl")
    }

    pub fn aggregate(&self, s: Strategy) -> PathBuf {
        self.root.join(format!("agg/{}.jsonl", s.code()))
    }

    pub fn confidence_csv(&self, s: Strategy) -> PathBuf {
        self.root.join(format!("agg/{}_confidence.csv", s.code()))
    }

    pub fn report(&self, ext: &str) -> PathBuf {
        self.root.join(format!("reports/report.{ext}"))
    }

    pub fn study(&self, name: &str, ext: &str) -> PathBuf {
        self.root.join(format!("reports/{name}.{ext}"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .display()
            .to_string()
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

// ---------------------------------------------------------------------------
// Stages

/// Test and train sets: read from the configured files, or generated from
/// independent sub-seeds of the global seed.
pub fn prepare_data(config: &ExperimentConfig) -> Result<(Vec<PoseSample>, Vec<PoseSample>)> {
    let skeleton = config.skeleton.resolve()?;
    let load_or_generate = |file: &Option<PathBuf>, count: usize, index: u64| match file {
        Some(path) => {
            let (dims, samples) = read_poses(path)?;
            check_dims(config, dims, path)?;
            Ok(samples)
        }
        None => generate_synthetic_dataset(
            &skeleton,
            count,
            &config.data.generator,
            derive_seed(config.seed, index),
        ),
    };
    let train = load_or_generate(&config.data.train_file, config.data.train_count, stream::TRAIN_DATA)?;
    let test = load_or_generate(&config.data.test_file, config.data.test_count, stream::TEST_DATA)?;
    Ok((train, test))
}

fn check_dims(config: &ExperimentConfig, dims: Dims, path: &Path) -> Result<()> {
    let m = &config.model;
    if dims.joints != m.joints || dims.levels != m.levels || dims.d != m.dim {
        return Err(Error::Validation(format!(
            "{} holds J={} L={} d={}, model expects J={} L={} d={}",
            path.display(),
            dims.joints,
            dims.levels,
            dims.d,
            m.joints,
            m.levels,
            m.dim
        )));
    }
    Ok(())
}

pub fn model_dims(config: &DenoiserConfig) -> Dims {
    Dims {
        joints: config.joints,
        levels: config.levels,
        d: config.dim,
    }
}

/// Trains a fresh model, or continues the one in `resume`, saving to
/// `checkpoint` after every epoch.
pub fn train_model(
    config: &ExperimentConfig,
    mask: ConditioningMask,
    data: &[PoseSample],
    checkpoint: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainState> {
    let model = DenoiserConfig {
        mask,
        ..config.model.clone()
    };
    let mut state = match resume {
        Some(path) => {
            let state = load_checkpoint(path)?;
            let same_run = TrainConfig {
                epochs: config.train.epochs,
                ..state.config.clone()
            };
            if *state.model.config() != model || same_run != config.train {
                return Err(Error::Validation(format!(
                    "checkpoint {} was trained with a different configuration",
                    path.display()
                )));
            }
            let mut state = state;
            state.config.epochs = config.train.epochs;
            state
        }
        None => TrainState::new(model, config.train.clone(), config.skeleton.resolve()?)?,
    };
    state.fit(data, checkpoint)?;
    Ok(state)
}

pub fn sample_test_set(
    state: &TrainState,
    test: &[PoseSample],
    sampler: &SamplerConfig,
) -> Result<Vec<HypothesisSet>> {
    sample_dataset(&state.model, &state.schedule, test, sampler, state.config.coord_scale)
}

pub fn to_entries(sets: &[HypothesisSet]) -> Vec<HypothesesEntry> {
    sets.iter()
        .map(|s| HypothesesEntry {
            sample_id: s.frame_id.clone(),
            action_tag: s.action_tag.clone(),
            hypotheses: s.hypotheses.clone(),
        })
        .collect()
}

pub fn write_hypothesis_sets(path: &Path, dims: Dims, sets: &[HypothesisSet]) -> Result<()> {
    let h = sets.first().map_or(0, |s| s.count());
    let meta = sets
        .first()
        .map(|s| serde_json::to_value(&s.config).expect("sampler config serializes"));
    write_hypotheses(path, dims, h, meta, &to_entries(sets))
}

/// Seed for random selection in frame `index`.
pub fn selection_seed(seed: u64, index: usize) -> u64 {
    derive_seed(derive_seed(seed, stream::SELECTION), index as u64)
}

/// One aggregated frame and its confidence score.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedFrame {
    pub pose: LabelledPose,
    pub confidence: Option<f64>,
}

fn ground_truth_index(gt: &[LabelledPose]) -> HashMap<&str, &LabelledPose> {
    gt.iter().map(|g| (g.sample_id.as_str(), g)).collect()
}

/// Reduces every frame with `strategy`. Ground truth is matched by sample id
/// and is required for the oracle strategies.
pub fn aggregate_entries(
    entries: &[HypothesesEntry],
    strategy: Strategy,
    gt: Option<&[LabelledPose]>,
    seed: u64,
) -> Result<Vec<AggregatedFrame>> {
    if strategy.needs_ground_truth() && gt.is_none() {
        return Err(Error::Validation(format!("strategy {strategy} needs ground truth")));
    }
    let index = gt.map(ground_truth_index);
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let truth = match &index {
                Some(idx) => Some(idx.get(e.sample_id.as_str()).ok_or_else(|| {
                    Error::Validation(format!("no ground truth for frame `{}`", e.sample_id))
                })?),
                None => None,
            };
            let res = aggregate(
                &e.hypotheses,
                strategy,
                truth.map(|t| &t.pose),
                selection_seed(seed, i),
            )?;
            Ok(AggregatedFrame {
                pose: LabelledPose {
                    sample_id: e.sample_id.clone(),
                    action_tag: e.action_tag.clone(),
                    pose: res.pose,
                },
                confidence: confidence(&e.hypotheses),
            })
        })
        .collect()
}

pub fn confidence_csv(frames: &[AggregatedFrame]) -> String {
    let mut out = String::from("sample_id,confidence\n");
    for f in frames {
        let c = f.confidence.map(|c| format!("{c:.9e}")).unwrap_or_default();
        let _ = writeln!(out, "{},{c}", f.pose.sample_id);
    }
    out
}

fn labelled(samples: &[PoseSample]) -> Vec<LabelledPose> {
    samples
        .iter()
        .map(|s| LabelledPose {
            sample_id: s.sample_id.clone(),
            action_tag: s.action_tag.clone(),
            pose: s.pose3d.clone(),
        })
        .collect()
}

/// Per-frame MPJPE of `strategy` over hypothesis sets aligned with `gt`.
pub fn strategy_errors(
    sets: &[HypothesisSet],
    gt: &[PoseSample],
    strategy: Strategy,
    seed: u64,
) -> Result<Vec<f64>> {
    if sets.len() != gt.len() {
        return Err(Error::Validation(format!(
            "{} hypothesis sets for {} frames",
            sets.len(),
            gt.len()
        )));
    }
    sets.iter()
        .zip(gt)
        .enumerate()
        .map(|(i, (s, g))| {
            if s.frame_id != g.sample_id {
                return Err(Error::Validation(format!(
                    "hypothesis set `{}` is not aligned with frame `{}`",
                    s.frame_id, g.sample_id
                )));
            }
            let res = aggregate(&s.hypotheses, strategy, Some(&g.pose3d), selection_seed(seed, i))?;
            mpjpe(&res.pose, &g.pose3d)
        })
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

// ---------------------------------------------------------------------------
// Manifest and pipeline

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub liftkit: String,
    pub checkpoint_format: u32,
    pub pose_file_format: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub artifacts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub name: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub versions: Versions,
    pub config: ExperimentConfig,
    pub stages: Vec<StageRecord>,
    pub failed: Option<StageFailure>,
}

impl Manifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            config_hash: config.hash(),
            seed: config.seed,
            versions: Versions {
                liftkit: env!("CARGO_PKG_VERSION").into(),
                checkpoint_format: CHECKPOINT_VERSION,
                pose_file_format: POSE_FILE_VERSION,
            },
            config: config.clone(),
            stages: Vec::new(),
            failed: None,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &to_json(self))
    }
}

/// Runs one stage, recording it in the manifest. Failures are persisted to
/// the manifest and wrapped with the stage name.
fn run_stage<T>(
    manifest: &mut Manifest,
    layout: &Layout,
    name: &'static str,
    artifacts: &[PathBuf],
    body: impl FnOnce() -> Result<T>,
) -> Result<T> {
    log::info!("stage {name}");
    match body() {
        Ok(v) => {
            manifest.stages.push(StageRecord {
                name: name.into(),
                artifacts: artifacts.iter().map(|p| layout.relative(p)).collect(),
            });
            manifest.write(&layout.manifest())?;
            Ok(v)
        }
        Err(e) => {
            manifest.failed = Some(StageFailure {
                name: name.into(),
                error: e.to_string(),
            });
            manifest.write(&layout.manifest())?;
            Err(Error::Stage {
                stage: name,
                source: Box::new(e),
            })
        }
    }
}

/// Everything the pipeline produced, kept in memory for follow-up studies.
pub struct PipelineOutput {
    pub manifest: Manifest,
    pub train: Vec<PoseSample>,
    pub test: Vec<PoseSample>,
    pub state: TrainState,
    pub hypotheses: Vec<HypothesisSet>,
    pub report: MetricReport,
}

/// gen-data, train, sample, aggregate and eval under `config.output_dir`.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineOutput> {
    config.validate()?;
    let layout = Layout::new(&config.output_dir);
    fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    let mut manifest = Manifest::new(config);
    manifest.write(&layout.manifest())?;
    let dims = model_dims(&config.model);

    let (train_path, test_path) = (layout.train_data(), layout.test_data());
    let (train, test) = run_stage(
        &mut manifest,
        &layout,
        "gen-data",
        &[train_path.clone(), test_path.clone()],
        || {
            let (train, test) = prepare_data(config)?;
            write_poses(&train_path, dims, &train)?;
            write_poses(&test_path, dims, &test)?;
            Ok((train, test))
        },
    )?;

    let ckpt = layout.checkpoint();
    let state = run_stage(&mut manifest, &layout, "train", &[ckpt.clone()], || {
        train_model(config, config.model.mask, &train, Some(&ckpt), None)
    })?;

    let hyp_path = layout.hypotheses();
    let hypotheses = run_stage(&mut manifest, &layout, "sample", &[hyp_path.clone()], || {
        let sets = sample_test_set(&state, &test, &config.sampler)?;
        write_hypothesis_sets(&hyp_path, dims, &sets)?;
        Ok(sets)
    })?;

    let strategy = config.aggregate.strategy;
    let gt = labelled(&test);
    let (agg_path, conf_path) = (layout.aggregate(strategy), layout.confidence_csv(strategy));
    let predictions = run_stage(
        &mut manifest,
        &layout,
        "aggregate",
        &[agg_path.clone(), conf_path.clone()],
        || {
            let frames = aggregate_entries(&to_entries(&hypotheses), strategy, Some(&gt), config.seed)?;
            let poses: Vec<LabelledPose> = frames.iter().map(|f| f.pose.clone()).collect();
            write_predictions(&agg_path, dims, &poses)?;
            write_text(&conf_path, &confidence_csv(&frames))?;
            Ok(poses)
        },
    )?;

    let (json_path, csv_path) = (layout.report("json"), layout.report("csv"));
    let report = run_stage(
        &mut manifest,
        &layout,
        "eval",
        &[json_path.clone(), csv_path.clone()],
        || {
            let report = evaluate(&predictions, &gt, config.eval.per_action)?;
            write_text(&json_path, &report.to_json())?;
            write_text(&csv_path, &report.to_csv())?;
            Ok(report)
        },
    )?;

    Ok(PipelineOutput {
        manifest,
        train,
        test,
        state,
        hypotheses,
        report,
    })
}

/// Loads the data, checkpoint and hypotheses a finished pipeline left in
/// `config.output_dir`.
pub fn load_pipeline_outputs(
    config: &ExperimentConfig,
) -> Result<(Vec<PoseSample>, TrainState, Vec<HypothesisSet>)> {
    let layout = Layout::new(&config.output_dir);
    let test_path = layout.test_data();
    let (dims, test) = read_poses(&test_path)?;
    check_dims(config, dims, &test_path)?;
    let state = load_checkpoint(&layout.checkpoint())?;
    let (header, entries) = read_hypotheses(&layout.hypotheses())?;
    let sampler = header
        .meta
        .and_then(|m| serde_json::from_value::<SamplerConfig>(m).ok())
        .unwrap_or_else(|| config.sampler.clone());
    let sets = entries
        .into_iter()
        .map(|e| HypothesisSet {
            frame_id: e.sample_id,
            action_tag: e.action_tag,
            hypotheses: e.hypotheses,
            config: sampler.clone(),
        })
        .collect();
    Ok((test, state, sets))
}

// ---------------------------------------------------------------------------
// Studies

fn csv_and_json<T: Serialize>(
    layout: &Layout,
    name: &str,
    csv: String,
    rows: &[T],
) -> Result<()> {
    write_text(&layout.study(name, "csv"), &csv)?;
    write_text(&layout.study(name, "json"), &to_json(&rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisCountRow {
    pub hypotheses: usize,
    pub strategy: Strategy,
    pub mpjpe_mm: f64,
}

/// MPJPE of every strategy at each hypothesis count, evaluated on prefixes
/// of `sets` so smaller counts are nested in larger ones.
pub fn study_hypothesis_count(
    sets: &[HypothesisSet],
    gt: &[PoseSample],
    counts: &[usize],
    seed: u64,
) -> Result<Vec<HypothesisCountRow>> {
    let available = sets.iter().map(|s| s.count()).min().unwrap_or(0);
    let mut rows = Vec::with_capacity(counts.len() * Strategy::ALL.len());
    for &h in counts {
        if h == 0 || h > available {
            return Err(Error::Validation(format!(
                "hypothesis count {h} is outside 1..={available}"
            )));
        }
        let prefixed: Vec<HypothesisSet> = sets.iter().map(|s| s.prefix(h)).collect();
        for strategy in Strategy::ALL {
            rows.push(HypothesisCountRow {
                hypotheses: h,
                strategy,
                mpjpe_mm: mean(&strategy_errors(&prefixed, gt, strategy, seed)?),
            });
        }
    }
    Ok(rows)
}

pub fn hypothesis_count_csv(rows: &[HypothesisCountRow]) -> String {
    let mut out = String::from("hypotheses,strategy,mpjpe_mm\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.4}", r.hypotheses, r.strategy, r.mpjpe_mm);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRow {
    pub recall: f64,
    pub kept_frames: usize,
    pub total_frames: usize,
    pub mpjpe_kept_mm: f64,
    pub mpjpe_all_mm: f64,
}

/// Kept-set MPJPE of `strategy` after confidence filtering at each recall,
/// sorted by recall from high to low.
pub fn study_confidence(
    sets: &[HypothesisSet],
    gt: &[PoseSample],
    strategy: Strategy,
    recalls: &[f64],
    seed: u64,
) -> Result<Vec<ConfidenceRow>> {
    let errors = strategy_errors(sets, gt, strategy, seed)?;
    let frames = sets
        .iter()
        .zip(&errors)
        .map(|(s, &e)| {
            let c = confidence(&s.hypotheses).ok_or_else(|| {
                Error::Validation("confidence needs at least two hypotheses per frame".into())
            })?;
            Ok(ScoredFrame {
                confidence: c,
                mpjpe: e,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sorted = recalls.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted
        .into_iter()
        .map(|r| {
            let f = confidence_filter(&frames, r)?;
            Ok(ConfidenceRow {
                recall: r,
                kept_frames: f.kept.len(),
                total_frames: f.total_frames,
                mpjpe_kept_mm: f.mpjpe_kept,
                mpjpe_all_mm: f.mpjpe_all,
            })
        })
        .collect()
}

pub fn confidence_study_csv(rows: &[ConfidenceRow]) -> String {
    let mut out = String::from("recall,kept_frames,total_frames,mpjpe_kept_mm,mpjpe_all_mm\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.4}",
            r.recall, r.kept_frames, r.total_frames, r.mpjpe_kept_mm, r.mpjpe_all_mm
        );
    }
    out
}

/// Which conditioning inputs a model sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Conditioning {
    #[serde(rename = "pose")]
    Pose,
    #[serde(rename = "context")]
    Context,
    #[serde(rename = "pose+context")]
    Both,
}

impl Conditioning {
    pub const ALL: [Conditioning; 3] = [Conditioning::Pose, Conditioning::Context, Conditioning::Both];

    pub fn mask(self) -> ConditioningMask {
        ConditioningMask {
            pose: self != Conditioning::Context,
            context: self != Conditioning::Pose,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Conditioning::Pose => "pose",
            Conditioning::Context => "context",
            Conditioning::Both => "pose+context",
        }
    }

    fn slug(self) -> &'static str {
        match self {
            Conditioning::Both => "both",
            other => other.label(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub conditioning: Conditioning,
    #[serde(rename = "A")]
    pub average: f64,
    #[serde(rename = "M")]
    pub median: f64,
    #[serde(rename = "B")]
    pub best: f64,
    #[serde(rename = "Bjoint")]
    pub best_joint: f64,
}

pub fn ablation_row(
    conditioning: Conditioning,
    state: &TrainState,
    test: &[PoseSample],
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<AblationRow> {
    let sets = sample_test_set(state, test, sampler)?;
    let score = |s| strategy_errors(&sets, test, s, seed).map(|e| mean(&e));
    Ok(AblationRow {
        conditioning,
        average: score(Strategy::Average)?,
        median: score(Strategy::Median)?,
        best: score(Strategy::Best)?,
        best_joint: score(Strategy::BestJoint)?,
    })
}

/// The 3 x 4 ablation grid.
///
/// Each condition uses its own checkpoint under `ckpt/`. The model whose
/// mask matches `config.model.mask` reuses `ckpt/model.ckpt` when present.
/// With `train_missing` unset a missing checkpoint is an error; otherwise it
/// is trained from `train` with the channel zero-masked.
pub fn study_conditioning_ablation(
    config: &ExperimentConfig,
    train: &[PoseSample],
    test: &[PoseSample],
    train_missing: bool,
) -> Result<Vec<AblationRow>> {
    let layout = Layout::new(&config.output_dir);
    Conditioning::ALL
        .into_iter()
        .map(|c| {
            let main = layout.checkpoint();
            let path = if c.mask() == config.model.mask && main.is_file() {
                main
            } else {
                layout.ablation_checkpoint(c)
            };
            let state = if path.is_file() {
                let state = load_checkpoint(&path)?;
                if state.model.config().mask != c.mask() {
                    return Err(Error::Validation(format!(
                        "checkpoint {} does not use {} conditioning",
                        path.display(),
                        c.label()
                    )));
                }
                state
            } else if train_missing {
                train_model(config, c.mask(), train, Some(&path), None)?
            } else {
                return Err(Error::Validation(format!(
                    "missing {} checkpoint {}",
                    c.label(),
                    path.display()
                )));
            };
            ablation_row(c, &state, test, &config.sampler, config.seed)
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("conditioning,A,M,B,Bjoint\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.4},{:.4},{:.4},{:.4}",
            r.conditioning.label(),
            r.average,
            r.median,
            r.best,
            r.best_joint
        );
    }
    out
}

pub fn write_hypothesis_study(layout: &Layout, rows: &[HypothesisCountRow]) -> Result<()> {
    csv_and_json(layout, "hypothesis_count", hypothesis_count_csv(rows), rows)
}

pub fn write_confidence_study(layout: &Layout, rows: &[ConfidenceRow]) -> Result<()> {
    csv_and_json(layout, "confidence", confidence_study_csv(rows), rows)
}

pub fn write_ablation_study(layout: &Layout, rows: &[AblationRow]) -> Result<()> {
    csv_and_json(layout, "conditioning_ablation", ablation_csv(rows), rows)
}
