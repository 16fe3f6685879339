//! Train, extract gradients, score, trim, retrain and evaluate, plus the
//! comparison, sweep and timing drivers built on top of that pipeline.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, LabeledDataset, NoiseSpec, MOONS_JITTER};
use crate::error::{Error, Result};
use crate::influence::{self, EvalSet, InfluenceReport, LissaConfig};
use crate::model::{self, GradientMatrix, HeadHvp, LayerSelector, ModelSpec, TrainConfig, TrainedModel, DEFAULT_DAMPING};
use crate::outlier::{self, IForestParams, Method, ProjectionTarget, TrimPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Moons {
        #[serde(default = "moons_train")]
        n_train: usize,
        #[serde(default = "default_test")]
        n_test: usize,
        #[serde(default = "moons_jitter")]
        jitter: f64,
        #[serde(default = "moons_flips")]
        flips_per_class: usize,
        #[serde(default = "default_validation")]
        n_validation: usize,
    },
    Blobs {
        #[serde(default = "blobs_train")]
        n_train: usize,
        #[serde(default = "default_test")]
        n_test: usize,
        #[serde(default = "blobs_flips")]
        flips_per_class: usize,
        #[serde(default = "default_validation")]
        n_validation: usize,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        validation: Option<PathBuf>,
    },
}

fn moons_train() -> usize {
    250
}
fn blobs_train() -> usize {
    150
}
fn default_test() -> usize {
    100
}
fn moons_jitter() -> f64 {
    MOONS_JITTER
}
fn moons_flips() -> usize {
    10
}
fn blobs_flips() -> usize {
    5
}
fn default_validation() -> usize {
    50
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Moons {
            n_train: moons_train(),
            n_test: default_test(),
            jitter: moons_jitter(),
            flips_per_class: moons_flips(),
            n_validation: default_validation(),
        }
    }
}

/// Train, test and optional clean validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub validation: Option<LabeledDataset>,
}

impl DatasetSource {
    pub fn is_generator(&self) -> bool {
        !matches!(self, DatasetSource::Csv { .. })
    }

    /// Same generator with a different training-set size.
    pub fn with_train_size(&self, n: usize) -> Result<DatasetSource> {
        let mut out = self.clone();
        match &mut out {
            DatasetSource::Moons { n_train, .. } | DatasetSource::Blobs { n_train, .. } => *n_train = n,
            DatasetSource::Csv { .. } => return Err(Error::config("timing runs need a generator-backed dataset")),
        }
        Ok(out)
    }

    pub fn load(&self, seeds: &ResolvedSeeds) -> Result<Splits> {
        let generate = |n_train: usize, n_test: usize, seed: u64| -> Result<(LabeledDataset, LabeledDataset)> {
            match self {
                DatasetSource::Moons { jitter, .. } => data::gen_half_moons(n_train, n_test, *jitter, seed),
                _ => data::gen_linear_blobs(n_train, n_test, seed),
            }
        };
        match self {
            DatasetSource::Moons {
                n_train,
                n_test,
                flips_per_class,
                n_validation,
                ..
            }
            | DatasetSource::Blobs {
                n_train,
                n_test,
                flips_per_class,
                n_validation,
            } => {
                let (clean, test) = generate(*n_train, *n_test, seeds.data)?;
                let train = data::inject_label_noise(
                    &clean,
                    NoiseSpec {
                        flips_per_class: *flips_per_class,
                        seed: seeds.noise,
                    },
                )?;
                let validation = if *n_validation > 0 {
                    let (mut v, _) = generate(*n_validation, 0, seeds.validation)?;
                    v.name = v.name.replace("train", "validation");
                    Some(v)
                } else {
                    None
                };
                Ok(Splits { train, test, validation })
            }
            DatasetSource::Csv { train, test, validation } => Ok(Splits {
                train: data::read_csv(train)?,
                test: data::read_csv(test)?,
                validation: validation.as_ref().map(data::read_csv).transpose()?,
            }),
        }
    }
}

/// Architecture choice; input width and class count come from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelChoice {
    LogReg,
    Mlp {
        #[serde(default = "default_width")]
        h1: usize,
        #[serde(default = "default_width")]
        h2: usize,
    },
}

/// Hidden width for both MLP layers.
pub const DEFAULT_WIDTH: usize = 32;

fn default_width() -> usize {
    DEFAULT_WIDTH
}

impl Default for ModelChoice {
    fn default() -> Self {
        ModelChoice::Mlp {
            h1: default_width(),
            h2: default_width(),
        }
    }
}

impl ModelChoice {
    pub fn spec(self, d: usize, classes: usize) -> ModelSpec {
        match self {
            ModelChoice::LogReg => ModelSpec::LogReg { d, classes },
            ModelChoice::Mlp { h1, h2 } => ModelSpec::Mlp { d, h1, h2, classes },
        }
    }

    pub fn default_training(self) -> TrainParams {
        let cfg = match self {
            ModelChoice::LogReg => TrainConfig::logreg_default(0),
            ModelChoice::Mlp { .. } => TrainConfig::mlp_default(0),
        };
        TrainParams {
            lr: cfg.lr,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub lr: f64,
    pub epochs: usize,
    #[serde(default)]
    pub batch_size: Option<usize>,
}

impl TrainParams {
    pub fn with_seed(self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        }
    }
}

/// Absolute count (`20`) or fraction of the training set (`{"fraction": 0.05}`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Budget {
    Count(usize),
    Fraction { fraction: f64 },
}

impl Default for Budget {
    fn default() -> Self {
        Budget::Fraction { fraction: 0.05 }
    }
}

impl Budget {
    pub fn validate(self) -> Result<()> {
        match self {
            Budget::Fraction { fraction } if !(fraction > 0.0 && fraction < 1.0) => Err(Error::config(format!(
                "budget fraction must lie in (0, 1), got {fraction}"
            ))),
            _ => Ok(()),
        }
    }

    /// Nearest integer, at least one for any positive fraction.
    pub fn resolve(self, n: usize) -> usize {
        match self {
            Budget::Count(k) => k,
            Budget::Fraction { fraction } => ((fraction * n as f64).round() as usize).max(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSettings {
    /// Rows wider than this are projected before tree fitting or distances.
    pub threshold: usize,
    pub target: ProjectionTarget,
}

impl Default for ProjectionSettings {
    fn default() -> Self {
        ProjectionSettings {
            threshold: outlier::PROJECTION_THRESHOLD,
            target: ProjectionTarget::Eps(0.1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IforestSettings {
    pub n_trees: usize,
    #[serde(default)]
    pub psi: Option<usize>,
}

impl Default for IforestSettings {
    fn default() -> Self {
        IforestSettings {
            n_trees: outlier::DEFAULT_TREES,
            psi: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LissaSettings {
    pub depth: usize,
    #[serde(default)]
    pub scale: Option<f64>,
    pub repeats: usize,
}

impl Default for LissaSettings {
    fn default() -> Self {
        let d = LissaConfig::default();
        LissaSettings {
            depth: d.depth,
            scale: d.scale,
            repeats: d.repeats,
        }
    }
}

/// Per-stage seeds. Unset entries derive from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Seeds {
    pub data: Option<u64>,
    pub noise: Option<u64>,
    pub validation: Option<u64>,
    pub train: Option<u64>,
    pub retrain: Option<u64>,
    pub detector: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedSeeds {
    pub data: u64,
    pub noise: u64,
    pub validation: u64,
    pub train: u64,
    pub retrain: u64,
    pub detector: u64,
}

/// Independent child seed: the first word of ChaCha stream `tag`.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(tag);
    rng.next_u64()
}

impl Seeds {
    pub fn resolve(self, master: u64) -> ResolvedSeeds {
        ResolvedSeeds {
            data: self.data.unwrap_or(master),
            noise: self.noise.unwrap_or_else(|| derive_seed(master, 1)),
            validation: self.validation.unwrap_or_else(|| derive_seed(master, 2)),
            train: self.train.unwrap_or_else(|| derive_seed(master, 3)),
            retrain: self.retrain.unwrap_or_else(|| derive_seed(master, 4)),
            detector: self.detector.unwrap_or_else(|| derive_seed(master, 5)),
        }
    }
}

impl From<ResolvedSeeds> for Seeds {
    fn from(s: ResolvedSeeds) -> Self {
        Seeds {
            data: Some(s.data),
            noise: Some(s.noise),
            validation: Some(s.validation),
            train: Some(s.train),
            retrain: Some(s.retrain),
            detector: Some(s.detector),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetSource,
    pub model: ModelChoice,
    /// Architecture defaults when unset.
    pub train: Option<TrainParams>,
    pub method: Method,
    pub budget: Budget,
    pub layer: LayerSelector,
    pub projection: ProjectionSettings,
    pub iforest: IforestSettings,
    /// Z-score gradient columns before the isolation forest.
    pub standardize: bool,
    /// Neighbours averaged by the inlier-referenced detector.
    pub k_nn: usize,
    pub damping: f64,
    pub lissa: LissaSettings,
    pub eval_set: EvalSet,
    pub seed: u64,
    pub seeds: Seeds,
    pub out: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset: DatasetSource::default(),
            model: ModelChoice::default(),
            train: None,
            method: Method::Iforest,
            budget: Budget::default(),
            layer: LayerSelector::default(),
            projection: ProjectionSettings::default(),
            iforest: IforestSettings::default(),
            standardize: false,
            k_nn: 5,
            damping: DEFAULT_DAMPING,
            lissa: LissaSettings::default(),
            eval_set: EvalSet::default(),
            seed: 0,
            seeds: Seeds::default(),
            out: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        if !(self.damping >= 0.0) {
            return Err(Error::config(format!("damping must be >= 0, got {}", self.damping)));
        }
        if self.k_nn == 0 {
            return Err(Error::config("k_nn must be positive"));
        }
        if self.iforest.n_trees == 0 {
            return Err(Error::config("iforest.n_trees must be positive"));
        }
        if let Some(t) = self.train {
            if !(t.lr > 0.0) {
                return Err(Error::config("learning rate must be positive"));
            }
        }
        Ok(())
    }

    /// Copy with every default materialized, as echoed in reports.
    pub fn resolved(&self) -> Result<PipelineConfig> {
        self.validate()?;
        let mut out = self.clone();
        out.train = Some(self.train.unwrap_or_else(|| self.model.default_training()));
        out.seeds = self.seeds.resolve(self.seed).into();
        Ok(out)
    }

    fn resolved_seeds(&self) -> ResolvedSeeds {
        self.seeds.resolve(self.seed)
    }

    fn train_params(&self) -> TrainParams {
        self.train.unwrap_or_else(|| self.model.default_training())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Accuracy over all samples treating flagged as "noisy"; precision and
/// recall over the flagged set (zero when their denominator is empty).
pub fn detection_metrics(plan: &TrimPlan, mask: Option<&[bool]>) -> Result<DetectionMetrics> {
    let mask = mask.ok_or_else(|| Error::config("detection metrics need a ground-truth noise mask"))?;
    if mask.len() != plan.scores.len() {
        return Err(Error::Dimension {
            what: "noise mask length",
            expected: plan.scores.len(),
            got: mask.len(),
        });
    }
    let predicted = plan.is_flagged_mask();
    let agree = predicted.iter().zip(mask).filter(|(p, m)| p == m).count();
    let tp = predicted.iter().zip(mask).filter(|(p, m)| **p && **m).count();
    let positives = mask.iter().filter(|&&m| m).count();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(DetectionMetrics {
        accuracy: ratio(agree, mask.len()),
        precision: ratio(tp, plan.flagged.len()),
        recall: ratio(tp, positives),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Utility {
    pub test_accuracy_before: f64,
    pub test_accuracy_after: f64,
    pub test_loss_before: f64,
    pub test_loss_after: f64,
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub load: f64,
    pub train: f64,
    pub gradients: f64,
    pub score: f64,
    pub trim: f64,
    pub retrain: f64,
    pub evaluate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionInfo {
    pub applied: bool,
    pub input_dim: usize,
    pub output_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub budget_k: usize,
    pub n_train: usize,
    pub n_retrained: usize,
    pub detection: Option<DetectionMetrics>,
    pub utility: Utility,
    pub flagged: Vec<usize>,
    pub survivors: Vec<usize>,
    pub projection: Option<ProjectionInfo>,
    pub timings: Timings,
    pub seed: u64,
    pub config: PipelineConfig,
}

impl EvalReport {
    /// Same report with all timings zeroed, for reproducibility checks.
    pub fn masked(&self) -> EvalReport {
        EvalReport {
            timings: Timings::default(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

/// Data plus the model trained on the noisy training set, shared by every
/// method or budget evaluated against it.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: PipelineConfig,
    pub seeds: ResolvedSeeds,
    pub splits: Splits,
    pub spec: ModelSpec,
    pub train_config: TrainConfig,
    pub model: TrainedModel,
    pub load_seconds: f64,
    pub train_seconds: f64,
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let value = f()?;
    Ok((value, start.elapsed().as_secs_f64()))
}

pub fn prepare(cfg: &PipelineConfig) -> Result<Prepared> {
    let config = cfg.resolved()?;
    let seeds = cfg.resolved_seeds();
    let (splits, load_seconds) = timed(|| cfg.dataset.load(&seeds)).map_err(|e| e.in_stage("load"))?;
    let classes = splits
        .train
        .n_classes
        .max(splits.test.n_classes)
        .max(splits.validation.as_ref().map_or(0, |v| v.n_classes));
    let spec = cfg.model.spec(splits.train.n_features(), classes);
    let train_config = cfg.train_params().with_seed(seeds.train);
    let (model, train_seconds) =
        timed(|| model::train(&splits.train, spec, train_config)).map_err(|e| e.in_stage("train"))?;
    Ok(Prepared {
        config,
        seeds,
        splits,
        spec,
        train_config,
        model,
        load_seconds,
        train_seconds,
    })
}

/// Knobs that may vary between runs sharing one [`Prepared`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunVariant {
    pub method: Method,
    pub budget: Budget,
    pub n_trees: usize,
}

impl Prepared {
    fn validation(&self, why: &str) -> Result<&LabeledDataset> {
        self.splits
            .validation
            .as_ref()
            .ok_or_else(|| Error::config(format!("{why} needs a validation set")))
    }

    fn eval_gradients(&self, g_train: &GradientMatrix) -> Result<GradientMatrix> {
        match self.config.eval_set {
            EvalSet::Train => Ok(g_train.clone()),
            EvalSet::External => {
                let v = self.validation("an external evaluation set")?;
                model::per_sample_gradients(&self.model, v, self.config.layer)
            }
        }
    }

    /// Influence baseline for the configured layer block.
    pub fn influence(&self, method: influence::InfluenceMethod, g_train: &GradientMatrix) -> Result<InfluenceReport> {
        use influence::InfluenceMethod as M;
        let cfg = &self.config;
        let train = &self.splits.train;
        let lissa = LissaConfig {
            depth: cfg.lissa.depth,
            scale: cfg.lissa.scale,
            repeats: cfg.lissa.repeats,
            damping: cfg.damping,
        };
        let report = match method {
            M::Exact => {
                let h = model::hessian(&self.model, train, cfg.layer, cfg.damping)?;
                influence::exact_influence(&self.eval_gradients(g_train)?, &h, g_train)?
            }
            M::SelfExact => {
                let h = model::hessian(&self.model, train, cfg.layer, cfg.damping)?;
                influence::self_influence_exact(g_train, &h)?
            }
            M::Trace => influence::trace_influence(&self.eval_gradients(g_train)?, g_train)?,
            M::Lissa => {
                let op = HeadHvp::new(&self.model, train, cfg.layer, 0.0)?;
                influence::lissa_influence(&self.eval_gradients(g_train)?, &op, &lissa, g_train)?
            }
            M::SelfLissa => {
                let op = HeadHvp::new(&self.model, train, cfg.layer, 0.0)?;
                influence::self_influence_lissa(g_train, &op, &lissa)?
            }
        };
        Ok(report.with_eval_set(if method.is_self() { EvalSet::Train } else { cfg.eval_set }))
    }

    /// Outlyingness score per training sample (higher = more suspect).
    pub fn score(&self, method: Method, n_trees: usize, g: &GradientMatrix) -> Result<(Vec<f64>, Option<ProjectionInfo>)> {
        let cfg = &self.config;
        let project = |rows: &ndarray::Array2<f64>, seed: u64| -> Result<(ndarray::Array2<f64>, Option<ProjectionInfo>)> {
            if rows.ncols() <= cfg.projection.threshold {
                return Ok((rows.clone(), None));
            }
            let p = outlier::sparse_random_projection(rows, cfg.projection.target, seed)?;
            let info = ProjectionInfo {
                applied: p.applied,
                input_dim: rows.ncols(),
                output_dim: p.matrix.ncols(),
            };
            Ok((p.matrix, Some(info)))
        };
        match method {
            Method::L1 => Ok((outlier::l1_scores(g), None)),
            Method::L2 => Ok((outlier::l2_scores(g), None)),
            Method::Iforest => {
                let (mut x, info) = project(&g.rows, self.seeds.detector)?;
                if cfg.standardize {
                    x = outlier::standardize(&x);
                }
                let forest = outlier::fit_iforest(
                    &x,
                    IForestParams {
                        n_trees,
                        psi: cfg.iforest.psi,
                        seed: self.seeds.detector,
                    },
                )?;
                Ok((forest.scores(&x)?, info))
            }
            Method::SemiInlier => {
                let v = self.validation("the inlier-referenced detector")?;
                let g_in = model::per_sample_gradients(&self.model, v, cfg.layer)?;
                if g.dim() > cfg.projection.threshold {
                    // one projection for both sets keeps distances comparable
                    let mut stacked = g.rows.clone();
                    stacked.append(ndarray::Axis(0), g_in.rows.view()).expect("same width");
                    let (x, info) = project(&stacked, self.seeds.detector)?;
                    let n = g.n_rows();
                    let a = GradientMatrix::new(x.slice(ndarray::s![..n, ..]).to_owned(), cfg.layer, "train");
                    let b = GradientMatrix::new(x.slice(ndarray::s![n.., ..]).to_owned(), cfg.layer, "validation");
                    Ok((outlier::semi_inlier_scores(&a, &b, cfg.k_nn)?, info))
                } else {
                    Ok((outlier::semi_inlier_scores(g, &g_in, cfg.k_nn)?, None))
                }
            }
            m => {
                let inf = m.influence().expect("remaining methods are influence baselines");
                Ok((self.influence(inf, g)?.suspicion(), None))
            }
        }
    }

    pub fn gradients(&self) -> Result<GradientMatrix> {
        model::per_sample_gradients(&self.model, &self.splits.train, self.config.layer)
    }

    /// Score, trim, retrain and evaluate one variant.
    pub fn run(&self, variant: RunVariant) -> Result<EvalReport> {
        self.run_with_gradients(variant, None)
    }

    fn run_with_gradients(&self, variant: RunVariant, cached: Option<(&GradientMatrix, f64)>) -> Result<EvalReport> {
        variant.budget.validate()?;
        let train = &self.splits.train;
        let test = &self.splits.test;
        let mut config = self.config.clone();
        config.method = variant.method;
        config.budget = variant.budget;
        config.iforest.n_trees = variant.n_trees;

        let (g, grad_seconds) = match cached {
            Some((g, t)) => (g.clone(), t),
            None => timed(|| self.gradients()).map_err(|e| e.in_stage("gradients"))?,
        };
        let ((scores, projection), score_seconds) =
            timed(|| self.score(variant.method, variant.n_trees, &g)).map_err(|e| e.in_stage("score"))?;
        let budget_k = variant.budget.resolve(train.len());
        let plan = outlier::select_outliers(&scores, budget_k, variant.method);
        let (trimmed, trim_seconds) = timed(|| outlier::trim(train, &plan)).map_err(|e| e.in_stage("trim"))?;
        let retrain_cfg = TrainConfig {
            seed: self.seeds.retrain,
            ..self.train_config
        };
        let (retrained, retrain_seconds) =
            timed(|| model::train(&trimmed, self.spec, retrain_cfg)).map_err(|e| e.in_stage("retrain"))?;
        let start = Instant::now();
        let utility = Utility {
            test_accuracy_before: self.model.accuracy(test),
            test_accuracy_after: retrained.accuracy(test),
            test_loss_before: self.model.mean_loss(test),
            test_loss_after: retrained.mean_loss(test),
        };
        let detection = match &train.noise_mask {
            Some(mask) => Some(detection_metrics(&plan, Some(mask))?),
            None => None,
        };
        let evaluate = start.elapsed().as_secs_f64();
        Ok(EvalReport {
            method: variant.method,
            budget_k,
            n_train: train.len(),
            n_retrained: trimmed.len(),
            detection,
            utility,
            survivors: plan.survivors(),
            flagged: plan.flagged,
            projection,
            timings: Timings {
                load: self.load_seconds,
                train: self.train_seconds,
                gradients: grad_seconds,
                score: score_seconds,
                trim: trim_seconds,
                retrain: retrain_seconds,
                evaluate,
            },
            seed: config.seed,
            config,
        })
    }

    fn base_variant(&self) -> RunVariant {
        RunVariant {
            method: self.config.method,
            budget: self.config.budget,
            n_trees: self.config.iforest.n_trees,
        }
    }
}

/// Runs the whole pipeline and writes the report to `cfg.out` when set.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<EvalReport> {
    let prepared = prepare(cfg)?;
    let report = prepared.run(prepared.base_variant())?;
    if let Some(out) = &cfg.out {
        report.save(out)?;
    }
    Ok(report)
}

/// One row of a comparison or sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: Method,
    pub budget_fraction: Option<f64>,
    pub budget_k: usize,
    pub n_trees: usize,
    pub detection_accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub test_accuracy_before: f64,
    pub test_accuracy_after: f64,
    pub score_seconds: f64,
}

impl From<&EvalReport> for TableRow {
    fn from(r: &EvalReport) -> Self {
        TableRow {
            method: r.method,
            budget_fraction: match r.config.budget {
                Budget::Fraction { fraction } => Some(fraction),
                Budget::Count(_) => None,
            },
            budget_k: r.budget_k,
            n_trees: r.config.iforest.n_trees,
            detection_accuracy: r.detection.map(|d| d.accuracy),
            precision: r.detection.map(|d| d.precision),
            recall: r.detection.map(|d| d.recall),
            test_accuracy_before: r.utility.test_accuracy_before,
            test_accuracy_after: r.utility.test_accuracy_after,
            score_seconds: r.timings.score,
        }
    }
}

pub fn write_table<T: Serialize>(rows: &[T], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Evaluates each distinct method (first occurrence order) on one shared
/// dataset and trained model.
pub fn compare_methods(cfg: &PipelineConfig, methods: &[Method]) -> Result<Vec<EvalReport>> {
    if methods.is_empty() {
        return Err(Error::config("compare needs at least one method"));
    }
    let mut seen = HashSet::new();
    let unique: Vec<Method> = methods.iter().copied().filter(|m| seen.insert(*m)).collect();
    let prepared = prepare(cfg)?;
    let (g, t) = timed(|| prepared.gradients()).map_err(|e| e.in_stage("gradients"))?;
    unique
        .into_iter()
        .map(|method| {
            prepared.run_with_gradients(
                RunVariant {
                    method,
                    ..prepared.base_variant()
                },
                Some((&g, t)),
            )
        })
        .collect()
}

pub fn sweep_budget(cfg: &PipelineConfig, fractions: &[f64]) -> Result<Vec<EvalReport>> {
    for &f in fractions {
        Budget::Fraction { fraction: f }.validate()?;
    }
    let prepared = prepare(cfg)?;
    let (g, t) = timed(|| prepared.gradients()).map_err(|e| e.in_stage("gradients"))?;
    fractions
        .iter()
        .map(|&fraction| {
            prepared.run_with_gradients(
                RunVariant {
                    budget: Budget::Fraction { fraction },
                    ..prepared.base_variant()
                },
                Some((&g, t)),
            )
        })
        .collect()
}

pub fn sweep_trees(cfg: &PipelineConfig, counts: &[usize]) -> Result<Vec<EvalReport>> {
    if counts.contains(&0) {
        return Err(Error::config("tree counts must be at least 1"));
    }
    let prepared = prepare(cfg)?;
    let (g, t) = timed(|| prepared.gradients()).map_err(|e| e.in_stage("gradients"))?;
    counts
        .iter()
        .map(|&n_trees| {
            prepared.run_with_gradients(
                RunVariant {
                    method: Method::Iforest,
                    n_trees,
                    ..prepared.base_variant()
                },
                Some((&g, t)),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: Method,
    pub n: usize,
    pub p: usize,
    pub score_seconds: f64,
    /// Time relative to the previous (smaller) size.
    pub ratio: Option<f64>,
}

/// Minimum budget per timing trial, so short calls are averaged over many
/// repetitions.
const MIN_TRIAL_SECONDS: f64 = 0.02;
const TIMING_TRIALS: usize = 5;

/// Best-of-trials mean seconds per call of `f`.
pub fn measure(mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let start = Instant::now();
    f()?;
    let once = start.elapsed().as_secs_f64().max(1e-9);
    let reps = ((MIN_TRIAL_SECONDS / once).ceil() as usize).max(1);
    let mut best = f64::INFINITY;
    for _ in 0..TIMING_TRIALS {
        let start = Instant::now();
        for _ in 0..reps {
            f()?;
        }
        best = best.min(start.elapsed().as_secs_f64() / reps as f64);
    }
    Ok(best)
}

/// Times the scoring stage of `cfg.method` on training sets of each size.
/// The model is trained once on the configured dataset so `p` stays fixed.
pub fn bench_timing(cfg: &PipelineConfig, sizes: &[usize]) -> Result<Vec<TimingRow>> {
    if !cfg.dataset.is_generator() {
        return Err(Error::config("timing runs need a generator-backed dataset"));
    }
    let prepared = prepare(cfg)?;
    let method = cfg.method;
    let mut rows: Vec<TimingRow> = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let source = cfg.dataset.with_train_size(n)?;
        let splits = source.load(&prepared.seeds)?;
        let g = model::per_sample_gradients(&prepared.model, &splits.train, cfg.layer)?;
        let local = Prepared {
            splits,
            ..prepared.clone()
        };
        let seconds = measure(|| local.score(method, cfg.iforest.n_trees, &g).map(|_| ()))?;
        let ratio = rows.last().map(|prev| seconds / prev.score_seconds);
        rows.push(TimingRow {
            method,
            n,
            p: g.dim(),
            score_seconds: seconds,
            ratio,
        });
    }
    Ok(rows)
}
