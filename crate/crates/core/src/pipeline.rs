//! Device/cloud pipeline: devices fit and upload mixture parameters, the cloud
//! builds a metric set per device, scores, prunes and fine-tunes, and each
//! device evaluates its model on a local held-out split.
//!
//! The cloud half only ever sees the serialized [`GmmParams`], the public pool
//! and the base model. [`run_pipeline`] records every file the cloud half
//! opens so the boundary can be audited afterwards.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{LabeledSet, Scenario};
use crate::error::{Result, TapError};
use crate::gmm::{select_k_bic, EmConfig, GmmParams};
use crate::importance::{
    layer_importance, raw_criteria, scores_to_json, EstimatorConfig, ImportanceWeights, LayerScores, RawCriteria,
};
use crate::metric::{construct_metric_dataset, FeatureExtractor, MetricDataset};
use crate::nn::Model;
use crate::pruner::{
    finetune, plan_for_retention_with_order, prune_with_order, random_order, removal_order, BudgetPlan, FinetuneConfig,
    PruneReport, DEFAULT_EPSILON_MAX,
};
use crate::stats::derive_seed;
use crate::FORMAT_VERSION;

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| TapError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| TapError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| TapError::io(path, e))
}

/// How the cloud chooses the metric set and the units to remove.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Per-device metric set from the uploaded mixture; lowest-importance units go.
    Tap,
    /// Same metric set and per-layer unit counts as `Tap`, random units.
    RandomUnits,
    /// One metric set drawn uniformly from the pool and shared by all devices.
    SharedMetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Scenario directory (`scenario.json`, `pool.bin`, `devices/`).
    pub scenario: PathBuf,
    pub base_model: PathBuf,
    pub out: PathBuf,
    /// Global parameter pruning ratio; retention target is `1 - epsilon_t`.
    pub epsilon_t: f64,
    /// Per-device overrides of `epsilon_t`, indexed by device.
    pub device_epsilon: Option<Vec<f64>>,
    pub epsilon_max: f64,
    pub weights: ImportanceWeights,
    pub metric_size: usize,
    pub k_range: Vec<usize>,
    pub em_max_iters: usize,
    pub em_tol: f64,
    pub estimator: EstimatorConfig,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_batch: usize,
    /// Fraction of each device's data used for the mixture fit; the rest is
    /// the local test split.
    pub fit_fraction: f64,
    /// Use `softmax(-delta')` for layer shares.
    pub invert_layer_budget: bool,
    pub strategy: Strategy,
    /// Fraction of the pool held out for weight-search validation.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scenario: PathBuf::from("scenario"),
            base_model: PathBuf::from("base_model.bin"),
            out: PathBuf::from("out"),
            epsilon_t: 0.3,
            device_epsilon: None,
            epsilon_max: DEFAULT_EPSILON_MAX,
            weights: ImportanceWeights::default(),
            metric_size: 512,
            k_range: (2..=10).collect(),
            em_max_iters: 200,
            em_tol: 1e-6,
            estimator: EstimatorConfig::default(),
            finetune_epochs: 50,
            finetune_lr: 1e-2,
            finetune_batch: 32,
            fit_fraction: 0.8,
            invert_layer_budget: false,
            strategy: Strategy::Tap,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let check_eps = |e: f64| {
            if (0.0..1.0).contains(&e) {
                Ok(())
            } else {
                Err(TapError::invalid(format!("epsilon_t {e} outside [0, 1)")))
            }
        };
        check_eps(self.epsilon_t)?;
        if let Some(list) = &self.device_epsilon {
            list.iter().try_for_each(|&e| check_eps(e))?;
        }
        self.weights.validate()?;
        if self.metric_size == 0 {
            return Err(TapError::invalid("metric_size must be >= 1"));
        }
        if self.k_range.is_empty() || self.k_range.contains(&0) {
            return Err(TapError::invalid("k_range must be nonempty and positive"));
        }
        if !(self.fit_fraction > 0.0 && self.fit_fraction < 1.0) {
            return Err(TapError::invalid("fit_fraction must lie in (0, 1)"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(TapError::invalid("validation_fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn epsilon_for(&self, device: usize) -> f64 {
        self.device_epsilon
            .as_ref()
            .and_then(|v| v.get(device).copied())
            .unwrap_or(self.epsilon_t)
    }

    fn em_config(&self, device: usize) -> EmConfig {
        EmConfig {
            max_iters: self.em_max_iters,
            tol: self.em_tol,
            seed: derive_seed(self.seed, 200 + device as u64),
            ..EmConfig::default()
        }
    }

    pub fn finetune_config(&self, device: usize) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.finetune_epochs,
            learning_rate: self.finetune_lr,
            batch_size: self.finetune_batch,
            seed: derive_seed(self.seed, 400 + device as u64),
        }
    }
}

pub fn device_id(device: usize) -> String {
    format!("dev_{device}")
}

/// What a device keeps and what it sends.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceUpload {
    /// The serialized mixture: the only artifact that leaves the device.
    pub gmm_json: String,
    pub k: usize,
    pub bic: Vec<(usize, f64)>,
    /// Local evaluation split, disjoint from the fit split.
    pub test: LabeledSet,
}

/// Seeded `(fit, test)` split of a device's local data.
pub fn device_split(device: usize, data: &LabeledSet, config: &PipelineConfig) -> (LabeledSet, LabeledSet) {
    data.split(config.fit_fraction, derive_seed(config.seed, 300 + device as u64))
}

/// Device half: split local data, fit a mixture to the fit split's features
/// and serialize it.
pub fn device_side(device: usize, data: &LabeledSet, model: &Model, config: &PipelineConfig) -> Result<DeviceUpload> {
    let (fit, test) = device_split(device, data, config);
    if fit.is_empty() || test.is_empty() {
        return Err(TapError::invalid(format!("device {device}: too few samples to split")));
    }
    let extractor = FeatureExtractor::default_for(Some(model));
    let features = extractor.extract(Some(model), fit.samples.view())?;
    let k_range: Vec<usize> = config.k_range.iter().copied().filter(|&k| k <= fit.len()).collect();
    if k_range.is_empty() {
        return Err(TapError::invalid(format!("device {device}: fit split smaller than every K")));
    }
    let selection = select_k_bic(features.view(), &k_range, &config.em_config(device))?;
    Ok(DeviceUpload {
        gmm_json: selection.params.to_json(),
        k: selection.k,
        bic: selection.bic,
        test,
    })
}

/// Shared cloud-side inputs.
pub struct CloudContext<'a> {
    pub model: &'a Model,
    pub pool: &'a LabeledSet,
    /// Base-model features of every pool row.
    pub pool_features: Array2<f64>,
}

impl<'a> CloudContext<'a> {
    pub fn new(model: &'a Model, pool: &'a LabeledSet) -> Result<Self> {
        let pool_features = FeatureExtractor::default_for(Some(model)).extract(Some(model), pool.samples.view())?;
        Ok(Self {
            model,
            pool,
            pool_features,
        })
    }
}

/// Scores of one metric set, reusable across weightings and budgets.
#[derive(Debug, Clone)]
pub struct ScoredMetric {
    pub metric: MetricDataset,
    pub raw: RawCriteria,
    pub layer_scores: LayerScores,
}

#[derive(Debug, Clone)]
pub struct CloudOutcome {
    pub scored: ScoredMetric,
    pub plan: BudgetPlan,
    pub report: PruneReport,
    pub pruned: Model,
    pub finetuned: Model,
    pub finetune_losses: Vec<f64>,
    pub scores_json: String,
}

/// Metric set shared by every device under [`Strategy::SharedMetric`].
pub fn shared_metric(pool_len: usize, n: usize, seed: u64) -> Result<MetricDataset> {
    if n > pool_len {
        return Err(TapError::invalid(format!("metric size {n} exceeds pool size {pool_len}")));
    }
    let mut indices = sample(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 500)), pool_len, n).into_vec();
    indices.sort_unstable();
    Ok(MetricDataset {
        device_id: "shared".into(),
        scores: vec![0.0; n],
        indices,
        pool_scores: Vec::new(),
    })
}

/// Builds the metric set a strategy prescribes and scores the model on it.
pub fn score_metric(ctx: &CloudContext, device: usize, gmm: &GmmParams, config: &PipelineConfig) -> Result<ScoredMetric> {
    let metric = match config.strategy {
        Strategy::SharedMetric => {
            let mut m = shared_metric(ctx.pool.len(), config.metric_size, config.seed)?;
            m.device_id = device_id(device);
            m
        }
        Strategy::Tap | Strategy::RandomUnits => {
            construct_metric_dataset(device_id(device), gmm, ctx.pool_features.view(), config.metric_size)?
        }
    };
    let samples = ctx.pool.samples.select(ndarray::Axis(0), &metric.indices);
    let raw = raw_criteria(ctx.model, samples.view(), &config.estimator)?;
    let layer_scores = layer_importance(ctx.model, samples.view(), config.invert_layer_budget)?;
    for w in &raw.warnings {
        log::warn!("{}: {w}", device_id(device));
    }
    Ok(ScoredMetric {
        metric,
        raw,
        layer_scores,
    })
}

/// Plans, prunes and fine-tunes from an already scored metric set.
pub fn prune_and_recover(
    ctx: &CloudContext,
    device: usize,
    scored: &ScoredMetric,
    weights: ImportanceWeights,
    epsilon_t: f64,
    config: &PipelineConfig,
) -> Result<CloudOutcome> {
    let neurons = scored.raw.compose(weights)?;
    let order = removal_order(&neurons);
    let plan = plan_for_retention_with_order(ctx.model, &order, &scored.layer_scores, epsilon_t, config.epsilon_max)?;
    let order = match config.strategy {
        Strategy::RandomUnits => random_order(ctx.model, derive_seed(config.seed, 600 + device as u64)),
        _ => order,
    };
    let (pruned, mut report) = prune_with_order(ctx.model, &order, &plan)?;
    report.device_id = device_id(device);
    let metric_set = ctx.pool.select(&scored.metric.indices);
    let (finetuned, ft) = finetune(
        &pruned,
        metric_set.samples.view(),
        &metric_set.labels,
        &config.finetune_config(device),
    )?;
    Ok(CloudOutcome {
        scores_json: scores_to_json(&neurons, &scored.layer_scores)?,
        scored: scored.clone(),
        plan,
        report,
        pruned,
        finetuned,
        finetune_losses: ft.losses,
    })
}

/// Cloud half for one device, from the uploaded JSON onward.
pub fn cloud_side(ctx: &CloudContext, device: usize, gmm_json: &str, config: &PipelineConfig) -> Result<CloudOutcome> {
    let gmm = GmmParams::from_json(gmm_json)?;
    let scored = score_metric(ctx, device, &gmm, config)?;
    prune_and_recover(ctx, device, &scored, config.weights, config.epsilon_for(device), config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceResult {
    pub device_id: String,
    pub k: usize,
    pub metric_size: usize,
    pub params_before: usize,
    pub params_after: usize,
    pub retention: f64,
    pub accuracy_base: f64,
    pub accuracy_pruned: f64,
    pub accuracy_finetuned: f64,
    /// Test-split size.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceFailure {
    pub device_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub version: u32,
    pub strategy: Strategy,
    pub epsilon_t: f64,
    pub weights: ImportanceWeights,
    pub weighted_accuracy_base: Option<f64>,
    pub weighted_accuracy_pruned: Option<f64>,
    pub weighted_accuracy_finetuned: Option<f64>,
    pub devices: Vec<DeviceResult>,
    pub failures: Vec<DeviceFailure>,
}

/// `sum(acc_i n_i) / sum(n_i)`.
pub fn weighted_accuracy(pairs: &[(f64, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(TapError::invalid("weighted accuracy of no devices"));
    }
    if pairs.iter().any(|&(_, n)| n == 0) {
        return Err(TapError::invalid("device with zero test samples"));
    }
    let total: usize = pairs.iter().map(|p| p.1).sum();
    Ok(pairs.iter().map(|&(a, n)| a * (n as f64 / total as f64)).sum())
}

impl PipelineSummary {
    pub fn build(config: &PipelineConfig, devices: Vec<DeviceResult>, failures: Vec<DeviceFailure>) -> Self {
        let agg = |f: fn(&DeviceResult) -> f64| {
            let pairs: Vec<(f64, usize)> = devices.iter().map(|d| (f(d), d.samples)).collect();
            weighted_accuracy(&pairs).ok()
        };
        Self {
            version: FORMAT_VERSION,
            strategy: config.strategy,
            epsilon_t: config.epsilon_t,
            weights: config.weights,
            weighted_accuracy_base: agg(|d| d.accuracy_base),
            weighted_accuracy_pruned: agg(|d| d.accuracy_pruned),
            weighted_accuracy_finetuned: agg(|d| d.accuracy_finetuned),
            devices,
            failures,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn evaluate(device: usize, upload: &DeviceUpload, base: &Model, outcome: &CloudOutcome) -> Result<DeviceResult> {
    let x = upload.test.samples.view();
    let y = &upload.test.labels;
    Ok(DeviceResult {
        device_id: device_id(device),
        k: upload.k,
        metric_size: outcome.scored.metric.len(),
        params_before: outcome.report.params_before,
        params_after: outcome.report.params_after,
        retention: outcome.report.retention,
        accuracy_base: base.accuracy(x, y)?,
        accuracy_pruned: outcome.pruned.accuracy(x, y)?,
        accuracy_finetuned: outcome.finetuned.accuracy(x, y)?,
        samples: y.len(),
    })
}

fn persist_cloud(dir: &Path, outcome: &CloudOutcome) -> Result<()> {
    outcome.scored.metric.save(&dir.join("metric.json"))?;
    write_text(&dir.join("scores.json"), &outcome.scores_json)?;
    write_text(
        &dir.join("budget.json"),
        &(serde_json::to_string_pretty(&outcome.plan)? + "\n"),
    )?;
    outcome.report.save(&dir.join("prune_report.json"))?;
    outcome.pruned.save(&dir.join("pruned.bin"))?;
    outcome.finetuned.save(&dir.join("finetuned.bin"))
}

/// Runs every device of an in-memory scenario. When `out` is given, all
/// intermediate artifacts are written under it. One device's failure is
/// recorded and does not affect the others.
pub fn run_scenario(scenario: &Scenario, model: &Model, config: &PipelineConfig, out: Option<&Path>) -> Result<PipelineSummary> {
    config.validate()?;
    let ctx = CloudContext::new(model, &scenario.pool)?;
    let results: Vec<Result<DeviceResult>> = (0..scenario.devices.len())
        .into_par_iter()
        .map(|i| {
            let upload = device_side(i, &scenario.devices[i], model, config)?;
            if let Some(out) = out {
                write_text(&device_dir(out, i).join("gmm.json"), &upload.gmm_json)?;
            }
            let outcome = cloud_side(&ctx, i, &upload.gmm_json, config)?;
            let result = evaluate(i, &upload, model, &outcome)?;
            if let Some(out) = out {
                persist_cloud(&cloud_dir(out, i), &outcome)?;
                write_text(&eval_path(out, i), &(serde_json::to_string_pretty(&result)? + "\n"))?;
            }
            Ok(result)
        })
        .collect();
    let summary = collect(config, results);
    if let Some(out) = out {
        write_text(&out.join("summary.json"), &summary.to_json()?)?;
    }
    Ok(summary)
}

/// Runs several strategies on one scenario, sharing the work they have in
/// common: each device fits and uploads once, `Tap` and `RandomUnits` share
/// one scoring pass, and the shared metric set is scored once for everyone.
/// Returns one summary per requested strategy, in order.
pub fn run_strategies(
    scenario: &Scenario,
    model: &Model,
    config: &PipelineConfig,
    strategies: &[Strategy],
) -> Result<Vec<PipelineSummary>> {
    config.validate()?;
    let ctx = CloudContext::new(model, &scenario.pool)?;
    let uploads: Vec<Result<DeviceUpload>> = (0..scenario.devices.len())
        .into_par_iter()
        .map(|i| device_side(i, &scenario.devices[i], model, config))
        .collect();
    let needs_tap = strategies.iter().any(|s| matches!(s, Strategy::Tap | Strategy::RandomUnits));
    let tap_scores: Vec<Option<Result<ScoredMetric>>> = uploads
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            needs_tap.then(|| {
                let u = u.as_ref().map_err(|e| TapError::invalid(e.to_string()))?;
                let gmm = GmmParams::from_json(&u.gmm_json)?;
                let cfg = PipelineConfig {
                    strategy: Strategy::Tap,
                    ..config.clone()
                };
                score_metric(&ctx, i, &gmm, &cfg)
            })
        })
        .collect();
    let shared = if strategies.contains(&Strategy::SharedMetric) {
        let cfg = PipelineConfig {
            strategy: Strategy::SharedMetric,
            ..config.clone()
        };
        let unused = GmmParams {
            weights: vec![1.0],
            means: vec![vec![0.0; ctx.pool_features.ncols()]],
            variances: vec![vec![1.0; ctx.pool_features.ncols()]],
            dim: ctx.pool_features.ncols(),
            seed: 0,
        };
        Some(score_metric(&ctx, 0, &unused, &cfg))
    } else {
        None
    };
    let mut summaries = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let cfg = PipelineConfig {
            strategy,
            ..config.clone()
        };
        let results: Vec<Result<DeviceResult>> = (0..scenario.devices.len())
            .into_par_iter()
            .map(|i| {
                let upload = uploads[i].as_ref().map_err(|e| TapError::invalid(e.to_string()))?;
                let scored = match strategy {
                    Strategy::SharedMetric => {
                        let mut s = shared
                            .as_ref()
                            .expect("scored above")
                            .as_ref()
                            .map_err(|e| TapError::invalid(e.to_string()))?
                            .clone();
                        s.metric.device_id = device_id(i);
                        s
                    }
                    _ => tap_scores[i]
                        .as_ref()
                        .expect("scored above")
                        .as_ref()
                        .map_err(|e| TapError::invalid(e.to_string()))?
                        .clone(),
                };
                let outcome = prune_and_recover(&ctx, i, &scored, cfg.weights, cfg.epsilon_for(i), &cfg)?;
                evaluate(i, upload, model, &outcome)
            })
            .collect();
        summaries.push(collect(&cfg, results));
    }
    Ok(summaries)
}

fn collect(config: &PipelineConfig, results: Vec<Result<DeviceResult>>) -> PipelineSummary {
    let mut devices = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(d) => devices.push(d),
            Err(e) => {
                log::warn!("{} failed: {e}", device_id(i));
                failures.push(DeviceFailure {
                    device_id: device_id(i),
                    error: e.to_string(),
                });
            }
        }
    }
    PipelineSummary::build(config, devices, failures)
}

pub fn device_dir(out: &Path, device: usize) -> PathBuf {
    out.join("device").join(device_id(device))
}

pub fn cloud_dir(out: &Path, device: usize) -> PathBuf {
    out.join("cloud").join(device_id(device))
}

pub fn eval_path(out: &Path, device: usize) -> PathBuf {
    out.join("eval").join(format!("{}.json", device_id(device)))
}

/// Records every file the cloud half opens.
#[derive(Debug, Default)]
pub struct CloudReader {
    opened: Mutex<Vec<PathBuf>>,
}

impl CloudReader {
    fn note(&self, path: &Path) {
        self.opened.lock().expect("reader log").push(path.to_path_buf());
    }

    pub fn read_text(&self, path: &Path) -> Result<String> {
        self.note(path);
        read_text(path)
    }

    pub fn load_pool(&self, path: &Path) -> Result<LabeledSet> {
        self.note(path);
        LabeledSet::load(path)
    }

    pub fn load_model(&self, path: &Path) -> Result<Model> {
        self.note(path);
        Model::load(path)
    }

    pub fn opened(&self) -> Vec<PathBuf> {
        let mut v = self.opened.lock().expect("reader log").clone();
        v.sort();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub version: u32,
    /// Files opened by cloud stages.
    pub cloud_inputs: Vec<PathBuf>,
    /// Cloud inputs located inside the scenario's device directory.
    pub device_paths_opened: Vec<PathBuf>,
    /// Cloud inputs containing a sample value found only in device data.
    pub files_with_device_values: Vec<PathBuf>,
    pub passed: bool,
}

/// Checks that no cloud input is a device file and that no cloud input holds
/// a device-only sample value, either as raw little-endian bytes or as a
/// number in JSON text.
pub fn audit_cloud_inputs(
    cloud_inputs: &[PathBuf],
    devices: &[LabeledSet],
    pool: &LabeledSet,
    device_root: &Path,
) -> Result<AuditReport> {
    let public: HashSet<u64> = pool.samples.iter().map(|v| v.to_bits()).collect();
    let private: HashSet<u64> = devices
        .iter()
        .flat_map(|d| d.samples.iter().map(|v| v.to_bits()))
        .filter(|b| !public.contains(b))
        .collect();
    let root = fs::canonicalize(device_root).unwrap_or_else(|_| device_root.to_path_buf());
    let mut device_paths_opened = Vec::new();
    let mut files_with_device_values = Vec::new();
    for path in cloud_inputs {
        let canon = fs::canonicalize(path).unwrap_or_else(|_| path.clone());
        if canon.starts_with(&root) {
            device_paths_opened.push(path.clone());
        }
        let bytes = fs::read(path).map_err(|e| TapError::io(path, e))?;
        let in_binary = bytes
            .windows(8)
            .any(|w| private.contains(&u64::from_le_bytes(w.try_into().expect("8 bytes"))));
        let in_text = std::str::from_utf8(&bytes)
            .ok()
            .and_then(|t| serde_json::from_str::<serde_json::Value>(t).ok())
            .is_some_and(|v| json_numbers(&v).any(|x| private.contains(&x.to_bits())));
        if in_binary || in_text {
            files_with_device_values.push(path.clone());
        }
    }
    let passed = device_paths_opened.is_empty() && files_with_device_values.is_empty();
    Ok(AuditReport {
        version: FORMAT_VERSION,
        cloud_inputs: cloud_inputs.to_vec(),
        device_paths_opened,
        files_with_device_values,
        passed,
    })
}

fn json_numbers(v: &serde_json::Value) -> Box<dyn Iterator<Item = f64> + '_> {
    match v {
        serde_json::Value::Number(n) => Box::new(n.as_f64().into_iter()),
        serde_json::Value::Array(a) => Box::new(a.iter().flat_map(json_numbers)),
        serde_json::Value::Object(o) => Box::new(o.values().flat_map(json_numbers)),
        _ => Box::new(std::iter::empty()),
    }
}

/// File-driven pipeline. Device stages read only their own `devices/dev_<i>.bin`
/// (plus the shared base model) and write `device/dev_<i>/gmm.json`; cloud
/// stages read only those uploads, `pool.bin` and the base model. Writes the
/// whole artifact tree plus `summary.json` and `audit.json` under `config.out`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<(PipelineSummary, AuditReport)> {
    config.validate()?;
    let scenario_text = read_text(&config.scenario.join("scenario.json"))?;
    let manifest: serde_json::Value = serde_json::from_str(&scenario_text)?;
    let num_devices = manifest["spec"]["num_devices"]
        .as_u64()
        .ok_or_else(|| TapError::invalid("scenario.json lacks spec.num_devices"))? as usize;
    let out = &config.out;

    // device side
    let device_model = Model::load(&config.base_model)?;
    let uploads: Vec<Result<DeviceUpload>> = (0..num_devices)
        .into_par_iter()
        .map(|i| {
            let data = LabeledSet::load(&Scenario::device_path(&config.scenario, i))?;
            let upload = device_side(i, &data, &device_model, config)?;
            write_text(&device_dir(out, i).join("gmm.json"), &upload.gmm_json)?;
            Ok(upload)
        })
        .collect();

    // cloud side
    let reader = CloudReader::default();
    let model = reader.load_model(&config.base_model)?;
    let pool = reader.load_pool(&config.scenario.join("pool.bin"))?;
    let ctx = CloudContext::new(&model, &pool)?;
    let outcomes: Vec<Result<CloudOutcome>> = (0..num_devices)
        .into_par_iter()
        .map(|i| {
            if let Err(e) = &uploads[i] {
                return Err(TapError::invalid(format!("device stage failed: {e}")));
            }
            let gmm_json = reader.read_text(&device_dir(out, i).join("gmm.json"))?;
            let outcome = cloud_side(&ctx, i, &gmm_json, config)?;
            persist_cloud(&cloud_dir(out, i), &outcome)?;
            Ok(outcome)
        })
        .collect();

    // local evaluation
    let results: Vec<Result<DeviceResult>> = uploads
        .iter()
        .zip(&outcomes)
        .enumerate()
        .map(|(i, (u, o))| match (u, o) {
            (Ok(u), Ok(o)) => {
                let r = evaluate(i, u, &device_model, o)?;
                write_text(&eval_path(out, i), &(serde_json::to_string_pretty(&r)? + "\n"))?;
                Ok(r)
            }
            (Err(e), _) | (_, Err(e)) => Err(TapError::invalid(e.to_string())),
        })
        .collect();
    let summary = collect(config, results);
    write_text(&out.join("summary.json"), &summary.to_json()?)?;

    // unreadable device files already surfaced as device failures
    let devices: Vec<LabeledSet> = (0..num_devices)
        .filter_map(|i| LabeledSet::load(&Scenario::device_path(&config.scenario, i)).ok())
        .collect();
    let audit = audit_cloud_inputs(&reader.opened(), &devices, &pool, &config.scenario.join("devices"))?;
    write_text(&out.join("audit.json"), &(serde_json::to_string_pretty(&audit)? + "\n"))?;
    Ok((summary, audit))
}

/// Cross-device importance analysis: every device's uploaded mixture selects
/// its metric set, and the resulting neuron and layer scores are compared.
pub struct SensitivityOutputs {
    pub divergence: crate::sensitivity::DivergenceReport,
    pub layer_scores: Vec<LayerScores>,
    /// Kendall tau between the layer rankings of every device pair; `None`
    /// for single-layer models.
    pub layer_tau: Vec<Vec<Option<f64>>>,
}

pub fn device_sensitivity(scenario: &Scenario, model: &Model, config: &PipelineConfig) -> Result<SensitivityOutputs> {
    use crate::sensitivity::{kendall_tau, task_divergence_matrix, Ranking};
    config.validate()?;
    let ctx = CloudContext::new(model, &scenario.pool)?;
    let cfg = PipelineConfig {
        strategy: Strategy::Tap,
        ..config.clone()
    };
    let scored: Vec<ScoredMetric> = (0..scenario.devices.len())
        .into_par_iter()
        .map(|i| {
            let upload = device_side(i, &scenario.devices[i], model, &cfg)?;
            score_metric(&ctx, i, &GmmParams::from_json(&upload.gmm_json)?, &cfg)
        })
        .collect::<Result<_>>()?;
    let neurons = scored
        .iter()
        .map(|s| s.raw.compose(config.weights))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = (0..scenario.devices.len()).map(device_id).collect();
    let divergence = task_divergence_matrix(&ids, &neurons)?;
    let rankings: Vec<Ranking> = scored
        .iter()
        .map(|s| Ranking::from_scores(&s.layer_scores.delta_raw))
        .collect();
    let layer_tau = rankings
        .iter()
        .map(|a| {
            rankings
                .iter()
                .map(|b| if a.len() >= 2 { kendall_tau(a, b).ok() } else { None })
                .collect()
        })
        .collect();
    Ok(SensitivityOutputs {
        divergence,
        layer_scores: scored.into_iter().map(|s| s.layer_scores).collect(),
        layer_tau,
    })
}

/// Every `(alpha, beta, gamma)` on the simplex with coordinates in multiples of `step`.
pub fn simplex_points(step: f64) -> Result<Vec<ImportanceWeights>> {
    let m = (1.0 / step).round();
    if !(step > 0.0) || m < 1.0 || (m * step - 1.0).abs() > 1e-9 {
        return Err(TapError::invalid(format!("step {step} does not divide 1 evenly")));
    }
    let m = m as usize;
    let mut out = Vec::with_capacity((m + 1) * (m + 2) / 2);
    for i in 0..=m {
        for j in 0..=m - i {
            let k = m - i - j;
            out.push(ImportanceWeights {
                alpha: i as f64 / m as f64,
                beta: j as f64 / m as f64,
                gamma: k as f64 / m as f64,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// `None` when every device failed for this weighting.
    pub weighted_accuracy: Option<f64>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub version: u32,
    pub step: f64,
    pub best: ImportanceWeights,
    pub best_accuracy: f64,
    pub table: Vec<GridRow>,
}

impl GridReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,beta,gamma,weighted_accuracy,failures\n");
        for r in &self.table {
            let acc = r.weighted_accuracy.map(|a| format!("{a:.17e}")).unwrap_or_default();
            out.push_str(&format!("{},{},{},{acc},{}\n", r.alpha, r.beta, r.gamma, r.failures));
        }
        out
    }
}

/// Tie-break: larger gamma, then larger alpha.
fn better(a: (f64, ImportanceWeights), b: (f64, ImportanceWeights)) -> bool {
    const EPS: f64 = 1e-12;
    if (a.0 - b.0).abs() > EPS {
        return a.0 > b.0;
    }
    if (a.1.gamma - b.1.gamma).abs() > EPS {
        return a.1.gamma > b.1.gamma;
    }
    a.1.alpha > b.1.alpha + EPS
}

/// Searches the importance weights on the simplex. Each device's evaluation
/// set is drawn from a held-out slice of the public pool, ranked by that
/// device's uploaded mixture, so no device test data is touched. Criteria are
/// computed once per device and only recomposed per weighting.
pub fn grid_search_weights(scenario: &Scenario, model: &Model, config: &PipelineConfig, step: f64) -> Result<GridReport> {
    config.validate()?;
    let points = simplex_points(step)?;
    let (metric_pool, validation_pool) = scenario
        .pool
        .split(1.0 - config.validation_fraction, derive_seed(config.seed, 700));
    let ctx = CloudContext::new(model, &metric_pool)?;
    let val_features = FeatureExtractor::default_for(Some(model)).extract(Some(model), validation_pool.samples.view())?;
    let per_device_val = (validation_pool.len() / scenario.devices.len().max(1)).max(1);
    struct Prepared {
        scored: ScoredMetric,
        validation: LabeledSet,
    }
    let prepared: Vec<Result<Prepared>> = (0..scenario.devices.len())
        .into_par_iter()
        .map(|i| {
            let upload = device_side(i, &scenario.devices[i], model, config)?;
            let gmm = GmmParams::from_json(&upload.gmm_json)?;
            let scored = score_metric(&ctx, i, &gmm, config)?;
            let val = construct_metric_dataset(device_id(i), &gmm, val_features.view(), per_device_val)?;
            Ok(Prepared {
                scored,
                validation: validation_pool.select(&val.indices),
            })
        })
        .collect();
    let mut table = Vec::with_capacity(points.len());
    for w in &points {
        let runs: Vec<Result<(f64, usize)>> = prepared
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let p = p.as_ref().map_err(|e| TapError::invalid(e.to_string()))?;
                let o = prune_and_recover(&ctx, i, &p.scored, *w, config.epsilon_for(i), config)?;
                let acc = o.finetuned.accuracy(p.validation.samples.view(), &p.validation.labels)?;
                Ok((acc, p.validation.len()))
            })
            .collect();
        let ok: Vec<(f64, usize)> = runs.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
        table.push(GridRow {
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            weighted_accuracy: weighted_accuracy(&ok).ok(),
            failures: runs.len() - ok.len(),
        });
    }
    let mut best: Option<(f64, ImportanceWeights)> = None;
    for (row, w) in table.iter().zip(&points) {
        if let Some(acc) = row.weighted_accuracy {
            if best.is_none_or(|b| better((acc, *w), b)) {
                best = Some((acc, *w));
            }
        }
    }
    let (best_accuracy, best) = best.ok_or(TapError::AllFailed {
        attempts: points.len(),
        first: "every weighting failed on every device".into(),
    })?;
    Ok(GridReport {
        version: FORMAT_VERSION,
        step,
        best,
        best_accuracy,
        table,
    })
}

/// Sizes the global rayon pool from `TAP_THREADS` when set. Call once, early.
pub fn init_threads_from_env() -> Result<()> {
    if let Ok(v) = std::env::var("TAP_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| TapError::invalid(format!("TAP_THREADS={v} is not a thread count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| TapError::invalid(format!("thread pool: {e}")))?;
    }
    Ok(())
}

/// Features of `samples` under the shared extractor of `model`.
pub fn extract_default(model: &Model, samples: ArrayView2<f64>) -> Result<Array2<f64>> {
    FeatureExtractor::default_for(Some(model)).extract(Some(model), samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_accuracy_examples() {
        assert_eq!(weighted_accuracy(&[(1.0, 100), (0.5, 300)]).unwrap(), 0.625);
        assert!((weighted_accuracy(&[(0.2, 7), (0.4, 7), (0.9, 7)]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(weighted_accuracy(&[(0.37, 12)]).unwrap(), 0.37);
        assert!(weighted_accuracy(&[]).is_err());
        assert!(weighted_accuracy(&[(0.5, 0)]).is_err());
    }

    #[test]
    fn simplex_enumeration() {
        assert_eq!(simplex_points(0.1).unwrap().len(), 66);
        let half: Vec<(f64, f64, f64)> = simplex_points(0.5)
            .unwrap()
            .into_iter()
            .map(|w| (w.alpha, w.beta, w.gamma))
            .collect();
        let mut want = vec![
            (0.0, 0.0, 1.0),
            (0.0, 0.5, 0.5),
            (0.0, 1.0, 0.0),
            (0.5, 0.0, 0.5),
            (0.5, 0.5, 0.0),
            (1.0, 0.0, 0.0),
        ];
        let mut got = half.clone();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
        for s in [1.0, 0.5, 0.25, 0.2, 0.1, 0.05] {
            let m = (1.0 / s) as usize;
            assert_eq!(simplex_points(s).unwrap().len(), (m + 2) * (m + 1) / 2);
            for w in simplex_points(s).unwrap() {
                w.validate().unwrap();
            }
        }
        assert!(simplex_points(0.3).is_err());
        assert!(simplex_points(0.0).is_err());
    }

    #[test]
    fn grid_ties_prefer_gamma_then_alpha() {
        let w = |a, b, g| ImportanceWeights {
            alpha: a,
            beta: b,
            gamma: g,
        };
        assert!(better((0.5, w(0.0, 0.2, 0.8)), (0.5, w(0.3, 0.0, 0.7))));
        assert!(better((0.5, w(0.2, 0.0, 0.8)), (0.5, w(0.0, 0.2, 0.8))));
        assert!(better((0.6, w(1.0, 0.0, 0.0)), (0.5, w(0.0, 0.0, 1.0))));
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(c.metric_size, 512);
        assert_eq!(c.k_range, (2..=10).collect::<Vec<_>>());
        let parsed = PipelineConfig::from_json(r#"{"epsilon_t": 0.2, "strategy": "random_units"}"#).unwrap();
        assert_eq!(parsed.epsilon_t, 0.2);
        assert_eq!(parsed.strategy, Strategy::RandomUnits);
        assert!(PipelineConfig::from_json(r#"{"epsilon_t": 1.0}"#).is_err());
        let per = PipelineConfig {
            device_epsilon: Some(vec![0.1, 0.4]),
            ..PipelineConfig::default()
        };
        assert_eq!(per.epsilon_for(1), 0.4);
        assert_eq!(per.epsilon_for(5), 0.3);
    }

    #[test]
    fn shared_metric_is_seeded_and_sorted() {
        let a = shared_metric(100, 20, 3).unwrap();
        assert_eq!(a, shared_metric(100, 20, 3).unwrap());
        assert!(a.indices.windows(2).all(|w| w[0] < w[1]));
        assert!(shared_metric(10, 20, 3).is_err());
    }
}
