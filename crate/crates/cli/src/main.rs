use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use tapvit::datagen::{generate_scenario, toy_architecture, train_toy_model, LabeledSet, Scenario, ScenarioSpec, TrainConfig};
use tapvit::gmm::GmmParams;
use tapvit::importance::{scores_from_json, ImportanceWeights};
use tapvit::metric::{construct_metric_dataset, MetricDataset};
use tapvit::nn::{Model, ModelConfig};
use tapvit::pipeline::{
    cloud_dir, device_dir, device_id, device_sensitivity, device_split, eval_path, extract_default, grid_search_weights,
    init_threads_from_env, run_pipeline, write_text, DeviceResult, PipelineConfig, PipelineSummary, Strategy,
};
use tapvit::pruner::{finetune, plan_for_retention, prune_with_order, random_order, removal_order};
use tapvit::stats::derive_seed;

#[derive(Parser)]
#[command(name = "tapvit", version, about = "Task-adaptive pruning of small vision transformers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config: pipeline fields at top level, plus optional
    /// `scenario_spec`, `model` and `train` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Global parameter pruning ratio.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Importance weights as `alpha,beta,gamma`.
    #[arg(long, global = true, value_parser = parse_weights)]
    weights: Option<ImportanceWeights>,
    /// Give more budget to layers whose removal changes the output least.
    #[arg(long, global = true)]
    invert_layer_budget: bool,
    /// Scenario directory.
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Base model checkpoint.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic non-IID scenario.
    GenScenario,
    /// Train the toy base model on the scenario pool.
    TrainBase,
    /// Device stage: fit the mixture on local data and write the upload.
    FitGmm(DeviceArg),
    /// Cloud stage: select the metric set from an uploaded mixture.
    BuildMetric(DeviceArg),
    /// Cloud stage: neuron and layer scores on the metric set.
    Score(DeviceArg),
    /// Cloud stage: allocate budgets and excise units.
    Prune(PruneArgs),
    /// Cloud stage: recover the pruned model on the metric set.
    Finetune(DeviceArg),
    /// Device stage: local test accuracy of base, pruned and recovered models.
    Evaluate(OptionalDevice),
    /// Full pipeline for every device, with the data-flow audit.
    Run,
    /// Cross-device importance divergence and layer profiles.
    Sensitivity,
    /// Search the importance weights on the simplex.
    GridSearch {
        #[arg(long, default_value_t = 0.1)]
        step: f64,
    },
}

#[derive(Args)]
struct DeviceArg {
    #[arg(long)]
    device: usize,
}

#[derive(Args)]
struct OptionalDevice {
    /// Evaluate one device; all devices with artifacts when omitted.
    #[arg(long)]
    device: Option<usize>,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    device: usize,
    /// Remove random units instead of the lowest-importance ones.
    #[arg(long)]
    random: bool,
}

#[derive(Default, Deserialize)]
#[serde(default)]
struct FileConfig {
    #[serde(flatten)]
    pipeline: PipelineConfig,
    scenario_spec: ScenarioSpec,
    model: Option<ModelConfig>,
    train: TrainConfig,
}

fn parse_weights(s: &str) -> std::result::Result<ImportanceWeights, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [a, b, g] => ImportanceWeights::new(a, b, g).map_err(|e| e.to_string()),
        _ => Err(format!("expected three comma-separated weights, got {}", parts.len())),
    }
}

impl Common {
    fn resolve(&self) -> Result<FileConfig> {
        let mut c: FileConfig = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => FileConfig::default(),
        };
        if let Some(seed) = self.seed {
            c.pipeline.seed = seed;
            c.scenario_spec.seed = seed;
            c.train.seed = seed;
            if let Some(m) = &mut c.model {
                m.seed = seed;
            }
        }
        if let Some(out) = &self.out {
            c.pipeline.out = out.clone();
        }
        if let Some(e) = self.epsilon {
            c.pipeline.epsilon_t = e;
        }
        if let Some(w) = self.weights {
            c.pipeline.weights = w;
        }
        if self.invert_layer_budget {
            c.pipeline.invert_layer_budget = true;
        }
        if let Some(s) = &self.scenario {
            c.pipeline.scenario = s.clone();
        }
        if let Some(m) = &self.model {
            c.pipeline.base_model = m.clone();
        }
        c.pipeline.validate()?;
        Ok(c)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads_from_env()?;
    let cli = Cli::parse();
    let fc = cli.common.resolve()?;
    let cfg = &fc.pipeline;
    match cli.command {
        Command::GenScenario => {
            let dir = cli.common.out.clone().unwrap_or_else(|| cfg.scenario.clone());
            let scenario = generate_scenario(&fc.scenario_spec)?;
            scenario.save(&dir)?;
            log::info!(
                "scenario with {} devices written to {}",
                scenario.devices.len(),
                dir.display()
            );
        }
        Command::TrainBase => {
            let path = match &cli.common.out {
                Some(dir) => dir.join("base_model.bin"),
                None => cfg.base_model.clone(),
            };
            let scenario = Scenario::load(&cfg.scenario)?;
            let arch = fc
                .model
                .clone()
                .unwrap_or_else(|| toy_architecture(&scenario.spec, fc.train.seed));
            let model = train_toy_model(&scenario.pool, &arch, &fc.train)?;
            let acc = model.accuracy(scenario.pool.samples.view(), &scenario.pool.labels)?;
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            model.save(&path)?;
            log::info!(
                "base model ({} params, pool accuracy {acc:.3}) written to {}",
                model.param_count(),
                path.display()
            );
        }
        Command::FitGmm(a) => {
            let data = LabeledSet::load(&Scenario::device_path(&cfg.scenario, a.device))?;
            let model = Model::load(&cfg.base_model)?;
            let upload = tapvit::pipeline::device_side(a.device, &data, &model, cfg)?;
            let dir = device_dir(&cfg.out, a.device);
            write_text(&dir.join("gmm.json"), &upload.gmm_json)?;
            write_text(&dir.join("bic.json"), &(serde_json::to_string_pretty(&upload.bic)? + "\n"))?;
            log::info!("{}: K={} uploaded to {}", device_id(a.device), upload.k, dir.display());
        }
        Command::BuildMetric(a) => {
            let gmm = GmmParams::from_json(&std::fs::read_to_string(device_dir(&cfg.out, a.device).join("gmm.json"))?)?;
            let model = Model::load(&cfg.base_model)?;
            let pool = LabeledSet::load(&cfg.scenario.join("pool.bin"))?;
            let features = extract_default(&model, pool.samples.view())?;
            let metric = construct_metric_dataset(device_id(a.device), &gmm, features.view(), cfg.metric_size)?;
            let path = cloud_dir(&cfg.out, a.device).join("metric.json");
            metric.save(&path)?;
            log::info!(
                "{}: {} metric samples written to {}",
                device_id(a.device),
                metric.len(),
                path.display()
            );
        }
        Command::Score(a) => {
            let dir = cloud_dir(&cfg.out, a.device);
            let metric = MetricDataset::load(&dir.join("metric.json"))?;
            let model = Model::load(&cfg.base_model)?;
            let samples = metric_samples(&cfg.scenario, &metric)?.samples;
            let neurons = tapvit::importance::neuron_scores(&model, samples.view(), cfg.weights, &cfg.estimator)?;
            let layers = tapvit::importance::layer_importance(&model, samples.view(), cfg.invert_layer_budget)?;
            for w in &neurons.warnings {
                log::warn!("{w}");
            }
            write_text(
                &dir.join("scores.json"),
                &tapvit::importance::scores_to_json(&neurons, &layers)?,
            )?;
            log::info!("{}: layer shares {:?}", device_id(a.device), layers.delta);
        }
        Command::Prune(a) => {
            let dir = cloud_dir(&cfg.out, a.device);
            let model = Model::load(&cfg.base_model)?;
            let text = std::fs::read_to_string(dir.join("scores.json"))?;
            let (neurons, mut layers) = scores_from_json(&text, model.num_layers(), cfg.weights)?;
            if cfg.invert_layer_budget != layers.inverted {
                layers = layers.inverted();
            }
            let eps = cfg.epsilon_for(a.device);
            let plan = plan_for_retention(&model, &neurons, &layers, eps, cfg.epsilon_max)?;
            let order = if a.random {
                random_order(&model, derive_seed(cfg.seed, 600 + a.device as u64))
            } else {
                removal_order(&neurons)
            };
            let (pruned, mut report) = prune_with_order(&model, &order, &plan)?;
            report.device_id = device_id(a.device);
            write_text(&dir.join("budget.json"), &(serde_json::to_string_pretty(&plan)? + "\n"))?;
            report.save(&dir.join("prune_report.json"))?;
            pruned.save(&dir.join("pruned.bin"))?;
            log::info!(
                "{}: {} -> {} params (retention {:.4})",
                device_id(a.device),
                report.params_before,
                report.params_after,
                report.retention
            );
        }
        Command::Finetune(a) => {
            let dir = cloud_dir(&cfg.out, a.device);
            let pruned = Model::load(&dir.join("pruned.bin"))?;
            let metric = MetricDataset::load(&dir.join("metric.json"))?;
            let set = metric_samples(&cfg.scenario, &metric)?;
            let (tuned, report) = finetune(&pruned, set.samples.view(), &set.labels, &cfg.finetune_config(a.device))?;
            tuned.save(&dir.join("finetuned.bin"))?;
            write_text(&dir.join("finetune.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
            log::info!(
                "{}: loss {:?} -> {:?}",
                device_id(a.device),
                report.losses.first(),
                report.losses.get(report.best_epoch)
            );
        }
        Command::Evaluate(a) => {
            let base = Model::load(&cfg.base_model)?;
            let devices: Vec<usize> = match a.device {
                Some(d) => vec![d],
                None => (0..)
                    .take_while(|&i| Scenario::device_path(&cfg.scenario, i).exists())
                    .filter(|&i| cloud_dir(&cfg.out, i).join("finetuned.bin").exists())
                    .collect(),
            };
            if devices.is_empty() {
                bail!("no device has a fine-tuned model under {}", cfg.out.display());
            }
            let mut results = Vec::new();
            for i in devices {
                let r = evaluate_device(cfg, &base, i)?;
                write_text(&eval_path(&cfg.out, i), &(serde_json::to_string_pretty(&r)? + "\n"))?;
                log::info!(
                    "{}: base {:.4} pruned {:.4} finetuned {:.4}",
                    r.device_id,
                    r.accuracy_base,
                    r.accuracy_pruned,
                    r.accuracy_finetuned
                );
                results.push(r);
            }
            if a.device.is_none() {
                let summary = PipelineSummary::build(cfg, results, Vec::new());
                write_text(&cfg.out.join("summary.json"), &summary.to_json()?)?;
                print_summary(&summary);
            }
        }
        Command::Run => {
            let (summary, audit) = run_pipeline(cfg)?;
            print_summary(&summary);
            if !audit.passed {
                bail!(
                    "data-flow audit failed: device paths {:?}, files with device values {:?}",
                    audit.device_paths_opened,
                    audit.files_with_device_values
                );
            }
        }
        Command::Sensitivity => {
            let scenario = Scenario::load(&cfg.scenario)?;
            let model = Model::load(&cfg.base_model)?;
            let s = device_sensitivity(
                &scenario,
                &model,
                &PipelineConfig {
                    strategy: Strategy::Tap,
                    ..cfg.clone()
                },
            )?;
            let dir = cfg.out.join("sensitivity");
            write_text(&dir.join("divergence.csv"), &s.divergence.divergence_csv())?;
            write_text(&dir.join("tau.csv"), &s.divergence.tau_csv())?;
            write_text(&dir.join("breakdown.json"), &s.divergence.breakdown_json()?)?;
            let profiles = serde_json::json!({
                "layer_scores": s.layer_scores,
                "layer_tau": s.layer_tau,
            });
            write_text(
                &dir.join("layer_profiles.json"),
                &(serde_json::to_string_pretty(&profiles)? + "\n"),
            )?;
            log::info!("sensitivity tables written to {}", dir.display());
        }
        Command::GridSearch { step } => {
            let scenario = Scenario::load(&cfg.scenario)?;
            let model = Model::load(&cfg.base_model)?;
            let report = grid_search_weights(&scenario, &model, cfg, step)?;
            write_text(&cfg.out.join("grid.json"), &report.to_json()?)?;
            write_text(&cfg.out.join("grid.csv"), &report.to_csv())?;
            println!(
                "best alpha={} beta={} gamma={} accuracy {:.4}",
                report.best.alpha, report.best.beta, report.best.gamma, report.best_accuracy
            );
        }
    }
    Ok(())
}

fn metric_samples(scenario: &Path, metric: &MetricDataset) -> Result<LabeledSet> {
    let pool = LabeledSet::load(&scenario.join("pool.bin"))?;
    if let Some(&bad) = metric.indices.iter().find(|&&i| i >= pool.len()) {
        bail!("metric index {bad} outside the pool of {}", pool.len());
    }
    Ok(pool.select(&metric.indices))
}

fn evaluate_device(cfg: &PipelineConfig, base: &Model, device: usize) -> Result<DeviceResult> {
    let data = LabeledSet::load(&Scenario::device_path(&cfg.scenario, device))?;
    let (_, test) = device_split(device, &data, cfg);
    let dir = cloud_dir(&cfg.out, device);
    let pruned = Model::load(&dir.join("pruned.bin"))?;
    let tuned = Model::load(&dir.join("finetuned.bin"))?;
    let report = tapvit::pruner::PruneReport::from_json(&std::fs::read_to_string(dir.join("prune_report.json"))?)?;
    let metric = MetricDataset::load(&dir.join("metric.json"))?;
    let k = GmmParams::from_json(&std::fs::read_to_string(device_dir(&cfg.out, device).join("gmm.json"))?)?.k();
    let (x, y) = (test.samples.view(), &test.labels);
    Ok(DeviceResult {
        device_id: device_id(device),
        k,
        metric_size: metric.len(),
        params_before: report.params_before,
        params_after: report.params_after,
        retention: report.retention,
        accuracy_base: base.accuracy(x, y)?,
        accuracy_pruned: pruned.accuracy(x, y)?,
        accuracy_finetuned: tuned.accuracy(x, y)?,
        samples: y.len(),
    })
}

fn print_summary(s: &PipelineSummary) {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    println!(
        "weighted accuracy: base {} pruned {} finetuned {} ({} devices, {} failed)",
        fmt(s.weighted_accuracy_base),
        fmt(s.weighted_accuracy_pruned),
        fmt(s.weighted_accuracy_finetuned),
        s.devices.len(),
        s.failures.len()
    );
}
