use std::collections::BTreeMap;
use std::path::Path;

use tapvit::datagen::{generate_scenario, train_toy_model, Scenario, ScenarioSpec, TrainConfig};
use tapvit::nn::{Model, ModelConfig, TrainScope};
use tapvit::pipeline::{cloud_dir, device_dir, run_pipeline, PipelineConfig, Strategy};

fn small_setup(root: &Path, seed: u64) -> PipelineConfig {
    let spec = ScenarioSpec {
        num_devices: 4,
        num_classes: 8,
        pool_per_class: 20,
        device_per_class: 30,
        noise: 0.8,
        seed,
        ..ScenarioSpec::default()
    };
    let scenario = generate_scenario(&spec).unwrap();
    scenario.save(&root.join("scenario")).unwrap();
    let arch = ModelConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        d: 12,
        d_prime: 16,
        heads: 2,
        layers: 2,
        num_classes: 8,
        seed,
    };
    let train = TrainConfig {
        epochs: 4,
        scope: TrainScope::All,
        seed,
        ..TrainConfig::default()
    };
    train_toy_model(&scenario.pool, &arch, &train)
        .unwrap()
        .save(&root.join("base.bin"))
        .unwrap();
    PipelineConfig {
        scenario: root.join("scenario"),
        base_model: root.join("base.bin"),
        out: root.join("out"),
        metric_size: 48,
        k_range: vec![1, 2, 3],
        finetune_epochs: 3,
        seed,
        ..PipelineConfig::default()
    }
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

#[test]
fn end_to_end_writes_every_artifact_and_passes_audit() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_setup(tmp.path(), 1);
    let (summary, audit) = run_pipeline(&config).unwrap();
    assert!(audit.passed, "{audit:?}");
    assert!(audit.device_paths_opened.is_empty());
    assert!(!audit.cloud_inputs.is_empty());
    assert_eq!(summary.devices.len(), 4);
    assert!(summary.failures.is_empty());
    for d in &summary.devices {
        for a in [d.accuracy_base, d.accuracy_pruned, d.accuracy_finetuned] {
            assert!((0.0..=1.0).contains(&a));
        }
        assert!((d.retention - 0.7).abs() <= 0.02 + 0.05, "retention {}", d.retention);
        assert_eq!(d.samples, 12);
    }
    let out = &config.out;
    for i in 0..4 {
        assert!(device_dir(out, i).join("gmm.json").exists());
        for f in [
            "metric.json",
            "scores.json",
            "budget.json",
            "prune_report.json",
            "pruned.bin",
            "finetuned.bin",
        ] {
            assert!(cloud_dir(out, i).join(f).exists(), "dev_{i} lacks {f}");
        }
        assert!(out.join("eval").join(format!("dev_{i}.json")).exists());
    }
    // the device side writes nothing but the mixture upload
    for (name, _) in tree(&out.join("device")) {
        assert!(name.ends_with("gmm.json"), "unexpected device artifact {name}");
    }
    assert!(out.join("summary.json").exists());
    assert!(out.join("audit.json").exists());
}

#[test]
fn zero_budget_without_finetuning_is_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let config = PipelineConfig {
        epsilon_t: 0.0,
        finetune_epochs: 0,
        ..small_setup(tmp.path(), 2)
    };
    let (summary, _) = run_pipeline(&config).unwrap();
    let base = Model::load(&config.base_model).unwrap();
    for i in 0..4 {
        for f in ["pruned.bin", "finetuned.bin"] {
            let m = Model::load(&cloud_dir(&config.out, i).join(f)).unwrap();
            assert_eq!(m, base, "dev_{i} {f}");
        }
    }
    for d in &summary.devices {
        assert_eq!(d.params_after, d.params_before);
        assert_eq!(d.accuracy_pruned, d.accuracy_base);
    }
}

#[test]
fn output_tree_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = small_setup(tmp.path(), 3);
    run_pipeline(&a).unwrap();
    let b = PipelineConfig {
        out: tmp.path().join("out2"),
        ..a.clone()
    };
    run_pipeline(&b).unwrap();
    let (ta, tb) = (tree(&a.out), tree(&b.out));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (name, bytes) in &ta {
        // the audit names its output directory; everything else must match byte for byte
        if name != "audit.json" {
            assert!(bytes == &tb[name], "{name} differs between runs");
        }
    }
}

#[test]
fn one_failing_device_leaves_the_others_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_setup(tmp.path(), 4);
    let (clean, _) = run_pipeline(&config).unwrap();
    std::fs::write(Scenario::device_path(&config.scenario, 2), b"not a container").unwrap();
    let broken = PipelineConfig {
        out: tmp.path().join("out_broken"),
        ..config.clone()
    };
    let (summary, audit) = run_pipeline(&broken).unwrap();
    assert!(audit.passed);
    assert_eq!(summary.failures.len(), 1);
    assert_eq!(summary.failures[0].device_id, "dev_2");
    let expected: Vec<_> = clean.devices.iter().filter(|d| d.device_id != "dev_2").cloned().collect();
    assert_eq!(summary.devices, expected);
}

#[test]
fn control_strategies_run_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let base = small_setup(tmp.path(), 5);
    for strategy in [Strategy::RandomUnits, Strategy::SharedMetric] {
        let config = PipelineConfig {
            strategy,
            out: tmp.path().join(format!("{strategy:?}")),
            ..base.clone()
        };
        let (summary, audit) = run_pipeline(&config).unwrap();
        assert!(audit.passed);
        assert_eq!(summary.strategy, strategy);
        assert_eq!(summary.devices.len(), 4);
    }
}
