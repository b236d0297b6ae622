use tapvit::datagen::{generate_scenario, train_toy_model, ScenarioSpec, TrainConfig};
use tapvit::nn::{ModelConfig, TrainScope};
use tapvit::pipeline::{run_scenario, PipelineConfig};

/// Head recovery on a 512-sample metric set (50 epochs, lr 1e-2) must raise
/// the pruned model's device-task accuracy.
#[test]
fn recovery_improves_pruned_accuracy() {
    let seeds = 10u64;
    let mut improved = 0;
    let mut log = Vec::new();
    for seed in 0..seeds {
        let spec = ScenarioSpec {
            num_devices: 4,
            num_classes: 8,
            pool_per_class: 256,
            device_per_class: 100,
            noise: 2.0,
            seed,
            ..ScenarioSpec::default()
        };
        let sc = generate_scenario(&spec).unwrap();
        let arch = ModelConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            d: 16,
            d_prime: 32,
            heads: 2,
            layers: 3,
            num_classes: 8,
            seed,
        };
        let train = TrainConfig {
            epochs: 8,
            scope: TrainScope::All,
            seed,
            ..TrainConfig::default()
        };
        let model = train_toy_model(&sc.pool, &arch, &train).unwrap();
        let config = PipelineConfig {
            metric_size: 512,
            finetune_epochs: 50,
            finetune_lr: 1e-2,
            seed,
            ..PipelineConfig::default()
        };
        let s = run_scenario(&sc, &model, &config, None).unwrap();
        let (before, after) = (s.weighted_accuracy_pruned.unwrap(), s.weighted_accuracy_finetuned.unwrap());
        log.push(format!("{before:.3}->{after:.3}"));
        improved += (after > before) as usize;
    }
    assert!(improved >= 9, "improved in {improved}/{seeds}: {log:?}");
}
