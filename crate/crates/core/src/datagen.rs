//! Seeded synthetic non-IID scenarios and the toy base model.
//!
//! Every class is a Gaussian prototype in pixel space; samples are the
//! prototype plus isotropic noise. Classes are shuffled and dealt into
//! disjoint label groups, one per device. The public pool holds all classes;
//! each device holds fresh draws from its own group only.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{Container, Tensor};
use crate::error::{Result, TapError};
use crate::nn::{Model, ModelConfig, TrainScope};
use crate::stats::derive_seed;
use crate::FORMAT_VERSION;

/// How class prototypes occupy the pixel grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeLayout {
    /// Every prototype uses every pixel.
    Dense,
    /// Pixels are dealt into one disjoint region per label group; a class
    /// prototype is nonzero only inside its group's region.
    Localized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub num_devices: usize,
    pub num_classes: usize,
    pub pool_per_class: usize,
    pub device_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Standard deviation of prototype pixel values.
    pub prototype_scale: f64,
    /// Standard deviation of per-sample pixel noise.
    pub noise: f64,
    pub layout: PrototypeLayout,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            num_devices: 10,
            num_classes: 20,
            pool_per_class: 60,
            device_per_class: 50,
            image_size: 8,
            channels: 1,
            prototype_scale: 1.0,
            noise: 1.0,
            layout: PrototypeLayout::Dense,
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    pub fn input_dim(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_devices == 0 || self.num_classes == 0 {
            return Err(TapError::invalid("scenario needs at least one device and one class"));
        }
        if self.num_devices > self.num_classes {
            return Err(TapError::invalid(format!(
                "{} devices cannot hold disjoint groups of {} classes",
                self.num_devices, self.num_classes
            )));
        }
        if !(self.noise >= 0.0) || !(self.prototype_scale >= 0.0) {
            return Err(TapError::invalid("noise and prototype scale must be >= 0"));
        }
        if self.image_size == 0 || self.channels == 0 {
            return Err(TapError::invalid("empty image geometry"));
        }
        if self.layout == PrototypeLayout::Localized && self.input_dim() < self.num_devices {
            return Err(TapError::invalid("fewer pixels than label groups"));
        }
        Ok(())
    }
}

/// Row-major samples with one integer label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub samples: Array2<f64>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            samples: self.samples.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Seeded split into `(first, second)` with `round(fraction * n)` rows first.
    pub fn split(&self, fraction: f64, seed: u64) -> (LabeledSet, LabeledSet) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((fraction * self.len() as f64).round() as usize).min(self.len());
        let (a, b) = idx.split_at(cut);
        let (mut a, mut b) = (a.to_vec(), b.to_vec());
        a.sort_unstable();
        b.sort_unstable();
        (self.select(&a), self.select(&b))
    }

    pub fn to_container(&self, num_classes: usize) -> Container {
        let mut c = Container::default();
        c.header.insert("version".into(), FORMAT_VERSION.into());
        c.header.insert("kind".into(), "dataset".into());
        c.header.insert("rows".into(), self.len().into());
        c.header.insert("dim".into(), self.samples.ncols().into());
        c.header.insert("num_classes".into(), num_classes.into());
        c.push(Tensor::new(
            "samples",
            vec![self.samples.nrows(), self.samples.ncols()],
            self.samples.iter().copied().collect(),
        ));
        c.push(Tensor::new(
            "labels",
            vec![self.len()],
            self.labels.iter().map(|&l| l as f64).collect(),
        ));
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        let rows = c.header_usize("rows")?;
        let dim = c.header_usize("dim")?;
        let samples = Array2::from_shape_vec((rows, dim), c.take("samples", &[rows, dim])?).expect("shape checked");
        let labels = c
            .take("labels", &[rows])?
            .into_iter()
            .map(|l| {
                if l >= 0.0 && l.fract() == 0.0 {
                    Ok(l as usize)
                } else {
                    Err(TapError::invalid(format!("label {l} is not a class index")))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { samples, labels })
    }

    pub fn save(&self, path: &Path, num_classes: usize) -> Result<()> {
        self.to_container(num_classes).write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    /// Sorted class ids per device; disjoint and covering all classes.
    pub groups: Vec<Vec<usize>>,
    pub prototypes: Array2<f64>,
    pub pool: LabeledSet,
    pub devices: Vec<LabeledSet>,
}

#[derive(Serialize, Deserialize)]
struct ScenarioManifest {
    version: u32,
    spec: ScenarioSpec,
    groups: Vec<Vec<usize>>,
    seed: u64,
}

/// Deals shuffled classes into `m` groups whose sizes differ by at most one.
pub fn partition_classes(num_classes: usize, m: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut classes: Vec<usize> = (0..num_classes).collect();
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = num_classes / m;
    let extra = num_classes % m;
    let mut groups = Vec::with_capacity(m);
    let mut start = 0;
    for g in 0..m {
        let size = base + usize::from(g < extra);
        let mut grp = classes[start..start + size].to_vec();
        grp.sort_unstable();
        groups.push(grp);
        start += size;
    }
    groups
}

fn draw(prototypes: &Array2<f64>, classes: &[usize], per_class: usize, noise: f64, seed: u64) -> LabeledSet {
    let dim = prototypes.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n = classes.len() * per_class;
    let mut samples = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for (ci, &c) in classes.iter().enumerate() {
        for s in 0..per_class {
            let mut row = samples.row_mut(ci * per_class + s);
            row.assign(&prototypes.row(c));
            if noise > 0.0 {
                row.mapv_inplace(|v| v + noise * normal.sample(&mut rng));
            }
            labels.push(c);
        }
    }
    LabeledSet { samples, labels }
}

/// Generates the public pool and every device dataset from `spec.seed` alone.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let groups = partition_classes(spec.num_classes, spec.num_devices, derive_seed(spec.seed, 1));
    let dim = spec.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 2));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut prototypes = Array2::from_shape_simple_fn((spec.num_classes, dim), || spec.prototype_scale * normal.sample(&mut rng));
    if spec.layout == PrototypeLayout::Localized {
        let mut pixels: Vec<usize> = (0..dim).collect();
        pixels.shuffle(&mut rng);
        for (g, group) in groups.iter().enumerate() {
            for (slot, &px) in pixels.iter().enumerate() {
                if slot % groups.len() != g {
                    for &c in group {
                        prototypes[[c, px]] = 0.0;
                    }
                }
            }
        }
    }
    let all: Vec<usize> = (0..spec.num_classes).collect();
    let pool = draw(&prototypes, &all, spec.pool_per_class, spec.noise, derive_seed(spec.seed, 3));
    let devices = groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            draw(
                &prototypes,
                g,
                spec.device_per_class,
                spec.noise,
                derive_seed(spec.seed, 100 + i as u64),
            )
        })
        .collect();
    Ok(Scenario {
        spec: spec.clone(),
        groups,
        prototypes,
        pool,
        devices,
    })
}

impl Scenario {
    pub fn device_path(dir: &Path, device: usize) -> std::path::PathBuf {
        dir.join("devices").join(format!("dev_{device}.bin"))
    }

    /// Writes `scenario.json`, `pool.bin` and `devices/dev_<i>.bin`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("devices")).map_err(|e| TapError::io(dir, e))?;
        let manifest = ScenarioManifest {
            version: FORMAT_VERSION,
            spec: self.spec.clone(),
            groups: self.groups.clone(),
            seed: self.spec.seed,
        };
        let path = dir.join("scenario.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| TapError::io(path, e))?;
        self.pool.save(&dir.join("pool.bin"), self.spec.num_classes)?;
        for (i, d) in self.devices.iter().enumerate() {
            d.save(&Self::device_path(dir, i), self.spec.num_classes)?;
        }
        Ok(())
    }

    /// Loads a saved scenario; prototypes are regenerated from the spec.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("scenario.json");
        let text = fs::read_to_string(&path).map_err(|e| TapError::io(&path, e))?;
        let manifest: ScenarioManifest = serde_json::from_str(&text)?;
        let regenerated = generate_scenario(&manifest.spec)?;
        let pool = LabeledSet::load(&dir.join("pool.bin"))?;
        let devices = (0..manifest.spec.num_devices)
            .map(|i| LabeledSet::load(&Self::device_path(dir, i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: manifest.spec,
            groups: manifest.groups,
            prototypes: regenerated.prototypes,
            pool,
            devices,
        })
    }
}

/// The small ViT used for synthetic scenarios: 4x4 patches (or the whole
/// image when smaller), d=32, d'=64, 4 heads, 4 blocks.
pub fn toy_architecture(spec: &ScenarioSpec, seed: u64) -> ModelConfig {
    let patch_size = if spec.image_size % 4 == 0 { 4 } else { spec.image_size };
    ModelConfig {
        image_size: spec.image_size,
        patch_size,
        channels: spec.channels,
        d: 32,
        d_prime: 64,
        heads: 4,
        layers: 4,
        num_classes: spec.num_classes,
        seed,
    }
}

/// Optimization settings for [`train_toy_model`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub scope: TrainScope,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 3e-3,
            batch_size: 32,
            scope: TrainScope::HeadAndEmbedding,
            seed: 0,
        }
    }
}

/// Trains a seeded toy model on a labeled pool with Adam minibatches.
/// Returns the initialization unchanged when `epochs == 0`.
pub fn train_toy_model(pool: &LabeledSet, architecture: &ModelConfig, config: &TrainConfig) -> Result<Model> {
    if pool.is_empty() {
        return Err(TapError::invalid("cannot train on an empty pool"));
    }
    let mut model = Model::init(architecture.clone())?;
    train_model(&mut model, pool.samples.view(), &pool.labels, config)?;
    Ok(model)
}

/// Continues training `model` in place; returns the mean loss of each epoch.
pub fn train_model(model: &mut Model, samples: ArrayView2<f64>, labels: &[usize], config: &TrainConfig) -> Result<Vec<f64>> {
    use crate::nn::Adam;
    use rayon::prelude::*;

    if config.batch_size == 0 {
        return Err(TapError::invalid("batch size must be >= 1"));
    }
    let n = labels.len();
    let params = model.clone().flat_len();
    let mut adam = Adam::new(config.learning_rate, params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 7));
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            // fixed sub-chunks summed in order keep the result thread-count independent
            let parts: Vec<(f64, crate::nn::ModelGrads, usize)> = chunk
                .par_chunks(8)
                .map(|sub| {
                    let x = samples.select(Axis(0), sub);
                    let y: Vec<usize> = sub.iter().map(|&i| labels[i]).collect();
                    model
                        .loss_and_grads(x.view(), &y, config.scope)
                        .map(|(l, g)| (l * sub.len() as f64, g, sub.len()))
                })
                .collect::<Result<_>>()?;
            let mut total = 0.0;
            let mut grads: Option<crate::nn::ModelGrads> = None;
            for (loss, g, len) in parts {
                total += loss;
                let scale = len as f64 / chunk.len() as f64;
                grads = Some(match grads {
                    None => g.scaled(scale),
                    Some(acc) => acc.add_scaled(&g, scale),
                });
            }
            let loss = total / chunk.len() as f64;
            if !loss.is_finite() {
                return Err(TapError::Diverged { step, loss });
            }
            adam.step(model, &grads.expect("non-empty chunk"), config.scope);
            epoch_loss += total;
            step += 1;
        }
        history.push(epoch_loss / n as f64);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> ScenarioSpec {
        ScenarioSpec {
            num_devices: 10,
            num_classes: 20,
            pool_per_class: 5,
            device_per_class: 4,
            seed,
            ..ScenarioSpec::default()
        }
    }

    #[test]
    fn groups_are_disjoint_and_cover_all_classes() {
        let s = generate_scenario(&small_spec(3)).unwrap();
        let mut all: Vec<usize> = s.groups.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        for (i, d) in s.devices.iter().enumerate() {
            assert!(d.labels.iter().all(|l| s.groups[i].contains(l)));
        }
        let mut pool_classes = s.pool.labels.clone();
        pool_classes.dedup();
        assert_eq!(pool_classes.len(), 20);
    }

    #[test]
    fn one_class_per_device_when_m_equals_classes() {
        let spec = ScenarioSpec {
            num_devices: 20,
            ..small_spec(1)
        };
        let s = generate_scenario(&spec).unwrap();
        assert!(s.groups.iter().all(|g| g.len() == 1));
    }

    #[test]
    fn noiseless_samples_equal_prototypes() {
        let spec = ScenarioSpec {
            noise: 0.0,
            ..small_spec(2)
        };
        let s = generate_scenario(&spec).unwrap();
        for (row, &l) in s.pool.samples.rows().into_iter().zip(&s.pool.labels) {
            assert_eq!(row, s.prototypes.row(l));
        }
    }

    #[test]
    fn partition_and_data_are_reproducible() {
        let a = generate_scenario(&small_spec(9)).unwrap();
        let b = generate_scenario(&small_spec(9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.groups, generate_scenario(&small_spec(10)).unwrap().groups);
    }

    #[test]
    fn too_many_devices_is_rejected() {
        let spec = ScenarioSpec {
            num_devices: 21,
            ..small_spec(0)
        };
        assert!(generate_scenario(&spec).is_err());
    }

    #[test]
    fn localized_prototypes_use_disjoint_pixels() {
        let spec = ScenarioSpec {
            layout: PrototypeLayout::Localized,
            ..small_spec(4)
        };
        let s = generate_scenario(&spec).unwrap();
        for (gi, ga) in s.groups.iter().enumerate() {
            for gb in s.groups.iter().skip(gi + 1) {
                for &a in ga {
                    for &b in gb {
                        let overlap = s
                            .prototypes
                            .row(a)
                            .iter()
                            .zip(s.prototypes.row(b).iter())
                            .any(|(x, y)| *x != 0.0 && *y != 0.0);
                        assert!(!overlap);
                    }
                }
            }
        }
    }

    #[test]
    fn scenario_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_scenario(&small_spec(5)).unwrap();
        s.save(dir.path()).unwrap();
        assert!(dir.path().join("devices/dev_3.bin").exists());
        assert_eq!(Scenario::load(dir.path()).unwrap(), s);
    }

    fn two_class_pool() -> (LabeledSet, ModelConfig) {
        let spec = ScenarioSpec {
            num_devices: 1,
            num_classes: 2,
            pool_per_class: 40,
            image_size: 4,
            prototype_scale: 1.0,
            noise: 0.3,
            seed: 1,
            ..ScenarioSpec::default()
        };
        let s = generate_scenario(&spec).unwrap();
        let arch = ModelConfig {
            image_size: 4,
            patch_size: 2,
            channels: 1,
            d: 8,
            d_prime: 16,
            heads: 2,
            layers: 1,
            num_classes: 2,
            seed: 3,
        };
        (s.pool, arch)
    }

    #[test]
    fn separable_pool_trains_to_high_accuracy() {
        let (pool, arch) = two_class_pool();
        let cfg = TrainConfig {
            epochs: 100,
            ..TrainConfig::default()
        };
        let m = train_toy_model(&pool, &arch, &cfg).unwrap();
        let acc = m.accuracy(pool.samples.view(), &pool.labels).unwrap();
        assert!(acc >= 0.95, "accuracy {acc}");
    }

    #[test]
    fn zero_epochs_returns_initialization_and_training_is_deterministic() {
        let (pool, arch) = two_class_pool();
        let none = train_toy_model(
            &pool,
            &arch,
            &TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(none, Model::init(arch.clone()).unwrap());
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let a = train_toy_model(&pool, &arch, &cfg).unwrap();
        let b = train_toy_model(&pool, &arch, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let (pool, arch) = two_class_pool();
        let mut m = Model::init(arch).unwrap();
        m.head.weight[[0, 0]] = f64::NAN;
        let err = train_model(&mut m, pool.samples.view(), &pool.labels, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, TapError::Diverged { step: 0, .. }));
    }
}
