//! Cloud-side metric dataset construction: project the public pool into
//! feature space, score every sample under a device's mixture, keep the top N.

use std::cmp::Ordering;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TapError};
use crate::gmm::GmmParams;
use crate::nn::Model;
use crate::FORMAT_VERSION;

/// The shared feature map `f_ex` applied on both sides of the boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FeatureExtractor {
    /// Pixels as-is.
    RawFlatten,
    /// Class-token representation after the first `layer` blocks of the model.
    ModelEmbedding { layer: usize },
}

impl FeatureExtractor {
    /// Final pre-head representation when a model is available, raw pixels otherwise.
    pub fn default_for(model: Option<&Model>) -> Self {
        match model {
            Some(m) => FeatureExtractor::ModelEmbedding { layer: m.num_layers() },
            None => FeatureExtractor::RawFlatten,
        }
    }

    pub fn output_dim(&self, input_dim: usize, model: Option<&Model>) -> Result<usize> {
        match self {
            FeatureExtractor::RawFlatten => Ok(input_dim),
            FeatureExtractor::ModelEmbedding { .. } => model
                .map(Model::d)
                .ok_or_else(|| TapError::invalid("model-embedding extraction needs a model")),
        }
    }

    /// Row `i` of the result is the feature vector of sample `i`.
    pub fn extract(&self, model: Option<&Model>, samples: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            FeatureExtractor::RawFlatten => Ok(samples.to_owned()),
            FeatureExtractor::ModelEmbedding { layer } => {
                let model = model.ok_or_else(|| TapError::invalid("model-embedding extraction needs a model"))?;
                model.class_embeddings(samples, *layer)
            }
        }
    }
}

/// Top-N public samples under one device's mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDataset {
    pub device_id: String,
    /// Pool indices, by descending score (ties by ascending index).
    pub indices: Vec<usize>,
    /// Log-likelihood of each selected sample, aligned with `indices`.
    pub scores: Vec<f64>,
    /// Log-likelihood of every pool sample.
    #[serde(skip)]
    pub pool_scores: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    device_id: String,
    #[serde(rename = "N")]
    n: usize,
    indices: Vec<usize>,
    scores: Vec<f64>,
}

/// Descending by score, ascending by index on ties.
fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        other => other,
    });
    order
}

/// Selects the `n` highest-likelihood rows of `public_features`.
pub fn construct_metric_dataset(
    device_id: impl Into<String>,
    params: &GmmParams,
    public_features: ArrayView2<f64>,
    n: usize,
) -> Result<MetricDataset> {
    if public_features.ncols() != params.dim {
        return Err(TapError::shape(
            "metric dataset features",
            params.dim,
            public_features.ncols(),
        ));
    }
    let pool = public_features.nrows();
    if n > pool {
        return Err(TapError::invalid(format!("metric size {n} exceeds pool size {pool}")));
    }
    let pool_scores = params.score_samples(public_features)?;
    Ok(select_top(device_id.into(), pool_scores, n))
}

pub(crate) fn select_top(device_id: String, pool_scores: Vec<f64>, n: usize) -> MetricDataset {
    let indices: Vec<usize> = rank_order(&pool_scores).into_iter().take(n).collect();
    let scores = indices.iter().map(|&i| pool_scores[i]).collect();
    MetricDataset {
        device_id,
        indices,
        scores,
        pool_scores,
    }
}

impl MetricDataset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        let m = Manifest {
            version: FORMAT_VERSION,
            device_id: self.device_id.clone(),
            n: self.indices.len(),
            indices: self.indices.clone(),
            scores: self.scores.clone(),
        };
        Ok(serde_json::to_string_pretty(&m)? + "\n")
    }

    /// Parses a manifest; `pool_scores` is left empty.
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text)?;
        if m.indices.len() != m.n || m.scores.len() != m.n {
            return Err(TapError::invalid("metric manifest N does not match its lists"));
        }
        Ok(Self {
            device_id: m.device_id,
            indices: m.indices,
            scores: m.scores,
            pool_scores: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::pipeline::write_text(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TapError::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Mean over feature dimensions of the histogram KL divergence
/// `KL(reference || candidate)`, with both histograms on a shared range and
/// add-one smoothing. An evaluation diagnostic only.
pub fn empirical_kl(candidate: ArrayView2<f64>, reference: ArrayView2<f64>, bins: usize) -> Result<f64> {
    if candidate.ncols() != reference.ncols() {
        return Err(TapError::shape("empirical_kl", reference.ncols(), candidate.ncols()));
    }
    if candidate.nrows() == 0 || reference.nrows() == 0 || bins == 0 {
        return Err(TapError::invalid("empirical_kl needs non-empty inputs and bins >= 1"));
    }
    let mut total = 0.0;
    for j in 0..candidate.ncols() {
        let c = candidate.column(j);
        let r = reference.column(j);
        let lo = c.iter().chain(r.iter()).copied().fold(f64::INFINITY, f64::min);
        let hi = c.iter().chain(r.iter()).copied().fold(f64::NEG_INFINITY, f64::max);
        let hist = |xs: ndarray::ArrayView1<f64>| {
            let mut h = vec![1.0; bins];
            for &x in xs {
                h[bin_of(x, lo, hi, bins)] += 1.0;
            }
            let s: f64 = h.iter().sum();
            h.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        total += crate::stats::kl_divergence(&hist(r), &hist(c));
    }
    Ok(total / candidate.ncols() as f64)
}

pub(crate) fn bin_of(x: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if !(hi > lo) {
        return 0;
    }
    (((x - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::{fit_em, EmConfig};
    use crate::nn::{tiny_config, Model};
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn unit_gmm() -> GmmParams {
        GmmParams {
            weights: vec![1.0],
            means: vec![vec![0.0]],
            variances: vec![vec![1.0]],
            dim: 1,
            seed: 0,
        }
    }

    #[test]
    fn raw_flatten_is_identity_layout() {
        let x = Array2::from_shape_vec((1, 16), (0..16).map(f64::from).collect()).unwrap();
        let f = FeatureExtractor::RawFlatten.extract(None, x.view()).unwrap();
        assert_eq!(f, x);
    }

    #[test]
    fn zero_model_embeddings_are_zero_and_extraction_is_deterministic() {
        let m = Model::zeros(tiny_config(2, 0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_simple_fn((5, 16), || rng.random_range(-1.0..1.0));
        let ex = FeatureExtractor::default_for(Some(&m));
        let f = ex.extract(Some(&m), x.view()).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
        let live = Model::init(tiny_config(2, 1)).unwrap();
        let a = ex.extract(Some(&live), x.view()).unwrap();
        let b = ex.extract(Some(&live), x.view()).unwrap();
        assert_eq!(a, b);
        assert!(ex.extract(None, x.view()).is_err());
        assert!(FeatureExtractor::RawFlatten.extract(Some(&live), x.view()).is_ok());
    }

    #[test]
    fn full_selection_orders_by_descending_score() {
        let feats = Array2::from_shape_vec((4, 1), vec![2.0, 0.1, -1.0, 0.5]).unwrap();
        let md = construct_metric_dataset("d0", &unit_gmm(), feats.view(), 4).unwrap();
        assert_eq!(md.indices, vec![1, 3, 2, 0]);
        assert!(md.scores.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(md.pool_scores.len(), 4);
    }

    #[test]
    fn boundary_ties_go_to_lower_index() {
        let feats = Array2::from_shape_vec((4, 1), vec![3.0, 1.0, -1.0, 0.0]).unwrap();
        let md = construct_metric_dataset("d0", &unit_gmm(), feats.view(), 2).unwrap();
        assert_eq!(md.indices, vec![3, 1]);
        let md = construct_metric_dataset("d0", &unit_gmm(), feats.view(), 3).unwrap();
        assert_eq!(md.indices, vec![3, 1, 2]);
    }

    #[test]
    fn invalid_requests() {
        let feats = Array2::zeros((3, 1));
        assert!(construct_metric_dataset("d", &unit_gmm(), feats.view(), 4).is_err());
        let wide = Array2::zeros((3, 2));
        assert!(construct_metric_dataset("d", &unit_gmm(), wide.view(), 1).is_err());
    }

    #[test]
    fn planted_population_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n01 = Normal::new(0.0, 1.0).unwrap();
        let mut pool: Vec<f64> = (0..100).map(|_| n01.sample(&mut rng)).collect();
        pool.extend((0..100).map(|_| 20.0 + n01.sample(&mut rng)));
        let pool = Array2::from_shape_vec((200, 1), pool).unwrap();
        let device = Array2::from_shape_simple_fn((200, 1), || n01.sample(&mut rng));
        let (params, _) = fit_em(device.view(), 2, &EmConfig::default()).unwrap();
        let md = construct_metric_dataset("d", &params, pool.view(), 50).unwrap();
        let hits = md.indices.iter().filter(|&&i| i < 100).count();
        assert!(hits >= 49, "{hits}");
    }

    #[test]
    fn manifest_round_trip() {
        let feats = Array2::from_shape_vec((3, 1), vec![0.3, -0.2, 1.0]).unwrap();
        let md = construct_metric_dataset("dev_2", &unit_gmm(), feats.view(), 2).unwrap();
        let back = MetricDataset::from_json(&md.to_json().unwrap()).unwrap();
        assert_eq!(back.indices, md.indices);
        assert_eq!(back.scores, md.scores);
        let v: serde_json::Value = serde_json::from_str(&md.to_json().unwrap()).unwrap();
        for key in ["version", "device_id", "N", "indices", "scores"] {
            assert!(v.get(key).is_some());
        }
    }

    #[test]
    fn empirical_kl_is_small_for_matched_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n01 = Normal::new(0.0, 1.0).unwrap();
        let a = Array2::from_shape_simple_fn((400, 2), || n01.sample(&mut rng));
        let b = Array2::from_shape_simple_fn((400, 2), || n01.sample(&mut rng));
        let c = Array2::from_shape_simple_fn((400, 2), || 4.0 + n01.sample(&mut rng));
        let near = empirical_kl(a.view(), b.view(), 16).unwrap();
        let far = empirical_kl(c.view(), b.view(), 16).unwrap();
        assert!(near < far);
    }

    proptest! {
        #[test]
        fn top_n_properties(scores in prop::collection::vec(-5i32..5, 1..60), n_frac in 0.0f64..=1.0) {
            // integer-valued scores force plenty of ties
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let n = ((scores.len() as f64) * n_frac).floor() as usize;
            let md = select_top("p".into(), scores.clone(), n);
            prop_assert_eq!(md.indices.len(), n);
            let mut seen = md.indices.clone();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), n);
            // full-sort oracle
            let mut oracle: Vec<(f64, usize)> = scores.iter().copied().zip(0..).map(|(s, i)| (-s, i)).collect();
            oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = oracle.iter().take(n).map(|p| p.1).collect();
            prop_assert_eq!(&md.indices, &want);
            // monotone in N
            if n > 0 {
                let smaller = select_top("p".into(), scores.clone(), n - 1);
                prop_assert!(smaller.indices.iter().all(|i| md.indices.contains(i)));
            }
        }

        #[test]
        fn permuting_the_pool_keeps_the_selected_set(raw in prop::collection::vec(-100.0f64..100.0, 2..40), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let n = raw.len() / 2;
            let mut perm: Vec<usize> = (0..raw.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<f64> = perm.iter().map(|&i| raw[i]).collect();
            let a = select_top("p".into(), raw.clone(), n);
            let b = select_top("p".into(), permuted, n);
            let mut back: Vec<usize> = b.indices.iter().map(|&i| perm[i]).collect();
            let mut orig = a.indices.clone();
            back.sort_unstable();
            orig.sort_unstable();
            prop_assert_eq!(back, orig);
        }
    }
}
