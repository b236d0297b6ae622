//! Neuron-level (activeness, redundancy, relevance) and layer-level (bypass KL)
//! importance over a metric dataset.
//!
//! A "layer" here is one transformer block; its units are the FFN hidden units
//! followed by the MHA value channels, the same layout as [`LayerTrace`].

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TapError};
use crate::nn::{LayerTrace, Model};
use crate::stats::{kl_divergence, median, min_max_normalize, softmax};
use crate::FORMAT_VERSION;

/// Mixing weights of the composite score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportanceWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for ImportanceWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
            gamma: 0.8,
        }
    }
}

impl ImportanceWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = Self { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.alpha, self.beta, self.gamma];
        if parts.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(TapError::invalid(format!("importance weights {parts:?} must lie in [0, 1]")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(TapError::invalid(format!("importance weights {parts:?} must sum to 1")));
        }
        Ok(())
    }

    pub fn compose(&self, a: f64, r: f64, t: f64) -> f64 {
        self.alpha * a + self.beta * r + self.gamma * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Equal-width bins per axis for histogram mutual information.
    pub mi_bins: usize,
    /// Lower bound on Gaussian-kernel bandwidths.
    pub bandwidth_floor: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            mi_bins: 16,
            bandwidth_floor: 1e-6,
        }
    }
}

/// Unnormalized criteria of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct RawLayerCriteria {
    pub ffn_units: usize,
    pub activeness: Vec<f64>,
    pub redundancy: Vec<f64>,
    pub relevance: Vec<f64>,
}

/// Raw criteria for every block; `None` for disabled blocks. Recomposing with
/// different weights does not require another pass over the data.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCriteria {
    pub layers: Vec<Option<RawLayerCriteria>>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitScore {
    pub a: f64,
    pub r: f64,
    pub t: f64,
    pub a_norm: f64,
    pub r_norm: f64,
    pub t_norm: f64,
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNeuronScores {
    pub ffn_units: usize,
    pub units: Vec<UnitScore>,
}

impl LayerNeuronScores {
    pub fn importance(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.importance).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronScores {
    pub weights: ImportanceWeights,
    pub layers: Vec<Option<LayerNeuronScores>>,
    pub warnings: Vec<String>,
}

impl NeuronScores {
    /// Composite importance of every unit, or an empty vector for disabled blocks.
    pub fn importance_by_layer(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .map(|l| l.as_ref().map(LayerNeuronScores::importance).unwrap_or_default())
            .collect()
    }
}

/// Per-block bypass divergences and their normalized budget shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    pub delta_raw: Vec<f64>,
    pub delta: Vec<f64>,
    /// `delta = softmax(-delta_raw)` instead of `softmax(delta_raw)`.
    pub inverted: bool,
}

impl LayerScores {
    pub fn from_raw(delta_raw: Vec<f64>, inverted: bool) -> Self {
        let signed: Vec<f64> = if inverted {
            delta_raw.iter().map(|d| -d).collect()
        } else {
            delta_raw.clone()
        };
        Self {
            delta: softmax(&signed),
            delta_raw,
            inverted,
        }
    }

    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    pub fn inverted(&self) -> Self {
        Self::from_raw(self.delta_raw.clone(), !self.inverted)
    }
}

/// Histogram bin of every value, equal-width over the sample range.
fn bin_indices(x: ArrayView1<f64>, bins: usize) -> Vec<u16> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    x.iter().map(|&v| crate::metric::bin_of(v, lo, hi, bins) as u16).collect()
}

fn mi_from_bins(a: &[u16], b: &[u16], bins: usize) -> f64 {
    let n = a.len() as f64;
    let mut joint = vec![0u32; bins * bins];
    let mut pa = vec![0u32; bins];
    let mut pb = vec![0u32; bins];
    for (&i, &j) in a.iter().zip(b) {
        joint[i as usize * bins + j as usize] += 1;
        pa[i as usize] += 1;
        pb[j as usize] += 1;
    }
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c > 0 {
                let pxy = c as f64 / n;
                mi += pxy * (pxy * n * n / (pa[i] as f64 * pb[j] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Plug-in mutual information (nats) of two sequences from equal-width histograms.
pub fn histogram_mi(x: ArrayView1<f64>, y: ArrayView1<f64>, bins: usize) -> Result<f64> {
    if x.len() != y.len() {
        return Err(TapError::shape("histogram_mi", x.len(), y.len()));
    }
    if x.is_empty() || bins == 0 {
        return Err(TapError::invalid("histogram_mi needs samples and bins >= 1"));
    }
    Ok(mi_from_bins(&bin_indices(x, bins), &bin_indices(y, bins), bins))
}

/// Plug-in entropy (nats) of the same histogram `histogram_mi` uses.
pub fn histogram_entropy(x: ArrayView1<f64>, bins: usize) -> f64 {
    let idx = bin_indices(x, bins);
    let mut counts = vec![0usize; bins];
    for i in idx {
        counts[i as usize] += 1;
    }
    let n = x.len() as f64;
    counts
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Median of pairwise Euclidean distances between rows, floored.
/// The flag reports whether the floor was hit.
pub fn median_bandwidth(x: ArrayView2<f64>, floor: f64) -> (f64, bool) {
    let n = x.nrows();
    let mut dists = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            dists.push(d2.sqrt());
        }
    }
    if dists.is_empty() {
        return (floor, true);
    }
    let m = median(&mut dists);
    if m < floor {
        (floor, true)
    } else {
        (m, false)
    }
}

fn gaussian_gram(x: ArrayView2<f64>, sigma: f64) -> Array2<f64> {
    let n = x.nrows();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut k = Array2::ones((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            let v = (-d2 * inv).exp();
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    k
}

/// `H L H` with `H = I - 11ᵀ/n`.
fn double_center(mut l: Array2<f64>) -> Array2<f64> {
    let row_means = l.mean_axis(Axis(1)).expect("n > 0");
    let col_means = l.mean_axis(Axis(0)).expect("n > 0");
    let grand = row_means.mean().expect("n > 0");
    let n = l.nrows();
    for i in 0..n {
        for j in 0..n {
            l[[i, j]] += grand - row_means[i] - col_means[j];
        }
    }
    l
}

/// Biased HSIC of a scalar sequence against precomputed `H L H`.
fn hsic_against(x: ArrayView1<f64>, centered_l: &Array2<f64>, floor: f64) -> (f64, bool) {
    let n = x.len();
    let col = x.insert_axis(Axis(1));
    let (sigma, floored) = median_bandwidth(col, floor);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut total = centered_l.diag().sum();
    for i in 0..n {
        let xi = x[i];
        let mut row = 0.0;
        for j in i + 1..n {
            let d = xi - x[j];
            row += (-d * d * inv).exp() * centered_l[[i, j]];
        }
        total += 2.0 * row;
    }
    (total / (n * n) as f64, floored)
}

/// Biased HSIC `(1/n²)·tr(K H L H)` between a scalar sequence and the rows of
/// `y`, Gaussian kernels with median-heuristic bandwidths.
pub fn hsic(x: ArrayView1<f64>, y: ArrayView2<f64>, floor: f64) -> Result<f64> {
    if x.len() != y.nrows() {
        return Err(TapError::shape("hsic", y.nrows(), x.len()));
    }
    if x.is_empty() {
        return Err(TapError::invalid("hsic of an empty sequence"));
    }
    let (sigma, _) = median_bandwidth(y, floor);
    let l = double_center(gaussian_gram(y, sigma));
    Ok(hsic_against(x, &l, floor).0)
}

fn layer_criteria(
    layer: usize,
    trace: &LayerTrace,
    centered_l: &Array2<f64>,
    config: &EstimatorConfig,
) -> (RawLayerCriteria, Vec<String>) {
    let width = trace.unit_count();
    let units: Vec<ArrayView1<f64>> = (0..width).map(|j| trace.unit(j)).collect();
    let activeness: Vec<f64> = units
        .iter()
        .map(|u| u.iter().map(|v| v.abs()).sum::<f64>() / u.len() as f64)
        .collect();

    let bins: Vec<Vec<u16>> = units.iter().map(|u| bin_indices(*u, config.mi_bins)).collect();
    let redundancy: Vec<f64> = if width < 2 {
        vec![0.0; width]
    } else {
        // mi is symmetric: fill the upper triangle once
        let upper: Vec<Vec<f64>> = (0..width)
            .into_par_iter()
            .map(|j| {
                (j + 1..width)
                    .map(|k| mi_from_bins(&bins[j], &bins[k], config.mi_bins))
                    .collect()
            })
            .collect();
        let mut sums = vec![0.0; width];
        for (j, row) in upper.iter().enumerate() {
            for (off, &mi) in row.iter().enumerate() {
                sums[j] += mi;
                sums[j + 1 + off] += mi;
            }
        }
        sums.into_iter().map(|s| -s / (width - 1) as f64).collect()
    };

    let hs: Vec<(f64, bool)> = units
        .par_iter()
        .map(|u| hsic_against(*u, centered_l, config.bandwidth_floor))
        .collect();
    let floored = hs.iter().filter(|h| h.1).count();
    let mut warnings = Vec::new();
    if floored > 0 {
        warnings.push(format!(
            "layer {layer}: {floored} unit(s) had a degenerate kernel bandwidth, floored at {:e}",
            config.bandwidth_floor
        ));
    }
    (
        RawLayerCriteria {
            ffn_units: trace.ffn.ncols(),
            activeness,
            redundancy,
            relevance: hs.into_iter().map(|h| h.0).collect(),
        },
        warnings,
    )
}

/// Raw activeness, redundancy and relevance of every unit over `samples`.
pub fn raw_criteria(model: &Model, samples: ArrayView2<f64>, config: &EstimatorConfig) -> Result<RawCriteria> {
    if samples.nrows() == 0 {
        return Err(TapError::invalid("importance needs a nonempty metric set"));
    }
    if config.mi_bins == 0 || !(config.bandwidth_floor > 0.0) {
        return Err(TapError::invalid(
            "estimator config needs mi_bins >= 1 and a positive bandwidth floor",
        ));
    }
    let out = model.forward(samples, true)?;
    let trace = out.trace.expect("trace requested");
    let mut warnings = Vec::new();
    let (sigma, floored) = median_bandwidth(out.logits.view(), config.bandwidth_floor);
    if floored {
        warnings.push(format!(
            "logit kernel bandwidth degenerate, floored at {:e}",
            config.bandwidth_floor
        ));
    }
    let centered_l = double_center(gaussian_gram(out.logits.view(), sigma));
    let mut layers = Vec::with_capacity(trace.layers.len());
    for (l, t) in trace.layers.iter().enumerate() {
        layers.push(match t {
            Some(t) => {
                let (c, w) = layer_criteria(l, t, &centered_l, config);
                warnings.extend(w);
                Some(c)
            }
            None => None,
        });
    }
    Ok(RawCriteria { layers, warnings })
}

impl RawCriteria {
    /// Per-layer min-max normalization and the weighted composite.
    pub fn compose(&self, weights: ImportanceWeights) -> Result<NeuronScores> {
        weights.validate()?;
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                layer.as_ref().map(|c| {
                    let an = min_max_normalize(&c.activeness);
                    let rn = min_max_normalize(&c.redundancy);
                    let tn = min_max_normalize(&c.relevance);
                    let units = (0..c.activeness.len())
                        .map(|j| UnitScore {
                            a: c.activeness[j],
                            r: c.redundancy[j],
                            t: c.relevance[j],
                            a_norm: an[j],
                            r_norm: rn[j],
                            t_norm: tn[j],
                            importance: weights.compose(an[j], rn[j], tn[j]),
                        })
                        .collect();
                    LayerNeuronScores {
                        ffn_units: c.ffn_units,
                        units,
                    }
                })
            })
            .collect();
        Ok(NeuronScores {
            weights,
            layers,
            warnings: self.warnings.clone(),
        })
    }
}

/// Composite neuron importance of every unit over `samples`.
pub fn neuron_scores(
    model: &Model,
    samples: ArrayView2<f64>,
    weights: ImportanceWeights,
    config: &EstimatorConfig,
) -> Result<NeuronScores> {
    weights.validate()?;
    raw_criteria(model, samples, config)?.compose(weights)
}

/// Mean KL between the full model's predictive distribution and the one with
/// each block bypassed in turn.
pub fn layer_divergences(model: &Model, samples: ArrayView2<f64>) -> Result<Vec<f64>> {
    if samples.nrows() == 0 {
        return Err(TapError::invalid("layer importance needs a nonempty metric set"));
    }
    let full = model.forward(samples, false)?.probabilities();
    (0..model.num_layers())
        .map(|l| {
            let q = model.forward_with_bypass(samples, false, Some(l))?.probabilities();
            let total: f64 = full
                .rows()
                .into_iter()
                .zip(q.rows())
                .map(|(p, q)| kl_divergence(p.as_slice().expect("row-major"), q.as_slice().expect("row-major")))
                .sum();
            Ok(total / samples.nrows() as f64)
        })
        .collect()
}

pub fn layer_importance(model: &Model, samples: ArrayView2<f64>, inverted: bool) -> Result<LayerScores> {
    if model.num_layers() == 0 {
        return Err(TapError::invalid("layer importance needs at least one layer"));
    }
    Ok(LayerScores::from_raw(layer_divergences(model, samples)?, inverted))
}

#[derive(Serialize, Deserialize)]
struct UnitRecord {
    j: usize,
    #[serde(rename = "A")]
    a: f64,
    #[serde(rename = "R")]
    r: f64,
    #[serde(rename = "T")]
    t: f64,
    #[serde(rename = "I")]
    i: f64,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    layer: usize,
    units: Vec<UnitRecord>,
}

#[derive(Serialize, Deserialize)]
struct LayerScoreRecord {
    layer: usize,
    delta_raw: f64,
    delta: f64,
}

#[derive(Serialize, Deserialize)]
struct ScoresFile {
    version: u32,
    layers: Vec<LayerRecord>,
    layer_scores: Vec<LayerScoreRecord>,
}

/// Serializes both score granularities. Disabled blocks are omitted from `layers`.
pub fn scores_to_json(neurons: &NeuronScores, layers: &LayerScores) -> Result<String> {
    let file = ScoresFile {
        version: FORMAT_VERSION,
        layers: neurons
            .layers
            .iter()
            .enumerate()
            .filter_map(|(l, s)| {
                s.as_ref().map(|s| LayerRecord {
                    layer: l,
                    units: s
                        .units
                        .iter()
                        .enumerate()
                        .map(|(j, u)| UnitRecord {
                            j,
                            a: u.a,
                            r: u.r,
                            t: u.t,
                            i: u.importance,
                        })
                        .collect(),
                })
            })
            .collect(),
        layer_scores: layers
            .delta_raw
            .iter()
            .zip(&layers.delta)
            .enumerate()
            .map(|(layer, (&delta_raw, &delta))| LayerScoreRecord { layer, delta_raw, delta })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)? + "\n")
}

/// Reads a scores file back. Normalized columns are not stored, so only the
/// raw criteria and the composite survive; `layer_count` sizes the layer list.
pub fn scores_from_json(text: &str, layer_count: usize, weights: ImportanceWeights) -> Result<(NeuronScores, LayerScores)> {
    let file: ScoresFile = serde_json::from_str(text)?;
    let mut layers: Vec<Option<LayerNeuronScores>> = vec![None; layer_count];
    for rec in file.layers {
        let slot = layers
            .get_mut(rec.layer)
            .ok_or_else(|| TapError::invalid(format!("scores file names layer {} of {layer_count}", rec.layer)))?;
        for (pos, u) in rec.units.iter().enumerate() {
            if u.j != pos {
                return Err(TapError::invalid(format!("layer {}: unit records out of order", rec.layer)));
            }
        }
        *slot = Some(LayerNeuronScores {
            ffn_units: 0,
            units: rec
                .units
                .into_iter()
                .map(|u| UnitScore {
                    a: u.a,
                    r: u.r,
                    t: u.t,
                    a_norm: f64::NAN,
                    r_norm: f64::NAN,
                    t_norm: f64::NAN,
                    importance: u.i,
                })
                .collect(),
        });
    }
    let delta_raw: Vec<f64> = file.layer_scores.iter().map(|r| r.delta_raw).collect();
    let delta: Vec<f64> = file.layer_scores.iter().map(|r| r.delta).collect();
    let inverted = delta_raw.len() > 1 && {
        let fwd = softmax(&delta_raw);
        fwd.iter().zip(&delta).map(|(a, b)| (a - b).abs()).sum::<f64>() > 1e-9
    };
    Ok((
        NeuronScores {
            weights,
            layers,
            warnings: Vec::new(),
        },
        LayerScores {
            delta_raw,
            delta,
            inverted,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{tiny_config, Model};
    use ndarray::{Array1, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_batch(n: usize, dim: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, dim), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn default_weights() {
        let w = ImportanceWeights::default();
        assert_eq!((w.alpha, w.beta, w.gamma), (0.1, 0.1, 0.8));
        assert!(ImportanceWeights::new(0.5, 0.5, 0.5).is_err());
        assert!(ImportanceWeights::new(-0.1, 0.3, 0.8).is_err());
    }

    #[test]
    fn equal_normalized_scores_compose_to_half() {
        for w in [(0.1, 0.1, 0.8), (1.0, 0.0, 0.0), (0.3, 0.3, 0.4)] {
            let w = ImportanceWeights::new(w.0, w.1, w.2).unwrap();
            assert!((w.compose(0.5, 0.5, 0.5) - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicated_unit_mi_is_its_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n01 = Normal::new(0.0, 1.0).unwrap();
        let u = Array1::from_shape_simple_fn(512, || n01.sample(&mut rng));
        let v = Array1::from_shape_simple_fn(512, || n01.sample(&mut rng));
        let self_mi = histogram_mi(u.view(), u.view(), 16).unwrap();
        let h = histogram_entropy(u.view(), 16);
        assert!((self_mi - h).abs() < 1e-12);
        let cross = histogram_mi(u.view(), v.view(), 16).unwrap();
        assert!(self_mi > cross);
    }

    #[test]
    fn dead_ffn_unit_has_zero_activeness() {
        let mut m = Model::init(tiny_config(2, 5)).unwrap();
        let ffn = &mut m.blocks[1].ffn;
        ffn.fc1.weight.column_mut(3).fill(0.0);
        ffn.fc1.bias[3] = 0.0;
        ffn.fc2.weight.row_mut(3).fill(0.0);
        let x = random_batch(40, 16, 1);
        let s = neuron_scores(&m, x.view(), ImportanceWeights::default(), &EstimatorConfig::default()).unwrap();
        let unit = s.layers[1].as_ref().unwrap().units[3];
        assert_eq!(unit.a, 0.0);
        assert_eq!(unit.a_norm, 0.0);
    }

    #[test]
    fn scores_cover_every_unit_and_stay_normalized() {
        let m = Model::init(tiny_config(3, 2)).unwrap();
        let x = random_batch(60, 16, 2);
        let s = neuron_scores(&m, x.view(), ImportanceWeights::default(), &EstimatorConfig::default()).unwrap();
        for (l, layer) in s.layers.iter().enumerate() {
            let layer = layer.as_ref().unwrap();
            assert_eq!(layer.units.len(), m.blocks[l].unit_count());
            for u in &layer.units {
                for v in [u.a_norm, u.r_norm, u.t_norm, u.importance] {
                    assert!((0.0..=1.0).contains(&v));
                }
                let want = 0.1 * u.a_norm + 0.1 * u.r_norm + 0.8 * u.t_norm;
                assert_eq!(u.importance, want);
                assert!(u.r <= 0.0);
            }
        }
    }

    #[test]
    fn constant_logits_floor_the_bandwidth_with_a_warning() {
        let m = Model::zeros(tiny_config(1, 0)).unwrap();
        let x = random_batch(10, 16, 3);
        let s = neuron_scores(&m, x.view(), ImportanceWeights::default(), &EstimatorConfig::default()).unwrap();
        assert!(!s.warnings.is_empty());
        let layer = s.layers[0].as_ref().unwrap();
        assert!(layer.units.iter().all(|u| u.t.is_finite() && u.importance.is_finite()));
    }

    #[test]
    fn single_unit_layer_has_zero_redundancy() {
        let t = LayerTrace {
            ffn: Array2::from_shape_vec((4, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            mha: Array2::zeros((4, 0)),
        };
        let y = random_batch(4, 3, 4);
        let l = double_center(gaussian_gram(y.view(), 1.0));
        let (c, _) = layer_criteria(0, &t, &l, &EstimatorConfig::default());
        assert_eq!(c.redundancy, vec![0.0]);
    }

    #[test]
    fn hsic_matches_explicit_trace_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 30;
        let x = Array1::from_shape_simple_fn(n, || rng.random_range(-2.0..2.0));
        let y = Array2::from_shape_simple_fn((n, 2), || rng.random_range(-1.0..1.0));
        let got = hsic(x.view(), y.view(), 1e-6).unwrap();

        let sx = median_bandwidth(x.view().insert_axis(Axis(1)), 1e-6).0;
        let sy = median_bandwidth(y.view(), 1e-6).0;
        let k = gaussian_gram(x.view().insert_axis(Axis(1)), sx);
        let l = gaussian_gram(y.view(), sy);
        let h = Array2::<f64>::eye(n) - Array2::<f64>::from_elem((n, n), 1.0 / n as f64);
        let want = k.dot(&h).dot(&l).dot(&h).diag().sum() / (n * n) as f64;
        assert!((got - want).abs() < 1e-12 * want.abs().max(1.0), "{got} {want}");
    }

    #[test]
    fn hsic_prefers_the_signal_it_feeds() {
        let n01 = Normal::new(0.0, 1.0).unwrap();
        let mut wins = 0;
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let n = 512;
            let u = Array1::from_shape_simple_fn(n, || n01.sample(&mut rng));
            let w = [rng.random_range(0.5..1.5), -rng.random_range(0.5..1.5), 0.0];
            let logits = Array2::from_shape_fn((n, 3), |(i, c)| w[c] * u[i] + 0.3 * n01.sample(&mut rng));
            let mut fresh = ChaCha8Rng::seed_from_u64(10_000 + trial);
            let indep = Array2::from_shape_simple_fn((n, 3), || n01.sample(&mut fresh));
            let real = hsic(u.view(), logits.view(), 1e-6).unwrap();
            let fake = hsic(u.view(), indep.view(), 1e-6).unwrap();
            if real > fake {
                wins += 1;
            }
        }
        assert!(wins >= 95, "{wins}");
    }

    #[test]
    fn zero_contribution_block_has_zero_divergence() {
        let mut m = Model::init(tiny_config(3, 9)).unwrap();
        m.blocks[1].attn.output.weight.fill(0.0);
        m.blocks[1].attn.output.bias.fill(0.0);
        m.blocks[1].ffn.fc2.weight.fill(0.0);
        m.blocks[1].ffn.fc2.bias.fill(0.0);
        let x = random_batch(20, 16, 5);
        let s = layer_importance(&m, x.view(), false).unwrap();
        assert!(s.delta_raw[1].abs() <= 1e-12);
        assert!(s.delta_raw[0] > 0.0 && s.delta_raw[2] > 0.0);
        assert!((s.delta.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(s.delta.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn equal_divergences_give_uniform_shares() {
        let s = LayerScores::from_raw(vec![0.7; 5], false);
        for d in &s.delta {
            assert!((d - 0.2).abs() < 1e-12);
        }
        let inv = s.inverted();
        assert!(inv.inverted);
        assert_eq!(inv.delta, s.delta);
    }

    #[test]
    fn inverted_shares_favour_low_divergence() {
        let s = LayerScores::from_raw(vec![0.1, 2.0], false);
        assert!(s.delta[1] > s.delta[0]);
        let inv = s.inverted();
        assert!(inv.delta[0] > inv.delta[1]);
    }

    #[test]
    fn scores_file_round_trip() {
        let m = Model::init(tiny_config(2, 1)).unwrap();
        let x = random_batch(24, 16, 6);
        let n = neuron_scores(&m, x.view(), ImportanceWeights::default(), &EstimatorConfig::default()).unwrap();
        let l = layer_importance(&m, x.view(), true).unwrap();
        let text = scores_to_json(&n, &l).unwrap();
        let (n2, l2) = scores_from_json(&text, 2, n.weights).unwrap();
        assert_eq!(n2.importance_by_layer(), n.importance_by_layer());
        assert_eq!(l2.delta_raw, l.delta_raw);
        assert_eq!(l2.delta, l.delta);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let unit = &v["layers"][0]["units"][0];
        for key in ["j", "A", "R", "T", "I"] {
            assert!(unit.get(key).is_some());
        }
        assert!(v["layer_scores"][0].get("delta_raw").is_some());
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(raw in prop::collection::vec(0.0f64..5.0, 1..12), c in -10.0f64..10.0) {
            let a = LayerScores::from_raw(raw.clone(), false);
            let b = LayerScores::from_raw(raw.iter().map(|d| d + c).collect(), false);
            prop_assert!((a.delta.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (x, y) in a.delta.iter().zip(&b.delta) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn affine_rescaling_keeps_the_order(
            a in prop::collection::vec(-3.0f64..3.0, 2..20),
            seed in 0u64..1000,
            scale in 0.01f64..100.0,
            shift in -50.0f64..50.0,
            which in 0usize..3,
        ) {
            let n = a.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..0.0)).collect();
            let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let base = RawLayerCriteria { ffn_units: n, activeness: a.clone(), redundancy: r.clone(), relevance: t.clone() };
            let mut moved = base.clone();
            let col = match which { 0 => &mut moved.activeness, 1 => &mut moved.redundancy, _ => &mut moved.relevance };
            for v in col.iter_mut() {
                *v = *v * scale + shift;
            }
            let w = ImportanceWeights::new(0.3, 0.3, 0.4).unwrap();
            let i0 = RawCriteria { layers: vec![Some(base)], warnings: vec![] }.compose(w).unwrap().importance_by_layer();
            let i1 = RawCriteria { layers: vec![Some(moved)], warnings: vec![] }.compose(w).unwrap().importance_by_layer();
            for j in 0..n {
                for k in 0..n {
                    if (i0[0][j] - i0[0][k]).abs() > 1e-9 {
                        prop_assert_eq!(i0[0][j] < i0[0][k], i1[0][j] < i1[0][k]);
                    }
                }
            }
        }

        #[test]
        fn min_max_bounds(xs in prop::collection::vec(-1e3f64..1e3, 1..30)) {
            let y = min_max_normalize(&xs);
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for (x, v) in xs.iter().zip(&y) {
                prop_assert!((0.0..=1.0).contains(v));
                if hi > lo {
                    if *x == hi { prop_assert_eq!(*v, 1.0); }
                    if *x == lo { prop_assert_eq!(*v, 0.0); }
                } else {
                    prop_assert_eq!(*v, 0.5);
                }
            }
        }
    }
}
