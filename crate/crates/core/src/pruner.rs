//! Layer budget allocation, bottom-k unit removal with structural rebuild, and
//! head-only recovery fine-tuning.

use std::cmp::Ordering;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TapError};
use crate::importance::{LayerScores, NeuronScores};
use crate::nn::{cross_entropy, head_step, Block, Linear, Model};
use crate::FORMAT_VERSION;

pub const DEFAULT_EPSILON_MAX: f64 = 0.9;

/// Per-layer pruning ratios and the unit counts they round to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    /// Requested global ratio.
    pub target_ratio: f64,
    /// Mean of the pre-rounding per-layer ratios. Equals `target_ratio` for a
    /// plain allocation; differs after retention calibration.
    pub unit_ratio: f64,
    pub epsilon_max: f64,
    pub epsilons: Vec<f64>,
    pub unit_counts: Vec<usize>,
    pub log: Vec<String>,
}

impl BudgetPlan {
    pub fn layers(&self) -> usize {
        self.epsilons.len()
    }

    /// A plan that removes nothing.
    pub fn empty(layers: usize) -> Self {
        Self {
            target_ratio: 0.0,
            unit_ratio: 0.0,
            epsilon_max: DEFAULT_EPSILON_MAX,
            epsilons: vec![0.0; layers],
            unit_counts: vec![0; layers],
            log: Vec::new(),
        }
    }
}

/// `eps_l = delta_l * |L| * ratio`, clamped at `epsilon_max` with the excess
/// redistributed over the unclamped layers in proportion to `delta`.
pub fn allocate_epsilons(delta: &[f64], ratio: f64, epsilon_max: f64) -> Result<(Vec<f64>, Vec<String>)> {
    let layers = delta.len();
    if layers == 0 {
        return Err(TapError::invalid("budget allocation needs at least one layer"));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(TapError::invalid(format!("pruning ratio {ratio} outside [0, 1)")));
    }
    if !(epsilon_max > 0.0 && epsilon_max <= 1.0) {
        return Err(TapError::invalid(format!("epsilon_max {epsilon_max} outside (0, 1]")));
    }
    if ratio > epsilon_max {
        return Err(TapError::invalid(format!(
            "infeasible budget: {layers} layers at ratio {ratio} exceed {layers} x epsilon_max {epsilon_max}"
        )));
    }
    if delta.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err(TapError::invalid("layer shares must be finite and nonnegative"));
    }
    let total = layers as f64 * ratio;
    let mut clamped = vec![false; layers];
    let mut eps: Vec<f64> = delta.iter().map(|d| d * total).collect();
    let mut log = Vec::new();
    loop {
        let over: Vec<usize> = (0..layers).filter(|&l| !clamped[l] && eps[l] > epsilon_max).collect();
        if over.is_empty() {
            break;
        }
        for &l in &over {
            log.push(format!("layer {l}: {:.6} clamped to {epsilon_max}", eps[l]));
            clamped[l] = true;
        }
        let n_clamped = clamped.iter().filter(|&&c| c).count();
        let remaining = total - n_clamped as f64 * epsilon_max;
        let free_mass: f64 = (0..layers).filter(|&l| !clamped[l]).map(|l| delta[l]).sum();
        let free = layers - n_clamped;
        for l in 0..layers {
            eps[l] = if clamped[l] {
                epsilon_max
            } else if free_mass > 0.0 {
                remaining * delta[l] / free_mass
            } else {
                remaining / free as f64
            };
        }
        log.push(format!("redistributed {remaining:.6} over {free} unclamped layer(s)"));
    }
    Ok((eps, log))
}

/// Rounds `eps_l * width_l` to integers: floors plus a largest-remainder
/// correction so the total hits `round(sum eps_l * width_l)`. `caps` bounds
/// each layer.
pub fn round_unit_counts(epsilons: &[f64], widths: &[usize], caps: &[usize]) -> Vec<usize> {
    let exact: Vec<f64> = epsilons.iter().zip(widths).map(|(e, &w)| e * w as f64).collect();
    let target = exact.iter().sum::<f64>().round() as usize;
    let mut counts: Vec<usize> = exact.iter().zip(caps).map(|(x, &c)| (x.floor() as usize).min(c)).collect();
    let mut order: Vec<usize> = (0..exact.len()).collect();
    // remainders on a 1e-9 grid so float noise does not break index tie-breaks
    let rem: Vec<i64> = exact.iter().map(|x| ((x - x.floor()) * 1e9).round() as i64).collect();
    order.sort_by(|&a, &b| rem[b].cmp(&rem[a]).then(a.cmp(&b)));
    let mut total: usize = counts.iter().sum();
    // one pass by remainder, then any spare capacity in layer order
    for &l in order.iter().chain(order.iter()) {
        if total >= target {
            break;
        }
        if counts[l] < caps[l] {
            counts[l] += 1;
            total += 1;
        }
    }
    counts
}

/// Most units a layer may lose: `floor(epsilon_max * width)`, keeping at least
/// one FFN unit and one attention channel.
fn unit_caps(model: &Model, epsilon_max: f64) -> Vec<usize> {
    model
        .blocks
        .iter()
        .map(|b| {
            if !b.enabled {
                return 0;
            }
            let w = b.unit_count();
            ((epsilon_max * w as f64).floor() as usize).min(w.saturating_sub(2))
        })
        .collect()
}

fn widths(model: &Model) -> Vec<usize> {
    model
        .blocks
        .iter()
        .map(|b| if b.enabled { b.unit_count() } else { 0 })
        .collect()
}

/// Literal allocation at unit ratio `epsilon_t`.
pub fn allocate_budgets(model: &Model, layer_scores: &LayerScores, epsilon_t: f64, epsilon_max: f64) -> Result<BudgetPlan> {
    if layer_scores.len() != model.num_layers() {
        return Err(TapError::shape("layer scores", model.num_layers(), layer_scores.len()));
    }
    let (epsilons, log) = allocate_epsilons(&layer_scores.delta, epsilon_t, epsilon_max)?;
    let unit_counts = round_unit_counts(&epsilons, &widths(model), &unit_caps(model, epsilon_max));
    Ok(BudgetPlan {
        target_ratio: epsilon_t,
        unit_ratio: epsilon_t,
        epsilon_max,
        epsilons,
        unit_counts,
        log,
    })
}

/// Units of each layer in removal priority: ascending importance, ascending index.
pub fn removal_order(scores: &NeuronScores) -> Vec<Vec<usize>> {
    scores
        .importance_by_layer()
        .into_iter()
        .map(|imp| {
            let mut order: Vec<usize> = (0..imp.len()).collect();
            order.sort_by(|&a, &b| match imp[a].total_cmp(&imp[b]) {
                Ordering::Equal => a.cmp(&b),
                other => other,
            });
            order
        })
        .collect()
}

/// Uniformly random removal priority per layer, for control experiments.
pub fn random_order(model: &Model, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    widths(model)
        .into_iter()
        .map(|w| {
            let mut order: Vec<usize> = (0..w).collect();
            order.shuffle(&mut rng);
            order
        })
        .collect()
}

/// Takes `count` units from the front of `order`, skipping any that would
/// remove the last FFN unit or the last attention channel. Result is sorted.
fn select_units(block: &Block, order: &[usize], count: usize) -> Vec<usize> {
    let ffn = block.ffn.width();
    let mut left_ffn = ffn;
    let mut left_mha = block.attn.channels();
    let mut picked = Vec::with_capacity(count);
    for &u in order {
        if picked.len() == count {
            break;
        }
        let left = if u < ffn { &mut left_ffn } else { &mut left_mha };
        if *left > 1 {
            *left -= 1;
            picked.push(u);
        }
    }
    picked.sort_unstable();
    picked
}

fn select_cols(lin: &Linear, keep: &[usize]) -> Linear {
    Linear {
        weight: lin.weight.select(Axis(1), keep),
        bias: lin.bias.select(Axis(0), keep),
    }
}

fn select_rows(lin: &Linear, keep: &[usize]) -> Linear {
    Linear {
        weight: lin.weight.select(Axis(0), keep),
        bias: lin.bias.clone(),
    }
}

/// Rebuilds a block without the listed units; heads left with no value
/// channels are dropped along with their query and key columns.
fn excise(block: &Block, removed: &[usize]) -> Block {
    if removed.is_empty() {
        return block.clone();
    }
    let ffn_w = block.ffn.width();
    let keep_ffn: Vec<usize> = (0..ffn_w).filter(|u| removed.binary_search(u).is_err()).collect();
    let keep_ch: Vec<usize> = (0..block.attn.channels())
        .filter(|c| removed.binary_search(&(c + ffn_w)).is_err())
        .collect();
    let a = &block.attn;
    let mut widths = Vec::new();
    let mut keep_qk = Vec::new();
    for h in 0..a.heads() {
        let lo = a.value_offset(h);
        let hi = lo + a.value_widths[h];
        let kept = keep_ch.iter().filter(|&&c| c >= lo && c < hi).count();
        if kept > 0 {
            widths.push(kept);
            keep_qk.extend(h * a.head_dim..(h + 1) * a.head_dim);
        }
    }
    let mut out = block.clone();
    out.ffn.fc1 = select_cols(&block.ffn.fc1, &keep_ffn);
    out.ffn.fc2 = select_rows(&block.ffn.fc2, &keep_ffn);
    out.attn.value_widths = widths;
    out.attn.query = select_cols(&a.query, &keep_qk);
    out.attn.key = select_cols(&a.key, &keep_qk);
    out.attn.value = select_cols(&a.value, &keep_ch);
    out.attn.output = select_rows(&a.output, &keep_ch);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPrune {
    pub layer: usize,
    pub epsilon: f64,
    /// Unit indices in the layer's pre-pruning numbering.
    pub removed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub version: u32,
    pub device_id: String,
    pub epsilon_t: f64,
    pub per_layer: Vec<LayerPrune>,
    pub params_before: usize,
    pub params_after: usize,
    pub retention: f64,
    /// `retention - (1 - epsilon_t)`.
    pub rounding_error: f64,
}

impl PruneReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::pipeline::write_text(path, &self.to_json()?)
    }
}

/// Removes, per layer, the first `plan.unit_counts[l]` units of `orders[l]`
/// that keep the block valid, and rebuilds the model.
pub fn prune_with_order(model: &Model, orders: &[Vec<usize>], plan: &BudgetPlan) -> Result<(Model, PruneReport)> {
    let layers = model.num_layers();
    if orders.len() != layers || plan.layers() != layers || plan.unit_counts.len() != layers {
        return Err(TapError::shape("prune plan layers", layers, plan.layers()));
    }
    let mut out = model.clone();
    let mut per_layer = Vec::with_capacity(layers);
    for (l, block) in model.blocks.iter().enumerate() {
        let width = if block.enabled { block.unit_count() } else { 0 };
        let count = plan.unit_counts[l];
        if orders[l].len() != width {
            return Err(TapError::shape(format!("layer {l} scores"), width, orders[l].len()));
        }
        if count > width.saturating_sub(2) && count > 0 {
            return Err(TapError::invalid(format!("layer {l}: plan removes {count} of {width} units")));
        }
        let removed = if block.enabled {
            select_units(block, &orders[l], count)
        } else {
            Vec::new()
        };
        if removed.len() != count {
            return Err(TapError::invalid(format!(
                "layer {l}: only {} of {count} units can be removed",
                removed.len()
            )));
        }
        out.blocks[l] = excise(block, &removed);
        per_layer.push(LayerPrune {
            layer: l,
            epsilon: plan.epsilons[l],
            removed,
        });
    }
    out.validate()?;
    let params_before = model.param_count();
    let params_after = out.param_count();
    let retention = params_after as f64 / params_before as f64;
    Ok((
        out,
        PruneReport {
            version: FORMAT_VERSION,
            device_id: String::new(),
            epsilon_t: plan.target_ratio,
            per_layer,
            params_before,
            params_after,
            retention,
            rounding_error: retention - (1.0 - plan.target_ratio),
        },
    ))
}

/// Removes the lowest-importance units per the plan.
pub fn prune(model: &Model, scores: &NeuronScores, plan: &BudgetPlan) -> Result<(Model, PruneReport)> {
    prune_with_order(model, &removal_order(scores), plan)
}

/// Parameters a block sheds when `removed` (sorted) units go.
fn params_removed(block: &Block, removed: &[usize], d: usize) -> usize {
    let ffn_w = block.ffn.width();
    let a = &block.attn;
    let mut dropped_heads = 0;
    for h in 0..a.heads() {
        let lo = ffn_w + a.value_offset(h);
        let hi = lo + a.value_widths[h];
        let gone = removed.iter().filter(|&&u| u >= lo && u < hi).count();
        if gone == a.value_widths[h] {
            dropped_heads += 1;
        }
    }
    removed.len() * (2 * d + 1) + dropped_heads * 2 * (d * a.head_dim + a.head_dim)
}

/// Allocation whose unit ratio is tuned so the removed parameters come as
/// close as possible to `epsilon_t` of the model's total. Layer shares,
/// clamping and rounding are those of [`allocate_budgets`]; only the global
/// unit ratio is searched.
pub fn plan_for_retention(
    model: &Model,
    neuron_scores: &NeuronScores,
    layer_scores: &LayerScores,
    epsilon_t: f64,
    epsilon_max: f64,
) -> Result<BudgetPlan> {
    plan_for_retention_with_order(model, &removal_order(neuron_scores), layer_scores, epsilon_t, epsilon_max)
}

pub fn plan_for_retention_with_order(
    model: &Model,
    orders: &[Vec<usize>],
    layer_scores: &LayerScores,
    epsilon_t: f64,
    epsilon_max: f64,
) -> Result<BudgetPlan> {
    if !(0.0..1.0).contains(&epsilon_t) {
        return Err(TapError::invalid(format!("epsilon_t {epsilon_t} outside [0, 1)")));
    }
    if orders.len() != model.num_layers() {
        return Err(TapError::shape("removal orders", model.num_layers(), orders.len()));
    }
    let total = model.param_count() as f64;
    let goal = epsilon_t * total;
    let d = model.d();
    let removed_at = |u: f64| -> Result<(BudgetPlan, f64)> {
        let plan = allocate_budgets(model, layer_scores, u, epsilon_max)?;
        let mut removed = 0;
        for (l, block) in model.blocks.iter().enumerate() {
            if block.enabled && orders[l].len() == block.unit_count() {
                removed += params_removed(block, &select_units(block, &orders[l], plan.unit_counts[l]), d);
            }
        }
        Ok((plan, removed as f64))
    };
    let (mut lo, mut hi) = (0.0, epsilon_max.min(1.0 - 1e-12));
    let (lo_plan, lo_removed) = removed_at(lo)?;
    let (hi_plan, hi_removed) = removed_at(hi)?;
    let mut best = if goal >= hi_removed {
        (hi_plan, hi_removed)
    } else {
        (lo_plan, lo_removed)
    };
    if goal > lo_removed && goal < hi_removed {
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let (plan, removed) = removed_at(mid)?;
            if (removed - goal).abs() < (best.1 - goal).abs() {
                best = (plan, removed);
            }
            if removed < goal {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let (mut plan, removed) = best;
    plan.log.push(format!(
        "unit ratio {:.6} removes {removed} of {total} parameters (goal {goal:.1})",
        plan.unit_ratio
    ));
    plan.target_ratio = epsilon_t;
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-2,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    /// Full-set loss before training and after each epoch.
    pub losses: Vec<f64>,
    /// Epoch whose head was kept (0 means the starting head).
    pub best_epoch: usize,
}

/// Head-only minibatch gradient descent over seeded shuffles of the metric
/// set. The body is frozen, so its features are computed once. The head with
/// the lowest full-set loss seen (including the starting one) is kept.
pub fn finetune(
    model: &Model,
    samples: ArrayView2<f64>,
    labels: &[usize],
    config: &FinetuneConfig,
) -> Result<(Model, FinetuneReport)> {
    if labels.len() != samples.nrows() {
        return Err(TapError::shape("finetune labels", samples.nrows(), labels.len()));
    }
    if samples.nrows() == 0 {
        return Err(TapError::invalid("finetune needs a nonempty metric set"));
    }
    if !(config.learning_rate >= 0.0) || config.batch_size == 0 {
        return Err(TapError::invalid("finetune needs lr >= 0 and batch_size >= 1"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.num_classes()) {
        return Err(TapError::invalid(format!("label {bad} out of range")));
    }
    let mut out = model.clone();
    if config.epochs == 0 {
        return Ok((
            out,
            FinetuneReport {
                losses: Vec::new(),
                best_epoch: 0,
            },
        ));
    }
    let features = model.class_embeddings(samples, model.num_layers())?;
    let loss_of = |head: &Linear| cross_entropy(&(features.dot(&head.weight) + &head.bias), labels);
    let mut head = model.head.clone();
    let mut losses = vec![loss_of(&head)];
    let mut best = (losses[0], 0, head.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let x: Array2<f64> = features.select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            head_step(&mut head, &x, &y, config.learning_rate)?;
        }
        let loss = loss_of(&head);
        if !loss.is_finite() {
            return Err(TapError::Diverged { step: epoch, loss });
        }
        losses.push(loss);
        if loss < best.0 {
            best = (loss, epoch, head.clone());
        }
    }
    out.head = best.2;
    Ok((
        out,
        FinetuneReport {
            losses,
            best_epoch: best.1,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::{layer_importance, neuron_scores, EstimatorConfig, ImportanceWeights, RawCriteria, RawLayerCriteria};
    use crate::nn::{tiny_config, ModelConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_batch(n: usize, dim: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, dim), || rng.random_range(-1.0..1.0))
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn uniform_shares_give_uniform_ratios() {
        let (eps, log) = allocate_epsilons(&[0.25; 4], 0.3, 0.9).unwrap();
        assert!(close(&eps, &[0.3; 4]));
        assert!(log.is_empty());
    }

    #[test]
    fn direct_allocation_arithmetic() {
        let (eps, _) = allocate_epsilons(&[0.4, 0.3, 0.2, 0.1], 0.25, 0.9).unwrap();
        assert!(close(&eps, &[0.4, 0.3, 0.2, 0.1]));
        assert!((eps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clamp_and_redistribute() {
        let (eps, log) = allocate_epsilons(&[0.9, 0.05, 0.05], 0.5, 0.9).unwrap();
        assert!(close(&eps, &[0.9, 0.3, 0.3]), "{eps:?}");
        assert!((eps.iter().sum::<f64>() - 1.5).abs() < 1e-12);
        assert!(!log.is_empty());
    }

    #[test]
    fn infeasible_ratio_is_rejected() {
        assert!(allocate_epsilons(&[0.5, 0.5], 0.95, 0.9).is_err());
        assert!(allocate_epsilons(&[0.5, 0.5], 1.0, 0.9).is_err());
        assert!(allocate_epsilons(&[], 0.2, 0.9).is_err());
    }

    #[test]
    fn largest_remainder_rounding() {
        // exact 2.4, 3.4, 1.2 -> total 7, the tied 0.4 remainders favour layer 0
        let counts = round_unit_counts(&[0.24, 0.34, 0.12], &[10, 10, 10], &[9, 9, 9]);
        assert_eq!(counts, vec![3, 3, 1]);
        // exact 2.3, 3.6, 1.1 -> total 7
        let counts = round_unit_counts(&[0.23, 0.36, 0.11], &[10, 10, 10], &[9, 9, 9]);
        assert_eq!(counts, vec![2, 4, 1]);
        // equal remainders go to the lower index
        let counts = round_unit_counts(&[0.25, 0.25], &[10, 10], &[9, 9]);
        assert_eq!(counts, vec![3, 2]);
    }

    fn scores_for(model: &Model, importance: Vec<Vec<f64>>) -> NeuronScores {
        let layers = importance
            .into_iter()
            .zip(&model.blocks)
            .map(|(imp, b)| {
                Some(RawLayerCriteria {
                    ffn_units: b.ffn.width(),
                    activeness: imp.clone(),
                    redundancy: vec![0.0; imp.len()],
                    relevance: vec![0.0; imp.len()],
                })
            })
            .collect();
        RawCriteria {
            layers,
            warnings: vec![],
        }
        .compose(ImportanceWeights::new(1.0, 0.0, 0.0).unwrap())
        .unwrap()
    }

    #[test]
    fn pruning_dead_units_keeps_logits() {
        let mut m = Model::init(tiny_config(2, 3)).unwrap();
        for u in [1, 4] {
            m.blocks[0].ffn.fc1.weight.column_mut(u).fill(0.0);
            m.blocks[0].ffn.fc1.bias[u] = 0.0;
            m.blocks[0].ffn.fc2.weight.row_mut(u).fill(0.0);
        }
        let width = m.blocks[0].unit_count();
        let mut imp = vec![(0..width).map(|j| 1.0 + j as f64).collect::<Vec<_>>(); 2];
        imp[0][1] = 0.0;
        imp[0][4] = 0.0;
        let scores = scores_for(&m, imp);
        let mut plan = BudgetPlan::empty(2);
        plan.unit_counts = vec![2, 0];
        let (pruned, report) = prune(&m, &scores, &plan).unwrap();
        assert_eq!(report.per_layer[0].removed, vec![1, 4]);
        assert_eq!(pruned.blocks[0].ffn.width(), 6);
        assert_eq!(report.params_before - report.params_after, 2 * (2 * 4 + 1));
        let x = random_batch(10, 16, 7);
        let a = m.forward(x.view(), false).unwrap().logits;
        let b = pruned.forward(x.view(), false).unwrap().logits;
        assert!(a.iter().zip(b.iter()).all(|(p, q)| (p - q).abs() <= 1e-12));
    }

    #[test]
    fn zero_plan_is_identity() {
        let m = Model::init(tiny_config(3, 4)).unwrap();
        let scores = scores_for(&m, vec![vec![0.5; m.blocks[0].unit_count()]; 3]);
        let (pruned, report) = prune(&m, &scores, &BudgetPlan::empty(3)).unwrap();
        assert_eq!(pruned, m);
        assert_eq!(report.retention, 1.0);
    }

    #[test]
    fn emptied_heads_are_dropped() {
        let m = Model::init(tiny_config(1, 2)).unwrap();
        // tiny: d'=8, two heads with two value channels each -> units 8..12
        let ffn = m.blocks[0].ffn.width();
        let mut imp: Vec<f64> = (0..m.blocks[0].unit_count()).map(|j| 10.0 + j as f64).collect();
        imp[ffn] = 0.0;
        imp[ffn + 1] = 0.1;
        let scores = scores_for(&m, vec![imp]);
        let mut plan = BudgetPlan::empty(1);
        plan.unit_counts = vec![2];
        let (pruned, report) = prune(&m, &scores, &plan).unwrap();
        let a = &pruned.blocks[0].attn;
        assert_eq!(a.heads(), 1);
        assert_eq!(a.query.output_dim(), a.head_dim);
        let d = m.d();
        let hd = m.blocks[0].attn.head_dim;
        assert_eq!(
            report.params_before - report.params_after,
            params_removed(&m.blocks[0], &report.per_layer[0].removed, d)
        );
        assert_eq!(
            report.params_before - report.params_after,
            2 * (2 * d + 1) + 2 * (d * hd + hd)
        );
        pruned.validate().unwrap();
    }

    #[test]
    fn last_unit_of_each_kind_is_protected() {
        let m = Model::init(tiny_config(1, 2)).unwrap();
        let w = m.blocks[0].unit_count();
        let scores = scores_for(&m, vec![vec![0.0; w]]);
        let mut plan = BudgetPlan::empty(1);
        plan.unit_counts = vec![w - 2];
        let (pruned, _) = prune(&m, &scores, &plan).unwrap();
        assert_eq!(pruned.blocks[0].ffn.width(), 1);
        assert_eq!(pruned.blocks[0].attn.channels(), 1);
        plan.unit_counts = vec![w - 1];
        assert!(prune(&m, &scores, &plan).is_err());
    }

    #[test]
    fn shapes_match_surviving_units() {
        let m = Model::init(tiny_config(3, 8)).unwrap();
        let x = random_batch(30, 16, 8);
        let ns = neuron_scores(&m, x.view(), ImportanceWeights::default(), &EstimatorConfig::default()).unwrap();
        let ls = layer_importance(&m, x.view(), false).unwrap();
        let plan = allocate_budgets(&m, &ls, 0.4, 0.9).unwrap();
        let (pruned, report) = prune(&m, &ns, &plan).unwrap();
        for (l, b) in pruned.blocks.iter().enumerate() {
            assert_eq!(b.unit_count(), m.blocks[l].unit_count() - report.per_layer[l].removed.len());
            assert_eq!(b.ffn.fc2.weight.nrows(), b.ffn.width());
            assert_eq!(b.attn.output.weight.nrows(), b.attn.channels());
        }
        pruned.forward(x.view(), true).unwrap();
    }

    fn wide_config(seed: u64) -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            d: 16,
            d_prime: 32,
            heads: 4,
            layers: 3,
            num_classes: 4,
            seed,
        }
    }

    #[test]
    fn calibrated_plan_hits_the_retention_target() {
        let m = Model::init(wide_config(1)).unwrap();
        let x = random_batch(40, 64, 9);
        let ns = neuron_scores(&m, x.view(), ImportanceWeights::default(), &EstimatorConfig::default()).unwrap();
        let ls = layer_importance(&m, x.view(), false).unwrap();
        for eps in [0.1, 0.2, 0.3] {
            let plan = plan_for_retention(&m, &ns, &ls, eps, 0.9).unwrap();
            let (_, report) = prune(&m, &ns, &plan).unwrap();
            assert!(report.rounding_error.abs() <= 0.02, "{eps}: {}", report.retention);
            assert_eq!(plan.target_ratio, eps);
        }
    }

    #[test]
    fn finetune_noops_and_improvement() {
        let m = Model::init(tiny_config(2, 6)).unwrap();
        let x = random_batch(64, 16, 10);
        let y: Vec<usize> = (0..64).map(|i| i % 3).collect();
        let zero = FinetuneConfig {
            epochs: 0,
            ..Default::default()
        };
        assert_eq!(finetune(&m, x.view(), &y, &zero).unwrap().0, m);
        let still = FinetuneConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..Default::default()
        };
        let (f, _) = finetune(&m, x.view(), &y, &still).unwrap();
        assert!(f
            .head
            .weight
            .iter()
            .zip(m.head.weight.iter())
            .all(|(a, b)| (a - b).abs() <= 1e-12));
        let (f, report) = finetune(&m, x.view(), &y, &FinetuneConfig::default()).unwrap();
        assert!(report.losses[report.best_epoch] <= report.losses[0] + 1e-6);
        assert_eq!(f.blocks, m.blocks);
        let again = finetune(&m, x.view(), &y, &FinetuneConfig::default()).unwrap().0;
        assert_eq!(f, again);
    }

    #[test]
    fn report_json_fields() {
        let m = Model::init(tiny_config(1, 1)).unwrap();
        let scores = scores_for(&m, vec![vec![0.0; m.blocks[0].unit_count()]]);
        let (_, mut report) = prune(&m, &scores, &BudgetPlan::empty(1)).unwrap();
        report.device_id = "dev_0".into();
        let text = report.to_json().unwrap();
        assert_eq!(PruneReport::from_json(&text).unwrap(), report);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in [
            "version",
            "device_id",
            "epsilon_t",
            "per_layer",
            "params_before",
            "params_after",
            "retention",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn budget_conservation(raw in prop::collection::vec(-4.0f64..4.0, 1..=24), eps_t in 0.0f64..0.9, spike in 0.0f64..6.0) {
            let mut raw = raw;
            raw[0] += spike;
            let delta = crate::stats::softmax(&raw);
            let (eps, _) = allocate_epsilons(&delta, eps_t, 0.9).unwrap();
            let l = eps.len() as f64;
            prop_assert!((eps.iter().sum::<f64>() - l * eps_t).abs() <= 1e-9);
            prop_assert!(eps.iter().all(|&e| e <= 0.9 + 1e-12 && e >= 0.0));
        }
    }

    proptest! {
        #[test]
        fn bottom_k_matches_sort_oracle(imp in prop::collection::vec(0u8..6, 12), k in 0usize..=10) {
            let m = Model::init(tiny_config(1, 0)).unwrap();
            let imp: Vec<f64> = imp.into_iter().map(f64::from).collect();
            let scores = scores_for(&m, vec![imp.clone()]);
            let order = &removal_order(&scores)[0];
            let mut oracle: Vec<(f64, usize)> = imp.iter().copied().zip(0..).collect();
            oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = oracle.iter().map(|p| p.1).collect();
            prop_assert_eq!(order, &want);
            let picked = select_units(&m.blocks[0], order, k);
            prop_assert_eq!(picked.len(), k);
        }
    }
}
