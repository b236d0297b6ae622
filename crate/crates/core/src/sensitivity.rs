//! Rank agreement of importance scores across tasks: Kendall's tau, pairwise
//! divergence matrices with per-layer FFN/MHA breakdowns, and layer-profile
//! comparisons.

use std::cmp::Ordering;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TapError};
use crate::importance::{layer_importance, LayerScores, NeuronScores};
use crate::nn::Model;
use crate::FORMAT_VERSION;

/// Unit identifiers from most to least important.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking(pub Vec<usize>);

impl Ranking {
    /// Descending score, ties by ascending index.
    pub fn from_scores(scores: &[f64]) -> Self {
        let mut ids: Vec<usize> = (0..scores.len()).collect();
        ids.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
            Ordering::Equal => a.cmp(&b),
            other => other,
        });
        Ranking(ids)
    }

    /// From a rank vector: `ranks[i]` is the 1-based position of item `i`.
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        let n = ranks.len();
        let mut ids = vec![usize::MAX; n];
        for (item, &r) in ranks.iter().enumerate() {
            if r == 0 || r > n || ids[r - 1] != usize::MAX {
                return Err(TapError::invalid(format!(
                    "rank vector {ranks:?} is not a permutation of 1..={n}"
                )));
            }
            ids[r - 1] = item;
        }
        Ok(Ranking(ids))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `positions()[id]` is where `id` sits in the ranking.
    fn positions(&self) -> Result<Vec<usize>> {
        let n = self.0.len();
        let mut pos = vec![usize::MAX; n];
        for (p, &id) in self.0.iter().enumerate() {
            if id >= n || pos[id] != usize::MAX {
                return Err(TapError::invalid("ranking is not a permutation of 0..n"));
            }
            pos[id] = p;
        }
        Ok(pos)
    }
}

fn paired_positions(a: &Ranking, b: &Ranking) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(TapError::invalid(format!(
            "rankings cover different identifier sets ({} vs {} items)",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(TapError::invalid("kendall tau needs at least two items"));
    }
    a.positions()?;
    let pos_b = b.positions()?;
    Ok(a.0.iter().map(|&id| pos_b[id]).collect())
}

/// Counts inversions by merge sort.
fn inversions(seq: &mut [usize], buf: &mut Vec<usize>) -> u64 {
    let n = seq.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut count = inversions(&mut seq[..mid], buf) + inversions(&mut seq[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if seq[i] <= seq[j] {
            buf.push(seq[i]);
            i += 1;
        } else {
            buf.push(seq[j]);
            count += (mid - i) as u64;
            j += 1;
        }
    }
    buf.extend_from_slice(&seq[i..mid]);
    buf.extend_from_slice(&seq[j..n]);
    seq.copy_from_slice(buf);
    count
}

fn tau_from_counts(n: usize, discordant: u64) -> f64 {
    let pairs = (n as u64) * (n as u64 - 1) / 2;
    let concordant = pairs - discordant;
    2.0 * (concordant as f64 - discordant as f64) / (n as f64 * (n as f64 - 1.0))
}

/// `tau = 2 (P_c - P_d) / (n (n - 1))` in O(n log n).
pub fn kendall_tau(a: &Ranking, b: &Ranking) -> Result<f64> {
    let mut seq = paired_positions(a, b)?;
    let n = seq.len();
    let mut buf = Vec::with_capacity(n);
    let d = inversions(&mut seq, &mut buf);
    Ok(tau_from_counts(n, d))
}

/// Reference O(n²) pair enumeration.
pub fn kendall_tau_pairs(a: &Ranking, b: &Ranking) -> Result<f64> {
    let seq = paired_positions(a, b)?;
    let n = seq.len();
    let mut discordant = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            if seq[i] > seq[j] {
                discordant += 1;
            }
        }
    }
    Ok(tau_from_counts(n, discordant))
}

/// Tau between the rankings two score vectors induce.
pub fn score_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    kendall_tau(&Ranking::from_scores(a), &Ranking::from_scores(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTau {
    pub layer: usize,
    /// All units of the block.
    pub all: Option<f64>,
    pub ffn: Option<f64>,
    pub mha: Option<f64>,
}

fn tau_if_defined(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() < 2 {
        Ok(None)
    } else {
        score_tau(a, b).map(Some)
    }
}

/// Per-layer tau between two score sets over the same structure.
pub fn layer_taus(a: &NeuronScores, b: &NeuronScores) -> Result<Vec<LayerTau>> {
    if a.layers.len() != b.layers.len() {
        return Err(TapError::invalid(format!(
            "score sets cover {} and {} layers",
            a.layers.len(),
            b.layers.len()
        )));
    }
    let mut out = Vec::new();
    for (l, (la, lb)) in a.layers.iter().zip(&b.layers).enumerate() {
        match (la, lb) {
            (Some(la), Some(lb)) => {
                if la.units.len() != lb.units.len() || la.ffn_units != lb.ffn_units {
                    return Err(TapError::invalid(format!(
                        "layer {l}: score sets have different unit layouts"
                    )));
                }
                let (ia, ib) = (la.importance(), lb.importance());
                let f = la.ffn_units;
                out.push(LayerTau {
                    layer: l,
                    all: tau_if_defined(&ia, &ib)?,
                    ffn: tau_if_defined(&ia[..f], &ib[..f])?,
                    mha: tau_if_defined(&ia[f..], &ib[f..])?,
                });
            }
            (None, None) => {}
            _ => return Err(TapError::invalid(format!("layer {l} is disabled in only one score set"))),
        }
    }
    Ok(out)
}

/// Mean all-unit tau over layers where it is defined.
pub fn mean_layer_tau(a: &NeuronScores, b: &NeuronScores) -> Result<f64> {
    let taus: Vec<f64> = layer_taus(a, b)?.into_iter().filter_map(|t| t.all).collect();
    if taus.is_empty() {
        return Err(TapError::invalid("no layer has two or more units to rank"));
    }
    Ok(taus.iter().sum::<f64>() / taus.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairBreakdown {
    pub a: String,
    pub b: String,
    pub mean_tau: f64,
    pub layers: Vec<LayerTau>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    pub task_ids: Vec<String>,
    /// Mean per-layer tau between tasks.
    pub tau: Array2<f64>,
    /// `(1 - tau) / 2`.
    pub divergence: Array2<f64>,
    pub pairs: Vec<PairBreakdown>,
}

/// Pairwise rank divergence of importance scores across tasks.
pub fn task_divergence_matrix(task_ids: &[String], score_sets: &[NeuronScores]) -> Result<DivergenceReport> {
    let m = score_sets.len();
    if m < 2 {
        return Err(TapError::invalid("divergence matrix needs at least two tasks"));
    }
    if task_ids.len() != m {
        return Err(TapError::shape("task ids", m, task_ids.len()));
    }
    let mut tau = Array2::eye(m);
    let mut divergence = Array2::zeros((m, m));
    let mut pairs = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            let layers = layer_taus(&score_sets[i], &score_sets[j])?;
            let defined: Vec<f64> = layers.iter().filter_map(|t| t.all).collect();
            if defined.is_empty() {
                return Err(TapError::invalid("no layer has two or more units to rank"));
            }
            let t = defined.iter().sum::<f64>() / defined.len() as f64;
            let div = ((1.0 - t) / 2.0).clamp(0.0, 1.0);
            tau[[i, j]] = t;
            tau[[j, i]] = t;
            divergence[[i, j]] = div;
            divergence[[j, i]] = div;
            pairs.push(PairBreakdown {
                a: task_ids[i].clone(),
                b: task_ids[j].clone(),
                mean_tau: t,
                layers,
            });
        }
    }
    Ok(DivergenceReport {
        task_ids: task_ids.to_vec(),
        tau,
        divergence,
        pairs,
    })
}

fn matrix_csv(ids: &[String], m: ArrayView2<f64>) -> String {
    let mut out = String::from("task");
    for id in ids {
        out.push(',');
        out.push_str(id);
    }
    out.push('\n');
    for (i, id) in ids.iter().enumerate() {
        out.push_str(id);
        for v in m.row(i) {
            let _ = write!(out, ",{v:.17e}");
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct BreakdownFile<'a> {
    version: u32,
    entry: &'static str,
    tasks: &'a [String],
    pairs: &'a [PairBreakdown],
}

impl DivergenceReport {
    /// Divergence matrix with a header row and column of task ids.
    pub fn divergence_csv(&self) -> String {
        matrix_csv(&self.task_ids, self.divergence.view())
    }

    pub fn tau_csv(&self) -> String {
        matrix_csv(&self.task_ids, self.tau.view())
    }

    pub fn breakdown_json(&self) -> Result<String> {
        let file = BreakdownFile {
            version: FORMAT_VERSION,
            entry: "divergence = (1 - mean_tau) / 2",
            tasks: &self.task_ids,
            pairs: &self.pairs,
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfileComparison {
    pub a: LayerScores,
    pub b: LayerScores,
    /// Layers by descending raw divergence.
    pub rank_a: Vec<usize>,
    pub rank_b: Vec<usize>,
    /// `None` when the model has a single layer.
    pub tau: Option<f64>,
    /// Mean absolute difference of each layer's rank position.
    pub mean_rank_shift: f64,
}

/// Layer-importance profiles of one model under two metric sets.
pub fn layer_profile_compare(model: &Model, task_a: ArrayView2<f64>, task_b: ArrayView2<f64>) -> Result<LayerProfileComparison> {
    let a = layer_importance(model, task_a, false)?;
    let b = layer_importance(model, task_b, false)?;
    let ra = Ranking::from_scores(&a.delta_raw);
    let rb = Ranking::from_scores(&b.delta_raw);
    let tau = if ra.len() >= 2 { Some(kendall_tau(&ra, &rb)?) } else { None };
    let (pa, pb) = (ra.positions()?, rb.positions()?);
    let shift = pa.iter().zip(&pb).map(|(x, y)| x.abs_diff(*y) as f64).sum::<f64>() / pa.len() as f64;
    Ok(LayerProfileComparison {
        a,
        b,
        rank_a: ra.0,
        rank_b: rb.0,
        tau,
        mean_rank_shift: shift,
    })
}
