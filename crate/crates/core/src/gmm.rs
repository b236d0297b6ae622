//! Diagonal-covariance Gaussian mixtures: EM fitting, BIC model selection,
//! log-density scoring and the JSON upload document.
//!
//! The JSON document produced by [`GmmParams::to_json`] is the only artifact a
//! device ever sends to the cloud.

use std::f64::consts::PI;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, TapError};
use crate::stats::log_sum_exp;
use crate::FORMAT_VERSION;

pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Mixture parameters `{pi_k, mu_k, diag(Sigma_k)}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    pub dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Convergence threshold on the gain in mean per-sample log-likelihood.
    pub tol: f64,
    pub seed: u64,
    /// Independent k-means++ restarts; the best final likelihood wins.
    pub n_init: usize,
    pub variance_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-6,
            seed: 0,
            n_init: 1,
            variance_floor: VARIANCE_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Total data log-likelihood after each E-step, starting from the initialization.
    pub log_likelihoods: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub bic: f64,
    pub warnings: Vec<String>,
}

impl FitReport {
    pub fn final_log_likelihood(&self) -> f64 {
        *self.log_likelihoods.last().expect("at least one E-step")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicSelection {
    pub params: GmmParams,
    pub k: usize,
    pub report: FitReport,
    /// `(K, BIC)` for every K that fit successfully, in range order.
    pub bic: Vec<(usize, f64)>,
}

/// Free parameters of a diagonal mixture: weights, means and variances.
pub fn parameter_count(k: usize, dim: usize) -> usize {
    (k - 1) + 2 * k * dim
}

pub fn bic(total_log_likelihood: f64, k: usize, dim: usize, n: usize) -> f64 {
    -2.0 * total_log_likelihood + parameter_count(k, dim) as f64 * (n as f64).ln()
}

impl GmmParams {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 || self.dim == 0 {
            return Err(TapError::invalid("mixture needs K >= 1 and dim >= 1"));
        }
        if self.means.len() != k || self.variances.len() != k {
            return Err(TapError::shape(
                "gmm components",
                k,
                format!("{} means / {} variances", self.means.len(), self.variances.len()),
            ));
        }
        for (m, v) in self.means.iter().zip(&self.variances) {
            if m.len() != self.dim || v.len() != self.dim {
                return Err(TapError::shape("gmm component dimension", self.dim, m.len().max(v.len())));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(TapError::invalid("non-finite mixture mean"));
            }
            if v.iter().any(|&s| !(s >= VARIANCE_FLOOR) || !s.is_finite()) {
                return Err(TapError::invalid(format!("variance below floor {VARIANCE_FLOOR}")));
            }
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(TapError::invalid("negative mixture weight"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(TapError::invalid(format!("mixture weights sum to {total}")));
        }
        Ok(())
    }

    /// `ln(pi_k) + ln N(x | mu_k, Sigma_k)` for every component.
    pub fn weighted_component_log_densities(&self, x: ArrayView1<f64>) -> Vec<f64> {
        let norm = self.dim as f64 * (2.0 * PI).ln();
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .map(|(&w, (mu, var))| {
                let mut quad = 0.0;
                let mut log_det = 0.0;
                for ((xi, m), s) in x.iter().zip(mu).zip(var) {
                    let diff = xi - m;
                    quad += diff * diff / s;
                    log_det += s.ln();
                }
                w.ln() - 0.5 * (norm + log_det + quad)
            })
            .collect()
    }

    /// `ln sum_k pi_k N(x | mu_k, Sigma_k)` in nats.
    pub fn log_density(&self, x: ArrayView1<f64>) -> Result<f64> {
        if x.len() != self.dim {
            return Err(TapError::shape("gmm log_density input", self.dim, x.len()));
        }
        Ok(log_sum_exp(&self.weighted_component_log_densities(x)))
    }

    pub fn responsibilities(&self, x: ArrayView1<f64>) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(TapError::shape("gmm responsibilities input", self.dim, x.len()));
        }
        let logs = self.weighted_component_log_densities(x);
        let lse = log_sum_exp(&logs);
        Ok(logs.into_iter().map(|l| (l - lse).exp()).collect())
    }

    /// Log-density of every row.
    pub fn score_samples(&self, features: ArrayView2<f64>) -> Result<Vec<f64>> {
        if features.ncols() != self.dim {
            return Err(TapError::shape("gmm features", self.dim, features.ncols()));
        }
        Ok((0..features.nrows())
            .into_par_iter()
            .map(|i| log_sum_exp(&self.weighted_component_log_densities(features.row(i))))
            .collect())
    }

    /// The upload document, floats written with 17 significant digits.
    pub fn to_json(&self) -> String {
        fn num(out: &mut String, v: f64) {
            write!(out, "{v:.16e}").expect("write to string");
        }
        fn list(out: &mut String, xs: &[f64]) {
            out.push('[');
            for (i, &v) in xs.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                num(out, v);
            }
            out.push(']');
        }
        fn nested(out: &mut String, rows: &[Vec<f64>]) {
            out.push('[');
            for (i, r) in rows.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                list(out, r);
            }
            out.push(']');
        }
        let mut out = String::new();
        write!(
            out,
            "{{\"version\":{FORMAT_VERSION},\"K\":{},\"dim\":{},\"seed\":{},\"weights\":",
            self.k(),
            self.dim,
            self.seed
        )
        .expect("write to string");
        list(&mut out, &self.weights);
        out.push_str(",\"means\":");
        nested(&mut out, &self.means);
        out.push_str(",\"variances\":");
        nested(&mut out, &self.variances);
        out.push_str("}\n");
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        let field = |name: &str| {
            v.get(name)
                .ok_or_else(|| TapError::invalid(format!("gmm document missing {name}")))
        };
        let uint = |name: &str| -> Result<u64> {
            field(name)?
                .as_u64()
                .ok_or_else(|| TapError::invalid(format!("gmm field {name} is not an integer")))
        };
        let version = uint("version")?;
        if version != u64::from(FORMAT_VERSION) {
            return Err(TapError::invalid(format!("unsupported gmm document version {version}")));
        }
        let params = GmmParams {
            weights: serde_json::from_value(field("weights")?.clone())?,
            means: serde_json::from_value(field("means")?.clone())?,
            variances: serde_json::from_value(field("variances")?.clone())?,
            dim: uint("dim")? as usize,
            seed: uint("seed")?,
        };
        if params.k() != uint("K")? as usize {
            return Err(TapError::invalid("gmm K does not match weight count"));
        }
        params.validate()?;
        Ok(params)
    }
}

/// k-means++ seeding: first center uniform, then proportional to squared distance.
fn kmeans_pp(x: &ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = x.nrows();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(x.row(rng.random_range(0..n)).to_vec());
    let sq = |row: ArrayView1<f64>, c: &[f64]| row.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let mut dist: Vec<f64> = x.rows().into_iter().map(|r| sq(r, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let idx = if total > 0.0 {
            let target = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in dist.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = x.row(idx).to_vec();
        for (d, row) in dist.iter_mut().zip(x.rows()) {
            *d = d.min(sq(row, &c));
        }
        centers.push(c);
    }
    centers
}

fn column_variances(x: &ArrayView2<f64>, floor: f64) -> Vec<f64> {
    let n = x.nrows() as f64;
    x.axis_iter(Axis(1))
        .map(|col| {
            let m = col.sum() / n;
            (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).max(floor)
        })
        .collect()
}

/// E-step: total log-likelihood and the `(n, K)` responsibility matrix.
fn e_step(params: &GmmParams, x: &ArrayView2<f64>) -> (f64, Array2<f64>) {
    let mut resp = Array2::zeros((x.nrows(), params.k()));
    let mut total = 0.0;
    for (row, mut r) in x.rows().into_iter().zip(resp.rows_mut()) {
        let logs = params.weighted_component_log_densities(row);
        let lse = log_sum_exp(&logs);
        total += lse;
        for (dst, l) in r.iter_mut().zip(logs) {
            *dst = (l - lse).exp();
        }
    }
    (total, resp)
}

fn m_step(params: &mut GmmParams, x: &ArrayView2<f64>, resp: &Array2<f64>, floor: f64, warnings: &mut Vec<String>, iter: usize) {
    let n = x.nrows() as f64;
    let dim = x.ncols();
    for k in 0..params.k() {
        let r = resp.column(k);
        let nk: f64 = r.sum();
        if nk < 1.0 {
            warnings.push(format!("iteration {iter}: component {k} has {nk:.3e} effective members"));
        }
        params.weights[k] = nk / n;
        if nk <= 0.0 {
            continue;
        }
        let mut mean = vec![0.0; dim];
        for (row, &w) in x.rows().into_iter().zip(r.iter()) {
            for (m, v) in mean.iter_mut().zip(row.iter()) {
                *m += w * v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nk);
        let mut var = vec![0.0; dim];
        for (row, &w) in x.rows().into_iter().zip(r.iter()) {
            for ((s, v), m) in var.iter_mut().zip(row.iter()).zip(&mean) {
                *s += w * (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s = (*s / nk).max(floor));
        params.means[k] = mean;
        params.variances[k] = var;
    }
    let total: f64 = params.weights.iter().sum();
    params.weights.iter_mut().for_each(|w| *w /= total);
}

fn fit_once(x: &ArrayView2<f64>, k: usize, config: &EmConfig, seed: u64) -> (GmmParams, FitReport) {
    let n = x.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let global = column_variances(x, config.variance_floor);
    let mut params = GmmParams {
        weights: vec![1.0 / k as f64; k],
        means: kmeans_pp(x, k, &mut rng),
        variances: vec![global; k],
        dim: x.ncols(),
        seed: config.seed,
    };
    let mut warnings = Vec::new();
    let mut lls = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let (ll, resp) = e_step(&params, x);
        if let Some(&prev) = lls.last() {
            let gain = (ll - prev) / n as f64;
            lls.push(ll);
            if gain < config.tol {
                converged = true;
                break;
            }
        } else {
            lls.push(ll);
        }
        if iterations == config.max_iters {
            break;
        }
        m_step(&mut params, x, &resp, config.variance_floor, &mut warnings, iterations);
        iterations += 1;
    }
    let bic = bic(*lls.last().expect("one E-step"), k, x.ncols(), n);
    (
        params,
        FitReport {
            log_likelihoods: lls,
            converged,
            iterations,
            bic,
            warnings,
        },
    )
}

/// Fits a K-component diagonal mixture by EM.
pub fn fit_em(features: ArrayView2<f64>, k: usize, config: &EmConfig) -> Result<(GmmParams, FitReport)> {
    let (n, d) = features.dim();
    if k == 0 || d == 0 {
        return Err(TapError::invalid("fit_em needs K >= 1 and at least one feature dimension"));
    }
    if n < k {
        return Err(TapError::invalid(format!("fit_em needs n >= K, got n = {n}, K = {k}")));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(TapError::invalid("non-finite feature value"));
    }
    let mut best: Option<(GmmParams, FitReport)> = None;
    for restart in 0..config.n_init.max(1) {
        let seed = config.seed.wrapping_add(restart as u64 * 0x9E37_79B9);
        let fit = fit_once(&features, k, config, seed);
        let better = match &best {
            None => true,
            Some((_, r)) => fit.1.final_log_likelihood() > r.final_log_likelihood(),
        };
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Fits every K in `k_range` and keeps the minimum-BIC model (ties to smaller K).
pub fn select_k_bic(features: ArrayView2<f64>, k_range: &[usize], config: &EmConfig) -> Result<BicSelection> {
    if k_range.is_empty() {
        return Err(TapError::invalid("empty K range"));
    }
    let fits: Vec<(usize, Result<(GmmParams, FitReport)>)> = k_range
        .par_iter()
        .map(|&k| {
            let cfg = EmConfig {
                seed: config.seed.wrapping_add(k as u64),
                ..*config
            };
            (k, fit_em(features, k, &cfg))
        })
        .collect();
    let mut bics = Vec::new();
    let mut best: Option<(usize, GmmParams, FitReport)> = None;
    let mut first_err = None;
    for (k, fit) in fits {
        match fit {
            Ok((params, report)) => {
                bics.push((k, report.bic));
                let better = match &best {
                    None => true,
                    Some((bk, _, br)) => report.bic < br.bic || (report.bic == br.bic && k < *bk),
                };
                if better {
                    best = Some((k, params, report));
                }
            }
            Err(e) => {
                first_err.get_or_insert(e.to_string());
            }
        }
    }
    match best {
        Some((k, params, report)) => Ok(BicSelection {
            params,
            k,
            report,
            bic: bics,
        }),
        None => Err(TapError::AllFailed {
            attempts: k_range.len(),
            first: first_err.unwrap_or_default(),
        }),
    }
}
