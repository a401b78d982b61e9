//! Diagonal-covariance Gaussian mixture fitting by expectation-maximization.
//!
//! The mixture models the distribution of classifier embeddings of normal
//! training images; its log-likelihoods feed the empirical p-values used to
//! accept or reject crafted pseudo-anomalies.  Several EM restarts are run
//! from different random initializations and the solution with the best
//! training log-likelihood is kept.

use crate::checkpoint::TensorStore;
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Numerically stable `log(Σ exp(x_i))`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Fitting hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmConfig {
    /// Number of mixture components.
    pub components: usize,
    /// Lower bound applied to every variance entry.
    pub cov_floor: f64,
    /// Independent EM runs; the best final log-likelihood wins.
    pub restarts: usize,
    /// EM iteration cap per restart.
    pub max_iters: usize,
    /// Relative log-likelihood improvement below which EM stops.
    pub tol: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            components: 5,
            cov_floor: 1e-6,
            restarts: 3,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

impl GmmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 || self.restarts == 0 || self.max_iters == 0 {
            return Err(Error::InvalidArgument(
                "gmm: components, restarts and max_iters must be >= 1".into(),
            ));
        }
        if !(self.cov_floor > 0.0) || !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(
                "gmm: cov_floor and tol must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// A fitted mixture of axis-aligned Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGmm {
    /// Component weights, `[k]`, non-negative, summing to 1.
    pub weights: Array1<f64>,
    /// Component means, `[k, d]`.
    pub means: Array2<f64>,
    /// Per-dimension variances, `[k, d]`, every entry at or above the floor.
    pub vars: Array2<f64>,
}

impl DiagGmm {
    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 {
            return Err(Error::InvalidArgument("gmm has no components".into()));
        }
        if self.means.nrows() != k || self.vars.dim() != self.means.dim() {
            return Err(Error::ShapeMismatch(format!(
                "gmm parameter shapes disagree: weights {k}, means {:?}, vars {:?}",
                self.means.dim(),
                self.vars.dim()
            )));
        }
        let sum: f64 = self.weights.sum();
        if (sum - 1.0).abs() > 1e-9 || self.weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gmm weights must be non-negative and sum to 1 (sum = {sum})"
            )));
        }
        if self.vars.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "gmm variances must be positive and finite".into(),
            ));
        }
        if self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("gmm means".into()));
        }
        Ok(())
    }

    /// Per-component log-density of one point, `[k]`.
    fn component_log_densities(&self, x: &ArrayView1<f64>) -> Vec<f64> {
        let d = self.dim();
        assert_eq!(x.len(), d, "gmm: point dimension mismatch");
        const LOG_2PI: f64 = 1.8378770664093453; // ln(2*pi)
        (0..self.num_components())
            .map(|j| {
                let mut acc = 0.0;
                for t in 0..d {
                    let v = self.vars[[j, t]];
                    let diff = x[t] - self.means[[j, t]];
                    acc += (LOG_2PI + v.ln()) + diff * diff / v;
                }
                self.weights[j].max(f64::MIN_POSITIVE).ln() - 0.5 * acc
            })
            .collect()
    }

    /// Log of the mixture density at `x`.
    pub fn log_likelihood(&self, x: &ArrayView1<f64>) -> f64 {
        logsumexp(&self.component_log_densities(x))
    }

    /// Log-likelihood of every row of `x`, `[n]`.
    pub fn log_likelihood_batch(&self, x: &Array2<f64>) -> Array1<f64> {
        Array1::from_iter(x.outer_iter().map(|row| self.log_likelihood(&row)))
    }

    /// Fit by EM with restarts; deterministic in `seed`.
    pub fn fit(data: &Array2<f64>, cfg: &GmmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (n, d) = data.dim();
        if n == 0 || d == 0 {
            return Err(Error::EmptyBatch("gmm fit".into()));
        }
        if n < cfg.components {
            return Err(Error::InvalidArgument(format!(
                "gmm fit: {n} samples for {} components",
                cfg.components
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gmm fit input".into()));
        }

        let mut best: Option<(f64, DiagGmm)> = None;
        for restart in 0..cfg.restarts {
            let (ll, model) = em_run(data, cfg, seed, restart as u64)?;
            if best.as_ref().is_none_or(|(b, _)| ll > *b) {
                best = Some((ll, model));
            }
        }
        let (_, mut model) = best.expect("at least one restart ran");
        let total = model.weights.sum();
        model.weights /= total;
        model.validate()?;
        Ok(model)
    }

    /// Write parameters into a tensor store under `prefix`.
    pub fn store_into(&self, store: &mut TensorStore, prefix: &str) {
        store.insert(&format!("{prefix}.weights"), self.weights.clone().into_dyn());
        store.insert(&format!("{prefix}.means"), self.means.clone().into_dyn());
        store.insert(&format!("{prefix}.vars"), self.vars.clone().into_dyn());
    }

    /// Read parameters back from a tensor store.
    pub fn load_from(store: &TensorStore, prefix: &str) -> Result<Self> {
        let get1 = |name: String| -> Result<Array1<f64>> {
            store
                .get(&name)?
                .clone()
                .into_dimensionality()
                .map_err(|_| Error::CheckpointFormat(format!("{name} is not rank-1")))
        };
        let get2 = |name: String| -> Result<Array2<f64>> {
            store
                .get(&name)?
                .clone()
                .into_dimensionality()
                .map_err(|_| Error::CheckpointFormat(format!("{name} is not rank-2")))
        };
        let model = Self {
            weights: get1(format!("{prefix}.weights"))?,
            means: get2(format!("{prefix}.means"))?,
            vars: get2(format!("{prefix}.vars"))?,
        };
        model.validate()?;
        Ok(model)
    }
}

/// One EM run from a seeded initialization; returns (final total LL, model).
fn em_run(data: &Array2<f64>, cfg: &GmmConfig, seed: u64, restart: u64) -> Result<(f64, DiagGmm)> {
    let (n, d) = data.dim();
    let k = cfg.components;
    let mut rng = stream_rng(seed, "gmm_init", &[restart]);

    // Global per-dimension variance as the starting spread.
    let global_mean = data.mean_axis(Axis(0)).expect("non-empty data");
    let mut global_var = Array1::<f64>::zeros(d);
    for row in data.outer_iter() {
        for t in 0..d {
            let diff = row[t] - global_mean[t];
            global_var[t] += diff * diff;
        }
    }
    global_var.mapv_inplace(|v| (v / n as f64).max(cfg.cov_floor));

    // Means start at k distinct data points.
    let mut picks: Vec<usize> = Vec::with_capacity(k);
    while picks.len() < k {
        let cand = rng.gen_range(0..n);
        if !picks.contains(&cand) {
            picks.push(cand);
        }
    }
    let mut means = Array2::<f64>::zeros((k, d));
    for (j, &i) in picks.iter().enumerate() {
        means.row_mut(j).assign(&data.row(i));
    }
    let mut vars = Array2::<f64>::zeros((k, d));
    for j in 0..k {
        vars.row_mut(j).assign(&global_var);
    }
    let weights = Array1::<f64>::from_elem(k, 1.0 / k as f64);

    let mut model = DiagGmm {
        weights,
        means,
        vars,
    };
    let mut prev_ll = f64::NEG_INFINITY;
    let mut resp = Array2::<f64>::zeros((n, k));

    for _ in 0..cfg.max_iters {
        // E-step: responsibilities and total log-likelihood.
        let mut total_ll = 0.0;
        for (i, row) in data.outer_iter().enumerate() {
            let logs = model.component_log_densities(&row);
            let lse = logsumexp(&logs);
            total_ll += lse;
            for j in 0..k {
                resp[[i, j]] = (logs[j] - lse).exp();
            }
        }
        if !total_ll.is_finite() {
            return Err(Error::NonFinite("gmm log-likelihood during EM".into()));
        }

        // M-step.
        let nj = resp.sum_axis(Axis(0)); // [k]
        for j in 0..k {
            if nj[j] < 1e-10 {
                // Dead component: reseed at a random data point with the
                // global spread so it can recapture mass.
                let pick = rng.gen_range(0..n);
                model.means.row_mut(j).assign(&data.row(pick));
                model.vars.row_mut(j).assign(&global_var);
                model.weights[j] = 1.0 / n as f64;
                continue;
            }
            model.weights[j] = nj[j] / n as f64;
            for t in 0..d {
                let mut m = 0.0;
                for i in 0..n {
                    m += resp[[i, j]] * data[[i, t]];
                }
                model.means[[j, t]] = m / nj[j];
            }
            for t in 0..d {
                let mu = model.means[[j, t]];
                let mut v = 0.0;
                for i in 0..n {
                    let diff = data[[i, t]] - mu;
                    v += resp[[i, j]] * diff * diff;
                }
                model.vars[[j, t]] = (v / nj[j]).max(cfg.cov_floor);
            }
        }
        let wsum = model.weights.sum();
        model.weights /= wsum;

        if (total_ll - prev_ll).abs() < cfg.tol * (1.0 + total_ll.abs()) {
            break;
        }
        prev_ll = total_ll;
    }

    // Final likelihood under the last parameter update.
    let final_ll = model.log_likelihood_batch(data).sum();
    Ok((final_ll, model))
}
