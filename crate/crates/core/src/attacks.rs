//! Gradient-based and query-based evasion attacks under a pixel budget.
//!
//! Two consumers share this module:
//!
//! - the trainer runs [`pgd_training_attack`] against the combined training
//!   loss to generate adversarial views, and
//! - the evaluation pipeline runs [`score_attack_pgd`], [`fgsm_score_attack`]
//!   and [`blackbox_score_attack`] against an anomaly score, pushing normal
//!   samples up (`y = +1`) and anomalous samples down (`y = -1`).
//!
//! Attacks never see a model directly; they work through a loss closure or
//! a [`ScoreFn`], which keeps them testable against analytic linear models.
//! Hard contracts: every returned image stays within the `epsilon` ball of
//! its input under the configured norm, inside the `[0,1]` box, and is
//! bitwise reproducible for a fixed seed.  `sign(0) = 0`, so coordinates
//! with zero gradient are never touched.

use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::rng::stream_rng;
use ndarray::{Array1, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Perturbation norm for PGD-family attacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackNorm {
    Linf,
    L2,
}

/// Budget and schedule of an iterative attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Perturbation radius in pixel units.
    pub epsilon: f64,
    /// Step size; for L∞ it must not exceed `epsilon`.
    pub alpha: f64,
    /// Gradient steps per restart.
    pub steps: usize,
    /// Independent random starts; the per-sample worst case is kept.
    pub restarts: usize,
    pub norm: AttackNorm,
    /// Start from a random point in the ε-ball instead of the input.
    pub random_init: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    /// Training-time defaults: 10 steps at ε = 4/255 with α = 2.5·ε/steps.
    fn default() -> Self {
        let epsilon = 4.0 / 255.0;
        let steps = 10;
        Self {
            epsilon,
            alpha: 2.5 * epsilon / steps as f64,
            steps,
            restarts: 1,
            norm: AttackNorm::Linf,
            random_init: true,
            seed: 0,
        }
    }
}

impl AttackConfig {
    /// Evaluation-time defaults: 100 steps, 3 restarts.
    pub fn eval_default() -> Self {
        let epsilon = 4.0 / 255.0;
        let steps = 100;
        Self {
            epsilon,
            alpha: 2.5 * epsilon / steps as f64,
            steps,
            restarts: 3,
            ..Self::default()
        }
    }

    /// Same budget, different radius; rescales α proportionally.
    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        if self.epsilon > 0.0 {
            self.alpha *= epsilon / self.epsilon;
        } else {
            self.alpha = 2.5 * epsilon / self.steps as f64;
        }
        self.epsilon = epsilon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "attack epsilon must be finite and >= 0 (got {})",
                self.epsilon
            )));
        }
        if self.steps == 0 || self.restarts == 0 {
            return Err(Error::InvalidArgument(
                "attack steps and restarts must be >= 1".into(),
            ));
        }
        if self.epsilon > 0.0 {
            if !(self.alpha > 0.0) {
                return Err(Error::InvalidArgument(
                    "attack alpha must be > 0 when epsilon > 0".into(),
                ));
            }
            if self.norm == AttackNorm::Linf && self.alpha > self.epsilon + 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "attack alpha {} exceeds epsilon {} under the L-inf norm",
                    self.alpha, self.epsilon
                )));
            }
        }
        Ok(())
    }
}

/// A per-sample scalar score, differentiable in the input pixels.
///
/// `score_grad` returns the scores together with `dA/dx`, `[n, c, h, w]`.
/// Black-box attacks only use `score`.
pub trait ScoreFn {
    fn score(&self, x: &ImageBatch) -> Result<Array1<f64>>;
    fn score_grad(&self, x: &ImageBatch) -> Result<(Array1<f64>, Array4<f64>)>;
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_y(y: &[i8], n: usize) -> Result<()> {
    if y.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "attack direction vector has length {}, batch has {n}",
            y.len()
        )));
    }
    if y.iter().any(|&v| v != 1 && v != -1) {
        return Err(Error::InvalidArgument(
            "attack directions must be +1 or -1".into(),
        ));
    }
    Ok(())
}

fn check_finite_grad(grad: &Array4<f64>, context: &str) -> Result<()> {
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{context} gradient")));
    }
    Ok(())
}

/// Uniform draw in the ε-ball around `x0` (L∞), boxed to [0,1].
fn random_start(x0: &Array4<f64>, epsilon: f64, seed: u64, restart: u64) -> Array4<f64> {
    let mut rng = stream_rng(seed, "attack_init", &[restart]);
    let mut x = x0.clone();
    x.mapv_inplace(|v| (v + rng.gen_range(-epsilon..=epsilon)).clamp(0.0, 1.0));
    x
}

/// Project `x` onto the ε-ball around `x0` under `norm`, then onto [0,1].
fn project(x: &mut Array4<f64>, x0: &Array4<f64>, epsilon: f64, norm: AttackNorm) {
    match norm {
        AttackNorm::Linf => {
            ndarray::Zip::from(&mut *x).and(x0).for_each(|xi, &oi| {
                *xi = xi.clamp(oi - epsilon, oi + epsilon).clamp(0.0, 1.0);
            });
        }
        AttackNorm::L2 => {
            let n = x.dim().0;
            for i in 0..n {
                let mut xi = x.index_axis_mut(Axis(0), i);
                let oi = x0.index_axis(Axis(0), i);
                let mut sq = 0.0;
                ndarray::Zip::from(&xi).and(&oi).for_each(|&a, &b| {
                    sq += (a - b) * (a - b);
                });
                let norm2 = sq.sqrt();
                if norm2 > epsilon && norm2 > 0.0 {
                    let scale = epsilon / norm2;
                    ndarray::Zip::from(&mut xi).and(&oi).for_each(|a, &b| {
                        *a = b + (*a - b) * scale;
                    });
                }
            }
            x.mapv_inplace(|v| v.clamp(0.0, 1.0));
        }
    }
}

/// One signed/normalized ascent step in direction `y` per sample.
fn ascent_step(
    x: &mut Array4<f64>,
    grad: &Array4<f64>,
    y: &[i8],
    alpha: f64,
    norm: AttackNorm,
) {
    let n = x.dim().0;
    for i in 0..n {
        let dir = y[i] as f64;
        let mut xi = x.index_axis_mut(Axis(0), i);
        let gi = grad.index_axis(Axis(0), i);
        match norm {
            AttackNorm::Linf => {
                ndarray::Zip::from(&mut xi).and(&gi).for_each(|a, &g| {
                    *a += alpha * dir * sign0(g);
                });
            }
            AttackNorm::L2 => {
                let mut sq = 0.0;
                for &g in gi.iter() {
                    sq += g * g;
                }
                let gnorm = sq.sqrt();
                if gnorm > 0.0 {
                    let scale = alpha * dir / gnorm;
                    ndarray::Zip::from(&mut xi).and(&gi).for_each(|a, &g| {
                        *a += scale * g;
                    });
                }
            }
        }
    }
}

/// PGD against a training loss: ascend `loss` itself (all samples share the
/// scalar), keeping the restart with the highest final loss.
///
/// `evaluate` returns the loss and its gradient with respect to the pixels.
pub fn pgd_training_attack(
    mut evaluate: impl FnMut(&ImageBatch) -> Result<(f64, Array4<f64>)>,
    x: &ImageBatch,
    cfg: &AttackConfig,
) -> Result<ImageBatch> {
    cfg.validate()?;
    if cfg.norm != AttackNorm::Linf {
        return Err(Error::InvalidArgument(
            "the training attack is defined for the L-inf norm".into(),
        ));
    }
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let x0 = x.array();
    let y = vec![1i8; x.len()]; // ascend for every sample

    let mut best: Option<(f64, Array4<f64>)> = None;
    for restart in 0..cfg.restarts {
        let mut cur = if cfg.random_init {
            random_start(x0, cfg.epsilon, cfg.seed, restart as u64)
        } else {
            x0.clone()
        };
        for _ in 0..cfg.steps {
            let batch = ImageBatch::from_clamped(cur.clone())?;
            let (_, grad) = evaluate(&batch)?;
            check_finite_grad(&grad, "training attack")?;
            ascent_step(&mut cur, &grad, &y, cfg.alpha, cfg.norm);
            project(&mut cur, x0, cfg.epsilon, cfg.norm);
        }
        let batch = ImageBatch::from_clamped(cur.clone())?;
        let (final_loss, _) = evaluate(&batch)?;
        if !final_loss.is_finite() {
            return Err(Error::NonFinite("training attack loss".into()));
        }
        if best.as_ref().is_none_or(|(b, _)| final_loss > *b) {
            best = Some((final_loss, cur));
        }
    }
    let (_, adv) = best.expect("at least one restart");
    ImageBatch::from_clamped(adv)
}

/// PGD against an anomaly score.  Per sample, the attack ascends
/// `y_i · A(x_i)` and the final point of the best restart (highest
/// `y_i · A`) is returned.
pub fn score_attack_pgd<S: ScoreFn>(
    score_fn: &S,
    x: &ImageBatch,
    y: &[i8],
    cfg: &AttackConfig,
) -> Result<ImageBatch> {
    cfg.validate()?;
    check_y(y, x.len())?;
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let x0 = x.array();
    let n = x.len();

    let mut best_obj = vec![f64::NEG_INFINITY; n];
    let mut best_x: Option<Array4<f64>> = None;
    for restart in 0..cfg.restarts {
        let mut cur = if cfg.random_init {
            random_start(x0, cfg.epsilon, cfg.seed, restart as u64)
        } else {
            x0.clone()
        };
        project(&mut cur, x0, cfg.epsilon, cfg.norm);
        for _ in 0..cfg.steps {
            let batch = ImageBatch::from_clamped(cur.clone())?;
            let (_, grad) = score_fn.score_grad(&batch)?;
            check_finite_grad(&grad, "score attack")?;
            ascent_step(&mut cur, &grad, y, cfg.alpha, cfg.norm);
            project(&mut cur, x0, cfg.epsilon, cfg.norm);
        }
        let batch = ImageBatch::from_clamped(cur.clone())?;
        let scores = score_fn.score(&batch)?;
        match &mut best_x {
            None => {
                for i in 0..n {
                    best_obj[i] = y[i] as f64 * scores[i];
                }
                best_x = Some(cur);
            }
            Some(bx) => {
                for i in 0..n {
                    let obj = y[i] as f64 * scores[i];
                    if obj > best_obj[i] {
                        best_obj[i] = obj;
                        bx.index_axis_mut(Axis(0), i)
                            .assign(&cur.index_axis(Axis(0), i));
                    }
                }
            }
        }
    }
    ImageBatch::from_clamped(best_x.expect("at least one restart"))
}

/// Single-step signed attack: `x* = clip(x + y·ε·sign(∇A))`.
pub fn fgsm_score_attack<S: ScoreFn>(
    score_fn: &S,
    x: &ImageBatch,
    y: &[i8],
    epsilon: f64,
) -> Result<ImageBatch> {
    let cfg = AttackConfig {
        epsilon,
        alpha: epsilon,
        steps: 1,
        restarts: 1,
        norm: AttackNorm::Linf,
        random_init: false,
        seed: 0,
    };
    score_attack_pgd(score_fn, x, y, &cfg)
}

/// Query-based attack: greedy random search over square sign patches.
///
/// Each query perturbs one random square region by ±ε and keeps the
/// candidate only where it moves `y_i · A(x_i)` up, so the per-sample
/// objective is monotone in the query count.
pub fn blackbox_score_attack<S: ScoreFn>(
    score_fn: &S,
    x: &ImageBatch,
    y: &[i8],
    cfg: &AttackConfig,
    queries: usize,
) -> Result<ImageBatch> {
    cfg.validate()?;
    check_y(y, x.len())?;
    if queries == 0 {
        return Err(Error::InvalidArgument(
            "black-box attack needs at least 1 query".into(),
        ));
    }
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let x0 = x.array();
    let (n, c, h, w) = x.dims();

    let mut cur = x0.clone();
    let base_scores = score_fn.score(x)?;
    let mut best_obj: Vec<f64> = (0..n).map(|i| y[i] as f64 * base_scores[i]).collect();

    for q in 0..queries {
        let mut rng = stream_rng(cfg.seed, "blackbox_query", &[q as u64]);
        // Candidate: flip one square patch per sample by a signed ε offset.
        let mut cand = cur.clone();
        let max_side = (h.min(w) / 2).max(1);
        for i in 0..n {
            let side = rng.gen_range(1..=max_side);
            let ty = rng.gen_range(0..=h - side);
            let tx = rng.gen_range(0..=w - side);
            let offset = if rng.gen_bool(0.5) {
                cfg.epsilon
            } else {
                -cfg.epsilon
            };
            for ch in 0..c {
                for yy in ty..ty + side {
                    for xx in tx..tx + side {
                        cand[[i, ch, yy, xx]] += offset;
                    }
                }
            }
        }
        project(&mut cand, x0, cfg.epsilon, cfg.norm);
        let cand_batch = ImageBatch::from_clamped(cand.clone())?;
        let scores = score_fn.score(&cand_batch)?;
        for i in 0..n {
            let obj = y[i] as f64 * scores[i];
            if obj > best_obj[i] {
                best_obj[i] = obj;
                cur.index_axis_mut(Axis(0), i)
                    .assign(&cand.index_axis(Axis(0), i));
            }
        }
    }
    ImageBatch::from_clamped(cur)
}
