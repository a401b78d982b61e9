//! Anomaly scoring and evaluation: the training-embedding feature bank, the
//! similarity / probability / combined anomaly scores, ranking metrics with
//! exact tie handling, and the clean-versus-attacked evaluation protocol with
//! report files.
//!
//! Scores follow the convention "higher = more anomalous".  The similarity
//! score of a sample is the negated maximum cosine similarity between its
//! projected embedding and any bank row; the probability score is the binary
//! head's anomaly-class probability; the combined score is their sum.  All
//! three expose input gradients (through the argmax bank row) so score
//! attacks can target them.

use crate::attacks::{
    blackbox_score_attack, fgsm_score_attack, score_attack_pgd, AttackConfig, ScoreFn,
};
use crate::autodiff::Graph;
use crate::data::{load_protocol, ProtocolKind, ProtocolSpec};
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::nets::{softmax_col1, BindMode, Model, NormMode};
use crate::rng::child_seed_at;
use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::Path;
use std::time::Instant;

/// Batch size for plain (no-gradient) scoring passes.
const EVAL_CHUNK: usize = 128;
/// Batch size for attack passes, which hold a full graph in memory.
const ATTACK_CHUNK: usize = 64;

// ---------------------------------------------------------------------------
// fingerprints
// ---------------------------------------------------------------------------

/// SHA-256 over shape and raw IEEE-754 bits of a batch.
pub fn fingerprint_batch(x: &ImageBatch) -> String {
    let mut h = Sha256::new();
    let (n, c, hh, w) = x.dims();
    for d in [n, c, hh, w] {
        h.update((d as u64).to_le_bytes());
    }
    for v in x.array().iter() {
        h.update(v.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

/// SHA-256 over every named tensor (names, shapes, raw bits) of a model.
pub fn fingerprint_model(model: &Model) -> String {
    let mut h = Sha256::new();
    model.visit_named(&mut |name, t| {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.ndim() as u64).to_le_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.iter() {
            h.update(v.to_le_bytes());
        }
    });
    format!("{:x}", h.finalize())
}

// ---------------------------------------------------------------------------
// feature bank
// ---------------------------------------------------------------------------

/// Unit-norm projected embeddings of the training set, plus fingerprints of
/// the model and data that produced them.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    /// `[n, proj_dim]`, one row per training sample, rows unit-norm.
    pub embeddings: Array2<f64>,
    pub data_fingerprint: String,
    pub model_fingerprint: String,
}

impl FeatureBank {
    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.nrows() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyBatch("feature bank".into()));
        }
        for (i, row) in self.embeddings.outer_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!("feature bank row {i}")));
            }
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidArgument(format!(
                    "feature bank row {i} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// Embed the whole training set with the frozen model (evaluation mode).
pub fn build_feature_bank(model: &Model, d_train: &ImageBatch) -> Result<FeatureBank> {
    if d_train.is_empty() {
        return Err(Error::EmptyBatch("build_feature_bank".into()));
    }
    let mut embeddings = Array2::zeros((d_train.len(), model.cfg.proj_dim));
    let indices: Vec<usize> = (0..d_train.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let xb = d_train.select(chunk)?;
        let out = model.forward_eval(&xb)?;
        for (r, &i) in chunk.iter().enumerate() {
            embeddings.row_mut(i).assign(&out.z.row(r));
        }
    }
    let bank = FeatureBank {
        embeddings,
        data_fingerprint: fingerprint_batch(d_train),
        model_fingerprint: fingerprint_model(model),
    };
    bank.validate()?;
    Ok(bank)
}

// ---------------------------------------------------------------------------
// anomaly scores
// ---------------------------------------------------------------------------

/// Which anomaly score a run targets and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreVariant {
    /// Negated maximum cosine similarity to the feature bank, in `[-1, 1]`.
    A,
    /// Anomaly-class probability of the binary head, in `[0, 1]`.
    APrime,
    /// Sum of the two.
    APlus,
}

impl fmt::Display for ScoreVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreVariant::A => "a",
            ScoreVariant::APrime => "a_prime",
            ScoreVariant::APlus => "a_plus",
        })
    }
}

/// Negated max cosine similarity of each (unit-norm) embedding row against
/// the bank, clamped into `[-1, 1]` against float round-off.
pub fn score_a_from_embeddings(z: &Array2<f64>, bank: &FeatureBank) -> Result<Array1<f64>> {
    if bank.is_empty() {
        return Err(Error::EmptyBatch("feature bank".into()));
    }
    if z.ncols() != bank.embeddings.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "embedding dim {} does not match bank dim {}",
            z.ncols(),
            bank.embeddings.ncols()
        )));
    }
    let sims = z.dot(&bank.embeddings.t());
    Ok(Array1::from_iter(sims.outer_iter().map(|row| {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (-max).clamp(-1.0, 1.0)
    })))
}

/// Similarity score of a single image.
pub fn anomaly_score_a(model: &Model, bank: &FeatureBank, x: &ImageBatch) -> Result<Array1<f64>> {
    let out = model.forward_eval(x)?;
    score_a_from_embeddings(&out.z, bank)
}

/// Anomaly-class probability of each sample.
pub fn anomaly_score_a_prime(model: &Model, x: &ImageBatch) -> Result<Array1<f64>> {
    Ok(model.forward_eval(x)?.p_anom)
}

/// A frozen model + bank bound to one score variant; the attack surface.
pub struct Scorer<'a> {
    model: &'a Model,
    bank: &'a FeatureBank,
    pub variant: ScoreVariant,
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a Model, bank: &'a FeatureBank, variant: ScoreVariant) -> Result<Self> {
        bank.validate()?;
        if bank.embeddings.ncols() != model.cfg.proj_dim {
            return Err(Error::ShapeMismatch(format!(
                "bank dim {} does not match model projection dim {}",
                bank.embeddings.ncols(),
                model.cfg.proj_dim
            )));
        }
        Ok(Self {
            model,
            bank,
            variant,
        })
    }

    fn score_chunk(&self, x: &ImageBatch) -> Result<Array1<f64>> {
        let out = self.model.forward_eval(x)?;
        match self.variant {
            ScoreVariant::A => score_a_from_embeddings(&out.z, self.bank),
            ScoreVariant::APrime => Ok(out.p_anom),
            ScoreVariant::APlus => {
                let a = score_a_from_embeddings(&out.z, self.bank)?;
                Ok(a + &out.p_anom)
            }
        }
    }
}

impl ScoreFn for Scorer<'_> {
    fn score(&self, x: &ImageBatch) -> Result<Array1<f64>> {
        if x.is_empty() {
            return Err(Error::EmptyBatch("score".into()));
        }
        let mut out = Array1::zeros(x.len());
        let indices: Vec<usize> = (0..x.len()).collect();
        for chunk in indices.chunks(EVAL_CHUNK) {
            let xb = x.select(chunk)?;
            let s = self.score_chunk(&xb)?;
            for (r, &i) in chunk.iter().enumerate() {
                out[i] = s[r];
            }
        }
        Ok(out)
    }

    fn score_grad(&self, x: &ImageBatch) -> Result<(Array1<f64>, Array4<f64>)> {
        if x.is_empty() {
            return Err(Error::EmptyBatch("score_grad".into()));
        }
        let n = x.len();
        let mut g = Graph::new();
        let input = g.leaf(x.array().clone().into_dyn());
        let pass = self.model.forward(&mut g, input, NormMode::Eval, BindMode::Frozen);

        // Similarity branch: gradient flows through the argmax bank row only.
        let build_a = |g: &mut Graph| -> Result<(crate::autodiff::Var, Array1<f64>)> {
            let bank_t = g.constant(self.bank.embeddings.t().to_owned().into_dyn());
            let sims = g.matmul(pass.z, bank_t);
            let sim_vals = g.value(sims).clone();
            let sim_vals: Array2<f64> = sim_vals
                .into_dimensionality()
                .expect("rank-2 similarities");
            let mut mask = Array2::<f64>::zeros(sim_vals.dim());
            for (i, row) in sim_vals.outer_iter().enumerate() {
                let mut best = 0usize;
                let mut best_v = f64::NEG_INFINITY;
                for (j, &v) in row.iter().enumerate() {
                    if v > best_v {
                        best_v = v;
                        best = j;
                    }
                }
                mask[[i, best]] = 1.0;
            }
            let mask = g.constant(mask.into_dyn());
            let picked = g.mul(sims, mask);
            let max_per_row = g.row_sum(picked);
            let node = g.neg(max_per_row);
            let vals = Array1::from_iter(sim_vals.outer_iter().map(|row| {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (-max).clamp(-1.0, 1.0)
            }));
            Ok((node, vals))
        };

        // Probability branch: p = exp(log_softmax(logits)[:, 1]).
        let build_p = |g: &mut Graph| -> Result<(crate::autodiff::Var, Array1<f64>)> {
            let ls = g.log_softmax_rows(pass.logits);
            let mut col = Array2::<f64>::zeros((n, 2));
            col.column_mut(1).fill(1.0);
            let col = g.constant(col.into_dyn());
            let picked = g.mul(ls, col);
            let ls1 = g.row_sum(picked);
            let node = g.exp(ls1);
            let logits_vals: Array2<f64> = g
                .value(pass.logits)
                .clone()
                .into_dimensionality()
                .expect("rank-2 logits");
            Ok((node, softmax_col1(&logits_vals)))
        };

        let (node, vals) = match self.variant {
            ScoreVariant::A => build_a(&mut g)?,
            ScoreVariant::APrime => build_p(&mut g)?,
            ScoreVariant::APlus => {
                let (an, av) = build_a(&mut g)?;
                let (pn, pv) = build_p(&mut g)?;
                (g.add(an, pn), av + pv)
            }
        };
        // Sample i's score depends only on input row i (evaluation-mode
        // normalization), so the gradient of the sum is the per-sample grid.
        let total = g.sum_all(node);
        let grads = g.backward(total)?;
        let gin = grads.get_or_zeros(input, g.value(input).shape());
        let grad: Array4<f64> = gin.into_dimensionality().expect("rank-4 input gradient");
        Ok((vals, grad))
    }
}

// ---------------------------------------------------------------------------
// ranking metrics
// ---------------------------------------------------------------------------

/// The three ranking metrics, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Probability an anomaly outranks a normal (ties count one half).
    pub auroc: f64,
    /// Average precision with anomaly as the positive class.
    pub aupr: f64,
    /// False-positive rate at the tightest threshold reaching 95% recall.
    pub fpr95: f64,
}

/// Compute auroc / aupr / fpr95 for scores under "higher = more anomalous".
pub fn compute_metrics(scores: &[f64], labels: &[u8]) -> Result<Metrics> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::EmptyBatch("compute_metrics".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidArgument(format!(
            "labels must be 0 (normal) or 1 (anomaly), got {bad}"
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric scores".into()));
    }
    let n = scores.len();
    let n_anom = labels.iter().filter(|&&l| l == 1).count();
    let n_norm = n - n_anom;
    if n_anom == 0 || n_norm == 0 {
        return Err(Error::InvalidArgument(
            "metrics need both a normal and an anomaly sample".into(),
        ));
    }

    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // AUROC: ascending walk over tie groups, each anomaly credits the
    // normals strictly below it plus half of the tied ones.
    let mut auroc_sum = 0.0;
    let mut normals_below = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        let mut g_norm = 0.0;
        let mut g_anom = 0.0;
        while j < n && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] == 1 {
                g_anom += 1.0;
            } else {
                g_norm += 1.0;
            }
            j += 1;
        }
        auroc_sum += g_anom * (normals_below + 0.5 * g_norm);
        normals_below += g_norm;
        i = j;
    }
    let auroc = auroc_sum / (n_anom as f64 * n_norm as f64);

    // AUPR (average precision) + fpr95: descending walk over tie groups,
    // thresholding at each distinct score ("anomaly" when score >= t).
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut aupr = 0.0;
    let mut prev_recall = 0.0;
    let mut fpr95 = 1.0;
    let mut fpr95_found = false;
    let mut i = n;
    while i > 0 {
        let mut j = i;
        while j > 0 && scores[idx[j - 1]] == scores[idx[i - 1]] {
            j -= 1;
        }
        for &k in &idx[j..i] {
            if labels[k] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        let precision = tp / (tp + fp);
        let recall = tp / n_anom as f64;
        aupr += (recall - prev_recall) * precision;
        prev_recall = recall;
        if !fpr95_found && recall >= 0.95 {
            fpr95 = fp / n_norm as f64;
            fpr95_found = true;
        }
        i = j;
    }

    Ok(Metrics {
        auroc,
        aupr,
        fpr95,
    })
}

// ---------------------------------------------------------------------------
// evaluation conditions and reports
// ---------------------------------------------------------------------------

/// One evaluation condition: unattacked inputs or a score attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Condition {
    Clean,
    Pgd { config: AttackConfig },
    Fgsm { epsilon: f64 },
    Blackbox { config: AttackConfig, queries: usize },
}

impl Condition {
    /// Stable, file-friendly label, e.g. `pgd100x3_eps0.01569`.
    pub fn label(&self) -> String {
        match self {
            Condition::Clean => "clean".into(),
            Condition::Pgd { config } => format!(
                "pgd{}x{}_eps{:.5}",
                config.steps, config.restarts, config.epsilon
            ),
            Condition::Fgsm { epsilon } => format!("fgsm_eps{epsilon:.5}"),
            Condition::Blackbox { config, queries } => {
                format!("blackbox{}q_eps{:.5}", queries, config.epsilon)
            }
        }
    }

    fn epsilon(&self) -> f64 {
        match self {
            Condition::Clean => 0.0,
            Condition::Pgd { config } | Condition::Blackbox { config, .. } => config.epsilon,
            Condition::Fgsm { epsilon } => *epsilon,
        }
    }
}

/// Metrics of one condition, plus provenance of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: String,
    pub auroc: f64,
    pub aupr: f64,
    pub fpr95: f64,
    pub wall_seconds: f64,
    /// Soft-check note, e.g. when an attacked AUROC exceeds the clean one.
    pub warning: Option<String>,
}

/// Full evaluation outcome for one protocol × score variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub score_variant: ScoreVariant,
    pub resolution: usize,
    /// Clean first, then each attack condition in request order.
    pub conditions: Vec<ConditionResult>,
    pub data_fingerprint: String,
    pub model_fingerprint: String,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if self.conditions.is_empty() || self.conditions[0].condition != "clean" {
            return Err(Error::InvalidArgument(
                "report must contain the clean condition first".into(),
            ));
        }
        for c in &self.conditions {
            for (name, v) in [("auroc", c.auroc), ("aupr", c.aupr), ("fpr95", c.fpr95)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidArgument(format!(
                        "{name} of condition '{}' is {v}, outside [0, 1]",
                        c.condition
                    )));
                }
            }
        }
        Ok(())
    }

    /// Flat CSV table, one row per condition.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("protocol,score_variant,condition,auroc,aupr,fpr95,wall_seconds,warning\n");
        for c in &self.conditions {
            let warning = c
                .warning
                .as_deref()
                .unwrap_or("")
                .replace(',', ";")
                .replace('\n', " ");
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.3},{}\n",
                self.protocol, self.score_variant, c.condition, c.auroc, c.aupr, c.fpr95,
                c.wall_seconds, warning
            ));
        }
        out
    }

    /// Parse a table produced by [`EvalReport::to_csv`].  Fingerprints and
    /// resolution are not stored in the CSV and come back empty/zero.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::DataFormat("empty report CSV".into()))?;
        if header != "protocol,score_variant,condition,auroc,aupr,fpr95,wall_seconds,warning" {
            return Err(Error::DataFormat(format!(
                "unexpected report CSV header: {header}"
            )));
        }
        let mut protocol = None;
        let mut variant = None;
        let mut conditions = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.splitn(8, ',').collect();
            if fields.len() != 8 {
                return Err(Error::DataFormat(format!(
                    "report CSV line {} has {} fields, expected 8",
                    lineno + 2,
                    fields.len()
                )));
            }
            protocol.get_or_insert_with(|| fields[0].to_string());
            let v: ScoreVariant = match fields[1] {
                "a" => ScoreVariant::A,
                "a_prime" => ScoreVariant::APrime,
                "a_plus" => ScoreVariant::APlus,
                other => {
                    return Err(Error::DataFormat(format!(
                        "unknown score variant '{other}' in report CSV"
                    )))
                }
            };
            variant.get_or_insert(v);
            let num = |s: &str, what: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| Error::DataFormat(format!("bad {what} '{s}' in report CSV")))
            };
            conditions.push(ConditionResult {
                condition: fields[2].to_string(),
                auroc: num(fields[3], "auroc")?,
                aupr: num(fields[4], "aupr")?,
                fpr95: num(fields[5], "fpr95")?,
                wall_seconds: num(fields[6], "wall_seconds")?,
                warning: if fields[7].is_empty() {
                    None
                } else {
                    Some(fields[7].to_string())
                },
            });
        }
        let report = EvalReport {
            protocol: protocol.ok_or_else(|| Error::DataFormat("report CSV has no rows".into()))?,
            score_variant: variant.unwrap_or(ScoreVariant::A),
            resolution: 0,
            conditions,
            data_fingerprint: String::new(),
            model_fingerprint: String::new(),
        };
        report.validate()?;
        Ok(report)
    }

    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("anomaly evaluation report\n");
        out.push_str(&format!("protocol:      {}\n", self.protocol));
        out.push_str(&format!("score variant: {}\n", self.score_variant));
        if self.resolution > 0 {
            out.push_str(&format!("resolution:    {}\n", self.resolution));
        }
        if !self.model_fingerprint.is_empty() {
            out.push_str(&format!(
                "model:         {}\n",
                &self.model_fingerprint[..16.min(self.model_fingerprint.len())]
            ));
        }
        if !self.data_fingerprint.is_empty() {
            out.push_str(&format!(
                "test data:     {}\n",
                &self.data_fingerprint[..16.min(self.data_fingerprint.len())]
            ));
        }
        out.push('\n');
        out.push_str(&format!(
            "{:<28} {:>8} {:>8} {:>8} {:>10}\n",
            "condition", "auroc", "aupr", "fpr95", "seconds"
        ));
        for c in &self.conditions {
            out.push_str(&format!(
                "{:<28} {:>8.4} {:>8.4} {:>8.4} {:>10.1}\n",
                c.condition, c.auroc, c.aupr, c.fpr95, c.wall_seconds
            ));
            if let Some(w) = &c.warning {
                out.push_str(&format!("  warning: {w}\n"));
            }
        }
        out
    }

    /// Write the CSV and text renderings side by side.
    pub fn write_files(&self, csv_path: &Path, txt_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv())?;
        std::fs::write(txt_path, self.to_text())?;
        Ok(())
    }
}

/// Attack the test set in fixed-size chunks, optionally spread over OS
/// threads.  Each chunk's attack seed depends only on its index, and chunk
/// outputs are concatenated in index order, so every worker count produces
/// bitwise-identical results.
fn attack_in_chunks(
    x: &ImageBatch,
    y: &[i8],
    workers: usize,
    f: impl Fn(&ImageBatch, &[i8], u64) -> Result<ImageBatch> + Sync,
) -> Result<ImageBatch> {
    let indices: Vec<usize> = (0..x.len()).collect();
    let chunks: Vec<&[usize]> = indices.chunks(ATTACK_CHUNK).collect();
    let run_one = |k: usize, chunk: &[usize]| -> Result<ImageBatch> {
        let xb = x.select(chunk)?;
        let yb: Vec<i8> = chunk.iter().map(|&i| y[i]).collect();
        f(&xb, &yb, k as u64)
    };

    let results: Vec<Result<ImageBatch>> = if workers <= 1 || chunks.len() <= 1 {
        chunks
            .iter()
            .enumerate()
            .map(|(k, chunk)| run_one(k, chunk))
            .collect()
    } else {
        // Static split: worker w takes the contiguous chunk range
        // [w·per, (w+1)·per), which maps onto disjoint slices of the slot
        // vector.
        let per = chunks.len().div_ceil(workers.min(chunks.len()));
        let mut slots: Vec<Option<Result<ImageBatch>>> =
            (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            for (w, span) in slots.chunks_mut(per).enumerate() {
                let chunks = &chunks;
                let run_one = &run_one;
                scope.spawn(move || {
                    for (j, slot) in span.iter_mut().enumerate() {
                        let k = w * per + j;
                        *slot = Some(run_one(k, chunks[k]));
                    }
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("every chunk is assigned to a worker"))
            .collect()
    };

    let parts = results.into_iter().collect::<Result<Vec<ImageBatch>>>()?;
    let refs: Vec<&ImageBatch> = parts.iter().collect();
    ImageBatch::concat(&refs)
}

/// Score each condition on the given test set.  Normals are attacked with
/// `y = +1` (pushed to look anomalous) and anomalies with `y = -1` (pushed to
/// look normal).  A clean entry is always evaluated first; the "attacked
/// should not beat clean" ordering is a soft check recorded as a warning.
pub fn evaluate_conditions(
    model: &Model,
    bank: &FeatureBank,
    test: &ImageBatch,
    labels: &[u8],
    variant: ScoreVariant,
    conditions: &[Condition],
) -> Result<Vec<ConditionResult>> {
    evaluate_conditions_with(model, bank, test, labels, variant, conditions, 1)
}

/// [`evaluate_conditions`] with the attack phase split over `workers` OS
/// threads.  Parallelism only partitions the data; results are identical for
/// every worker count.
pub fn evaluate_conditions_with(
    model: &Model,
    bank: &FeatureBank,
    test: &ImageBatch,
    labels: &[u8],
    variant: ScoreVariant,
    conditions: &[Condition],
    workers: usize,
) -> Result<Vec<ConditionResult>> {
    if workers == 0 {
        return Err(Error::InvalidArgument("workers must be >= 1".into()));
    }
    if test.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} test samples but {} labels",
            test.len(),
            labels.len()
        )));
    }
    let scorer = Scorer::new(model, bank, variant)?;
    let y: Vec<i8> = labels.iter().map(|&l| if l == 0 { 1 } else { -1 }).collect();

    let mut ordered: Vec<Condition> = Vec::new();
    if conditions.first() != Some(&Condition::Clean) {
        ordered.push(Condition::Clean);
    }
    ordered.extend(conditions.iter().cloned());

    let mut results: Vec<ConditionResult> = Vec::new();
    let mut clean_auroc = None;
    for cond in &ordered {
        let t0 = Instant::now();
        let attacked = match cond {
            Condition::Clean => test.clone(),
            Condition::Pgd { config } => attack_in_chunks(test, &y, workers, |xb, yb, k| {
                let mut cfg = config.clone();
                cfg.seed = child_seed_at(config.seed, "eval_chunk", &[k]);
                score_attack_pgd(&scorer, xb, yb, &cfg)
            })?,
            Condition::Fgsm { epsilon } => attack_in_chunks(test, &y, workers, |xb, yb, _| {
                fgsm_score_attack(&scorer, xb, yb, *epsilon)
            })?,
            Condition::Blackbox { config, queries } => {
                attack_in_chunks(test, &y, workers, |xb, yb, k| {
                    let mut cfg = config.clone();
                    cfg.seed = child_seed_at(config.seed, "eval_chunk", &[k]);
                    blackbox_score_attack(&scorer, xb, yb, &cfg, *queries)
                })?
            }
        };
        let scores = scorer.score(&attacked)?;
        let m = compute_metrics(
            scores.as_slice().expect("contiguous scores"),
            labels,
        )?;
        let mut warning = None;
        match cond {
            Condition::Clean => clean_auroc = Some(m.auroc),
            _ => {
                if let Some(clean) = clean_auroc {
                    if cond.epsilon() > 0.0 && m.auroc > clean + 1e-12 {
                        warning = Some(format!(
                            "attacked auroc {:.4} exceeds clean auroc {:.4}; possible gradient masking",
                            m.auroc, clean
                        ));
                    }
                }
            }
        }
        results.push(ConditionResult {
            condition: cond.label(),
            auroc: m.auroc,
            aupr: m.aupr,
            fpr95: m.fpr95,
            wall_seconds: t0.elapsed().as_secs_f64(),
            warning,
        });
    }
    Ok(results)
}

/// Load the protocol's data and evaluate every condition against it.
pub fn run_protocol(
    model: &Model,
    bank: &FeatureBank,
    spec: &ProtocolSpec,
    variant: ScoreVariant,
    conditions: &[Condition],
) -> Result<EvalReport> {
    let data = load_protocol(spec)?;
    let results = evaluate_conditions(
        model,
        bank,
        &data.test,
        &data.test_labels,
        variant,
        conditions,
    )?;
    let report = EvalReport {
        protocol: describe_protocol(spec),
        score_variant: variant,
        resolution: spec.resolution,
        conditions: results,
        data_fingerprint: fingerprint_batch(&data.test),
        model_fingerprint: fingerprint_model(model),
    };
    report.validate()?;
    Ok(report)
}

/// Comma-free protocol label used in report files.
pub fn describe_protocol(spec: &ProtocolSpec) -> String {
    match spec.kind {
        ProtocolKind::OneClass => format!("one_class({}:{})", spec.dataset, spec.class_id),
        ProtocolKind::MultiClass => {
            format!("multi_class({}->{})", spec.dataset, spec.out_dataset)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_shapes;
    use crate::nets::ModelConfig;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn tiny_model(seed: u64) -> Model {
        Model::new(
            ModelConfig {
                proj_dim: 8,
                input_shape: (1, 16, 16),
                small_channels: vec![4, 8],
                ..ModelConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    fn random_batch(n: usize, res: usize, seed: u64) -> ImageBatch {
        let mut rng = stream_rng(seed, "evalkit_test", &[]);
        let data =
            ndarray::Array4::from_shape_fn((n, 1, res, res), |_| rng.gen_range(0.0..=1.0));
        ImageBatch::new(data).unwrap()
    }

    // ---- brute-force metric oracles (independent literal implementations) ----

    fn oracle_auroc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    fn oracle_pr_sweep(scores: &[f64], labels: &[u8]) -> (f64, f64) {
        let n_anom = labels.iter().filter(|&&l| l == 1).count() as f64;
        let n_norm = labels.len() as f64 - n_anom;
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        thresholds.reverse();
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        let mut fpr95 = 1.0;
        let mut found = false;
        for &t in &thresholds {
            let mut tp = 0.0;
            let mut fp = 0.0;
            for (i, &s) in scores.iter().enumerate() {
                if s >= t {
                    if labels[i] == 1 {
                        tp += 1.0;
                    } else {
                        fp += 1.0;
                    }
                }
            }
            let precision = tp / (tp + fp);
            let recall = tp / n_anom;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
            if !found && recall >= 0.95 {
                fpr95 = fp / n_norm;
                found = true;
            }
        }
        (ap, fpr95)
    }

    #[test]
    fn metrics_match_brute_force_oracles_with_ties() {
        let mut rng = stream_rng(7, "metric_oracle", &[]);
        for case in 0..60 {
            let n = rng.gen_range(5..80);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8) .collect();
            labels[0] = 0;
            labels[1] = 1;
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.gen_bool(0.4) {
                        // Quantized: forces ties across and within classes.
                        (rng.gen_range(-5..5) as f64) / 2.0
                    } else {
                        rng.gen_range(-5.0..5.0)
                    }
                })
                .collect();
            let m = compute_metrics(&scores, &labels).unwrap();
            let (ap, fpr95) = oracle_pr_sweep(&scores, &labels);
            assert!(
                (m.auroc - oracle_auroc(&scores, &labels)).abs() < 1e-9,
                "auroc mismatch in case {case}"
            );
            assert!((m.aupr - ap).abs() < 1e-9, "aupr mismatch in case {case}");
            assert!(
                (m.fpr95 - fpr95).abs() < 1e-9,
                "fpr95 mismatch in case {case}"
            );
        }
    }

    #[test]
    fn metric_edge_cases_have_closed_forms() {
        // Perfect separation.
        let scores = [0.1, 0.2, 0.9, 0.8];
        let labels = [0, 0, 1, 1];
        let m = compute_metrics(&scores, &labels).unwrap();
        assert_eq!(m.auroc, 1.0);
        assert_eq!(m.aupr, 1.0);
        assert_eq!(m.fpr95, 0.0);

        // All scores identical: one big tie.
        let scores = [0.5; 6];
        let labels = [0, 1, 0, 1, 0, 1];
        let m = compute_metrics(&scores, &labels).unwrap();
        assert_eq!(m.auroc, 0.5);
        assert_eq!(m.aupr, 0.5); // precision at the single threshold = prevalence
        assert_eq!(m.fpr95, 1.0);

        // Inverted separation.
        let scores = [0.9, 0.8, 0.1, 0.2];
        let labels = [0, 0, 1, 1];
        let m = compute_metrics(&scores, &labels).unwrap();
        assert_eq!(m.auroc, 0.0);
        assert_eq!(m.fpr95, 1.0);
    }

    #[test]
    fn auroc_is_invariant_under_increasing_transforms() {
        let mut rng = stream_rng(8, "auroc_invariance", &[]);
        let n = 40;
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        // Integers over 2 keep exp() injective on the distinct values.
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(-8..8) as f64 / 2.0)
            .collect();
        let base = compute_metrics(&scores, &labels).unwrap().auroc;
        let affine: Vec<f64> = scores.iter().map(|&s| 2.0 * s + 3.0).collect();
        let expd: Vec<f64> = scores.iter().map(|&s| s.exp()).collect();
        assert!((compute_metrics(&affine, &labels).unwrap().auroc - base).abs() < 1e-12);
        assert!((compute_metrics(&expd, &labels).unwrap().auroc - base).abs() < 1e-12);
    }

    #[test]
    fn fpr95_never_increases_when_adding_a_top_scored_anomaly() {
        let mut rng = stream_rng(9, "fpr95_monotone", &[]);
        for _ in 0..50 {
            let n = rng.gen_range(6..40);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 0;
            labels[1] = 1;
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let before = compute_metrics(&scores, &labels).unwrap().fpr95;
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0;
            let mut scores2 = scores.clone();
            let mut labels2 = labels.clone();
            scores2.push(top);
            labels2.push(1);
            let after = compute_metrics(&scores2, &labels2).unwrap().fpr95;
            assert!(
                after <= before + 1e-12,
                "fpr95 rose from {before} to {after}"
            );
        }
    }

    #[test]
    fn degenerate_metric_inputs_are_rejected() {
        assert!(compute_metrics(&[1.0, 2.0], &[0, 0]).is_err());
        assert!(compute_metrics(&[1.0, 2.0], &[1, 1]).is_err());
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[1.0], &[0, 1]).is_err());
        assert!(compute_metrics(&[f64::NAN, 1.0], &[0, 1]).is_err());
        assert!(compute_metrics(&[1.0, 2.0], &[0, 2]).is_err());
    }

    // ---- feature bank and scores ----

    #[test]
    fn feature_bank_rows_are_unit_and_rebuilds_are_identical() {
        let model = tiny_model(3);
        let batch = random_batch(5, 16, 4);
        let bank = build_feature_bank(&model, &batch).unwrap();
        assert_eq!(bank.len(), 5);
        for row in bank.embeddings.outer_iter() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-9);
        }
        let again = build_feature_bank(&model, &batch).unwrap();
        assert_eq!(bank.embeddings, again.embeddings);
        assert_eq!(bank.model_fingerprint, again.model_fingerprint);
        assert_eq!(bank.data_fingerprint, again.data_fingerprint);

        // Single-sample bank works; empty train set does not.
        let one = random_batch(1, 16, 5);
        assert_eq!(build_feature_bank(&model, &one).unwrap().len(), 1);
        let empty = ImageBatch::new(ndarray::Array4::zeros((0, 1, 16, 16)));
        assert!(empty.is_err() || build_feature_bank(&model, &empty.unwrap()).is_err());
    }

    #[test]
    fn similarity_score_matches_a_literal_loop_and_hits_its_extremes() {
        let model = tiny_model(13);
        let train = random_batch(5, 16, 14);
        let bank = build_feature_bank(&model, &train).unwrap();
        let queries = random_batch(4, 16, 15);
        let scores = anomaly_score_a(&model, &bank, &queries).unwrap();
        let z = model.forward_eval(&queries).unwrap().z;
        for i in 0..4 {
            let mut best = f64::NEG_INFINITY;
            for j in 0..bank.len() {
                let dot: f64 = (0..z.ncols()).map(|k| z[[i, k]] * bank.embeddings[[j, k]]).sum();
                best = best.max(dot);
            }
            assert!((scores[i] - (-best)).abs() < 1e-9);
            assert!((-1.0..=1.0).contains(&scores[i]));
        }

        // A training sample scores exactly -1 against its own bank row.
        let self_scores = anomaly_score_a(&model, &bank, &train).unwrap();
        for &s in self_scores.iter() {
            assert!((s + 1.0).abs() < 1e-9, "training sample scored {s}");
        }

        // Orthogonal embeddings score exactly 0.
        let mut fake = FeatureBank {
            embeddings: Array2::zeros((2, 8)),
            data_fingerprint: String::new(),
            model_fingerprint: String::new(),
        };
        fake.embeddings[[0, 0]] = 1.0;
        fake.embeddings[[1, 1]] = 1.0;
        let mut z = Array2::zeros((1, 8));
        z[[0, 7]] = 1.0;
        let s = score_a_from_embeddings(&z, &fake).unwrap();
        assert_eq!(s[0], 0.0);
    }

    #[test]
    fn probability_score_reflects_the_logit_gap() {
        let model = tiny_model(23);
        let x = random_batch(3, 16, 24);
        let p = anomaly_score_a_prime(&model, &x).unwrap();
        for &v in p.iter() {
            assert!((0.0..=1.0).contains(&v));
        }
        // Closed forms on raw logits.
        let even = softmax_col1(&ndarray::array![[0.3, 0.3]]);
        assert!((even[0] - 0.5).abs() < 1e-12);
        let wide = softmax_col1(&ndarray::array![[-10.0, 10.0]]);
        assert!(wide[0] > 0.999999);
    }

    #[test]
    fn combined_score_is_the_sum_of_its_parts() {
        let model = tiny_model(33);
        let train = random_batch(6, 16, 34);
        let bank = build_feature_bank(&model, &train).unwrap();
        let x = random_batch(4, 16, 35);
        let a = Scorer::new(&model, &bank, ScoreVariant::A)
            .unwrap()
            .score(&x)
            .unwrap();
        let p = Scorer::new(&model, &bank, ScoreVariant::APrime)
            .unwrap()
            .score(&x)
            .unwrap();
        let plus = Scorer::new(&model, &bank, ScoreVariant::APlus)
            .unwrap()
            .score(&x)
            .unwrap();
        for i in 0..4 {
            assert!((plus[i] - (a[i] + p[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn score_gradients_match_finite_differences() {
        let model = tiny_model(43);
        let train = random_batch(4, 16, 44);
        let bank = build_feature_bank(&model, &train).unwrap();
        let x = random_batch(2, 16, 45);
        for variant in [ScoreVariant::A, ScoreVariant::APrime, ScoreVariant::APlus] {
            let scorer = Scorer::new(&model, &bank, variant).unwrap();
            let (vals, grad) = scorer.score_grad(&x).unwrap();
            // Values agree with the plain scoring path.
            let direct = scorer.score(&x).unwrap();
            for i in 0..x.len() {
                assert!((vals[i] - direct[i]).abs() < 1e-12);
            }
            // Central differences on a few pixels of each sample.
            let h = 1e-5;
            for &(s, py, px) in &[(0usize, 3usize, 4usize), (0, 8, 8), (1, 5, 11), (1, 12, 2)] {
                let mut plus = x.array().clone();
                plus[[s, 0, py, px]] += h;
                let mut minus = x.array().clone();
                minus[[s, 0, py, px]] -= h;
                let sp = scorer.score(&ImageBatch::new(plus).unwrap()).unwrap()[s];
                let sm = scorer.score(&ImageBatch::new(minus).unwrap()).unwrap()[s];
                let fd = (sp - sm) / (2.0 * h);
                let an = grad[[s, 0, py, px]];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    ((fd - an) / denom).abs() < 1e-4,
                    "{variant:?} grad mismatch at ({s},{py},{px}): fd {fd}, analytic {an}"
                );
            }
        }
    }

    // ---- end-to-end evaluation ----

    /// Circles as normals: train on the first few circles, test on held-out
    /// circles (label 0) plus squares (label 1).
    fn shapes_protocol_fixture(n: usize, seed: u64) -> (ImageBatch, ImageBatch, Vec<u8>) {
        let shapes = make_synthetic_shapes(n, 16, seed).unwrap();
        let half = n / 2;
        let split = half / 2;
        let train = ImageBatch::from_samples(&shapes.images[..split]).unwrap();
        let mut test_imgs = shapes.images[split..half].to_vec();
        test_imgs.extend_from_slice(&shapes.images[half..]);
        let test = ImageBatch::from_samples(&test_imgs).unwrap();
        let mut labels = vec![0u8; half - split];
        labels.extend(std::iter::repeat_n(1u8, n - half));
        (train, test, labels)
    }

    #[test]
    fn zero_epsilon_attack_condition_equals_clean_exactly() {
        let model = tiny_model(53);
        let (train, test, labels) = shapes_protocol_fixture(12, 54);
        let bank = build_feature_bank(&model, &train).unwrap();
        let zero_eps = Condition::Pgd {
            config: AttackConfig {
                epsilon: 0.0,
                alpha: 1.0,
                steps: 3,
                restarts: 2,
                ..AttackConfig::default()
            },
        };
        let results = evaluate_conditions(
            &model,
            &bank,
            &test,
            &labels,
            ScoreVariant::A,
            &[Condition::Clean, zero_eps],
        )
        .unwrap();
        assert_eq!(results.len(), 2);
        assert_eq!(results[0].condition, "clean");
        assert_eq!(results[0].auroc, results[1].auroc);
        assert_eq!(results[0].aupr, results[1].aupr);
        assert_eq!(results[0].fpr95, results[1].fpr95);
    }

    #[test]
    fn small_attacks_run_within_budget_and_fill_the_report() {
        let model = tiny_model(63);
        let (train, test, labels) = shapes_protocol_fixture(16, 64);
        let bank = build_feature_bank(&model, &train).unwrap();
        let eps = 2.0 / 255.0;
        let pgd = Condition::Pgd {
            config: AttackConfig::default().with_epsilon(eps),
        };
        let results = evaluate_conditions(
            &model,
            &bank,
            &test,
            &labels,
            ScoreVariant::APlus,
            &[
                Condition::Clean,
                pgd,
                Condition::Fgsm { epsilon: eps },
                Condition::Blackbox {
                    config: AttackConfig::default().with_epsilon(eps),
                    queries: 10,
                },
            ],
        )
        .unwrap();
        assert_eq!(results.len(), 4);
        for r in &results {
            assert!((0.0..=1.0).contains(&r.auroc));
            assert!((0.0..=1.0).contains(&r.aupr));
            assert!((0.0..=1.0).contains(&r.fpr95));
        }
        // Attack rows must never beat clean silently: either ordered, or the
        // violation is recorded as a warning.
        let clean = results[0].auroc;
        for r in &results[1..] {
            assert!(r.auroc <= clean + 1e-12 || r.warning.is_some());
        }
    }

    #[test]
    fn worker_count_does_not_change_evaluation_results() {
        // More test samples than one attack chunk, so the parallel path
        // actually splits work.
        let model = tiny_model(73);
        let (train, test, labels) = shapes_protocol_fixture(140, 74);
        assert!(test.len() > 64, "fixture must span multiple attack chunks");
        let bank = build_feature_bank(&model, &train).unwrap();
        let eps = 2.0 / 255.0;
        let conditions = [
            Condition::Pgd {
                config: AttackConfig {
                    steps: 2,
                    restarts: 1,
                    seed: 75,
                    ..AttackConfig::default().with_epsilon(eps)
                },
            },
            Condition::Blackbox {
                config: AttackConfig {
                    seed: 76,
                    ..AttackConfig::default().with_epsilon(eps)
                },
                queries: 5,
            },
        ];
        let run = |workers: usize| {
            evaluate_conditions_with(
                &model,
                &bank,
                &test,
                &labels,
                ScoreVariant::A,
                &conditions,
                workers,
            )
            .unwrap()
        };
        let serial = run(1);
        for workers in [2, 7] {
            let parallel = run(workers);
            assert_eq!(serial.len(), parallel.len());
            for (a, b) in serial.iter().zip(&parallel) {
                assert_eq!(a.condition, b.condition);
                assert_eq!(a.auroc, b.auroc, "{}: auroc differs", a.condition);
                assert_eq!(a.aupr, b.aupr, "{}: aupr differs", a.condition);
                assert_eq!(a.fpr95, b.fpr95, "{}: fpr95 differs", a.condition);
                assert_eq!(a.warning, b.warning);
            }
        }
        assert!(evaluate_conditions_with(
            &model,
            &bank,
            &test,
            &labels,
            ScoreVariant::A,
            &[],
            0
        )
        .is_err());
    }

    #[test]
    fn report_files_round_trip_and_validate() {
        let report = EvalReport {
            protocol: "one_class(shapes:0)".into(),
            score_variant: ScoreVariant::APlus,
            resolution: 28,
            conditions: vec![
                ConditionResult {
                    condition: "clean".into(),
                    auroc: 0.93,
                    aupr: 0.91,
                    fpr95: 0.22,
                    wall_seconds: 1.5,
                    warning: None,
                },
                ConditionResult {
                    condition: "pgd10x1_eps0.01569".into(),
                    auroc: 0.61,
                    aupr: 0.55,
                    fpr95: 0.87,
                    wall_seconds: 14.2,
                    warning: Some("demo, with a comma".into()),
                },
            ],
            data_fingerprint: "ab".repeat(32),
            model_fingerprint: "cd".repeat(32),
        };
        report.validate().unwrap();
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 3);
        let parsed = EvalReport::from_csv(&csv).unwrap();
        assert_eq!(parsed.protocol, report.protocol);
        assert_eq!(parsed.score_variant, report.score_variant);
        assert_eq!(parsed.conditions.len(), 2);
        assert_eq!(parsed.conditions[0].auroc, 0.93);
        assert!(parsed.conditions[1].warning.is_some());

        let text = report.to_text();
        assert!(text.contains("clean"));
        assert!(text.contains("abab"));

        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("report.csv");
        let txt_path = dir.path().join("report.txt");
        report.write_files(&csv_path, &txt_path).unwrap();
        let reread = EvalReport::from_csv(&std::fs::read_to_string(&csv_path).unwrap()).unwrap();
        assert_eq!(reread.conditions.len(), 2);

        // A report without the clean row fails validation.
        let mut bad = report.clone();
        bad.conditions.remove(0);
        assert!(bad.validate().is_err());
    }
}
