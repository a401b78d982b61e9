//! Pseudo-anomaly crafting: rejection-sample hard-transform sequences until
//! the result no longer looks like a normal sample.
//!
//! The crafter first builds a k-class dataset by applying each bank transform
//! to every normal training image and trains a classifier to recognize which
//! transform produced an image.  A diagonal-covariance Gaussian mixture is
//! then fitted over the classifier's penultimate embeddings of the *clean*
//! training set, and each fitted log-likelihood is kept in a sorted table
//! that converts new log-likelihoods into add-one-smoothed empirical
//! p-values.  Crafting a pseudo-anomaly repeatedly applies a random
//! subsequence of the bank and accepts the first candidate whose p-value
//! falls strictly below the significance level `lambda`; after `max_iters`
//! rejected candidates the whole bank is applied in seeded order so the
//! operation always terminates.

use crate::augment::{
    apply_hard_sequence, default_bank, sample_hard_sequence, TransformId, TransformSpec,
};
use crate::autodiff::Graph;
use crate::checkpoint::TensorStore;
use crate::error::{Error, Result};
use crate::gmm::{DiagGmm, GmmConfig};
use crate::image::ImageBatch;
use crate::losses::cross_entropy_graph;
use crate::nets::{
    gradient_arrays, BindMode, ClassifierConfig, NormMode, Optimizer, OptimizerKind,
    TransformClassifier,
};
use crate::rng::{child_seed, child_seed_at, stream_rng};
use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Batch size used when running the frozen classifier in evaluation mode.
const EVAL_CHUNK: usize = 128;

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

/// Optimization settings for the k-class transform classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fraction of each batch statistic folded into the batch-norm running
    /// statistics after every step.
    pub bn_momentum: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            bn_momentum: 0.1,
        }
    }
}

impl ClassifierTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("classifier train.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(
                "classifier train.batch_size must be >= 1".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!(
                "classifier train.lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "classifier train.momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "classifier train.weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!(
                "classifier train.bn_momentum must be in [0, 1], got {}",
                self.bn_momentum
            )));
        }
        Ok(())
    }
}

/// Everything needed to fit a crafter from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrafterConfig {
    /// Hard-transform bank; its length fixes the classifier's class count.
    pub bank: Vec<TransformSpec>,
    /// Significance level: candidates with p-value strictly below it count
    /// as anomalous.  `1.0` is allowed and admits every candidate whose
    /// log-likelihood stays below the training maximum.
    pub lambda: f64,
    /// Rejection-sampling attempts before the full-bank fallback.
    pub max_iters: usize,
    pub gmm: GmmConfig,
    /// Architecture of the transform classifier.  `num_classes` and
    /// `input_shape` are overridden from the bank and data during fitting.
    pub classifier: ClassifierConfig,
    pub train: ClassifierTrainConfig,
}

impl Default for CrafterConfig {
    fn default() -> Self {
        Self {
            bank: default_bank(),
            lambda: 0.05,
            max_iters: 10,
            gmm: GmmConfig::default(),
            classifier: ClassifierConfig::default(),
            train: ClassifierTrainConfig::default(),
        }
    }
}

impl CrafterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bank.len() < 2 {
            return Err(Error::Config(
                "crafter.bank must have at least 2 transforms".into(),
            ));
        }
        for spec in &self.bank {
            spec.validate()?;
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config(format!(
                "crafter.lambda must be in (0, 1], got {}",
                self.lambda
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("crafter.max_iters must be >= 1".into()));
        }
        self.gmm.validate()?;
        self.classifier.validate()?;
        self.train.validate()
    }
}

// ---------------------------------------------------------------------------
// transform-classification dataset and classifier training
// ---------------------------------------------------------------------------

/// Apply each bank transform to every training image, producing a class-major
/// k-class dataset: block `j` holds `bank[j]` applied to all of `d_train`,
/// labeled `j`.
pub fn build_transform_dataset(
    d_train: &ImageBatch,
    bank: &[TransformSpec],
    seed: u64,
) -> Result<(ImageBatch, Vec<usize>)> {
    if d_train.is_empty() {
        return Err(Error::EmptyBatch("build_transform_dataset".into()));
    }
    if bank.len() < 2 {
        return Err(Error::InvalidArgument(
            "build_transform_dataset: bank must have at least 2 transforms".into(),
        ));
    }
    let n = d_train.len();
    let mut blocks: Vec<ImageBatch> = Vec::with_capacity(bank.len());
    let mut labels: Vec<usize> = Vec::with_capacity(n * bank.len());
    for (j, spec) in bank.iter().enumerate() {
        let block = apply_hard_sequence(
            d_train,
            std::slice::from_ref(spec),
            child_seed_at(seed, "dataset_class", &[j as u64]),
        )?;
        blocks.push(block);
        labels.extend(std::iter::repeat_n(j, n));
    }
    let refs: Vec<&ImageBatch> = blocks.iter().collect();
    Ok((ImageBatch::concat(&refs)?, labels))
}

/// Train the k-class transform classifier with SGD + momentum.  Deterministic
/// in `seed` (initialization and per-epoch shuffles both derive from it).
pub fn train_transform_classifier(
    images: &ImageBatch,
    labels: &[usize],
    cfg: &ClassifierConfig,
    tcfg: &ClassifierTrainConfig,
    seed: u64,
) -> Result<TransformClassifier> {
    cfg.validate()?;
    tcfg.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyBatch("train_transform_classifier".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            cfg.num_classes
        )));
    }
    let (_, c, h, w) = images.dims();
    if (c, h, w) != cfg.input_shape {
        return Err(Error::ShapeMismatch(format!(
            "images are ({c}, {h}, {w}), classifier expects {:?}",
            cfg.input_shape
        )));
    }

    let mut model = TransformClassifier::new(cfg.clone(), seed)?;
    let mut opt = Optimizer::new(
        OptimizerKind::SgdMomentum,
        tcfg.lr,
        tcfg.momentum,
        tcfg.weight_decay,
    );
    let n = images.len();
    for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(seed, "cls_epoch", &[epoch as u64]));
        for chunk in order.chunks(tcfg.batch_size) {
            let xb = images.select(chunk)?;
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let input = g.constant(xb.array().clone().into_dyn());
            let pass = model.forward(&mut g, input, NormMode::Train, BindMode::Trainable);
            let loss = cross_entropy_graph(&mut g, pass.logits, &yb, cfg.num_classes);
            if !g.scalar(loss).is_finite() {
                return Err(Error::Diverged(format!(
                    "transform-classifier loss became non-finite at epoch {epoch}"
                )));
            }
            let grads = g.backward(loss)?;
            let grad_arrays = gradient_arrays(&g, &grads, &pass.params);
            opt.step(&grad_arrays, |f| model.visit_params_mut(f))?;
            model.update_running_stats(&pass.bn_stats, tcfg.bn_momentum);
        }
    }
    Ok(model)
}

/// Evaluation-mode top-1 accuracy of the classifier on a labeled set.
pub fn classifier_accuracy(
    model: &TransformClassifier,
    images: &ImageBatch,
    labels: &[usize],
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyBatch("classifier_accuracy".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let indices: Vec<usize> = (0..images.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let xb = images.select(chunk)?;
        let (_, logits) = model.forward_eval(&xb)?;
        for (r, &i) in chunk.iter().enumerate() {
            let row = logits.row(r);
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            if best == labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

fn embed_with(classifier: &TransformClassifier, x: &ImageBatch) -> Result<Array2<f64>> {
    if x.is_empty() {
        return Err(Error::EmptyBatch("embed".into()));
    }
    let mut out = Array2::zeros((x.len(), classifier.embed_dim()));
    let indices: Vec<usize> = (0..x.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let xb = x.select(chunk)?;
        let (e, _) = classifier.forward_eval(&xb)?;
        for (r, &i) in chunk.iter().enumerate() {
            out.row_mut(i).assign(&e.row(r));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// threshold model
// ---------------------------------------------------------------------------

/// Frozen transform classifier + embedding density model + the sorted
/// training log-likelihood table that turns likelihoods into empirical
/// p-values.
#[derive(Debug, Clone)]
pub struct ThresholdModel {
    pub classifier: TransformClassifier,
    pub gmm: DiagGmm,
    /// Log-likelihoods of the normal training embeddings, ascending.
    pub train_likelihoods: Vec<f64>,
    /// Significance level; p-values strictly below it count as anomalous.
    pub lambda: f64,
}

impl ThresholdModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be in (0, 1], got {}",
                self.lambda
            )));
        }
        if self.train_likelihoods.is_empty() {
            return Err(Error::InvalidArgument(
                "train_likelihoods must be non-empty".into(),
            ));
        }
        if self.train_likelihoods.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("train_likelihoods".into()));
        }
        if self.train_likelihoods.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument(
                "train_likelihoods must be sorted ascending".into(),
            ));
        }
        self.gmm.validate()?;
        if self.gmm.dim() != self.classifier.embed_dim() {
            return Err(Error::ShapeMismatch(format!(
                "gmm dimension {} does not match classifier embedding dimension {}",
                self.gmm.dim(),
                self.classifier.embed_dim()
            )));
        }
        Ok(())
    }

    /// Penultimate-layer embeddings of a batch (evaluation mode, chunked).
    pub fn embed(&self, x: &ImageBatch) -> Result<Array2<f64>> {
        embed_with(&self.classifier, x)
    }

    /// Mixture log-likelihood of each sample's embedding.
    pub fn log_likelihood_batch(&self, x: &ImageBatch) -> Result<Vec<f64>> {
        let e = self.embed(x)?;
        let lls = self.gmm.log_likelihood_batch(&e);
        if lls.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding log-likelihood".into()));
        }
        Ok(lls.to_vec())
    }

    /// Add-one-smoothed empirical p-value of a log-likelihood against the
    /// training table: `(1 + #{train ≤ ll}) / (n + 1)`.  Always in
    /// `(0, 1]` and monotone nondecreasing in `ll`.
    pub fn pvalue_of_loglik(&self, ll: f64) -> f64 {
        let n = self.train_likelihoods.len();
        let below = self.train_likelihoods.partition_point(|&t| t <= ll);
        (1 + below) as f64 / (n + 1) as f64
    }

    /// p-value of every sample in a batch.
    pub fn pvalue_batch(&self, x: &ImageBatch) -> Result<Vec<f64>> {
        Ok(self
            .log_likelihood_batch(x)?
            .into_iter()
            .map(|ll| self.pvalue_of_loglik(ll))
            .collect())
    }

    /// p-value of a single image.
    pub fn pvalue(&self, x: &Array3<f64>) -> Result<f64> {
        let single = ImageBatch::from_samples(std::slice::from_ref(x))?;
        Ok(self.pvalue_batch(&single)?[0])
    }

    /// How many of the smallest training likelihoods sit inside the
    /// rejection region: `floor(lambda · (n + 1))`.
    pub fn threshold_rank(&self) -> usize {
        (self.lambda * (self.train_likelihoods.len() + 1) as f64).floor() as usize
    }

    /// Persist classifier weights, mixture parameters, the likelihood table,
    /// and `lambda` into one versioned checkpoint file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "threshold_model",
            "lambda": self.lambda,
            "classifier_config": self.classifier.cfg,
        });
        let mut store = TensorStore::new(meta);
        self.classifier.store_into(&mut store, "classifier");
        self.gmm.store_into(&mut store, "gmm");
        store.insert(
            "train_likelihoods",
            Array1::from(self.train_likelihoods.clone()).into_dyn(),
        );
        store.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let store = TensorStore::load(path)?;
        let kind = store
            .meta
            .get("kind")
            .and_then(|v| v.as_str())
            .unwrap_or_default();
        if kind != "threshold_model" {
            return Err(Error::CheckpointFormat(format!(
                "expected a threshold_model checkpoint, found kind '{kind}'"
            )));
        }
        let lambda = store
            .meta
            .get("lambda")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::CheckpointFormat("missing lambda in metadata".into()))?;
        let cfg_value = store
            .meta
            .get("classifier_config")
            .cloned()
            .ok_or_else(|| {
                Error::CheckpointFormat("missing classifier_config in metadata".into())
            })?;
        let cfg: ClassifierConfig = serde_json::from_value(cfg_value)
            .map_err(|e| Error::CheckpointFormat(format!("bad classifier_config: {e}")))?;
        let classifier = TransformClassifier::load_from(cfg, &store, "classifier")?;
        let gmm = DiagGmm::load_from(&store, "gmm")?;
        let train_likelihoods: Vec<f64> = store.get("train_likelihoods")?.iter().copied().collect();
        let tm = Self {
            classifier,
            gmm,
            train_likelihoods,
            lambda,
        };
        tm.validate()?;
        Ok(tm)
    }
}

/// Fit the density side of the crafter: embed the clean training set with a
/// trained classifier, fit the mixture, and record the sorted training
/// log-likelihoods.
pub fn fit_threshold_model(
    classifier: TransformClassifier,
    d_train: &ImageBatch,
    lambda: f64,
    gmm_cfg: &GmmConfig,
    seed: u64,
) -> Result<ThresholdModel> {
    if !(lambda.is_finite() && lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be in (0, 1], got {lambda}"
        )));
    }
    let e = embed_with(&classifier, d_train)?;
    let gmm = DiagGmm::fit(&e, gmm_cfg, seed)?;
    let mut lls: Vec<f64> = gmm.log_likelihood_batch(&e).to_vec();
    if lls.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training log-likelihoods".into()));
    }
    lls.sort_unstable_by(f64::total_cmp);
    let tm = ThresholdModel {
        classifier,
        gmm,
        train_likelihoods: lls,
        lambda,
    };
    tm.validate()?;
    Ok(tm)
}

// ---------------------------------------------------------------------------
// crafting
// ---------------------------------------------------------------------------

/// Per-sample record of how a pseudo-anomaly was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CraftLog {
    /// Transform sequences tried, including the accepted one (`max_iters`
    /// when the fallback fired).
    pub attempts: usize,
    /// p-value of the returned image; strictly below `lambda` unless
    /// `fallback_used`.
    pub final_pvalue: f64,
    /// Transforms applied to produce the returned image, in order.
    pub sequence_used: Vec<TransformId>,
    pub fallback_used: bool,
}

/// Rejection-sample hard-transform sequences on one image until the result's
/// p-value falls strictly below `tm.lambda`; after `max_iters` rejections,
/// apply the whole bank in seeded order instead.  Deterministic in `seed`.
pub fn craft_pseudo_anomaly(
    x: &Array3<f64>,
    tm: &ThresholdModel,
    bank: &[TransformSpec],
    seed: u64,
    max_iters: usize,
) -> Result<(Array3<f64>, CraftLog)> {
    if max_iters == 0 {
        return Err(Error::InvalidArgument(
            "craft_pseudo_anomaly: max_iters must be >= 1".into(),
        ));
    }
    let single = ImageBatch::from_samples(std::slice::from_ref(x))?;
    for attempt in 0..max_iters {
        let seq = sample_hard_sequence(child_seed_at(seed, "craft_attempt", &[attempt as u64]), bank)?;
        let out = apply_hard_sequence(
            &single,
            &seq,
            child_seed_at(seed, "craft_apply", &[attempt as u64]),
        )?;
        let p = tm.pvalue_batch(&out)?[0];
        if p < tm.lambda {
            return Ok((
                out.sample_owned(0),
                CraftLog {
                    attempts: attempt + 1,
                    final_pvalue: p,
                    sequence_used: seq.iter().map(|s| s.id).collect(),
                    fallback_used: false,
                },
            ));
        }
    }
    // Every candidate stayed statistically deniable: apply the entire bank in
    // seeded order so crafting still terminates with a maximally transformed
    // image.
    let mut fallback: Vec<TransformSpec> = bank.to_vec();
    fallback.shuffle(&mut stream_rng(seed, "craft_fallback", &[]));
    let out = apply_hard_sequence(&single, &fallback, child_seed(seed, "craft_fallback_apply"))?;
    let p = tm.pvalue_batch(&out)?[0];
    Ok((
        out.sample_owned(0),
        CraftLog {
            attempts: max_iters,
            final_pvalue: p,
            sequence_used: fallback.iter().map(|s| s.id).collect(),
            fallback_used: true,
        },
    ))
}

/// Craft one pseudo-anomaly per input sample.  Output index `i` is the
/// opposite partner of input index `i`, and equals exactly what
/// [`craft_pseudo_anomaly`] produces for that sample under the per-sample
/// child seed.
pub fn craft_batch(
    b_normal: &ImageBatch,
    tm: &ThresholdModel,
    bank: &[TransformSpec],
    seed: u64,
    max_iters: usize,
) -> Result<(ImageBatch, Vec<CraftLog>)> {
    if b_normal.is_empty() {
        return Err(Error::EmptyBatch("craft_batch".into()));
    }
    let mut samples = Vec::with_capacity(b_normal.len());
    let mut logs = Vec::with_capacity(b_normal.len());
    for i in 0..b_normal.len() {
        let (img, log) = craft_pseudo_anomaly(
            &b_normal.sample_owned(i),
            tm,
            bank,
            child_seed_at(seed, "craft_sample", &[i as u64]),
            max_iters,
        )?;
        samples.push(img);
        logs.push(log);
    }
    Ok((ImageBatch::from_samples(&samples)?, logs))
}

// ---------------------------------------------------------------------------
// end-to-end fitting
// ---------------------------------------------------------------------------

/// A fitted crafter plus diagnostics of the transform-classification task.
#[derive(Debug, Clone)]
pub struct CrafterFit {
    pub model: ThresholdModel,
    /// Training-set accuracy of the k-class transform classifier.
    pub classifier_accuracy: f64,
}

/// Fit the whole crafter: build the k-class dataset, train the classifier,
/// then fit the mixture + likelihood table on the clean training set.  The
/// classifier's class count and input shape follow the bank and the data.
pub fn fit_crafter(d_train: &ImageBatch, cfg: &CrafterConfig, seed: u64) -> Result<CrafterFit> {
    cfg.validate()?;
    if d_train.is_empty() {
        return Err(Error::EmptyBatch("fit_crafter".into()));
    }
    let (_, c, h, w) = d_train.dims();
    let (dataset, labels) =
        build_transform_dataset(d_train, &cfg.bank, child_seed(seed, "craft_dataset"))?;
    let mut ccfg = cfg.classifier.clone();
    ccfg.num_classes = cfg.bank.len();
    ccfg.input_shape = (c, h, w);
    let classifier = train_transform_classifier(
        &dataset,
        &labels,
        &ccfg,
        &cfg.train,
        child_seed(seed, "craft_classifier"),
    )?;
    let accuracy = classifier_accuracy(&classifier, &dataset, &labels)?;
    let model = fit_threshold_model(
        classifier,
        d_train,
        cfg.lambda,
        &cfg.gmm,
        child_seed(seed, "craft_gmm"),
    )?;
    Ok(CrafterFit {
        model,
        classifier_accuracy: accuracy,
    })
}
