//! Label credibility: a classifier trained on noisy labels over a frozen
//! representation, two 1-D Gaussian mixtures over its per-sample losses and
//! confidences, and the resulting split into labeled (L) and unknown (U)
//! samples.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::numnet::{
    cosine_lr, cross_entropy, init_stack, one_hot, one_hot_matrix, predict, stack_forward,
    tape_cross_entropy, BoundStack, Dense, Matrix, OptState, Tape, LOG_FLOOR,
};
use crate::ssrl::embed;
use crate::{seeded_rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub var_floor: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 200,
            var_floor: 1e-6,
        }
    }
}

/// Two-component mixture, components ordered by mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gmm1D {
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub weights: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    LowMean,
    HighMean,
}

impl Gmm1D {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .means
            .iter()
            .chain(&self.variances)
            .chain(&self.weights);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("GMM parameters".into()));
        }
        if self.variances.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidConfig("GMM variances must be > 0".into()));
        }
        if self.weights.iter().any(|&w| w < 0.0)
            || (self.weights[0] + self.weights[1] - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidConfig(
                "GMM weights must be a distribution".into(),
            ));
        }
        if self.means[0] > self.means[1] {
            return Err(Error::InvalidConfig(
                "GMM components must be ordered by mean".into(),
            ));
        }
        Ok(())
    }

    /// `log(w_k · N(v; m_k, σ²_k))` for both components.
    fn log_joint(&self, v: f64) -> [f64; 2] {
        let f = |k: usize| {
            let d = v - self.means[k];
            self.weights[k].max(f64::MIN_POSITIVE).ln()
                - 0.5 * (2.0 * std::f64::consts::PI * self.variances[k]).ln()
                - d * d / (2.0 * self.variances[k])
        };
        [f(0), f(1)]
    }

    /// Responsibility of the high-mean component and the sample's
    /// log-density.
    fn responsibility(&self, v: f64) -> (f64, f64) {
        let [a, b] = self.log_joint(v);
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        ((b - lse).exp(), lse)
    }

    pub fn log_likelihood(&self, values: &[f64]) -> f64 {
        values.iter().map(|&v| self.responsibility(v).1).sum()
    }
}

pub fn gmm_posterior(g: &Gmm1D, v: f64, component: Component) -> f64 {
    let high = g.responsibility(v).0;
    match component {
        Component::HighMean => high,
        Component::LowMean => 1.0 - high,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmFit {
    pub gmm: Gmm1D,
    /// Log-likelihood at initialization and after every M-step.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// EM from quantile initialization: means at the 10th and 90th percentiles,
/// equal weights, both variances set to the pooled sample variance.
pub fn fit_gmm_em(values: &[f64], config: &GmmConfig) -> Result<GmmFit> {
    if values.len() < 4 {
        return Err(Error::Empty(format!(
            "GMM fit needs ≥ 4 values, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("GMM input".into()));
    }
    if !(config.var_floor > 0.0) || config.max_iter == 0 {
        return Err(Error::InvalidConfig(
            "GMM needs var_floor > 0 and max_iter ≥ 1".into(),
        ));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    if min == max {
        return Err(Error::Degenerate(format!(
            "all {} values equal {min}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mut lo = quantile(&sorted, 0.1);
    let mut hi = quantile(&sorted, 0.9);
    if lo == hi {
        (lo, hi) = (min, max);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var =
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).max(config.var_floor);
    let mut gmm = Gmm1D {
        means: [lo, hi],
        variances: [var, var],
        weights: [0.5, 0.5],
    };

    let mut trace = Vec::new();
    let mut resp = vec![0.0; values.len()];
    let mut converged = false;
    let mut ll = e_step(&gmm, values, &mut resp);
    trace.push(ll);
    for _ in 0..config.max_iter {
        gmm = m_step(values, &resp, config.var_floor);
        let next = e_step(&gmm, values, &mut resp);
        trace.push(next);
        let improvement = next - ll;
        ll = next;
        if improvement < config.tol {
            converged = true;
            break;
        }
    }
    if gmm.means[0] > gmm.means[1] {
        gmm.means.swap(0, 1);
        gmm.variances.swap(0, 1);
        gmm.weights.swap(0, 1);
    }
    Ok(GmmFit {
        gmm,
        log_likelihood: trace,
        converged,
    })
}

fn e_step(gmm: &Gmm1D, values: &[f64], resp: &mut [f64]) -> f64 {
    let mut ll = 0.0;
    for (r, &v) in resp.iter_mut().zip(values) {
        let (h, lse) = gmm.responsibility(v);
        *r = h;
        ll += lse;
    }
    ll
}

fn m_step(values: &[f64], resp: &[f64], var_floor: f64) -> Gmm1D {
    let n = values.len() as f64;
    let mut gmm = Gmm1D {
        means: [0.0; 2],
        variances: [var_floor; 2],
        weights: [0.0; 2],
    };
    for k in 0..2 {
        let r = |i: usize| if k == 1 { resp[i] } else { 1.0 - resp[i] };
        let nk: f64 = (0..values.len()).map(r).sum();
        if nk <= 0.0 {
            // An emptied component keeps a harmless placeholder.
            gmm.means[k] = values.iter().sum::<f64>() / n;
            continue;
        }
        let m = (0..values.len()).map(|i| r(i) * values[i]).sum::<f64>() / nk;
        let v = (0..values.len())
            .map(|i| r(i) * (values[i] - m) * (values[i] - m))
            .sum::<f64>()
            / nk;
        gmm.means[k] = m;
        gmm.variances[k] = v.max(var_floor);
        gmm.weights[k] = nk / n;
    }
    let total = gmm.weights[0] + gmm.weights[1];
    gmm.weights = [gmm.weights[0] / total, gmm.weights[1] / total];
    gmm
}

/// Settings for the frozen-representation classifier and the triage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub tau_clean: f64,
    pub tau_right: f64,
    pub gmm: GmmConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 128,
            tau_clean: 0.5,
            tau_right: 0.5,
            gmm: GmmConfig::default(),
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "stage2 epochs and batch_size must be ≥ 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(
                "stage2 learning_rate must be > 0".into(),
            ));
        }
        for (name, t) in [("tau_clean", self.tau_clean), ("tau_right", self.tau_right)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be in [0, 1], got {t}"
                )));
            }
        }
        Ok(())
    }
}

/// Accuracy after one epoch; `train` is measured against the noisy labels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochAccuracy {
    pub epoch: usize,
    pub train: f64,
    pub test: Option<f64>,
}

/// Fraction of `pred` equal to `labels`.
pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / pred.len() as f64
}

/// Trains a fresh linear classifier with SGD and cross-entropy on
/// `embed(encoder, X)` against the noisy labels. The encoder is borrowed
/// immutably and never updated.
pub fn train_frozen_classifier(
    encoder: &[Dense],
    train: &LabeledDataset,
    test: Option<&LabeledDataset>,
    config: &Stage2Config,
    seed: u64,
) -> Result<(Vec<Dense>, Vec<EpochAccuracy>)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("stage2 training set".into()));
    }
    let z = embed(encoder, &train.x)?;
    let z_test = test.map(|t| embed(encoder, &t.x)).transpose()?;
    let mut rng = seeded_rng(seed);
    let mut classifier = init_stack(&[z.cols(), train.classes], &mut rng)?;
    let targets = one_hot_matrix(&train.y_noisy, train.classes);

    let n = train.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total = config.epochs * steps_per_epoch;
    let mut opt = OptState::sgd(config.learning_rate, config.momentum)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let bound = BoundStack::bind(&mut tape, &classifier, true);
            let input = tape.constant(z.select_rows(chunk));
            let logits = bound.forward(&mut tape, input, false)?;
            let loss = tape_cross_entropy(&mut tape, logits, &targets.select_rows(chunk))?;
            let mut grads = tape.backward(loss)?;
            let g = bound.gradients(&mut grads, &tape);
            opt.set_learning_rate(
                cosine_lr(step, total, config.learning_rate, 0.0)?.max(f64::MIN_POSITIVE),
            )?;
            let mut p = Vec::new();
            let mut gs = Vec::new();
            crate::numnet::collect_slices(&mut classifier, &g, &mut p, &mut gs)?;
            opt.step_slices(&mut p, &gs)?;
            step += 1;
        }
        let train_acc = accuracy(&predict_from_embedding(&classifier, &z)?, &train.y_noisy);
        let test_acc = match (&z_test, test) {
            (Some(zt), Some(t)) => Some(accuracy(
                &predict_from_embedding(&classifier, zt)?,
                &t.y_clean,
            )),
            _ => None,
        };
        log.push(EpochAccuracy {
            epoch,
            train: train_acc,
            test: test_acc,
        });
    }
    Ok((classifier, log))
}

fn predict_from_embedding(classifier: &[Dense], z: &Matrix) -> Result<Vec<usize>> {
    Ok(predict(
        &stack_forward(classifier, z, false)?.softmax_rows(),
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleStats {
    /// Cross-entropy against the noisy label.
    pub losses: Vec<f64>,
    /// Probability of the predicted class.
    pub confidences: Vec<f64>,
    pub y_pred: Vec<usize>,
}

pub fn per_sample_stats(
    encoder: &[Dense],
    classifier: &[Dense],
    ds: &LabeledDataset,
) -> Result<SampleStats> {
    let probs = stack_forward(classifier, &embed(encoder, &ds.x)?, false)?.softmax_rows();
    stats_from_probabilities(&probs, &ds.y_noisy)
}

pub fn stats_from_probabilities(probs: &Matrix, y_noisy: &[usize]) -> Result<SampleStats> {
    if probs.rows() != y_noisy.len() {
        return Err(Error::Shape(format!(
            "{} probability rows for {} labels",
            probs.rows(),
            y_noisy.len()
        )));
    }
    let classes = probs.cols();
    let mut losses = Vec::with_capacity(y_noisy.len());
    let mut confidences = Vec::with_capacity(y_noisy.len());
    for (row, &y) in probs.row_iter().zip(y_noisy) {
        losses.push(cross_entropy(row, &one_hot(y, classes))?);
        confidences.push(
            row.iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
                .max(LOG_FLOOR),
        );
    }
    Ok(SampleStats {
        losses,
        confidences,
        y_pred: predict(probs),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CredibilityScores {
    pub p_clean: Vec<f64>,
    pub p_right: Vec<f64>,
    pub losses: Vec<f64>,
    pub confidences: Vec<f64>,
}

/// Mixtures behind the scores; `None` where the values were all identical
/// and every sample was assigned to the favourable component.
#[derive(Clone, Debug, PartialEq)]
pub struct CredibilityFits {
    pub loss: Option<GmmFit>,
    pub confidence: Option<GmmFit>,
}

/// Fits the loss mixture on min-max normalized losses (p_clean is the
/// low-mean posterior) and the confidence mixture on raw confidences
/// (p_right is the high-mean posterior).
pub fn assess_credibility(
    stats: &SampleStats,
    config: &GmmConfig,
) -> Result<(CredibilityScores, CredibilityFits)> {
    let n = stats.losses.len();
    let normalized = min_max_normalize(&stats.losses);
    let posteriors = |values: &[f64], component| -> Result<(Vec<f64>, Option<GmmFit>)> {
        match fit_gmm_em(values, config) {
            Ok(fit) => Ok((
                values
                    .iter()
                    .map(|&v| gmm_posterior(&fit.gmm, v, component))
                    .collect(),
                Some(fit),
            )),
            Err(Error::Degenerate(_)) => Ok((vec![1.0; n], None)),
            Err(e) => Err(e),
        }
    };
    let (p_clean, loss_fit) = posteriors(&normalized, Component::LowMean)?;
    let (p_right, conf_fit) = posteriors(&stats.confidences, Component::HighMean)?;
    Ok((
        CredibilityScores {
            p_clean,
            p_right,
            losses: stats.losses.clone(),
            confidences: stats.confidences.clone(),
        },
        CredibilityFits {
            loss: loss_fit,
            confidence: conf_fit,
        },
    ))
}

/// Maps to [0, 1]; a constant input is returned unchanged.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return values.to_vec();
    }
    values.iter().map(|v| (v - min) / (max - min)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Kept,
    Corrected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledEntry {
    pub index: usize,
    pub label: usize,
    pub origin: Origin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferredLabels {
    pub classes: usize,
    pub labeled: Vec<LabeledEntry>,
    pub unlabeled: Vec<usize>,
    pub tau_clean: f64,
    pub tau_right: f64,
}

impl TransferredLabels {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks that L and U partition `[0, n)` and that labels are in range.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        let indices = self
            .labeled
            .iter()
            .map(|e| e.index)
            .chain(self.unlabeled.iter().copied());
        for i in indices {
            if i >= n {
                return Err(Error::format(
                    "index",
                    format!("{i} out of range for {n} samples"),
                ));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::format("index", format!("{i} appears twice")));
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::format(
                "index",
                format!("sample {missing} is in neither L nor U"),
            ));
        }
        if let Some(e) = self.labeled.iter().find(|e| e.label >= self.classes) {
            return Err(Error::format(
                "label",
                format!("{} out of range for {} classes", e.label, self.classes),
            ));
        }
        Ok(())
    }

    pub fn label_one_hot(&self, entry: &LabeledEntry) -> Vec<f64> {
        one_hot(entry.label, self.classes)
    }

    pub fn count(&self, origin: Origin) -> usize {
        self.labeled.iter().filter(|e| e.origin == origin).count()
    }

    /// Fraction of L whose assigned label matches `y_clean`.
    pub fn precision(&self, y_clean: &[usize]) -> f64 {
        if self.labeled.is_empty() {
            return 0.0;
        }
        let hits = self
            .labeled
            .iter()
            .filter(|e| y_clean[e.index] == e.label)
            .count();
        hits as f64 / self.labeled.len() as f64
    }

    /// Number of L entries per assigned class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for e in &self.labeled {
            counts[e.label] += 1;
        }
        counts
    }
}

pub fn transfer_labels(
    y_noisy: &[usize],
    y_pred: &[usize],
    scores: &CredibilityScores,
    tau_clean: f64,
    tau_right: f64,
    classes: usize,
) -> Result<TransferredLabels> {
    let n = y_noisy.len();
    if y_pred.len() != n || scores.p_clean.len() != n || scores.p_right.len() != n {
        return Err(Error::Shape("transfer inputs are not aligned".into()));
    }
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for i in 0..n {
        if scores.p_clean[i] >= tau_clean {
            labeled.push(LabeledEntry {
                index: i,
                label: y_noisy[i],
                origin: Origin::Kept,
            });
        } else if scores.p_right[i] >= tau_right {
            labeled.push(LabeledEntry {
                index: i,
                label: y_pred[i],
                origin: Origin::Corrected,
            });
        } else {
            unlabeled.push(i);
        }
    }
    Ok(TransferredLabels {
        classes,
        labeled,
        unlabeled,
        tau_clean,
        tau_right,
    })
}

/// Everything Stage 2 produces.
#[derive(Clone, Debug)]
pub struct Stage2Output {
    pub classifier: Vec<Dense>,
    pub log: Vec<EpochAccuracy>,
    pub stats: SampleStats,
    pub scores: CredibilityScores,
    pub fits: CredibilityFits,
    pub transfer: TransferredLabels,
}

pub fn run_stage2(
    encoder: &[Dense],
    train: &LabeledDataset,
    test: Option<&LabeledDataset>,
    config: &Stage2Config,
    seed: u64,
) -> Result<Stage2Output> {
    let (classifier, log) = train_frozen_classifier(encoder, train, test, config, seed)?;
    let stats = per_sample_stats(encoder, &classifier, train)?;
    let (scores, fits) = assess_credibility(&stats, &config.gmm)?;
    let transfer = transfer_labels(
        &train.y_noisy,
        &stats.y_pred,
        &scores,
        config.tau_clean,
        config.tau_right,
        train.classes,
    )?;
    Ok(Stage2Output {
        classifier,
        log,
        stats,
        scores,
        fits,
        transfer,
    })
}
