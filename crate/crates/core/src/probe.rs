//! Linking-failure detectors: an L2-regularized logistic probe on one
//! layer's hidden states, a perplexity threshold, and their average.
//!
//! Linking failure is the positive class everywhere in this module.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace_store::TraceSet;

/// Layer the probe reads by default.
pub const DEFAULT_LAYER: usize = 20;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("layer {layer} outside 1..={num_layers}")]
    LayerOutOfRange { layer: usize, num_layers: usize },
    #[error("records without correctness labels: {}", .0.join(", "))]
    MissingLabels(Vec<String>),
    #[error("feature row {row} has {got} values, expected {expected}")]
    Dimension { row: usize, got: usize, expected: usize },
    #[error("non-finite feature in row {0}")]
    NonFinite(usize),
    #[error("training needs both classes; got {failures} failures and {successes} successes")]
    SingleClass { failures: usize, successes: usize },
    #[error("need at least {need} samples, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("{0} values but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("perplexity {0} is NaN")]
    NanPerplexity(usize),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Per-dimension centering and scaling fitted on a training matrix.
/// Dimensions with zero spread keep a scale of 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    /// Mean 0, scale 1: leaves inputs unchanged.
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Hidden states at one layer with failure labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub layer: usize,
    pub rows: Vec<Vec<f64>>,
    /// `true` = linking failure.
    pub labels: Vec<bool>,
    pub datapoint_ids: Vec<String>,
    pub stats: Standardization,
}

impl FeatureMatrix {
    pub fn new(
        layer: usize,
        rows: Vec<Vec<f64>>,
        labels: Vec<bool>,
        datapoint_ids: Vec<String>,
    ) -> Result<Self, ProbeError> {
        if rows.len() != labels.len() {
            return Err(ProbeError::LengthMismatch(rows.len(), labels.len()));
        }
        if datapoint_ids.len() != rows.len() {
            return Err(ProbeError::LengthMismatch(rows.len(), datapoint_ids.len()));
        }
        let d = rows.first().map_or(0, Vec::len);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(ProbeError::Dimension {
                    row: i,
                    got: r.len(),
                    expected: d,
                });
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(ProbeError::NonFinite(i));
            }
        }
        let stats = Standardization::fit(&rows);
        Ok(Self {
            layer,
            rows,
            labels,
            datapoint_ids,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.stats.dim()
    }

    /// Rows at `indices`, with standardization refitted on the subset.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let rows: Vec<Vec<f64>> = indices.iter().map(|&i| self.rows[i].clone()).collect();
        Self {
            layer: self.layer,
            stats: Standardization::fit(&rows),
            rows,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            datapoint_ids: indices.iter().map(|&i| self.datapoint_ids[i].clone()).collect(),
        }
    }

    /// Stacks matrices from several sources and refits standardization.
    pub fn concat(parts: &[&FeatureMatrix]) -> Result<Self, ProbeError> {
        let layer = parts.first().map_or(DEFAULT_LAYER, |p| p.layer);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut ids = Vec::new();
        for p in parts {
            rows.extend(p.rows.iter().cloned());
            labels.extend_from_slice(&p.labels);
            ids.extend(p.datapoint_ids.iter().cloned());
        }
        Self::new(layer, rows, labels, ids)
    }

    fn class_counts(&self) -> (usize, usize) {
        let failures = self.labels.iter().filter(|&&l| l).count();
        (failures, self.labels.len() - failures)
    }
}

/// Rows of `trace` at `layer` (1-based). Every record must carry a label.
pub fn extract_features(trace: &TraceSet, layer: usize) -> Result<FeatureMatrix, ProbeError> {
    let num_layers = trace.header.num_layers;
    if layer == 0 || layer > num_layers {
        return Err(ProbeError::LayerOutOfRange { layer, num_layers });
    }
    let missing: Vec<String> = trace
        .records
        .iter()
        .filter(|r| r.correct.is_none())
        .map(|r| r.datapoint_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(ProbeError::MissingLabels(missing));
    }
    let rows = layer_rows(trace, layer)?;
    FeatureMatrix::new(
        layer,
        rows,
        trace.records.iter().map(|r| r.correct == Some(false)).collect(),
        trace.records.iter().map(|r| r.datapoint_id.clone()).collect(),
    )
}

/// Rows at `layer` without requiring labels; used at scoring time.
pub fn layer_rows(trace: &TraceSet, layer: usize) -> Result<Vec<Vec<f64>>, ProbeError> {
    let num_layers = trace.header.num_layers;
    trace
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.layer(layer)
                .map(|h| h.iter().map(|&v| v as f64).collect())
                .ok_or(ProbeError::LayerOutOfRange {
                    layer,
                    num_layers: num_layers.min(r.hidden_states.len()),
                })
                .and_then(|row: Vec<f64>| {
                    if row.iter().all(|v| v.is_finite()) {
                        Ok(row)
                    } else {
                        Err(ProbeError::NonFinite(i))
                    }
                })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// L2 strength on the weights (bias is not penalized).
    pub lambda: f64,
    pub max_iter: usize,
    /// Stop once the gradient's max-abs entry falls below this.
    pub tolerance: f64,
    pub seed: u64,
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-2,
            max_iter: 5000,
            tolerance: 1e-6,
            seed: crate::DEFAULT_SEED,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub lambda: f64,
    pub iterations: usize,
    pub final_loss: f64,
    pub gradient_max_abs: f64,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// A trained linear probe. Output is the probability of linking failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub layer: usize,
    pub stats: Standardization,
    pub meta: TrainingMeta,
}

impl Probe {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// `w . standardize(x) + b`.
    pub fn logit(&self, x: &[f64]) -> Result<f64, ProbeError> {
        if x.len() != self.dim() {
            return Err(ProbeError::Dimension {
                row: 0,
                got: x.len(),
                expected: self.dim(),
            });
        }
        Ok(self.logit_standardized(&self.stats.apply(x)))
    }

    pub fn logit_standardized(&self, z: &[f64]) -> f64 {
        dot(&self.weights, z) + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64, ProbeError> {
        Ok(sigmoid(self.logit(x)?))
    }

    pub fn predict_f32(&self, x: &[f32]) -> Result<f64, ProbeError> {
        let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        self.predict(&x)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ProbeError> {
        save_json(self, path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProbeError> {
        load_json(path.as_ref())
    }
}

pub fn probe_predict(probe: &Probe, feature: &[f64]) -> Result<f64, ProbeError> {
    probe.predict(feature)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean negative log-likelihood plus `lambda/2 |w|^2` and its gradient.
/// `params` holds the weights followed by the bias.
pub fn loss_and_gradient(params: &[f64], rows: &[Vec<f64>], labels: &[bool], lambda: f64) -> (f64, Vec<f64>) {
    let d = params.len() - 1;
    let (w, b) = (&params[..d], params[d]);
    let n = rows.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; d + 1];
    for (x, &y) in rows.iter().zip(labels) {
        let z = dot(w, x) + b;
        let y = if y { 1.0 } else { 0.0 };
        loss += softplus(z) - y * z;
        let r = sigmoid(z) - y;
        for (g, xi) in grad[..d].iter_mut().zip(x) {
            *g += r * xi;
        }
        grad[d] += r;
    }
    loss /= n;
    grad.iter_mut().for_each(|g| *g /= n);
    loss += 0.5 * lambda * dot(w, w);
    for (g, wi) in grad[..d].iter_mut().zip(w) {
        *g += lambda * wi;
    }
    (loss, grad)
}

pub fn train_probe(features: &FeatureMatrix, config: &ProbeConfig) -> Result<Probe, ProbeError> {
    train_probe_traced(features, config).map(|(p, _)| p)
}

/// Full-batch gradient descent from zero, preconditioned by a per-coordinate
/// curvature bound and guarded by Armijo backtracking so the loss never
/// increases. Returns the probe and the loss after each accepted step
/// (index 0 is the initial loss).
pub fn train_probe_traced(features: &FeatureMatrix, config: &ProbeConfig) -> Result<(Probe, Vec<f64>), ProbeError> {
    let (failures, successes) = features.class_counts();
    if features.len() < 2 {
        return Err(ProbeError::TooFew {
            need: 2,
            got: features.len(),
        });
    }
    if failures == 0 || successes == 0 {
        return Err(ProbeError::SingleClass { failures, successes });
    }
    let stats = if config.standardize {
        features.stats.clone()
    } else {
        Standardization::identity(features.dim())
    };
    let rows: Vec<Vec<f64>> = features.rows.iter().map(|r| stats.apply(r)).collect();
    let labels = &features.labels;
    let d = features.dim();
    let n = rows.len() as f64;

    // Diagonal of the Hessian bound: sigmoid' <= 1/4.
    let mut curvature = vec![0.0; d + 1];
    for r in &rows {
        for (c, x) in curvature.iter_mut().zip(r) {
            *c += x * x;
        }
    }
    for c in &mut curvature[..d] {
        *c = (0.25 * *c / n + config.lambda).max(1e-12);
    }
    curvature[d] = 0.25;

    let mut params = vec![0.0; d + 1];
    let (mut loss, mut grad) = loss_and_gradient(&params, &rows, labels, config.lambda);
    let mut history = vec![loss];
    let mut step = 1.0;
    let mut iterations = 0;
    let max_abs = |g: &[f64]| g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut gmax = max_abs(&grad);

    while gmax >= config.tolerance && iterations < config.max_iter {
        let direction: Vec<f64> = grad.iter().zip(&curvature).map(|(g, c)| g / c).collect();
        let decrease = dot(&grad, &direction);
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = params.iter().zip(&direction).map(|(p, u)| p - step * u).collect();
            let (l, g) = loss_and_gradient(&trial, &rows, labels, config.lambda);
            if l <= loss - 1e-4 * step * decrease {
                accepted = Some((trial, l, g));
                break;
            }
            step *= 0.5;
        }
        let Some((p, l, g)) = accepted else {
            break;
        };
        params = p;
        loss = l;
        grad = g;
        gmax = max_abs(&grad);
        history.push(loss);
        iterations += 1;
        step = (step * 2.0).min(64.0);
    }

    let converged = gmax < config.tolerance;
    let warning = (!converged).then(|| {
        let msg = format!("probe did not converge after {iterations} iterations (gradient max-abs {gmax:.3e})");
        log::warn!("{msg}");
        msg
    });
    let bias = params.pop().expect("bias present");
    let probe = Probe {
        weights: params,
        bias,
        layer: features.layer,
        stats,
        meta: TrainingMeta {
            seed: config.seed,
            lambda: config.lambda,
            iterations,
            final_loss: loss,
            gradient_max_abs: gmax,
            converged,
            warning,
        },
    };
    Ok((probe, history))
}

/// Flags failure when answer perplexity exceeds `threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityThreshold {
    #[serde(with = "extended_f64")]
    pub threshold: f64,
    pub train_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl PerplexityThreshold {
    pub fn flags(&self, perplexity: f64) -> bool {
        perplexity > self.threshold
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ProbeError> {
        save_json(self, path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProbeError> {
        load_json(path.as_ref())
    }
}

/// Sweeps every distinct split of the sorted perplexities (midpoints plus
/// the two infinite sentinels) and keeps the most accurate threshold; ties
/// go to the smallest threshold.
pub fn learn_perplexity_threshold(perplexities: &[f64], failures: &[bool]) -> Result<PerplexityThreshold, ProbeError> {
    if perplexities.len() != failures.len() {
        return Err(ProbeError::LengthMismatch(perplexities.len(), failures.len()));
    }
    if perplexities.is_empty() {
        return Err(ProbeError::TooFew { need: 1, got: 0 });
    }
    if let Some(i) = perplexities.iter().position(|v| v.is_nan()) {
        return Err(ProbeError::NanPerplexity(i));
    }
    let n = perplexities.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| perplexities[a].total_cmp(&perplexities[b]));

    let total_fail = failures.iter().filter(|&&f| f).count();
    // Threshold at -inf flags everything: every failure counts as correct.
    let mut correct = total_fail;
    let mut best = (correct, f64::NEG_INFINITY);
    let mut i = 0;
    while i < n {
        let v = perplexities[order[i]];
        // Move every sample equal to v below the threshold.
        while i < n && perplexities[order[i]] == v {
            if failures[order[i]] {
                correct -= 1;
            } else {
                correct += 1;
            }
            i += 1;
        }
        let tau = if i < n {
            midpoint(v, perplexities[order[i]])
        } else {
            f64::INFINITY
        };
        if correct > best.0 {
            best = (correct, tau);
        }
    }

    let warning = match total_fail {
        0 => Some("no failures in training data; threshold never flags".to_string()),
        f if f == n => Some("only failures in training data; threshold flags everything".to_string()),
        _ => None,
    };
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(PerplexityThreshold {
        threshold: best.1,
        train_accuracy: best.0 as f64 / n as f64,
        warning,
    })
}

fn midpoint(a: f64, b: f64) -> f64 {
    if a.is_infinite() || b.is_infinite() {
        if a == b {
            a
        } else if b.is_infinite() {
            f64::MAX
        } else {
            f64::MIN
        }
    } else {
        a + (b - a) / 2.0
    }
}

/// Squashes a perplexity into a failure score: `sigmoid(perplexity - threshold)`.
pub fn perplexity_score(perplexity: f64, threshold: f64) -> f64 {
    let z = perplexity - threshold;
    if z.is_nan() {
        // inf - inf: the perplexity sits exactly at an infinite sentinel.
        return 0.5;
    }
    sigmoid(z)
}

/// Mean of the probe probability and the squashed perplexity score.
pub fn ensemble_score(probe_prob: f64, perplexity_score: f64) -> f64 {
    (probe_prob + perplexity_score) / 2.0
}

pub fn ensemble_predict(probe_prob: f64, perplexity: f64, threshold: f64) -> f64 {
    ensemble_score(probe_prob, perplexity_score(perplexity, threshold))
}

/// Failure is flagged strictly above 0.5.
pub fn is_flagged(score: f64) -> bool {
    score > 0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassifierEval {
    pub accuracy: f64,
    /// Accuracy of always predicting the most frequent class.
    pub base_rate: f64,
    pub n: usize,
}

pub fn evaluate_classifier(predicted: &[bool], labels: &[bool]) -> Result<ClassifierEval, ProbeError> {
    if predicted.len() != labels.len() {
        return Err(ProbeError::LengthMismatch(predicted.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(ProbeError::TooFew { need: 1, got: 0 });
    }
    let n = labels.len();
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    let positives = labels.iter().filter(|&&l| l).count();
    Ok(ClassifierEval {
        accuracy: hits as f64 / n as f64,
        base_rate: positives.max(n - positives) as f64 / n as f64,
        n,
    })
}

/// Per-class shuffle with a seeded RNG; `train_fraction` of each class (rounded)
/// goes to the training side. Both index lists come back sorted.
pub fn stratified_split(labels: &[bool], train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let k = ((idx.len() as f64) * train_fraction).round() as usize;
        let k = k.min(idx.len());
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<(), ProbeError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| ProbeError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ProbeError> {
    let text = std::fs::read_to_string(path).map_err(|source| ProbeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// JSON has no infinities; they travel as the strings "inf" and "-inf".
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else if *v < 0.0 {
            s.serialize_str("-inf")
        } else {
            s.serialize_str("nan")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("invalid number {other:?}"))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace_store::{Setting, TraceHeader, TraceRecord};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn trace(labels: &[Option<bool>]) -> TraceSet {
        let records = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| TraceRecord {
                datapoint_id: format!("d{i}"),
                hidden_states: (1..=3).map(|layer| vec![(i * 10 + layer) as f32, -1.0]).collect(),
                output_logits: vec![],
                generated_token_ids: vec![],
                correct: l,
            })
            .collect();
        TraceSet::new(TraceHeader::new("m", Setting::Visual, 3, 2, 4, labels.len()), records)
    }

    #[test]
    fn extracts_the_requested_layer() {
        let t = trace(&[Some(true), Some(false)]);
        let f = extract_features(&t, 2).unwrap();
        assert_eq!(f.rows, vec![vec![2.0, -1.0], vec![12.0, -1.0]]);
        assert_eq!(f.labels, vec![false, true]);
        assert_eq!(f.stats.mean, vec![7.0, -1.0]);
        assert_eq!(f.stats.std, vec![5.0, 1.0]);
    }

    #[test]
    fn layer_bounds_and_missing_labels() {
        let t = trace(&[Some(true), None]);
        assert!(matches!(
            extract_features(&t, 0),
            Err(ProbeError::LayerOutOfRange { layer: 0, .. })
        ));
        assert!(matches!(
            extract_features(&t, 4),
            Err(ProbeError::LayerOutOfRange { .. })
        ));
        match extract_features(&t, 1) {
            Err(ProbeError::MissingLabels(ids)) => assert_eq!(ids, vec!["d1".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    fn gaussian(n: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let fail = i % 2 == 0;
            let row: Vec<f64> = (0..d)
                .map(|j| {
                    let shift = if j == 0 {
                        if fail {
                            1.5
                        } else {
                            -1.5
                        }
                    } else {
                        0.0
                    };
                    rng.sample::<f64, _>(StandardNormal) + shift
                })
                .collect();
            rows.push(row);
            labels.push(fail);
        }
        let ids = (0..n).map(|i| i.to_string()).collect();
        FeatureMatrix::new(DEFAULT_LAYER, rows, labels, ids).unwrap()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let f = gaussian(60, 5, 1);
        let rows: Vec<Vec<f64>> = f.rows.iter().map(|r| f.stats.apply(r)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let params: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, grad) = loss_and_gradient(&params, &rows, &f.labels, 0.05);
            let h = 1e-4;
            for k in 0..params.len() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus[k] += h;
                minus[k] -= h;
                let fd = (loss_and_gradient(&plus, &rows, &f.labels, 0.05).0
                    - loss_and_gradient(&minus, &rows, &f.labels, 0.05).0)
                    / (2.0 * h);
                let rel = (fd - grad[k]).abs() / grad[k].abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-4, "param {k}: fd {fd} vs analytic {}", grad[k]);
            }
        }
    }

    #[test]
    fn loss_never_increases() {
        let f = gaussian(200, 8, 3);
        let (probe, history) = train_probe_traced(&f, &ProbeConfig::default()).unwrap();
        assert!(history.windows(2).all(|w| w[1] <= w[0]));
        assert!(probe.meta.converged, "{:?}", probe.meta);
    }

    #[test]
    fn mirrored_data_has_zero_bias() {
        let base = gaussian(50, 4, 4);
        let mut rows = base.rows.clone();
        let mut labels = base.labels.clone();
        for (r, &l) in base.rows.iter().zip(&base.labels) {
            rows.push(r.iter().map(|v| -v).collect());
            labels.push(!l);
        }
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        let f = FeatureMatrix::new(DEFAULT_LAYER, rows, labels, ids).unwrap();
        let probe = train_probe(&f, &ProbeConfig::default()).unwrap();
        assert!(probe.bias.abs() < 1e-3, "bias {}", probe.bias);
    }

    #[test]
    fn heavy_regularization_predicts_prior() {
        let mut f = gaussian(90, 3, 5);
        // Imbalance the classes: 1/3 failures.
        for (i, l) in f.labels.iter_mut().enumerate() {
            *l = i % 3 == 0;
        }
        let cfg = ProbeConfig {
            lambda: 1e6,
            ..ProbeConfig::default()
        };
        let probe = train_probe(&f, &cfg).unwrap();
        assert!(probe.weights.iter().all(|w| w.abs() < 1e-5));
        let p = probe.predict(&f.rows[0]).unwrap();
        assert!((p - 1.0 / 3.0).abs() < 1e-4, "{p}");
    }

    #[test]
    fn single_class_rejected() {
        let mut f = gaussian(10, 2, 6);
        f.labels = vec![true; 10];
        assert!(matches!(
            train_probe(&f, &ProbeConfig::default()),
            Err(ProbeError::SingleClass { .. })
        ));
    }

    fn hand_probe(w: Vec<f64>, b: f64) -> Probe {
        let d = w.len();
        Probe {
            weights: w,
            bias: b,
            layer: 20,
            stats: Standardization::identity(d),
            meta: TrainingMeta {
                seed: 0,
                lambda: 0.0,
                iterations: 0,
                final_loss: 0.0,
                gradient_max_abs: 0.0,
                converged: true,
                warning: None,
            },
        }
    }

    #[test]
    fn predict_examples() {
        assert_eq!(hand_probe(vec![0.0, 0.0], 0.0).predict(&[3.0, -2.0]).unwrap(), 0.5);
        let ln3 = 3.0f64.ln();
        let p = hand_probe(vec![1.0, 0.0], 0.0);
        assert!((p.predict(&[ln3, 7.0]).unwrap() - 0.75).abs() < 1e-12);
        assert!((p.predict(&[-ln3, 7.0]).unwrap() - 0.25).abs() < 1e-12);
        assert!(matches!(p.predict(&[1.0]), Err(ProbeError::Dimension { .. })));
    }

    #[test]
    fn mirror_through_boundary_sums_to_one() {
        let p = hand_probe(vec![0.3, -1.2, 2.0], 0.0);
        let x = [0.7, 0.1, -0.4];
        let ww = dot(&p.weights, &p.weights);
        let k = 2.0 * dot(&p.weights, &x) / ww;
        let mirror: Vec<f64> = x.iter().zip(&p.weights).map(|(xi, wi)| xi - k * wi).collect();
        let s = p.predict(&x).unwrap() + p.predict(&mirror).unwrap();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn standardization_gives_affine_invariance() {
        let f = gaussian(120, 4, 7);
        let scale = [3.0, 0.01, 250.0, 1.0];
        let offset = [-10.0, 4.0, 0.5, 1e3];
        let rows: Vec<Vec<f64>> = f
            .rows
            .iter()
            .map(|r| r.iter().enumerate().map(|(j, v)| v * scale[j] + offset[j]).collect())
            .collect();
        let g = FeatureMatrix::new(f.layer, rows.clone(), f.labels.clone(), f.datapoint_ids.clone()).unwrap();
        let pa = train_probe(&f, &ProbeConfig::default()).unwrap();
        let pb = train_probe(&g, &ProbeConfig::default()).unwrap();
        for (ra, rb) in f.rows.iter().zip(&rows) {
            assert!((pa.predict(ra).unwrap() - pb.predict(rb).unwrap()).abs() < 1e-5);
        }
    }

    #[test]
    fn threshold_examples() {
        let t = learn_perplexity_threshold(&[1.1, 1.2, 5.0, 6.0], &[false, false, true, true]).unwrap();
        assert!((t.threshold - 3.1).abs() < 1e-12);
        assert_eq!(t.train_accuracy, 1.0);

        let all_fail = learn_perplexity_threshold(&[2.0, 3.0], &[true, true]).unwrap();
        assert_eq!(all_fail.threshold, f64::NEG_INFINITY);
        assert!(all_fail.warning.is_some());

        let none_fail = learn_perplexity_threshold(&[2.0, 3.0], &[false, false]).unwrap();
        assert_eq!(none_fail.threshold, f64::INFINITY);

        // Failures sit below successes in every adjacent pair.
        let vals: Vec<f64> = (1..=8).map(f64::from).collect();
        let labels: Vec<bool> = (0..8).map(|i| i % 2 == 0).collect();
        let t = learn_perplexity_threshold(&vals, &labels).unwrap();
        assert_eq!(t.train_accuracy, 0.5);
        assert_eq!(t.threshold, f64::NEG_INFINITY);
    }

    #[test]
    fn threshold_handles_ties_in_values() {
        let t = learn_perplexity_threshold(&[2.0, 2.0, 2.0, 9.0], &[false, true, false, true]).unwrap();
        assert_eq!(t.threshold, 5.5);
        assert_eq!(t.train_accuracy, 0.75);
    }

    #[test]
    fn threshold_json_keeps_infinities() {
        let t = PerplexityThreshold {
            threshold: f64::NEG_INFINITY,
            train_accuracy: 1.0,
            warning: None,
        };
        let s = serde_json::to_string(&t).unwrap();
        assert!(s.contains("\"-inf\""));
        let back: PerplexityThreshold = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn ensemble_examples() {
        assert!((ensemble_score(0.8, 0.4) - 0.6).abs() < 1e-12);
        assert_eq!(ensemble_score(0.5, 0.5), 0.5);
        let boundary = ensemble_score(1.0, 0.0);
        assert_eq!(boundary, 0.5);
        assert!(!is_flagged(boundary));
        assert_eq!(perplexity_score(3.0, 3.0), 0.5);
        assert_eq!(perplexity_score(3.0, f64::NEG_INFINITY), 1.0);
        assert_eq!(perplexity_score(3.0, f64::INFINITY), 0.0);
    }

    #[test]
    fn evaluate_examples() {
        let e = evaluate_classifier(&[true, false], &[true, false]).unwrap();
        assert_eq!(e.accuracy, 1.0);
        let e = evaluate_classifier(&[true; 4], &[true, true, true, false]).unwrap();
        assert_eq!(e.accuracy, 0.75);
        assert_eq!(e.base_rate, 0.75);
    }

    #[test]
    fn split_is_stratified_and_seeded() {
        let labels: Vec<bool> = (0..100).map(|i| i % 4 == 0).collect();
        let (tr, te) = stratified_split(&labels, 0.8, 11);
        assert_eq!(tr.len() + te.len(), 100);
        assert_eq!(tr.iter().filter(|&&i| labels[i]).count(), 20);
        assert_eq!(te.iter().filter(|&&i| labels[i]).count(), 5);
        assert_eq!(stratified_split(&labels, 0.8, 11), (tr, te));
    }
}
