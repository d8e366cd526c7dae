//! Logit-lens next-token distributions per layer, Visual vs FullInfo cosine
//! trajectories, and per-class aggregation of layerwise curves.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace_store::{pair_traces, PairingError, TraceRecord, TraceSet, Unembedding};

#[derive(Debug, Error)]
pub enum LensError {
    #[error("hidden state has {got} values, unembedding expects {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("hidden state contains a non-finite value")]
    NonFinite,
    #[error("target token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("record {0} has no target token")]
    NoTarget(String),
    #[error("records differ: {0}")]
    Mismatch(String),
    #[error("zero-norm hidden state at layer {layer} of {datapoint_id}; cosine similarity undefined")]
    ZeroNorm { datapoint_id: String, layer: usize },
    #[error("no {0} trajectories to aggregate")]
    MissingClass(Outcome),
    #[error("trajectory lengths differ: {0} vs {1}")]
    Length(usize, usize),
    #[error(transparent)]
    Pairing(#[from] PairingError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Linking outcome of one datapoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
}

impl Outcome {
    pub fn from_correct(correct: bool) -> Self {
        if correct {
            Outcome::Success
        } else {
            Outcome::Failure
        }
    }
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Outcome::Success => "success",
            Outcome::Failure => "failure",
        })
    }
}

/// Optional normalization applied to a hidden state before unembedding,
/// for extractors that export the model's final norm parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FinalNorm {
    Rms { weight: Vec<f32>, eps: f64 },
    Layer { weight: Vec<f32>, bias: Vec<f32>, eps: f64 },
}

impl FinalNorm {
    fn apply(&self, h: &[f64]) -> Vec<f64> {
        let n = h.len() as f64;
        match self {
            FinalNorm::Rms { weight, eps } => {
                let rms = (h.iter().map(|x| x * x).sum::<f64>() / n + eps).sqrt();
                h.iter().zip(weight).map(|(x, &w)| x / rms * w as f64).collect()
            }
            FinalNorm::Layer { weight, bias, eps } => {
                let mean = h.iter().sum::<f64>() / n;
                let var = h.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                let sd = (var + eps).sqrt();
                h.iter()
                    .zip(weight.iter().zip(bias))
                    .map(|(x, (&w, &b))| (x - mean) / sd * w as f64 + b as f64)
                    .collect()
            }
        }
    }

    fn dim(&self) -> usize {
        match self {
            FinalNorm::Rms { weight, .. } | FinalNorm::Layer { weight, .. } => weight.len(),
        }
    }
}

/// Next-token distribution read off one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDistribution {
    /// 1-based layer index.
    pub layer: usize,
    pub probabilities: Vec<f64>,
}

/// Projects hidden states through an unembedding, optionally after a final
/// norm.
#[derive(Debug, Clone, Copy)]
pub struct LogitLens<'a> {
    unembedding: &'a Unembedding,
    norm: Option<&'a FinalNorm>,
}

impl<'a> LogitLens<'a> {
    pub fn new(unembedding: &'a Unembedding) -> Self {
        Self {
            unembedding,
            norm: None,
        }
    }

    pub fn with_norm(mut self, norm: &'a FinalNorm) -> Self {
        self.norm = Some(norm);
        self
    }

    /// `softmax(U h)` with max subtraction.
    pub fn distribution(&self, h: &[f32]) -> Result<Vec<f64>, LensError> {
        let expected = self.unembedding.hidden_dim();
        if h.len() != expected {
            return Err(LensError::Dimension { got: h.len(), expected });
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(LensError::NonFinite);
        }
        let mut x: Vec<f64> = h.iter().map(|&v| v as f64).collect();
        if let Some(norm) = self.norm {
            if norm.dim() != expected {
                return Err(LensError::Dimension {
                    got: norm.dim(),
                    expected,
                });
            }
            x = norm.apply(&x);
        }
        Ok(softmax(&self.unembedding.logits(&x)))
    }

    pub fn layer_distributions(&self, record: &TraceRecord) -> Result<Vec<LayerDistribution>, LensError> {
        record
            .hidden_states
            .iter()
            .enumerate()
            .map(|(i, h)| {
                Ok(LayerDistribution {
                    layer: i + 1,
                    probabilities: self.distribution(h)?,
                })
            })
            .collect()
    }

    /// Probability of `target` at each layer, layer 1 first.
    pub fn token_trajectory(&self, record: &TraceRecord, target: u32) -> Result<Vec<f64>, LensError> {
        let vocab = self.unembedding.vocab_size();
        if target as usize >= vocab {
            return Err(LensError::TokenOutOfRange { token: target, vocab });
        }
        record
            .hidden_states
            .iter()
            .map(|h| Ok(self.distribution(h)?[target as usize]))
            .collect()
    }
}

pub fn logit_lens(h: &[f32], unembedding: &Unembedding) -> Result<Vec<f64>, LensError> {
    LogitLens::new(unembedding).distribution(h)
}

pub fn token_probability_trajectory(
    record: &TraceRecord,
    unembedding: &Unembedding,
    target: u32,
) -> Result<Vec<f64>, LensError> {
    LogitLens::new(unembedding).token_trajectory(record, target)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Layerwise cosine similarity between the Visual and FullInfo states of the
/// same datapoint.
pub fn cosine_trajectory(visual: &TraceRecord, fullinfo: &TraceRecord) -> Result<Vec<f64>, LensError> {
    if visual.datapoint_id != fullinfo.datapoint_id {
        return Err(LensError::Mismatch(format!(
            "datapoint {} vs {}",
            visual.datapoint_id, fullinfo.datapoint_id
        )));
    }
    if visual.hidden_states.len() != fullinfo.hidden_states.len() {
        return Err(LensError::Mismatch(format!(
            "{} vs {} layers",
            visual.hidden_states.len(),
            fullinfo.hidden_states.len()
        )));
    }
    visual
        .hidden_states
        .iter()
        .zip(&fullinfo.hidden_states)
        .enumerate()
        .map(|(i, (h, g))| {
            if h.len() != g.len() {
                return Err(LensError::Mismatch(format!(
                    "layer {} widths {} vs {}",
                    i + 1,
                    h.len(),
                    g.len()
                )));
            }
            let (mut dot, mut nh, mut ng) = (0.0f64, 0.0f64, 0.0f64);
            for (&a, &b) in h.iter().zip(g) {
                let (a, b) = (a as f64, b as f64);
                dot += a * b;
                nh += a * a;
                ng += b * b;
            }
            if nh == 0.0 || ng == 0.0 {
                return Err(LensError::ZeroNorm {
                    datapoint_id: visual.datapoint_id.clone(),
                    layer: i + 1,
                });
            }
            Ok((dot / (nh.sqrt() * ng.sqrt())).clamp(-1.0, 1.0))
        })
        .collect()
}

/// Layerwise values for one datapoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBundle {
    pub datapoint_id: String,
    pub values: Vec<f64>,
    pub label: Option<Outcome>,
}

/// Which token's probability to follow across layers.
#[derive(Debug, Clone, Default)]
pub enum TargetToken {
    /// The first token the model actually generated.
    #[default]
    FirstGenerated,
    /// Per-datapoint gold token ids (for example the correct option letter).
    Gold(HashMap<String, u32>),
}

impl TargetToken {
    fn resolve(&self, record: &TraceRecord) -> Result<u32, LensError> {
        match self {
            TargetToken::FirstGenerated => record.first_generated(),
            TargetToken::Gold(map) => map.get(&record.datapoint_id).copied(),
        }
        .ok_or_else(|| LensError::NoTarget(record.datapoint_id.clone()))
    }
}

/// Probability trajectories for every record of a trace, in record order.
pub fn probability_trajectories(
    trace: &TraceSet,
    lens: &LogitLens<'_>,
    target: &TargetToken,
) -> Result<Vec<TrajectoryBundle>, LensError> {
    trace
        .records
        .par_iter()
        .map(|rec| {
            let token = target.resolve(rec)?;
            Ok(TrajectoryBundle {
                datapoint_id: rec.datapoint_id.clone(),
                values: lens.token_trajectory(rec, token)?,
                label: rec.correct.map(Outcome::from_correct),
            })
        })
        .collect()
}

/// Cosine trajectories for every Visual record against its FullInfo pair.
/// Labels come from the Visual trace.
pub fn cosine_trajectories(visual: &TraceSet, fullinfo: &TraceSet) -> Result<Vec<TrajectoryBundle>, LensError> {
    let pairs = pair_traces(visual, fullinfo)?;
    pairs
        .par_iter()
        .map(|&(i, j)| {
            let v = &visual.records[i];
            Ok(TrajectoryBundle {
                datapoint_id: v.datapoint_id.clone(),
                values: cosine_trajectory(v, &fullinfo.records[j])?,
                label: v.correct.map(Outcome::from_correct),
            })
        })
        .collect()
}

/// Mean and standard error per layer for one class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassCurve {
    pub count: usize,
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
}

impl ClassCurve {
    /// First 1-based layer whose mean strictly exceeds `level`.
    pub fn first_layer_above(&self, level: f64) -> Option<usize> {
        self.mean.iter().position(|&m| m > level).map(|i| i + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelAggregate {
    pub success: ClassCurve,
    pub failure: ClassCurve,
}

/// Per-class mean and standard error at every layer. Unlabeled bundles are
/// skipped. Values are summed in sorted order so the result does not depend
/// on bundle order.
pub fn aggregate_by_label(bundles: &[TrajectoryBundle]) -> Result<LabelAggregate, LensError> {
    let curve = |outcome: Outcome| -> Result<ClassCurve, LensError> {
        let members: Vec<&[f64]> = bundles
            .iter()
            .filter(|b| b.label == Some(outcome))
            .map(|b| b.values.as_slice())
            .collect();
        let first = members.first().ok_or(LensError::MissingClass(outcome))?;
        let layers = first.len();
        if let Some(bad) = members.iter().find(|m| m.len() != layers) {
            return Err(LensError::Length(layers, bad.len()));
        }
        let n = members.len() as f64;
        let mut mean = Vec::with_capacity(layers);
        let mut std_err = Vec::with_capacity(layers);
        let mut column = Vec::with_capacity(members.len());
        for l in 0..layers {
            column.clear();
            column.extend(members.iter().map(|m| m[l]));
            column.sort_by(f64::total_cmp);
            let mu = column.iter().sum::<f64>() / n;
            let se = if members.len() > 1 {
                let mut dev: Vec<f64> = column.iter().map(|v| (v - mu).powi(2)).collect();
                dev.sort_by(f64::total_cmp);
                (dev.iter().sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
            } else {
                0.0
            };
            mean.push(mu);
            std_err.push(se);
        }
        Ok(ClassCurve {
            count: members.len(),
            mean,
            std_err,
        })
    };
    let success = curve(Outcome::Success)?;
    let failure = curve(Outcome::Failure)?;
    if success.mean.len() != failure.mean.len() {
        return Err(LensError::Length(success.mean.len(), failure.mean.len()));
    }
    Ok(LabelAggregate { success, failure })
}

/// Long-format table: `datapoint_id,label,layer,value`.
pub fn write_trajectory_csv<W: Write>(out: W, bundles: &[TrajectoryBundle]) -> Result<(), LensError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["datapoint_id", "label", "layer", "value"])?;
    for b in bundles {
        let label = b.label.map_or("unknown".to_string(), |l| l.to_string());
        for (i, v) in b.values.iter().enumerate() {
            w.write_record([&b.datapoint_id, &label, &(i + 1).to_string(), &v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `layer,success_mean,success_se,failure_mean,failure_se`.
pub fn write_mean_curve_csv<W: Write>(out: W, agg: &LabelAggregate) -> Result<(), LensError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "success_mean", "success_se", "failure_mean", "failure_se"])?;
    for l in 0..agg.success.mean.len() {
        w.write_record([
            (l + 1).to_string(),
            agg.success.mean[l].to_string(),
            agg.success.std_err[l].to_string(),
            agg.failure.mean[l].to_string(),
            agg.failure.std_err[l].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
