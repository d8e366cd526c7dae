//! Answer/abstain decisions from failure scores, coverage and risk, and the
//! out-of-distribution protocol (fit detectors on some datasets, score a
//! held-out one without retraining).

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{per_token_perplexity, MetricError};
use crate::probe::{
    ensemble_score, layer_rows, learn_perplexity_threshold, perplexity_score, train_probe, FeatureMatrix,
    PerplexityThreshold, Probe, ProbeConfig, ProbeError,
};
use crate::trace_store::TraceSet;

/// Default abstention threshold on failure scores.
pub const DEFAULT_ABSTAIN_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("decision {0} answers but carries no correctness")]
    MissingCorrectness(String),
    #[error("no decisions to report on")]
    Empty,
    #[error("feature dimension {got} does not match {expected} ({set})")]
    Dimension { set: String, got: usize, expected: usize },
    #[error("need at least one training set")]
    NoTrainingSets,
    #[error("{0} labels for {1} scored datapoints")]
    LabelCount(usize, usize),
    #[error("record {0}: {1}")]
    Perplexity(String, MetricError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Answer,
    Abstain,
}

/// Abstain iff the failure score is strictly above `threshold`.
pub fn decide(score: f64, threshold: f64) -> Action {
    if score > threshold {
        Action::Abstain
    } else {
        Action::Answer
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub datapoint_id: String,
    pub action: Action,
    pub score: f64,
    /// Whether the model's answer was correct. Only read for `Answer`.
    pub correct: Option<bool>,
}

/// Coverage and risk in percent, rounded half-up to two decimals.
/// `risk` is `None` when nothing was answered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectiveReport {
    pub coverage: f64,
    pub risk: Option<f64>,
    pub answered: usize,
    pub correct: usize,
    pub total: usize,
}

impl SelectiveReport {
    pub fn from_counts(answered: usize, correct: usize, total: usize) -> Self {
        debug_assert!(correct <= answered && answered <= total && total > 0);
        Self {
            coverage: percent_2dp(answered as u128, total as u128),
            risk: (answered > 0).then(|| percent_2dp((answered - correct) as u128, answered as u128)),
            answered,
            correct,
            total,
        }
    }
}

/// `100 * num / den` rounded half-up at two decimals, computed on integers
/// so ties round the same way on every platform.
pub fn percent_2dp(num: u128, den: u128) -> f64 {
    let cents = (num * 20_000 + den) / (2 * den);
    cents as f64 / 100.0
}

pub fn format_percent(v: Option<f64>) -> String {
    v.map_or_else(|| "null".to_string(), |p| format!("{p:.2}"))
}

pub fn coverage_risk(decisions: &[Decision]) -> Result<SelectiveReport, SelectError> {
    if decisions.is_empty() {
        return Err(SelectError::Empty);
    }
    let mut answered = 0;
    let mut correct = 0;
    for d in decisions {
        if d.action == Action::Answer {
            answered += 1;
            match d.correct {
                Some(true) => correct += 1,
                Some(false) => {}
                None => return Err(SelectError::MissingCorrectness(d.datapoint_id.clone())),
            }
        }
    }
    Ok(SelectiveReport::from_counts(answered, correct, decisions.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Perplexity,
    Probe,
    Ensemble,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Perplexity, Method::Probe, Method::Ensemble];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Perplexity => "perplexity",
            Method::Probe => "probe",
            Method::Ensemble => "ensemble",
        })
    }
}

/// Features, answer perplexities and failure labels for one dataset.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub name: String,
    pub features: FeatureMatrix,
    pub perplexities: Vec<f64>,
}

/// What a scorer may see of a dataset: no labels.
#[derive(Debug, Clone)]
pub struct ScoringInputs {
    pub name: String,
    pub datapoint_ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub perplexities: Vec<f64>,
}

/// Failure labels withheld from scoring; only [`MethodScores::report`]
/// reads them.
#[derive(Debug, Clone)]
pub struct HeldOutLabels(Vec<bool>);

impl HeldOutLabels {
    pub fn new(failures: Vec<bool>) -> Self {
        Self(failures)
    }
}

impl LabeledSet {
    pub fn new(name: impl Into<String>, features: FeatureMatrix, perplexities: Vec<f64>) -> Result<Self, SelectError> {
        if perplexities.len() != features.len() {
            return Err(SelectError::LabelCount(perplexities.len(), features.len()));
        }
        Ok(Self {
            name: name.into(),
            features,
            perplexities,
        })
    }

    /// Builds from a labeled trace: features at `layer`, perplexity of each
    /// record's generated answer.
    pub fn from_trace(name: impl Into<String>, trace: &TraceSet, layer: usize) -> Result<Self, SelectError> {
        let features = crate::probe::extract_features(trace, layer)?;
        let perplexities = trace_perplexities(trace)?;
        Self::new(name, features, perplexities)
    }

    pub fn split_labels(self) -> (ScoringInputs, HeldOutLabels) {
        let FeatureMatrix {
            rows,
            labels,
            datapoint_ids,
            ..
        } = self.features;
        (
            ScoringInputs {
                name: self.name,
                datapoint_ids,
                rows,
                perplexities: self.perplexities,
            },
            HeldOutLabels(labels),
        )
    }
}

impl ScoringInputs {
    /// Scoring inputs straight from a trace; labels in the trace are ignored.
    pub fn from_trace(name: impl Into<String>, trace: &TraceSet, layer: usize) -> Result<Self, SelectError> {
        Ok(Self {
            name: name.into(),
            datapoint_ids: trace.records.iter().map(|r| r.datapoint_id.clone()).collect(),
            rows: layer_rows(trace, layer)?,
            perplexities: trace_perplexities(trace)?,
        })
    }
}

pub fn trace_perplexities(trace: &TraceSet) -> Result<Vec<f64>, SelectError> {
    trace
        .records
        .iter()
        .map(|r| {
            per_token_perplexity(&r.output_logits, &r.generated_token_ids)
                .map_err(|e| SelectError::Perplexity(r.datapoint_id.clone(), e))
        })
        .collect()
}

/// A probe and a perplexity threshold fitted on the same training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detectors {
    pub probe: Probe,
    pub threshold: PerplexityThreshold,
}

impl Detectors {
    pub fn fit(train: &[&LabeledSet], config: &ProbeConfig) -> Result<Self, SelectError> {
        let first = train.first().ok_or(SelectError::NoTrainingSets)?;
        let dim = first.features.dim();
        for set in train {
            if set.features.dim() != dim {
                return Err(SelectError::Dimension {
                    set: set.name.clone(),
                    got: set.features.dim(),
                    expected: dim,
                });
            }
        }
        let features = FeatureMatrix::concat(&train.iter().map(|s| &s.features).collect::<Vec<_>>())?;
        let perplexities: Vec<f64> = train.iter().flat_map(|s| s.perplexities.iter().copied()).collect();
        let probe = train_probe(&features, config)?;
        let threshold = learn_perplexity_threshold(&perplexities, &features.labels)?;
        Ok(Self { probe, threshold })
    }

    pub fn score(&self, inputs: &ScoringInputs) -> Result<MethodScores, SelectError> {
        let mut probe = Vec::with_capacity(inputs.rows.len());
        for row in &inputs.rows {
            if row.len() != self.probe.dim() {
                return Err(SelectError::Dimension {
                    set: inputs.name.clone(),
                    got: row.len(),
                    expected: self.probe.dim(),
                });
            }
            probe.push(self.probe.predict(row)?);
        }
        let perplexity: Vec<f64> = inputs
            .perplexities
            .iter()
            .map(|&p| perplexity_score(p, self.threshold.threshold))
            .collect();
        let ensemble = probe
            .iter()
            .zip(&perplexity)
            .map(|(&a, &b)| ensemble_score(a, b))
            .collect();
        Ok(MethodScores {
            name: inputs.name.clone(),
            datapoint_ids: inputs.datapoint_ids.clone(),
            probe,
            perplexity,
            ensemble,
        })
    }
}

/// Failure scores of every method for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodScores {
    pub name: String,
    pub datapoint_ids: Vec<String>,
    pub probe: Vec<f64>,
    pub perplexity: Vec<f64>,
    pub ensemble: Vec<f64>,
}

impl MethodScores {
    pub fn scores(&self, method: Method) -> &[f64] {
        match method {
            Method::Perplexity => &self.perplexity,
            Method::Probe => &self.probe,
            Method::Ensemble => &self.ensemble,
        }
    }

    pub fn decisions(
        &self,
        method: Method,
        threshold: f64,
        labels: &HeldOutLabels,
    ) -> Result<Vec<Decision>, SelectError> {
        if labels.0.len() != self.datapoint_ids.len() {
            return Err(SelectError::LabelCount(labels.0.len(), self.datapoint_ids.len()));
        }
        Ok(self
            .scores(method)
            .iter()
            .zip(&self.datapoint_ids)
            .zip(&labels.0)
            .map(|((&score, id), &failure)| Decision {
                datapoint_id: id.clone(),
                action: decide(score, threshold),
                score,
                correct: Some(!failure),
            })
            .collect())
    }

    pub fn report(&self, labels: &HeldOutLabels, threshold: f64) -> Result<DatasetReport, SelectError> {
        let mut rows = Vec::with_capacity(3);
        for method in Method::ALL {
            let decisions = self.decisions(method, threshold, labels)?;
            let hits = decisions
                .iter()
                .filter(|d| (d.action == Action::Abstain) == !d.correct.unwrap_or(true))
                .count();
            rows.push(MethodReport {
                method,
                report: coverage_risk(&decisions)?,
                detection_accuracy: hits as f64 / decisions.len() as f64,
            });
        }
        Ok(DatasetReport {
            dataset: self.name.clone(),
            threshold,
            methods: rows,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodReport {
    pub method: Method,
    #[serde(flatten)]
    pub report: SelectiveReport,
    /// Fraction of datapoints where abstaining coincided with failure.
    pub detection_accuracy: f64,
}

/// One row of the method x (coverage, risk) summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetReport {
    pub dataset: String,
    pub threshold: f64,
    pub methods: Vec<MethodReport>,
}

impl DatasetReport {
    pub fn method(&self, method: Method) -> &MethodReport {
        self.methods
            .iter()
            .find(|m| m.method == method)
            .expect("every method reported")
    }

    /// Relative change in percent from the perplexity baseline to the
    /// ensemble: (coverage, risk).
    pub fn delta(&self) -> (Option<f64>, Option<f64>) {
        let base = self.method(Method::Perplexity).report;
        let ens = self.method(Method::Ensemble).report;
        let rel = |from: f64, to: f64| (from != 0.0).then(|| (to - from) / from * 100.0);
        (
            rel(base.coverage, ens.coverage),
            base.risk.zip(ens.risk).and_then(|(a, b)| rel(a, b)),
        )
    }
}

/// Fits on the concatenated training sets, freezes, then scores the
/// held-out set. Held-out labels are split off before scoring and only used
/// to grade the decisions.
pub fn ood_protocol(
    train: &[&LabeledSet],
    heldout: LabeledSet,
    config: &ProbeConfig,
    abstain_threshold: f64,
) -> Result<(Detectors, DatasetReport), SelectError> {
    let detectors = Detectors::fit(train, config)?;
    let (inputs, labels) = heldout.split_labels();
    let scores = detectors.score(&inputs)?;
    let report = scores.report(&labels, abstain_threshold)?;
    Ok((detectors, report))
}

impl HeldOutLabels {
    /// Failure labels of a graded trace.
    pub fn from_trace(trace: &TraceSet) -> Result<Self, SelectError> {
        trace
            .records
            .iter()
            .map(|r| {
                r.is_failure()
                    .ok_or_else(|| SelectError::MissingCorrectness(r.datapoint_id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Self)
    }
}

/// Decisions of each method, in [`Method::ALL`] order.
pub type MethodDecisions = Vec<(Method, Vec<Decision>)>;

/// Scores a graded trace with frozen detectors and grades the decisions of
/// every method.
pub fn evaluate_trace(
    detectors: &Detectors,
    name: &str,
    trace: &TraceSet,
    abstain_threshold: f64,
) -> Result<(DatasetReport, MethodDecisions), SelectError> {
    let inputs = ScoringInputs::from_trace(name, trace, detectors.probe.layer)?;
    let scores = detectors.score(&inputs)?;
    let labels = HeldOutLabels::from_trace(trace)?;
    let decisions = Method::ALL
        .iter()
        .map(|&m| Ok((m, scores.decisions(m, abstain_threshold, &labels)?)))
        .collect::<Result<Vec<_>, SelectError>>()?;
    Ok((scores.report(&labels, abstain_threshold)?, decisions))
}

const SUMMARY_HEADER: [&str; 9] = [
    "dataset",
    "perplexity_coverage",
    "perplexity_risk",
    "probe_coverage",
    "probe_risk",
    "ensemble_coverage",
    "ensemble_risk",
    "delta_coverage_pct",
    "delta_risk_pct",
];

fn summary_cells(r: &DatasetReport) -> Vec<String> {
    let mut cells = vec![r.dataset.clone()];
    for m in Method::ALL {
        let rep = r.method(m).report;
        cells.push(format!("{:.2}", rep.coverage));
        cells.push(format_percent(rep.risk));
    }
    let (dc, dr) = r.delta();
    let signed = |v: Option<f64>| v.map_or("null".into(), |x| format!("{x:+.2}"));
    cells.push(signed(dc));
    cells.push(signed(dr));
    cells
}

/// Method x (coverage, risk) table, one row per dataset.
pub fn write_summary_csv<W: Write>(out: W, reports: &[DatasetReport]) -> Result<(), SelectError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for r in reports {
        w.write_record(summary_cells(r))?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width rendering of the same table for terminals.
pub fn render_summary(reports: &[DatasetReport]) -> String {
    let mut s = format!(
        "{:<12} {:>10} {:>8} {:>10} {:>8} {:>10} {:>8} {:>10} {:>8}\n",
        "", "Perplexity", "", "Probe", "", "Ensemble", "", "Delta(%)", ""
    );
    s.push_str(&format!(
        "{:<12} {:>10} {:>8} {:>10} {:>8} {:>10} {:>8} {:>10} {:>8}\n",
        "Dataset", "Coverage", "Risk", "Coverage", "Risk", "Coverage", "Risk", "Coverage", "Risk"
    ));
    for r in reports {
        let c = summary_cells(r);
        s.push_str(&format!(
            "{:<12} {:>10} {:>8} {:>10} {:>8} {:>10} {:>8} {:>10} {:>8}\n",
            c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7], c[8]
        ));
    }
    s
}

/// `method,coverage,risk,answered,correct,total,detection_accuracy`, one
/// row per method.
pub fn write_report_csv<W: Write>(out: W, report: &DatasetReport) -> Result<(), SelectError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method",
        "coverage",
        "risk",
        "answered",
        "correct",
        "total",
        "detection_accuracy",
    ])?;
    for m in &report.methods {
        let r = m.report;
        w.write_record([
            m.method.to_string(),
            format!("{:.2}", r.coverage),
            format_percent(r.risk),
            r.answered.to_string(),
            r.correct.to_string(),
            r.total.to_string(),
            m.detection_accuracy.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `datapoint_id,method,action,score,correct`.
pub fn write_decisions_csv<W: Write>(out: W, decisions: &[(Method, Vec<Decision>)]) -> Result<(), SelectError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["datapoint_id", "method", "action", "score", "correct"])?;
    for (method, ds) in decisions {
        for d in ds {
            let action = match d.action {
                Action::Answer => "answer",
                Action::Abstain => "abstain",
            };
            let correct = d.correct.map_or(String::new(), |c| c.to_string());
            w.write_record([
                d.datapoint_id.as_str(),
                &method.to_string(),
                action,
                &d.score.to_string(),
                &correct,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn decision(i: usize, action: Action, correct: Option<bool>) -> Decision {
        Decision {
            datapoint_id: format!("d{i}"),
            action,
            score: 0.0,
            correct,
        }
    }

    #[test]
    fn decide_examples() {
        assert_eq!(decide(0.6, 0.5), Action::Abstain);
        assert_eq!(decide(0.5, 0.5), Action::Answer);
        assert_eq!(decide(0.1, DEFAULT_ABSTAIN_THRESHOLD), Action::Answer);
    }

    #[test]
    fn six_of_ten_answered() {
        let mut ds: Vec<Decision> = (0..4).map(|i| decision(i, Action::Abstain, None)).collect();
        ds.extend((4..8).map(|i| decision(i, Action::Answer, Some(true))));
        ds.extend((8..10).map(|i| decision(i, Action::Answer, Some(false))));
        let r = coverage_risk(&ds).unwrap();
        assert_eq!(r.coverage, 60.0);
        assert_eq!(r.risk, Some(33.33));
        assert_eq!(format_percent(Some(r.coverage)), "60.00");
    }

    #[test]
    fn all_abstain_has_null_risk() {
        let ds: Vec<Decision> = (0..3).map(|i| decision(i, Action::Abstain, None)).collect();
        let r = coverage_risk(&ds).unwrap();
        assert_eq!(r.coverage, 0.0);
        assert_eq!(r.risk, None);
        assert!(serde_json::to_string(&r).unwrap().contains("\"risk\":null"));
    }

    #[test]
    fn answer_without_correctness_is_error() {
        let ds = vec![decision(0, Action::Answer, None)];
        assert!(matches!(coverage_risk(&ds), Err(SelectError::MissingCorrectness(_))));
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(percent_2dp(1, 3), 33.33);
        assert_eq!(percent_2dp(2, 3), 66.67);
        // 1/8 = 12.5%; 1/80000 = 0.00125% -> 0.00; 1/800 = 0.125% -> 0.13
        assert_eq!(percent_2dp(1, 8), 12.5);
        assert_eq!(percent_2dp(1, 800), 0.13);
    }

    #[test]
    fn delta_is_relative() {
        let mk = |m, cov: (usize, usize, usize)| MethodReport {
            method: m,
            report: SelectiveReport::from_counts(cov.0, cov.1, cov.2),
            detection_accuracy: 0.0,
        };
        let r = DatasetReport {
            dataset: "x".into(),
            threshold: 0.5,
            methods: vec![
                mk(Method::Perplexity, (40, 30, 100)),
                mk(Method::Probe, (50, 30, 100)),
                mk(Method::Ensemble, (50, 40, 100)),
            ],
        };
        let (dc, dr) = r.delta();
        assert!((dc.unwrap() - 25.0).abs() < 1e-9);
        assert!((dr.unwrap() - (20.0 - 25.0) / 25.0 * 100.0).abs() < 1e-9);
        let text = render_summary(&[r]);
        assert!(text.contains("+25.00"));
    }

    proptest! {
        #[test]
        fn raising_threshold_never_lowers_coverage(
            scores in proptest::collection::vec(0.0f64..1.0, 1..200),
            t1 in 0.0f64..1.0,
            dt in 0.0f64..0.5,
        ) {
            let cover = |t: f64| scores.iter().filter(|&&s| decide(s, t) == Action::Answer).count();
            prop_assert!(cover(t1 + dt) >= cover(t1));
        }
    }
}
