//! Answer grading (two-way inclusion, exact match, sentence BLEU) and
//! per-token perplexity of generated answers.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("perplexity needs at least one generated token")]
    Empty,
    #[error("{logits} logit steps but {ids} token ids")]
    LengthMismatch { logits: usize, ids: usize },
    #[error("step {step}: token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { step: usize, id: u32, vocab: usize },
    #[error("step {step}: non-finite logit")]
    NonFinite { step: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Grading options. Matching is case-insensitive unless `case_sensitive`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradingConfig {
    pub case_sensitive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricResult {
    pub two_way_inclusion: bool,
    pub exact_match: bool,
    pub bleu: f64,
}

/// NFC, casefold, trim, collapse whitespace, drop trailing `.?!`.
pub fn normalize(text: &str) -> String {
    normalize_with(text, GradingConfig::default())
}

pub fn normalize_with(text: &str, config: GradingConfig) -> String {
    let nfc: String = text.nfc().collect();
    let folded = if config.case_sensitive { nfc } else { nfc.to_lowercase() };
    let mut collapsed = folded.split_whitespace().collect::<Vec<_>>().join(" ");
    while collapsed.ends_with(['.', '?', '!']) {
        collapsed.pop();
        let trimmed_len = collapsed.trim_end().len();
        collapsed.truncate(trimmed_len);
    }
    collapsed
}

pub fn two_way_inclusion(response: &str, answer: &str) -> bool {
    Grader::default().two_way_inclusion(response, answer)
}

pub fn exact_match(response: &str, answer: &str) -> bool {
    Grader::default().exact_match(response, answer)
}

pub fn bleu(response: &str, answer: &str) -> f64 {
    Grader::default().bleu(response, answer)
}

/// Grades responses under a fixed [`GradingConfig`]. An empty response or
/// answer (after normalization) is always graded incorrect.
#[derive(Debug, Clone, Copy, Default)]
pub struct Grader {
    pub config: GradingConfig,
}

impl Grader {
    pub fn new(config: GradingConfig) -> Self {
        Self { config }
    }

    fn pair(&self, r: &str, a: &str) -> Option<(String, String)> {
        let r = normalize_with(r, self.config);
        let a = normalize_with(a, self.config);
        (!r.is_empty() && !a.is_empty()).then_some((r, a))
    }

    pub fn two_way_inclusion(&self, response: &str, answer: &str) -> bool {
        self.pair(response, answer)
            .is_some_and(|(r, a)| a.contains(&r) || r.contains(&a))
    }

    pub fn exact_match(&self, response: &str, answer: &str) -> bool {
        self.pair(response, answer).is_some_and(|(r, a)| r == a)
    }

    /// Sentence BLEU of `response` against the single reference `answer`.
    ///
    /// Orders 1..=min(4, reference length) with uniform weights. Unigram
    /// precision is unsmoothed; higher orders use (matches + 1) / (total + 1).
    /// Brevity penalty is `exp(1 - ref_len / hyp_len)` when the hypothesis is
    /// shorter than the reference.
    pub fn bleu(&self, response: &str, answer: &str) -> f64 {
        let Some((r, a)) = self.pair(response, answer) else {
            return 0.0;
        };
        let hyp: Vec<&str> = r.split(' ').collect();
        let reference: Vec<&str> = a.split(' ').collect();
        let max_order = reference.len().min(4);

        let mut log_sum = 0.0;
        for n in 1..=max_order {
            let (matches, total) = clipped_matches(&hyp, &reference, n);
            let precision = if n == 1 {
                matches as f64 / total as f64
            } else {
                (matches as f64 + 1.0) / (total as f64 + 1.0)
            };
            if precision == 0.0 {
                return 0.0;
            }
            log_sum += precision.ln();
        }
        let (c, rl) = (hyp.len() as f64, reference.len() as f64);
        let brevity = if c >= rl { 1.0 } else { (1.0 - rl / c).exp() };
        brevity * (log_sum / max_order as f64).exp()
    }

    pub fn grade(&self, response: &str, answer: &str) -> MetricResult {
        MetricResult {
            two_way_inclusion: self.two_way_inclusion(response, answer),
            exact_match: self.exact_match(response, answer),
            bleu: self.bleu(response, answer),
        }
    }
}

fn ngram_counts<'a, 'b>(tokens: &'b [&'a str], n: usize) -> HashMap<&'b [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn clipped_matches(hyp: &[&str], reference: &[&str], n: usize) -> (usize, usize) {
    let total = hyp.len().saturating_sub(n - 1);
    let ref_counts = ngram_counts(reference, n);
    let matches = ngram_counts(hyp, n)
        .iter()
        .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, total)
}

/// `exp(-(1/T) sum_t log softmax(logits_t)[id_t])` over the generated tokens.
pub fn per_token_perplexity<S: AsRef<[f32]>>(step_logits: &[S], token_ids: &[u32]) -> Result<f64, MetricError> {
    if step_logits.len() != token_ids.len() {
        return Err(MetricError::LengthMismatch {
            logits: step_logits.len(),
            ids: token_ids.len(),
        });
    }
    if token_ids.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut total = 0.0;
    for (step, (logits, &id)) in step_logits.iter().zip(token_ids).enumerate() {
        let logits = logits.as_ref();
        if id as usize >= logits.len() {
            return Err(MetricError::TokenOutOfRange {
                step,
                id,
                vocab: logits.len(),
            });
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(MetricError::NonFinite { step });
        }
        total += log_softmax_at(logits, id as usize);
    }
    Ok((-total / token_ids.len() as f64).exp())
}

fn log_softmax_at(logits: &[f32], index: usize) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let sum: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
    logits[index] as f64 - max - sum.ln()
}

#[derive(Debug, Deserialize)]
struct GradeInput {
    datapoint_id: String,
    response: String,
    answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradedRow {
    pub datapoint_id: String,
    pub response: String,
    pub answer: String,
    pub inclusion: bool,
    pub exact: bool,
    pub bleu: f64,
}

/// Reads `datapoint_id,response,answer` CSV rows and grades each one.
pub fn grade_csv<R: Read>(input: R, grader: &Grader) -> Result<Vec<GradedRow>, MetricError> {
    let mut reader = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        let row: GradeInput = row?;
        let m = grader.grade(&row.response, &row.answer);
        rows.push(GradedRow {
            datapoint_id: row.datapoint_id,
            response: row.response,
            answer: row.answer,
            inclusion: m.two_way_inclusion,
            exact: m.exact_match,
            bleu: m.bleu,
        });
    }
    Ok(rows)
}

pub fn write_graded_csv<W: Write>(out: W, rows: &[GradedRow]) -> Result<(), MetricError> {
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("  Doctor  Fish. "), "doctor fish");
        assert_eq!(normalize("Paris"), "paris");
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("What?!"), "what");
        assert_eq!(normalize("e\u{0301}"), "\u{e9}");
    }

    #[test]
    fn case_sensitive_flag() {
        let g = Grader::new(GradingConfig { case_sensitive: true });
        assert!(!g.exact_match("Filo", "filo"));
        assert!(exact_match("Filo", "filo"));
    }

    #[test]
    fn inclusion_examples() {
        assert!(two_way_inclusion("the doctor fish", "doctor fish"));
        assert!(two_way_inclusion("paris", "paris"));
        assert!(!two_way_inclusion("salmon", "doctor fish"));
        assert!(!two_way_inclusion("", "doctor fish"));
        assert!(!two_way_inclusion("  ", ""));
    }

    #[test]
    fn exact_examples() {
        assert!(exact_match("Filo", "filo"));
        assert!(!exact_match("filo pastry", "filo"));
        assert!(!exact_match("", "x"));
        assert!(!exact_match("", ""));
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu("doctor fish", "Doctor fish."), 1.0);
        assert_eq!(bleu("salmon trout", "doctor fish"), 0.0);
        // p1 = 2/3, p2 = (1+1)/(2+1), no brevity penalty.
        assert_relative_eq!(bleu("filo pastry dessert", "filo pastry"), 2.0 / 3.0, epsilon = 1e-12);
        // Short hypothesis: p1 = 1, p2 = (0+1)/(0+1), bp = exp(1 - 2/1).
        assert_relative_eq!(bleu("filo", "filo pastry"), (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn perplexity_examples() {
        let uniform = vec![vec![0.0f32; 10]; 3];
        assert_relative_eq!(
            per_token_perplexity(&uniform, &[1, 4, 9]).unwrap(),
            10.0,
            epsilon = 1e-9
        );

        let mut sharp = vec![vec![0.0f32; 10]; 2];
        sharp[0][3] = 50.0;
        sharp[1][7] = 50.0;
        assert!((per_token_perplexity(&sharp, &[3, 7]).unwrap() - 1.0).abs() < 1e-6);

        // Probabilities 0.5 and 0.25 over |V| = 4.
        let steps = vec![vec![(3.0f32).ln(), 0.0, 0.0, 0.0], vec![0.0f32; 4]];
        let ppl = per_token_perplexity(&steps, &[0, 2]).unwrap();
        assert_relative_eq!(ppl, 8.0f64.sqrt(), epsilon = 1e-6);
    }

    #[test]
    fn perplexity_errors() {
        let none: Vec<Vec<f32>> = vec![];
        assert!(matches!(per_token_perplexity(&none, &[]), Err(MetricError::Empty)));
        assert!(matches!(
            per_token_perplexity(&[vec![0.0f32; 3]], &[3]),
            Err(MetricError::TokenOutOfRange { .. })
        ));
        assert!(matches!(
            per_token_perplexity(&[vec![f32::NAN, 0.0]], &[0]),
            Err(MetricError::NonFinite { step: 0 })
        ));
        assert!(matches!(
            per_token_perplexity(&[vec![0.0f32; 3]], &[0, 1]),
            Err(MetricError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn grade_csv_round() {
        let input = "datapoint_id,response,answer\nd1,The doctor fish,doctor fish\nd2,\"salmon, raw\",doctor fish\n";
        let rows = grade_csv(input.as_bytes(), &Grader::default()).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].inclusion && !rows[0].exact);
        assert!(!rows[1].inclusion);
        let mut out = Vec::new();
        write_graded_csv(&mut out, &rows).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("datapoint_id,response,answer,inclusion,exact,bleu\n"));
    }

    fn words() -> impl Strategy<Value = String> {
        proptest::collection::vec(prop_oneof!["a", "b", "c", "Fish", "the", "x."], 0..6).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn inclusion_is_symmetric(r in words(), a in words()) {
            prop_assert_eq!(two_way_inclusion(&r, &a), two_way_inclusion(&a, &r));
        }

        #[test]
        fn exact_implies_inclusion_and_full_bleu(r in words(), a in words()) {
            let b = bleu(&r, &a);
            prop_assert!((0.0..=1.0).contains(&b));
            if exact_match(&r, &a) {
                prop_assert!(two_way_inclusion(&r, &a));
                prop_assert_eq!(b, 1.0);
            }
        }

        #[test]
        fn perplexity_shift_invariant(
            raw in proptest::collection::vec(proptest::collection::vec(-320i32..320, 6), 1..4),
            shift in -20i32..20,
            seed in 0u32..6,
        ) {
            // Logits on a 1/64 grid keep the shifted values exact in f32.
            let logits: Vec<Vec<f32>> = raw.iter().map(|s| s.iter().map(|&v| v as f32 / 64.0).collect()).collect();
            let ids: Vec<u32> = (0..logits.len() as u32).map(|t| (t + seed) % 6).collect();
            let shifted: Vec<Vec<f32>> = logits.iter().map(|s| s.iter().map(|v| v + shift as f32).collect()).collect();
            let a = per_token_perplexity(&logits, &ids).unwrap();
            let b = per_token_perplexity(&shifted, &ids).unwrap();
            prop_assert!(a >= 1.0);
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }
}
