use std::collections::HashSet;
use std::fmt;

use serde::Serialize;

use super::{TraceHeader, TraceRecord, FORMAT_VERSION};

/// One broken invariant. `record` is `None` for header-level problems.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub record: Option<usize>,
    pub datapoint_id: Option<String>,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.record, &self.datapoint_id) {
            (Some(i), Some(id)) => write!(f, "record {i} ({id}) {}: {}", self.field, self.message),
            (Some(i), None) => write!(f, "record {i} {}: {}", self.field, self.message),
            _ => write!(f, "header {}: {}", self.field, self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Reports every invariant violation in a trace. Never fails: violations
/// are data.
pub fn validate_trace(header: &TraceHeader, records: &[TraceRecord]) -> ValidationReport {
    let mut out = Vec::new();
    let mut header_issue = |field: &str, message: String| {
        out.push(Violation {
            record: None,
            datapoint_id: None,
            field: field.into(),
            message,
        })
    };
    if header.format_version != FORMAT_VERSION {
        header_issue(
            "format_version",
            format!("unrecognized version {}", header.format_version),
        );
    }
    for (field, v) in [
        ("num_layers", header.num_layers),
        ("hidden_dim", header.hidden_dim),
        ("vocab_size", header.vocab_size),
    ] {
        if v == 0 {
            header_issue(field, "must be at least 1".into());
        }
    }
    if header.num_records != records.len() {
        header_issue(
            "num_records",
            format!("declares {} but {} records present", header.num_records, records.len()),
        );
    }

    let mut seen = HashSet::new();
    for (i, rec) in records.iter().enumerate() {
        let mut push = |field: String, message: String| {
            out.push(Violation {
                record: Some(i),
                datapoint_id: Some(rec.datapoint_id.clone()),
                field,
                message,
            })
        };
        if !seen.insert(rec.datapoint_id.as_str()) {
            push("datapoint_id".into(), "duplicate id".into());
        }
        if rec.hidden_states.len() != header.num_layers {
            push(
                "hidden_states".into(),
                format!("{} layers, expected {}", rec.hidden_states.len(), header.num_layers),
            );
        }
        for (l, layer) in rec.hidden_states.iter().enumerate() {
            let field = format!("hidden_states[layer {}]", l + 1);
            if layer.len() != header.hidden_dim {
                push(
                    field.clone(),
                    format!("{} values, expected {}", layer.len(), header.hidden_dim),
                );
            }
            if let Some(j) = layer.iter().position(|v| !v.is_finite()) {
                push(field, format!("non-finite value {} at index {j}", layer[j]));
            }
        }
        if rec.output_logits.len() != rec.generated_token_ids.len() {
            push(
                "output_logits".into(),
                format!(
                    "{} steps but {} generated tokens",
                    rec.output_logits.len(),
                    rec.generated_token_ids.len()
                ),
            );
        }
        for (t, step) in rec.output_logits.iter().enumerate() {
            let field = format!("output_logits[step {t}]");
            if step.len() != header.vocab_size {
                push(
                    field.clone(),
                    format!("{} logits, expected {}", step.len(), header.vocab_size),
                );
            }
            if let Some(j) = step.iter().position(|v| !v.is_finite()) {
                push(field, format!("non-finite logit {} at token {j}", step[j]));
            }
        }
        for (t, &id) in rec.generated_token_ids.iter().enumerate() {
            if id as usize >= header.vocab_size {
                push(
                    format!("generated_token_ids[{t}]"),
                    format!("token id {id} outside [0, {})", header.vocab_size),
                );
            }
        }
    }
    ValidationReport { violations: out }
}

#[cfg(test)]
mod tests {
    use super::super::Setting;
    use super::*;

    fn header(n: usize) -> TraceHeader {
        TraceHeader::new("m", Setting::Visual, 2, 3, 5, n)
    }

    fn record(id: &str) -> TraceRecord {
        TraceRecord {
            datapoint_id: id.into(),
            hidden_states: vec![vec![0.1, 0.2, 0.3]; 2],
            output_logits: vec![vec![0.0; 5]],
            generated_token_ids: vec![2],
            correct: None,
        }
    }

    #[test]
    fn valid_trace_has_empty_report() {
        let report = validate_trace(&header(2), &[record("a"), record("b")]);
        assert!(report.is_valid(), "{:?}", report);
    }

    #[test]
    fn nan_hidden_value_names_record_and_layer() {
        let mut r = record("b");
        r.hidden_states[1][2] = f32::NAN;
        let report = validate_trace(&header(2), &[record("a"), r]);
        assert_eq!(report.len(), 1);
        let v = &report.violations[0];
        assert_eq!(v.record, Some(1));
        assert_eq!(v.field, "hidden_states[layer 2]");
    }

    #[test]
    fn token_id_equal_to_vocab_is_out_of_range() {
        let mut r = record("a");
        r.generated_token_ids[0] = 5;
        let report = validate_trace(&header(1), &[r]);
        assert_eq!(report.len(), 1);
        assert!(report.violations[0].message.contains("outside"));
    }

    #[test]
    fn reports_every_violation() {
        let mut r = record("a");
        r.hidden_states.pop();
        r.output_logits.push(vec![f32::INFINITY; 4]);
        let mut h = header(3);
        h.hidden_dim = 0;
        let report = validate_trace(&h, &[r, record("a")]);
        let fields: Vec<_> = report.violations.iter().map(|v| v.field.as_str()).collect();
        assert!(fields.contains(&"hidden_dim"));
        assert!(fields.contains(&"num_records"));
        assert!(fields.contains(&"hidden_states"));
        assert!(fields.contains(&"output_logits"));
        assert!(fields.contains(&"output_logits[step 1]"));
        assert!(fields.contains(&"datapoint_id"));
    }
}
