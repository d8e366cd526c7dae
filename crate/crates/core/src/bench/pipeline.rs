//! End-to-end construction from entity articles to a QA dataset plus an
//! audit of every rejected pair.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::client::{LmClient, TemplateId};
use super::parse::{parse_answer, parse_judgment, parse_qa_pairs, Judgment};
use super::{
    filter_qa_logged, make_visual_reference, prompts, split_article, BenchError, FilterStep, QADatapoint, QaPair,
    QaRule, Source, Verdict, DEFAULT_CATEGORY_NOUN,
};
use crate::metrics::{normalize, two_way_inclusion};

/// One article-dump line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Article {
    pub entity: String,
    pub text: String,
    #[serde(default)]
    pub images: Vec<String>,
    /// Overrides the build's category noun for this entity.
    #[serde(default)]
    pub category: Option<String>,
}

/// A QA pair generated directly for an entity rather than from an article.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectQa {
    pub entity: String,
    pub question: String,
    pub answer: String,
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, BenchError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| BenchError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn parse_articles(text: &str) -> Result<Vec<Article>, BenchError> {
    parse_jsonl(text)
}

pub fn parse_direct_qa(text: &str) -> Result<Vec<DirectQa>, BenchError> {
    parse_jsonl(text)
}

pub fn parse_dataset(text: &str) -> Result<Vec<QADatapoint>, BenchError> {
    parse_jsonl(text)
}

/// One entity per non-empty line, trimmed.
pub fn parse_entity_list(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildConfig {
    pub category_noun: String,
    pub images_per_pair: usize,
    pub seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            category_noun: DEFAULT_CATEGORY_NOUN.into(),
            images_per_pair: 5,
            seed: crate::DEFAULT_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditRow {
    pub entity: String,
    pub source: Source,
    pub question: String,
    pub answer: String,
    /// `kept`, or the rule that rejected the pair.
    pub outcome: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildOutput {
    pub datapoints: Vec<QADatapoint>,
    pub audit: Vec<AuditRow>,
    pub warnings: Vec<String>,
}

struct Candidate {
    entity: String,
    context: String,
    pair: QaPair,
    source: Source,
    log: Vec<FilterStep>,
}

impl Candidate {
    fn audit(&self, outcome: &str, detail: impl Into<String>) -> AuditRow {
        AuditRow {
            entity: self.entity.clone(),
            source: self.source,
            question: self.pair.question.clone(),
            answer: self.pair.answer.clone(),
            outcome: outcome.into(),
            detail: detail.into(),
        }
    }
}

fn step(rule: QaRule, passed: bool) -> FilterStep {
    FilterStep {
        rule: rule.as_str().into(),
        passed,
    }
}

/// Runs the string rules and then the two LM checks (unique answer, LM
/// answers correctly). `Ok(false)` means rejected, with the audit row pushed.
fn cascade(c: &mut Candidate, lm: &mut dyn LmClient, audit: &mut Vec<AuditRow>) -> Result<bool, BenchError> {
    let (verdict, log) = filter_qa_logged(&c.pair, &c.entity);
    c.log = log;
    if let Verdict::Reject(rule) = verdict {
        audit.push(c.audit(rule.as_str(), ""));
        return Ok(false);
    }
    let judged = lm.complete(TemplateId::Ambiguity, &prompts::ambiguity(&c.context, &c.pair.question))?;
    let unique = parse_judgment(&judged) == Some(Judgment::Unique);
    c.log.push(step(QaRule::Ambiguous, unique));
    if !unique {
        audit.push(c.audit(QaRule::Ambiguous.as_str(), judged.trim()));
        return Ok(false);
    }
    let answered = lm.complete(
        TemplateId::QuestionAnswering,
        &prompts::question_answering(&c.pair.question),
    )?;
    let lm_answer = parse_answer(&answered).unwrap_or_default();
    let ok = !lm_answer.is_empty() && two_way_inclusion(&lm_answer, &c.pair.answer);
    c.log.push(step(QaRule::LmAnswerIncorrect, ok));
    if !ok {
        audit.push(c.audit(QaRule::LmAnswerIncorrect.as_str(), lm_answer));
        return Ok(false);
    }
    Ok(true)
}

/// Exact-match dedup on normalized (question, answer), then LM-judged
/// dedup within each entity. Keeps the first of each duplicate set. An LM
/// failure stops the second pass and leaves the exact-match result.
pub fn dedup(pairs: &[(String, QaPair)], lm: &mut dyn LmClient) -> (Vec<usize>, Vec<String>) {
    let mut seen = HashSet::new();
    let exact: Vec<usize> = (0..pairs.len())
        .filter(|&i| {
            let (e, p) = &pairs[i];
            seen.insert((normalize(e), normalize(&p.question), normalize(&p.answer)))
        })
        .collect();
    let mut kept_by_entity: HashMap<String, Vec<usize>> = HashMap::new();
    let mut kept = Vec::with_capacity(exact.len());
    for &j in &exact {
        let (entity, pj) = &pairs[j];
        let bucket = kept_by_entity.entry(normalize(entity)).or_default();
        let mut duplicate = false;
        for &i in bucket.iter() {
            let pi = &pairs[i].1;
            let prompt = prompts::duplicate(&pi.question, &pi.answer, &pj.question, &pj.answer);
            match lm.complete(TemplateId::Duplicate, &prompt) {
                Ok(r) if parse_judgment(&r) == Some(Judgment::Duplicate) => {
                    duplicate = true;
                    break;
                }
                Ok(_) => {}
                Err(e) => {
                    let warning = format!("duplicate check failed ({e}); kept exact-match dedup only");
                    return (exact, vec![warning]);
                }
            }
        }
        if !duplicate {
            bucket.push(j);
            kept.push(j);
        }
    }
    (kept, Vec::new())
}

/// Builds the dataset for `entities` in order. Articles and direct pairs of
/// entities not in the list are ignored.
pub fn build_dataset(
    entities: &[String],
    articles: &[Article],
    direct: &[DirectQa],
    lm: &mut dyn LmClient,
    config: &BuildConfig,
) -> Result<BuildOutput, BenchError> {
    let mut audit = Vec::new();
    let mut survivors: Vec<Candidate> = Vec::new();
    for entity in entities {
        let own = articles.iter().filter(|a| a.entity == *entity);
        for article in own {
            for split in split_article(&article.text, entity) {
                let response = lm.complete(TemplateId::QaExtraction, &prompts::qa_extraction(entity, &split))?;
                for pair in parse_qa_pairs(&response) {
                    let mut c = Candidate {
                        entity: entity.clone(),
                        context: split.clone(),
                        pair,
                        source: Source::WikiExtract,
                        log: Vec::new(),
                    };
                    if cascade(&mut c, lm, &mut audit)? {
                        survivors.push(c);
                    }
                }
            }
        }
        for d in direct.iter().filter(|d| d.entity == *entity) {
            let mut c = Candidate {
                entity: entity.clone(),
                context: String::new(),
                pair: QaPair {
                    question: d.question.clone(),
                    answer: d.answer.clone(),
                },
                source: Source::DirectGen,
                log: Vec::new(),
            };
            if cascade(&mut c, lm, &mut audit)? {
                survivors.push(c);
            }
        }
    }

    let keyed: Vec<(String, QaPair)> = survivors.iter().map(|c| (c.entity.clone(), c.pair.clone())).collect();
    let (kept, warnings) = dedup(&keyed, lm);
    let kept: HashSet<usize> = kept.into_iter().collect();

    let mut images: HashMap<&str, Vec<String>> = HashMap::new();
    let mut nouns: HashMap<&str, &str> = HashMap::new();
    for a in articles {
        images
            .entry(a.entity.as_str())
            .or_default()
            .extend(a.images.iter().cloned());
        if let Some(cat) = &a.category {
            nouns.entry(a.entity.as_str()).or_insert(cat.as_str());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut datapoints = Vec::new();
    for (i, mut c) in survivors.into_iter().enumerate() {
        let is_dup = !kept.contains(&i);
        c.log.push(step(QaRule::Duplicate, !is_dup));
        if is_dup {
            audit.push(c.audit(QaRule::Duplicate.as_str(), ""));
            continue;
        }
        let noun = nouns.get(c.entity.as_str()).copied().unwrap_or(&config.category_noun);
        let visual = match make_visual_reference(&c.pair.question, &c.entity, noun) {
            Ok(v) => v,
            Err(e) => {
                audit.push(c.audit(QaRule::VisualReference.as_str(), e.to_string()));
                continue;
            }
        };
        c.log.push(step(QaRule::VisualReference, true));
        let mut pool = images.get(c.entity.as_str()).cloned().unwrap_or_default();
        pool.sort();
        pool.dedup();
        let chosen: Vec<String> = if pool.is_empty() {
            vec![String::new()]
        } else {
            pool.choose_multiple(&mut rng, config.images_per_pair.min(pool.len()))
                .cloned()
                .collect()
        };
        let base = QADatapoint {
            entity: c.entity.clone(),
            image_id: String::new(),
            textual_question: c.pair.question.clone(),
            visual_question: visual,
            answer: c.pair.answer.clone(),
            source: c.source,
            filter_log: c.log.clone(),
        };
        let problems = base.invariant_violations();
        if !problems.is_empty() {
            audit.push(c.audit(QaRule::Invariant.as_str(), problems.join("; ")));
            continue;
        }
        audit.push(c.audit("kept", format!("{} image(s)", chosen.len())));
        for image_id in chosen {
            datapoints.push(QADatapoint {
                image_id,
                ..base.clone()
            });
        }
    }
    Ok(BuildOutput {
        datapoints,
        audit,
        warnings,
    })
}

pub fn write_dataset_jsonl<W: Write>(mut out: W, datapoints: &[QADatapoint]) -> Result<(), BenchError> {
    for d in datapoints {
        writeln!(out, "{}", serde_json::to_string(d).expect("datapoints serialize"))?;
    }
    Ok(())
}

pub fn write_audit_csv<W: Write>(out: W, rows: &[AuditRow]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["entity", "source", "question", "answer", "outcome", "detail"])?;
    for r in rows {
        let source = match r.source {
            Source::WikiExtract => "WikiExtract",
            Source::DirectGen => "DirectGen",
            Source::MnistArithmetic => "MnistArithmetic",
        };
        w.write_record([&r.entity, source, &r.question, &r.answer, &r.outcome, &r.detail])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::client::{ClientError, RecordingClient, ReplayClient};
    use super::*;

    /// Extracts a fixed response, calls everything unique, answers with the
    /// gold answer it was configured with, and judges pairs duplicate when
    /// their answers overlap.
    struct FakeLm {
        extraction: String,
        answers: HashMap<String, String>,
        fail_duplicate: bool,
    }

    impl LmClient for FakeLm {
        fn complete(&mut self, t: TemplateId, prompt: &str) -> Result<String, ClientError> {
            Ok(match t {
                TemplateId::QaExtraction => self.extraction.clone(),
                TemplateId::Ambiguity => "Rationale: fine.\nJudgment: Unique [STOP]".into(),
                TemplateId::QuestionAnswering => {
                    let q = prompt.trim_end().rsplit("Question: ").next().unwrap_or("");
                    format!(
                        "{} [STOP]",
                        self.answers.get(q).cloned().unwrap_or_else(|| "unknown".into())
                    )
                }
                TemplateId::Duplicate => {
                    if self.fail_duplicate {
                        return Err(ClientError::Transient("down".into()));
                    }
                    let a: Vec<&str> = prompt.lines().filter_map(|l| l.strip_prefix("Answer: ")).collect();
                    let (a1, a2) = (a[a.len() - 2], a[a.len() - 1]);
                    if two_way_inclusion(a1, a2) {
                        "Judgment: Duplicate [STOP]".into()
                    } else {
                        "Judgment: Unique [STOP]".into()
                    }
                }
                _ => String::new(),
            })
        }
    }

    fn fake(fail_duplicate: bool) -> FakeLm {
        let answers = [
            ("What is another name for the tench?", "doctor fish"),
            ("What is the tench also known as?", "the doctor fish"),
            ("What is the order of the tench?", "Cypriniformes"),
        ];
        FakeLm {
            extraction: "Question: What is another name for the tench?\nAnswer: doctor fish\n[SEP]\n\
                         Question: What is the tench also known as?\nAnswer: the doctor fish\n[SEP]\n\
                         Question: What is the order of the tench?\nAnswer: Cypriniformes\n[SEP]\n\
                         Question: What is the tench?\nAnswer: a tench fish\n[SEP]\n\
                         Question: Where does it live?\nAnswer: lakes\n[STOP]"
                .into(),
            answers: answers.iter().map(|(q, a)| (q.to_string(), a.to_string())).collect(),
            fail_duplicate,
        }
    }

    fn articles() -> Vec<Article> {
        vec![Article {
            entity: "tench".into(),
            text: "The tench is a fish. It lives in lakes.".into(),
            images: vec!["t1".into(), "t2".into()],
            category: Some("animal".into()),
        }]
    }

    #[test]
    fn builds_and_audits() {
        let out = build_dataset(
            &["tench".into()],
            &articles(),
            &[],
            &mut fake(false),
            &BuildConfig::default(),
        )
        .unwrap();
        let questions: HashSet<&str> = out.datapoints.iter().map(|d| d.textual_question.as_str()).collect();
        assert_eq!(questions.len(), 2, "{:?}", out.audit);
        assert!(questions.contains("What is another name for the tench?"));
        assert_eq!(out.datapoints.len(), 4);
        assert!(out.datapoints.iter().all(|d| d.invariant_violations().is_empty()));
        assert!(out
            .datapoints
            .iter()
            .any(|d| d.visual_question == "What is the order of the animal in the image?"));
        let outcomes: Vec<&str> = out.audit.iter().map(|r| r.outcome.as_str()).collect();
        for o in ["answer-contains-entity", "question-lacks-entity", "duplicate", "kept"] {
            assert!(outcomes.contains(&o), "{outcomes:?}");
        }
    }

    #[test]
    fn dedup_falls_back_on_lm_failure() {
        let out = build_dataset(
            &["tench".into()],
            &articles(),
            &[],
            &mut fake(true),
            &BuildConfig::default(),
        )
        .unwrap();
        assert_eq!(out.warnings.len(), 1);
        let questions: HashSet<&str> = out.datapoints.iter().map(|d| d.textual_question.as_str()).collect();
        assert_eq!(questions.len(), 3);
    }

    #[test]
    fn exact_duplicates_collapse() {
        let p = QaPair {
            question: "What is X?".into(),
            answer: "y".into(),
        };
        let pairs = vec![("x".to_string(), p.clone()), ("x".to_string(), p)];
        let (kept, _) = dedup(&pairs, &mut fake(true));
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn replay_is_byte_identical() {
        let mut rec = RecordingClient::new(fake(false));
        let cfg = BuildConfig::default();
        let a = build_dataset(&["tench".into()], &articles(), &[], &mut rec, &cfg).unwrap();
        let mut replay = ReplayClient::new(rec.transcript());
        let b = build_dataset(&["tench".into()], &articles(), &[], &mut replay, &cfg).unwrap();
        let bytes = |o: &BuildOutput| {
            let mut v = Vec::new();
            write_dataset_jsonl(&mut v, &o.datapoints).unwrap();
            write_audit_csv(&mut v, &o.audit).unwrap();
            v
        };
        assert_eq!(bytes(&a), bytes(&b));
        assert_eq!(replay.log(), rec.transcript());
    }

    #[test]
    fn dataset_round_trips() {
        let out = build_dataset(
            &["tench".into()],
            &articles(),
            &[],
            &mut fake(false),
            &BuildConfig::default(),
        )
        .unwrap();
        let mut v = Vec::new();
        write_dataset_jsonl(&mut v, &out.datapoints).unwrap();
        assert_eq!(parse_dataset(std::str::from_utf8(&v).unwrap()).unwrap(), out.datapoints);
        assert!(matches!(
            parse_articles("{\"entity\":1}"),
            Err(BenchError::Parse { line: 1, .. })
        ));
    }
}
