//! Parsers for language-model completions. All of them accept arbitrary
//! text; malformed output yields nothing rather than an error where the
//! caller can treat it as a rejection.

use super::QaPair;

/// Text before the first `[STOP]`, or all of it.
pub fn before_stop(text: &str) -> &str {
    text.find("[STOP]").map_or(text, |i| &text[..i])
}

fn collapse(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Question/answer blocks separated by `[SEP]`. Questions may wrap over
/// lines; answers end at the line break.
pub fn parse_qa_pairs(text: &str) -> Vec<QaPair> {
    before_stop(text)
        .split("[SEP]")
        .filter_map(|block| {
            let q = block.rfind("Question:")?;
            let a = q + block[q..].find("Answer:")?;
            let question = collapse(&block[q + "Question:".len()..a]);
            let after = &block[a + "Answer:".len()..];
            let answer = collapse(after.lines().next().unwrap_or(""));
            (!question.is_empty() && !answer.is_empty()).then_some(QaPair { question, answer })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Judgment {
    Unique,
    Multiple,
    Duplicate,
}

/// The word after the last `Judgment:` before `[STOP]`.
pub fn parse_judgment(text: &str) -> Option<Judgment> {
    let body = before_stop(text);
    let i = body.rfind("Judgment:")?;
    let word = body[i + "Judgment:".len()..]
        .split_whitespace()
        .next()?
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    match word.as_str() {
        "unique" => Some(Judgment::Unique),
        "multiple" => Some(Judgment::Multiple),
        "duplicate" => Some(Judgment::Duplicate),
        _ => None,
    }
}

/// First non-empty line of the answer, after any `Answer:` label.
pub fn parse_answer(text: &str) -> Option<String> {
    let body = before_stop(text);
    let body = body.rfind("Answer:").map_or(body, |i| &body[i + "Answer:".len()..]);
    body.lines().map(collapse).find(|l| !l.is_empty())
}

/// The three `Incorrect Option k:` lines, first occurrence of each.
pub fn parse_mcqa_options(text: &str) -> Option<[String; 3]> {
    let mut found: [Option<String>; 3] = Default::default();
    for line in before_stop(text).lines() {
        let Some(rest) = line.trim().strip_prefix("Incorrect Option") else {
            continue;
        };
        let Some((num, opt)) = rest.split_once(':') else {
            continue;
        };
        let Ok(k) = num.trim().parse::<usize>() else {
            continue;
        };
        let opt = collapse(opt);
        if (1..=3).contains(&k) && found[k - 1].is_none() && !opt.is_empty() {
            found[k - 1] = Some(opt);
        }
    }
    let [a, b, c] = found;
    Some([a?, b?, c?])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extraction_example() {
        let out = "Rationale: The tench is said to \nalso be called the doctor fish.\nQuestion: What is another name \nfor the tench?\nAnswer: doctor fish\n[SEP]\nRationale: x\nQuestion: What is the order \nof the tench?\nAnswer: Cypriniformes\n[STOP]\n\nEntity: Baklava\nQuestion: ignored\nAnswer: no";
        let pairs = parse_qa_pairs(out);
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].question, "What is another name for the tench?");
        assert_eq!(pairs[0].answer, "doctor fish");
        assert_eq!(pairs[1].answer, "Cypriniformes");
        assert!(parse_qa_pairs("Answer: before question\nQuestion: q").is_empty());
    }

    #[test]
    fn judgment_and_answer() {
        assert_eq!(
            parse_judgment("Rationale: ...\nJudgment: Unique [STOP]"),
            Some(Judgment::Unique)
        );
        assert_eq!(parse_judgment("Judgment: Duplicate."), Some(Judgment::Duplicate));
        assert_eq!(parse_judgment("Judgment: maybe"), None);
        assert_eq!(parse_judgment(""), None);
        assert_eq!(
            parse_answer(" doctor fish [STOP]\nQuestion: x"),
            Some("doctor fish".into())
        );
        assert_eq!(parse_answer("Answer: Paris\n"), Some("Paris".into()));
        assert_eq!(parse_answer("[STOP]"), None);
    }

    #[test]
    fn mcqa_options() {
        let out =
            "Incorrect Option 1: miracle fish\nIncorrect Option 2: salmon \nIncorrect Option 3: hidden fish\n[STOP]";
        assert_eq!(
            parse_mcqa_options(out).unwrap(),
            ["miracle fish".to_string(), "salmon".into(), "hidden fish".into()]
        );
        assert!(parse_mcqa_options("Incorrect Option 1: a\nIncorrect Option 3: c").is_none());
    }
}
