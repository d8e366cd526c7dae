//! Runs every checked-in fuzz seed through its entry point.

use std::path::PathBuf;

use groundprobe::bench::client::Transcript;
use groundprobe::bench::parse::{parse_answer, parse_judgment, parse_mcqa_options, parse_qa_pairs, Judgment};
use groundprobe::bench::pipeline::{parse_articles, parse_dataset, parse_direct_qa, parse_entity_list};
use groundprobe::metrics::{grade_csv, Grader};
use groundprobe::trace_store::{decode_trace, decode_unembedding};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn text(b: &[u8]) -> &str {
    std::str::from_utf8(b).unwrap()
}

#[test]
fn binary_seeds() {
    for (name, b) in seeds("decode_trace") {
        assert_eq!(decode_trace(&b).is_ok(), name != "truncated.vlt", "{name}");
    }
    for (name, b) in seeds("decode_unembedding") {
        let u = decode_unembedding(&b).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!((u.vocab_size(), u.hidden_dim()), (4, 6));
    }
}

#[test]
fn completion_parser_seeds() {
    for (name, b) in seeds("parse_qa_pairs") {
        let pairs = parse_qa_pairs(text(&b));
        match name.as_str() {
            "two_pairs.txt" => {
                assert_eq!(pairs.len(), 2);
                assert_eq!(pairs[1].question, "Where is the tench found?");
            }
            _ => assert!(pairs.is_empty(), "{name}: {pairs:?}"),
        }
    }
    for (name, b) in seeds("parse_judgment") {
        let want = match name.as_str() {
            "unique.txt" => Judgment::Unique,
            _ => Judgment::Duplicate,
        };
        assert_eq!(parse_judgment(text(&b)), Some(want), "{name}");
    }
    for (name, b) in seeds("parse_answer") {
        let want = if name == "plain.txt" {
            "Cypriniformes"
        } else {
            "filo pastry"
        };
        assert_eq!(parse_answer(text(&b)).as_deref(), Some(want), "{name}");
    }
    for (name, b) in seeds("parse_mcqa_options") {
        assert_eq!(parse_mcqa_options(text(&b)).is_some(), name == "three.txt", "{name}");
    }
}

#[test]
fn jsonl_and_csv_seeds() {
    for (_, b) in seeds("transcript") {
        assert_eq!(Transcript::parse(text(&b)).unwrap().entries.len(), 2);
    }
    for (_, b) in seeds("parse_articles") {
        let a = parse_articles(text(&b)).unwrap();
        assert_eq!(a.len(), 2);
        assert!(a[1].images.is_empty() && a[1].category.is_none());
    }
    for (_, b) in seeds("parse_direct_qa") {
        assert_eq!(parse_direct_qa(text(&b)).unwrap().len(), 1);
    }
    for (_, b) in seeds("parse_dataset") {
        let items = parse_dataset(text(&b)).unwrap();
        assert_eq!(items.len(), 3);
        assert!(items.iter().all(|dp| dp.invariant_violations().is_empty()));
    }
    for (_, b) in seeds("parse_entity_list") {
        assert_eq!(parse_entity_list(text(&b)), ["tench", "Eiffel Tower", "baklava"]);
    }
    for (_, b) in seeds("grade_csv") {
        let rows = grade_csv(b.as_slice(), &Grader::default()).unwrap();
        let incl: Vec<bool> = rows.iter().map(|r| r.inclusion).collect();
        assert_eq!(incl, [true, true, false]);
    }
}
