#![no_main]

use groundprobe::bench::parse::parse_qa_pairs;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    for pair in parse_qa_pairs(text) {
        assert!(!pair.question.is_empty() && !pair.answer.is_empty());
    }
});
