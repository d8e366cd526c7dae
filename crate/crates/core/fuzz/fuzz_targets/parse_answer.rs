#![no_main]

use groundprobe::bench::parse::parse_answer;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Some(a) = parse_answer(text) {
        assert!(!a.is_empty());
    }
});
