#![no_main]

use groundprobe::bench::pipeline::parse_entity_list;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    for e in parse_entity_list(text) {
        assert!(!e.is_empty() && e.trim() == e);
    }
});
