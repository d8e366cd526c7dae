#![no_main]

use groundprobe::bench::pipeline::parse_dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(items) = parse_dataset(text) {
        for dp in &items {
            let _ = dp.invariant_violations();
        }
    }
});
