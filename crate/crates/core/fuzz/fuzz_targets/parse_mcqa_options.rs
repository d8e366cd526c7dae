#![no_main]

use groundprobe::bench::parse::parse_mcqa_options;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = parse_mcqa_options(text);
});
