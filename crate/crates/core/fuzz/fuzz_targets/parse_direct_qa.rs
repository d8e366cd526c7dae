#![no_main]

use groundprobe::bench::pipeline::parse_direct_qa;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = parse_direct_qa(text);
});
