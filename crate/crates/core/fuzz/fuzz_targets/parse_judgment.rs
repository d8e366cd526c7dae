#![no_main]

use groundprobe::bench::parse::parse_judgment;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = parse_judgment(text);
});
