#![no_main]

use groundprobe::bench::pipeline::parse_articles;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = parse_articles(text);
});
