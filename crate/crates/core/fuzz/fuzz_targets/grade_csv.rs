#![no_main]

use groundprobe::metrics::{grade_csv, Grader};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = grade_csv(data, &Grader::default()) {
        for r in rows {
            assert!((0.0..=1.0).contains(&r.bleu));
            assert!(!r.exact || r.inclusion);
        }
    }
});
