#![no_main]

use groundprobe::trace_store::{decode_trace, encode_trace, validate_trace};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((header, records)) = decode_trace(data) {
        let _ = validate_trace(&header, &records);
        // Anything that decodes must re-encode to something that decodes
        // to the same thing.
        if let Ok(bytes) = encode_trace(&header, &records) {
            let (h2, r2) = decode_trace(&bytes).expect("re-encoded trace decodes");
            assert_eq!(h2, header);
            assert_eq!(r2.len(), records.len());
        }
    }
});
