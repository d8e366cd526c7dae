#![no_main]

use groundprobe::trace_store::{decode_unembedding, encode_unembedding};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(u) = decode_unembedding(data) {
        let again = decode_unembedding(&encode_unembedding(&u)).expect("re-encoded unembedding decodes");
        assert_eq!(again, u);
    }
});
