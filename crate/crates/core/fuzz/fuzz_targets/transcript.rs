#![no_main]

use groundprobe::bench::client::Transcript;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(t) = Transcript::parse(text) {
        let mut out = Vec::new();
        t.write(&mut out).expect("write to memory");
        let again = Transcript::parse(std::str::from_utf8(&out).unwrap()).expect("written transcript parses");
        assert_eq!(again, t);
    }
});
