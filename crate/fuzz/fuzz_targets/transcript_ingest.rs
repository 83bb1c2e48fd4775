#![no_main]

use alliance_core::transcript::{ingest, serialize};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(set) = ingest(data) {
        let mut out = Vec::new();
        serialize(&set, &mut out).expect("serialize");
        let again = ingest(out.as_slice()).expect("re-ingest");
        assert_eq!(again.len(), set.len());
    }
});
