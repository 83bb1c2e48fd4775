#![no_main]

use alliance_core::feedback::{read_assessments, summarize_assessments};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_assessments(data) {
        let _ = summarize_assessments(&rows);
    }
});
