#![no_main]

use alliance_core::analysis::read_raw_scores;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = read_raw_scores(data);
});
