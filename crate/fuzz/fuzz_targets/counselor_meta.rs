#![no_main]

use alliance_core::analysis::read_counselor_meta;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = read_counselor_meta(data);
});
