#![no_main]

use alliance_core::rater::read_ratings;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = read_ratings(data);
});
