#![no_main]

use alliance_core::rater::parse_response;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&flag, rest)) = data.split_first() else {
        return;
    };
    let Ok(text) = std::str::from_utf8(rest) else {
        return;
    };
    if let Ok(parsed) = parse_response(text, flag & 1 == 1) {
        assert!((1..=5).contains(&parsed.score));
    }
});
