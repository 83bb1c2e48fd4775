#![no_main]

use alliance_core::rater::ProviderConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = ProviderConfig::from_json_str(text);
    }
});
