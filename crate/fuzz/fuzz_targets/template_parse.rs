#![no_main]

use alliance_core::promptkit::PromptTemplate;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = PromptTemplate::parse(text);
    }
});
