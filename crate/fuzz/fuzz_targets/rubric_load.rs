#![no_main]

use alliance_core::rubric::Rubric;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(rubric) = Rubric::from_toml_str(text) {
        // A loaded rubric must survive its own serialization.
        let again = Rubric::from_toml_str(&rubric.to_toml_string()).expect("round trip");
        assert_eq!(again.to_toml_string(), rubric.to_toml_string());
    }
});
