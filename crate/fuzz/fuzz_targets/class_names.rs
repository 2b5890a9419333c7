#![no_main]

use kdseg::data::parse_class_names;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(names) = parse_class_names(text) {
        assert!(!names.is_empty() && names.len() < 256);
    }
});
