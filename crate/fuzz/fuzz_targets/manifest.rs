#![no_main]

use kdseg::data::{format_manifest, parse_manifest};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_manifest(text) {
        assert_eq!(parse_manifest(&format_manifest(&records)).unwrap(), records);
    }
});
