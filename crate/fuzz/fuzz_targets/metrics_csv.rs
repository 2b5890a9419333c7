#![no_main]

use kdseg::metrics::{parse_metrics_csv, write_table};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(table) = parse_metrics_csv(text) {
        let mut out = Vec::new();
        write_table(&mut out, &table).unwrap();
        assert_eq!(parse_metrics_csv(std::str::from_utf8(&out).unwrap()).unwrap(), table);
    }
});
