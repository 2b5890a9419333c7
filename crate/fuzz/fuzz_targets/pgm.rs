#![no_main]

use kdseg::data::pnm;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(r) = pnm::decode_pgm(data) {
        assert_eq!(r.data.len(), r.width * r.height);
        assert_eq!(pnm::decode_pgm(&pnm::encode(&r)).unwrap(), r);
    }
});
