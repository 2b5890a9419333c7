#![no_main]

use kdseg::data::pnm;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(r) = pnm::decode_ppm(data) {
        assert_eq!(r.data.len(), r.width * r.height * 3);
        assert_eq!(pnm::decode_ppm(&pnm::encode(&r)).unwrap(), r);
    }
});
