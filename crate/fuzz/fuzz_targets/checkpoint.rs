#![no_main]

use kdseg::data::checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = checkpoint::decode(data);
    if let Ok(model) = checkpoint::decode_model(data) {
        assert_eq!(checkpoint::encode(&model), data);
    }
});
