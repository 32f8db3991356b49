#![no_main]

use libfuzzer_sys::fuzz_target;
use maskrefine::mcmf::{decode_mcmf, encode_mcmf};

fuzz_target!(|data: &[u8]| {
    // the decoder is strict, so anything it accepts re-encodes to the same bytes
    if let Ok(mask) = decode_mcmf(data) {
        assert_eq!(encode_mcmf(&mask).expect("decoded masks re-encode"), data);
    }
});
