#![no_main]

use libfuzzer_sys::fuzz_target;
use maskrefine::wav::parse_wav;

fuzz_target!(|data: &[u8]| {
    if let Ok(wave) = parse_wav(data) {
        assert!(wave.num_channels() > 0);
    }
});
