#![no_main]

use libfuzzer_sys::fuzz_target;
use maskrefine::config::PipelineConfig;
use maskrefine::keyvalue::KeyValues;
use maskrefine::room::Scenario;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = KeyValues::parse(text);
    let _ = PipelineConfig::parse(text);
    let _ = Scenario::parse(text);
});
