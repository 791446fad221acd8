#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = compop::config::ScenarioConfig::from_json(text) {
        // Validation must report, never panic.
        let _ = cfg.validate();
    }
});
