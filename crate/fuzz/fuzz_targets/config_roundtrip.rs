#![no_main]

use compop::config::ScenarioConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(cfg) = ScenarioConfig::from_json(text) else {
        return;
    };
    let json = cfg.to_json().expect("serialize parsed config");
    let back = ScenarioConfig::from_json(&json).expect("reparse serialized config");
    assert_eq!(back.to_json().unwrap(), json);
});
