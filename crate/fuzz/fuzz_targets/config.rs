#![no_main]

use libfuzzer_sys::fuzz_target;
use reed::harness::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = ExperimentConfig::from_json(text) {
        let again = cfg.to_json().expect("serialize accepted config");
        assert_eq!(ExperimentConfig::from_json(&again).expect("reparse config"), cfg);
    }
});
