#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Accepted configs must survive a serialize/parse round-trip.
    if let Ok(cfg) = svdx_core::train::TrainConfig::from_json_str(text) {
        let json = serde_json::to_string(&cfg).expect("serialize");
        let back = svdx_core::train::TrainConfig::from_json_str(&json).expect("round-trip");
        assert_eq!(cfg, back);
    }
});
