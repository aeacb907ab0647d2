#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = svdx_core::synth::Manifest::from_json_str(text) {
        let json = serde_json::to_string(&m).expect("serialize");
        let back = svdx_core::synth::Manifest::from_json_str(&json).expect("round-trip");
        assert_eq!(m, back);
    }
});
