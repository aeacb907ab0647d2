#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = svdx_core::checkpoint::Checkpoint::from_bytes(data) {
        let bytes = ckpt.to_bytes().expect("accepted checkpoint must serialize");
        let back = svdx_core::checkpoint::Checkpoint::from_bytes(&bytes).expect("round-trip");
        assert_eq!(ckpt.step, back.step);
        assert_eq!(ckpt.tensors.len(), back.tensors.len());
    }
});
