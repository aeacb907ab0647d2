#![no_main]

use libfuzzer_sys::fuzz_target;

// VVOL headers declare payload sizes; the parser must validate the declared
// length against the actual byte count before allocating anything.
fuzz_target!(|data: &[u8]| {
    if let Ok(v) = svdx_core::volume::Volume::from_vvol_bytes(data) {
        // Accepted volumes must satisfy their own invariants and round-trip.
        let bytes = v.to_vvol_bytes().expect("accepted volume must serialize");
        let back = svdx_core::volume::Volume::from_vvol_bytes(&bytes).expect("round-trip");
        assert_eq!(v.dims(), back.dims());
        assert_eq!(v.data(), back.data());
    }
});
