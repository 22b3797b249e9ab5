#![no_main]

use libfuzzer_sys::fuzz_target;

// Raw f64 blob decoding: ragged lengths and non-finite payloads must be
// rejected, never panic or produce NaNs downstream.
fuzz_target!(|data: &[u8]| {
    if let Ok(values) = semlink::io::blob_from_bytes(data) {
        assert!(values.iter().all(|v| v.is_finite()));
    }
});
