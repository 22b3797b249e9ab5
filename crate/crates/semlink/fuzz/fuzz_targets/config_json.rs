#![no_main]

use libfuzzer_sys::fuzz_target;

// Configuration parsing must never panic on arbitrary bytes: malformed
// JSON, unknown keys, and out-of-range dimensions all return errors.
fuzz_target!(|data: &[u8]| {
    let _ = semlink::config::ExperimentConfig::from_json_bytes(data);
});
