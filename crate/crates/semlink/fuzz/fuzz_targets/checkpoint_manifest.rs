#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = semlink::trainer::checkpoint::CheckpointManifest::from_json_bytes(data);
});
