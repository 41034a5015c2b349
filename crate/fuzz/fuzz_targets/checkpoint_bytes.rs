#![no_main]

use libfuzzer_sys::fuzz_target;
use reviser_core::model::Checkpoint;

fuzz_target!(|data: &[u8]| {
    let _ = Checkpoint::from_bytes(data);
});
