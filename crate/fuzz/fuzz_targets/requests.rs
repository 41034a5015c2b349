#![no_main]

use libfuzzer_sys::fuzz_target;
use reviser_service::{ClassifyRequest, CreateSession, ReviseRequest, SelectRequest};

fuzz_target!(|data: &[u8]| {
    let _ = serde_json::from_slice::<ClassifyRequest>(data);
    let _ = serde_json::from_slice::<CreateSession>(data);
    let _ = serde_json::from_slice::<SelectRequest>(data);
    if let Ok(r) = serde_json::from_slice::<ReviseRequest>(data) {
        let _ = r.config.resolve(1).validate(2);
    }
});
