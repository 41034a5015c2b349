#![no_main]

use libfuzzer_sys::fuzz_target;
use reviser_core::revision::SpanSelection;

fuzz_target!(|data: &str| {
    if let Ok(s) = SpanSelection::parse(data) {
        assert!(s.len >= 1);
    }
});
