#![no_main]

use libfuzzer_sys::fuzz_target;
use reviser_service::{Event, Session};

fuzz_target!(|data: &str| {
    let events: Result<Vec<Event>, _> = data
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect();
    if let Ok(events) = events {
        let _ = Session::replay(&events);
    }
});
