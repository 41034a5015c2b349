#![no_main]

use libfuzzer_sys::fuzz_target;
use reviser_core::tokenizer::Vocabulary;

fuzz_target!(|data: &str| {
    if let Ok(v) = Vocabulary::from_json(data) {
        let ids = v.encode("the quick , brown fox !");
        for &id in ids.ids() {
            assert!(v.token(id).is_some());
        }
    }
});
