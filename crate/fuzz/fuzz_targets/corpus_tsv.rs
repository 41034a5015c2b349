#![no_main]

use libfuzzer_sys::fuzz_target;
use reviser_core::corpus::LabeledCorpus;

fuzz_target!(|data: &str| {
    if let Ok(c) = LabeledCorpus::parse_tsv(data, None) {
        // Whatever parsed must parse again against its own label set.
        let again = LabeledCorpus::parse_tsv(data, Some(&c.attributes)).unwrap();
        assert_eq!(again.sentences.len(), c.sentences.len());
    }
});
