#![no_main]

use libfuzzer_sys::fuzz_target;
use reviser_core::synthdata::SynthCorpus;

// The two inputs are split at the first NUL byte.
fuzz_target!(|data: &str| {
    let (tsv, meta) = data.split_once('\0').unwrap_or((data, "[]"));
    let _ = SynthCorpus::import(tsv, meta);
});
