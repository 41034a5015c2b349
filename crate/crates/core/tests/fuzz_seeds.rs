// Replays the checked-in fuzz seeds so the parsers stay exercised on stable.

use std::fs;
use std::path::PathBuf;

use reviser_core::corpus::LabeledCorpus;
use reviser_core::model::Checkpoint;
use reviser_core::revision::SpanSelection;
use reviser_core::synthdata::SynthCorpus;
use reviser_core::tokenizer::Vocabulary;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty());
    out
}

fn text(b: &[u8]) -> &str {
    std::str::from_utf8(b).unwrap()
}

#[test]
fn corpus_seeds_parse() {
    for (name, b) in seeds("corpus_tsv") {
        let c = LabeledCorpus::parse_tsv(text(&b), None).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(LabeledCorpus::parse_tsv(&c.to_tsv(), None).unwrap().sentences.len(), c.sentences.len());
    }
}

#[test]
fn vocab_seed_round_trips() {
    for (_, b) in seeds("vocab_json") {
        let v = Vocabulary::from_json(text(&b)).unwrap();
        assert_eq!(v.to_json(), text(&b));
    }
}

#[test]
fn checkpoint_seed_loads_and_truncations_fail() {
    for (_, b) in seeds("checkpoint_bytes") {
        let ck = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(ck.to_bytes(), b);
        for cut in [0, 1, b.len() / 2, b.len() - 1] {
            assert!(Checkpoint::from_bytes(&b[..cut]).is_err(), "cut {cut}");
        }
    }
}

#[test]
fn span_seeds() {
    let ok: Vec<bool> = seeds("span_arg").iter().map(|(_, b)| SpanSelection::parse(text(b)).is_ok()).collect();
    assert_eq!(ok, [true, true, true, false, false, true]);
}

#[test]
fn synth_seed_imports() {
    for (_, b) in seeds("synth_import") {
        let (tsv, meta) = text(&b).split_once('\0').unwrap();
        let c = SynthCorpus::import(tsv, meta).unwrap();
        assert_eq!(c.export().unwrap(), (tsv.to_string(), meta.to_string()));
    }
}
