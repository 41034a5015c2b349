//! Trains the desk-scale model on the synthetic corpus and prints the
//! per-epoch log. Usage: `desk_train [sentences] [epochs] [out.ckpt]`.

use std::time::Instant;

use reviser_core::model::{ModelConfig, ModelParams};
use reviser_core::synthdata::{generate_corpus, TemplateConfig};
use reviser_core::tokenizer::Vocabulary;
use reviser_core::training::{train, TrainConfig};

fn main() -> reviser_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let size = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5000);
    let mut config = TrainConfig::desk_scale();
    if let Some(e) = args.get(2).and_then(|s| s.parse().ok()) {
        config.epochs = e;
    }
    let corpus = generate_corpus(size, &TemplateConfig::default(), 7)?.to_labeled();
    let vocab = Vocabulary::build(corpus.texts(), 1)?;
    let model = ModelConfig::desk_scale(vocab.len(), corpus.attributes.len());
    let params = ModelParams::init(&model, config.seed)?;
    let start = Instant::now();
    let out = train(params, vocab, &corpus, &config, |m| {
        println!("{} {:.1}s", serde_json::to_string(m).unwrap(), start.elapsed().as_secs_f64());
    })?;
    if let Some(path) = args.get(3) {
        out.checkpoint.save(path)?;
    }
    Ok(())
}
