//! Joint fine-tuning on standard masked-LM, padded-span masked-LM and
//! attribute classification.

mod data;
mod optim;

pub use data::{
    make_padded_mlm, make_padded_mlm_at, make_standard_mlm, AttributeExample, MlmExample,
    PADDED_SPAN_MASKS, STANDARD_MASK_RATE,
};
pub use optim::Adam;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledCorpus;
use crate::error::{Error, Result};
use crate::model::{
    attribute_logits, encode, lm_logits, Checkpoint, ModelConfig, ModelParams, Weights,
};
use crate::numerics::{Graph, Var};
use crate::tokenizer::{TokenSequence, Vocabulary};

/// Relative weights of the three objectives in the per-step loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub standard_mlm: f64,
    pub padded_mlm: f64,
    pub attribute: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            standard_mlm: 1.0,
            padded_mlm: 1.0,
            attribute: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Share of the corpus held out for per-epoch evaluation.
    pub dev_fraction: f64,
}

impl Default for TrainConfig {
    /// Learning rate 5e-5, the usual value for fine-tuning a pretrained
    /// encoder. Training the micro encoder from scratch needs
    /// [`TrainConfig::desk_scale`] instead.
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            loss_weights: LossWeights::default(),
            dev_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    /// Settings that train the default micro encoder from random
    /// initialization on the synthetic corpus in a few CPU minutes.
    pub fn desk_scale() -> Self {
        Self {
            learning_rate: 3e-3,
            epochs: 6,
            batch_size: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.loss_weights;
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.batch_size > 0
            && (0.0..1.0).contains(&self.dev_fraction)
            && [w.standard_mlm, w.padded_mlm, w.attribute]
                .iter()
                .all(|v| *v >= 0.0 && v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid training config {self:?}"
            )))
        }
    }
}

/// One line of the metrics log, computed on the held-out split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mlm_loss: f64,
    pub pad_mlm_loss: f64,
    pub att_loss: f64,
    pub dev_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochMetrics>,
}

fn mean(graph: &mut Graph, parts: &[Var]) -> Result<Var> {
    let cat = graph.concat_flat(parts)?;
    let total = graph.sum(cat)?;
    Ok(graph.scale(total, 1.0 / parts.len() as f64)?)
}

/// Mean cross-entropy over one example's target positions.
fn mlm_example_loss(
    graph: &mut Graph,
    config: &ModelConfig,
    w: &Weights<Var>,
    ex: &MlmExample,
) -> Result<Var> {
    let layers = encode(graph, config, w, ex.corrupted.ids(), None)?;
    let top = *layers.last().expect("at least one layer");
    let positions: Vec<usize> = ex.targets.keys().copied().collect();
    let logits = lm_logits(graph, w, top, &positions)?;
    let mut losses = Vec::with_capacity(positions.len());
    for (i, &gold) in ex.targets.values().enumerate() {
        let row = graph.slice_rows(logits, i, 1)?;
        losses.push(graph.cross_entropy(row, gold as usize)?);
    }
    mean(graph, &losses)
}

fn attribute_example_loss(
    graph: &mut Graph,
    config: &ModelConfig,
    w: &Weights<Var>,
    ex: &AttributeExample,
) -> Result<(Var, usize)> {
    let layers = encode(graph, config, w, ex.seq.ids(), None)?;
    let logits = attribute_logits(graph, w, &layers)?;
    let predicted = argmax(graph.value(logits).data());
    Ok((graph.cross_entropy(logits, ex.label)?, predicted))
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

/// Mean over examples of each example's mean target cross-entropy, so the
/// batch loss equals the mean of per-example losses.
pub fn mlm_loss(params: &ModelParams, batch: &[MlmExample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total = 0.0;
    for ex in batch {
        let mut graph = Graph::new();
        let w = params.register(&mut graph, false);
        let loss = mlm_example_loss(&mut graph, params.config(), &w, ex)?;
        total += graph.value(loss).data()[0];
    }
    Ok(total / batch.len() as f64)
}

/// Mean attribute cross-entropy `-log P(label | X)` and accuracy.
pub fn attribute_loss(params: &ModelParams, batch: &[AttributeExample]) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let num_attributes = params.config().num_attributes;
    let mut total = 0.0;
    let mut correct = 0usize;
    for ex in batch {
        if ex.label >= num_attributes {
            return Err(Error::AttributeOutOfRange {
                index: ex.label,
                count: num_attributes,
            });
        }
        let mut graph = Graph::new();
        let w = params.register(&mut graph, false);
        let (loss, predicted) = attribute_example_loss(&mut graph, params.config(), &w, ex)?;
        total += graph.value(loss).data()[0];
        correct += usize::from(predicted == ex.label);
    }
    Ok((
        total / batch.len() as f64,
        correct as f64 / batch.len() as f64,
    ))
}

const SPLIT_SALT: u64 = 0x5eed_0d3f;

/// Deterministic shuffled split into (train, dev) indices.
pub fn split_indices(n: usize, dev_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let mut dev_n = (n as f64 * dev_fraction).round() as usize;
    if dev_fraction > 0.0 && n >= 2 {
        dev_n = dev_n.clamp(1, n - 1);
    }
    let dev = idx.split_off(n - dev_n);
    (idx, dev)
}

struct Encoded {
    seq: TokenSequence,
    label: usize,
}

fn encode_corpus(
    vocab: &Vocabulary,
    corpus: &LabeledCorpus,
    max_len: usize,
) -> Result<Vec<Encoded>> {
    corpus
        .sentences
        .iter()
        .map(|s| {
            let seq = vocab.encode(&s.text);
            // Padded masking may grow a sequence by two tokens.
            if seq.len() + PADDED_SPAN_MASKS - 1 > max_len {
                return Err(Error::Overlength {
                    len: seq.len() + PADDED_SPAN_MASKS - 1,
                    max: max_len,
                });
            }
            Ok(Encoded {
                seq,
                label: s.label,
            })
        })
        .collect()
}

/// Trains `params` on `corpus` and returns the resulting checkpoint plus one
/// [`EpochMetrics`] per epoch (also passed to `on_epoch` as they happen).
///
/// Every step optimizes
/// `w1·standard_mlm + w2·padded_mlm + w3·attribute` over one batch, where
/// each sentence contributes one example to each objective.
pub fn train(
    params: ModelParams,
    vocab: Vocabulary,
    corpus: &LabeledCorpus,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    let classes = corpus.classes_present();
    if classes < 2 {
        return Err(Error::SingleClass(classes));
    }
    if corpus.attributes.len() != params.config().num_attributes {
        return Err(Error::Mismatch(format!(
            "corpus has {} attributes, model expects {}",
            corpus.attributes.len(),
            params.config().num_attributes
        )));
    }
    if vocab.len() != params.config().vocab_size {
        return Err(Error::Mismatch(
            "vocabulary size differs from the model".into(),
        ));
    }

    let encoded = encode_corpus(&vocab, corpus, params.config().max_len)?;
    let (mut train_idx, dev_idx) = split_indices(encoded.len(), config.dev_fraction, config.seed);

    // Dev corruption is drawn once so epochs are comparable.
    let mut dev_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut dev_std = Vec::with_capacity(dev_idx.len());
    let mut dev_pad = Vec::with_capacity(dev_idx.len());
    let mut dev_att = Vec::with_capacity(dev_idx.len());
    for &i in &dev_idx {
        dev_std.push(make_standard_mlm(&encoded[i].seq, &mut dev_rng)?);
        dev_pad.push(make_padded_mlm(&encoded[i].seq, &mut dev_rng)?);
        dev_att.push(AttributeExample {
            seq: encoded[i].seq.clone(),
            label: encoded[i].label,
        });
    }

    let mut params = params;
    let mut adam = Adam::new(&params, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lw = &config.loss_weights;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        train_idx.shuffle(&mut rng);
        for batch in train_idx.chunks(config.batch_size) {
            let mut graph = Graph::new();
            let w = params.register(&mut graph, true);
            let cfg = params.config().clone();
            let mut std_losses = Vec::with_capacity(batch.len());
            let mut pad_losses = Vec::with_capacity(batch.len());
            let mut att_losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let item = &encoded[i];
                let std_ex = make_standard_mlm(&item.seq, &mut rng)?;
                let pad_ex = make_padded_mlm(&item.seq, &mut rng)?;
                std_losses.push(mlm_example_loss(&mut graph, &cfg, &w, &std_ex)?);
                pad_losses.push(mlm_example_loss(&mut graph, &cfg, &w, &pad_ex)?);
                let att_ex = AttributeExample {
                    seq: item.seq.clone(),
                    label: item.label,
                };
                att_losses.push(attribute_example_loss(&mut graph, &cfg, &w, &att_ex)?.0);
            }
            let s = mean(&mut graph, &std_losses)?;
            let s = graph.scale(s, lw.standard_mlm)?;
            let p = mean(&mut graph, &pad_losses)?;
            let p = graph.scale(p, lw.padded_mlm)?;
            let a = mean(&mut graph, &att_losses)?;
            let a = graph.scale(a, lw.attribute)?;
            let total = graph.add(s, p)?;
            let total = graph.add(total, a)?;
            let vars: Vec<Var> = w.iter().copied().collect();
            let grads = graph.backward(total, &vars)?;
            adam.step(&mut params, &grads.into_vec());
        }

        let metrics = if dev_idx.is_empty() {
            EpochMetrics {
                epoch,
                mlm_loss: f64::NAN,
                pad_mlm_loss: f64::NAN,
                att_loss: f64::NAN,
                dev_acc: f64::NAN,
            }
        } else {
            let (att_loss, dev_acc) = attribute_loss(&params, &dev_att)?;
            EpochMetrics {
                epoch,
                mlm_loss: mlm_loss(&params, &dev_std)?,
                pad_mlm_loss: mlm_loss(&params, &dev_pad)?,
                att_loss,
                dev_acc,
            }
        };
        on_epoch(&metrics);
        log.push(metrics);
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(params, vocab, corpus.attributes.clone())?,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_corpus, TemplateConfig};

    fn tiny_setup(n: usize) -> (ModelParams, Vocabulary, LabeledCorpus) {
        let corpus = generate_corpus(n, &TemplateConfig::default(), 3).unwrap().to_labeled();
        let vocab = Vocabulary::build(corpus.texts(), 1).unwrap();
        let config = ModelConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            ffn: 16,
            vocab_size: vocab.len(),
            num_attributes: corpus.attributes.len(),
            max_len: 32,
        };
        (ModelParams::init(&config, 5).unwrap(), vocab, corpus)
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-2,
            epochs,
            batch_size: 8,
            seed: 11,
            dev_fraction: 0.25,
            ..TrainConfig::default()
        }
    }

    fn fixed_batches(vocab: &Vocabulary, corpus: &LabeledCorpus) -> (Vec<MlmExample>, Vec<AttributeExample>) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let seqs: Vec<_> = corpus.sentences.iter().map(|s| (vocab.encode(&s.text), s.label)).collect();
        let mlm = seqs.iter().map(|(s, _)| make_standard_mlm(s, &mut rng).unwrap()).collect();
        let att = seqs.iter().map(|(s, l)| AttributeExample { seq: s.clone(), label: *l }).collect();
        (mlm, att)
    }

    #[test]
    fn training_lowers_both_losses() {
        let (params, vocab, corpus) = tiny_setup(48);
        let (mlm, att) = fixed_batches(&vocab, &corpus);
        let before = (mlm_loss(&params, &mlm).unwrap(), attribute_loss(&params, &att).unwrap().0);
        let out = train(params, vocab, &corpus, &quick(4), |_| {}).unwrap();
        let p = &out.checkpoint.params;
        let after = (mlm_loss(p, &mlm).unwrap(), attribute_loss(p, &att).unwrap().0);
        assert!(after.0 < before.0, "mlm {before:?} -> {after:?}");
        assert!(after.1 < before.1, "att {before:?} -> {after:?}");
        assert_eq!(out.log.len(), 4);
        assert_eq!(out.log.iter().map(|m| m.epoch).collect::<Vec<_>>(), [1, 2, 3, 4]);
    }

    #[test]
    fn fixed_seed_reproduces_checkpoint() {
        let (params, vocab, corpus) = tiny_setup(24);
        let a = train(params.clone(), vocab.clone(), &corpus, &quick(1), |_| {}).unwrap();
        let b = train(params, vocab, &corpus, &quick(1), |_| {}).unwrap();
        assert_eq!(a.checkpoint.hash(), b.checkpoint.hash());
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let (params, vocab, corpus) = tiny_setup(24);
        let out = train(params.clone(), vocab, &corpus, &quick(0), |_| {}).unwrap();
        assert_eq!(out.checkpoint.params, params);
        assert!(out.log.is_empty());
    }

    #[test]
    fn zero_heads_give_uniform_losses() {
        let (mut params, vocab, corpus) = tiny_setup(24);
        let w = params.weights_mut();
        w.lm_head.data_mut().fill(0.0);
        w.attribute_head.data_mut().fill(0.0);
        let (mlm, att) = fixed_batches(&vocab, &corpus);
        let v = vocab.len() as f64;
        assert!((mlm_loss(&params, &mlm).unwrap() - v.ln()).abs() < 1e-9);
        assert!((attribute_loss(&params, &att).unwrap().0 - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn rejects_single_class_and_bad_config() {
        let (params, vocab, mut corpus) = tiny_setup(24);
        corpus.sentences.retain(|s| s.label == 0);
        assert!(matches!(
            train(params.clone(), vocab.clone(), &corpus, &quick(1), |_| {}),
            Err(Error::SingleClass(1))
        ));
        let (params, vocab, corpus) = tiny_setup(24);
        let bad = TrainConfig { batch_size: 0, ..quick(1) };
        assert!(train(params, vocab, &corpus, &bad, |_| {}).is_err());
    }

    #[test]
    fn standard_masking_rate() {
        let seq = TokenSequence::new(
            std::iter::once(crate::tokenizer::CLS)
                .chain((0..20).map(|i| 10 + i))
                .chain(std::iter::once(crate::tokenizer::SEP))
                .collect(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 10_000;
        let total: usize = (0..draws).map(|_| make_standard_mlm(&seq, &mut rng).unwrap().targets.len()).sum();
        let mean = total as f64 / draws as f64;
        // About 3 per 20 tokens; redrawing empty picks nudges it to
        // 3 / (1 - 0.85^20).
        assert!((mean - 3.0).abs() < 0.3, "{mean}");
        let conditional = 3.0 / (1.0 - 0.85f64.powi(20));
        assert!((mean - conditional).abs() < 0.06, "{mean} vs {conditional}");
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (a, b) = split_indices(50, 0.2, 4);
        assert_eq!((a.len(), b.len()), (40, 10));
        assert_eq!(split_indices(50, 0.2, 4), (a.clone(), b.clone()));
        let mut all: Vec<_> = a.into_iter().chain(b).collect();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }
}
