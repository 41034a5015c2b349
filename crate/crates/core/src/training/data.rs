use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tokenizer::{is_special, TokenId, TokenSequence, LM_MASK, MASK, PAD};

/// Probability of masking each ordinary token in the standard objective.
pub const STANDARD_MASK_RATE: f64 = 0.15;
/// Width of the padded-span mask block.
pub const PADDED_SPAN_MASKS: usize = 3;

/// A corrupted sequence and the gold token behind each masked position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlmExample {
    pub corrupted: TokenSequence,
    pub targets: BTreeMap<usize, TokenId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeExample {
    pub seq: TokenSequence,
    pub label: usize,
}

fn maskable(seq: &TokenSequence) -> Result<Vec<usize>> {
    let positions: Vec<usize> = seq.content_positions().collect();
    if positions.is_empty() {
        return Err(Error::NoMaskableTokens);
    }
    Ok(positions)
}

/// Masks each ordinary token independently with probability 0.15,
/// redrawing until at least one position is masked.
pub fn make_standard_mlm<R: Rng + ?Sized>(seq: &TokenSequence, rng: &mut R) -> Result<MlmExample> {
    let positions = maskable(seq)?;
    let chosen = loop {
        let picks: Vec<usize> = positions
            .iter()
            .copied()
            .filter(|_| rng.gen_bool(STANDARD_MASK_RATE))
            .collect();
        if !picks.is_empty() {
            break picks;
        }
    };
    let mut ids = seq.ids().to_vec();
    let mut targets = BTreeMap::new();
    for p in chosen {
        targets.insert(p, ids[p]);
        ids[p] = MASK;
    }
    Ok(MlmExample {
        corrupted: TokenSequence::new(ids)?,
        targets,
    })
}

/// Replaces the ordinary-token span `[start, start + len)` (`1 <= len <= 3`)
/// with three `[LM-MASK]` tokens. Targets are the span tokens followed by
/// `3 - len` `[PAD]`s.
pub fn make_padded_mlm_at(seq: &TokenSequence, start: usize, len: usize) -> Result<MlmExample> {
    if len == 0 || len > PADDED_SPAN_MASKS || start + len > seq.len() {
        return Err(Error::InvalidSpan {
            start,
            len,
            seq_len: seq.len(),
        });
    }
    let span = &seq.ids()[start..start + len];
    if span.iter().any(|&id| is_special(id)) {
        return Err(Error::ProtectedSpan);
    }
    let mut targets = BTreeMap::new();
    for k in 0..PADDED_SPAN_MASKS {
        targets.insert(start + k, span.get(k).copied().unwrap_or(PAD));
    }
    Ok(MlmExample {
        corrupted: seq.splice(start, len, &[LM_MASK; PADDED_SPAN_MASKS])?,
        targets,
    })
}

/// Draws a span length uniformly from the feasible lengths in `1..=3`, then
/// a start uniformly among contiguous runs of ordinary tokens.
pub fn make_padded_mlm<R: Rng + ?Sized>(seq: &TokenSequence, rng: &mut R) -> Result<MlmExample> {
    maskable(seq)?;
    let ids = seq.ids();
    // Longest run of ordinary tokens bounds the feasible lengths.
    let mut longest = 0;
    let mut run = 0;
    for &id in ids {
        run = if is_special(id) { 0 } else { run + 1 };
        longest = longest.max(run);
    }
    let len = rng.gen_range(1..=longest.min(PADDED_SPAN_MASKS));
    let starts: Vec<usize> = (1..=ids.len().saturating_sub(len))
        .filter(|&s| ids[s..s + len].iter().all(|&id| !is_special(id)))
        .collect();
    let start = starts[rng.gen_range(0..starts.len())];
    make_padded_mlm_at(seq, start, len)
}
