//! Evaluation metrics: SARI, BLEU, FKGL, sentence length, formality
//! accuracy and the harmonic/geometric aggregates.
//!
//! All metrics tokenize with the same lowercasing word splitter as the
//! model vocabulary, so punctuation marks are separate tokens.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::tokenizer::split_words;

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub source: String,
    pub output: String,
    pub references: Vec<String>,
}

impl EvalInstance {
    pub fn new(source: impl Into<String>, output: impl Into<String>, references: Vec<String>) -> Result<Self> {
        let inst = Self {
            source: source.into(),
            output: output.into(),
            references,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        if self.source.trim().is_empty() || self.output.trim().is_empty() {
            return Err(Error::InvalidArgument("source and output must be nonempty".into()));
        }
        if self.references.is_empty() || self.references.iter().any(|r| r.trim().is_empty()) {
            return Err(Error::InvalidArgument("at least one nonempty reference is required".into()));
        }
        Ok(())
    }
}

pub fn tokens(text: &str) -> Vec<String> {
    split_words(text).into_iter().map(|w| w.text).collect()
}

type Counts<'a> = HashMap<&'a [String], usize>;

fn ngrams(toks: &[String], n: usize) -> Counts<'_> {
    let mut out = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn scaled<'a>(c: &Counts<'a>, k: usize) -> Counts<'a> {
    c.iter().map(|(&g, &v)| (g, v * k)).collect()
}

/// Multiset intersection.
fn and<'a>(a: &Counts<'a>, b: &Counts<'a>) -> Counts<'a> {
    a.iter()
        .filter_map(|(&g, &v)| b.get(g).map(|&w| (g, v.min(w))))
        .filter(|&(_, v)| v > 0)
        .collect()
}

/// Multiset difference, dropping non-positive counts.
fn minus<'a>(a: &Counts<'a>, b: &Counts<'a>) -> Counts<'a> {
    a.iter()
        .filter_map(|(&g, &v)| {
            let d = v.saturating_sub(b.get(g).copied().unwrap_or(0));
            (d > 0).then_some((g, d))
        })
        .collect()
}

fn get(c: &Counts, g: &[String]) -> f64 {
    c.get(g).copied().unwrap_or(0) as f64
}

fn f1(p: f64, r: f64) -> f64 {
    if p > 0.0 || r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SariScore {
    pub sari: f64,
    pub add_f1: f64,
    pub keep_f1: f64,
    /// F1 of deletions, or deletion precision when requested.
    pub delete_f1: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeleteScore {
    #[default]
    F1,
    /// Precision only, as in the original reference implementation.
    Precision,
}

/// Per-order `(keep, delete, add)` scores in `[0, 1]`.
///
/// Follows the reference SARI algorithm: source and output n-gram counts
/// are replicated by the number of references and compared against the
/// pooled reference counts. Two conventions differ from that code: delete
/// recall divides its own accumulator (the reference code reuses the
/// precision one), recall terms for n-grams absent from the references
/// are zero rather than 0/0, and an operation whose predicted and gold sets are both
/// empty scores 1.
fn sari_order(s: &Counts, c: &Counts, refs: &[Counts], delete: DeleteScore) -> (f64, f64, f64) {
    let numref = refs.len();
    let mut r: Counts = HashMap::new();
    for rc in refs {
        for (&g, &v) in rc {
            *r.entry(g).or_insert(0) += v;
        }
    }
    let s_rep = scaled(s, numref);
    let c_rep = scaled(c, numref);

    let keep = and(&s_rep, &c_rep);
    let keep_good = and(&keep, &r);
    let keep_all = and(&s_rep, &r);
    let keep_score = if keep.is_empty() && keep_all.is_empty() {
        1.0
    } else {
        let p = if keep.is_empty() {
            0.0
        } else {
            keep.keys().map(|g| get(&keep_good, g) / get(&keep, g)).sum::<f64>() / keep.len() as f64
        };
        let rc = if keep_all.is_empty() {
            0.0
        } else {
            keep.keys()
                .filter(|g| get(&keep_all, g) > 0.0)
                .map(|g| get(&keep_good, g) / get(&keep_all, g))
                .sum::<f64>()
                / keep_all.len() as f64
        };
        f1(p, rc)
    };

    let del = minus(&s_rep, &c_rep);
    let del_good = minus(&del, &r);
    let del_all = minus(&s_rep, &r);
    let del_score = if del.is_empty() && del_all.is_empty() {
        1.0
    } else {
        let p = if del.is_empty() {
            0.0
        } else {
            del.keys().map(|g| get(&del_good, g) / get(&del, g)).sum::<f64>() / del.len() as f64
        };
        match delete {
            DeleteScore::Precision => p,
            DeleteScore::F1 => {
                let rc = if del_all.is_empty() {
                    0.0
                } else {
                    del.keys()
                        .filter(|g| get(&del_all, g) > 0.0)
                        .map(|g| get(&del_good, g) / get(&del_all, g))
                        .sum::<f64>()
                        / del_all.len() as f64
                };
                f1(p, rc)
            }
        }
    };

    let s_set: HashSet<&[String]> = s.keys().copied().collect();
    let r_set: HashSet<&[String]> = r.keys().copied().collect();
    let add: HashSet<&[String]> = c.keys().copied().filter(|g| !s_set.contains(g)).collect();
    let add_all: HashSet<&[String]> = r_set.difference(&s_set).copied().collect();
    let add_score = if add.is_empty() && add_all.is_empty() {
        1.0
    } else {
        let good = add.intersection(&r_set).count() as f64;
        let p = if add.is_empty() { 0.0 } else { good / add.len() as f64 };
        let rc = if add_all.is_empty() { 0.0 } else { good / add_all.len() as f64 };
        f1(p, rc)
    };
    (keep_score, del_score, add_score)
}

/// Sentence-level SARI on a 0-100 scale, averaged over n-gram orders 1-4.
pub fn sari_with(inst: &EvalInstance, delete: DeleteScore) -> Result<SariScore> {
    inst.validate()?;
    let src = tokens(&inst.source);
    let out = tokens(&inst.output);
    let refs: Vec<Vec<String>> = inst.references.iter().map(|r| tokens(r)).collect();
    let (mut keep, mut del, mut add) = (0.0, 0.0, 0.0);
    for n in 1..=MAX_ORDER {
        let ref_counts: Vec<Counts> = refs.iter().map(|r| ngrams(r, n)).collect();
        let (k, d, a) = sari_order(&ngrams(&src, n), &ngrams(&out, n), &ref_counts, delete);
        keep += k;
        del += d;
        add += a;
    }
    let m = MAX_ORDER as f64;
    let (keep, del, add) = (100.0 * keep / m, 100.0 * del / m, 100.0 * add / m);
    Ok(SariScore {
        sari: (keep + del + add) / 3.0,
        add_f1: add,
        keep_f1: keep,
        delete_f1: del,
    })
}

pub fn sari(inst: &EvalInstance) -> Result<SariScore> {
    sari_with(inst, DeleteScore::F1)
}

/// Mean of sentence-level scores.
pub fn corpus_sari(instances: &[EvalInstance], delete: DeleteScore) -> Result<SariScore> {
    if instances.is_empty() {
        return Err(Error::InvalidArgument("no instances".into()));
    }
    let mut acc = SariScore {
        sari: 0.0,
        add_f1: 0.0,
        keep_f1: 0.0,
        delete_f1: 0.0,
    };
    for inst in instances {
        let s = sari_with(inst, delete)?;
        acc.sari += s.sari;
        acc.add_f1 += s.add_f1;
        acc.keep_f1 += s.keep_f1;
        acc.delete_f1 += s.delete_f1;
    }
    let k = instances.len() as f64;
    Ok(SariScore {
        sari: acc.sari / k,
        add_f1: acc.add_f1 / k,
        keep_f1: acc.keep_f1 / k,
        delete_f1: acc.delete_f1 / k,
    })
}

/// Clipped match counts and totals per order, plus candidate and closest
/// reference lengths.
#[derive(Clone, Debug, Default, PartialEq)]
struct BleuStats {
    matches: [usize; MAX_ORDER],
    totals: [usize; MAX_ORDER],
    cand_len: usize,
    ref_len: usize,
}

fn bleu_stats(candidate: &[String], references: &[Vec<String>]) -> BleuStats {
    let mut st = BleuStats {
        cand_len: candidate.len(),
        ..Default::default()
    };
    // Closest reference length; ties go to the shorter one so the choice
    // does not depend on reference order.
    st.ref_len = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(candidate.len()), l))
        .unwrap_or(0);
    for n in 1..=MAX_ORDER {
        let cand = ngrams(candidate, n);
        let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
        for r in references {
            for (g, c) in ngrams(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        st.matches[n - 1] = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        st.totals[n - 1] = candidate.len().saturating_sub(n - 1);
    }
    st
}

fn bleu_from(st: &BleuStats, max_n: usize, smooth: bool) -> f64 {
    if st.cand_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let (mut m, mut t) = (st.matches[n] as f64, st.totals[n] as f64);
        // Add-one smoothing applies to orders above unigrams.
        if smooth && n > 0 {
            m += 1.0;
            t += 1.0;
        }
        if m == 0.0 || t == 0.0 {
            return 0.0;
        }
        log_sum += (m / t).ln();
    }
    let c = st.cand_len as f64;
    let r = st.ref_len as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    100.0 * bp * (log_sum / max_n as f64).exp()
}

fn check_max_n(max_n: usize) -> Result<()> {
    if !(1..=MAX_ORDER).contains(&max_n) {
        return Err(Error::InvalidArgument(format!("max_n must be in 1..={MAX_ORDER}")));
    }
    Ok(())
}

/// Sentence BLEU on a 0-100 scale.
pub fn bleu(candidate: &str, references: &[String], max_n: usize, smooth: bool) -> Result<f64> {
    check_max_n(max_n)?;
    let cand = tokens(candidate);
    if cand.is_empty() {
        return Err(Error::InvalidArgument("empty candidate".into()));
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokens(r)).collect();
    Ok(bleu_from(&bleu_stats(&cand, &refs), max_n, smooth))
}

/// Corpus BLEU: counts and lengths are summed over segments before the
/// precisions and brevity penalty are computed.
pub fn corpus_bleu(candidates: &[String], references: &[Vec<String>], max_n: usize, smooth: bool) -> Result<f64> {
    check_max_n(max_n)?;
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::InvalidArgument("need one reference list per candidate".into()));
    }
    let mut total = BleuStats::default();
    for (c, rs) in candidates.iter().zip(references) {
        let refs: Vec<Vec<String>> = rs.iter().map(|r| tokens(r)).collect();
        let st = bleu_stats(&tokens(c), &refs);
        for n in 0..MAX_ORDER {
            total.matches[n] += st.matches[n];
            total.totals[n] += st.totals[n];
        }
        total.cand_len += st.cand_len;
        total.ref_len += st.ref_len;
    }
    Ok(bleu_from(&total, max_n, smooth))
}

/// Syllables by vowel groups (`aeiouy`); a trailing silent `e` is dropped
/// when the word has more than one group. At least one per word.
pub fn syllables(word: &str) -> usize {
    let w: Vec<char> = word.to_lowercase().chars().filter(|c| c.is_alphabetic()).collect();
    let vowel = |c: char| "aeiouy".contains(c);
    let mut groups = 0;
    let mut prev = false;
    for &c in &w {
        let v = vowel(c);
        if v && !prev {
            groups += 1;
        }
        prev = v;
    }
    let n = w.len();
    if groups > 1 && n >= 2 && w[n - 1] == 'e' && !vowel(w[n - 2]) && !(n >= 3 && w[n - 2] == 'l' && !vowel(w[n - 3])) {
        groups -= 1;
    }
    groups.max(1)
}

/// `(words, sentences, syllables)` of one text. Words are tokens with an
/// alphanumeric character; sentences end at `.`, `!` or `?`, and a text
/// with words but no terminator counts as one sentence.
fn text_counts(text: &str) -> (usize, usize, usize) {
    let toks = tokens(text);
    let mut words = 0;
    let mut syl = 0;
    let mut sentences = 0;
    let mut open = false;
    for t in &toks {
        if t.chars().any(char::is_alphanumeric) {
            words += 1;
            syl += syllables(t);
            open = true;
        } else if matches!(t.as_str(), "." | "!" | "?") && open {
            sentences += 1;
            open = false;
        }
    }
    if open {
        sentences += 1;
    }
    (words, sentences, syl)
}

fn fkgl_from(words: usize, sentences: usize, syl: usize) -> Result<f64> {
    if words == 0 || sentences == 0 {
        return Err(Error::InvalidArgument("no words".into()));
    }
    Ok(0.39 * words as f64 / sentences as f64 + 11.8 * syl as f64 / words as f64 - 15.59)
}

/// Flesch-Kincaid grade level. May be negative.
pub fn fkgl(text: &str) -> Result<f64> {
    let (w, s, y) = text_counts(text);
    fkgl_from(w, s, y)
}

/// FKGL over a collection, pooling word, sentence and syllable counts.
pub fn corpus_fkgl<S: AsRef<str>>(texts: &[S]) -> Result<f64> {
    let (mut w, mut s, mut y) = (0, 0, 0);
    for t in texts {
        let (a, b, c) = text_counts(t.as_ref());
        w += a;
        s += b;
        y += c;
    }
    fkgl_from(w, s, y)
}

/// Mean number of words per sentence.
pub fn slen(text: &str) -> Result<f64> {
    corpus_slen(&[text])
}

pub fn corpus_slen<S: AsRef<str>>(texts: &[S]) -> Result<f64> {
    let (mut w, mut s) = (0, 0);
    for t in texts {
        let (a, b, _) = text_counts(t.as_ref());
        w += a;
        s += b;
    }
    if w == 0 {
        return Err(Error::InvalidArgument("no words".into()));
    }
    Ok(w as f64 / s as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Means {
    pub h: f64,
    pub g: f64,
}

/// Harmonic and geometric means of two scores in `[0, 100]`.
pub fn h_g_means(a: f64, b: f64) -> Result<Means> {
    if !(0.0..=100.0).contains(&a) || !(0.0..=100.0).contains(&b) {
        return Err(Error::InvalidArgument("scores must lie in [0, 100]".into()));
    }
    let h = if a + b == 0.0 { 0.0 } else { 2.0 * a * b / (a + b) };
    Ok(Means { h, g: (a * b).sqrt() })
}

/// Fraction of `outputs` the classifier assigns to `target`.
pub fn formality_accuracy<S: AsRef<str>>(outputs: &[S], classifier: &Checkpoint, target: &str) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::InvalidArgument("no outputs".into()));
    }
    let z = classifier.attribute_index(target)?;
    let p = &classifier.params;
    let mut hits = 0;
    for o in outputs {
        let seq = classifier.vocab.encode(o.as_ref());
        let dist = p.attribute_distribution(&p.forward(&seq)?)?;
        let best = crate::training::argmax(&dist);
        hits += usize::from(best == z);
    }
    Ok(hits as f64 / outputs.len() as f64)
}

/// Table-style report for simplification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplificationReport {
    #[serde(rename = "SARI")]
    pub sari: f64,
    #[serde(rename = "Add")]
    pub add: f64,
    #[serde(rename = "Keep")]
    pub keep: f64,
    #[serde(rename = "Delete")]
    pub delete: f64,
    #[serde(rename = "FKGL")]
    pub fkgl: f64,
    #[serde(rename = "SLen")]
    pub slen: f64,
}

pub fn simplification_report(instances: &[EvalInstance], delete: DeleteScore) -> Result<SimplificationReport> {
    let s = corpus_sari(instances, delete)?;
    let outputs: Vec<&str> = instances.iter().map(|i| i.output.as_str()).collect();
    Ok(SimplificationReport {
        sari: s.sari,
        add: s.add_f1,
        keep: s.keep_f1,
        delete: s.delete_f1,
        fkgl: corpus_fkgl(&outputs)?,
        slen: corpus_slen(&outputs)?,
    })
}

/// Table-style report for formalization. Formality is a percentage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormalizationReport {
    #[serde(rename = "BLEU")]
    pub bleu: f64,
    #[serde(rename = "Formality", skip_serializing_if = "Option::is_none")]
    pub formality: Option<f64>,
    #[serde(rename = "H-mean", skip_serializing_if = "Option::is_none")]
    pub h_mean: Option<f64>,
    #[serde(rename = "G-mean", skip_serializing_if = "Option::is_none")]
    pub g_mean: Option<f64>,
}

pub fn formalization_report(
    instances: &[EvalInstance],
    classifier: Option<(&Checkpoint, &str)>,
) -> Result<FormalizationReport> {
    for i in instances {
        i.validate()?;
    }
    let outputs: Vec<String> = instances.iter().map(|i| i.output.clone()).collect();
    let refs: Vec<Vec<String>> = instances.iter().map(|i| i.references.clone()).collect();
    let bleu = corpus_bleu(&outputs, &refs, MAX_ORDER, false)?;
    let (formality, h_mean, g_mean) = match classifier {
        Some((ck, target)) => {
            let acc = 100.0 * formality_accuracy(&outputs, ck, target)?;
            let m = h_g_means(bleu, acc)?;
            (Some(acc), Some(m.h), Some(m.g))
        }
        None => (None, None, None),
    };
    Ok(FormalizationReport {
        bleu,
        formality,
        h_mean,
        g_mean,
    })
}
