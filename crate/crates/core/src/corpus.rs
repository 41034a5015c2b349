//! Plain and labeled corpus files.
//!
//! A plain corpus is UTF-8 with one sentence per line. A labeled corpus is
//! TSV, `label<TAB>sentence` per line. Blank lines are skipped in both.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSentence {
    pub label: usize,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledCorpus {
    /// Attribute names; a sentence's `label` indexes this list.
    pub attributes: Vec<String>,
    pub sentences: Vec<LabeledSentence>,
}

impl LabeledCorpus {
    /// Parses TSV. With `attributes = None` the label set is discovered in
    /// order of first appearance; otherwise every label must be listed.
    pub fn parse_tsv(text: &str, attributes: Option<&[String]>) -> Result<Self> {
        let mut names: Vec<String> = attributes.map(<[String]>::to_vec).unwrap_or_default();
        let fixed = attributes.is_some();
        let mut sentences = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() {
                continue;
            }
            let (label, sentence) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!("line {}: expected label<TAB>sentence", n + 1))
            })?;
            let label = label.trim();
            if label.is_empty() {
                return Err(Error::Format(format!("line {}: empty label", n + 1)));
            }
            let idx = match names.iter().position(|a| a == label) {
                Some(i) => i,
                None if fixed => return Err(Error::UnknownAttribute(label.to_string())),
                None => {
                    names.push(label.to_string());
                    names.len() - 1
                }
            };
            sentences.push(LabeledSentence {
                label: idx,
                text: sentence.trim().to_string(),
            });
        }
        Ok(Self {
            attributes: names,
            sentences,
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            out.push_str(&self.attributes[s.label]);
            out.push('\t');
            out.push_str(&s.text);
            out.push('\n');
        }
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_tsv(&std::fs::read_to_string(path)?, None)
    }

    /// Number of distinct labels that actually occur.
    pub fn classes_present(&self) -> usize {
        let mut seen = vec![false; self.attributes.len()];
        for s in &self.sentences {
            seen[s.label] = true;
        }
        seen.into_iter().filter(|&b| b).count()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.sentences.iter().map(|s| s.text.as_str())
    }
}

/// Non-blank lines of a plain corpus, trimmed.
pub fn parse_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_round_trips() {
        let text = "formal\tgood day .\ninformal\tyo dude !\r\n\nformal\tthank you .\n";
        let c = LabeledCorpus::parse_tsv(text, None).unwrap();
        assert_eq!(c.attributes, ["formal", "informal"]);
        assert_eq!(c.sentences.len(), 3);
        assert_eq!(c.sentences[1].label, 1);
        assert_eq!(c.classes_present(), 2);
        let again = LabeledCorpus::parse_tsv(&c.to_tsv(), None).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(LabeledCorpus::parse_tsv("no tab here", None).is_err());
        assert!(LabeledCorpus::parse_tsv("\tmissing label", None).is_err());
        let names = vec!["a".to_string()];
        assert!(matches!(
            LabeledCorpus::parse_tsv("b\tsentence", Some(&names)),
            Err(Error::UnknownAttribute(_))
        ));
    }

    #[test]
    fn plain_lines() {
        assert_eq!(parse_lines(" a b \n\n c\n"), ["a b", "c"]);
    }
}
