//! Deterministic attribute-labeled synthetic corpus.
//!
//! Sentences come from templates over a neutral vocabulary. Each template
//! holds one or two lexicon slots, and every slot in a sentence is filled
//! from the same side of a paired informal/formal lexicon, so the label is
//! known exactly and the other side gives a parallel "twin" sentence.
//! Entity slots draw capitalized names and are tagged.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledCorpus, LabeledSentence};
use crate::error::{Error, Result};

pub const INFORMAL: usize = 0;
pub const FORMAL: usize = 1;
pub const ATTRIBUTE_NAMES: [&str; 2] = ["informal", "formal"];

/// One informal/formal token pair filling a lexicon slot category.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StylePair {
    pub category: String,
    pub informal: String,
    pub formal: String,
}

impl StylePair {
    pub fn side(&self, label: usize) -> &str {
        if label == FORMAL {
            &self.formal
        } else {
            &self.informal
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StylePairLexicon {
    pub pairs: Vec<StylePair>,
    /// Neutral filler words per slot name.
    pub neutral: BTreeMap<String, Vec<String>>,
    pub entities: Vec<String>,
}

/// Templates are whitespace-separated tokens. `{NAME}` marks a slot:
/// `{E}` is an entity, a lexicon category (e.g. `{ADJ}`) is a lexicon slot,
/// and anything else must name a neutral filler list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateConfig {
    pub templates: Vec<String>,
    pub lexicon: StylePairLexicon,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSentence {
    pub tokens: Vec<String>,
    pub label: usize,
    /// Sequence positions (with `[CLS]` at 0) of the lexicon tokens.
    pub attr_positions: Vec<usize>,
    /// Sequence positions (with `[CLS]` at 0) of the entity tokens.
    pub entity_positions: Vec<usize>,
    /// Same sentence with every lexicon token swapped to the other side.
    pub twin: Vec<String>,
}

impl SynthSentence {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn twin_text(&self) -> String {
        self.twin.join(" ")
    }
}

/// Metadata line for one exported sentence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataRecord {
    /// 1-based line number in the exported TSV.
    pub line_no: usize,
    pub label: String,
    pub attr_positions: Vec<usize>,
    pub entity_positions: Vec<usize>,
    pub twin_text: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthCorpus {
    pub sentences: Vec<SynthSentence>,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for StylePairLexicon {
    fn default() -> Self {
        let pairs = [
            ("ADJ", "cool", "excellent"),
            ("ADJ", "crappy", "poor"),
            ("ADJ", "awesome", "impressive"),
            ("NOUN", "kids", "children"),
            ("NOUN", "stuff", "belongings"),
            ("NOUN", "buddies", "colleagues"),
            ("VERB", "grab", "acquire"),
            ("VERB", "check", "inspect"),
            ("ADV", "super", "very"),
            ("ADV", "totally", "entirely"),
        ]
        .into_iter()
        .map(|(category, informal, formal)| StylePair {
            category: category.into(),
            informal: informal.into(),
            formal: formal.into(),
        })
        .collect();
        let mut neutral = BTreeMap::new();
        neutral.insert(
            "N".to_string(),
            words(&[
                "book", "car", "house", "garden", "report", "meal", "movie", "song", "painting",
                "bike", "phone", "letter", "plan", "idea", "game", "photo", "lamp", "table",
                "chair", "shirt", "ticket", "map", "camera", "jacket", "boat", "clock", "guitar",
                "window", "kettle", "blanket", "bottle", "poster", "wallet", "radio", "desk",
                "mirror", "basket", "engine", "helmet", "notebook",
            ]),
        );
        neutral.insert(
            "P".to_string(),
            words(&[
                "park", "office", "school", "market", "station", "library", "museum", "store",
                "beach", "city", "village", "hotel", "cafe", "bank", "gallery", "airport",
                "harbor", "theater", "bakery", "stadium", "garage", "clinic", "bridge", "farm",
            ]),
        );
        neutral.insert(
            "T".to_string(),
            words(&[
                "today",
                "yesterday",
                "tomorrow",
                "tonight",
                "again",
                "later",
                "soon",
                "recently",
                "twice",
            ]),
        );
        neutral.insert(
            "S".to_string(),
            words(&["i", "we", "they", "she", "he", "you"]),
        );
        neutral.insert(
            "V".to_string(),
            words(&[
                "saw", "found", "liked", "sold", "painted", "brought", "showed", "gave", "left",
                "moved", "kept", "lost", "washed", "carried", "borrowed", "returned", "opened",
                "tested", "packed",
            ]),
        );
        neutral.insert(
            "J".to_string(),
            words(&[
                "old", "new", "small", "large", "red", "blue", "green", "quiet", "busy", "long",
                "warm", "dark", "heavy", "bright", "narrow", "soft", "empty", "plain", "round",
                "yellow",
            ]),
        );
        let entities = words(&[
            "Anna", "Ben", "Carla", "David", "Emma", "Frank", "Grace", "Henry", "Iris", "Jack",
            "Paris", "London", "Berlin", "Tokyo", "Rome", "Kate", "Leo", "Maria", "Nora", "Oscar",
            "Peter", "Madrid", "Oslo", "Vienna", "Dublin",
        ]);
        Self {
            pairs,
            neutral,
            entities,
        }
    }
}

impl Default for TemplateConfig {
    fn default() -> Self {
        let templates = [
            "{S} {V} a {ADJ} {N} at the {P} {T} .",
            "the {N} from {E} was {ADJ} .",
            "{E} said the {P} was {ADV} {J} .",
            "my {NOUN} {V} the {J} {N} {T} .",
            "{S} will {VERB} the {N} at the {P} .",
            "the {NOUN} liked the {J} {N} .",
            "{E} and {S} {V} a {ADJ} {N} .",
            "{S} can {VERB} my {N} near the {P} {T} .",
            "our {NOUN} in {E} have a {J} {N} .",
            "that {N} was {ADV} {J} !",
            "{S} {V} the {ADJ} {N} to {E} {T} .",
            "{E} will {VERB} the {J} {N} .",
            "the {P} near {E} is {ADV} {J} .",
            "{S} {ADV} liked this {N} .",
            "their {NOUN} {V} a {N} at the {P} .",
            "this {J} {N} is {ADJ} .",
            "{S} need to {VERB} some {N} {T} .",
            "the {N} in {E} was {ADV} {J} , {S} think .",
            "{E} {V} the {NOUN} a {J} {N} .",
            "it was a {ADJ} day at the {P} with {E} .",
        ];
        Self {
            templates: templates.iter().map(|s| s.to_string()).collect(),
            lexicon: StylePairLexicon::default(),
        }
    }
}

enum Slot<'a> {
    Literal(&'a str),
    Entity,
    Lexicon(Vec<usize>),
    Neutral(&'a [String]),
}

impl TemplateConfig {
    fn compile<'a>(&'a self, template: &'a str) -> Result<Vec<Slot<'a>>> {
        let mut slots = Vec::new();
        let mut lexicon_slots = 0;
        for tok in template.split_whitespace() {
            let Some(name) = tok.strip_prefix('{').and_then(|t| t.strip_suffix('}')) else {
                slots.push(Slot::Literal(tok));
                continue;
            };
            if name == "E" {
                slots.push(Slot::Entity);
                continue;
            }
            let pairs: Vec<usize> = self
                .lexicon
                .pairs
                .iter()
                .enumerate()
                .filter(|(_, p)| p.category == name)
                .map(|(i, _)| i)
                .collect();
            if !pairs.is_empty() {
                lexicon_slots += 1;
                slots.push(Slot::Lexicon(pairs));
            } else if let Some(list) = self.lexicon.neutral.get(name).filter(|l| !l.is_empty()) {
                slots.push(Slot::Neutral(list));
            } else {
                return Err(Error::InvalidArgument(format!(
                    "template {template:?}: unknown slot {{{name}}}"
                )));
            }
        }
        if !(1..=2).contains(&lexicon_slots) {
            return Err(Error::InvalidArgument(format!(
                "template {template:?} has {lexicon_slots} lexicon slots, expected 1 or 2"
            )));
        }
        Ok(slots)
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::InvalidArgument("no templates".into()));
        }
        let lex = &self.lexicon;
        let informal: Vec<&str> = lex.pairs.iter().map(|p| p.informal.as_str()).collect();
        let formal: Vec<&str> = lex.pairs.iter().map(|p| p.formal.as_str()).collect();
        if informal.iter().any(|t| formal.contains(t)) {
            return Err(Error::InvalidArgument("lexicon sides overlap".into()));
        }
        for list in lex.neutral.values() {
            if list
                .iter()
                .any(|w| informal.contains(&w.as_str()) || formal.contains(&w.as_str()))
            {
                return Err(Error::InvalidArgument(
                    "neutral vocabulary overlaps the lexicon".into(),
                ));
            }
        }
        if lex.entities.is_empty() && self.templates.iter().any(|t| t.contains("{E}")) {
            return Err(Error::InvalidArgument(
                "entity slot without entities".into(),
            ));
        }
        for t in &self.templates {
            self.compile(t)?;
        }
        Ok(())
    }
}

/// Generates `size` sentences, alternating labels so the classes are
/// balanced to within one sentence.
pub fn generate_corpus(size: usize, config: &TemplateConfig, seed: u64) -> Result<SynthCorpus> {
    if size == 0 {
        return Err(Error::InvalidArgument(
            "corpus size must be positive".into(),
        ));
    }
    config.validate()?;
    let compiled: Vec<Vec<Slot>> = config
        .templates
        .iter()
        .map(|t| config.compile(t))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lex = &config.lexicon;
    let mut sentences = Vec::with_capacity(size);
    for i in 0..size {
        let label = if i % 2 == 0 { INFORMAL } else { FORMAL };
        let slots = compiled.choose(&mut rng).expect("templates validated");
        let mut tokens = Vec::with_capacity(slots.len());
        let mut twin = Vec::with_capacity(slots.len());
        let mut attr_positions = Vec::new();
        let mut entity_positions = Vec::new();
        for slot in slots {
            let pos = tokens.len() + 1;
            match slot {
                Slot::Literal(w) => {
                    tokens.push(w.to_string());
                    twin.push(w.to_string());
                }
                Slot::Entity => {
                    let name = lex.entities[rng.gen_range(0..lex.entities.len())].clone();
                    entity_positions.push(pos);
                    tokens.push(name.clone());
                    twin.push(name);
                }
                Slot::Neutral(list) => {
                    let w = list[rng.gen_range(0..list.len())].clone();
                    tokens.push(w.clone());
                    twin.push(w);
                }
                Slot::Lexicon(pairs) => {
                    let pair = &lex.pairs[pairs[rng.gen_range(0..pairs.len())]];
                    attr_positions.push(pos);
                    tokens.push(pair.side(label).to_string());
                    twin.push(pair.side(1 - label).to_string());
                }
            }
        }
        sentences.push(SynthSentence {
            tokens,
            label,
            attr_positions,
            entity_positions,
            twin,
        });
    }
    Ok(SynthCorpus { sentences })
}

impl SynthCorpus {
    pub fn to_labeled(&self) -> LabeledCorpus {
        LabeledCorpus {
            attributes: ATTRIBUTE_NAMES.iter().map(|s| s.to_string()).collect(),
            sentences: self
                .sentences
                .iter()
                .map(|s| LabeledSentence {
                    label: s.label,
                    text: s.text(),
                })
                .collect(),
        }
    }

    pub fn metadata(&self) -> Vec<MetadataRecord> {
        self.sentences
            .iter()
            .enumerate()
            .map(|(i, s)| MetadataRecord {
                line_no: i + 1,
                label: ATTRIBUTE_NAMES[s.label].to_string(),
                attr_positions: s.attr_positions.clone(),
                entity_positions: s.entity_positions.clone(),
                twin_text: s.twin_text(),
            })
            .collect()
    }

    /// Returns `(tsv, metadata_json)`.
    pub fn export(&self) -> Result<(String, String)> {
        if self.sentences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok((
            self.to_labeled().to_tsv(),
            serde_json::to_string_pretty(&self.metadata())?,
        ))
    }

    pub fn export_to(
        &self,
        tsv_path: &std::path::Path,
        metadata_path: &std::path::Path,
    ) -> Result<()> {
        let (tsv, meta) = self.export()?;
        std::fs::write(tsv_path, tsv)?;
        std::fs::write(metadata_path, meta)?;
        Ok(())
    }

    /// Inverse of [`SynthCorpus::export`].
    pub fn import(tsv: &str, metadata_json: &str) -> Result<Self> {
        let names: Vec<String> = ATTRIBUTE_NAMES.iter().map(|s| s.to_string()).collect();
        let labeled = LabeledCorpus::parse_tsv(tsv, Some(&names))?;
        let meta: Vec<MetadataRecord> = serde_json::from_str(metadata_json)?;
        if meta.len() != labeled.sentences.len() {
            return Err(Error::Format(format!(
                "{} metadata records for {} sentences",
                meta.len(),
                labeled.sentences.len()
            )));
        }
        let sentences = labeled
            .sentences
            .into_iter()
            .zip(meta)
            .enumerate()
            .map(|(i, (s, m))| {
                if m.line_no != i + 1 || ATTRIBUTE_NAMES[s.label] != m.label {
                    return Err(Error::Format(format!(
                        "metadata record {} does not match its line",
                        i + 1
                    )));
                }
                let tokens: Vec<String> = s.text.split_whitespace().map(str::to_string).collect();
                let twin: Vec<String> =
                    m.twin_text.split_whitespace().map(str::to_string).collect();
                let in_range = |p: &usize| *p >= 1 && *p <= tokens.len();
                if !m.attr_positions.iter().all(in_range)
                    || !m.entity_positions.iter().all(in_range)
                {
                    return Err(Error::Format(format!(
                        "metadata record {} has positions out of range",
                        i + 1
                    )));
                }
                Ok(SynthSentence {
                    tokens,
                    label: s.label,
                    attr_positions: m.attr_positions,
                    entity_positions: m.entity_positions,
                    twin,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { sentences })
    }
}
