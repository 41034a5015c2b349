//! Editable revision sessions.
//!
//! Every mutation is expressed as an [`Event`] that carries its full result,
//! so applying the journal of a session reproduces it without the model.

use reviser_core::model::Checkpoint;
use reviser_core::revision::{
    attribute_score, check_span, iterate, prepare_text, IterationRecord, RevisionConfig, SpanSelection,
};
use reviser_core::tokenizer::TokenSequence;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

/// A proposed iteration, not yet committed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub record: IterationRecord,
    /// Protection mask carried over to the proposed sequence.
    pub protected: Vec<bool>,
    /// `P(z* | output)`.
    pub zeta: f64,
}

/// Committed state that `undo` restores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub seq: TokenSequence,
    pub protected: Vec<bool>,
    pub zetas: Vec<f64>,
    pub trace: Vec<IterationRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    /// Hash of the checkpoint the session was created with.
    pub checkpoint: String,
    pub target: String,
    pub config: RevisionConfig,
    /// Whether `step` may pick the span itself when none is selected.
    pub auto_select: bool,
    pub undo_cap: usize,
    pub current: Snapshot,
    pub selection: Option<SpanSelection>,
    pub pending: Option<Proposal>,
    pub undo: Vec<Snapshot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Event {
    Create { session: Box<Session> },
    Select { span: SpanSelection },
    Step { proposal: Box<Proposal> },
    Accept,
    /// Drops the pending proposal if there is one, else restores the last
    /// committed state.
    Undo,
}

pub struct NewSession<'a> {
    pub id: String,
    pub text: &'a str,
    pub target: &'a str,
    pub config: RevisionConfig,
    pub auto_select: bool,
    pub undo_cap: usize,
}

impl Session {
    pub fn create(ckpt: &Checkpoint, req: NewSession<'_>) -> Result<Self, ApiError> {
        let target = ckpt.attribute_index(req.target)?;
        if req.config.target != target {
            return Err(ApiError::BadRequest("config target differs from the named attribute".into()));
        }
        req.config.validate(ckpt.attributes.len())?;
        let (seq, protected) = prepare_text(&ckpt.vocab, req.text);
        if seq.content_positions().next().is_none() {
            return Err(ApiError::BadRequest("empty text".into()));
        }
        let zeta = attribute_score(&ckpt.params, &seq, target)?;
        Ok(Self {
            id: req.id,
            checkpoint: ckpt.hash(),
            target: req.target.to_string(),
            config: req.config,
            auto_select: req.auto_select,
            undo_cap: req.undo_cap,
            current: Snapshot {
                seq,
                protected,
                zetas: vec![zeta],
                trace: Vec::new(),
            },
            selection: None,
            pending: None,
            undo: Vec::new(),
        })
    }

    pub fn select_event(&self, span: SpanSelection) -> Result<Event, ApiError> {
        check_span(&self.current.seq, span)?;
        Ok(Event::Select { span })
    }

    /// Runs one iteration on the committed sequence without committing it.
    pub fn step_event(&self, ckpt: &Checkpoint) -> Result<Event, ApiError> {
        if self.selection.is_none() && !self.auto_select {
            return Err(ApiError::Conflict("select a span before stepping".into()));
        }
        let cur = &self.current;
        let step = iterate(
            &ckpt.params,
            &cur.seq,
            &cur.protected,
            self.selection,
            &self.config,
            cur.trace.len(),
        )
        .map_err(|e| match e {
            reviser_core::Error::NothingSelectable => ApiError::Conflict("no selectable span".into()),
            e => e.into(),
        })?;
        let zeta = attribute_score(&ckpt.params, &step.record.output, self.config.target)?;
        Ok(Event::Step {
            proposal: Box::new(Proposal {
                record: step.record,
                protected: step.protected,
                zeta,
            }),
        })
    }

    pub fn accept_event(&self) -> Result<Event, ApiError> {
        if self.pending.is_none() {
            return Err(ApiError::Conflict("no pending proposal".into()));
        }
        Ok(Event::Accept)
    }

    pub fn undo_event(&self) -> Result<Event, ApiError> {
        if self.pending.is_none() && self.undo.is_empty() {
            return Err(ApiError::Conflict("nothing to undo".into()));
        }
        Ok(Event::Undo)
    }

    /// Applies a validated event. `Create` is only meaningful as the first
    /// journal entry and is rejected here.
    pub fn apply(&mut self, event: &Event) -> Result<(), ApiError> {
        match event {
            Event::Create { .. } => return Err(ApiError::Internal("create applied to a live session".into())),
            Event::Select { span } => {
                self.selection = Some(*span);
                self.pending = None;
            }
            Event::Step { proposal } => self.pending = Some((**proposal).clone()),
            Event::Accept => {
                let p = self
                    .pending
                    .take()
                    .ok_or_else(|| ApiError::Conflict("no pending proposal".into()))?;
                let next = Snapshot {
                    seq: p.record.output.clone(),
                    protected: p.protected,
                    zetas: [self.current.zetas.as_slice(), &[p.zeta]].concat(),
                    trace: [self.current.trace.as_slice(), std::slice::from_ref(&p.record)].concat(),
                };
                self.undo.push(std::mem::replace(&mut self.current, next));
                if self.undo.len() > self.undo_cap {
                    self.undo.remove(0);
                }
                self.selection = None;
            }
            Event::Undo => {
                if self.pending.take().is_none() {
                    self.current = self
                        .undo
                        .pop()
                        .ok_or_else(|| ApiError::Conflict("nothing to undo".into()))?;
                    self.selection = None;
                }
            }
        }
        Ok(())
    }

    /// Rebuilds a session from its journal.
    pub fn replay(events: &[Event]) -> Result<Self, ApiError> {
        let (first, rest) = events
            .split_first()
            .ok_or_else(|| ApiError::Internal("empty journal".into()))?;
        let Event::Create { session } = first else {
            return Err(ApiError::Internal("journal does not start with create".into()));
        };
        let mut s = (**session).clone();
        for e in rest {
            s.apply(e)?;
        }
        Ok(s)
    }
}
