//! Symbolic note events: the shared currency between every pipeline.
//!
//! A [`NoteSequence`] is a list of [`NoteEvent`]s kept sorted by
//! `(onset, pitch)`. Sequences come from the plain-text note CSV format
//! (`onset,duration,pitch,velocity`, `#` comments) or from Standard MIDI
//! Files, see [`crate::midi`].

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while building or transforming note data.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum NotesError {
    #[error("malformed note line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("invalid note event: {0}")]
    InvalidEvent(String),
    #[error("pitch {pitch} shifted by {semitones} leaves the MIDI range 0..=127")]
    PitchOutOfRange { pitch: u8, semitones: i32 },
    #[error("time scale factor must be positive and finite, got {0}")]
    NonPositiveFactor(f64),
}

/// One timed, pitched event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    /// Onset in seconds.
    pub onset: f64,
    /// Duration in seconds.
    pub duration: f64,
    /// MIDI note number.
    pub pitch: u8,
    pub velocity: u8,
}

impl NoteEvent {
    /// Builds a validated event.
    pub fn new(onset: f64, duration: f64, pitch: u8, velocity: u8) -> Result<Self, NotesError> {
        let ev = NoteEvent {
            onset,
            duration,
            pitch,
            velocity,
        };
        ev.validate()?;
        Ok(ev)
    }

    pub fn validate(&self) -> Result<(), NotesError> {
        if !(self.onset.is_finite() && self.onset >= 0.0) {
            return Err(NotesError::InvalidEvent(format!(
                "onset must be finite and non-negative, got {}",
                self.onset
            )));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(NotesError::InvalidEvent(format!(
                "duration must be finite and positive, got {}",
                self.duration
            )));
        }
        if self.pitch > 127 {
            return Err(NotesError::InvalidEvent(format!(
                "pitch {} outside 0..=127",
                self.pitch
            )));
        }
        if !(1..=127).contains(&self.velocity) {
            return Err(NotesError::InvalidEvent(format!(
                "velocity {} outside 1..=127",
                self.velocity
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn end(&self) -> f64 {
        self.onset + self.duration
    }

    /// Pitch class, `0 = C` through `11 = B`.
    #[inline]
    pub fn pitch_class(&self) -> usize {
        (self.pitch % 12) as usize
    }
}

/// Ordering used everywhere a sequence is sorted.
pub(crate) fn event_order(a: &NoteEvent, b: &NoteEvent) -> Ordering {
    a.onset
        .total_cmp(&b.onset)
        .then(a.pitch.cmp(&b.pitch))
        .then(a.duration.total_cmp(&b.duration))
        .then(a.velocity.cmp(&b.velocity))
}

/// A document or query on the symbolic side.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NoteSequence {
    pub id: String,
    events: Vec<NoteEvent>,
}

impl NoteSequence {
    /// Validates every event and sorts by `(onset, pitch)`.
    pub fn new(id: impl Into<String>, mut events: Vec<NoteEvent>) -> Result<Self, NotesError> {
        for ev in &events {
            ev.validate()?;
        }
        events.sort_by(event_order);
        Ok(NoteSequence {
            id: id.into(),
            events,
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn events(&self) -> &[NoteEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<NoteEvent> {
        self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Latest note end, 0 for an empty sequence.
    pub fn end_time(&self) -> f64 {
        self.events.iter().map(NoteEvent::end).fold(0.0, f64::max)
    }

    /// Events with onset in `[start, end)`, shifted so that `start` maps to 0.
    pub fn excerpt(&self, start: f64, end: f64) -> NoteSequence {
        let events = self
            .events
            .iter()
            .filter(|e| e.onset >= start && e.onset < end)
            .map(|e| NoteEvent {
                onset: e.onset - start,
                ..*e
            })
            .collect::<Vec<_>>();
        NoteSequence {
            id: self.id.clone(),
            events,
        }
    }
}

/// Shifts every pitch by `semitones`.
pub fn transpose(seq: &NoteSequence, semitones: i32) -> Result<NoteSequence, NotesError> {
    let events = seq
        .events
        .iter()
        .map(|e| {
            let p = e.pitch as i32 + semitones;
            if !(0..=127).contains(&p) {
                return Err(NotesError::PitchOutOfRange {
                    pitch: e.pitch,
                    semitones,
                });
            }
            Ok(NoteEvent {
                pitch: p as u8,
                ..*e
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    // Order by (onset, pitch) is preserved by a uniform shift.
    Ok(NoteSequence {
        id: seq.id.clone(),
        events,
    })
}

/// Multiplies every onset and duration by `factor`.
pub fn time_scale(seq: &NoteSequence, factor: f64) -> Result<NoteSequence, NotesError> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(NotesError::NonPositiveFactor(factor));
    }
    let mut events = seq
        .events
        .iter()
        .map(|e| NoteEvent {
            onset: e.onset * factor,
            duration: e.duration * factor,
            ..*e
        })
        .collect::<Vec<_>>();
    events.sort_by(event_order);
    Ok(NoteSequence {
        id: seq.id.clone(),
        events,
    })
}

const ID_PREFIX: &str = "# id=";

/// Parses the note CSV format.
///
/// Lines are `onset,duration,pitch,velocity`; blank lines and lines whose
/// first non-blank character is `#` are skipped. A leading `# id=<id>`
/// comment sets the sequence id. Line numbers in errors are 1-based.
pub fn parse_note_csv(text: &str) -> Result<NoteSequence, NotesError> {
    let mut id = String::new();
    let mut events = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if let Some(rest) = line.strip_prefix(ID_PREFIX) {
                id = rest.to_string();
            }
            continue;
        }
        events.push(parse_note_line(line, line_no)?);
    }
    events.sort_by(event_order);
    Ok(NoteSequence { id, events })
}

fn parse_note_line(line: &str, line_no: usize) -> Result<NoteEvent, NotesError> {
    let bad = |reason: String| NotesError::MalformedLine {
        line: line_no,
        reason,
    };
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 4 {
        return Err(bad(format!("expected 4 fields, found {}", fields.len())));
    }
    let onset: f64 = fields[0]
        .parse()
        .map_err(|_| bad(format!("bad onset {:?}", fields[0])))?;
    let duration: f64 = fields[1]
        .parse()
        .map_err(|_| bad(format!("bad duration {:?}", fields[1])))?;
    let pitch: i64 = fields[2]
        .parse()
        .map_err(|_| bad(format!("bad pitch {:?}", fields[2])))?;
    let velocity: i64 = fields[3]
        .parse()
        .map_err(|_| bad(format!("bad velocity {:?}", fields[3])))?;
    if !(0..=127).contains(&pitch) {
        return Err(bad(format!("pitch {pitch} outside 0..=127")));
    }
    if !(1..=127).contains(&velocity) {
        return Err(bad(format!("velocity {velocity} outside 1..=127")));
    }
    NoteEvent::new(onset, duration, pitch as u8, velocity as u8).map_err(|e| bad(e.to_string()))
}

/// Serializes to the note CSV format. Floats use the shortest
/// representation that parses back to the same value.
pub fn to_note_csv(seq: &NoteSequence) -> String {
    let mut out = String::new();
    if !seq.id.is_empty() {
        let _ = writeln!(out, "{ID_PREFIX}{}", seq.id);
    }
    out.push_str("# onset,duration,pitch,velocity\n");
    for e in &seq.events {
        let _ = writeln!(
            out,
            "{:?},{:?},{},{}",
            e.onset, e.duration, e.pitch, e.velocity
        );
    }
    out
}
