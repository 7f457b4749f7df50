//! Standard MIDI File (format 0 and 1) reader producing [`NoteSequence`]s.
//!
//! Tick times are converted to seconds through the merged tempo map of all
//! tracks (120 BPM until the first tempo event). Channel and program data
//! are dropped. A note-on for a key that is already sounding closes the
//! earlier note at the new onset. Note-ons still open at the end of their
//! track are closed there and reported as [`MidiWarning::DanglingNoteOn`].

use std::collections::HashMap;

use thiserror::Error;

use crate::notes::{event_order, NoteEvent, NoteSequence};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MidiError {
    #[error("not a Standard MIDI File: {0}")]
    BadHeader(String),
    #[error("chunk truncated at byte {0}")]
    TruncatedChunk(usize),
    #[error("unsupported MIDI file format {0}")]
    UnsupportedFormat(u16),
    #[error("malformed track data at byte {0}: {1}")]
    BadEvent(usize, String),
}

/// Non-fatal irregularities found while reading.
#[derive(Debug, Clone, PartialEq)]
pub enum MidiWarning {
    /// A note-on never matched by a note-off; closed at end of track.
    DanglingNoteOn { pitch: u8, track: usize },
    /// A dangling note whose end of track coincided with its onset was dropped.
    DroppedZeroLength { pitch: u8, track: usize },
}

impl std::fmt::Display for MidiWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MidiWarning::DanglingNoteOn { pitch, track } => {
                write!(
                    f,
                    "track {track}: note {pitch} never released, closed at end of track"
                )
            }
            MidiWarning::DroppedZeroLength { pitch, track } => {
                write!(
                    f,
                    "track {track}: unreleased note {pitch} had zero length and was dropped"
                )
            }
        }
    }
}

const DEFAULT_TEMPO_US: u32 = 500_000;

#[derive(Debug, Clone, Copy)]
enum Timing {
    /// Ticks per quarter note.
    Metrical(u16),
    /// Ticks per second for SMPTE divisions.
    Timecode(f64),
}

#[derive(Debug)]
struct RawNote {
    start: u64,
    end: u64,
    pitch: u8,
    velocity: u8,
}

/// Parses a format 0 or 1 file into a sorted sequence, discarding warnings.
pub fn parse_midi(bytes: &[u8]) -> Result<NoteSequence, MidiError> {
    parse_midi_with_warnings(bytes).map(|(seq, _)| seq)
}

pub fn parse_midi_with_warnings(
    bytes: &[u8],
) -> Result<(NoteSequence, Vec<MidiWarning>), MidiError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let (tag, header) = cur.chunk()?;
    if &tag != b"MThd" {
        return Err(MidiError::BadHeader(format!(
            "expected MThd, found {:?}",
            String::from_utf8_lossy(&tag)
        )));
    }
    if header.len() < 6 {
        return Err(MidiError::BadHeader(
            "header chunk shorter than 6 bytes".into(),
        ));
    }
    let format = u16::from_be_bytes([header[0], header[1]]);
    let ntracks = u16::from_be_bytes([header[2], header[3]]);
    let division = u16::from_be_bytes([header[4], header[5]]);
    if format > 1 {
        return Err(MidiError::UnsupportedFormat(format));
    }
    let timing = if division & 0x8000 == 0 {
        if division == 0 {
            return Err(MidiError::BadHeader("zero ticks per quarter note".into()));
        }
        Timing::Metrical(division)
    } else {
        let fps = match (division >> 8) as u8 as i8 {
            -24 => 24.0,
            -25 => 25.0,
            -29 => 29.97,
            -30 => 30.0,
            other => {
                return Err(MidiError::BadHeader(format!(
                    "bad SMPTE frame rate {other}"
                )));
            }
        };
        let per_frame = (division & 0xff) as f64;
        if per_frame == 0.0 {
            return Err(MidiError::BadHeader("zero ticks per SMPTE frame".into()));
        }
        Timing::Timecode(fps * per_frame)
    };

    let mut tempo_events: Vec<(u64, u32)> = Vec::new();
    let mut notes: Vec<RawNote> = Vec::new();
    let mut warnings = Vec::new();
    let mut track_idx = 0usize;
    while !cur.at_end() && track_idx < ntracks as usize {
        let chunk_start = cur.pos;
        let (tag, data) = cur.chunk()?;
        if &tag != b"MTrk" {
            // Alien chunks are skipped.
            continue;
        }
        read_track(
            data,
            chunk_start + 8,
            track_idx,
            &mut tempo_events,
            &mut notes,
            &mut warnings,
        )?;
        track_idx += 1;
    }
    if track_idx < ntracks as usize {
        return Err(MidiError::TruncatedChunk(cur.pos));
    }

    let tempo = TempoMap::new(timing, tempo_events);
    let mut events = Vec::with_capacity(notes.len());
    for n in notes {
        let onset = tempo.seconds(n.start);
        let end = tempo.seconds(n.end);
        let duration = end - onset;
        if duration > 0.0 {
            events.push(NoteEvent {
                onset,
                duration,
                pitch: n.pitch,
                velocity: n.velocity.clamp(1, 127),
            });
        }
    }
    events.sort_by(event_order);
    let seq = NoteSequence::new("", events).map_err(|e| MidiError::BadEvent(0, e.to_string()))?;
    Ok((seq, warnings))
}

fn read_track(
    data: &[u8],
    base: usize,
    track: usize,
    tempo_events: &mut Vec<(u64, u32)>,
    notes: &mut Vec<RawNote>,
    warnings: &mut Vec<MidiWarning>,
) -> Result<(), MidiError> {
    let mut cur = Cursor {
        bytes: data,
        pos: 0,
    };
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    // (channel, pitch) -> (start tick, velocity)
    let mut open: HashMap<(u8, u8), (u64, u8)> = HashMap::new();
    let trunc = |pos: usize| MidiError::TruncatedChunk(base + pos);

    while !cur.at_end() {
        let delta = cur.varlen().map_err(|_| trunc(cur.pos))?;
        tick += delta as u64;
        let first = cur.u8().map_err(|_| trunc(cur.pos))?;
        let status = if first & 0x80 != 0 {
            first
        } else {
            let st = running.ok_or_else(|| {
                MidiError::BadEvent(base + cur.pos, "data byte without running status".into())
            })?;
            cur.pos -= 1;
            st
        };
        match status {
            0xff => {
                let kind = cur.u8().map_err(|_| trunc(cur.pos))?;
                let len = cur.varlen().map_err(|_| trunc(cur.pos))? as usize;
                let payload = cur.take(len).map_err(|_| trunc(cur.pos))?;
                match kind {
                    0x51 if len == 3 => {
                        let us = u32::from_be_bytes([0, payload[0], payload[1], payload[2]]);
                        if us > 0 {
                            tempo_events.push((tick, us));
                        }
                    }
                    0x2f => break,
                    _ => {}
                }
                running = None;
            }
            0xf0 | 0xf7 => {
                let len = cur.varlen().map_err(|_| trunc(cur.pos))? as usize;
                cur.take(len).map_err(|_| trunc(cur.pos))?;
                running = None;
            }
            0x80..=0xef => {
                running = Some(status);
                let kind = status & 0xf0;
                let channel = status & 0x0f;
                let nbytes = if kind == 0xc0 || kind == 0xd0 { 1 } else { 2 };
                let payload = cur.take(nbytes).map_err(|_| trunc(cur.pos))?;
                match kind {
                    0x90 if payload[1] > 0 => {
                        let key = (channel, payload[0] & 0x7f);
                        if let Some((start, vel)) = open.remove(&key) {
                            notes.push(RawNote {
                                start,
                                end: tick,
                                pitch: key.1,
                                velocity: vel,
                            });
                        }
                        open.insert(key, (tick, payload[1]));
                    }
                    0x80 | 0x90 => {
                        let key = (channel, payload[0] & 0x7f);
                        if let Some((start, vel)) = open.remove(&key) {
                            notes.push(RawNote {
                                start,
                                end: tick,
                                pitch: key.1,
                                velocity: vel,
                            });
                        }
                    }
                    _ => {}
                }
            }
            other => {
                return Err(MidiError::BadEvent(
                    base + cur.pos,
                    format!("unexpected status byte {other:#04x}"),
                ));
            }
        }
    }

    let mut dangling: Vec<_> = open.into_iter().collect();
    dangling.sort_by_key(|&((ch, p), (start, _))| (start, p, ch));
    for ((_, pitch), (start, velocity)) in dangling {
        if start < tick {
            warnings.push(MidiWarning::DanglingNoteOn { pitch, track });
            notes.push(RawNote {
                start,
                end: tick,
                pitch,
                velocity,
            });
        } else {
            warnings.push(MidiWarning::DroppedZeroLength { pitch, track });
        }
    }
    Ok(())
}

struct TempoMap {
    timing: Timing,
    /// (tick, seconds at tick, microseconds per quarter from tick on)
    segments: Vec<(u64, f64, u32)>,
}

impl TempoMap {
    fn new(timing: Timing, mut events: Vec<(u64, u32)>) -> Self {
        events.sort_by_key(|&(t, _)| t);
        let mut segments = vec![(0u64, 0.0f64, DEFAULT_TEMPO_US)];
        if let Timing::Metrical(ppq) = timing {
            for (tick, us) in events {
                let &(t0, s0, us0) = segments.last().expect("non-empty");
                let secs = s0 + (tick - t0) as f64 * us0 as f64 / 1e6 / ppq as f64;
                if tick == t0 {
                    // A later event at the same tick wins.
                    *segments.last_mut().expect("non-empty") = (t0, s0, us);
                } else {
                    segments.push((tick, secs, us));
                }
            }
        }
        TempoMap { timing, segments }
    }

    fn seconds(&self, tick: u64) -> f64 {
        match self.timing {
            Timing::Timecode(ticks_per_sec) => tick as f64 / ticks_per_sec,
            Timing::Metrical(ppq) => {
                let i = self.segments.partition_point(|&(t, _, _)| t <= tick) - 1;
                let (t0, s0, us) = self.segments[i];
                s0 + (tick - t0) as f64 * us as f64 / 1e6 / ppq as f64
            }
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn at_end(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn u8(&mut self) -> Result<u8, ()> {
        let b = *self.bytes.get(self.pos).ok_or(())?;
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ()> {
        let end = self.pos.checked_add(n).ok_or(())?;
        let s = self.bytes.get(self.pos..end).ok_or(())?;
        self.pos = end;
        Ok(s)
    }

    fn varlen(&mut self) -> Result<u32, ()> {
        let mut v: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            v = (v << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(())
    }

    fn chunk(&mut self) -> Result<([u8; 4], &'a [u8]), MidiError> {
        let start = self.pos;
        let head = self.take(8).map_err(|_| {
            if start == 0 {
                MidiError::BadHeader("file shorter than a chunk header".into())
            } else {
                MidiError::TruncatedChunk(start)
            }
        })?;
        let tag = [head[0], head[1], head[2], head[3]];
        let len = u32::from_be_bytes([head[4], head[5], head[6], head[7]]) as usize;
        if start == 0 && &tag != b"MThd" {
            return Err(MidiError::BadHeader(format!(
                "expected MThd, found {:?}",
                String::from_utf8_lossy(&tag)
            )));
        }
        let data = self
            .take(len)
            .map_err(|_| MidiError::TruncatedChunk(start))?;
        Ok((tag, data))
    }
}
