//! Seeded generator of plausible piano pieces and performance distortions.
//!
//! Pieces are random walks over a diatonic scale with occasional chord
//! tones and a sparse bass line, so that pitch intervals and rhythms look
//! like music rather than white noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::notes::{NoteEvent, NoteSequence};

const MAJOR: [i32; 7] = [0, 2, 4, 5, 7, 9, 11];
const MINOR: [i32; 7] = [0, 2, 3, 5, 7, 8, 10];
/// Note lengths in beats.
const RHYTHMS: [(f64, f64); 6] = [
    (0.25, 1.0),
    (0.5, 4.0),
    (0.75, 1.0),
    (1.0, 3.0),
    (1.5, 1.0),
    (2.0, 1.0),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PieceConfig {
    /// Approximate number of notes (melody, chord tones and bass).
    pub notes: usize,
    /// Tempo range in beats per minute.
    pub bpm: (f64, f64),
    /// Probability that a melody note gets added chord tones.
    pub chord_prob: f64,
    /// Probability that a bar starts with a bass note.
    pub bass_prob: f64,
}

impl Default for PieceConfig {
    fn default() -> Self {
        PieceConfig {
            notes: 300,
            bpm: (90.0, 140.0),
            chord_prob: 0.15,
            bass_prob: 0.8,
        }
    }
}

/// A generated piece with its metrical grid.
#[derive(Debug, Clone)]
pub struct SyntheticPiece {
    pub seq: NoteSequence,
    pub beat_seconds: f64,
    pub beats_per_bar: u32,
}

impl SyntheticPiece {
    /// Onset time of bar `n` (1-based).
    pub fn bar_time(&self, n: u32) -> f64 {
        (n.saturating_sub(1) * self.beats_per_bar) as f64 * self.beat_seconds
    }
}

fn weighted_rhythm(rng: &mut ChaCha8Rng) -> f64 {
    let total: f64 = RHYTHMS.iter().map(|r| r.1).sum();
    let mut x = rng.gen::<f64>() * total;
    for &(len, w) in &RHYTHMS {
        if x < w {
            return len;
        }
        x -= w;
    }
    RHYTHMS[RHYTHMS.len() - 1].0
}

/// Generates one piece. Identical `(id, seed, config)` give identical output.
pub fn generate_piece(id: &str, seed: u64, config: &PieceConfig) -> SyntheticPiece {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bpm = rng.gen_range(config.bpm.0..=config.bpm.1);
    let beat = 60.0 / bpm;
    let beats_per_bar = *[3u32, 4, 4].choose(&mut rng).expect("non-empty");
    let scale = if rng.gen_bool(0.6) { MAJOR } else { MINOR };
    let tonic = 60 + rng.gen_range(-5..=6);
    let pitch_of = |degree: i32| -> i32 {
        let oct = degree.div_euclid(7);
        tonic + 12 * oct + scale[degree.rem_euclid(7) as usize]
    };

    let mut events = Vec::with_capacity(config.notes + 16);
    let mut degree: i32 = rng.gen_range(0..7);
    let mut beat_pos = 0.0f64;
    let mut next_bar = 0.0f64;
    while events.len() < config.notes {
        // bass note at bar starts
        if beat_pos >= next_bar {
            if rng.gen_bool(config.bass_prob) {
                let root = [0, 3, 4, 5][rng.gen_range(0..4)];
                let p = pitch_of(root - 14);
                events.push(NoteEvent {
                    onset: next_bar * beat,
                    duration: beats_per_bar as f64 * beat * 0.9,
                    pitch: p.clamp(21, 108) as u8,
                    velocity: 60,
                });
            }
            next_bar += beats_per_bar as f64;
        }
        let step = match rng.gen_range(0..10) {
            0..=3 => 1,
            4..=7 => -1,
            8 => 2 * if rng.gen_bool(0.5) { 1 } else { -1 },
            _ => rng.gen_range(-4..=4),
        };
        degree = (degree + step).clamp(-7, 10);
        let len = weighted_rhythm(&mut rng);
        let p = pitch_of(degree).clamp(21, 108);
        let vel = rng.gen_range(60..=100);
        events.push(NoteEvent {
            onset: beat_pos * beat,
            duration: len * beat * 0.95,
            pitch: p as u8,
            velocity: vel,
        });
        if rng.gen_bool(config.chord_prob) {
            for extra in [-2, -4] {
                let cp = pitch_of(degree + extra).clamp(21, 108);
                if cp != p {
                    events.push(NoteEvent {
                        onset: beat_pos * beat,
                        duration: len * beat * 0.95,
                        pitch: cp as u8,
                        velocity: vel - 10,
                    });
                }
            }
        }
        beat_pos += len;
    }
    events.truncate(config.notes.max(3));
    let seq = NoteSequence::new(id, events).expect("generator emits valid events");
    SyntheticPiece {
        seq,
        beat_seconds: beat,
        beats_per_bar,
    }
}

/// A seeded corpus `piece-000 .. piece-{n-1}`.
pub fn generate_corpus(n: usize, seed: u64, config: &PieceConfig) -> Vec<SyntheticPiece> {
    (0..n)
        .map(|i| {
            generate_piece(
                &format!("piece-{i:03}"),
                seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                config,
            )
        })
        .collect()
}

/// Performance-style distortions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Perturbation {
    /// Probability of dropping each note.
    pub delete_prob: f64,
    /// Maximum absolute onset jitter in seconds (uniform).
    pub jitter: f64,
}

/// Drops and jitters notes; onsets are clamped at 0.
pub fn perturb(seq: &NoteSequence, p: &Perturbation, rng: &mut impl Rng) -> NoteSequence {
    let events = seq
        .events()
        .iter()
        .filter_map(|e| {
            let keep = !rng.gen_bool(p.delete_prob.clamp(0.0, 1.0));
            let j = if p.jitter > 0.0 {
                rng.gen_range(-p.jitter..=p.jitter)
            } else {
                0.0
            };
            keep.then(|| NoteEvent {
                onset: (e.onset + j).max(0.0),
                ..*e
            })
        })
        .collect();
    NoteSequence::new(seq.id.clone(), events).expect("perturbation keeps events valid")
}
