//! Chroma features: 12-bin pitch-class energy vectors and chromagrams.
//!
//! Index 0 is C, index 11 is B. All chromagrams produced here are
//! frame-normalized: every frame has unit Euclidean norm, and frames that
//! carry (almost) no energy become the neutral vector `(1/√12, …, 1/√12)`.

use std::fmt::Write as _;
use std::ops::{Index, IndexMut};

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::notes::NoteSequence;
use crate::synth::{pitch_to_hz, AudioBuffer};

pub const NUM_CHROMA: usize = 12;
/// Default threshold below which a frame is replaced by the neutral vector.
pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_WINDOW: usize = 4096;
pub const DEFAULT_HOP: usize = 1024;
/// Lowest and highest MIDI pitch binned from audio (piano compass).
pub const AUDIO_PITCH_RANGE: (u8, u8) = (21, 108);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChromaError {
    #[error("cannot build a chromagram from an empty note sequence")]
    EmptySequence,
    #[error("frame rate must be positive and finite, got {0}")]
    InvalidFrameRate(f64),
    #[error("window size {0} must be a power of two >= 256")]
    InvalidWindow(usize),
    #[error("hop {hop} must be in 1..={window}")]
    InvalidHop { hop: usize, window: usize },
    #[error("buffer of {len} samples is shorter than one {window}-sample window")]
    BufferTooShort { len: usize, window: usize },
    #[error("malformed chroma csv line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
}

/// One 12-dimensional chroma vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChromaVector(pub [f64; NUM_CHROMA]);

impl ChromaVector {
    pub const ZERO: ChromaVector = ChromaVector([0.0; NUM_CHROMA]);

    /// The unit vector with equal energy in every bin.
    pub fn neutral() -> Self {
        ChromaVector([1.0 / (NUM_CHROMA as f64).sqrt(); NUM_CHROMA])
    }

    /// Unit vector with all mass in `bin`.
    pub fn unit(bin: usize) -> Self {
        let mut v = [0.0; NUM_CHROMA];
        v[bin % NUM_CHROMA] = 1.0;
        ChromaVector(v)
    }

    /// Plain left-to-right dot product.
    #[inline]
    pub fn dot(&self, other: &ChromaVector) -> f64 {
        let mut acc = 0.0;
        for i in 0..NUM_CHROMA {
            acc += self.0[i] * other.0[i];
        }
        acc
    }

    /// Euclidean norm. Squares are summed in ascending order so that the
    /// result does not depend on how the bins are rotated.
    pub fn norm(&self) -> f64 {
        let mut sq = self.0.map(|v| v * v);
        sq.sort_by(f64::total_cmp);
        sq.iter().fold(0.0, |a, &b| a + b).sqrt()
    }

    /// Unit-norm copy, or the neutral vector when the norm is below `eps`.
    pub fn normalized(&self, eps: f64) -> Self {
        let n = self.norm();
        if n < eps {
            Self::neutral()
        } else {
            ChromaVector(self.0.map(|v| v / n))
        }
    }

    /// Moves bin `b` to bin `(b + shift) mod 12`.
    pub fn rotated(&self, shift: i32) -> Self {
        let s = shift.rem_euclid(NUM_CHROMA as i32) as usize;
        let mut out = [0.0; NUM_CHROMA];
        for (b, &v) in self.0.iter().enumerate() {
            out[(b + s) % NUM_CHROMA] = v;
        }
        ChromaVector(out)
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..NUM_CHROMA {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|v| v.is_finite() && *v >= 0.0)
    }
}

impl Index<usize> for ChromaVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ChromaVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// A sequence of chroma frames at a fixed frame rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chromagram {
    pub frames: Vec<ChromaVector>,
    /// Frames per second.
    pub frame_rate: f64,
}

impl Chromagram {
    pub fn new(frames: Vec<ChromaVector>, frame_rate: f64) -> Result<Self, ChromaError> {
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(ChromaError::InvalidFrameRate(frame_rate));
        }
        Ok(Chromagram { frames, frame_rate })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.frames.len() as f64 / self.frame_rate
    }

    /// Frames `[start, end)` as a new chromagram.
    pub fn slice(&self, start: usize, end: usize) -> Chromagram {
        Chromagram {
            frames: self.frames[start..end].to_vec(),
            frame_rate: self.frame_rate,
        }
    }
}

/// Chromagram of explicit note events.
///
/// Frame `i` covers `[i/rate, (i+1)/rate)`; every note adds its overlap
/// with the frame, as a fraction of the frame length, to bin `pitch mod 12`.
pub fn symbolic_chromagram(seq: &NoteSequence, frame_rate: f64) -> Result<Chromagram, ChromaError> {
    if seq.is_empty() {
        return Err(ChromaError::EmptySequence);
    }
    if !(frame_rate.is_finite() && frame_rate > 0.0) {
        return Err(ChromaError::InvalidFrameRate(frame_rate));
    }
    let num_frames = ((seq.end_time() * frame_rate).ceil() as usize).max(1);
    let mut frames = vec![ChromaVector::ZERO; num_frames];
    for note in seq.events() {
        let (start, end) = (note.onset, note.end());
        let first = (start * frame_rate).floor() as usize;
        let last = ((end * frame_rate).ceil() as usize).min(num_frames);
        let bin = note.pitch_class();
        for (i, frame) in frames.iter_mut().enumerate().take(last).skip(first) {
            let lo = i as f64 / frame_rate;
            let hi = (i + 1) as f64 / frame_rate;
            let overlap = end.min(hi) - start.max(lo);
            if overlap > 0.0 {
                frame[bin] += overlap * frame_rate;
            }
        }
    }
    Ok(normalize_frames(
        Chromagram { frames, frame_rate },
        DEFAULT_EPS,
    ))
}

/// Maps each positive-frequency STFT bin to a pitch class, if in range.
fn bin_classes(window: usize, sample_rate: u32) -> Vec<Option<usize>> {
    let lo = pitch_to_hz(AUDIO_PITCH_RANGE.0 as f64 - 0.5);
    let hi = pitch_to_hz(AUDIO_PITCH_RANGE.1 as f64 + 0.5);
    (0..=window / 2)
        .map(|k| {
            let f = k as f64 * sample_rate as f64 / window as f64;
            if f < lo || f > hi {
                return None;
            }
            let p = (69.0 + 12.0 * (f / 440.0).log2()).round() as i64;
            Some(p.rem_euclid(12) as usize)
        })
        .collect()
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos())
        .collect()
}

/// STFT-based chromagram: Hann window, nearest-pitch binning of squared
/// magnitudes over the piano range, frame rate `sample_rate / hop`.
/// Only full windows are analysed.
pub fn audio_chromagram(
    audio: &AudioBuffer,
    window_size: usize,
    hop: usize,
) -> Result<Chromagram, ChromaError> {
    if window_size < 256 || !window_size.is_power_of_two() {
        return Err(ChromaError::InvalidWindow(window_size));
    }
    if hop == 0 || hop > window_size {
        return Err(ChromaError::InvalidHop {
            hop,
            window: window_size,
        });
    }
    let len = audio.samples.len();
    if len < window_size {
        return Err(ChromaError::BufferTooShort {
            len,
            window: window_size,
        });
    }
    let window = hann(window_size);
    let classes = bin_classes(window_size, audio.sample_rate);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window_size);
    let num_frames = 1 + (len - window_size) / hop;
    let mut buf = vec![Complex::new(0.0, 0.0); window_size];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut frames = Vec::with_capacity(num_frames);
    for f in 0..num_frames {
        let seg = &audio.samples[f * hop..f * hop + window_size];
        for ((slot, &s), &w) in buf.iter_mut().zip(seg).zip(&window) {
            *slot = Complex::new(s * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        let mut chroma = ChromaVector::ZERO;
        for (k, class) in classes.iter().enumerate() {
            if let Some(c) = class {
                chroma[*c] += buf[k].norm_sqr();
            }
        }
        frames.push(chroma);
    }
    Ok(normalize_frames(
        Chromagram {
            frames,
            frame_rate: audio.sample_rate as f64 / hop as f64,
        },
        DEFAULT_EPS,
    ))
}

/// Scales every frame to unit norm; frames with norm below `eps` become
/// the neutral vector.
pub fn normalize_frames(mut c: Chromagram, eps: f64) -> Chromagram {
    for frame in &mut c.frames {
        *frame = frame.normalized(eps);
    }
    c
}

/// Rotates every frame by `shift` semitones (taken mod 12).
pub fn cyclic_shift(c: &Chromagram, shift: i32) -> Chromagram {
    Chromagram {
        frames: c.frames.iter().map(|f| f.rotated(shift)).collect(),
        frame_rate: c.frame_rate,
    }
}

/// `# frame_rate=<fps>` header, then one 12-column line per frame.
pub fn to_chroma_csv(c: &Chromagram) -> String {
    let mut out = format!("# frame_rate={:?}\n", c.frame_rate);
    for f in &c.frames {
        for (i, v) in f.0.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v:?}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_chroma_csv(text: &str) -> Result<Chromagram, ChromaError> {
    let mut frame_rate = None;
    let mut frames = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(v) = rest.trim().strip_prefix("frame_rate=") {
                let rate: f64 = v.trim().parse().map_err(|_| ChromaError::MalformedLine {
                    line: line_no,
                    reason: format!("bad frame rate {v:?}"),
                })?;
                frame_rate = Some(rate);
            }
            continue;
        }
        let vals: Vec<&str> = line.split(',').map(str::trim).collect();
        if vals.len() != NUM_CHROMA {
            return Err(ChromaError::MalformedLine {
                line: line_no,
                reason: format!("expected 12 columns, found {}", vals.len()),
            });
        }
        let mut v = ChromaVector::ZERO;
        for (i, s) in vals.iter().enumerate() {
            v[i] = s.parse().map_err(|_| ChromaError::MalformedLine {
                line: line_no,
                reason: format!("bad value {s:?}"),
            })?;
        }
        if !v.is_valid() {
            return Err(ChromaError::MalformedLine {
                line: line_no,
                reason: "values must be finite and non-negative".into(),
            });
        }
        frames.push(v);
    }
    let frame_rate = frame_rate.ok_or(ChromaError::MalformedLine {
        line: 1,
        reason: "missing `# frame_rate=` header".into(),
    })?;
    Chromagram::new(frames, frame_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::notes::{transpose, NoteEvent};

    fn notes(list: &[(f64, f64, u8)]) -> NoteSequence {
        NoteSequence::new(
            "",
            list.iter()
                .map(|&(o, d, p)| NoteEvent::new(o, d, p, 64).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_c_fills_bin_zero() {
        let c = symbolic_chromagram(&notes(&[(0.0, 1.0, 60)]), 10.0).unwrap();
        assert_eq!(c.len(), 10);
        for f in &c.frames {
            assert_eq!(*f, ChromaVector::unit(0));
        }
    }

    #[test]
    fn single_a_fills_bin_nine() {
        let c = symbolic_chromagram(&notes(&[(0.0, 1.0, 69)]), 10.0).unwrap();
        assert!(c.frames.iter().all(|f| *f == ChromaVector::unit(9)));
    }

    #[test]
    fn dyad_splits_mass() {
        let c = symbolic_chromagram(&notes(&[(0.0, 1.0, 60), (0.0, 1.0, 64)]), 10.0).unwrap();
        let h = 1.0 / 2f64.sqrt();
        for f in &c.frames {
            assert!((f[0] - h).abs() < 1e-12 && (f[4] - h).abs() < 1e-12);
            assert!((f.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gaps_become_neutral() {
        let c = symbolic_chromagram(&notes(&[(0.0, 0.1, 60), (0.5, 0.1, 62)]), 10.0).unwrap();
        assert_eq!(c.len(), 6);
        assert_eq!(c.frames[2], ChromaVector::neutral());
        assert_eq!(c.frames[5], ChromaVector::unit(2));
    }

    #[test]
    fn partial_overlap_weights() {
        // 60 sounds for the first quarter of frame 0, 62 for all of it
        let c = symbolic_chromagram(&notes(&[(0.0, 0.025, 60), (0.0, 0.1, 62)]), 10.0).unwrap();
        let ratio = c.frames[0][0] / c.frames[0][2];
        assert!((ratio - 0.25).abs() < 1e-12, "{ratio}");
    }

    #[test]
    fn empty_sequence_rejected() {
        assert_eq!(
            symbolic_chromagram(&NoteSequence::default(), 10.0),
            Err(ChromaError::EmptySequence)
        );
    }

    #[test]
    fn transposition_is_rotation() {
        let s = notes(&[
            (0.0, 0.3, 60),
            (0.1, 0.4, 63),
            (0.35, 0.2, 67),
            (0.5, 1.0, 70),
        ]);
        let base = symbolic_chromagram(&s, 20.0).unwrap();
        for k in -5..=12 {
            let t = symbolic_chromagram(&transpose(&s, k).unwrap(), 20.0).unwrap();
            assert_eq!(t, cyclic_shift(&base, k));
        }
    }

    #[test]
    fn normalize_examples() {
        let mut a = ChromaVector::ZERO;
        a[0] = 2.0;
        let c = Chromagram::new(vec![a, ChromaVector::ZERO, ChromaVector::unit(3)], 1.0).unwrap();
        let n = normalize_frames(c.clone(), DEFAULT_EPS);
        assert_eq!(n.frames[0], ChromaVector::unit(0));
        assert_eq!(n.frames[1], ChromaVector::neutral());
        assert!((n.frames[1].norm() - 1.0).abs() < 1e-12);
        assert_eq!(n.frames[2], c.frames[2]);
        let mut odd = ChromaVector::ZERO;
        odd[1] = 0.3;
        odd[5] = 0.7;
        odd[11] = 0.2;
        let once = odd.normalized(DEFAULT_EPS);
        let twice = once.normalized(DEFAULT_EPS);
        for i in 0..12 {
            assert!((once[i] - twice[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_examples() {
        let c = Chromagram::new(vec![ChromaVector::unit(0)], 10.0).unwrap();
        assert_eq!(cyclic_shift(&c, 4).frames[0], ChromaVector::unit(4));
        assert_eq!(cyclic_shift(&c, 12), c);
        assert_eq!(cyclic_shift(&cyclic_shift(&c, 5), 7), c);
        assert_eq!(cyclic_shift(&c, -1).frames[0], ChromaVector::unit(11));
    }

    #[test]
    fn silence_is_neutral() {
        let audio = AudioBuffer {
            samples: vec![0.0; 10_000],
            sample_rate: 22050,
        };
        let c = audio_chromagram(&audio, 4096, 1024).unwrap();
        assert_eq!(c.len(), 1 + (10_000 - 4096) / 1024);
        assert!(c.frames.iter().all(|f| *f == ChromaVector::neutral()));
        assert!((c.frame_rate - 22050.0 / 1024.0).abs() < 1e-12);
    }

    #[test]
    fn audio_argument_errors() {
        let audio = AudioBuffer {
            samples: vec![0.0; 1000],
            sample_rate: 22050,
        };
        assert_eq!(
            audio_chromagram(&audio, 4096, 1024),
            Err(ChromaError::BufferTooShort {
                len: 1000,
                window: 4096
            })
        );
        assert_eq!(
            audio_chromagram(&audio, 300, 100),
            Err(ChromaError::InvalidWindow(300))
        );
        assert!(matches!(
            audio_chromagram(&audio, 512, 0),
            Err(ChromaError::InvalidHop { .. })
        ));
        assert!(matches!(
            audio_chromagram(&audio, 512, 513),
            Err(ChromaError::InvalidHop { .. })
        ));
    }

    #[test]
    fn bin_mapping_edges() {
        let classes = bin_classes(4096, 22050);
        // DC and the top of the spectrum are outside the piano range
        assert_eq!(classes[0], None);
        assert_eq!(classes[2048], None);
        // 440 Hz sits in bin 440 * 4096 / 22050 = 81.7
        assert_eq!(classes[82], Some(9));
    }

    #[test]
    fn csv_round_trip() {
        let s = notes(&[(0.0, 0.33, 61), (0.2, 0.5, 66)]);
        let c = symbolic_chromagram(&s, 7.5).unwrap();
        assert_eq!(parse_chroma_csv(&to_chroma_csv(&c)).unwrap(), c);
        assert!(parse_chroma_csv("0,0,0\n").is_err());
        assert!(parse_chroma_csv("0,0,0,0,0,0,0,0,0,0,0,1\n").is_err());
    }
}
