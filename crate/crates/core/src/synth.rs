//! Additive piano-ish renderer and 16-bit PCM WAV I/O.
//!
//! Each note is a sum of harmonics `h = 1..=H` at `f(p)·h` with amplitude
//! `1/h`, shaped by a 10 ms linear attack and an exponential decay, and
//! released exponentially after the note ends. The final mix is
//! peak-normalized to [`PEAK`].

use std::f64::consts::TAU;
use std::io::{Read, Seek, Write};

use thiserror::Error;

use crate::notes::NoteSequence;

pub const DEFAULT_SAMPLE_RATE: u32 = 22_050;
pub const DEFAULT_HARMONICS: usize = 5;
/// Peak absolute amplitude after normalization.
pub const PEAK: f64 = 0.9;
/// Silence appended after the last note end, in seconds.
pub const TAIL_SECONDS: f64 = 0.5;

const ATTACK_SECONDS: f64 = 0.010;
const DECAY_TIME_CONSTANT: f64 = 1.5;
const RELEASE_TIME_CONSTANT: f64 = 0.08;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("cannot render an empty note sequence")]
    EmptySequence,
    #[error("sample rate {0} Hz is below the 8000 Hz minimum")]
    InvalidRate(u32),
    #[error("at least one harmonic is required")]
    NoHarmonics,
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("unsupported wav layout: {0}")]
    UnsupportedWav(String),
}

/// Mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

/// Equal-tempered frequency of a MIDI pitch, A4 = 440 Hz.
#[inline]
pub fn pitch_to_hz(pitch: f64) -> f64 {
    440.0 * 2f64.powf((pitch - 69.0) / 12.0)
}

/// Renders `seq` with `num_harmonics` partials per note.
pub fn render_audio(
    seq: &NoteSequence,
    sample_rate: u32,
    num_harmonics: usize,
) -> Result<AudioBuffer, SynthError> {
    if seq.is_empty() {
        return Err(SynthError::EmptySequence);
    }
    if sample_rate < 8000 {
        return Err(SynthError::InvalidRate(sample_rate));
    }
    if num_harmonics == 0 {
        return Err(SynthError::NoHarmonics);
    }
    let sr = sample_rate as f64;
    let len = ((seq.end_time() + TAIL_SECONDS) * sr).ceil() as usize;
    let mut mix = vec![0.0f64; len];
    let nyquist = sr / 2.0;

    for note in seq.events() {
        let f0 = pitch_to_hz(note.pitch as f64);
        let gain = note.velocity as f64 / 127.0;
        let start = (note.onset * sr).round() as usize;
        let hold = note.duration;
        for (i, slot) in mix.iter_mut().enumerate().skip(start) {
            let t = (i - start) as f64 / sr;
            let env = envelope(t, hold);
            if env < 1e-5 && t > hold {
                break;
            }
            let mut v = 0.0;
            for h in 1..=num_harmonics {
                let f = f0 * h as f64;
                if f >= nyquist {
                    break;
                }
                v += (TAU * f * t).sin() / h as f64;
            }
            *slot += gain * env * v;
        }
    }

    let peak = mix.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        let scale = PEAK / peak;
        for s in &mut mix {
            *s = (*s * scale).clamp(-PEAK, PEAK);
        }
    }
    Ok(AudioBuffer {
        samples: mix,
        sample_rate,
    })
}

fn envelope(t: f64, hold: f64) -> f64 {
    let sustain = |t: f64| {
        if t < ATTACK_SECONDS {
            t / ATTACK_SECONDS
        } else {
            (-(t - ATTACK_SECONDS) / DECAY_TIME_CONSTANT).exp()
        }
    };
    if t <= hold {
        sustain(t)
    } else {
        sustain(hold) * (-(t - hold) / RELEASE_TIME_CONSTANT).exp()
    }
}

fn wav_spec(sample_rate: u32) -> hound::WavSpec {
    hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    }
}

/// Writes 16-bit signed little-endian mono PCM.
pub fn write_wav<W: Write + Seek>(audio: &AudioBuffer, out: W) -> Result<(), SynthError> {
    let mut writer = hound::WavWriter::new(out, wav_spec(audio.sample_rate))?;
    for &s in &audio.samples {
        writer.write_sample(quantize(s))?;
    }
    writer.finalize()?;
    Ok(())
}

pub fn wav_bytes(audio: &AudioBuffer) -> Result<Vec<u8>, SynthError> {
    let mut cur = std::io::Cursor::new(Vec::new());
    write_wav(audio, &mut cur)?;
    Ok(cur.into_inner())
}

#[inline]
fn quantize(s: f64) -> i16 {
    (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16
}

/// Reads integer PCM WAV, mixing multiple channels down to mono.
pub fn read_wav<R: Read>(input: R) -> Result<AudioBuffer, SynthError> {
    let mut reader = hound::WavReader::new(input)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample > 32 {
        return Err(SynthError::UnsupportedWav(format!(
            "{:?} {}-bit",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let full_scale = (1i64 << (spec.bits_per_sample - 1)) as f64 - 1.0;
    let channels = spec.channels.max(1) as usize;
    let raw = reader.samples::<i32>().collect::<Result<Vec<_>, _>>()?;
    let samples = raw
        .chunks(channels)
        .map(|frame| {
            let sum: f64 = frame.iter().map(|&s| s as f64 / full_scale).sum();
            (sum / channels as f64).clamp(-1.0, 1.0)
        })
        .collect();
    Ok(AudioBuffer {
        samples,
        sample_rate: spec.sample_rate,
    })
}
