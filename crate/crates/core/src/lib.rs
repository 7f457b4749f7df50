//! Cross-modal music retrieval.
//!
//! Three ways of linking symbolic scores and audio, plus a score follower
//! built from two of them:
//!
//! - [`chroma`] + [`matching`]: chromagrams compared by subsequence DTW,
//!   producing a matching curve per document and a ranked list of segments.
//! - [`fingerprint`]: tempo- and transposition-invariant note triples in an
//!   inverted index, resolved by histogram voting.
//! - [`embedding`]: two small networks trained with a pairwise ranking loss
//!   to embed score snippets and audio excerpts in one space.
//! - [`follower`]: a companion that identifies the piece being played with
//!   fingerprints and tracks the position with online chroma alignment.
//!
//! [`notes`], [`midi`] and [`synth`] provide the data model, file readers
//! and a small additive synthesizer; [`synthetic`] generates seeded test
//! corpora.

pub mod chroma;
pub mod embedding;
pub mod fingerprint;
pub mod follower;
pub mod matching;
pub mod midi;
pub mod notes;
pub mod synth;
pub mod synthetic;

pub use chroma::{ChromaVector, Chromagram};
pub use fingerprint::{ExtractionConstraints, FingerprintIndex, PieceHypothesis, TauQuantizer};
pub use matching::{MatchingCurve, RankedMatch};
pub use notes::{NoteEvent, NoteSequence};
pub use synth::AudioBuffer;
