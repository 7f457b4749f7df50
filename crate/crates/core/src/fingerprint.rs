//! Tempo- and transposition-invariant symbolic fingerprints.
//!
//! A fingerprint is built from three note events `e1, e2, e3` with strictly
//! increasing onsets: the two pitch intervals `p2 − p1`, `p3 − p2` and the
//! ratio of inter-onset intervals `(t3 − t2) / (t2 − t1)`. Pitch intervals
//! are unchanged by transposition and the ratio is unchanged by a uniform
//! tempo change, so a performance in another key or tempo still produces
//! the fingerprints stored for the score.
//!
//! Fingerprints are hashed to 24-bit keys and stored in an inverted index.
//! A query votes for `(piece, score offset)` cells; the fullest cell wins.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::notes::{NoteEvent, NoteSequence};

pub const DEFAULT_D_MIN: f64 = 0.05;
pub const DEFAULT_D_MAX: f64 = 2.0;
pub const DEFAULT_FANOUT: usize = 5;
pub const DEFAULT_BINS_PER_OCTAVE: u8 = 8;
pub const DEFAULT_TAU_TOLERANCE_BINS: u32 = 1;
/// Width of a score-offset voting bin in seconds.
pub const VOTE_BIN_SECONDS: f64 = 1.0;
/// Query extraction widens `d_max` by this factor to admit slow playing.
pub const QUERY_D_MAX_FACTOR: f64 = 2.0;
/// Resolution of the vote histogram along `log2(tempo ratio)`.
pub const TEMPO_BINS_PER_OCTAVE: f64 = 8.0;
/// Votes implying a tempo ratio outside `[1/x, x]` are discarded.
pub const MAX_TEMPO_RATIO: f64 = QUERY_D_MAX_FACTOR;

/// The largest bins-per-octave whose bucket range `0..=6·bins` fits in a byte.
pub const MAX_BINS_PER_OCTAVE: u8 = 42;

const INDEX_MAGIC: &[u8; 5] = b"SFPI1";

#[derive(Debug, Error)]
pub enum FingerprintError {
    #[error(
        "need at least 3 events with 3 distinct onsets, got {events} events / {onsets} onsets"
    )]
    TooFewEvents { events: usize, onsets: usize },
    #[error("the index holds no fingerprints")]
    EmptyIndex,
    #[error("invalid extraction constraints: {0}")]
    InvalidConstraints(String),
    #[error("bins per octave must be in 1..={MAX_BINS_PER_OCTAVE}, got {0}")]
    InvalidBinsPerOctave(u8),
    #[error("duplicate piece id {0:?}")]
    DuplicatePiece(String),
    #[error("bad index file: {0}")]
    BadIndexFile(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// `[Δp¹², Δp²³, τ]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymbolicFingerprint {
    pub dp12: i16,
    pub dp23: i16,
    pub tau: f64,
}

/// A fingerprint plus where it was taken.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocatedFingerprint {
    pub fp: SymbolicFingerprint,
    /// Onset of the first event, seconds.
    pub anchor_time: f64,
    /// `t2 − t1`, seconds.
    pub dt12: f64,
}

/// Locality rules for pairing events.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConstraints {
    pub d_min: f64,
    pub d_max: f64,
    /// Successors kept per event at each level.
    pub fanout: usize,
}

impl Default for ExtractionConstraints {
    fn default() -> Self {
        ExtractionConstraints {
            d_min: DEFAULT_D_MIN,
            d_max: DEFAULT_D_MAX,
            fanout: DEFAULT_FANOUT,
        }
    }
}

impl ExtractionConstraints {
    pub fn new(d_min: f64, d_max: f64, fanout: usize) -> Result<Self, FingerprintError> {
        let c = ExtractionConstraints {
            d_min,
            d_max,
            fanout,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), FingerprintError> {
        if !(self.d_min.is_finite()
            && self.d_max.is_finite()
            && 0.0 < self.d_min
            && self.d_min < self.d_max)
        {
            return Err(FingerprintError::InvalidConstraints(format!(
                "need 0 < d_min < d_max, got d_min={} d_max={}",
                self.d_min, self.d_max
            )));
        }
        if self.fanout == 0 {
            return Err(FingerprintError::InvalidConstraints(
                "fanout must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Both distances multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        ExtractionConstraints {
            d_min: self.d_min * factor,
            d_max: self.d_max * factor,
            fanout: self.fanout,
        }
    }
}

fn check_extractable(events: &[NoteEvent]) -> Result<(), FingerprintError> {
    let mut onsets = 0;
    let mut last = None;
    for e in events {
        if last != Some(e.onset) {
            onsets += 1;
            last = Some(e.onset);
        }
    }
    if events.len() < 3 || onsets < 3 {
        return Err(FingerprintError::TooFewEvents {
            events: events.len(),
            onsets,
        });
    }
    Ok(())
}

/// Indices of the first `fanout` events after `from` whose onset lies in
/// `[t + d_min, t + d_max]`. `events` must be sorted.
fn successors(
    events: &[NoteEvent],
    from: usize,
    c: &ExtractionConstraints,
) -> std::ops::Range<usize> {
    let t = events[from].onset;
    let lo = t + c.d_min;
    let hi = t + c.d_max;
    let first = from + 1 + events[from + 1..].partition_point(|e| e.onset < lo);
    let mut last = first;
    while last < events.len() && last - first < c.fanout && events[last].onset <= hi {
        last += 1;
    }
    first..last
}

/// All fingerprints of `seq` under `c`.
pub fn extract_fingerprints(
    seq: &NoteSequence,
    c: &ExtractionConstraints,
) -> Result<Vec<LocatedFingerprint>, FingerprintError> {
    c.validate()?;
    let events = seq.events();
    check_extractable(events)?;
    let mut out = Vec::new();
    for i in 0..events.len() {
        let e1 = events[i];
        for j in successors(events, i, c) {
            let e2 = events[j];
            let dt12 = e2.onset - e1.onset;
            for k in successors(events, j, c) {
                let e3 = events[k];
                out.push(LocatedFingerprint {
                    fp: SymbolicFingerprint {
                        dp12: e2.pitch as i16 - e1.pitch as i16,
                        dp23: e3.pitch as i16 - e2.pitch as i16,
                        tau: (e3.onset - e2.onset) / dt12,
                    },
                    anchor_time: e1.onset,
                    dt12,
                });
            }
        }
    }
    Ok(out)
}

/// Log-scale quantizer for the onset ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TauQuantizer {
    bins_per_octave: u8,
}

impl Default for TauQuantizer {
    fn default() -> Self {
        TauQuantizer {
            bins_per_octave: DEFAULT_BINS_PER_OCTAVE,
        }
    }
}

impl TauQuantizer {
    pub fn new(bins_per_octave: u8) -> Result<Self, FingerprintError> {
        if bins_per_octave == 0 || bins_per_octave > MAX_BINS_PER_OCTAVE {
            return Err(FingerprintError::InvalidBinsPerOctave(bins_per_octave));
        }
        Ok(TauQuantizer { bins_per_octave })
    }

    pub fn bins_per_octave(&self) -> u8 {
        self.bins_per_octave
    }

    /// Largest bucket value, `6 · bins_per_octave`.
    pub fn max_bucket(&self) -> u32 {
        6 * self.bins_per_octave as u32
    }

    /// `round(log2(clamp(tau, 1/8, 8)) · bins) + 3 · bins`.
    pub fn bucket(&self, tau: f64) -> u32 {
        let b = self.bins_per_octave as f64;
        let t = tau.clamp(0.125, 8.0);
        ((t.log2() * b).round() + 3.0 * b) as u32
    }
}

/// Packs `(dp12 + 128) << 16 | (dp23 + 128) << 8 | bucket`.
pub fn hash_fingerprint(fp: &SymbolicFingerprint, q: &TauQuantizer) -> u32 {
    pack_key(fp.dp12, fp.dp23, q.bucket(fp.tau))
}

#[inline]
fn pack_key(dp12: i16, dp23: i16, bucket: u32) -> u32 {
    (((dp12 + 128) as u32) << 16) | (((dp23 + 128) as u32) << 8) | bucket
}

/// One occurrence of a key in a piece.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Posting {
    /// Position in [`FingerprintIndex::pieces`].
    pub piece: u32,
    pub anchor_time: f64,
    pub dt12: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceEntry {
    pub id: String,
    /// Latest note end in seconds.
    pub duration: f64,
}

/// Inverted index from fingerprint key to postings. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintIndex {
    constraints: ExtractionConstraints,
    quantizer: TauQuantizer,
    /// Sorted by id; posting `piece` fields index into this table.
    pieces: Vec<PieceEntry>,
    postings: BTreeMap<u32, Vec<Posting>>,
}

/// A piece that was left out of the index.
#[derive(Debug)]
pub struct IndexSkip {
    pub piece_id: String,
    pub reason: FingerprintError,
}

#[derive(Debug)]
pub struct IndexBuild {
    pub index: FingerprintIndex,
    pub skipped: Vec<IndexSkip>,
}

/// Extracts, hashes and inserts every piece. Pieces that cannot be
/// fingerprinted, or repeat an earlier id, become skip records.
pub fn build_index(
    corpus: &[NoteSequence],
    c: &ExtractionConstraints,
    q: TauQuantizer,
) -> Result<IndexBuild, FingerprintError> {
    c.validate()?;
    let mut skipped = Vec::new();
    let mut accepted: Vec<(&NoteSequence, Vec<LocatedFingerprint>)> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for seq in corpus {
        if !seen.insert(seq.id.as_str()) {
            skipped.push(IndexSkip {
                piece_id: seq.id.clone(),
                reason: FingerprintError::DuplicatePiece(seq.id.clone()),
            });
            continue;
        }
        match extract_fingerprints(seq, c) {
            Ok(fps) => accepted.push((seq, fps)),
            Err(reason) => skipped.push(IndexSkip {
                piece_id: seq.id.clone(),
                reason,
            }),
        }
    }
    accepted.sort_by(|a, b| a.0.id.cmp(&b.0.id));

    let mut pieces = Vec::with_capacity(accepted.len());
    let mut postings: BTreeMap<u32, Vec<Posting>> = BTreeMap::new();
    for (piece, (seq, fps)) in accepted.iter().enumerate() {
        pieces.push(PieceEntry {
            id: seq.id.clone(),
            duration: seq.end_time(),
        });
        for lf in fps {
            postings
                .entry(hash_fingerprint(&lf.fp, &q))
                .or_default()
                .push(Posting {
                    piece: piece as u32,
                    anchor_time: lf.anchor_time,
                    dt12: lf.dt12,
                });
        }
    }
    for list in postings.values_mut() {
        list.sort_by(|a, b| {
            a.piece
                .cmp(&b.piece)
                .then(a.anchor_time.total_cmp(&b.anchor_time))
        });
    }
    Ok(IndexBuild {
        index: FingerprintIndex {
            constraints: *c,
            quantizer: q,
            pieces,
            postings,
        },
        skipped,
    })
}

/// An identification hypothesis for one piece.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceHypothesis {
    pub piece_id: String,
    /// Score position, in seconds, where the query starts.
    pub score_time: f64,
    /// Query seconds per score second.
    pub tempo_ratio: f64,
    pub votes: u32,
}

struct Vote {
    offset: f64,
    ratio: f64,
}

impl FingerprintIndex {
    pub fn constraints(&self) -> &ExtractionConstraints {
        &self.constraints
    }

    pub fn quantizer(&self) -> TauQuantizer {
        self.quantizer
    }

    pub fn pieces(&self) -> &[PieceEntry] {
        &self.pieces
    }

    pub fn piece(&self, id: &str) -> Option<&PieceEntry> {
        self.pieces
            .binary_search_by(|p| p.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.pieces[i])
    }

    pub fn num_keys(&self) -> usize {
        self.postings.len()
    }

    pub fn num_postings(&self) -> usize {
        self.postings.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.postings.is_empty()
    }

    pub fn postings(&self, key: u32) -> &[Posting] {
        self.postings.get(&key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn keys(&self) -> impl Iterator<Item = u32> + '_ {
        self.postings.keys().copied()
    }

    /// Constraints used to fingerprint queries against this index.
    pub fn query_constraints(&self) -> ExtractionConstraints {
        ExtractionConstraints {
            d_max: self.constraints.d_max * QUERY_D_MAX_FACTOR,
            ..self.constraints
        }
    }

    /// Resolves a query by histogram voting.
    ///
    /// Every query fingerprint looks up its own key and the keys whose tau
    /// bucket lies within `tau_tolerance_bins`. A matched posting implies a
    /// tempo ratio `r = dt12_query / dt12_score` and a score offset
    /// `anchor_score − anchor_query / r` where the query would start.
    /// Matches with `r` outside `[1/MAX_TEMPO_RATIO, MAX_TEMPO_RATIO]` cast
    /// no vote. Votes are binned by piece, by `floor(offset)` in 1 s bins
    /// and by `round(log2 r · TEMPO_BINS_PER_OCTAVE)`, so that a true match,
    /// whose votes agree on both offset and tempo, stands out from
    /// coincidental ones. Each piece reports its cell with the most votes
    /// after merging the neighbouring cells in both directions.
    pub fn query(
        &self,
        query: &NoteSequence,
        tau_tolerance_bins: u32,
    ) -> Result<Vec<PieceHypothesis>, FingerprintError> {
        if self.is_empty() {
            return Err(FingerprintError::EmptyIndex);
        }
        let fps = extract_fingerprints(query, &self.query_constraints())?;
        let max_bucket = self.quantizer.max_bucket();
        let mut cells: HashMap<(u32, i64, i64), Vec<Vote>> = HashMap::new();
        for lf in &fps {
            let bucket = self.quantizer.bucket(lf.fp.tau);
            let lo = bucket.saturating_sub(tau_tolerance_bins);
            let hi = (bucket + tau_tolerance_bins).min(max_bucket);
            for b in lo..=hi {
                for p in self.postings(pack_key(lf.fp.dp12, lf.fp.dp23, b)) {
                    let ratio = lf.dt12 / p.dt12;
                    if !(1.0 / MAX_TEMPO_RATIO..=MAX_TEMPO_RATIO).contains(&ratio) {
                        continue;
                    }
                    let offset = p.anchor_time - lf.anchor_time / ratio;
                    let bin = (offset / VOTE_BIN_SECONDS).floor() as i64;
                    let rbin = (ratio.log2() * TEMPO_BINS_PER_OCTAVE).round() as i64;
                    cells
                        .entry((p.piece, bin, rbin))
                        .or_default()
                        .push(Vote { offset, ratio });
                }
            }
        }
        let neighbourhood = |piece: u32, bin: i64, rbin: i64| {
            (bin - 1..=bin + 1).flat_map(move |b| (rbin - 1..=rbin + 1).map(move |r| (piece, b, r)))
        };

        // Best merged cell per piece: most merged votes, then most own votes,
        // then earliest offset bin, then smallest tempo bin.
        let mut best: BTreeMap<u32, (usize, usize, i64, i64)> = BTreeMap::new();
        for (&(piece, bin, rbin), votes) in &cells {
            let merged = neighbourhood(piece, bin, rbin)
                .map(|k| cells.get(&k).map_or(0, Vec::len))
                .sum::<usize>();
            let own = votes.len();
            let cand = (merged, own, bin, rbin);
            let replace = match best.get(&piece) {
                None => true,
                Some(&(m, o, b, r)) => {
                    (merged, own) > (m, o) || ((merged, own) == (m, o) && (bin, rbin) < (b, r))
                }
            };
            if replace {
                best.insert(piece, cand);
            }
        }

        let mut hyps: Vec<PieceHypothesis> = best
            .into_iter()
            .map(|(piece, (merged, _, bin, rbin))| {
                let mut offsets = 0.0;
                let mut ratios = Vec::with_capacity(merged);
                for k in neighbourhood(piece, bin, rbin) {
                    if let Some(vs) = cells.get(&k) {
                        for v in vs {
                            offsets += v.offset;
                            ratios.push(v.ratio);
                        }
                    }
                }
                PieceHypothesis {
                    piece_id: self.pieces[piece as usize].id.clone(),
                    score_time: offsets / merged as f64,
                    tempo_ratio: median(&mut ratios),
                    votes: merged as u32,
                }
            })
            .collect();
        hyps.sort_by(|a, b| {
            b.votes
                .cmp(&a.votes)
                .then_with(|| a.piece_id.cmp(&b.piece_id))
        });
        Ok(hyps)
    }

    /// Binary form: magic `SFPI1`, constraints, quantizer, piece table,
    /// key count, then per key its posting list. Little-endian throughout.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&self.constraints.d_min.to_le_bytes())?;
        w.write_all(&self.constraints.d_max.to_le_bytes())?;
        w.write_all(&(self.constraints.fanout as u32).to_le_bytes())?;
        w.write_all(&[self.quantizer.bins_per_octave])?;
        w.write_all(&(self.pieces.len() as u32).to_le_bytes())?;
        for p in &self.pieces {
            w.write_all(&(p.id.len() as u32).to_le_bytes())?;
            w.write_all(p.id.as_bytes())?;
            w.write_all(&p.duration.to_le_bytes())?;
        }
        w.write_all(&(self.postings.len() as u32).to_le_bytes())?;
        for (key, list) in &self.postings {
            w.write_all(&key.to_le_bytes())?;
            w.write_all(&(list.len() as u32).to_le_bytes())?;
            for p in list {
                w.write_all(&p.piece.to_le_bytes())?;
                w.write_all(&p.anchor_time.to_le_bytes())?;
                w.write_all(&p.dt12.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, FingerprintError> {
        let bad = |m: &str| FingerprintError::BadIndexFile(m.to_string());
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(|_| bad("missing magic"))?;
        if &magic != INDEX_MAGIC {
            return Err(bad("wrong magic"));
        }
        let mut rd = LeReader(r);
        let constraints = ExtractionConstraints {
            d_min: rd.f64()?,
            d_max: rd.f64()?,
            fanout: rd.u32()? as usize,
        };
        constraints.validate().map_err(|e| bad(&e.to_string()))?;
        let quantizer = TauQuantizer::new(rd.u8()?).map_err(|e| bad(&e.to_string()))?;
        let npieces = rd.u32()? as usize;
        let mut pieces = Vec::with_capacity(npieces.min(1 << 16));
        for _ in 0..npieces {
            let len = rd.u32()? as usize;
            let id = String::from_utf8(rd.bytes(len)?).map_err(|_| bad("piece id not utf-8"))?;
            pieces.push(PieceEntry {
                id,
                duration: rd.f64()?,
            });
        }
        if pieces.windows(2).any(|w| w[0].id >= w[1].id) {
            return Err(bad("piece table not sorted"));
        }
        let nkeys = rd.u32()? as usize;
        let mut postings = BTreeMap::new();
        for _ in 0..nkeys {
            let key = rd.u32()?;
            let n = rd.u32()? as usize;
            let mut list = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let p = Posting {
                    piece: rd.u32()?,
                    anchor_time: rd.f64()?,
                    dt12: rd.f64()?,
                };
                if p.piece as usize >= pieces.len() {
                    return Err(bad("posting refers to an unknown piece"));
                }
                list.push(p);
            }
            postings.insert(key, list);
        }
        let mut trailing = [0u8; 1];
        if rd.0.read(&mut trailing)? != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(FingerprintIndex {
            constraints,
            quantizer,
            pieces,
            postings,
        })
    }

    /// Human-readable dump; keys are written as decimal strings.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("index is always serializable")
    }
}

/// Free-function form of [`FingerprintIndex::query`].
pub fn query_index(
    index: &FingerprintIndex,
    query: &NoteSequence,
    tau_tolerance_bins: u32,
) -> Result<Vec<PieceHypothesis>, FingerprintError> {
    index.query(query, tau_tolerance_bins)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct LeReader<R>(R);

impl<R: Read> LeReader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, FingerprintError> {
        let mut buf = vec![0u8; n];
        self.0
            .read_exact(&mut buf)
            .map_err(|_| FingerprintError::BadIndexFile("unexpected end of file".into()))?;
        Ok(buf)
    }
    fn u8(&mut self) -> Result<u8, FingerprintError> {
        Ok(self.bytes(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, FingerprintError> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn f64(&mut self) -> Result<f64, FingerprintError> {
        let b = self.bytes(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}
