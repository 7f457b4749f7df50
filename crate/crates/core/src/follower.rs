//! Real-time score following with two cooperating components.
//!
//! The *identifier* resolves the most recent notes of the performance
//! against a [`FingerprintIndex`] at a fixed cadence and proposes a piece
//! and score position. The *tracker* follows the position locally with an
//! online, band-limited version of the subsequence alignment used in
//! [`crate::matching`]. The [`Companion`] arbitrates between them: a
//! tracker is seeded from the first confident identification and re-seeded
//! whenever the identifier persistently disagrees with it or the tracker
//! loses confidence.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::sync::{mpsc, Arc, Mutex};

use thiserror::Error;

use crate::chroma::{
    cyclic_shift, symbolic_chromagram, ChromaError, ChromaVector, Chromagram, DEFAULT_EPS,
    NUM_CHROMA,
};
use crate::fingerprint::{
    build_index, ExtractionConstraints, FingerprintError, FingerprintIndex, TauQuantizer,
    DEFAULT_TAU_TOLERANCE_BINS,
};
use crate::matching::{local_cost, matching_function};
use crate::notes::{NoteEvent, NoteSequence};

pub const DEFAULT_TRACKER_WIDTH: usize = 50;
/// Number of recent input frames averaged into the tracker confidence.
pub const CONFIDENCE_WINDOW: usize = 20;
/// Seconds of recent input used to estimate the transposition at seeding.
const TRANSPOSITION_WINDOW_SECONDS: f64 = 4.0;
/// Accumulated-cost difference below which score frames count as tied.
const TIE_TOLERANCE: f64 = 0.1;
const MIN_TEMPO_RATIO: f64 = 0.25;
const MAX_TEMPO_RATIO: f64 = 4.0;

#[derive(Debug, Error)]
pub enum FollowError {
    #[error("tracker position {position} outside document of {len} frames")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("tracker width must be at least 3, got {0}")]
    WidthTooSmall(usize),
    #[error("companion not initialized: {0}")]
    NotInitialized(String),
    #[error("malformed stream line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
    #[error(transparent)]
    Chroma(#[from] ChromaError),
}

/// Online alignment state against one document.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub doc_id: String,
    /// Current document frame.
    pub position: usize,
    /// In `[0, 1]`; 1 until the first frame has been aligned.
    pub confidence: f64,
    frontier_start: usize,
    /// Accumulated costs over `frontier_start..`, shifted so the minimum is 0.
    frontier: Vec<f64>,
    recent_costs: VecDeque<f64>,
    steps: u64,
    dwell: u64,
}

impl TrackerState {
    /// Starts tracking at `position`: any document frame within `radius`
    /// may begin the alignment at zero cost.
    pub fn seed(
        doc_id: impl Into<String>,
        doc: &Chromagram,
        position: usize,
        radius: usize,
    ) -> Result<Self, FollowError> {
        if position >= doc.len() {
            return Err(FollowError::PositionOutOfRange {
                position,
                len: doc.len(),
            });
        }
        let lo = position.saturating_sub(radius);
        let hi = (position + radius).min(doc.len() - 1);
        Ok(TrackerState {
            doc_id: doc_id.into(),
            position: lo,
            confidence: 1.0,
            frontier_start: lo,
            frontier: vec![0.0; hi - lo + 1],
            recent_costs: VecDeque::with_capacity(CONFIDENCE_WINDOW),
            steps: 0,
            dwell: 0,
        })
    }

    /// Restarts the alignment at `position` in the same document while
    /// keeping the confidence history.
    pub fn reseeded(
        &self,
        doc: &Chromagram,
        position: usize,
        radius: usize,
    ) -> Result<Self, FollowError> {
        let fresh = TrackerState::seed(self.doc_id.clone(), doc, position, radius)?;
        Ok(TrackerState {
            confidence: self.confidence,
            recent_costs: self.recent_costs.clone(),
            ..fresh
        })
    }

    /// First document frame of the frontier and the frontier values.
    pub fn frontier(&self) -> (usize, &[f64]) {
        (self.frontier_start, &self.frontier)
    }

    /// Input frames aligned since seeding.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Consecutive steps the position has not moved.
    pub fn dwell(&self) -> u64 {
        self.dwell
    }

    /// Number of consecutive frames after `position` whose accumulated
    /// cost is within `tolerance` of it. Repeated score frames (held
    /// notes) make such runs.
    pub fn tied_span(&self, tolerance: f64) -> usize {
        let Some(at) = self.position.checked_sub(self.frontier_start) else {
            return 0;
        };
        let Some(&v) = self.frontier.get(at) else {
            return 0;
        };
        self.frontier[at + 1..]
            .iter()
            .take_while(|&&w| (w - v).abs() <= tolerance)
            .count()
    }

    fn prev(&self, m: usize) -> f64 {
        if m >= self.frontier_start && m - self.frontier_start < self.frontier.len() {
            self.frontier[m - self.frontier_start]
        } else {
            f64::INFINITY
        }
    }
}

/// Aligns one more input frame.
///
/// The frontier is recomputed over document frames
/// `[position − 1, position + width]` with the steps and cost of
/// [`crate::matching`]. The new position is the frontier minimum at or
/// after the current position (earliest on ties), so positions never move
/// backwards. Confidence is `1 − mean/2` over the last
/// [`CONFIDENCE_WINDOW`] normalized costs, where the normalized cost is
/// twice the cosine cost at the chosen frame: unit chroma vectors are
/// non-negative, so their cosine cost lies in `[0, 1]` and doubling it
/// spans `[0, 2]`.
pub fn tracker_step(
    state: &TrackerState,
    frame: &ChromaVector,
    doc: &Chromagram,
    width: usize,
) -> Result<TrackerState, FollowError> {
    if width < 3 {
        return Err(FollowError::WidthTooSmall(width));
    }
    if state.position >= doc.len() {
        return Err(FollowError::PositionOutOfRange {
            position: state.position,
            len: doc.len(),
        });
    }
    let lo = state.position.saturating_sub(1);
    let hi = (state.position + width).min(doc.len() - 1);
    let mut next = vec![f64::INFINITY; hi - lo + 1];
    for m in lo..=hi {
        let mut best = state.prev(m);
        if m > 0 {
            best = best.min(state.prev(m - 1));
        }
        if m > lo {
            best = best.min(next[m - 1 - lo]);
        }
        next[m - lo] = local_cost(frame, &doc.frames[m]) + best;
    }
    let floor = next.iter().copied().fold(f64::INFINITY, f64::min);
    if floor.is_finite() {
        next.iter_mut().for_each(|v| *v -= floor);
    }
    let mut position = state.position;
    for m in state.position..=hi {
        if next[m - lo] < next[position - lo] {
            position = m;
        }
    }

    let mut recent = state.recent_costs.clone();
    if recent.len() == CONFIDENCE_WINDOW {
        recent.pop_front();
    }
    recent.push_back(2.0 * local_cost(frame, &doc.frames[position]));
    let mean = recent.iter().sum::<f64>() / recent.len() as f64;
    Ok(TrackerState {
        doc_id: state.doc_id.clone(),
        position,
        confidence: (1.0 - mean / 2.0).clamp(0.0, 1.0),
        frontier_start: lo,
        frontier: next,
        recent_costs: recent,
        steps: state.steps + 1,
        dwell: if position == state.position {
            state.dwell + 1
        } else {
            0
        },
    })
}

/// Arbitration thresholds and timing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompanionConfig {
    /// Seconds of recent notes handed to the identifier.
    pub buffer_seconds: f64,
    /// Stream seconds between identifier evaluations.
    pub eval_interval: f64,
    /// Votes of the top piece over the runner-up required to act on it.
    pub margin: f64,
    /// Consecutive disagreeing evaluations that force a re-seed.
    pub consecutive: u32,
    pub confidence_threshold: f64,
    /// Minimum votes for an identification to count at all.
    pub min_votes: u32,
    /// A same-piece identification further than this many score seconds
    /// from the tracker counts as a position disagreement.
    pub jump_seconds: f64,
    /// Consecutive position disagreements that force a re-seed.
    pub jump_consecutive: u32,
    pub tracker_width: usize,
    /// Frames a seeded alignment may start from on either side of the seed.
    pub seed_radius: usize,
    /// Chroma frames per second, for both scores and derived input frames.
    pub frame_rate: f64,
    pub tau_tolerance_bins: u32,
}

impl Default for CompanionConfig {
    fn default() -> Self {
        CompanionConfig {
            buffer_seconds: 8.0,
            eval_interval: 1.0,
            margin: 1.5,
            consecutive: 3,
            confidence_threshold: 0.4,
            min_votes: 8,
            jump_seconds: 1.0,
            jump_consecutive: 1,
            tracker_width: DEFAULT_TRACKER_WIDTH,
            seed_radius: 5,
            frame_rate: 10.0,
            tau_tolerance_bins: DEFAULT_TAU_TOLERANCE_BINS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Status {
    Identifying,
    Tracking,
    Lost,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Identifying => "identifying",
            Status::Tracking => "tracking",
            Status::Lost => "lost",
        }
    }
}

/// What the companion believes after an input.
#[derive(Debug, Clone, PartialEq)]
pub struct CompanionHypothesis {
    pub stream_time: f64,
    pub status: Status,
    pub piece_id: String,
    /// Score position in seconds; 0 while identifying.
    pub score_time: f64,
    pub tempo_ratio: f64,
    pub confidence: f64,
}

/// One record of the input stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StreamItem {
    /// A detected note; its onset is the stream time.
    Note(NoteEvent),
    /// An externally computed chroma frame at `time`.
    Frame { time: f64, chroma: ChromaVector },
}

impl StreamItem {
    pub fn time(&self) -> f64 {
        match self {
            StreamItem::Note(n) => n.onset,
            StreamItem::Frame { time, .. } => *time,
        }
    }
}

/// Snapshot of the note buffer handed to the identifier.
#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub stream_time: f64,
    pub notes: Vec<NoteEvent>,
    /// Stream time of the next input frame the tracker will see.
    pub next_frame_time: f64,
}

/// Identifier verdict, immutable once produced.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentifierMessage {
    pub stream_time: f64,
    /// `(piece, score time at next_frame_time, tempo ratio, votes)`.
    pub top: Option<(String, f64, f64, u32)>,
    pub runner_up_votes: u32,
    /// Whether `top` clears both `min_votes` and the margin.
    pub confident: bool,
}

/// The stateless identifier component.
#[derive(Debug, Clone)]
pub struct Identifier {
    index: Arc<FingerprintIndex>,
    config: CompanionConfig,
}

impl Identifier {
    pub fn evaluate(&self, req: &EvalRequest) -> IdentifierMessage {
        let none = IdentifierMessage {
            stream_time: req.stream_time,
            top: None,
            runner_up_votes: 0,
            confident: false,
        };
        let Some(first) = req.notes.first() else {
            return none;
        };
        let origin = first.onset;
        let rebased: Vec<NoteEvent> = req
            .notes
            .iter()
            .map(|e| NoteEvent {
                onset: e.onset - origin,
                ..*e
            })
            .collect();
        let Ok(query) = NoteSequence::new("query", rebased) else {
            return none;
        };
        let Ok(hyps) = self.index.query(&query, self.config.tau_tolerance_bins) else {
            return none;
        };
        let Some(top) = hyps.first() else {
            return none;
        };
        let runner = hyps.get(1).map_or(0, |h| h.votes);
        let confident = top.votes >= self.config.min_votes
            && top.votes as f64 >= self.config.margin * runner as f64;
        let ratio = if top.tempo_ratio.is_finite() && top.tempo_ratio > 0.0 {
            top.tempo_ratio
        } else {
            1.0
        };
        let score_now = top.score_time + (req.next_frame_time - origin) / ratio;
        IdentifierMessage {
            stream_time: req.stream_time,
            top: Some((top.piece_id.clone(), score_now, ratio, top.votes)),
            runner_up_votes: runner,
            confident,
        }
    }
}

/// Shared, atomically replaced view of the latest hypothesis.
#[derive(Debug, Default)]
pub struct HypothesisCell(Mutex<Option<Arc<CompanionHypothesis>>>);

impl HypothesisCell {
    pub fn load(&self) -> Option<Arc<CompanionHypothesis>> {
        self.0.lock().expect("cell lock poisoned").clone()
    }

    fn store(&self, h: CompanionHypothesis) {
        *self.0.lock().expect("cell lock poisoned") = Some(Arc::new(h));
    }
}

/// Incremental chroma frames from a note stream. The hop may change
/// mid-stream so that frames follow the performance tempo.
#[derive(Debug, Clone)]
struct FrameDeriver {
    active: Vec<NoteEvent>,
    origin: f64,
    count: u64,
    hop: f64,
}

impl FrameDeriver {
    fn new(hop: f64) -> Self {
        FrameDeriver {
            active: Vec::new(),
            origin: 0.0,
            count: 0,
            hop,
        }
    }

    fn next_start(&self) -> f64 {
        self.origin + self.count as f64 * self.hop
    }

    /// Later frames use `hop`; emitted frames are unaffected.
    fn set_hop(&mut self, hop: f64) {
        self.origin = self.next_start();
        self.count = 0;
        self.hop = hop;
    }

    /// Frames whose interval ends at or before `upto` can no longer change.
    /// Each is pushed as `(start, end, chroma)`.
    fn drain(&mut self, upto: f64, out: &mut Vec<(f64, f64, ChromaVector)>) {
        loop {
            let start = self.next_start();
            let end = self.origin + (self.count + 1) as f64 * self.hop;
            if end > upto {
                break;
            }
            let mut v = ChromaVector::ZERO;
            for n in &self.active {
                let overlap = n.end().min(end) - n.onset.max(start);
                if overlap > 0.0 {
                    v[n.pitch_class()] += overlap / self.hop;
                }
            }
            out.push((start, end, v.normalized(DEFAULT_EPS)));
            self.count += 1;
            self.active.retain(|n| n.end() > end);
        }
    }
}

/// The piano music companion.
#[derive(Debug)]
pub struct Companion {
    identifier: Identifier,
    docs: Arc<BTreeMap<String, Chromagram>>,
    config: CompanionConfig,
    buffer: VecDeque<NoteEvent>,
    stream_time: f64,
    next_eval: f64,
    derive_frames: bool,
    deriver: FrameDeriver,
    pending_frames: Vec<(f64, f64, ChromaVector)>,
    last_frame_end: Option<f64>,
    tracker: Option<TrackerState>,
    seed_score_time: f64,
    tempo_ratio: f64,
    status: Status,
    streak: u32,
    streak_piece: Option<String>,
    jump_streak: u32,
    recent_frames: VecDeque<ChromaVector>,
    transposition: u8,
    cell: Arc<HypothesisCell>,
}

impl Companion {
    /// `docs` must hold a chromagram at `config.frame_rate` for every
    /// piece in `index`.
    pub fn new(
        index: Arc<FingerprintIndex>,
        docs: Arc<BTreeMap<String, Chromagram>>,
        config: CompanionConfig,
    ) -> Result<Self, FollowError> {
        if index.is_empty() {
            return Err(FollowError::NotInitialized(
                "fingerprint index is empty".into(),
            ));
        }
        for p in index.pieces() {
            match docs.get(&p.id) {
                None => {
                    return Err(FollowError::NotInitialized(format!(
                        "no chromagram for piece {:?}",
                        p.id
                    )))
                }
                Some(c) if c.is_empty() => {
                    return Err(FollowError::NotInitialized(format!(
                        "empty chromagram for piece {:?}",
                        p.id
                    )))
                }
                _ => {}
            }
        }
        if config.tracker_width < 3 {
            return Err(FollowError::WidthTooSmall(config.tracker_width));
        }
        Ok(Companion {
            identifier: Identifier { index, config },
            docs,
            config,
            buffer: VecDeque::new(),
            stream_time: 0.0,
            next_eval: config.eval_interval,
            derive_frames: true,
            deriver: FrameDeriver::new(1.0 / config.frame_rate),
            pending_frames: Vec::new(),
            last_frame_end: None,
            tracker: None,
            seed_score_time: 0.0,
            tempo_ratio: 1.0,
            status: Status::Identifying,
            streak: 0,
            streak_piece: None,
            jump_streak: 0,
            recent_frames: VecDeque::new(),
            transposition: 0,
            cell: Arc::new(HypothesisCell::default()),
        })
    }

    /// Builds the index and score chromagrams from a symbolic corpus.
    pub fn from_corpus(
        corpus: &[NoteSequence],
        constraints: &ExtractionConstraints,
        quantizer: TauQuantizer,
        config: CompanionConfig,
    ) -> Result<Self, FollowError> {
        let build = build_index(corpus, constraints, quantizer)?;
        let docs = score_chromagrams(corpus, config.frame_rate)?;
        Companion::new(Arc::new(build.index), Arc::new(docs), config)
    }

    pub fn identifier(&self) -> Identifier {
        self.identifier.clone()
    }

    pub fn config(&self) -> &CompanionConfig {
        &self.config
    }

    pub fn cell(&self) -> Arc<HypothesisCell> {
        Arc::clone(&self.cell)
    }

    pub fn tracker(&self) -> Option<&TrackerState> {
        self.tracker.as_ref()
    }

    /// Stage 1: take the input into the stream state and, when an
    /// evaluation is due, return the identifier's request.
    pub fn accept(&mut self, item: &StreamItem) -> Option<EvalRequest> {
        self.stream_time = self.stream_time.max(item.time());
        let rate = self.config.frame_rate;
        match *item {
            StreamItem::Note(n) => {
                if self.derive_frames {
                    self.deriver.drain(n.onset, &mut self.pending_frames);
                    self.deriver.active.push(n);
                }
                self.buffer.push_back(n);
                let horizon = self.stream_time - self.config.buffer_seconds;
                while self.buffer.front().is_some_and(|e| e.onset < horizon) {
                    self.buffer.pop_front();
                }
            }
            StreamItem::Frame { time, chroma } => {
                if self.derive_frames {
                    self.derive_frames = false;
                    self.deriver = FrameDeriver::new(1.0 / rate);
                    self.pending_frames.clear();
                }
                self.pending_frames.push((time, time + 1.0 / rate, chroma));
            }
        }
        if self.stream_time + 1e-9 < self.next_eval {
            return None;
        }
        while self.next_eval <= self.stream_time + 1e-9 {
            self.next_eval += self.config.eval_interval;
        }
        let next_frame_time = if self.derive_frames {
            self.deriver.next_start()
        } else {
            self.stream_time
        };
        Some(EvalRequest {
            stream_time: self.stream_time,
            notes: self.buffer.iter().copied().collect(),
            next_frame_time,
        })
    }

    /// Stage 2: align every frame that became available.
    pub fn advance_tracker(&mut self) {
        let frames = std::mem::take(&mut self.pending_frames);
        let keep = (TRANSPOSITION_WINDOW_SECONDS * self.config.frame_rate)
            .ceil()
            .max(2.0) as usize;
        for (_, end, chroma) in frames {
            self.last_frame_end = Some(end);
            if self.recent_frames.len() == keep {
                self.recent_frames.pop_front();
            }
            self.recent_frames.push_back(chroma);
            let Some(state) = &self.tracker else {
                continue;
            };
            let doc = &self.docs[&state.doc_id];
            let input = chroma.rotated(-(self.transposition as i32));
            // Positions are always inside the document, so a step cannot fail.
            if let Ok(next) = tracker_step(state, &input, doc, self.config.tracker_width) {
                self.tracker = Some(next);
            }
        }
        if self.status == Status::Lost {
            if let Some(t) = &self.tracker {
                if t.steps() >= CONFIDENCE_WINDOW as u64
                    && t.confidence >= self.config.confidence_threshold
                {
                    self.status = Status::Tracking;
                }
            }
        }
    }

    /// Stage 3: arbitrate with an identifier verdict.
    pub fn apply(&mut self, msg: &IdentifierMessage) {
        let Some((piece, score_time, ratio, votes)) = msg.top.clone() else {
            self.streak = 0;
            self.check_lost(false);
            return;
        };
        match self.status {
            Status::Identifying | Status::Lost => {
                if msg.confident {
                    self.seed(&piece, score_time, ratio);
                }
            }
            Status::Tracking => {
                let tracked = self
                    .tracker
                    .as_ref()
                    .map(|t| t.doc_id.clone())
                    .unwrap_or_default();
                let other_piece = msg.confident && piece != tracked;
                // The tracker already corroborates the piece, so a position
                // correction needs only enough votes, not the margin.
                let moved = votes >= self.config.min_votes
                    && piece == tracked
                    && (score_time - self.score_time_at(msg.stream_time)).abs()
                        > self.config.jump_seconds;
                if other_piece {
                    if self.streak_piece.as_deref() == Some(piece.as_str()) {
                        self.streak += 1;
                    } else {
                        self.streak = 1;
                        self.streak_piece = Some(piece.clone());
                    }
                } else {
                    self.streak = 0;
                    self.streak_piece = None;
                }
                self.jump_streak = if moved { self.jump_streak + 1 } else { 0 };
                if msg.confident && piece == tracked && !moved {
                    self.set_tempo(ratio);
                }
                if self.jump_streak >= self.config.jump_consecutive
                    || self.streak >= self.config.consecutive
                {
                    self.seed(&piece, score_time, ratio);
                } else if self.tracker_confidence() < self.config.confidence_threshold {
                    if msg.confident {
                        self.seed(&piece, score_time, ratio);
                    } else {
                        self.status = Status::Lost;
                    }
                }
            }
        }
    }

    fn check_lost(&mut self, confident: bool) {
        if self.status == Status::Tracking
            && !confident
            && self.tracker_confidence() < self.config.confidence_threshold
        {
            self.status = Status::Lost;
        }
    }

    fn tracker_confidence(&self) -> f64 {
        self.tracker.as_ref().map_or(0.0, |t| t.confidence)
    }

    fn seed(&mut self, piece: &str, score_time: f64, ratio: f64) {
        let doc = &self.docs[piece];
        let rate = self.config.frame_rate;
        let pos = ((score_time * rate).round().max(0.0) as usize).min(doc.len() - 1);
        self.transposition = self.estimate_transposition(doc, pos);
        self.tracker = match &self.tracker {
            Some(t) if t.doc_id == piece => t.reseeded(doc, pos, self.config.seed_radius).ok(),
            _ => TrackerState::seed(piece, doc, pos, self.config.seed_radius).ok(),
        };
        self.seed_score_time = pos as f64 / rate;
        self.set_tempo(ratio);
        self.status = Status::Tracking;
        self.streak = 0;
        self.streak_piece = None;
        self.jump_streak = 0;
    }

    /// Transposition of the performance relative to `doc`: the shift under
    /// which the recent input best matches the score just before `pos`
    /// (smallest shift on ties, 0 without enough input).
    fn estimate_transposition(&self, doc: &Chromagram, pos: usize) -> u8 {
        let n = self.recent_frames.len();
        if n < 2 {
            return 0;
        }
        let Ok(query) = Chromagram::new(
            self.recent_frames.iter().copied().collect(),
            self.config.frame_rate,
        ) else {
            return 0;
        };
        let radius = self.config.seed_radius;
        let start = pos.saturating_sub(2 * n + radius);
        let end = (pos + radius + 1).min(doc.len());
        let window = doc.slice(start, end);
        let mut best = (f64::INFINITY, 0u8);
        for t in 0..NUM_CHROMA as u8 {
            let Ok(curve) = matching_function(&cyclic_shift(&query, -(t as i32)), &window) else {
                return 0;
            };
            let cost = curve.values.iter().copied().fold(f64::INFINITY, f64::min);
            if cost < best.0 {
                best = (cost, t);
            }
        }
        best.1
    }

    /// Transposition applied to input frames before tracking.
    pub fn transposition(&self) -> u8 {
        self.transposition
    }

    /// Derived frames then span one score frame at the performance tempo,
    /// so the tracker advances about one frame per step.
    fn set_tempo(&mut self, ratio: f64) {
        self.tempo_ratio = ratio.clamp(MIN_TEMPO_RATIO, MAX_TEMPO_RATIO);
        if self.derive_frames {
            self.deriver
                .set_hop(self.tempo_ratio / self.config.frame_rate);
        }
    }

    /// Score position extrapolated to stream time `t`.
    fn score_time_at(&self, t: f64) -> f64 {
        let Some(tracker) = &self.tracker else {
            return 0.0;
        };
        let rate = self.config.frame_rate;
        let doc = &self.docs[&tracker.doc_id];
        let ratio = if self.tempo_ratio > 0.0 {
            self.tempo_ratio
        } else {
            1.0
        };
        let (base, since) = if tracker.steps() == 0 {
            (self.seed_score_time, 0.0)
        } else {
            // Inside a run of tied frames, advance at the identified tempo.
            let ahead =
                (tracker.dwell() as f64 / ratio).min(tracker.tied_span(TIE_TOLERANCE) as f64);
            let frame_end = self.last_frame_end.unwrap_or(t);
            (
                (tracker.position as f64 + ahead + 1.0) / rate,
                (t - frame_end).max(0.0),
            )
        };
        (base + since / ratio).clamp(0.0, doc.duration())
    }

    pub fn hypothesis(&self) -> CompanionHypothesis {
        match &self.tracker {
            Some(t) if self.status != Status::Identifying => CompanionHypothesis {
                stream_time: self.stream_time,
                status: self.status,
                piece_id: t.doc_id.clone(),
                score_time: self.score_time_at(self.stream_time),
                tempo_ratio: self.tempo_ratio,
                confidence: t.confidence,
            },
            _ => CompanionHypothesis {
                stream_time: self.stream_time,
                status: self.status,
                piece_id: String::new(),
                score_time: 0.0,
                tempo_ratio: 1.0,
                confidence: 0.0,
            },
        }
    }

    /// Runs one input through all three stages on the calling thread.
    pub fn process(&mut self, item: &StreamItem) -> CompanionHypothesis {
        let req = self.accept(item);
        self.advance_tracker();
        if let Some(req) = req {
            let msg = self.identifier.evaluate(&req);
            self.apply(&msg);
        }
        let h = self.hypothesis();
        self.cell.store(h.clone());
        h
    }
}

/// Free-function form of [`Companion::process`].
pub fn companion_process(companion: &mut Companion, item: &StreamItem) -> CompanionHypothesis {
    companion.process(item)
}

/// Symbolic chromagrams of every piece, keyed by id.
pub fn score_chromagrams(
    corpus: &[NoteSequence],
    frame_rate: f64,
) -> Result<BTreeMap<String, Chromagram>, ChromaError> {
    corpus
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| Ok((s.id.clone(), symbolic_chromagram(s, frame_rate)?)))
        .collect()
}

/// Feeds a whole stream on one thread.
pub fn run_sequential(companion: &mut Companion, items: &[StreamItem]) -> Vec<CompanionHypothesis> {
    items.iter().map(|it| companion.process(it)).collect()
}

/// Feeds a whole stream with the identifier on its own thread. Requests
/// and verdicts travel over channels; the tracker advances while the
/// identifier works, and each verdict is applied before the next input,
/// so the trace equals [`run_sequential`]'s.
pub fn run_concurrent(companion: &mut Companion, items: &[StreamItem]) -> Vec<CompanionHypothesis> {
    let identifier = companion.identifier();
    let (req_tx, req_rx) = mpsc::channel::<EvalRequest>();
    let (msg_tx, msg_rx) = mpsc::channel::<IdentifierMessage>();
    std::thread::scope(|scope| {
        scope.spawn(move || {
            for req in req_rx {
                if msg_tx.send(identifier.evaluate(&req)).is_err() {
                    break;
                }
            }
        });
        let mut trace = Vec::with_capacity(items.len());
        for item in items {
            let pending = companion.accept(item);
            let waiting = pending.is_some();
            if let Some(req) = pending {
                req_tx.send(req).expect("identifier thread alive");
            }
            companion.advance_tracker();
            if waiting {
                let msg = msg_rx.recv().expect("identifier thread alive");
                companion.apply(&msg);
            }
            let h = companion.hypothesis();
            companion.cell.store(h.clone());
            trace.push(h);
        }
        drop(req_tx);
        trace
    })
}

/// Parses `E,onset,duration,pitch,velocity` and `F,v0,…,v11` records.
/// Frames are timed by their position in the stream at `frame_rate`.
pub fn parse_stream(text: &str, frame_rate: f64) -> Result<Vec<StreamItem>, FollowError> {
    let mut items = Vec::new();
    let mut frames = 0u64;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| FollowError::MalformedLine {
            line: line_no,
            reason,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        match fields[0] {
            "E" => {
                if fields.len() != 5 {
                    return Err(bad(format!(
                        "E record needs 5 fields, found {}",
                        fields.len()
                    )));
                }
                let num = |i: usize| -> Result<f64, FollowError> {
                    fields[i]
                        .parse()
                        .map_err(|_| bad(format!("bad number {:?}", fields[i])))
                };
                let (onset, duration, pitch, velocity) = (num(1)?, num(2)?, num(3)?, num(4)?);
                if pitch.fract() != 0.0
                    || velocity.fract() != 0.0
                    || !(0.0..=127.0).contains(&pitch)
                {
                    return Err(bad("pitch/velocity must be integers in range".into()));
                }
                let ev = NoteEvent::new(
                    onset,
                    duration,
                    pitch as u8,
                    velocity.clamp(0.0, 127.0) as u8,
                )
                .map_err(|e| bad(e.to_string()))?;
                items.push(StreamItem::Note(ev));
            }
            "F" => {
                if fields.len() != 1 + NUM_CHROMA {
                    return Err(bad(format!(
                        "F record needs 13 fields, found {}",
                        fields.len()
                    )));
                }
                let mut v = ChromaVector::ZERO;
                for i in 0..NUM_CHROMA {
                    v[i] = fields[i + 1]
                        .parse()
                        .map_err(|_| bad(format!("bad number {:?}", fields[i + 1])))?;
                }
                if !v.is_valid() {
                    return Err(bad("chroma values must be finite and non-negative".into()));
                }
                items.push(StreamItem::Frame {
                    time: frames as f64 / frame_rate,
                    chroma: v.normalized(DEFAULT_EPS),
                });
                frames += 1;
            }
            other => return Err(bad(format!("unknown record type {other:?}"))),
        }
    }
    Ok(items)
}

/// Writes a stream in the record format read by [`parse_stream`].
pub fn to_stream_text(items: &[StreamItem]) -> String {
    let mut out = String::new();
    for it in items {
        match it {
            StreamItem::Note(n) => {
                let _ = writeln!(
                    out,
                    "E,{:?},{:?},{},{}",
                    n.onset, n.duration, n.pitch, n.velocity
                );
            }
            StreamItem::Frame { chroma, .. } => {
                out.push('F');
                for v in chroma.0 {
                    let _ = write!(out, ",{v:?}");
                }
                out.push('\n');
            }
        }
    }
    out
}

/// Note stream of a sequence, one item per event.
pub fn note_stream(seq: &NoteSequence) -> Vec<StreamItem> {
    seq.events().iter().copied().map(StreamItem::Note).collect()
}

/// `stream_time,status,piece_id,score_time,tempo_ratio,confidence`.
pub fn to_trace_csv(trace: &[CompanionHypothesis]) -> String {
    let mut out = String::from("stream_time,status,piece_id,score_time,tempo_ratio,confidence\n");
    for h in trace {
        let _ = writeln!(
            out,
            "{:.6},{},{},{:.6},{:.6},{:.6}",
            h.stream_time,
            h.status.as_str(),
            h.piece_id,
            h.score_time,
            h.tempo_ratio,
            h.confidence
        );
    }
    out
}
