//! Subsequence alignment of a query chromagram against documents.
//!
//! The local cost between two unit chroma vectors is `1 − ⟨x, y⟩`. The
//! accumulated cost matrix uses the steps `(1,1)`, `(1,0)` and `(0,1)` with
//! unit weights, and its first query row is not accumulated along the
//! document, so an alignment may start at any document frame. The matching
//! curve is the last row divided by the query length: entry `m` is the
//! normalized cost of the best alignment of the whole query ending at `m`.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chroma::{cyclic_shift, ChromaVector, Chromagram, NUM_CHROMA};

/// Default threshold on normalized cost for reporting a match.
pub const DEFAULT_THRESHOLD: f64 = 0.25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("query or document chromagram is empty")]
    EmptyInput,
    #[error("query must have at least 2 frames, got {0}")]
    QueryTooShort(usize),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("malformed ranked list line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
}

/// Cosine cost of two unit vectors, clamped at 0 against rounding.
#[inline]
pub fn local_cost(x: &ChromaVector, y: &ChromaVector) -> f64 {
    (1.0 - x.dot(y)).max(0.0)
}

/// The matching function: one value per document frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingCurve {
    pub values: Vec<f64>,
    pub query_length: usize,
}

/// One retrieved segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedMatch {
    pub doc_id: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub cost: f64,
    /// Semitones by which the query sits above the document, 0..12.
    pub transposition: u8,
}

/// A document that could not be matched, with the reason.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipRecord {
    pub doc_id: String,
    pub reason: MatchError,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankOutput {
    pub matches: Vec<RankedMatch>,
    pub skipped: Vec<SkipRecord>,
}

/// Full accumulated cost matrix of one query/document pair.
#[derive(Debug, Clone)]
pub struct SubsequenceAlignment {
    rows: usize,
    cols: usize,
    acc: Vec<f64>,
}

impl SubsequenceAlignment {
    pub fn compute(query: &Chromagram, doc: &Chromagram) -> Result<Self, MatchError> {
        check_inputs(query, doc)?;
        let (n, m) = (query.len(), doc.len());
        let mut acc = vec![0.0; n * m];
        for j in 0..m {
            acc[j] = local_cost(&query.frames[0], &doc.frames[j]);
        }
        for i in 1..n {
            let x = &query.frames[i];
            let (prev, cur) = acc.split_at_mut(i * m);
            let prev = &prev[(i - 1) * m..];
            let cur = &mut cur[..m];
            cur[0] = local_cost(x, &doc.frames[0]) + prev[0];
            for j in 1..m {
                let best = prev[j - 1].min(prev[j]).min(cur[j - 1]);
                cur[j] = local_cost(x, &doc.frames[j]) + best;
            }
        }
        Ok(SubsequenceAlignment {
            rows: n,
            cols: m,
            acc,
        })
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.acc[i * self.cols + j]
    }

    pub fn curve(&self) -> MatchingCurve {
        let n = self.rows as f64;
        let last = &self.acc[(self.rows - 1) * self.cols..];
        MatchingCurve {
            values: last.iter().map(|v| v / n).collect(),
            query_length: self.rows,
        }
    }

    /// Optimal warping path ending at document frame `end`, as
    /// `(query frame, document frame)` pairs from start to end. Ties prefer
    /// the diagonal step, then the query step, then the document step.
    pub fn path(&self, end: usize) -> Vec<(usize, usize)> {
        let (mut i, mut j) = (self.rows - 1, end);
        let mut path = vec![(i, j)];
        while i > 0 {
            if j == 0 {
                i -= 1;
            } else {
                let diag = self.at(i - 1, j - 1);
                let up = self.at(i - 1, j);
                let left = self.at(i, j - 1);
                if diag <= up && diag <= left {
                    i -= 1;
                    j -= 1;
                } else if up <= left {
                    i -= 1;
                } else {
                    j -= 1;
                }
            }
            path.push((i, j));
        }
        path.reverse();
        path
    }

    /// First document frame of the optimal path ending at `end`.
    pub fn start_of(&self, end: usize) -> usize {
        self.path(end)[0].1
    }
}

fn check_inputs(query: &Chromagram, doc: &Chromagram) -> Result<(), MatchError> {
    if query.is_empty() || doc.is_empty() {
        return Err(MatchError::EmptyInput);
    }
    if query.len() < 2 {
        return Err(MatchError::QueryTooShort(query.len()));
    }
    Ok(())
}

/// Matching curve of `query` against `doc`.
pub fn matching_function(
    query: &Chromagram,
    doc: &Chromagram,
) -> Result<MatchingCurve, MatchError> {
    Ok(SubsequenceAlignment::compute(query, doc)?.curve())
}

/// Greedy minimum extraction: repeatedly takes the smallest value strictly
/// below `threshold` (earliest frame on ties), then suppresses
/// `±exclusion` frames around it. Returned by cost ascending.
pub fn local_minima(curve: &MatchingCurve, threshold: f64, exclusion: usize) -> Vec<(usize, f64)> {
    let exclusion = exclusion.max(1);
    let mut order: Vec<usize> = (0..curve.values.len())
        .filter(|&i| curve.values[i] < threshold)
        .collect();
    order.sort_by(|&a, &b| curve.values[a].total_cmp(&curve.values[b]).then(a.cmp(&b)));
    let mut suppressed = vec![false; curve.values.len()];
    let mut out = Vec::new();
    for i in order {
        if suppressed[i] {
            continue;
        }
        out.push((i, curve.values[i]));
        let lo = i.saturating_sub(exclusion);
        let hi = (i + exclusion).min(curve.values.len() - 1);
        suppressed[lo..=hi].iter_mut().for_each(|s| *s = true);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankParams {
    pub threshold: f64,
    /// Suppression half-width; `None` means half the query length.
    pub exclusion: Option<usize>,
    pub search_transpositions: bool,
}

impl Default for RankParams {
    fn default() -> Self {
        RankParams {
            threshold: DEFAULT_THRESHOLD,
            exclusion: None,
            search_transpositions: false,
        }
    }
}

fn rank_order(a: &RankedMatch, b: &RankedMatch) -> Ordering {
    a.cost
        .total_cmp(&b.cost)
        .then_with(|| a.doc_id.cmp(&b.doc_id))
        .then(a.end_frame.cmp(&b.end_frame))
}

/// Ranks matching segments across a corpus.
///
/// With `search_transpositions`, the query is evaluated under all 12
/// cyclic shifts; each document frame keeps the cheapest shift (smallest
/// transposition on ties) before minima are extracted. Documents that fail
/// are reported in [`RankOutput::skipped`].
pub fn rank_documents(
    query: &Chromagram,
    corpus: &[(String, Chromagram)],
    params: &RankParams,
) -> Result<RankOutput, MatchError> {
    if corpus.is_empty() {
        return Err(MatchError::EmptyCorpus);
    }
    if query.is_empty() {
        return Err(MatchError::EmptyInput);
    }
    if query.len() < 2 {
        return Err(MatchError::QueryTooShort(query.len()));
    }
    let exclusion = params.exclusion.unwrap_or(query.len() / 2).max(1);
    let transpositions: Vec<u8> = if params.search_transpositions {
        (0..NUM_CHROMA as u8).collect()
    } else {
        vec![0]
    };
    // Query transposed up by t matches a document after shifting it down by t.
    let shifted: Vec<Chromagram> = transpositions
        .iter()
        .map(|&t| cyclic_shift(query, -(t as i32)))
        .collect();

    let per_doc: Vec<Result<Vec<RankedMatch>, SkipRecord>> = corpus
        .par_iter()
        .map(|(doc_id, doc)| {
            let alignments = shifted
                .iter()
                .map(|q| SubsequenceAlignment::compute(q, doc))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|reason| SkipRecord {
                    doc_id: doc_id.clone(),
                    reason,
                })?;
            let curves: Vec<MatchingCurve> = alignments.iter().map(|a| a.curve()).collect();
            let mut best = curves[0].clone();
            let mut which = vec![0usize; doc.len()];
            for (s, c) in curves.iter().enumerate().skip(1) {
                for (j, &v) in c.values.iter().enumerate() {
                    if v < best.values[j] {
                        best.values[j] = v;
                        which[j] = s;
                    }
                }
            }
            Ok(local_minima(&best, params.threshold, exclusion)
                .into_iter()
                .map(|(end, cost)| RankedMatch {
                    doc_id: doc_id.clone(),
                    start_frame: alignments[which[end]].start_of(end),
                    end_frame: end,
                    cost,
                    transposition: transpositions[which[end]],
                })
                .collect())
        })
        .collect();

    let mut out = RankOutput::default();
    for r in per_doc {
        match r {
            Ok(mut m) => out.matches.append(&mut m),
            Err(skip) => out.skipped.push(skip),
        }
    }
    out.matches.sort_by(rank_order);
    Ok(out)
}

/// `rank,doc_id,start_frame,end_frame,cost,transposition`, ranks from 1.
pub fn to_ranked_csv(matches: &[RankedMatch]) -> String {
    let mut out = String::from("rank,doc_id,start_frame,end_frame,cost,transposition\n");
    for (i, m) in matches.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{:?},{}",
            i + 1,
            m.doc_id,
            m.start_frame,
            m.end_frame,
            m.cost,
            m.transposition
        );
    }
    out
}

pub fn parse_ranked_csv(text: &str) -> Result<Vec<RankedMatch>, MatchError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line_no == 1 || line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| MatchError::MalformedLine {
            line: line_no,
            reason: reason.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        out.push(RankedMatch {
            doc_id: f[1].to_string(),
            start_frame: f[2].parse().map_err(|_| bad("bad start_frame"))?,
            end_frame: f[3].parse().map_err(|_| bad("bad end_frame"))?,
            cost: f[4].parse().map_err(|_| bad("bad cost"))?,
            transposition: f[5].parse().map_err(|_| bad("bad transposition"))?,
        });
    }
    Ok(out)
}
