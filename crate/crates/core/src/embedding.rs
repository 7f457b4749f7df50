//! A two-pathway embedding trained with a pairwise ranking loss.
//!
//! A score-side pathway `f` maps a piano-roll snippet and an audio-side
//! pathway `g` maps a log-frequency excerpt into a shared `k`-dimensional
//! space where matching pairs score higher (by cosine) than non-matching
//! ones. Each pathway is one `tanh` hidden layer followed by a linear
//! projection and L2 normalization.
//!
//! For a batch of `B` pairs the loss is
//! `Σᵢ Σ_{ℓ≠i} max(0, γ − s(xᵢ, yᵢ) + s(xᵢ, y_ℓ))`
//! with `s` the dot product of the two embeddings; the other excerpts of
//! the batch serve as contrasting examples.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::notes::NoteSequence;
use crate::synth::pitch_to_hz;

pub const SNIPPET_ROWS: usize = 90;
pub const SNIPPET_COLS: usize = 100;
pub const EXCERPT_ROWS: usize = 92;
pub const EXCERPT_COLS: usize = 42;
/// MIDI pitch of row 0 in both grids.
pub const LOWEST_PITCH: u8 = 21;
pub const EXCERPT_HARMONICS: usize = 5;
pub const DEFAULT_HIDDEN: usize = 128;
pub const DEFAULT_EMBED_DIM: usize = 32;
pub const DEFAULT_GAMMA: f64 = 0.5;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_LEARNING_RATE: f64 = 0.01;

const ZERO_NORM: f64 = 1e-12;
const MODEL_MAGIC: &[u8; 5] = b"MLEM1";
const DATASET_MAGIC: &[u8; 5] = b"MLDS1";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("window [{start}, {end}) contains no note onsets")]
    EmptyWindow { start: f64, end: f64 },
    #[error("shape mismatch: expected {expected} values, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("batch of {0} pairs is too small; at least 2 are needed")]
    BatchTooSmall(usize),
    #[error("dataset of {pairs} pairs is smaller than the batch size {batch}")]
    DatasetTooSmall { pairs: usize, batch: usize },
    #[error("retrieval corpus is empty")]
    EmptyCorpus,
    #[error("cannot vote over an empty list")]
    EmptyList,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("bad model file: {0}")]
    BadModelFile(String),
    #[error("bad dataset file: {0}")]
    BadDatasetFile(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A dense row-major grid of non-negative values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// Piano-roll proxy for a sheet-music snippet: rows are pitches from
/// [`LOWEST_PITCH`], columns are positions within the window.
pub type SnippetGrid = Grid;
/// Log-frequency spectrogram proxy: semitone rows from [`LOWEST_PITCH`],
/// time frames as columns.
pub type ExcerptGrid = Grid;

impl Grid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Grid {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    fn add(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] += v;
    }

    pub fn count_nonzero(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    /// Bilinear sample at fractional `(r, c)`; zero outside the grid.
    fn sample(&self, r: f64, c: f64) -> f64 {
        let (r0, c0) = (r.floor(), c.floor());
        let (fr, fc) = (r - r0, c - c0);
        let mut acc = 0.0;
        for (dr, wr) in [(0, 1.0 - fr), (1, fr)] {
            for (dc, wc) in [(0, 1.0 - fc), (1, fc)] {
                let (rr, cc) = (r0 as i64 + dr, c0 as i64 + dc);
                if wr * wc > 0.0
                    && rr >= 0
                    && cc >= 0
                    && (rr as usize) < self.rows
                    && (cc as usize) < self.cols
                {
                    acc += wr * wc * self.get(rr as usize, cc as usize);
                }
            }
        }
        acc
    }

    /// Shifts by `(dr, dc)` cells and scales by `s` about the centre.
    fn transformed(&self, dr: f64, dc: f64, s: f64) -> Grid {
        let (cr, cc) = (
            (self.rows as f64 - 1.0) / 2.0,
            (self.cols as f64 - 1.0) / 2.0,
        );
        let mut out = Grid::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let sr = (r as f64 - dr - cr) / s + cr;
                let sc = (c as f64 - dc - cc) / s + cc;
                out.values[r * self.cols + c] = self.sample(sr, sc).clamp(0.0, 1.0);
            }
        }
        out
    }
}

/// Draws of one augmentation, fixed by the pair seed.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Augmentation {
    shift_rows: i32,
    shift_cols: i32,
    scale: f64,
    tempo: f64,
}

/// Builds the snippet/excerpt pair for the notes with onsets in
/// `window = [start, end)`.
///
/// The snippet marks one cell per note head. The excerpt renders
/// [`EXCERPT_HARMONICS`] harmonics per note with power `(velocity/127)² / h²`
/// onto the nearest semitone row, weighted by each frame's overlap with
/// the sounding note (clipped to the window). With `augment`, the snippet
/// is shifted by up to ±2 cells per axis and scaled by 0.9–1.1 (bilinear),
/// the excerpt's time axis is scaled by a tempo factor in 0.8–1.25 and
/// every harmonic amplitude is perturbed by up to ±20%; all draws come
/// from `seed`.
pub fn gen_training_pair(
    seq: &NoteSequence,
    window: (f64, f64),
    augment: bool,
    seed: u64,
) -> Result<(SnippetGrid, ExcerptGrid), EmbedError> {
    let (start, end) = window;
    let notes: Vec<_> = seq
        .events()
        .iter()
        .filter(|e| e.onset >= start && e.onset < end)
        .collect();
    if notes.is_empty() || !(end > start) {
        return Err(EmbedError::EmptyWindow { start, end });
    }
    let span = end - start;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aug = if augment {
        Augmentation {
            shift_rows: rng.gen_range(-2..=2),
            shift_cols: rng.gen_range(-2..=2),
            scale: rng.gen_range(0.9..=1.1),
            tempo: rng.gen_range(0.8..=1.25),
        }
    } else {
        Augmentation {
            shift_rows: 0,
            shift_cols: 0,
            scale: 1.0,
            tempo: 1.0,
        }
    };

    let mut snippet = Grid::zeros(SNIPPET_ROWS, SNIPPET_COLS);
    for n in &notes {
        let Some(row) = (n.pitch as usize).checked_sub(LOWEST_PITCH as usize) else {
            continue;
        };
        if row >= SNIPPET_ROWS {
            continue;
        }
        let col = (((n.onset - start) / span) * SNIPPET_COLS as f64).floor() as usize;
        snippet.values[row * SNIPPET_COLS + col.min(SNIPPET_COLS - 1)] = 1.0;
    }
    if augment {
        snippet = snippet.transformed(aug.shift_rows as f64, aug.shift_cols as f64, aug.scale);
    }

    let mut excerpt = Grid::zeros(EXCERPT_ROWS, EXCERPT_COLS);
    let frame = span / EXCERPT_COLS as f64;
    let base_hz = pitch_to_hz(LOWEST_PITCH as f64);
    for n in &notes {
        let gain = n.velocity as f64 / 127.0;
        let on = (n.onset - start) * aug.tempo;
        let off = ((n.end() - start) * aug.tempo).min(span);
        for h in 1..=EXCERPT_HARMONICS {
            let jitter = if augment {
                rng.gen_range(0.8..=1.2)
            } else {
                1.0
            };
            let bin = (12.0 * (pitch_to_hz(n.pitch as f64) * h as f64 / base_hz).log2()).round();
            if bin < 0.0 || bin as usize >= EXCERPT_ROWS {
                continue;
            }
            let amp = gain * jitter / h as f64;
            let power = amp * amp;
            if on >= span {
                continue;
            }
            let first = (on / frame).floor() as usize;
            for c in first..EXCERPT_COLS {
                let (f0, f1) = (c as f64 * frame, (c + 1) as f64 * frame);
                let overlap = off.min(f1) - on.max(f0);
                if overlap <= 0.0 {
                    if f0 >= off {
                        break;
                    }
                    continue;
                }
                excerpt.add(bin as usize, c, power * overlap / frame);
            }
        }
    }
    Ok((snippet, excerpt))
}

/// One pathway: `normalize(W₂ · tanh(W₁ · x + b₁) + b₂)`.
///
/// `w1` is stored input-major (`input × hidden`), so a sparse input only
/// touches the rows of its non-zero entries; `w2` is `output × hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pathway {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Pathway {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Pathway {
            input,
            hidden,
            output,
            w1: vec![0.0; input * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; output * hidden],
            b2: vec![0.0; output],
        }
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        let mut p = Pathway::zeros(input, hidden, output);
        let a1 = 1.0 / (input as f64).sqrt();
        p.w1.iter_mut().for_each(|w| *w = rng.gen_range(-a1..=a1));
        let a2 = 1.0 / (hidden as f64).sqrt();
        p.w2.iter_mut().for_each(|w| *w = rng.gen_range(-a2..=a2));
        p
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// All parameters in file order: `w1, b1, w2, b2`.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }

    fn check_input(&self, x: &[f64]) -> Result<(), EmbedError> {
        if x.len() != self.input {
            return Err(EmbedError::ShapeMismatch {
                expected: self.input,
                found: x.len(),
            });
        }
        Ok(())
    }

    fn forward_cached(&self, x: &[f64]) -> Forward {
        let mut z1 = self.b1.clone();
        for (i, &v) in x.iter().enumerate() {
            if v != 0.0 {
                let row = &self.w1[i * self.hidden..(i + 1) * self.hidden];
                z1.iter_mut().zip(row).for_each(|(z, w)| *z += v * w);
            }
        }
        let a: Vec<f64> = z1.iter().map(|z| z.tanh()).collect();
        let z2: Vec<f64> = (0..self.output)
            .map(|o| {
                let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
                self.b2[o] + row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        let norm = z2.iter().map(|v| v * v).sum::<f64>().sqrt();
        let e = if norm < ZERO_NORM {
            vec![0.0; self.output]
        } else {
            z2.iter().map(|v| v / norm).collect()
        };
        Forward { a, norm, e }
    }

    /// Adds the parameter gradient for one input given `d_e = ∂L/∂embedding`.
    fn backward(&self, x: &[f64], fw: &Forward, d_e: &[f64], grad: &mut Pathway) {
        if fw.norm < ZERO_NORM {
            return;
        }
        let proj: f64 = fw.e.iter().zip(d_e).map(|(e, d)| e * d).sum();
        let dz2: Vec<f64> =
            fw.e.iter()
                .zip(d_e)
                .map(|(e, d)| (d - e * proj) / fw.norm)
                .collect();
        let mut da = vec![0.0; self.hidden];
        for (o, &g) in dz2.iter().enumerate() {
            grad.b2[o] += g;
            let row = o * self.hidden..(o + 1) * self.hidden;
            grad.w2[row.clone()]
                .iter_mut()
                .zip(&fw.a)
                .for_each(|(w, a)| *w += g * a);
            da.iter_mut()
                .zip(&self.w2[row])
                .for_each(|(d, w)| *d += g * w);
        }
        let dz1: Vec<f64> = da
            .iter()
            .zip(&fw.a)
            .map(|(d, a)| d * (1.0 - a * a))
            .collect();
        grad.b1.iter_mut().zip(&dz1).for_each(|(b, d)| *b += d);
        for (i, &v) in x.iter().enumerate() {
            if v != 0.0 {
                let row = &mut grad.w1[i * self.hidden..(i + 1) * self.hidden];
                row.iter_mut().zip(&dz1).for_each(|(w, d)| *w += v * d);
            }
        }
    }
}

struct Forward {
    a: Vec<f64>,
    norm: f64,
    e: Vec<f64>,
}

/// Embeds one flattened input; the zero vector when the projection
/// vanishes.
pub fn forward(pathway: &Pathway, input: &[f64]) -> Result<Vec<f64>, EmbedError> {
    pathway.check_input(input)?;
    Ok(pathway.forward_cached(input).e)
}

/// Both pathways.
#[derive(Debug, Clone, PartialEq)]
pub struct PathwayParams {
    /// Score side, applied to snippets.
    pub snippet: Pathway,
    /// Audio side, applied to excerpts.
    pub excerpt: Pathway,
}

impl PathwayParams {
    pub fn init(
        snippet_input: usize,
        excerpt_input: usize,
        hidden: usize,
        embed_dim: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(snippet_input, excerpt_input, hidden, embed_dim, &mut rng)
    }

    fn init_with(
        snippet_input: usize,
        excerpt_input: usize,
        hidden: usize,
        embed_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        PathwayParams {
            snippet: Pathway::init(snippet_input, hidden, embed_dim, rng),
            excerpt: Pathway::init(excerpt_input, hidden, embed_dim, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        PathwayParams {
            snippet: Pathway::zeros(self.snippet.input, self.snippet.hidden, self.snippet.output),
            excerpt: Pathway::zeros(self.excerpt.input, self.excerpt.hidden, self.excerpt.output),
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.snippet.params().chain(self.excerpt.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.snippet.params_mut().chain(self.excerpt.params_mut())
    }

    pub fn num_params(&self) -> usize {
        self.snippet.num_params() + self.excerpt.num_params()
    }

    /// Sizes of `w1, b1, w2, b2` of each pathway, in [`Self::params`] order.
    pub fn tensor_lengths(&self) -> [usize; 8] {
        let l = |p: &Pathway| [p.w1.len(), p.b1.len(), p.w2.len(), p.b2.len()];
        let (a, b) = (l(&self.snippet), l(&self.excerpt));
        [a[0], a[1], a[2], a[3], b[0], b[1], b[2], b[3]]
    }

    /// Model file: magic `MLEM1`, five little-endian u32 (snippet input,
    /// excerpt input, hidden, embedding dim, reserved 0), then every
    /// parameter as a little-endian f64 in [`Self::params`] order.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        for v in [
            self.snippet.input,
            self.excerpt.input,
            self.snippet.hidden,
            self.snippet.output,
            0,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for p in self.params() {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, EmbedError> {
        let bad = |m: &str| EmbedError::BadModelFile(m.to_string());
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(|_| bad("missing magic"))?;
        if &magic != MODEL_MAGIC {
            return Err(bad("wrong magic"));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let [si, ei, h, k, _] = dims;
        if si == 0 || ei == 0 || h == 0 || k == 0 {
            return Err(bad("zero dimension"));
        }
        let mut params = PathwayParams {
            snippet: Pathway::zeros(si, h, k),
            excerpt: Pathway::zeros(ei, h, k),
        };
        let mut b = [0u8; 8];
        for p in params.params_mut() {
            r.read_exact(&mut b)
                .map_err(|_| bad("truncated parameters"))?;
            *p = f64::from_le_bytes(b);
            if !p.is_finite() {
                return Err(bad("non-finite parameter"));
            }
        }
        if r.read(&mut b)? != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(params)
    }
}

fn check_batch(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<(), EmbedError> {
    if xs.len() != ys.len() {
        return Err(EmbedError::ShapeMismatch {
            expected: xs.len(),
            found: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(EmbedError::BatchTooSmall(xs.len()));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The ranking loss over one batch of embeddings; row `i` of each side
/// is a matching pair.
pub fn ranking_loss(
    snippets: &[Vec<f64>],
    excerpts: &[Vec<f64>],
    gamma: f64,
) -> Result<f64, EmbedError> {
    ranking_loss_with(snippets, excerpts, gamma, false)
}

/// [`ranking_loss`], optionally adding the excerpt-to-snippet direction
/// `Σᵢ Σ_{ℓ≠i} max(0, γ − s(xᵢ, yᵢ) + s(x_ℓ, yᵢ))`.
pub fn ranking_loss_with(
    snippets: &[Vec<f64>],
    excerpts: &[Vec<f64>],
    gamma: f64,
    symmetric: bool,
) -> Result<f64, EmbedError> {
    check_batch(snippets, excerpts)?;
    let b = snippets.len();
    let s: Vec<Vec<f64>> = snippets
        .iter()
        .map(|x| excerpts.iter().map(|y| dot(x, y)).collect())
        .collect();
    let mut loss = 0.0;
    for i in 0..b {
        for l in 0..b {
            if l != i {
                loss += (gamma - s[i][i] + s[i][l]).max(0.0);
                if symmetric {
                    loss += (gamma - s[i][i] + s[l][i]).max(0.0);
                }
            }
        }
    }
    Ok(loss)
}

/// Loss and its exact gradient with respect to every parameter of both
/// pathways, for raw flattened grids. Hinge terms that are exactly zero
/// contribute nothing.
pub fn loss_gradient(
    params: &PathwayParams,
    snippets: &[&[f64]],
    excerpts: &[&[f64]],
    gamma: f64,
    symmetric: bool,
) -> Result<(f64, PathwayParams), EmbedError> {
    if snippets.len() != excerpts.len() {
        return Err(EmbedError::ShapeMismatch {
            expected: snippets.len(),
            found: excerpts.len(),
        });
    }
    if snippets.len() < 2 {
        return Err(EmbedError::BatchTooSmall(snippets.len()));
    }
    for x in snippets {
        params.snippet.check_input(x)?;
    }
    for y in excerpts {
        params.excerpt.check_input(y)?;
    }
    let fx: Vec<Forward> = snippets
        .par_iter()
        .map(|x| params.snippet.forward_cached(x))
        .collect();
    let gy: Vec<Forward> = excerpts
        .par_iter()
        .map(|y| params.excerpt.forward_cached(y))
        .collect();
    let b = snippets.len();
    let k = params.snippet.output;
    let s: Vec<Vec<f64>> = fx
        .iter()
        .map(|x| gy.iter().map(|y| dot(&x.e, &y.e)).collect())
        .collect();

    let mut loss = 0.0;
    let mut dx = vec![vec![0.0; k]; b];
    let mut dy = vec![vec![0.0; k]; b];
    let mut hinge =
        |pos: (usize, usize), neg: (usize, usize), dx: &mut [Vec<f64>], dy: &mut [Vec<f64>]| {
            let t = gamma - s[pos.0][pos.1] + s[neg.0][neg.1];
            if t > 0.0 {
                loss += t;
                for c in 0..k {
                    dx[pos.0][c] -= gy[pos.1].e[c];
                    dy[pos.1][c] -= fx[pos.0].e[c];
                    dx[neg.0][c] += gy[neg.1].e[c];
                    dy[neg.1][c] += fx[neg.0].e[c];
                }
            }
        };
    for i in 0..b {
        for l in 0..b {
            if l != i {
                hinge((i, i), (i, l), &mut dx, &mut dy);
                if symmetric {
                    hinge((i, i), (l, i), &mut dx, &mut dy);
                }
            }
        }
    }

    let mut grad = params.zeros_like();
    for i in 0..b {
        params
            .snippet
            .backward(snippets[i], &fx[i], &dx[i], &mut grad.snippet);
        params
            .excerpt
            .backward(excerpts[i], &gy[i], &dy[i], &mut grad.excerpt);
    }
    Ok((loss, grad))
}

/// Ranking loss of raw grids through both pathways.
pub fn batch_loss(
    params: &PathwayParams,
    snippets: &[&[f64]],
    excerpts: &[&[f64]],
    gamma: f64,
    symmetric: bool,
) -> Result<f64, EmbedError> {
    let fx = embed_all(&params.snippet, snippets)?;
    let gy = embed_all(&params.excerpt, excerpts)?;
    ranking_loss_with(&fx, &gy, gamma, symmetric)
}

/// Compares [`loss_gradient`] with central finite differences of
/// [`batch_loss`] over every parameter. Returns the worst relative error
/// over the eight parameter tensors, each measured as
/// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` (zero when both
/// vanish).
pub fn finite_difference_error(
    params: &PathwayParams,
    snippets: &[&[f64]],
    excerpts: &[&[f64]],
    gamma: f64,
    symmetric: bool,
    step: f64,
) -> Result<f64, EmbedError> {
    let (_, grad) = loss_gradient(params, snippets, excerpts, gamma, symmetric)?;
    let analytic: Vec<f64> = grad.params().copied().collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = params.clone();
    for idx in 0..analytic.len() {
        let orig = *params
            .params()
            .nth(idx)
            .expect("index within parameter count");
        let set = |p: &mut PathwayParams, v: f64| {
            *p.params_mut()
                .nth(idx)
                .expect("index within parameter count") = v
        };
        set(&mut probe, orig + step);
        let plus = batch_loss(&probe, snippets, excerpts, gamma, symmetric)?;
        set(&mut probe, orig - step);
        let minus = batch_loss(&probe, snippets, excerpts, gamma, symmetric)?;
        set(&mut probe, orig);
        numeric.push((plus - minus) / (2.0 * step));
    }
    let mut worst = 0.0f64;
    let mut offset = 0;
    for len in params.tensor_lengths() {
        let (a, n) = (
            &analytic[offset..offset + len],
            &numeric[offset..offset + len],
        );
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
        let scale = norm(a).max(norm(n));
        if scale > 0.0 {
            worst = worst.max(norm(&diff) / scale);
        }
        offset += len;
    }
    Ok(worst)
}

/// Training hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub hidden: usize,
    pub embed_dim: usize,
    /// Also sum the excerpt-to-snippet hinge terms.
    pub symmetric: bool,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            gamma: DEFAULT_GAMMA,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: 10,
            seed: 0,
            hidden: DEFAULT_HIDDEN,
            embed_dim: DEFAULT_EMBED_DIM,
            symmetric: false,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        let bad = |m: &str| Err(EmbedError::InvalidConfig(m.to_string()));
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return bad("gamma must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be positive");
        }
        if self.hidden == 0 || self.embed_dim == 0 {
            return bad("hidden and embedding sizes must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: PathwayParams,
    /// Mean batch loss of every epoch.
    pub loss_trace: Vec<f64>,
}

/// Mini-batch gradient descent on the ranking loss.
///
/// Parameters come from `config.seed`; the same generator then shuffles
/// the pairs at the start of every epoch. Each step moves the parameters
/// by `learning_rate` times the batch-mean gradient. A trailing partial
/// batch is used when it holds at least two pairs.
pub fn train(dataset: &[(Grid, Grid)], config: &EmbedConfig) -> Result<TrainOutput, EmbedError> {
    config.validate()?;
    if dataset.len() < config.batch_size {
        return Err(EmbedError::DatasetTooSmall {
            pairs: dataset.len(),
            batch: config.batch_size,
        });
    }
    let (sn, ex) = (&dataset[0].0, &dataset[0].1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = PathwayParams::init_with(
        sn.values.len(),
        ex.values.len(),
        config.hidden,
        config.embed_dim,
        &mut rng,
    );
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let xs: Vec<&[f64]> = chunk
                .iter()
                .map(|&i| dataset[i].0.values.as_slice())
                .collect();
            let ys: Vec<&[f64]> = chunk
                .iter()
                .map(|&i| dataset[i].1.values.as_slice())
                .collect();
            let (loss, grad) = loss_gradient(&params, &xs, &ys, config.gamma, config.symmetric)?;
            let step = config.learning_rate / chunk.len() as f64;
            params
                .params_mut()
                .zip(grad.params())
                .for_each(|(p, g)| *p -= step * g);
            total += loss;
            batches += 1;
        }
        trace.push(total / batches.max(1) as f64);
    }
    Ok(TrainOutput {
        params,
        loss_trace: trace,
    })
}

/// Embeds many inputs with one pathway, in order.
pub fn embed_all(pathway: &Pathway, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>, EmbedError> {
    inputs.par_iter().map(|x| forward(pathway, x)).collect()
}

/// The `n` best corpus entries by dot product with `query`; score
/// descending, id ascending on ties.
pub fn retrieve(
    corpus: &[(String, Vec<f64>)],
    query: &[f64],
    n: usize,
) -> Result<Vec<(String, f64)>, EmbedError> {
    if corpus.is_empty() {
        return Err(EmbedError::EmptyCorpus);
    }
    let mut scored: Vec<(String, f64)> = corpus
        .iter()
        .map(|(id, v)| (id.clone(), dot(v, query)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(n.max(1));
    Ok(scored)
}

/// Most frequent id; the lexicographically smallest among equals.
pub fn majority_vote<S: AsRef<str>>(ids: &[S]) -> Result<String, EmbedError> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for id in ids {
        *counts.entry(id.as_ref()).or_default() += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    for (id, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((id, c));
        }
    }
    best.map(|(id, _)| id.to_string())
        .ok_or(EmbedError::EmptyList)
}

/// `epoch,mean_loss`, epochs from 1.
pub fn to_loss_csv(trace: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (i, l) in trace.iter().enumerate() {
        out.push_str(&format!("{},{:?}\n", i + 1, l));
    }
    out
}

/// Where a training pair came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub piece_id: String,
    pub start: f64,
    pub end: f64,
    pub augmented: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<(SnippetGrid, ExcerptGrid)>,
    pub meta: Vec<PairMeta>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Binary container: magic `MLDS1`, u32 pair count, u32 snippet rows
    /// and columns, u32 excerpt rows and columns, then per pair the
    /// snippet and the excerpt, each as a u32 count of non-zero cells
    /// followed by `(u32 index, f64 value)` entries. Little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(DATASET_MAGIC)?;
        let (sr, sc, er, ec) = self.pairs.first().map_or(
            (SNIPPET_ROWS, SNIPPET_COLS, EXCERPT_ROWS, EXCERPT_COLS),
            |(s, e)| (s.rows, s.cols, e.rows, e.cols),
        );
        for v in [self.pairs.len(), sr, sc, er, ec] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for (s, e) in &self.pairs {
            for g in [s, e] {
                w.write_all(&(g.count_nonzero() as u32).to_le_bytes())?;
                for (i, v) in g.values.iter().enumerate().filter(|(_, v)| **v != 0.0) {
                    w.write_all(&(i as u32).to_le_bytes())?;
                    w.write_all(&v.to_le_bytes())?;
                }
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

    /// JSON sidecar with one [`PairMeta`] per pair.
    pub fn sidecar_json(&self) -> String {
        serde_json::to_string_pretty(&self.meta).expect("metadata is always serializable")
    }

    pub fn read_from<R: Read>(mut r: R, sidecar: &str) -> Result<Self, EmbedError> {
        let bad = |m: &str| EmbedError::BadDatasetFile(m.to_string());
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(|_| bad("missing magic"))?;
        if &magic != DATASET_MAGIC {
            return Err(bad("wrong magic"));
        }
        let u32_of = |r: &mut R| -> Result<usize, EmbedError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated file"))?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let n = u32_of(&mut r)?;
        let (sr, sc, er, ec) = (
            u32_of(&mut r)?,
            u32_of(&mut r)?,
            u32_of(&mut r)?,
            u32_of(&mut r)?,
        );
        let mut pairs = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let mut grids = [Grid::zeros(sr, sc), Grid::zeros(er, ec)];
            for g in &mut grids {
                let nnz = u32_of(&mut r)?;
                for _ in 0..nnz {
                    let i = u32_of(&mut r)?;
                    let mut b = [0u8; 8];
                    r.read_exact(&mut b).map_err(|_| bad("truncated file"))?;
                    let v = f64::from_le_bytes(b);
                    if i >= g.values.len() || !v.is_finite() || v < 0.0 {
                        return Err(bad("bad grid cell"));
                    }
                    g.values[i] = v;
                }
            }
            let [s, e] = grids;
            pairs.push((s, e));
        }
        let mut tail = [0u8; 1];
        if r.read(&mut tail)? != 0 {
            return Err(bad("trailing bytes"));
        }
        let meta: Vec<PairMeta> =
            serde_json::from_str(sidecar).map_err(|e| bad(&format!("sidecar: {e}")))?;
        if meta.len() != pairs.len() {
            return Err(bad("sidecar and container disagree on the pair count"));
        }
        Ok(Dataset { pairs, meta })
    }
}

/// `pairs_per_piece` random windows of `window_seconds` from every piece.
/// Windows without an onset are redrawn (a piece that yields none after
/// 100 draws contributes fewer pairs). Pair seeds derive from `seed`.
pub fn generate_dataset(
    pieces: &[NoteSequence],
    pairs_per_piece: usize,
    window_seconds: f64,
    augment: bool,
    seed: u64,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    let mut meta = Vec::new();
    for piece in pieces {
        let latest = (piece.end_time() - window_seconds).max(0.0);
        for _ in 0..pairs_per_piece {
            for _ in 0..100 {
                let start = if latest > 0.0 {
                    rng.gen_range(0.0..latest)
                } else {
                    0.0
                };
                let pair_seed: u64 = rng.gen();
                let window = (start, start + window_seconds);
                if let Ok(pair) = gen_training_pair(piece, window, augment, pair_seed) {
                    pairs.push(pair);
                    meta.push(PairMeta {
                        piece_id: piece.id.clone(),
                        start,
                        end: start + window_seconds,
                        augmented: augment,
                        seed: pair_seed,
                    });
                    break;
                }
            }
        }
    }
    Dataset { pairs, meta }
}

/// Fraction of queries whose matching candidate (same index) ranks within
/// the top `n`, for each `n` in `ns`.
pub fn recall_at(candidates: &[Vec<f64>], queries: &[Vec<f64>], ns: &[usize]) -> Vec<f64> {
    let mut hits = vec![0usize; ns.len()];
    for (qi, q) in queries.iter().enumerate() {
        let own = dot(&candidates[qi], q);
        let better = candidates
            .iter()
            .enumerate()
            .filter(|(ci, c)| {
                let s = dot(c, q);
                s > own || (s == own && *ci < qi)
            })
            .count();
        for (h, &n) in hits.iter_mut().zip(ns) {
            if better < n {
                *h += 1;
            }
        }
    }
    hits.iter()
        .map(|&h| h as f64 / queries.len().max(1) as f64)
        .collect()
}
