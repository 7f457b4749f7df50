//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion
//! and exits non-zero when any criterion fails.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use musiclink::chroma::*;
use musiclink::embedding::*;
use musiclink::fingerprint::*;
use musiclink::follower::*;
use musiclink::matching::*;
use musiclink::notes::*;
use musiclink::synth::*;
use musiclink::synthetic::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, started: Instant) -> Result<Duration, String> {
    let t = started.elapsed();
    check(t < limit, || format!("took {t:.1?}, limit {limit:?}"))?;
    Ok(t)
}

// ---------------------------------------------------------------- 1

fn random_frame(rng: &mut ChaCha8Rng, palette: &[ChromaVector]) -> ChromaVector {
    match rng.gen_range(0..10) {
        0 => ChromaVector::neutral(),
        1..=3 => palette[rng.gen_range(0..palette.len())],
        _ => {
            let mut v = [0.0; NUM_CHROMA];
            for x in &mut v {
                if rng.gen_bool(0.5) {
                    *x = rng.gen_range(0.0..1.0);
                }
            }
            ChromaVector(v).normalized(DEFAULT_EPS)
        }
    }
}

fn random_chromagram(rng: &mut ChaCha8Rng, len: usize, palette: &[ChromaVector]) -> Chromagram {
    Chromagram::new((0..len).map(|_| random_frame(rng, palette)).collect(), 10.0).unwrap()
}

/// Minimum over all warping paths that start anywhere in query row 0 and
/// end at each document frame. Every path is walked from its start and its
/// cost summed in that order; a branch is abandoned only once its partial
/// sum already reaches the best total of every end it could still reach.
fn enumerate_all(q: &Chromagram, d: &Chromagram) -> Vec<f64> {
    let (n, m) = (q.len(), d.len());
    let cost: Vec<Vec<f64>> = q
        .frames
        .iter()
        .map(|x| d.frames.iter().map(|y| local_cost(x, y)).collect())
        .collect();
    let mut best = vec![f64::INFINITY; m];
    fn walk(cost: &[Vec<f64>], i: usize, j: usize, sum: f64, best: &mut [f64]) {
        let (n, m) = (cost.len(), best.len());
        if i == n - 1 && sum < best[j] {
            best[j] = sum;
        }
        let bound = best[j..].iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if sum >= bound {
            return;
        }
        if i + 1 < n && j + 1 < m {
            walk(cost, i + 1, j + 1, sum + cost[i + 1][j + 1], best);
        }
        if i + 1 < n {
            walk(cost, i + 1, j, sum + cost[i + 1][j], best);
        }
        if j + 1 < m {
            walk(cost, i, j + 1, sum + cost[i][j + 1], best);
        }
    }
    for start in 0..m {
        walk(&cost, 0, start, cost[0][start], &mut best);
    }
    best.iter().map(|b| b / n as f64).collect()
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let palette: Vec<ChromaVector> = (0..3)
        .map(|_| random_frame(&mut rng, &[ChromaVector::neutral()]))
        .collect();
    let mut compared = 0;
    for pair in 0..500 {
        let (nq, nd) = (rng.gen_range(2..=8), rng.gen_range(1..=20));
        let q = random_chromagram(&mut rng, nq, &palette);
        let d = random_chromagram(&mut rng, nd, &palette);
        let curve = matching_function(&q, &d).map_err(|e| e.to_string())?;
        let oracle = enumerate_all(&q, &d);
        for (m, (a, b)) in curve.values.iter().zip(&oracle).enumerate() {
            check(a.to_bits() == b.to_bits(), || {
                format!("pair {pair} frame {m}: {a} vs oracle {b}")
            })?;
            compared += 1;
        }
    }
    let t = within(Duration::from_secs(10), started)?;
    Ok(format!(
        "500 pairs, {compared} curve values bit-identical, {t:.1?}"
    ))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let palette: Vec<ChromaVector> = (0..4)
        .map(|_| random_frame(&mut rng, &[ChromaVector::neutral()]))
        .collect();
    let corpus: Vec<(String, Chromagram)> = (0..100)
        .map(|i| {
            let len = rng.gen_range(40..=120);
            (
                format!("doc-{i:03}"),
                random_chromagram(&mut rng, len, &palette),
            )
        })
        .collect();
    let mut worst: f64 = 0.0;
    for (i, (id, doc)) in corpus.iter().enumerate() {
        let len = rng.gen_range(8..=20);
        let start = rng.gen_range(0..=doc.len() - len);
        let query = doc.slice(start, start + len);
        let end = start + len - 1;
        let curve = matching_function(&query, doc).map_err(|e| e.to_string())?;
        check(curve.values[end] < 1e-9, || {
            format!("doc {i}: curve at end {}", curve.values[end])
        })?;
        worst = worst.max(curve.values[end]);
        let ranked =
            rank_documents(&query, &corpus, &RankParams::default()).map_err(|e| e.to_string())?;
        let top = ranked
            .matches
            .first()
            .ok_or_else(|| format!("doc {i}: no matches"))?;
        // Repeated frames can give an equally perfect match elsewhere in the
        // same document, so only the document and the cost are fixed.
        check(&top.doc_id == id && top.cost < 1e-9, || {
            format!(
                "doc {i}: rank 1 is {} ending at {} (cost {})",
                top.doc_id, top.end_frame, top.cost
            )
        })?;
    }
    Ok(format!(
        "100 docs, worst curve value at excerpt end {worst:.1e}, true doc ranked first every time"
    ))
}

// ---------------------------------------------------------------- 3

fn random_sequence(
    rng: &mut ChaCha8Rng,
    id: &str,
    notes: usize,
    pitches: (u8, u8),
) -> NoteSequence {
    let mut t = 0.0;
    let events = (0..notes)
        .map(|_| {
            if rng.gen_bool(0.8) {
                t += rng.gen_range(0.05..0.6);
            }
            NoteEvent {
                onset: t,
                duration: rng.gen_range(0.1..1.2),
                pitch: rng.gen_range(pitches.0..=pitches.1),
                velocity: rng.gen_range(30..=120),
            }
        })
        .collect();
    NoteSequence::new(id, events).unwrap()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let seqs: Vec<NoteSequence> = (0..50)
        .map(|i| random_sequence(&mut rng, &format!("s{i:02}"), 60, (21, 96)))
        .collect();
    for (i, s) in seqs.iter().enumerate() {
        let base = symbolic_chromagram(s, 10.0).map_err(|e| e.to_string())?;
        for k in 0..12 {
            let lhs = symbolic_chromagram(&transpose(s, k).map_err(|e| e.to_string())?, 10.0)
                .map_err(|e| e.to_string())?;
            check(lhs == cyclic_shift(&base, k), || {
                format!("sequence {i}, shift {k}: chromagrams differ")
            })?;
        }
    }
    let corpus: Vec<(String, Chromagram)> = seqs
        .iter()
        .map(|s| (s.id.clone(), symbolic_chromagram(s, 10.0).unwrap()))
        .collect();
    let params = RankParams {
        search_transpositions: true,
        ..RankParams::default()
    };
    let mut queries = 0;
    for (i, (id, doc)) in corpus.iter().enumerate().step_by(5) {
        for k in 0..12 {
            let len = 30;
            let start = rng.gen_range(0..=doc.len() - len);
            let q = cyclic_shift(&doc.slice(start, start + len), k);
            let out = rank_documents(&q, &corpus, &params).map_err(|e| e.to_string())?;
            let top = &out.matches[0];
            check(&top.doc_id == id && top.transposition as i32 == k, || {
                format!(
                    "doc {i} shift {k}: got {} with transposition {}",
                    top.doc_id, top.transposition
                )
            })?;
            queries += 1;
        }
    }
    Ok(format!(
        "50 sequences x 12 shifts exact; {queries} shifted queries recovered doc and transposition"
    ))
}

// ---------------------------------------------------------------- 4

fn exact_values(fps: &[LocatedFingerprint]) -> Vec<(i16, i16, u64)> {
    let mut v: Vec<_> = fps
        .iter()
        .map(|f| (f.fp.dp12, f.fp.dp23, f.fp.tau.to_bits()))
        .collect();
    v.sort_unstable();
    v
}

fn keys(fps: &[LocatedFingerprint]) -> Vec<u32> {
    let q = TauQuantizer::default();
    let mut v: Vec<u32> = fps.iter().map(|f| hash_fingerprint(&f.fp, &q)).collect();
    v.sort_unstable();
    v
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let c = ExtractionConstraints::default();
    let mut worst_tau: f64 = 0.0;
    let mut compared = 0usize;
    for i in 0..200 {
        let s = random_sequence(&mut rng, "s", 50, (40, 80));
        let base = extract_fingerprints(&s, &c).map_err(|e| e.to_string())?;
        for k in -19..=28 {
            let t = extract_fingerprints(&transpose(&s, k).map_err(|e| e.to_string())?, &c)
                .map_err(|e| e.to_string())?;
            check(exact_values(&t) == exact_values(&base), || {
                format!("sequence {i}: transposition {k} changes values")
            })?;
        }
        for alpha in [0.5, 0.8, 1.25, 2.0] {
            let scaled = extract_fingerprints(
                &time_scale(&s, alpha).map_err(|e| e.to_string())?,
                &c.scaled(alpha),
            )
            .map_err(|e| e.to_string())?;
            check(scaled.len() == base.len(), || {
                format!("sequence {i}, alpha {alpha}: count differs")
            })?;
            check(keys(&scaled) == keys(&base), || {
                format!("sequence {i}, alpha {alpha}: hashed keys differ")
            })?;
            if alpha == 0.5 || alpha == 2.0 {
                check(exact_values(&scaled) == exact_values(&base), || {
                    format!("sequence {i}, alpha {alpha}: values not bit-identical")
                })?;
            } else {
                let mut a: Vec<_> = base
                    .iter()
                    .map(|f| (f.fp.dp12, f.fp.dp23, f.fp.tau))
                    .collect();
                let mut b: Vec<_> = scaled
                    .iter()
                    .map(|f| (f.fp.dp12, f.fp.dp23, f.fp.tau))
                    .collect();
                a.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)).then(x.2.total_cmp(&y.2)));
                b.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)).then(x.2.total_cmp(&y.2)));
                for (x, y) in a.iter().zip(&b) {
                    check(x.0 == y.0 && x.1 == y.1, || {
                        format!("sequence {i}, alpha {alpha}: intervals differ")
                    })?;
                    let rel = (x.2 - y.2).abs() / x.2;
                    worst_tau = worst_tau.max(rel);
                    check(rel <= 1e-12, || {
                        format!("sequence {i}, alpha {alpha}: tau {} vs {}", x.2, y.2)
                    })?;
                }
            }
            compared += base.len();
        }
    }
    Ok(format!(
        "200 sequences, 48 transpositions each bit-exact; {compared} scaled fingerprints with identical keys \
         (bit-exact for 0.5 and 2, worst tau deviation {worst_tau:.1e} relative for 0.8 and 1.25)"
    ))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let started = Instant::now();
    let pieces = generate_corpus(50, 505, &PieceConfig::default());
    let corpus: Vec<NoteSequence> = pieces.iter().map(|p| p.seq.clone()).collect();
    let index = build_index(
        &corpus,
        &ExtractionConstraints::default(),
        TauQuantizer::default(),
    )
    .map_err(|e| e.to_string())?
    .index;
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (mut hits, mut worst_err) = (0, 0.0f64);
    let mut misplaced = 0;
    for _ in 0..200 {
        let pi = rng.gen_range(0..corpus.len());
        let ev = corpus[pi].events();
        let first = rng.gen_range(0..ev.len() - 20);
        let t0 = ev[first].onset;
        let excerpt: Vec<NoteEvent> = ev[first..first + 20]
            .iter()
            .map(|e| NoteEvent {
                onset: e.onset - t0,
                ..*e
            })
            .collect();
        let shift = rng.gen_range(-6..=6);
        let tempo = rng.gen_range(0.8..=1.25);
        let q = NoteSequence::new("q", excerpt).unwrap();
        let q = transpose(&q, shift).map_err(|e| e.to_string())?;
        let q = time_scale(&q, tempo).unwrap();
        let q = perturb(
            &q,
            &Perturbation {
                delete_prob: 0.1,
                jitter: 0.03,
            },
            &mut rng,
        );
        let hyps = index
            .query(&q, DEFAULT_TAU_TOLERANCE_BINS)
            .map_err(|e| e.to_string())?;
        let top = &hyps[0];
        if top.piece_id == corpus[pi].id {
            hits += 1;
            // Score time of the query's first remaining onset, estimated and true.
            let lead = q.events()[0].onset;
            let err = (top.score_time + lead / top.tempo_ratio - (t0 + lead / tempo)).abs();
            worst_err = worst_err.max(err);
            if err > 1.0 {
                misplaced += 1;
            }
        }
    }
    let t = within(Duration::from_secs(30), started)?;
    let acc = hits as f64 / 200.0;
    check(acc >= 0.9, || format!("accuracy {acc:.3} < 0.90"))?;
    check(misplaced == 0, || {
        format!("{misplaced} correct hits with position error > 1 s (worst {worst_err:.2} s)")
    })?;
    Ok(format!(
        "top-1 accuracy {acc:.3}, worst position error {worst_err:.2} s, {t:.1?}"
    ))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let started = Instant::now();
    let pieces = generate_corpus(50, 606, &PieceConfig::default());
    let corpus: Vec<NoteSequence> = pieces.iter().map(|p| p.seq.clone()).collect();
    let build = build_index(
        &corpus,
        &ExtractionConstraints::default(),
        TauQuantizer::default(),
    )
    .map_err(|e| e.to_string())?;
    let index = std::sync::Arc::new(build.index);
    let docs = std::sync::Arc::new(
        score_chromagrams(&corpus, CompanionConfig::default().frame_rate)
            .map_err(|e| e.to_string())?,
    );
    let new_companion = || {
        Companion::new(index.clone(), docs.clone(), CompanionConfig::default())
            .map_err(|e| e.to_string())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let switch_at = 30.0;
    let (mut seed_worst, mut switch_worst, mut position_worst) = (0.0f64, 0.0f64, 0.0f64);
    let mut failures = Vec::new();
    let streams = 20;
    for s in 0..streams {
        let a = rng.gen_range(0..corpus.len());
        let b = (a + rng.gen_range(1..corpus.len())) % corpus.len();
        let tempo = rng.gen_range(0.8..=1.25);
        let shift = rng.gen_range(-6..=6);
        let noise = Perturbation {
            delete_prob: 0.1,
            jitter: 0.03,
        };
        let played = transpose(&time_scale(&corpus[a], tempo).unwrap(), shift).unwrap();
        let mut events: Vec<NoteEvent> = perturb(&played, &noise, &mut rng)
            .excerpt(0.0, switch_at)
            .events()
            .to_vec();
        let b_start = pieces[b].bar_time(9);
        let b_part = perturb(&corpus[b], &noise, &mut rng).excerpt(b_start, b_start + 30.0);
        events.extend(b_part.events().iter().map(|e| NoteEvent {
            onset: e.onset + switch_at,
            ..*e
        }));
        let stream = note_stream(&NoteSequence::new("stream", events).unwrap());

        let seq = run_sequential(&mut new_companion()?, &stream);
        let conc = run_concurrent(&mut new_companion()?, &stream);
        if seq != conc {
            failures.push(format!(
                "stream {s}: sequential and concurrent traces differ"
            ));
        }
        match seq
            .iter()
            .find(|h| h.status == Status::Tracking && h.piece_id == corpus[a].id)
        {
            Some(h) => {
                seed_worst = seed_worst.max(h.stream_time);
                if h.stream_time > 4.0 {
                    failures.push(format!("stream {s}: seeded at {:.2} s", h.stream_time));
                }
            }
            None => failures.push(format!("stream {s}: never tracked piece A")),
        }
        match seq.iter().find(|h| {
            h.stream_time >= switch_at && h.status == Status::Tracking && h.piece_id == corpus[b].id
        }) {
            Some(h) => {
                let latency = h.stream_time - switch_at;
                switch_worst = switch_worst.max(latency);
                if latency > 8.0 {
                    failures.push(format!("stream {s}: switched after {latency:.2} s"));
                }
            }
            None => failures.push(format!("stream {s}: never switched to piece B")),
        }
        // Noise alone must never lose the performance; losing the old piece
        // once the performer has switched is intended.
        let before_switch = seq.iter().filter(|h| h.stream_time < switch_at);
        for h in before_switch.filter(|h| h.status != Status::Identifying) {
            let err = (h.score_time - h.stream_time / tempo).abs();
            if h.status == Status::Lost {
                failures.push(format!("stream {s}: lost at {:.2} s", h.stream_time));
                break;
            }
            position_worst = position_worst.max(err);
            if h.piece_id != corpus[a].id || err > 2.0 {
                failures.push(format!(
                    "stream {s}: {} at {:.2} s, error {err:.2} s",
                    h.piece_id, h.stream_time
                ));
                break;
            }
        }
    }
    let summary = format!(
        "{streams} noisy streams: worst seeding {seed_worst:.2} s, worst tracking error {position_worst:.2} s, \
         worst switch {switch_worst:.2} s, {:.1?}",
        started.elapsed()
    );
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary}; {}", failures.join("; ")))
    }
}

// ---------------------------------------------------------------- 7

/// Seconds between the starts of consecutive candidate snippets.
const CANDIDATE_HOP: f64 = 0.5;

fn criterion_7() -> Outcome {
    let started = Instant::now();
    // Gradient check, 20 seeds.
    let mut worst_grad: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let params = PathwayParams::init(12, 10, 16, 8, seed);
        let batch = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<f64>> {
            (0..4)
                .map(|_| {
                    (0..n)
                        .map(|_| {
                            if rng.gen_bool(0.6) {
                                rng.gen_range(0.0..1.0)
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect()
        };
        let (xs, ys) = (batch(&mut rng, 12), batch(&mut rng, 10));
        let xr: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let yr: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
        let err = finite_difference_error(&params, &xr, &yr, DEFAULT_GAMMA, seed % 2 == 1, 1e-4)
            .map_err(|e| e.to_string())?;
        worst_grad = worst_grad.max(err);
    }
    check(worst_grad < 1e-5, || {
        format!("gradient relative error {worst_grad:.2e}")
    })?;

    // Hand-computed ranking losses.
    let x = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let l0 = ranking_loss(&x, &[vec![0.9, 0.2], vec![0.2, 0.9]], 0.5).map_err(|e| e.to_string())?;
    let l1 = ranking_loss(&x, &[vec![0.9, 0.2], vec![0.8, 0.9]], 0.5).map_err(|e| e.to_string())?;
    check(l0 == 0.0 && (l1 - 0.4).abs() < 1e-15, || {
        format!("hand examples gave {l0} and {l1}")
    })?;

    // Retrieval on held-out pieces.
    let window = 3.0;
    let seqs = |n, seed| -> Vec<NoteSequence> {
        generate_corpus(n, seed, &PieceConfig::default())
            .into_iter()
            .map(|p| p.seq)
            .collect()
    };
    let train_pieces = seqs(400, 711);
    let test_pieces = seqs(20, 712);
    let training = generate_dataset(&train_pieces, 25, window, false, 1);
    let held_out = generate_dataset(&test_pieces, 10, window, false, 2);
    check(held_out.len() == 200, || {
        format!("held-out set has {} pairs", held_out.len())
    })?;
    let config = EmbedConfig {
        epochs: 20,
        batch_size: 64,
        seed: 42,
        ..EmbedConfig::default()
    };
    let model = train(&training.pairs, &config)
        .map_err(|e| e.to_string())?
        .params;
    let snippets: Vec<&[f64]> = held_out
        .pairs
        .iter()
        .map(|p| p.0.values.as_slice())
        .collect();
    let excerpts: Vec<&[f64]> = held_out
        .pairs
        .iter()
        .map(|p| p.1.values.as_slice())
        .collect();
    let cand = embed_all(&model.snippet, &snippets).map_err(|e| e.to_string())?;
    let queries = embed_all(&model.excerpt, &excerpts).map_err(|e| e.to_string())?;
    let recall = recall_at(&cand, &queries, &[1, 5]);
    check(recall[0] >= 0.25 && recall[1] >= 0.5, || {
        format!(
            "held-out recall@1 {:.3}, recall@5 {:.3}",
            recall[0], recall[1]
        )
    })?;

    // Piece-level voting over 10 excerpts per piece.
    let vote_pieces = &test_pieces[..10];
    let mut corpus = Vec::new();
    for piece in vote_pieces {
        let mut t = 0.0;
        while t + window <= piece.end_time() {
            if let Ok((snippet, _)) = gen_training_pair(piece, (t, t + window), false, 0) {
                corpus.push((
                    piece.id.clone(),
                    forward(&model.snippet, &snippet.values).map_err(|e| e.to_string())?,
                ));
            }
            t += CANDIDATE_HOP;
        }
    }
    let probes = generate_dataset(vote_pieces, 10, window, false, 3);
    let mut votes: HashMap<&str, Vec<String>> = HashMap::new();
    for (pair, meta) in probes.pairs.iter().zip(&probes.meta) {
        let e = forward(&model.excerpt, &pair.1.values).map_err(|e| e.to_string())?;
        let best = retrieve(&corpus, &e, 1).map_err(|e| e.to_string())?;
        votes
            .entry(meta.piece_id.as_str())
            .or_default()
            .push(best[0].0.clone());
    }
    let correct = vote_pieces
        .iter()
        .filter(|p| {
            votes
                .get(p.id.as_str())
                .is_some_and(|v| majority_vote(v).ok().as_deref() == Some(p.id.as_str()))
        })
        .count();
    let agreeing: Vec<usize> = vote_pieces
        .iter()
        .map(|p| {
            votes
                .get(p.id.as_str())
                .map_or(0, |v| v.iter().filter(|x| **x == p.id).count())
        })
        .collect();
    check(correct >= 9, || {
        format!(
            "piece voting {correct}/10 (correct votes per piece {agreeing:?}); held-out recall@1 {:.3} recall@5 {:.3}",
            recall[0], recall[1]
        )
    })?;
    let t = within(Duration::from_secs(300), started)?;
    Ok(format!(
        "gradient error {worst_grad:.1e}, hand losses exact, held-out recall@1 {:.3} recall@5 {:.3}, \
         voting {correct}/10 (correct votes per piece {agreeing:?}), {t:.1?}",
        recall[0], recall[1]
    ))
}

// ---------------------------------------------------------------- 8

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_musiclink"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), || {
        format!(
            "musiclink {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("temporary paths are UTF-8")
}

/// Runs every subcommand with outputs under `dir`.
fn run_all(inputs: &Path, dir: &Path) -> Result<Vec<PathBuf>, String> {
    let i = |name: &str| path_str(&inputs.join(name)).to_string();
    let o = |name: &str| dir.join(name);
    let s = |p: &PathBuf| path_str(p).to_string();
    let corpus = i("corpus");
    let outs: Vec<PathBuf> = [
        "a.wav",
        "notes.chroma.csv",
        "wav.chroma.csv",
        "match.csv",
        "index.sfpi",
        "index.json",
        "hyps.csv",
        "trace.csv",
        "data.bin",
        "data.bin.json",
        "model.bin",
        "loss.csv",
        "ranked.csv",
        "votes.csv",
    ]
    .iter()
    .map(|n| o(n))
    .collect();
    cli(&["synth", "--in", &i("query.csv"), "--out", &s(&outs[0])])?;
    cli(&["chroma", "--in", &i("query.csv"), "--out", &s(&outs[1])])?;
    cli(&["chroma", "--in", &s(&outs[0]), "--out", &s(&outs[2])])?;
    cli(&[
        "match",
        "--query",
        &i("query.csv"),
        "--corpus",
        &corpus,
        "--top",
        "5",
        "--transpositions",
        "--out",
        &s(&outs[3]),
    ])?;
    cli(&[
        "fp-index",
        "--corpus",
        &corpus,
        "--out",
        &s(&outs[4]),
        "--json",
        &s(&outs[5]),
    ])?;
    cli(&[
        "fp-query",
        "--index",
        &s(&outs[4]),
        "--query",
        &i("query.csv"),
        "--out",
        &s(&outs[6]),
    ])?;
    cli(&[
        "follow",
        "--corpus",
        &corpus,
        "--stream",
        &i("stream.txt"),
        "--out",
        &s(&outs[7]),
    ])?;
    cli(&[
        "gen-data",
        "--pieces",
        "4",
        "--pairs-per-piece",
        "8",
        "--augment",
        "--out",
        &s(&outs[8]),
    ])?;
    cli(&[
        "embed-train",
        "--data",
        &s(&outs[8]),
        "--out",
        &s(&outs[10]),
        "--loss",
        &s(&outs[11]),
        "--epochs",
        "2",
        "--batch-size",
        "8",
        "--hidden",
        "16",
        "--dim",
        "8",
    ])?;
    cli(&[
        "embed-query",
        "--model",
        &s(&outs[10]),
        "--candidates",
        &s(&outs[8]),
        "--out",
        &s(&outs[12]),
    ])?;
    cli(&[
        "embed-query",
        "--model",
        &s(&outs[10]),
        "--candidates",
        &s(&outs[8]),
        "--vote",
        "--out",
        &s(&outs[13]),
    ])?;
    Ok(outs)
}

fn criterion_8() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let inputs = root.path().join("in");
    std::fs::create_dir_all(inputs.join("corpus")).map_err(|e| e.to_string())?;
    let pieces = generate_corpus(5, 808, &PieceConfig::default());
    for p in &pieces {
        std::fs::write(
            inputs.join("corpus").join(format!("{}.csv", p.seq.id)),
            to_note_csv(&p.seq),
        )
        .map_err(|e| e.to_string())?;
    }
    let query = transpose(&pieces[3].seq.excerpt(12.0, 20.0), 2).map_err(|e| e.to_string())?;
    std::fs::write(inputs.join("query.csv"), to_note_csv(&query)).map_err(|e| e.to_string())?;
    std::fs::write(
        inputs.join("stream.txt"),
        to_stream_text(&note_stream(&pieces[1].seq.excerpt(0.0, 15.0))),
    )
    .map_err(|e| e.to_string())?;

    let (a, b) = (root.path().join("run-a"), root.path().join("run-b"));
    std::fs::create_dir_all(&a).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(&b).map_err(|e| e.to_string())?;
    let first = run_all(&inputs, &a)?;
    let second = run_all(&inputs, &b)?;
    for (x, y) in first.iter().zip(&second) {
        let (bx, by) = (
            std::fs::read(x).map_err(|e| e.to_string())?,
            std::fs::read(y).map_err(|e| e.to_string())?,
        );
        check(!bx.is_empty() && bx == by, || {
            format!("{} differs between runs", x.display())
        })?;
    }

    // Round trips.
    let seq = &pieces[0].seq;
    check(
        &parse_note_csv(&to_note_csv(seq)).map_err(|e| e.to_string())? == seq,
        || "note CSV".into(),
    )?;
    let chroma = symbolic_chromagram(seq, 10.0).map_err(|e| e.to_string())?;
    check(
        parse_chroma_csv(&to_chroma_csv(&chroma)).map_err(|e| e.to_string())? == chroma,
        || "chroma CSV".into(),
    )?;
    let ranked = parse_ranked_csv(&std::fs::read_to_string(&first[3]).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    check(
        to_ranked_csv(&ranked) == std::fs::read_to_string(&first[3]).unwrap(),
        || "ranked CSV".into(),
    )?;
    let wav = std::fs::read(&first[0]).map_err(|e| e.to_string())?;
    let header_ok = &wav[0..4] == b"RIFF"
        && &wav[8..16] == b"WAVEfmt "
        && u16::from_le_bytes([wav[20], wav[21]]) == 1
        && u16::from_le_bytes([wav[22], wav[23]]) == 1
        && u32::from_le_bytes([wav[24], wav[25], wav[26], wav[27]]) == DEFAULT_SAMPLE_RATE
        && u16::from_le_bytes([wav[34], wav[35]]) == 16;
    check(header_ok, || {
        "WAV header is not 16-bit mono PCM at the default rate".into()
    })?;
    let audio = read_wav(wav.as_slice()).map_err(|e| e.to_string())?;
    check(wav_bytes(&audio).map_err(|e| e.to_string())? == wav, || {
        "WAV re-encode differs".into()
    })?;
    let index_bytes = std::fs::read(&first[4]).map_err(|e| e.to_string())?;
    let index = FingerprintIndex::read_from(index_bytes.as_slice()).map_err(|e| e.to_string())?;
    check(index.to_bytes() == index_bytes, || "index file".into())?;
    let model_bytes = std::fs::read(&first[10]).map_err(|e| e.to_string())?;
    let model = PathwayParams::read_from(model_bytes.as_slice()).map_err(|e| e.to_string())?;
    check(model.to_bytes() == model_bytes, || "model file".into())?;
    Ok(format!(
        "9 subcommands ({} output files) byte-identical across runs; note/chroma/ranked CSV, WAV, index and model round trips",
        first.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("DTW oracle equivalence", criterion_1),
        ("containment zero", criterion_2),
        ("transposition identity", criterion_3),
        ("fingerprint invariance", criterion_4),
        ("identification at desk scale", criterion_5),
        ("companion behavior", criterion_6),
        ("embedding correctness", criterion_7),
        ("determinism and round trips", criterion_8),
    ];
    // Optional criterion numbers on the command line select a subset.
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (n, (name, f)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(n + 1)) {
            continue;
        }
        match f() {
            Ok(detail) => println!("PASS {}. {name}: {detail}", n + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {}. {name}: {detail}", n + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all selected criteria passed");
}
