use musiclink::fingerprint::{ExtractionConstraints, TauQuantizer};
use musiclink::follower::*;
use musiclink::notes::{time_scale, transpose, NoteEvent, NoteSequence};
use musiclink::synthetic::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    pieces: Vec<SyntheticPiece>,
    corpus: Vec<NoteSequence>,
}

fn fixture() -> Fixture {
    let pieces = generate_corpus(20, 31, &PieceConfig::default());
    let corpus = pieces.iter().map(|p| p.seq.clone()).collect();
    Fixture { pieces, corpus }
}

fn companion(f: &Fixture) -> Companion {
    Companion::from_corpus(
        &f.corpus,
        &ExtractionConstraints::default(),
        TauQuantizer::default(),
        CompanionConfig::default(),
    )
    .unwrap()
}

/// A noisy, possibly transposed rendition of piece `a` at `tempo`, cut at
/// `cut` seconds.
fn performance(
    f: &Fixture,
    a: usize,
    tempo: f64,
    shift: i32,
    rng: &mut ChaCha8Rng,
    cut: f64,
) -> NoteSequence {
    let played = transpose(&time_scale(&f.corpus[a], tempo).unwrap(), shift).unwrap();
    perturb(
        &played,
        &Perturbation {
            delete_prob: 0.1,
            jitter: 0.03,
        },
        rng,
    )
    .excerpt(0.0, cut)
}

fn tracking_invariants(f: &Fixture, trace: &[CompanionHypothesis]) {
    for h in trace {
        if h.status == Status::Tracking {
            let piece = f
                .corpus
                .iter()
                .find(|p| p.id == h.piece_id)
                .expect("tracked piece exists");
            assert!(
                h.score_time >= 0.0 && h.score_time <= piece.end_time(),
                "{h:?}"
            );
        }
    }
}

#[test]
fn seeds_quickly_and_follows_noisy_performances() {
    let f = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for a in [0usize, 5, 11] {
        let tempo = rng.gen_range(0.8..=1.25);
        let shift = rng.gen_range(-5..=6);
        let stream = note_stream(&performance(&f, a, tempo, shift, &mut rng, 30.0));
        let trace = run_sequential(&mut companion(&f), &stream);
        tracking_invariants(&f, &trace);
        let seeded = trace
            .iter()
            .find(|h| h.status == Status::Tracking)
            .expect("companion seeds");
        assert_eq!(seeded.piece_id, f.corpus[a].id);
        assert!(
            seeded.stream_time <= 4.0,
            "seeded at {}",
            seeded.stream_time
        );
        let after: Vec<_> = trace
            .iter()
            .filter(|h| h.stream_time >= seeded.stream_time)
            .collect();
        assert!(after.iter().all(|h| h.status != Status::Lost));
        let worst = after
            .iter()
            .map(|h| (h.score_time - h.stream_time / tempo).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 2.0, "piece {a}: worst error {worst}");
    }
}

#[test]
fn follows_a_switch_to_another_piece() {
    let f = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (a, b) = (2usize, 9usize);
    let first = performance(&f, a, 1.0, 0, &mut rng, 30.0);
    let b_start = f.pieces[b].bar_time(9);
    let mut events: Vec<NoteEvent> = first.events().to_vec();
    events.extend(
        f.corpus[b]
            .excerpt(b_start, b_start + 30.0)
            .events()
            .iter()
            .map(|e| NoteEvent {
                onset: e.onset + 30.0,
                ..*e
            }),
    );
    let stream = note_stream(&NoteSequence::new("s", events).unwrap());
    let trace = run_sequential(&mut companion(&f), &stream);
    tracking_invariants(&f, &trace);
    let switched = trace
        .iter()
        .find(|h| {
            h.stream_time >= 30.0 && h.piece_id == f.corpus[b].id && h.status == Status::Tracking
        })
        .expect("companion switches");
    assert!(
        switched.stream_time - 30.0 <= 8.0,
        "switched at {}",
        switched.stream_time
    );
}

#[test]
fn exact_single_piece_input_stays_within_a_second() {
    let f = fixture();
    let solo = vec![f.corpus[4].clone()];
    let mut c = Companion::from_corpus(
        &solo,
        &ExtractionConstraints::default(),
        TauQuantizer::default(),
        CompanionConfig::default(),
    )
    .unwrap();
    let trace = run_sequential(&mut c, &note_stream(&f.corpus[4].excerpt(0.0, 40.0)));
    let seeded = trace
        .iter()
        .position(|h| h.status == Status::Tracking)
        .unwrap();
    for h in &trace[seeded..] {
        assert!((h.score_time - h.stream_time).abs() <= 1.0, "{h:?}");
    }
}

#[test]
fn sequential_and_concurrent_drivers_agree() {
    let f = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let stream = note_stream(&performance(&f, 7, 1.1, 3, &mut rng, 25.0));
    let seq = run_sequential(&mut companion(&f), &stream);
    let conc = run_concurrent(&mut companion(&f), &stream);
    assert_eq!(to_trace_csv(&seq), to_trace_csv(&conc));
    assert_eq!(seq, conc);
    let again = run_sequential(&mut companion(&f), &stream);
    assert_eq!(seq, again);
}

#[test]
fn shared_cell_holds_the_latest_hypothesis() {
    let f = fixture();
    let stream = note_stream(&f.corpus[1].excerpt(0.0, 10.0));
    let mut c = companion(&f);
    let cell = c.cell();
    let trace = run_concurrent(&mut c, &stream);
    assert_eq!(cell.load().as_deref(), trace.last());
}
