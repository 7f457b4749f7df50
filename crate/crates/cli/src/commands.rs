use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufReader;
use std::sync::Arc;

use musiclink::chroma::to_chroma_csv;
use musiclink::embedding::{
    embed_all, majority_vote, retrieve, to_loss_csv, train, Dataset, EmbedConfig, PathwayParams,
};
use musiclink::fingerprint::{build_index, ExtractionConstraints, FingerprintIndex, TauQuantizer};
use musiclink::follower::{
    parse_stream, run_concurrent, run_sequential, score_chromagrams, to_trace_csv, Companion,
    CompanionConfig,
};
use musiclink::matching::{rank_documents, to_ranked_csv, RankParams};
use musiclink::notes::NoteSequence;
use musiclink::synth::{render_audio, wav_bytes};
use musiclink::synthetic::{generate_corpus, PieceConfig};

use crate::inputs::*;
use crate::*;

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Chroma(a) => chroma(a),
        Command::Match(a) => match_cmd(a),
        Command::FpIndex(a) => fp_index(a),
        Command::FpQuery(a) => fp_query(a),
        Command::Follow(a) => follow(a),
        Command::GenData(a) => gen_data(a, cli.seed),
        Command::EmbedTrain(a) => embed_train(a, cli.seed),
        Command::EmbedQuery(a) => embed_query(a),
    }
}

fn usage(flag: &str, why: &str) -> CliError {
    CliError::Usage(format!("invalid value for '--{flag}': {why}"))
}

fn positive(flag: &str, v: f64) -> Result<(), CliError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(usage(flag, "must be a positive number"))
    }
}

fn at_least(flag: &str, v: usize, min: usize) -> Result<(), CliError> {
    if v >= min {
        Ok(())
    } else {
        Err(usage(flag, &format!("must be at least {min}")))
    }
}

fn check_features(f: &FeatureArgs) -> Result<(), CliError> {
    positive("frame-rate", f.frame_rate)?;
    if f.window < 256 || !f.window.is_power_of_two() {
        return Err(usage("window", "must be a power of two of at least 256"));
    }
    if f.hop == 0 || f.hop > f.window {
        return Err(usage("hop", "must be in 1..=window"));
    }
    Ok(())
}

fn fingerprint_setup(
    f: &FingerprintArgs,
) -> Result<(ExtractionConstraints, TauQuantizer), CliError> {
    let c = ExtractionConstraints {
        d_min: f.d_min,
        d_max: f.d_max,
        fanout: f.fanout,
    };
    c.validate()
        .map_err(|e| CliError::Usage(format!("fingerprint constraints: {e}")))?;
    let q = TauQuantizer::new(f.bins_per_octave)
        .map_err(|e| usage("bins-per-octave", &e.to_string()))?;
    Ok((c, q))
}

fn synth(a: &SynthArgs) -> Result<(), CliError> {
    at_least("harmonics", a.harmonics, 1)?;
    if a.sample_rate < 8000 {
        return Err(usage("sample-rate", "must be at least 8000"));
    }
    let seq = read_notes(&a.input)?;
    let audio = render_audio(&seq, a.sample_rate, a.harmonics).map_err(CliError::data)?;
    write_file(&a.out, &wav_bytes(&audio).map_err(CliError::data)?)
}

fn chroma(a: &ChromaArgs) -> Result<(), CliError> {
    check_features(&a.features)?;
    let c = read_chromagram(&a.input, &a.features)?;
    write_output(a.out.as_deref(), to_chroma_csv(&c).as_bytes())
}

fn match_cmd(a: &MatchArgs) -> Result<(), CliError> {
    check_features(&a.features)?;
    at_least("top", a.top, 1)?;
    positive("threshold", a.threshold)?;
    let query = read_chromagram(&a.query, &a.features)?;
    // Symbolic documents are rendered at the query's frame rate.
    let doc_features = FeatureArgs {
        frame_rate: query.frame_rate,
        ..a.features
    };
    let mut corpus = Vec::new();
    for path in corpus_files(&a.corpus, &["csv", "mid", "midi", "wav"])? {
        let doc = read_chromagram(&path, &doc_features)?;
        if (doc.frame_rate - query.frame_rate).abs() > 1e-9 * query.frame_rate {
            eprintln!(
                "warning: skipping {}: frame rate {} differs from the query's {}",
                path.display(),
                doc.frame_rate,
                query.frame_rate
            );
            continue;
        }
        corpus.push((stem(&path), doc));
    }
    let params = RankParams {
        threshold: a.threshold,
        exclusion: a.exclusion,
        search_transpositions: a.transpositions,
    };
    let out = rank_documents(&query, &corpus, &params).map_err(CliError::data)?;
    for skip in &out.skipped {
        eprintln!("warning: skipped {}: {}", skip.doc_id, skip.reason);
    }
    let top = &out.matches[..out.matches.len().min(a.top)];
    write_output(a.out.as_deref(), to_ranked_csv(top).as_bytes())
}

fn fp_index(a: &FpIndexArgs) -> Result<(), CliError> {
    let (c, q) = fingerprint_setup(&a.fingerprint)?;
    let corpus = read_note_corpus(&a.corpus)?;
    let build = build_index(&corpus, &c, q).map_err(CliError::data)?;
    for skip in &build.skipped {
        eprintln!("warning: skipped {}: {}", skip.piece_id, skip.reason);
    }
    write_file(&a.out, &build.index.to_bytes())?;
    if let Some(json) = &a.json {
        write_file(json, build.index.to_json().as_bytes())?;
    }
    Ok(())
}

fn fp_query(a: &FpQueryArgs) -> Result<(), CliError> {
    at_least("top", a.top, 1)?;
    let index = FingerprintIndex::read_from(BufReader::new(open(&a.index)?))
        .map_err(|e| CliError::Data(format!("{}: {e}", a.index.display())))?;
    let query = read_notes(&a.query)?;
    let hyps = index.query(&query, a.tolerance).map_err(CliError::data)?;
    let mut csv = String::from("rank,piece_id,score_time,tempo_ratio,votes\n");
    for (i, h) in hyps.iter().take(a.top).enumerate() {
        let _ = writeln!(
            csv,
            "{},{},{:.6},{:.6},{}",
            i + 1,
            h.piece_id,
            h.score_time,
            h.tempo_ratio,
            h.votes
        );
    }
    write_output(a.out.as_deref(), csv.as_bytes())
}

fn follow(a: &FollowArgs) -> Result<(), CliError> {
    positive("buffer", a.buffer)?;
    positive("eval-interval", a.eval_interval)?;
    positive("margin", a.margin)?;
    positive("frame-rate", a.frame_rate)?;
    positive("jump-seconds", a.jump_seconds)?;
    at_least("width", a.width, 3)?;
    at_least("consecutive", a.consecutive as usize, 1)?;
    at_least("jump-consecutive", a.jump_consecutive as usize, 1)?;
    if !(0.0..=1.0).contains(&a.confidence) {
        return Err(usage("confidence", "must lie in [0, 1]"));
    }
    let (c, q) = fingerprint_setup(&a.fingerprint)?;
    let config = CompanionConfig {
        buffer_seconds: a.buffer,
        eval_interval: a.eval_interval,
        margin: a.margin,
        consecutive: a.consecutive,
        confidence_threshold: a.confidence,
        min_votes: a.min_votes,
        jump_seconds: a.jump_seconds,
        jump_consecutive: a.jump_consecutive,
        tracker_width: a.width,
        seed_radius: a.seed_radius,
        frame_rate: a.frame_rate,
        tau_tolerance_bins: a.tolerance,
    };
    let corpus = read_note_corpus(&a.corpus)?;
    let build = build_index(&corpus, &c, q).map_err(CliError::data)?;
    for skip in &build.skipped {
        eprintln!("warning: skipped {}: {}", skip.piece_id, skip.reason);
    }
    let docs = score_chromagrams(&corpus, a.frame_rate).map_err(CliError::data)?;
    let mut companion =
        Companion::new(Arc::new(build.index), Arc::new(docs), config).map_err(CliError::data)?;
    let text = read_input_text(a.stream.as_deref())?;
    let items = parse_stream(&text, a.frame_rate).map_err(CliError::data)?;
    let trace = if a.sequential {
        run_sequential(&mut companion, &items)
    } else {
        run_concurrent(&mut companion, &items)
    };
    write_output(a.out.as_deref(), to_trace_csv(&trace).as_bytes())
}

fn gen_data(a: &GenDataArgs, seed: u64) -> Result<(), CliError> {
    positive("window", a.window)?;
    at_least("pairs-per-piece", a.pairs_per_piece, 1)?;
    let pieces: Vec<NoteSequence> = match &a.corpus {
        Some(dir) => read_note_corpus(dir)?,
        None => {
            at_least("pieces", a.pieces, 1)?;
            generate_corpus(a.pieces, seed, &PieceConfig::default())
                .into_iter()
                .map(|p| p.seq)
                .collect()
        }
    };
    let ds = musiclink::embedding::generate_dataset(
        &pieces,
        a.pairs_per_piece,
        a.window,
        a.augment,
        seed,
    );
    if ds.is_empty() {
        return Err(CliError::Data(
            "no window of the corpus contains a note".into(),
        ));
    }
    write_file(&a.out, &ds.to_bytes())?;
    write_file(
        &sidecar_path(&a.out, a.sidecar.as_deref()),
        ds.sidecar_json().as_bytes(),
    )
}

fn load_dataset(
    path: &std::path::Path,
    sidecar: Option<&std::path::Path>,
) -> Result<Dataset, CliError> {
    let meta = sidecar_path(path, sidecar);
    let text = std::fs::read_to_string(&meta)
        .map_err(|e| CliError::Data(format!("{}: {e}", meta.display())))?;
    Dataset::read_from(BufReader::new(open(path)?), &text)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn embed_train(a: &EmbedTrainArgs, seed: u64) -> Result<(), CliError> {
    at_least("batch-size", a.batch_size, 2)?;
    at_least("hidden", a.hidden, 1)?;
    at_least("dim", a.dim, 1)?;
    positive("learning-rate", a.learning_rate)?;
    positive("gamma", a.gamma)?;
    let ds = load_dataset(&a.data, a.sidecar.as_deref())?;
    let config = EmbedConfig {
        gamma: a.gamma,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        epochs: a.epochs,
        seed,
        hidden: a.hidden,
        embed_dim: a.dim,
        symmetric: a.symmetric,
    };
    let out = train(&ds.pairs, &config).map_err(CliError::data)?;
    write_file(&a.out, &out.params.to_bytes())?;
    if let Some(loss) = &a.loss {
        write_file(loss, to_loss_csv(&out.loss_trace).as_bytes())?;
    }
    Ok(())
}

fn embed_query(a: &EmbedQueryArgs) -> Result<(), CliError> {
    at_least("top", a.top, 1)?;
    let params = PathwayParams::read_from(BufReader::new(open(&a.model)?))
        .map_err(|e| CliError::Data(format!("{}: {e}", a.model.display())))?;
    let candidates = load_dataset(&a.candidates, None)?;
    let queries = match &a.queries {
        Some(q) => load_dataset(q, None)?,
        None => candidates.clone(),
    };
    let snippets: Vec<&[f64]> = candidates
        .pairs
        .iter()
        .map(|p| p.0.values.as_slice())
        .collect();
    let excerpts: Vec<&[f64]> = queries
        .pairs
        .iter()
        .map(|p| p.1.values.as_slice())
        .collect();
    let cand = embed_all(&params.snippet, &snippets).map_err(CliError::data)?;
    let qs = embed_all(&params.excerpt, &excerpts).map_err(CliError::data)?;
    // Candidates are named by position so that ties break in dataset order.
    let width = candidates.len().to_string().len();
    let corpus: Vec<(String, Vec<f64>)> = cand
        .into_iter()
        .enumerate()
        .map(|(i, e)| (format!("{i:0width$}"), e))
        .collect();
    let mut csv = String::new();
    if a.vote {
        let mut by_piece: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        for (q, meta) in qs.iter().zip(&queries.meta) {
            let best = retrieve(&corpus, q, 1).map_err(CliError::data)?;
            let idx: usize = best[0].0.parse().expect("candidate names are indices");
            by_piece
                .entry(&meta.piece_id)
                .or_default()
                .push(candidates.meta[idx].piece_id.clone());
        }
        csv.push_str("piece_id,predicted,queries,agreeing\n");
        for (piece, votes) in by_piece {
            let predicted = majority_vote(&votes).map_err(CliError::data)?;
            let agreeing = votes.iter().filter(|v| **v == predicted).count();
            let _ = writeln!(csv, "{piece},{predicted},{},{agreeing}", votes.len());
        }
    } else {
        csv.push_str("query,rank,candidate,piece_id,score\n");
        for (qi, q) in qs.iter().enumerate() {
            for (rank, (name, score)) in retrieve(&corpus, q, a.top)
                .map_err(CliError::data)?
                .iter()
                .enumerate()
            {
                let idx: usize = name.parse().expect("candidate names are indices");
                let _ = writeln!(
                    csv,
                    "{qi},{},{idx},{},{score:.9}",
                    rank + 1,
                    candidates.meta[idx].piece_id
                );
            }
        }
    }
    write_output(a.out.as_deref(), csv.as_bytes())
}
