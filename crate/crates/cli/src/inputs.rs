//! File loading and output plumbing shared by the subcommands.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use musiclink::chroma::{audio_chromagram, parse_chroma_csv, symbolic_chromagram, Chromagram};
use musiclink::midi::parse_midi_with_warnings;
use musiclink::notes::{parse_note_csv, NoteSequence};
use musiclink::synth::read_wav;

use crate::{CliError, FeatureArgs};

const CHROMA_HEADER: &str = "# frame_rate=";

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default()
}

pub fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn is_chroma_csv(text: &str) -> bool {
    text.trim_start().starts_with(CHROMA_HEADER)
}

fn is_midi(path: &Path) -> bool {
    matches!(extension(path).as_str(), "mid" | "midi")
}

/// A note CSV or MIDI file, with the file stem as id.
pub fn read_notes(path: &Path) -> Result<NoteSequence, CliError> {
    let context = |e: &dyn std::fmt::Display| CliError::Data(format!("{}: {e}", path.display()));
    let seq = if is_midi(path) {
        let (seq, warnings) =
            parse_midi_with_warnings(&read_bytes(path)?).map_err(|e| context(&e))?;
        for w in warnings {
            eprintln!("warning: {}: {w}", path.display());
        }
        seq
    } else {
        parse_note_csv(&read_text(path)?).map_err(|e| context(&e))?
    };
    Ok(seq.with_id(stem(path)))
}

/// Any supported input as a chromagram: WAV through the STFT, chroma CSV
/// as stored, note files at `features.frame_rate`.
pub fn read_chromagram(path: &Path, features: &FeatureArgs) -> Result<Chromagram, CliError> {
    let context = |e: &dyn std::fmt::Display| CliError::Data(format!("{}: {e}", path.display()));
    match extension(path).as_str() {
        "wav" => {
            let audio = read_wav(read_bytes(path)?.as_slice()).map_err(|e| context(&e))?;
            audio_chromagram(&audio, features.window, features.hop).map_err(|e| context(&e))
        }
        "mid" | "midi" => {
            symbolic_chromagram(&read_notes(path)?, features.frame_rate).map_err(|e| context(&e))
        }
        _ => {
            let text = read_text(path)?;
            if is_chroma_csv(&text) {
                parse_chroma_csv(&text).map_err(|e| context(&e))
            } else {
                let seq = parse_note_csv(&text).map_err(|e| context(&e))?;
                symbolic_chromagram(&seq, features.frame_rate).map_err(|e| context(&e))
            }
        }
    }
}

/// Files in `dir` with one of `extensions`, sorted by name.
pub fn corpus_files(dir: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>, CliError> {
    let entries =
        fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && extensions.contains(&extension(p).as_str()))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no {} files",
            dir.display(),
            extensions.join("/")
        )));
    }
    Ok(files)
}

pub const NOTE_EXTENSIONS: &[&str] = &["csv", "mid", "midi"];

/// Every note file of a corpus directory.
pub fn read_note_corpus(dir: &Path) -> Result<Vec<NoteSequence>, CliError> {
    corpus_files(dir, NOTE_EXTENSIONS)?
        .iter()
        .map(|p| read_notes(p))
        .collect()
}

fn is_stdio(path: Option<&Path>) -> bool {
    path.is_none_or(|p| p.as_os_str() == "-")
}

/// Writes to `path`, or standard output for `None` and `-`.
pub fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    if is_stdio(path) {
        let mut out = io::stdout().lock();
        return out
            .write_all(bytes)
            .and_then(|_| out.flush())
            .map_err(CliError::data);
    }
    write_file(path.expect("checked above"), bytes)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Reads `path`, or standard input for `None` and `-`.
pub fn read_input_text(path: Option<&Path>) -> Result<String, CliError> {
    if is_stdio(path) {
        let mut s = String::new();
        io::stdin().read_to_string(&mut s).map_err(CliError::data)?;
        return Ok(s);
    }
    read_text(path.expect("checked above"))
}

pub fn open(path: &Path) -> Result<fs::File, CliError> {
    fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// `explicit`, or `base` with `.json` appended.
pub fn sidecar_path(base: &Path, explicit: Option<&Path>) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut s = base.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    })
}
