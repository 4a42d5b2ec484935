//! Data model for aligned score–performance pieces and corpus file parsing.
//!
//! A corpus file is UTF-8 JSON of the form `{"pieces":[...]}`. Every note
//! carries both its score position (beats) and its aligned performance data
//! (onset seconds, MIDI velocity); alignment itself is an input requirement.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Metrical classification of a bar, deciding whether a secondary strong
/// beat exists at mid-bar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeterClass {
    Duple,
    CompoundDuple,
    Other,
}

/// One aligned note: score position plus performance realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Note {
    /// Score onset in beats from the notated start of the piece.
    pub onset_beats: f64,
    /// Notated duration in beats, > 0.
    pub duration_beats: f64,
    /// MIDI note number, 0–127.
    pub midi_pitch: u8,
    /// True for the manually annotated melody voice.
    pub is_melody: bool,
    /// Performed onset time in seconds, >= 0.
    pub perf_onset_sec: f64,
    /// Performed MIDI velocity, 1–127.
    pub perf_velocity: u8,
}

/// A meter in effect from `start_beat` (in anacrusis-corrected beats)
/// until the next span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeterSpan {
    pub start_beat: f64,
    /// Bar length B in beats, > 0.
    pub bar_length_beats: f64,
    pub classification: MeterClass,
}

/// An aligned score–performance piece.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub id: String,
    #[serde(default)]
    pub anacrusis_beats: f64,
    pub meters: Vec<MeterSpan>,
    pub notes: Vec<Note>,
}

/// Top-level corpus: an ordered list of pieces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub pieces: Vec<Piece>,
}

/// All notes sharing one distinct score onset.
#[derive(Debug, Clone, PartialEq)]
pub struct OnsetGroup {
    pub onset_beats: f64,
    pub notes: Vec<Note>,
    /// Arithmetic mean of the members' performed onset times.
    pub mean_perf_onset_sec: f64,
    /// Maximum performed velocity among the members.
    pub max_velocity: u8,
}

impl OnsetGroup {
    /// The melody note of this onset, if one was annotated.
    pub fn melody_note(&self) -> Option<&Note> {
        self.notes.iter().find(|n| n.is_melody)
    }

    /// Lowest MIDI pitch in the group (the bass).
    pub fn lowest_pitch(&self) -> u8 {
        self.notes.iter().map(|n| n.midi_pitch).min().expect("non-empty group")
    }

    /// Highest MIDI pitch in the group.
    pub fn highest_pitch(&self) -> u8 {
        self.notes.iter().map(|n| n.midi_pitch).max().expect("non-empty group")
    }
}

/// Notes of a piece partitioned by distinct score onset, in score order.
/// This is the time axis shared by all feature and target series.
#[derive(Debug, Clone, PartialEq)]
pub struct OnsetSequence {
    pub groups: Vec<OnsetGroup>,
}

impl OnsetSequence {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Severity of a validation diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

/// One validation finding for a piece.
#[derive(Debug, Clone, Serialize)]
pub struct Diagnostic {
    pub piece_id: String,
    pub severity: Severity,
    pub message: String,
}

impl Diagnostic {
    fn error(piece_id: &str, message: impl Into<String>) -> Self {
        Diagnostic { piece_id: piece_id.to_string(), severity: Severity::Error, message: message.into() }
    }

    fn warning(piece_id: &str, message: impl Into<String>) -> Self {
        Diagnostic { piece_id: piece_id.to_string(), severity: Severity::Warning, message: message.into() }
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("piece `{piece_id}`: {message}")]
    Validation { piece_id: String, message: String },
}

/// Parses and validates a corpus file.
///
/// Notes are re-sorted into (onset, pitch) order when needed; any
/// error-severity invariant violation rejects the file, naming the piece
/// and field.
pub fn parse_corpus(raw: &[u8]) -> Result<Corpus, CorpusError> {
    let mut corpus: Corpus = serde_json::from_slice(raw).map_err(|e| CorpusError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    for piece in &mut corpus.pieces {
        canonicalize_piece(piece);
        let diags = validate_piece(piece);
        if let Some(d) = diags.iter().find(|d| d.severity == Severity::Error) {
            return Err(CorpusError::Validation { piece_id: d.piece_id.clone(), message: d.message.clone() });
        }
    }
    Ok(corpus)
}

/// Sorts notes by (onset_beats, midi_pitch) and meters by start beat.
pub fn canonicalize_piece(piece: &mut Piece) {
    piece
        .notes
        .sort_by(|a, b| a.onset_beats.total_cmp(&b.onset_beats).then(a.midi_pitch.cmp(&b.midi_pitch)));
    piece.meters.sort_by(|a, b| a.start_beat.total_cmp(&b.start_beat));
}

/// Checks every piece invariant, returning one diagnostic per violation.
///
/// Range and structure violations are errors; re-sortable order issues and
/// non-monotone performed onsets are warnings.
pub fn validate_piece(piece: &Piece) -> Vec<Diagnostic> {
    let id = piece.id.as_str();
    let mut diags = Vec::new();

    for (i, n) in piece.notes.iter().enumerate() {
        if n.perf_velocity == 0 || n.perf_velocity > 127 {
            diags.push(Diagnostic::error(id, format!("note {i}: perf_velocity {} out of range 1..=127", n.perf_velocity)));
        }
        if n.midi_pitch > 127 {
            diags.push(Diagnostic::error(id, format!("note {i}: midi_pitch {} out of range 0..=127", n.midi_pitch)));
        }
        if !(n.duration_beats > 0.0) {
            diags.push(Diagnostic::error(id, format!("note {i}: duration_beats {} must be > 0", n.duration_beats)));
        }
        if !n.perf_onset_sec.is_finite() || n.perf_onset_sec < 0.0 {
            diags.push(Diagnostic::error(id, format!("note {i}: perf_onset_sec {} must be >= 0", n.perf_onset_sec)));
        }
        if !n.onset_beats.is_finite() {
            diags.push(Diagnostic::error(id, format!("note {i}: onset_beats must be finite")));
        }
    }

    if !(piece.anacrusis_beats >= 0.0) {
        diags.push(Diagnostic::error(id, format!("anacrusis_beats {} must be >= 0", piece.anacrusis_beats)));
    }

    if piece.meters.is_empty() {
        diags.push(Diagnostic::error(id, "piece has no meter spans"));
    } else {
        if piece.meters[0].start_beat != 0.0 {
            diags.push(Diagnostic::error(id, format!("first meter span starts at {}, expected 0", piece.meters[0].start_beat)));
        }
        for (i, m) in piece.meters.iter().enumerate() {
            if !(m.bar_length_beats > 0.0) {
                diags.push(Diagnostic::error(id, format!("meter span {i}: bar_length_beats {} must be > 0", m.bar_length_beats)));
            }
        }
        for w in piece.meters.windows(2) {
            if w[1].start_beat <= w[0].start_beat {
                diags.push(Diagnostic::error(id, format!("meter spans overlap at beat {}", w[1].start_beat)));
            }
        }
    }

    let sorted = piece
        .notes
        .windows(2)
        .all(|w| (w[0].onset_beats, w[0].midi_pitch) <= (w[1].onset_beats, w[1].midi_pitch));
    if !sorted {
        diags.push(Diagnostic::warning(id, "notes re-sorted: input not in (onset, pitch) order"));
    }

    let mut onsets = BTreeSet::new();
    for n in &piece.notes {
        onsets.insert(n.onset_beats.to_bits());
    }
    if onsets.len() < 2 {
        diags.push(Diagnostic::error(id, format!("piece has {} distinct onsets, need at least 2", onsets.len())));
    }

    // Per-onset structure: distinct pitches, at most one melody note.
    let mut sorted_notes: Vec<&Note> = piece.notes.iter().collect();
    sorted_notes.sort_by(|a, b| a.onset_beats.total_cmp(&b.onset_beats).then(a.midi_pitch.cmp(&b.midi_pitch)));
    for chunk in chunk_by_onset(&sorted_notes) {
        let melody_count = chunk.iter().filter(|n| n.is_melody).count();
        if melody_count > 1 {
            diags.push(Diagnostic::error(id, format!("duplicate melody note at onset {}", chunk[0].onset_beats)));
        }
        for w in chunk.windows(2) {
            if w[0].midi_pitch == w[1].midi_pitch {
                diags.push(Diagnostic::error(id, format!("duplicate pitch {} at onset {}", w[0].midi_pitch, w[0].onset_beats)));
            }
        }
    }

    // Soft check: mean performed onsets should be non-decreasing in score order.
    if diags.iter().all(|d| d.severity == Severity::Warning) {
        if let Ok(seq) = try_group_by_onset(piece) {
            let monotone = seq.groups.windows(2).all(|w| w[0].mean_perf_onset_sec <= w[1].mean_perf_onset_sec);
            if !monotone {
                diags.push(Diagnostic::warning(id, "performance onsets not monotone across score onsets"));
            }
        }
    }

    diags
}

fn chunk_by_onset<'a>(notes: &'a [&'a Note]) -> Vec<&'a [&'a Note]> {
    let mut chunks = Vec::new();
    let mut start = 0;
    for i in 1..=notes.len() {
        if i == notes.len() || notes[i].onset_beats != notes[start].onset_beats {
            chunks.push(&notes[start..i]);
            start = i;
        }
    }
    chunks
}

fn try_group_by_onset(piece: &Piece) -> Result<OnsetSequence, CorpusError> {
    if piece.notes.is_empty() {
        return Err(CorpusError::Validation { piece_id: piece.id.clone(), message: "piece has no notes".into() });
    }
    let mut notes = piece.notes.clone();
    notes.sort_by(|a, b| a.onset_beats.total_cmp(&b.onset_beats).then(a.midi_pitch.cmp(&b.midi_pitch)));

    let mut groups: Vec<OnsetGroup> = Vec::new();
    for note in notes {
        // Grouping uses exact equality of the beat values as written.
        match groups.last_mut() {
            Some(g) if g.onset_beats == note.onset_beats => g.notes.push(note),
            _ => groups.push(OnsetGroup {
                onset_beats: note.onset_beats,
                notes: vec![note],
                mean_perf_onset_sec: 0.0,
                max_velocity: 0,
            }),
        }
    }
    for g in &mut groups {
        g.mean_perf_onset_sec = g.notes.iter().map(|n| n.perf_onset_sec).sum::<f64>() / g.notes.len() as f64;
        g.max_velocity = g.notes.iter().map(|n| n.perf_velocity).max().unwrap();
    }
    Ok(OnsetSequence { groups })
}

/// Partitions the notes of a valid piece into onset groups and populates
/// per-group performance summaries.
pub fn group_by_onset(piece: &Piece) -> OnsetSequence {
    try_group_by_onset(piece).expect("valid piece has notes")
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn note(onset: f64, pitch: u8, melody: bool, t: f64, vel: u8) -> Note {
        Note {
            onset_beats: onset,
            duration_beats: 1.0,
            midi_pitch: pitch,
            is_melody: melody,
            perf_onset_sec: t,
            perf_velocity: vel,
        }
    }

    fn meter44() -> Vec<MeterSpan> {
        vec![MeterSpan { start_beat: 0.0, bar_length_beats: 4.0, classification: MeterClass::Duple }]
    }

    fn minimal_json() -> String {
        r#"{"pieces":[{"id":"p1","anacrusis_beats":0,
            "meters":[{"start_beat":0,"bar_length_beats":4,"classification":"duple"}],
            "notes":[
              {"onset_beats":0,"duration_beats":1,"midi_pitch":60,"is_melody":true,"perf_onset_sec":0.0,"perf_velocity":70},
              {"onset_beats":1,"duration_beats":1,"midi_pitch":64,"is_melody":true,"perf_onset_sec":0.5,"perf_velocity":80}
            ]}]}"#
            .to_string()
    }

    #[test]
    fn parses_minimal_corpus() {
        let corpus = parse_corpus(minimal_json().as_bytes()).unwrap();
        assert_eq!(corpus.pieces.len(), 1);
        assert_eq!(corpus.pieces[0].notes.len(), 2);
        assert_eq!(corpus.pieces[0].id, "p1");
    }

    #[test]
    fn rejects_velocity_out_of_range() {
        let json = minimal_json().replace("\"perf_velocity\":70", "\"perf_velocity\":0");
        let err = parse_corpus(json.as_bytes()).unwrap_err();
        match err {
            CorpusError::Validation { piece_id, message } => {
                assert_eq!(piece_id, "p1");
                assert!(message.contains("perf_velocity 0 out of range"), "{message}");
            }
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn rejects_duplicate_melody_note() {
        let json = r#"{"pieces":[{"id":"p1",
            "meters":[{"start_beat":0,"bar_length_beats":4,"classification":"duple"}],
            "notes":[
              {"onset_beats":0,"duration_beats":1,"midi_pitch":60,"is_melody":true,"perf_onset_sec":0.0,"perf_velocity":70},
              {"onset_beats":0,"duration_beats":1,"midi_pitch":64,"is_melody":true,"perf_onset_sec":0.0,"perf_velocity":80},
              {"onset_beats":1,"duration_beats":1,"midi_pitch":65,"is_melody":true,"perf_onset_sec":0.5,"perf_velocity":80}
            ]}]}"#;
        let err = parse_corpus(json.as_bytes()).unwrap_err();
        match err {
            CorpusError::Validation { message, .. } => {
                assert!(message.contains("duplicate melody note"), "{message}");
            }
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn parse_error_reports_location() {
        let err = parse_corpus(b"{\"pieces\": [ nope ]}").unwrap_err();
        match err {
            CorpusError::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn group_means_and_max_velocity() {
        let piece = Piece {
            id: "g".into(),
            anacrusis_beats: 0.0,
            meters: meter44(),
            notes: vec![
                note(0.0, 60, false, 0.0, 40),
                note(0.0, 64, true, 0.1, 80),
                note(1.0, 67, true, 0.6, 60),
            ],
        };
        let seq = group_by_onset(&piece);
        assert_eq!(seq.len(), 2);
        assert_eq!(seq.groups[0].mean_perf_onset_sec, 0.05);
        assert_eq!(seq.groups[0].max_velocity, 80);
        assert_eq!(seq.groups[1].mean_perf_onset_sec, 0.6);
    }

    #[test]
    fn single_note_group_mean_is_identity() {
        let piece = Piece {
            id: "g".into(),
            anacrusis_beats: 0.0,
            meters: meter44(),
            notes: vec![note(0.0, 60, true, 0.123, 64), note(1.0, 62, true, 0.7, 64)],
        };
        let seq = group_by_onset(&piece);
        assert_eq!(seq.groups[0].mean_perf_onset_sec, 0.123);
    }

    #[test]
    fn chord_max_velocity() {
        let piece = Piece {
            id: "g".into(),
            anacrusis_beats: 0.0,
            meters: meter44(),
            notes: vec![
                note(0.0, 60, false, 0.0, 40),
                note(0.0, 64, false, 0.0, 80),
                note(0.0, 67, false, 0.0, 60),
                note(0.0, 72, true, 0.0, 70),
                note(1.0, 60, false, 0.5, 50),
            ],
        };
        let seq = group_by_onset(&piece);
        assert_eq!(seq.groups[0].max_velocity, 80);
    }

    #[test]
    fn valid_piece_has_no_diagnostics() {
        let corpus = parse_corpus(minimal_json().as_bytes()).unwrap();
        assert!(validate_piece(&corpus.pieces[0]).is_empty());
    }

    #[test]
    fn unsorted_notes_warn_and_resort() {
        let mut piece = Piece {
            id: "u".into(),
            anacrusis_beats: 0.0,
            meters: meter44(),
            notes: vec![note(1.0, 62, true, 0.5, 64), note(0.0, 60, true, 0.0, 64)],
        };
        let diags = validate_piece(&piece);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].severity, Severity::Warning);
        assert!(diags[0].message.contains("re-sorted"));
        canonicalize_piece(&mut piece);
        assert!(validate_piece(&piece).is_empty());
    }

    #[test]
    fn non_monotone_performance_warns() {
        let piece = Piece {
            id: "m".into(),
            anacrusis_beats: 0.0,
            meters: meter44(),
            notes: vec![note(0.0, 60, true, 1.0, 64), note(1.0, 62, true, 0.2, 64)],
        };
        let diags = validate_piece(&piece);
        assert!(diags.iter().any(|d| d.message.contains("not monotone")));
        assert!(diags.iter().all(|d| d.severity == Severity::Warning));
    }

    #[test]
    fn round_trip_preserves_structure() {
        let corpus = parse_corpus(minimal_json().as_bytes()).unwrap();
        let bytes = serde_json::to_vec(&corpus).unwrap();
        let reparsed = parse_corpus(&bytes).unwrap();
        assert_eq!(corpus, reparsed);
    }

    #[test]
    fn parse_is_deterministic() {
        let a = parse_corpus(minimal_json().as_bytes()).unwrap();
        let b = parse_corpus(minimal_json().as_bytes()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grouping_partitions_notes() {
        let piece = Piece {
            id: "p".into(),
            anacrusis_beats: 0.0,
            meters: meter44(),
            notes: vec![
                note(0.0, 60, false, 0.0, 40),
                note(0.0, 64, true, 0.1, 80),
                note(0.5, 62, true, 0.3, 60),
                note(2.0, 65, true, 1.2, 60),
            ],
        };
        let seq = group_by_onset(&piece);
        let total: usize = seq.groups.iter().map(|g| g.notes.len()).sum();
        assert_eq!(total, piece.notes.len());
        assert!(seq.groups.windows(2).all(|w| w[0].onset_beats < w[1].onset_beats));
    }

    #[test]
    fn anacrusis_defaults_to_zero() {
        let json = minimal_json().replace("\"anacrusis_beats\":0,", "");
        let corpus = parse_corpus(json.as_bytes()).unwrap();
        assert_eq!(corpus.pieces[0].anacrusis_beats, 0.0);
    }
}
