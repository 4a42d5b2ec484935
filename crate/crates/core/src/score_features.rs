//! Score basis features per onset group: pitch register, vertical interval
//! classes above the bass, and bar-relative metrical position.

use thiserror::Error;

use crate::corpus::{MeterClass, MeterSpan, OnsetGroup, Piece};
use crate::features::{FeatureMatrix, FeatureError, FeatureSet};

#[derive(Debug, Error)]
pub enum ScoreFeatureError {
    #[error("piece `{piece_id}`: onset at beat {onset_beats} lies before the meter span starting at beat {span_start}")]
    MeterCoverage { piece_id: String, onset_beats: f64, span_start: f64 },
    #[error("piece `{piece_id}` has no meter spans")]
    NoMeter { piece_id: String },
    #[error(transparent)]
    Matrix(#[from] FeatureError),
}

/// Highest, lowest, and melody MIDI pitch of the group, each divided
/// by 127. A group without a melody note gets pitch_m = 0.
pub fn pitch_features(group: &OnsetGroup) -> (f64, f64, f64) {
    let h = group.highest_pitch() as f64 / 127.0;
    let l = group.lowest_pitch() as f64 / 127.0;
    let m = group.melody_note().map_or(0.0, |n| n.midi_pitch as f64 / 127.0);
    (h, l, m)
}

/// Distinct interval classes above the bass: (p - bass) mod 12 for every
/// pitch in the group, with 0 (unison and octaves) removed, ascending.
pub fn vic_classes(group: &OnsetGroup) -> Vec<u8> {
    let bass = group.lowest_pitch();
    let mut present = [false; 12];
    for note in &group.notes {
        present[((note.midi_pitch as i32 - bass as i32).rem_euclid(12)) as usize] = true;
    }
    (1..12).filter(|&c| present[c as usize]).collect()
}

/// The first three interval classes, each divided by 11, zero-padded.
pub fn vic_features(group: &OnsetGroup) -> (f64, f64, f64) {
    let classes = vic_classes(group);
    let slot = |i: usize| classes.get(i).map_or(0.0, |&c| c as f64 / 11.0);
    (slot(0), slot(1), slot(2))
}

/// Bar phase and strength flags for an onset under one meter span.
///
/// The phase is (t' mod B)/B with t' measured from the span start after
/// removing the anacrusis shift, so notated downbeats land on phase 0.
/// Within the opening span a negative t' (a pickup) wraps around the bar;
/// before any later span it is a coverage error.
pub fn metrical_features(
    onset_beats: f64,
    anacrusis_beats: f64,
    meter: &MeterSpan,
    piece_id: &str,
) -> Result<(f64, f64, f64, f64), ScoreFeatureError> {
    let t = onset_beats - anacrusis_beats - meter.start_beat;
    if t < 0.0 && meter.start_beat > 0.0 {
        return Err(ScoreFeatureError::MeterCoverage {
            piece_id: piece_id.to_string(),
            onset_beats,
            span_start: meter.start_beat,
        });
    }
    let b = meter.bar_length_beats;
    let b_phi = t.rem_euclid(b) / b;
    let strong_meter = matches!(meter.classification, MeterClass::Duple | MeterClass::CompoundDuple);
    let b_d = (b_phi == 0.0) as u8 as f64;
    let b_s = (b_phi == 0.5 && strong_meter) as u8 as f64;
    let b_w = 1.0 - b_d - b_s;
    Ok((b_phi, b_d, b_s, b_w))
}

/// The meter span active at score position `onset_beats - anacrusis_beats`:
/// the last span starting at or before it, or the opening span for pickups.
pub fn meter_at<'a>(
    meters: &'a [MeterSpan],
    onset_beats: f64,
    anacrusis_beats: f64,
    piece_id: &str,
) -> Result<&'a MeterSpan, ScoreFeatureError> {
    let t = onset_beats - anacrusis_beats;
    meters
        .iter()
        .rev()
        .find(|m| m.start_beat <= t)
        .or_else(|| meters.first())
        .ok_or_else(|| ScoreFeatureError::NoMeter { piece_id: piece_id.to_string() })
}

/// One 10-column row per onset group:
/// pitch_h, pitch_l, pitch_m, vic_1..3, b_phi, b_d, b_s, b_w.
pub fn assemble_score_matrix(piece: &Piece) -> Result<FeatureMatrix, ScoreFeatureError> {
    let seq = crate::corpus::group_by_onset(piece);
    let mut rows = Vec::with_capacity(seq.len());
    for group in &seq.groups {
        let (ph, pl, pm) = pitch_features(group);
        let (v1, v2, v3) = vic_features(group);
        let meter = meter_at(&piece.meters, group.onset_beats, piece.anacrusis_beats, &piece.id)?;
        let (b_phi, b_d, b_s, b_w) =
            metrical_features(group.onset_beats, piece.anacrusis_beats, meter, &piece.id)?;
        rows.push(vec![ph, pl, pm, v1, v2, v3, b_phi, b_d, b_s, b_w]);
    }
    Ok(FeatureMatrix::new(&piece.id, FeatureSet::Score, rows)?)
}
