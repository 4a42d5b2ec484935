//! Expressive parameters per score onset: beat period ratio, normalized
//! velocity, and their first derivatives.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::OnsetSequence;

/// The four expressive parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Bpr,
    BprD,
    Vel,
    VelD,
}

impl TargetKind {
    pub const ALL: [TargetKind; 4] = [TargetKind::Bpr, TargetKind::BprD, TargetKind::Vel, TargetKind::VelD];

    pub fn name(self) -> &'static str {
        match self {
            TargetKind::Bpr => "bpr",
            TargetKind::BprD => "bpr_d",
            TargetKind::Vel => "vel",
            TargetKind::VelD => "vel_d",
        }
    }

    pub fn parse(s: &str) -> Option<TargetKind> {
        match s {
            "bpr" => Some(TargetKind::Bpr),
            "bpr_d" => Some(TargetKind::BprD),
            "vel" => Some(TargetKind::Vel),
            "vel_d" => Some(TargetKind::VelD),
            _ => None,
        }
    }
}

impl std::fmt::Display for TargetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One target value per onset group of a piece.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSeries {
    pub kind: TargetKind,
    pub piece_id: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("piece `{piece_id}`: series of length {len} is too short (need >= 2)")]
    TooShort { piece_id: String, len: usize },
    #[error("piece `{piece_id}`: degenerate performance, non-positive beat period {period} between onsets {index} and {}", index + 1)]
    DegeneratePerformance { piece_id: String, index: usize, period: f64 },
    #[error("piece `{piece_id}`: cannot differentiate a {kind} series again")]
    AlreadyDerivative { piece_id: String, kind: TargetKind },
}

/// Beat period ratio per onset group.
///
/// The local beat period between consecutive groups is the slope of mean
/// performed time against score beats; the last group repeats the previous
/// period so the series aligns 1:1 with onsets. Dividing by the mean period
/// normalizes every piece to mean 1.
pub fn compute_bpr(seq: &OnsetSequence, piece_id: &str) -> Result<TargetSeries, TargetError> {
    let n = seq.len();
    if n < 2 {
        return Err(TargetError::TooShort { piece_id: piece_id.to_string(), len: n });
    }
    let mut periods = Vec::with_capacity(n);
    for i in 0..n - 1 {
        let dt = seq.groups[i + 1].mean_perf_onset_sec - seq.groups[i].mean_perf_onset_sec;
        let db = seq.groups[i + 1].onset_beats - seq.groups[i].onset_beats;
        let p = dt / db;
        if !(p > 0.0) {
            return Err(TargetError::DegeneratePerformance { piece_id: piece_id.to_string(), index: i, period: p });
        }
        periods.push(p);
    }
    periods.push(periods[n - 2]);
    let mean = periods.iter().sum::<f64>() / n as f64;
    let values = periods.iter().map(|p| p / mean).collect();
    Ok(TargetSeries { kind: TargetKind::Bpr, piece_id: piece_id.to_string(), values })
}

/// Maximal performed velocity per onset group, divided by 127.
pub fn compute_vel(seq: &OnsetSequence, piece_id: &str) -> TargetSeries {
    let values = seq.groups.iter().map(|g| g.max_velocity as f64 / 127.0).collect();
    TargetSeries { kind: TargetKind::Vel, piece_id: piece_id.to_string(), values }
}

/// Forward first difference, zero-padded at the end so the result keeps
/// one value per onset group.
pub fn differentiate(series: &TargetSeries) -> Result<TargetSeries, TargetError> {
    let kind = match series.kind {
        TargetKind::Bpr => TargetKind::BprD,
        TargetKind::Vel => TargetKind::VelD,
        k @ (TargetKind::BprD | TargetKind::VelD) => {
            return Err(TargetError::AlreadyDerivative { piece_id: series.piece_id.clone(), kind: k })
        }
    };
    let n = series.values.len();
    if n < 2 {
        return Err(TargetError::TooShort { piece_id: series.piece_id.clone(), len: n });
    }
    let mut values: Vec<f64> = series.values.windows(2).map(|w| w[1] - w[0]).collect();
    values.push(0.0);
    Ok(TargetSeries { kind, piece_id: series.piece_id.clone(), values })
}

/// Computes the requested target series for a piece's onset sequence.
pub fn compute_target(seq: &OnsetSequence, piece_id: &str, kind: TargetKind) -> Result<TargetSeries, TargetError> {
    match kind {
        TargetKind::Bpr => compute_bpr(seq, piece_id),
        TargetKind::Vel => Ok(compute_vel(seq, piece_id)),
        TargetKind::BprD => differentiate(&compute_bpr(seq, piece_id)?),
        TargetKind::VelD => differentiate(&compute_vel(seq, piece_id)),
    }
}
