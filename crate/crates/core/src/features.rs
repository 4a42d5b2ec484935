//! Per-onset feature matrices fed to the regressor.
//!
//! Three feature sets exist: expectancy features (`E`), score basis
//! features (`S`), and their concatenation (`E+S`). Column order is fixed
//! per set so that serialized models and reports stay comparable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Expectancy column names, in matrix order.
pub const E_COLUMNS: [&str; 4] = ["ic_m", "h_m", "ic_c", "h_c"];

/// Score basis column names, in matrix order.
pub const S_COLUMNS: [&str; 10] =
    ["pitch_h", "pitch_l", "pitch_m", "vic_1", "vic_2", "vic_3", "b_phi", "b_d", "b_s", "b_w"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSet {
    #[serde(rename = "E")]
    Expectancy,
    #[serde(rename = "S")]
    Score,
    #[serde(rename = "E+S")]
    Combined,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 3] = [FeatureSet::Expectancy, FeatureSet::Score, FeatureSet::Combined];

    pub fn name(self) -> &'static str {
        match self {
            FeatureSet::Expectancy => "E",
            FeatureSet::Score => "S",
            FeatureSet::Combined => "E+S",
        }
    }

    pub fn parse(s: &str) -> Option<FeatureSet> {
        match s {
            "E" => Some(FeatureSet::Expectancy),
            "S" => Some(FeatureSet::Score),
            "E+S" => Some(FeatureSet::Combined),
            _ => None,
        }
    }

    /// Column names for this set, in order.
    pub fn columns(self) -> Vec<String> {
        match self {
            FeatureSet::Expectancy => E_COLUMNS.iter().map(|s| s.to_string()).collect(),
            FeatureSet::Score => S_COLUMNS.iter().map(|s| s.to_string()).collect(),
            FeatureSet::Combined => E_COLUMNS.iter().chain(S_COLUMNS.iter()).map(|s| s.to_string()).collect(),
        }
    }
}

impl std::fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One row per onset group, one column per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub piece_id: String,
    pub feature_set: FeatureSet,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("piece `{piece_id}`: row {row} has {got} entries, expected {expected}")]
    RaggedRow { piece_id: String, row: usize, got: usize, expected: usize },
    #[error("piece `{piece_id}`: non-finite value in row {row}, column `{column}`")]
    NonFinite { piece_id: String, row: usize, column: String },
    #[error("cannot concatenate `{left}` with `{right}`: {reason}")]
    ConcatMismatch { left: String, right: String, reason: String },
}

impl FeatureMatrix {
    pub fn new(
        piece_id: &str,
        feature_set: FeatureSet,
        rows: Vec<Vec<f64>>,
    ) -> Result<FeatureMatrix, FeatureError> {
        let m = FeatureMatrix {
            piece_id: piece_id.to_string(),
            feature_set,
            columns: feature_set.columns(),
            rows,
        };
        m.check()?;
        Ok(m)
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    /// Verifies the matrix is rectangular with only finite entries.
    pub fn check(&self) -> Result<(), FeatureError> {
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != self.columns.len() {
                return Err(FeatureError::RaggedRow {
                    piece_id: self.piece_id.clone(),
                    row: i,
                    got: row.len(),
                    expected: self.columns.len(),
                });
            }
            for (j, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(FeatureError::NonFinite {
                        piece_id: self.piece_id.clone(),
                        row: i,
                        column: self.columns[j].clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Concatenates expectancy and score matrices of the same piece column-wise
/// into the combined set. Row counts must agree (both are per onset group).
pub fn concat_features(e: &FeatureMatrix, s: &FeatureMatrix) -> Result<FeatureMatrix, FeatureError> {
    let mismatch = |reason: String| FeatureError::ConcatMismatch {
        left: e.piece_id.clone(),
        right: s.piece_id.clone(),
        reason,
    };
    if e.feature_set != FeatureSet::Expectancy || s.feature_set != FeatureSet::Score {
        return Err(mismatch(format!("expected sets E and S, got {} and {}", e.feature_set, s.feature_set)));
    }
    if e.piece_id != s.piece_id {
        return Err(mismatch("piece ids differ".to_string()));
    }
    if e.n_rows() != s.n_rows() {
        return Err(mismatch(format!("row counts differ ({} vs {})", e.n_rows(), s.n_rows())));
    }
    let rows = e
        .rows
        .iter()
        .zip(&s.rows)
        .map(|(a, b)| a.iter().chain(b.iter()).copied().collect())
        .collect();
    FeatureMatrix::new(&e.piece_id, FeatureSet::Combined, rows)
}
