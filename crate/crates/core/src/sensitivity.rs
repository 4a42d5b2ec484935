//! Differential sensitivity maps for a trained regressor.
//!
//! For every valid output step τ of every piece, the gradient of ŷ_τ with
//! respect to each (normalized) input cell in the window [τ−W, τ+W] is
//! computed by backpropagation from that single output. The map is the
//! unweighted mean of these signed derivatives over all centers, shaped
//! features × (2W+1) with column w holding the offset w − W.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::regressor::{Regressor, RegressorError};

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error("no piece is long enough for half-window {w} (needs 2W+1 rows)")]
    AllPiecesTooShort { w: usize },
    #[error(transparent)]
    Regressor(#[from] RegressorError),
    #[error("failed to write `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Mean signed derivative of the output w.r.t. each input cell, per
/// feature row and time offset relative to the output step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMap {
    pub feature_names: Vec<String>,
    pub half_window: usize,
    /// features × (2W+1); column w corresponds to time offset w − W.
    pub values: Vec<Vec<f64>>,
}

impl SensitivityMap {
    pub fn n_offsets(&self) -> usize {
        2 * self.half_window + 1
    }

    /// CSV with one row per feature and one column per time offset.
    pub fn to_csv(&self) -> String {
        let w = self.half_window as i64;
        let mut out = String::from("feature");
        for off in -w..=w {
            let _ = write!(out, ",{off}");
        }
        out.push('\n');
        for (name, row) in self.feature_names.iter().zip(&self.values) {
            out.push_str(name);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Computes the map by averaging single-output input gradients over every
/// center whose window fits inside the piece. Pieces shorter than 2W+1
/// rows are skipped; it is an error if every piece is.
pub fn sensitivity_map(
    model: &Regressor,
    pieces: &[&FeatureMatrix],
    half_window: usize,
) -> Result<SensitivityMap, SensitivityError> {
    let span = 2 * half_window + 1;
    let n_features = model.input_dim;
    let mut acc = vec![vec![0.0f64; span]; n_features];
    let mut centers = 0u64;
    let mut feature_names: Option<Vec<String>> = None;
    for matrix in pieces {
        let rows = model.normalize_matrix(matrix)?;
        if rows.len() < span {
            continue;
        }
        if feature_names.is_none() {
            feature_names = Some(matrix.columns.clone());
        }
        let trace = model.trace_from_normalized(&rows);
        let t_len = rows.len();
        let mut dy = vec![0.0; t_len];
        for tau in half_window..t_len - half_window {
            dy[tau] = 1.0;
            let (_, dx) = model.backward(&trace, &dy);
            dy[tau] = 0.0;
            for f in 0..n_features {
                for (w, cell) in acc[f].iter_mut().enumerate() {
                    *cell += dx[tau + w - half_window][f];
                }
            }
            centers += 1;
        }
    }
    if centers == 0 {
        return Err(SensitivityError::AllPiecesTooShort { w: half_window });
    }
    let values: Vec<Vec<f64>> = acc
        .into_iter()
        .map(|row| row.into_iter().map(|v| v / centers as f64).collect())
        .collect();
    let feature_names =
        feature_names.unwrap_or_else(|| (0..n_features).map(|f| format!("f{f}")).collect());
    Ok(SensitivityMap { feature_names, half_window, values })
}

// Diverging endpoints: blue for negative, red for positive, white at zero.
const POS_COLOR: (f64, f64, f64) = (178.0, 24.0, 43.0);
const NEG_COLOR: (f64, f64, f64) = (33.0, 102.0, 172.0);

fn cell_color(value: f64, v_max: f64) -> String {
    if v_max <= 0.0 || value == 0.0 {
        return "#ffffff".to_string();
    }
    let t = (value / v_max).clamp(-1.0, 1.0);
    let target = if t > 0.0 { POS_COLOR } else { NEG_COLOR };
    let a = t.abs();
    let ch = |c: f64| (255.0 + (c - 255.0) * a).round() as u8;
    format!("#{:02x}{:02x}{:02x}", ch(target.0), ch(target.1), ch(target.2))
}

/// Renders the map as a standalone SVG heat map: one labelled row per
/// feature, diverging red/blue cells symmetric about zero with the scale
/// maximum at max |value|, and the center column (offset 0) marked τ.
pub fn render_map_svg(map: &SensitivityMap) -> String {
    const CELL: f64 = 18.0;
    const LABEL_W: f64 = 120.0;
    const TOP: f64 = 24.0;
    const BOTTOM: f64 = 26.0;
    let n_rows = map.feature_names.len();
    let n_cols = map.n_offsets();
    let width = LABEL_W + CELL * n_cols as f64 + 12.0;
    let height = TOP + CELL * n_rows as f64 + BOTTOM;
    let v_max = map
        .values
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = write!(svg, "<rect width=\"{width}\" height=\"{height}\" fill=\"#ffffff\"/>\n");
    for (r, (name, row)) in map.feature_names.iter().zip(&map.values).enumerate() {
        let y = TOP + r as f64 * CELL;
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" class=\"feature-label\">{}</text>\n",
            LABEL_W - 6.0,
            y + CELL * 0.7,
            xml_escape(name)
        );
        for (c, &v) in row.iter().enumerate() {
            let x = LABEL_W + c as f64 * CELL;
            let _ = write!(
                svg,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{}\"/>\n",
                cell_color(v, v_max)
            );
        }
    }
    let grid_h = CELL * n_rows as f64;
    let center_x = LABEL_W + map.half_window as f64 * CELL;
    let _ = write!(
        svg,
        "<rect x=\"{center_x:.1}\" y=\"{TOP}\" width=\"{CELL}\" height=\"{grid_h:.1}\" \
         fill=\"none\" stroke=\"#000000\" stroke-width=\"1.2\"/>\n"
    );
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">&#964;</text>\n",
        center_x + CELL / 2.0,
        TOP - 8.0
    );
    let w = map.half_window as i64;
    for (off, anchor) in [(-w, "start"), (0, "middle"), (w, "end")] {
        let x = LABEL_W + (off + w) as f64 * CELL + CELL / 2.0;
        let _ = write!(
            svg,
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"{anchor}\">{off}</text>\n",
            TOP + grid_h + 16.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes the SVG rendering to a file.
pub fn render_map(map: &SensitivityMap, path: &Path) -> Result<(), SensitivityError> {
    std::fs::write(path, render_map_svg(map)).map_err(|source| SensitivityError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
