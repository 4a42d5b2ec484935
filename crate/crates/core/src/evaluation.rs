//! Cross-validated evaluation and feature-set comparison statistics.
//!
//! Pieces are split into k folds; for each fold the expectancy models and
//! the regressor are fitted on the training pieces only and scored on the
//! held-out pieces. Metrics (R², Pearson r) are computed per piece and
//! averaged. Feature sets are compared with a one-way ANOVA over the
//! per-piece R² values followed by Tukey-Kramer pairwise tests.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};
use thiserror::Error;

use crate::corpus::{group_by_onset, Corpus, Piece};
use crate::expectancy::{ExpectancyConfig, ExpectancyError, ExpectancyModels};
use crate::features::{concat_features, FeatureError, FeatureMatrix, FeatureSet};
use crate::mix_seed;
use crate::regressor::{init_regressor, train, Regressor, RegressorError, TrainingConfig, DEFAULT_HIDDEN};
use crate::score_features::{assemble_score_matrix, ScoreFeatureError};
use crate::targets::{compute_target, TargetError, TargetKind, TargetSeries};

const SEED_TAG_FOLDS: u64 = 0xf01d;
const SEED_TAG_INIT: u64 = 0x1417;

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("configuration error: {reason}")]
    Config { reason: String },
    #[error("undefined metric: {reason}")]
    UndefinedMetric { reason: String },
    #[error("groups are fully degenerate (no variance within or between)")]
    DegenerateGroups,
    #[error("target extraction failed for piece `{piece_id}`: {source}")]
    Target {
        piece_id: String,
        #[source]
        source: TargetError,
    },
    #[error(transparent)]
    Expectancy(#[from] ExpectancyError),
    #[error(transparent)]
    ScoreFeature(#[from] ScoreFeatureError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Regressor(#[from] RegressorError),
}

/// Assignment of every piece to exactly one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn test_ids(&self, fold: usize) -> Vec<String> {
        self.assignments.iter().filter(|(_, &f)| f == fold).map(|(id, _)| id.clone()).collect()
    }
}

/// Seeded shuffle followed by round-robin assignment, so fold sizes never
/// differ by more than one.
pub fn make_folds(piece_ids: &[String], k: usize, seed: u64) -> Result<FoldPlan, EvaluationError> {
    if k < 2 {
        return Err(EvaluationError::Config { reason: "fold count must be at least 2".to_string() });
    }
    if k > piece_ids.len() {
        return Err(EvaluationError::Config {
            reason: format!("fold count {k} exceeds piece count {}", piece_ids.len()),
        });
    }
    let mut order: Vec<&String> = piece_ids.iter().collect();
    let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(seed, SEED_TAG_FOLDS));
    order.shuffle(&mut rng);
    let assignments =
        order.iter().enumerate().map(|(i, id)| ((*id).clone(), i % k)).collect::<BTreeMap<_, _>>();
    Ok(FoldPlan { k, seed, assignments })
}

/// Coefficient of determination 1 - SSE/SST. Errors when the target is
/// constant (SST = 0).
pub fn r_squared(pred: &[f64], target: &[f64]) -> Result<f64, EvaluationError> {
    check_series_pair(pred, target)?;
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let sst: f64 = target.iter().map(|y| (y - mean) * (y - mean)).sum();
    if sst == 0.0 {
        return Err(EvaluationError::UndefinedMetric { reason: "target series is constant".to_string() });
    }
    let sse: f64 = pred.iter().zip(target).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(1.0 - sse / sst)
}

/// Sample Pearson correlation. Errors when either series is constant.
pub fn pearson_r(pred: &[f64], target: &[f64]) -> Result<f64, EvaluationError> {
    check_series_pair(pred, target)?;
    let n = pred.len() as f64;
    let mx = pred.iter().sum::<f64>() / n;
    let my = target.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in pred.iter().zip(target) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvaluationError::UndefinedMetric {
            reason: "correlation of a constant series is undefined".to_string(),
        });
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn check_series_pair(pred: &[f64], target: &[f64]) -> Result<(), EvaluationError> {
    if pred.len() != target.len() {
        return Err(EvaluationError::Config {
            reason: format!("series lengths differ: {} vs {}", pred.len(), target.len()),
        });
    }
    if pred.len() < 2 {
        return Err(EvaluationError::UndefinedMetric {
            reason: "metrics need at least 2 values".to_string(),
        });
    }
    Ok(())
}

/// Metrics for one held-out piece.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceEvaluation {
    pub piece_id: String,
    pub fold: usize,
    pub r_squared: f64,
    pub pearson_r: f64,
}

/// Cross-validation outcome for one feature set and target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub feature_set: FeatureSet,
    pub target: TargetKind,
    pub k: usize,
    pub seed: u64,
    pub rows: Vec<PieceEvaluation>,
    /// Arithmetic mean of the per-piece values.
    pub mean_r_squared: f64,
    pub mean_pearson_r: f64,
    /// Metrics over all held-out onsets concatenated, when requested.
    pub pooled_r_squared: Option<f64>,
    pub pooled_pearson_r: Option<f64>,
    pub warnings: Vec<String>,
}

/// Models fitted for one fold, kept for serialization and leakage checks.
#[derive(Debug, Clone)]
pub struct FoldModel {
    pub fold: usize,
    pub regressor: Regressor,
    pub expectancy: Option<ExpectancyModels>,
    pub test_piece_ids: Vec<String>,
}

fn features_for(
    feature_set: FeatureSet,
    expectancy: Option<&ExpectancyModels>,
    piece: &Piece,
) -> Result<FeatureMatrix, EvaluationError> {
    match feature_set {
        FeatureSet::Score => Ok(assemble_score_matrix(piece)?),
        FeatureSet::Expectancy => {
            let models = expectancy.expect("expectancy models fitted for E features");
            Ok(models.features(piece)?)
        }
        FeatureSet::Combined => {
            let models = expectancy.expect("expectancy models fitted for E+S features");
            let e = models.features(piece)?;
            let s = assemble_score_matrix(piece)?;
            Ok(concat_features(&e, &s)?)
        }
    }
}

/// Cross-validated evaluation returning the per-fold models as well.
/// `hidden` sizes each regressor direction (see [`DEFAULT_HIDDEN`]).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_cv_full(
    corpus: &Corpus,
    feature_set: FeatureSet,
    target: TargetKind,
    k: usize,
    seed: u64,
    hidden: usize,
    training: &TrainingConfig,
    expectancy_config: &ExpectancyConfig,
    pooled: bool,
) -> Result<(EvaluationReport, Vec<FoldModel>), EvaluationError> {
    let ids: Vec<String> = corpus.pieces.iter().map(|p| p.id.clone()).collect();
    let plan = make_folds(&ids, k, seed)?;
    let mut targets: BTreeMap<&str, TargetSeries> = BTreeMap::new();
    for piece in &corpus.pieces {
        let series = compute_target(&group_by_onset(piece), &piece.id, target)
            .map_err(|source| EvaluationError::Target { piece_id: piece.id.clone(), source })?;
        targets.insert(piece.id.as_str(), series);
    }

    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    let mut fold_models = Vec::new();
    let mut pooled_pred = Vec::new();
    let mut pooled_target = Vec::new();
    for fold in 0..k {
        let train_pieces: Vec<Piece> = corpus
            .pieces
            .iter()
            .filter(|p| plan.assignments[&p.id] != fold)
            .cloned()
            .collect();
        let test_pieces: Vec<&Piece> =
            corpus.pieces.iter().filter(|p| plan.assignments[&p.id] == fold).collect();
        let expectancy = if feature_set == FeatureSet::Score {
            None
        } else {
            Some(ExpectancyModels::train(&train_pieces, expectancy_config)?)
        };
        let train_data: Vec<(FeatureMatrix, TargetSeries)> = train_pieces
            .iter()
            .map(|p| {
                features_for(feature_set, expectancy.as_ref(), p)
                    .map(|f| (f, targets[p.id.as_str()].clone()))
            })
            .collect::<Result<_, _>>()?;
        let input_dim = feature_set.columns().len();
        let init = init_regressor(
            input_dim,
            hidden,
            mix_seed(mix_seed(seed, SEED_TAG_INIT), fold as u64),
        )?;
        let fold_config = TrainingConfig { seed: mix_seed(training.seed, fold as u64), ..training.clone() };
        let (trained, _) = train(init, &train_data, &fold_config)?;

        for piece in &test_pieces {
            let matrix = features_for(feature_set, expectancy.as_ref(), piece)?;
            let preds = trained.forward(&matrix)?;
            let y = &targets[piece.id.as_str()].values;
            pooled_pred.extend_from_slice(&preds);
            pooled_target.extend_from_slice(y);
            match (r_squared(&preds, y), pearson_r(&preds, y)) {
                (Ok(r2), Ok(r)) => rows.push(PieceEvaluation {
                    piece_id: piece.id.clone(),
                    fold,
                    r_squared: r2,
                    pearson_r: r,
                }),
                (Err(e), _) | (_, Err(e)) => {
                    warnings.push(format!("piece `{}` excluded from averages: {e}", piece.id));
                }
            }
        }
        fold_models.push(FoldModel {
            fold,
            regressor: trained,
            expectancy,
            test_piece_ids: test_pieces.iter().map(|p| p.id.clone()).collect(),
        });
    }
    if rows.is_empty() {
        return Err(EvaluationError::UndefinedMetric {
            reason: "every piece was excluded from evaluation".to_string(),
        });
    }
    let mean_r_squared = rows.iter().map(|r| r.r_squared).sum::<f64>() / rows.len() as f64;
    let mean_pearson_r = rows.iter().map(|r| r.pearson_r).sum::<f64>() / rows.len() as f64;
    let (pooled_r_squared, pooled_pearson_r) = if pooled {
        let r2 = r_squared(&pooled_pred, &pooled_target);
        let r = pearson_r(&pooled_pred, &pooled_target);
        if let Err(e) = &r2 {
            warnings.push(format!("pooled metrics unavailable: {e}"));
        }
        (r2.ok(), r.ok())
    } else {
        (None, None)
    };
    let report = EvaluationReport {
        feature_set,
        target,
        k,
        seed,
        rows,
        mean_r_squared,
        mean_pearson_r,
        pooled_r_squared,
        pooled_pearson_r,
        warnings,
    };
    Ok((report, fold_models))
}

/// Cross-validated evaluation with per-piece averaging.
pub fn evaluate_cv(
    corpus: &Corpus,
    feature_set: FeatureSet,
    target: TargetKind,
    k: usize,
    seed: u64,
    training: &TrainingConfig,
) -> Result<EvaluationReport, EvaluationError> {
    evaluate_cv_full(
        corpus,
        feature_set,
        target,
        k,
        seed,
        DEFAULT_HIDDEN,
        training,
        &ExpectancyConfig::default(),
        false,
    )
        .map(|(report, _)| report)
}

/// One-way ANOVA outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub p_value: f64,
}

/// One Tukey-Kramer pairwise comparison (group indices into the input).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TukeyPair {
    pub group_a: usize,
    pub group_b: usize,
    pub mean_difference: f64,
    pub q: f64,
    pub critical_q: f64,
    pub significant: bool,
}

/// ANOVA plus post-hoc pairwise comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatTestResult {
    pub anova: AnovaResult,
    pub alpha: f64,
    pub tukey: Vec<TukeyPair>,
}

struct GroupSummary {
    n: Vec<usize>,
    mean: Vec<f64>,
    ss_between: f64,
    ss_within: f64,
    df_between: usize,
    df_within: usize,
}

fn summarize_groups(groups: &[Vec<f64>]) -> Result<GroupSummary, EvaluationError> {
    if groups.len() < 2 {
        return Err(EvaluationError::Config { reason: "need at least 2 groups".to_string() });
    }
    if groups.iter().any(|g| g.len() < 2) {
        return Err(EvaluationError::Config { reason: "every group needs at least 2 values".to_string() });
    }
    let n: Vec<usize> = groups.iter().map(Vec::len).collect();
    let total: usize = n.iter().sum();
    let mean: Vec<f64> = groups.iter().map(|g| g.iter().sum::<f64>() / g.len() as f64).collect();
    let grand = groups.iter().flatten().sum::<f64>() / total as f64;
    let ss_between: f64 =
        mean.iter().zip(&n).map(|(m, &ni)| ni as f64 * (m - grand) * (m - grand)).sum();
    let ss_within: f64 = groups
        .iter()
        .zip(&mean)
        .map(|(g, m)| g.iter().map(|v| (v - m) * (v - m)).sum::<f64>())
        .sum();
    Ok(GroupSummary {
        n,
        mean,
        ss_between,
        ss_within,
        df_between: groups.len() - 1,
        df_within: total - groups.len(),
    })
}

/// Standard one-way ANOVA with the p-value from the F distribution.
pub fn anova_oneway(groups: &[Vec<f64>]) -> Result<AnovaResult, EvaluationError> {
    let s = summarize_groups(groups)?;
    if s.ss_within == 0.0 && s.ss_between == 0.0 {
        return Err(EvaluationError::DegenerateGroups);
    }
    let ms_between = s.ss_between / s.df_between as f64;
    let ms_within = s.ss_within / s.df_within as f64;
    let (f, p_value) = if ms_within == 0.0 {
        (f64::INFINITY, 0.0)
    } else {
        let f = ms_between / ms_within;
        let dist = FisherSnedecor::new(s.df_between as f64, s.df_within as f64)
            .expect("positive degrees of freedom");
        (f, dist.sf(f))
    };
    Ok(AnovaResult { f, df_between: s.df_between, df_within: s.df_within, p_value })
}

// Upper 5% points of the studentized range q(k, df), for k = 2..=5 groups.
// Source: Pearson & Hartley, Biometrika Tables for Statisticians, vol. 1,
// table 29. Rows follow Q_DF; entries between tabulated df are
// interpolated linearly in 1/df.
const Q_DF: [f64; 26] = [
    1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0, 17.0,
    18.0, 19.0, 20.0, 24.0, 30.0, 40.0, 60.0, 120.0, f64::INFINITY,
];
const Q_CRIT_05: [[f64; 26]; 4] = [
    [
        17.97, 6.08, 4.50, 3.93, 3.64, 3.46, 3.34, 3.26, 3.20, 3.15, 3.11, 3.08, 3.06, 3.03, 3.01,
        3.00, 2.98, 2.97, 2.96, 2.95, 2.92, 2.89, 2.86, 2.83, 2.80, 2.77,
    ],
    [
        26.98, 8.33, 5.91, 5.04, 4.60, 4.34, 4.16, 4.04, 3.95, 3.88, 3.82, 3.77, 3.73, 3.70, 3.67,
        3.65, 3.63, 3.61, 3.59, 3.58, 3.53, 3.49, 3.44, 3.40, 3.36, 3.31,
    ],
    [
        32.82, 9.80, 6.82, 5.76, 5.22, 4.90, 4.68, 4.53, 4.41, 4.33, 4.26, 4.20, 4.15, 4.11, 4.08,
        4.05, 4.02, 4.00, 3.98, 3.96, 3.90, 3.85, 3.79, 3.74, 3.68, 3.63,
    ],
    [
        37.08, 10.88, 7.50, 6.29, 5.67, 5.30, 5.06, 4.89, 4.76, 4.65, 4.57, 4.51, 4.45, 4.41,
        4.37, 4.33, 4.30, 4.28, 4.25, 4.23, 4.17, 4.10, 4.04, 3.98, 3.92, 3.86,
    ],
];
const Q_MAX_DF: usize = 200;

/// Critical studentized-range value at alpha = 0.05.
fn critical_q(n_groups: usize, df_within: usize) -> Result<f64, EvaluationError> {
    if !(2..=5).contains(&n_groups) {
        return Err(EvaluationError::Config {
            reason: format!("critical values available for 2-5 groups, got {n_groups}"),
        });
    }
    if df_within == 0 || df_within > Q_MAX_DF {
        return Err(EvaluationError::Config {
            reason: format!("critical values available for 1-{Q_MAX_DF} within-group df, got {df_within}"),
        });
    }
    let row = &Q_CRIT_05[n_groups - 2];
    let df = df_within as f64;
    let pos = Q_DF.iter().position(|&d| d >= df).expect("df below table maximum");
    if Q_DF[pos] == df {
        return Ok(row[pos]);
    }
    let (df_lo, q_lo) = (Q_DF[pos - 1], row[pos - 1]);
    let (df_hi, q_hi) = (Q_DF[pos], row[pos]);
    let x = 1.0 / df;
    let x_lo = 1.0 / df_lo;
    let x_hi = if df_hi.is_infinite() { 0.0 } else { 1.0 / df_hi };
    Ok(q_hi + (q_lo - q_hi) * (x - x_hi) / (x_lo - x_hi))
}

/// Tukey-Kramer pairwise comparisons at the given alpha (0.05 only, the
/// embedded critical-value table has no other levels).
pub fn tukey_hsd(groups: &[Vec<f64>], alpha: f64) -> Result<Vec<TukeyPair>, EvaluationError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(EvaluationError::Config { reason: "alpha must lie in (0,1)".to_string() });
    }
    if (alpha - 0.05).abs() > 1e-12 {
        return Err(EvaluationError::Config {
            reason: "embedded critical-value table covers alpha = 0.05 only".to_string(),
        });
    }
    let s = summarize_groups(groups)?;
    if s.ss_within == 0.0 && s.ss_between == 0.0 {
        return Err(EvaluationError::DegenerateGroups);
    }
    let q_crit = critical_q(groups.len(), s.df_within)?;
    let ms_within = s.ss_within / s.df_within as f64;
    let mut pairs = Vec::new();
    for a in 0..groups.len() {
        for b in a + 1..groups.len() {
            let diff = s.mean[a] - s.mean[b];
            let se = (ms_within / 2.0 * (1.0 / s.n[a] as f64 + 1.0 / s.n[b] as f64)).sqrt();
            let q = if diff == 0.0 {
                0.0
            } else if se == 0.0 {
                f64::INFINITY
            } else {
                diff.abs() / se
            };
            pairs.push(TukeyPair {
                group_a: a,
                group_b: b,
                mean_difference: diff,
                q,
                critical_q: q_crit,
                significant: q > q_crit,
            });
        }
    }
    Ok(pairs)
}

/// ANOVA and Tukey-Kramer in one result.
pub fn compare_groups(groups: &[Vec<f64>], alpha: f64) -> Result<StatTestResult, EvaluationError> {
    let anova = anova_oneway(groups)?;
    let tukey = tukey_hsd(groups, alpha)?;
    Ok(StatTestResult { anova, alpha, tukey })
}

/// Full feature-set comparison for one target: cross-validated reports for
/// E, S, and E+S, then ANOVA/Tukey over their per-piece R² values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub target: TargetKind,
    pub reports: Vec<EvaluationReport>,
    pub stats: StatTestResult,
}

#[allow(clippy::too_many_arguments)]
pub fn compare_feature_sets(
    corpus: &Corpus,
    target: TargetKind,
    k: usize,
    seed: u64,
    hidden: usize,
    training: &TrainingConfig,
    expectancy_config: &ExpectancyConfig,
    alpha: f64,
    pooled: bool,
) -> Result<ComparisonReport, EvaluationError> {
    let mut reports = Vec::new();
    for fs in FeatureSet::ALL {
        let (report, _) = evaluate_cv_full(
            corpus,
            fs,
            target,
            k,
            seed,
            hidden,
            training,
            expectancy_config,
            pooled,
        )?;
        reports.push(report);
    }
    let groups: Vec<Vec<f64>> =
        reports.iter().map(|r| r.rows.iter().map(|row| row.r_squared).collect()).collect();
    let stats = compare_groups(&groups, alpha)?;
    Ok(ComparisonReport { target, reports, stats })
}
