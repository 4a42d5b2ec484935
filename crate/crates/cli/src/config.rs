//! Run configuration: a flat JSON file whose keys are all overridable by
//! command-line flags of the same name. Merge order is defaults, then the
//! config file, then flags.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use tempodyn::expectancy::ExpectancyConfig;
use tempodyn::regressor::{TrainingConfig, DEFAULT_HIDDEN};
use tempodyn::{FeatureSet, TargetKind};

/// Flat run configuration. Enumerations are held as their user-facing
/// strings so the manifest echoes exactly what was requested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus JSON path; required by every command except `synth`.
    pub corpus: String,
    /// One of `E`, `S`, `E+S`.
    pub feature_set: String,
    /// One of `bpr`, `bpr_d`, `vel`, `vel_d`, or `all` (compare only).
    pub target: String,
    pub folds: usize,
    pub seed: u64,
    /// Output directory for artifacts.
    pub out: String,
    /// Longest n-gram context of the expectancy models.
    pub max_order: usize,
    /// Also run incremental within-piece models.
    pub stm: bool,
    /// Entropy-weighting exponent for distribution combination.
    pub bias: f64,
    /// Internal cross-validation folds for viewpoint selection.
    pub selection_folds: usize,
    /// Minimum cross-entropy improvement (bits) to accept a viewpoint.
    pub selection_threshold: f64,
    /// Recurrent units per direction.
    pub hidden: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    /// Significance level of the feature-set comparison.
    pub alpha: f64,
    /// Also report metrics over all held-out onsets pooled together.
    pub pooled: bool,
    /// Half-window (past and future steps) of the sensitivity map.
    pub window: usize,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        let training = TrainingConfig::default();
        let expectancy = ExpectancyConfig::default();
        RunConfig {
            corpus: String::new(),
            feature_set: "E+S".to_string(),
            target: "bpr".to_string(),
            folds: 5,
            seed: 0,
            out: "out".to_string(),
            max_order: expectancy.max_order,
            stm: expectancy.stm,
            bias: expectancy.bias,
            selection_folds: expectancy.selection_folds,
            selection_threshold: expectancy.selection_threshold,
            hidden: DEFAULT_HIDDEN,
            learning_rate: training.learning_rate,
            max_epochs: training.max_epochs,
            patience: training.patience,
            validation_fraction: training.validation_fraction,
            alpha: 0.05,
            pooled: false,
            window: 5,
        }
    }
}

/// Command-line overrides; every key of [`RunConfig`] has a flag of the
/// same name.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON configuration file; flags override its keys.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Corpus JSON file.
    #[arg(long, value_name = "FILE")]
    pub corpus: Option<String>,
    /// Feature set: E, S, or E+S.
    #[arg(long, value_name = "SET")]
    pub feature_set: Option<String>,
    /// Expressive target: bpr, bpr_d, vel, vel_d (compare also takes `all`).
    #[arg(long, value_name = "kind")]
    pub target: Option<String>,
    /// Cross-validation folds (k >= 2).
    #[arg(long)]
    pub folds: Option<usize>,
    /// Run seed; all randomness derives from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, value_name = "DIR")]
    pub out: Option<String>,
    /// Longest n-gram context of the expectancy models.
    #[arg(long)]
    pub max_order: Option<usize>,
    /// Also run incremental within-piece models (true/false).
    #[arg(long, value_name = "BOOL")]
    pub stm: Option<bool>,
    /// Entropy-weighting exponent for distribution combination.
    #[arg(long)]
    pub bias: Option<f64>,
    /// Internal cross-validation folds for viewpoint selection.
    #[arg(long)]
    pub selection_folds: Option<usize>,
    /// Minimum cross-entropy improvement (bits) to accept a viewpoint.
    #[arg(long)]
    pub selection_threshold: Option<f64>,
    /// Recurrent units per direction.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Training epoch cap.
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Fraction of training pieces held out for early stopping.
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    /// Significance level of the feature-set comparison.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Also report metrics pooled over all held-out onsets (true/false).
    #[arg(long, value_name = "BOOL")]
    pub pooled: Option<bool>,
    /// Half-window (past and future steps) of the sensitivity map.
    #[arg(long)]
    pub window: Option<usize>,
}

/// The target column of a run: one expressive parameter, or all four.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetChoice {
    One(TargetKind),
    All,
}

/// A merged, parsed, and validated configuration.
#[derive(Debug, Clone)]
pub struct Resolved {
    /// Post-merge flat configuration, echoed into the manifest.
    pub config: RunConfig,
    /// Path of the config file actually read, for checksumming.
    pub config_path: Option<PathBuf>,
    pub feature_set: FeatureSet,
    pub target: TargetChoice,
    pub out: PathBuf,
    pub expectancy: ExpectancyConfig,
    pub training: TrainingConfig,
}

impl Resolved {
    pub fn corpus_path(&self) -> Result<PathBuf> {
        if self.config.corpus.is_empty() {
            bail!("no corpus given: set `corpus` in the config file or pass --corpus");
        }
        Ok(PathBuf::from(&self.config.corpus))
    }

    /// The single target of this run; `all` is only meaningful to `compare`.
    pub fn single_target(&self) -> Result<TargetKind> {
        match self.target {
            TargetChoice::One(t) => Ok(t),
            TargetChoice::All => bail!("target `all` is only valid for the compare command"),
        }
    }

    pub fn targets(&self) -> Vec<TargetKind> {
        match self.target {
            TargetChoice::One(t) => vec![t],
            TargetChoice::All => TargetKind::ALL.to_vec(),
        }
    }
}

fn merge(mut config: RunConfig, flags: &Overrides) -> RunConfig {
    macro_rules! take {
        ($field:ident) => {
            if let Some(v) = &flags.$field {
                config.$field = v.clone();
            }
        };
    }
    take!(corpus);
    take!(feature_set);
    take!(target);
    take!(folds);
    take!(seed);
    take!(out);
    take!(max_order);
    take!(stm);
    take!(bias);
    take!(selection_folds);
    take!(selection_threshold);
    take!(hidden);
    take!(learning_rate);
    take!(max_epochs);
    take!(patience);
    take!(validation_fraction);
    take!(alpha);
    take!(pooled);
    take!(window);
    config
}

/// Loads the config file named by the flags (when given), applies the flag
/// overrides, and validates the result. `allow_all_targets` admits the
/// `all` target value (the compare command).
pub fn resolve(flags: &Overrides, allow_all_targets: bool) -> Result<Resolved> {
    let mut config = RunConfig::default();
    if let Some(path) = &flags.config {
        let raw = fs::read(path)
            .with_context(|| format!("reading config file `{}`", path.display()))?;
        config = serde_json::from_slice(&raw)
            .with_context(|| format!("parsing config file `{}`", path.display()))?;
    }
    let config = merge(config, flags);

    let feature_set = FeatureSet::parse(&config.feature_set)
        .with_context(|| format!("unknown feature set `{}`: expected E, S, or E+S", config.feature_set))?;
    let target = if config.target == "all" {
        if !allow_all_targets {
            bail!("target `all` is only valid for the compare command");
        }
        TargetChoice::All
    } else {
        TargetChoice::One(TargetKind::parse(&config.target).with_context(|| {
            format!("unknown target `{}`: expected bpr, bpr_d, vel, or vel_d", config.target)
        })?)
    };
    if config.folds < 2 {
        bail!("folds must be >= 2, got {}", config.folds);
    }
    if config.out.is_empty() {
        bail!("output directory must be non-empty");
    }
    if config.hidden == 0 {
        bail!("hidden must be >= 1");
    }
    if config.window == 0 {
        bail!("window must be >= 1");
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        bail!("alpha must lie in (0, 1), got {}", config.alpha);
    }
    let training = TrainingConfig {
        learning_rate: config.learning_rate,
        max_epochs: config.max_epochs,
        patience: config.patience,
        validation_fraction: config.validation_fraction,
        seed: config.seed,
    };
    training.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
    let expectancy = ExpectancyConfig {
        max_order: config.max_order,
        bias: config.bias,
        stm: config.stm,
        selection_folds: config.selection_folds,
        selection_threshold: config.selection_threshold,
    };
    Ok(Resolved {
        out: PathBuf::from(&config.out),
        config_path: flags.config.clone(),
        config,
        feature_set,
        target,
        expectancy,
        training,
    })
}
