//! Subcommand implementations. Every command resolves its configuration,
//! reads inputs, writes artifacts through a single [`OutDir`] writer, and
//! finishes with a reproducibility manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;

use tempodyn::corpus::{canonicalize_piece, group_by_onset, parse_corpus, Corpus, Diagnostic, Severity};
use tempodyn::evaluation::{compare_feature_sets, evaluate_cv_full, ComparisonReport, EvaluationReport};
use tempodyn::expectancy::ExpectancyModels;
use tempodyn::features::{concat_features, FeatureMatrix, FeatureSet};
use tempodyn::mix_seed;
use tempodyn::regressor::{init_regressor, train, EpochLoss, Regressor, RegressorBundle, MODEL_FILE_VERSION};
use tempodyn::score_features::assemble_score_matrix;
use tempodyn::sensitivity::{render_map_svg, sensitivity_map};
use tempodyn::synth::{generate_corpus, SynthConfig, SynthRule};
use tempodyn::targets::{compute_target, TargetKind};

use crate::artifacts::{Manifest, OutDir};
use crate::config::{resolve, Overrides, Resolved, RunConfig};

/// Seed tag of the whole-corpus model, distinct from the per-fold tags
/// used inside the evaluation protocol.
const SEED_TAG_FULL_MODEL: u64 = 0xf111;

struct LoadedCorpus {
    path: PathBuf,
    bytes: Vec<u8>,
    corpus: Corpus,
}

fn load_corpus(resolved: &Resolved) -> Result<LoadedCorpus> {
    let path = resolved.corpus_path()?;
    let bytes =
        fs::read(&path).with_context(|| format!("reading corpus `{}`", path.display()))?;
    let corpus = parse_corpus(&bytes).with_context(|| format!("corpus `{}`", path.display()))?;
    if corpus.pieces.is_empty() {
        bail!("corpus `{}` has no pieces", path.display());
    }
    let mut ids: Vec<&str> = corpus.pieces.iter().map(|p| p.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        bail!("corpus `{}` has duplicate piece id `{}`", path.display(), w[0]);
    }
    Ok(LoadedCorpus { path, bytes, corpus })
}

/// Opens the output directory with the input paths protected from
/// overwrites, and starts the manifest with their checksums.
fn open_out(
    command: &str,
    resolved: &Resolved,
    loaded: Option<&LoadedCorpus>,
) -> Result<(OutDir, Manifest)> {
    let mut protected = Vec::new();
    if let Some(l) = loaded {
        protected.push(l.path.clone());
    }
    if let Some(c) = &resolved.config_path {
        protected.push(c.clone());
    }
    let refs: Vec<&std::path::Path> = protected.iter().map(|p| p.as_path()).collect();
    let out = OutDir::create(&resolved.out, &refs)?;
    let mut manifest = Manifest::new(command, &resolved.config);
    if let Some(l) = loaded {
        manifest.add_input(&l.path, &l.bytes);
    }
    if let Some(c) = &resolved.config_path {
        let raw = fs::read(c).with_context(|| format!("reading config file `{}`", c.display()))?;
        manifest.add_input(c, &raw);
    }
    Ok((out, manifest))
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Feature matrix of one piece under the given set; expectancy models are
/// required for E and E+S.
fn features_matrix(
    set: FeatureSet,
    expectancy: Option<&ExpectancyModels>,
    piece: &tempodyn::Piece,
) -> Result<FeatureMatrix> {
    Ok(match set {
        FeatureSet::Score => assemble_score_matrix(piece)?,
        FeatureSet::Expectancy => {
            expectancy.expect("expectancy models trained for set E").features(piece)?
        }
        FeatureSet::Combined => {
            let models = expectancy.expect("expectancy models trained for set E+S");
            let e = models.features(piece)?;
            let s = assemble_score_matrix(piece)?;
            concat_features(&e, &s)?
        }
    })
}

// ---------------------------------------------------------------- validate

pub fn run_validate(flags: &Overrides) -> Result<u8> {
    let resolved = resolve(flags, false)?;
    let path = resolved.corpus_path()?;
    let bytes =
        fs::read(&path).with_context(|| format!("reading corpus `{}`", path.display()))?;
    // Lenient load: structural JSON errors still abort, but invariant
    // violations become printable diagnostics instead of a failed parse.
    let mut corpus: Corpus = serde_json::from_slice(&bytes)
        .with_context(|| format!("corpus `{}` is not valid JSON for this schema", path.display()))?;

    let mut diagnostics: Vec<Diagnostic> = Vec::new();
    let mut ids: Vec<&str> = Vec::new();
    for piece in &mut corpus.pieces {
        canonicalize_piece(piece);
        diagnostics.extend(tempodyn::corpus::validate_piece(piece));
        ids.push(piece.id.as_str());
    }
    ids.sort_unstable();
    for w in ids.windows(2) {
        if w[0] == w[1] {
            diagnostics.push(Diagnostic {
                piece_id: w[0].to_string(),
                severity: Severity::Error,
                message: "duplicate piece id".to_string(),
            });
        }
    }

    for d in &diagnostics {
        let tag = match d.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        println!("{tag} {}: {}", d.piece_id, d.message);
    }
    let errors = diagnostics.iter().filter(|d| d.severity == Severity::Error).count();
    let warnings = diagnostics.len() - errors;
    println!(
        "validated {} piece(s): {errors} error(s), {warnings} warning(s)",
        corpus.pieces.len()
    );

    #[derive(Serialize)]
    struct ValidationReport<'a> {
        pieces: usize,
        errors: usize,
        warnings: usize,
        diagnostics: &'a [Diagnostic],
    }
    let loaded = LoadedCorpus { path, bytes, corpus };
    let (out, manifest) = open_out("validate", &resolved, Some(&loaded))?;
    out.write_json(
        "validate.json",
        &ValidationReport {
            pieces: loaded.corpus.pieces.len(),
            errors,
            warnings,
            diagnostics: &diagnostics,
        },
    )?;
    out.write_json("manifest.json", &manifest)?;
    Ok(if errors > 0 { 2 } else { 0 })
}

// ----------------------------------------------------------------- targets

pub fn run_targets(flags: &Overrides) -> Result<()> {
    let resolved = resolve(flags, false)?;
    let target = resolved.single_target()?;
    let loaded = load_corpus(&resolved)?;
    let (out, manifest) = open_out("targets", &resolved, Some(&loaded))?;

    let mut csv = format!("piece_id,index,{target}\n");
    for piece in &loaded.corpus.pieces {
        let series = compute_target(&group_by_onset(piece), &piece.id, target)
            .with_context(|| format!("piece `{}`", piece.id))?;
        for (i, v) in series.values.iter().enumerate() {
            writeln!(csv, "{},{i},{v}", csv_field(&piece.id)).unwrap();
        }
    }
    out.write(&format!("targets_{target}.csv"), csv.as_bytes())?;
    out.write_json("manifest.json", &manifest)?;
    Ok(())
}

// ---------------------------------------------------------------- features

pub fn run_features(flags: &Overrides, force_expectancy: bool) -> Result<()> {
    let mut flags = flags.clone();
    if force_expectancy {
        match flags.feature_set.as_deref() {
            None => flags.feature_set = Some("E".to_string()),
            Some("E") => {}
            Some(other) => bail!("the expectancy command implies feature set E, got `{other}`"),
        }
    }
    let resolved = resolve(&flags, false)?;
    let loaded = load_corpus(&resolved)?;
    let command = if force_expectancy { "expectancy" } else { "features" };
    let (out, manifest) = open_out(command, &resolved, Some(&loaded))?;

    let set = resolved.feature_set;
    let expectancy = if set == FeatureSet::Score {
        None
    } else {
        Some(ExpectancyModels::train(&loaded.corpus.pieces, &resolved.expectancy)?)
    };
    let mut csv = String::from("piece_id,row");
    for col in set.columns() {
        csv.push(',');
        csv.push_str(&col);
    }
    csv.push('\n');
    for piece in &loaded.corpus.pieces {
        let matrix = features_matrix(set, expectancy.as_ref(), piece)
            .with_context(|| format!("piece `{}`", piece.id))?;
        for (i, row) in matrix.rows.iter().enumerate() {
            write!(csv, "{},{i}", csv_field(&piece.id)).unwrap();
            for v in row {
                write!(csv, ",{v}").unwrap();
            }
            csv.push('\n');
        }
    }
    out.write(&format!("features_{}.csv", set.name()), csv.as_bytes())?;
    out.write_json("manifest.json", &manifest)?;
    Ok(())
}

// ------------------------------------------------------------------- train

/// One model fitted on the whole corpus, with everything needed to apply it.
#[derive(Serialize)]
struct FullModelFile<'a> {
    bundle: RegressorBundle,
    #[serde(skip_serializing_if = "Option::is_none")]
    expectancy: Option<&'a ExpectancyModels>,
}

/// Trains expectancy models (when the set needs them) and the regressor on
/// every piece of the corpus. Returns the per-piece feature matrices too,
/// in corpus order, for the sensitivity command.
fn fit_full_model(
    corpus: &Corpus,
    resolved: &Resolved,
    target: TargetKind,
) -> Result<(Regressor, Option<ExpectancyModels>, Vec<EpochLoss>, Vec<FeatureMatrix>)> {
    let set = resolved.feature_set;
    let expectancy = if set == FeatureSet::Score {
        None
    } else {
        Some(ExpectancyModels::train(&corpus.pieces, &resolved.expectancy)?)
    };
    let mut data = Vec::new();
    for piece in &corpus.pieces {
        let matrix = features_matrix(set, expectancy.as_ref(), piece)
            .with_context(|| format!("piece `{}`", piece.id))?;
        let series = compute_target(&group_by_onset(piece), &piece.id, target)
            .with_context(|| format!("piece `{}`", piece.id))?;
        data.push((matrix, series));
    }
    let init = init_regressor(
        set.columns().len(),
        resolved.config.hidden,
        mix_seed(resolved.config.seed, SEED_TAG_FULL_MODEL),
    )?;
    let (model, losses) = train(init, &data, &resolved.training)?;
    let matrices = data.into_iter().map(|(m, _)| m).collect();
    Ok((model, expectancy, losses, matrices))
}

pub fn run_train(flags: &Overrides) -> Result<()> {
    let resolved = resolve(flags, false)?;
    let target = resolved.single_target()?;
    let loaded = load_corpus(&resolved)?;
    let (out, manifest) = open_out("train", &resolved, Some(&loaded))?;

    let (model, expectancy, losses, _) = fit_full_model(&loaded.corpus, &resolved, target)?;
    let final_loss = losses.last().map(|l| l.train_loss).unwrap_or(f64::NAN);
    println!(
        "trained {} -> {target} on {} piece(s), {} epoch(s), final training loss {final_loss}",
        resolved.feature_set,
        loaded.corpus.pieces.len(),
        losses.len()
    );

    let mut csv = String::from("epoch,train_loss,val_loss\n");
    for l in &losses {
        match l.val_loss {
            Some(v) => writeln!(csv, "{},{},{v}", l.epoch, l.train_loss).unwrap(),
            None => writeln!(csv, "{},{},", l.epoch, l.train_loss).unwrap(),
        }
    }
    out.write("losses.csv", csv.as_bytes())?;
    out.write_json(
        "model_full.json",
        &FullModelFile {
            bundle: RegressorBundle {
                version: MODEL_FILE_VERSION,
                feature_set: resolved.feature_set,
                target,
                training: resolved.training.clone(),
                regressor: model,
            },
            expectancy: expectancy.as_ref(),
        },
    )?;
    out.write_json("manifest.json", &manifest)?;
    Ok(())
}

// ---------------------------------------------------------------- evaluate

/// Models fitted for one fold of the protocol.
#[derive(Serialize)]
struct FoldModelFile<'a> {
    fold: usize,
    test_piece_ids: &'a [String],
    bundle: RegressorBundle,
    #[serde(skip_serializing_if = "Option::is_none")]
    expectancy: Option<&'a ExpectancyModels>,
}

/// Mean-metric table: one row per feature set, one R²/r column pair per
/// target present in the reports.
fn table1_csv(reports: &[&EvaluationReport]) -> String {
    let targets: Vec<TargetKind> = TargetKind::ALL
        .into_iter()
        .filter(|t| reports.iter().any(|r| r.target == *t))
        .collect();
    let sets: Vec<FeatureSet> = FeatureSet::ALL
        .into_iter()
        .filter(|s| reports.iter().any(|r| r.feature_set == *s))
        .collect();
    let mut csv = String::from("feature_set");
    for t in &targets {
        write!(csv, ",r2_{t},r_{t}").unwrap();
    }
    csv.push('\n');
    for s in &sets {
        csv.push_str(s.name());
        for t in &targets {
            match reports.iter().find(|r| r.feature_set == *s && r.target == *t) {
                Some(r) => write!(csv, ",{},{}", r.mean_r_squared, r.mean_pearson_r).unwrap(),
                None => csv.push_str(",,"),
            }
        }
        csv.push('\n');
    }
    csv
}

pub fn run_evaluate(flags: &Overrides) -> Result<()> {
    let resolved = resolve(flags, false)?;
    let target = resolved.single_target()?;
    let loaded = load_corpus(&resolved)?;
    let (out, manifest) = open_out("evaluate", &resolved, Some(&loaded))?;

    let (report, models) = evaluate_cv_full(
        &loaded.corpus,
        resolved.feature_set,
        target,
        resolved.config.folds,
        resolved.config.seed,
        resolved.config.hidden,
        &resolved.training,
        &resolved.expectancy,
        resolved.config.pooled,
    )?;
    println!(
        "evaluated {} -> {target}: mean R^2 {} / mean r {} over {} piece(s), k = {}",
        resolved.feature_set,
        report.mean_r_squared,
        report.mean_pearson_r,
        report.rows.len(),
        report.k
    );
    for w in &report.warnings {
        println!("warning: {w}");
    }

    out.write_json("report.json", &report)?;
    out.write("table1.csv", table1_csv(&[&report]).as_bytes())?;
    for fm in &models {
        out.write_json(
            &format!("model_{}.json", fm.fold),
            &FoldModelFile {
                fold: fm.fold,
                test_piece_ids: &fm.test_piece_ids,
                bundle: RegressorBundle {
                    version: MODEL_FILE_VERSION,
                    feature_set: resolved.feature_set,
                    target,
                    training: resolved.training.clone(),
                    regressor: fm.regressor.clone(),
                },
                expectancy: fm.expectancy.as_ref(),
            },
        )?;
    }
    out.write_json("manifest.json", &manifest)?;
    Ok(())
}

// ----------------------------------------------------------------- compare

pub fn run_compare(flags: &Overrides) -> Result<()> {
    let resolved = resolve(flags, true)?;
    let loaded = load_corpus(&resolved)?;
    let (out, manifest) = open_out("compare", &resolved, Some(&loaded))?;

    let mut comparisons: Vec<ComparisonReport> = Vec::new();
    for target in resolved.targets() {
        let comparison = compare_feature_sets(
            &loaded.corpus,
            target,
            resolved.config.folds,
            resolved.config.seed,
            resolved.config.hidden,
            &resolved.training,
            &resolved.expectancy,
            resolved.config.alpha,
            resolved.config.pooled,
        )?;
        let anova = &comparison.stats.anova;
        println!(
            "compared feature sets on {target}: F({}, {}) = {}, p = {}",
            anova.df_between, anova.df_within, anova.f, anova.p_value
        );
        for pair in &comparison.stats.tukey {
            let a = comparison.reports[pair.group_a].feature_set;
            let b = comparison.reports[pair.group_b].feature_set;
            let verdict = if pair.significant { "significant" } else { "not significant" };
            println!("  {a} vs {b}: q = {}, {verdict}", pair.q);
        }
        comparisons.push(comparison);
    }

    let all_reports: Vec<&EvaluationReport> =
        comparisons.iter().flat_map(|c| c.reports.iter()).collect();
    let stats: std::collections::BTreeMap<String, &tempodyn::evaluation::StatTestResult> =
        comparisons.iter().map(|c| (c.target.to_string(), &c.stats)).collect();
    out.write_json("report.json", &comparisons)?;
    out.write("table1.csv", table1_csv(&all_reports).as_bytes())?;
    out.write_json("stats.json", &stats)?;
    out.write_json("manifest.json", &manifest)?;
    Ok(())
}

// ------------------------------------------------------------- sensitivity

pub fn run_sensitivity(flags: &Overrides) -> Result<()> {
    let resolved = resolve(flags, false)?;
    let target = resolved.single_target()?;
    let loaded = load_corpus(&resolved)?;
    let (out, manifest) = open_out("sensitivity", &resolved, Some(&loaded))?;

    let (model, _, _, matrices) = fit_full_model(&loaded.corpus, &resolved, target)?;
    let refs: Vec<&FeatureMatrix> = matrices.iter().collect();
    let map = sensitivity_map(&model, &refs, resolved.config.window)?;
    println!(
        "sensitivity of {} -> {target}: {} feature(s) x {} offset(s)",
        resolved.feature_set,
        map.feature_names.len(),
        map.n_offsets()
    );

    out.write(&format!("sensitivity_{target}.csv"), map.to_csv().as_bytes())?;
    out.write(&format!("sensitivity_{target}.svg"), render_map_svg(&map).as_bytes())?;
    out.write_json("manifest.json", &manifest)?;
    Ok(())
}

// ------------------------------------------------------------------- synth

/// Parameters of the deterministic corpus generator.
#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Generation rule: vel-linear or ic-monotone.
    #[arg(long, value_name = "RULE")]
    pub rule: String,
    /// Number of pieces.
    #[arg(long, default_value_t = 20)]
    pub pieces: usize,
    /// Minimum onsets per piece.
    #[arg(long, default_value_t = 60)]
    pub min_onsets: usize,
    /// Maximum onsets per piece (inclusive).
    #[arg(long, default_value_t = 120)]
    pub max_onsets: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; the corpus is written as corpus.json inside it.
    #[arg(long, default_value = "out")]
    pub out: String,
}

pub fn run_synth(args: &SynthArgs) -> Result<()> {
    let rule = SynthRule::parse(&args.rule)
        .with_context(|| format!("unknown rule `{}`: expected vel-linear or ic-monotone", args.rule))?;
    let synth = SynthConfig {
        rule,
        n_pieces: args.pieces,
        min_onsets: args.min_onsets,
        max_onsets: args.max_onsets,
        seed: args.seed,
    };
    let corpus = generate_corpus(&synth)?;
    println!("generated {} piece(s) with rule {}", corpus.pieces.len(), rule.name());

    let echo = RunConfig {
        seed: args.seed,
        out: args.out.clone(),
        ..RunConfig::default()
    };
    let out = OutDir::create(std::path::Path::new(&args.out), &[])?;
    let mut manifest = Manifest::new("synth", &echo);
    manifest.synth = Some(synth);
    out.write_json("corpus.json", &corpus)?;
    out.write_json("manifest.json", &manifest)?;
    Ok(())
}
