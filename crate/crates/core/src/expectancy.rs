//! Multiple-viewpoint expectancy features.
//!
//! A bounded-order n-gram model with escape smoothing predicts each melody
//! note from its context under one or more viewpoints (pitch, pitch
//! interval, contour); the information content and entropy of the combined
//! per-event distribution become the melody features ic_m/h_m. A parallel
//! model over vertical-interval-class tuples yields the harmony features
//! ic_c/h_c. Viewpoints are chosen by forward stepwise selection under
//! internal cross-validation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{group_by_onset, Piece};
use crate::features::{FeatureMatrix, FeatureSet};
use crate::score_features::vic_classes;

/// Probabilities are floored at this value before logs are taken.
pub const PROB_FLOOR: f64 = 1e-12;

/// Relative entropies are floored here so combination weights stay finite.
const REL_ENTROPY_FLOOR: f64 = 1e-6;

/// One discrete event observed by a context model.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symbol {
    /// Chromatic pitch, pitch interval, or contour sign.
    Int(i64),
    /// Ascending vertical interval classes above the bass.
    Tuple(Vec<u8>),
    /// Derived-viewpoint value at position 0, where no context exists.
    Undef,
    /// Stand-in for harmony tuples absent from the training alphabet.
    Unseen,
}

/// An ordered sequence of symbols over one named alphabet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolSequence {
    pub alphabet_id: String,
    pub symbols: Vec<Symbol>,
}

#[derive(Debug, Error)]
pub enum ExpectancyError {
    #[error("piece `{piece_id}` has no melody notes")]
    EmptyMelody { piece_id: String },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("viewpoint selection needs at least 2 sequences, got {got}")]
    TooFewSequences { got: usize },
    #[error("viewpoint selection needs at least one candidate")]
    NoCandidates,
    #[error("degenerate training set: every sequence has fewer than 2 symbols")]
    DegenerateTraining,
    #[error("context model has an empty alphabet")]
    EmptyAlphabet,
    #[error("symbol {symbol:?} is outside the distribution's support")]
    Domain { symbol: Symbol },
    #[error("cannot combine distributions: {reason}")]
    Combination { reason: String },
    #[error("viewpoint configuration error: {reason}")]
    Configuration { reason: String },
    #[error(transparent)]
    Matrix(#[from] crate::features::FeatureError),
}

/// A melody viewpoint (or the harmony alphabet marker).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Viewpoint {
    Cpitch,
    Cpint,
    Contour,
    VicTuple,
}

impl Viewpoint {
    /// Candidate pool for melody viewpoint selection.
    pub const MELODY_CANDIDATES: [Viewpoint; 3] = [Viewpoint::Cpitch, Viewpoint::Cpint, Viewpoint::Contour];

    pub fn name(self) -> &'static str {
        match self {
            Viewpoint::Cpitch => "cpitch",
            Viewpoint::Cpint => "cpint",
            Viewpoint::Contour => "contour",
            Viewpoint::VicTuple => "vic_tuple",
        }
    }

    /// The derived symbol this viewpoint produces for `current` after
    /// `prev`. Derived viewpoints map position 0 (no predecessor) to Undef.
    fn derive_at(self, prev: Option<&Symbol>, current: &Symbol) -> Result<Symbol, ExpectancyError> {
        let pitch = |s: &Symbol| match *s {
            Symbol::Int(v) => Ok(v),
            ref other => Err(ExpectancyError::Configuration {
                reason: format!("melody viewpoint applied to non-pitch symbol {other:?}"),
            }),
        };
        match self {
            Viewpoint::Cpitch => Ok(current.clone()),
            Viewpoint::Cpint => Ok(match prev {
                None => Symbol::Undef,
                Some(p) => Symbol::Int(pitch(current)? - pitch(p)?),
            }),
            Viewpoint::Contour => Ok(match prev {
                None => Symbol::Undef,
                Some(p) => Symbol::Int((pitch(current)? - pitch(p)?).signum()),
            }),
            Viewpoint::VicTuple => Err(ExpectancyError::Configuration {
                reason: "vic_tuple is not a derivable melody viewpoint".to_string(),
            }),
        }
    }
}

/// Maps a basic pitch sequence through a viewpoint, position by position.
pub fn derive_viewpoint(seq: &SymbolSequence, vp: Viewpoint) -> Result<SymbolSequence, ExpectancyError> {
    let mut symbols = Vec::with_capacity(seq.symbols.len());
    for (i, s) in seq.symbols.iter().enumerate() {
        let prev = if i == 0 { None } else { Some(&seq.symbols[i - 1]) };
        symbols.push(vp.derive_at(prev, s)?);
    }
    Ok(SymbolSequence { alphabet_id: vp.name().to_string(), symbols })
}

/// Bounded-order n-gram counts over one alphabet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ContextModelRepr", into = "ContextModelRepr")]
pub struct ContextModel {
    pub max_order: usize,
    pub alphabet: BTreeSet<Symbol>,
    pub counts: BTreeMap<Vec<Symbol>, BTreeMap<Symbol, u64>>,
}

/// Serialization mirror: JSON objects cannot key on symbol lists.
#[derive(Serialize, Deserialize)]
struct ContextModelRepr {
    max_order: usize,
    alphabet: Vec<Symbol>,
    counts: Vec<(Vec<Symbol>, Vec<(Symbol, u64)>)>,
}

impl From<ContextModel> for ContextModelRepr {
    fn from(m: ContextModel) -> ContextModelRepr {
        ContextModelRepr {
            max_order: m.max_order,
            alphabet: m.alphabet.into_iter().collect(),
            counts: m
                .counts
                .into_iter()
                .map(|(ctx, table)| (ctx, table.into_iter().collect()))
                .collect(),
        }
    }
}

impl From<ContextModelRepr> for ContextModel {
    fn from(r: ContextModelRepr) -> ContextModel {
        ContextModel {
            max_order: r.max_order,
            alphabet: r.alphabet.into_iter().collect(),
            counts: r
                .counts
                .into_iter()
                .map(|(ctx, table)| (ctx, table.into_iter().collect()))
                .collect(),
        }
    }
}

impl ContextModel {
    /// An untrained model over a fixed alphabet; predictions fall through
    /// to the uniform base level until counts are observed.
    pub fn empty(max_order: usize, alphabet: BTreeSet<Symbol>) -> ContextModel {
        ContextModel { max_order, alphabet, counts: BTreeMap::new() }
    }

    /// Adds the n-grams ending at the last position of `prefix`. This is
    /// the incremental form of training used by the short-term mode.
    pub fn observe_last(&mut self, prefix: &[Symbol]) {
        let i = prefix.len() - 1;
        let sym = prefix[i].clone();
        for k in 0..=self.max_order.min(i) {
            let ctx = prefix[i - k..i].to_vec();
            *self.counts.entry(ctx).or_default().entry(sym.clone()).or_insert(0) += 1;
        }
    }
}

/// A discrete predictive distribution. After prediction the support equals
/// the model alphabet and the values sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    pub probs: BTreeMap<Symbol, f64>,
}

impl Distribution {
    pub fn prob(&self, s: &Symbol) -> f64 {
        self.probs.get(s).copied().unwrap_or(0.0)
    }
}

/// Counts all context/symbol pairs up to `max_order` across the training
/// sequences. The alphabet is the union of observed and declared symbols.
pub fn ppm_train(
    sequences: &[SymbolSequence],
    max_order: usize,
    declared: &[Symbol],
) -> Result<ContextModel, ExpectancyError> {
    if sequences.is_empty() {
        return Err(ExpectancyError::EmptyTrainingSet);
    }
    let mut alphabet: BTreeSet<Symbol> = declared.iter().cloned().collect();
    let mut counts: BTreeMap<Vec<Symbol>, BTreeMap<Symbol, u64>> = BTreeMap::new();
    for seq in sequences {
        for (i, sym) in seq.symbols.iter().enumerate() {
            alphabet.insert(sym.clone());
            for k in 0..=max_order.min(i) {
                let ctx = seq.symbols[i - k..i].to_vec();
                *counts.entry(ctx).or_default().entry(sym.clone()).or_insert(0) += 1;
            }
        }
    }
    Ok(ContextModel { max_order, alphabet, counts })
}

/// Predictive distribution for the next symbol after `context`.
///
/// Escape smoothing, method C with exclusion: starting at the longest
/// usable order, observed symbols get c/(n+d) of the remaining mass and
/// d/(n+d) escapes to the next shorter context, where n and d count only
/// symbols not already predicted at a longer order. Contexts that are
/// unseen, or whose symbols are all excluded, pass the mass through
/// unchanged. The base level is uniform over the not-yet-predicted
/// alphabet, and the result is normalized.
pub fn ppm_predict(model: &ContextModel, context: &[Symbol]) -> Result<Distribution, ExpectancyError> {
    ppm_predict_over(model, context, &model.alphabet)
}

/// `ppm_predict` with the base level ranging over `alphabet` instead of
/// the model's own. Derived-viewpoint prediction passes the symbols
/// reachable from the basic alphabet in the current context, so that
/// reachable-but-untrained events keep escape mass instead of hard zeros.
pub fn ppm_predict_over(
    model: &ContextModel,
    context: &[Symbol],
    alphabet: &BTreeSet<Symbol>,
) -> Result<Distribution, ExpectancyError> {
    if alphabet.is_empty() {
        return Err(ExpectancyError::EmptyAlphabet);
    }
    let start = context.len().min(model.max_order);
    let context = &context[context.len() - start..];
    let mut probs: BTreeMap<Symbol, f64> = BTreeMap::new();
    let mut excluded: BTreeSet<Symbol> = BTreeSet::new();
    let mut weight = 1.0;
    for k in (0..=start).rev() {
        let sub = &context[context.len() - k..];
        let Some(table) = model.counts.get(sub) else { continue };
        let entries: Vec<(&Symbol, u64)> =
            table.iter().filter(|(s, _)| !excluded.contains(*s)).map(|(s, &c)| (s, c)).collect();
        if entries.is_empty() {
            continue;
        }
        let n: u64 = entries.iter().map(|(_, c)| *c).sum();
        let d = entries.len() as f64;
        let denom = n as f64 + d;
        for (s, c) in &entries {
            probs.insert((*s).clone(), weight * *c as f64 / denom);
        }
        for (s, _) in entries {
            excluded.insert(s.clone());
        }
        weight *= d / denom;
    }
    let rest: Vec<&Symbol> = alphabet.iter().filter(|s| !excluded.contains(*s)).collect();
    if !rest.is_empty() {
        let u = weight / rest.len() as f64;
        for s in rest {
            probs.insert(s.clone(), u);
        }
    }
    let total: f64 = probs.values().sum();
    for p in probs.values_mut() {
        *p /= total;
    }
    Ok(Distribution { probs })
}

/// Information content of an observed symbol, in bits.
pub fn ic(dist: &Distribution, observed: &Symbol) -> Result<f64, ExpectancyError> {
    match dist.probs.get(observed) {
        Some(&p) => Ok(-(p.max(PROB_FLOOR)).log2()),
        None => Err(ExpectancyError::Domain { symbol: observed.clone() }),
    }
}

/// Information content with out-of-support symbols treated as probability
/// zero (floored), so novel test events stay finite instead of erroring.
fn ic_lenient(dist: &Distribution, observed: &Symbol) -> f64 {
    -(dist.prob(observed).max(PROB_FLOOR)).log2()
}

/// Shannon entropy in bits, with 0·log0 taken as 0.
pub fn entropy(dist: &Distribution) -> f64 {
    dist.probs.values().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum()
}

/// Maps a derived-viewpoint distribution back onto the basic alphabet:
/// every basic symbol inherits an equal share of its derived symbol's
/// mass, and the result is renormalized. If no basic symbol receives mass
/// (the context made every derived symbol unreachable) the result falls
/// back to uniform.
pub fn map_to_basic(
    dist: &Distribution,
    vp: Viewpoint,
    prev: Option<&Symbol>,
    basic_alphabet: &BTreeSet<Symbol>,
) -> Result<Distribution, ExpectancyError> {
    let mut groups: BTreeMap<Symbol, Vec<Symbol>> = BTreeMap::new();
    for b in basic_alphabet {
        groups.entry(vp.derive_at(prev, b)?).or_default().push(b.clone());
    }
    let mut probs: BTreeMap<Symbol, f64> = BTreeMap::new();
    for (derived, members) in &groups {
        let share = dist.prob(derived) / members.len() as f64;
        for b in members {
            probs.insert(b.clone(), share);
        }
    }
    let total: f64 = probs.values().sum();
    if total <= 0.0 {
        let u = 1.0 / basic_alphabet.len() as f64;
        for p in probs.values_mut() {
            *p = u;
        }
    } else {
        for p in probs.values_mut() {
            *p /= total;
        }
    }
    Ok(Distribution { probs })
}

/// Weighted geometric mean of distributions over one alphabet. Weights are
/// proportional to (H/H_max)^(-bias), so lower-entropy (more confident)
/// components dominate as the bias grows.
pub fn combine_distributions(dists: &[Distribution], bias: f64) -> Result<Distribution, ExpectancyError> {
    let Some(first) = dists.first() else {
        return Err(ExpectancyError::Combination { reason: "empty pool".to_string() });
    };
    for d in &dists[1..] {
        let same = d.probs.len() == first.probs.len()
            && d.probs.keys().zip(first.probs.keys()).all(|(a, b)| a == b);
        if !same {
            return Err(ExpectancyError::Combination { reason: "alphabets differ".to_string() });
        }
    }
    let size = first.probs.len();
    if size == 0 {
        return Err(ExpectancyError::Combination { reason: "empty support".to_string() });
    }
    let h_max = (size as f64).log2();
    if h_max <= 0.0 {
        return Ok(first.clone());
    }
    let mut weights: Vec<f64> =
        dists.iter().map(|d| ((entropy(d) / h_max).max(REL_ENTROPY_FLOOR)).powf(-bias)).collect();
    let wsum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= wsum;
    }
    let keys: Vec<Symbol> = first.probs.keys().cloned().collect();
    let mut logs = vec![0.0f64; keys.len()];
    for (d, &w) in dists.iter().zip(&weights) {
        for (i, k) in keys.iter().enumerate() {
            let p = d.prob(k);
            if p > 0.0 {
                logs[i] += w * p.ln();
            } else {
                logs[i] = f64::NEG_INFINITY;
            }
        }
    }
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(ExpectancyError::Combination {
            reason: "no symbol has positive probability in every component".to_string(),
        });
    }
    let mut probs = BTreeMap::new();
    let mut total = 0.0;
    for (k, l) in keys.into_iter().zip(&logs) {
        let v = (l - m).exp();
        total += v;
        probs.insert(k, v);
    }
    for p in probs.values_mut() {
        *p /= total;
    }
    Ok(Distribution { probs })
}

/// The viewpoints in play and the combination bias they share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewpointSystem {
    pub selected: Vec<Viewpoint>,
    pub combination_bias: f64,
}

/// Result of stepwise selection: the chosen system plus the internal
/// cross-entropy after each accepted step (non-increasing).
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome {
    pub system: ViewpointSystem,
    pub cross_entropies: Vec<f64>,
}

/// The combined basic-alphabet distribution for the event at position
/// `basic_prefix.len()`. One component per viewpoint, doubled when
/// short-term models are supplied.
fn combined_melody_distribution(
    viewpoints: &[Viewpoint],
    ltm: &BTreeMap<Viewpoint, ContextModel>,
    stm: Option<&BTreeMap<Viewpoint, ContextModel>>,
    derived: &BTreeMap<Viewpoint, Vec<Symbol>>,
    basic_prefix: &[Symbol],
    basic_alphabet: &BTreeSet<Symbol>,
    bias: f64,
) -> Result<Distribution, ExpectancyError> {
    let k = basic_prefix.len();
    let prev = basic_prefix.last();
    let mut pool = Vec::new();
    for vp in viewpoints {
        let dctx = &derived
            .get(vp)
            .ok_or_else(|| ExpectancyError::Configuration {
                reason: format!("missing derived sequence for viewpoint {}", vp.name()),
            })?[..k];
        let model = ltm.get(vp).ok_or_else(|| ExpectancyError::Configuration {
            reason: format!("no trained model for viewpoint {}", vp.name()),
        })?;
        let mut reachable = model.alphabet.clone();
        for b in basic_alphabet {
            reachable.insert(vp.derive_at(prev, b)?);
        }
        pool.push(map_to_basic(&ppm_predict_over(model, dctx, &reachable)?, *vp, prev, basic_alphabet)?);
        if let Some(stm_models) = stm {
            if let Some(sm) = stm_models.get(vp) {
                pool.push(map_to_basic(&ppm_predict_over(sm, dctx, &reachable)?, *vp, prev, basic_alphabet)?);
            }
        }
    }
    combine_distributions(&pool, bias)
}

/// Mean per-symbol cross entropy (bits) of a viewpoint set under
/// round-robin k-fold cross-validation over the training sequences.
fn selection_score(
    training: &[SymbolSequence],
    viewpoints: &[Viewpoint],
    folds: usize,
    max_order: usize,
    bias: f64,
) -> Result<f64, ExpectancyError> {
    let k = folds.clamp(2, training.len());
    let mut total_bits = 0.0;
    let mut total_events = 0usize;
    for fold in 0..k {
        let train: Vec<&SymbolSequence> =
            training.iter().enumerate().filter(|(i, _)| i % k != fold).map(|(_, s)| s).collect();
        let test: Vec<&SymbolSequence> =
            training.iter().enumerate().filter(|(i, _)| i % k == fold).map(|(_, s)| s).collect();
        let basic_alphabet: BTreeSet<Symbol> =
            train.iter().flat_map(|s| s.symbols.iter().cloned()).collect();
        if basic_alphabet.is_empty() {
            continue;
        }
        let mut models = BTreeMap::new();
        for vp in viewpoints {
            let derived_train: Vec<SymbolSequence> =
                train.iter().map(|s| derive_viewpoint(s, *vp)).collect::<Result<_, _>>()?;
            models.insert(*vp, ppm_train(&derived_train, max_order, &[])?);
        }
        for seq in &test {
            let mut derived = BTreeMap::new();
            for vp in viewpoints {
                derived.insert(*vp, derive_viewpoint(seq, *vp)?.symbols);
            }
            for i in 0..seq.symbols.len() {
                let dist = combined_melody_distribution(
                    viewpoints,
                    &models,
                    None,
                    &derived,
                    &seq.symbols[..i],
                    &basic_alphabet,
                    bias,
                )?;
                total_bits += ic_lenient(&dist, &seq.symbols[i]);
                total_events += 1;
            }
        }
    }
    if total_events == 0 {
        return Err(ExpectancyError::DegenerateTraining);
    }
    Ok(total_bits / total_events as f64)
}

/// Forward stepwise viewpoint selection.
///
/// Starts empty, repeatedly adds the candidate that most reduces the mean
/// cross entropy under internal cross-validation, and stops when the best
/// improvement falls below `threshold` bits. The single best candidate is
/// always kept, so the result is non-empty.
pub fn stepwise_select(
    training: &[SymbolSequence],
    candidates: &[Viewpoint],
    folds: usize,
    max_order: usize,
    bias: f64,
    threshold: f64,
) -> Result<SelectionOutcome, ExpectancyError> {
    if training.len() < 2 {
        return Err(ExpectancyError::TooFewSequences { got: training.len() });
    }
    if candidates.is_empty() {
        return Err(ExpectancyError::NoCandidates);
    }
    if training.iter().all(|s| s.symbols.len() < 2) {
        return Err(ExpectancyError::DegenerateTraining);
    }
    let mut selected: Vec<Viewpoint> = Vec::new();
    let mut cross_entropies: Vec<f64> = Vec::new();
    let mut current = f64::INFINITY;
    loop {
        let mut best: Option<(Viewpoint, f64)> = None;
        for &c in candidates {
            if selected.contains(&c) {
                continue;
            }
            let mut trial = selected.clone();
            trial.push(c);
            let score = selection_score(training, &trial, folds, max_order, bias)?;
            if best.is_none_or(|(_, s)| score < s) {
                best = Some((c, score));
            }
        }
        let Some((choice, score)) = best else { break };
        if selected.is_empty() || current - score >= threshold {
            selected.push(choice);
            cross_entropies.push(score);
            current = score;
        } else {
            break;
        }
    }
    Ok(SelectionOutcome {
        system: ViewpointSystem { selected, combination_bias: bias },
        cross_entropies,
    })
}

/// A melody pitch sequence plus the onset-group index of each element.
#[derive(Debug, Clone, PartialEq)]
pub struct MelodyEncoding {
    pub seq: SymbolSequence,
    pub onset_indices: Vec<usize>,
}

/// Melody MIDI pitches in onset order, skipping onsets without a melody
/// note. Errors when the piece has none at all.
pub fn encode_melody(piece: &Piece) -> Result<MelodyEncoding, ExpectancyError> {
    let groups = group_by_onset(piece);
    let mut symbols = Vec::new();
    let mut onset_indices = Vec::new();
    for (j, g) in groups.groups.iter().enumerate() {
        if let Some(n) = g.melody_note() {
            symbols.push(Symbol::Int(n.midi_pitch as i64));
            onset_indices.push(j);
        }
    }
    if symbols.is_empty() {
        return Err(ExpectancyError::EmptyMelody { piece_id: piece.id.clone() });
    }
    Ok(MelodyEncoding {
        seq: SymbolSequence { alphabet_id: "cpitch".to_string(), symbols },
        onset_indices,
    })
}

/// One symbol per onset group: the tuple of unpadded ascending vertical
/// interval classes (empty for a lone or octave-doubled bass).
pub fn encode_harmony(piece: &Piece) -> SymbolSequence {
    let groups = group_by_onset(piece);
    let symbols = groups.groups.iter().map(|g| Symbol::Tuple(vic_classes(g))).collect();
    SymbolSequence { alphabet_id: "vic".to_string(), symbols }
}

/// Expectancy engine configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectancyConfig {
    /// Longest context the n-gram models condition on.
    pub max_order: usize,
    /// Entropy-weighting exponent for distribution combination.
    pub bias: f64,
    /// Also run incremental within-piece models next to the trained ones.
    pub stm: bool,
    /// Internal cross-validation folds for viewpoint selection.
    pub selection_folds: usize,
    /// Minimum cross-entropy improvement (bits) to accept another viewpoint.
    pub selection_threshold: f64,
}

impl Default for ExpectancyConfig {
    fn default() -> ExpectancyConfig {
        ExpectancyConfig {
            max_order: 3,
            bias: 1.0,
            stm: false,
            selection_folds: 3,
            selection_threshold: 0.01,
        }
    }
}

/// Trained expectancy models: one context model per selected melody
/// viewpoint plus the harmony model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectancyModels {
    pub config: ExpectancyConfig,
    pub system: ViewpointSystem,
    pub selection_cross_entropies: Vec<f64>,
    pub melody_alphabet: BTreeSet<Symbol>,
    pub melody_models: BTreeMap<Viewpoint, ContextModel>,
    pub harmony_model: ContextModel,
}

impl ExpectancyModels {
    /// Selects viewpoints on the training pieces, then trains the final
    /// per-viewpoint melody models and the harmony model on all of them.
    pub fn train(pieces: &[Piece], config: &ExpectancyConfig) -> Result<ExpectancyModels, ExpectancyError> {
        if pieces.is_empty() {
            return Err(ExpectancyError::EmptyTrainingSet);
        }
        let mut melody_seqs = Vec::with_capacity(pieces.len());
        for p in pieces {
            melody_seqs.push(encode_melody(p)?.seq);
        }
        let outcome = stepwise_select(
            &melody_seqs,
            &Viewpoint::MELODY_CANDIDATES,
            config.selection_folds,
            config.max_order,
            config.bias,
            config.selection_threshold,
        )?;
        let melody_alphabet: BTreeSet<Symbol> =
            melody_seqs.iter().flat_map(|s| s.symbols.iter().cloned()).collect();
        let mut melody_models = BTreeMap::new();
        for &vp in &outcome.system.selected {
            let derived: Vec<SymbolSequence> =
                melody_seqs.iter().map(|s| derive_viewpoint(s, vp)).collect::<Result<_, _>>()?;
            melody_models.insert(vp, ppm_train(&derived, config.max_order, &[])?);
        }
        let harmony_seqs: Vec<SymbolSequence> = pieces.iter().map(encode_harmony).collect();
        let declared = [Symbol::Tuple(Vec::new()), Symbol::Unseen];
        let harmony_model = ppm_train(&harmony_seqs, config.max_order, &declared)?;
        Ok(ExpectancyModels {
            config: config.clone(),
            system: outcome.system,
            selection_cross_entropies: outcome.cross_entropies,
            melody_alphabet,
            melody_models,
            harmony_model,
        })
    }

    /// The four expectancy features per onset group of a piece.
    ///
    /// Melody values land on onsets carrying a melody note; other onsets
    /// repeat the most recent melody value (zeros before the first).
    /// Harmony values are computed at every onset, with tuples outside the
    /// training alphabet standing in as the reserved unseen symbol.
    pub fn features(&self, piece: &Piece) -> Result<FeatureMatrix, ExpectancyError> {
        let n = group_by_onset(piece).len();
        let melody = encode_melody(piece)?;
        let harmony = encode_harmony(piece);

        let mut derived = BTreeMap::new();
        for vp in &self.system.selected {
            derived.insert(*vp, derive_viewpoint(&melody.seq, *vp)?.symbols);
        }
        let mut stm_melody: Option<BTreeMap<Viewpoint, ContextModel>> = self.config.stm.then(|| {
            self.system
                .selected
                .iter()
                .filter_map(|vp| {
                    self.melody_models
                        .get(vp)
                        .map(|m| (*vp, ContextModel::empty(m.max_order, m.alphabet.clone())))
                })
                .collect()
        });

        let mut melody_vals = Vec::with_capacity(melody.seq.symbols.len());
        for k in 0..melody.seq.symbols.len() {
            let dist = combined_melody_distribution(
                &self.system.selected,
                &self.melody_models,
                stm_melody.as_ref(),
                &derived,
                &melody.seq.symbols[..k],
                &self.melody_alphabet,
                self.config.bias,
            )?;
            let icv = ic_lenient(&dist, &melody.seq.symbols[k]);
            melody_vals.push((melody.onset_indices[k], icv, entropy(&dist)));
            if let Some(stm) = stm_melody.as_mut() {
                for (vp, model) in stm.iter_mut() {
                    let seq = derived.get(vp).expect("derived sequence exists for selected viewpoint");
                    model.observe_last(&seq[..=k]);
                }
            }
        }

        let mapped: Vec<Symbol> = harmony
            .symbols
            .iter()
            .map(|s| if self.harmony_model.alphabet.contains(s) { s.clone() } else { Symbol::Unseen })
            .collect();
        let mut stm_harmony = self
            .config
            .stm
            .then(|| ContextModel::empty(self.harmony_model.max_order, self.harmony_model.alphabet.clone()));
        let mut harmony_vals = Vec::with_capacity(n);
        for j in 0..n {
            let ltm = ppm_predict(&self.harmony_model, &mapped[..j])?;
            let dist = match stm_harmony.as_ref() {
                Some(sm) => {
                    combine_distributions(&[ltm, ppm_predict(sm, &mapped[..j])?], self.config.bias)?
                }
                None => ltm,
            };
            harmony_vals.push((ic(&dist, &mapped[j])?, entropy(&dist)));
            if let Some(sm) = stm_harmony.as_mut() {
                sm.observe_last(&mapped[..=j]);
            }
        }

        let mut rows = Vec::with_capacity(n);
        let mut mel = melody_vals.iter().peekable();
        let mut last: Option<(f64, f64)> = None;
        for j in 0..n {
            if let Some(&&(idx, icv, h)) = mel.peek() {
                if idx == j {
                    last = Some((icv, h));
                    mel.next();
                }
            }
            let (ic_m, h_m) = last.unwrap_or((0.0, 0.0));
            let (ic_c, h_c) = harmony_vals[j];
            rows.push(vec![ic_m, h_m, ic_c, h_c]);
        }
        Ok(FeatureMatrix::new(&piece.id, FeatureSet::Expectancy, rows)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{MeterClass, MeterSpan, Note, Piece};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sym(v: i64) -> Symbol {
        Symbol::Int(v)
    }

    fn seq(symbols: &[i64]) -> SymbolSequence {
        SymbolSequence { alphabet_id: "test".to_string(), symbols: symbols.iter().map(|&v| sym(v)).collect() }
    }

    fn pitch_seq(pitches: &[i64]) -> SymbolSequence {
        SymbolSequence { alphabet_id: "cpitch".to_string(), symbols: pitches.iter().map(|&v| sym(v)).collect() }
    }

    fn note(onset: f64, pitch: u8, melody: bool) -> Note {
        Note {
            onset_beats: onset,
            duration_beats: 1.0,
            midi_pitch: pitch,
            is_melody: melody,
            perf_onset_sec: onset * 0.5,
            perf_velocity: 70,
        }
    }

    fn piece(id: &str, notes: Vec<Note>) -> Piece {
        Piece {
            id: id.to_string(),
            anacrusis_beats: 0.0,
            meters: vec![MeterSpan { start_beat: 0.0, bar_length_beats: 4.0, classification: MeterClass::Duple }],
            notes,
        }
    }

    fn melody_piece(id: &str, pitches: &[u8]) -> Piece {
        piece(id, pitches.iter().enumerate().map(|(i, &p)| note(i as f64, p, true)).collect())
    }

    #[test]
    fn encode_melody_extracts_pitches_in_order() {
        let enc = encode_melody(&melody_piece("m", &[60, 64, 67])).unwrap();
        assert_eq!(enc.seq.symbols, vec![sym(60), sym(64), sym(67)]);
        assert_eq!(enc.onset_indices, vec![0, 1, 2]);
    }

    #[test]
    fn encode_melody_skips_onsets_without_melody() {
        let p = piece("m", vec![note(0.0, 40, false), note(1.0, 60, true), note(2.0, 45, false), note(3.0, 62, true)]);
        let enc = encode_melody(&p).unwrap();
        assert_eq!(enc.seq.symbols, vec![sym(60), sym(62)]);
        assert_eq!(enc.onset_indices, vec![1, 3]);
    }

    #[test]
    fn encode_melody_errors_without_melody() {
        let p = piece("m", vec![note(0.0, 40, false), note(1.0, 45, false)]);
        assert!(matches!(encode_melody(&p).unwrap_err(), ExpectancyError::EmptyMelody { .. }));
    }

    #[test]
    fn encode_harmony_tuples() {
        let p = piece(
            "h",
            vec![
                note(0.0, 60, false),
                note(0.0, 64, false),
                note(0.0, 67, true),
                note(1.0, 50, true),
                note(2.0, 48, false),
                note(2.0, 60, true),
            ],
        );
        let h = encode_harmony(&p);
        assert_eq!(
            h.symbols,
            vec![Symbol::Tuple(vec![4, 7]), Symbol::Tuple(vec![]), Symbol::Tuple(vec![])]
        );
    }

    #[test]
    fn derive_cpint() {
        let d = derive_viewpoint(&pitch_seq(&[60, 64, 67]), Viewpoint::Cpint).unwrap();
        assert_eq!(d.symbols, vec![Symbol::Undef, sym(4), sym(3)]);
    }

    #[test]
    fn derive_contour() {
        let d = derive_viewpoint(&pitch_seq(&[60, 64, 67]), Viewpoint::Contour).unwrap();
        assert_eq!(d.symbols, vec![Symbol::Undef, sym(1), sym(1)]);
        let d2 = derive_viewpoint(&pitch_seq(&[60, 60]), Viewpoint::Contour).unwrap();
        assert_eq!(d2.symbols, vec![Symbol::Undef, sym(0)]);
    }

    #[test]
    fn derive_cpitch_is_identity() {
        let d = derive_viewpoint(&pitch_seq(&[60, 64]), Viewpoint::Cpitch).unwrap();
        assert_eq!(d.symbols, vec![sym(60), sym(64)]);
    }

    #[test]
    fn vic_tuple_is_not_derivable() {
        assert!(matches!(
            derive_viewpoint(&pitch_seq(&[60]), Viewpoint::VicTuple).unwrap_err(),
            ExpectancyError::Configuration { .. }
        ));
    }

    #[test]
    fn train_counts_alternating_sequence() {
        let model = ppm_train(&[seq(&[0, 1, 0, 1])], 1, &[]).unwrap();
        assert_eq!(model.counts[&vec![]], [(sym(0), 2), (sym(1), 2)].into_iter().collect());
        assert_eq!(model.counts[&vec![sym(0)]], [(sym(1), 2)].into_iter().collect());
        assert_eq!(model.counts[&vec![sym(1)]], [(sym(0), 1)].into_iter().collect());
    }

    #[test]
    fn train_rejects_empty_set() {
        assert!(matches!(ppm_train(&[], 1, &[]).unwrap_err(), ExpectancyError::EmptyTrainingSet));
    }

    #[test]
    fn repeated_symbol_order_zero() {
        // Four observations of one symbol: c/(n+d) = 4/5, escape 1/5 to the
        // uniform base over the one remaining symbol.
        let model = ppm_train(&[seq(&[0, 0, 0, 0])], 0, &[sym(1)]).unwrap();
        let dist = ppm_predict(&model, &[sym(0)]).unwrap();
        assert_abs_diff_eq!(dist.prob(&sym(0)), 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(dist.prob(&sym(1)), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn repeated_symbol_order_one() {
        // After context [0]: 3 continuations, all 0 -> 3/4; the escape 1/4
        // lands on the uniform base (symbol 1), order 0 being fully excluded.
        let model = ppm_train(&[seq(&[0, 0, 0, 0])], 1, &[sym(1)]).unwrap();
        let dist = ppm_predict(&model, &[sym(0)]).unwrap();
        assert_abs_diff_eq!(dist.prob(&sym(0)), 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(dist.prob(&sym(1)), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn untrained_context_is_uniform() {
        let model = ppm_train(&[seq(&[0]), seq(&[1])], 1, &[]).unwrap();
        let dist = ppm_predict(&model, &[sym(0)]).unwrap();
        assert_abs_diff_eq!(dist.prob(&sym(0)), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(dist.prob(&sym(1)), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn single_symbol_alphabet_is_certain() {
        let model = ppm_train(&[seq(&[0, 0])], 1, &[]).unwrap();
        let dist = ppm_predict(&model, &[]).unwrap();
        assert_abs_diff_eq!(dist.prob(&sym(0)), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn empty_alphabet_is_an_error() {
        let model = ContextModel::empty(1, BTreeSet::new());
        assert!(matches!(ppm_predict(&model, &[]).unwrap_err(), ExpectancyError::EmptyAlphabet));
    }

    #[test]
    fn unknown_context_symbols_fall_through() {
        let model = ppm_train(&[seq(&[0, 1, 0, 1])], 2, &[]).unwrap();
        let dist = ppm_predict(&model, &[sym(99), sym(0)]).unwrap();
        // Context [99,0] is unseen; [0] matches and predicts 1.
        assert!(dist.prob(&sym(1)) > dist.prob(&sym(0)));
        let total: f64 = dist.probs.values().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
    }

    /// Recursive escape-chain reference implementation, kept deliberately
    /// independent of the iterative one.
    fn oracle_predict(model: &ContextModel, context: &[Symbol]) -> BTreeMap<Symbol, f64> {
        fn p_sym(
            model: &ContextModel,
            ctx: &[Symbol],
            order: i64,
            excluded: &BTreeSet<Symbol>,
            target: &Symbol,
        ) -> f64 {
            if order < 0 {
                let rest: Vec<&Symbol> = model.alphabet.iter().filter(|s| !excluded.contains(*s)).collect();
                if rest.is_empty() {
                    return 0.0;
                }
                return if rest.iter().any(|s| *s == target) { 1.0 / rest.len() as f64 } else { 0.0 };
            }
            let k = order as usize;
            let sub = &ctx[ctx.len() - k..];
            let entries: Vec<(&Symbol, u64)> = match model.counts.get(sub) {
                Some(t) => t.iter().filter(|(s, _)| !excluded.contains(*s)).map(|(s, &c)| (s, c)).collect(),
                None => Vec::new(),
            };
            if entries.is_empty() {
                return p_sym(model, ctx, order - 1, excluded, target);
            }
            let n: u64 = entries.iter().map(|(_, c)| *c).sum();
            let d = entries.len() as f64;
            let denom = n as f64 + d;
            if let Some((_, c)) = entries.iter().find(|(s, _)| *s == target) {
                return *c as f64 / denom;
            }
            let mut ex = excluded.clone();
            for (s, _) in &entries {
                ex.insert((*s).clone());
            }
            (d / denom) * p_sym(model, ctx, order - 1, &ex, target)
        }
        let start = context.len().min(model.max_order);
        let ctx = &context[context.len() - start..];
        let raw: BTreeMap<Symbol, f64> = model
            .alphabet
            .iter()
            .map(|s| (s.clone(), p_sym(model, ctx, start as i64, &BTreeSet::new(), s)))
            .collect();
        let total: f64 = raw.values().sum();
        raw.into_iter().map(|(s, p)| (s, p / total)).collect()
    }

    #[test]
    fn matches_recursive_oracle_on_random_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(1701);
        for _ in 0..400 {
            let alpha_size = rng.random_range(2..=4usize);
            let declared: Vec<Symbol> = (0..alpha_size as i64).map(sym).collect();
            let n_seqs = rng.random_range(1..=3usize);
            let seqs: Vec<SymbolSequence> = (0..n_seqs)
                .map(|_| {
                    let len = rng.random_range(0..=6usize);
                    SymbolSequence {
                        alphabet_id: "fuzz".to_string(),
                        symbols: (0..len).map(|_| sym(rng.random_range(0..alpha_size as i64))).collect(),
                    }
                })
                .collect();
            let max_order = rng.random_range(0..=3usize);
            let model = ppm_train(&seqs, max_order, &declared).unwrap();
            let ctx_len = rng.random_range(0..=4usize);
            let context: Vec<Symbol> =
                (0..ctx_len).map(|_| sym(rng.random_range(0..alpha_size as i64))).collect();
            let dist = ppm_predict(&model, &context).unwrap();
            let oracle = oracle_predict(&model, &context);
            let total: f64 = dist.probs.values().sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
            assert_eq!(dist.probs.len(), oracle.len());
            for (s, p) in &oracle {
                assert_abs_diff_eq!(dist.prob(s), p, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn ic_values() {
        let dist = Distribution {
            probs: [(sym(0), 0.5), (sym(1), 0.25), (sym(2), 0.25)].into_iter().collect(),
        };
        assert_abs_diff_eq!(ic(&dist, &sym(0)).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ic(&dist, &sym(1)).unwrap(), 2.0, epsilon = 1e-12);
        let point = Distribution { probs: [(sym(0), 1.0)].into_iter().collect() };
        assert_eq!(ic(&point, &sym(0)).unwrap(), 0.0);
    }

    #[test]
    fn ic_floors_zero_probability() {
        let dist = Distribution { probs: [(sym(0), 1.0), (sym(1), 0.0)].into_iter().collect() };
        let v = ic(&dist, &sym(1)).unwrap();
        assert_abs_diff_eq!(v, -(1e-12f64).log2(), epsilon = 1e-9);
    }

    #[test]
    fn ic_rejects_foreign_symbol() {
        let dist = Distribution { probs: [(sym(0), 1.0)].into_iter().collect() };
        assert!(matches!(ic(&dist, &sym(7)).unwrap_err(), ExpectancyError::Domain { .. }));
    }

    #[test]
    fn entropy_values() {
        let uniform4 = Distribution { probs: (0..4).map(|i| (sym(i), 0.25)).collect() };
        assert_abs_diff_eq!(entropy(&uniform4), 2.0, epsilon = 1e-12);
        let point = Distribution { probs: [(sym(0), 1.0)].into_iter().collect() };
        assert_eq!(entropy(&point), 0.0);
        let half = Distribution { probs: [(sym(0), 0.5), (sym(1), 0.5)].into_iter().collect() };
        assert_abs_diff_eq!(entropy(&half), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn entropy_is_expected_ic() {
        let model = ppm_train(&[seq(&[0, 1, 0, 2, 0, 1])], 2, &[]).unwrap();
        let dist = ppm_predict(&model, &[sym(0)]).unwrap();
        let expected: f64 = dist.probs.iter().map(|(s, &p)| p * ic(&dist, s).unwrap()).sum();
        assert_abs_diff_eq!(entropy(&dist), expected, epsilon = 1e-9);
    }

    #[test]
    fn combine_single_is_identity() {
        let model = ppm_train(&[seq(&[0, 1, 0])], 1, &[]).unwrap();
        let dist = ppm_predict(&model, &[sym(0)]).unwrap();
        let combined = combine_distributions(std::slice::from_ref(&dist), 1.0).unwrap();
        for (s, &p) in &dist.probs {
            assert_abs_diff_eq!(combined.prob(s), p, epsilon = 1e-12);
        }
    }

    #[test]
    fn combine_identical_is_idempotent() {
        let dist = Distribution { probs: [(sym(0), 0.7), (sym(1), 0.3)].into_iter().collect() };
        let combined = combine_distributions(&[dist.clone(), dist.clone()], 1.5).unwrap();
        assert_abs_diff_eq!(combined.prob(&sym(0)), 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(combined.prob(&sym(1)), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn bias_pulls_toward_the_confident_component() {
        let peaked = Distribution { probs: [(sym(0), 0.9), (sym(1), 0.1)].into_iter().collect() };
        let uniform = Distribution { probs: [(sym(0), 0.5), (sym(1), 0.5)].into_iter().collect() };
        let kl = |a: &Distribution, b: &Distribution| -> f64 {
            a.probs.iter().map(|(s, &p)| if p > 0.0 { p * (p / b.prob(s)).log2() } else { 0.0 }).sum()
        };
        // Unweighted geometric mean: equal exponents.
        let gm_a = (0.9f64 * 0.5).sqrt();
        let gm_b = (0.1f64 * 0.5).sqrt();
        let gm = Distribution {
            probs: [(sym(0), gm_a / (gm_a + gm_b)), (sym(1), gm_b / (gm_a + gm_b))].into_iter().collect(),
        };
        let combined = combine_distributions(&[peaked.clone(), uniform], 1.0).unwrap();
        assert!(kl(&peaked, &combined) < kl(&peaked, &gm));
    }

    #[test]
    fn combine_rejects_mismatched_alphabets() {
        let a = Distribution { probs: [(sym(0), 1.0)].into_iter().collect() };
        let b = Distribution { probs: [(sym(1), 1.0)].into_iter().collect() };
        assert!(matches!(
            combine_distributions(&[a, b], 1.0).unwrap_err(),
            ExpectancyError::Combination { .. }
        ));
    }

    #[test]
    fn combine_sums_to_one() {
        let model = ppm_train(&[seq(&[0, 1, 2, 0, 1])], 2, &[]).unwrap();
        let a = ppm_predict(&model, &[sym(0)]).unwrap();
        let b = ppm_predict(&model, &[sym(1)]).unwrap();
        for bias in [0.5, 1.0, 2.0, 8.0] {
            let c = combine_distributions(&[a.clone(), b.clone()], bias).unwrap();
            let total: f64 = c.probs.values().sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn map_to_basic_identity_for_cpitch() {
        let alphabet: BTreeSet<Symbol> = [sym(60), sym(62)].into_iter().collect();
        let dist = Distribution { probs: [(sym(60), 0.8), (sym(62), 0.2)].into_iter().collect() };
        let mapped = map_to_basic(&dist, Viewpoint::Cpitch, Some(&sym(60)), &alphabet).unwrap();
        assert_abs_diff_eq!(mapped.prob(&sym(60)), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn map_to_basic_splits_interval_mass() {
        // After pitch 62, interval +2 reaches 64, -2 reaches 60; Undef is
        // unreachable so its mass is dropped before renormalizing.
        let alphabet: BTreeSet<Symbol> = [sym(60), sym(62), sym(64)].into_iter().collect();
        let dist = Distribution {
            probs: [(sym(2), 0.5), (sym(-2), 0.25), (Symbol::Undef, 0.25)].into_iter().collect(),
        };
        let mapped = map_to_basic(&dist, Viewpoint::Cpint, Some(&sym(62)), &alphabet).unwrap();
        assert_abs_diff_eq!(mapped.prob(&sym(64)), 0.5 / 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(mapped.prob(&sym(60)), 0.25 / 0.75, epsilon = 1e-12);
        assert_eq!(mapped.prob(&sym(62)), 0.0);
    }

    #[test]
    fn map_to_basic_spreads_undef_at_position_zero() {
        let alphabet: BTreeSet<Symbol> = [sym(60), sym(62), sym(64)].into_iter().collect();
        let dist = Distribution {
            probs: [(Symbol::Undef, 0.4), (sym(2), 0.6)].into_iter().collect(),
        };
        let mapped = map_to_basic(&dist, Viewpoint::Cpint, None, &alphabet).unwrap();
        // Every first pitch derives Undef, so the result is uniform.
        for s in &alphabet {
            assert_abs_diff_eq!(mapped.prob(s), 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn map_to_basic_contour_groups() {
        let alphabet: BTreeSet<Symbol> = [sym(60), sym(62), sym(64), sym(65)].into_iter().collect();
        let dist = Distribution {
            probs: [(sym(1), 0.6), (sym(0), 0.3), (sym(-1), 0.1), (Symbol::Undef, 0.0)]
                .into_iter()
                .collect(),
        };
        let mapped = map_to_basic(&dist, Viewpoint::Contour, Some(&sym(62)), &alphabet).unwrap();
        // Rising mass splits over {64, 65}, level keeps 62, falling keeps 60.
        assert_abs_diff_eq!(mapped.prob(&sym(64)), 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(mapped.prob(&sym(65)), 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(mapped.prob(&sym(62)), 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(mapped.prob(&sym(60)), 0.1, epsilon = 1e-12);
    }

    fn chromatic_scales() -> Vec<SymbolSequence> {
        vec![
            pitch_seq(&(60..68).collect::<Vec<_>>()),
            pitch_seq(&(63..71).collect::<Vec<_>>()),
            pitch_seq(&(55..63).collect::<Vec<_>>()),
        ]
    }

    #[test]
    fn selection_prefers_intervals_on_transposed_scales() {
        let outcome = stepwise_select(&chromatic_scales(), &Viewpoint::MELODY_CANDIDATES, 3, 2, 1.0, 0.01).unwrap();
        assert_eq!(outcome.system.selected[0], Viewpoint::Cpint);
        let cpint_only = selection_score(&chromatic_scales(), &[Viewpoint::Cpint], 3, 2, 1.0).unwrap();
        let cpitch_only = selection_score(&chromatic_scales(), &[Viewpoint::Cpitch], 3, 2, 1.0).unwrap();
        assert!(cpint_only < cpitch_only);
    }

    #[test]
    fn selection_scores_are_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let seqs: Vec<SymbolSequence> = (0..6)
            .map(|_| {
                let len = rng.random_range(5..12usize);
                let mut p = 60i64;
                let symbols = (0..len)
                    .map(|_| {
                        p += rng.random_range(-3..=3i64);
                        sym(p)
                    })
                    .collect();
                SymbolSequence { alphabet_id: "cpitch".to_string(), symbols }
            })
            .collect();
        let outcome = stepwise_select(&seqs, &Viewpoint::MELODY_CANDIDATES, 3, 2, 1.0, 0.01).unwrap();
        assert!(!outcome.system.selected.is_empty());
        for pair in outcome.cross_entropies.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
    }

    #[test]
    fn selection_single_candidate_is_forced() {
        let outcome = stepwise_select(&chromatic_scales(), &[Viewpoint::Cpitch], 3, 2, 1.0, 0.01).unwrap();
        assert_eq!(outcome.system.selected, vec![Viewpoint::Cpitch]);
    }

    #[test]
    fn selection_never_adds_a_duplicate() {
        let pool = [Viewpoint::Cpint, Viewpoint::Cpint];
        let outcome = stepwise_select(&chromatic_scales(), &pool, 3, 2, 1.0, 0.01).unwrap();
        assert_eq!(outcome.system.selected, vec![Viewpoint::Cpint]);
    }

    #[test]
    fn selection_rejects_degenerate_training() {
        let seqs = vec![pitch_seq(&[60]), pitch_seq(&[61])];
        assert!(matches!(
            stepwise_select(&seqs, &Viewpoint::MELODY_CANDIDATES, 3, 2, 1.0, 0.01).unwrap_err(),
            ExpectancyError::DegenerateTraining
        ));
        assert!(matches!(
            stepwise_select(&[pitch_seq(&[60, 61])], &Viewpoint::MELODY_CANDIDATES, 3, 2, 1.0, 0.01)
                .unwrap_err(),
            ExpectancyError::TooFewSequences { got: 1 }
        ));
    }

    #[test]
    fn derived_viewpoints_are_transposition_invariant() {
        let train: Vec<SymbolSequence> = vec![pitch_seq(&[60, 62, 64, 65, 67]), pitch_seq(&[55, 57, 59, 60, 62])];
        let test = pitch_seq(&[62, 64, 66, 63]);
        let shift = 7i64;
        let transpose = |s: &SymbolSequence| SymbolSequence {
            alphabet_id: s.alphabet_id.clone(),
            symbols: s
                .symbols
                .iter()
                .map(|x| match x {
                    Symbol::Int(v) => sym(v + shift),
                    other => other.clone(),
                })
                .collect(),
        };
        let ics = |train: &[SymbolSequence], test: &SymbolSequence| -> Vec<f64> {
            let viewpoints = [Viewpoint::Cpint, Viewpoint::Contour];
            let alphabet: BTreeSet<Symbol> = train.iter().flat_map(|s| s.symbols.iter().cloned()).collect();
            let mut models = BTreeMap::new();
            for vp in viewpoints {
                let derived: Vec<SymbolSequence> =
                    train.iter().map(|s| derive_viewpoint(s, vp).unwrap()).collect();
                models.insert(vp, ppm_train(&derived, 2, &[]).unwrap());
            }
            let mut derived = BTreeMap::new();
            for vp in viewpoints {
                derived.insert(vp, derive_viewpoint(test, vp).unwrap().symbols);
            }
            (0..test.symbols.len())
                .map(|i| {
                    let dist = combined_melody_distribution(
                        &viewpoints,
                        &models,
                        None,
                        &derived,
                        &test.symbols[..i],
                        &alphabet,
                        1.0,
                    )
                    .unwrap();
                    ic_lenient(&dist, &test.symbols[i])
                })
                .collect()
        };
        let base = ics(&train, &test);
        let shifted_train: Vec<SymbolSequence> = train.iter().map(&transpose).collect();
        let shifted = ics(&shifted_train, &transpose(&test));
        for (a, b) in base.iter().zip(&shifted) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    fn triad_piece(id: &str, offset: u8) -> Piece {
        let mut notes = Vec::new();
        for i in 0..6u8 {
            let root = 48 + offset + (i % 3) * 2;
            notes.push(note(i as f64, root, false));
            notes.push(note(i as f64, root + 4, false));
            notes.push(note(i as f64, root + 7, false));
            notes.push(note(i as f64, root + 12, true));
        }
        piece(id, notes)
    }

    #[test]
    fn train_and_features_shapes() {
        let pieces: Vec<Piece> = (0..4).map(|i| triad_piece(&format!("p{i}"), i as u8)).collect();
        let models = ExpectancyModels::train(&pieces, &ExpectancyConfig::default()).unwrap();
        assert!(!models.system.selected.is_empty());
        let m = models.features(&pieces[0]).unwrap();
        assert_eq!(m.n_rows(), 6);
        assert_eq!(m.n_cols(), 4);
        assert_eq!(m.columns, ["ic_m", "h_m", "ic_c", "h_c"]);
        m.check().unwrap();
        for row in &m.rows {
            for &v in row {
                assert!(v >= 0.0);
            }
        }
    }

    #[test]
    fn deterministic_pattern_has_vanishing_ic() {
        // One long piece repeating a 3-note loop; trained on itself with
        // ample context, late events approach certainty.
        let pattern: Vec<u8> = (0..30).map(|i| [60u8, 64, 67][i % 3]).collect();
        let p = melody_piece("loop", &pattern);
        let other = melody_piece("loop2", &pattern);
        let config = ExpectancyConfig { max_order: 3, ..ExpectancyConfig::default() };
        let models = ExpectancyModels::train(&[p.clone(), other], &config).unwrap();
        let m = models.features(&p).unwrap();
        let late: Vec<f64> = m.rows[15..].iter().map(|r| r[0]).collect();
        let mean_ic = late.iter().sum::<f64>() / late.len() as f64;
        assert!(mean_ic < 0.2, "late information content {mean_ic} should be near 0");
    }

    #[test]
    fn first_onset_entropy_matches_fallback_distribution() {
        let pieces = vec![melody_piece("a", &[60, 60, 60]), melody_piece("b", &[61])];
        let config = ExpectancyConfig::default();
        // Hand-built models with a fixed cpitch-only system: order-0 table
        // {60:3, 61:1} gives (0.5, 1/6) plus escape 1/3 renormalized to
        // (0.75, 0.25).
        let melody_seqs: Vec<SymbolSequence> =
            pieces.iter().map(|p| encode_melody(p).unwrap().seq).collect();
        let alphabet: BTreeSet<Symbol> = melody_seqs.iter().flat_map(|s| s.symbols.iter().cloned()).collect();
        let mut melody_models = BTreeMap::new();
        melody_models.insert(Viewpoint::Cpitch, ppm_train(&melody_seqs, config.max_order, &[]).unwrap());
        let harmony_seqs: Vec<SymbolSequence> = pieces.iter().map(encode_harmony).collect();
        let harmony_model =
            ppm_train(&harmony_seqs, config.max_order, &[Symbol::Tuple(vec![]), Symbol::Unseen]).unwrap();
        let models = ExpectancyModels {
            config: config.clone(),
            system: ViewpointSystem { selected: vec![Viewpoint::Cpitch], combination_bias: config.bias },
            selection_cross_entropies: vec![],
            melody_alphabet: alphabet,
            melody_models,
            harmony_model,
        };
        let m = models.features(&pieces[0]).unwrap();
        let expected_h = -(0.75f64 * 0.75f64.log2() + 0.25 * 0.25f64.log2());
        assert_abs_diff_eq!(m.rows[0][1], expected_h, epsilon = 1e-9);
        assert_abs_diff_eq!(m.rows[0][0], -(0.75f64).log2(), epsilon = 1e-9);
    }

    #[test]
    fn melody_fill_carries_forward_and_zeroes_before_first() {
        let p = piece(
            "fill",
            vec![
                note(0.0, 40, false),
                note(1.0, 60, true),
                note(2.0, 45, false),
                note(3.0, 64, true),
            ],
        );
        let train = vec![melody_piece("t1", &[60, 64, 60, 64]), melody_piece("t2", &[64, 60, 64])];
        let models = ExpectancyModels::train(&train, &ExpectancyConfig::default()).unwrap();
        let m = models.features(&p).unwrap();
        assert_eq!(m.rows[0][0], 0.0);
        assert_eq!(m.rows[0][1], 0.0);
        assert!(m.rows[1][0] > 0.0);
        assert_eq!(m.rows[2][0], m.rows[1][0]);
        assert_eq!(m.rows[2][1], m.rows[1][1]);
        assert_ne!(m.rows[3][0], m.rows[2][0]);
    }

    #[test]
    fn unseen_harmony_tuple_is_finite() {
        let train: Vec<Piece> = (0..3).map(|i| triad_piece(&format!("t{i}"), 0)).collect();
        let models = ExpectancyModels::train(&train, &ExpectancyConfig::default()).unwrap();
        // Minor chord (3,7) never occurs in the major-triad corpus.
        let test = piece(
            "novel",
            vec![
                note(0.0, 60, false),
                note(0.0, 63, false),
                note(0.0, 67, true),
                note(1.0, 60, false),
                note(1.0, 63, false),
                note(1.0, 67, true),
            ],
        );
        assert!(!models.harmony_model.alphabet.contains(&Symbol::Tuple(vec![3, 7])));
        let m = models.features(&test).unwrap();
        for row in &m.rows {
            assert!(row[2].is_finite() && row[2] > 0.0);
            assert!(row[3].is_finite());
        }
    }

    #[test]
    fn stm_learns_within_piece_repetition() {
        // Training corpus: ascending scales, so 60 -> 62 jumps of +2 are
        // not the long-term expectation (+1 is). A test piece alternating
        // 60/62 rewards the within-piece model.
        let train: Vec<Piece> = vec![
            melody_piece("s1", &[60, 61, 62, 63, 64, 65, 66, 67]),
            melody_piece("s2", &[55, 56, 57, 58, 59, 60, 61, 62]),
            melody_piece("s3", &[62, 63, 64, 65, 66, 67, 68, 69]),
        ];
        let test: Vec<u8> = (0..24).map(|i| if i % 2 == 0 { 60 } else { 62 }).collect();
        let test_piece = melody_piece("alt", &test);
        let ltm_cfg = ExpectancyConfig::default();
        let stm_cfg = ExpectancyConfig { stm: true, ..ExpectancyConfig::default() };
        let ltm_models = ExpectancyModels::train(&train, &ltm_cfg).unwrap();
        let stm_models = ExpectancyModels::train(&train, &stm_cfg).unwrap();
        let mean_ic = |m: &FeatureMatrix| -> f64 {
            let vals: Vec<f64> = m.rows[4..].iter().map(|r| r[0]).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let ltm_ic = mean_ic(&ltm_models.features(&test_piece).unwrap());
        let stm_ic = mean_ic(&stm_models.features(&test_piece).unwrap());
        assert!(
            stm_ic < ltm_ic,
            "short-term mode should reduce information content on repetition ({stm_ic} vs {ltm_ic})"
        );
    }

    #[test]
    fn models_serialize_round_trip() {
        let pieces: Vec<Piece> = (0..3).map(|i| triad_piece(&format!("p{i}"), i as u8)).collect();
        let models = ExpectancyModels::train(&pieces, &ExpectancyConfig::default()).unwrap();
        let json = serde_json::to_string(&models).unwrap();
        let back: ExpectancyModels = serde_json::from_str(&json).unwrap();
        assert_eq!(back, models);
        let a = models.features(&pieces[1]).unwrap();
        let b = back.features(&pieces[1]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn features_are_deterministic() {
        let pieces: Vec<Piece> = (0..3).map(|i| triad_piece(&format!("p{i}"), i as u8)).collect();
        let m1 = ExpectancyModels::train(&pieces, &ExpectancyConfig::default()).unwrap();
        let m2 = ExpectancyModels::train(&pieces, &ExpectancyConfig::default()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.features(&pieces[0]).unwrap(), m2.features(&pieces[0]).unwrap());
    }
}
