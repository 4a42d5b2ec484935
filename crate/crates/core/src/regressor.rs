//! Bidirectional LSTM sequence regressor.
//!
//! Maps per-onset feature rows to one expressive parameter. A forward and
//! a backward LSTM pass over the (z-scored) feature sequence; a linear
//! head on the concatenated hidden states emits one value per step.
//! Training minimizes mean squared error with Adam over whole-piece
//! sequences, with optional early stopping on held-out validation pieces.
//! Everything runs in f64 so finite-difference gradient checks are tight.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureMatrix, FeatureSet};
use crate::mix_seed;
use crate::targets::{TargetKind, TargetSeries};

/// Default hidden units per direction.
pub const DEFAULT_HIDDEN: usize = 5;

/// Format tag for serialized model files.
pub const MODEL_FILE_VERSION: u32 = 1;

const SEED_TAG_SPLIT: u64 = 0x51;
const SEED_TAG_EPOCH: u64 = 0xe9;

#[derive(Debug, Error)]
pub enum RegressorError {
    #[error("configuration error: {reason}")]
    Config { reason: String },
    #[error("shape error: {reason}")]
    Shape { reason: String },
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
}

/// Per-feature z-score statistics. Binary features keep mean 0 / std 1 so
/// they pass through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Fits statistics over every row of the given matrices.
    pub fn fit<'a, I>(matrices: I) -> Normalization
    where
        I: IntoIterator<Item = &'a FeatureMatrix>,
    {
        let mut cols = 0usize;
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sumsq: Vec<f64> = Vec::new();
        let mut binary: Vec<bool> = Vec::new();
        for m in matrices {
            if sum.is_empty() {
                cols = m.n_cols();
                sum = vec![0.0; cols];
                sumsq = vec![0.0; cols];
                binary = vec![true; cols];
            }
            for row in &m.rows {
                n += 1;
                for (j, &v) in row.iter().enumerate() {
                    sum[j] += v;
                    sumsq[j] += v * v;
                    binary[j] &= v == 0.0 || v == 1.0;
                }
            }
        }
        let mut mean = vec![0.0; cols];
        let mut std = vec![1.0; cols];
        for j in 0..cols {
            if binary[j] || n == 0 {
                continue;
            }
            let m = sum[j] / n as f64;
            let var = (sumsq[j] / n as f64 - m * m).max(0.0);
            let s = var.sqrt();
            mean[j] = m;
            std[j] = if s < 1e-12 { 1.0 } else { s };
        }
        Normalization { mean, std }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(j, &v)| (v - self.mean[j]) / self.std[j]).collect()
    }
}

/// Training hyperparameters. Batches are whole pieces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> TrainingConfig {
        TrainingConfig {
            learning_rate: 1e-3,
            max_epochs: 500,
            patience: 25,
            validation_fraction: 0.15,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), RegressorError> {
        if !(self.learning_rate > 0.0) {
            return Err(RegressorError::Config { reason: "learning_rate must be > 0".to_string() });
        }
        if self.max_epochs == 0 {
            return Err(RegressorError::Config { reason: "max_epochs must be >= 1".to_string() });
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 0.5) {
            return Err(RegressorError::Config {
                reason: "validation_fraction must lie in (0, 0.5)".to_string(),
            });
        }
        if self.patience > self.max_epochs {
            return Err(RegressorError::Config { reason: "patience must not exceed max_epochs".to_string() });
        }
        Ok(())
    }
}

/// Loss record for one training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// The bidirectional LSTM with its flat parameter vector.
///
/// Layout per direction (forward, then backward): input weights [4H x D],
/// recurrent weights [4H x H], bias [4H], with gate rows ordered input,
/// forget, cell-candidate, output. After both directions: the output head
/// [2H] and its bias. Gradient, optimizer, and serialization code all
/// address parameters through this one layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regressor {
    pub input_dim: usize,
    pub hidden: usize,
    pub seed: u64,
    pub params: Vec<f64>,
    pub norm: Option<Normalization>,
}

/// Serialized model file: the regressor plus the metadata needed to apply
/// it to a fresh corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorBundle {
    pub version: u32,
    pub feature_set: FeatureSet,
    pub target: TargetKind,
    pub training: TrainingConfig,
    pub regressor: Regressor,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-direction activations in traversal order.
pub(crate) struct DirectionTrace {
    i: Vec<Vec<f64>>,
    f: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    o: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    tc: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
}

/// Everything the backward pass needs from a forward run.
pub(crate) struct ForwardTrace {
    x: Vec<Vec<f64>>,
    dirs: [DirectionTrace; 2],
    pub(crate) preds: Vec<f64>,
}

/// Number of parameters for the given shape.
pub fn param_count(input_dim: usize, hidden: usize) -> usize {
    let g = 4 * hidden;
    2 * (g * input_dim + g * hidden + g) + 2 * hidden + 1
}

/// Fresh regressor with uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] weights,
/// forget-gate biases at 1, and everything else zero-biased.
pub fn init_regressor(input_dim: usize, hidden: usize, seed: u64) -> Result<Regressor, RegressorError> {
    if input_dim == 0 || hidden == 0 {
        return Err(RegressorError::Config { reason: "input_dim and hidden must be >= 1".to_string() });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let g = 4 * hidden;
    let mut params = Vec::with_capacity(param_count(input_dim, hidden));
    for _dir in 0..2 {
        let bound_ih = 1.0 / (input_dim as f64).sqrt();
        for _ in 0..g * input_dim {
            params.push(rng.random_range(-bound_ih..bound_ih));
        }
        let bound_hh = 1.0 / (hidden as f64).sqrt();
        for _ in 0..g * hidden {
            params.push(rng.random_range(-bound_hh..bound_hh));
        }
        for r in 0..g {
            params.push(if (hidden..2 * hidden).contains(&r) { 1.0 } else { 0.0 });
        }
    }
    let bound_out = 1.0 / (2.0 * hidden as f64).sqrt();
    for _ in 0..2 * hidden {
        params.push(rng.random_range(-bound_out..bound_out));
    }
    params.push(0.0);
    Ok(Regressor { input_dim, hidden, seed, params, norm: None })
}

impl Regressor {
    fn dir_block(&self) -> usize {
        let g = 4 * self.hidden;
        g * self.input_dim + g * self.hidden + g
    }

    fn off_w_ih(&self, dir: usize) -> usize {
        dir * self.dir_block()
    }

    fn off_w_hh(&self, dir: usize) -> usize {
        dir * self.dir_block() + 4 * self.hidden * self.input_dim
    }

    fn off_b(&self, dir: usize) -> usize {
        dir * self.dir_block() + 4 * self.hidden * (self.input_dim + self.hidden)
    }

    fn off_w_out(&self) -> usize {
        2 * self.dir_block()
    }

    fn off_b_out(&self) -> usize {
        2 * self.dir_block() + 2 * self.hidden
    }

    /// Applies the stored normalization (identity when none is fitted)
    /// after checking the column count.
    pub fn normalize_matrix(&self, m: &FeatureMatrix) -> Result<Vec<Vec<f64>>, RegressorError> {
        if m.n_cols() != self.input_dim {
            return Err(RegressorError::Shape {
                reason: format!(
                    "matrix for piece `{}` has {} columns, model expects {}",
                    m.piece_id,
                    m.n_cols(),
                    self.input_dim
                ),
            });
        }
        Ok(match &self.norm {
            Some(norm) => m.rows.iter().map(|r| norm.apply(r)).collect(),
            None => m.rows.clone(),
        })
    }

    fn run_direction(&self, dir: usize, rows: &[Vec<f64>]) -> DirectionTrace {
        let t_len = rows.len();
        let h_dim = self.hidden;
        let g = 4 * h_dim;
        let w_ih = self.off_w_ih(dir);
        let w_hh = self.off_w_hh(dir);
        let b = self.off_b(dir);
        let mut trace = DirectionTrace {
            i: Vec::with_capacity(t_len),
            f: Vec::with_capacity(t_len),
            g: Vec::with_capacity(t_len),
            o: Vec::with_capacity(t_len),
            c: Vec::with_capacity(t_len),
            tc: Vec::with_capacity(t_len),
            h: Vec::with_capacity(t_len),
        };
        let mut h_prev = vec![0.0; h_dim];
        let mut c_prev = vec![0.0; h_dim];
        for s in 0..t_len {
            let tau = if dir == 0 { s } else { t_len - 1 - s };
            let x = &rows[tau];
            let mut z = vec![0.0; g];
            for (r, zr) in z.iter_mut().enumerate() {
                let mut acc = self.params[b + r];
                let wi = w_ih + r * self.input_dim;
                for (cix, &xv) in x.iter().enumerate() {
                    acc += self.params[wi + cix] * xv;
                }
                let wh = w_hh + r * h_dim;
                for (j, &hv) in h_prev.iter().enumerate() {
                    acc += self.params[wh + j] * hv;
                }
                *zr = acc;
            }
            let gi: Vec<f64> = (0..h_dim).map(|k| sigmoid(z[k])).collect();
            let gf: Vec<f64> = (0..h_dim).map(|k| sigmoid(z[h_dim + k])).collect();
            let gg: Vec<f64> = (0..h_dim).map(|k| z[2 * h_dim + k].tanh()).collect();
            let go: Vec<f64> = (0..h_dim).map(|k| sigmoid(z[3 * h_dim + k])).collect();
            let c: Vec<f64> = (0..h_dim).map(|k| gf[k] * c_prev[k] + gi[k] * gg[k]).collect();
            let tc: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
            let h: Vec<f64> = (0..h_dim).map(|k| go[k] * tc[k]).collect();
            h_prev.clone_from(&h);
            c_prev.clone_from(&c);
            trace.i.push(gi);
            trace.f.push(gf);
            trace.g.push(gg);
            trace.o.push(go);
            trace.c.push(c);
            trace.tc.push(tc);
            trace.h.push(h);
        }
        trace
    }

    /// Full forward pass over pre-normalized rows, keeping activations.
    pub(crate) fn trace_from_normalized(&self, rows: &[Vec<f64>]) -> ForwardTrace {
        let t_len = rows.len();
        let fwd = self.run_direction(0, rows);
        let bwd = self.run_direction(1, rows);
        let w_out = self.off_w_out();
        let b_out = self.off_b_out();
        let h_dim = self.hidden;
        let preds: Vec<f64> = (0..t_len)
            .map(|t| {
                let mut acc = self.params[b_out];
                for k in 0..h_dim {
                    acc += self.params[w_out + k] * fwd.h[t][k];
                    acc += self.params[w_out + h_dim + k] * bwd.h[t_len - 1 - t][k];
                }
                acc
            })
            .collect();
        ForwardTrace { x: rows.to_vec(), dirs: [fwd, bwd], preds }
    }

    /// Predictions over pre-normalized rows.
    pub fn forward_from_normalized(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        self.trace_from_normalized(rows).preds
    }

    /// Predictions for a feature matrix (normalizing internally).
    pub fn forward(&self, m: &FeatureMatrix) -> Result<Vec<f64>, RegressorError> {
        Ok(self.forward_from_normalized(&self.normalize_matrix(m)?))
    }

    /// Backpropagation through time from per-step output gradients.
    /// Returns gradients for every parameter and for every (normalized)
    /// input entry.
    pub(crate) fn backward(&self, trace: &ForwardTrace, dy: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let t_len = trace.x.len();
        let h_dim = self.hidden;
        let g = 4 * h_dim;
        let mut grads = vec![0.0; self.params.len()];
        let mut dx = vec![vec![0.0; self.input_dim]; t_len];
        let w_out = self.off_w_out();
        let b_out = self.off_b_out();
        for t in 0..t_len {
            for k in 0..h_dim {
                grads[w_out + k] += dy[t] * trace.dirs[0].h[t][k];
                grads[w_out + h_dim + k] += dy[t] * trace.dirs[1].h[t_len - 1 - t][k];
            }
            grads[b_out] += dy[t];
        }
        for dir in 0..2 {
            let tr = &trace.dirs[dir];
            let w_ih = self.off_w_ih(dir);
            let w_hh = self.off_w_hh(dir);
            let b = self.off_b(dir);
            let mut dh_carry = vec![0.0; h_dim];
            let mut dc_carry = vec![0.0; h_dim];
            for s in (0..t_len).rev() {
                let tau = if dir == 0 { s } else { t_len - 1 - s };
                let mut dz = vec![0.0; g];
                for k in 0..h_dim {
                    let dh = dy[tau] * self.params[w_out + dir * h_dim + k] + dh_carry[k];
                    let o = tr.o[s][k];
                    let tc = tr.tc[s][k];
                    let dc = dh * o * (1.0 - tc * tc) + dc_carry[k];
                    let i = tr.i[s][k];
                    let f = tr.f[s][k];
                    let gg = tr.g[s][k];
                    let c_prev = if s == 0 { 0.0 } else { tr.c[s - 1][k] };
                    let d_o = dh * tc;
                    let d_i = dc * gg;
                    let d_g = dc * i;
                    let d_f = dc * c_prev;
                    dz[k] = d_i * i * (1.0 - i);
                    dz[h_dim + k] = d_f * f * (1.0 - f);
                    dz[2 * h_dim + k] = d_g * (1.0 - gg * gg);
                    dz[3 * h_dim + k] = d_o * o * (1.0 - o);
                    dc_carry[k] = dc * f;
                }
                let x = &trace.x[tau];
                for (r, &dzr) in dz.iter().enumerate() {
                    grads[b + r] += dzr;
                    let wi = w_ih + r * self.input_dim;
                    for (cix, &xv) in x.iter().enumerate() {
                        grads[wi + cix] += dzr * xv;
                        dx[tau][cix] += self.params[wi + cix] * dzr;
                    }
                    let wh = w_hh + r * h_dim;
                    if s > 0 {
                        for k in 0..h_dim {
                            grads[wh + k] += dzr * tr.h[s - 1][k];
                        }
                    }
                }
                for k in 0..h_dim {
                    let mut acc = 0.0;
                    for (r, &dzr) in dz.iter().enumerate() {
                        acc += self.params[w_hh + r * h_dim + k] * dzr;
                    }
                    dh_carry[k] = acc;
                }
            }
        }
        (grads, dx)
    }

    fn check_target(&self, m: &FeatureMatrix, target: &TargetSeries) -> Result<(), RegressorError> {
        if m.n_rows() != target.values.len() {
            return Err(RegressorError::Shape {
                reason: format!(
                    "piece `{}`: {} feature rows vs {} target values",
                    m.piece_id,
                    m.n_rows(),
                    target.values.len()
                ),
            });
        }
        Ok(())
    }

    /// Mean squared error over the piece.
    pub fn loss(&self, m: &FeatureMatrix, target: &TargetSeries) -> Result<f64, RegressorError> {
        self.check_target(m, target)?;
        let preds = self.forward(m)?;
        let n = preds.len() as f64;
        Ok(preds.iter().zip(&target.values).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / n)
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn gradients(&self, m: &FeatureMatrix, target: &TargetSeries) -> Result<(Vec<f64>, f64), RegressorError> {
        self.check_target(m, target)?;
        let rows = self.normalize_matrix(m)?;
        let trace = self.trace_from_normalized(&rows);
        let n = trace.preds.len() as f64;
        let loss = trace.preds.iter().zip(&target.values).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / n;
        let dy: Vec<f64> =
            trace.preds.iter().zip(&target.values).map(|(p, y)| 2.0 * (p - y) / n).collect();
        let (grads, _) = self.backward(&trace, &dy);
        Ok((grads, loss))
    }

    /// Max relative disagreement between analytic gradients and central
    /// finite differences at every parameter.
    pub fn grad_check(&self, m: &FeatureMatrix, target: &TargetSeries, epsilon: f64) -> Result<f64, RegressorError> {
        let (analytic, _) = self.gradients(m, target)?;
        let mut probe = self.clone();
        let mut worst = 0.0f64;
        for k in 0..probe.params.len() {
            let orig = probe.params[k];
            probe.params[k] = orig + epsilon;
            let lp = probe.loss(m, target)?;
            probe.params[k] = orig - epsilon;
            let lm = probe.loss(m, target)?;
            probe.params[k] = orig;
            let numeric = (lp - lm) / (2.0 * epsilon);
            let err = (analytic[k] - numeric).abs() / (analytic[k].abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
        Ok(worst)
    }
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    fn new(n: usize) -> AdamState {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t as i32);
        let c2 = 1.0 - B2.powi(self.t as i32);
        for k in 0..params.len() {
            self.m[k] = B1 * self.m[k] + (1.0 - B1) * grads[k];
            self.v[k] = B2 * self.v[k] + (1.0 - B2) * grads[k] * grads[k];
            let mhat = self.m[k] / c1;
            let vhat = self.v[k] / c2;
            params[k] -= lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}

/// Trains with Adam over whole-piece batches in seeded shuffled order.
///
/// A seeded split holds out round(validation_fraction * pieces) pieces;
/// when that rounds to zero validation is disabled and the run lasts all
/// epochs tracking the best training loss instead. Normalization is
/// fitted on the supplied pieces before training and stored in the model.
pub fn train(
    mut model: Regressor,
    pieces: &[(FeatureMatrix, TargetSeries)],
    config: &TrainingConfig,
) -> Result<(Regressor, Vec<EpochLoss>), RegressorError> {
    config.validate()?;
    if pieces.is_empty() {
        return Err(RegressorError::EmptyTrainingSet);
    }
    for (m, t) in pieces {
        model.check_target(m, t)?;
        if m.n_cols() != model.input_dim {
            return Err(RegressorError::Shape {
                reason: format!(
                    "matrix for piece `{}` has {} columns, model expects {}",
                    m.piece_id,
                    m.n_cols(),
                    model.input_dim
                ),
            });
        }
    }
    model.norm = Some(Normalization::fit(pieces.iter().map(|(m, _)| m)));

    let mut order: Vec<usize> = (0..pieces.len()).collect();
    let mut split_rng = ChaCha20Rng::seed_from_u64(mix_seed(config.seed, SEED_TAG_SPLIT));
    order.shuffle(&mut split_rng);
    let n_val = (config.validation_fraction * pieces.len() as f64).round() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);

    let mut adam = AdamState::new(model.params.len());
    let mut epoch_rng = ChaCha20Rng::seed_from_u64(mix_seed(config.seed, SEED_TAG_EPOCH));
    let mut best_params = model.params.clone();
    let mut best_metric = f64::INFINITY;
    let mut since_best = 0usize;
    let mut history = Vec::new();
    for epoch in 0..config.max_epochs {
        let mut idx = train_idx.to_vec();
        idx.shuffle(&mut epoch_rng);
        let mut loss_sum = 0.0;
        for &i in &idx {
            let (grads, loss) = model.gradients(&pieces[i].0, &pieces[i].1)?;
            if !loss.is_finite() {
                return Err(RegressorError::Divergence { epoch });
            }
            loss_sum += loss;
            adam.step(&mut model.params, &grads, config.learning_rate);
        }
        let train_loss = loss_sum / idx.len() as f64;
        let val_loss = if val_idx.is_empty() {
            None
        } else {
            let mut s = 0.0;
            for &i in val_idx {
                s += model.loss(&pieces[i].0, &pieces[i].1)?;
            }
            Some(s / val_idx.len() as f64)
        };
        if let Some(v) = val_loss {
            if !v.is_finite() {
                return Err(RegressorError::Divergence { epoch });
            }
        }
        history.push(EpochLoss { epoch, train_loss, val_loss });
        let metric = val_loss.unwrap_or(train_loss);
        if metric < best_metric {
            best_metric = metric;
            best_params.clone_from(&model.params);
            since_best = 0;
        } else {
            since_best += 1;
            if val_loss.is_some() && since_best >= config.patience {
                break;
            }
        }
    }
    model.params = best_params;
    Ok((model, history))
}
