//! Deterministic synthetic corpora for end-to-end testing.
//!
//! Two generation rules:
//! - `vel-linear`: velocity is a noiseless linear function of two score
//!   features (highest pitch and bar phase), quantized to integer MIDI
//!   velocity. Suitable for checking that the pipeline can recover a
//!   known feature-target relation.
//! - `ic-monotone`: the melody is an order-1 Markov chain (a mostly
//!   deterministic pitch cycle with occasional jumps) and the performed
//!   beat periods follow a walk whose increments are proportional to the
//!   true transition information content, so tempo change is a monotone
//!   function of unexpectedness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, MeterClass, MeterSpan, Note, Piece};
use crate::mix_seed;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("configuration error: {reason}")]
    Config { reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthRule {
    VelLinear,
    IcMonotone,
}

impl SynthRule {
    pub const ALL: [SynthRule; 2] = [SynthRule::VelLinear, SynthRule::IcMonotone];

    pub fn name(self) -> &'static str {
        match self {
            SynthRule::VelLinear => "vel-linear",
            SynthRule::IcMonotone => "ic-monotone",
        }
    }

    pub fn parse(s: &str) -> Option<SynthRule> {
        SynthRule::ALL.into_iter().find(|r| r.name() == s)
    }
}

impl std::fmt::Display for SynthRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub rule: SynthRule,
    pub n_pieces: usize,
    pub min_onsets: usize,
    pub max_onsets: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig { rule: SynthRule::VelLinear, n_pieces: 20, min_onsets: 60, max_onsets: 120, seed: 0 }
    }
}

// vel-linear coefficients: VEL = A + B * pitch_h + C * b_phi.
pub const VEL_LINEAR_BASE: f64 = 0.25;
pub const VEL_LINEAR_PITCH: f64 = 0.4;
pub const VEL_LINEAR_PHASE: f64 = 0.2;

// ic-monotone process constants.
const IC_STATES: usize = 8;
const IC_BASE_PITCH: u8 = 60;
const IC_JUMP_PROB: f64 = 0.15;
const IC_WALK_STEP: f64 = 0.02;
const IC_BASE_PERIOD: f64 = 0.5;

/// Generates a deterministic corpus under the configured rule.
pub fn generate_corpus(config: &SynthConfig) -> Result<Corpus, SynthError> {
    if config.n_pieces == 0 {
        return Err(SynthError::Config { reason: "piece count must be >= 1".to_string() });
    }
    if config.min_onsets < 4 || config.min_onsets > config.max_onsets {
        return Err(SynthError::Config {
            reason: "onset range must satisfy 4 <= min <= max".to_string(),
        });
    }
    let pieces = (0..config.n_pieces)
        .map(|idx| {
            let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(config.seed, idx as u64));
            let n_onsets = rng.random_range(config.min_onsets..=config.max_onsets);
            match config.rule {
                SynthRule::VelLinear => vel_linear_piece(idx, n_onsets, &mut rng),
                SynthRule::IcMonotone => ic_monotone_piece(idx, n_onsets, &mut rng),
            }
        })
        .collect();
    Ok(Corpus { pieces })
}

fn meter_variant(idx: usize) -> (MeterSpan, f64) {
    match idx % 3 {
        0 => (
            MeterSpan { start_beat: 0.0, bar_length_beats: 4.0, classification: MeterClass::Duple },
            0.5,
        ),
        1 => (
            MeterSpan { start_beat: 0.0, bar_length_beats: 3.0, classification: MeterClass::Other },
            1.0,
        ),
        _ => (
            MeterSpan {
                start_beat: 0.0,
                bar_length_beats: 6.0,
                classification: MeterClass::CompoundDuple,
            },
            1.0,
        ),
    }
}

fn vel_linear_piece(idx: usize, n_onsets: usize, rng: &mut ChaCha20Rng) -> Piece {
    let (meter, step) = meter_variant(idx);
    let bar = meter.bar_length_beats;
    let mut pitch: i32 = 52 + rng.random_range(0..12);
    let mut notes = Vec::new();
    let mut perf_t = 0.0;
    for i in 0..n_onsets {
        let onset = i as f64 * step;
        pitch = (pitch + rng.random_range(-4..=4)).clamp(40, 90);
        let phase = (onset % bar) / bar;
        let level =
            VEL_LINEAR_BASE + VEL_LINEAR_PITCH * pitch as f64 / 127.0 + VEL_LINEAR_PHASE * phase;
        let velocity = ((level * 127.0).round() as i64).clamp(1, 127) as u8;
        notes.push(Note {
            onset_beats: onset,
            duration_beats: step,
            midi_pitch: pitch as u8,
            is_melody: true,
            perf_onset_sec: perf_t,
            perf_velocity: velocity,
        });
        if rng.random_range(0.0..1.0) < 0.3 {
            let bass = (pitch - rng.random_range(7..=19)).max(21) as u8;
            notes.push(Note {
                onset_beats: onset,
                duration_beats: step,
                midi_pitch: bass,
                is_melody: false,
                perf_onset_sec: perf_t,
                perf_velocity: velocity,
            });
        }
        // Mild deterministic tempo wobble keeps tempo targets non-constant.
        perf_t += step * 0.5 * (1.0 + 0.05 * ((i as f64) * 0.7).sin());
    }
    Piece {
        id: format!("vel-linear-{idx:03}"),
        anacrusis_beats: 0.0,
        meters: vec![meter],
        notes,
    }
}

/// The deterministic successor in the ic-monotone pitch cycle.
pub fn ic_cycle_next(state: usize) -> usize {
    (state + 1) % IC_STATES
}

/// Information content in bits of one observed ic-monotone transition.
pub fn ic_transition_bits(prev_pitch: u8, pitch: u8) -> f64 {
    let prev = (prev_pitch - IC_BASE_PITCH) as usize;
    let cur = (pitch - IC_BASE_PITCH) as usize;
    if cur == ic_cycle_next(prev) {
        -(1.0 - IC_JUMP_PROB).log2()
    } else {
        -(IC_JUMP_PROB / (IC_STATES - 1) as f64).log2()
    }
}

fn ic_monotone_piece(idx: usize, n_onsets: usize, rng: &mut ChaCha20Rng) -> Piece {
    let mut state = rng.random_range(0..IC_STATES);
    let mut pitches = vec![IC_BASE_PITCH + state as u8];
    let mut ics = vec![(IC_STATES as f64).log2()];
    for _ in 1..n_onsets {
        let cycle = ic_cycle_next(state);
        let next = if rng.random_range(0.0..1.0) < 1.0 - IC_JUMP_PROB {
            cycle
        } else {
            let j = rng.random_range(0..IC_STATES - 1);
            if j < cycle {
                j
            } else {
                j + 1
            }
        };
        pitches.push(IC_BASE_PITCH + next as u8);
        ics.push(ic_transition_bits(IC_BASE_PITCH + state as u8, IC_BASE_PITCH + next as u8));
        state = next;
    }
    // Beat-period walk: period_{i+1} - period_i tracks the deviation of
    // IC_i from its mean over the steps used, so the tempo derivative is a
    // positive multiple of unexpectedness. The walk telescopes back to 1.
    let n_steps = n_onsets - 2;
    let mean_ic: f64 = ics[..n_steps].iter().sum::<f64>() / n_steps as f64;
    let mut w = vec![1.0f64; n_onsets - 1];
    for i in 0..n_steps {
        w[i + 1] = w[i] + IC_WALK_STEP * (ics[i] - mean_ic);
    }
    let min_w = w.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_w < 0.15 {
        let shift = 0.15 - min_w;
        for v in &mut w {
            *v += shift;
        }
    }
    let mut notes = Vec::new();
    let mut perf_t = 0.0;
    for (i, &pitch) in pitches.iter().enumerate() {
        notes.push(Note {
            onset_beats: i as f64,
            duration_beats: 1.0,
            midi_pitch: pitch,
            is_melody: true,
            perf_onset_sec: perf_t,
            perf_velocity: 50 + ((i * 7) % 40) as u8,
        });
        if i < n_onsets - 1 {
            perf_t += IC_BASE_PERIOD * w[i];
        }
    }
    Piece {
        id: format!("ic-monotone-{idx:03}"),
        anacrusis_beats: 0.0,
        meters: vec![MeterSpan {
            start_beat: 0.0,
            bar_length_beats: 4.0,
            classification: MeterClass::Duple,
        }],
        notes,
    }
}

/// Returns a copy of the corpus with each piece's per-onset velocities
/// permuted across onsets (score content untouched). Breaks any
/// feature-velocity relation while preserving the velocity distribution.
pub fn permute_velocities(corpus: &Corpus, seed: u64) -> Corpus {
    let mut out = corpus.clone();
    for (idx, piece) in out.pieces.iter_mut().enumerate() {
        let mut onsets: Vec<f64> = Vec::new();
        for note in &piece.notes {
            if !onsets.contains(&note.onset_beats) {
                onsets.push(note.onset_beats);
            }
        }
        let mut group_vel: Vec<u8> = Vec::with_capacity(onsets.len());
        for &onset in &onsets {
            let v = piece
                .notes
                .iter()
                .filter(|n| n.onset_beats == onset)
                .map(|n| n.perf_velocity)
                .max()
                .expect("onset has notes");
            group_vel.push(v);
        }
        let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(seed, 0x9e + idx as u64));
        use rand::seq::SliceRandom;
        group_vel.shuffle(&mut rng);
        for note in &mut piece.notes {
            let gi = onsets.iter().position(|&o| o == note.onset_beats).expect("known onset");
            note.perf_velocity = group_vel[gi];
        }
    }
    out
}
