//! Endpoint prediction from CTC posteriors.
//!
//! The CTC branch of the encoder emits a per-frame posterior over the
//! vocabulary (including blank). A non-blank token `y` is *emitted* at frame
//! `t` when the posterior switches onto it, so the emission probability is
//!
//! ```text
//! e_y(t) = (1 - p_{t-1}(y)) * p_t(y)
//! ```
//!
//! with a virtual frame `t = 0` that is blank with certainty. Summing the
//! non-blank emission mass of the frames after `t` gives the number of
//! tokens still expected inside the current block:
//!
//! ```text
//! remaining(t) = sum_{tau=1..T_b-t} sum_{y != blank} e_y(t + tau)
//! ```
//!
//! The decoder weights `remaining` by its attention distribution to get the
//! expected number of tokens left to decode; once that expectation drops
//! below the threshold `nu` the block is considered exhausted.

use crate::error::{Error, Result};

/// Per-frame CTC posterior for the visible part of an utterance.
///
/// Row `t` (1-based) is a probability distribution over the vocabulary,
/// blank included. Rows are validated to sum to 1 within 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcPosteriorBlock {
    frames: usize,
    vocab_size: usize,
    blank_id: usize,
    data: Vec<f64>,
}

const ROW_SUM_TOLERANCE: f64 = 1e-6;

impl CtcPosteriorBlock {
    pub fn from_rows(rows: Vec<Vec<f64>>, blank_id: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidPosterior("no frames".into()));
        }
        let vocab_size = rows[0].len();
        if vocab_size < 2 {
            return Err(Error::InvalidPosterior(format!(
                "vocabulary must hold blank plus at least one token, got {vocab_size}"
            )));
        }
        if blank_id >= vocab_size {
            return Err(Error::InvalidPosterior(format!(
                "blank id {blank_id} outside vocabulary of size {vocab_size}"
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * vocab_size);
        for (t, row) in rows.iter().enumerate() {
            if row.len() != vocab_size {
                return Err(Error::LengthMismatch { expected: vocab_size, got: row.len() });
            }
            let mut sum = 0.0;
            for &p in row {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidPosterior(format!(
                        "probability {p} at frame {} outside [0, 1]",
                        t + 1
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidPosterior(format!(
                    "frame {} sums to {sum}, expected 1",
                    t + 1
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self { frames: rows.len(), vocab_size, blank_id, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn blank_id(&self) -> usize {
        self.blank_id
    }

    /// Posterior of token `y` at frame `t` (1-based).
    pub fn prob(&self, t: usize, y: usize) -> f64 {
        debug_assert!(t >= 1 && t <= self.frames);
        self.data[(t - 1) * self.vocab_size + y]
    }

    /// Distribution at frame `t` (1-based).
    pub fn row(&self, t: usize) -> &[f64] {
        debug_assert!(t >= 1 && t <= self.frames);
        let start = (t - 1) * self.vocab_size;
        &self.data[start..start + self.vocab_size]
    }
}

/// Emission matrix `e_y(t)`, one row per frame.
///
/// Frame 1 is computed against the virtual blank-certain frame 0, so
/// `e_y(1) = p_1(y)` for non-blank `y` and `e_blank(1) = 0`.
pub fn token_emission(posterior: &CtcPosteriorBlock) -> Vec<Vec<f64>> {
    let v = posterior.vocab_size();
    let blank = posterior.blank_id();
    let mut emission = Vec::with_capacity(posterior.frames());
    for t in 1..=posterior.frames() {
        let mut row = Vec::with_capacity(v);
        for y in 0..v {
            let prev = if t == 1 {
                if y == blank {
                    1.0
                } else {
                    0.0
                }
            } else {
                posterior.prob(t - 1, y)
            };
            row.push((1.0 - prev) * posterior.prob(t, y));
        }
        emission.push(row);
    }
    emission
}

/// Tokens still expected after each frame, as a single suffix-sum pass.
///
/// Returns `T_b + 1` entries: `remaining[t]` is the non-blank emission mass
/// of frames `t+1..=T_b`, so `remaining[0]` counts the whole block and
/// `remaining[T_b]` is exactly zero.
pub fn remaining_tokens(emission: &[Vec<f64>], blank_id: usize) -> Vec<f64> {
    let frames = emission.len();
    let mut remaining = vec![0.0; frames + 1];
    for t in (0..frames).rev() {
        let mass: f64 =
            emission[t].iter().enumerate().filter(|(y, _)| *y != blank_id).map(|(_, e)| e).sum();
        // remaining[t] covers frames t+1.. in 1-based terms; emission[t] is frame t+1.
        remaining[t] = remaining[t + 1] + mass;
    }
    remaining
}

/// Attention-weighted expectation of the remaining-token counts.
///
/// `attention` is the averaged attention over frames `1..=T_b` and is
/// matched against `remaining[1..=T_b]`.
pub fn expected_remaining(remaining: &[f64], attention: &[f64]) -> Result<f64> {
    if remaining.len() != attention.len() + 1 {
        return Err(Error::LengthMismatch { expected: attention.len() + 1, got: remaining.len() });
    }
    Ok(attention.iter().zip(&remaining[1..]).map(|(a, r)| a * r).sum())
}

/// Strict comparison against the endpoint threshold `nu`.
pub fn endpoint_reached(expectation: f64, nu: f64) -> bool {
    expectation < nu
}

/// Emission matrix and remaining-token counts for one block, built together.
#[derive(Debug, Clone)]
pub struct EmissionProfile {
    emission: Vec<Vec<f64>>,
    remaining: Vec<f64>,
}

impl EmissionProfile {
    pub fn new(posterior: &CtcPosteriorBlock) -> Self {
        let emission = token_emission(posterior);
        let remaining = remaining_tokens(&emission, posterior.blank_id());
        Self { emission, remaining }
    }

    pub fn emission(&self) -> &[Vec<f64>] {
        &self.emission
    }

    pub fn remaining(&self) -> &[f64] {
        &self.remaining
    }
}
