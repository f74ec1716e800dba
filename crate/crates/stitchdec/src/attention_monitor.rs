//! Back-jump detection from source-target attention.
//!
//! Each decode step carries a multi-head attention distribution over the
//! visible frames. Averaging the heads gives a single distribution `a_i(t)`;
//! comparing it with the previous step's distribution tells whether the
//! decoder has jumped backwards, i.e. how much of the previous step's
//! attention mass lies strictly ahead of the current step's:
//!
//! ```text
//! p_jump(i) = sum_t a_i(t) * sum_{tau=1..T_b-t} a_{i-1}(t + tau)
//! ```
//!
//! A large `p_jump` means step `i` is re-reading frames that step `i-1` had
//! already moved past, which is the signature of a hypothesis that overran
//! the available context and started duplicating itself.

use std::sync::Arc;

use crate::error::{Error, Result};

const HEAD_SUM_TOLERANCE: f64 = 1e-6;

/// Attention recorded for one decode step of one hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSnapshot {
    step_index: usize,
    block_index: usize,
    per_head: Vec<Vec<f64>>,
    averaged: Vec<f64>,
}

impl AttentionSnapshot {
    /// Validates the per-head rows and precomputes their average.
    pub fn new(step_index: usize, block_index: usize, per_head: Vec<Vec<f64>>) -> Result<Self> {
        for (m, head) in per_head.iter().enumerate() {
            let mut sum = 0.0;
            for &w in head {
                if w < 0.0 || w.is_nan() {
                    return Err(Error::InvalidAttention(format!(
                        "head {m} holds weight {w}, expected nonnegative"
                    )));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > HEAD_SUM_TOLERANCE {
                return Err(Error::InvalidAttention(format!("head {m} sums to {sum}, expected 1")));
            }
        }
        let averaged = average_heads(&per_head)?;
        Ok(Self { step_index, block_index, per_head, averaged })
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn block_index(&self) -> usize {
        self.block_index
    }

    pub fn heads(&self) -> usize {
        self.per_head.len()
    }

    pub fn per_head(&self) -> &[Vec<f64>] {
        &self.per_head
    }

    /// Head-averaged distribution over frames `1..=T_b`.
    pub fn averaged(&self) -> &[f64] {
        &self.averaged
    }

    pub fn frames(&self) -> usize {
        self.averaged.len()
    }
}

/// Mean of the per-head distributions: `(1/M) * sum_m a_m(t)`.
pub fn average_heads(per_head: &[Vec<f64>]) -> Result<Vec<f64>> {
    let heads = per_head.len();
    if heads == 0 {
        return Err(Error::InvalidAttention("no attention heads".into()));
    }
    let frames = per_head[0].len();
    let mut averaged = vec![0.0; frames];
    for head in per_head {
        if head.len() != frames {
            return Err(Error::LengthMismatch { expected: frames, got: head.len() });
        }
        for (avg, w) in averaged.iter_mut().zip(head) {
            *avg += w;
        }
    }
    let scale = 1.0 / heads as f64;
    averaged.iter_mut().for_each(|avg| *avg *= scale);
    Ok(averaged)
}

/// Probability that the previous step attended strictly ahead of the
/// current step.
///
/// `previous` may cover fewer frames than `current` (it was recorded against
/// a smaller block view); the missing tail is treated as zero mass.
pub fn back_jump_probability(current: &[f64], previous: &[f64]) -> Result<f64> {
    let frames = current.len();
    if previous.len() > frames {
        return Err(Error::LengthMismatch { expected: frames, got: previous.len() });
    }
    // suffix[t] = mass of `previous` on frames strictly after t (0-based).
    let mut suffix = vec![0.0; frames + 1];
    for t in (0..frames).rev() {
        let prev = if t < previous.len() { previous[t] } else { 0.0 };
        suffix[t] = suffix[t + 1] + prev;
    }
    let p: f64 = current.iter().enumerate().map(|(t, a)| a * suffix[t + 1]).sum();
    Ok(p.clamp(0.0, 1.0))
}

/// Outcome of the back-stitch test for a single hypothesis.
///
/// `jump_triggered` holds exactly when `probability > threshold`; the
/// end-of-sequence token is a separate trigger that does not fabricate a
/// jump probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackJumpDecision {
    pub probability: f64,
    pub threshold: f64,
    pub jump_triggered: bool,
    pub eos_triggered: bool,
}

impl BackJumpDecision {
    /// Whether the hypothesis should be thrown back to the previous step.
    pub fn triggered(&self) -> bool {
        self.jump_triggered || self.eos_triggered
    }
}

/// Runs the back-stitch test for a hypothesis that just produced a step.
///
/// The first decode step has no previous attention and therefore a jump
/// probability of zero.
pub fn detect_back_stitch(
    current: &AttentionSnapshot,
    previous: Option<&Arc<AttentionSnapshot>>,
    last_token_is_eos: bool,
    upsilon: f64,
) -> Result<BackJumpDecision> {
    let probability = match previous {
        Some(prev) => back_jump_probability(current.averaged(), prev.averaged())?,
        None => 0.0,
    };
    Ok(BackJumpDecision {
        probability,
        threshold: upsilon,
        jump_triggered: probability > upsilon,
        eos_triggered: last_token_is_eos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force_jump(current: &[f64], previous: &[f64]) -> f64 {
        let frames = current.len();
        let prev = |t: usize| if t < previous.len() { previous[t] } else { 0.0 };
        let mut p = 0.0;
        for (t, &c) in current.iter().enumerate() {
            for tau in t + 1..frames {
                p += c * prev(tau);
            }
        }
        p
    }

    #[test]
    fn averaging_identical_heads_is_identity() {
        let head = vec![0.2, 0.3, 0.5];
        let avg = average_heads(&[head.clone(), head.clone(), head.clone()]).unwrap();
        for (a, b) in avg.iter().zip(&head) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn averaging_mirrored_one_hots_is_uniform() {
        let avg = average_heads(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((avg[0] - 0.5).abs() < 1e-12);
        assert!((avg[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn averaging_rejects_empty_and_ragged_input() {
        assert!(average_heads(&[]).is_err());
        assert!(average_heads(&[vec![1.0], vec![0.5, 0.5]]).is_err());
    }

    #[test]
    fn jump_is_zero_when_current_sits_on_final_frame() {
        let p = back_jump_probability(&[0.0, 0.0, 1.0], &[0.1, 0.2, 0.7]).unwrap();
        assert_eq!(p, 0.0);
    }

    #[test]
    fn jump_is_certain_when_previous_sits_fully_ahead() {
        let p = back_jump_probability(&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]).unwrap();
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jump_matches_hand_worked_overlap() {
        // a_i = [0.5, 0.5, 0], a_{i-1} = [0, 0.5, 0.5]:
        //   0.5 * (0.5 + 0.5) + 0.5 * 0.5 = 0.75
        let p = back_jump_probability(&[0.5, 0.5, 0.0], &[0.0, 0.5, 0.5]).unwrap();
        assert!((p - 0.75).abs() < 1e-12);
        assert!((brute_force_jump(&[0.5, 0.5, 0.0], &[0.0, 0.5, 0.5]) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn shorter_previous_is_zero_padded() {
        let full = back_jump_probability(&[0.4, 0.3, 0.3], &[1.0, 0.0, 0.0]).unwrap();
        let padded = back_jump_probability(&[0.4, 0.3, 0.3], &[1.0]).unwrap();
        assert!((full - padded).abs() < 1e-12);
    }

    #[test]
    fn longer_previous_is_rejected() {
        assert!(back_jump_probability(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn snapshot_validates_head_rows() {
        assert!(AttentionSnapshot::new(1, 1, vec![vec![0.5, 0.5]]).is_ok());
        assert!(AttentionSnapshot::new(1, 1, vec![vec![0.5, 0.4]]).is_err());
        assert!(AttentionSnapshot::new(1, 1, vec![vec![1.5, -0.5]]).is_err());
    }

    #[test]
    fn detection_trips_on_eos_regardless_of_attention() {
        let current = AttentionSnapshot::new(2, 1, vec![vec![0.0, 1.0]]).unwrap();
        let previous = Arc::new(AttentionSnapshot::new(1, 1, vec![vec![1.0, 0.0]]).unwrap());
        let d = detect_back_stitch(&current, Some(&previous), true, 0.5).unwrap();
        assert!(d.eos_triggered);
        assert!(!d.jump_triggered);
        assert!(d.triggered());
    }

    #[test]
    fn detection_threshold_is_strict() {
        let current = AttentionSnapshot::new(2, 1, vec![vec![0.5, 0.5, 0.0]]).unwrap();
        let previous = Arc::new(AttentionSnapshot::new(1, 1, vec![vec![0.0, 0.5, 0.5]]).unwrap());
        let tripped = detect_back_stitch(&current, Some(&previous), false, 0.5).unwrap();
        assert!((tripped.probability - 0.75).abs() < 1e-12);
        assert!(tripped.triggered());

        let exact = detect_back_stitch(&current, Some(&previous), false, 0.75).unwrap();
        assert!(!exact.triggered(), "probability equal to the threshold must not trigger");
    }

    #[test]
    fn first_step_has_zero_jump_probability() {
        let current = AttentionSnapshot::new(1, 1, vec![vec![1.0, 0.0]]).unwrap();
        let d = detect_back_stitch(&current, None, false, 0.5).unwrap();
        assert_eq!(d.probability, 0.0);
        assert!(!d.triggered());
    }

    fn arb_distribution(frames: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.001f64..1.0, frames).prop_map(|raw| {
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / sum).collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn suffix_sum_matches_brute_force(
            frames in 1usize..64,
            seed_cur in proptest::collection::vec(0.001f64..1.0, 64),
            seed_prev in proptest::collection::vec(0.001f64..1.0, 64),
        ) {
            let norm = |raw: &[f64]| {
                let sum: f64 = raw[..frames].iter().sum();
                raw[..frames].iter().map(|x| x / sum).collect::<Vec<_>>()
            };
            let current = norm(&seed_cur);
            let previous = norm(&seed_prev);
            let fast = back_jump_probability(&current, &previous).unwrap();
            let brute = brute_force_jump(&current, &previous);
            prop_assert!((fast - brute).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&fast));
        }

        #[test]
        fn forward_moving_one_hots_never_jump(frames in 2usize..32, step in 1usize..31) {
            let step = step.min(frames - 1);
            let mut previous = vec![0.0; frames];
            previous[step - 1] = 1.0;
            let mut current = vec![0.0; frames];
            current[step] = 1.0;
            let p = back_jump_probability(&current, &previous).unwrap();
            prop_assert_eq!(p, 0.0);
        }

        #[test]
        fn head_order_does_not_change_average(
            head_a in arb_distribution(12),
            head_b in arb_distribution(12),
            head_c in arb_distribution(12),
        ) {
            let fwd = average_heads(&[head_a.clone(), head_b.clone(), head_c.clone()]).unwrap();
            let rev = average_heads(&[head_c, head_b, head_a]).unwrap();
            for (x, y) in fwd.iter().zip(&rev) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
