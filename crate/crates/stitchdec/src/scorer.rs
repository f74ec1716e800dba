//! Deterministic synthetic scorer.
//!
//! The decoder is exercised against fabricated model outputs instead of a
//! neural network: a scenario pins down the reference token sequence, the
//! frame at which each token is acoustically anchored, and how peaked the
//! fabricated distributions are. From that the scorer derives, for any
//! (prefix, visible block) pair:
//!
//! * next-token log probabilities concentrated on the reference token whose
//!   anchor frame is already visible, and
//! * a multi-head attention distribution centred on that anchor frame.
//!
//! When the decoder asks for a token whose anchor lies beyond the visible
//! frames, the attention mass piles up at the block edge and the
//! distribution goes flat with an end-of-sequence lean: decoding past the
//! evidence scores poorly and looks like the utterance ended. Misalignment
//! events additionally force a backward attention jump together with a
//! repeated token at a chosen step, which is the failure mode the back
//! stitch exists to catch.
//!
//! Everything is a pure function of (prefix, view, seed), so decoding is
//! reproducible bit for bit.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention_monitor::AttentionSnapshot;
use crate::block_stream::{BlockSchedule, EncoderBlockView};
use crate::ctc_endpoint::CtcPosteriorBlock;
use crate::error::{Error, Result};

pub type TokenId = u32;

/// Number of fabricated attention heads.
pub const ATTENTION_HEADS: usize = 4;

/// Probability left on `<eos>` while real evidence is still pending.
const EOS_FLOOR: f64 = 1e-12;

/// `<eos>` share when the decoder has run past the visible evidence.
const PREMATURE_EOS_MASS: f64 = 0.5;

/// Repeat-the-last-token share in the same situation.
const PREMATURE_REPEAT_MASS: f64 = 0.1;

/// Per-token probability left on everything except the repeat when a
/// misalignment event fires. The repeated token takes the whole remainder:
/// the event has to survive joint rescoring, so no alternative may sit
/// within reach of the beam.
const EVENT_JUNK_MASS: f64 = 1e-6;

/// Extra tokens past the reference before the scorer insists on `<eos>`.
const REFERENCE_SLACK: usize = 3;

/// Token inventory with the three reserved symbols.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    blank: TokenId,
    sos: TokenId,
    eos: TokenId,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, blank: TokenId, sos: TokenId, eos: TokenId) -> Result<Self> {
        let v = tokens.len();
        if v < 4 {
            return Err(Error::InvalidScenario(format!(
                "vocabulary needs blank, sos, eos and at least one content token, got {v} entries"
            )));
        }
        for (name, id) in [("blank", blank), ("sos", sos), ("eos", eos)] {
            if id as usize >= v {
                return Err(Error::InvalidScenario(format!(
                    "{name} id {id} outside vocabulary of size {v}"
                )));
            }
        }
        if blank == sos || blank == eos || sos == eos {
            return Err(Error::InvalidScenario(
                "blank, sos and eos must be three distinct ids".into(),
            ));
        }
        Ok(Self { tokens, blank, sos, eos })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn blank(&self) -> TokenId {
        self.blank
    }

    pub fn sos(&self) -> TokenId {
        self.sos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn label(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn labels(&self) -> &[String] {
        &self.tokens
    }

    /// Ids that an utterance can actually be made of.
    pub fn content_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.size() as TokenId)
            .filter(|&id| id != self.blank && id != self.sos && id != self.eos)
    }

    /// Space-joined labels, skipping the reserved symbols.
    pub fn text(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .filter(|&&id| id != self.blank && id != self.sos && id != self.eos)
            .map(|&id| self.label(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Forced scoring fault: at decode step `step` the fabricated attention
/// peaks `offset` frames behind the previous step's peak and the
/// distribution insists on repeating the last token. The fault is tied to
/// incomplete context, so it only fires while later blocks are still
/// outstanding; the full view decodes cleanly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MisalignmentEvent {
    pub step: usize,
    pub offset: usize,
}

/// One synthetic utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScenario {
    /// Reference sequence, trailing `<eos>` included.
    pub reference_tokens: Vec<TokenId>,
    /// Anchor frame of each reference token, strictly increasing, 1-based.
    pub alignment: Vec<usize>,
    /// Posterior mass on the anchored token at its anchor frame, in (0, 1].
    pub peakiness: f64,
    /// Standard deviation (in frames) of the fabricated attention.
    pub attention_width: f64,
    #[serde(default)]
    pub misalignment_events: Vec<MisalignmentEvent>,
    pub noise_seed: u64,
}

impl SyntheticScenario {
    pub fn validate(&self, vocab: &Vocabulary, total_frames: usize) -> Result<()> {
        let n = self.reference_tokens.len();
        if n == 0 {
            return Err(Error::InvalidScenario("empty reference".into()));
        }
        if *self.reference_tokens.last().unwrap() != vocab.eos() {
            return Err(Error::InvalidScenario("reference must end with eos".into()));
        }
        for (i, &tok) in self.reference_tokens.iter().enumerate() {
            if tok as usize >= vocab.size() {
                return Err(Error::InvalidScenario(format!(
                    "reference token {tok} outside vocabulary"
                )));
            }
            if tok == vocab.blank() || tok == vocab.sos() {
                return Err(Error::InvalidScenario(
                    "reference may not contain blank or sos".into(),
                ));
            }
            if tok == vocab.eos() && i + 1 != n {
                return Err(Error::InvalidScenario("eos may only appear last".into()));
            }
        }
        if self.alignment.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: self.alignment.len() });
        }
        for (i, &f) in self.alignment.iter().enumerate() {
            if f == 0 || f > total_frames {
                return Err(Error::InvalidScenario(format!(
                    "anchor frame {f} outside [1, {total_frames}]"
                )));
            }
            if i > 0 {
                if f <= self.alignment[i - 1] {
                    return Err(Error::InvalidScenario("anchor frames must increase".into()));
                }
                // A repeated token needs a blank frame between its anchors,
                // otherwise the two emissions fuse into one.
                if self.reference_tokens[i] == self.reference_tokens[i - 1]
                    && f - self.alignment[i - 1] < 2
                {
                    return Err(Error::InvalidScenario(
                        "repeated tokens need at least one frame between anchors".into(),
                    ));
                }
            }
        }
        if !(self.peakiness > 0.0 && self.peakiness <= 1.0) {
            return Err(Error::InvalidScenario(format!(
                "peakiness {} outside (0, 1]",
                self.peakiness
            )));
        }
        if !(self.attention_width.is_finite() && self.attention_width > 0.0) {
            return Err(Error::InvalidScenario(format!(
                "attention_width {} must be positive",
                self.attention_width
            )));
        }
        for ev in &self.misalignment_events {
            if ev.step < 2 {
                return Err(Error::InvalidScenario(
                    "misalignment events need a preceding step, so step must be >= 2".into(),
                ));
            }
            if ev.step > n {
                return Err(Error::InvalidScenario(format!(
                    "misalignment step {} past the reference length {n}",
                    ev.step
                )));
            }
            if ev.offset == 0 {
                return Err(Error::InvalidScenario("misalignment offset must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Scaled dot-product attention internals: one query per head, one key per
/// visible frame, weights `softmax(q . k / sqrt(d))`.
#[derive(Debug, Clone)]
pub struct MultiHeadProjection {
    dim: usize,
    queries: Vec<Vec<f64>>,
    keys: Vec<Vec<Vec<f64>>>,
}

impl MultiHeadProjection {
    pub fn new(queries: Vec<Vec<f64>>, keys: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if queries.is_empty() || queries.len() != keys.len() {
            return Err(Error::InvalidAttention(format!(
                "need one key set per query, got {} queries and {} key sets",
                queries.len(),
                keys.len()
            )));
        }
        let dim = queries[0].len();
        if dim == 0 {
            return Err(Error::InvalidAttention("zero-dimensional projection".into()));
        }
        for (m, (q, ks)) in queries.iter().zip(&keys).enumerate() {
            if q.len() != dim {
                return Err(Error::LengthMismatch { expected: dim, got: q.len() });
            }
            if ks.is_empty() {
                return Err(Error::InvalidAttention(format!("head {m} has no keys")));
            }
            for k in ks {
                if k.len() != dim {
                    return Err(Error::LengthMismatch { expected: dim, got: k.len() });
                }
            }
        }
        Ok(Self { dim, queries, keys })
    }

    pub fn heads(&self) -> usize {
        self.queries.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Per-head attention weights over the frames.
    pub fn weights(&self) -> Vec<Vec<f64>> {
        let scale = 1.0 / (self.dim as f64).sqrt();
        self.queries
            .iter()
            .zip(&self.keys)
            .map(|(q, ks)| {
                let scores: Vec<f64> = ks
                    .iter()
                    .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                softmax(&scores)
            })
            .collect()
    }
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// One decode step's model output.
#[derive(Debug, Clone)]
pub struct ScorerStepResult {
    /// Log probability per vocabulary entry; exponentials sum to one.
    pub log_probs: Vec<f64>,
    pub attention: Arc<AttentionSnapshot>,
}

/// Anything that can stand in for the model during decoding.
pub trait DecoderScorer {
    fn vocabulary(&self) -> &Vocabulary;

    /// Next-token distribution and attention for a prefix against a view.
    /// The prefix always starts with `<sos>`.
    fn step(&self, prefix: &[TokenId], view: &EncoderBlockView) -> Result<ScorerStepResult>;

    /// CTC posterior rows for the frames visible in `view`.
    fn ctc_posterior(&self, view: &EncoderBlockView) -> Result<CtcPosteriorBlock>;
}

/// Scenario-driven scorer; see the module docs for the behavioural model.
#[derive(Debug, Clone)]
pub struct SyntheticScorer {
    scenario: SyntheticScenario,
    vocab: Vocabulary,
    total_blocks: usize,
    /// Which reference token (if any) is anchored at each 1-based frame.
    anchored: Vec<Option<TokenId>>,
    seed: u64,
}

impl SyntheticScorer {
    /// `seed_mix` is folded into the scenario's own noise seed so a whole
    /// run can be re-rolled without editing scenario files.
    pub fn new(
        scenario: SyntheticScenario,
        vocab: Vocabulary,
        schedule: &BlockSchedule,
        seed_mix: u64,
    ) -> Result<Self> {
        let total_frames = schedule.total_frames();
        scenario.validate(&vocab, total_frames)?;
        let mut anchored = vec![None; total_frames + 1];
        for (&tok, &frame) in scenario.reference_tokens.iter().zip(&scenario.alignment) {
            // Only content tokens surface in the CTC stream; the end of the
            // utterance is an attention-side symbol, not an emission.
            if tok != vocab.eos() {
                anchored[frame] = Some(tok);
            }
        }
        let seed = scenario.noise_seed ^ seed_mix;
        Ok(Self { scenario, vocab, total_blocks: schedule.total_blocks(), anchored, seed })
    }

    pub fn scenario(&self) -> &SyntheticScenario {
        &self.scenario
    }

    /// Number of reference tokens consumed, in order, by a subsequence walk
    /// of `content`. Inserted tokens do not reset the walk, so a hypothesis
    /// carrying a stray repeat still advances towards the end of the
    /// reference instead of stalling forever on the same target.
    fn matched_len(&self, content: &[TokenId]) -> usize {
        let reference = &self.scenario.reference_tokens;
        let mut matched = 0;
        for &tok in content {
            if matched < reference.len() && tok == reference[matched] {
                matched += 1;
            }
        }
        matched
    }

    /// Gaussian-shaped attention through the scaled dot-product path, one
    /// head per jitter offset, centred on `center` and clamped to the view.
    fn attention(
        &self,
        step: usize,
        view: &EncoderBlockView,
        center: usize,
    ) -> Result<AttentionSnapshot> {
        let frames = view.frames();
        let width = self.scenario.attention_width;
        let jitter = [0i64, -1, 1];
        let mut queries = Vec::with_capacity(ATTENTION_HEADS);
        let mut keys = Vec::with_capacity(ATTENTION_HEADS);
        for m in 0..ATTENTION_HEADS {
            let c = (center as i64 + jitter[m % jitter.len()]).clamp(1, frames as i64) as f64;
            queries.push(vec![1.0]);
            keys.push(
                (1..=frames)
                    .map(|t| {
                        let d = t as f64 - c;
                        vec![-d * d / (2.0 * width * width)]
                    })
                    .collect(),
            );
        }
        let per_head = MultiHeadProjection::new(queries, keys)?.weights();
        AttentionSnapshot::new(step, view.block_index(), per_head)
    }

    /// Distribution assembled from (token, mass) pairs; whatever is left is
    /// spread uniformly over the content tokens not yet assigned.
    fn distribution(&self, pinned: &[(TokenId, f64)]) -> Vec<f64> {
        let v = self.vocab.size();
        let mut probs = vec![0.0; v];
        let mut assigned = 0.0;
        for &(tok, mass) in pinned {
            probs[tok as usize] += mass;
            assigned += mass;
        }
        let rest: Vec<usize> = (0..v)
            .filter(|&id| {
                let id = id as TokenId;
                id != self.vocab.blank()
                    && id != self.vocab.sos()
                    && id != self.vocab.eos()
                    && !pinned.iter().any(|&(tok, _)| tok == id)
            })
            .collect();
        let leftover = (1.0 - assigned).max(0.0);
        if rest.is_empty() {
            // Tiny vocabularies have nowhere else to put the remainder.
            probs[self.vocab.eos() as usize] += leftover;
        } else {
            let share = leftover / rest.len() as f64;
            for id in rest {
                probs[id] += share;
            }
        }
        probs.iter().map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY }).collect()
    }

    /// Deterministic multiplicative jitter in [0.5, 1.5) for posterior noise.
    fn jitter(&self, frame: usize, token: usize) -> f64 {
        let h = splitmix64(
            self.seed
                ^ (frame as u64).wrapping_mul(0x9E3779B97F4A7C15)
                ^ (token as u64).wrapping_mul(0xC2B2AE3D27D4EB4F),
        );
        0.5 + (h >> 11) as f64 / (1u64 << 53) as f64
    }
}

impl DecoderScorer for SyntheticScorer {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn step(&self, prefix: &[TokenId], view: &EncoderBlockView) -> Result<ScorerStepResult> {
        if prefix.first() != Some(&self.vocab.sos()) {
            return Err(Error::ScorerContract("prefix must start with sos".into()));
        }
        let content = &prefix[1..];
        if content.iter().any(|&t| t as usize >= self.vocab.size() || t == self.vocab.blank()) {
            return Err(Error::ScorerContract("prefix holds blank or unknown tokens".into()));
        }
        let frames = view.frames();
        let position = content.len() + 1;
        let matched = self.matched_len(content);
        let reference = &self.scenario.reference_tokens;

        // A pending misalignment event outranks everything else, but only
        // while the utterance is still streaming in.
        let event = self
            .scenario
            .misalignment_events
            .iter()
            .find(|ev| ev.step == position && view.block_index() < self.total_blocks);
        if let Some(ev) = event {
            if let Some(&last) = content.last() {
                let base = if matched > 0 { self.scenario.alignment[matched - 1] } else { 1 };
                let center = base.saturating_sub(ev.offset).max(1);
                let junk: Vec<TokenId> =
                    self.vocab.content_ids().filter(|&id| id != last).collect();
                let repeat_mass = 1.0 - EOS_FLOOR - junk.len() as f64 * EVENT_JUNK_MASS;
                let mut pinned = vec![(last, repeat_mass), (self.vocab.eos(), EOS_FLOOR)];
                pinned.extend(junk.into_iter().map(|id| (id, EVENT_JUNK_MASS)));
                let log_probs = self.distribution(&pinned);
                let attention = Arc::new(self.attention(position, view, center)?);
                return Ok(ScorerStepResult { log_probs, attention });
            }
        }

        let overlong = content.len() > reference.len() + REFERENCE_SLACK;
        let target = if overlong { None } else { reference.get(matched).copied() };
        let anchor = target.and_then(|_| {
            let f = self.scenario.alignment[matched];
            (f <= frames).then_some(f)
        });

        match (target, anchor) {
            (Some(tok), Some(frame)) => {
                // Evidence for the next reference token is visible.
                let mut pinned = vec![(tok, self.scenario.peakiness)];
                if tok != self.vocab.eos() {
                    pinned.push((self.vocab.eos(), EOS_FLOOR));
                }
                let log_probs = self.distribution(&pinned);
                let attention = Arc::new(self.attention(position, view, frame)?);
                Ok(ScorerStepResult { log_probs, attention })
            }
            _ => {
                // Past the evidence: flat, eos-leaning, attention piled at
                // the edge of the view.
                let mut pinned = vec![(self.vocab.eos(), PREMATURE_EOS_MASS)];
                if let Some(&last) = content.last() {
                    pinned.push((last, PREMATURE_REPEAT_MASS));
                }
                let log_probs = self.distribution(&pinned);
                let attention = Arc::new(self.attention(position, view, frames)?);
                Ok(ScorerStepResult { log_probs, attention })
            }
        }
    }

    fn ctc_posterior(&self, view: &EncoderBlockView) -> Result<CtcPosteriorBlock> {
        let v = self.vocab.size();
        let blank = self.vocab.blank() as usize;
        let sos = self.vocab.sos() as usize;
        let leak = 1.0 - self.scenario.peakiness;
        let mut rows = Vec::with_capacity(view.frames());
        for t in 1..=view.frames() {
            let mut row = vec![0.0; v];
            let (anchor, spread_total) = match self.anchored[t] {
                Some(tok) => {
                    row[tok as usize] = self.scenario.peakiness;
                    (Some(tok as usize), leak * 0.1)
                }
                None => (None, leak * 0.1),
            };
            let spread_ids: Vec<usize> =
                (0..v).filter(|&id| id != blank && id != sos && Some(id) != anchor).collect();
            if spread_total > 0.0 && !spread_ids.is_empty() {
                let weights: Vec<f64> = spread_ids.iter().map(|&id| self.jitter(t, id)).collect();
                let weight_sum: f64 = weights.iter().sum();
                for (&id, w) in spread_ids.iter().zip(&weights) {
                    row[id] = spread_total * w / weight_sum;
                }
            }
            let non_blank: f64 = row.iter().sum();
            row[blank] = 1.0 - non_blank;
            rows.push(row);
        }
        CtcPosteriorBlock::from_rows(rows, blank)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}
