//! Blockwise-synchronous beam search with run and back stitching.
//!
//! The driver decodes against a growing encoder view. While blocks are still
//! arriving it alternates two repairs around every expansion: a back stitch
//! (any top hypothesis ending the utterance or jumping its attention
//! backwards means the block lacks context, so the whole expansion is thrown
//! away and the decoder waits for the next block) and a running stitch
//! (after a committed step, if the CTC posterior says fewer than `nu` tokens
//! remain beyond the attention focus, the next block is pulled in before
//! decoding further). Once the final block has arrived the search runs as
//! ordinary beam decoding until the ending criterion or the step budget.
//!
//! Hypotheses carry a joint score: the attention decoder's cumulative log
//! probability mixed with a CTC prefix score under `ctc_weight`.

use std::cmp::Ordering;
use std::str::FromStr;
use std::sync::Arc;

use crate::attention_monitor::{detect_back_stitch, AttentionSnapshot};
use crate::block_stream::{BlockSchedule, EncoderBlockView};
use crate::ctc_endpoint::{
    endpoint_reached, expected_remaining, CtcPosteriorBlock, EmissionProfile,
};
use crate::error::{Error, Result};
use crate::metrics::{DecodeTimeline, EventKind, TimelineEvent};
use crate::scorer::{DecoderScorer, TokenId};

/// log(exp(a) + exp(b)) without overflow; empty contributions stay -inf.
pub fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// CTC forward state of one label prefix over the frames of one posterior
/// block: the probability of emitting exactly that prefix, split by whether
/// the path currently sits on the last label or on blank after it. Extending
/// by one label reuses the state, so beam expansion costs one frame sweep
/// per candidate.
#[derive(Debug, Clone)]
pub struct PrefixScoreState {
    frames: usize,
    last_label: Option<TokenId>,
    /// log probability of exactly the prefix with the path on its last label.
    on_label: Vec<f64>,
    /// log probability of exactly the prefix with the path on blank.
    on_blank: Vec<f64>,
}

impl PrefixScoreState {
    /// State of the empty prefix: the all-blank path.
    pub fn empty(posterior: &CtcPosteriorBlock) -> Self {
        let frames = posterior.frames();
        let blank = posterior.blank_id();
        let mut on_blank = Vec::with_capacity(frames + 1);
        on_blank.push(0.0);
        let mut acc = 0.0;
        for t in 1..=frames {
            acc += posterior.prob(t, blank).ln();
            on_blank.push(acc);
        }
        Self { frames, last_label: None, on_label: vec![f64::NEG_INFINITY; frames + 1], on_blank }
    }

    /// State of this prefix plus one more label.
    pub fn extend(&self, label: TokenId, posterior: &CtcPosteriorBlock) -> Result<Self> {
        if posterior.frames() != self.frames {
            return Err(Error::LengthMismatch { expected: self.frames, got: posterior.frames() });
        }
        let blank = posterior.blank_id();
        if label as usize == blank || label as usize >= posterior.vocab_size() {
            return Err(Error::InvalidPosterior(format!("label {label} is not a scoreable token")));
        }
        let mut on_label = vec![f64::NEG_INFINITY; self.frames + 1];
        let mut on_blank = vec![f64::NEG_INFINITY; self.frames + 1];
        for t in 1..=self.frames {
            // Entering the new label: always legal from the parent's blank
            // state, and directly off the parent's last label only when the
            // labels differ (equal labels fuse without a blank between).
            let enter = if self.last_label == Some(label) {
                self.on_blank[t - 1]
            } else {
                log_sum_exp(self.on_blank[t - 1], self.on_label[t - 1])
            };
            on_label[t] =
                log_sum_exp(on_label[t - 1], enter) + posterior.prob(t, label as usize).ln();
            on_blank[t] =
                log_sum_exp(on_blank[t - 1], on_label[t - 1]) + posterior.prob(t, blank).ln();
        }
        Ok(Self { frames: self.frames, last_label: Some(label), on_label, on_blank })
    }

    /// Log probability that the block's frames collapse to exactly the prefix.
    pub fn score(&self) -> f64 {
        log_sum_exp(self.on_label[self.frames], self.on_blank[self.frames])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Full recomputation for a prefix, used when the block has grown.
    pub fn for_prefix(prefix: &[TokenId], posterior: &CtcPosteriorBlock) -> Result<Self> {
        let mut state = Self::empty(posterior);
        for &label in prefix {
            state = state.extend(label, posterior)?;
        }
        Ok(state)
    }
}

/// Log probability that the posterior's frames collapse to exactly `prefix`.
/// The empty prefix scores the all-blank path.
pub fn ctc_prefix_score(prefix: &[TokenId], posterior: &CtcPosteriorBlock) -> Result<f64> {
    Ok(PrefixScoreState::for_prefix(prefix, posterior)?.score())
}

fn combine(attn: f64, ctc: f64, ctc_weight: f64) -> f64 {
    // The pure endpoints avoid 0 * -inf turning the score into NaN.
    if ctc_weight <= 0.0 {
        attn
    } else if ctc_weight >= 1.0 {
        ctc
    } else {
        (1.0 - ctc_weight) * attn + ctc_weight * ctc
    }
}

/// One beam entry: a token prefix with its joint score and the attention of
/// its two most recent steps (what the back-stitch test compares).
#[derive(Debug, Clone)]
pub struct Hypothesis {
    tokens: Vec<TokenId>,
    attn_score: f64,
    ctc_score: f64,
    combined: f64,
    last_attention: Option<Arc<AttentionSnapshot>>,
    prev_attention: Option<Arc<AttentionSnapshot>>,
    ctc_state: Arc<PrefixScoreState>,
    finished: bool,
    eos_time_ms: Option<f64>,
}

impl Hypothesis {
    fn root(sos: TokenId, posterior: &CtcPosteriorBlock) -> Self {
        let state = PrefixScoreState::empty(posterior);
        let ctc_score = state.score();
        Self {
            tokens: vec![sos],
            attn_score: 0.0,
            ctc_score,
            combined: ctc_score,
            last_attention: None,
            prev_attention: None,
            ctc_state: Arc::new(state),
            finished: false,
            eos_time_ms: None,
        }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// Tokens after the leading start symbol.
    pub fn emitted(&self) -> &[TokenId] {
        &self.tokens[1..]
    }

    pub fn attn_score(&self) -> f64 {
        self.attn_score
    }

    pub fn ctc_score(&self) -> f64 {
        self.ctc_score
    }

    pub fn combined(&self) -> f64 {
        self.combined
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    pub fn last_attention(&self) -> Option<&Arc<AttentionSnapshot>> {
        self.last_attention.as_ref()
    }

    /// Simulated time at which this hypothesis emitted its end token.
    pub fn eos_time_ms(&self) -> Option<f64> {
        self.eos_time_ms
    }

    #[cfg(test)]
    fn with_combined(combined: f64, finished: bool) -> Self {
        Self {
            tokens: vec![0],
            attn_score: combined,
            ctc_score: combined,
            combined,
            last_attention: None,
            prev_attention: None,
            ctc_state: Arc::new(PrefixScoreState {
                frames: 0,
                last_label: None,
                on_label: vec![f64::NEG_INFINITY],
                on_blank: vec![0.0],
            }),
            finished,
            eos_time_ms: None,
        }
    }
}

/// Beam ordering: best combined score first, ties to the smaller last token,
/// then the shorter prefix, then lexicographic tokens. Total, so decoding is
/// a pure function of its inputs.
fn beam_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.combined
        .total_cmp(&a.combined)
        .then_with(|| a.tokens.last().cmp(&b.tokens.last()))
        .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Which repairs run during the block phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    /// Both stitches: back-jump/eos discard plus endpoint block advance.
    Rabs,
    /// Running stitch only; the discard test keeps just the eos signal.
    RunOnly,
    /// Back stitch only; blocks never advance without a discard.
    BackOnly,
    /// Repeated-n-gram detection in place of the attention jump test.
    BsdecRepeat,
    /// Whole utterance visible from the start.
    Batch,
}

impl SearchMode {
    pub const ALL: [SearchMode; 5] = [
        SearchMode::Rabs,
        SearchMode::RunOnly,
        SearchMode::BackOnly,
        SearchMode::BsdecRepeat,
        SearchMode::Batch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SearchMode::Rabs => "rabs",
            SearchMode::RunOnly => "run",
            SearchMode::BackOnly => "back",
            SearchMode::BsdecRepeat => "bsdec",
            SearchMode::Batch => "batch",
        }
    }

    fn has_running_stitch(self) -> bool {
        matches!(self, SearchMode::Rabs | SearchMode::RunOnly | SearchMode::BsdecRepeat)
    }

    fn has_jump_test(self) -> bool {
        matches!(self, SearchMode::Rabs | SearchMode::BackOnly)
    }

    fn has_repeat_test(self) -> bool {
        matches!(self, SearchMode::BsdecRepeat)
    }
}

impl std::fmt::Display for SearchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SearchMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "unknown mode {s:?}; expected one of rabs, run, back, bsdec, batch"
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    /// Beam width K.
    pub beam_width: usize,
    /// Endpoint threshold: advance the block when the expected number of
    /// still-unemitted tokens drops below this.
    pub nu: f64,
    /// Back-jump threshold: discard the step when the backward attention
    /// mass exceeds this.
    pub upsilon: f64,
    /// Maximum committed decode steps.
    pub max_len: usize,
    /// CTC share of the combined score, in [0, 1].
    pub ctc_weight: f64,
    pub mode: SearchMode,
    /// n-gram length for the repeated-token test in bsdec mode.
    pub repeat_ngram: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            beam_width: 10,
            nu: 1.0,
            upsilon: 0.5,
            max_len: 200,
            ctc_weight: 0.4,
            mode: SearchMode::Rabs,
            repeat_ngram: 1,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::InvalidConfig("beam width must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidConfig("max length must be at least 1".into()));
        }
        if !(self.ctc_weight >= 0.0 && self.ctc_weight <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "ctc weight {} outside [0, 1]",
                self.ctc_weight
            )));
        }
        if !self.nu.is_finite() || !self.upsilon.is_finite() {
            return Err(Error::InvalidConfig("thresholds must be finite".into()));
        }
        if self.repeat_ngram == 0 {
            return Err(Error::InvalidConfig("repeat n-gram length must be at least 1".into()));
        }
        Ok(())
    }
}

/// Expand every hypothesis by one token and keep the best `beam_width`
/// candidates under the combined score. CTC states are rebuilt transparently
/// when the posterior covers more frames than the cached state.
pub fn search_step(
    beam: &[Hypothesis],
    scorer: &dyn DecoderScorer,
    view: &EncoderBlockView,
    posterior: &CtcPosteriorBlock,
    config: &SearchConfig,
) -> Result<Vec<Hypothesis>> {
    if beam.is_empty() {
        return Err(Error::InvalidConfig("cannot expand an empty beam".into()));
    }
    let vocab = scorer.vocabulary();
    let mut candidates = Vec::with_capacity(beam.len() * vocab.size());
    for hyp in beam {
        if hyp.finished {
            return Err(Error::ScorerContract(
                "finished hypotheses do not expand; keep them out of the active beam".into(),
            ));
        }
        let step = scorer.step(&hyp.tokens, view)?;
        if step.log_probs.len() != vocab.size() {
            return Err(Error::LengthMismatch {
                expected: vocab.size(),
                got: step.log_probs.len(),
            });
        }
        let state = if hyp.ctc_state.frames() == posterior.frames() {
            hyp.ctc_state.clone()
        } else {
            Arc::new(PrefixScoreState::for_prefix(hyp.emitted(), posterior)?)
        };
        for token in 0..vocab.size() as TokenId {
            if token == vocab.blank() || token == vocab.sos() {
                continue;
            }
            let lp = step.log_probs[token as usize];
            if lp == f64::NEG_INFINITY {
                continue;
            }
            let finished = token == vocab.eos();
            // An end token closes the prefix as-is, so it inherits the
            // parent's CTC state; anything else extends it.
            let (ctc_state, ctc_score) = if finished {
                (state.clone(), state.score())
            } else {
                let next = state.extend(token, posterior)?;
                let score = next.score();
                (Arc::new(next), score)
            };
            let attn_score = hyp.attn_score + lp;
            let mut tokens = Vec::with_capacity(hyp.tokens.len() + 1);
            tokens.extend_from_slice(&hyp.tokens);
            tokens.push(token);
            candidates.push(Hypothesis {
                tokens,
                attn_score,
                ctc_score,
                combined: combine(attn_score, ctc_score, config.ctc_weight),
                last_attention: Some(step.attention.clone()),
                prev_attention: hyp.last_attention.clone(),
                ctc_state,
                finished,
                eos_time_ms: None,
            });
        }
    }
    candidates.sort_by(beam_order);
    candidates.truncate(config.beam_width);
    Ok(candidates)
}

/// Stop ordinary decoding when a finished hypothesis already outranks every
/// unfinished one (or nothing is left to expand).
pub fn ending_criterion(active: &[Hypothesis], completed: &[Hypothesis]) -> bool {
    match (completed.first(), active.first()) {
        (Some(done), Some(open)) => done.combined >= open.combined,
        (Some(_), None) => true,
        (None, None) => true,
        (None, Some(_)) => false,
    }
}

fn trailing_ngram_repeats(emitted: &[TokenId], n: usize) -> bool {
    let len = emitted.len();
    len >= 2 * n && emitted[len - n..] == emitted[len - 2 * n..len - n]
}

/// Does any candidate demand waiting for the next block?
fn back_stitch_triggered(candidates: &[Hypothesis], config: &SearchConfig) -> Result<bool> {
    for cand in candidates {
        // Ending the utterance while blocks remain always means the view ran
        // out of evidence; it is an endpoint signal, not a completion.
        if cand.finished {
            return Ok(true);
        }
        if config.mode.has_jump_test() {
            let current = cand
                .last_attention
                .as_ref()
                .ok_or_else(|| Error::ScorerContract("candidate lacks attention".into()))?;
            let decision =
                detect_back_stitch(current, cand.prev_attention.as_ref(), false, config.upsilon)?;
            if decision.triggered() {
                return Ok(true);
            }
        }
        if config.mode.has_repeat_test()
            && trailing_ngram_repeats(cand.emitted(), config.repeat_ngram)
        {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Everything a decode run produces: the winning hypothesis, every finished
/// hypothesis kept, and the simulated-clock event record.
#[derive(Debug, Clone)]
pub struct DecodeOutcome {
    pub best: Hypothesis,
    pub completed: Vec<Hypothesis>,
    pub timeline: DecodeTimeline,
    /// No hypothesis finished within the step budget; `best` is unfinished.
    pub truncated: bool,
}

impl DecodeOutcome {
    /// Did the decode finish on exactly this emitted sequence?
    pub fn matches(&self, reference: &[TokenId]) -> bool {
        !self.truncated && self.best.emitted() == reference
    }
}

/// Run one utterance end to end against a streaming schedule.
pub fn decode(
    scorer: &dyn DecoderScorer,
    schedule: &BlockSchedule,
    config: &SearchConfig,
    step_cost_ms: f64,
) -> Result<DecodeOutcome> {
    config.validate()?;
    if !(step_cost_ms.is_finite() && step_cost_ms >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "step cost {step_cost_ms} ms must be finite and nonnegative"
        )));
    }
    let vocab = scorer.vocabulary();
    let total_blocks = schedule.total_blocks();

    let mut events: Vec<TimelineEvent> = Vec::with_capacity(total_blocks + 1);
    for b in 1..=total_blocks {
        events.push(TimelineEvent {
            time_ms: schedule.arrival_time_ms(b)?,
            kind: EventKind::BlockArrival { block: b },
        });
    }
    events.push(TimelineEvent {
        time_ms: schedule.utterance_end_time_ms(),
        kind: EventKind::UtteranceEnd,
    });

    let mut view = if config.mode == SearchMode::Batch {
        schedule.view(total_blocks)?
    } else {
        schedule.initial_view()
    };
    let mut clock = schedule.arrival_time_ms(view.block_index())?;
    let mut posterior = scorer.ctc_posterior(&view)?;
    let mut profile = EmissionProfile::new(&posterior);

    let mut beam = vec![Hypothesis::root(vocab.sos(), &posterior)];
    let mut completed: Vec<Hypothesis> = Vec::new();
    let mut step = 1usize;

    let advance = |view: &mut EncoderBlockView,
                   posterior: &mut CtcPosteriorBlock,
                   profile: &mut EmissionProfile,
                   clock: &mut f64|
     -> Result<()> {
        *view = schedule.advance(view.block_index())?;
        *posterior = scorer.ctc_posterior(view)?;
        *profile = EmissionProfile::new(posterior);
        *clock = clock.max(schedule.arrival_time_ms(view.block_index())?);
        Ok(())
    };

    // Block phase: repair-or-commit one step at a time while audio remains.
    while view.block_index() < total_blocks {
        if step > config.max_len {
            break;
        }
        let candidates = search_step(&beam, scorer, &view, &posterior, config)?;
        clock += step_cost_ms;
        if back_stitch_triggered(&candidates, config)? {
            events.push(TimelineEvent {
                time_ms: clock,
                kind: EventKind::StepDiscarded { step, block: view.block_index() },
            });
            // The expansion is dropped wholesale; the beam stays at its
            // pre-step state and the same step index retries with more
            // context.
            advance(&mut view, &mut posterior, &mut profile, &mut clock)?;
            continue;
        }
        events.push(TimelineEvent {
            time_ms: clock,
            kind: EventKind::StepCommitted { step, block: view.block_index() },
        });
        beam = candidates;
        if config.mode.has_running_stitch() {
            let attention = beam[0].last_attention.as_ref().ok_or_else(|| {
                Error::ScorerContract("committed hypothesis lacks attention".into())
            })?;
            let expected = expected_remaining(profile.remaining(), attention.averaged())?;
            if endpoint_reached(expected, config.nu) {
                advance(&mut view, &mut posterior, &mut profile, &mut clock)?;
            }
        }
        step += 1;
    }

    // Ordinary decoding on the full view.
    loop {
        if beam.is_empty() || ending_criterion(&beam, &completed) {
            break;
        }
        if step > config.max_len {
            break;
        }
        let candidates = search_step(&beam, scorer, &view, &posterior, config)?;
        clock += step_cost_ms;
        events.push(TimelineEvent {
            time_ms: clock,
            kind: EventKind::StepCommitted { step, block: view.block_index() },
        });
        let mut active = Vec::with_capacity(candidates.len());
        for mut cand in candidates {
            if cand.finished {
                cand.eos_time_ms = Some(clock);
                completed.push(cand);
            } else {
                active.push(cand);
            }
        }
        completed.sort_by(beam_order);
        completed.truncate(config.beam_width);
        beam = active;
        step += 1;
    }

    let (best, truncated) = match completed.first() {
        Some(done) => (done.clone(), false),
        None => {
            let open = beam
                .first()
                .ok_or_else(|| Error::ScorerContract("search ended with no hypotheses".into()))?;
            (open.clone(), true)
        }
    };
    if let Some(t) = best.eos_time_ms {
        events.push(TimelineEvent { time_ms: t, kind: EventKind::EosEmitted });
    }
    let timeline = DecodeTimeline::new(events)?;
    Ok(DecodeOutcome { best, completed, timeline, truncated })
}
