//! Scenario suite files and the deterministic suite generator.
//!
//! A suite is one versioned JSON document: a shared vocabulary, shared block
//! geometry (frames per block, frame shift), and a list of named scenario
//! records, each carrying its own block count so utterances of different
//! lengths coexist in one file.
//!
//! The generator builds suites from a handful of knobs. Scenarios come out
//! paced so that a healthy decoder never outruns the stream: the first
//! anchor sits near the front, consecutive anchors are at most four frames
//! apart, and the end anchor trails the last word by a breath. Every record
//! draws from its own RNG stream, so a suite is a pure function of the
//! generator settings and scenario `i` does not change when the count does.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block_stream::BlockSchedule;
use crate::error::{Error, Result};
use crate::scorer::{MisalignmentEvent, SyntheticScenario, TokenId, Vocabulary};

pub const SCENARIO_FORMAT_VERSION: u32 = 1;

/// One named utterance plus its block geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub name: String,
    pub total_blocks: usize,
    pub last_block_frames: usize,
    #[serde(flatten)]
    pub scenario: SyntheticScenario,
}

/// A full suite document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub version: u32,
    pub vocabulary: Vocabulary,
    pub frames_per_block: usize,
    pub frame_shift_ms: f64,
    pub scenarios: Vec<ScenarioRecord>,
}

impl ScenarioFile {
    /// Block schedule for one record of this suite.
    pub fn schedule(&self, record: &ScenarioRecord) -> Result<BlockSchedule> {
        BlockSchedule::new(
            self.frames_per_block,
            self.frame_shift_ms,
            record.total_blocks,
            record.last_block_frames,
        )
    }

    /// Checks the whole document, naming the offending record on failure.
    pub fn validate(&self) -> Result<()> {
        if self.version != SCENARIO_FORMAT_VERSION {
            return Err(Error::InvalidScenario(format!(
                "unsupported format version {} (expected {SCENARIO_FORMAT_VERSION})",
                self.version
            )));
        }
        // Deserialization bypasses the vocabulary constructor, so its
        // invariants are re-checked here.
        Vocabulary::new(
            self.vocabulary.labels().to_vec(),
            self.vocabulary.blank(),
            self.vocabulary.sos(),
            self.vocabulary.eos(),
        )?;
        if self.scenarios.is_empty() {
            return Err(Error::InvalidScenario("suite holds no scenarios".into()));
        }
        let mut names: Vec<&str> = Vec::with_capacity(self.scenarios.len());
        for record in &self.scenarios {
            if record.name.is_empty() {
                return Err(Error::InvalidScenario("scenario with an empty name".into()));
            }
            if names.contains(&record.name.as_str()) {
                return Err(Error::InvalidScenario(format!(
                    "duplicate scenario name {:?}",
                    record.name
                )));
            }
            names.push(&record.name);
            let schedule = self
                .schedule(record)
                .map_err(|e| Error::InvalidScenario(format!("scenario {:?}: {e}", record.name)))?;
            record
                .scenario
                .validate(&self.vocabulary, schedule.total_frames())
                .map_err(|e| Error::InvalidScenario(format!("scenario {:?}: {e}", record.name)))?;
        }
        Ok(())
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidScenario(format!("serialization failed: {e}")))?;
        text.push('\n');
        Ok(text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)
            .map_err(|e| Error::InvalidScenario(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidScenario(format!("{}: {e}", path.display())))?;
        let file: ScenarioFile = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidScenario(format!("{}: {e}", path.display())))?;
        file.validate()?;
        Ok(file)
    }
}

/// Knobs for the suite generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateConfig {
    pub count: usize,
    /// Total vocabulary entries including blank, sos and eos.
    pub vocab_size: usize,
    /// Content-token length bounds of one utterance (eos excluded).
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Probability that a scenario carries one misalignment event.
    pub misalignment_rate: f64,
    /// Probability that a token repeats its predecessor.
    pub repeat_rate: f64,
    pub seed: u64,
    pub frames_per_block: usize,
    pub frame_shift_ms: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            count: 10,
            vocab_size: 19,
            min_tokens: 3,
            max_tokens: 8,
            misalignment_rate: 0.0,
            repeat_rate: 0.0,
            seed: 0,
            frames_per_block: 8,
            frame_shift_ms: 40.0,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidConfig("count must be at least 1".into()));
        }
        if self.vocab_size < 5 {
            return Err(Error::InvalidConfig(
                "vocabulary needs the three reserved entries plus at least two content tokens"
                    .into(),
            ));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::InvalidConfig(format!(
                "token bounds {}..={} are not a valid range",
                self.min_tokens, self.max_tokens
            )));
        }
        if self.misalignment_rate > 0.0 && self.min_tokens < 2 {
            return Err(Error::InvalidConfig(
                "misalignment events need at least two tokens per utterance".into(),
            ));
        }
        for (name, rate) in
            [("misalignment-rate", self.misalignment_rate), ("repeat-rate", self.repeat_rate)]
        {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::InvalidConfig(format!("{name} {rate} outside [0, 1]")));
            }
        }
        if self.frames_per_block < 4 {
            return Err(Error::InvalidConfig(
                "blocks shorter than 4 frames cannot keep up with the anchor spacing".into(),
            ));
        }
        if !(self.frame_shift_ms.is_finite() && self.frame_shift_ms > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "frame shift {} ms must be positive",
                self.frame_shift_ms
            )));
        }
        Ok(())
    }
}

fn generated_vocabulary(size: usize) -> Result<Vocabulary> {
    let mut labels: Vec<String> =
        ["<blk>", "<sos>", "<eos>"].iter().map(|s| s.to_string()).collect();
    for i in 0..size - 3 {
        labels.push(format!("tok{i:02}"));
    }
    Vocabulary::new(labels, 0, 1, 2)
}

/// Builds a suite deterministically from the settings.
pub fn generate(config: &GenerateConfig) -> Result<ScenarioFile> {
    config.validate()?;
    let vocabulary = generated_vocabulary(config.vocab_size)?;
    let content: Vec<TokenId> = vocabulary.content_ids().collect();
    let fpb = config.frames_per_block;

    let mut scenarios = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64);

        let n = rng.gen_range(config.min_tokens..=config.max_tokens);
        let mut tokens: Vec<TokenId> = Vec::with_capacity(n + 1);
        for j in 0..n {
            let tok = if j > 0 && rng.gen_bool(config.repeat_rate) {
                tokens[j - 1]
            } else {
                // Unforced draws avoid the predecessor, so repeat-rate is
                // the only source of adjacent repeats.
                loop {
                    let pick = content[rng.gen_range(0..content.len())];
                    if j == 0 || pick != tokens[j - 1] {
                        break pick;
                    }
                }
            };
            tokens.push(tok);
        }
        tokens.push(vocabulary.eos());

        let mut alignment: Vec<usize> = Vec::with_capacity(n + 1);
        let mut frame = rng.gen_range(2..=3);
        alignment.push(frame);
        for _ in 1..n {
            frame += rng.gen_range(3..=4);
            alignment.push(frame);
        }
        alignment.push(frame + 4);

        let mut misalignment_events = Vec::new();
        if rng.gen_bool(config.misalignment_rate) {
            // The backward jump must survive unclamped: the preceding anchor
            // needs at least `offset` frames of room, or the forced peak
            // lands a single frame back and slips under the jump threshold.
            // Step 3 always qualifies, since the second anchor is at 5+.
            let eligible: Vec<usize> = (2..=n + 1).filter(|&s| alignment[s - 2] >= 4).collect();
            let step = eligible[rng.gen_range(0..eligible.len())];
            let max_offset = (alignment[step - 2] - 1).min(6);
            let offset = rng.gen_range(3..=max_offset);
            // An event only matters while later blocks are outstanding. The
            // decoder attempts the step one block past the preceding
            // anchor's at worst, so pad the end anchor until two more
            // blocks follow that one.
            let attempt_block = alignment[step - 2].div_ceil(fpb);
            let min_total = (attempt_block + 1) * fpb + 1;
            if *alignment.last().unwrap() < min_total {
                *alignment.last_mut().unwrap() = min_total;
            }
            misalignment_events.push(MisalignmentEvent { step, offset });
        }

        let peakiness = 0.9 + 0.09 * rng.gen::<f64>();
        let attention_width = 0.9 + 0.6 * rng.gen::<f64>();
        let noise_seed = rng.gen::<u64>();

        let total_frames = *alignment.last().unwrap();
        let total_blocks = total_frames.div_ceil(fpb);
        let last_block_frames = total_frames - (total_blocks - 1) * fpb;

        scenarios.push(ScenarioRecord {
            name: format!("utt{i:04}"),
            total_blocks,
            last_block_frames,
            scenario: SyntheticScenario {
                reference_tokens: tokens,
                alignment,
                peakiness,
                attention_width,
                misalignment_events,
                noise_seed,
            },
        });
    }

    let file = ScenarioFile {
        version: SCENARIO_FORMAT_VERSION,
        vocabulary,
        frames_per_block: fpb,
        frame_shift_ms: config.frame_shift_ms,
        scenarios,
    };
    file.validate()?;
    Ok(file)
}
