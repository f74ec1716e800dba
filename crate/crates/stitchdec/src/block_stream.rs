//! Block schedule for a streaming encoder.
//!
//! Encoder output arrives in fixed-size blocks of frames. The decoder only
//! ever sees the cumulative view `[1, T_b]` once block `b` is complete, so
//! the schedule is the single source of truth for how many frames are
//! visible at each block index and when (in simulated wall time) each block
//! becomes available.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed cadence of encoder blocks for one utterance.
///
/// The final block may be shorter than the others, so the total frame count
/// is `(total_blocks - 1) * frames_per_block + last_block_frames`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSchedule {
    frames_per_block: usize,
    frame_shift_ms: f64,
    total_blocks: usize,
    last_block_frames: usize,
}

impl BlockSchedule {
    pub fn new(
        frames_per_block: usize,
        frame_shift_ms: f64,
        total_blocks: usize,
        last_block_frames: usize,
    ) -> Result<Self> {
        if frames_per_block == 0 {
            return Err(Error::InvalidSchedule("frames_per_block must be > 0".into()));
        }
        if total_blocks == 0 {
            return Err(Error::InvalidSchedule("total_blocks must be > 0".into()));
        }
        if last_block_frames == 0 || last_block_frames > frames_per_block {
            return Err(Error::InvalidSchedule(format!(
                "last_block_frames must be in [1, {frames_per_block}], got {last_block_frames}"
            )));
        }
        if !(frame_shift_ms.is_finite() && frame_shift_ms > 0.0) {
            return Err(Error::InvalidSchedule(format!(
                "frame_shift_ms must be positive, got {frame_shift_ms}"
            )));
        }
        Ok(Self { frames_per_block, frame_shift_ms, total_blocks, last_block_frames })
    }

    pub fn frames_per_block(&self) -> usize {
        self.frames_per_block
    }

    pub fn frame_shift_ms(&self) -> f64 {
        self.frame_shift_ms
    }

    pub fn total_blocks(&self) -> usize {
        self.total_blocks
    }

    pub fn last_block_frames(&self) -> usize {
        self.last_block_frames
    }

    /// Total frame count `T_B` of the utterance.
    pub fn total_frames(&self) -> usize {
        (self.total_blocks - 1) * self.frames_per_block + self.last_block_frames
    }

    /// Number of frames visible once block `b` (1-based) is complete.
    pub fn frames_through(&self, block: usize) -> Result<usize> {
        if block == 0 || block > self.total_blocks {
            return Err(Error::InvalidSchedule(format!(
                "block index {block} outside [1, {}]",
                self.total_blocks
            )));
        }
        if block == self.total_blocks {
            Ok(self.total_frames())
        } else {
            Ok(block * self.frames_per_block)
        }
    }

    /// Cumulative view available once block `block` is complete.
    pub fn view(&self, block: usize) -> Result<EncoderBlockView> {
        Ok(EncoderBlockView { block_index: block, frames: self.frames_through(block)? })
    }

    /// View of the very first block: decoding always starts here.
    pub fn initial_view(&self) -> EncoderBlockView {
        self.view(1).expect("schedule has at least one block")
    }

    /// Move from `current_block` to the next block's view.
    ///
    /// Fails once the utterance is exhausted, i.e. when `current_block` is
    /// already the final block.
    pub fn advance(&self, current_block: usize) -> Result<EncoderBlockView> {
        if current_block >= self.total_blocks {
            return Err(Error::UtteranceExhausted(self.total_blocks));
        }
        self.view(current_block + 1)
    }

    /// Wall-clock arrival time of block `block`: its last frame's timestamp.
    pub fn arrival_time_ms(&self, block: usize) -> Result<f64> {
        Ok(self.frames_through(block)? as f64 * self.frame_shift_ms)
    }

    /// Timestamp of the last frame of the utterance.
    pub fn utterance_end_time_ms(&self) -> f64 {
        self.total_frames() as f64 * self.frame_shift_ms
    }
}

/// Cumulative encoder view after some block has arrived.
///
/// Frames are 1-based: the view covers `[1, frames]`. Views for later blocks
/// strictly contain views for earlier ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderBlockView {
    block_index: usize,
    frames: usize,
}

impl EncoderBlockView {
    pub fn block_index(&self) -> usize {
        self.block_index
    }

    /// Rightmost visible frame `T_b` (the view covers frames `1..=frames`).
    pub fn frames(&self) -> usize {
        self.frames
    }
}
