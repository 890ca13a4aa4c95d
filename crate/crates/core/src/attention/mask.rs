//! Frame-structured attention masks, evaluated by rule instead of materialized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maps a flattened `(t, y, x)` token index to its frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameIndex {
    frames: usize,
    per_frame: usize,
}

impl FrameIndex {
    pub fn new(frames: usize, tokens_per_frame: usize) -> Result<Self> {
        if frames == 0 || tokens_per_frame == 0 {
            return Err(Error::invalid(
                "frame_index",
                "needs at least one frame and one token per frame",
            ));
        }
        Ok(FrameIndex {
            frames,
            per_frame: tokens_per_frame,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.per_frame
    }

    pub fn len(&self) -> usize {
        self.frames * self.per_frame
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn tau(&self, i: usize) -> usize {
        i / self.per_frame
    }
}

/// Which key frames a query token may read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskRule {
    /// Every pair allowed.
    Full,
    /// Every frame other than the query's own.
    #[serde(rename = "mtom")]
    ManyToMany,
    /// Strictly earlier frames only.
    #[serde(rename = "mto1")]
    ManyToOne,
}

impl MaskRule {
    #[inline]
    pub fn allows(self, index: &FrameIndex, i: usize, j: usize) -> bool {
        match self {
            MaskRule::Full => true,
            MaskRule::ManyToMany => index.tau(i) != index.tau(j),
            MaskRule::ManyToOne => index.tau(j) < index.tau(i),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MaskRule::Full => "full",
            MaskRule::ManyToMany => "MtoM",
            MaskRule::ManyToOne => "Mto1",
        }
    }
}

/// A rule bound to a token layout.
#[derive(Debug, Clone, Copy)]
pub struct FrameMask {
    pub rule: MaskRule,
    pub index: FrameIndex,
}

impl FrameMask {
    pub fn new(rule: MaskRule, index: FrameIndex) -> Self {
        FrameMask { rule, index }
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.rule.allows(&self.index, i, j)
    }

    /// True when some query row has no permitted key.
    pub fn has_empty_rows(&self) -> bool {
        match self.rule {
            MaskRule::Full => false,
            MaskRule::ManyToMany => self.index.frames() < 2,
            MaskRule::ManyToOne => true,
        }
    }
}
