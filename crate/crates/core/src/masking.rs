//! Block-causal attention masks and the packed two-view sequence layout.
//!
//! A packed sequence holds the source view (plus its predictor tokens) and the
//! target view side by side. Each block is causal internally and blind to the
//! other, and positions restart at zero per block, so one forward pass yields
//! the same per-block hidden states as two standalone passes.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::tokenizer::{TokenId, PRED};

/// Where the predictor tokens sit inside the source block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    Append,
    Prepend,
}

/// Which view is predicted from which.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[default]
    #[serde(rename = "text_to_code")]
    TextToCode,
    #[serde(rename = "code_to_text")]
    CodeToText,
}

/// Spans of one packed sequence.
///
/// The source block is `[source view | k PRED]` (or `[k PRED | source view]`
/// when prepending) and is followed by the target block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLayout {
    pub source_start: usize,
    /// Source view tokens, excluding predictor tokens.
    pub source_size: usize,
    pub pred_size: usize,
    pub placement: Placement,
    pub target_start: usize,
    pub target_size: usize,
    /// Per-token position ids, restarting at 0 for each block.
    pub positions: Vec<usize>,
}

impl SegmentLayout {
    pub fn source_block(&self) -> Range<usize> {
        self.source_start..self.source_start + self.source_size + self.pred_size
    }

    pub fn target_block(&self) -> Range<usize> {
        self.target_start..self.target_start + self.target_size
    }

    pub fn total_len(&self) -> usize {
        self.source_size + self.pred_size + self.target_size
    }

    /// Offset of the last source-view token (not a predictor token).
    pub fn source_last(&self) -> usize {
        match self.placement {
            Placement::Append => self.source_start + self.source_size - 1,
            Placement::Prepend => self.source_start + self.pred_size + self.source_size - 1,
        }
    }

    /// Offset whose hidden state is read as the predictor output.
    ///
    /// Appending reads the last predictor token (the last source token when
    /// `k = 0`); prepending reads the last source-view token, the only causally
    /// complete summary in that arrangement.
    pub fn predictor_index(&self) -> usize {
        match self.placement {
            Placement::Append => self.source_block().end - 1,
            Placement::Prepend => self.source_last(),
        }
    }

    pub fn target_last(&self) -> usize {
        self.target_block().end - 1
    }

    /// Check ordering, disjointness, and the per-block position restart.
    pub fn validate(&self, len: usize) -> Result<()> {
        let src = self.source_block();
        let tgt = self.target_block();
        if self.source_size == 0 || self.target_size == 0 {
            return Err(Error::contract("empty view span"));
        }
        if src.end > tgt.start {
            return Err(Error::contract(format!("source block {src:?} overlaps target block {tgt:?}")));
        }
        if tgt.end > len || self.positions.len() != len {
            return Err(Error::contract(format!("layout spans exceed sequence length {len}")));
        }
        let restarts = |r: &Range<usize>| self.positions[r.clone()].iter().enumerate().all(|(i, &p)| i == p);
        if !restarts(&src) || !restarts(&tgt) {
            return Err(Error::contract("positions must restart at 0 in each block"));
        }
        Ok(())
    }
}

/// `k×k` causal mask: 0 on and below the diagonal, `-inf` above.
pub fn additive_mask(k: usize) -> Result<Tensor> {
    if k == 0 {
        return Err(Error::contract("mask size must be at least 1"));
    }
    let mut data = vec![0.0; k * k];
    for i in 0..k {
        for j in i + 1..k {
            data[i * k + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::matrix(k, k, data)
}

/// Standard causal mask over a whole sequence.
pub fn causal_mask(len: usize) -> Result<Tensor> {
    additive_mask(len)
}

/// `len×len` mask that is causal within each block and `-inf` elsewhere.
pub fn blocks_mask(blocks: &[Range<usize>], len: usize) -> Result<Tensor> {
    let mut sorted: Vec<&Range<usize>> = blocks.iter().collect();
    sorted.sort_by_key(|r| r.start);
    for pair in sorted.windows(2) {
        if pair[0].end > pair[1].start {
            return Err(Error::contract(format!("overlapping blocks {:?} and {:?}", pair[0], pair[1])));
        }
    }
    if len == 0 {
        return Err(Error::contract("mask size must be at least 1"));
    }
    let mut data = vec![f64::NEG_INFINITY; len * len];
    for b in blocks {
        if b.end > len || b.start >= b.end {
            return Err(Error::contract(format!("block {b:?} outside [0, {len})")));
        }
        for i in b.clone() {
            for j in b.start..=i {
                data[i * len + j] = 0.0;
            }
        }
    }
    Tensor::matrix(len, len, data)
}

/// Mask for a packed sequence: source block and target block, isolated.
pub fn block_causal_mask(layout: &SegmentLayout, len: usize) -> Result<Tensor> {
    layout.validate(len)?;
    blocks_mask(&[layout.source_block(), layout.target_block()], len)
}

/// A packed two-view sequence ready for the block-causal forward pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedViews {
    pub tokens: Vec<TokenId>,
    pub layout: SegmentLayout,
}

impl PackedViews {
    pub fn positions(&self) -> &[usize] {
        &self.layout.positions
    }
}

/// Pack two views into one sequence with `k` predictor tokens on the source.
///
/// `direction` picks the source: text for text→code, code for code→text.
pub fn pack_views(
    text_ids: &[TokenId],
    code_ids: &[TokenId],
    k: usize,
    placement: Placement,
    direction: Direction,
    max_len: usize,
) -> Result<PackedViews> {
    let (source, target) = match direction {
        Direction::TextToCode => (text_ids, code_ids),
        Direction::CodeToText => (code_ids, text_ids),
    };
    if source.is_empty() || target.is_empty() {
        return Err(Error::contract("both views must be non-empty"));
    }
    let len = source.len() + k + target.len();
    if len > max_len {
        return Err(Error::Capacity { len, max: max_len });
    }
    let mut tokens = Vec::with_capacity(len);
    match placement {
        Placement::Append => {
            tokens.extend_from_slice(source);
            tokens.extend(std::iter::repeat(PRED).take(k));
        }
        Placement::Prepend => {
            tokens.extend(std::iter::repeat(PRED).take(k));
            tokens.extend_from_slice(source);
        }
    }
    tokens.extend_from_slice(target);
    let source_block = source.len() + k;
    let positions = (0..source_block).chain(0..target.len()).collect();
    let layout = SegmentLayout {
        source_start: 0,
        source_size: source.len(),
        pred_size: k,
        placement,
        target_start: source_block,
        target_size: target.len(),
        positions,
    };
    layout.validate(len)?;
    Ok(PackedViews { tokens, layout })
}
