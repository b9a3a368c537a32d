//! Reserved token ids shared by the corpus, the task and the encoder.

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const FIRST_CONTENT: usize = 4;

/// Segment ids: 0 for `[CLS] A [SEP]`, 1 for `B [SEP]`.
pub const SEGMENTS: usize = 2;

pub fn is_special(token: usize) -> bool {
    token < FIRST_CONTENT
}
