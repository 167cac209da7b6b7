//! Frame and text encoders.
//!
//! These are small trainable stand-ins for a pretrained two-tower model:
//! two-layer MLPs that map raw per-frame feature rows and token ids onto a
//! shared width-K token space. Precomputed features exported from a real
//! tower can be injected as `FrameTokens` directly (see the companion
//! crate's feature-file reader).

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::mat::Mat;
use crate::nn::{join_name, relu, relu_backward, Linear, Param, VisitParams};
use crate::rng::Rng;

/// One token per sampled frame; padded rows are zero and masked false.
#[derive(Clone, Debug)]
pub struct FrameTokens {
    pub tokens: Mat,
    pub mask: Vec<bool>,
}

impl FrameTokens {
    /// Zeroes padded rows so downstream layers can never read them.
    pub fn new(mut tokens: Mat, mask: Vec<bool>) -> Result<Self, EncoderError> {
        if tokens.rows() != mask.len() {
            return Err(EncoderError::MaskLengthMismatch {
                rows: tokens.rows(),
                mask: mask.len(),
            });
        }
        for (r, &ok) in mask.iter().enumerate() {
            if !ok {
                tokens.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(Self { tokens, mask })
    }

    pub fn n_frames(&self) -> usize {
        self.tokens.rows()
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }
}

/// Encoded text tokens; `cls_index` marks the whole-sequence summary row.
#[derive(Clone, Debug)]
pub struct TextTokens {
    pub tokens: Mat,
    pub mask: Vec<bool>,
    pub cls_index: usize,
}

impl TextTokens {
    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    /// The summary row, e.g. for late-fusion scoring or prompt ensembling.
    pub fn cls_row(&self) -> &[f32] {
        self.tokens.row(self.cls_index)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EncoderError {
    WidthMismatch { expected: usize, got: usize },
    MaskLengthMismatch { rows: usize, mask: usize },
    TokenIdOutOfRange { id: u32, vocab: usize },
}

impl fmt::Display for EncoderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderError::WidthMismatch { expected, got } => {
                write!(f, "encoder expects input width {expected}, got {got}")
            }
            EncoderError::MaskLengthMismatch { rows, mask } => {
                write!(f, "{rows} token rows but {mask} mask entries")
            }
            EncoderError::TokenIdOutOfRange { id, vocab } => {
                write!(f, "token id {id} outside vocabulary of {vocab}")
            }
        }
    }
}

impl core::error::Error for EncoderError {}

// ---------------------------------------------------------------------------
// Frame encoder
// ---------------------------------------------------------------------------

/// Two-layer MLP from raw feature rows to K-wide frame tokens.
#[derive(Clone, Debug)]
pub struct StubFrameEncoder {
    pub proj: Linear,
    pub out: Linear,
}

pub struct FrameEncodeCache {
    raw: Mat,
    h_pre: Mat,
    mask: Vec<bool>,
}

impl StubFrameEncoder {
    pub fn new(input_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            proj: Linear::new(input_dim, hidden, rng),
            out: Linear::new(hidden, hidden, rng),
        }
    }

    /// Passes inputs through unchanged; input width must equal K.
    pub fn identity(dim: usize) -> Self {
        Self {
            proj: Linear::identity(dim),
            out: Linear::identity(dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.proj.in_dim()
    }

    pub fn width(&self) -> usize {
        self.out.out_dim()
    }

    pub fn encode(
        &self,
        raw: &Mat,
        mask: &[bool],
    ) -> Result<(FrameTokens, FrameEncodeCache), EncoderError> {
        if raw.cols() != self.input_dim() {
            return Err(EncoderError::WidthMismatch {
                expected: self.input_dim(),
                got: raw.cols(),
            });
        }
        let h_pre = self.proj.forward(raw);
        let h = relu(&h_pre);
        let tokens = self.out.forward(&h);
        let frame_tokens = FrameTokens::new(tokens, mask.to_vec())?;
        Ok((
            frame_tokens,
            FrameEncodeCache {
                raw: raw.clone(),
                h_pre,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Accumulates parameter gradients; padded rows contribute nothing.
    pub fn backward(&mut self, cache: &FrameEncodeCache, dtokens: &Mat) {
        let mut dy = dtokens.clone();
        for (r, &ok) in cache.mask.iter().enumerate() {
            if !ok {
                dy.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let h = relu(&cache.h_pre);
        let dh = self.out.backward(&h, &dy);
        let dh_pre = relu_backward(&cache.h_pre, &dh);
        let _ = self.proj.backward(&cache.raw, &dh_pre);
    }
}

impl VisitParams for StubFrameEncoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.proj.visit_params(&join_name(prefix, "proj"), f);
        self.out.visit_params(&join_name(prefix, "out"), f);
    }
}

// ---------------------------------------------------------------------------
// Text encoder
// ---------------------------------------------------------------------------

/// Embedding lookup plus a two-layer MLP applied per token.
///
/// The whole-sequence summary occupies the first valid row (CLS position):
/// it is the MLP applied to the mean of a learned seed embedding and every
/// valid token embedding. An n-token text therefore spans exactly
/// min(n, budget) valid rows, and an empty text a single summary-only row.
#[derive(Clone, Debug)]
pub struct StubTextEncoder {
    /// (vocab, K)
    pub embed: Param,
    /// (1, K) learned seed mixed into the summary mean.
    pub cls_embed: Param,
    pub proj: Linear,
    pub out: Linear,
}

pub struct TextEncodeCache {
    ids: Vec<u32>,
    inputs: Mat,
    h_pre: Mat,
    n_valid: usize,
    cls_index: usize,
}

impl StubTextEncoder {
    pub fn new(vocab_size: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            embed: Param::new(Mat::randn(vocab_size, hidden, 0.5, rng)),
            cls_embed: Param::new(Mat::randn(1, hidden, 0.5, rng)),
            proj: Linear::new(hidden, hidden, rng),
            out: Linear::new(hidden, hidden, rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.value.rows()
    }

    pub fn width(&self) -> usize {
        self.out.out_dim()
    }

    /// Truncates from the right to `max_tokens`; the summary takes the
    /// first valid row (`cls_index` = 0), so an n-token text occupies
    /// exactly min(n, max_tokens) valid rows (one for empty text).
    pub fn encode(
        &self,
        ids: &[u32],
        max_tokens: usize,
    ) -> Result<(TextTokens, TextEncodeCache), EncoderError> {
        assert!(max_tokens >= 1);
        for &id in ids {
            if id as usize >= self.vocab_size() {
                return Err(EncoderError::TokenIdOutOfRange {
                    id,
                    vocab: self.vocab_size(),
                });
            }
        }
        let kept: Vec<u32> = ids.iter().copied().take(max_tokens).collect();
        let n_valid = kept.len().max(1);
        let cls_index = 0;
        let width = self.width();

        let mut inputs = Mat::zeros(max_tokens, width);
        for (i, &id) in kept.iter().enumerate() {
            inputs
                .row_mut(i)
                .copy_from_slice(self.embed.value.row(id as usize));
        }
        // Summary input: mean of the seed embedding and all kept embeddings.
        let denom = (kept.len() + 1) as f32;
        let mut summary = self.cls_embed.value.row(0).to_vec();
        for &id in &kept {
            for (s, &e) in summary.iter_mut().zip(self.embed.value.row(id as usize)) {
                *s += e;
            }
        }
        summary.iter_mut().for_each(|s| *s /= denom);
        inputs.row_mut(cls_index).copy_from_slice(&summary);

        let h_pre = self.proj.forward(&inputs);
        let h = relu(&h_pre);
        let mut tokens = self.out.forward(&h);

        let mut mask = vec![false; max_tokens];
        for m in mask.iter_mut().take(n_valid) {
            *m = true;
        }
        for (r, &ok) in mask.iter().enumerate() {
            if !ok {
                tokens.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok((
            TextTokens {
                tokens,
                mask,
                cls_index,
            },
            TextEncodeCache {
                ids: kept,
                inputs,
                h_pre,
                n_valid,
                cls_index,
            },
        ))
    }

    pub fn backward(&mut self, cache: &TextEncodeCache, dtokens: &Mat) {
        let mut dy = dtokens.clone();
        for r in cache.n_valid..dy.rows() {
            dy.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
        }
        let h = relu(&cache.h_pre);
        let dh = self.out.backward(&h, &dy);
        let dh_pre = relu_backward(&cache.h_pre, &dh);
        let dinputs = self.proj.backward(&cache.inputs, &dh_pre);

        // Plain token rows scatter straight into their embeddings.
        for (i, &id) in cache.ids.iter().enumerate() {
            if i == cache.cls_index {
                continue;
            }
            let dst = self.embed.grad.row_mut(id as usize);
            for (g, &d) in dst.iter_mut().zip(dinputs.row(i).iter()) {
                *g += d;
            }
        }
        // The summary row spreads over the seed and every kept embedding.
        let denom = (cache.ids.len() + 1) as f32;
        let dsum = dinputs.row(cache.cls_index);
        for (g, &d) in self.cls_embed.grad.row_mut(0).iter_mut().zip(dsum.iter()) {
            *g += d / denom;
        }
        for &id in &cache.ids {
            let dst = self.embed.grad.row_mut(id as usize);
            for (g, &d) in dst.iter_mut().zip(dsum.iter()) {
                *g += d / denom;
            }
        }
    }
}

impl VisitParams for StubTextEncoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join_name(prefix, "embed"), &mut self.embed);
        f(&join_name(prefix, "cls_embed"), &mut self.cls_embed);
        self.proj.visit_params(&join_name(prefix, "proj"), f);
        self.out.visit_params(&join_name(prefix, "out"), f);
    }
}

/// The two towers plus whether they were initialized together. Unpaired
/// encoders flow through the whole pipeline; pairing only matters for the
/// ablation that measures its effect.
#[derive(Clone, Debug)]
pub struct EncoderPair {
    pub frame: StubFrameEncoder,
    pub text: StubTextEncoder,
    pub paired: bool,
}

impl EncoderPair {
    pub fn new(input_dim: usize, vocab_size: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            frame: StubFrameEncoder::new(input_dim, hidden, rng),
            text: StubTextEncoder::new(vocab_size, hidden, rng),
            paired: true,
        }
    }

    /// Towers drawn from independent streams, marked unpaired.
    pub fn unpaired(
        input_dim: usize,
        vocab_size: usize,
        hidden: usize,
        frame_seed: u64,
        text_seed: u64,
    ) -> Self {
        let mut fr = Rng::new(frame_seed);
        let mut tr = Rng::new(text_seed);
        Self {
            frame: StubFrameEncoder::new(input_dim, hidden, &mut fr),
            text: StubTextEncoder::new(vocab_size, hidden, &mut tr),
            paired: false,
        }
    }
}
