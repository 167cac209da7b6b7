//! Video-text fusion: concatenate frame tokens with text tokens and run a
//! pre-norm transformer encoder, keeping only the refined frame rows.
//!
//! Learned absolute positions cover the concatenated sequence; text
//! positions are offset by N so frame order and text order never collide.
//! With no text the module degenerates to a plain temporal encoder.

use alloc::vec::Vec;
use core::fmt;

use crate::config::TextMode;
use crate::encoders::{FrameTokens, TextTokens};
use crate::mat::Mat;
use crate::nn::{join_name, EncoderBlock, EncoderBlockCache, Param, VisitParams};
use crate::rng::Rng;

/// The frame-token slice of the fusion output for one class/caption.
#[derive(Clone, Debug)]
pub struct FusedFrameTokens {
    /// (N, K); padded frame rows are zero.
    pub x: Mat,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FusionError {
    WidthMismatch { expected: usize, got: usize },
    TooManyFrames { max: usize, got: usize },
    TooManyTextTokens { max: usize, got: usize },
    EmptyTextSet,
}

impl fmt::Display for FusionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionError::WidthMismatch { expected, got } => {
                write!(f, "fusion width {expected} but tokens have width {got}")
            }
            FusionError::TooManyFrames { max, got } => {
                write!(f, "{got} frames exceed positional capacity {max}")
            }
            FusionError::TooManyTextTokens { max, got } => {
                write!(f, "{got} text tokens exceed positional capacity {max}")
            }
            FusionError::EmptyTextSet => write!(f, "per-class fusion needs at least one text"),
        }
    }
}

impl core::error::Error for FusionError {}

pub struct FusionCache {
    pub mode: TextMode,
    n_frames: usize,
    /// Positional-table row per sequence position.
    pos_rows: Vec<usize>,
    key_valid: Vec<bool>,
    frame_mask: Vec<bool>,
    blocks: Vec<EncoderBlockCache>,
    /// Text rows of the input sequence map back to these TextTokens rows.
    text_row_map: Vec<usize>,
    text_rows_total: usize,
}

impl FusionCache {
    pub fn seq_len(&self) -> usize {
        self.key_valid.len()
    }
}

#[derive(Clone, Debug)]
pub struct FusionModule {
    /// (n_frames + max_text_tokens, K) learned absolute positions.
    pub positional: Param,
    pub blocks: Vec<EncoderBlock>,
    n_frames: usize,
    max_text_tokens: usize,
}

impl FusionModule {
    pub fn new(
        n_frames: usize,
        max_text_tokens: usize,
        width: usize,
        layers: usize,
        mlp_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            positional: Param::new(Mat::randn(n_frames + max_text_tokens, width, 0.02, rng)),
            blocks: (0..layers)
                .map(|_| EncoderBlock::new(width, mlp_dim, rng))
                .collect(),
            n_frames,
            max_text_tokens,
        }
    }

    pub fn width(&self) -> usize {
        self.positional.value.cols()
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    /// Zero every block's attention and MLP output projection, making each
    /// block the identity on the residual stream.
    pub fn zero_output_projections(&mut self) {
        for block in &mut self.blocks {
            block.attn.wo.weight.value.fill(0.0);
            block.attn.wo.bias.value.fill(0.0);
            block.mlp_out.weight.value.fill(0.0);
            block.mlp_out.bias.value.fill(0.0);
        }
    }

    /// Concatenate frames with the selected text rows and run the encoder;
    /// the output keeps exactly the N frame rows.
    pub fn fuse(
        &self,
        frames: &FrameTokens,
        text: &TextTokens,
        mode: TextMode,
        class_id: usize,
    ) -> Result<(FusedFrameTokens, FusionCache), FusionError> {
        let width = self.width();
        if frames.width() != width {
            return Err(FusionError::WidthMismatch {
                expected: width,
                got: frames.width(),
            });
        }
        if mode != TextMode::NoText && text.width() != width {
            return Err(FusionError::WidthMismatch {
                expected: width,
                got: text.width(),
            });
        }
        let n = frames.n_frames();
        if n > self.n_frames {
            return Err(FusionError::TooManyFrames {
                max: self.n_frames,
                got: n,
            });
        }

        // Sequence assembly: frame rows first, then the chosen text rows.
        let mut parts: Vec<&Mat> = Vec::with_capacity(2);
        parts.push(&frames.tokens);
        let (text_slice, text_row_map, text_valid): (Option<Mat>, Vec<usize>, Vec<bool>) =
            match mode {
                TextMode::NoText => (None, Vec::new(), Vec::new()),
                TextMode::ClsOnly => (
                    Some(text.tokens.slice_rows(text.cls_index, text.cls_index + 1)),
                    alloc::vec![text.cls_index],
                    alloc::vec![true],
                ),
                TextMode::AllTokens => (
                    Some(text.tokens.clone()),
                    (0..text.tokens.rows()).collect(),
                    text.mask.clone(),
                ),
            };
        if text_row_map.len() > self.max_text_tokens {
            return Err(FusionError::TooManyTextTokens {
                max: self.max_text_tokens,
                got: text_row_map.len(),
            });
        }
        if let Some(ts) = &text_slice {
            parts.push(ts);
        }
        let mut x = Mat::vstack(&parts);

        let mut pos_rows: Vec<usize> = (0..n).collect();
        pos_rows.extend(text_row_map.iter().map(|&j| self.n_frames + j));
        for (r, &p) in pos_rows.iter().enumerate() {
            let pos = self.positional.value.row(p);
            for (v, &e) in x.row_mut(r).iter_mut().zip(pos.iter()) {
                *v += e;
            }
        }

        let mut key_valid = frames.mask.clone();
        key_valid.extend(text_valid.iter());

        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&x, &key_valid);
            block_caches.push(cache);
            x = next;
        }

        let mut out = x.slice_rows(0, n);
        for (r, &ok) in frames.mask.iter().enumerate() {
            if !ok {
                out.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok((
            FusedFrameTokens { x: out, class_id },
            FusionCache {
                mode,
                n_frames: n,
                pos_rows,
                key_valid,
                frame_mask: frames.mask.clone(),
                blocks: block_caches,
                text_row_map,
                text_rows_total: if mode == TextMode::NoText {
                    0
                } else {
                    text.tokens.rows()
                },
            },
        ))
    }

    /// One fused output per text, all sharing the same parameters.
    pub fn fuse_per_class(
        &self,
        frames: &FrameTokens,
        texts: &[TextTokens],
        mode: TextMode,
    ) -> Result<Vec<(FusedFrameTokens, FusionCache)>, FusionError> {
        if texts.is_empty() {
            return Err(FusionError::EmptyTextSet);
        }
        texts
            .iter()
            .enumerate()
            .map(|(c, t)| self.fuse(frames, t, mode, c))
            .collect()
    }

    /// Backward from the fused frame gradient; returns (dframes, dtext).
    /// dtext has the original TextTokens shape (zero where the mode never
    /// touched a row).
    pub fn backward(&mut self, cache: &FusionCache, dfused: &Mat) -> (Mat, Mat) {
        let width = self.width();
        let seq_len = cache.key_valid.len();
        let mut dseq = Mat::zeros(seq_len, width);
        for r in 0..cache.n_frames {
            if cache.frame_mask[r] {
                dseq.row_mut(r).copy_from_slice(dfused.row(r));
            }
        }
        for (block, bcache) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            dseq = block.backward(bcache, &dseq);
        }
        for (r, &p) in cache.pos_rows.iter().enumerate() {
            let src = dseq.row(r);
            let dst = self.positional.grad.row_mut(p);
            for (g, &d) in dst.iter_mut().zip(src.iter()) {
                *g += d;
            }
        }
        let dframes = dseq.slice_rows(0, cache.n_frames);
        let mut dtext = Mat::zeros(cache.text_rows_total.max(1), width);
        for (i, &j) in cache.text_row_map.iter().enumerate() {
            dtext
                .row_mut(j)
                .copy_from_slice(dseq.row(cache.n_frames + i));
        }
        (dframes, dtext)
    }
}

impl VisitParams for FusionModule {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join_name(prefix, "positional"), &mut self.positional);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_params(&alloc::format!("{prefix}.block{i}"), f);
        }
    }
}
