//! Versioned binary checkpoints: a JSON header (config, dims, text setup)
//! followed by named parameter arrays.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vtloc_core::config::ModelConfig;
use vtloc_core::data::{PromptSet, Vocab};
use vtloc_core::mat::Mat;
use vtloc_core::pipeline::{Model, ModelDims, TextContext};

use crate::FormatError;

pub const MAGIC: &[u8; 4] = b"VTCK";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub late_fusion: bool,
    pub vocab_words: Vec<String>,
    pub prompt_templates: Vec<String>,
    pub ensemble_size: usize,
    pub class_labels: Vec<String>,
}

impl CheckpointMeta {
    pub fn text_context(&self) -> Result<TextContext, FormatError> {
        Ok(TextContext {
            vocab: Vocab::from_words(self.vocab_words.clone()),
            prompts: PromptSet::new(self.prompt_templates.clone(), self.ensemble_size)
                .map_err(|e| FormatError::Invalid(e.to_string()))?,
            class_labels: self.class_labels.clone(),
        })
    }
}

pub fn save_model(path: &Path, model: &mut Model, ctx: &TextContext) -> Result<(), FormatError> {
    let meta = CheckpointMeta {
        config: model.config.clone(),
        dims: model.dims,
        late_fusion: model.late_fusion,
        vocab_words: ctx.vocab.words().to_vec(),
        prompt_templates: ctx.prompts.templates().to_vec(),
        ensemble_size: ctx.prompts.ensemble_size,
        class_labels: ctx.class_labels.clone(),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;

    let mut params: Vec<(String, Mat)> = Vec::new();
    model.visit_grouped(&mut |_, name, p| {
        params.push((name.to_string(), p.value.clone()));
    });

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, value) in &params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(value.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(value.cols() as u32).to_le_bytes());
        for v in value.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(Model, TextContext), FormatError> {
    let bytes = fs::read(path)?;
    let display = path.display().to_string();
    let need = |offset: usize, len: usize| -> Result<(), FormatError> {
        if bytes.len() < offset + len {
            Err(FormatError::Truncated {
                path: display.clone(),
                offset: bytes.len(),
                needed: offset + len - bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(0, 12)?;
    if &bytes[0..4] != MAGIC {
        return Err(FormatError::BadMagic {
            path: display,
            expected: "VTCK",
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(FormatError::BadVersion {
            path: display,
            version,
            offset: 4,
        });
    }
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    need(12, meta_len)?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[12..12 + meta_len])?;
    let ctx = meta.text_context()?;

    let mut off = 12 + meta_len;
    need(off, 4)?;
    let count = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    off += 4;
    let mut stored: BTreeMap<String, Mat> = BTreeMap::new();
    for _ in 0..count {
        need(off, 4)?;
        let name_len = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        need(off, name_len + 8)?;
        let name = String::from_utf8(bytes[off..off + name_len].to_vec())
            .map_err(|e| FormatError::Invalid(format!("parameter name not utf-8: {e}")))?;
        off += name_len;
        let rows = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()) as usize;
        off += 8;
        let data_len = 4 * rows * cols;
        need(off, data_len)?;
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows * cols {
            let at = off + 4 * i;
            data.push(f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()));
        }
        off += data_len;
        stored.insert(name, Mat::from_vec(rows, cols, data));
    }
    if off != bytes.len() {
        return Err(FormatError::TrailingBytes {
            path: path.display().to_string(),
            extra: bytes.len() - off,
        });
    }

    let mut model = Model::new(&meta.config, meta.dims, meta.late_fusion, 0)
        .map_err(|e| FormatError::Invalid(e.to_string()))?;
    let mut missing: Vec<String> = Vec::new();
    let mut shape_errors: Vec<String> = Vec::new();
    model.visit_grouped(&mut |_, name, p| match stored.get(name) {
        Some(value) => {
            if value.rows() == p.value.rows() && value.cols() == p.value.cols() {
                p.value = value.clone();
            } else {
                shape_errors.push(format!(
                    "{name}: stored {}x{}, model {}x{}",
                    value.rows(),
                    value.cols(),
                    p.value.rows(),
                    p.value.cols()
                ));
            }
        }
        None => missing.push(name.to_string()),
    });
    if !missing.is_empty() {
        return Err(FormatError::Invalid(format!(
            "checkpoint missing parameters: {}",
            missing.join(", ")
        )));
    }
    if !shape_errors.is_empty() {
        return Err(FormatError::Invalid(format!(
            "checkpoint shape mismatches: {}",
            shape_errors.join("; ")
        )));
    }
    Ok((model, ctx))
}
