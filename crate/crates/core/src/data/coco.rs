//! COCO-captions annotation files and line-delimited generated-caption files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::text::tokenize;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CocoCorpus {
    /// Tokenized captions keyed by image id, in file order.
    pub captions: BTreeMap<u64, Vec<Vec<String>>>,
    pub warnings: Vec<String>,
}

impl CocoCorpus {
    pub fn num_captions(&self) -> usize {
        self.captions.values().map(Vec::len).sum()
    }

    pub fn all_captions(&self) -> Vec<Vec<String>> {
        self.captions.values().flatten().cloned().collect()
    }
}

/// Byte offset of a 1-based (line, column) position.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len();
    }
    text.len()
}

pub(crate) fn parse_json(text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        offset: error_offset(text, &e),
        message: e.to_string(),
    })
}

fn error_offset(text: &str, e: &serde_json::Error) -> usize {
    if e.is_eof() {
        text.len()
    } else {
        byte_offset(text, e.line(), e.column())
    }
}

fn field<'a>(obj: &'a Value, key: &str, context: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| Error::Schema {
        key: key.into(),
        context: context.into(),
    })
}

fn as_id(v: &Value, key: &str, context: &str) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| Error::Data(format!("`{key}` in {context} is not a non-negative integer")))
}

/// Parses annotation JSON already in memory.
pub fn parse_coco_captions(text: &str, vocab: Option<&Vocabulary>) -> Result<CocoCorpus> {
    let root = parse_json(text)?;
    let images = field(&root, "images", "annotation file")?
        .as_array()
        .ok_or_else(|| Error::Data("`images` is not an array".into()))?;
    let mut known = BTreeSet::new();
    for (i, img) in images.iter().enumerate() {
        let ctx = format!("images[{i}]");
        known.insert(as_id(field(img, "id", &ctx)?, "id", &ctx)?);
    }
    let annotations = field(&root, "annotations", "annotation file")?
        .as_array()
        .ok_or_else(|| Error::Data("`annotations` is not an array".into()))?;

    let mut corpus = CocoCorpus::default();
    for (i, ann) in annotations.iter().enumerate() {
        let ctx = format!("annotations[{i}]");
        let image_id = as_id(field(ann, "image_id", &ctx)?, "image_id", &ctx)?;
        field(ann, "id", &ctx)?;
        let caption = field(ann, "caption", &ctx)?
            .as_str()
            .ok_or_else(|| Error::Data(format!("`caption` in {ctx} is not a string")))?;
        if !known.contains(&image_id) {
            corpus
                .warnings
                .push(format!("{ctx} references image id {image_id} absent from `images`; kept"));
        }
        let mut tokens = tokenize(caption);
        if let Some(v) = vocab {
            for t in tokens.iter_mut() {
                if v.get(t).is_none() {
                    *t = v.token(super::vocab::UNK).to_string();
                }
            }
        }
        corpus.captions.entry(image_id).or_default().push(tokens);
    }
    Ok(corpus)
}

pub fn load_coco_captions(path: &Path, vocab: Option<&Vocabulary>) -> Result<CocoCorpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_coco_captions(&text, vocab)
}

/// One row of a generated-captions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRecord {
    pub image_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_prob: Option<f64>,
}

pub fn parse_generated_jsonl(text: &str) -> Result<Vec<GeneratedRecord>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if !line.trim().is_empty() {
            let v = serde_json::from_str::<Value>(line).map_err(|e| Error::Parse {
                offset: offset + error_offset(line, &e),
                message: e.to_string(),
            })?;
            for key in ["image_id", "caption"] {
                field(&v, key, &format!("record at byte {offset}"))?;
            }
            out.push(serde_json::from_value(v).map_err(|e| Error::Data(format!("record at byte {offset}: {e}")))?);
        }
        offset += line.len();
    }
    Ok(out)
}

pub fn read_generated_jsonl(path: &Path) -> Result<Vec<GeneratedRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_generated_jsonl(&text)
}
