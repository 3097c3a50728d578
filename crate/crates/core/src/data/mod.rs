//! Datasets: the synthetic toy world, COCO caption ingestion and the shared
//! vocabulary and tokenizer.

pub mod coco;
pub mod text;
pub mod toy;
pub mod vocab;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use coco::{load_coco_captions, read_generated_jsonl, CocoCorpus, GeneratedRecord};
pub use text::{join, tokenize, TOKENIZER_VERSION};
pub use toy::{generate_toy_dataset, Grammar, ToyWorldConfig};
pub use vocab::{build_vocabulary, Vocabulary, END, PAD, START, UNK};

use crate::error::{Error, Result};
use crate::metrics::{diversity_report, MetricRegistry, SetsByImage};

/// Token ids of one caption, without sentinels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Caption {
    pub tokens: Vec<u32>,
    /// Decoding hit the length limit before emitting END.
    pub truncated: bool,
}

impl Caption {
    pub fn new(tokens: Vec<u32>) -> Self {
        Caption {
            tokens,
            truncated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub type CaptionSet = Vec<Caption>;

/// Conditioning for one image: global feature and object-probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFeatures {
    pub x_c: Vec<f64>,
    pub x_o: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub image_id: u64,
    pub features: ImageFeatures,
    /// Normalized reference captions.
    pub references: Vec<String>,
}

impl DatasetItem {
    pub fn encoded_references(&self, vocab: &Vocabulary) -> Vec<Caption> {
        self.references
            .iter()
            .map(|r| Caption::new(vocab.encode(&tokenize(r))))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn name(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (train, val, test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub tag: SplitTag,
    pub items: Vec<DatasetItem>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// All references, tokenized.
    pub fn reference_corpus(&self) -> Vec<Vec<String>> {
        self.items
            .iter()
            .flat_map(|it| it.references.iter().map(|r| tokenize(r)))
            .collect()
    }

    pub fn reference_sets(&self) -> SetsByImage {
        self.items
            .iter()
            .map(|it| (it.image_id, it.references.iter().map(|r| tokenize(r)).collect()))
            .collect()
    }
}

/// Diversity of the human references of one split, recorded at build time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceStats {
    pub split: SplitTag,
    pub div1: f64,
    pub div2: f64,
    pub mbleu4: f64,
    pub vocab_size: usize,
    pub pct_novel: f64,
}

pub const DATASET_FORMAT: &str = "advcap-dataset/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub tokenizer: String,
    pub seed: u64,
    pub config: ToyWorldConfig,
    pub references_per_image: usize,
    pub feature_dim: usize,
    pub object_words: Vec<String>,
    pub vocab_hash: String,
    /// File name → SHA-256.
    pub files: BTreeMap<String, String>,
    pub reference_stats: ReferenceStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub vocab: Vocabulary,
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn check_splits(splits: [&DatasetSplit; 3], k: usize, feature_dim: usize, n_objects: usize) -> Result<()> {
    let mut seen = BTreeSet::new();
    for s in splits {
        for it in &s.items {
            if !seen.insert(it.image_id) {
                return Err(Error::Integrity(format!(
                    "image id {} appears more than once across splits",
                    it.image_id
                )));
            }
            if it.references.len() != k {
                return Err(Error::Integrity(format!(
                    "image {} has {} references, expected {k}",
                    it.image_id,
                    it.references.len()
                )));
            }
            if it.features.x_c.len() != feature_dim || it.features.x_o.len() != n_objects {
                return Err(Error::Integrity(format!(
                    "image {} has feature sizes {}/{}, expected {feature_dim}/{n_objects}",
                    it.image_id,
                    it.features.x_c.len(),
                    it.features.x_o.len()
                )));
            }
            if !it.features.x_c.iter().chain(&it.features.x_o).all(|v| v.is_finite()) {
                return Err(Error::Integrity(format!("image {} has non-finite features", it.image_id)));
            }
        }
    }
    Ok(())
}

fn split_to_jsonl(split: &DatasetSplit) -> Result<String> {
    let mut out = String::new();
    for it in &split.items {
        out.push_str(&serde_json::to_string(it).map_err(|e| Error::Data(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

fn split_from_jsonl(tag: SplitTag, text: &str) -> Result<DatasetSplit> {
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let it: DatasetItem = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{}.jsonl line {}: {e}", tag.name(), i + 1)))?;
        items.push(it);
    }
    Ok(DatasetSplit { tag, items })
}

fn reference_stats(split: &DatasetSplit, train: &DatasetSplit) -> Result<ReferenceStats> {
    let rep = diversity_report(&split.reference_sets(), &train.reference_corpus(), &MetricRegistry::default())?;
    let get = |name: &str| rep.metric(name).unwrap_or(f64::NAN);
    Ok(ReferenceStats {
        split: split.tag,
        div1: get("div1"),
        div2: get("div2"),
        mbleu4: get("mbleu4"),
        vocab_size: rep.vocab_size(),
        pct_novel: rep.pct_novel(),
    })
}

impl Dataset {
    /// Samples a toy-world dataset and its vocabulary.
    ///
    /// The vocabulary covers the training references plus every word the
    /// grammar can produce, so held-out references never map to UNK.
    pub fn toy(config: &ToyWorldConfig, seed: u64) -> Result<Self> {
        let (grammar, [train, val, test]) = generate_toy_dataset(config, seed)?;
        let mut corpus = train.reference_corpus();
        corpus.push(grammar.lexicon().into_iter().collect());
        let vocab = build_vocabulary(&corpus, 1)?.with_object_words(grammar.object_words())?;
        check_splits([&train, &val, &test], config.references_per_image, config.feature_dim, vocab.object_words().len())?;
        let reference_stats = reference_stats(&test, &train)?;
        let manifest = Manifest {
            format: DATASET_FORMAT.into(),
            tokenizer: TOKENIZER_VERSION.into(),
            seed,
            config: config.clone(),
            references_per_image: config.references_per_image,
            feature_dim: config.feature_dim,
            object_words: grammar.object_words(),
            vocab_hash: vocab.hash(),
            files: BTreeMap::new(),
            reference_stats,
        };
        Ok(Dataset {
            manifest,
            vocab,
            train,
            val,
            test,
        })
    }

    pub fn split(&self, tag: SplitTag) -> &DatasetSplit {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Val => &self.val,
            SplitTag::Test => &self.test,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.manifest.feature_dim
    }

    pub fn num_objects(&self) -> usize {
        self.manifest.object_words.len()
    }

    /// Writes `manifest.json`, `{train,val,test}.jsonl` and `vocab.txt`.
    pub fn save(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = BTreeMap::new();
        let mut write = |name: &str, contents: &str| -> Result<()> {
            let path = dir.join(name);
            fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
            files.insert(name.to_string(), sha256_hex(contents.as_bytes()));
            Ok(())
        };
        for s in [&self.train, &self.val, &self.test] {
            write(&format!("{}.jsonl", s.tag.name()), &split_to_jsonl(s)?)?;
        }
        write("vocab.txt", &self.vocab.to_file_string())?;
        self.manifest.files = files;
        let manifest = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::Data(e.to_string()))? + "\n";
        let path = dir.join("manifest.json");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    /// Loads a dataset directory, verifying file hashes and split hygiene.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
        };
        let manifest: Manifest = serde_json::from_str(&read("manifest.json")?)
            .map_err(|e| Error::Data(format!("manifest.json: {e}")))?;
        if manifest.format != DATASET_FORMAT {
            return Err(Error::Integrity(format!("unsupported dataset format `{}`", manifest.format)));
        }
        if manifest.tokenizer != TOKENIZER_VERSION {
            return Err(Error::Integrity(format!(
                "dataset tokenized with `{}`, this build uses `{TOKENIZER_VERSION}`",
                manifest.tokenizer
            )));
        }
        let mut texts = BTreeMap::new();
        for (name, hash) in &manifest.files {
            let text = read(name)?;
            if &sha256_hex(text.as_bytes()) != hash {
                return Err(Error::Integrity(format!("{name} does not match its manifest hash")));
            }
            texts.insert(name.as_str(), text);
        }
        let take = |name: &str| {
            texts
                .get(name)
                .ok_or_else(|| Error::Integrity(format!("manifest does not list {name}")))
        };
        let vocab = Vocabulary::from_file_string(take("vocab.txt")?)?.with_object_words(manifest.object_words.clone())?;
        if vocab.hash() != manifest.vocab_hash {
            return Err(Error::Integrity("vocabulary hash mismatch".into()));
        }
        let train = split_from_jsonl(SplitTag::Train, take("train.jsonl")?)?;
        let val = split_from_jsonl(SplitTag::Val, take("val.jsonl")?)?;
        let test = split_from_jsonl(SplitTag::Test, take("test.jsonl")?)?;
        check_splits(
            [&train, &val, &test],
            manifest.references_per_image,
            manifest.feature_dim,
            manifest.object_words.len(),
        )?;
        Ok(Dataset {
            manifest,
            vocab,
            train,
            val,
            test,
        })
    }
}
