//! Synthetic scenes with grammar-generated reference captions.
//!
//! A scene is one value per attribute (object, color, …). Its global feature
//! `x_c` is a fixed random linear mix of the attribute one-hots plus Gaussian
//! noise, and its object feature `x_o` is the indicator of the object value.
//! References are independent realizations of weighted templates whose slots
//! are filled with weighted synonym phrases.

use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::text::tokenize;
use super::{DatasetItem, DatasetSplit, ImageFeatures, SplitTag};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phrase {
    pub text: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeValue {
    pub name: String,
    /// Scene sampling weight.
    pub weight: f64,
    pub realizations: Vec<Phrase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub values: Vec<AttributeValue>,
}

/// A slot that is not determined by the scene (articles, time of day, …).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Filler {
    pub name: String,
    pub realizations: Vec<Phrase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    /// Words and `{slot}` references, e.g. `"{det} {color} {object} {location}"`.
    pub pattern: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    pub attributes: Vec<Attribute>,
    pub fillers: Vec<Filler>,
    pub templates: Vec<Template>,
    /// Name of the attribute whose value names form the object vocabulary.
    pub object_attribute: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyWorldConfig {
    pub grammar: Grammar,
    pub references_per_image: usize,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Attribute(usize),
    Filler(usize),
}

#[derive(Debug, Clone)]
enum Piece {
    Word(String),
    Slot(Slot),
}

/// Validated grammar ready for sampling.
#[derive(Debug, Clone)]
pub struct CompiledGrammar {
    grammar: Grammar,
    templates: Vec<Vec<Piece>>,
    template_dist: WeightedIndex<f64>,
    value_dists: Vec<WeightedIndex<f64>>,
    attr_realization_dists: Vec<Vec<WeightedIndex<f64>>>,
    filler_dists: Vec<WeightedIndex<f64>>,
    object_attr: usize,
}

fn weights(what: &str, ws: impl Iterator<Item = f64>) -> Result<WeightedIndex<f64>> {
    let ws: Vec<f64> = ws.collect();
    if ws.is_empty() {
        return Err(Error::Config(format!("{what} has no alternatives")));
    }
    if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Config(format!("{what} has an invalid weight")));
    }
    WeightedIndex::new(&ws).map_err(|e| Error::Config(format!("{what}: {e}")))
}

impl CompiledGrammar {
    pub fn new(grammar: Grammar) -> Result<Self> {
        let mut names = BTreeSet::new();
        for n in grammar
            .attributes
            .iter()
            .map(|a| &a.name)
            .chain(grammar.fillers.iter().map(|f| &f.name))
        {
            if !names.insert(n.clone()) {
                return Err(Error::Config(format!("slot `{n}` is defined twice")));
            }
        }
        let object_attr = grammar
            .attributes
            .iter()
            .position(|a| a.name == grammar.object_attribute)
            .ok_or_else(|| {
                Error::Config(format!(
                    "object attribute `{}` is not defined",
                    grammar.object_attribute
                ))
            })?;
        for v in &grammar.attributes[object_attr].values {
            if tokenize(&v.name).len() != 1 {
                return Err(Error::Config(format!(
                    "object value `{}` must be a single word",
                    v.name
                )));
            }
        }

        if grammar.templates.is_empty() {
            return Err(Error::Config("grammar has no templates".into()));
        }
        let mut templates = Vec::with_capacity(grammar.templates.len());
        for t in &grammar.templates {
            let mut pieces = Vec::new();
            for word in t.pattern.split_whitespace() {
                if let Some(inner) = word.strip_prefix('{') {
                    let name = inner.strip_suffix('}').ok_or_else(|| {
                        Error::Config(format!("production `{}`: unterminated slot `{word}`", t.pattern))
                    })?;
                    let slot = if let Some(i) = grammar.attributes.iter().position(|a| a.name == name) {
                        Slot::Attribute(i)
                    } else if let Some(i) = grammar.fillers.iter().position(|f| f.name == name) {
                        Slot::Filler(i)
                    } else {
                        return Err(Error::Config(format!(
                            "production `{}` references undefined slot `{name}`",
                            t.pattern
                        )));
                    };
                    pieces.push(Piece::Slot(slot));
                } else {
                    pieces.push(Piece::Word(word.to_lowercase()));
                }
            }
            if pieces.is_empty() {
                return Err(Error::Config("empty production".into()));
            }
            templates.push(pieces);
        }

        let template_dist = weights("template list", grammar.templates.iter().map(|t| t.weight))?;
        let mut value_dists = Vec::new();
        let mut attr_realization_dists = Vec::new();
        for a in &grammar.attributes {
            value_dists.push(weights(&format!("attribute `{}`", a.name), a.values.iter().map(|v| v.weight))?);
            let mut per_value = Vec::new();
            for v in &a.values {
                per_value.push(weights(
                    &format!("value `{}` of `{}`", v.name, a.name),
                    v.realizations.iter().map(|p| p.weight),
                )?);
            }
            attr_realization_dists.push(per_value);
        }
        let mut filler_dists = Vec::new();
        for f in &grammar.fillers {
            filler_dists.push(weights(
                &format!("filler `{}`", f.name),
                f.realizations.iter().map(|p| p.weight),
            )?);
        }
        Ok(CompiledGrammar {
            grammar,
            templates,
            template_dist,
            value_dists,
            attr_realization_dists,
            filler_dists,
            object_attr,
        })
    }

    pub fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    pub fn object_words(&self) -> Vec<String> {
        self.grammar.attributes[self.object_attr]
            .values
            .iter()
            .map(|v| v.name.to_lowercase())
            .collect()
    }

    /// Every word any production can emit.
    pub fn lexicon(&self) -> BTreeSet<String> {
        let mut words = BTreeSet::new();
        for t in &self.templates {
            for p in t {
                if let Piece::Word(w) = p {
                    words.insert(w.clone());
                }
            }
        }
        let phrases = self
            .grammar
            .attributes
            .iter()
            .flat_map(|a| a.values.iter().flat_map(|v| v.realizations.iter()))
            .chain(self.grammar.fillers.iter().flat_map(|f| f.realizations.iter()));
        for p in phrases {
            words.extend(tokenize(&p.text));
        }
        words.extend(self.object_words());
        words
    }

    fn sample_scene(&self, rng: &mut impl Rng) -> Vec<usize> {
        self.value_dists.iter().map(|d| d.sample(rng)).collect()
    }

    fn realize(&self, scene: &[usize], rng: &mut impl Rng) -> String {
        let t = self.template_dist.sample(rng);
        let mut words: Vec<String> = Vec::new();
        for piece in &self.templates[t] {
            match piece {
                Piece::Word(w) => words.push(w.clone()),
                Piece::Slot(Slot::Attribute(a)) => {
                    let v = scene[*a];
                    let r = self.attr_realization_dists[*a][v].sample(rng);
                    words.extend(tokenize(&self.grammar.attributes[*a].values[v].realizations[r].text));
                }
                Piece::Slot(Slot::Filler(f)) => {
                    let r = self.filler_dists[*f].sample(rng);
                    words.extend(tokenize(&self.grammar.fillers[*f].realizations[r].text));
                }
            }
        }
        words.join(" ")
    }

    fn one_hot_dim(&self) -> usize {
        self.grammar.attributes.iter().map(|a| a.values.len()).sum()
    }
}

fn phrases(items: &[&str]) -> Vec<Phrase> {
    // Zipf-like preference for the first synonym.
    items
        .iter()
        .enumerate()
        .map(|(i, t)| Phrase {
            text: t.to_string(),
            weight: 1.0 / (i as f64 + 1.0).powf(1.2),
        })
        .collect()
}

fn attribute(name: &str, values: &[(&str, &[&str])]) -> Attribute {
    Attribute {
        name: name.into(),
        values: values
            .iter()
            .enumerate()
            .map(|(i, (n, r))| AttributeValue {
                name: n.to_string(),
                weight: 1.0 / (i as f64 + 1.0),
                realizations: phrases(r),
            })
            .collect(),
    }
}

impl Default for Grammar {
    fn default() -> Self {
        let object = attribute(
            "object",
            &[
                ("dog", &["dog", "puppy", "pup", "hound"]),
                ("cat", &["cat", "kitten", "kitty", "feline"]),
                ("man", &["man", "guy", "gentleman", "fellow"]),
                ("woman", &["woman", "lady", "girl"]),
                ("horse", &["horse", "pony", "stallion", "mare"]),
                ("bird", &["bird", "sparrow", "finch", "pigeon"]),
                ("child", &["child", "kid", "boy", "toddler"]),
                ("cow", &["cow", "calf", "bull"]),
                ("sheep", &["sheep", "lamb", "ewe"]),
                ("bear", &["bear", "cub", "grizzly"]),
                ("elephant", &["elephant", "pachyderm"]),
                ("giraffe", &["giraffe"]),
            ],
        );
        let color = attribute(
            "color",
            &[
                ("white", &["white", "pale", "snowy"]),
                ("black", &["black", "dark", "jet black"]),
                ("brown", &["brown", "tan", "chocolate"]),
                ("gray", &["gray", "grey", "silver"]),
                ("red", &["red", "crimson", "scarlet"]),
                ("yellow", &["yellow", "golden", "blond"]),
                ("spotted", &["spotted", "speckled", "dotted"]),
                ("striped", &["striped", "stripy"]),
            ],
        );
        let size = attribute(
            "size",
            &[
                ("small", &["small", "little", "tiny", "petite"]),
                ("large", &["large", "big", "huge", "giant"]),
                ("young", &["young", "baby", "juvenile"]),
            ],
        );
        let action = attribute(
            "action",
            &[
                ("standing", &["standing", "is standing", "stands", "waiting"]),
                ("running", &["running", "is running", "runs", "sprinting", "racing"]),
                ("sitting", &["sitting", "is sitting", "sits", "resting"]),
                ("walking", &["walking", "is walking", "walks", "strolling", "wandering"]),
                ("sleeping", &["sleeping", "is sleeping", "napping", "dozing"]),
                ("eating", &["eating", "is eating", "feeding", "grazing", "munching"]),
                ("playing", &["playing", "is playing", "plays", "frolicking"]),
                ("looking", &["looking around", "is looking around", "watching", "staring"]),
            ],
        );
        let location = attribute(
            "location",
            &[
                ("park", &["in the park", "in a park", "at the park", "on the lawn"]),
                ("field", &["in a field", "in the field", "in a grassy field", "on a meadow"]),
                ("street", &["on the street", "on a street", "down the road", "along the sidewalk"]),
                ("beach", &["on the beach", "at the beach", "by the ocean", "near the water"]),
                ("snow", &["in the snow", "on the snow", "on a snowy hill", "in the snowy woods"]),
                ("forest", &["in the woods", "in the forest", "among the trees", "near some trees"]),
                ("yard", &["in a yard", "in the backyard", "behind a house", "near a fence"]),
                ("zoo", &["at the zoo", "in an enclosure", "in a pen", "inside a zoo"]),
                ("river", &["by the river", "near a river", "next to a stream", "on the riverbank"]),
                ("city", &["in the city", "in a city", "downtown", "near some buildings"]),
            ],
        );
        let det = Filler {
            name: "det".into(),
            realizations: phrases(&["a", "one", "the", "an adorable", "a lone"]),
        };
        let time = Filler {
            name: "time".into(),
            realizations: phrases(&["today", "at night", "in the morning", "during the day", "at sunset", "in the evening"]),
        };
        let view = Filler {
            name: "view".into(),
            realizations: phrases(&["a photo of", "a picture of", "an image of", "a view of", "a close up of"]),
        };
        let templates = [
            ("{det} {color} {object} {action} {location}", 0.30),
            ("{det} {size} {color} {object} {action} {location}", 0.12),
            ("{det} {object} {action} {location}", 0.12),
            ("{det} {color} {object} {location}", 0.10),
            ("there is {det} {color} {object} {location}", 0.07),
            ("{view} {det} {color} {object} {location}", 0.06),
            ("{location} {det} {size} {object} {action}", 0.06),
            ("{det} {size} {object} {action}", 0.06),
            ("{det} {object} with {color} fur {action} {location}", 0.05),
            ("{det} {color} {object} {action} {location} {time}", 0.06),
        ]
        .iter()
        .map(|(p, w)| Template {
            pattern: p.to_string(),
            weight: *w,
        })
        .collect();
        Grammar {
            attributes: vec![object, color, size, action, location],
            fillers: vec![det, time, view],
            templates,
            object_attribute: "object".into(),
        }
    }
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        ToyWorldConfig {
            grammar: Grammar::default(),
            references_per_image: 5,
            feature_dim: 48,
            feature_noise: 0.1,
            train_size: 2000,
            val_size: 200,
            test_size: 200,
        }
    }
}

impl ToyWorldConfig {
    pub fn validate(&self) -> Result<CompiledGrammar> {
        if self.references_per_image == 0 {
            return Err(Error::Config("references_per_image must be ≥ 1".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be ≥ 1".into()));
        }
        if !(self.feature_noise >= 0.0) {
            return Err(Error::Config("feature_noise must be ≥ 0".into()));
        }
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return Err(Error::Config("every split needs at least one scene".into()));
        }
        CompiledGrammar::new(self.grammar.clone())
    }
}

/// Samples the three splits. Identical `(config, seed)` gives identical output.
pub fn generate_toy_dataset(
    config: &ToyWorldConfig,
    seed: u64,
) -> Result<(CompiledGrammar, [DatasetSplit; 3])> {
    let grammar = config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let in_dim = grammar.one_hot_dim();
    let n_attr = grammar.grammar.attributes.len() as f64;
    let mix: Vec<f64> = (0..in_dim * config.feature_dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) / n_attr.sqrt())
        .collect();
    let n_objects = grammar.grammar.attributes[grammar.object_attr].values.len();

    let mut next_id = 0u64;
    let mut make_split = |tag: SplitTag, size: usize, rng: &mut ChaCha8Rng| {
        let mut items = Vec::with_capacity(size);
        for _ in 0..size {
            let scene = grammar.sample_scene(rng);
            let mut x_c = vec![0.0; config.feature_dim];
            let mut offset = 0;
            for (a, &v) in scene.iter().enumerate() {
                let row = &mix[(offset + v) * config.feature_dim..][..config.feature_dim];
                for (x, m) in x_c.iter_mut().zip(row) {
                    *x += m;
                }
                offset += grammar.grammar.attributes[a].values.len();
            }
            for x in x_c.iter_mut() {
                *x += config.feature_noise * rng.sample::<f64, _>(StandardNormal);
            }
            let mut x_o = vec![0.0; n_objects];
            x_o[scene[grammar.object_attr]] = 1.0;
            let references = (0..config.references_per_image)
                .map(|_| grammar.realize(&scene, rng))
                .collect();
            items.push(DatasetItem {
                image_id: next_id,
                features: ImageFeatures { x_c, x_o },
                references,
            });
            next_id += 1;
        }
        DatasetSplit { tag, items }
    };
    let train = make_split(SplitTag::Train, config.train_size, &mut rng);
    let val = make_split(SplitTag::Val, config.val_size, &mut rng);
    let test = make_split(SplitTag::Test, config.test_size, &mut rng);
    Ok((grammar, [train, val, test]))
}
