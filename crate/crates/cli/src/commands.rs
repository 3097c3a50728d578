use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use advcap_core::checkpoint::{load_discriminator, load_generator, save_discriminator, save_generator};
use advcap_core::config::RunConfig;
use advcap_core::data::{join, Dataset, GeneratedRecord, SplitTag, TOKENIZER_VERSION};
use advcap_core::experiment::{train_adversarial, train_baseline, train_discriminator};
use advcap_core::generator::DecoderRegistry;
use advcap_core::training::TrainLog;
use advcap_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::settings::{file_hash, record_run, resolve, write_file};
use crate::{ConfigArgs, Mode};

pub const GENERATOR_FILE: &str = "generator.ckpt";
pub const DISCRIMINATOR_FILE: &str = "discriminator.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const CAPTIONS_FORMAT: &str = "advcap-captions/1";

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join("manifest.json").is_file() {
        return Err(Error::Precondition(format!(
            "no dataset at {} (run `advcap make-data` first)",
            dir.display()
        )));
    }
    Dataset::load(dir)
}

fn streaming_log(out: &Path, cfg: &RunConfig) -> Result<TrainLog> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(LOG_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok(TrainLog::streaming(cfg.train.log_wall_time, Box::new(file)))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))? + "\n";
    write_file(path, text.as_bytes())
}

fn dataset_inputs(data: &Path) -> Result<BTreeMap<String, String>> {
    Ok(BTreeMap::from([("dataset_manifest".to_string(), file_hash(&data.join("manifest.json"))?)]))
}

pub fn make_data(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = resolve(args)?;
    let mut ds = Dataset::toy(&cfg.data, cfg.seed)?;
    ds.save(out)?;
    let mut outputs = vec!["manifest.json"];
    outputs.extend(ds.manifest.files.keys().map(String::as_str));
    record_run(out, "make-data", &cfg, &BTreeMap::new(), &outputs)?;
    let r = &ds.manifest.reference_stats;
    eprintln!(
        "wrote {} train / {} val / {} test images, vocabulary {} (test references: div2 {:.3}, mbleu4 {:.3})",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        ds.vocab.len(),
        r.div2,
        r.mbleu4
    );
    Ok(())
}

pub fn pretrain(args: &ConfigArgs, data: &Path, out: &Path) -> Result<()> {
    let cfg = resolve(args)?;
    let ds = load_dataset(data)?;
    let mut log = streaming_log(out, &cfg)?;
    let (gen, gen_summary) = train_baseline(&ds, &cfg, cfg.seed, &mut log)?;
    eprintln!(
        "generator: held-out loss {:.4} -> {:.4} (epoch {})",
        gen_summary.initial_val_loss, gen_summary.best_val_loss, gen_summary.best_epoch
    );
    let (disc, disc_summary) = train_discriminator(&ds, &cfg, cfg.seed, &mut log)?;
    eprintln!("discriminator: held-out accuracy {:.3}", disc_summary.val_accuracy);
    if let Some(w) = &disc_summary.warning {
        eprintln!("warning: {w}");
    }
    save_generator(&out.join(GENERATOR_FILE), &gen, &ds.manifest.vocab_hash)?;
    save_discriminator(&out.join(DISCRIMINATOR_FILE), &disc, &ds.manifest.vocab_hash)?;
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({ "generator": gen_summary, "discriminator": disc_summary }),
    )?;
    record_run(
        out,
        "pretrain",
        &cfg,
        &dataset_inputs(data)?,
        &[GENERATOR_FILE, DISCRIMINATOR_FILE, LOG_FILE, "summary.json"],
    )
}

fn require(path: PathBuf, what: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::Precondition(format!(
            "pretrain required: {what} checkpoint {} not found",
            path.display()
        )))
    }
}

pub fn train_gan(args: &ConfigArgs, data: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    let cfg = resolve(args)?;
    let ds = load_dataset(data)?;
    let gpath = require(checkpoint.join(GENERATOR_FILE), "generator")?;
    let dpath = require(checkpoint.join(DISCRIMINATOR_FILE), "discriminator")?;
    let hash = ds.manifest.vocab_hash.as_str();
    let (gen, _) = load_generator(&gpath, Some(hash))?;
    let (disc, _) = load_discriminator(&dpath, Some(hash))?;
    if *gen.config() != cfg.model.generator(ds.vocab.len(), ds.feature_dim(), ds.num_objects())? {
        return Err(Error::Config(format!("{} was trained with different [model] settings", gpath.display())));
    }
    if *disc.config() != cfg.model.discriminator(ds.vocab.len(), ds.feature_dim())? {
        return Err(Error::Config(format!("{} was trained with different [model] settings", dpath.display())));
    }
    let mut log = streaming_log(out, &cfg)?;
    let (gen, disc, summary) = train_adversarial(&ds, &cfg, gen, disc, cfg.seed, &mut log)?;
    eprintln!(
        "{} discriminator / {} generator updates, {} gate activations",
        summary.d_updates, summary.g_updates, summary.gate_activations
    );
    save_generator(&out.join(GENERATOR_FILE), &gen, hash)?;
    save_discriminator(&out.join(DISCRIMINATOR_FILE), &disc, hash)?;
    write_json(&out.join("summary.json"), &summary)?;
    let mut inputs = dataset_inputs(data)?;
    inputs.insert("generator".into(), file_hash(&gpath)?);
    inputs.insert("discriminator".into(), file_hash(&dpath)?);
    record_run(
        out,
        "train-gan",
        &cfg,
        &inputs,
        &[GENERATOR_FILE, DISCRIMINATOR_FILE, LOG_FILE, "summary.json"],
    )
}

#[derive(Debug, Default)]
pub struct DecodeFlags {
    pub mode: Option<Mode>,
    pub beam_width: Option<usize>,
    pub p: Option<usize>,
    pub split: Option<String>,
}

/// Provenance of a captions file, written next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionsManifest {
    pub format: String,
    pub tokenizer: String,
    pub vocab_hash: String,
    pub checkpoint_sha256: String,
    pub config_hash: String,
    pub mode: String,
    pub p: usize,
    pub beam_width: usize,
    pub split: String,
    pub seed: u64,
}

pub fn generate(args: &ConfigArgs, data: &Path, checkpoint: &Path, flags: DecodeFlags, out: &Path) -> Result<()> {
    // Decoding flags become overrides so the recorded config hash covers them.
    let mut args = args.clone();
    if let Some(m) = flags.mode {
        args.overrides.push(format!("eval.mode=\"{}\"", m.name()));
    }
    if let Some(w) = flags.beam_width {
        args.overrides.push(format!("eval.beam_width={w}"));
    }
    if let Some(p) = flags.p {
        args.overrides.push(format!("eval.p={p}"));
    }
    if let Some(s) = flags.split {
        args.overrides.push(format!("eval.split={}", toml::Value::String(s)));
    }
    let cfg = resolve(&args)?;
    let ds = load_dataset(data)?;
    let path = if checkpoint.is_dir() {
        checkpoint.join(GENERATOR_FILE)
    } else {
        checkpoint.to_path_buf()
    };
    let (gen, _) = load_generator(&path, Some(&ds.manifest.vocab_hash))?;
    let split = SplitTag::parse(&cfg.eval.split)?;
    let strategy = DecoderRegistry::default().build(&cfg.eval.mode, &cfg.eval.decode_options())?;
    let items = &ds.split(split).items;
    let features: Vec<_> = items.iter().map(|it| &it.features).collect();
    let sets = strategy.decode(&gen, &features, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;

    let mut text = String::new();
    for (item, set) in items.iter().zip(&sets) {
        for (i, s) in set.iter().enumerate() {
            let rec = GeneratedRecord {
                image_id: item.image_id,
                rank: Some(i + 1),
                caption: join(&ds.vocab.decode(&s.caption.tokens)),
                log_prob: Some(s.log_prob),
            };
            text.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Data(e.to_string()))?);
            text.push('\n');
        }
    }
    write_file(&out.join(CAPTIONS_FILE), text.as_bytes())?;
    let checkpoint_sha256 = file_hash(&path)?;
    write_json(
        &out.join("manifest.json"),
        &CaptionsManifest {
            format: CAPTIONS_FORMAT.into(),
            tokenizer: TOKENIZER_VERSION.into(),
            vocab_hash: ds.manifest.vocab_hash.clone(),
            checkpoint_sha256: checkpoint_sha256.clone(),
            config_hash: cfg.hash(),
            mode: cfg.eval.mode.clone(),
            p: cfg.eval.p,
            beam_width: cfg.eval.beam_width,
            split: split.name().into(),
            seed: cfg.seed,
        },
    )?;
    let mut inputs = dataset_inputs(data)?;
    inputs.insert("generator".into(), checkpoint_sha256);
    record_run(out, "generate", &cfg, &inputs, &[CAPTIONS_FILE, "manifest.json"])?;
    eprintln!("wrote {} captions for {} images", sets.iter().map(Vec::len).sum::<usize>(), items.len());
    Ok(())
}
