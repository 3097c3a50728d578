//! Model checkpoints.
//!
//! A checkpoint is one JSON header line followed by the parameters as
//! little-endian `f64` values in declaration order. The header records the
//! model configuration, the tensor layout, the vocabulary hash and a SHA-256
//! of the payload.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sha256_hex, TOKENIZER_VERSION};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::params::{ParamLayout, ParamSet};

pub const CHECKPOINT_FORMAT: &str = "advcap-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Generator {
        config: GeneratorConfig,
        object_ids: Vec<usize>,
    },
    Discriminator {
        config: DiscriminatorConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub tokenizer: String,
    pub vocab_hash: String,
    pub model: ModelSpec,
    pub layout: Vec<ParamLayout>,
    pub payload_sha256: String,
}

fn encode(model: ModelSpec, params: &ParamSet, vocab_hash: &str) -> Vec<u8> {
    let mut payload = Vec::with_capacity(params.num_scalars() * 8);
    for t in params.tensors() {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        tokenizer: TOKENIZER_VERSION.into(),
        vocab_hash: vocab_hash.into(),
        model,
        layout: params.layout(),
        payload_sha256: sha256_hex(&payload),
    };
    let mut out = serde_json::to_vec(&header).expect("checkpoint header serializes");
    out.push(b'\n');
    out.extend(payload);
    out
}

fn decode(bytes: &[u8], expected_vocab_hash: Option<&str>) -> Result<(CheckpointHeader, Vec<f64>)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Integrity("checkpoint has no header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Integrity(format!("checkpoint header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Integrity(format!("unsupported checkpoint format `{}`", header.format)));
    }
    if header.tokenizer != TOKENIZER_VERSION {
        return Err(Error::Integrity(format!(
            "checkpoint tokenizer `{}` differs from `{TOKENIZER_VERSION}`",
            header.tokenizer
        )));
    }
    if let Some(h) = expected_vocab_hash {
        if h != header.vocab_hash {
            return Err(Error::Integrity(format!(
                "vocabulary hash mismatch: checkpoint {}, dataset {h}",
                header.vocab_hash
            )));
        }
    }
    let payload = &bytes[nl + 1..];
    if sha256_hex(payload) != header.payload_sha256 {
        return Err(Error::Integrity("checkpoint payload hash mismatch".into()));
    }
    if payload.len() % 8 != 0 {
        return Err(Error::Integrity("checkpoint payload is not a whole number of f64 values".into()));
    }
    let flat = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, flat))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Precondition(format!("checkpoint {} does not exist", path.display())),
        _ => Error::io(path, e),
    })
}

pub fn generator_bytes(gen: &Generator, vocab_hash: &str) -> Vec<u8> {
    let spec = ModelSpec::Generator {
        config: gen.config().clone(),
        object_ids: gen.object_ids().to_vec(),
    };
    encode(spec, gen.params(), vocab_hash)
}

pub fn discriminator_bytes(disc: &Discriminator, vocab_hash: &str) -> Vec<u8> {
    encode(
        ModelSpec::Discriminator {
            config: disc.config().clone(),
        },
        disc.params(),
        vocab_hash,
    )
}

pub fn generator_from_bytes(bytes: &[u8], expected_vocab_hash: Option<&str>) -> Result<(Generator, CheckpointHeader)> {
    let (header, flat) = decode(bytes, expected_vocab_hash)?;
    let ModelSpec::Generator { config, object_ids } = &header.model else {
        return Err(Error::Integrity("checkpoint holds a discriminator, not a generator".into()));
    };
    // Initial values are overwritten by the payload.
    let mut gen = Generator::new(config.clone(), object_ids.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    gen.params_mut().load_flat(&header.layout, &flat)?;
    Ok((gen, header))
}

pub fn discriminator_from_bytes(
    bytes: &[u8],
    expected_vocab_hash: Option<&str>,
) -> Result<(Discriminator, CheckpointHeader)> {
    let (header, flat) = decode(bytes, expected_vocab_hash)?;
    let ModelSpec::Discriminator { config } = &header.model else {
        return Err(Error::Integrity("checkpoint holds a generator, not a discriminator".into()));
    };
    let mut disc = Discriminator::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    disc.params_mut().load_flat(&header.layout, &flat)?;
    Ok((disc, header))
}

pub fn save_generator(path: &Path, gen: &Generator, vocab_hash: &str) -> Result<()> {
    write(path, &generator_bytes(gen, vocab_hash))
}

pub fn save_discriminator(path: &Path, disc: &Discriminator, vocab_hash: &str) -> Result<()> {
    write(path, &discriminator_bytes(disc, vocab_hash))
}

pub fn load_generator(path: &Path, expected_vocab_hash: Option<&str>) -> Result<(Generator, CheckpointHeader)> {
    generator_from_bytes(&read(path)?, expected_vocab_hash)
}

pub fn load_discriminator(
    path: &Path,
    expected_vocab_hash: Option<&str>,
) -> Result<(Discriminator, CheckpointHeader)> {
    discriminator_from_bytes(&read(path)?, expected_vocab_hash)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen(seed: u64) -> Generator {
        let c = GeneratorConfig {
            embed_dim: 3,
            hidden_dim: 4,
            num_layers: 2,
            noise_dim: 2,
            max_len: 5,
            ..GeneratorConfig::new(9, 3, 2)
        };
        Generator::new(c, vec![4, 5], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn generator_round_trip_is_exact() {
        let g = gen(1);
        let bytes = generator_bytes(&g, "abc");
        let (back, header) = generator_from_bytes(&bytes, Some("abc")).unwrap();
        assert_eq!(back.params(), g.params());
        assert_eq!(back.config(), g.config());
        assert_eq!(back.object_ids(), g.object_ids());
        assert_eq!(header.vocab_hash, "abc");
        assert_eq!(generator_bytes(&back, "abc"), bytes);
    }

    #[test]
    fn discriminator_round_trip_is_exact() {
        let c = DiscriminatorConfig {
            word_embed_dim: 2,
            sentence_embed_dim: 3,
            kernel_inner_dim: 2,
            num_kernels: 2,
            set_size: 2,
            ..DiscriminatorConfig::new(9, 3)
        };
        let d = Discriminator::new(c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let bytes = discriminator_bytes(&d, "v");
        let (back, _) = discriminator_from_bytes(&bytes, None).unwrap();
        assert_eq!(back.params(), d.params());
        assert!(matches!(generator_from_bytes(&bytes, None), Err(Error::Integrity(_))));
    }

    #[test]
    fn vocabulary_mismatch_and_corruption_are_integrity_errors() {
        let bytes = generator_bytes(&gen(3), "abc");
        assert!(matches!(generator_from_bytes(&bytes, Some("xyz")), Err(Error::Integrity(_))));
        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 1;
        assert!(matches!(generator_from_bytes(&bad, None), Err(Error::Integrity(_))));
        assert!(matches!(generator_from_bytes(b"no newline", None), Err(Error::Integrity(_))));
    }

    #[test]
    fn missing_file_is_precondition() {
        let err = load_generator(Path::new("/nonexistent/g.ckpt"), None).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }
}
