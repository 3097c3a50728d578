use advcap_core::autodiff::{finite_difference_check, Tape};
use advcap_core::data::{
    Caption, Dataset, DatasetItem, DatasetSplit, ImageFeatures, SplitTag, ToyWorldConfig, Vocabulary,
};
use advcap_core::discriminator::{Discriminator, DiscriminatorConfig, SentenceInput};
use advcap_core::generator::{Generator, GeneratorConfig};
use advcap_core::losses::{generator_loss, BatchDistanceStats};
use advcap_core::params::Bound;
use advcap_core::training::{
    pretrain_discriminator, pretrain_generator, Adversary, GanTrainer, TrainConfig, TrainLog,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 6] = ["a", "red", "dog", "runs", "on", "grass"];

fn vocab() -> Vocabulary {
    Vocabulary::from_tokens(WORDS.map(String::from))
        .unwrap()
        .with_object_words(vec!["dog".into()])
        .unwrap()
}

fn item(id: u64, x_c: Vec<f64>, refs: &[&str]) -> DatasetItem {
    DatasetItem {
        image_id: id,
        features: ImageFeatures { x_c, x_o: vec![1.0] },
        references: refs.iter().map(|s| s.to_string()).collect(),
    }
}

fn gen_config(v: usize, f: usize) -> GeneratorConfig {
    GeneratorConfig {
        embed_dim: 8,
        hidden_dim: 16,
        num_layers: 1,
        noise_dim: 2,
        max_len: 8,
        ..GeneratorConfig::new(v, f, 1)
    }
}

fn toy() -> Dataset {
    let cfg = ToyWorldConfig {
        train_size: 120,
        val_size: 200,
        test_size: 10,
        feature_dim: 8,
        ..ToyWorldConfig::default()
    };
    Dataset::toy(&cfg, 11).unwrap()
}

fn toy_models(ds: &Dataset, set_size: usize) -> (Generator, Discriminator) {
    let v = ds.vocab.len();
    let g = Generator::new(
        GeneratorConfig {
            num_objects: ds.num_objects(),
            max_len: 12,
            ..gen_config(v, ds.feature_dim())
        },
        ds.vocab.object_ids().unwrap(),
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let d = Discriminator::new(
        DiscriminatorConfig {
            word_embed_dim: 6,
            sentence_embed_dim: 8,
            kernel_inner_dim: 3,
            num_kernels: 4,
            set_size,
            ..DiscriminatorConfig::new(v, ds.feature_dim())
        },
        &mut ChaCha8Rng::seed_from_u64(2),
    )
    .unwrap();
    (g, d)
}

#[test]
fn single_caption_is_memorized() {
    let v = vocab();
    let split = DatasetSplit {
        tag: SplitTag::Train,
        items: vec![item(1, vec![0.5, -0.5, 1.0, 0.0], &["a red dog runs on grass"])],
    };
    let mut g = Generator::new(gen_config(v.len(), 4), v.object_ids().unwrap(), &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    let cfg = TrainConfig {
        pretrain_epochs: 150,
        pretrain_learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let mut log = TrainLog::new(false);
    let s = pretrain_generator(&mut g, &split, &split, &v, &cfg, &mut ChaCha8Rng::seed_from_u64(0), &mut log).unwrap();
    let bound = 0.1 * (v.len() as f64).ln();
    assert!(s.best_val_loss < bound, "{} ≥ {bound}", s.best_val_loss);
    assert!(s.best_val_loss < s.initial_val_loss);
    assert_eq!(log.len(), 150);
}

#[test]
fn pretraining_is_deterministic_and_zero_epochs_is_identity() {
    let ds = toy();
    let cfg = TrainConfig {
        pretrain_epochs: 1,
        disc_pretrain_epochs: 1,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let run = |cfg: &TrainConfig| {
        let (mut g, mut d) = toy_models(&ds, 2);
        let mut log = TrainLog::new(false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        pretrain_generator(&mut g, &ds.train, &ds.val, &ds.vocab, cfg, &mut rng, &mut log).unwrap();
        pretrain_discriminator(&mut d, &ds.train, &ds.val, &ds.vocab, cfg, &mut rng, &mut log).unwrap();
        (g, d, log)
    };
    let (g1, d1, l1) = run(&cfg);
    let (g2, d2, l2) = run(&cfg);
    assert_eq!(g1.params(), g2.params());
    assert_eq!(d1.params(), d2.params());
    assert_eq!(l1.to_jsonl(), l2.to_jsonl());

    let zero = TrainConfig {
        pretrain_epochs: 0,
        disc_pretrain_epochs: 0,
        ..cfg
    };
    let (g0, d0) = toy_models(&ds, 2);
    let (g, d, log) = run(&zero);
    assert_eq!(g.params(), g0.params());
    assert_eq!(d.params(), d0.params());
    assert!(log.is_empty());
}

fn disc_config(v: usize, f: usize) -> DiscriminatorConfig {
    DiscriminatorConfig {
        word_embed_dim: 8,
        sentence_embed_dim: 8,
        kernel_inner_dim: 4,
        num_kernels: 8,
        set_size: 3,
        ..DiscriminatorConfig::new(v, f)
    }
}

#[test]
fn discriminator_separates_separable_pairs() {
    // Eight classes keep same-class collisions among random mismatches rare.
    let objects = ["dog", "cat", "cow", "horse", "bird", "bear", "lamb", "goat"];
    let words = ["a", "runs"].iter().chain(&objects).map(|w| w.to_string());
    let v = Vocabulary::from_tokens(words).unwrap();
    let split = |tag, n: usize, offset: u64| DatasetSplit {
        tag,
        items: (0..n)
            .map(|i| {
                let k = i % 8;
                let mut x = vec![0.0; 8];
                x[k] = 1.0;
                let cap = format!("a {} runs", objects[k]);
                item(offset + i as u64, x, &[&cap, &cap, &cap])
            })
            .collect(),
    };
    let (train, val) = (split(SplitTag::Train, 128, 0), split(SplitTag::Val, 32, 1000));
    let mut d = Discriminator::new(disc_config(v.len(), 8), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let cfg = TrainConfig {
        disc_pretrain_epochs: 60,
        disc_pretrain_learning_rate: 3e-3,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let mut log = TrainLog::new(false);
    let s = pretrain_discriminator(&mut d, &train, &val, &v, &cfg, &mut ChaCha8Rng::seed_from_u64(4), &mut log)
        .unwrap();
    assert!(s.val_accuracy > 0.9, "{s:?}");
    assert!(s.warning.is_none());
}

#[test]
fn discriminator_is_at_chance_when_captions_ignore_images() {
    let mut ds = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for split in [&mut ds.train, &mut ds.val] {
        for it in &mut split.items {
            it.features.x_c = (0..ds.manifest.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        }
    }
    let mut d = Discriminator::new(disc_config(ds.vocab.len(), ds.feature_dim()), &mut ChaCha8Rng::seed_from_u64(3))
        .unwrap();
    let cfg = TrainConfig {
        disc_pretrain_epochs: 5,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let mut log = TrainLog::new(false);
    let s = pretrain_discriminator(&mut d, &ds.train, &ds.val, &ds.vocab, &cfg, &mut rng, &mut log).unwrap();
    assert!((s.val_accuracy - 0.5).abs() <= 0.05, "{s:?}");
}

#[test]
fn updates_touch_only_their_own_network() {
    let ds = toy();
    let (g, d) = toy_models(&ds, 3);
    let cfg = TrainConfig {
        batch_size: 8,
        probe_images: 8,
        g_learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let mut t = GanTrainer::new(g.clone(), d.clone(), &ds.train, &ds.val, &ds.vocab, &cfg, 9).unwrap();
    let step = t.g_step().unwrap();
    assert!(step.loss.is_finite() && step.adversarial > 0.0 && step.feature_matching >= 0.0);
    assert_ne!(t.generator().params(), g.params());
    assert_eq!(t.discriminator().params(), d.params());

    let g_after = t.generator().params().clone();
    let step = t.d_step().unwrap();
    assert!(step.loss.is_finite() && (0.0..=1.0).contains(&step.accuracy));
    assert_eq!(t.generator().params(), &g_after);
    assert_ne!(t.discriminator().params(), d.params());
}

/// Randomizes every weight so gradients sit well above central-difference noise.
fn spread<'a>(tensors: impl Iterator<Item = &'a mut advcap_core::autodiff::Tensor>, seed: u64, r: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in tensors {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-r..r));
    }
}

#[test]
fn generator_loss_gradients_match_finite_differences_through_the_discriminator() {
    let v = vocab();
    let nv = v.len();
    let mut g = Generator::new(
        GeneratorConfig {
            embed_dim: 3,
            hidden_dim: 4,
            num_layers: 2,
            noise_dim: 2,
            max_len: 4,
            ..GeneratorConfig::new(nv, 3, 1)
        },
        v.object_ids().unwrap(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    spread(g.params_mut().tensors_mut().iter_mut(), 10, 0.6);
    let mut d = Discriminator::new(
        DiscriminatorConfig {
            word_embed_dim: 3,
            sentence_embed_dim: 4,
            kernel_inner_dim: 2,
            num_kernels: 3,
            set_size: 2,
            ..DiscriminatorConfig::new(nv, 3)
        },
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    spread(d.params_mut().tensors_mut().iter_mut(), 11, 0.7);

    let imgs = [
        ImageFeatures { x_c: vec![0.3, -0.2, 0.8], x_o: vec![1.0] },
        ImageFeatures { x_c: vec![-0.5, 0.9, 0.1], x_o: vec![0.0] },
    ];
    let rows: Vec<&ImageFeatures> = vec![&imgs[0], &imgs[0], &imgs[1], &imgs[1]];
    let x: Vec<&[f64]> = imgs.iter().map(|i| i.x_c.as_slice()).collect();
    let real_caps = [
        Caption::new(vec![4, 6]),
        Caption::new(vec![5, 6, 7]),
        Caption::new(vec![6, 8]),
        Caption::new(vec![4, 9, 7]),
    ];
    let real: Vec<&Caption> = real_caps.iter().collect();
    for feature_matching in [false, true] {
        let err = finite_difference_check(
            |tape: &mut Tape, ps| {
                let gv = g.vars_from(tape, Bound::from_vars(ps.to_vec()))?;
                let dv = d.bind(tape, false)?;
                let mut rngs: Vec<ChaCha8Rng> = (0..4).map(ChaCha8Rng::seed_from_u64).collect();
                let soft = g.gumbel_unroll(tape, &gv, &rows, &mut rngs, false)?;
                let out_g = d.discriminate(tape, &dv, &SentenceInput::Rows(&soft), &x)?;
                let out_r = d.discriminate(tape, &dv, &SentenceInput::Ids(&real), &x)?;
                let sg = BatchDistanceStats::from_output(tape, &out_g)?;
                let sr = BatchDistanceStats::from_output(tape, &out_r)?;
                generator_loss(tape, out_g.prob_real, &sg, &sr, feature_matching)
            },
            g.params().tensors(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "feature matching {feature_matching}: {err}");
    }
}
