//! Set-level discriminator.
//!
//! Every caption of an image's set is encoded by an LSTM, projected through two
//! kernel tensors and compared against the other captions of the same set
//! (`dist_s`) and against the embedded image (`dist_x`). Rows are mean-pooled
//! per image, concatenated and mapped to a two-way softmax.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{Caption, END, PAD};
use crate::error::{Error, Result};
use crate::generator::{lstm_bias, lstm_cell, stack_rows, SoftCaptions, INIT_SCALE};
use crate::params::{Bound, ParamId, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub vocab_size: usize,
    pub word_embed_dim: usize,
    /// Sentence and image embedding size `M`.
    pub sentence_embed_dim: usize,
    /// Rows `N` of each kernel slice.
    pub kernel_inner_dim: usize,
    /// Number of kernels `O`.
    pub num_kernels: usize,
    pub set_size: usize,
    pub feature_dim: usize,
}

impl DiscriminatorConfig {
    pub fn new(vocab_size: usize, feature_dim: usize) -> Self {
        DiscriminatorConfig {
            vocab_size,
            word_embed_dim: 32,
            sentence_embed_dim: 64,
            kernel_inner_dim: 8,
            num_kernels: 16,
            set_size: 5,
            feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("word_embed_dim", self.word_embed_dim),
            ("sentence_embed_dim", self.sentence_embed_dim),
            ("kernel_inner_dim", self.kernel_inner_dim),
            ("num_kernels", self.num_kernels),
            ("set_size", self.set_size),
            ("feature_dim", self.feature_dim),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("discriminator {name} must be ≥ 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DiscIds {
    embed: ParamId,
    w_in: ParamId,
    w_hh: ParamId,
    bias: ParamId,
    img_w: ParamId,
    img_b: ParamId,
    kern_s: ParamId,
    kern_x: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamSet,
    ids: DiscIds,
}

#[derive(Debug, Clone)]
pub struct DiscVars {
    pub bound: Bound,
    embed: Var,
    w_in: Var,
    w_hh: Var,
    bias: Var,
    img_w: Var,
    img_b: Var,
    pub kern_s: Var,
    pub kern_x: Var,
    out_w: Var,
    out_b: Var,
}

/// Word inputs for the sentence encoder, one row per caption.
pub enum SentenceInput<'a> {
    /// Token ids; END is appended and padding is masked.
    Ids(&'a [&'a Caption]),
    /// Generator output rows (hard or relaxed one-hots) with their masks.
    Rows(&'a SoftCaptions),
}

/// Probability of the "real" class plus the pooled distance features.
#[derive(Debug, Clone, Copy)]
pub struct DiscOutput {
    /// `[G, 1]`.
    pub prob_real: Var,
    /// `[G, O]`, mean over the set of `dist_s` rows.
    pub dist_s: Var,
    /// `[G, O]`, mean over the set of `dist_x` rows.
    pub dist_x: Var,
}

/// `Σ_j exp(−‖K_{i,l} − K'_{j,l}‖₁)` for anchors `[G·p, M]` against others
/// `[G·q, M]` within each of `groups` groups. Returns `[G·p, O]`.
pub fn distance_features(
    tape: &mut Tape,
    anchors: Var,
    others: Var,
    kernel: Var,
    groups: usize,
    inner: usize,
    kernels: usize,
) -> Result<Var> {
    let ka = tape.matmul(anchors, kernel)?;
    let kb = if anchors == others { ka } else { tape.matmul(others, kernel)? };
    let l1 = tape.grouped_l1(ka, kb, groups, inner, kernels)?;
    let neg = tape.scale(l1, -1.0);
    let c = tape.exp(neg);
    tape.sum_axis(c, 1)
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (v, e, m) = (config.vocab_size, config.word_embed_dim, config.sentence_embed_dim);
        let no = config.kernel_inner_dim * config.num_kernels;
        let s = INIT_SCALE;
        let kern = 1.0 / (m as f64).sqrt();
        let mut p = ParamSet::new();
        let ids = DiscIds {
            embed: p.add_uniform("enc.embed", &[v, e], s, rng),
            w_in: p.add_uniform("enc.w_in", &[e, 4 * m], s, rng),
            w_hh: p.add_uniform("enc.w_hh", &[m, 4 * m], s, rng),
            bias: p.add("enc.bias", lstm_bias(m, s, rng)),
            img_w: p.add_uniform("img.w", &[config.feature_dim, m], s, rng),
            img_b: p.add_uniform("img.b", &[m], s, rng),
            // Kernel entries shrink with M so initial L1 distances stay O(1)
            // and exp(−d) is not saturated.
            kern_s: p.add_uniform("kern.s", &[m, no], kern, rng),
            kern_x: p.add_uniform("kern.x", &[m, no], kern, rng),
            out_w: p.add_uniform("out.w", &[2 * config.num_kernels, 2], s, rng),
            out_b: p.add("out.b", Tensor::zeros(&[2])),
        };
        Ok(Discriminator { config, params: p, ids })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<DiscVars> {
        let bound = self.params.bind(tape, trainable);
        self.vars_from(bound)
    }

    pub fn vars_from(&self, bound: Bound) -> Result<DiscVars> {
        if bound.vars().len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} handles for {} discriminator parameters",
                bound.vars().len(),
                self.params.len()
            )));
        }
        let ids = &self.ids;
        Ok(DiscVars {
            embed: bound.var(ids.embed),
            w_in: bound.var(ids.w_in),
            w_hh: bound.var(ids.w_hh),
            bias: bound.var(ids.bias),
            img_w: bound.var(ids.img_w),
            img_b: bound.var(ids.img_b),
            kern_s: bound.var(ids.kern_s),
            kern_x: bound.var(ids.kern_x),
            out_w: bound.var(ids.out_w),
            out_b: bound.var(ids.out_b),
            bound,
        })
    }

    /// Final encoder hidden state per caption, `[R, M]`.
    pub fn encode_sentences(&self, tape: &mut Tape, vars: &DiscVars, input: &SentenceInput) -> Result<Var> {
        let m = self.config.sentence_embed_dim;
        let (rows, steps) = match input {
            SentenceInput::Ids(caps) => (caps.len(), caps.iter().map(|c| c.len() + 1).max().unwrap_or(0)),
            SentenceInput::Rows(soft) => (soft.tokens.len(), soft.onehots.len()),
        };
        if rows == 0 || steps == 0 {
            return Err(Error::Contract("cannot encode an empty sequence".into()));
        }
        let mut h = tape.constant(Tensor::zeros(&[rows, m]));
        let mut c = tape.constant(Tensor::zeros(&[rows, m]));
        for t in 0..steps {
            let (x, mask) = match input {
                SentenceInput::Ids(caps) => {
                    let mut ids = Vec::with_capacity(rows);
                    let mut mask = Vec::with_capacity(rows);
                    for cap in caps.iter() {
                        if let Some(&bad) = cap.tokens.iter().find(|&&w| w as usize >= self.config.vocab_size) {
                            return Err(Error::Data(format!("token id {bad} outside vocabulary")));
                        }
                        let (id, live) = match t.cmp(&cap.len()) {
                            std::cmp::Ordering::Less => (cap.tokens[t], 1.0),
                            std::cmp::Ordering::Equal => (END, 1.0),
                            std::cmp::Ordering::Greater => (PAD, 0.0),
                        };
                        ids.push(id as usize);
                        mask.push(live);
                    }
                    (tape.gather_rows(vars.embed, &ids)?, mask)
                }
                SentenceInput::Rows(soft) => (tape.matmul(soft.onehots[t], vars.embed)?, soft.masks[t].clone()),
            };
            let a = tape.matmul(x, vars.w_in)?;
            let r = tape.matmul(h, vars.w_hh)?;
            let gates = tape.add(a, r)?;
            let gates = tape.add_bias(gates, vars.bias)?;
            let (h_new, c_new) = lstm_cell(tape, gates, c, m)?;
            if mask.iter().all(|&v| v == 1.0) {
                h = h_new;
                c = c_new;
            } else {
                let dh = tape.sub(h_new, h)?;
                let dh = tape.scale_rows(dh, &mask)?;
                h = tape.add(h, dh)?;
                let dc = tape.sub(c_new, c)?;
                let dc = tape.scale_rows(dc, &mask)?;
                c = tape.add(c, dc)?;
            }
        }
        Ok(h)
    }

    /// Affine image embedding `[G, M]`.
    pub fn embed_image(&self, tape: &mut Tape, vars: &DiscVars, x_c: Var) -> Result<Var> {
        tape.affine(x_c, vars.img_w, vars.img_b)
    }

    /// Scores `G` sets of `p` captions, rows grouped image by image.
    pub fn discriminate(
        &self,
        tape: &mut Tape,
        vars: &DiscVars,
        input: &SentenceInput,
        x_c: &[&[f64]],
    ) -> Result<DiscOutput> {
        let g = x_c.len();
        let rows = match input {
            SentenceInput::Ids(c) => c.len(),
            SentenceInput::Rows(s) => s.tokens.len(),
        };
        let p = self.config.set_size;
        if g == 0 || rows != g * p {
            return Err(Error::Contract(format!(
                "expected {g} sets of {p} captions, got {rows} captions"
            )));
        }
        let (n, o) = (self.config.kernel_inner_dim, self.config.num_kernels);
        let sent = self.encode_sentences(tape, vars, input)?;
        let xc = tape.constant(stack_rows(x_c, self.config.feature_dim, "x_c")?);
        let img = self.embed_image(tape, vars, xc)?;
        let ds = distance_features(tape, sent, sent, vars.kern_s, g, n, o)?;
        let dx = distance_features(tape, sent, img, vars.kern_x, g, n, o)?;
        let ds = tape.reshape(ds, &[g, p, o])?;
        let ds = tape.mean_axis(ds, 1)?;
        let dx = tape.reshape(dx, &[g, p, o])?;
        let dx = tape.mean_axis(dx, 1)?;
        let feats = tape.concat_cols(&[ds, dx])?;
        let logits = tape.affine(feats, vars.out_w, vars.out_b)?;
        let probs = tape.scaled_softmax(logits, 1.0)?;
        let prob_real = tape.slice_cols(probs, 0, 1)?;
        Ok(DiscOutput {
            prob_real,
            dist_s: ds,
            dist_x: dx,
        })
    }

    /// Probability that each set is real, without recording gradients.
    pub fn score(&self, sets: &[&Caption], x_c: &[&[f64]]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let out = self.discriminate(&mut tape, &vars, &SentenceInput::Ids(sets), x_c)?;
        Ok(tape.value(out.prob_real).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(p: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            word_embed_dim: 3,
            sentence_embed_dim: 4,
            kernel_inner_dim: 2,
            num_kernels: 3,
            set_size: p,
            ..DiscriminatorConfig::new(8, 3)
        }
    }

    fn disc(p: usize, seed: u64) -> Discriminator {
        Discriminator::new(cfg(p), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn spread(p: usize, seed: u64) -> Discriminator {
        let mut d = disc(p, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
        for t in d.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.7..0.7));
        }
        d
    }

    fn caps() -> Vec<Caption> {
        vec![
            Caption::new(vec![4, 5]),
            Caption::new(vec![6]),
            Caption::new(vec![7, 4, 6]),
            Caption::new(vec![5, 5]),
        ]
    }

    #[test]
    fn zero_encoder_gives_zero_embedding() {
        let mut d = disc(2, 0);
        for t in d.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let vars = d.bind(&mut tape, false).unwrap();
        let c = caps();
        let refs: Vec<&Caption> = c.iter().collect();
        let e = d.encode_sentences(&mut tape, &vars, &SentenceInput::Ids(&refs)).unwrap();
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_sentences_identical_embeddings() {
        let d = disc(2, 1);
        let mut tape = Tape::new();
        let vars = d.bind(&mut tape, false).unwrap();
        let a = Caption::new(vec![4, 6, 7]);
        let b = Caption::new(vec![4]);
        let refs = [&a, &b, &a];
        let e = d.encode_sentences(&mut tape, &vars, &SentenceInput::Ids(&refs)).unwrap();
        let v = tape.value(e);
        assert_eq!(v.row(0), v.row(2));
        assert_ne!(v.row(0), v.row(1));
        // Padding after the shorter caption is masked out.
        let mut solo = Tape::new();
        let sv = d.bind(&mut solo, false).unwrap();
        let e1 = d.encode_sentences(&mut solo, &sv, &SentenceInput::Ids(&[&b])).unwrap();
        assert_eq!(solo.value(e1).row(0), v.row(1));
    }

    #[test]
    fn image_embedding_identity_and_bias() {
        let m = 4;
        let dcfg = DiscriminatorConfig { feature_dim: m, ..cfg(1) };
        let mut d = Discriminator::new(dcfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let w = d.params.by_name_mut("img.w").unwrap();
        for i in 0..m {
            for j in 0..m {
                w.data_mut()[i * m + j] = if i == j { 1.0 } else { 0.0 };
            }
        }
        d.params.by_name_mut("img.b").unwrap().data_mut().fill(0.0);
        let mut tape = Tape::new();
        let vars = d.bind(&mut tape, false).unwrap();
        let x = vec![0.5, -1.0, 2.0, 0.25];
        let xv = tape.constant(Tensor::new(vec![1, m], x.clone()).unwrap());
        let out = d.embed_image(&mut tape, &vars, xv).unwrap();
        assert_eq!(tape.value(out).data(), &x[..]);

        d.params.by_name_mut("img.b").unwrap().data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let mut tape = Tape::new();
        let vars = d.bind(&mut tape, false).unwrap();
        let zero = tape.constant(Tensor::zeros(&[1, m]));
        let out = d.embed_image(&mut tape, &vars, zero).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn identical_set_gives_dist_s_equal_to_p() {
        for p in 1..=4 {
            let mut tape = Tape::new();
            let e = tape.constant(Tensor::from_rows(&vec![vec![0.3, -0.2, 0.9]; p]).unwrap());
            let k = tape.constant(Tensor::full(&[3, 4], 0.7));
            let d = distance_features(&mut tape, e, e, k, 1, 2, 2).unwrap();
            assert!(tape.value(d).data().iter().all(|&v| v == p as f64));
        }
    }

    #[test]
    fn zero_output_matrix_is_indifferent() {
        let mut d = disc(2, 3);
        d.params.by_name_mut("out.w").unwrap().data_mut().fill(0.0);
        let c = caps();
        let refs: Vec<&Caption> = c.iter().collect();
        let x = [[0.1, 0.2, 0.3], [1.0, -1.0, 0.0]];
        let xs: Vec<&[f64]> = x.iter().map(|r| r.as_slice()).collect();
        let probs = d.score(&refs, &xs).unwrap();
        assert_eq!(probs, vec![0.5, 0.5]);
    }

    #[test]
    fn set_order_does_not_matter() {
        let d = disc(2, 4);
        let c = caps();
        let x = [[0.1, 0.2, 0.3], [1.0, -1.0, 0.0]];
        let xs: Vec<&[f64]> = x.iter().map(|r| r.as_slice()).collect();
        let a = d.score(&[&c[0], &c[1], &c[2], &c[3]], &xs).unwrap();
        let b = d.score(&[&c[1], &c[0], &c[3], &c[2]], &xs).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-15 && (a[1] - b[1]).abs() < 1e-15);
        assert_eq!(a, d.score(&[&c[0], &c[1], &c[2], &c[3]], &xs).unwrap());
    }

    #[test]
    fn images_do_not_interact() {
        let d = disc(2, 5);
        let c = caps();
        let x = [[0.1, 0.2, 0.3], [1.0, -1.0, 0.0], [0.0, 0.5, 0.5]];
        let xs: Vec<&[f64]> = x.iter().map(|r| r.as_slice()).collect();
        let other = Caption::new(vec![7, 7, 7]);
        let a = d.score(&[&c[0], &c[1], &c[2], &c[3]], &xs[..2]).unwrap();
        let b = d.score(&[&c[0], &c[1], &other, &c[3], &c[2], &c[1]], &xs).unwrap();
        assert_eq!(a[0], b[0]);
    }

    #[test]
    fn set_size_mismatch_is_contract_error() {
        let d = disc(3, 6);
        let c = caps();
        let x = [0.0; 3];
        let err = d.score(&[&c[0], &c[1]], &[&x]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn log_probability_gradients_match_finite_differences() {
        let c = caps();
        let refs: Vec<&Caption> = c.iter().collect();
        let x = [[0.1, 0.2, 0.3], [1.0, -1.0, 0.0]];
        let xs: Vec<&[f64]> = x.iter().map(|r| r.as_slice()).collect();
        for seed in 0..3 {
            let d = spread(2, seed);
            let err = finite_difference_check(
                |tape, ps| {
                    let vars = d.vars_from(Bound::from_vars(ps.to_vec()))?;
                    let out = d.discriminate(tape, &vars, &SentenceInput::Ids(&refs), &xs)?;
                    let l = tape.log(out.prob_real);
                    let s = tape.sum(l);
                    Ok(tape.scale(s, -1.0))
                },
                d.params.tensors(),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
