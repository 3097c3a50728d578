//! Conditional caption generator.
//!
//! A stack of LSTM layers reads the previous word (or, at the first step, the
//! embedding of the object-probability vector) together with the global image
//! feature and a per-caption noise vector, and emits `softmax(β · W_d·y_t)`.
//! Layers above the first add the previous layer's output to their own.

mod decode;
mod gumbel;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use decode::{
    Beam, DecodeOptions, DecodeStrategy, DecoderRegistry, Greedy, Sample, ScoredCaption,
};
pub use gumbel::{argmax, gumbel_softmax_from_noise, gumbel_softmax_sample, GumbelSample};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{Caption, ImageFeatures, END, PAD};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    /// Output peakiness for sampling and adversarial training.
    pub beta: f64,
    /// Output peakiness during maximum-likelihood pretraining.
    pub pretrain_beta: f64,
    pub gumbel_temperature: f64,
    /// Accept a temperature outside `(0.1, 0.8]`.
    #[serde(default)]
    pub allow_any_temperature: bool,
    pub noise_dim: usize,
    /// START plus at most `max_len − 1` emitted tokens, END included.
    pub max_len: usize,
    pub feature_dim: usize,
    pub num_objects: usize,
}

impl GeneratorConfig {
    pub fn new(vocab_size: usize, feature_dim: usize, num_objects: usize) -> Self {
        GeneratorConfig {
            vocab_size,
            embed_dim: 64,
            hidden_dim: 128,
            num_layers: 3,
            beta: 3.0,
            pretrain_beta: 1.0,
            gumbel_temperature: 0.5,
            allow_any_temperature: false,
            noise_dim: 16,
            max_len: 20,
            feature_dim,
            num_objects,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("feature_dim", self.feature_dim),
            ("num_objects", self.num_objects),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("generator {name} must be ≥ 1")));
            }
        }
        if self.vocab_size <= END as usize {
            return Err(Error::Config("vocabulary holds only reserved tokens".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be ≥ 2".into()));
        }
        if !(self.beta > 0.0) || !(self.pretrain_beta > 0.0) {
            return Err(Error::Config("beta must be > 0".into()));
        }
        let tau = self.gumbel_temperature;
        if !(tau > 0.0) {
            return Err(Error::Config("gumbel_temperature must be > 0".into()));
        }
        if !self.allow_any_temperature && !(tau > 0.1 && tau <= 0.8) {
            return Err(Error::Config(format!(
                "gumbel_temperature {tau} outside (0.1, 0.8]; set allow_any_temperature to override"
            )));
        }
        Ok(())
    }

    /// Decoding steps after the object-conditioned first step.
    pub fn steps(&self) -> usize {
        self.max_len - 1
    }
}

#[derive(Debug, Clone)]
struct LayerIds {
    w_in: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct GenIds {
    embed: ParamId,
    w_img: ParamId,
    w_noise: Option<ParamId>,
    layers: Vec<LayerIds>,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamSet,
    ids: GenIds,
    object_ids: Vec<usize>,
}

/// Generator parameters placed on a tape.
#[derive(Debug, Clone)]
pub struct GenVars {
    pub bound: Bound,
    embed: Var,
    obj_embed: Var,
    w_img: Var,
    w_noise: Option<Var>,
    layers: Vec<(Var, Var, Var)>,
    out_w: Var,
    out_b: Var,
}

/// Per-layer hidden and cell states for a batch of rows.
#[derive(Debug, Clone)]
pub struct GeneratorState {
    pub layers: Vec<(Var, Var)>,
    pub t: usize,
}

/// Uniform `[−a, a]` initializer; forget-gate biases start at 1.
pub(crate) fn lstm_bias(hidden: usize, scale: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..4 * hidden)
        .map(|i| {
            if (hidden..2 * hidden).contains(&i) {
                1.0
            } else {
                rng.random_range(-scale..=scale)
            }
        })
        .collect();
    Tensor::vector(data)
}

/// Gate order in the packed `[·, 4H]` pre-activations: input, forget, cell, output.
pub(crate) fn lstm_cell(tape: &mut Tape, gates: Var, c: Var, hidden: usize) -> Result<(Var, Var)> {
    let i = tape.slice_cols(gates, 0, hidden)?;
    let f = tape.slice_cols(gates, hidden, hidden)?;
    let g = tape.slice_cols(gates, 2 * hidden, hidden)?;
    let o = tape.slice_cols(gates, 3 * hidden, hidden)?;
    let (i, f, g, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g), tape.sigmoid(o));
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let tc = tape.tanh(c_new);
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c_new))
}

pub(crate) const INIT_SCALE: f64 = 0.08;

pub(crate) fn stack_rows(rows: &[&[f64]], width: usize, what: &str) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * width);
    for r in rows {
        if r.len() != width {
            return Err(Error::Config(format!("{what} has length {}, expected {width}", r.len())));
        }
        data.extend_from_slice(r);
    }
    Tensor::new(vec![rows.len(), width], data)
}

impl Generator {
    /// `object_ids` are the vocabulary ids of the object words, in `x_o` order.
    pub fn new(config: GeneratorConfig, object_ids: Vec<usize>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if object_ids.len() != config.num_objects {
            return Err(Error::Config(format!(
                "{} object words for {} object features",
                object_ids.len(),
                config.num_objects
            )));
        }
        if let Some(&bad) = object_ids.iter().find(|&&i| i >= config.vocab_size) {
            return Err(Error::Config(format!("object word id {bad} outside the vocabulary")));
        }
        let (v, e, h) = (config.vocab_size, config.embed_dim, config.hidden_dim);
        let s = INIT_SCALE;
        let mut params = ParamSet::new();
        let embed = params.add_uniform("embed", &[v, e], s, rng);
        let w_img = params.add_uniform("l0.w_img", &[config.feature_dim, 4 * h], s, rng);
        let w_noise = (config.noise_dim > 0)
            .then(|| params.add_uniform("l0.w_noise", &[config.noise_dim, 4 * h], s, rng));
        let mut layers = Vec::new();
        for l in 0..config.num_layers {
            let input = if l == 0 { e } else { h };
            let w_in = params.add_uniform(format!("l{l}.w_in"), &[input, 4 * h], s, rng);
            let w_hh = params.add_uniform(format!("l{l}.w_hh"), &[h, 4 * h], s, rng);
            let bias = params.add(format!("l{l}.bias"), lstm_bias(h, s, rng));
            layers.push(LayerIds { w_in, w_hh, bias });
        }
        let out_w = params.add_uniform("out.w", &[h, v], s, rng);
        let out_b = params.add_uniform("out.b", &[v], s, rng);
        Ok(Generator {
            config,
            params,
            ids: GenIds {
                embed,
                w_img,
                w_noise,
                layers,
                out_w,
                out_b,
            },
            object_ids,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn object_ids(&self) -> &[usize] {
        &self.object_ids
    }

    /// Places the parameters on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<GenVars> {
        let bound = self.params.bind(tape, trainable);
        self.vars_from(tape, bound)
    }

    /// Wraps handles already on the tape, one per parameter in declared order.
    pub fn vars_from(&self, tape: &mut Tape, bound: Bound) -> Result<GenVars> {
        if bound.vars().len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} handles for {} generator parameters",
                bound.vars().len(),
                self.params.len()
            )));
        }
        let embed = bound.var(self.ids.embed);
        let obj_embed = tape.gather_rows(embed, &self.object_ids)?;
        Ok(GenVars {
            embed,
            obj_embed,
            w_img: bound.var(self.ids.w_img),
            w_noise: self.ids.w_noise.map(|id| bound.var(id)),
            layers: self
                .ids
                .layers
                .iter()
                .map(|l| (bound.var(l.w_in), bound.var(l.w_hh), bound.var(l.bias)))
                .collect(),
            out_w: bound.var(self.ids.out_w),
            out_b: bound.var(self.ids.out_b),
            bound,
        })
    }

    /// `x_o · E_obj`, where `E_obj` holds the embedding rows of the object words.
    pub fn embed_objects(&self, tape: &mut Tape, vars: &GenVars, x_o: Var) -> Result<Var> {
        tape.matmul(x_o, vars.obj_embed)
    }

    pub fn zero_state(&self, tape: &mut Tape, rows: usize) -> GeneratorState {
        let h = self.config.hidden_dim;
        let layers = (0..self.config.num_layers)
            .map(|_| {
                (
                    tape.constant(Tensor::zeros(&[rows, h])),
                    tape.constant(Tensor::zeros(&[rows, h])),
                )
            })
            .collect();
        GeneratorState { layers, t: 0 }
    }

    /// Image and noise contribution to the first layer's gates, fixed over time.
    pub fn context(&self, tape: &mut Tape, vars: &GenVars, x_c: Var, z: Option<Var>) -> Result<Var> {
        let mut ctx = tape.matmul(x_c, vars.w_img)?;
        match (vars.w_noise, z) {
            (Some(w), Some(z)) => {
                let zn = tape.matmul(z, w)?;
                ctx = tape.add(ctx, zn)?;
            }
            (None, None) => {}
            (Some(_), None) => return Err(Error::Config("generator expects a noise input".into())),
            (None, Some(_)) => return Err(Error::Config("generator has no noise input".into())),
        }
        Ok(ctx)
    }

    /// One step given the precomputed [`Generator::context`]. Returns logits `[B, V]`.
    pub fn step_with_context(
        &self,
        tape: &mut Tape,
        vars: &GenVars,
        input: Var,
        ctx: Var,
        state: &GeneratorState,
    ) -> Result<(Var, GeneratorState)> {
        let h = self.config.hidden_dim;
        let mut below = input;
        let mut next = Vec::with_capacity(state.layers.len());
        for (l, (&(w_in, w_hh, bias), &(h_prev, c_prev))) in vars.layers.iter().zip(&state.layers).enumerate() {
            let a = tape.matmul(below, w_in)?;
            let r = tape.matmul(h_prev, w_hh)?;
            let mut gates = tape.add(a, r)?;
            if l == 0 {
                gates = tape.add(gates, ctx)?;
            }
            gates = tape.add_bias(gates, bias)?;
            let (h_new, c_new) = lstm_cell(tape, gates, c_prev, h)?;
            next.push((h_new, c_new));
            below = if l == 0 { h_new } else { tape.add(h_new, below)? };
        }
        let logits = tape.affine(below, vars.out_w, vars.out_b)?;
        Ok((
            logits,
            GeneratorState {
                layers: next,
                t: state.t + 1,
            },
        ))
    }

    pub fn lstm_step(
        &self,
        tape: &mut Tape,
        vars: &GenVars,
        prev_word_embedding: Var,
        x_c: Var,
        z: Option<Var>,
        state: &GeneratorState,
    ) -> Result<(Var, GeneratorState)> {
        let ctx = self.context(tape, vars, x_c, z)?;
        self.step_with_context(tape, vars, prev_word_embedding, ctx, state)
    }

    fn features(&self, rows: &[&ImageFeatures]) -> Result<(Tensor, Tensor)> {
        let xc: Vec<&[f64]> = rows.iter().map(|f| f.x_c.as_slice()).collect();
        let xo: Vec<&[f64]> = rows.iter().map(|f| f.x_o.as_slice()).collect();
        Ok((
            stack_rows(&xc, self.config.feature_dim, "x_c")?,
            stack_rows(&xo, self.config.num_objects, "x_o")?,
        ))
    }

    /// One noise vector per row, uniform on `[−1, 1]`.
    pub fn draw_noise<R: Rng>(&self, rngs: &mut [R]) -> Option<Tensor> {
        let z = self.config.noise_dim;
        (z > 0).then(|| {
            let data = rngs
                .iter_mut()
                .flat_map(|r| (0..z).map(|_| r.random_range(-1.0..=1.0)).collect::<Vec<f64>>())
                .collect();
            Tensor::from_parts(vec![rngs.len(), z], data)
        })
    }

    /// Teacher-forced negative log-likelihood with zero noise, averaged over
    /// each caption's steps (END included) and then over the batch.
    pub fn ml_loss(
        &self,
        tape: &mut Tape,
        vars: &GenVars,
        batch: &[(&ImageFeatures, &Caption)],
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Contract("ml_loss over an empty batch".into()));
        }
        let v = self.config.vocab_size;
        for (_, c) in batch {
            if c.is_empty() {
                return Err(Error::Contract("ml_loss needs a non-empty reference".into()));
            }
            if let Some(&bad) = c.tokens.iter().find(|&&t| t as usize >= v) {
                return Err(Error::Data(format!("reference token id {bad} outside vocabulary of {v}")));
            }
        }
        let rows: Vec<&ImageFeatures> = batch.iter().map(|(f, _)| *f).collect();
        let (xc, xo) = self.features(&rows)?;
        let b = batch.len();
        let x_c = tape.constant(xc);
        let x_o = tape.constant(xo);
        let z = (self.config.noise_dim > 0).then(|| tape.constant(Tensor::zeros(&[b, self.config.noise_dim])));
        let ctx = self.context(tape, vars, x_c, z)?;
        let mut state = self.zero_state(tape, b);
        let mut input = self.embed_objects(tape, vars, x_o)?;
        let steps = batch.iter().map(|(_, c)| c.len() + 1).max().unwrap_or(1);
        let mut total: Option<Var> = None;
        for t in 0..steps {
            let (logits, next) = self.step_with_context(tape, vars, input, ctx, &state)?;
            state = next;
            let logp = tape.log_scaled_softmax(logits, self.config.pretrain_beta)?;
            let mut targets = Vec::with_capacity(b);
            let mut weights = Vec::with_capacity(b);
            for (_, c) in batch {
                let n = c.len() + 1;
                let target = match t.cmp(&c.len()) {
                    std::cmp::Ordering::Less => c.tokens[t],
                    std::cmp::Ordering::Equal => END,
                    std::cmp::Ordering::Greater => PAD,
                };
                targets.push(target as usize);
                weights.push(if t < n { -1.0 / (n as f64 * b as f64) } else { 0.0 });
            }
            let picked = tape.pick(logp, &targets)?;
            let weighted = tape.scale_rows(picked, &weights)?;
            let term = tape.sum(weighted);
            total = Some(match total {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
            if t + 1 < steps {
                let prev: Vec<usize> = batch
                    .iter()
                    .map(|(_, c)| c.tokens.get(t).copied().unwrap_or(PAD) as usize)
                    .collect();
                input = tape.gather_rows(vars.embed, &prev)?;
            }
        }
        total.ok_or_else(|| Error::Contract("ml_loss unrolled zero steps".into()))
    }

    /// Differentiable sampling unroll for adversarial training.
    ///
    /// Each row draws its noise and Gumbel perturbations from its own rng. The
    /// forward pass carries hard one-hot words; gradients flow through the
    /// relaxed samples. After a row emits END its later inputs are PAD and its
    /// mask is zero. With `straight_through` off the relaxed samples are fed
    /// forward instead, which makes the unroll smooth in the parameters.
    pub fn gumbel_unroll<R: Rng>(
        &self,
        tape: &mut Tape,
        vars: &GenVars,
        rows: &[&ImageFeatures],
        rngs: &mut [R],
        straight_through: bool,
    ) -> Result<SoftCaptions> {
        if rows.is_empty() || rows.len() != rngs.len() {
            return Err(Error::Contract("gumbel_unroll needs one rng per row".into()));
        }
        let (b, v) = (rows.len(), self.config.vocab_size);
        let noise = self.draw_noise(rngs);
        let (xc, xo) = self.features(rows)?;
        let x_c = tape.constant(xc);
        let x_o = tape.constant(xo);
        let z = noise.map(|n| tape.constant(n));
        let ctx = self.context(tape, vars, x_c, z)?;
        let mut state = self.zero_state(tape, b);
        let mut input = self.embed_objects(tape, vars, x_o)?;
        let tau = self.config.gumbel_temperature;
        let gumbel = rand_distr::Gumbel::new(0.0, 1.0).map_err(|e| Error::Parameter(e.to_string()))?;

        let mut out = SoftCaptions {
            onehots: Vec::new(),
            masks: Vec::new(),
            tokens: vec![Vec::new(); b],
            finished: vec![false; b],
        };
        for _ in 0..self.config.steps() {
            if out.finished.iter().all(|&f| f) {
                break;
            }
            let (logits, next) = self.step_with_context(tape, vars, input, ctx, &state)?;
            state = next;
            let logp = tape.log_scaled_softmax(logits, self.config.beta)?;
            let g: Vec<f64> = rngs
                .iter_mut()
                .flat_map(|r| (0..v).map(|_| r.sample(gumbel)).collect::<Vec<f64>>())
                .collect();
            let g = tape.constant(Tensor::from_parts(vec![b, v], g));
            let perturbed = tape.add(logp, g)?;
            let soft = tape.scaled_softmax(perturbed, 1.0 / tau)?;
            let pv = tape.value(perturbed).clone();
            let mut hard = vec![0.0; b * v];
            let mut mask = vec![0.0; b];
            for r in 0..b {
                let tok = if out.finished[r] {
                    PAD as usize
                } else {
                    let k = argmax(pv.row(r));
                    mask[r] = 1.0;
                    if k == END as usize {
                        out.finished[r] = true;
                    } else {
                        out.tokens[r].push(k as u32);
                    }
                    k
                };
                hard[r * v + tok] = 1.0;
            }
            let st = if straight_through {
                tape.straight_through(Tensor::from_parts(vec![b, v], hard), soft)?
            } else {
                soft
            };
            input = tape.matmul(st, vars.embed)?;
            out.onehots.push(st);
            out.masks.push(mask);
        }
        Ok(out)
    }
}

/// Output of [`Generator::gumbel_unroll`].
#[derive(Debug, Clone)]
pub struct SoftCaptions {
    /// Word rows fed to the next step, one `[B, V]` node per step: hard
    /// one-hots in the forward pass, or relaxed samples.
    pub onehots: Vec<Var>,
    /// Per step, 1 for rows still emitting (END included), else 0.
    pub masks: Vec<Vec<f64>>,
    /// Emitted words before END.
    pub tokens: Vec<Vec<u32>>,
    pub finished: Vec<bool>,
}

impl SoftCaptions {
    pub fn captions(&self) -> Vec<Caption> {
        self.tokens
            .iter()
            .zip(&self.finished)
            .map(|(t, &f)| Caption {
                tokens: t.clone(),
                truncated: !f,
            })
            .collect()
    }
}

/// Step-by-step inference over a batch without recording history.
///
/// Parameters are bound once as constants; each step truncates the tape back
/// to that point and re-enters the carried state as constants.
pub(crate) struct Stepper<'g> {
    gen: &'g Generator,
    tape: Tape,
    vars: GenVars,
    mark: usize,
    ctx: Tensor,
    x_o: Tensor,
    state: Vec<(Tensor, Tensor)>,
}

impl<'g> Stepper<'g> {
    pub(crate) fn new(gen: &'g Generator, rows: &[&ImageFeatures], noise: Option<Tensor>) -> Result<Self> {
        let mut tape = Tape::new();
        let vars = gen.bind(&mut tape, false)?;
        let mark = tape.len();
        let (xc, xo) = gen.features(rows)?;
        let x_c = tape.constant(xc);
        let z = noise.map(|n| tape.constant(n));
        let ctx = gen.context(&mut tape, &vars, x_c, z)?;
        let ctx = tape.value(ctx).clone();
        tape.truncate(mark);
        let h = gen.config.hidden_dim;
        let state = (0..gen.config.num_layers)
            .map(|_| (Tensor::zeros(&[rows.len(), h]), Tensor::zeros(&[rows.len(), h])))
            .collect();
        Ok(Stepper {
            gen,
            tape,
            vars,
            mark,
            ctx,
            x_o: xo,
            state,
        })
    }

    fn advance(&mut self, input: impl FnOnce(&mut Tape, &GenVars) -> Result<Var>) -> Result<Tensor> {
        self.tape.truncate(self.mark);
        let input = input(&mut self.tape, &self.vars)?;
        let ctx = self.tape.constant(self.ctx.clone());
        let layers = self
            .state
            .iter()
            .map(|(h, c)| (self.tape.constant(h.clone()), self.tape.constant(c.clone())))
            .collect();
        let state = GeneratorState { layers, t: 0 };
        let (logits, next) = self.gen.step_with_context(&mut self.tape, &self.vars, input, ctx, &state)?;
        self.state = next
            .layers
            .iter()
            .map(|&(h, c)| (self.tape.value(h).clone(), self.tape.value(c).clone()))
            .collect();
        let out = self.tape.value(logits).clone();
        if !out.is_finite() {
            return Err(Error::Numerical("non-finite generator logits".into()));
        }
        Ok(out)
    }

    /// Logits of the object-conditioned first step.
    pub(crate) fn first(&mut self) -> Result<Tensor> {
        let x_o = self.x_o.clone();
        let gen = self.gen;
        self.advance(|tape, vars| {
            let x = tape.constant(x_o);
            gen.embed_objects(tape, vars, x)
        })
    }

    pub(crate) fn next(&mut self, tokens: &[u32]) -> Result<Tensor> {
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        self.advance(|tape, vars| tape.gather_rows(vars.embed, &ids))
    }

    /// Keeps rows in the given order, duplicating as needed.
    pub(crate) fn select_rows(&mut self, idx: &[usize]) {
        let pick = |t: &Tensor| {
            let c = t.cols();
            let data = idx.iter().flat_map(|&i| t.row(i).to_vec()).collect();
            Tensor::from_parts(vec![idx.len(), c], data)
        };
        self.ctx = pick(&self.ctx);
        self.x_o = pick(&self.x_o);
        for (h, c) in self.state.iter_mut() {
            *h = pick(h);
            *c = pick(c);
        }
    }
}

/// Row-wise `log softmax(β · x)`.
pub(crate) fn log_softmax_row(logits: &[f64], beta: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&l| (beta * (l - max)).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| beta * (l - max) - lse).collect()
}

/// Independent per-row generators seeded from `rng`.
pub fn row_rngs(rng: &mut impl Rng, n: usize) -> Vec<ChaCha8Rng> {
    (0..n).map(|_| ChaCha8Rng::seed_from_u64(rng.random())).collect()
}
