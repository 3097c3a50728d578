//! Named parameter storage and the Adam update rule.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered collection of named tensors. Declaration order is the checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Adds a tensor filled uniformly from `[-scale, scale]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        scale: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.random_range(-scale..=scale);
        }
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every tensor on the tape, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn layout(&self) -> Vec<ParamLayout> {
        self.iter()
            .map(|(name, t)| ParamLayout {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect()
    }

    /// Replaces all values from a flat buffer laid out per [`ParamSet::layout`].
    pub fn load_flat(&mut self, layout: &[ParamLayout], flat: &[f64]) -> Result<()> {
        if layout.len() != self.len() {
            return Err(Error::Integrity(format!(
                "checkpoint has {} tensors, model expects {}",
                layout.len(),
                self.len()
            )));
        }
        let mut offset = 0;
        for (i, entry) in layout.iter().enumerate() {
            if entry.name != self.names[i] || entry.shape != self.tensors[i].shape() {
                return Err(Error::Integrity(format!(
                    "tensor {i}: checkpoint has {} {:?}, model expects {} {:?}",
                    entry.name,
                    entry.shape,
                    self.names[i],
                    self.tensors[i].shape()
                )));
            }
            let n = self.tensors[i].len();
            let src = flat.get(offset..offset + n).ok_or_else(|| {
                Error::Integrity("checkpoint parameter payload is truncated".into())
            })?;
            self.tensors[i].data_mut().copy_from_slice(src);
            offset += n;
        }
        if offset != flat.len() {
            return Err(Error::Integrity(format!(
                "checkpoint payload has {} trailing values",
                flat.len() - offset
            )));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 5.0,
        }
    }
}

/// First/second moment optimizer state for one [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        Adam {
            config,
            m: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Tensors that received no gradient are left untouched.
    pub fn update(&mut self, params: &mut ParamSet, bound: &Bound, grads: &Gradients) -> Result<()> {
        let collected: Vec<Option<&Tensor>> = bound.vars.iter().map(|&v| grads.get(v)).collect();
        let mut sq = 0.0;
        for g in collected.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::Numerical("non-finite gradient".into()));
            }
            sq += g.data().iter().map(|x| x * x).sum::<f64>();
        }
        let norm = sq.sqrt();
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in collected.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &gi), mi), vi) in params.tensors[i]
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = gi * clip;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *p -= learning_rate * (*mi / bc1) / ((*vi / bc2).sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(
            AdamConfig {
                learning_rate: 0.1,
                ..AdamConfig::default()
            },
            &ps,
        );
        for _ in 0..500 {
            let mut t = Tape::new();
            let b = ps.bind(&mut t, true);
            let x = b.var(id);
            let sq = t.mul(x, x).unwrap();
            let l = t.sum(sq);
            let g = t.backward(l).unwrap();
            opt.update(&mut ps, &b, &g).unwrap();
        }
        assert!(ps.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn load_flat_checks_layout() {
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::vector(vec![0.0; 2]));
        ps.add("b", Tensor::zeros(&[2, 2]));
        let layout = ps.layout();
        ps.load_flat(&layout, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(ps.by_name("b").unwrap().data(), &[3.0, 4.0, 5.0, 6.0]);
        assert!(ps.load_flat(&layout, &[1.0; 5]).is_err());
        assert!(ps.load_flat(&layout, &[1.0; 7]).is_err());
        let mut bad = layout.clone();
        bad[1].name = "c".into();
        assert!(ps.load_flat(&bad, &[1.0; 6]).is_err());
    }
}
