use rand::Rng;
use rand_distr::Gumbel;

use crate::error::{Error, Result};

/// One Gumbel-perturbed categorical draw: the hard one-hot sample, its
/// temperature-relaxed counterpart and the noise that produced both.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelSample {
    pub hard: Vec<f64>,
    pub soft: Vec<f64>,
    pub gumbel_noise: Vec<f64>,
    pub index: usize,
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_theta(theta: &[f64]) -> Result<()> {
    if theta.is_empty() {
        return Err(Error::Contract("empty probability vector".into()));
    }
    if theta.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Contract("probabilities must lie in [0, 1]".into()));
    }
    let sum: f64 = theta.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(())
}

/// Relaxed and hard samples for a given noise draw. Zero-probability entries
/// have `log θ = −∞` and are never selected.
pub fn gumbel_softmax_from_noise(theta: &[f64], tau: f64, noise: &[f64]) -> Result<GumbelSample> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
    }
    check_theta(theta)?;
    if noise.len() != theta.len() {
        return Err(Error::Dimension {
            op: "gumbel_softmax",
            axis: 0,
            expected: theta.len(),
            found: noise.len(),
        });
    }
    let perturbed: Vec<f64> = theta.iter().zip(noise).map(|(p, g)| g + p.ln()).collect();
    let index = argmax(&perturbed);
    let max = perturbed[index];
    let mut soft: Vec<f64> = perturbed.iter().map(|&x| ((x - max) / tau).exp()).collect();
    let z: f64 = soft.iter().sum();
    for s in soft.iter_mut() {
        *s /= z;
    }
    let mut hard = vec![0.0; theta.len()];
    hard[index] = 1.0;
    Ok(GumbelSample {
        hard,
        soft,
        gumbel_noise: noise.to_vec(),
        index,
    })
}

pub fn gumbel_softmax_sample(theta: &[f64], tau: f64, rng: &mut impl Rng) -> Result<GumbelSample> {
    let g = Gumbel::new(0.0, 1.0).map_err(|e| Error::Parameter(e.to_string()))?;
    let noise: Vec<f64> = (0..theta.len()).map(|_| rng.sample(g)).collect();
    gumbel_softmax_from_noise(theta, tau, &noise)
}
