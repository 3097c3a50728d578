//! Adversarial objectives for the set discriminator and the generator.

use crate::autodiff::{Tape, Var};
use crate::discriminator::DiscOutput;
use crate::error::{Error, Result};

/// Distance from 0 and 1 at which probabilities are clamped before a log.
pub const PROB_EPS: f64 = 1e-7;

fn check_probs(tape: &Tape, v: Var, what: &str) -> Result<()> {
    let t = tape.value(v);
    if t.is_empty() {
        return Err(Error::Contract(format!("{what}: empty batch")));
    }
    if let Some(p) = t.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Contract(format!("{what}: probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// Batch mean of `−log p`.
fn nll(tape: &mut Tape, p: Var) -> Var {
    let p = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let l = tape.log(p);
    let m = tape.mean(l);
    tape.scale(m, -1.0)
}

/// Batch mean of `−log(1 − p)`.
fn nll_complement(tape: &mut Tape, p: Var) -> Var {
    let neg = tape.scale(p, -1.0);
    let q = tape.offset(neg, 1.0);
    nll(tape, q)
}

/// `−log D(Sʳ) − log(1 − D(Sᵍ)) − log(1 − D(Sᶠ))`, averaged over the batch.
pub fn discriminator_loss(tape: &mut Tape, d_real: Var, d_gen: Var, d_fake: Var) -> Result<Var> {
    check_probs(tape, d_real, "d_real")?;
    check_probs(tape, d_gen, "d_gen")?;
    check_probs(tape, d_fake, "d_fake")?;
    let a = nll(tape, d_real);
    let b = nll_complement(tape, d_gen);
    let c = nll_complement(tape, d_fake);
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

/// Matched pairs should score real, mismatched pairs fake.
pub fn pretrain_discriminator_loss(tape: &mut Tape, d_matched: Var, d_mismatched: Var) -> Result<Var> {
    check_probs(tape, d_matched, "d_matched")?;
    check_probs(tape, d_mismatched, "d_mismatched")?;
    let a = nll(tape, d_matched);
    let b = nll_complement(tape, d_mismatched);
    tape.add(a, b)
}

/// Batch means of the pooled distance features, one `[1, O]` row each.
#[derive(Debug, Clone, Copy)]
pub struct BatchDistanceStats {
    pub mean_dist_s: Var,
    pub mean_dist_x: Var,
}

impl BatchDistanceStats {
    pub fn from_output(tape: &mut Tape, out: &DiscOutput) -> Result<Self> {
        Ok(BatchDistanceStats {
            mean_dist_s: tape.mean_axis(out.dist_s, 0)?,
            mean_dist_x: tape.mean_axis(out.dist_x, 0)?,
        })
    }
}

fn matching_term(tape: &mut Tape, a: Var, b: Var, what: &str) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Contract(format!(
            "{what} statistics have shapes {:?} and {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    let d = tape.sub(a, b)?;
    Ok(tape.l2_norm(d))
}

/// `−log D(Sᵍ)` plus, when `feature_matching` is set, the L2 gaps between the
/// generated and real batch-mean distance features.
pub fn generator_loss(
    tape: &mut Tape,
    d_gen: Var,
    stats_gen: &BatchDistanceStats,
    stats_real: &BatchDistanceStats,
    feature_matching: bool,
) -> Result<Var> {
    check_probs(tape, d_gen, "d_gen")?;
    let adv = nll(tape, d_gen);
    if !feature_matching {
        return Ok(adv);
    }
    let s = matching_term(tape, stats_gen.mean_dist_s, stats_real.mean_dist_s, "dist_s")?;
    let x = matching_term(tape, stats_gen.mean_dist_x, stats_real.mean_dist_x, "dist_x")?;
    let fm = tape.add(s, x)?;
    tape.add(adv, fm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use std::f64::consts::LN_2;

    fn probs(tape: &mut Tape, v: &[f64]) -> Var {
        tape.constant(Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap())
    }

    fn stats(tape: &mut Tape, s: &[f64], x: &[f64]) -> BatchDistanceStats {
        BatchDistanceStats {
            mean_dist_s: tape.constant(Tensor::new(vec![1, s.len()], s.to_vec()).unwrap()),
            mean_dist_x: tape.constant(Tensor::new(vec![1, x.len()], x.to_vec()).unwrap()),
        }
    }

    fn d_loss(r: &[f64], g: &[f64], f: &[f64]) -> Result<f64> {
        let mut t = Tape::new();
        let (r, g, f) = (probs(&mut t, r), probs(&mut t, g), probs(&mut t, f));
        let l = discriminator_loss(&mut t, r, g, f)?;
        Ok(t.value(l).item())
    }

    fn g_loss(d: f64, s_gen: &[f64], s_real: &[f64], fm: bool) -> Result<f64> {
        let mut t = Tape::new();
        let dv = probs(&mut t, &[d, d]);
        let a = stats(&mut t, s_gen, &[0.5, 0.5]);
        let b = stats(&mut t, s_real, &[0.5, 0.5]);
        let l = generator_loss(&mut t, dv, &a, &b, fm)?;
        Ok(t.value(l).item())
    }

    #[test]
    fn discriminator_loss_values() {
        assert!((d_loss(&[0.5], &[0.5], &[0.5]).unwrap() - 3.0 * LN_2).abs() < 1e-12);
        let v = d_loss(&[0.9, 0.9], &[0.1, 0.1], &[0.1, 0.1]).unwrap();
        assert!((v - 3.0 * -(0.9f64.ln())).abs() < 1e-12);
        assert!((v - 0.3161).abs() < 1e-4);
        let perfect = d_loss(&[1.0], &[0.0], &[0.0]).unwrap();
        assert!(perfect < 1e-6);
        assert!(perfect.is_finite());
    }

    #[test]
    fn discriminator_loss_clamps_certain_mistakes() {
        let v = d_loss(&[0.0], &[1.0], &[1.0]).unwrap();
        assert!((v + 3.0 * PROB_EPS.ln()).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_probability_is_contract_error() {
        assert!(matches!(d_loss(&[1.2], &[0.1], &[0.1]), Err(Error::Contract(_))));
        assert!(matches!(d_loss(&[0.5], &[-0.1], &[0.1]), Err(Error::Contract(_))));
        assert!(matches!(d_loss(&[0.5], &[0.1], &[f64::NAN]), Err(Error::Contract(_))));
    }

    #[test]
    fn generator_loss_values() {
        assert!((g_loss(0.5, &[1.0, 2.0], &[1.0, 2.0], true).unwrap() - LN_2).abs() < 1e-12);
        assert!(g_loss(1.0, &[1.0, 2.0], &[1.0, 2.0], true).unwrap() < 1e-6);
        let v = g_loss(0.5, &[1.0, 2.0], &[1.0, 3.0], true).unwrap();
        assert!((v - (LN_2 + 1.0)).abs() < 1e-12);
        let v = g_loss(0.5, &[1.0, 2.0], &[4.0, 6.0], true).unwrap();
        assert!((v - (LN_2 + 5.0)).abs() < 1e-12);
        assert_eq!(g_loss(0.5, &[1.0, 2.0], &[4.0, 6.0], false).unwrap(), g_loss(0.5, &[0.0; 2], &[0.0; 2], true).unwrap());
    }

    #[test]
    fn generator_loss_rejects_mismatched_stats() {
        assert!(matches!(g_loss(0.5, &[1.0, 2.0], &[1.0, 2.0, 3.0], true), Err(Error::Contract(_))));
    }

    #[test]
    fn pretrain_loss_values() {
        let run = |m: f64, x: f64| {
            let mut t = Tape::new();
            let (a, b) = (probs(&mut t, &[m]), probs(&mut t, &[x]));
            let l = pretrain_discriminator_loss(&mut t, a, b).unwrap();
            t.value(l).item()
        };
        assert!((run(0.5, 0.5) - 2.0 * LN_2).abs() < 1e-12);
        assert!(run(1.0, 0.0) < 1e-6);
        assert!((run(0.8, 0.2) - 0.4463).abs() < 1e-4);
        assert!((run(0.8, 0.2) + 2.0 * 0.8f64.ln()).abs() < 1e-12);
    }
}
