use serde::{Deserialize, Serialize};

use super::log::{LogRecord, TrainLog};
use super::TrainConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DStep {
    pub loss: f64,
    /// Training-batch accuracy before the update.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GStep {
    pub loss: f64,
    pub adversarial: f64,
    pub feature_matching: f64,
}

/// The two players as seen by the schedule.
pub trait Adversary {
    fn d_step(&mut self) -> Result<DStep>;
    fn g_step(&mut self) -> Result<GStep>;
    /// Discriminator accuracy on a held-out probe batch.
    fn probe(&mut self) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScheduleSummary {
    pub d_updates: u64,
    pub g_updates: u64,
    pub probes: u64,
    pub gate_activations: u64,
    pub recovery_updates: u64,
}

/// Runs `gan_iterations` rounds of `n_d` discriminator updates followed by one
/// generator update.
///
/// Accuracy is probed before training starts and every `monitor_every`
/// updates. A generator update only runs while the latest probe is at or above
/// `acc_gate`; otherwise the discriminator keeps training, probing after each
/// extra update, until it recovers or `gate_recovery_cap` updates are spent.
pub fn run_schedule(adv: &mut dyn Adversary, cfg: &TrainConfig, log: &mut TrainLog) -> Result<ScheduleSummary> {
    cfg.validate()?;
    let mut s = ScheduleSummary::default();
    let mut updates: u64 = 0;
    let mut last = probe(adv, &mut s, updates, log)?;

    for _ in 0..cfg.gan_iterations {
        for _ in 0..cfg.n_d {
            let d = adv.d_step()?;
            check_finite(d.loss, "discriminator loss")?;
            updates += 1;
            s.d_updates += 1;
            log.push(LogRecord::DiscriminatorUpdate {
                update: updates,
                loss: d.loss,
                accuracy: d.accuracy,
            })?;
            if updates % cfg.monitor_every as u64 == 0 {
                last = probe(adv, &mut s, updates, log)?;
            }
        }

        if last < cfg.acc_gate {
            let pre = last;
            s.gate_activations += 1;
            let mut spent = 0;
            while last < cfg.acc_gate {
                if spent == cfg.gate_recovery_cap {
                    return Err(Error::Numerical(format!(
                        "discriminator accuracy stuck at {last:.3} after {spent} recovery updates (gate {})",
                        cfg.acc_gate
                    )));
                }
                let d = adv.d_step()?;
                check_finite(d.loss, "discriminator loss")?;
                updates += 1;
                spent += 1;
                s.d_updates += 1;
                s.recovery_updates += 1;
                log.push(LogRecord::DiscriminatorUpdate {
                    update: updates,
                    loss: d.loss,
                    accuracy: d.accuracy,
                })?;
                last = probe(adv, &mut s, updates, log)?;
            }
            log.push(LogRecord::Gate {
                update: updates,
                pre_accuracy: pre,
                post_accuracy: last,
                recovery_updates: spent,
            })?;
        }

        debug_assert!(last >= cfg.acc_gate);
        let g = adv.g_step()?;
        check_finite(g.loss, "generator loss")?;
        updates += 1;
        s.g_updates += 1;
        log.push(LogRecord::GeneratorUpdate {
            update: updates,
            loss: g.loss,
            adversarial: g.adversarial,
            feature_matching: g.feature_matching,
        })?;
        if updates % cfg.monitor_every as u64 == 0 {
            last = probe(adv, &mut s, updates, log)?;
        }
    }
    Ok(s)
}

fn probe(adv: &mut dyn Adversary, s: &mut ScheduleSummary, update: u64, log: &mut TrainLog) -> Result<f64> {
    let accuracy = adv.probe()?;
    s.probes += 1;
    log.push(LogRecord::Probe { update, accuracy })?;
    Ok(accuracy)
}

fn check_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} is {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scripted probe accuracies; records the order of calls.
    struct Mock {
        probes: Vec<f64>,
        next_probe: usize,
        calls: Vec<char>,
        /// Accuracy of the most recent probe seen when each G step ran.
        seen_at_g: Vec<f64>,
        last: f64,
    }

    impl Mock {
        fn new(probes: Vec<f64>) -> Self {
            Mock {
                probes,
                next_probe: 0,
                calls: Vec::new(),
                seen_at_g: Vec::new(),
                last: f64::NAN,
            }
        }
    }

    impl Adversary for Mock {
        fn d_step(&mut self) -> Result<DStep> {
            self.calls.push('d');
            Ok(DStep { loss: 1.0, accuracy: 0.5 })
        }
        fn g_step(&mut self) -> Result<GStep> {
            self.calls.push('g');
            self.seen_at_g.push(self.last);
            Ok(GStep {
                loss: 0.7,
                adversarial: 0.7,
                feature_matching: 0.0,
            })
        }
        fn probe(&mut self) -> Result<f64> {
            self.calls.push('p');
            let a = self.probes.get(self.next_probe).copied().unwrap_or(0.9);
            self.next_probe += 1;
            self.last = a;
            Ok(a)
        }
    }

    fn cfg(iterations: usize, monitor_every: usize) -> TrainConfig {
        TrainConfig {
            gan_iterations: iterations,
            monitor_every,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn five_to_one_without_gate() {
        let mut m = Mock::new(vec![]);
        let mut log = TrainLog::default();
        let s = run_schedule(&mut m, &cfg(12, 25), &mut log).unwrap();
        assert_eq!((s.d_updates, s.g_updates, s.gate_activations), (60, 12, 0));
        let seq: String = m.calls.iter().filter(|&&c| c != 'p').collect();
        assert_eq!(seq, "dddddg".repeat(12));
    }

    #[test]
    fn low_probe_pauses_generator() {
        // Initial probe fails, then two recovery probes fail before one passes.
        let mut m = Mock::new(vec![0.6, 0.6, 0.7, 0.8]);
        let mut log = TrainLog::default();
        let s = run_schedule(&mut m, &cfg(2, 1000), &mut log).unwrap();
        assert_eq!(s.gate_activations, 1);
        assert_eq!(s.recovery_updates, 3);
        assert_eq!((s.d_updates, s.g_updates), (13, 2));
        let seq: String = m.calls.iter().collect();
        assert_eq!(seq, "pddddddpdpdpgdddddg");
        assert!(m.seen_at_g.iter().all(|&a| a >= 0.75));
        let gate = log.records().find(|r| matches!(r, LogRecord::Gate { .. })).unwrap();
        assert_eq!(
            gate,
            &LogRecord::Gate {
                update: 8,
                pre_accuracy: 0.6,
                post_accuracy: 0.8,
                recovery_updates: 3
            }
        );
    }

    #[test]
    fn generator_count_unchanged_during_recovery() {
        let mut probes = vec![0.9];
        probes.extend(std::iter::repeat(0.6).take(10));
        let mut m = Mock::new(probes);
        let mut log = TrainLog::default();
        // Probe after every update so the second round starts gated.
        let s = run_schedule(&mut m, &cfg(3, 1), &mut log).unwrap();
        let mut g = 0;
        let mut gated = false;
        for r in log.records() {
            match r {
                LogRecord::Probe { accuracy, .. } => gated = *accuracy < 0.75,
                LogRecord::GeneratorUpdate { .. } => {
                    assert!(!gated);
                    g += 1;
                }
                _ => {}
            }
        }
        assert_eq!(g, 3);
        assert_eq!(s.g_updates, 3);
        assert!(s.gate_activations >= 1);
    }

    #[test]
    fn recovery_cap_aborts() {
        let mut m = Mock::new(vec![0.1; 1000]);
        let mut log = TrainLog::default();
        let c = TrainConfig {
            gate_recovery_cap: 4,
            ..cfg(2, 1000)
        };
        let err = run_schedule(&mut m, &c, &mut log).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert!(!m.calls.contains(&'g'));
    }

    #[test]
    fn update_counter_is_monotone() {
        let mut m = Mock::new(vec![0.9, 0.5, 0.8]);
        let mut log = TrainLog::default();
        run_schedule(&mut m, &cfg(4, 3), &mut log).unwrap();
        let mut last = 0;
        for r in log.records() {
            match r {
                LogRecord::DiscriminatorUpdate { update, .. } | LogRecord::GeneratorUpdate { update, .. } => {
                    assert_eq!(*update, last + 1);
                    last = *update;
                }
                _ => {}
            }
        }
    }

    #[test]
    fn nan_loss_aborts() {
        struct Nan;
        impl Adversary for Nan {
            fn d_step(&mut self) -> Result<DStep> {
                Ok(DStep { loss: f64::NAN, accuracy: 0.5 })
            }
            fn g_step(&mut self) -> Result<GStep> {
                unreachable!()
            }
            fn probe(&mut self) -> Result<f64> {
                Ok(1.0)
            }
        }
        let err = run_schedule(&mut Nan, &cfg(1, 10), &mut TrainLog::default()).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }
}
