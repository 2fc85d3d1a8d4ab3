//! Synchronous successive halving over sampled learning rates and dropouts.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::pretrain::Runner;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpec {
    pub n_trials: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub dropout_max: f64,
    pub grace_period: usize,
    pub reduction_factor: usize,
    pub seed: u64,
}

impl Default for SearchSpec {
    fn default() -> Self {
        Self {
            n_trials: 16,
            lr_min: 1e-6,
            lr_max: 1e-2,
            dropout_max: 0.6,
            grace_period: 4,
            reduction_factor: 2,
            seed: 0,
        }
    }
}

impl SearchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 {
            return Err(Error::config("search needs at least one trial"));
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::config("learning-rate range must satisfy 0 < min <= max"));
        }
        if !(0.0..=0.6).contains(&self.dropout_max) {
            return Err(Error::config("dropout_max outside [0, 0.6]"));
        }
        if self.grace_period == 0 || self.reduction_factor < 2 {
            return Err(Error::config("grace_period >= 1 and reduction_factor >= 2 required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialParams {
    pub trial_id: usize,
    pub learning_rate: f64,
    pub dropout: f64,
}

/// Log-uniform learning rates and uniform dropouts, fixed by the seed.
pub fn sample_trials(spec: &SearchSpec) -> Result<Vec<TrialParams>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = (spec.lr_min.ln(), spec.lr_max.ln());
    Ok((0..spec.n_trials)
        .map(|trial_id| {
            let lr = if hi > lo { rng.random_range(lo..hi).exp() } else { spec.lr_min };
            let dropout = if spec.dropout_max > 0.0 {
                rng.random_range(0.0..spec.dropout_max)
            } else {
                0.0
            };
            TrialParams {
                trial_id,
                learning_rate: lr.clamp(spec.lr_min, spec.lr_max),
                dropout,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub params: TrialParams,
    pub epochs_run: usize,
    /// Lowest validation loss seen; infinite after divergence.
    pub best_val: f64,
    pub promoted_rungs: usize,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: TrialParams,
    pub trials: Vec<TrialRecord>,
    /// `(epoch, trials evaluated at that rung)`.
    pub rungs: Vec<(usize, usize)>,
}

struct Trial<R> {
    runner: R,
    record: TrialRecord,
    stopped: bool,
}

impl<R: Runner> Trial<R> {
    fn advance_to(&mut self, epoch: usize) -> Result<()> {
        while !self.stopped && self.record.epochs_run < epoch {
            match self.runner.run_epoch() {
                Ok(v) => {
                    self.record.epochs_run += 1;
                    self.record.best_val = self.record.best_val.min(v);
                    self.stopped = self.runner.finished();
                }
                Err(Error::Divergence { .. }) => {
                    self.record.epochs_run += 1;
                    self.record.best_val = f64::INFINITY;
                    self.record.diverged = true;
                    self.stopped = true;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }
}

/// At rung epochs `grace * r^k` every surviving trial is ranked by its best
/// validation loss and the top `1/r` continue, until one remains.
pub fn hyperparameter_search<R, F>(spec: &SearchSpec, mut make_runner: F) -> Result<SearchOutcome>
where
    R: Runner,
    F: FnMut(&TrialParams) -> Result<R>,
{
    let params = sample_trials(spec)?;
    let mut trials: Vec<Trial<R>> = params
        .iter()
        .map(|p| {
            Ok(Trial {
                runner: make_runner(p)?,
                record: TrialRecord {
                    params: *p,
                    epochs_run: 0,
                    best_val: f64::INFINITY,
                    promoted_rungs: 0,
                    diverged: false,
                },
                stopped: false,
            })
        })
        .collect::<Result<_>>()?;
    let mut alive: Vec<usize> = (0..trials.len()).collect();
    let mut rungs = Vec::new();
    let mut epoch = spec.grace_period;
    loop {
        for &i in &alive {
            trials[i].advance_to(epoch)?;
        }
        rungs.push((epoch, alive.len()));
        if alive.len() == 1 {
            break;
        }
        // Stable sort keeps trial order on ties.
        alive.sort_by(|&a, &b| trials[a].record.best_val.total_cmp(&trials[b].record.best_val));
        alive.truncate((alive.len() / spec.reduction_factor).max(1));
        alive.sort_unstable();
        for &i in &alive {
            trials[i].record.promoted_rungs += 1;
        }
        if alive.len() == 1 {
            break;
        }
        epoch *= spec.reduction_factor;
    }
    let winner = alive[0];
    if trials[winner].record.diverged {
        return Err(Error::Divergence {
            epoch: trials[winner].record.epochs_run,
            loss: f64::NAN,
        });
    }
    Ok(SearchOutcome {
        best: trials[winner].record.params,
        trials: trials.into_iter().map(|t| t.record).collect(),
        rungs,
    })
}

/// Trial table: `trial_id,lr,dropout,epochs_run,best_val,promoted_rungs`.
pub fn write_trial_csv<W: Write>(trials: &[TrialRecord], mut out: W) -> Result<()> {
    writeln!(out, "trial_id,lr,dropout,epochs_run,best_val,promoted_rungs")?;
    for t in trials {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            t.params.trial_id, t.params.learning_rate, t.params.dropout, t.epochs_run, t.best_val, t.promoted_rungs
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Loss decays toward a floor set by the learning rate's distance from 1e-3.
    struct Fake {
        lr: f64,
        epoch: usize,
        diverge: bool,
    }

    impl Runner for Fake {
        fn run_epoch(&mut self) -> Result<f64> {
            self.epoch += 1;
            if self.diverge {
                return Err(Error::Divergence { epoch: self.epoch, loss: f64::NAN });
            }
            Ok((self.lr.log10() + 3.0).abs() + 1.0 / self.epoch as f64)
        }
    }

    fn fake(p: &TrialParams) -> Result<Fake> {
        Ok(Fake {
            lr: p.learning_rate,
            epoch: 0,
            diverge: false,
        })
    }

    #[test]
    fn halving_arithmetic() {
        let out = hyperparameter_search(&SearchSpec::default(), fake).unwrap();
        assert_eq!(out.rungs, vec![(4, 16), (8, 8), (16, 4), (32, 2)]);
        let survivors = out.trials.iter().filter(|t| t.promoted_rungs == 4).count();
        assert_eq!(survivors, 1);
        assert!(out.trials.iter().all(|t| t.epochs_run >= 4));
        // The winner has the smallest floor among all trials.
        let best = out
            .trials
            .iter()
            .min_by(|a, b| (a.params.learning_rate.log10() + 3.0).abs().total_cmp(&(b.params.learning_rate.log10() + 3.0).abs()))
            .unwrap();
        assert_eq!(out.best, best.params);
    }

    #[test]
    fn samples_stay_in_range_and_repeat() {
        let spec = SearchSpec {
            n_trials: 500,
            ..SearchSpec::default()
        };
        let a = sample_trials(&spec).unwrap();
        assert!(a.iter().all(|t| (1e-6..=1e-2).contains(&t.learning_rate)));
        assert!(a.iter().all(|t| (0.0..=0.6).contains(&t.dropout)));
        assert_eq!(a, sample_trials(&spec).unwrap());
    }

    #[test]
    fn diverged_trial_loses() {
        let spec = SearchSpec {
            n_trials: 2,
            ..SearchSpec::default()
        };
        let out = hyperparameter_search(&spec, |p| {
            Ok(Fake {
                lr: p.learning_rate,
                epoch: 0,
                diverge: p.trial_id == 0,
            })
        })
        .unwrap();
        assert_eq!(out.best.trial_id, 1);
        assert!(out.trials[0].diverged);
        assert_eq!(out.trials[0].epochs_run, 1);
    }

    #[test]
    fn zero_trials_error() {
        let spec = SearchSpec {
            n_trials: 0,
            ..SearchSpec::default()
        };
        assert!(hyperparameter_search(&spec, fake).is_err());
    }

    #[test]
    fn csv_header() {
        let out = hyperparameter_search(&SearchSpec { n_trials: 2, ..SearchSpec::default() }, fake).unwrap();
        let mut buf = Vec::new();
        write_trial_csv(&out.trials, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("trial_id,lr,dropout,epochs_run,best_val,promoted_rungs\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
