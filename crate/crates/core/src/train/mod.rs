//! Step loop shared by every trainer: per-step rng streams, gradient
//! accumulation and loss/timing records.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::nn::{stream_rng, AdamW, AdamWConfig, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Data step index (0-based).
    pub step: usize,
    pub loss: f32,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f32> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Mean loss over records `range`.
    pub fn mean(&self, range: std::ops::Range<usize>) -> f64 {
        let r = &self.records[range];
        r.iter().map(|x| x.loss as f64).sum::<f64>() / r.len().max(1) as f64
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.records.extend(other.records);
    }

    /// Fails when the mean of the last `window` losses is not below the first `window`.
    pub fn check_progress(&self, window: usize) -> Result<()> {
        let n = self.records.len();
        if window == 0 || n < 2 * window {
            return Ok(());
        }
        let (first, last) = (self.mean(0..window), self.mean(n - window..n));
        if !(last < first) {
            return Err(Error::Training(format!(
                "loss did not decrease: first {window} steps {first:.5}, last {window} steps {last:.5}"
            )));
        }
        Ok(())
    }
}

/// Optimizer plus step counter; the rng for data step `k` is `stream_rng(seed, k)`,
/// so a trainer restored at step `k` continues the exact same sequence.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub opt: AdamW,
    pub step: usize,
    pub accumulation: usize,
    pub seed: u64,
    pending: Vec<(ParamId, Vec<f32>)>,
}

impl Trainer {
    pub fn new(config: AdamWConfig, accumulation: usize, seed: u64) -> Result<Self> {
        if accumulation == 0 {
            return Err(config_err!("gradient accumulation must be at least 1"));
        }
        Ok(Trainer { opt: AdamW::new(config), step: 0, accumulation, seed, pending: Vec::new() })
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.opt.state.step
    }

    /// Runs `steps` data steps. `loss_fn` builds the scalar loss for one step;
    /// `on_update` runs after each optimizer update.
    pub fn run(
        &mut self,
        ps: &mut ParamStore,
        steps: usize,
        mut loss_fn: impl FnMut(&ParamStore, &mut ChaCha8Rng) -> Result<Tensor<f32>>,
        mut on_update: impl FnMut(&Trainer, &ParamStore, &StepRecord) -> Result<()>,
    ) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        for _ in 0..steps {
            let start = Instant::now();
            let mut rng = stream_rng(self.seed, self.step as u64);
            let loss = loss_fn(ps, &mut rng)?;
            loss.check_finite("training loss")?;
            let grads = ps.collect_grads(&loss.backward()?)?;
            crate::nn::accumulate(&mut self.pending, grads);
            self.step += 1;
            let boundary = self.step % self.accumulation == 0;
            if boundary {
                let g = std::mem::take(&mut self.pending);
                self.opt.step(ps, &g, 1.0 / self.accumulation as f32)?;
            }
            let rec = StepRecord { step: self.step - 1, loss: loss.item()?, seconds: start.elapsed().as_secs_f64() };
            if boundary {
                on_update(self, ps, &rec)?;
            }
            log.records.push(rec);
        }
        Ok(log)
    }

    /// Whether gradients are waiting for the next optimizer update.
    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn quadratic() -> ParamStore {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::from_vec(vec![1.0, -2.0, 0.5], &[3]).unwrap(), true).unwrap();
        ps
    }

    fn loss(ps: &ParamStore, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
        let target = Tensor::full(&[3], rng.random_range(-0.1..0.1f32));
        ps.get(ps.id_of("w").unwrap()).mse(&target)
    }

    #[test]
    fn accumulation_halves_updates() {
        let cfg = AdamWConfig { lr: 1e-2, ..Default::default() };
        let mut a = Trainer::new(cfg.clone(), 1, 0).unwrap();
        let mut b = Trainer::new(cfg, 2, 0).unwrap();
        let (mut pa, mut pb) = (quadratic(), quadratic());
        a.run(&mut pa, 10, loss, |_, _, _| Ok(())).unwrap();
        b.run(&mut pb, 10, loss, |_, _, _| Ok(())).unwrap();
        assert_eq!(a.optimizer_steps(), 10);
        assert_eq!(b.optimizer_steps(), 5);
        assert!(Trainer::new(AdamWConfig::default(), 0, 0).is_err());
    }

    #[test]
    fn split_runs_match_one_run() {
        let cfg = AdamWConfig { lr: 1e-2, ..Default::default() };
        let mut full = Trainer::new(cfg.clone(), 2, 5).unwrap();
        let mut p1 = quadratic();
        let l1 = full.run(&mut p1, 8, loss, |_, _, _| Ok(())).unwrap();
        let mut part = Trainer::new(cfg, 2, 5).unwrap();
        let mut p2 = quadratic();
        let mut l2 = part.run(&mut p2, 4, loss, |_, _, _| Ok(())).unwrap();
        l2.extend(part.run(&mut p2, 4, loss, |_, _, _| Ok(())).unwrap());
        assert_eq!(l1.losses(), l2.losses());
        assert_eq!(p1.digest(|_| true), p2.digest(|_| true));
    }

    #[test]
    fn progress_check() {
        let mk = |v: &[f32]| TrainLog {
            records: v.iter().enumerate().map(|(i, &l)| StepRecord { step: i, loss: l, seconds: 0.0 }).collect(),
        };
        assert!(mk(&[4.0, 3.0, 2.0, 1.0]).check_progress(2).is_ok());
        assert!(mk(&[1.0, 1.0, 1.0, 1.0]).check_progress(2).is_err());
    }
}
