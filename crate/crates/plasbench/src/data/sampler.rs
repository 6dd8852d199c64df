//! Batch samplers: shuffled-epoch subset sampling and the smooth blending
//! schedule in which each batch slot independently draws from the full set
//! with probability `p(n) = 1 - gamma^(scale * n / N)`.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// The blending schedule parameters. `p` rises from 0 at step 0 toward 1.
#[derive(Clone, Debug)]
pub struct BlendingSchedule {
    pub gamma: f64,
    /// Exponent scale in `gamma^(scale * n / N)`.
    pub exponent_scale: f64,
    pub total_steps: u64,
    pub pretrain_indices: Vec<u32>,
    pub full_indices: Vec<u32>,
}

pub const DEFAULT_EXPONENT_SCALE: f64 = 50.0;

impl BlendingSchedule {
    pub fn new(
        gamma: f64,
        total_steps: u64,
        pretrain_indices: Vec<u32>,
        full_indices: Vec<u32>,
    ) -> Result<Self> {
        if !(0.0 < gamma && gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0,1), got {gamma}")));
        }
        if total_steps == 0 {
            return Err(Error::Config("blending needs at least one step".into()));
        }
        if pretrain_indices.is_empty() || full_indices.is_empty() {
            return Err(Error::Config("blending source sets must be nonempty".into()));
        }
        Ok(BlendingSchedule {
            gamma,
            exponent_scale: DEFAULT_EXPONENT_SCALE,
            total_steps,
            pretrain_indices,
            full_indices,
        })
    }

    /// `p(n) = 1 - gamma^(scale * n / N)`, nondecreasing in n, 0 at n = 0.
    pub fn probability(&self, step_n: u64) -> f64 {
        let exponent = self.exponent_scale * step_n as f64 / self.total_steps as f64;
        1.0 - self.gamma.powf(exponent)
    }
}

/// Uniform shuffled-epoch sampling without replacement within an epoch; the
/// final batch of an epoch may be short.
pub struct SubsetSampler {
    order: Vec<u32>,
    cursor: usize,
    rng: Rng,
}

impl SubsetSampler {
    pub fn new(indices: &[u32], seed: u64) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Config("cannot sample from an empty index set".into()));
        }
        let mut sampler = SubsetSampler {
            order: indices.to_vec(),
            cursor: 0,
            rng: rng::rng_from(rng::derive(seed, "subset-sampler")),
        };
        sampler.order.shuffle(&mut sampler.rng);
        Ok(sampler)
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> u64 {
        self.order.len().div_ceil(batch_size) as u64
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Vec<u32> {
        let take = batch_size.min(self.order.len() - self.cursor);
        let batch = self.order[self.cursor..self.cursor + take].to_vec();
        self.cursor += take;
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        batch
    }
}

/// Per-slot Bernoulli mixing between the pretrain subset and the full set,
/// both sampled uniformly with replacement. Tracks realized source counts.
pub struct BlendingSampler {
    pub schedule: BlendingSchedule,
    rng: Rng,
    drawn_full: u64,
    drawn_total: u64,
}

impl BlendingSampler {
    pub fn new(schedule: BlendingSchedule, seed: u64) -> Self {
        BlendingSampler {
            schedule,
            rng: rng::rng_from(rng::derive(seed, "blending-sampler")),
            drawn_full: 0,
            drawn_total: 0,
        }
    }

    /// Draws a batch at a fixed mixing probability.
    pub fn next_batch_with_probability(&mut self, p: f64, batch_size: usize) -> Vec<u32> {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let from_full = self.rng.random::<f64>() < p;
            let source = if from_full {
                self.drawn_full += 1;
                &self.schedule.full_indices
            } else {
                &self.schedule.pretrain_indices
            };
            self.drawn_total += 1;
            batch.push(source[self.rng.random_range(0..source.len())]);
        }
        batch
    }

    pub fn next_batch(&mut self, step_n: u64, batch_size: usize) -> Vec<u32> {
        let p = self.schedule.probability(step_n);
        self.next_batch_with_probability(p, batch_size)
    }

    /// Fraction of slots drawn from the full set so far.
    pub fn realized_full_fraction(&self) -> f64 {
        if self.drawn_total == 0 {
            0.0
        } else {
            self.drawn_full as f64 / self.drawn_total as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule(gamma: f64) -> BlendingSchedule {
        BlendingSchedule::new(gamma, 1000, (0..50).collect(), (0..100).collect()).unwrap()
    }

    #[test]
    fn probability_frozen_values() {
        let s = schedule(0.8);
        assert_eq!(s.probability(0), 0.0);
        // 1 - 0.8^50 and 1 - 0.8^25, high-precision references.
        assert!((s.probability(1000) - 0.9999857275230729).abs() < 1e-12);
        assert!((s.probability(500) - 0.9962221068137043).abs() < 1e-12);
    }

    #[test]
    fn probability_monotone_in_n_and_gamma() {
        for &gamma in &[0.5, 0.8, 0.9, 0.99] {
            let s = schedule(gamma);
            let mut prev = -1.0;
            for n in (0..=1000).step_by(50) {
                let p = s.probability(n);
                assert!(p >= prev);
                prev = p;
            }
        }
        // Larger 1 - gamma (smaller gamma) gives larger p at fixed n.
        let (a, b) = (schedule(0.5), schedule(0.9));
        for n in [1, 10, 100, 999] {
            assert!(a.probability(n) > b.probability(n));
        }
    }

    #[test]
    fn blending_at_step_zero_draws_only_pretrain() {
        let mut sampler = BlendingSampler::new(schedule(0.8), 1);
        let batch = sampler.next_batch(0, 512);
        assert!(batch.iter().all(|&i| i < 50));
        assert_eq!(sampler.realized_full_fraction(), 0.0);
    }

    #[test]
    fn tiny_gamma_draws_only_full_set_after_step_one() {
        let mut sampler = BlendingSampler::new(schedule(1e-300), 2);
        for step in [1u64, 5, 100] {
            let p = sampler.schedule.probability(step);
            assert!(p > 1.0 - 1e-12);
            sampler.next_batch(step, 64);
        }
        assert!(sampler.realized_full_fraction() > 1.0 - 1e-9);
    }

    #[test]
    fn fixed_probability_matches_binomial_bound() {
        // 1e5 draws at p = 0.3: the full-set fraction sits within the
        // 3-sigma binomial band +-0.004347.
        let mut sampler = BlendingSampler::new(schedule(0.8), 77);
        sampler.next_batch_with_probability(0.3, 100_000);
        let frac = sampler.realized_full_fraction();
        assert!((frac - 0.3).abs() < 0.0043474, "fraction {frac}");
    }

    #[test]
    fn shuffled_epoch_visits_every_index_once() {
        let indices: Vec<u32> = (10..35).collect();
        let mut sampler = SubsetSampler::new(&indices, 5).unwrap();
        assert_eq!(sampler.steps_per_epoch(4), 7);
        for _epoch in 0..3 {
            let mut seen = Vec::new();
            for _step in 0..7 {
                seen.extend(sampler.next_batch(4));
            }
            seen.sort_unstable();
            assert_eq!(seen, indices);
        }
    }

    #[test]
    fn empty_source_is_config_error() {
        assert!(SubsetSampler::new(&[], 0).is_err());
        assert!(BlendingSchedule::new(0.8, 10, vec![], vec![0]).is_err());
    }

    #[test]
    fn invalid_gamma_rejected() {
        assert!(BlendingSchedule::new(0.0, 10, vec![0], vec![0]).is_err());
        assert!(BlendingSchedule::new(1.0, 10, vec![0], vec![0]).is_err());
    }
}
