//! Minibatch SGD with momentum and cosine learning-rate decay, shared by the
//! prototype classifier and the linear baselines.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

/// Which terms of the hybrid loss drive prototype updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Cross entropy plus `lambda` times the prototype loss.
    Hybrid,
    /// Prototype loss alone (cross entropy disabled).
    PrototypeOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 160,
            batch_size: 128,
            learning_rate: 0.1,
            momentum: 0.9,
            lr_schedule: LrSchedule::Cosine,
            seed: 0,
            objective: Objective::Hybrid,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.epochs < 1 {
            return Err("epochs must be >= 1".to_string());
        }
        if self.batch_size < 1 {
            return Err("batch_size must be >= 1".to_string());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        Ok(())
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let progress = epoch as f64 / self.epochs as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    /// Minibatches of sample indices for `epoch`. The permutation depends
    /// only on the seed and the epoch index.
    pub fn epoch_batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        let stream = (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed ^ stream));
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// Heavy-ball momentum buffer: `v <- mu * v + g; x <- x - lr * v`.
#[derive(Debug, Clone)]
pub struct Momentum {
    velocity: Vec<f64>,
    mu: f64,
}

impl Momentum {
    pub fn new(len: usize, mu: f64) -> Self {
        Momentum {
            velocity: vec![0.0; len],
            mu,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.mu * *v + g;
            *p -= lr * *v;
        }
    }
}
