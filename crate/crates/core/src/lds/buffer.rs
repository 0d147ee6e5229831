use std::collections::VecDeque;

use nalgebra::DVector;

use super::BOUND_SLACK;
use crate::error::{check_dim, ControlError, Result};

/// Ring of the most recent disturbances, `w_{t-capacity} … w_{t-1}`.
///
/// Time before zero reads as the zero vector. `now()` is the index of the next
/// disturbance to be pushed, i.e. the current time step of the control loop.
#[derive(Debug, Clone)]
pub struct DisturbanceBuffer {
    entries: VecDeque<DVector<f64>>,
    capacity: usize,
    now: usize,
    w_bound: f64,
    zero: DVector<f64>,
}

impl DisturbanceBuffer {
    pub fn new(dim: usize, capacity: usize, w_bound: f64) -> Self {
        Self {
            entries: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
            now: 0,
            w_bound,
            zero: DVector::zeros(dim),
        }
    }

    /// Buffer sized for a memory horizon `h`: holds `2h + 1` entries.
    pub fn for_horizon(dim: usize, h: usize, w_bound: f64) -> Self {
        Self::new(dim, 2 * h + 1, w_bound)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
    pub fn now(&self) -> usize {
        self.now
    }
    pub fn dim(&self) -> usize {
        self.zero.len()
    }

    /// Appends `w_{now}` and advances the clock.
    pub fn push(&mut self, w: DVector<f64>) -> Result<()> {
        check_dim("buffered disturbance", self.dim(), w.len())?;
        let n = w.norm();
        if n > self.w_bound * (1.0 + BOUND_SLACK) + BOUND_SLACK {
            return Err(ControlError::BoundViolated {
                what: "disturbance norm",
                value: n,
                bound: self.w_bound,
            });
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(w);
        self.now += 1;
        Ok(())
    }

    /// `w_time`; zero for negative time.
    pub fn get(&self, time: i64) -> Result<&DVector<f64>> {
        if time < 0 {
            return Ok(&self.zero);
        }
        let now = self.now as i64;
        let oldest = now - self.entries.len() as i64;
        if time >= now || time < oldest {
            return Err(ControlError::OutOfWindow { t: time });
        }
        Ok(&self.entries[(time - oldest) as usize])
    }

    /// `w_{now - lag}` for `lag ≥ 1`.
    pub fn lag(&self, lag: usize) -> Result<&DVector<f64>> {
        self.get(self.now as i64 - lag as i64)
    }
}
