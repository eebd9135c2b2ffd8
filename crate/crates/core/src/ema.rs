//! Mean-teacher EMA of student parameters, applied every `interval` steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.999;
pub const DEFAULT_INTERVAL: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    teacher: Vec<f64>,
    alpha: f64,
    interval: u64,
    counter: u64,
}

impl EmaState {
    pub fn new(teacher: Vec<f64>, alpha: f64, interval: u64) -> Result<Self> {
        Self::with_counter(teacher, alpha, interval, 0)
    }

    /// Restores a state mid-schedule.
    pub fn with_counter(
        teacher: Vec<f64>,
        alpha: f64,
        interval: u64,
        counter: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha={alpha} must lie in [0, 1]")));
        }
        if interval == 0 {
            return Err(Error::invalid("EMA interval must be at least 1"));
        }
        Ok(Self {
            teacher,
            alpha,
            interval,
            counter,
        })
    }

    pub fn teacher(&self) -> &[f64] {
        &self.teacher
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn interval(&self) -> u64 {
        self.interval
    }
    /// Number of `step` calls so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }
    /// Number of updates that actually touched the teacher.
    pub fn applied(&self) -> u64 {
        self.counter / self.interval
    }

    /// Counts one training iteration and, on every `interval`-th call,
    /// moves the teacher toward `student`:
    /// `teacher <- alpha * teacher + (1 - alpha) * student`.
    ///
    /// Returns whether the update was applied.
    pub fn step(&mut self, student: &[f64]) -> Result<bool> {
        if student.len() != self.teacher.len() {
            return Err(Error::invalid(format!(
                "student has {} parameters, teacher has {}",
                student.len(),
                self.teacher.len()
            )));
        }
        self.counter += 1;
        if !self.counter.is_multiple_of(self.interval) {
            return Ok(false);
        }
        if self.alpha == 0.0 {
            self.teacher.copy_from_slice(student);
        } else {
            // written as t + (1 - alpha)(s - t) so each coordinate stays
            // between t and s under rounding
            let rate = 1.0 - self.alpha;
            for (t, s) in self.teacher.iter_mut().zip(student) {
                *t += rate * (s - *t);
            }
        }
        Ok(true)
    }
}
