//! Numeric Whittle index by subsidy bisection.
//!
//! The single-user belief MDP is truncated at `truncation` slots (older
//! beliefs are identified with `b_s`). For a passivity subsidy `w`, relative
//! value iteration solves the average-reward problem with reward `pi` when
//! active and `w` when passive. The index of a state is the smallest `w` at
//! which staying passive there is optimal, located by bisection on `[0, 1]`.
//!
//! This is deliberately independent of the closed form in the parent module.

use crate::channel::{BeliefState, ChannelModel, Observation};
use crate::error::{invalid, Error, Result};

/// Tuning knobs for the oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    pub truncation: u64,
    /// Span-seminorm stopping threshold for value iteration.
    pub vi_tolerance: f64,
    pub max_iterations: usize,
    /// Bisection stops once the subsidy bracket is narrower than this.
    pub tolerance: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            truncation: 200,
            vi_tolerance: 1e-10,
            max_iterations: 1_000_000,
            tolerance: 1e-9,
        }
    }
}

/// Oracle index of `belief` with the default value-iteration settings.
pub fn numeric_index_oracle(
    model: &ChannelModel,
    belief: BeliefState,
    truncation: u64,
    tolerance: f64,
) -> Result<f64> {
    let cfg = OracleConfig {
        truncation,
        tolerance,
        ..OracleConfig::default()
    };
    SubsidyProblem::new(model, cfg)?.index_of(belief)
}

/// Truncated single-user belief MDP, reusable across many queried states.
pub struct SubsidyProblem {
    cfg: OracleConfig,
    // 0 = b_s, 1..=L post-OFF ages, L+1..=2L post-ON ages.
    values: Vec<f64>,
    passive_next: Vec<usize>,
    bias: Vec<f64>,
}

impl SubsidyProblem {
    pub fn new(model: &ChannelModel, cfg: OracleConfig) -> Result<Self> {
        if cfg.truncation < 1 {
            return Err(invalid("truncation", "must be at least 1"));
        }
        if !(cfg.tolerance > 0.0) {
            return Err(invalid("tolerance", "must be positive"));
        }
        let l = cfg.truncation as usize;
        let mut values = Vec::with_capacity(2 * l + 1);
        values.push(model.stationary());
        for obs in [Observation::Off, Observation::On] {
            for age in 1..=l {
                values.push(model.belief_after(obs, age as u64));
            }
        }
        let passive_next = (0..=2 * l)
            .map(|s| match s {
                0 => 0,
                s if s == l || s == 2 * l => 0,
                s => s + 1,
            })
            .collect();
        Ok(Self {
            cfg,
            bias: vec![0.0; values.len()],
            values,
            passive_next,
        })
    }

    fn state_of(&self, belief: BeliefState) -> Result<usize> {
        let l = self.cfg.truncation;
        match belief {
            BeliefState::Stationary => Ok(0),
            BeliefState::Observed { age, .. } if age > l => Err(invalid(
                "truncation",
                format!("age {age} exceeds truncation {l}"),
            )),
            BeliefState::Observed {
                last: Observation::Off,
                age,
            } => Ok(age as usize),
            BeliefState::Observed {
                last: Observation::On,
                age,
            } => Ok(l as usize + age as usize),
        }
    }

    fn on1(&self) -> usize {
        self.cfg.truncation as usize + 1
    }

    /// Relative value iteration at subsidy `w`, warm-started from the last
    /// solve. Returns `(active - passive)` action values at every state.
    pub fn advantage(&mut self, subsidy: f64) -> Result<Vec<f64>> {
        // Half-step damping makes the operator aperiodic.
        const DAMP: f64 = 0.5;
        let n = self.values.len();
        let (on1, off1) = (self.on1(), 1usize);
        let mut next = vec![0.0; n];
        let mut residual = f64::INFINITY;
        for _ in 0..self.cfg.max_iterations {
            let (h_on, h_off) = (self.bias[on1], self.bias[off1]);
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for s in 0..n {
                let pi = self.values[s];
                let active = pi + pi * h_on + (1.0 - pi) * h_off;
                let passive = subsidy + self.bias[self.passive_next[s]];
                let t = (1.0 - DAMP) * self.bias[s] + DAMP * active.max(passive);
                let d = t - self.bias[s];
                lo = lo.min(d);
                hi = hi.max(d);
                next[s] = t;
            }
            let anchor = next[0];
            for (h, t) in self.bias.iter_mut().zip(&next) {
                *h = t - anchor;
            }
            residual = hi - lo;
            if residual < self.cfg.vi_tolerance {
                let (h_on, h_off) = (self.bias[on1], self.bias[off1]);
                return Ok((0..n)
                    .map(|s| {
                        let pi = self.values[s];
                        let active = pi + pi * h_on + (1.0 - pi) * h_off;
                        active - (subsidy + self.bias[self.passive_next[s]])
                    })
                    .collect());
            }
        }
        Err(Error::NonConvergence {
            iterations: self.cfg.max_iterations,
            residual,
        })
    }

    /// Smallest subsidy in `[0, 1]` at which `belief` is passive-optimal.
    pub fn index_of(&mut self, belief: BeliefState) -> Result<f64> {
        let s = self.state_of(belief)?;
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        while hi - lo > self.cfg.tolerance {
            let mid = 0.5 * (lo + hi);
            if self.advantage(mid)?[s] <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}
