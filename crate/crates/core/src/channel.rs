//! Two-state (ON/OFF) Markov channels and the scheduler's belief about them.
//!
//! A user's belief is the conditional probability that its channel is ON in
//! the current slot given all ARQ feedback so far. Feedback only arrives for
//! users that were scheduled (or probed by a dummy broadcast), so the belief
//! lives on a countable set: `b_s` before any observation, and `b_{c,l}` when
//! the last observation was `c` and happened `l` slots ago.
//!
//! Beliefs are stored as `(last observation, age)` and their value is taken
//! from the closed form on demand, so long horizons never accumulate
//! floating-point drift from repeated passive updates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default lower bound on cross-transition probabilities.
pub const DEFAULT_DELTA: f64 = 0.05;

/// Default age beyond which an observed belief is treated as exactly `b_s`.
pub const DEFAULT_AGE_CAP: u64 = 1_000_000;

/// Channel state observed through an ACK (`On`) or NACK (`Off`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Observation {
    Off,
    On,
}

impl Observation {
    pub fn from_state(on: bool) -> Self {
        if on {
            Observation::On
        } else {
            Observation::Off
        }
    }

    pub fn is_on(self) -> bool {
        self == Observation::On
    }
}

/// The last observation a belief is anchored on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LastObs {
    Off,
    On,
    Never,
}

/// One user's ON/OFF Markov channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    user_id: usize,
    p01: f64,
    p11: f64,
}

impl ChannelModel {
    /// Validates `0 < p01 < p11 < 1` together with the `delta` margins
    /// `p01 > delta` and `1 - p11 > delta`.
    pub fn new(user_id: usize, p01: f64, p11: f64, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 0.5) {
            return Err(crate::error::invalid(
                "delta",
                format!("{delta} is not in (0, 0.5)"),
            ));
        }
        let reject = |reason: String| Error::InvalidChannel {
            user: user_id,
            reason,
        };
        if !(p01.is_finite() && p11.is_finite()) {
            return Err(reject("transition probabilities must be finite".into()));
        }
        if !(0.0 < p01 && p01 < p11 && p11 < 1.0) {
            return Err(reject(format!(
                "need 0 < p01 < p11 < 1, got p01={p01}, p11={p11}"
            )));
        }
        if p01 <= delta {
            return Err(reject(format!("p01={p01} must exceed delta={delta}")));
        }
        if 1.0 - p11 <= delta {
            return Err(reject(format!("p10={} must exceed delta={delta}", 1.0 - p11)));
        }
        Ok(Self { user_id, p01, p11 })
    }

    pub fn user_id(&self) -> usize {
        self.user_id
    }

    pub fn p01(&self) -> f64 {
        self.p01
    }

    pub fn p11(&self) -> f64 {
        self.p11
    }

    /// `p11 - p01`, the one-step autocorrelation of the channel.
    pub fn memory(&self) -> f64 {
        self.p11 - self.p01
    }

    /// Stationary ON probability `b_s = p01 / (1 + p01 - p11)`.
    pub fn stationary(&self) -> f64 {
        self.p01 / (1.0 + self.p01 - self.p11)
    }

    /// Passive belief update `Q(x) = x p11 + (1 - x) p01`.
    pub fn passive_update(&self, belief: f64) -> f64 {
        belief * self.p11 + (1.0 - belief) * self.p01
    }

    /// Closed-form `b_{c,l}`: belief `age` slots after observing `obs`.
    pub fn belief_after(&self, obs: Observation, age: u64) -> f64 {
        debug_assert!(age >= 1);
        if age <= 1 {
            return match obs {
                Observation::Off => self.p01,
                Observation::On => self.p11,
            };
        }
        let denom = 1.0 + self.p01 - self.p11;
        let decay = pow_u64(self.memory(), age);
        match obs {
            Observation::Off => (self.p01 - decay * self.p01) / denom,
            Observation::On => (self.p01 + (1.0 - self.p11) * decay) / denom,
        }
    }

    /// Draws the next true channel state given the current one.
    pub fn next_state<R: Rng + ?Sized>(&self, on: bool, rng: &mut R) -> bool {
        let p = if on { self.p11 } else { self.p01 };
        rng.random::<f64>() < p
    }

    /// Draws a channel state from the stationary distribution.
    pub fn stationary_state<R: Rng + ?Sized>(&self, rng: &mut R) -> bool {
        rng.random::<f64>() < self.stationary()
    }
}

fn pow_u64(base: f64, exp: u64) -> f64 {
    match i32::try_from(exp) {
        Ok(e) => base.powi(e),
        // 0 < base < 1, so anything this large has long underflowed.
        Err(_) => 0.0,
    }
}

/// Stationary belief `b_s` of a model.
pub fn stationary_belief(model: &ChannelModel) -> f64 {
    model.stationary()
}

/// Closed-form `b_{c,l}` for `age >= 1`.
pub fn belief_closed_form(model: &ChannelModel, last_obs: Observation, age: u64) -> f64 {
    model.belief_after(last_obs, age)
}

/// Scheduler's information state for one user.
///
/// `Stationary` is the never-observed state, whose value is `b_s`. An
/// observed belief whose age reaches the cap collapses back to `Stationary`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BeliefState {
    Stationary,
    Observed { last: Observation, age: u64 },
}

impl Default for BeliefState {
    fn default() -> Self {
        BeliefState::Stationary
    }
}

impl BeliefState {
    pub fn observed(last: Observation, age: u64) -> Self {
        assert!(age >= 1, "observed beliefs have age >= 1");
        BeliefState::Observed { last, age }
    }

    pub fn last_obs(&self) -> LastObs {
        match self {
            BeliefState::Stationary => LastObs::Never,
            BeliefState::Observed {
                last: Observation::On,
                ..
            } => LastObs::On,
            BeliefState::Observed {
                last: Observation::Off,
                ..
            } => LastObs::Off,
        }
    }

    /// Slots since the last observation, `None` if never observed.
    pub fn age(&self) -> Option<u64> {
        match self {
            BeliefState::Stationary => None,
            BeliefState::Observed { age, .. } => Some(*age),
        }
    }

    /// Conditional probability that the channel is ON this slot.
    pub fn value(&self, model: &ChannelModel) -> f64 {
        match *self {
            BeliefState::Stationary => model.stationary(),
            BeliefState::Observed { last, age } => model.belief_after(last, age),
        }
    }

    /// Short textual key, e.g. `s`, `off:3`, `on:1`.
    pub fn label(&self) -> String {
        match self {
            BeliefState::Stationary => "s".to_string(),
            BeliefState::Observed { last, age } => match last {
                Observation::Off => format!("off:{age}"),
                Observation::On => format!("on:{age}"),
            },
        }
    }
}

impl std::fmt::Display for BeliefState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

/// One-slot belief update with the default age cap.
pub fn evolve_belief(
    model: &ChannelModel,
    belief: BeliefState,
    observation: Option<Observation>,
) -> BeliefState {
    evolve_belief_capped(model, belief, observation, DEFAULT_AGE_CAP)
}

/// One-slot belief update.
///
/// An observation resets the belief to `p11` (ON) or `p01` (OFF) with age 1.
/// Without one, the belief ages by one slot, which in value terms applies the
/// passive operator `Q`. Ages at or beyond `age_cap` become `Stationary`.
pub fn evolve_belief_capped(
    _model: &ChannelModel,
    belief: BeliefState,
    observation: Option<Observation>,
    age_cap: u64,
) -> BeliefState {
    match (observation, belief) {
        (Some(obs), _) => BeliefState::Observed { last: obs, age: 1 },
        (None, BeliefState::Stationary) => BeliefState::Stationary,
        (None, BeliefState::Observed { last, age }) => {
            let next = age.saturating_add(1);
            if next >= age_cap {
                BeliefState::Stationary
            } else {
                BeliefState::Observed { last, age: next }
            }
        }
    }
}

/// True state of one channel together with its private random stream.
#[derive(Debug, Clone)]
pub struct ChannelRealization<R> {
    pub state: bool,
    pub rng: R,
}

impl<R: Rng> ChannelRealization<R> {
    /// Starts the channel from its stationary distribution.
    pub fn stationary(model: &ChannelModel, mut rng: R) -> Self {
        let state = model.stationary_state(&mut rng);
        Self { state, rng }
    }

    pub fn with_state(state: bool, rng: R) -> Self {
        Self { state, rng }
    }
}

/// Advances a channel realization by one slot.
pub fn step_channel<R: Rng>(model: &ChannelModel, realization: &mut ChannelRealization<R>) -> bool {
    realization.state = model.next_state(realization.state, &mut realization.rng);
    realization.state
}
