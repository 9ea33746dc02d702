//! Whittle index of a belief state.
//!
//! For a post-OFF belief `pi = b_{0,l} < b_s` the index is
//!
//! ```text
//!   ((pi - Q(pi))(l + 1) + Q(pi)) / (1 - p11 + (pi - Q(pi)) l + Q(pi))
//! ```
//!
//! and for `b_s <= pi <= p11` it is `pi / (1 - p11 + pi)`, which at `b_s`
//! equals `p01 / ((1 - p11)(1 + p01 - p11) + p01)`. The upper branch varies
//! with `pi` over the post-ON beliefs; treating it as constant on
//! `[b_s, p11]` disagrees with the subsidy oracle in [`oracle`] by up to
//! `p11 - W(b_s)`. The `verify-index` CLI command tabulates both side by side.
//!
//! Branches are selected from the belief key rather than from the floating
//! value, so the `b_s` boundary never depends on a tolerance.

pub mod oracle;

use serde::{Deserialize, Serialize};

use crate::channel::{BeliefState, ChannelModel, Observation};
use crate::error::{invalid, Error, Result};

pub use oracle::{numeric_index_oracle, OracleConfig};

const RANGE_SLACK: f64 = 1e-12;

/// An index value together with the user and belief it was computed for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexValue {
    pub value: f64,
    pub user_id: usize,
    pub belief: BeliefState,
    pub weight: f64,
}

/// Index of the never-observed state `b_s`.
pub fn stationary_index(model: &ChannelModel) -> f64 {
    let bs = model.stationary();
    bs / (1.0 - model.p11() + bs)
}

/// Unweighted Whittle index, in `[0, 1]`.
pub fn whittle_index(model: &ChannelModel, belief: BeliefState) -> Result<IndexValue> {
    let value = index_value(model, belief)?;
    Ok(IndexValue {
        value,
        user_id: model.user_id(),
        belief,
        weight: 1.0,
    })
}

/// `weight * whittle_index`.
pub fn weighted_index(model: &ChannelModel, belief: BeliefState, weight: f64) -> Result<IndexValue> {
    if !(weight >= 0.0 && weight.is_finite()) {
        return Err(invalid("weight", format!("{weight} is not a finite nonnegative number")));
    }
    let value = index_value(model, belief)?;
    Ok(IndexValue {
        value: weight * value,
        user_id: model.user_id(),
        belief,
        weight,
    })
}

/// Raw index computation shared by the public entry points.
pub(crate) fn index_value(model: &ChannelModel, belief: BeliefState) -> Result<f64> {
    let pi = belief.value(model);
    if pi < model.p01() - RANGE_SLACK || pi > model.p11() + RANGE_SLACK {
        return Err(Error::UnclassifiableBelief {
            user: model.user_id(),
            value: pi,
            lo: model.p01(),
            hi: model.p11(),
        });
    }
    let bs = model.stationary();
    let plateau = stationary_index(model);
    // Each branch is clamped to its side of the b_s value so rounding near
    // convergence never reorders a belief across b_s.
    let upper = |x: f64| (x / (1.0 - model.p11() + x)).max(plateau);
    Ok(match belief {
        BeliefState::Stationary => plateau,
        BeliefState::Observed {
            last: Observation::Off,
            age,
        } if pi < bs => {
            let q = model.passive_update(pi);
            let l = age as f64;
            let num = (pi - q) * (l + 1.0) + q;
            let den = 1.0 - model.p11() + (pi - q) * l + q;
            (num / den).min(plateau)
        }
        // Post-OFF beliefs that have numerically reached b_s land here too.
        BeliefState::Observed { .. } => upper(pi),
    })
}
