//! Threshold and randomization calibration on the truncated belief space.
//!
//! In the truncated model a belief that has not been refreshed for `tau`
//! slots is reset to `b_s`, so each user lives on `2 tau + 1` states. A
//! threshold policy ("active above the threshold, active with probability
//! `rho` exactly at it") turns that space into a finite Markov chain whose
//! stationary distribution gives the user's long-run active fraction.
//!
//! [`calibrate`] sorts every `(user, state)` weighted index, then raises the
//! threshold through the sorted values. Each crossed value makes its states
//! passive, and the affected users' fractions are recomputed. The sweep stops
//! at the first value whose crossing pushes the total below the budget. That
//! value becomes `omega`, and `rho` is solved so the total lands on the budget.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::channel::{BeliefState, ChannelModel, Observation};
use crate::error::{invalid, Error, Result};
use crate::index::index_value;

/// The `2 tau + 1` belief states of the truncated model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncatedBeliefSpace {
    tau: u64,
}

impl TruncatedBeliefSpace {
    pub fn new(tau: u64) -> Result<Self> {
        if tau < 1 {
            return Err(invalid("tau", "must be at least 1"));
        }
        if tau > 100_000 {
            return Err(invalid("tau", format!("{tau} is unreasonably large")));
        }
        Ok(Self { tau })
    }

    pub fn tau(&self) -> u64 {
        self.tau
    }

    pub fn len(&self) -> usize {
        2 * self.tau as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// States in canonical order: `b_s`, then `b_{0,1..tau}`, then `b_{1,1..tau}`.
    pub fn states(&self) -> Vec<BeliefState> {
        let mut v = Vec::with_capacity(self.len());
        v.push(BeliefState::Stationary);
        for obs in [Observation::Off, Observation::On] {
            for age in 1..=self.tau {
                v.push(BeliefState::observed(obs, age));
            }
        }
        v
    }

    /// Position of a belief in [`states`](Self::states); ages beyond `tau`
    /// map to `b_s`.
    pub fn position(&self, belief: BeliefState) -> usize {
        match belief {
            BeliefState::Stationary => 0,
            BeliefState::Observed { age, .. } if age > self.tau => 0,
            BeliefState::Observed {
                last: Observation::Off,
                age,
            } => age as usize,
            BeliefState::Observed {
                last: Observation::On,
                age,
            } => (self.tau + age) as usize,
        }
    }

    fn passive_next(&self, pos: usize) -> usize {
        let t = self.tau as usize;
        if pos == 0 || pos == t || pos == 2 * t {
            0
        } else {
            pos + 1
        }
    }
}

/// Per-state weighted index values of one user, in canonical state order.
fn weighted_profile(model: &ChannelModel, space: &TruncatedBeliefSpace, weight: f64) -> Vec<f64> {
    space
        .states()
        .into_iter()
        .map(|b| weight * index_value(model, b).expect("truncated states are always classifiable"))
        .collect()
}

/// Long-run active fraction for explicit per-state activation probabilities.
fn stationary_activity(model: &ChannelModel, space: &TruncatedBeliefSpace, act: &[f64]) -> f64 {
    if act.iter().all(|&a| a == 0.0) {
        return 0.0;
    }
    if act.iter().all(|&a| a == 1.0) {
        return 1.0;
    }
    let n = space.len();
    let t = space.tau() as usize;
    let (off1, on1) = (1, t + 1);
    let values: Vec<f64> = space.states().iter().map(|b| b.value(model)).collect();
    // Column-oriented balance equations x = x P, written as (P^T - I) x = 0.
    let mut a = DMatrix::<f64>::zeros(n, n);
    for s in 0..n {
        let p_act = act[s];
        if p_act > 0.0 {
            a[(on1, s)] += p_act * values[s];
            a[(off1, s)] += p_act * (1.0 - values[s]);
        }
        if p_act < 1.0 {
            a[(space.passive_next(s), s)] += 1.0 - p_act;
        }
        a[(s, s)] -= 1.0;
    }
    // The chain is unichain for threshold policies, so one balance row is
    // redundant and is replaced by normalization.
    for s in 0..n {
        a[(n - 1, s)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(n);
    rhs[n - 1] = 1.0;
    let x = a
        .lu()
        .solve(&rhs)
        .expect("threshold chains have a unique stationary distribution");
    x.iter().zip(act).map(|(p, a)| p * a).sum::<f64>().clamp(0.0, 1.0)
}

fn activation(profile: &[f64], threshold: f64, rho: f64) -> Vec<f64> {
    profile
        .iter()
        .map(|&w| {
            if w > threshold {
                1.0
            } else if w == threshold {
                rho
            } else {
                0.0
            }
        })
        .collect()
}

/// Long-run fraction of slots a single user is active in the truncated model
/// under "active if weighted index > threshold, with probability `rho` if
/// equal, passive otherwise".
pub fn active_fraction(
    model: &ChannelModel,
    space: &TruncatedBeliefSpace,
    threshold: f64,
    rho: f64,
    weight: f64,
) -> f64 {
    if weight <= 0.0 {
        return 0.0;
    }
    let profile = weighted_profile(model, space, weight);
    stationary_activity(model, space, &activation(&profile, threshold, rho.clamp(0.0, 1.0)))
}

/// Bisection for `rho` in `[0, 1]` such that a nondecreasing `f(rho)` hits
/// `target`.
fn bisect_rho(f: impl Fn(f64) -> f64, target: f64) -> Result<f64> {
    const SLACK: f64 = 1e-12;
    let (lo_val, hi_val) = (f(0.0), f(1.0));
    if target < lo_val - SLACK || target > hi_val + SLACK {
        return Err(Error::InfeasibleTarget {
            target,
            lo: lo_val,
            hi: hi_val,
        });
    }
    if target >= hi_val {
        return Ok(1.0);
    }
    if target <= lo_val {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let v = f(mid);
        if (v - target).abs() <= 1e-13 {
            return Ok(mid);
        }
        if v < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Randomization at `threshold` that makes the user's active fraction equal
/// `target_fraction`.
pub fn solve_rho(
    model: &ChannelModel,
    space: &TruncatedBeliefSpace,
    threshold: f64,
    target_fraction: f64,
    weight: f64,
) -> Result<f64> {
    bisect_rho(
        |rho| active_fraction(model, space, threshold, rho, weight),
        target_fraction,
    )
}

/// Output of [`calibrate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub omega_tau: f64,
    pub rho_tau: f64,
    /// Lowest user id among the entries tied at `omega_tau`.
    pub marginal_user: Option<usize>,
    /// Every `(user, state)` whose weighted index equals `omega_tau`; these
    /// are the entries that get randomized with `rho_tau`. Sorted by user.
    pub marginal_entries: Vec<(usize, BeliefState)>,
    pub tx_time: Vec<f64>,
    pub total_time: f64,
    pub budget: usize,
    pub tau: u64,
    pub weights: Vec<f64>,
}

impl CalibrationResult {
    pub fn is_marginal(&self, user: usize, key: BeliefState) -> bool {
        let lo = self.marginal_entries.partition_point(|e| e.0 < user);
        self.marginal_entries[lo..]
            .iter()
            .take_while(|e| e.0 == user)
            .any(|e| e.1 == key)
    }
}

struct Entry {
    value: f64,
    user: usize,
    pos: usize,
}

fn validate(models: &[ChannelModel], weights: &[f64], budget: usize) -> Result<()> {
    if models.is_empty() {
        return Err(invalid("models", "at least one channel is required"));
    }
    if weights.len() != models.len() {
        return Err(invalid(
            "weights",
            format!("{} weights for {} channels", weights.len(), models.len()),
        ));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(invalid("weights", format!("{w} is not a finite nonnegative number")));
    }
    if budget == 0 {
        return Err(invalid("budget", "must be positive"));
    }
    if budget > models.len() {
        return Err(invalid(
            "budget",
            format!("{budget} exceeds the number of users {}", models.len()),
        ));
    }
    Ok(())
}

fn sorted_entries(models: &[ChannelModel], weights: &[f64], space: &TruncatedBeliefSpace) -> Vec<Entry> {
    let mut entries: Vec<Entry> = models
        .iter()
        .zip(weights)
        .enumerate()
        .filter(|(_, (_, &w))| w > 0.0)
        .flat_map(|(user, (m, &w))| {
            weighted_profile(m, space, w)
                .into_iter()
                .enumerate()
                .map(move |(pos, value)| Entry { value, user, pos })
        })
        .collect();
    entries.sort_by(|a, b| {
        a.value
            .total_cmp(&b.value)
            .then(a.user.cmp(&b.user))
            .then(a.pos.cmp(&b.pos))
    });
    entries
}

/// Splits sorted entries into runs of identical value.
fn groups(entries: &[Entry]) -> impl Iterator<Item = &[Entry]> {
    entries.chunk_by(|a, b| a.value == b.value)
}

fn group_users(group: &[Entry]) -> Vec<usize> {
    let mut users: Vec<usize> = group.iter().map(|e| e.user).collect();
    users.dedup();
    users.sort_unstable();
    users.dedup();
    users
}

/// Total active time after each threshold crossing of the sweep, as
/// `(crossed value, total)` pairs.
pub fn sweep_profile(models: &[ChannelModel], weights: &[f64], tau: u64) -> Result<Vec<(f64, f64)>> {
    validate(models, weights, 1)?;
    let space = TruncatedBeliefSpace::new(tau)?;
    let entries = sorted_entries(models, weights, &space);
    let mut tx: Vec<f64> = weights.iter().map(|&w| if w > 0.0 { 1.0 } else { 0.0 }).collect();
    let mut total: f64 = tx.iter().sum();
    let mut out = Vec::new();
    for group in groups(&entries) {
        let v = group[0].value;
        for u in group_users(group) {
            let new = active_fraction(&models[u], &space, v, 0.0, weights[u]);
            total -= tx[u] - new;
            tx[u] = new;
        }
        out.push((v, total));
    }
    Ok(out)
}

/// Computes `(omega_tau, rho_tau)` so that the expected number of active users
/// in the truncated model equals `budget`.
///
/// Users with zero weight are left out of the sweep and get `tx_time = 0`.
/// When the budget covers every positive-weight user no constraint binds and
/// the result is degenerate: `omega_tau = 0`, `rho_tau = 1`.
pub fn calibrate(models: &[ChannelModel], weights: &[f64], tau: u64, budget: usize) -> Result<CalibrationResult> {
    validate(models, weights, budget)?;
    let space = TruncatedBeliefSpace::new(tau)?;
    let n = models.len();
    let positive = weights.iter().filter(|&&w| w > 0.0).count();
    let mut tx: Vec<f64> = weights.iter().map(|&w| if w > 0.0 { 1.0 } else { 0.0 }).collect();

    if budget >= positive {
        return Ok(CalibrationResult {
            omega_tau: 0.0,
            rho_tau: 1.0,
            marginal_user: None,
            marginal_entries: Vec::new(),
            total_time: tx.iter().sum(),
            tx_time: tx,
            budget,
            tau,
            weights: weights.to_vec(),
        });
    }

    let entries = sorted_entries(models, weights, &space);
    let states = space.states();
    let budget_f = budget as f64;
    let mut total = positive as f64;
    for group in groups(&entries) {
        let v = group[0].value;
        let users = group_users(group);
        for &u in &users {
            let new = active_fraction(&models[u], &space, v, 0.0, weights[u]);
            total -= tx[u] - new;
            tx[u] = new;
        }
        if total >= budget_f {
            continue;
        }

        // Crossing `v` overshoots: randomize exactly at `v`.
        let others: f64 = (0..n).filter(|u| !users.contains(u)).map(|u| tx[u]).sum();
        let target = budget_f - others;
        let group_fraction = |rho: f64| -> f64 {
            users
                .iter()
                .map(|&u| active_fraction(&models[u], &space, v, rho, weights[u]))
                .sum()
        };
        let rho = if users.len() == 1 {
            let u = users[0];
            solve_rho(&models[u], &space, v, target, weights[u])
        } else {
            bisect_rho(group_fraction, target)
        }?;
        for &u in &users {
            tx[u] = active_fraction(&models[u], &space, v, rho, weights[u]);
        }
        return Ok(CalibrationResult {
            omega_tau: v,
            rho_tau: rho,
            marginal_user: users.first().copied(),
            marginal_entries: {
                let mut m: Vec<_> = group.iter().map(|e| (e.user, e.pos)).collect();
                m.sort_unstable();
                m.into_iter().map(|(u, p)| (u, states[p])).collect()
            },
            total_time: tx.iter().sum(),
            tx_time: tx,
            budget,
            tau,
            weights: weights.to_vec(),
        });
    }
    // Crossing every value leaves nobody active, which is below any positive
    // budget, so the loop always returns.
    unreachable!("threshold sweep ended without meeting the budget")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::DEFAULT_DELTA;
    use crate::index::stationary_index;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ch(user: usize, p01: f64, p11: f64) -> ChannelModel {
        ChannelModel::new(user, p01, p11, DEFAULT_DELTA).unwrap()
    }

    fn random_models(n: usize, seed: u64) -> Vec<ChannelModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| ch(i, rng.random_range(0.05..0.45), rng.random_range(0.55..0.95)))
            .collect()
    }

    #[test]
    fn space_has_two_tau_plus_one_states() {
        let s = TruncatedBeliefSpace::new(4).unwrap();
        let states = s.states();
        assert_eq!(states.len(), 9);
        for (i, b) in states.iter().enumerate() {
            assert_eq!(s.position(*b), i);
        }
        assert_eq!(s.position(BeliefState::observed(Observation::On, 5)), 0);
        assert!(TruncatedBeliefSpace::new(0).is_err());
    }

    #[test]
    fn fraction_extremes() {
        let m = ch(0, 0.2, 0.8);
        let s = TruncatedBeliefSpace::new(10).unwrap();
        assert_eq!(active_fraction(&m, &s, 1.5, 1.0, 1.0), 0.0);
        assert_eq!(active_fraction(&m, &s, -0.1, 0.0, 1.0), 1.0);
        assert_eq!(active_fraction(&m, &s, 0.0, 1.0, 0.0), 0.0);
    }

    /// Monte Carlo on the truncated single-user chain, independent of the
    /// linear solve.
    fn simulate_fraction(m: &ChannelModel, tau: u64, threshold: f64, rho: f64, slots: usize, seed: u64) -> f64 {
        let space = TruncatedBeliefSpace::new(tau).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = BeliefState::Stationary;
        let mut active = 0usize;
        for _ in 0..slots {
            let w = index_value(m, b).unwrap();
            let act = w > threshold || (w == threshold && rng.random::<f64>() < rho);
            b = if act {
                active += 1;
                let on = rng.random::<f64>() < b.value(m);
                BeliefState::observed(Observation::from_state(on), 1)
            } else {
                match b {
                    BeliefState::Observed { last, age } if age < tau => BeliefState::observed(last, age + 1),
                    _ => BeliefState::Stationary,
                }
            };
            debug_assert!(space.position(b) < space.len());
        }
        active as f64 / slots as f64
    }

    #[test]
    fn fraction_matches_single_user_simulation() {
        let m = ch(0, 0.2, 0.8);
        let s = TruncatedBeliefSpace::new(10).unwrap();
        let exact = active_fraction(&m, &s, 0.21, 1.0, 1.0);
        assert!(exact > 0.0 && exact < 1.0, "{exact}");
        let mc = simulate_fraction(&m, 10, 0.21, 1.0, 1_000_000, 5);
        assert!((exact - mc).abs() < 1e-3, "exact {exact} vs simulated {mc}");
    }

    #[test]
    fn randomized_fraction_matches_simulation() {
        let m = ch(0, 0.25, 0.7);
        let s = TruncatedBeliefSpace::new(6).unwrap();
        let thr = stationary_index(&m);
        let exact = active_fraction(&m, &s, thr, 0.4, 1.0);
        let mc = simulate_fraction(&m, 6, thr, 0.4, 1_000_000, 9);
        assert!((exact - mc).abs() < 2e-3, "exact {exact} vs simulated {mc}");
    }

    #[test]
    fn rho_brackets_and_midpoint() {
        let m = ch(0, 0.2, 0.8);
        let s = TruncatedBeliefSpace::new(10).unwrap();
        let thr = stationary_index(&m);
        let lo = active_fraction(&m, &s, thr, 0.0, 1.0);
        let hi = active_fraction(&m, &s, thr, 1.0, 1.0);
        assert!(lo < hi);
        assert_eq!(solve_rho(&m, &s, thr, hi, 1.0).unwrap(), 1.0);
        assert_eq!(solve_rho(&m, &s, thr, lo, 1.0).unwrap(), 0.0);
        let mid = 0.5 * (lo + hi);
        let rho = solve_rho(&m, &s, thr, mid, 1.0).unwrap();
        assert!((active_fraction(&m, &s, thr, rho, 1.0) - mid).abs() <= 1e-10);
        match solve_rho(&m, &s, thr, hi + 0.1, 1.0) {
            Err(Error::InfeasibleTarget { lo: a, hi: b, .. }) => assert_eq!((a, b), (lo, hi)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn full_budget_is_degenerate() {
        let models: Vec<_> = (0..4).map(|i| ch(i, 0.2, 0.8)).collect();
        let r = calibrate(&models, &[1.0; 4], 10, 4).unwrap();
        assert_eq!((r.omega_tau, r.rho_tau), (0.0, 1.0));
        assert_eq!(r.tx_time, vec![1.0; 4]);
        assert_eq!(r.total_time, 4.0);
        assert!(r.marginal_user.is_none());
    }

    #[test]
    fn symmetric_pair_splits_evenly() {
        let models = vec![ch(0, 0.2, 0.8), ch(1, 0.2, 0.8)];
        let r = calibrate(&models, &[1.0, 1.0], 10, 1).unwrap();
        assert!((r.tx_time[0] - 0.5).abs() < 1e-9, "{:?}", r.tx_time);
        assert!((r.tx_time[1] - 0.5).abs() < 1e-9, "{:?}", r.tx_time);
        assert!((r.total_time - 1.0).abs() < 1e-9);
        assert_eq!(r.marginal_entries.len(), 2);
    }

    #[test]
    fn heterogeneous_budget_exact() {
        let models = random_models(10, 3);
        let r = calibrate(&models, &[1.0; 10], 10, 3).unwrap();
        assert!((r.total_time - 3.0).abs() < 1e-9, "{}", r.total_time);
        assert!((0.0..=1.0).contains(&r.rho_tau));
        assert!(r.tx_time.iter().all(|t| (0.0..=1.0).contains(t)));
        assert_eq!(r.marginal_entries.len(), 1);
    }

    #[test]
    fn zero_weights_are_excluded() {
        let models = random_models(6, 4);
        let w = [1.0, 0.0, 2.0, 0.0, 1.5, 0.7];
        let r = calibrate(&models, &w, 8, 2).unwrap();
        assert_eq!(r.tx_time[1], 0.0);
        assert_eq!(r.tx_time[3], 0.0);
        assert!((r.total_time - 2.0).abs() < 1e-9);
        // budget covering all positive-weight users is degenerate
        let r = calibrate(&models, &w, 8, 4).unwrap();
        assert_eq!(r.omega_tau, 0.0);
        assert_eq!(r.tx_time, vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        // all-zero weights: nobody is ever active
        let r = calibrate(&models, &[0.0; 6], 8, 3).unwrap();
        assert_eq!(r.total_time, 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let models = random_models(3, 1);
        assert!(calibrate(&models, &[1.0; 3], 5, 0).is_err());
        assert!(calibrate(&models, &[1.0; 3], 5, 4).is_err());
        assert!(calibrate(&models, &[1.0; 2], 5, 1).is_err());
        assert!(calibrate(&models, &[1.0, -1.0, 1.0], 5, 1).is_err());
        assert!(calibrate(&models, &[1.0; 3], 0, 1).is_err());
    }

    #[test]
    fn users_below_threshold_get_nothing() {
        let models = random_models(12, 8);
        let w: Vec<f64> = (0..12).map(|i| 0.1 + i as f64).collect();
        let r = calibrate(&models, &w, 10, 3).unwrap();
        let space = TruncatedBeliefSpace::new(10).unwrap();
        for (u, m) in models.iter().enumerate() {
            let max = weighted_profile(m, &space, w[u]).into_iter().fold(0.0, f64::max);
            if max < r.omega_tau {
                assert_eq!(r.tx_time[u], 0.0);
            }
        }
    }

    #[test]
    fn short_truncation_can_break_sweep_monotonicity() {
        // Sticky channel, tau = 2: passing b_{0,2} sends the chain to b_s
        // (0.62) instead of activating at 0.17, which raises activity.
        let m = ch(0, 0.09184013625889076, 0.9440923135168037);
        let s = TruncatedBeliefSpace::new(2).unwrap();
        let w2 = index_value(&m, BeliefState::observed(Observation::Off, 2)).unwrap();
        let before = active_fraction(&m, &s, w2, 1.0, 1.0);
        let after = active_fraction(&m, &s, w2, 0.0, 1.0);
        assert!(after > before + 0.05, "{before} -> {after}");
        // With a long enough truncation the same crossing lowers activity.
        let s = TruncatedBeliefSpace::new(40).unwrap();
        assert!(active_fraction(&m, &s, w2, 0.0, 1.0) <= active_fraction(&m, &s, w2, 1.0, 1.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn budget_is_met_exactly(seed in 0u64..10_000, n in 2usize..12, tau in 1u64..15, frac in 0.05f64..0.95) {
                let models = random_models(n, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
                let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
                let budget = ((n as f64 * frac) as usize).clamp(1, n);
                let r = calibrate(&models, &w, tau, budget).unwrap();
                prop_assert!((r.total_time - budget as f64).abs() < 1e-9, "{} vs {}", r.total_time, budget);
                prop_assert!((0.0..=1.0).contains(&r.rho_tau));
            }

            #[test]
            fn sweep_total_nonincreasing(seed in 0u64..10_000, n in 1usize..8, tau in 40u64..60) {
                let models = random_models(n, seed);
                let prof = sweep_profile(&models, &vec![1.0; n], tau).unwrap();
                // one point per group of bit-identical values
                prop_assert!(prof.len() <= n * (2 * tau as usize + 1));
                for w in prof.windows(2) {
                    prop_assert!(w[1].0 > w[0].0);
                    prop_assert!(w[1].1 <= w[0].1 + 1e-12);
                }
                prop_assert!(prof.last().unwrap().1.abs() < 1e-12);
            }

            #[test]
            fn fraction_nonincreasing_in_threshold(p01 in 0.06f64..0.45, p11 in 0.55f64..0.94, tau in 40u64..60) {
                let m = ch(0, p01, p11);
                let s = TruncatedBeliefSpace::new(tau).unwrap();
                let mut prev = 1.0;
                for k in 0..=50 {
                    let f = active_fraction(&m, &s, k as f64 / 50.0, 1.0, 1.0);
                    prop_assert!(f <= prev + 1e-12);
                    prev = f;
                }
            }
        }
    }
}
