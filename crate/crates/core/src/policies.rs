//! Per-slot decision rules.
//!
//! The relaxed rule activates every user whose weighted index clears the
//! calibrated threshold. The stringent rule treats those users as
//! candidates: all are served when there are at most `M` of them, and
//! otherwise a dummy packet is broadcast to all of them, which yields no
//! throughput but refreshes their beliefs. The frame rule reruns the
//! calibration every `T` slots with the sampled queue lengths as weights and
//! behaves like the stringent rule in between.
//!
//! Randomization at the threshold draws from a per-user stream, and only
//! when that user sits on a marginal key. Two arms that see the same
//! beliefs therefore consume the same draws and select the same candidates.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::default_g;
use crate::calibration::{calibrate, CalibrationResult};
use crate::channel::{BeliefState, ChannelModel};
use crate::error::{invalid, Result};
use crate::index::index_value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Transmit,
    Broadcast,
    Idle,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Transmit => "TRANSMIT",
            Mode::Broadcast => "BROADCAST",
            Mode::Idle => "IDLE",
        }
    }
}

/// What the scheduler does in one slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotDecision {
    pub candidates: Vec<bool>,
    pub mode: Mode,
    pub scheduled: Vec<bool>,
    /// Users whose channel state is revealed this slot, ascending.
    pub feedback_set: Vec<usize>,
}

impl SlotDecision {
    pub fn idle(n: usize) -> Self {
        Self {
            candidates: vec![false; n],
            mode: Mode::Idle,
            scheduled: vec![false; n],
            feedback_set: Vec::new(),
        }
    }

    fn transmit(scheduled: Vec<bool>) -> Self {
        Self {
            candidates: scheduled.clone(),
            mode: Mode::Transmit,
            feedback_set: users(&scheduled),
            scheduled,
        }
    }

    pub fn num_candidates(&self) -> usize {
        self.candidates.iter().filter(|&&c| c).count()
    }

    pub fn num_scheduled(&self) -> usize {
        self.scheduled.iter().filter(|&&c| c).count()
    }

    /// Checks the structural invariants of the mode against a per-slot cap.
    pub fn check(&self, cap: Option<usize>) -> std::result::Result<(), String> {
        let ns = self.num_scheduled();
        match self.mode {
            Mode::Transmit => {
                if self.scheduled != self.candidates {
                    return Err("TRANSMIT slot schedules a set other than its candidates".into());
                }
                if let Some(m) = cap {
                    if ns > m {
                        return Err(format!("{ns} users scheduled with cap {m}"));
                    }
                }
                if self.feedback_set != users(&self.scheduled) {
                    return Err("TRANSMIT feedback set differs from scheduled users".into());
                }
            }
            Mode::Broadcast => {
                if ns != 0 {
                    return Err(format!("BROADCAST slot schedules {ns} users"));
                }
                if let Some(m) = cap {
                    if self.num_candidates() <= m {
                        return Err("BROADCAST with no more than M candidates".into());
                    }
                }
                if self.feedback_set != users(&self.candidates) {
                    return Err("BROADCAST feedback set differs from candidates".into());
                }
            }
            Mode::Idle => {
                if self.num_candidates() != 0 || ns != 0 || !self.feedback_set.is_empty() {
                    return Err("IDLE slot with candidates, schedule or feedback".into());
                }
            }
        }
        Ok(())
    }
}

fn users(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PolicyKind {
    RelaxedIndex,
    StringentIndex,
    Frame,
    MyopicMaxweight,
    QueueIndexHeuristic,
    Random,
}

impl PolicyKind {
    /// Whether the policy enforces the per-slot cap `M`.
    pub fn is_capped(self) -> bool {
        !matches!(self, PolicyKind::RelaxedIndex)
    }

    pub fn uses_queues(self) -> bool {
        matches!(
            self,
            PolicyKind::Frame | PolicyKind::MyopicMaxweight | PolicyKind::QueueIndexHeuristic
        )
    }
}

pub const DEFAULT_G_EXPONENT: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub tau: u64,
    pub m: usize,
    /// Calibration budget. For the relaxed policy this is its average
    /// activation target.
    pub k: usize,
    pub frame_length: u64,
    pub g_exponent: f64,
}

impl PolicyConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.tau < 1 {
            return Err(invalid("tau", "must be at least 1"));
        }
        if self.m < 1 || self.m > n {
            return Err(invalid("M", format!("{} is outside 1..={n}", self.m)));
        }
        if self.k < 1 || self.k > n {
            return Err(invalid("K", format!("{} is outside 1..={n}", self.k)));
        }
        if matches!(self.kind, PolicyKind::StringentIndex | PolicyKind::Frame) && self.k > self.m {
            return Err(invalid("K", format!("{} exceeds M = {}", self.k, self.m)));
        }
        if self.kind == PolicyKind::Frame && self.frame_length < 1 {
            return Err(invalid("frame_length", "must be at least 1"));
        }
        Ok(())
    }
}

/// `K = M - ceil(M^exponent)`, raised to `ceil(M/2) + 1` (capped at `M`)
/// when the gap would leave the Chernoff regime.
pub fn default_k(m: usize, exponent: f64) -> Result<usize> {
    let g = default_g(m, exponent)?;
    let floor = (m.div_ceil(2) + 1).min(m);
    let k = m.saturating_sub(g);
    if k < floor {
        log::warn!("K = M - g(M) = {k} is below ceil(M/2)+1 for M = {m}; using K = {floor}");
        return Ok(floor);
    }
    Ok(k)
}

/// Key of `belief` in the truncated space the calibration was built on:
/// beliefs older than `tau` share the `Stationary` key.
fn truncated_key(belief: BeliefState, tau: u64) -> BeliefState {
    match belief {
        BeliefState::Observed { age, .. } if age > tau => BeliefState::Stationary,
        b => b,
    }
}

/// Candidate selection shared by the relaxed and stringent rules. Index
/// values come from the actual belief; the randomization branch matches
/// on the truncated key.
fn select<R: Rng>(
    calib: &CalibrationResult,
    models: &[ChannelModel],
    beliefs: &[BeliefState],
    weights: &[f64],
    rngs: &mut [R],
) -> Vec<bool> {
    (0..models.len())
        .map(|i| {
            if weights[i] <= 0.0 {
                return false;
            }
            if calib.is_marginal(i, truncated_key(beliefs[i], calib.tau)) {
                return calib.rho_tau >= 1.0 || rngs[i].random::<f64>() < calib.rho_tau;
            }
            let w = weights[i] * index_value(&models[i], beliefs[i]).expect("simulated beliefs stay in range");
            w > calib.omega_tau
        })
        .collect()
}

/// Relaxed rule: every selected user is served, with no per-slot cap.
pub fn relaxed_decide<R: Rng>(
    calib: &CalibrationResult,
    models: &[ChannelModel],
    beliefs: &[BeliefState],
    weights: &[f64],
    rngs: &mut [R],
) -> SlotDecision {
    SlotDecision::transmit(select(calib, models, beliefs, weights, rngs))
}

/// Stringent rule: serve the candidates if there are at most `m`, otherwise
/// broadcast to all of them.
pub fn stringent_decide<R: Rng>(
    calib: &CalibrationResult,
    models: &[ChannelModel],
    beliefs: &[BeliefState],
    weights: &[f64],
    m: usize,
    rngs: &mut [R],
) -> SlotDecision {
    let candidates = select(calib, models, beliefs, weights, rngs);
    let count = candidates.iter().filter(|&&c| c).count();
    if count == 0 {
        SlotDecision::idle(candidates.len())
    } else if count <= m {
        SlotDecision::transmit(candidates)
    } else {
        SlotDecision {
            feedback_set: users(&candidates),
            scheduled: vec![false; candidates.len()],
            mode: Mode::Broadcast,
            candidates,
        }
    }
}

/// Per-replication state of the frame rule.
#[derive(Debug, Clone, Default)]
pub struct FrameState {
    pub frame: u64,
    /// `None` before the first boundary and during idle frames.
    pub calib: Option<CalibrationResult>,
    pub weights: Vec<f64>,
}

/// One slot of the frame rule. Recalibrates at `t mod T == 0` from the
/// queue lengths; a frame that starts with all queues empty idles.
#[allow(clippy::too_many_arguments)]
pub fn frame_policy_step<R: Rng>(
    mut state: FrameState,
    t: u64,
    queues: &[u64],
    beliefs: &[BeliefState],
    models: &[ChannelModel],
    config: &PolicyConfig,
    rngs: &mut [R],
) -> Result<(SlotDecision, FrameState)> {
    if t % config.frame_length == 0 {
        state.frame = t / config.frame_length;
        let weights: Vec<f64> = queues.iter().map(|&q| q as f64).collect();
        if state.calib.is_some() && weights == state.weights {
            // calibration is a pure function of the weights
            let decision = stringent_decide(state.calib.as_ref().expect("checked"), models, beliefs, &weights, config.m, rngs);
            return Ok((decision, state));
        }
        state.weights = weights;
        state.calib = if state.weights.iter().all(|&w| w == 0.0) {
            None
        } else {
            Some(calibrate(models, &state.weights, config.tau, config.k)?)
        };
    }
    let decision = match &state.calib {
        None => SlotDecision::idle(models.len()),
        Some(c) => stringent_decide(c, models, beliefs, &state.weights, config.m, rngs),
    };
    Ok((decision, state))
}

/// Myopic and random baselines: schedule up to `m` users with the largest
/// positive score, ties going to the lower user id.
pub fn baseline_decide<R: Rng>(
    kind: PolicyKind,
    queues: &[u64],
    beliefs: &[BeliefState],
    models: &[ChannelModel],
    m: usize,
    rng: &mut R,
) -> Result<SlotDecision> {
    let n = models.len();
    let mut scheduled = vec![false; n];
    match kind {
        PolicyKind::Random => {
            for i in sample(rng, n, m.min(n)) {
                scheduled[i] = true;
            }
        }
        PolicyKind::MyopicMaxweight | PolicyKind::QueueIndexHeuristic => {
            let mut scored: Vec<(f64, usize)> = (0..n)
                .map(|i| {
                    let s = match kind {
                        PolicyKind::MyopicMaxweight => beliefs[i].value(&models[i]),
                        _ => index_value(&models[i], beliefs[i]).expect("simulated beliefs stay in range"),
                    };
                    (queues[i] as f64 * s, i)
                })
                .filter(|&(s, _)| s > 0.0)
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for &(_, i) in scored.iter().take(m) {
                scheduled[i] = true;
            }
        }
        other => return Err(invalid("kind", format!("{other:?} is not a baseline policy"))),
    }
    Ok(SlotDecision::transmit(scheduled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{Observation, DEFAULT_DELTA};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ch(i: usize, p01: f64, p11: f64) -> ChannelModel {
        ChannelModel::new(i, p01, p11, DEFAULT_DELTA).unwrap()
    }

    fn rngs(n: usize) -> Vec<ChaCha8Rng> {
        (0..n as u64).map(ChaCha8Rng::seed_from_u64).collect()
    }

    fn homogeneous(n: usize) -> Vec<ChannelModel> {
        (0..n).map(|i| ch(i, 0.2, 0.8)).collect()
    }

    #[test]
    fn old_off_beliefs_share_the_stationary_key() {
        // homogeneous users put the marginal entry on `s`; OFF beliefs
        // never reach b_s, so without the key mapping they would starve
        let models = homogeneous(50);
        let w = vec![1.0; 50];
        let c = calibrate(&models, &w, 10, 10).unwrap();
        assert!(c.is_marginal(0, BeliefState::Stationary));
        let mut hits = [0usize; 2];
        let mut r = rngs(50);
        for _ in 0..2000 {
            for (j, age) in [10u64, 11].into_iter().enumerate() {
                let b = vec![BeliefState::observed(Observation::Off, age); 50];
                hits[j] += relaxed_decide(&c, &models, &b, &w, &mut r).num_scheduled();
            }
        }
        assert_eq!(hits[0], 0);
        let rate = hits[1] as f64 / (2000.0 * 50.0);
        assert!((rate - c.rho_tau).abs() < 0.01, "{rate} vs {}", c.rho_tau);
    }

    #[test]
    fn below_threshold_everyone_is_passive() {
        let models = homogeneous(4);
        let w = vec![1.0; 4];
        let mut c = calibrate(&models, &w, 10, 1).unwrap();
        c.omega_tau = 2.0;
        c.marginal_entries.clear();
        let b = vec![BeliefState::Stationary; 4];
        let d = relaxed_decide(&c, &models, &b, &w, &mut rngs(4));
        assert_eq!(d.num_scheduled(), 0);
        assert_eq!(d.mode, Mode::Transmit);
        d.check(None).unwrap();
    }

    #[test]
    fn rho_one_is_deterministic() {
        let models: Vec<_> = (0..6).map(|i| ch(i, 0.1 + 0.05 * i as f64, 0.8)).collect();
        let w = vec![1.0; 6];
        let mut c = calibrate(&models, &w, 10, 2).unwrap();
        c.rho_tau = 1.0;
        let b: Vec<_> = (0..6).map(|i| BeliefState::observed(Observation::Off, 1 + i as u64)).collect();
        let first = relaxed_decide(&c, &models, &b, &w, &mut rngs(6));
        for s in 0..20u64 {
            let mut r: Vec<ChaCha8Rng> = (0..6).map(|i| ChaCha8Rng::seed_from_u64(s * 10 + i)).collect();
            assert_eq!(relaxed_decide(&c, &models, &b, &w, &mut r), first);
        }
    }

    #[test]
    fn marginal_key_randomizes_at_rho() {
        // two identical users, budget 1: both b_s entries tie at omega and rho = 1/2
        let models = homogeneous(2);
        let w = vec![1.0; 2];
        let c = calibrate(&models, &w, 10, 1).unwrap();
        let b = vec![BeliefState::Stationary; 2];
        let key_hit = c.is_marginal(0, BeliefState::Stationary);
        let mut r = rngs(2);
        let trials = 20_000;
        let hits: usize = (0..trials)
            .map(|_| relaxed_decide(&c, &models, &b, &w, &mut r).scheduled[0] as usize)
            .sum();
        let p = hits as f64 / trials as f64;
        if key_hit {
            assert!((p - c.rho_tau).abs() < 0.02, "{p} vs {}", c.rho_tau);
        } else {
            assert!(p == 0.0 || p == 1.0);
        }
    }

    fn forced(models: &[ChannelModel], omega: f64) -> CalibrationResult {
        let w = vec![1.0; models.len()];
        let mut c = calibrate(models, &w, 10, 1).unwrap();
        c.omega_tau = omega;
        c.rho_tau = 1.0;
        c.marginal_entries.clear();
        c
    }

    #[test]
    fn stringent_boundary_is_inclusive() {
        let models = homogeneous(5);
        let w = vec![1.0; 5];
        let c = forced(&models, 0.5);
        let mut b = vec![BeliefState::observed(Observation::Off, 1); 5];
        for bi in b.iter_mut().take(3) {
            *bi = BeliefState::observed(Observation::On, 1);
        }
        let d = stringent_decide(&c, &models, &b, &w, 3, &mut rngs(5));
        assert_eq!(d.mode, Mode::Transmit);
        assert_eq!(d.num_scheduled(), 3);
        d.check(Some(3)).unwrap();

        b[3] = BeliefState::observed(Observation::On, 1);
        let d = stringent_decide(&c, &models, &b, &w, 3, &mut rngs(5));
        assert_eq!(d.mode, Mode::Broadcast);
        assert_eq!(d.num_scheduled(), 0);
        assert_eq!(d.feedback_set, vec![0, 1, 2, 3]);
        d.check(Some(3)).unwrap();

        let d = stringent_decide(&c, &models, &vec![BeliefState::observed(Observation::Off, 1); 5], &w, 3, &mut rngs(5));
        assert_eq!(d.mode, Mode::Idle);
        d.check(Some(3)).unwrap();
    }

    #[test]
    fn stringent_candidates_match_relaxed_schedule() {
        let models: Vec<_> = (0..30).map(|i| ch(i, 0.1 + 0.01 * i as f64, 0.7 + 0.005 * i as f64)).collect();
        let w: Vec<f64> = (0..30).map(|i| 1.0 + (i % 3) as f64).collect();
        let c = calibrate(&models, &w, 10, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let b: Vec<BeliefState> = (0..30)
                .map(|_| match rng.random_range(0..3) {
                    0 => BeliefState::Stationary,
                    1 => BeliefState::observed(Observation::Off, rng.random_range(1..15)),
                    _ => BeliefState::observed(Observation::On, rng.random_range(1..15)),
                })
                .collect();
            let s: u64 = rng.random();
            let mut r1: Vec<ChaCha8Rng> = (0..30).map(|i| ChaCha8Rng::seed_from_u64(s ^ i)).collect();
            let mut r2 = r1.clone();
            let rel = relaxed_decide(&c, &models, &b, &w, &mut r1);
            let st = stringent_decide(&c, &models, &b, &w, 10, &mut r2);
            assert_eq!(rel.scheduled, st.candidates);
            st.check(Some(10)).unwrap();
        }
    }

    #[test]
    fn zero_weight_users_never_selected() {
        let models = homogeneous(3);
        let w = vec![0.0, 1.0, 1.0];
        let c = calibrate(&models, &w, 10, 2).unwrap();
        let b = vec![BeliefState::observed(Observation::On, 1); 3];
        let d = relaxed_decide(&c, &models, &b, &w, &mut rngs(3));
        assert!(!d.scheduled[0]);
        assert!(d.scheduled[1] && d.scheduled[2]);
    }

    fn frame_cfg(t: u64) -> PolicyConfig {
        PolicyConfig {
            kind: PolicyKind::Frame,
            tau: 10,
            m: 2,
            k: 1,
            frame_length: t,
            g_exponent: DEFAULT_G_EXPONENT,
        }
    }

    #[test]
    fn frame_recalibrates_on_boundaries() {
        let models = homogeneous(4);
        let b = vec![BeliefState::Stationary; 4];
        let cfg = frame_cfg(3);
        let mut st = FrameState::default();
        let mut r = rngs(4);
        let mut q = vec![5u64, 0, 2, 0];
        for t in 0..7u64 {
            let (d, s) = frame_policy_step(st, t, &q, &b, &models, &cfg, &mut r).unwrap();
            st = s;
            assert_eq!(st.frame, t / 3);
            d.check(Some(2)).unwrap();
            for u in 0..4 {
                if st.weights[u] == 0.0 {
                    assert!(!d.candidates[u]);
                }
            }
            assert!(!d.candidates[3]);
            // weights stay frozen within a frame
            assert_eq!(st.weights[1], (3 * (t / 3)) as f64);
            q[1] += 1;
        }
    }

    #[test]
    fn frame_with_empty_queues_idles() {
        let models = homogeneous(3);
        let b = vec![BeliefState::observed(Observation::On, 1); 3];
        let cfg = frame_cfg(1);
        let mut r = rngs(3);
        let (d, s) = frame_policy_step(FrameState::default(), 0, &[0, 0, 0], &b, &models, &cfg, &mut r).unwrap();
        assert_eq!(d.mode, Mode::Idle);
        assert!(s.calib.is_none());
        // T = 1 recalibrates immediately on the next slot
        let (d, s) = frame_policy_step(s, 1, &[0, 4, 0], &b, &models, &cfg, &mut r).unwrap();
        assert!(s.calib.is_some());
        assert_eq!(d.scheduled, vec![false, true, false]);
    }

    #[test]
    fn baselines() {
        let models: Vec<_> = (0..4).map(|i| ch(i, 0.2, 0.8)).collect();
        let b = vec![BeliefState::observed(Observation::On, 1); 4];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = baseline_decide(PolicyKind::MyopicMaxweight, &[0, 0, 0, 0], &b, &models, 2, &mut rng).unwrap();
        assert_eq!(d.num_scheduled(), 0);
        assert_eq!(d.mode, Mode::Transmit);
        let d = baseline_decide(PolicyKind::MyopicMaxweight, &[1, 4, 3, 2], &b, &models, 2, &mut rng).unwrap();
        assert_eq!(d.scheduled, vec![false, true, true, false]);
        // tie between users 1 and 2: lower id wins
        let d = baseline_decide(PolicyKind::QueueIndexHeuristic, &[1, 3, 3, 2], &b, &models, 1, &mut rng).unwrap();
        assert_eq!(d.scheduled, vec![false, true, false, false]);
        let d = baseline_decide(PolicyKind::Random, &[0; 4], &b, &models, 3, &mut rng).unwrap();
        assert_eq!(d.num_scheduled(), 3);
        assert!(baseline_decide(PolicyKind::Frame, &[0; 4], &b, &models, 3, &mut rng).is_err());
    }

    #[test]
    fn queue_index_heuristic_uses_index_not_belief() {
        // user 0: b_s of a sticky channel, user 1: b_{0,1} of a fast one.
        let models = vec![ch(0, 0.06, 0.94), ch(1, 0.4, 0.6)];
        let b = vec![BeliefState::Stationary, BeliefState::observed(Observation::On, 1)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = [10, 10];
        let mw = baseline_decide(PolicyKind::MyopicMaxweight, &q, &b, &models, 1, &mut rng).unwrap();
        let qi = baseline_decide(PolicyKind::QueueIndexHeuristic, &q, &b, &models, 1, &mut rng).unwrap();
        // beliefs 0.5 vs 0.6; indices 0.5/0.56 = 0.893 vs 0.6/1.0 = 0.6
        assert_eq!(mw.scheduled, vec![false, true]);
        assert_eq!(qi.scheduled, vec![true, false]);
    }

    #[test]
    fn default_k_examples() {
        assert_eq!(default_k(10, 0.7).unwrap(), 6);
        assert_eq!(default_k(20, 0.7).unwrap(), 11);
        assert_eq!(default_k(40, 0.7).unwrap(), 26);
        assert_eq!(default_k(80, 0.7).unwrap(), 58);
        // 5 - ceil(5^0.7) = 5 - 4 = 1 is floored to ceil(5/2)+1 = 4
        assert_eq!(default_k(5, 0.7).unwrap(), 4);
        assert_eq!(default_k(1, 0.7).unwrap(), 1);
        assert!(default_k(10, 1.0).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = frame_cfg(5);
        assert!(c.validate(4).is_ok());
        c.k = 3;
        assert!(c.validate(4).is_err());
        c.k = 1;
        c.frame_length = 0;
        assert!(c.validate(4).is_err());
        c.frame_length = 5;
        c.m = 5;
        assert!(c.validate(4).is_err());
        c.kind = PolicyKind::RelaxedIndex;
        c.m = 2;
        c.k = 3;
        assert!(c.validate(4).is_ok());
    }
}
