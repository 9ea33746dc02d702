//! Slot-level Monte Carlo engine.
//!
//! Each slot runs: decide from the current beliefs, serve the scheduled users
//! whose channel is ON, reveal the channel of every user in the feedback set,
//! update beliefs, apply `q <- max(0, q - a C) + A`, then advance the
//! channels. Channels start from their stationary law and beliefs start at
//! `b_s`.

mod arrivals;
pub mod rng;
mod stats;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate, CalibrationResult};
use crate::channel::{evolve_belief, BeliefState, ChannelModel, Observation};
use crate::error::{invalid, Error, Result};
use crate::policies::{
    baseline_decide, frame_policy_step, relaxed_decide, stringent_decide, FrameState, Mode, PolicyConfig,
    PolicyKind, SlotDecision,
};

pub use arrivals::ArrivalProcess;
pub use rng::{stream, StreamKind};
pub use stats::{
    estimate_ratio, stability_probe, summarize, RatioEstimate, StabilityReport, Stat, Summary, Verdict,
};

const QUEUE_BATCHES: usize = 20;

/// Warmup default: 10% of the horizon, at least 1000 slots, but never more
/// than half the horizon.
pub fn default_warmup(horizon: u64) -> u64 {
    (horizon / 10).max(1_000).min(horizon / 2)
}

/// Everything one replication needs besides its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSetup {
    pub models: Vec<ChannelModel>,
    pub policy: PolicyConfig,
    /// Fixed weights for the index policies and for weighted throughput.
    /// Queue-driven policies in saturated mode use them in place of the
    /// (infinite) queue lengths.
    pub weights: Vec<f64>,
    /// One process per user, or empty for no arrivals.
    pub arrivals: Vec<ArrivalProcess>,
    /// Infinite backlogs: every scheduled ON user delivers a packet.
    pub saturated: bool,
    pub horizon: u64,
    pub warmup: u64,
    /// Absolute slot counts at which the running mean of the weighted
    /// belief throughput is recorded.
    pub checkpoints: Vec<u64>,
    pub trace: bool,
}

impl SimulationSetup {
    pub fn new(models: Vec<ChannelModel>, policy: PolicyConfig, horizon: u64) -> Self {
        let n = models.len();
        Self {
            models,
            policy,
            weights: vec![1.0; n],
            arrivals: Vec::new(),
            saturated: true,
            horizon,
            warmup: default_warmup(horizon),
            checkpoints: Vec::new(),
            trace: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.models.len();
        if n == 0 {
            return Err(invalid("channels", "at least one channel is required"));
        }
        self.policy.validate(n)?;
        if self.weights.len() != n {
            return Err(invalid("weights", format!("{} weights for {n} channels", self.weights.len())));
        }
        if let Some(w) = self.weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(invalid("weights", format!("{w} is not a finite nonnegative number")));
        }
        if !self.arrivals.is_empty() && self.arrivals.len() != n {
            return Err(invalid("arrivals", format!("{} processes for {n} channels", self.arrivals.len())));
        }
        for a in &self.arrivals {
            a.validate()?;
        }
        if self.horizon <= self.warmup {
            return Err(invalid(
                "horizon",
                format!("horizon {} must exceed warmup {}", self.horizon, self.warmup),
            ));
        }
        if let Some(c) = self.checkpoints.iter().find(|&&c| c == 0 || c > self.horizon) {
            return Err(invalid("checkpoints", format!("{c} is outside 1..={}", self.horizon)));
        }
        Ok(())
    }

    /// Calibration shared by every replication of the fixed-weight index
    /// policies; `None` for the others.
    pub fn prepare(&self) -> Result<Option<CalibrationResult>> {
        self.validate()?;
        match self.policy.kind {
            PolicyKind::RelaxedIndex | PolicyKind::StringentIndex => Ok(Some(calibrate(
                &self.models,
                &self.weights,
                self.policy.tau,
                self.policy.k,
            )?)),
            _ => Ok(None),
        }
    }
}

/// One row of the optional per-slot trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: u64,
    pub mode: Mode,
    pub num_candidates: usize,
    pub num_scheduled: usize,
    pub served_users: Vec<usize>,
}

/// Queue snapshot at a frame boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub frame: u64,
    pub t: u64,
    pub total_queue: u64,
    pub lyapunov: f64,
}

/// Per-replication estimates; every mean is over post-warmup slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub rep_id: u64,
    pub seed: u64,
    pub horizon: u64,
    pub warmup: u64,
    /// Per-user mean of `pi_i a_i`.
    pub throughput_belief: Vec<f64>,
    /// Per-user mean of delivered packets.
    pub throughput_realized: Vec<f64>,
    pub total_throughput_belief: f64,
    pub total_throughput_realized: f64,
    /// `sum_i r_i * throughput_belief_i`.
    pub weighted_throughput: f64,
    pub mean_active_count: f64,
    pub mean_candidates: f64,
    /// Fraction of slots with at least `M` candidates.
    pub overflow_fraction: f64,
    pub broadcast_slots: u64,
    pub broadcast_fraction: f64,
    pub queue_time_averages: Vec<f64>,
    /// Mean total queue over each quarter of the post-warmup horizon.
    pub quarter_queue_means: [f64; 4],
    /// Mean total queue over equal batches of the post-warmup horizon.
    pub queue_batch_means: Vec<f64>,
    pub frames: Vec<FrameRow>,
    /// `(slots, mean weighted belief throughput over [0, slots))`.
    pub prefix_weighted_rate: Vec<(u64, f64)>,
    pub final_queues: Vec<u64>,
    pub trace: Vec<TraceRow>,
}

/// Read-only view of a completed slot, passed to observers.
pub struct SlotView<'a> {
    pub t: u64,
    pub decision: &'a SlotDecision,
    pub channel: &'a [bool],
    pub served: &'a [bool],
    pub queues_before: &'a [u64],
    pub arrivals: &'a [u64],
    pub queues_after: &'a [u64],
    pub beliefs_after: &'a [BeliefState],
}

/// Runs one replication without an observer.
pub fn run_replication(
    setup: &SimulationSetup,
    calib: Option<&CalibrationResult>,
    master_seed: u64,
    rep_id: u64,
) -> Result<ExperimentRecord> {
    run_replication_observed(setup, calib, master_seed, rep_id, &mut |_| {})
}

fn bump(sum: &mut [u64; 4], t: u64, warmup: u64, span: u64, v: u64) {
    let q = (((t - warmup) * 4) / span).min(3) as usize;
    sum[q] += v;
}

/// Runs one replication, calling `observer` after every slot.
pub fn run_replication_observed(
    setup: &SimulationSetup,
    calib: Option<&CalibrationResult>,
    master_seed: u64,
    rep_id: u64,
    observer: &mut dyn FnMut(&SlotView),
) -> Result<ExperimentRecord> {
    setup.validate()?;
    let models = &setup.models;
    let n = models.len();
    let cfg = &setup.policy;
    let owned;
    let calib = match (cfg.kind, calib) {
        (PolicyKind::RelaxedIndex | PolicyKind::StringentIndex, None) => {
            owned = setup.prepare()?;
            owned.as_ref()
        }
        (_, c) => c,
    };

    let mut ch_rng = rng::streams(master_seed, rep_id, StreamKind::Channel, n);
    let mut arr_rng = rng::streams(master_seed, rep_id, StreamKind::Arrival, n);
    let mut pol_rng: Vec<ChaCha8Rng> = rng::streams(master_seed, rep_id, StreamKind::PolicyUser, n);
    let mut shared = stream(master_seed, rep_id, StreamKind::PolicyShared, 0);

    let mut channel: Vec<bool> = models.iter().zip(ch_rng.iter_mut()).map(|(m, r)| m.stationary_state(r)).collect();
    let mut beliefs = vec![BeliefState::Stationary; n];
    let mut queues = vec![0u64; n];
    let mut queues_before = vec![0u64; n];
    let mut arrivals = vec![0u64; n];
    let mut served = vec![false; n];
    let mut frame_state = FrameState::default();
    // In saturated mode queue-driven policies see the fixed weights as
    // relative backlogs; the frame policy needs integers, so it sees ones.
    let saturated_q = vec![1u64; n];

    let span = setup.horizon - setup.warmup;
    let cap = cfg.kind.is_capped().then_some(cfg.m);
    let mut sum_belief = vec![0.0; n];
    let mut sum_real = vec![0u64; n];
    let mut sum_queue = vec![0u64; n];
    let mut quarter = [0u64; 4];
    let mut batches = vec![0u64; QUEUE_BATCHES];
    let mut active = 0u64;
    let mut cands = 0u64;
    let mut overflow = 0u64;
    let mut broadcasts = 0u64;
    let mut frames = Vec::new();
    let mut trace = Vec::new();
    let mut prefix = Vec::new();
    let mut checkpoints = setup.checkpoints.clone();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    let mut next_cp = 0usize;
    let mut cum_weighted = 0.0;

    for t in 0..setup.horizon {
        if cfg.frame_length >= 1 && t % cfg.frame_length == 0 {
            let total: u64 = queues.iter().sum();
            frames.push(FrameRow {
                frame: t / cfg.frame_length,
                t,
                total_queue: total,
                lyapunov: queues.iter().map(|&q| 0.5 * (q as f64) * (q as f64)).sum(),
            });
        }

        let decision = match cfg.kind {
            PolicyKind::RelaxedIndex => {
                relaxed_decide(calib.expect("prepared"), models, &beliefs, &setup.weights, &mut pol_rng)
            }
            PolicyKind::StringentIndex => stringent_decide(
                calib.expect("prepared"),
                models,
                &beliefs,
                &setup.weights,
                cfg.m,
                &mut pol_rng,
            ),
            PolicyKind::Frame => {
                let q = if setup.saturated { &saturated_q } else { &queues };
                let (d, s) = frame_policy_step(
                    std::mem::take(&mut frame_state),
                    t,
                    q,
                    &beliefs,
                    models,
                    cfg,
                    &mut pol_rng,
                )?;
                frame_state = s;
                d
            }
            kind => {
                let scaled: Vec<u64>;
                let q = if setup.saturated {
                    // weights -> integer priorities with enough resolution for ranking
                    scaled = setup.weights.iter().map(|&w| (w * 1e6).round() as u64).collect();
                    &scaled
                } else {
                    &queues
                };
                baseline_decide(kind, q, &beliefs, models, cfg.m, &mut shared)?
            }
        };

        if let Err(reason) = decision.check(cap) {
            return Err(Error::InvariantViolation { rep_id, slot: t, reason });
        }

        queues_before.copy_from_slice(&queues);
        let mut slot_weighted = 0.0;
        for i in 0..n {
            let a = decision.scheduled[i];
            let pi = beliefs[i].value(&models[i]);
            let deliver = a && channel[i] && (setup.saturated || queues[i] > 0);
            served[i] = deliver;
            if a {
                slot_weighted += setup.weights[i] * pi;
                if t >= setup.warmup {
                    sum_belief[i] += pi;
                }
            }
            if deliver && t >= setup.warmup {
                sum_real[i] += 1;
            }
        }
        cum_weighted += slot_weighted;
        if next_cp < checkpoints.len() && t + 1 == checkpoints[next_cp] {
            prefix.push((t + 1, cum_weighted / (t + 1) as f64));
            next_cp += 1;
        }

        let mut fb = decision.feedback_set.iter().peekable();
        for i in 0..n {
            let obs = if fb.peek() == Some(&&i) {
                fb.next();
                Some(Observation::from_state(channel[i]))
            } else {
                None
            };
            beliefs[i] = evolve_belief(&models[i], beliefs[i], obs);
        }

        if !setup.saturated {
            for i in 0..n {
                arrivals[i] = setup.arrivals.get(i).map_or(0, |a| a.sample(&mut arr_rng[i]));
                queues[i] = queues[i].saturating_sub(served[i] as u64) + arrivals[i];
            }
        }

        observer(&SlotView {
            t,
            decision: &decision,
            channel: &channel,
            served: &served,
            queues_before: &queues_before,
            arrivals: &arrivals,
            queues_after: &queues,
            beliefs_after: &beliefs,
        });

        if t >= setup.warmup {
            let total_q: u64 = queues_before.iter().sum();
            for i in 0..n {
                sum_queue[i] += queues_before[i];
            }
            bump(&mut quarter, t, setup.warmup, span, total_q);
            let b = (((t - setup.warmup) as u128 * QUEUE_BATCHES as u128) / span as u128) as usize;
            batches[b.min(QUEUE_BATCHES - 1)] += total_q;
            let nc = decision.num_candidates() as u64;
            active += decision.num_scheduled() as u64;
            cands += nc;
            if nc >= cfg.m as u64 {
                overflow += 1;
            }
            if decision.mode == Mode::Broadcast {
                broadcasts += 1;
            }
        }
        if setup.trace {
            trace.push(TraceRow {
                t,
                mode: decision.mode,
                num_candidates: decision.num_candidates(),
                num_scheduled: decision.num_scheduled(),
                served_users: (0..n).filter(|&i| served[i]).collect(),
            });
        }

        for i in 0..n {
            channel[i] = models[i].next_state(channel[i], &mut ch_rng[i]);
        }
    }
    if cfg.frame_length >= 1 && setup.horizon % cfg.frame_length == 0 {
        frames.push(FrameRow {
            frame: setup.horizon / cfg.frame_length,
            t: setup.horizon,
            total_queue: queues.iter().sum(),
            lyapunov: queues.iter().map(|&q| 0.5 * (q as f64) * (q as f64)).sum(),
        });
    }

    let s = span as f64;
    let throughput_belief: Vec<f64> = sum_belief.iter().map(|v| v / s).collect();
    let throughput_realized: Vec<f64> = sum_real.iter().map(|&v| v as f64 / s).collect();
    // slot j of the window lands in part floor(j parts / span)
    let part_len = |k: u64, parts: u64| (((k + 1) * span).div_ceil(parts) - (k * span).div_ceil(parts)).max(1) as f64;
    let quarter_len = |k: u64| part_len(k, 4);
    let batch_len = |k: u64| part_len(k, QUEUE_BATCHES as u64);
    Ok(ExperimentRecord {
        rep_id,
        seed: master_seed,
        horizon: setup.horizon,
        warmup: setup.warmup,
        total_throughput_belief: throughput_belief.iter().sum(),
        total_throughput_realized: throughput_realized.iter().sum(),
        weighted_throughput: throughput_belief.iter().zip(&setup.weights).map(|(x, w)| x * w).sum(),
        throughput_belief,
        throughput_realized,
        mean_active_count: active as f64 / s,
        mean_candidates: cands as f64 / s,
        overflow_fraction: overflow as f64 / s,
        broadcast_slots: broadcasts,
        broadcast_fraction: broadcasts as f64 / s,
        queue_time_averages: sum_queue.iter().map(|&v| v as f64 / s).collect(),
        quarter_queue_means: std::array::from_fn(|k| quarter[k] as f64 / quarter_len(k as u64)),
        queue_batch_means: (0..QUEUE_BATCHES).map(|k| batches[k] as f64 / batch_len(k as u64)).collect(),
        frames,
        prefix_weighted_rate: prefix,
        final_queues: queues,
        trace,
    })
}

/// Replication records plus their summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub records: Vec<ExperimentRecord>,
    pub summary: Summary,
}

/// Runs replications `0..replications` in parallel on the current rayon pool.
pub fn run_experiment(setup: &SimulationSetup, replications: u64, master_seed: u64) -> Result<ExperimentResult> {
    if replications < 1 {
        return Err(invalid("replications", "must be at least 1"));
    }
    let calib = setup.prepare()?;
    let records = (0..replications)
        .into_par_iter()
        .map(|r| run_replication(setup, calib.as_ref(), master_seed, r))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&records);
    Ok(ExperimentResult { records, summary })
}
