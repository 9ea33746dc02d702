use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{run_replication, ExperimentRecord, SimulationSetup};
use crate::error::{invalid, Error, Result};
use crate::policies::PolicyKind;

/// Two-sided Student-t quantile for `df` degrees of freedom.
pub(crate) fn t_quantile(p: f64, df: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df).expect("df is positive").inverse_cdf(p)
}

/// Mean, sample standard deviation and 95% t confidence half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub ci95: f64,
    pub n: usize,
}

impl Stat {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n.max(1) as f64;
        if n < 2 {
            return Self { mean, std: 0.0, ci95: 0.0, n };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std = var.sqrt();
        Self {
            mean,
            std,
            ci95: t_quantile(0.975, (n - 1) as f64) * std / (n as f64).sqrt(),
            n,
        }
    }

    pub fn se(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.std / (self.n as f64).sqrt()
        }
    }

    pub fn lo(&self) -> f64 {
        self.mean - self.ci95
    }

    pub fn hi(&self) -> f64 {
        self.mean + self.ci95
    }
}

/// Across-replication summary of the headline estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub replications: usize,
    pub weighted_throughput: Stat,
    pub total_throughput_belief: Stat,
    pub total_throughput_realized: Stat,
    pub mean_active_count: Stat,
    pub broadcast_fraction: Stat,
    pub overflow_fraction: Stat,
    pub mean_total_queue: Stat,
}

impl Summary {
    /// `(name, stat)` pairs in a fixed order, for tabular output.
    pub fn rows(&self) -> Vec<(&'static str, Stat)> {
        vec![
            ("weighted_throughput", self.weighted_throughput),
            ("total_throughput_belief", self.total_throughput_belief),
            ("total_throughput_realized", self.total_throughput_realized),
            ("mean_active_count", self.mean_active_count),
            ("broadcast_fraction", self.broadcast_fraction),
            ("overflow_fraction", self.overflow_fraction),
            ("mean_total_queue", self.mean_total_queue),
        ]
    }
}

pub fn summarize(records: &[ExperimentRecord]) -> Summary {
    let s = |f: &dyn Fn(&ExperimentRecord) -> f64| Stat::from_samples(&records.iter().map(f).collect::<Vec<_>>());
    Summary {
        replications: records.len(),
        weighted_throughput: s(&|r| r.weighted_throughput),
        total_throughput_belief: s(&|r| r.total_throughput_belief),
        total_throughput_realized: s(&|r| r.total_throughput_realized),
        mean_active_count: s(&|r| r.mean_active_count),
        broadcast_fraction: s(&|r| r.broadcast_fraction),
        overflow_fraction: s(&|r| r.overflow_fraction),
        mean_total_queue: s(&|r| r.queue_time_averages.iter().sum()),
    }
}

/// Stringent-to-relaxed weighted throughput ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioEstimate {
    /// Mean of the per-replication ratios.
    pub ratio: f64,
    /// Standard error of that mean.
    pub se: f64,
    pub ci95: f64,
    pub per_replication: Vec<f64>,
    pub v_str: Stat,
    pub v_rel: Stat,
    pub broadcast_fraction: Stat,
}

/// Runs the stringent arm (`stringent.policy`, budget `K`) against the
/// relaxed arm with budget `M` on the same channels and weights.
///
/// With common random numbers both arms use the same `(seed, rep)` streams,
/// so their channel paths coincide. Without, the relaxed arm is shifted to
/// disjoint replication ids.
pub fn estimate_ratio(
    stringent: &SimulationSetup,
    replications: u64,
    master_seed: u64,
    common_random_numbers: bool,
) -> Result<RatioEstimate> {
    if stringent.policy.kind != PolicyKind::StringentIndex {
        return Err(invalid("policy", "ratio estimation needs a STRINGENT_INDEX arm"));
    }
    if replications < 1 {
        return Err(invalid("replications", "must be at least 1"));
    }
    let mut relaxed = stringent.clone();
    relaxed.policy.kind = PolicyKind::RelaxedIndex;
    relaxed.policy.k = stringent.policy.m;
    let (cs, cr) = (stringent.prepare()?, relaxed.prepare()?);
    let offset = if common_random_numbers { 0 } else { 1u64 << 40 };
    let pairs = (0..replications)
        .into_par_iter()
        .map(|r| {
            let s = run_replication(stringent, cs.as_ref(), master_seed, r)?;
            let l = run_replication(&relaxed, cr.as_ref(), master_seed, r + offset)?;
            Ok((s.weighted_throughput, l.weighted_throughput, s.broadcast_fraction))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(&(_, v, _)) = pairs.iter().find(|p| !(p.1 > 0.0)) {
        return Err(Error::DegenerateDenominator(v));
    }
    let per: Vec<f64> = pairs.iter().map(|p| p.0 / p.1).collect();
    let st = Stat::from_samples(&per);
    let col = |k: usize| Stat::from_samples(&pairs.iter().map(|p| [p.0, p.1, p.2][k]).collect::<Vec<_>>());
    Ok(RatioEstimate {
        ratio: st.mean,
        se: st.se(),
        ci95: st.ci95,
        per_replication: per,
        v_str: col(0),
        v_rel: col(1),
        broadcast_fraction: col(2),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Stable,
    Unstable,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub verdict: Verdict,
    /// Replication-averaged mean total queue per quarter.
    pub quarter_means: [f64; 4],
    /// Least-squares slope of the averaged batch means, per batch.
    pub slope: f64,
    pub slope_ci95: (f64, f64),
    /// Per-replication mean per-frame Lyapunov drift over the last half.
    pub drift: Stat,
    pub records: Vec<ExperimentRecord>,
}

impl StabilityReport {
    /// True unless the drift is significantly positive at the 95% level.
    pub fn drift_nonpositive(&self) -> bool {
        let upper = if self.drift.n < 2 {
            self.drift.mean
        } else {
            self.drift.mean - t_quantile(0.95, (self.drift.n - 1) as f64) * self.drift.se()
        };
        upper <= 0.0
    }
}

/// Mean per-slot Lyapunov drift between the first frame boundary in the
/// second half of the run and the last one.
pub fn last_half_drift(record: &ExperimentRecord) -> Option<f64> {
    let half = record.horizon / 2;
    let first = record.frames.iter().find(|f| f.t >= half)?;
    let last = record.frames.last()?;
    (last.t > first.t).then(|| (last.lyapunov - first.lyapunov) / (last.t - first.t) as f64)
}

/// Three-valued verdict from replication-averaged batch means.
pub fn classify(quarters: &[f64; 4], batches: &[f64]) -> (Verdict, f64, (f64, f64)) {
    let (slope, ci) = slope_ci(batches);
    let verdict = if quarters[3] <= 1.1 * quarters[1] {
        Verdict::Stable
    } else if ci.0 > 0.0 {
        Verdict::Unstable
    } else {
        Verdict::Inconclusive
    };
    (verdict, slope, ci)
}

fn slope_ci(y: &[f64]) -> (f64, (f64, f64)) {
    let n = y.len() as f64;
    if y.len() < 3 {
        return (0.0, (f64::NEG_INFINITY, f64::INFINITY));
    }
    let xm = (n - 1.0) / 2.0;
    let ym = y.iter().sum::<f64>() / n;
    let sxx: f64 = (0..y.len()).map(|i| (i as f64 - xm).powi(2)).sum();
    let sxy: f64 = y.iter().enumerate().map(|(i, v)| (i as f64 - xm) * (v - ym)).sum();
    let b = sxy / sxx;
    let rss: f64 = y
        .iter()
        .enumerate()
        .map(|(i, v)| (v - ym - b * (i as f64 - xm)).powi(2))
        .sum();
    let se = (rss / (n - 2.0) / sxx).sqrt();
    let h = t_quantile(0.975, n - 2.0) * se;
    (b, (b - h, b + h))
}

/// Runs `replications` of a queueing setup and classifies the averaged
/// total-queue trajectory.
pub fn stability_probe(setup: &SimulationSetup, replications: u64, master_seed: u64) -> Result<StabilityReport> {
    if setup.saturated {
        return Err(invalid("saturated", "stability needs finite queues"));
    }
    if setup.policy.kind == PolicyKind::Frame && setup.horizon < 10 * setup.policy.frame_length {
        return Err(invalid("horizon", "must be at least 10 frames"));
    }
    let res = super::run_experiment(setup, replications, master_seed)?;
    let r = res.records.len() as f64;
    let mut quarters = [0.0; 4];
    let mut batches = vec![0.0; res.records[0].queue_batch_means.len()];
    for rec in &res.records {
        for (q, v) in quarters.iter_mut().zip(rec.quarter_queue_means) {
            *q += v / r;
        }
        for (b, v) in batches.iter_mut().zip(&rec.queue_batch_means) {
            *b += v / r;
        }
    }
    let (verdict, slope, slope_ci95) = classify(&quarters, &batches);
    let drifts: Vec<f64> = res.records.iter().filter_map(last_half_drift).collect();
    Ok(StabilityReport {
        verdict,
        quarter_means: quarters,
        slope,
        slope_ci95,
        drift: Stat::from_samples(&drifts),
        records: res.records,
    })
}
