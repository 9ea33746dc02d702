//! Closed-form analytic quantities: truncation error `f_i(tau)`, the
//! truncation threshold `tau0`, the stringent/relaxed ratio floor `mu(M, K)`,
//! the gap function `g(M)`, and the Chernoff tail bound.

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelModel, Observation};
use crate::error::{invalid, Error, Result};

/// Logarithm used inside `tau0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    #[default]
    Natural,
    Two,
}

impl LogBase {
    fn ln(self, x: f64) -> f64 {
        match self {
            LogBase::Natural => x.ln(),
            LogBase::Two => x.log2(),
        }
    }
}

/// `(1 + b_{0,tau} - p11) / (b_{0,tau} + (1 - p11) tau)`.
pub fn f_tau(model: &ChannelModel, tau: u64) -> Result<f64> {
    if tau < 1 {
        return Err(invalid("tau", "must be at least 1"));
    }
    let b = model.belief_after(Observation::Off, tau);
    let q = 1.0 - model.p11();
    Ok((1.0 + b - model.p11()) / (b + q * tau as f64))
}

/// `sum_i f_i(tau)`.
pub fn f_total(models: &[ChannelModel], tau: u64) -> Result<f64> {
    models.iter().map(|m| f_tau(m, tau)).sum()
}

/// Upper bound on the relaxed-policy throughput loss from truncation:
/// `f(tau) * sum_i r_i`.
pub fn truncation_loss_bound(models: &[ChannelModel], weights: &[f64], tau: u64) -> Result<f64> {
    if weights.len() != models.len() {
        return Err(invalid("weights", "length must match the number of channels"));
    }
    Ok(f_total(models, tau)? * weights.iter().sum::<f64>())
}

/// `ceil(4 max{1/(-log 2delta), 1/log^2(2delta)})`.
pub fn tau0(delta: f64) -> Result<u64> {
    tau0_with_base(delta, LogBase::Natural)
}

pub fn tau0_with_base(delta: f64, base: LogBase) -> Result<u64> {
    if !(delta > 0.0 && delta < 0.5) {
        return Err(Error::Domain(format!("tau0 needs 0 < delta < 1/2, got {delta}")));
    }
    let l = base.ln(2.0 * delta);
    let v = 4.0 * (1.0 / -l).max(1.0 / (l * l));
    if !v.is_finite() || v > u64::MAX as f64 {
        return Err(Error::Domain(format!("tau0 diverges at delta = {delta}")));
    }
    Ok(v.ceil() as u64)
}

/// `[1 - exp(-(M-K)^2 / 3K)] * [1 - (M-K) / (delta (K-1))]^+`.
pub fn mu(m: usize, k: usize, delta: f64) -> Result<f64> {
    if k <= 1 {
        return Err(Error::Domain(format!("mu needs K > 1, got K = {k}")));
    }
    if k > m {
        return Err(Error::Domain(format!("mu needs K <= M, got K = {k}, M = {m}")));
    }
    if !(delta > 0.0 && delta < 0.5) {
        return Err(Error::Domain(format!("mu needs 0 < delta < 1/2, got {delta}")));
    }
    let gap = (m - k) as f64;
    let k = k as f64;
    let tail = 1.0 - (-gap * gap / (3.0 * k)).exp();
    let frac = (1.0 - gap / (delta * (k - 1.0))).max(0.0);
    Ok(tail * frac)
}

/// `l(M, K) = 1 - mu(M, K)`.
pub fn loss(m: usize, k: usize, delta: f64) -> Result<f64> {
    Ok(1.0 - mu(m, k, delta)?)
}

/// Chernoff bound on `Pr(sum a_i >= M)` given `E[sum a_i] <= K`, with the
/// optimizing exponent and the pre-relaxation value at that exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chernoff {
    pub bound: f64,
    pub t_star: f64,
    pub eta_t_star: f64,
}

pub fn chernoff(m: usize, k: usize) -> Result<Chernoff> {
    if k == 0 || 2 * k <= m {
        return Err(Error::Domain(format!(
            "Chernoff bound needs K > M/2, got M = {m}, K = {k}"
        )));
    }
    if k > m {
        return Err(Error::Domain(format!("Chernoff bound needs K <= M, got K = {k}, M = {m}")));
    }
    let (mf, kf) = (m as f64, k as f64);
    let gap = mf - kf;
    let x = gap / kf;
    Ok(Chernoff {
        bound: (-gap * gap / (3.0 * kf)).exp(),
        t_star: (mf / kf).ln(),
        eta_t_star: (gap - kf * (1.0 + x) * x.ln_1p()).exp(),
    })
}

/// `exp(-(M-K)^2 / 3K)`.
pub fn chernoff_bound(m: usize, k: usize) -> Result<f64> {
    Ok(chernoff(m, k)?.bound)
}

/// `ceil(M^exponent)` for an exponent strictly inside `(0.5, 1)`.
pub fn default_g(m: usize, exponent: f64) -> Result<usize> {
    if !(exponent > 0.5 && exponent < 1.0) {
        return Err(invalid("g_exponent", format!("{exponent} is outside the open interval (0.5, 1)")));
    }
    Ok((m as f64).powf(exponent).ceil() as usize)
}

/// `x` and the gap of `(1+x) ln(1+x) >= x + x^2/3` on an even grid of `[0, 1)`.
pub fn chernoff_inequality_grid(points: usize) -> Vec<(f64, f64)> {
    (0..points)
        .map(|i| {
            let x = i as f64 / points as f64;
            (x, (1.0 + x) * x.ln_1p() - (x + x * x / 3.0))
        })
        .collect()
}

/// Every analytic quantity for one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub f_per_user: Vec<f64>,
    pub f_total: f64,
    pub tau0: u64,
    pub mu: Option<f64>,
    pub l: Option<f64>,
    pub chernoff: Option<f64>,
    pub t_star: Option<f64>,
    pub eta_t_star: Option<f64>,
    pub tau: u64,
    pub m: usize,
    pub k: usize,
    pub delta: f64,
    pub log_base: LogBase,
}

/// Builds a report. `mu` and the Chernoff fields are `None` outside their
/// regimes (`K <= 1`, `K <= M/2`) instead of failing the whole report.
pub fn bound_report(
    models: &[ChannelModel],
    tau: u64,
    m: usize,
    k: usize,
    delta: f64,
    log_base: LogBase,
) -> Result<BoundReport> {
    if k > m {
        return Err(invalid("K", format!("{k} exceeds M = {m}")));
    }
    let f_per_user = models.iter().map(|md| f_tau(md, tau)).collect::<Result<Vec<_>>>()?;
    let mu = mu(m, k, delta).ok();
    let ch = chernoff(m, k).ok();
    Ok(BoundReport {
        f_total: f_per_user.iter().sum(),
        f_per_user,
        tau0: tau0_with_base(delta, log_base)?,
        mu,
        l: mu.map(|v| 1.0 - v),
        chernoff: ch.map(|c| c.bound),
        t_star: ch.map(|c| c.t_star),
        eta_t_star: ch.map(|c| c.eta_t_star),
        tau,
        m,
        k,
        delta,
        log_base,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::DEFAULT_DELTA;
    use approx::assert_abs_diff_eq;

    fn ch(p01: f64, p11: f64) -> ChannelModel {
        ChannelModel::new(0, p01, p11, DEFAULT_DELTA).unwrap()
    }

    #[test]
    fn f_tau_reference() {
        let m = ch(0.2, 0.8);
        // b_{0,10} = 0.5 (1 - 0.6^10)
        let b = 0.5 * (1.0 - 0.6f64.powi(10));
        let expect = (1.0 + b - 0.8) / (b + 0.2 * 10.0);
        assert_abs_diff_eq!(f_tau(&m, 10).unwrap(), expect, epsilon = 1e-15);
        assert_abs_diff_eq!(f_tau(&m, 10).unwrap(), 0.279129, epsilon = 1e-6);
        let (a, b, c) = (f_tau(&m, 10).unwrap(), f_tau(&m, 100).unwrap(), f_tau(&m, 1000).unwrap());
        assert!(c < b && b < a);
        assert!(f_tau(&m, 0).is_err());
    }

    #[test]
    fn tau0_examples() {
        assert_eq!(tau0(0.2).unwrap(), 5);
        assert_eq!(tau0(0.05).unwrap(), 2);
        assert!(tau0(0.5).is_err());
        assert!(tau0(0.0).is_err());
        assert!(tau0(0.4999).unwrap() > 1000);
        // base 2: log2(0.4) = -1.3219; max{0.7565, 0.5723} * 4 = 3.026
        assert_eq!(tau0_with_base(0.2, LogBase::Two).unwrap(), 4);
    }

    #[test]
    fn mu_examples() {
        assert_eq!(mu(10, 10, 0.2).unwrap(), 0.0);
        let a = (1.0 - (-100.0f64 / 270.0).exp()) * (1.0 - 10.0 / 17.8);
        assert_abs_diff_eq!(mu(100, 90, 0.2).unwrap(), a, epsilon = 1e-15);
        assert_abs_diff_eq!(mu(100, 90, 0.2).unwrap(), 0.135633, epsilon = 1e-6);
        assert_abs_diff_eq!(mu(20, 18, 0.2).unwrap(), 0.029399, epsilon = 1e-6);
        assert!(mu(10, 1, 0.2).is_err());
        assert!(mu(10, 11, 0.2).is_err());
        assert_abs_diff_eq!(loss(20, 18, 0.2).unwrap(), 1.0 - 0.029399, epsilon = 1e-6);
    }

    #[test]
    fn chernoff_examples() {
        assert_eq!(chernoff_bound(10, 10).unwrap(), 1.0);
        assert_abs_diff_eq!(chernoff_bound(100, 90).unwrap(), 0.690479, epsilon = 1e-6);
        assert_abs_diff_eq!(chernoff_bound(10, 8).unwrap(), (-4.0f64 / 24.0).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(chernoff_bound(10, 8).unwrap(), 0.846482, epsilon = 1e-6);
        assert!(chernoff_bound(10, 5).is_err());
        let c = chernoff(10, 8).unwrap();
        assert_abs_diff_eq!(c.t_star, (1.25f64).ln(), epsilon = 1e-15);
        assert!(c.eta_t_star <= c.bound);
    }

    #[test]
    fn g_examples() {
        assert_eq!(default_g(100, 0.7).unwrap(), 26);
        assert_eq!(default_g(10, 0.7).unwrap(), 6);
        assert!(default_g(10, 0.5).is_err());
        assert!(default_g(10, 1.0).is_err());
    }

    #[test]
    fn mu_along_default_gap_tends_to_one() {
        let vals: Vec<f64> = [100usize, 1_000, 10_000, 100_000]
            .iter()
            .map(|&m| mu(m, m - default_g(m, 0.7).unwrap(), 0.2).unwrap())
            .collect();
        assert!(vals.windows(2).all(|w| w[1] > w[0]), "{vals:?}");
        // the second factor 1 - g/(0.2 (K-1)) still costs about 16% at M = 1e5
        let frozen = [0.0, 0.277697, 0.663215, 0.836683];
        for (v, f) in vals.iter().zip(frozen) {
            assert_abs_diff_eq!(*v, f, epsilon = 1e-6);
        }
    }

    #[test]
    fn inequality_grid_is_nonnegative() {
        assert!(chernoff_inequality_grid(10_000).iter().all(|&(_, gap)| gap >= 0.0));
    }

    #[test]
    fn report_handles_out_of_regime_pairs() {
        let models = vec![ch(0.2, 0.8), ch(0.3, 0.7)];
        let r = bound_report(&models, 10, 10, 4, 0.2, LogBase::Natural).unwrap();
        assert!(r.chernoff.is_none());
        assert!(r.mu.is_some());
        assert_eq!(r.tau0, 5);
        assert_abs_diff_eq!(r.f_total, r.f_per_user.iter().sum::<f64>(), epsilon = 1e-15);
        assert_abs_diff_eq!(
            truncation_loss_bound(&models, &[2.0, 1.0], 10).unwrap(),
            3.0 * r.f_total,
            epsilon = 1e-12
        );
        assert!(bound_report(&models, 10, 10, 11, 0.2, LogBase::Natural).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn f_decreasing_beyond_tau0(p01 in 0.21f64..0.45, p11 in 0.55f64..0.79) {
                let m = ChannelModel::new(0, p01, p11, 0.2).unwrap();
                let t0 = tau0(0.2).unwrap();
                let mut prev = f_tau(&m, t0).unwrap();
                for t in t0 + 1..=200 {
                    let f = f_tau(&m, t).unwrap();
                    prop_assert!(f > 0.0 && f < prev);
                    prev = f;
                }
            }

            #[test]
            fn eta_below_relaxed_bound(m in 3usize..500, frac in 0.5f64..1.0) {
                let k = ((m as f64 * frac).floor() as usize + 1).min(m);
                prop_assume!(2 * k > m);
                let c = chernoff(m, k).unwrap();
                prop_assert!(c.eta_t_star <= c.bound * (1.0 + 1e-12));
                prop_assert!(c.bound > 0.0 && c.bound <= 1.0);
            }

            #[test]
            fn chernoff_decreasing_in_gap(k in 10usize..200, extra in 0usize..8) {
                let m = k + extra;
                prop_assume!(2 * k > m + 1);
                prop_assert!(chernoff_bound(m + 1, k).unwrap() < chernoff_bound(m, k).unwrap());
            }

            #[test]
            fn mu_in_unit_interval(m in 2usize..1000, k in 2usize..1000, delta in 0.01f64..0.49) {
                prop_assume!(k <= m);
                let v = mu(m, k, delta).unwrap();
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
