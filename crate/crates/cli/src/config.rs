use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ge_sched::bounds::LogBase;
use ge_sched::channel::{ChannelModel, DEFAULT_DELTA};
use ge_sched::policies::{default_k, PolicyConfig, PolicyKind, DEFAULT_G_EXPONENT};
use ge_sched::simulator::{default_warmup, ArrivalProcess, SimulationSetup};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub p01: f64,
    pub p11: f64,
}

/// Random channels, uniform on the given ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n: usize,
    pub p01: [f64; 2],
    pub p11: [f64; 2],
    #[serde(default)]
    pub seed: u64,
    /// Every channel is `(p01[0], p11[0])` when set.
    #[serde(default)]
    pub homogeneous: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explicit: Option<Vec<ChannelParams>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<GeneratorSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ArrivalKind {
    Bernoulli,
    BatchUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrivalSpec {
    pub kind: ArrivalKind,
    /// Same rate for every user, unless `rates` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_max: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    M,
    K,
    #[serde(rename = "lambda_scale")]
    LambdaScale,
    T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMeasure {
    /// Summary metrics of the configured policy.
    #[default]
    Simulate,
    /// Stringent-to-relaxed ratio.
    Ratio,
    /// Stability verdict.
    Stability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    #[serde(default)]
    pub measure: SweepMeasure,
    /// For an `M` sweep, scale `N = users_per_m * M` with generated channels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub users_per_m: Option<usize>,
}

fn default_true() -> bool {
    true
}
fn default_delta() -> f64 {
    DEFAULT_DELTA
}
fn default_g() -> f64 {
    DEFAULT_G_EXPONENT
}
fn default_reps() -> u64 {
    1
}
fn default_tau() -> u64 {
    10
}
fn default_truncation() -> u64 {
    200
}
fn default_oracle_tol() -> f64 {
    1e-6
}
fn default_max_age() -> u64 {
    20
}

/// Experiment description read from TOML or JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub channels: ChannelSpec,
    /// Optional cross-check of the channel count.
    #[serde(default, rename = "N", skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(default, rename = "K", skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default = "default_g")]
    pub g_exponent: f64,
    #[serde(default = "default_tau")]
    pub tau: u64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub log_base: LogBase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arrivals: Option<ArrivalSpec>,
    pub policy: PolicyKind,
    #[serde(default)]
    pub frame_length: u64,
    pub horizon: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup: Option<u64>,
    #[serde(default = "default_reps")]
    pub replications: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub saturated: bool,
    #[serde(default = "default_true")]
    pub common_random_numbers: bool,
    #[serde(default)]
    pub trace: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default = "default_truncation")]
    pub oracle_truncation: u64,
    #[serde(default = "default_oracle_tol")]
    pub oracle_tolerance: f64,
    #[serde(default = "default_max_age")]
    pub verify_max_age: u64,
}

fn field(name: &str, msg: impl Into<String>) -> CliError {
    CliError::Config {
        field: name.to_string(),
        message: msg.into(),
    }
}

impl ExperimentConfig {
    /// Parses TOML or JSON, chosen by extension (`.json` is JSON, anything
    /// else TOML).
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::parse(&text, is_json)
    }

    pub fn parse(text: &str, json: bool) -> Result<Self, CliError> {
        if json {
            serde_json::from_str(text).map_err(|e| CliError::Parse(e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))
        }
    }

    pub fn models(&self) -> Result<Vec<ChannelModel>, CliError> {
        let params: Vec<ChannelParams> = match (&self.channels.explicit, &self.channels.generate) {
            (Some(list), None) => list.clone(),
            (None, Some(g)) => generate(g)?,
            _ => return Err(field("channels", "give exactly one of `explicit` or `generate`")),
        };
        params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                ChannelModel::new(i, p.p01, p.p11, self.delta)
                    .map_err(|e| field(&format!("channels[{i}]"), e.to_string()))
            })
            .collect()
    }

    pub fn num_users(&self) -> Result<usize, CliError> {
        Ok(match (&self.channels.explicit, &self.channels.generate) {
            (Some(l), None) => l.len(),
            (None, Some(g)) => g.n,
            _ => return Err(field("channels", "give exactly one of `explicit` or `generate`")),
        })
    }

    pub fn resolved_k(&self) -> Result<usize, CliError> {
        match self.k {
            Some(k) => Ok(k),
            None => default_k(self.m, self.g_exponent).map_err(|e| field("g_exponent", e.to_string())),
        }
    }

    pub fn resolved_weights(&self, n: usize) -> Vec<f64> {
        self.weights.clone().unwrap_or_else(|| vec![1.0; n])
    }

    pub fn policy_config(&self) -> Result<PolicyConfig, CliError> {
        Ok(PolicyConfig {
            kind: self.policy,
            tau: self.tau,
            m: self.m,
            k: self.resolved_k()?,
            frame_length: self.frame_length,
            g_exponent: self.g_exponent,
        })
    }

    fn arrival_processes(&self, n: usize) -> Result<Vec<ArrivalProcess>, CliError> {
        let Some(a) = &self.arrivals else {
            return Ok(Vec::new());
        };
        let rates = match (&a.rates, a.rate) {
            (Some(r), None) => {
                if r.len() != n {
                    return Err(field("arrivals.rates", format!("{} rates for {n} channels", r.len())));
                }
                r.clone()
            }
            (None, Some(r)) => vec![r; n],
            _ => return Err(field("arrivals", "give exactly one of `rate` or `rates`")),
        };
        rates
            .into_iter()
            .enumerate()
            .map(|(i, rate)| {
                let p = match a.kind {
                    ArrivalKind::Bernoulli => ArrivalProcess::Bernoulli { rate },
                    ArrivalKind::BatchUniform => ArrivalProcess::BatchUniform {
                        rate,
                        batch_max: a.batch_max.ok_or_else(|| field("arrivals.batch_max", "required for BATCH_UNIFORM"))?,
                    },
                };
                p.validate().map_err(|e| field(&format!("arrivals[{i}]"), e.to_string()))?;
                Ok(p)
            })
            .collect()
    }

    /// Checks every field and builds the simulator setup.
    pub fn setup(&self) -> Result<SimulationSetup, CliError> {
        let models = self.models()?;
        let n = models.len();
        if let Some(declared) = self.n {
            if declared != n {
                return Err(field("N", format!("declares {declared} users but channels give {n}")));
            }
        }
        if self.m < 1 || self.m > n {
            return Err(field("M", format!("{} is outside 1..={n}", self.m)));
        }
        let k = self.resolved_k()?;
        if k < 1 || k > self.m {
            return Err(field("K", format!("{k} is outside 1..=M ({})", self.m)));
        }
        if self.tau < 1 {
            return Err(field("tau", "must be at least 1"));
        }
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(field("delta", format!("{} is outside (0, 1/2)", self.delta)));
        }
        if self.policy == PolicyKind::Frame && self.frame_length < 1 {
            return Err(field("frame_length", "FRAME needs frame_length >= 1"));
        }
        if self.replications < 1 {
            return Err(field("replications", "must be at least 1"));
        }
        let weights = self.resolved_weights(n);
        if weights.len() != n {
            return Err(field("weights", format!("{} weights for {n} channels", weights.len())));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(field("weights", format!("{w} is not a finite nonnegative number")));
        }
        let arrivals = self.arrival_processes(n)?;
        if !self.saturated && arrivals.is_empty() && self.policy.uses_queues() {
            log::warn!("finite queues without arrivals: every queue stays empty");
        }
        let warmup = self.warmup.unwrap_or_else(|| default_warmup(self.horizon));
        if self.horizon <= warmup {
            return Err(field("horizon", format!("{} must exceed warmup {warmup}", self.horizon)));
        }
        let setup = SimulationSetup {
            models,
            policy: self.policy_config()?,
            weights,
            arrivals,
            saturated: self.saturated,
            horizon: self.horizon,
            warmup,
            checkpoints: Vec::new(),
            trace: self.trace,
        };
        setup.validate().map_err(|e| field("config", e.to_string()))?;
        Ok(setup)
    }
}

fn generate(g: &GeneratorSpec) -> Result<Vec<ChannelParams>, CliError> {
    if g.n < 1 {
        return Err(field("channels.generate.n", "must be at least 1"));
    }
    for (name, r) in [("p01", g.p01), ("p11", g.p11)] {
        if !(r[0] <= r[1]) {
            return Err(field(&format!("channels.generate.{name}"), "range must be [lo, hi] with lo <= hi"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    Ok((0..g.n)
        .map(|_| {
            if g.homogeneous {
                return ChannelParams { p01: g.p01[0], p11: g.p11[0] };
            }
            let u = |rng: &mut ChaCha8Rng, r: [f64; 2]| r[0] + (r[1] - r[0]) * rng.random::<f64>();
            ChannelParams {
                p01: u(&mut rng, g.p01),
                p11: u(&mut rng, g.p11),
            }
        })
        .collect())
}
