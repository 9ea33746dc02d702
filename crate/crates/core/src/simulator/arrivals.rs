use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// I.i.d. per-slot packet arrivals with mean `rate`.
///
/// `BatchUniform` delivers, with probability `2 rate / batch_max`, a batch
/// drawn uniformly from `{0, ..., batch_max}`, and nothing otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ArrivalProcess {
    Bernoulli { rate: f64 },
    BatchUniform { rate: f64, batch_max: u64 },
}

impl ArrivalProcess {
    pub fn bernoulli(rate: f64) -> Result<Self> {
        let a = ArrivalProcess::Bernoulli { rate };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ArrivalProcess::Bernoulli { rate } => {
                if !(0.0..=1.0).contains(&rate) {
                    return Err(invalid("rate", format!("Bernoulli rate {rate} is outside [0, 1]")));
                }
            }
            ArrivalProcess::BatchUniform { rate, batch_max } => {
                if batch_max < 1 {
                    return Err(invalid("batch_max", "must be at least 1"));
                }
                if !(rate >= 0.0 && 2.0 * rate <= batch_max as f64) {
                    return Err(invalid(
                        "rate",
                        format!("batch rate {rate} is outside [0, batch_max / 2 = {}]", batch_max as f64 / 2.0),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn rate(&self) -> f64 {
        match *self {
            ArrivalProcess::Bernoulli { rate } | ArrivalProcess::BatchUniform { rate, .. } => rate,
        }
    }

    pub fn second_moment(&self) -> f64 {
        match *self {
            ArrivalProcess::Bernoulli { rate } => rate,
            ArrivalProcess::BatchUniform { rate, batch_max } => {
                let b = batch_max as f64;
                2.0 * rate / b * b * (2.0 * b + 1.0) / 6.0
            }
        }
    }

    /// Same process with the mean multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        match *self {
            ArrivalProcess::Bernoulli { rate } => ArrivalProcess::Bernoulli { rate: rate * factor },
            ArrivalProcess::BatchUniform { rate, batch_max } => ArrivalProcess::BatchUniform {
                rate: rate * factor,
                batch_max,
            },
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match *self {
            ArrivalProcess::Bernoulli { rate } => (rng.random::<f64>() < rate) as u64,
            ArrivalProcess::BatchUniform { rate, batch_max } => {
                if rng.random::<f64>() < 2.0 * rate / batch_max as f64 {
                    rng.random_range(0..=batch_max)
                } else {
                    0
                }
            }
        }
    }
}
