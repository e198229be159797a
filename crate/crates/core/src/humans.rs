//! Human drivers: perceived-cost beliefs, logit route choice, and the
//! day-to-day learning recurrences.
//!
//! All three models share the multinomial logit choice rule over negated
//! perceived costs and differ only in how the beliefs are revised after a
//! day's travel:
//!
//! * `weighted_average`: `C[r] <- (1 - l) * C[r] + l * tau` for the chosen `r`.
//! * `gawron`: the same smoothing on the chosen route, then every other route
//!   moves halfway-rate toward the chosen route's new estimate,
//!   `C[s] <- (1 - l/2) * C[s] + (l/2) * C[r]`.
//! * `culo`: cumulative, `C[r] <- d * C[r] + tau`.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pathgen::RouteSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanModel {
    Gawron,
    Culo,
    WeightedAverage,
}

impl fmt::Display for HumanModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HumanModel::Gawron => "gawron",
            HumanModel::Culo => "culo",
            HumanModel::WeightedAverage => "weighted_average",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostBeliefs {
    /// Perceived cost per route index, seconds.
    pub costs: Vec<f64>,
    pub counts: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HumanModelParams {
    pub model: HumanModel,
    /// In (0, 1].
    pub learn_rate: f64,
    /// Logit scale in 1/seconds. Infinity selects the cheapest route.
    pub logit_scale: f64,
    /// In (0, 1]; CULO only.
    pub discount: f64,
    /// Per-agent sensitivity multiplier.
    pub time_mult: f64,
}

impl Default for HumanModelParams {
    fn default() -> Self {
        HumanModelParams {
            model: HumanModel::WeightedAverage,
            learn_rate: 0.2,
            logit_scale: 0.1,
            discount: 0.9,
            time_mult: 1.0,
        }
    }
}

impl HumanModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learn_rate > 0.0 && self.learn_rate <= 1.0) {
            return Err(Error::InvalidArgument(format!("learn_rate must be in (0, 1], got {}", self.learn_rate)));
        }
        if self.logit_scale.is_nan() || self.logit_scale < 0.0 {
            return Err(Error::InvalidArgument(format!("logit_scale must be >= 0, got {}", self.logit_scale)));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::InvalidArgument(format!("discount must be in (0, 1], got {}", self.discount)));
        }
        if !(self.time_mult.is_finite() && self.time_mult > 0.0) {
            return Err(Error::InvalidArgument(format!("time_mult must be > 0, got {}", self.time_mult)));
        }
        Ok(())
    }
}

/// A belief-revision rule. Implement this to plug in another human model.
pub trait LearningModel {
    fn update(&self, beliefs: &mut CostBeliefs, chosen: usize, observed: f64) -> Result<()>;
}

impl LearningModel for HumanModelParams {
    fn update(&self, b: &mut CostBeliefs, chosen: usize, observed: f64) -> Result<()> {
        if chosen >= b.costs.len() {
            return Err(Error::InvalidArgument(format!(
                "route index {chosen} out of range for {} routes",
                b.costs.len()
            )));
        }
        if !(observed.is_finite() && observed > 0.0) {
            return Err(Error::InvalidArgument(format!("observed travel time must be > 0, got {observed}")));
        }
        let lambda = self.learn_rate;
        match self.model {
            HumanModel::WeightedAverage => {
                b.costs[chosen] = (1.0 - lambda) * b.costs[chosen] + lambda * observed;
            }
            HumanModel::Gawron => {
                b.costs[chosen] = (1.0 - lambda) * b.costs[chosen] + lambda * observed;
                let anchor = b.costs[chosen];
                for (s, c) in b.costs.iter_mut().enumerate() {
                    if s != chosen {
                        *c = (1.0 - lambda / 2.0) * *c + (lambda / 2.0) * anchor;
                    }
                }
            }
            HumanModel::Culo => {
                b.costs[chosen] = self.discount * b.costs[chosen] + observed;
            }
        }
        b.counts[chosen] += 1;
        Ok(())
    }
}

pub fn init_beliefs(routes: &RouteSet) -> Result<CostBeliefs> {
    if routes.is_empty() {
        return Err(Error::InvalidArgument("empty route set".into()));
    }
    Ok(CostBeliefs {
        costs: routes.fftimes(),
        counts: vec![0; routes.len()],
    })
}

/// Logit choice probabilities `exp(-s*C_r) / sum exp(-s*C_s)` with
/// `s = logit_scale * time_mult`.
pub fn choice_probabilities(b: &CostBeliefs, p: &HumanModelParams) -> Vec<f64> {
    let scale = p.logit_scale * p.time_mult;
    let min = b.costs.iter().copied().fold(f64::INFINITY, f64::min);
    if scale.is_infinite() {
        // Greedy limit: all mass on the cheapest route, ties to the lowest index.
        let best = b.costs.iter().position(|&c| c == min).unwrap_or(0);
        let mut probs = vec![0.0; b.costs.len()];
        probs[best] = 1.0;
        return probs;
    }
    let weights: Vec<f64> = b.costs.iter().map(|c| (-scale * (c - min)).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Samples a route index from the logit probabilities. Consumes exactly one
/// uniform draw.
pub fn choose_route<R: Rng + ?Sized>(b: &CostBeliefs, p: &HumanModelParams, rng: &mut R) -> usize {
    let probs = choice_probabilities(b, p);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, q) in probs.iter().enumerate() {
        acc += q;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` just below 1; fall back to the last positive entry.
    probs.iter().rposition(|&q| q > 0.0).unwrap_or(0)
}

pub fn update_beliefs(b: &CostBeliefs, chosen: usize, observed: f64, p: &HumanModelParams) -> Result<CostBeliefs> {
    let mut next = b.clone();
    p.update(&mut next, chosen, observed)?;
    Ok(next)
}
