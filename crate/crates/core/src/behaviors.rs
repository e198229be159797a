//! AV behavior presets and the linear reward built from group travel-time
//! statistics.
//!
//! A reward is `w_own*t_own + w_group*t_group + w_other*t_other + w_all*t_all`.
//! Rewards are maximized, so a negative weight means "minimize that delay".

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Behavior {
    Selfish,
    Altruistic,
    Collaborative,
    Competitive,
    Malicious,
    Social,
}

impl Behavior {
    pub const ALL: [Behavior; 6] = [
        Behavior::Selfish,
        Behavior::Altruistic,
        Behavior::Collaborative,
        Behavior::Competitive,
        Behavior::Malicious,
        Behavior::Social,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Behavior::Selfish => "selfish",
            Behavior::Altruistic => "altruistic",
            Behavior::Collaborative => "collaborative",
            Behavior::Competitive => "competitive",
            Behavior::Malicious => "malicious",
            Behavior::Social => "social",
        }
    }

    pub fn weights(self) -> BehaviorWeights {
        let w = BehaviorWeights::new;
        match self {
            Behavior::Selfish => w(-1.0, 0.0, 0.0, 0.0),
            Behavior::Altruistic => w(0.0, 0.0, 0.0, -1.0),
            Behavior::Collaborative => w(-0.5, -0.5, 0.0, 0.0),
            Behavior::Competitive => w(-0.5, 0.0, 0.5, 0.0),
            Behavior::Malicious => w(0.0, 0.0, 1.0, 0.0),
            Behavior::Social => w(-0.5, 0.0, 0.0, -0.5),
        }
    }
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Behavior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Behavior::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown behavior `{s}`")))
    }
}

/// Looks up the weights of a named preset.
pub fn preset(name: &str) -> Result<BehaviorWeights> {
    name.parse::<Behavior>().map(Behavior::weights)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorWeights {
    pub w_own: f64,
    pub w_group: f64,
    pub w_other: f64,
    pub w_all: f64,
}

impl BehaviorWeights {
    pub const fn new(w_own: f64, w_group: f64, w_other: f64, w_all: f64) -> Self {
        BehaviorWeights {
            w_own,
            w_group,
            w_other,
            w_all,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w_own, self.w_group, self.w_other, self.w_all]
    }
}

/// Formats as `w_own;w_group;w_other;w_all`, the demand CSV override syntax.
impl fmt::Display for BehaviorWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{};{};{};{}", self.w_own, self.w_group, self.w_other, self.w_all)
    }
}

impl FromStr for BehaviorWeights {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(';')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidArgument(format!("bad weights `{s}`")))?;
        match parts.as_slice() {
            [a, b, c, d] if parts.iter().all(|w| w.is_finite()) => Ok(BehaviorWeights::new(*a, *b, *c, *d)),
            _ => Err(Error::InvalidArgument(format!(
                "weights need four finite values separated by ';', got `{s}`"
            ))),
        }
    }
}

/// Travel-time statistics seen by one AV at the end of an episode, seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupStats {
    pub t_own: f64,
    /// Mean over AVs, including the agent itself.
    pub t_group: f64,
    /// Mean over human drivers; zero when there are none.
    pub t_other: f64,
    pub t_all: f64,
}

/// Per-episode group means shared by every AV's [`GroupStats`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupMeans {
    pub av: Option<f64>,
    pub human: Option<f64>,
    pub all: f64,
}

impl GroupMeans {
    /// `times` pairs each agent's travel time with whether it is an AV.
    pub fn compute(times: impl IntoIterator<Item = (bool, f64)>) -> Self {
        let (mut av_sum, mut av_n, mut hu_sum, mut hu_n) = (0.0, 0usize, 0.0, 0usize);
        for (is_av, t) in times {
            if is_av {
                av_sum += t;
                av_n += 1;
            } else {
                hu_sum += t;
                hu_n += 1;
            }
        }
        let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        GroupMeans {
            av: mean(av_sum, av_n),
            human: mean(hu_sum, hu_n),
            all: mean(av_sum + hu_sum, av_n + hu_n).unwrap_or(0.0),
        }
    }

    pub fn stats_for(&self, t_own: f64) -> GroupStats {
        GroupStats {
            t_own,
            t_group: self.av.unwrap_or(t_own),
            t_other: self.human.unwrap_or(0.0),
            t_all: self.all,
        }
    }
}

pub fn compute_reward(w: &BehaviorWeights, s: &GroupStats) -> f64 {
    w.w_own * s.t_own + w.w_group * s.t_group + w.w_other * s.t_other + w.w_all * s.t_all
}
