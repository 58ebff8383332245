//! Unreliable uplink and the Age-of-Information process it induces.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uplink reliability model.
///
/// * `Bernoulli` delivers the previous step's sensor packet with probability `p`.
/// * `FixedAge` pins the controller's information age: from step `age` on, every
///   step delivers the packet generated `age` steps earlier.
/// * `Periodic` delivers the previous step's packet exactly once every `period`
///   steps, so the age cycles through `1..=period`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LinkModel {
    Bernoulli { p: f64 },
    FixedAge { age: u32 },
    Periodic { period: u32 },
}

impl LinkModel {
    pub fn bernoulli(p: f64) -> Result<Self> {
        let link = LinkModel::Bernoulli { p };
        link.validate()?;
        Ok(link)
    }

    pub fn fixed_age(age: u32) -> Result<Self> {
        let link = LinkModel::FixedAge { age };
        link.validate()?;
        Ok(link)
    }

    pub fn periodic(period: u32) -> Result<Self> {
        let link = LinkModel::Periodic { period };
        link.validate()?;
        Ok(link)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LinkModel::Bernoulli { p } if !(p > 0.0 && p <= 1.0) => Err(Error::InvalidLink(
                format!("success probability must lie in (0, 1], got {p}"),
            )),
            LinkModel::FixedAge { age: 0 } => {
                Err(Error::InvalidLink("fixed age must be at least 1".into()))
            }
            LinkModel::Periodic { period: 0 } => {
                Err(Error::InvalidLink("period must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// How many steps old a delivered packet is on arrival.
    pub fn packet_lag(&self) -> u32 {
        match *self {
            LinkModel::FixedAge { age } => age,
            _ => 1,
        }
    }

    /// Largest age this link can produce, if bounded.
    pub fn max_age(&self) -> Option<u32> {
        match *self {
            LinkModel::Bernoulli { p } if p >= 1.0 => Some(1),
            LinkModel::Bernoulli { .. } => None,
            LinkModel::FixedAge { age } => Some(age),
            LinkModel::Periodic { period } => Some(period),
        }
    }
}

/// Age of the freshest state held by the controller, in steps.
///
/// Zero only before the first update event, when the controller still holds
/// the initial state it was handed at `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AoiState(u32);

impl AoiState {
    pub const INITIAL: AoiState = AoiState(0);

    pub fn new(age: u32) -> Self {
        AoiState(age)
    }

    pub fn age(self) -> u32 {
        self.0
    }
}

/// One step of the AoI recurrence: reset to 1 on reception, otherwise grow by one.
pub fn aoi_step(current: AoiState, received: bool) -> AoiState {
    if received {
        AoiState(1)
    } else {
        AoiState(current.0 + 1)
    }
}

/// Whether the uplink delivers a packet during step `step` (`step >= 1`).
///
/// Bernoulli links consume one uniform draw per call; the other modes are
/// deterministic and leave `rng` untouched.
pub fn sample_reception<R: Rng + ?Sized>(link: &LinkModel, step: u64, rng: &mut R) -> bool {
    match *link {
        LinkModel::Bernoulli { p } => rng.random::<f64>() < p,
        LinkModel::FixedAge { .. } => true,
        LinkModel::Periodic { period } => step.is_multiple_of(period as u64),
    }
}

/// Stationary law of the age under Bernoulli(p) reception: `p (1-p)^(k-1)`.
pub fn aoi_stationary_pmf(p: f64, k: u32) -> f64 {
    debug_assert!(p > 0.0 && p <= 1.0 && k >= 1);
    if k == 0 {
        return 0.0;
    }
    p * (1.0 - p).powi(k as i32 - 1)
}
