//! Contact classification from foot normal forces and the foothold lifecycle.

use nalgebra::{DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::KinematicChain;
use crate::state::{Covariance, ForceSample, Leg, NoiseConfig, State, PC};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContactConfig {
    /// Force at or above which a foot enters contact, N.
    pub on_threshold: f64,
    /// Force at or below which a foot leaves contact, N.
    pub off_threshold: f64,
    /// Margin the other foot's force must exceed the stance foot's by before the
    /// stance switches in double support, N.
    pub stance_hysteresis: f64,
}

impl Default for ContactConfig {
    fn default() -> Self {
        Self { on_threshold: 250.0, off_threshold: 150.0, stance_hysteresis: 20.0 }
    }
}

impl ContactConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.on_threshold > self.off_threshold && self.off_threshold > 0.0) {
            return Err(Error::Config(format!(
                "contact thresholds must satisfy on > off > 0 (on={}, off={})",
                self.on_threshold, self.off_threshold
            )));
        }
        if !(self.stance_hysteresis >= 0.0) {
            return Err(Error::Config("contact.stance_hysteresis must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ContactState {
    pub in_contact: [bool; 2],
    pub stance: Option<Leg>,
    /// Time of the last stance change, s.
    pub last_switch: f64,
}

impl ContactState {
    pub fn any(&self) -> bool {
        self.in_contact[0] || self.in_contact[1]
    }
}

/// Two-threshold hysteresis per foot, followed by stance selection.
pub fn schmitt_update(prev: &ContactState, f: &ForceSample, cfg: &ContactConfig) -> ContactState {
    let mut next = *prev;
    for leg in Leg::BOTH {
        let i = leg.index();
        if f.fz[i] >= cfg.on_threshold {
            next.in_contact[i] = true;
        } else if f.fz[i] <= cfg.off_threshold {
            next.in_contact[i] = false;
        }
    }
    let stance = select_stance(&next, f, cfg.stance_hysteresis);
    if stance != prev.stance {
        next.last_switch = f.t;
    }
    next.stance = stance;
    next
}

/// Stance foot given the current contact flags. `c.stance` is the previous
/// choice, kept in double support unless the other foot carries more than
/// `hysteresis` extra force.
pub fn select_stance(c: &ContactState, f: &ForceSample, hysteresis: f64) -> Option<Leg> {
    match c.in_contact {
        [false, false] => None,
        [true, false] => Some(Leg::Left),
        [false, true] => Some(Leg::Right),
        [true, true] => match c.stance {
            Some(current) => {
                let other = current.other();
                if f.fz[other.index()] > f.fz[current.index()] + hysteresis {
                    Some(other)
                } else {
                    Some(current)
                }
            }
            None if f.fz[1] > f.fz[0] => Some(Leg::Right),
            None => Some(Leg::Left),
        },
    }
}

/// Re-anchors the foothold at the new stance foot: `p_c = p + R fk(q)`, with
/// the foothold covariance replaced by `σ_reset² I` and its cross terms cleared.
pub fn reset_contact(
    x: &State,
    p: &Covariance,
    chain: &KinematicChain,
    q: &DVector<f64>,
    cfg: &NoiseConfig,
) -> (State, Covariance) {
    let mut next = x.clone();
    next.contact = x.position + x.rotation * chain.fk(q);
    let mut cov = *p;
    cov.fixed_rows_mut::<3>(PC).fill(0.0);
    cov.fixed_columns_mut::<3>(PC).fill(0.0);
    cov.fixed_view_mut::<3, 3>(PC, PC)
        .copy_from(&(Matrix3::identity() * cfg.contact_reset.powi(2)));
    (next, cov)
}
