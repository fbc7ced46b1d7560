//! Primary PI voltage regulation and consensus-based secondary current sharing.
//!
//! Each DER runs a local PI loop that tracks its voltage reference, shifted by
//! a secondary correction term. The secondary layer integrates the mismatch
//! between the neighbors' normalized output currents and the local one, so all
//! units converge to the same per-rated-ampere loading.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

/// Primary-loop gains plus the integrator they drive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimaryGains {
    /// Proportional feedback on the local measurement (voltage, current).
    pub proportional: (f64, f64),
    /// Integral gain on the voltage tracking error.
    pub integral: f64,
    /// Accumulated voltage error, in volt·steps.
    #[serde(skip)]
    pub accumulated_error: f64,
}

impl Default for PrimaryGains {
    fn default() -> Self {
        Self {
            proportional: (0.0, 0.0),
            integral: 0.05,
            accumulated_error: 0.0,
        }
    }
}

/// Per-link consensus weight used when a scenario does not override it.
pub const DEFAULT_CONSENSUS_WEIGHT: f64 = 0.02;

/// Sharing-error threshold below which the attack impact counts as
/// eliminated, in normalized current units.
pub const DEFAULT_SHARING_THRESHOLD: f64 = 0.05;

/// Secondary-loop consensus state for one DER.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondaryState {
    /// Rated current of the local converter, amperes.
    pub rated_current: f64,
    /// Accumulated normalized-current mismatch.
    #[serde(skip)]
    pub integrator: f64,
}

impl Default for SecondaryState {
    fn default() -> Self {
        Self {
            rated_current: 10.0,
            integrator: 0.0,
        }
    }
}

/// One primary-loop update. Accumulates the shifted voltage error once and
/// returns the converter input `u_i` for this step.
pub fn primary_input(
    gains: &mut PrimaryGains,
    y_local: Vector2<f64>,
    v_ref: f64,
    alpha: f64,
) -> f64 {
    gains.accumulated_error += v_ref + alpha - y_local.x;
    gains.proportional.0 * y_local.x
        + gains.proportional.1 * y_local.y
        + gains.integral * gains.accumulated_error
}

/// One secondary-loop update. `neighbors` carries, per incoming link, the
/// link's consensus weight, the neighbor's rated current, and its (possibly
/// corrected) measurement as it arrived over that link. Returns the
/// reference shift `alpha_i`.
pub fn secondary_input(
    state: &mut SecondaryState,
    y_local: Vector2<f64>,
    neighbors: &[(f64, f64, Vector2<f64>)],
) -> f64 {
    let own = y_local.y / state.rated_current;
    for (weight, rated, y_recv) in neighbors {
        state.integrator += weight * (y_recv.y / rated - own);
    }
    state.integrator
}

/// Current-sharing safety indicator: the summed absolute mismatch between the
/// neighbors' normalized currents (as received) and the local one. Values at
/// or below the configured threshold declare the attack impact eliminated.
pub fn sharing_error(
    rated_local: f64,
    y_local: Vector2<f64>,
    neighbors: &[(f64, Vector2<f64>)],
) -> f64 {
    let own = y_local.y / rated_local;
    neighbors
        .iter()
        .map(|(rated, y_recv)| (y_recv.y / rated - own).abs())
        .sum()
}
