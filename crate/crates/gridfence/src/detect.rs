//! Unknown-input observers on incoming communication links.
//!
//! Every directed link gets its own observer built from the sender's model.
//! The observer estimates the sender's state from the received data alone,
//! annihilating the sender's unknown input (local load plus neighbor-voltage
//! coupling), so the residual stays at zero for honest data regardless of how
//! the rest of the grid moves. A residual that escapes its noise-driven bound
//! therefore indicts the link, and a latched alarm hands the measurement to
//! the mitigation layer.

use nalgebra::{Matrix2, Vector2};
use thiserror::Error;

use crate::linalg::{operator_norm2, spectral_radius2};
use crate::model::DiscreteModel;

/// Observer poles used when a scenario does not override them.
pub const DEFAULT_OBSERVER_POLES: (f64, f64) = (0.3, 0.35);

/// Consecutive in-bound steps required before a latched alarm clears.
pub const DEFAULT_ALARM_CLEAR_STREAK: u32 = 10;

/// Horizon over which the transient-gain constant is maximized.
const GAIN_SEARCH_HORIZON: u32 = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error(
        "link ({receiver}, {sender}): unknown-input direction is zero; observer cannot decouple"
    )]
    DegenerateInputDirection { receiver: u32, sender: u32 },
    #[error("link ({receiver}, {sender}): observer pole {pole} is not strictly inside the unit circle")]
    UnstablePole { receiver: u32, sender: u32, pole: f64 },
    #[error("observer dynamics unstable: spectral radius {spectral_radius}")]
    UnstableDynamics { spectral_radius: f64 },
}

/// Synthesized observer matrices for one directed link, plus the constants
/// `(nu, sigma)` of the geometric envelope `‖F^k‖ ≤ nu·sigma^k`.
#[derive(Clone, Debug, PartialEq)]
pub struct UioGains {
    pub f: Matrix2<f64>,
    pub t: Matrix2<f64>,
    pub h: Matrix2<f64>,
    pub k_hat: Matrix2<f64>,
    /// Precomputed `T·b_d` (the observer's input channel).
    pub t_b: Vector2<f64>,
    pub nu: f64,
    pub sigma: f64,
}

/// Per-link observer state: internal vector, latest residual and bound, and
/// the latched alarm automaton.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualState {
    pub z: Vector2<f64>,
    pub r: Vector2<f64>,
    pub r_bound: Vector2<f64>,
    pub alarm: bool,
    pub normal_streak: u32,
    /// Step index of the first bound violation of the current alarm episode.
    pub alarm_time: Option<u64>,
    /// Residual step index (0 at initialization).
    pub step: u64,
    /// Measurement received at the previous step, consumed by the next update.
    pub y_prev: Vector2<f64>,
}

impl ResidualState {
    /// Starts the observer on the first received measurement. Seeding the
    /// internal state with `T·y(0)` makes the initial residual exactly zero,
    /// so honest links never see a start-up transient.
    pub fn initialize(gains: &UioGains, y0: Vector2<f64>) -> Self {
        Self {
            z: gains.t * y0,
            r: Vector2::zeros(),
            r_bound: Vector2::zeros(),
            alarm: false,
            normal_streak: 0,
            alarm_time: None,
            step: 0,
            y_prev: y0,
        }
    }
}

/// Builds the observer for the link `(receiver, sender)` from the sender's
/// discrete model. `H` projects onto the unknown-input direction, `T = I − H`
/// annihilates it, and the free gain places the error dynamics `F` at `poles`.
pub fn synthesize_uio(
    model: &DiscreteModel,
    poles: (f64, f64),
    link: (u32, u32),
) -> Result<UioGains, DetectError> {
    let (receiver, sender) = link;
    let m = model.m_d;
    let denom = m.dot(&m);
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(DetectError::DegenerateInputDirection { receiver, sender });
    }
    for pole in [poles.0, poles.1] {
        if !(pole.abs() < 1.0) {
            return Err(DetectError::UnstablePole { receiver, sender, pole });
        }
    }

    let h = m * m.transpose() / denom;
    let t = Matrix2::identity() - h;
    let f = Matrix2::from_diagonal(&Vector2::new(poles.0, poles.1));
    let k1 = t * model.a_d - f;
    let k2 = f * h;
    let k_hat = k1 + k2;

    let scale = m.norm();
    assert!(
        (t * m).norm() <= 1e-12 * scale.max(1.0),
        "annihilation failed: |T·m_d| = {}",
        (t * m).norm()
    );
    assert!(
        (h * h - h).norm() <= 1e-12,
        "H lost the projection property"
    );

    let (nu, sigma) = compute_bound_constants(&f)?;
    Ok(UioGains {
        f,
        t,
        h,
        k_hat,
        t_b: t * model.b_d,
        nu,
        sigma,
    })
}

/// Envelope constants for stable dynamics: `sigma` halves the gap between the
/// spectral radius and 1, and `nu = max_k ‖F^k‖/sigma^k` (floored at 1 by the
/// `k = 0` term) caps the transient growth of non-normal `F`.
pub fn compute_bound_constants(f: &Matrix2<f64>) -> Result<(f64, f64), DetectError> {
    let rho = spectral_radius2(f);
    if !(rho < 1.0) {
        return Err(DetectError::UnstableDynamics { spectral_radius: rho });
    }
    let sigma = (1.0 + rho) / 2.0;
    let mut nu: f64 = 1.0;
    let mut power = Matrix2::identity();
    let mut envelope = 1.0;
    for _ in 1..=GAIN_SEARCH_HORIZON {
        power = f * power;
        envelope *= sigma;
        nu = nu.max(operator_norm2(&power) / envelope);
    }
    Ok((nu, sigma))
}

/// One observer update, consuming the measurement received this step together
/// with the converter input the sender applied on the previous step:
/// `z⁺ = F·z + T·b_d·u + K̂·y(k)`, then `r(k+1) = T·y(k+1) − z⁺`.
pub fn uio_step(
    state: &mut ResidualState,
    gains: &UioGains,
    y_new: Vector2<f64>,
    u_prev: f64,
) -> Vector2<f64> {
    state.z = gains.f * state.z + gains.t_b * u_prev + gains.k_hat * state.y_prev;
    state.r = gains.t * y_new - state.z;
    state.y_prev = y_new;
    state.step += 1;
    state.r
}

/// Residual bound at step `k` for measurement-noise bound `rho_bar` and
/// process-noise bound `omega_bar` (componentwise, absolute values):
///
/// `r̄(k) = nu·sigma^k·|T|ρ̄ + |T|ρ̄ + nu·Σ_{l<k} sigma^{k−1−l}·(|T|ω̄ + |K̂|ρ̄)`
///
/// The geometric sum telescopes to `(1 − sigma^k)/(1 − sigma)`, so the bound
/// is evaluated in closed form; a brute-force recursion pins it in tests.
pub fn residual_bound_step(
    gains: &UioGains,
    rho_bar: Vector2<f64>,
    omega_bar: Vector2<f64>,
    k: u64,
) -> Vector2<f64> {
    let t_abs = gains.t.abs();
    let k_abs = gains.k_hat.abs();
    let measurement = t_abs * rho_bar;
    let per_step = t_abs * omega_bar + k_abs * rho_bar;
    let decay = gains.sigma.powf(k as f64);
    let accumulated = (1.0 - decay) / (1.0 - gains.sigma);
    measurement * (1.0 + gains.nu * decay) + per_step * (gains.nu * accumulated)
}

/// Steady-state limit of [`residual_bound_step`].
pub fn residual_bound_limit(
    gains: &UioGains,
    rho_bar: Vector2<f64>,
    omega_bar: Vector2<f64>,
) -> Vector2<f64> {
    let t_abs = gains.t.abs();
    let k_abs = gains.k_hat.abs();
    t_abs * rho_bar + (t_abs * omega_bar + k_abs * rho_bar) * (gains.nu / (1.0 - gains.sigma))
}

/// Latched alarm automaton. Any componentwise bound violation (re)arms the
/// alarm and resets the normal streak; the alarm drops only after the link
/// has been validated normal for `clear_streak` consecutive steps, on the
/// step after the streak completes.
pub fn update_alarm(state: &mut ResidualState, clear_streak: u32) -> bool {
    let violated = state.r.x.abs() > state.r_bound.x || state.r.y.abs() > state.r_bound.y;
    if violated {
        state.normal_streak = 0;
        if !state.alarm {
            state.alarm = true;
            state.alarm_time = Some(state.step);
        }
    } else if state.alarm {
        if state.normal_streak >= clear_streak {
            state.alarm = false;
            state.normal_streak = 0;
            state.alarm_time = None;
        } else {
            state.normal_streak += 1;
        }
    }
    state.alarm
}
