//! Bias reconstruction and measurement correction for alarmed links.
//!
//! Once a link alarm latches, the receiver rebuilds the injected bias instead
//! of discarding the data outright. The voltage bias is observed directly by
//! comparing the received voltage against the tie-line drop (local voltage
//! minus line resistance times line current); the current bias is then
//! recovered recursively from the observer residuals. The recursion's error
//! contracts with a fixed eigenvalue `eta` each step, so an activation
//! transient dies out geometrically and the corrected data converges to the
//! truth. Links whose line current cannot be sensed or recovered fall back to
//! discarding: the neighbor's data is replaced by the local measurement,
//! which neutralizes its consensus contribution (exactly, when the two units
//! share a current rating).

use nalgebra::{Matrix2, Vector2};
use thiserror::Error;

use crate::detect::UioGains;
use crate::model::{ContinuousModel, DiscreteModel, EquivalentLoad};
use crate::topology::SensorPlan;

#[derive(Debug, Error, PartialEq)]
pub enum MitigateError {
    #[error("voltage channel of the unknown-input direction is zero; reconstruction undefined")]
    DegenerateVoltageChannel,
    #[error("reconstruction dynamics unstable (eta = {eta}); mitigation must not activate")]
    UnstableReconstruction { eta: f64 },
    #[error("line ({node}, {toward}): current neither sensed nor recoverable at node {node}")]
    UnobservableLine { node: u32, toward: u32 },
}

/// Link-level constants for the bias reconstruction recursion, derived from
/// the sender's model and the link's observer.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionGains {
    /// First and second columns of the observer's annihilator `T`.
    pub t1: Vector2<f64>,
    pub t2: Vector2<f64>,
    /// `t2 / (t2ᵀ·t2)`, the left inverse used to isolate the current bias.
    pub t2_tilde: Vector2<f64>,
    /// `−m_d[1] / m_d[0]`, slope of the unknown-input direction.
    pub zeta: f64,
    /// Eigenvalue of the reconstruction-error dynamics.
    pub eta: f64,
    /// First-order approximation `1 + a22·T_samp` of `eta`.
    pub eta_approx: f64,
    /// Whether the approximation's small-step premise held.
    pub eta_approx_reliable: bool,
}

/// Per-link reconstruction state. Zeroed while inactive; output is applied
/// from the step after activation (the observed voltage bias is local
/// information, but the current bias needs one more residual sample).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReconstructionState {
    pub phi_v_ob: f64,
    pub phi_i_re: f64,
    pub active: bool,
    pub activation_step: u64,
}

impl ReconstructionState {
    /// Arms the reconstruction at the alarm step: the voltage bias is taken
    /// as observed and the current bias starts from zero.
    pub fn activate(&mut self, phi_v_ob: f64, step: u64) {
        self.phi_v_ob = phi_v_ob;
        self.phi_i_re = 0.0;
        self.active = true;
        self.activation_step = step;
    }

    /// Drops back to pass-through (alarm cleared).
    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// Eigenvalue of the reconstruction-error dynamics, `[ζ, 1]·A_d·(0, 1)ᵀ`.
/// The value is a property of the sender's model alone: any annihilator `T`
/// with `T·m_d = 0` yields the same contraction (see the invariance test).
pub fn reconstruction_eigenvalue(
    a_d: &Matrix2<f64>,
    m_d: &Vector2<f64>,
) -> Result<f64, MitigateError> {
    if m_d.x == 0.0 || !m_d.x.is_finite() {
        return Err(MitigateError::DegenerateVoltageChannel);
    }
    let zeta = -m_d.y / m_d.x;
    Ok(zeta * a_d[(0, 1)] + a_d[(1, 1)])
}

/// First-order estimate of the reconstruction eigenvalue, `1 + a22·T_samp`.
/// Returns the value plus a reliability flag: the expansion behind it needs
/// every entry of `a·T_samp` to be small, so the flag drops as soon as any
/// entry reaches magnitude one.
pub fn eta_approx(a_cont: &Matrix2<f64>, t_samp: f64) -> (f64, bool) {
    let reliable = a_cont.iter().all(|a| (a * t_samp).abs() < 1.0);
    (1.0 + a_cont[(1, 1)] * t_samp, reliable)
}

/// Derives the reconstruction constants for one link. Fails if the voltage
/// channel degenerates or the recursion would not contract (`|eta| ≥ 1`);
/// callers must then keep the link on the discard fallback.
pub fn derive_reconstruction_gains(
    cont: &ContinuousModel,
    model: &DiscreteModel,
    uio: &UioGains,
) -> Result<ReconstructionGains, MitigateError> {
    let eta = reconstruction_eigenvalue(&model.a_d, &model.m_d)?;
    if !(eta.abs() < 1.0) {
        return Err(MitigateError::UnstableReconstruction { eta });
    }
    let t1 = uio.t.column(0).into_owned();
    let t2 = uio.t.column(1).into_owned();
    let t2_norm2 = t2.dot(&t2);
    assert!(
        t2_norm2 > 0.0,
        "annihilator's current column vanished despite a nonzero voltage channel"
    );
    let (approx, reliable) = eta_approx(&cont.a, model.t_samp);
    Ok(ReconstructionGains {
        t1,
        t2,
        t2_tilde: t2 / t2_norm2,
        zeta: -model.m_d.y / model.m_d.x,
        eta,
        eta_approx: approx,
        eta_approx_reliable: reliable,
    })
}

/// Observed voltage bias on a received measurement: the received voltage
/// minus the line-equation estimate of the sender's voltage. `i_line` is the
/// line current signed positive flowing from the local node toward the
/// sender, so the estimate reads `V_local − R_line·I_line`.
pub fn observe_voltage_bias(
    y_received: Vector2<f64>,
    y_local: Vector2<f64>,
    r_line: f64,
    i_line: f64,
) -> f64 {
    y_received.x - (y_local.x - r_line * i_line)
}

/// Load-current draw predicted from the linearized load at voltage `v`. The
/// impedance part is computed from the measured voltage, so the relative
/// estimation error applies only to the forecast current-source component.
pub fn load_current_estimate(load: &EquivalentLoad, v: f64, rel_error: f64) -> f64 {
    (1.0 + rel_error) * load.current + load.conductance * v
}

/// Sum of the currents leaving this node over its tie lines, inferred from
/// local quantities only: the converter current minus the capacitor charging
/// current (backward difference) minus the estimated load draw.
pub fn estimate_outgoing_current_sum(
    i_t: f64,
    v_now: f64,
    v_prev: f64,
    c_filter: f64,
    t_samp: f64,
    load_estimate: f64,
) -> f64 {
    i_t - (c_filter / t_samp) * (v_now - v_prev) - load_estimate
}

/// Resolves the current on the line `node → toward`: a direct sensor reading
/// when the plan has one, otherwise the estimated outgoing sum minus every
/// other locally sensed incident line (which covers single-line nodes, where
/// the sum itself is the answer). If any other incident line is unsensed the
/// current is unobservable and the caller must discard the neighbor's data.
///
/// `sensed_current` is consulted only for lines the plan actually measures.
pub fn resolve_line_current(
    plan: &SensorPlan,
    node: u32,
    toward: u32,
    neighbors: &[u32],
    mut sensed_current: impl FnMut(u32) -> f64,
    outgoing_sum: f64,
) -> Result<f64, MitigateError> {
    if plan.measures(node, toward) {
        return Ok(sensed_current(toward));
    }
    let mut recovered = outgoing_sum;
    for &other in neighbors.iter().filter(|&&n| n != toward) {
        if !plan.measures(node, other) {
            return Err(MitigateError::UnobservableLine { node, toward });
        }
        recovered -= sensed_current(other);
    }
    Ok(recovered)
}

/// One reconstruction update, producing the current-bias estimate for the new
/// step from the residual pair and the freshly observed voltage bias:
///
/// `φ_I(k+1) = t̃2ᵀ·( T·A_d·φ(k) − t1·φ_V(k+1) + ψ(k) )`, `ψ(k) = r(k+1) − F·r(k)`
///
/// where `φ(k)` is the state's previous estimate. With an exact voltage
/// observation the estimation error contracts by `eta` each step.
pub fn reconstruct_current_bias(
    state: &mut ReconstructionState,
    gains: &ReconstructionGains,
    uio: &UioGains,
    a_d: &Matrix2<f64>,
    r_new: Vector2<f64>,
    r_prev: Vector2<f64>,
    phi_v_new: f64,
) -> f64 {
    let psi = r_new - uio.f * r_prev;
    let phi_prev = Vector2::new(state.phi_v_ob, state.phi_i_re);
    let phi_i_new = gains
        .t2_tilde
        .dot(&(uio.t * a_d * phi_prev - gains.t1 * phi_v_new + psi));
    state.phi_v_ob = phi_v_new;
    state.phi_i_re = phi_i_new;
    phi_i_new
}

/// Corrected neighbor data for the consensus layer. Pass-through while the
/// state is inactive and on the activation step itself; from the next step
/// the reconstructed bias is subtracted. Unobservable links replace the
/// received data with the local measurement (recording the implied bias), so
/// the neighbor's influence is neutralized.
pub fn correct_measurement(
    state: &mut ReconstructionState,
    y_received: Vector2<f64>,
    y_local: Vector2<f64>,
    observable: bool,
    step: u64,
) -> Vector2<f64> {
    if !state.active {
        return y_received;
    }
    if !observable {
        let phi = y_received - y_local;
        state.phi_v_ob = phi.x;
        state.phi_i_re = phi.y;
        return y_local;
    }
    if step <= state.activation_step {
        return y_received;
    }
    y_received - Vector2::new(state.phi_v_ob, state.phi_i_re)
}

/// Steady-state bound on the current-bias reconstruction error under bounded
/// noise: `|t̃2|ᵀ·χ̄ / (1 − |eta|)` with `χ̄ = |T|ρ̄ + |T·A_d|ρ̄ + |T|ω̄`.
/// (The absolute value on `eta` keeps the geometric sum valid for negative
/// eigenvalues; on realistic converter parameters `eta` is positive and the
/// two readings coincide.)
pub fn reconstruction_error_bound(
    gains: &ReconstructionGains,
    uio: &UioGains,
    a_d: &Matrix2<f64>,
    rho_bar: Vector2<f64>,
    omega_bar: Vector2<f64>,
) -> Result<f64, MitigateError> {
    if !(gains.eta.abs() < 1.0) {
        return Err(MitigateError::UnstableReconstruction { eta: gains.eta });
    }
    let t_abs = uio.t.abs();
    let chi = t_abs * rho_bar + (uio.t * a_d).abs() * rho_bar + t_abs * omega_bar;
    Ok(gains.t2_tilde.abs().dot(&chi) / (1.0 - gains.eta.abs()))
}
