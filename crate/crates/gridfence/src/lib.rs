//! Deterministic simulator and defense toolkit for islanded DC microgrids whose
//! secondary (consensus) control layer is exposed to false-data injection on
//! the communication links between converters.
//!
//! The crate is organised around the lifecycle of one simulation:
//!
//! * [`model`] — per-converter electrical models (ZIP load linearization,
//!   continuous two-state dynamics, exact discretization) and the coupled
//!   whole-microgrid plant used as simulation ground truth.
//! * [`topology`] — shared electrical/communication graph, cycle search,
//!   spanning-tree selection and the line-current sensor placement planner.
//! * [`control`] — primary voltage PI loop and the distributed
//!   current-sharing consensus layer.
//! * [`attack`] — bias waveforms injected into transmitted neighbor data.
//! * [`detect`] — unknown-input observers per communication link, residual
//!   norm bounds and latched alarms.
//! * [`mitigate`] — voltage-bias observation through line measurements,
//!   recursive current-bias reconstruction and measurement correction.
//! * [`sim`] — scenario files, the stepping engine and trace/summary output.

pub mod attack;
pub mod control;
pub mod detect;
pub mod linalg;
pub mod mitigate;
pub mod model;
pub mod sim;
pub mod topology;
