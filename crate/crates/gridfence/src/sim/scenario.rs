//! Scenario files: the complete, serializable description of one run.
//!
//! A scenario fixes the grid (nodes, tie lines, per-DER parameters), the
//! controller and detector settings, the noise bounds, the sensor placement,
//! the attack catalog, and a timeline of events. Parsing is strict about
//! structure and `validate` is strict about semantics, so the engine can
//! assume a well-formed world. Serialization round-trips: parse → serialize
//! → parse is the identity on every field.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

use crate::attack::AttackSpec;
use crate::control;
use crate::detect;
use crate::model::DerParams;
use crate::model::ZipLoad;
use crate::topology::{LineParams, MicrogridTopology, TopologyError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("failed to read scenario file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("failed to serialize scenario: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("invalid scenario topology: {0}")]
    Topology(#[from] TopologyError),
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

/// Which ground truth the engine advances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantModel {
    /// All DERs in one discretized state-space block, so neighbor voltages
    /// move *within* a sampling interval. The physically faithful choice.
    #[default]
    Coupled,
    /// Per-DER blocks with the unknown input held at its start-of-step value.
    /// Matches the observer's model class exactly, which makes residuals and
    /// reconstructions noise-limited instead of discretization-limited;
    /// intended for oracle-grade verification runs.
    PerDerZoh,
}

/// Activation times for the three layers, plus the end of the run (seconds).
/// The detectors must not lead the loop they protect, hence the ordering
/// requirement primary ≤ secondary ≤ detector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Horizons {
    #[serde(default)]
    pub primary_start: f64,
    #[serde(default)]
    pub secondary_start: f64,
    #[serde(default)]
    pub detector_start: f64,
    pub end: f64,
}

fn default_proportional() -> (f64, f64) {
    (0.0, 0.0)
}
fn default_integral() -> f64 {
    0.05
}
fn default_consensus_weight() -> f64 {
    control::DEFAULT_CONSENSUS_WEIGHT
}
fn default_sharing_threshold() -> f64 {
    control::DEFAULT_SHARING_THRESHOLD
}
fn default_secondary_period() -> u32 {
    1
}
fn default_observer_poles() -> (f64, f64) {
    detect::DEFAULT_OBSERVER_POLES
}
fn default_alarm_clear_streak() -> u32 {
    detect::DEFAULT_ALARM_CLEAR_STREAK
}
fn default_detection_grace_steps() -> u32 {
    5
}
fn default_true() -> bool {
    true
}

/// Controller, detector, and mitigation knobs shared by all DERs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    /// Primary proportional feedback on (voltage, current).
    #[serde(default = "default_proportional")]
    pub proportional: (f64, f64),
    /// Primary integral gain on the voltage error.
    #[serde(default = "default_integral")]
    pub integral: f64,
    /// Consensus weight for links that do not override it.
    #[serde(default = "default_consensus_weight")]
    pub consensus_weight: f64,
    /// Sharing-error level that counts as "attack impact eliminated".
    #[serde(default = "default_sharing_threshold")]
    pub sharing_threshold: f64,
    /// The secondary layer updates every this-many primary steps.
    #[serde(default = "default_secondary_period")]
    pub secondary_period: u32,
    /// Observer eigenvalues, shared by every link.
    #[serde(default = "default_observer_poles")]
    pub observer_poles: (f64, f64),
    /// In-bound steps required before a latched alarm clears.
    #[serde(default = "default_alarm_clear_streak")]
    pub alarm_clear_streak: u32,
    /// Steps after a model-changing event during which alarms are suppressed.
    #[serde(default = "default_detection_grace_steps")]
    pub detection_grace_steps: u32,
    /// Master switch for the correction layer (alarms still latch when off).
    #[serde(default = "default_true")]
    pub mitigation: bool,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            proportional: default_proportional(),
            integral: default_integral(),
            consensus_weight: default_consensus_weight(),
            sharing_threshold: default_sharing_threshold(),
            secondary_period: default_secondary_period(),
            observer_poles: default_observer_poles(),
            alarm_clear_streak: default_alarm_clear_streak(),
            detection_grace_steps: default_detection_grace_steps(),
            mitigation: default_true(),
        }
    }
}

/// Componentwise noise bounds; every draw is uniform on `[-bound, +bound]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Measurement noise bound (V, A) added to every sensed output.
    #[serde(default)]
    pub measurement: (f64, f64),
    /// Process noise bound (V, A) added to every state after each step.
    #[serde(default)]
    pub process: (f64, f64),
    /// Extra allowance folded into the process bound *inside the residual
    /// envelope only*, covering the coupled-plant discretization mismatch.
    /// Calibrate on an attack-free run; leave zero for the per-DER plant.
    #[serde(default)]
    pub mismatch_allowance: (f64, f64),
}

/// One tie line plus its communication link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineConfig {
    pub nodes: (u32, u32),
    pub resistance: f64,
    #[serde(default)]
    pub inductance: f64,
    /// Consensus weight override for this link (both directions).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comm_weight: Option<f64>,
}

/// The grid present at t = 0. DERs declared in `[[ders]]` but absent from
/// `nodes` run standalone (no lines, no communication) until a plug-in event
/// connects them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyConfig {
    pub nodes: Vec<u32>,
    #[serde(default)]
    pub lines: Vec<LineConfig>,
}

/// One DER: identity, physical parameters, and the state it starts from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerConfig {
    pub id: u32,
    #[serde(flatten)]
    pub params: DerParams,
    /// Initial (voltage, converter current).
    #[serde(default)]
    pub initial_state: (f64, f64),
}

/// Sensor placement. `auto` runs the spanning-tree planner on the current
/// topology (and re-runs it after every topology event); otherwise the listed
/// `(node, toward)` positions are used as-is for the whole run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    #[serde(default = "default_true")]
    pub auto: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub positions: Vec<(u32, u32)>,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self { auto: true, positions: Vec::new() }
    }
}

/// An attack-catalog entry: an injection spec plus scheduling identity.
/// Entries start enabled unless stated otherwise; timeline events can toggle
/// them by id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(flatten)]
    pub spec: AttackSpec,
}

/// A timeline entry; `time` is quantized to the nearest step by the engine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub time: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Everything that can change mid-run. Structural kinds rebuild the plant
/// and re-synthesize the affected observers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EventKind {
    /// Replace one DER's local load.
    LoadChange { node: u32, load: ZipLoad },
    /// Connect a standalone DER through the listed lines.
    DerPlugin { node: u32, lines: Vec<LineConfig> },
    /// Remove one tie line (and its communication link).
    LineCut { nodes: (u32, u32) },
    /// Enable an attack-catalog entry.
    AttackStart { id: String },
    /// Disable an attack-catalog entry.
    AttackStop { id: String },
}

/// A full run description. See the bundled `scenarios/` files for the
/// concrete TOML shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Sampling period of the primary loop and the simulation itself [s].
    pub t_samp: f64,
    /// Seed for every noise draw in the run.
    #[serde(default)]
    pub seed: u64,
    /// Relative error of the local load-current estimate used in mitigation.
    #[serde(default)]
    pub load_error: f64,
    #[serde(default)]
    pub plant_model: PlantModel,
    pub horizons: Horizons,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    pub topology: TopologyConfig,
    pub ders: Vec<DerConfig>,
    #[serde(default)]
    pub sensors: SensorConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attacks: Vec<AttackConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<TimedEvent>,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = toml::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String, ScenarioError> {
        Ok(toml::to_string(self)?)
    }

    /// Map of all declared DERs, keyed by id.
    pub fn der_map(&self) -> BTreeMap<u32, DerParams> {
        self.ders.iter().map(|d| (d.id, d.params.clone())).collect()
    }

    /// Builds the t = 0 electrical/communication graph.
    pub fn build_initial_topology(&self) -> Result<MicrogridTopology, ScenarioError> {
        let mut topo = MicrogridTopology::new(self.topology.nodes.iter().copied());
        for line in &self.topology.lines {
            let (a, b) = line.nodes;
            topo.add_line(
                a,
                b,
                LineParams { resistance: line.resistance, inductance: line.inductance },
                line.comm_weight.unwrap_or(self.control.consensus_weight),
            )?;
        }
        Ok(topo)
    }

    /// Full semantic validation; every error names the offending field.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.t_samp > 0.0) || !self.t_samp.is_finite() {
            return Err(invalid(format!("t_samp: must be positive and finite, got {}", self.t_samp)));
        }
        if !(self.load_error > -1.0) || !self.load_error.is_finite() {
            return Err(invalid(format!(
                "load_error: relative error must be finite and above -1, got {}",
                self.load_error
            )));
        }

        let h = &self.horizons;
        if !(h.end > 0.0) || !h.end.is_finite() {
            return Err(invalid(format!("horizons.end: must be positive and finite, got {}", h.end)));
        }
        for (name, value) in [
            ("horizons.primary_start", h.primary_start),
            ("horizons.secondary_start", h.secondary_start),
            ("horizons.detector_start", h.detector_start),
        ] {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(invalid(format!("{name}: must be nonnegative and finite, got {value}")));
            }
        }
        if h.secondary_start < h.primary_start || h.detector_start < h.secondary_start {
            return Err(invalid(format!(
                "horizons: starts must be ordered primary ({}) <= secondary ({}) <= detector ({})",
                h.primary_start, h.secondary_start, h.detector_start
            )));
        }

        let c = &self.control;
        if !(c.integral.is_finite() && c.proportional.0.is_finite() && c.proportional.1.is_finite()) {
            return Err(invalid("control: gains must be finite"));
        }
        if !(c.consensus_weight > 0.0) || !c.consensus_weight.is_finite() {
            return Err(invalid(format!(
                "control.consensus_weight: must be positive, got {}",
                c.consensus_weight
            )));
        }
        if !(c.sharing_threshold > 0.0) {
            return Err(invalid(format!(
                "control.sharing_threshold: must be positive, got {}",
                c.sharing_threshold
            )));
        }
        if c.secondary_period == 0 {
            return Err(invalid("control.secondary_period: must be at least 1"));
        }
        for pole in [c.observer_poles.0, c.observer_poles.1] {
            if !(pole.abs() < 1.0) {
                return Err(invalid(format!(
                    "control.observer_poles: each pole must lie strictly inside the unit circle, got {pole}"
                )));
            }
        }

        for (name, pair) in [
            ("noise.measurement", self.noise.measurement),
            ("noise.process", self.noise.process),
            ("noise.mismatch_allowance", self.noise.mismatch_allowance),
        ] {
            if !(pair.0 >= 0.0 && pair.1 >= 0.0) || !pair.0.is_finite() || !pair.1.is_finite() {
                return Err(invalid(format!(
                    "{name}: bounds must be nonnegative and finite, got ({}, {})",
                    pair.0, pair.1
                )));
            }
        }

        if self.ders.is_empty() {
            return Err(invalid("ders: at least one DER is required"));
        }
        let mut der_ids = BTreeSet::new();
        for der in &self.ders {
            if !der_ids.insert(der.id) {
                return Err(invalid(format!("ders: duplicate id {}", der.id)));
            }
            der.params
                .validate(der.id)
                .map_err(|e| invalid(format!("ders (id {}): {e}", der.id)))?;
            if !der.initial_state.0.is_finite() || !der.initial_state.1.is_finite() {
                return Err(invalid(format!("ders (id {}): initial_state must be finite", der.id)));
            }
        }

        if self.topology.nodes.is_empty() {
            return Err(invalid("topology.nodes: at least one connected node is required"));
        }
        let mut present = BTreeSet::new();
        for &n in &self.topology.nodes {
            if !der_ids.contains(&n) {
                return Err(invalid(format!("topology.nodes: {n} has no [[ders]] entry")));
            }
            if !present.insert(n) {
                return Err(invalid(format!("topology.nodes: duplicate node {n}")));
            }
        }
        let mut lines = BTreeSet::new();
        for (idx, line) in self.topology.lines.iter().enumerate() {
            validate_line(&format!("topology.lines[{idx}]"), line, &present, &mut lines)?;
        }
        let topo = self.build_initial_topology()?;
        if !topo.is_connected() {
            return Err(invalid("topology: the initial grid must be connected"));
        }

        if !self.sensors.auto {
            for (idx, &(at, toward)) in self.sensors.positions.iter().enumerate() {
                if !lines.contains(&ordered(at, toward)) {
                    return Err(invalid(format!(
                        "sensors.positions[{idx}]: ({at}, {toward}) is not an initial tie line"
                    )));
                }
            }
        } else if !self.sensors.positions.is_empty() {
            return Err(invalid(
                "sensors.positions: remove the explicit positions or set auto = false",
            ));
        }

        let mut attack_ids = BTreeSet::new();
        for (idx, attack) in self.attacks.iter().enumerate() {
            let path = format!("attacks[{idx}]");
            if let Some(id) = &attack.id {
                if !attack_ids.insert(id.clone()) {
                    return Err(invalid(format!("{path}: duplicate id {id:?}")));
                }
            }
            let spec = &attack.spec;
            if spec.receiver == spec.sender {
                return Err(invalid(format!("{path}: receiver and sender must differ")));
            }
            for n in [spec.receiver, spec.sender] {
                if !der_ids.contains(&n) {
                    return Err(invalid(format!("{path}: node {n} has no [[ders]] entry")));
                }
            }
            let s = &spec.signal;
            for (name, value) in [
                ("amplitude", s.amplitude),
                ("frequency", s.frequency),
                ("slope", s.slope),
                ("start_time", s.start_time),
            ] {
                if !value.is_finite() {
                    return Err(invalid(format!("{path}.{name}: must be finite, got {value}")));
                }
            }
            if s.start_time < 0.0 {
                return Err(invalid(format!("{path}.start_time: must be nonnegative")));
            }
            if let Some(windows) = &s.active_windows {
                let mut last_off = f64::NEG_INFINITY;
                for &(on, off) in windows {
                    if !(on < off) {
                        return Err(invalid(format!(
                            "{path}.active_windows: window ({on}, {off}) must satisfy on < off"
                        )));
                    }
                    if on < last_off {
                        return Err(invalid(format!(
                            "{path}.active_windows: windows must be disjoint and ascending"
                        )));
                    }
                    last_off = off;
                }
            }
        }

        // Events are checked in order against the evolving node/line sets, so
        // the engine can apply them without structural surprises.
        let mut last_time = 0.0;
        for (idx, event) in self.events.iter().enumerate() {
            let path = format!("events[{idx}]");
            if !(event.time >= 0.0) || !event.time.is_finite() {
                return Err(invalid(format!("{path}.time: must be nonnegative and finite")));
            }
            if event.time < last_time {
                return Err(invalid(format!("{path}.time: event times must be nondecreasing")));
            }
            if event.time > h.end {
                return Err(invalid(format!("{path}.time: {} is past horizons.end", event.time)));
            }
            last_time = event.time;
            match &event.kind {
                EventKind::LoadChange { node, load } => {
                    if !der_ids.contains(node) {
                        return Err(invalid(format!("{path}: node {node} has no [[ders]] entry")));
                    }
                    if !(load.impedance > 0.0) || !load.impedance.is_finite() {
                        return Err(invalid(format!(
                            "{path}.load.impedance: must be positive, got {}",
                            load.impedance
                        )));
                    }
                    if !load.constant_current.is_finite() || !(load.constant_power >= 0.0) {
                        return Err(invalid(format!("{path}.load: branch values out of range")));
                    }
                }
                EventKind::DerPlugin { node, lines: new_lines } => {
                    if !der_ids.contains(node) {
                        return Err(invalid(format!("{path}: node {node} has no [[ders]] entry")));
                    }
                    if present.contains(node) {
                        return Err(invalid(format!("{path}: node {node} is already connected")));
                    }
                    if new_lines.is_empty() {
                        return Err(invalid(format!("{path}: a plug-in needs at least one line")));
                    }
                    present.insert(*node);
                    for (lidx, line) in new_lines.iter().enumerate() {
                        let lpath = format!("{path}.lines[{lidx}]");
                        validate_line(&lpath, line, &present, &mut lines)?;
                        let (a, b) = line.nodes;
                        if a != *node && b != *node {
                            return Err(invalid(format!(
                                "{lpath}: must be incident to the plugged node {node}"
                            )));
                        }
                    }
                }
                EventKind::LineCut { nodes } => {
                    if !lines.remove(&ordered(nodes.0, nodes.1)) {
                        return Err(invalid(format!(
                            "{path}: line ({}, {}) does not exist at that time",
                            nodes.0, nodes.1
                        )));
                    }
                }
                EventKind::AttackStart { id } | EventKind::AttackStop { id } => {
                    if !attack_ids.contains(id) {
                        return Err(invalid(format!("{path}: unknown attack id {id:?}")));
                    }
                }
            }
        }

        Ok(())
    }
}

fn ordered(a: u32, b: u32) -> (u32, u32) {
    (a.min(b), a.max(b))
}

fn validate_line(
    path: &str,
    line: &LineConfig,
    present: &BTreeSet<u32>,
    lines: &mut BTreeSet<(u32, u32)>,
) -> Result<(), ScenarioError> {
    let (a, b) = line.nodes;
    if a == b {
        return Err(invalid(format!("{path}: a line cannot join node {a} to itself")));
    }
    for n in [a, b] {
        if !present.contains(&n) {
            return Err(invalid(format!("{path}: node {n} is not connected at that time")));
        }
    }
    if !(line.resistance > 0.0) || !line.resistance.is_finite() {
        return Err(invalid(format!("{path}.resistance: must be positive, got {}", line.resistance)));
    }
    if !(line.inductance >= 0.0) || !line.inductance.is_finite() {
        return Err(invalid(format!("{path}.inductance: must be nonnegative, got {}", line.inductance)));
    }
    if let Some(w) = line.comm_weight {
        if !(w > 0.0) || !w.is_finite() {
            return Err(invalid(format!("{path}.comm_weight: must be positive, got {w}")));
        }
    }
    if !lines.insert(ordered(a, b)) {
        return Err(invalid(format!("{path}: duplicate line ({a}, {b})")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{BiasShape, TargetComponent};

    fn demo_toml() -> &'static str {
        r#"
t_samp = 0.001
seed = 7
load_error = 0.01

[horizons]
primary_start = 0.0
secondary_start = 1.0
detector_start = 1.5
end = 10.0

[control]
integral = 0.05
consensus_weight = 0.02
secondary_period = 10

[noise]
measurement = [0.001, 0.001]
process = [0.0005, 0.0005]

[topology]
nodes = [1, 2, 3]

[[topology.lines]]
nodes = [1, 2]
resistance = 1.5

[[topology.lines]]
nodes = [2, 3]
resistance = 1.2
comm_weight = 0.03

[[ders]]
id = 1
filter_resistance = 0.2
filter_inductance = 0.001
filter_capacitance = 0.0005
rated_current = 10.0
v_ref = 40.0
load = { impedance = 10.0, constant_current = 0.0, constant_power = 0.0 }

[[ders]]
id = 2
filter_resistance = 0.2
filter_inductance = 0.001
filter_capacitance = 0.0005
rated_current = 10.0
v_ref = 40.0
load = { impedance = 8.0, constant_current = 1.0, constant_power = 0.0 }

[[ders]]
id = 3
filter_resistance = 0.2
filter_inductance = 0.001
filter_capacitance = 0.0005
rated_current = 20.0
v_ref = 40.0
load = { impedance = 10.0, constant_current = 0.0, constant_power = 40.0 }

[[ders]]
id = 4
filter_resistance = 0.2
filter_inductance = 0.001
filter_capacitance = 0.0005
rated_current = 10.0
v_ref = 40.0
load = { impedance = 10.0, constant_current = 0.0, constant_power = 0.0 }

[sensors]
auto = true

[[attacks]]
id = "probe"
enabled = false
receiver = 2
sender = 1
shape = "sine"
amplitude = 1.5
frequency = 0.5
start_time = 4.0
target = "current"

[[events]]
time = 3.0
kind = "der-plugin"
node = 4
lines = [{ nodes = [3, 4], resistance = 1.5 }]

[[events]]
time = 4.0
kind = "attack-start"
id = "probe"

[[events]]
time = 5.0
kind = "load-change"
node = 1
load = { impedance = 8.0, constant_current = 0.5, constant_power = 0.0 }

[[events]]
time = 6.0
kind = "attack-stop"
id = "probe"

[[events]]
time = 8.0
kind = "line-cut"
nodes = [2, 3]
"#
    }

    #[test]
    fn parsing_reads_every_section() {
        let sc = Scenario::from_toml_str(demo_toml()).unwrap();
        assert_eq!(sc.seed, 7);
        assert_eq!(sc.control.secondary_period, 10);
        assert_eq!(sc.control.observer_poles, detect::DEFAULT_OBSERVER_POLES);
        assert_eq!(sc.ders.len(), 4);
        assert_eq!(sc.topology.lines[1].comm_weight, Some(0.03));
        assert_eq!(sc.attacks[0].spec.signal.shape, BiasShape::Sine);
        assert_eq!(sc.attacks[0].spec.signal.target, TargetComponent::Current);
        assert!(!sc.attacks[0].enabled);
        assert_eq!(sc.events.len(), 5);
        assert!(matches!(sc.events[0].kind, EventKind::DerPlugin { node: 4, .. }));
        assert!(matches!(sc.events[4].kind, EventKind::LineCut { nodes: (2, 3) }));
    }

    #[test]
    fn serialization_round_trips_to_the_same_scenario() {
        let first = Scenario::from_toml_str(demo_toml()).unwrap();
        let text = first.to_toml_string().unwrap();
        let second = Scenario::from_toml_str(&text).unwrap();
        assert_eq!(first, second);
        let third = Scenario::from_toml_str(&second.to_toml_string().unwrap()).unwrap();
        assert_eq!(second, third);
    }

    #[test]
    fn validation_names_the_offending_field() {
        let cases: &[(&str, &str, &str)] = &[
            ("t_samp = 0.001", "t_samp = 0.0", "t_samp"),
            ("detector_start = 1.5", "detector_start = 0.5", "horizons"),
            ("secondary_period = 10", "secondary_period = 0", "secondary_period"),
            ("measurement = [0.001, 0.001]", "measurement = [-0.001, 0.001]", "noise.measurement"),
            ("nodes = [1, 2, 3]", "nodes = [1, 2, 3, 9]", "topology.nodes"),
            ("resistance = 1.2", "resistance = -1.2", "resistance"),
            ("id = \"probe\"\nenabled = false\nreceiver = 2", "id = \"probe\"\nenabled = false\nreceiver = 99", "attacks[0]"),
            ("time = 4.0\nkind = \"attack-start\"\nid = \"probe\"", "time = 4.0\nkind = \"attack-start\"\nid = \"ghost\"", "events[1]"),
            ("nodes = [2, 3]\n", "nodes = [1, 3]\n", "events[4]"),
        ];
        for (from, to, expected) in cases {
            let text = demo_toml().replacen(from, to, 1);
            assert_ne!(text, demo_toml(), "pattern {from:?} not found");
            let err = Scenario::from_toml_str(&text).unwrap_err().to_string();
            assert!(
                err.contains(expected),
                "expected {expected:?} in the error for {to:?}, got: {err}"
            );
        }
    }

    #[test]
    fn event_order_violations_are_rejected() {
        let text = demo_toml().replacen("time = 5.0", "time = 3.5", 1);
        let err = Scenario::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("nondecreasing"), "got: {err}");
    }

    #[test]
    fn plugging_an_already_connected_node_is_rejected() {
        let text = demo_toml().replacen("node = 4\nlines = [{ nodes = [3, 4]", "node = 3\nlines = [{ nodes = [3, 2]", 1);
        let err = Scenario::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("already connected"), "got: {err}");
    }

    #[test]
    fn standalone_ders_are_allowed_but_disconnected_grids_are_not() {
        // DER 4 is standalone until its plug-in event: fine.
        assert!(Scenario::from_toml_str(demo_toml()).is_ok());
        // An initial island that is not a standalone unit is rejected.
        let text = demo_toml().replacen("nodes = [1, 2, 3]", "nodes = [1, 2, 3, 4]", 1);
        let err = Scenario::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("connected"), "got: {err}");
    }

    #[test]
    fn initial_topology_carries_line_parameters_and_weights() {
        let sc = Scenario::from_toml_str(demo_toml()).unwrap();
        let topo = sc.build_initial_topology().unwrap();
        assert_eq!(topo.node_count(), 3);
        assert_eq!(topo.line(1, 2).unwrap().resistance, 1.5);
        assert_eq!(topo.comm_weight(1, 2), Some(0.02)); // falls back to the control default
        assert_eq!(topo.comm_weight(2, 3), Some(0.03)); // per-line override
    }
}
