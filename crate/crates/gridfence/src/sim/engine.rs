//! The deterministic simulation loop.
//!
//! Every step runs the same fixed sequence:
//!
//! 1. timeline events scheduled for this step are applied;
//! 2. every DER output is sensed (measurement noise), and the deployed line
//!    sensors read their line currents;
//! 3. active attacks corrupt the transmitted copies, one per link;
//! 4. each receiving observer updates its residual, bound, and alarm;
//! 5. alarmed links observe/reconstruct the bias and correct (or discard)
//!    the received data;
//! 6. the secondary layer (on its own period) and then the primary layer
//!    compute the converter commands;
//! 7. the plant advances, with process noise.
//!
//! The trace records the system between phases 6 and 7, i.e. what every
//! layer saw and decided at that instant. All randomness comes from one
//! seeded generator with a pinned draw order (per-DER measurement noise
//! ascending by id, voltage then current; then line sensors in plan order;
//! process noise in the same per-DER order after the advance), so runs are
//! reproducible byte for byte.

use nalgebra::{DVector, Vector2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

use crate::control::{self, PrimaryGains, SecondaryState};
use crate::detect::{
    self, synthesize_uio, update_alarm, uio_step, DetectError, ResidualState, UioGains,
};
use crate::mitigate::{
    self, correct_measurement, derive_reconstruction_gains, observe_voltage_bias,
    reconstruct_current_bias, reconstruction_eigenvalue, ReconstructionGains, ReconstructionState,
};
use crate::model::{
    build_continuous, build_global_plant, discretize, linearize_zip, ContinuousModel, DerParams,
    DiscreteModel, EquivalentLoad, GlobalPlant, ModelError,
};
use crate::sim::scenario::{EventKind, PlantModel, Scenario, ScenarioError};
use crate::sim::trace::{DerColumn, LinkColumn, RunSummary, Trace, TraceSchema};
use crate::topology::{
    deploy_sensors, LineParams, MicrogridTopology, SensorPlan, TopologyError,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("observer synthesis failed: {0}")]
    Detect(#[from] DetectError),
    #[error("sensor planning failed on the island containing node {node}: {source}")]
    Planning { node: u32, source: TopologyError },
}

/// A finished run.
pub struct SimOutput {
    pub trace: Trace,
    pub summary: RunSummary,
}

/// Runs a validated scenario start to finish.
pub fn run_scenario(scenario: &Scenario) -> Result<SimOutput, EngineError> {
    let mut engine = Engine::new(scenario)?;
    while engine.step < engine.steps_total {
        engine.step_once();
    }
    Ok(engine.finish())
}

struct DerRuntime {
    params: DerParams,
    load: EquivalentLoad,
    cont: ContinuousModel,
    model: DiscreteModel,
    primary: PrimaryGains,
    secondary: SecondaryState,
    alpha: f64,
    sharing: f64,
    /// Measurement taken this step (phase 2).
    y_meas: Vector2<f64>,
    /// Previous step's measured voltage; drives the capacitor-current term
    /// of the local balance estimate.
    v_meas_prev: Option<f64>,
    /// Input applied this step (phase 6).
    u_now: f64,
    /// Input applied on the previous step; what the observers consume.
    u_prev: f64,
}

struct LinkRuntime {
    uio: UioGains,
    /// `None` when the sender's reconstruction eigenvalue is not a
    /// contraction; such links fall back to discarding on alarms.
    recon_gains: Option<ReconstructionGains>,
    /// `None` until the detectors start (or after a model-changing event);
    /// initialized from the first measurement that arrives afterwards.
    residual: Option<ResidualState>,
    recon: ReconstructionState,
    /// Post-event steps during which the alarm automaton is suppressed.
    grace: u32,
    /// Residual of the previous step, for the reconstruction recursion.
    r_prev: Vector2<f64>,
    /// Whether the current alarm episode could observe its line current.
    observable: bool,
    y_s: Vector2<f64>,
    y_co: Vector2<f64>,
    phi_true: Vector2<f64>,
}

enum PlantState {
    Coupled { plant: GlobalPlant, x: DVector<f64> },
    PerDer { x: BTreeMap<u32, Vector2<f64>> },
}

pub struct Engine {
    t_samp: f64,
    load_error: f64,
    control_cfg: crate::sim::scenario::ControlConfig,
    rho_bar: Vector2<f64>,
    omega_bar: Vector2<f64>,
    /// Process bound plus the mismatch allowance; what the envelope uses.
    omega_detect: Vector2<f64>,
    auto_sensors: bool,

    steps_total: u64,
    primary_start: u64,
    secondary_start: u64,
    detector_start: u64,

    topo: MicrogridTopology,
    plan: SensorPlan,
    ders: BTreeMap<u32, DerRuntime>,
    rated: BTreeMap<u32, f64>,
    links: BTreeMap<(u32, u32), LinkRuntime>,
    plant: PlantState,
    attacks: Vec<crate::sim::scenario::AttackConfig>,
    attack_enabled: Vec<bool>,
    /// (step, index into the scenario's event list), consumed front to back.
    events: Vec<(u64, usize)>,
    event_kinds: Vec<EventKind>,
    next_event: usize,
    line_readings: BTreeMap<(u32, u32), f64>,
    rng: ChaCha8Rng,
    step: u64,
    trace: Trace,
}

fn draw_bounded(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    // Zero-width ranges are valid and still consume one draw, so the noise
    // schedule does not depend on which bounds are zero.
    rng.random_range(-bound..=bound)
}

fn round_step(time: f64, t_samp: f64) -> u64 {
    (time / t_samp).round() as u64
}

impl Engine {
    pub fn new(scenario: &Scenario) -> Result<Self, EngineError> {
        scenario.validate()?;
        let t_samp = scenario.t_samp;
        let topo = scenario.build_initial_topology()?;

        let mut ders = BTreeMap::new();
        for cfg in &scenario.ders {
            let load = cfg.params.equivalent_load();
            let incident: Vec<f64> = incident_resistances(&topo, cfg.id);
            let cont = build_continuous(&cfg.params, &load, &incident);
            let model = discretize(&cont, t_samp)?;
            ders.insert(
                cfg.id,
                DerRuntime {
                    params: cfg.params.clone(),
                    load,
                    cont,
                    model,
                    primary: PrimaryGains {
                        proportional: scenario.control.proportional,
                        integral: scenario.control.integral,
                        accumulated_error: 0.0,
                    },
                    secondary: SecondaryState {
                        rated_current: cfg.params.rated_current,
                        integrator: 0.0,
                    },
                    alpha: 0.0,
                    sharing: 0.0,
                    y_meas: Vector2::zeros(),
                    v_meas_prev: None,
                    u_now: 0.0,
                    u_prev: 0.0,
                },
            );
        }
        let rated = ders.iter().map(|(&n, d)| (n, d.params.rated_current)).collect();

        let mut links = BTreeMap::new();
        for (a, b) in topo.line_keys().collect::<Vec<_>>() {
            for key in [(a, b), (b, a)] {
                links.insert(key, new_link_runtime(&ders, key, &scenario.control)?);
            }
        }

        let plan = if scenario.sensors.auto {
            plan_sensors(&topo)?
        } else {
            SensorPlan::from_positions(scenario.sensors.positions.iter().copied())
        };

        let mut plant = build_plant(scenario.plant_model, &ders, &topo, t_samp)?;
        for cfg in &scenario.ders {
            set_state(
                &mut plant,
                cfg.id,
                Vector2::new(cfg.initial_state.0, cfg.initial_state.1),
            );
        }

        // The trace schema covers every link that ever exists.
        let mut all_links: BTreeSet<(u32, u32)> = links.keys().copied().collect();
        for event in &scenario.events {
            if let EventKind::DerPlugin { lines, .. } = &event.kind {
                for line in lines {
                    let (a, b) = line.nodes;
                    all_links.insert((a, b));
                    all_links.insert((b, a));
                }
            }
        }
        let schema = TraceSchema::new(ders.keys().copied(), all_links);

        let mut events: Vec<(u64, usize)> = scenario
            .events
            .iter()
            .enumerate()
            .map(|(idx, e)| (round_step(e.time, t_samp), idx))
            .collect();
        events.sort_by_key(|&(step, idx)| (step, idx));

        Ok(Self {
            t_samp,
            load_error: scenario.load_error,
            control_cfg: scenario.control.clone(),
            rho_bar: Vector2::new(scenario.noise.measurement.0, scenario.noise.measurement.1),
            omega_bar: Vector2::new(scenario.noise.process.0, scenario.noise.process.1),
            omega_detect: Vector2::new(
                scenario.noise.process.0 + scenario.noise.mismatch_allowance.0,
                scenario.noise.process.1 + scenario.noise.mismatch_allowance.1,
            ),
            auto_sensors: scenario.sensors.auto,
            steps_total: round_step(scenario.horizons.end, t_samp),
            primary_start: round_step(scenario.horizons.primary_start, t_samp),
            secondary_start: round_step(scenario.horizons.secondary_start, t_samp),
            detector_start: round_step(scenario.horizons.detector_start, t_samp),
            topo,
            plan,
            ders,
            rated,
            links,
            plant,
            attacks: scenario.attacks.clone(),
            attack_enabled: scenario.attacks.iter().map(|a| a.enabled).collect(),
            events,
            event_kinds: scenario.events.iter().map(|e| e.kind.clone()).collect(),
            next_event: 0,
            line_readings: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(scenario.seed),
            step: 0,
            trace: Trace::new(schema),
        })
    }

    /// Current true state of one DER.
    pub fn true_state(&self, node: u32) -> Vector2<f64> {
        get_state(&self.plant, node)
    }

    pub fn current_step(&self) -> u64 {
        self.step
    }

    pub fn sensor_plan(&self) -> &SensorPlan {
        &self.plan
    }

    pub fn finish(self) -> SimOutput {
        let summary = RunSummary::from_trace(&self.trace, self.t_samp);
        SimOutput { trace: self.trace, summary }
    }

    /// Runs one full step (phases 1–7) and records the trace row.
    pub fn step_once(&mut self) {
        let t = self.step as f64 * self.t_samp;

        // 1. Timeline events.
        while self.next_event < self.events.len() && self.events[self.next_event].0 == self.step {
            let idx = self.events[self.next_event].1;
            let kind = self.event_kinds[idx].clone();
            self.apply_event(&kind)
                .expect("validated scenarios cannot produce unappliable events");
            self.next_event += 1;
        }

        // 2. Sensing.
        for (&node, der) in self.ders.iter_mut() {
            let truth = get_state(&self.plant, node);
            der.y_meas = Vector2::new(
                truth.x + draw_bounded(&mut self.rng, self.rho_bar.x),
                truth.y + draw_bounded(&mut self.rng, self.rho_bar.y),
            );
        }
        self.line_readings.clear();
        for (at, toward) in self.plan.positions().collect::<Vec<_>>() {
            let Some(line) = self.topo.line(at, toward) else { continue };
            let v_at = get_state(&self.plant, at).x;
            let v_toward = get_state(&self.plant, toward).x;
            let truth = (v_at - v_toward) / line.resistance;
            self.line_readings
                .insert((at, toward), truth + draw_bounded(&mut self.rng, self.rho_bar.y));
        }

        // 3. Attacks corrupt the transmitted copies.
        for lr in self.links.values_mut() {
            lr.phi_true = Vector2::zeros();
        }
        for (attack, &enabled) in self.attacks.iter().zip(&self.attack_enabled) {
            if !enabled {
                continue;
            }
            let key = (attack.spec.receiver, attack.spec.sender);
            if let Some(lr) = self.links.get_mut(&key) {
                lr.phi_true += attack.spec.signal.bias_value(t);
            }
        }
        {
            let ders = &self.ders;
            for ((_, sender), lr) in self.links.iter_mut() {
                lr.y_s = ders[sender].y_meas + lr.phi_true;
            }
        }

        // 4. Detection.
        if self.step >= self.detector_start {
            let ders = &self.ders;
            let rho = self.rho_bar;
            let omega = self.omega_detect;
            let clear_streak = self.control_cfg.alarm_clear_streak;
            for ((_, sender), lr) in self.links.iter_mut() {
                match lr.residual.as_mut() {
                    None => {
                        lr.residual = Some(ResidualState::initialize(&lr.uio, lr.y_s));
                        lr.r_prev = Vector2::zeros();
                    }
                    Some(st) => {
                        lr.r_prev = st.r;
                        uio_step(st, &lr.uio, lr.y_s, ders[sender].u_prev);
                    }
                }
                let st = lr.residual.as_mut().expect("initialized above");
                st.r_bound = detect::residual_bound_step(&lr.uio, rho, omega, st.step);
                if lr.grace > 0 {
                    lr.grace -= 1;
                } else {
                    update_alarm(st, clear_streak);
                }
            }
        }

        // 5. Mitigation.
        {
            let topo = &self.topo;
            let plan = &self.plan;
            let readings = &self.line_readings;
            let ders = &self.ders;
            let load_error = self.load_error;
            let t_samp = self.t_samp;
            let mitigation_on = self.control_cfg.mitigation;
            for (&(receiver, sender), lr) in self.links.iter_mut() {
                lr.y_co = lr.y_s;
                let Some(st) = lr.residual.as_ref() else { continue };
                let (alarm, local_step) = (st.alarm, st.step);
                if !alarm {
                    if lr.recon.active {
                        lr.recon.reset();
                        lr.observable = false;
                    }
                    continue;
                }
                if !mitigation_on {
                    continue;
                }
                let der = &ders[&receiver];
                let y_local = der.y_meas;
                let resolved = if lr.recon_gains.is_some() {
                    resolve_receiver_line_current(
                        topo, plan, readings, der, receiver, sender, load_error, t_samp,
                    )
                } else {
                    None
                };
                if !lr.recon.active {
                    match resolved {
                        Some(i_line) => {
                            let r_line = topo
                                .line(receiver, sender)
                                .expect("links exist only on live lines")
                                .resistance;
                            let phi_v = observe_voltage_bias(lr.y_s, y_local, r_line, i_line);
                            lr.recon.activate(phi_v, local_step);
                            lr.observable = true;
                        }
                        None => {
                            lr.recon.activate(0.0, local_step);
                            lr.observable = false;
                        }
                    }
                } else if lr.observable {
                    match resolved {
                        Some(i_line) => {
                            let r_line = topo
                                .line(receiver, sender)
                                .expect("links exist only on live lines")
                                .resistance;
                            let phi_v = observe_voltage_bias(lr.y_s, y_local, r_line, i_line);
                            let gains = lr.recon_gains.as_ref().expect("observable links keep gains");
                            let st = lr.residual.as_ref().expect("alarmed links have state");
                            reconstruct_current_bias(
                                &mut lr.recon,
                                gains,
                                &lr.uio,
                                &ders[&sender].model.a_d,
                                st.r,
                                lr.r_prev,
                                phi_v,
                            );
                        }
                        None => lr.observable = false,
                    }
                }
                lr.y_co = correct_measurement(&mut lr.recon, lr.y_s, y_local, lr.observable, local_step);
            }
        }

        // 6. Secondary (on its period), then primary.
        let secondary_active = self.step >= self.secondary_start;
        let secondary_tick = secondary_active
            && (self.step - self.secondary_start) % u64::from(self.control_cfg.secondary_period) == 0;
        let primary_active = self.step >= self.primary_start;
        {
            let links = &self.links;
            let topo = &self.topo;
            let rated = &self.rated;
            for (&node, der) in self.ders.iter_mut() {
                let incoming: Vec<(f64, f64, Vector2<f64>)> = links
                    .range((node, u32::MIN)..=(node, u32::MAX))
                    .map(|(&(_, from), lr)| {
                        let weight = topo
                            .comm_weight(node, from)
                            .expect("links exist only on live lines");
                        (weight, rated[&from], lr.y_co)
                    })
                    .collect();
                if secondary_active {
                    let pairs: Vec<(f64, Vector2<f64>)> =
                        incoming.iter().map(|&(_, rated, y)| (rated, y)).collect();
                    der.sharing = control::sharing_error(der.params.rated_current, der.y_meas, &pairs);
                    if secondary_tick {
                        der.alpha = control::secondary_input(&mut der.secondary, der.y_meas, &incoming);
                    }
                } else {
                    der.sharing = 0.0;
                }
                der.u_now = if primary_active {
                    control::primary_input(&mut der.primary, der.y_meas, der.params.v_ref, der.alpha)
                } else {
                    0.0
                };
            }
        }

        self.record_row(t);

        // 7. Plant advance plus process noise.
        match &mut self.plant {
            PlantState::Coupled { plant, x } => {
                let n = plant.node_ids.len();
                let mut u = DVector::<f64>::zeros(n);
                let mut il = DVector::<f64>::zeros(n);
                for (pos, node) in plant.node_ids.iter().enumerate() {
                    let der = &self.ders[node];
                    u[pos] = der.u_now;
                    il[pos] = der.load.current;
                }
                *x = &plant.a_d * &*x + &plant.b_d * u + &plant.m_d * il;
                for (pos, _) in plant.node_ids.iter().enumerate() {
                    x[2 * pos] += draw_bounded(&mut self.rng, self.omega_bar.x);
                    x[2 * pos + 1] += draw_bounded(&mut self.rng, self.omega_bar.y);
                }
            }
            PlantState::PerDer { x } => {
                let topo = &self.topo;
                let prev: BTreeMap<u32, Vector2<f64>> = x.clone();
                for (&node, state) in x.iter_mut() {
                    let der = &self.ders[&node];
                    let mut d = der.load.current;
                    for neighbor in topo.neighbors(node) {
                        let r = topo.line(node, neighbor).expect("neighbor implies line").resistance;
                        d -= prev[&neighbor].x / r;
                    }
                    *state = der.model.a_d * *state
                        + der.model.b_d * der.u_now
                        + der.model.m_d * d;
                    state.x += draw_bounded(&mut self.rng, self.omega_bar.x);
                    state.y += draw_bounded(&mut self.rng, self.omega_bar.y);
                }
            }
        }
        for der in self.ders.values_mut() {
            der.v_meas_prev = Some(der.y_meas.x);
            der.u_prev = der.u_now;
        }
        self.step += 1;
    }

    fn record_row(&mut self, t: f64) {
        let schema = &self.trace.schema;
        let mut row = vec![0.0; schema.width()];
        row[0] = t;
        for (&node, der) in &self.ders {
            let truth = get_state(&self.plant, node);
            row[schema.der_col(node, DerColumn::Voltage).expect("schema covers all DERs")] = truth.x;
            row[schema.der_col(node, DerColumn::Current).expect("schema covers all DERs")] = truth.y;
            row[schema.der_col(node, DerColumn::Input).expect("schema covers all DERs")] = der.u_now;
            row[schema.der_col(node, DerColumn::Alpha).expect("schema covers all DERs")] = der.alpha;
            row[schema.der_col(node, DerColumn::SharingError).expect("schema covers all DERs")] =
                der.sharing;
        }
        for (&key, lr) in &self.links {
            let col = |c| schema.link_col(key, c).expect("schema covers all links");
            row[col(LinkColumn::ReceivedV)] = lr.y_s.x;
            row[col(LinkColumn::ReceivedI)] = lr.y_s.y;
            if let Some(st) = &lr.residual {
                row[col(LinkColumn::ResidualV)] = st.r.x;
                row[col(LinkColumn::ResidualI)] = st.r.y;
                row[col(LinkColumn::BoundV)] = st.r_bound.x;
                row[col(LinkColumn::BoundI)] = st.r_bound.y;
                row[col(LinkColumn::Alarm)] = if st.alarm { 1.0 } else { 0.0 };
            }
            row[col(LinkColumn::BiasTrueV)] = lr.phi_true.x;
            row[col(LinkColumn::BiasTrueI)] = lr.phi_true.y;
            if lr.recon.active {
                row[col(LinkColumn::BiasObservedV)] = lr.recon.phi_v_ob;
                row[col(LinkColumn::BiasReconI)] = lr.recon.phi_i_re;
            }
            row[col(LinkColumn::CorrectedV)] = lr.y_co.x;
            row[col(LinkColumn::CorrectedI)] = lr.y_co.y;
        }
        self.trace.rows.push(row);
    }

    fn apply_event(&mut self, kind: &EventKind) -> Result<(), EngineError> {
        match kind {
            EventKind::LoadChange { node, load } => {
                {
                    let der = self.ders.get_mut(node).expect("validated node");
                    der.params.load = *load;
                    der.load = linearize_zip(load, der.params.v_ref);
                }
                self.rebuild_der_model(*node)?;
                self.rebuild_plant()?;
                self.resynthesize_links_from(&[*node])?;
            }
            EventKind::DerPlugin { node, lines } => {
                self.topo.add_node(*node);
                let mut affected = vec![*node];
                for line in lines {
                    let (a, b) = line.nodes;
                    self.topo.add_line(
                        a,
                        b,
                        LineParams { resistance: line.resistance, inductance: line.inductance },
                        line.comm_weight.unwrap_or(self.control_cfg.consensus_weight),
                    )?;
                    affected.push(if a == *node { b } else { a });
                    for key in [(a, b), (b, a)] {
                        let lr = new_link_runtime_from_runtime(&self.ders, key, &self.control_cfg)?;
                        self.links.insert(key, lr);
                    }
                }
                for &n in &affected {
                    self.rebuild_der_model(n)?;
                }
                self.rebuild_plant()?;
                self.resynthesize_links_from(&affected)?;
                self.replan_sensors()?;
            }
            EventKind::LineCut { nodes } => {
                let (a, b) = *nodes;
                self.topo.remove_line(a, b)?;
                self.links.remove(&(a, b));
                self.links.remove(&(b, a));
                for n in [a, b] {
                    self.rebuild_der_model(n)?;
                }
                self.rebuild_plant()?;
                self.resynthesize_links_from(&[a, b])?;
                self.replan_sensors()?;
            }
            EventKind::AttackStart { id } => self.set_attack(id, true),
            EventKind::AttackStop { id } => self.set_attack(id, false),
        }
        Ok(())
    }

    fn set_attack(&mut self, id: &str, enabled: bool) {
        for (attack, flag) in self.attacks.iter().zip(self.attack_enabled.iter_mut()) {
            if attack.id.as_deref() == Some(id) {
                *flag = enabled;
            }
        }
    }

    fn rebuild_der_model(&mut self, node: u32) -> Result<(), EngineError> {
        let incident = incident_resistances(&self.topo, node);
        let der = self.ders.get_mut(&node).expect("validated node");
        der.cont = build_continuous(&der.params, &der.load, &incident);
        der.model = discretize(&der.cont, self.t_samp)?;
        Ok(())
    }

    fn rebuild_plant(&mut self) -> Result<(), EngineError> {
        if let PlantState::Coupled { plant, x } = &mut self.plant {
            let params: BTreeMap<u32, DerParams> =
                self.ders.iter().map(|(&n, d)| (n, d.params.clone())).collect();
            let loads: BTreeMap<u32, EquivalentLoad> =
                self.ders.iter().map(|(&n, d)| (n, d.load)).collect();
            let lines: Vec<(u32, u32, f64)> = self
                .topo
                .line_keys()
                .map(|(a, b)| (a, b, self.topo.line(a, b).expect("listed line").resistance))
                .collect();
            let rebuilt = build_global_plant(&params, &loads, &lines, self.t_samp)?;
            debug_assert_eq!(rebuilt.node_ids, plant.node_ids, "the DER set never changes");
            let kept = x.clone();
            *plant = rebuilt;
            *x = kept;
        }
        Ok(())
    }

    /// Re-synthesizes the observers of every link whose sender's model
    /// changed, restarting their detection (with a grace window) and
    /// clearing any reconstruction in flight.
    fn resynthesize_links_from(&mut self, senders: &[u32]) -> Result<(), EngineError> {
        let keys: Vec<(u32, u32)> = self
            .links
            .keys()
            .copied()
            .filter(|(_, s)| senders.contains(s))
            .collect();
        for key in keys {
            let fresh = new_link_runtime_from_runtime(&self.ders, key, &self.control_cfg)?;
            let lr = self.links.get_mut(&key).expect("key listed above");
            *lr = fresh;
        }
        Ok(())
    }

    fn replan_sensors(&mut self) -> Result<(), EngineError> {
        if self.auto_sensors {
            self.plan = plan_sensors(&self.topo)?;
        }
        Ok(())
    }
}

fn incident_resistances(topo: &MicrogridTopology, node: u32) -> Vec<f64> {
    topo.neighbors(node)
        .into_iter()
        .map(|n| topo.line(node, n).expect("neighbor implies line").resistance)
        .collect()
}

fn new_link_runtime(
    ders: &BTreeMap<u32, DerRuntime>,
    key: (u32, u32),
    control: &crate::sim::scenario::ControlConfig,
) -> Result<LinkRuntime, EngineError> {
    let sender = &ders[&key.1];
    let uio = synthesize_uio(&sender.model, control.observer_poles, key)?;
    let recon_gains = derive_reconstruction_gains(&sender.cont, &sender.model, &uio).ok();
    Ok(LinkRuntime {
        uio,
        recon_gains,
        residual: None,
        recon: ReconstructionState::default(),
        grace: 0,
        r_prev: Vector2::zeros(),
        observable: false,
        y_s: Vector2::zeros(),
        y_co: Vector2::zeros(),
        phi_true: Vector2::zeros(),
    })
}

fn new_link_runtime_from_runtime(
    ders: &BTreeMap<u32, DerRuntime>,
    key: (u32, u32),
    control: &crate::sim::scenario::ControlConfig,
) -> Result<LinkRuntime, EngineError> {
    let mut lr = new_link_runtime(ders, key, control)?;
    lr.grace = control.detection_grace_steps;
    Ok(lr)
}

fn build_plant(
    mode: PlantModel,
    ders: &BTreeMap<u32, DerRuntime>,
    topo: &MicrogridTopology,
    t_samp: f64,
) -> Result<PlantState, EngineError> {
    match mode {
        PlantModel::Coupled => {
            let params: BTreeMap<u32, DerParams> =
                ders.iter().map(|(&n, d)| (n, d.params.clone())).collect();
            let loads: BTreeMap<u32, EquivalentLoad> =
                ders.iter().map(|(&n, d)| (n, d.load)).collect();
            let lines: Vec<(u32, u32, f64)> = topo
                .line_keys()
                .map(|(a, b)| (a, b, topo.line(a, b).expect("listed line").resistance))
                .collect();
            let plant = build_global_plant(&params, &loads, &lines, t_samp)?;
            let x = DVector::zeros(2 * plant.node_ids.len());
            Ok(PlantState::Coupled { plant, x })
        }
        PlantModel::PerDerZoh => Ok(PlantState::PerDer {
            x: ders.keys().map(|&n| (n, Vector2::zeros())).collect(),
        }),
    }
}

fn get_state(plant: &PlantState, node: u32) -> Vector2<f64> {
    match plant {
        PlantState::Coupled { plant, x } => {
            let idx = plant.state_index(node).expect("all DERs are in the plant");
            Vector2::new(x[idx], x[idx + 1])
        }
        PlantState::PerDer { x } => x[&node],
    }
}

fn set_state(plant: &mut PlantState, node: u32, value: Vector2<f64>) {
    match plant {
        PlantState::Coupled { plant, x } => {
            let idx = plant.state_index(node).expect("all DERs are in the plant");
            x[idx] = value.x;
            x[idx + 1] = value.y;
        }
        PlantState::PerDer { x } => {
            x.insert(node, value);
        }
    }
}

/// Line current from the receiver toward the sender, via a direct sensor or
/// the local balance; `None` when the plan leaves it unobservable.
#[allow(clippy::too_many_arguments)]
fn resolve_receiver_line_current(
    topo: &MicrogridTopology,
    plan: &SensorPlan,
    readings: &BTreeMap<(u32, u32), f64>,
    der: &DerRuntime,
    receiver: u32,
    sender: u32,
    load_error: f64,
    t_samp: f64,
) -> Option<f64> {
    let neighbors = topo.neighbors(receiver);
    let y = der.y_meas;
    let load_est = mitigate::load_current_estimate(&der.load, y.x, load_error);
    let v_prev = der.v_meas_prev.unwrap_or(y.x);
    let outgoing = mitigate::estimate_outgoing_current_sum(
        y.y,
        y.x,
        v_prev,
        der.params.filter_capacitance,
        t_samp,
        load_est,
    );
    mitigate::resolve_line_current(
        plan,
        receiver,
        sender,
        &neighbors,
        |toward| readings[&(receiver, toward)],
        outgoing,
    )
    .ok()
}

/// Spanning-tree sensor planning, applied per island so mid-run partitions
/// keep every cluster covered.
fn plan_sensors(topo: &MicrogridTopology) -> Result<SensorPlan, EngineError> {
    let mut positions: BTreeSet<(u32, u32)> = BTreeSet::new();
    let mut remaining: BTreeSet<u32> = topo.nodes().collect();
    while let Some(&seed) = remaining.iter().next() {
        // Collect the island around `seed`.
        let mut island = BTreeSet::new();
        let mut frontier = vec![seed];
        while let Some(n) = frontier.pop() {
            if !island.insert(n) {
                continue;
            }
            frontier.extend(topo.neighbors(n));
        }
        for &n in &island {
            remaining.remove(&n);
        }
        if island.len() < 2 {
            continue;
        }
        let mut sub = MicrogridTopology::new(island.iter().copied());
        for (a, b) in topo.line_keys() {
            if island.contains(&a) && island.contains(&b) {
                let params = *topo.line(a, b).expect("listed line");
                let weight = topo.comm_weight(a, b).expect("listed line");
                sub.add_line(a, b, params, weight).expect("rebuilt island lines are unique");
            }
        }
        let selection = sub
            .select_spanning_tree()
            .map_err(|source| EngineError::Planning { node: seed, source })?;
        positions.extend(deploy_sensors(&sub, &selection.tree_lines).positions());
    }
    Ok(SensorPlan::from_positions(positions))
}

/// Offline per-link synthesis report for a scenario's initial topology,
/// as surfaced by the CLI's verification command.
#[derive(Clone, Debug)]
pub struct LinkReport {
    pub receiver: u32,
    pub sender: u32,
    /// `‖T·m_d‖`, which exact decoupling drives to rounding level.
    pub annihilation_residual: f64,
    pub poles: (f64, f64),
    pub nu: f64,
    pub sigma: f64,
    pub residual_bound_limit: Vector2<f64>,
    pub eta: f64,
    pub eta_approx: f64,
    pub eta_approx_reliable: bool,
    /// Steady-state reconstruction error bound; `None` when `|eta| >= 1`
    /// (the link then falls back to discarding on alarms).
    pub reconstruction_error_bound: Option<f64>,
}

/// Synthesizes every observer of the initial topology and reports the link
/// constants, without running the simulation.
pub fn analyze_links(scenario: &Scenario) -> Result<Vec<LinkReport>, EngineError> {
    scenario.validate()?;
    let topo = scenario.build_initial_topology()?;
    let params = scenario.der_map();
    let rho = Vector2::new(scenario.noise.measurement.0, scenario.noise.measurement.1);
    let omega = Vector2::new(
        scenario.noise.process.0 + scenario.noise.mismatch_allowance.0,
        scenario.noise.process.1 + scenario.noise.mismatch_allowance.1,
    );
    let mut reports = Vec::new();
    let mut keys: Vec<(u32, u32)> = topo
        .line_keys()
        .flat_map(|(a, b)| [(a, b), (b, a)])
        .collect();
    keys.sort_unstable();
    for key in keys {
        let (receiver, sender) = key;
        let p = &params[&sender];
        let load = p.equivalent_load();
        let cont = build_continuous(p, &load, &incident_resistances(&topo, sender));
        let model = discretize(&cont, scenario.t_samp)?;
        let uio = synthesize_uio(&model, scenario.control.observer_poles, key)?;
        let eta = reconstruction_eigenvalue(&model.a_d, &model.m_d)
            .map_err(|_| DetectError::DegenerateInputDirection { receiver, sender })?;
        let (eta_approx, eta_approx_reliable) = mitigate::eta_approx(&cont.a, scenario.t_samp);
        let recon = derive_reconstruction_gains(&cont, &model, &uio).ok();
        let bound = recon.as_ref().and_then(|g| {
            mitigate::reconstruction_error_bound(g, &uio, &model.a_d, rho, omega).ok()
        });
        reports.push(LinkReport {
            receiver,
            sender,
            annihilation_residual: (uio.t * model.m_d).norm(),
            poles: scenario.control.observer_poles,
            nu: uio.nu,
            sigma: uio.sigma,
            residual_bound_limit: detect::residual_bound_limit(&uio, rho, omega),
            eta,
            eta_approx,
            eta_approx_reliable,
            reconstruction_error_bound: bound,
        });
    }
    Ok(reports)
}
