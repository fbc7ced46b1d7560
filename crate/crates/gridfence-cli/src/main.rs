//! Command-line front end for the gridfence simulator: scenario runs, sensor
//! planning, reconstruction-eigenvalue sweeps, and observer verification.
//!
//! Exit codes: 0 on success, 2 for invalid inputs (malformed or inconsistent
//! scenarios, disconnected planning graphs, failed observer checks), 1 for
//! internal errors such as unwritable output files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use gridfence::control::DEFAULT_CONSENSUS_WEIGHT;
use gridfence::mitigate::{eta_approx, reconstruction_eigenvalue};
use gridfence::model::{build_continuous, discretize, DerParams, ZipLoad};
use gridfence::sim::engine::{analyze_links, run_scenario, EngineError};
use gridfence::sim::scenario::{Scenario, TopologyConfig};
use gridfence::topology::{deploy_sensors, MicrogridTopology};

/// Environment variable holding the default output directory.
const OUT_DIR_VAR: &str = "GRIDFENCE_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "gridfence",
    version,
    about = "Simulate islanded DC microgrids under secondary-layer data injection",
    after_help = "Output paths default into $GRIDFENCE_OUT_DIR (falling back to the \
                  current directory) unless given explicitly."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario file; writes `<stem>.trace.csv` and
    /// `<stem>.summary.json`.
    Run {
        /// Scenario TOML file.
        scenario: PathBuf,
        /// Directory for the trace and summary files.
        #[arg(long, short)]
        out_dir: Option<PathBuf>,
        /// Override the scenario's noise seed (attack waveforms are part of
        /// the scenario and do not change).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Plan line-current sensor positions; writes `<stem>.sensors.txt`.
    PlanSensors {
        /// Scenario TOML file, or a graph file holding just its `[topology]`
        /// section.
        input: PathBuf,
        /// Output file for the plan.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Tabulate the reconstruction eigenvalue and its first-order
    /// approximation over a converter parameter grid; writes CSV.
    SweepEta(SweepArgs),
    /// Synthesize every observer of a scenario's initial topology and check
    /// decoupling, envelope constants, and reconstruction stability.
    VerifyUio {
        /// Scenario TOML file.
        scenario: PathBuf,
    },
}

#[derive(Args)]
struct SweepArgs {
    /// Output CSV file.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Filter resistance sweep, `min:max:points` or a single value [Ω].
    #[arg(long, default_value = "0.1:1.0:10")]
    resistance: GridRange,
    /// Filter inductance sweep, `min:max:points` or a single value [H].
    #[arg(long, default_value = "1e-3:1e-2:10")]
    inductance: GridRange,
    /// Filter capacitance sweep, `min:max:points` or a single value [F].
    #[arg(long, default_value = "5e-4")]
    capacitance: GridRange,
    /// Sampling periods, comma separated [s].
    #[arg(long, value_delimiter = ',', default_value = "2.5e-4,5e-4,1e-3")]
    t_samp: Vec<f64>,
    /// Local load impedance at the swept converter [Ω].
    #[arg(long, default_value_t = 10.0)]
    load_impedance: f64,
    /// Resistances of tie lines incident to the swept converter, comma
    /// separated [Ω]; empty for a standalone unit.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    line_resistance: Vec<f64>,
}

/// `min:max:points` (inclusive, linear) or a single value.
#[derive(Clone, Debug)]
struct GridRange {
    min: f64,
    max: f64,
    points: usize,
}

impl GridRange {
    fn values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.min];
        }
        let step = (self.max - self.min) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.min + step * i as f64).collect()
    }
}

impl FromStr for GridRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let parse = |p: &str| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| format!("`{p}` is not a number"))
        };
        match parts.as_slice() {
            [single] => {
                let v = parse(single)?;
                Ok(Self { min: v, max: v, points: 1 })
            }
            [min, max, points] => {
                let min = parse(min)?;
                let max = parse(max)?;
                let points: usize = points
                    .trim()
                    .parse()
                    .map_err(|_| format!("`{points}` is not a point count"))?;
                if points < 2 {
                    return Err("a range needs at least 2 points".into());
                }
                if !(max > min) {
                    return Err("range max must exceed min".into());
                }
                Ok(Self { min, max, points })
            }
            _ => Err("expected `value` or `min:max:points`".into()),
        }
    }
}

/// Error carrying its process exit code.
enum CliError {
    /// Bad input: malformed files, inconsistent scenarios, failed checks.
    Validation(String),
    /// The tool itself failed (I/O, unexpected synthesis breakdown).
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Internal(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Internal(m) => m,
        }
    }
}

fn validation(err: impl std::fmt::Display) -> CliError {
    CliError::Validation(err.to_string())
}

fn internal(err: impl std::fmt::Display) -> CliError {
    CliError::Internal(err.to_string())
}

/// Engine failures on an already-validated scenario are tool bugs; scenario
/// rejections are user input problems.
fn engine_error(err: EngineError) -> CliError {
    match err {
        EngineError::Scenario(e) => validation(e),
        other => internal(other),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { scenario, out_dir, seed } => cmd_run(&scenario, out_dir, seed),
        Command::PlanSensors { input, out } => cmd_plan_sensors(&input, out),
        Command::SweepEta(args) => cmd_sweep_eta(&args),
        Command::VerifyUio { scenario } => cmd_verify_uio(&scenario),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.code())
        }
    }
}

/// Resolves an output location: explicit path, else the environment default
/// directory (or the current one) joined with `name`.
fn resolve_out(explicit: Option<PathBuf>, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| default_out_dir().join(name))
}

fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_VAR).map_or_else(|| PathBuf::from("."), PathBuf::from)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "run".to_string(), |s| s.to_string_lossy().into_owned())
}

fn cmd_run(path: &Path, out_dir: Option<PathBuf>, seed: Option<u64>) -> Result<(), CliError> {
    let mut scenario = Scenario::load(path).map_err(validation)?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    let output = run_scenario(&scenario).map_err(engine_error)?;

    let dir = out_dir.unwrap_or_else(default_out_dir);
    fs::create_dir_all(&dir).map_err(internal)?;
    let stem = file_stem(path);
    let trace_path = dir.join(format!("{stem}.trace.csv"));
    let summary_path = dir.join(format!("{stem}.summary.json"));

    let trace_file = fs::File::create(&trace_path).map_err(internal)?;
    output
        .trace
        .write_csv(std::io::BufWriter::new(trace_file))
        .map_err(internal)?;
    fs::write(&summary_path, output.summary.to_json_string()).map_err(internal)?;

    let summary = &output.summary;
    println!(
        "simulated {} steps ({} s) over {} DERs and {} links",
        summary.steps,
        summary.steps as f64 * summary.t_samp,
        summary.ders.len(),
        summary.links.len(),
    );
    println!("links alarmed: {}", summary.links_alarmed);
    println!("trace:   {}", trace_path.display());
    println!("summary: {}", summary_path.display());
    Ok(())
}

/// A file holding only the scenario's `[topology]` section.
#[derive(Deserialize)]
struct GraphFile {
    topology: TopologyConfig,
}

/// Accepts either a full scenario or a bare graph file and returns the
/// topology to plan on.
fn load_topology(path: &Path) -> Result<MicrogridTopology, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| validation(format!("{}: {e}", path.display())))?;
    let table: toml::Table = toml::from_str(&text).map_err(validation)?;
    if table.contains_key("ders") {
        let scenario = Scenario::from_toml_str(&text).map_err(validation)?;
        return scenario.build_initial_topology().map_err(validation);
    }
    let graph: GraphFile = toml::from_str(&text).map_err(validation)?;
    let mut topo = MicrogridTopology::new(graph.topology.nodes.iter().copied());
    for line in &graph.topology.lines {
        let (a, b) = line.nodes;
        topo.add_line(
            a,
            b,
            gridfence::topology::LineParams {
                resistance: line.resistance,
                inductance: line.inductance,
            },
            line.comm_weight.unwrap_or(DEFAULT_CONSENSUS_WEIGHT),
        )
        .map_err(validation)?;
    }
    Ok(topo)
}

fn cmd_plan_sensors(input: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let topo = load_topology(input)?;
    let selection = topo.select_spanning_tree().map_err(validation)?;
    let plan = deploy_sensors(&topo, &selection.tree_lines);

    let nodes = topo.node_count();
    let expected = nodes + selection.removed_nodes.len() - 2;
    if plan.len() != expected {
        return Err(internal(format!(
            "planner accounting broke: {} sensors placed, {} expected",
            plan.len(),
            expected
        )));
    }

    let mut report = String::new();
    let _ = writeln!(report, "nodes {nodes}");
    let _ = writeln!(report, "lines {}", topo.line_count());
    for (a, b) in &selection.tree_lines {
        let _ = writeln!(report, "tree {a} {b}");
    }
    for (a, b) in &selection.removed_lines {
        let _ = writeln!(report, "removed-line {a} {b}");
    }
    for n in &selection.removed_nodes {
        let _ = writeln!(report, "removed-node {n}");
    }
    report.push_str(&plan.render_text());
    let _ = writeln!(report, "sensors {}", plan.len());

    let out_path = resolve_out(out, &format!("{}.sensors.txt", file_stem(input)));
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(internal)?;
        }
    }
    fs::write(&out_path, &report).map_err(internal)?;
    println!(
        "{} sensors over {} nodes ({} secured lines, {} sacrificed)",
        plan.len(),
        nodes,
        selection.tree_lines.len(),
        selection.removed_lines.len(),
    );
    println!("plan: {}", out_path.display());
    Ok(())
}

fn cmd_sweep_eta(args: &SweepArgs) -> Result<(), CliError> {
    let mut csv = String::from("resistance,inductance,capacitance,t_samp,eta,eta_approx,approx_error\n");
    let mut unstable: Vec<(f64, f64, f64, f64, f64)> = Vec::new();
    let mut rows = 0usize;
    for &t in &args.t_samp {
        for &r in &args.resistance.values() {
            for &l in &args.inductance.values() {
                for &c in &args.capacitance.values() {
                    let params = DerParams {
                        filter_resistance: r,
                        filter_inductance: l,
                        filter_capacitance: c,
                        rated_current: 10.0,
                        v_ref: 40.0,
                        load: ZipLoad {
                            impedance: args.load_impedance,
                            constant_current: 0.0,
                            constant_power: 0.0,
                        },
                    };
                    params.validate(0).map_err(validation)?;
                    let cont = build_continuous(&params, &params.equivalent_load(), &args.line_resistance);
                    let model = discretize(&cont, t).map_err(validation)?;
                    let eta = reconstruction_eigenvalue(&model.a_d, &model.m_d).map_err(internal)?;
                    let (approx, _) = eta_approx(&cont.a, t);
                    let _ = writeln!(
                        csv,
                        "{r},{l},{c},{t},{eta},{approx},{}",
                        (eta - approx).abs()
                    );
                    rows += 1;
                    if eta.abs() >= 1.0 {
                        unstable.push((r, l, c, t, eta));
                    }
                }
            }
        }
    }

    let out_path = resolve_out(args.out.clone(), "eta-sweep.csv");
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(internal)?;
        }
    }
    fs::write(&out_path, &csv).map_err(internal)?;
    println!("{rows} grid points -> {}", out_path.display());
    if unstable.is_empty() {
        println!("reconstruction stable (|eta| < 1) at every grid point");
    } else {
        println!("UNSTABLE at {} grid points:", unstable.len());
        for (r, l, c, t, eta) in &unstable {
            println!("  R={r} L={l} C={c} T={t}: eta={eta}");
        }
    }
    Ok(())
}

fn cmd_verify_uio(path: &Path) -> Result<(), CliError> {
    let scenario = Scenario::load(path).map_err(validation)?;
    let reports = analyze_links(&scenario).map_err(engine_error)?;

    println!(
        "{:>10}  {:>12}  {:>12}  {:>8}  {:>8}  {:>10}  {:>10}  {:>12}",
        "link", "|T.m_d|", "poles", "nu", "sigma", "eta", "eta_appr", "recon bound"
    );
    let mut bad = Vec::new();
    for r in &reports {
        let bound = r
            .reconstruction_error_bound
            .map_or_else(|| "discard".to_string(), |b| format!("{b:.6e}"));
        let approx = if r.eta_approx_reliable {
            format!("{:.6}", r.eta_approx)
        } else {
            format!("{:.6}*", r.eta_approx)
        };
        println!(
            "{:>10}  {:>12.4e}  {:>12}  {:>8.4}  {:>8.4}  {:>10.6}  {:>10}  {:>12}",
            format!("({},{})", r.receiver, r.sender),
            r.annihilation_residual,
            format!("{},{}", r.poles.0, r.poles.1),
            r.nu,
            r.sigma,
            r.eta,
            approx,
            bound,
        );
        if r.eta.abs() >= 1.0 {
            bad.push((r.receiver, r.sender, r.eta));
        }
    }
    println!("{} links verified ('*' marks an out-of-premise approximation)", reports.len());
    if !bad.is_empty() {
        let list: Vec<String> = bad
            .iter()
            .map(|(r, s, eta)| format!("({r},{s}): eta={eta}"))
            .collect();
        return Err(validation(format!(
            "reconstruction not contractive on {} link(s): {}",
            bad.len(),
            list.join(", ")
        )));
    }
    Ok(())
}
