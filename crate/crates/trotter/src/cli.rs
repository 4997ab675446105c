//! Command-line front end: scenario runs, run comparison, score-grid dumps.
//!
//! Subcommands:
//!
//! * `run <scenario> [--ablate mpc|ic] [--seed N] [--out DIR]` simulates one
//!   scenario and writes `log.csv`, `events.csv`, and `summary.json` into the
//!   output directory (default `runs/<name>`, with `-mpc`/`-ic` appended for
//!   ablated runs). The summary is also printed to stdout.
//! * `compare <dir_a> <dir_b>` prints a side-by-side metric table with
//!   percentage deltas for two finished runs of the same scenario.
//! * `dump-scores <scenario> --leg I --stance K` prints the foothold score
//!   grid the planner evaluates for stance change `K` of leg `I`, starting
//!   from the scenario's initial stance.
//!
//! Exit codes are a stable contract: 0 success, 1 configuration error,
//! 2 controller failure, 3 fall. All numeric output uses fixed
//! nine-significant-digit scientific notation so artifacts diff cleanly.
//! Set the `TROTTER_LOG` environment variable (any non-empty value other
//! than `0`) for progress messages on stderr; one process runs one scenario.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::Vector2;
use serde::Deserialize;
use serde_json::Value;

use crate::foothold::{build_contact_sequence, plan_touchdown, PlannerState};
use crate::gait::{build_schedule, GaitParams, LEG_COUNT, LEG_NAMES};
use crate::sim::{
    initial_stance, run_closed_loop, Ablation, CommandSegment, DisturbancePulse, Failure,
    NoiseConfig, SimConfig, Summary,
};
use crate::terrain::HeightMap;

pub const EXIT_SUCCESS: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_CONTROLLER: i32 = 2;
pub const EXIT_FALL: i32 = 3;

/// Version tag carried by `summary.json`; `compare` refuses files whose tag
/// differs from the one it was built against.
pub const SUMMARY_SCHEMA: &str = "summary v1";

#[derive(Parser)]
#[command(
    name = "trotter",
    about = "Quadruped trot simulator: run scenarios, compare runs, inspect foothold scores",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario file and write log + summary artifacts.
    Run {
        /// Scenario TOML file (a missing `.toml` extension is tried too).
        spec: PathBuf,
        /// Disable one controller stage for comparison runs.
        #[arg(long, value_enum)]
        ablate: Option<AblateArg>,
        /// Override the scenario's RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default `runs/<scenario name>[-<ablation>]`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a metric table comparing two finished runs of one scenario.
    Compare { a: PathBuf, b: PathBuf },
    /// Print the foothold score grid for one scheduled touchdown.
    #[command(name = "dump-scores")]
    DumpScores {
        /// Scenario TOML file (terrain and start pose are taken from it).
        spec: PathBuf,
        /// Leg index: 0 LF, 1 RF, 2 LH, 3 RH.
        #[arg(long)]
        leg: usize,
        /// Stance-change index in the planning window (1-based; 0 is the
        /// current stance and has no touchdown).
        #[arg(long)]
        stance: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AblateArg {
    Mpc,
    Ic,
}

impl From<AblateArg> for Ablation {
    fn from(a: AblateArg) -> Self {
        match a {
            AblateArg::Mpc => Ablation::Mpc,
            AblateArg::Ic => Ablation::Ic,
        }
    }
}

/// Parses `args` (including the program name) and runs one subcommand.
/// Returns the process exit code; errors are printed to stderr.
pub fn run_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            // --help/--version land here with a zero exit.
            let code = if err.use_stderr() {
                EXIT_CONFIG
            } else {
                EXIT_SUCCESS
            };
            let _ = err.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Run {
            spec,
            ablate,
            seed,
            out,
        } => cmd_run(&spec, ablate.map(Into::into), seed, out),
        Command::Compare { a, b } => cmd_compare(&a, &b),
        Command::DumpScores { spec, leg, stance } => cmd_dump_scores(&spec, leg, stance),
    };
    match result {
        Ok(output) => {
            print!("{}", output.stdout);
            output.exit
        }
        Err(err) => {
            eprintln!("error: {}", err.message);
            err.code
        }
    }
}

#[derive(Debug)]
struct CliOutput {
    stdout: String,
    exit: i32,
}

#[derive(Debug)]
struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

fn verbose() -> bool {
    std::env::var("TROTTER_LOG")
        .map(|v| !v.is_empty() && v != "0")
        .unwrap_or(false)
}

fn log(msg: &str) {
    if verbose() {
        eprintln!("trotter: {msg}");
    }
}

// ---------------------------------------------------------------------------
// Scenario files

/// On-disk scenario description. Unknown keys are rejected so typos fail
/// loudly. Every table is optional and overrides the corresponding defaults.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    /// Scenario name recorded in the summary; `compare` matches on it.
    name: String,
    /// Terrain TOML path, resolved relative to the scenario file.
    terrain: String,
    /// Simulated duration (s).
    duration: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    ablation: Ablation,
    #[serde(default)]
    gait: GaitTable,
    #[serde(default)]
    robot: RobotTable,
    #[serde(default)]
    geometry: GeometryTable,
    #[serde(default)]
    control: ControlTable,
    #[serde(default)]
    foothold: FootholdTable,
    #[serde(default)]
    start: StartTable,
    #[serde(default)]
    safety: SafetyTable,
    noise: Option<NoiseTable>,
    #[serde(default, rename = "command")]
    commands: Vec<CommandEntry>,
    #[serde(default, rename = "disturbance")]
    disturbances: Vec<DisturbanceEntry>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaitTable {
    duty_factor: Option<f64>,
    step_frequency: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RobotTable {
    mass: Option<f64>,
    inertia: Option<[f64; 3]>,
    friction: Option<f64>,
    fz_min: Option<f64>,
    fz_max: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometryTable {
    hip_offsets: Option<[[f64; 3]; 4]>,
    body_height: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControlTable {
    physics_step: Option<f64>,
    task_rate: Option<f64>,
    mpc_rate: Option<f64>,
    horizon: Option<usize>,
    input_weight: Option<f64>,
    state_weights: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FootholdTable {
    w_collision: Option<f64>,
    w_roughness: Option<f64>,
    w_uncertainty: Option<f64>,
    edge_margin: Option<f64>,
    edge_threshold: Option<f64>,
    crop_half_extent: Option<f64>,
    reach_radius: Option<f64>,
    clearance: Option<f64>,
    approach_fraction: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct StartTable {
    x: Option<f64>,
    y: Option<f64>,
    yaw: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SafetyTable {
    fall_angle: Option<f64>,
    min_clearance: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseTable {
    position: f64,
    velocity: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CommandEntry {
    start: f64,
    velocity: [f64; 2],
    #[serde(default)]
    yaw_rate: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DisturbanceEntry {
    start: f64,
    duration: f64,
    /// Pure push at the center of mass. Exactly one of `force`/`wrench`.
    force: Option<[f64; 3]>,
    /// Torque (x, y, z) then force (x, y, z).
    wrench: Option<[f64; 6]>,
}

#[derive(Debug)]
struct Scenario {
    name: String,
    config: SimConfig,
    map: HeightMap,
}

/// Accepts `scenarios/flat_trot` as shorthand for `scenarios/flat_trot.toml`.
fn resolve_spec_path(spec: &Path) -> PathBuf {
    if spec.exists() || spec.extension().is_some() {
        return spec.to_path_buf();
    }
    let with_ext = spec.with_extension("toml");
    if with_ext.exists() {
        with_ext
    } else {
        spec.to_path_buf()
    }
}

fn load_scenario(spec: &Path) -> Result<Scenario, CliError> {
    let path = resolve_spec_path(spec);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    let file: ScenarioFile = toml::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;

    let mut config = SimConfig::default();
    config.duration = file.duration;
    config.seed = file.seed;
    config.ablation = file.ablation;

    let gait_duty = file.gait.duty_factor.unwrap_or(config.gait.duty_factor);
    let gait_freq = file.gait.step_frequency.unwrap_or(config.gait.step_frequency);
    config.gait = GaitParams::trot(gait_duty, gait_freq);

    let r = &file.robot;
    if let Some(v) = r.mass {
        config.params.mass = v;
    }
    if let Some(v) = r.inertia {
        config.params.inertia = v;
    }
    if let Some(v) = r.friction {
        config.params.friction = v;
    }
    if let Some(v) = r.fz_min {
        config.params.fz_min = v;
    }
    if let Some(v) = r.fz_max {
        config.params.fz_max = v;
    }

    if let Some(v) = file.geometry.hip_offsets {
        config.geometry.hip_offsets = v;
    }
    if let Some(v) = file.geometry.body_height {
        config.geometry.body_height = v;
    }

    let c = &file.control;
    if let Some(v) = c.physics_step {
        config.physics_step = v;
    }
    if let Some(v) = c.task_rate {
        config.task_rate = v;
    }
    if let Some(v) = c.mpc_rate {
        config.mpc_rate = v;
    }
    if let Some(v) = c.horizon {
        config.horizon = v;
    }
    if let Some(v) = c.input_weight {
        config.weights.input = v;
    }
    if let Some(v) = &c.state_weights {
        if v.len() != config.weights.state.len() {
            return Err(CliError::config(format!(
                "state_weights needs {} entries, got {}",
                config.weights.state.len(),
                v.len()
            )));
        }
        config.weights.state.copy_from_slice(v);
    }

    let f = &file.foothold;
    if let Some(v) = f.w_collision {
        config.foothold.w_collision = v;
    }
    if let Some(v) = f.w_roughness {
        config.foothold.w_roughness = v;
    }
    if let Some(v) = f.w_uncertainty {
        config.foothold.w_uncertainty = v;
    }
    if let Some(v) = f.edge_margin {
        config.foothold.edge_margin = v;
    }
    if let Some(v) = f.edge_threshold {
        config.foothold.edge_threshold = v;
    }
    if let Some(v) = f.crop_half_extent {
        config.foothold.crop_half_extent = v;
    }
    if let Some(v) = f.reach_radius {
        config.foothold.reach_radius = v;
    }
    if let Some(v) = f.clearance {
        config.foothold.clearance = v;
    }
    if let Some(v) = f.approach_fraction {
        config.foothold.approach_fraction = v;
    }

    config.start_xy = Vector2::new(
        file.start.x.unwrap_or(config.start_xy.x),
        file.start.y.unwrap_or(config.start_xy.y),
    );
    config.start_yaw = file.start.yaw.unwrap_or(config.start_yaw);
    if let Some(v) = file.safety.fall_angle {
        config.fall_angle = v;
    }
    if let Some(v) = file.safety.min_clearance {
        config.min_clearance = v;
    }
    config.noise = file.noise.map(|n| NoiseConfig {
        position: n.position,
        velocity: n.velocity,
    });

    config.commands = file
        .commands
        .iter()
        .map(|c| CommandSegment {
            start: c.start,
            velocity: c.velocity,
            yaw_rate: c.yaw_rate,
        })
        .collect();

    config.disturbances = Vec::with_capacity(file.disturbances.len());
    for (i, d) in file.disturbances.iter().enumerate() {
        let wrench = match (d.force, d.wrench) {
            (Some(f), None) => [0.0, 0.0, 0.0, f[0], f[1], f[2]],
            (None, Some(w)) => w,
            _ => {
                return Err(CliError::config(format!(
                    "disturbance {i}: give exactly one of force or wrench"
                )))
            }
        };
        config.disturbances.push(DisturbancePulse {
            start: d.start,
            duration: d.duration,
            wrench,
        });
    }

    if !(config.duration > 0.0) {
        return Err(CliError::config("duration must be positive"));
    }
    config
        .validate()
        .map_err(|e| CliError::config(e.to_string()))?;
    config
        .gait
        .validate()
        .map_err(|e| CliError::config(e.to_string()))?;
    config
        .weights
        .validate()
        .map_err(|e| CliError::config(e.to_string()))?;

    let terrain_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&file.terrain);
    let map = HeightMap::load(&terrain_path)
        .map_err(|e| CliError::config(format!("{}: {e}", terrain_path.display())))?;

    Ok(Scenario {
        name: file.name,
        config,
        map,
    })
}

// ---------------------------------------------------------------------------
// run

fn cmd_run(
    spec: &Path,
    ablate: Option<Ablation>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<CliOutput, CliError> {
    let mut scenario = load_scenario(spec)?;
    if let Some(a) = ablate {
        scenario.config.ablation = a;
    }
    if let Some(s) = seed {
        scenario.config.seed = s;
    }
    let suffix = match scenario.config.ablation {
        Ablation::None => String::new(),
        Ablation::Mpc => "-mpc".into(),
        Ablation::Ic => "-ic".into(),
    };
    let out_dir = out.unwrap_or_else(|| PathBuf::from("runs").join(format!("{}{suffix}", scenario.name)));

    log(&format!(
        "running {} for {} s (seed {}, ablation {:?}) into {}",
        scenario.name,
        scenario.config.duration,
        scenario.config.seed,
        scenario.config.ablation,
        out_dir.display()
    ));
    let outcome = run_closed_loop(&scenario.config, &scenario.map)
        .map_err(|e| CliError::config(e.to_string()))?;
    log(&format!(
        "simulated {:.3} s in {} ticks, {} plans",
        outcome.summary.simulated, outcome.summary.ticks, outcome.summary.plans
    ));

    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::config(format!("cannot create {}: {e}", out_dir.display())))?;
    let json = summary_json(&scenario.name, &scenario.config, &outcome.summary);
    let writes = [
        ("log.csv", outcome.log.to_csv()),
        ("events.csv", outcome.log.events_to_csv()),
        ("summary.json", json.clone()),
    ];
    for (name, content) in writes {
        let path = out_dir.join(name);
        std::fs::write(&path, content)
            .map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))?;
    }
    log(&format!("artifacts written to {}", out_dir.display()));

    let exit = match &outcome.summary.failure {
        None => EXIT_SUCCESS,
        Some(Failure::Controller { .. }) => EXIT_CONTROLLER,
        Some(Failure::Fall { .. }) => EXIT_FALL,
    };
    Ok(CliOutput {
        stdout: json,
        exit,
    })
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.8e}")
    } else {
        "null".into()
    }
}

fn json_str(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Renders the run summary as JSON. Schema `summary v1`, all floats in
/// nine-significant-digit scientific notation:
///
/// * `schema`, `scenario`, `ablation`, `seed`, `duration` — run identity.
/// * `completed`, `failure` (`null` or `{kind, t, detail}`), `simulated`,
///   `ticks`, `plans` — how far the run got.
/// * `commanded_forward_velocity`, `mean_forward_velocity`,
///   `mean_velocity_error`, `velocity_rms_error` — heading-frame tracking
///   over the final five seconds.
/// * `com_drift_max`, `vertical_impulse_worst`, `max_plan_age`,
///   `max_plan_violation`, `mean_iterations` — regulation and solver health.
/// * `foothold` — per-leg (`lf`, `rf`, `lh`, `rh`) and `overall`
///   `{count, rms, max}` of the touchdown prediction error.
/// * `timing_ms` — wall-clock solve/build stats; everything else is
///   deterministic under the seed, timing is not.
pub fn summary_json(name: &str, config: &SimConfig, summary: &Summary) -> String {
    let ablation = match config.ablation {
        Ablation::None => "none",
        Ablation::Mpc => "mpc",
        Ablation::Ic => "ic",
    };
    let failure = match &summary.failure {
        None => "null".to_string(),
        Some(Failure::Fall { t, reason }) => format!(
            "{{\"kind\": \"fall\", \"t\": {}, \"detail\": {}}}",
            fmt(*t),
            json_str(reason)
        ),
        Some(Failure::Controller { t, message }) => format!(
            "{{\"kind\": \"controller\", \"t\": {}, \"detail\": {}}}",
            fmt(*t),
            json_str(message)
        ),
    };
    let mut legs = String::new();
    for (leg, stats) in summary.foothold_error.iter().enumerate() {
        let _ = write!(
            legs,
            "    {}: {{\"count\": {}, \"rms\": {}, \"max\": {}}},\n",
            json_str(&LEG_NAMES[leg].to_lowercase()),
            stats.count,
            fmt(stats.rms),
            fmt(stats.max)
        );
    }
    let overall = &summary.foothold_error_overall;
    format!(
        "{{\n  \"schema\": {schema},\n  \"scenario\": {scenario},\n  \"ablation\": {ablation},\n  \"seed\": {seed},\n  \"duration\": {duration},\n  \"completed\": {completed},\n  \"failure\": {failure},\n  \"simulated\": {simulated},\n  \"ticks\": {ticks},\n  \"plans\": {plans},\n  \"commanded_forward_velocity\": {cmd_v},\n  \"mean_forward_velocity\": {mean_v},\n  \"mean_velocity_error\": {mean_err},\n  \"velocity_rms_error\": {rms_err},\n  \"com_drift_max\": {drift},\n  \"vertical_impulse_worst\": {impulse},\n  \"max_plan_age\": {plan_age},\n  \"max_plan_violation\": {violation},\n  \"mean_iterations\": {iters},\n  \"foothold\": {{\n{legs}    \"overall\": {{\"count\": {o_count}, \"rms\": {o_rms}, \"max\": {o_max}}}\n  }},\n  \"timing_ms\": {{\"solve_mean\": {t_sm}, \"solve_max\": {t_sx}, \"build_mean\": {t_bm}, \"build_max\": {t_bx}}}\n}}\n",
        schema = json_str(SUMMARY_SCHEMA),
        scenario = json_str(name),
        ablation = json_str(ablation),
        seed = config.seed,
        duration = fmt(config.duration),
        completed = summary.completed,
        failure = failure,
        simulated = fmt(summary.simulated),
        ticks = summary.ticks,
        plans = summary.plans,
        cmd_v = fmt(summary.commanded_forward_velocity),
        mean_v = fmt(summary.mean_forward_velocity),
        mean_err = fmt((summary.mean_forward_velocity - summary.commanded_forward_velocity).abs()),
        rms_err = fmt(summary.velocity_rms_error),
        drift = fmt(summary.com_drift_max),
        impulse = fmt(summary.vertical_impulse_worst),
        plan_age = fmt(summary.max_plan_age),
        violation = fmt(summary.max_plan_violation),
        iters = fmt(summary.mean_iterations),
        legs = legs,
        o_count = overall.count,
        o_rms = fmt(overall.rms),
        o_max = fmt(overall.max),
        t_sm = fmt(summary.timing.mean_solve_ms),
        t_sx = fmt(summary.timing.max_solve_ms),
        t_bm = fmt(summary.timing.mean_plan_build_ms),
        t_bx = fmt(summary.timing.max_plan_build_ms),
    )
}

// ---------------------------------------------------------------------------
// compare

fn read_summary(dir: &Path) -> Result<Value, CliError> {
    let path = dir.join("summary.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let schema = value["schema"].as_str().unwrap_or("<missing>");
    if schema != SUMMARY_SCHEMA {
        return Err(CliError::config(format!(
            "{}: schema {schema:?} but this build compares {SUMMARY_SCHEMA:?}",
            path.display()
        )));
    }
    Ok(value)
}

fn describe_run(v: &Value) -> String {
    let ablation = v["ablation"].as_str().unwrap_or("?");
    if v["completed"].as_bool() == Some(true) {
        format!("ablation {ablation} | completed")
    } else {
        let kind = v["failure"]["kind"].as_str().unwrap_or("unknown");
        let t = v["failure"]["t"].as_f64().unwrap_or(f64::NAN);
        format!("ablation {ablation} | failed: {kind} at {} s", fmt(t))
    }
}

/// Side-by-side metric table for two runs of the same scenario. Percentage
/// deltas are `(b - a) / |a| * 100`; `n/a` when the baseline is zero or a
/// value is missing (e.g. no touchdowns before a fall).
fn cmd_compare(dir_a: &Path, dir_b: &Path) -> Result<CliOutput, CliError> {
    let a = read_summary(dir_a)?;
    let b = read_summary(dir_b)?;
    let name_a = a["scenario"].as_str().unwrap_or("<missing>");
    let name_b = b["scenario"].as_str().unwrap_or("<missing>");
    if name_a != name_b {
        return Err(CliError::config(format!(
            "scenario mismatch: {name_a:?} vs {name_b:?}"
        )));
    }

    let mut rows: Vec<(String, Option<f64>, Option<f64>)> = Vec::new();
    let mut push = |name: &str, path: &[&str]| {
        let dig = |v: &Value| -> Option<f64> {
            let mut cur = v;
            for key in path {
                cur = &cur[*key];
            }
            cur.as_f64()
        };
        rows.push((name.to_string(), dig(&a), dig(&b)));
    };
    push("commanded_forward_velocity", &["commanded_forward_velocity"]);
    push("mean_forward_velocity", &["mean_forward_velocity"]);
    push("mean_velocity_error", &["mean_velocity_error"]);
    push("velocity_rms_error", &["velocity_rms_error"]);
    push("com_drift_max", &["com_drift_max"]);
    for name in LEG_NAMES {
        let key = name.to_lowercase();
        push(&format!("foothold_rms_{key}"), &["foothold", &key, "rms"]);
        push(&format!("foothold_max_{key}"), &["foothold", &key, "max"]);
    }
    push("foothold_rms_overall", &["foothold", "overall", "rms"]);
    push("foothold_max_overall", &["foothold", "overall", "max"]);
    push("vertical_impulse_worst", &["vertical_impulse_worst"]);
    push("mean_iterations", &["mean_iterations"]);

    let mut out = String::from("# compare v1\n");
    let _ = writeln!(out, "# scenario: {name_a}");
    let _ = writeln!(out, "# a: {} | {}", dir_a.display(), describe_run(&a));
    let _ = writeln!(out, "# b: {} | {}", dir_b.display(), describe_run(&b));
    out.push_str("metric,a,b,delta_pct\n");
    for (name, va, vb) in rows {
        let fa = va.map(fmt).unwrap_or_else(|| "n/a".into());
        let fb = vb.map(fmt).unwrap_or_else(|| "n/a".into());
        let delta = match (va, vb) {
            (Some(x), Some(y)) if x.abs() > 0.0 => fmt((y - x) / x.abs() * 100.0),
            _ => "n/a".into(),
        };
        let _ = writeln!(out, "{name},{fa},{fb},{delta}");
    }
    Ok(CliOutput {
        stdout: out,
        exit: EXIT_SUCCESS,
    })
}

// ---------------------------------------------------------------------------
// dump-scores

/// Rebuilds the first plan of the scenario (initial stance, zero phase) and
/// re-evaluates the requested touchdown, printing the full score grid.
fn cmd_dump_scores(spec: &Path, leg: usize, stance: usize) -> Result<CliOutput, CliError> {
    if leg >= LEG_COUNT {
        return Err(CliError::config(format!(
            "leg must be 0..{} (LF, RF, LH, RH)",
            LEG_COUNT - 1
        )));
    }
    let scenario = load_scenario(spec)?;
    let config = &scenario.config;
    let (feet, state) = initial_stance(config, &scenario.map);
    let schedule =
        build_schedule(&config.gait, 0.0, &[0.0; LEG_COUNT]).map_err(|e| CliError::config(e.to_string()))?;
    let command = config.command_at(0.0);
    let planner = PlannerState {
        feet,
        com_position: state.position,
        com_velocity: state.velocity,
        yaw: state.yaw(),
        forward_speed: command.velocity.x,
    };
    let events = schedule.events();
    let touchdowns: Vec<usize> = events
        .iter()
        .enumerate()
        .filter(|(_, e)| e.leg == Some(leg) && e.flags[leg])
        .map(|(k, _)| k)
        .collect();
    if !touchdowns.contains(&stance) {
        return Err(CliError::config(format!(
            "stance change {stance} is not a touchdown of leg {leg} ({}); its touchdowns in this window: {:?}",
            LEG_NAMES[leg], touchdowns
        )));
    }
    // The liftoff point feeding the swing-collision check is whatever contact
    // the leg holds entering this stance change.
    let sequence = build_contact_sequence(
        &planner,
        &schedule,
        &scenario.map,
        &config.gait,
        &config.geometry,
        &config.foothold,
    )
    .map_err(|e| CliError::config(e.to_string()))?;
    let liftoff = sequence.entries[leg][stance - 1].point;
    let (entry, grid) = plan_touchdown(
        &planner,
        &scenario.map,
        &config.gait,
        &config.geometry,
        &config.foothold,
        leg,
        stance,
        events[stance].dt,
        liftoff,
    )
    .map_err(|e| CliError::config(e.to_string()))?;

    let mut out = String::from("# scores v1\n");
    let _ = writeln!(out, "# scenario: {}", scenario.name);
    let _ = writeln!(out, "# leg: {leg} ({})", LEG_NAMES[leg]);
    let _ = writeln!(out, "# stance_change: {stance}");
    let _ = writeln!(out, "# touchdown_in: {} s", fmt(events[stance].dt));
    let _ = writeln!(
        out,
        "# chosen: {} {} {} (cost {}, adjustment {})",
        fmt(entry.point.x),
        fmt(entry.point.y),
        fmt(entry.point.z),
        fmt(entry.score),
        fmt(entry.adjustment)
    );
    out.push_str(&grid.to_csv());
    Ok(CliOutput {
        stdout: out,
        exit: EXIT_SUCCESS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn unique_dir(tag: &str) -> PathBuf {
        static COUNTER: AtomicU32 = AtomicU32::new(0);
        let n = COUNTER.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!(
            "trotter-cli-{}-{}-{n}-{tag}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .subsec_nanos()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn write_flat_terrain(dir: &Path) -> PathBuf {
        let path = dir.join("flat.toml");
        std::fs::write(
            &path,
            "origin = [-5.0, -5.0]\nresolution = 0.02\nwidth = 500\nheight = 500\nbase = 0.0\n",
        )
        .unwrap();
        path
    }

    fn write_scenario(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(format!("{name}.toml"));
        std::fs::write(&path, body).unwrap();
        path
    }

    fn standing_scenario(dir: &Path, duration: f64) -> PathBuf {
        write_flat_terrain(dir);
        write_scenario(
            dir,
            "stand",
            &format!(
                "name = \"stand\"\nterrain = \"flat.toml\"\nduration = {duration}\n\n[[command]]\nstart = 0.0\nvelocity = [0.0, 0.0]\n"
            ),
        )
    }

    #[test]
    fn scenario_files_reject_unknown_keys() {
        let dir = unique_dir("unknown-key");
        write_flat_terrain(&dir);
        let path = write_scenario(
            &dir,
            "bad",
            "name = \"bad\"\nterrain = \"flat.toml\"\nduration = 1.0\nspeed = 0.5\n",
        );
        let err = load_scenario(&path).unwrap_err();
        assert_eq!(err.code, EXIT_CONFIG);
        assert!(err.message.contains("speed"), "{}", err.message);
    }

    #[test]
    fn scenario_overrides_reach_the_config() {
        let dir = unique_dir("overrides");
        write_flat_terrain(&dir);
        let path = write_scenario(
            &dir,
            "tuned",
            "name = \"tuned\"\nterrain = \"flat.toml\"\nduration = 2.5\nseed = 9\nablation = \"ic\"\n\n[gait]\nduty_factor = 0.65\nstep_frequency = 1.2\n\n[robot]\nmass = 90.0\n\n[control]\nhorizon = 10\ninput_weight = 1e-8\n\n[start]\nx = 0.3\nyaw = 0.1\n\n[noise]\nposition = 0.001\nvelocity = 0.002\n\n[[command]]\nstart = 0.0\nvelocity = [0.4, 0.0]\n\n[[disturbance]]\nstart = 1.0\nduration = 0.1\nforce = [100.0, 0.0, 0.0]\n",
        );
        let s = load_scenario(&path).unwrap();
        assert_eq!(s.name, "tuned");
        assert_eq!(s.config.seed, 9);
        assert_eq!(s.config.ablation, Ablation::Ic);
        assert_eq!(s.config.gait.duty_factor, 0.65);
        assert_eq!(s.config.params.mass, 90.0);
        assert_eq!(s.config.horizon, 10);
        assert_eq!(s.config.weights.input, 1e-8);
        assert_eq!(s.config.start_xy.x, 0.3);
        assert!(s.config.noise.is_some());
        assert_eq!(s.config.commands.len(), 1);
        assert_eq!(s.config.disturbances.len(), 1);
        assert_eq!(s.config.disturbances[0].wrench[3], 100.0);
    }

    #[test]
    fn disturbance_needs_exactly_one_of_force_or_wrench() {
        let dir = unique_dir("dist-xor");
        write_flat_terrain(&dir);
        let both = write_scenario(
            &dir,
            "both",
            "name = \"x\"\nterrain = \"flat.toml\"\nduration = 1.0\n\n[[disturbance]]\nstart = 0.1\nduration = 0.1\nforce = [1.0, 0.0, 0.0]\nwrench = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0]\n",
        );
        assert!(load_scenario(&both).unwrap_err().message.contains("exactly one"));
        let neither = write_scenario(
            &dir,
            "neither",
            "name = \"x\"\nterrain = \"flat.toml\"\nduration = 1.0\n\n[[disturbance]]\nstart = 0.1\nduration = 0.1\n",
        );
        assert!(load_scenario(&neither).unwrap_err().message.contains("exactly one"));
    }

    #[test]
    fn missing_terrain_is_a_config_error() {
        let dir = unique_dir("missing-terrain");
        let path = write_scenario(
            &dir,
            "orphan",
            "name = \"orphan\"\nterrain = \"nope.toml\"\nduration = 1.0\n",
        );
        let err = load_scenario(&path).unwrap_err();
        assert_eq!(err.code, EXIT_CONFIG);
        assert!(err.message.contains("nope.toml"));
    }

    #[test]
    fn summary_json_is_valid_and_versioned() {
        let dir = unique_dir("summary-json");
        let spec = standing_scenario(&dir, 1.0);
        let scenario = load_scenario(&spec).unwrap();
        let outcome = run_closed_loop(&scenario.config, &scenario.map).unwrap();
        let json = summary_json(&scenario.name, &scenario.config, &outcome.summary);
        let value: Value = serde_json::from_str(&json).expect("summary must be valid JSON");
        assert_eq!(value["schema"].as_str(), Some(SUMMARY_SCHEMA));
        assert_eq!(value["scenario"].as_str(), Some("stand"));
        assert_eq!(value["completed"].as_bool(), Some(true));
        assert!(value["failure"].is_null());
        assert!(value["foothold"]["lf"]["rms"].as_f64().is_some());
        assert!(value["foothold"]["overall"]["max"].as_f64().is_some());
        assert!(value["timing_ms"]["solve_max"].as_f64().is_some());
        // Nine significant digits everywhere a float appears.
        assert!(json.contains("\"commanded_forward_velocity\": 0.00000000e0"));
    }

    #[test]
    fn run_writes_artifacts_and_exits_zero() {
        let dir = unique_dir("run-ok");
        let spec = standing_scenario(&dir, 1.0);
        let out = dir.join("out");
        let code = run_with_args([
            "trotter".to_string(),
            "run".into(),
            spec.display().to_string(),
            "--out".into(),
            out.display().to_string(),
        ]);
        assert_eq!(code, EXIT_SUCCESS);
        for artifact in ["log.csv", "events.csv", "summary.json"] {
            assert!(out.join(artifact).exists(), "missing {artifact}");
        }
        let log = std::fs::read_to_string(out.join("log.csv")).unwrap();
        assert!(log.starts_with("# simlog v1\n"));
    }

    #[test]
    fn spec_path_without_extension_is_resolved() {
        let dir = unique_dir("no-ext");
        let spec = standing_scenario(&dir, 1.0);
        let bare = spec.with_extension("");
        let resolved = resolve_spec_path(&bare);
        assert_eq!(resolved, spec);
    }

    #[test]
    fn fall_scenario_exits_three() {
        let dir = unique_dir("fall");
        write_flat_terrain(&dir);
        // A 800 N*m roll pulse exceeds what the stance can counteract.
        let spec = write_scenario(
            &dir,
            "shove",
            "name = \"shove\"\nterrain = \"flat.toml\"\nduration = 6.0\n\n[[command]]\nstart = 0.0\nvelocity = [0.0, 0.0]\n\n[[disturbance]]\nstart = 2.0\nduration = 0.3\nwrench = [800.0, 0.0, 0.0, 0.0, 0.0, 0.0]\n",
        );
        let out = dir.join("out");
        let result = cmd_run(&spec, None, None, Some(out.clone())).unwrap();
        assert_eq!(result.exit, EXIT_FALL);
        let json = std::fs::read_to_string(out.join("summary.json")).unwrap();
        let value: Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["completed"].as_bool(), Some(false));
        assert_eq!(value["failure"]["kind"].as_str(), Some("fall"));
    }

    #[test]
    fn compare_of_identical_runs_has_zero_deltas() {
        let dir = unique_dir("compare-same");
        let spec = standing_scenario(&dir, 1.0);
        let out_a = dir.join("a");
        let out_b = dir.join("b");
        assert_eq!(cmd_run(&spec, None, None, Some(out_a.clone())).unwrap().exit, 0);
        assert_eq!(cmd_run(&spec, None, None, Some(out_b.clone())).unwrap().exit, 0);
        let table = cmd_compare(&out_a, &out_b).unwrap().stdout;
        assert!(table.starts_with("# compare v1\n"));
        assert!(table.contains("metric,a,b,delta_pct"));
        for line in table.lines().skip(5) {
            let delta = line.rsplit(',').next().unwrap();
            assert!(
                delta == "n/a" || delta.parse::<f64>().map(|d| d == 0.0).unwrap_or(false),
                "nonzero delta in identical runs: {line}"
            );
        }
    }

    #[test]
    fn compare_refuses_mismatched_scenarios_and_schemas() {
        let dir = unique_dir("compare-bad");
        let spec_a = standing_scenario(&dir, 1.0);
        let spec_b = write_scenario(
            &dir,
            "other",
            "name = \"other\"\nterrain = \"flat.toml\"\nduration = 1.0\n",
        );
        let out_a = dir.join("a");
        let out_b = dir.join("b");
        cmd_run(&spec_a, None, None, Some(out_a.clone())).unwrap();
        cmd_run(&spec_b, None, None, Some(out_b.clone())).unwrap();
        let err = cmd_compare(&out_a, &out_b).unwrap_err();
        assert_eq!(err.code, EXIT_CONFIG);
        assert!(err.message.contains("scenario mismatch"));

        // Tamper with the schema tag: compare must refuse it.
        let path = out_b.join("summary.json");
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace(SUMMARY_SCHEMA, "summary v999");
        std::fs::write(&path, text).unwrap();
        let err = cmd_compare(&out_b, &out_a).unwrap_err();
        assert!(err.message.contains("schema"), "{}", err.message);
    }

    #[test]
    fn dump_scores_prints_the_grid() {
        let dir = unique_dir("dump");
        write_flat_terrain(&dir);
        let spec = write_scenario(
            &dir,
            "walk",
            "name = \"walk\"\nterrain = \"flat.toml\"\nduration = 2.0\n\n[[command]]\nstart = 0.0\nvelocity = [0.5, 0.0]\n",
        );
        // Find a touchdown stance change for leg 0 from the error message.
        let err = cmd_dump_scores(&spec, 0, 0).unwrap_err();
        let list_start = err.message.find('[').unwrap();
        let list_end = err.message.find(']').unwrap();
        let first: usize = err.message[list_start + 1..list_end]
            .split(',')
            .next()
            .unwrap()
            .trim()
            .parse()
            .unwrap();
        let result = cmd_dump_scores(&spec, 0, first).unwrap();
        assert!(result.stdout.starts_with("# scores v1\n"));
        assert!(result.stdout.contains("ix,iy,x,y,cost,rejection,nominal,chosen"));
        assert!(result.stdout.contains(",1\n"), "no chosen cell marked");
        assert!(cmd_dump_scores(&spec, 7, 1).is_err());
    }

    #[test]
    fn cli_args_override_scenario_settings() {
        let dir = unique_dir("arg-overrides");
        let spec = standing_scenario(&dir, 1.0);
        let out = dir.join("out");
        let code = run_with_args([
            "trotter".to_string(),
            "run".into(),
            spec.display().to_string(),
            "--ablate".into(),
            "ic".into(),
            "--seed".into(),
            "1234".into(),
            "--out".into(),
            out.display().to_string(),
        ]);
        assert_eq!(code, EXIT_SUCCESS);
        let value: Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(value["ablation"].as_str(), Some("ic"));
        assert_eq!(value["seed"].as_u64(), Some(1234));
    }

    #[test]
    fn unparseable_args_exit_with_config_error() {
        assert_eq!(
            run_with_args(["trotter".to_string(), "frobnicate".into()]),
            EXIT_CONFIG
        );
        assert_eq!(
            run_with_args(["trotter".to_string(), "run".into()]),
            EXIT_CONFIG
        );
    }
}
