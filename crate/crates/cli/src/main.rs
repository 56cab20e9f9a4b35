//! Scenario runner and analysis front-end.
//!
//! Subcommands: `run` (one session from a scenario file), `check`
//! (attack-feasibility analysis of a threshold table), `sweep` (curve
//! tables over energy, timing, blinding power or bias), and `calibrate`
//! (electro-thermal model fit from gain curves and circuit constants).
//! Outputs land in `--out`, or `$BLINDGATE_OUT`, or the working directory.
//! Every artifact embeds the input fingerprint and seed; re-running a
//! command reproduces its artifacts byte for byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use blindgate::calibration::TRANSITION_WIDTH;
use blindgate::detector::{DetectorId, ThresholdTable};
use blindgate::electrothermal::{
    calibrate_kappa, CircuitParams, ElectrothermalModel, GainCurve, KappaCalibration,
};
use blindgate::session::{
    fnv1a64, run_session_with_trace, sweep, ScenarioConfig, SlotRecord, SweepAxis, Verdict,
    DEFAULT_SWEEP_TRIALS,
};
use blindgate::countermeasure::AlarmState;
use blindgate::attack::FeasibilityReport;

const EXIT_CONFIG_ERROR: u8 = 1;
const EXIT_ABORTED_QBER: u8 = 2;
const EXIT_ATTACK_DETECTED: u8 = 3;
const EXIT_BRICKED: u8 = 4;
const EXIT_FAILED_LOW_RATE: u8 = 5;

#[derive(Parser)]
#[command(
    name = "blindgate",
    about = "Discrete-slot simulator for detector-blinding attacks on a gated-APD BB84 receiver",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutputArgs {
    /// Output directory (default: $BLINDGATE_OUT or the working directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Invocation echo written next to the artifacts of every subcommand.
#[derive(Serialize)]
struct RunManifest {
    subcommand: &'static str,
    inputs: Vec<String>,
    seed: Option<u64>,
    output_directory: String,
    artifacts: Vec<String>,
}

impl RunManifest {
    fn write(mut self, out_dir: &Path) -> Result<()> {
        self.output_directory = out_dir.display().to_string();
        self.artifacts.push("manifest.json".to_string());
        fs::write(
            out_dir.join("manifest.json"),
            serde_json::to_string_pretty(&self)?,
        )?;
        Ok(())
    }
}

impl OutputArgs {
    fn resolve(&self) -> Result<PathBuf> {
        let dir = self
            .out
            .clone()
            .or_else(|| std::env::var_os("BLINDGATE_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        Ok(dir)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one session from a scenario file and write the report.
    Run {
        /// Scenario description (TOML; keys carry explicit units).
        #[arg(long)]
        scenario: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the per-slot trace CSV (large).
        #[arg(long)]
        trace: bool,
        /// Lifetime alarm-state file; created if missing, updated after
        /// the session. A bricked state refuses to run.
        #[arg(long)]
        alarm_state: Option<PathBuf>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Evaluate the attack-feasibility conditions on a threshold table.
    Check {
        /// Threshold table CSV (detector,blinding_power_mW,e_gate_never_fJ,...).
        #[arg(long)]
        thresholds: PathBuf,
        /// Blinding power at which to evaluate the table, milliwatts.
        #[arg(long = "power-mw")]
        power_mw: f64,
        /// Relative width of the no-gate click-probability ramp.
        #[arg(long, default_value_t = TRANSITION_WIDTH)]
        transition_width: f64,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Sweep one axis and emit a plot-ready curve table.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        /// trigger_energy | timing_offset | blinding_power | v_bias_level
        #[arg(long)]
        axis: String,
        /// Grid: `start:stop:count` or a comma-separated list.
        #[arg(long, allow_hyphen_values = true)]
        grid: String,
        /// Monte Carlo trials per grid point (detector-response axes).
        #[arg(long, default_value_t = DEFAULT_SWEEP_TRIALS)]
        trials: u32,
        #[arg(long)]
        seed: Option<u64>,
        /// Circuit parameter file for the electro-thermal axes (default:
        /// built-in calibration).
        #[arg(long)]
        circuit: Option<PathBuf>,
        #[arg(long)]
        gain_d0: Option<PathBuf>,
        #[arg(long)]
        gain_d1: Option<PathBuf>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Fit the electro-thermal model: comparator constant bracket, gain
    /// anchors, blinding thresholds.
    Calibrate {
        /// Circuit constants (TOML with `[d0]` and `[d1]` tables).
        #[arg(long)]
        circuit: PathBuf,
        #[arg(long)]
        gain_d0: PathBuf,
        #[arg(long)]
        gain_d1: PathBuf,
        /// Reference trigger energy for the click/no-click pair, picojoules.
        #[arg(long, default_value_t = 0.32)]
        trigger_pj: f64,
        #[command(flatten)]
        output: OutputArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(EXIT_CONFIG_ERROR)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run {
            scenario,
            seed,
            trace,
            alarm_state,
            output,
        } => cmd_run(&scenario, seed, trace, alarm_state.as_deref(), &output),
        Command::Check {
            thresholds,
            power_mw,
            transition_width,
            output,
        } => cmd_check(&thresholds, power_mw, transition_width, &output),
        Command::Sweep {
            scenario,
            axis,
            grid,
            trials,
            seed,
            circuit,
            gain_d0,
            gain_d1,
            output,
        } => cmd_sweep(
            &scenario,
            &axis,
            &grid,
            trials,
            seed,
            circuit.as_deref(),
            gain_d0.as_deref(),
            gain_d1.as_deref(),
            &output,
        ),
        Command::Calibrate {
            circuit,
            gain_d0,
            gain_d1,
            trigger_pj,
            output,
        } => cmd_calibrate(&circuit, &gain_d0, &gain_d1, trigger_pj, &output),
    }
}

fn load_scenario(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read scenario {}", path.display()))?;
    let mut config: ScenarioConfig = toml::from_str(&text)
        .with_context(|| format!("malformed scenario {}", path.display()))?;
    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
    config
        .resolve_response_reference(base_dir)
        .with_context(|| format!("invalid scenario {}", path.display()))?;
    config
        .validate()
        .with_context(|| format!("invalid scenario {}", path.display()))?;
    Ok(config)
}

fn cmd_run(
    scenario_path: &Path,
    seed_override: Option<u64>,
    trace: bool,
    alarm_path: Option<&Path>,
    output: &OutputArgs,
) -> Result<ExitCode> {
    let mut config = load_scenario(scenario_path)?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    let out_dir = output.resolve()?;

    let mut alarm = match alarm_path {
        Some(p) => AlarmState::load_or_default(p)
            .with_context(|| format!("cannot load alarm state {}", p.display()))?,
        None => AlarmState::new(),
    };

    let (report, records) = run_session_with_trace(&config, &mut alarm)?;

    if let Some(p) = alarm_path {
        alarm
            .save(p)
            .with_context(|| format!("cannot save alarm state {}", p.display()))?;
    }

    let report_path = out_dir.join("report.json");
    fs::write(&report_path, report.to_json_string()?)?;
    println!(
        "verdict: {}  sifted: {}  qber: {}  alarm: +{} (counter {})",
        verdict_name(report.verdict),
        report.sifted_count,
        report
            .qber
            .map_or("n/a".to_string(), |q| format!("{q:.5}")),
        report.alarm.increments,
        report.alarm.counter_after,
    );
    if let Some(factor) = &report.blinding_factor {
        println!(
            "blinding factor: {:+.6} (stderr {:.6}, {:?})",
            factor.factor, factor.stderr, factor.verdict
        );
    }
    if let Some(attack) = &report.attack {
        println!(
            "attack: traceless = {}, key overlap = {}",
            attack.traceless,
            attack
                .eve_key_overlap
                .map_or("n/a".to_string(), |v| format!("{v:.4}")),
        );
    }
    println!("report: {}", report_path.display());

    if trace {
        let trace_path = out_dir.join("trace.csv");
        fs::write(
            &trace_path,
            trace_csv(&records, &report.config_fingerprint, config.seed),
        )?;
        println!("trace: {}", trace_path.display());
    }

    let mut artifacts = vec!["report.json".to_string()];
    if trace {
        artifacts.push("trace.csv".to_string());
    }
    RunManifest {
        subcommand: "run",
        inputs: vec![scenario_path.display().to_string()],
        seed: Some(config.seed),
        output_directory: String::new(),
        artifacts,
    }
    .write(&out_dir)?;

    Ok(ExitCode::from(match report.verdict {
        Verdict::KeyOk => 0,
        Verdict::AbortedQber => EXIT_ABORTED_QBER,
        Verdict::AttackDetected => EXIT_ATTACK_DETECTED,
        Verdict::Bricked => EXIT_BRICKED,
        Verdict::FailedLowRate => EXIT_FAILED_LOW_RATE,
    }))
}

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::KeyOk => "key_ok",
        Verdict::AbortedQber => "aborted_qber",
        Verdict::AttackDetected => "attack_detected",
        Verdict::Bricked => "bricked",
        Verdict::FailedLowRate => "failed_low_rate",
    }
}

fn trace_csv(records: &[SlotRecord], fingerprint: &str, seed: u64) -> String {
    let mut out = String::new();
    out.push_str(&format!("# config={fingerprint} seed={seed}\n"));
    out.push_str(
        "slot,alice_bit,alice_basis,bob_basis,gate_applied,suppressed,in_deadtime,level,\
         eve_basis,eve_bit,eve_sent,eve_energy_fJ,eve_offset_ns,click_d0,click_d1,double_click,bob_bit\n",
    );
    let b = |v: bool| if v { "1" } else { "0" };
    for r in records {
        let (eve_basis, eve_bit, eve_sent, eve_energy, eve_offset) = match &r.eve {
            Some(e) => (
                b(e.basis).to_string(),
                b(e.bit).to_string(),
                b(e.sent).to_string(),
                format!("{}", e.energy_fj),
                format!("{}", e.timing_offset_ns),
            ),
            None => Default::default(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.slot,
            b(r.alice_bit),
            b(r.alice_basis),
            b(r.bob_basis),
            b(r.gate_applied),
            b(r.suppressed),
            b(r.in_deadtime),
            r.level_index,
            eve_basis,
            eve_bit,
            eve_sent,
            eve_energy,
            eve_offset,
            b(r.click_d0),
            b(r.click_d1),
            b(r.double_click),
            r.bob_bit.map_or(String::new(), |v| b(v).to_string()),
        ));
    }
    out
}

#[derive(Serialize)]
struct CheckArtifact {
    input: String,
    input_fingerprint: String,
    #[serde(rename = "blinding_power_mW")]
    blinding_power_mw: f64,
    transition_width: f64,
    report: FeasibilityReport,
}

fn cmd_check(
    thresholds: &Path,
    power_mw: f64,
    transition_width: f64,
    output: &OutputArgs,
) -> Result<ExitCode> {
    let bytes = fs::read(thresholds)
        .with_context(|| format!("cannot read threshold table {}", thresholds.display()))?;
    let table = ThresholdTable::from_csv_str(&String::from_utf8_lossy(&bytes), &thresholds.display().to_string())?;
    let set = table.interpolate(power_mw, transition_width)?;
    let report = FeasibilityReport::evaluate(&set);
    let out_dir = output.resolve()?;

    println!(
        "strong conditions: {}",
        if report.strong.holds { "hold" } else { "violated" }
    );
    for check in report.strong.violated() {
        println!(
            "  violated: {} ({} vs {})",
            check.name, check.lhs, check.rhs
        );
    }
    println!(
        "necessary condition: D0 {} (margin {:+.2}% vs gate-never, {:+.2}% vs gate-always), D1 {}",
        if report.necessary.holds_d0 { "holds" } else { "fails" },
        report.necessary.margin_vs_gate_never[0] * 100.0,
        report.necessary.margin_vs_gate_always[0] * 100.0,
        if report.necessary.holds_d1 { "holds" } else { "fails" },
    );
    for target in DetectorId::BOTH {
        match report.perfect_range(target) {
            Some(r) => println!(
                "perfect range {target}: [{:.1}, {:.1}] fJ (half-width {:.1}%)",
                r.lo_fj,
                r.hi_fj,
                r.relative_half_width() * 100.0
            ),
            None => println!("perfect range {target}: empty"),
        }
    }

    let artifact = CheckArtifact {
        input: thresholds.display().to_string(),
        input_fingerprint: format!("{:016x}", fnv1a64(&bytes)),
        blinding_power_mw: power_mw,
        transition_width,
        report,
    };
    let path = out_dir.join("feasibility.json");
    fs::write(&path, serde_json::to_string_pretty(&artifact)?)?;
    println!("feasibility report: {}", path.display());
    RunManifest {
        subcommand: "check",
        inputs: vec![thresholds.display().to_string()],
        seed: None,
        output_directory: String::new(),
        artifacts: vec!["feasibility.json".to_string()],
    }
    .write(&out_dir)?;
    Ok(ExitCode::SUCCESS)
}

fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            bail!("grid `{spec}` must be start:stop:count");
        }
        let start: f64 = parts[0].parse().context("grid start")?;
        let stop: f64 = parts[1].parse().context("grid stop")?;
        let count: usize = parts[2].parse().context("grid count")?;
        if count < 2 {
            bail!("grid needs at least two points, got {count}");
        }
        Ok((0..count)
            .map(|k| start + (stop - start) * k as f64 / (count - 1) as f64)
            .collect())
    } else {
        let grid: Vec<f64> = spec
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse::<f64>().with_context(|| format!("grid value `{s}`")))
            .collect::<Result<_>>()?;
        if grid.is_empty() {
            bail!("empty grid");
        }
        Ok(grid)
    }
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct CircuitFile {
    d0: CircuitParams,
    d1: CircuitParams,
}

fn load_models(
    circuit: Option<&Path>,
    gain_d0: Option<&Path>,
    gain_d1: Option<&Path>,
) -> Result<[ElectrothermalModel; 2]> {
    let params = match circuit {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("cannot read circuit file {}", p.display()))?;
            let file: CircuitFile = toml::from_str(&text)
                .with_context(|| format!("malformed circuit file {}", p.display()))?;
            [file.d0, file.d1]
        }
        None => [CircuitParams::clavis2_d0(), CircuitParams::clavis2_d1()],
    };
    let gain = |path: Option<&Path>, default: GainCurve| -> Result<GainCurve> {
        match path {
            Some(p) => GainCurve::from_csv_file(p).map_err(Into::into),
            None => Ok(default),
        }
    };
    let g0 = gain(gain_d0, GainCurve::clavis2_d0())?;
    let g1 = gain(gain_d1, GainCurve::clavis2_d1())?;
    Ok([
        ElectrothermalModel::new(params[0], g0)?,
        ElectrothermalModel::new(params[1], g1)?,
    ])
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    scenario_path: &Path,
    axis: &str,
    grid_spec: &str,
    trials: u32,
    seed_override: Option<u64>,
    circuit: Option<&Path>,
    gain_d0: Option<&Path>,
    gain_d1: Option<&Path>,
    output: &OutputArgs,
) -> Result<ExitCode> {
    let mut config = load_scenario(scenario_path)?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    let axis = SweepAxis::parse(axis)?;
    let grid = parse_grid(grid_spec)?;
    let models = match axis {
        SweepAxis::BlindingPower | SweepAxis::VBiasLevel => {
            Some(load_models(circuit, gain_d0, gain_d1)?)
        }
        _ => None,
    };
    let table = sweep(&config, axis, &grid, trials, models.as_ref())?;

    let out_dir = output.resolve()?;
    let name = match axis {
        SweepAxis::TriggerEnergy => "sweep_trigger_energy.csv",
        SweepAxis::TimingOffset => "sweep_timing_offset.csv",
        SweepAxis::BlindingPower => "sweep_blinding_power.csv",
        SweepAxis::VBiasLevel => "sweep_v_bias_level.csv",
    };
    let path = out_dir.join(name);
    let mut csv = format!(
        "# config={} seed={} trials={trials}\n",
        config.fingerprint(),
        config.seed
    );
    csv.push_str(&table.to_csv_string());
    fs::write(&path, csv)?;
    println!("{} points -> {}", table.rows.len(), path.display());
    RunManifest {
        subcommand: "sweep",
        inputs: vec![scenario_path.display().to_string()],
        seed: Some(config.seed),
        output_directory: String::new(),
        artifacts: vec![name.to_string()],
    }
    .write(&out_dir)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct DetectorCalibration {
    params: CircuitParams,
    kappa: KappaCalibration,
    #[serde(rename = "gain_at_vbr_minus_2V_A_per_W")]
    gain_at_vbr_minus_2v: f64,
    #[serde(rename = "blinding_threshold_mW")]
    blinding_threshold_mw: f64,
    /// How far the in-gate calibration pulse clears the comparator, mV.
    #[serde(rename = "residual_in_gate_mV")]
    residual_in_gate_mv: f64,
    /// How far the out-of-gate pulse stays below it, mV.
    #[serde(rename = "residual_out_of_gate_mV")]
    residual_out_of_gate_mv: f64,
}

#[derive(Serialize)]
struct CalibrationArtifact {
    input_fingerprint: String,
    #[serde(rename = "trigger_energy_pJ")]
    trigger_energy_pj: f64,
    d0: DetectorCalibration,
    d1: DetectorCalibration,
}

fn cmd_calibrate(
    circuit: &Path,
    gain_d0: &Path,
    gain_d1: &Path,
    trigger_pj: f64,
    output: &OutputArgs,
) -> Result<ExitCode> {
    let mut fingerprint_bytes = Vec::new();
    for p in [circuit, gain_d0, gain_d1] {
        fingerprint_bytes.extend(
            fs::read(p).with_context(|| format!("cannot read {}", p.display()))?,
        );
    }
    let models = load_models(Some(circuit), Some(gain_d0), Some(gain_d1))?;

    let mut calibrated = Vec::new();
    for model in &models {
        let cal = calibrate_kappa(model, trigger_pj)?;
        let mut params = model.params;
        params.kappa_mv_per_pc = cal.kappa_mv_per_pc;
        let threshold = model.blinding_threshold_mw()?;
        calibrated.push(DetectorCalibration {
            params,
            kappa: cal,
            gain_at_vbr_minus_2v: model.gain.at(model.params.v_br_ref_v - 2.0),
            blinding_threshold_mw: threshold,
            residual_in_gate_mv: cal.in_gate_peak_mv - model.params.v_th_mv,
            residual_out_of_gate_mv: model.params.v_th_mv - cal.out_of_gate_peak_mv,
        });
    }
    let d1 = calibrated.pop().unwrap();
    let d0 = calibrated.pop().unwrap();

    for (name, c) in [("D0", &d0), ("D1", &d1)] {
        println!(
            "{name}: kappa = {:.2} mV/pC (bracket [{:.2}, {:.2}]), G(v_br - 2 V) = {:.2} A/W, \
             P_blind = {:.1} uW",
            c.kappa.kappa_mv_per_pc,
            c.kappa.kappa_min_mv_per_pc,
            c.kappa.kappa_max_mv_per_pc,
            c.gain_at_vbr_minus_2v,
            c.blinding_threshold_mw * 1000.0,
        );
        println!(
            "    {trigger_pj} pJ in gate: {:.1} mV (margin {:+.1}); out of gate: {:.1} mV (margin {:+.1})",
            c.kappa.in_gate_peak_mv,
            c.residual_in_gate_mv,
            c.kappa.out_of_gate_peak_mv,
            c.residual_out_of_gate_mv,
        );
    }

    let artifact = CalibrationArtifact {
        input_fingerprint: format!("{:016x}", fnv1a64(&fingerprint_bytes)),
        trigger_energy_pj: trigger_pj,
        d0,
        d1,
    };
    let out_dir = output.resolve()?;
    let path = out_dir.join("calibration.toml");
    fs::write(&path, toml::to_string_pretty(&artifact)?)?;
    println!("calibration: {}", path.display());
    RunManifest {
        subcommand: "calibrate",
        inputs: vec![
            circuit.display().to_string(),
            gain_d0.display().to_string(),
            gain_d1.display().to_string(),
        ],
        seed: None,
        output_directory: String::new(),
        artifacts: vec!["calibration.toml".to_string()],
    }
    .write(&out_dir)?;
    Ok(ExitCode::SUCCESS)
}
