//! End-to-end tests of the command-line interface, driving the real binary
//! against the shipped data files.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_blindgate"))
}

fn data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(rel)
}

fn run_ok(cmd: &mut Command) -> Output {
    let output = cmd.output().expect("binary runs");
    assert!(
        output.status.success(),
        "command failed ({:?}):\n{}\n{}",
        output.status,
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

#[test]
fn honest_run_produces_key_ok_report() {
    let dir = tempfile::tempdir().unwrap();
    let output = run_ok(
        bin()
            .arg("run")
            .arg("--scenario")
            .arg(data("scenarios/honest.toml"))
            .arg("--seed")
            .arg("7")
            .arg("--out")
            .arg(dir.path()),
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("verdict: key_ok"), "{stdout}");
    let report = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(json["verdict"], "key_ok");
    assert_eq!(json["seed"], 7);
    assert!(json["config_fingerprint"].as_str().unwrap().len() == 16);
    // The manifest echoes the invocation and records the seed.
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["subcommand"], "run");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["artifacts"][0], "report.json");
}

#[test]
fn reports_are_reproducible_byte_for_byte() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for dir in [&dir_a, &dir_b] {
        run_ok(
            bin()
                .arg("run")
                .arg("--scenario")
                .arg(data("scenarios/modified_attack.toml"))
                .arg("--out")
                .arg(dir.path())
                .arg("--trace"),
        );
    }
    let a = std::fs::read(dir_a.path().join("report.json")).unwrap();
    let b = std::fs::read(dir_b.path().join("report.json")).unwrap();
    assert_eq!(a, b);
    let ta = std::fs::read(dir_a.path().join("trace.csv")).unwrap();
    let tb = std::fs::read(dir_b.path().join("trace.csv")).unwrap();
    assert_eq!(ta, tb);
    // Trace header carries the fingerprint and seed.
    let head = String::from_utf8_lossy(&ta);
    assert!(head.starts_with("# config="), "{}", &head[..60.min(head.len())]);
}

#[test]
fn original_attack_bricks_and_persists_state() {
    let dir = tempfile::tempdir().unwrap();
    let alarm_path = dir.path().join("alarm.json");
    let output = bin()
        .arg("run")
        .arg("--scenario")
        .arg(data("scenarios/original_attack.toml"))
        .arg("--out")
        .arg(dir.path())
        .arg("--alarm-state")
        .arg(&alarm_path)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(4), "bricked exit code");
    let alarm: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&alarm_path).unwrap()).unwrap();
    assert_eq!(alarm["bricked"], true);

    // A second run against the persisted state refuses immediately.
    let output = bin()
        .arg("run")
        .arg("--scenario")
        .arg(data("scenarios/honest.toml"))
        .arg("--out")
        .arg(dir.path())
        .arg("--alarm-state")
        .arg(&alarm_path)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(4));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["verdict"], "bricked");
    assert_eq!(report["n_slots_executed"], 0);
}

#[test]
fn modified_attack_run_is_traceless_key_ok() {
    let dir = tempfile::tempdir().unwrap();
    let output = run_ok(
        bin()
            .arg("run")
            .arg("--scenario")
            .arg(data("scenarios/modified_attack.toml"))
            .arg("--out")
            .arg(dir.path()),
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("verdict: key_ok"), "{stdout}");
    assert!(stdout.contains("traceless = true"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["attack"]["traceless"], true);
    assert_eq!(report["alarm"]["increments"], 0);
    assert_eq!(report["qber"], 0.0);
}

#[test]
fn two_level_mixture_clears_the_factor_test() {
    let dir = tempfile::tempdir().unwrap();
    let output = run_ok(
        bin()
            .arg("run")
            .arg("--scenario")
            .arg(data("scenarios/two_level_mixture.toml"))
            .arg("--out")
            .arg(dir.path()),
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("verdict: key_ok"), "{stdout}");
    assert!(stdout.contains("Clear"), "{stdout}");
}

#[test]
fn check_reports_strong_conditions_on_shipped_table() {
    let dir = tempfile::tempdir().unwrap();
    let output = run_ok(
        bin()
            .arg("check")
            .arg("--thresholds")
            .arg(data("measured_thresholds.csv"))
            .arg("--power-mw")
            .arg("0.38")
            .arg("--out")
            .arg(dir.path()),
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("strong conditions: hold"), "{stdout}");
    let artifact: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("feasibility.json")).unwrap())
            .unwrap();
    assert_eq!(artifact["report"]["strong"]["holds"], true);
    let lo = artifact["report"]["perfect_range_d0"]["lo_fJ"].as_f64().unwrap();
    let hi = artifact["report"]["perfect_range_d0"]["hi_fJ"].as_f64().unwrap();
    assert!(lo <= 252.0 && 252.0 <= hi);
}

#[test]
fn check_names_the_violated_inequality_on_degenerate_data() {
    let dir = tempfile::tempdir().unwrap();
    let degenerate = dir.path().join("degenerate.csv");
    std::fs::write(
        &degenerate,
        "detector,blinding_power_mW,e_gate_never_fJ,e_gate_always_fJ,e_nogate_never_fJ\n\
         0,0.38,100,100,100\n1,0.38,100,100,100\n",
    )
    .unwrap();
    let output = run_ok(
        bin()
            .arg("check")
            .arg("--thresholds")
            .arg(&degenerate)
            .arg("--power-mw")
            .arg("0.38")
            .arg("--out")
            .arg(dir.path()),
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("strong conditions: violated"), "{stdout}");
    assert!(stdout.contains("violated: ordering_D0"), "{stdout}");
}

#[test]
fn check_reports_the_v1_margin() {
    // First-generation data: 710 fJ no-gate threshold vs 720 fJ
    // always-click energy, a ~1.5% shortfall.
    let dir = tempfile::tempdir().unwrap();
    let v1 = dir.path().join("v1.csv");
    std::fs::write(
        &v1,
        "detector,blinding_power_mW,e_gate_never_fJ,e_gate_always_fJ,e_nogate_never_fJ\n\
         0,1.08,650,720,710\n1,1.08,650,720,710\n",
    )
    .unwrap();
    let output = run_ok(
        bin()
            .arg("check")
            .arg("--thresholds")
            .arg(&v1)
            .arg("--power-mw")
            .arg("1.08")
            .arg("--out")
            .arg(dir.path()),
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("necessary condition: D0 holds"), "{stdout}");
    let artifact: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("feasibility.json")).unwrap())
            .unwrap();
    assert_eq!(artifact["report"]["strong"]["holds"], false);
    let margin = artifact["report"]["necessary"]["margin_vs_gate_always"][0]
        .as_f64()
        .unwrap();
    assert!(margin < 0.0 && margin.abs() > 0.01 && margin.abs() < 0.02, "margin {margin}");
}

#[test]
fn sweep_emits_monotone_threshold_curves() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(
        bin()
            .arg("sweep")
            .arg("--scenario")
            .arg(data("scenarios/modified_attack.toml"))
            .arg("--axis")
            .arg("blinding_power")
            .arg("--grid")
            .arg("0:1.1:12")
            .arg("--out")
            .arg(dir.path()),
    );
    let csv = std::fs::read_to_string(dir.path().join("sweep_blinding_power.csv")).unwrap();
    assert!(csv.starts_with("# config="));
    let mut lines = csv.lines().skip(1);
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|c| *c == name).unwrap();
    let v_apd_ix = col("v_apd_d0_V");
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|s| s.parse().unwrap()).collect())
        .collect();
    let mut prev = f64::INFINITY;
    for cells in &rows {
        assert!(cells[v_apd_ix] < prev, "bias voltage must fall with power");
        prev = cells[v_apd_ix];
    }
    // Synthesized threshold curves rise with power wherever defined.
    for d in ["d0", "d1"] {
        for name in [
            format!("e_gate_never_{d}_fJ"),
            format!("e_gate_always_{d}_fJ"),
            format!("e_nogate_never_{d}_fJ"),
        ] {
            let ix = col(&name);
            let mut prev = 0.0f64;
            for cells in &rows {
                if cells[ix].is_nan() {
                    continue;
                }
                assert!(cells[ix] >= prev, "{name} not monotone");
                prev = cells[ix];
            }
        }
    }
}

#[test]
fn scenario_with_curve_reference_runs() {
    let dir = tempfile::tempdir().unwrap();
    let output = run_ok(
        bin()
            .arg("run")
            .arg("--scenario")
            .arg(data("scenarios/modified_attack_from_csv.toml"))
            .arg("--out")
            .arg(dir.path()),
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("verdict: key_ok"), "{stdout}");
    assert!(stdout.contains("traceless = true"), "{stdout}");
}

#[test]
fn sweep_energy_axis_regenerates_click_curves() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(
        bin()
            .arg("sweep")
            .arg("--scenario")
            .arg(data("scenarios/two_level_mixture.toml"))
            .arg("--axis")
            .arg("trigger_energy")
            .arg("--grid")
            .arg("0:400:41")
            .arg("--trials")
            .arg("300")
            .arg("--out")
            .arg(dir.path()),
    );
    let csv = std::fs::read_to_string(dir.path().join("sweep_trigger_energy.csv")).unwrap();
    let mut lines = csv.lines().skip(1);
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    let hi = header.iter().position(|c| c == "click_prob_d0_level1").unwrap();
    let lo = header.iter().position(|c| c == "click_prob_d0_level0").unwrap();
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|s| s.parse().unwrap()).collect())
        .collect();
    // Zero energy: no clicks. Top of the grid: both levels saturated.
    assert_eq!(rows[0][hi], 0.0);
    assert_eq!(rows[0][lo], 0.0);
    assert_eq!(rows.last().unwrap()[hi], 1.0);
    assert_eq!(rows.last().unwrap()[lo], 1.0);
    // Separation window: full-bias clicks while reduced-bias is silent.
    assert!(rows
        .iter()
        .any(|r| r[hi] == 1.0 && r[lo] == 0.0));
}

#[test]
fn sweep_rejects_empty_grid() {
    let output = bin()
        .arg("sweep")
        .arg("--scenario")
        .arg(data("scenarios/honest.toml"))
        .arg("--axis")
        .arg("trigger_energy")
        .arg("--grid")
        .arg("")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("grid"));
}

#[test]
fn calibrate_fits_kappa_and_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let output = run_ok(
        bin()
            .arg("calibrate")
            .arg("--circuit")
            .arg(data("circuit.toml"))
            .arg("--gain-d0")
            .arg(data("gain_d0.csv"))
            .arg("--gain-d1")
            .arg(data("gain_d1.csv"))
            .arg("--out")
            .arg(dir.path()),
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("kappa"), "{stdout}");
    let text = std::fs::read_to_string(dir.path().join("calibration.toml")).unwrap();
    let artifact: toml::Value = toml::from_str(&text).unwrap();
    for d in ["d0", "d1"] {
        let g = artifact[d]["gain_at_vbr_minus_2V_A_per_W"].as_float().unwrap();
        assert!((7.0..=10.0).contains(&g), "{d}: G(v_br - 2) = {g}");
        // The calibration pulse brackets the comparator threshold.
        assert!(artifact[d]["residual_in_gate_mV"].as_float().unwrap() > 0.0);
        assert!(artifact[d]["residual_out_of_gate_mV"].as_float().unwrap() > 0.0);
    }
}

#[test]
fn calibrate_rejects_missing_column() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad_gain.csv");
    std::fs::write(&bad, "v_apd_V\n31\n").unwrap();
    let output = bin()
        .arg("calibrate")
        .arg("--circuit")
        .arg(data("circuit.toml"))
        .arg("--gain-d0")
        .arg(&bad)
        .arg("--gain-d1")
        .arg(data("gain_d1.csv"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("gain_A_per_W"), "{stderr}");
}

#[test]
fn malformed_scenario_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    // Unit-less key: must be rejected, not silently accepted.
    let text = std::fs::read_to_string(data("scenarios/honest.toml"))
        .unwrap()
        .replace("channel_transmittance", "transmittance");
    std::fs::write(&bad, text).unwrap();
    let output = bin()
        .arg("run")
        .arg("--scenario")
        .arg(&bad)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("transmittance"), "{stderr}");
}

#[test]
fn high_noise_scenario_exits_with_qber_code() {
    let dir = tempfile::tempdir().unwrap();
    let noisy = dir.path().join("noisy.toml");
    let text = std::fs::read_to_string(data("scenarios/honest.toml"))
        .unwrap()
        .replace("flip_probability = 0.0", "flip_probability = 0.2")
        .replace("n_slots = 1000000", "n_slots = 100000");
    std::fs::write(&noisy, text).unwrap();
    let output = bin()
        .arg("run")
        .arg("--scenario")
        .arg(&noisy)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "aborted_qber exit code");
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(
        bin()
            .arg("check")
            .arg("--thresholds")
            .arg(data("measured_thresholds.csv"))
            .arg("--power-mw")
            .arg("0.5")
            .env("BLINDGATE_OUT", dir.path()),
    );
    assert!(dir.path().join("feasibility.json").exists());
}
