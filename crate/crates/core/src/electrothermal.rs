//! Electro-thermal model of a blinded APD and its readout circuit.
//!
//! Under c.w. illumination the APD's photocurrent loads the bias network,
//! the voltage across the diode drops, and the device settles into linear
//! mode. This module finds that operating point self-consistently (the
//! photocurrent depends on the gain, the gain on the internal voltage, the
//! internal voltage on the photocurrent), tracks the thermal shift of the
//! breakdown voltage, and synthesizes trigger-energy threshold curves from
//! the gain characteristic and the comparator threshold.
//!
//! Unit conventions keep the arithmetic coherent without conversion
//! factors: volts x milliamperes = milliwatts, milliamperes x nanoseconds =
//! picocoulombs, and picocoulombs / picojoules = amperes per watt.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::detector::{DetectorId, DetectorThresholds, ThresholdCurves, ThresholdRow, ThresholdTable};
use crate::error::{Error, Result};

/// Electrical and thermal constants of one detector channel.
///
/// `kappa` (comparator peak millivolts per picocoulomb of avalanche charge)
/// and `gate_charge_cal_pc` are calibration parameters that absorb the
/// unpublished comparator response; see [`calibrate_kappa`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitParams {
    /// Negative high-voltage supply, volts.
    #[serde(rename = "v_bias_V")]
    pub v_bias_v: f64,
    /// Breakdown voltage magnitude at the reference temperature, volts.
    #[serde(rename = "v_br_ref_V")]
    pub v_br_ref_v: f64,
    /// Gate pulse amplitude, volts.
    #[serde(rename = "v_gate_V")]
    pub v_gate_v: f64,
    pub gate_duration_ns: f64,
    /// Comparator click threshold, millivolts.
    #[serde(rename = "v_th_mV")]
    pub v_th_mv: f64,
    /// R1 + R2, ohms.
    #[serde(rename = "r_sense_Ohm")]
    pub r_sense_ohm: f64,
    /// R3, ohms.
    #[serde(rename = "r_load_Ohm")]
    pub r_load_ohm: f64,
    /// Passive internal resistance of the APD, ohms.
    #[serde(rename = "r_internal_Ohm")]
    pub r_internal_ohm: f64,
    #[serde(rename = "theta_thermal_K_per_W")]
    pub theta_thermal_k_per_w: f64,
    #[serde(rename = "vbr_temp_coeff_V_per_K")]
    pub vbr_temp_coeff_v_per_k: f64,
    /// Comparator transimpedance constant, millivolts per picocoulomb.
    #[serde(rename = "kappa_mV_per_pC")]
    pub kappa_mv_per_pc: f64,
    /// Charge contributed by the gate alone at the calibration power, pC.
    #[serde(rename = "gate_charge_cal_pC")]
    pub gate_charge_cal_pc: f64,
    /// Blinding power at which the gate charge was measured, mW.
    #[serde(rename = "p_cal_mW")]
    pub p_cal_mw: f64,
}

impl CircuitParams {
    /// Detector 0 of the tested receiver.
    pub fn clavis2_d0() -> Self {
        Self {
            v_bias_v: -55.26,
            v_br_ref_v: 57.52,
            v_gate_v: 3.0,
            gate_duration_ns: 2.8,
            v_th_mv: 70.0,
            r_sense_ohm: 50.0,
            r_load_ohm: 1000.0,
            r_internal_ohm: 330.0,
            theta_thermal_k_per_w: 190.0,
            vbr_temp_coeff_v_per_k: 0.1,
            kappa_mv_per_pc: 34.2,
            gate_charge_cal_pc: 1.053,
            p_cal_mw: 0.56,
        }
    }

    /// Detector 1 of the tested receiver.
    pub fn clavis2_d1() -> Self {
        Self {
            v_bias_v: -54.70,
            v_br_ref_v: 56.70,
            r_internal_ohm: 275.0,
            kappa_mv_per_pc: 28.2,
            ..Self::clavis2_d0()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_bias_v < 0.0) {
            return Err(Error::Parameter(format!(
                "v_bias must be a negative supply voltage, got {}",
                self.v_bias_v
            )));
        }
        if !(self.r_load_ohm > 0.0) || !(self.r_sense_ohm >= 0.0) || !(self.r_internal_ohm >= 0.0) {
            return Err(Error::Parameter("resistances must be non-negative, r_load positive".into()));
        }
        if self.r_sense_ohm >= self.r_load_ohm {
            return Err(Error::Parameter(format!(
                "r_sense ({}) must be far below r_load ({})",
                self.r_sense_ohm, self.r_load_ohm
            )));
        }
        if !(self.v_gate_v > 0.0) || !(self.theta_thermal_k_per_w > 0.0) {
            return Err(Error::Parameter("v_gate and theta_thermal must be positive".into()));
        }
        if !(self.v_th_mv > 0.0) || !(self.kappa_mv_per_pc > 0.0) {
            return Err(Error::Parameter("v_th and kappa must be positive".into()));
        }
        Ok(())
    }

    /// Comparator charge threshold, pC: the avalanche charge whose peak
    /// reaches `v_th`. This is the stored form of the current threshold.
    pub fn charge_threshold_pc(&self) -> f64 {
        self.v_th_mv / self.kappa_mv_per_pc
    }

    pub fn v_bias_abs(&self) -> f64 {
        self.v_bias_v.abs()
    }

    fn r_series_kohm(&self) -> f64 {
        (self.r_load_ohm + self.r_sense_ohm) / 1000.0
    }

    fn r_internal_kohm(&self) -> f64 {
        self.r_internal_ohm / 1000.0
    }
}

/// APD voltage at the diode from the T2 test-point reading:
/// `V_APD = V_T2 + (V_T2 - V_bias) * (R1 + R2) / R3`. Exact linear
/// arithmetic on signed (negative) voltages.
pub fn vapd_from_testpoint(v_t2_v: f64, params: &CircuitParams) -> f64 {
    v_t2_v + (v_t2_v - params.v_bias_v) * params.r_sense_ohm / params.r_load_ohm
}

/// Inverse of [`vapd_from_testpoint`].
pub fn testpoint_from_vapd(v_apd_v: f64, params: &CircuitParams) -> f64 {
    let r = params.r_sense_ohm / params.r_load_ohm;
    (v_apd_v + params.v_bias_v * r) / (1.0 + r)
}

/// Heat dissipated in the APD: electrical heating plus absorbed optical
/// power, in milliwatts.
pub fn heat_dissipation(v_apd_v: f64, i_apd_ma: f64, p_opt_mw: f64) -> f64 {
    v_apd_v.abs() * i_apd_ma + p_opt_mw
}

/// Thermal increase of the breakdown voltage for a given heat load.
pub fn vbr_shift(heat_mw: f64, params: &CircuitParams) -> f64 {
    heat_mw * 1e-3 * params.theta_thermal_k_per_w * params.vbr_temp_coeff_v_per_k
}

/// Linear-mode gain inferred from the extra charge a trigger pulse of known
/// energy produced: pC / pJ = A/W.
pub fn gain_from_charge(delta_charge_pc: f64, trigger_energy_pj: f64) -> Result<f64> {
    if !(trigger_energy_pj > 0.0) {
        return Err(Error::Parameter(format!(
            "trigger energy must be positive, got {trigger_energy_pj} pJ"
        )));
    }
    Ok(delta_charge_pc / trigger_energy_pj)
}

/// Small-signal gain versus APD voltage: zero below the punch-through
/// voltage, log-linear between sample points above it, clamped past the
/// last sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainCurve {
    #[serde(rename = "punch_through_V")]
    pub punch_through_v: f64,
    /// (v_apd volts, gain A/W) samples, ascending in voltage, gain > 0.
    pub points: Vec<(f64, f64)>,
}

impl GainCurve {
    pub fn new(punch_through_v: f64, points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Parameter("gain curve needs at least one sample".into()));
        }
        for pair in points.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::Parameter(format!(
                    "gain samples must be strictly ascending in voltage ({} then {})",
                    pair[0].0, pair[1].0
                )));
            }
            if pair[1].1 < pair[0].1 {
                return Err(Error::Parameter(format!(
                    "gain must be non-decreasing (drops at {} V)",
                    pair[1].0
                )));
            }
        }
        if points.iter().any(|&(_, g)| !(g > 0.0)) {
            return Err(Error::Parameter("gain samples must be positive".into()));
        }
        if points[0].0 < punch_through_v {
            return Err(Error::Parameter(format!(
                "first gain sample ({} V) below punch-through ({} V)",
                points[0].0, punch_through_v
            )));
        }
        Ok(Self {
            punch_through_v,
            points,
        })
    }

    /// Digitized gain characteristic of detector 0 (anchored at the
    /// measured 3 A/W and 13 A/W operating voltages).
    pub fn clavis2_d0() -> Self {
        Self::new(
            31.0,
            vec![(31.0, 0.7), (53.77, 3.0), (56.77, 13.0), (57.52, 100.0)],
        )
        .unwrap()
    }

    /// Digitized gain characteristic of detector 1 (same shape, shifted to
    /// its lower breakdown voltage).
    pub fn clavis2_d1() -> Self {
        Self::new(
            31.0,
            vec![(31.0, 0.7), (52.26, 3.0), (55.26, 13.0), (56.70, 100.0)],
        )
        .unwrap()
    }

    /// Gain at the given APD voltage, A/W.
    pub fn at(&self, v_apd_v: f64) -> f64 {
        if v_apd_v < self.punch_through_v {
            return 0.0;
        }
        let pts = &self.points;
        if v_apd_v <= pts[0].0 {
            return pts[0].1;
        }
        if v_apd_v >= pts[pts.len() - 1].0 {
            return pts[pts.len() - 1].1;
        }
        let hi = pts.partition_point(|&(v, _)| v < v_apd_v);
        let (v0, g0) = pts[hi - 1];
        let (v1, g1) = pts[hi];
        let f = (v_apd_v - v0) / (v1 - v0);
        (g0.ln() + f * (g1.ln() - g0.ln())).exp()
    }

    pub fn from_csv_str(text: &str, path: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let (_, header) = lines.next().ok_or_else(|| Error::CsvParse {
            path: path.to_string(),
            line: 1,
            message: "empty file".to_string(),
        })?;
        let columns: Vec<&str> = header.split(',').map(str::trim).collect();
        let v_ix = columns
            .iter()
            .position(|c| *c == "v_apd_V")
            .ok_or_else(|| Error::CsvSchema {
                path: path.to_string(),
                column: "v_apd_V".to_string(),
            })?;
        let g_ix = columns
            .iter()
            .position(|c| *c == "gain_A_per_W")
            .ok_or_else(|| Error::CsvSchema {
                path: path.to_string(),
                column: "gain_A_per_W".to_string(),
            })?;
        let mut zero_v: Option<f64> = None;
        let mut points = Vec::new();
        for (line_ix, line) in lines {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            let parse = |ix: usize, name: &str| -> Result<f64> {
                let s = cells.get(ix).copied().unwrap_or("");
                s.parse::<f64>().map_err(|_| Error::CsvParse {
                    path: path.to_string(),
                    line: line_ix + 1,
                    message: format!("`{s}` is not a number in column `{name}`"),
                })
            };
            let v = parse(v_ix, "v_apd_V")?;
            let g = parse(g_ix, "gain_A_per_W")?;
            if g == 0.0 {
                zero_v = Some(zero_v.map_or(v, |z: f64| z.max(v)));
            } else {
                points.push((v, g));
            }
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let punch = zero_v.unwrap_or_else(|| points.first().map(|&(v, _)| v).unwrap_or(0.0));
        Self::new(punch, points)
    }

    pub fn from_csv_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv_str(&text, &path.display().to_string())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("v_apd_V,gain_A_per_W\n");
        out.push_str(&format!("{},0\n", self.punch_through_v));
        for &(v, g) in &self.points {
            if v > self.punch_through_v || g > 0.0 {
                out.push_str(&format!("{v},{g}\n"));
            }
        }
        out
    }
}

/// Self-consistent operating point of a blinded detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlindingOperatingPoint {
    #[serde(rename = "p_blind_mW")]
    pub p_blind_mw: f64,
    /// APD voltage magnitude, volts.
    #[serde(rename = "v_apd_V")]
    pub v_apd_v: f64,
    #[serde(rename = "i_apd_mA")]
    pub i_apd_ma: f64,
    /// Voltage across the ideal junction after the internal resistance.
    #[serde(rename = "v_internal_V")]
    pub v_internal_v: f64,
    #[serde(rename = "heat_mW")]
    pub heat_mw: f64,
    #[serde(rename = "delta_vbr_V")]
    pub delta_vbr_v: f64,
    pub blinded: bool,
}

/// One detector's circuit constants plus its gain characteristic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectrothermalModel {
    pub params: CircuitParams,
    pub gain: GainCurve,
}

const MAX_ITERATIONS: u32 = 10_000;
const V_TOLERANCE: f64 = 1e-3;

impl ElectrothermalModel {
    pub fn new(params: CircuitParams, gain: GainCurve) -> Result<Self> {
        params.validate()?;
        let g_near_br = gain.at(params.v_br_ref_v - 2.0);
        if !(1.0..=100.0).contains(&g_near_br) {
            return Err(Error::Config(format!(
                "gain at v_br - 2 V is {g_near_br:.2} A/W, outside the plausible [1, 100] range"
            )));
        }
        Ok(Self { params, gain })
    }

    pub fn clavis2_d0() -> Self {
        Self::new(CircuitParams::clavis2_d0(), GainCurve::clavis2_d0()).unwrap()
    }

    pub fn clavis2_d1() -> Self {
        Self::new(CircuitParams::clavis2_d1(), GainCurve::clavis2_d1()).unwrap()
    }

    pub fn clavis2_pair() -> [Self; 2] {
        [Self::clavis2_d0(), Self::clavis2_d1()]
    }

    fn operating_point(&self, i_apd_ma: f64, p_blind_mw: f64) -> BlindingOperatingPoint {
        let p = &self.params;
        let v_apd = p.v_bias_abs() - i_apd_ma * p.r_series_kohm();
        let v_internal = v_apd - i_apd_ma * p.r_internal_kohm();
        let heat = heat_dissipation(v_apd, i_apd_ma, p_blind_mw);
        let delta_vbr = vbr_shift(heat, p);
        BlindingOperatingPoint {
            p_blind_mw,
            v_apd_v: v_apd,
            i_apd_ma,
            v_internal_v: v_internal,
            heat_mw: heat,
            delta_vbr_v: delta_vbr,
            blinded: v_apd + p.v_gate_v < p.v_br_ref_v + delta_vbr,
        }
    }

    /// Photocurrent the gain curve predicts at a trial current: the fixed
    /// point of this map is the operating point.
    fn current_response_ma(&self, i_apd_ma: f64, p_blind_mw: f64) -> f64 {
        let op = self.operating_point(i_apd_ma, p_blind_mw);
        self.gain.at(op.v_internal_v.max(0.0)) * p_blind_mw
    }

    /// Finds the self-consistent operating point by damped fixed-point
    /// iteration on the photocurrent. The response current is non-increasing
    /// in the trial current (more current, less voltage, less gain), so the
    /// fixed point is unique; the damping factor halves whenever the
    /// residual grows.
    pub fn steady_state(&self, p_blind_mw: f64) -> Result<BlindingOperatingPoint> {
        if !(p_blind_mw >= 0.0) {
            return Err(Error::Parameter(format!(
                "blinding power must be non-negative, got {p_blind_mw}"
            )));
        }
        if p_blind_mw == 0.0 {
            return Ok(self.operating_point(0.0, 0.0));
        }
        let r_series = self.params.r_series_kohm();
        let mut i = 0.0f64;
        let mut alpha = 0.5f64;
        let mut prev_abs = f64::INFINITY;
        for _ in 0..MAX_ITERATIONS {
            let residual = self.current_response_ma(i, p_blind_mw) - i;
            if residual.abs() * r_series < V_TOLERANCE {
                return Ok(self.operating_point(i, p_blind_mw));
            }
            if residual.abs() > prev_abs {
                alpha = (alpha * 0.5).max(1e-4);
            }
            prev_abs = residual.abs();
            i = (i + alpha * residual).max(0.0);
        }
        let last = self.operating_point(i, p_blind_mw);
        Err(Error::Numerical(format!(
            "steady state did not converge within {MAX_ITERATIONS} iterations at {p_blind_mw} mW \
             (last iterate: v_apd = {:.4} V, i_apd = {:.4} mA)",
            last.v_apd_v, last.i_apd_ma
        )))
    }

    /// Smallest c.w. power at which the detector is blinded, found by
    /// bisection to 0.1 uW. The blinded flag is monotone in power, so a
    /// bracket between an unblinded and a blinded endpoint is enough.
    pub fn blinding_threshold_mw(&self) -> Result<f64> {
        const P_MAX: f64 = 2.0;
        const TOL: f64 = 1e-4;
        let lo_pt = self.steady_state(0.0)?;
        if lo_pt.blinded {
            return Err(Error::Config(
                "detector is blinded at zero power; gate never reaches breakdown".into(),
            ));
        }
        let hi_pt = self.steady_state(P_MAX)?;
        if !hi_pt.blinded {
            return Err(Error::Config(format!(
                "no sign change: detector not blinded anywhere below {P_MAX} mW"
            )));
        }
        let (mut lo, mut hi) = (0.0f64, P_MAX);
        while hi - lo > TOL {
            let mid = 0.5 * (lo + hi);
            if self.steady_state(mid)?.blinded {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Effective charge-collection time of the comparator path, fixed so
    /// the modeled gate-alone charge matches the measured value at the
    /// calibration power.
    fn gate_charge_time_ns(&self) -> Result<f64> {
        let p = &self.params;
        let op = self.steady_state(p.p_cal_mw)?;
        if !op.blinded {
            return Err(Error::Config(format!(
                "calibration power {} mW does not blind the detector",
                p.p_cal_mw
            )));
        }
        let g_gate = self.gain.at(op.v_internal_v + p.v_gate_v);
        let g_nogate = self.gain.at(op.v_internal_v);
        let delta_g = g_gate - g_nogate;
        if !(delta_g > 0.0) {
            return Err(Error::Config(
                "gate adds no gain at the calibration power; cannot calibrate gate charge".into(),
            ));
        }
        Ok(p.gate_charge_cal_pc / (delta_g * p.p_cal_mw))
    }

    /// Trigger-energy thresholds synthesized at one blinding power.
    ///
    /// The comparator sees `kappa * (q_gate + G_gate * E)` inside the gate
    /// (the gate's own charge rides under the trigger response) and
    /// `kappa * G_nogate * E` without it. Solving each against `v_th` gives
    /// the band centres; the never/always band is applied symmetrically
    /// with the given relative width.
    pub fn thresholds_at(
        &self,
        p_blind_mw: f64,
        transition_width: f64,
    ) -> Result<DetectorThresholds> {
        let p = &self.params;
        let op = self.steady_state(p_blind_mw)?;
        if !op.blinded {
            return Err(Error::Config(format!(
                "{p_blind_mw} mW is below the blinding threshold; thresholds are only defined in linear mode"
            )));
        }
        let g_gate = self.gain.at(op.v_internal_v + p.v_gate_v);
        let g_nogate = self.gain.at(op.v_internal_v);
        let q_th = p.charge_threshold_pc();
        let half = transition_width / 2.0;

        if g_gate <= 0.0 {
            // Below punch-through even inside the gate: no photosensitivity.
            return Ok(DetectorThresholds {
                e_gate_never_fj: f64::INFINITY,
                e_gate_always_fj: f64::INFINITY,
                e_nogate_never_fj: f64::INFINITY,
            });
        }
        let tau_ns = self.gate_charge_time_ns()?;
        let q_gate = (g_gate - g_nogate).max(0.0) * p_blind_mw * tau_ns;
        if q_gate >= q_th {
            return Err(Error::Config(format!(
                "at {p_blind_mw} mW the gate alone trips the comparator (q_gate = {q_gate:.3} pC >= {q_th:.3} pC); \
                 increase the blinding power"
            )));
        }
        let e_gate_centre_fj = (q_th - q_gate) / g_gate * 1000.0;
        let e_nogate_centre_fj = if g_nogate > 0.0 {
            q_th / g_nogate * 1000.0
        } else {
            f64::INFINITY
        };
        Ok(DetectorThresholds {
            e_gate_never_fj: e_gate_centre_fj * (1.0 - half),
            e_gate_always_fj: e_gate_centre_fj * (1.0 + half),
            e_nogate_never_fj: e_nogate_centre_fj * (1.0 - half),
        })
    }
}

/// Builds full threshold-vs-power curves for both detectors from their
/// electro-thermal models. Every grid power must lie above both blinding
/// thresholds.
pub fn synthesize_threshold_curves(
    d0: &ElectrothermalModel,
    d1: &ElectrothermalModel,
    p_grid_mw: &[f64],
    transition_width: f64,
) -> Result<ThresholdCurves> {
    if p_grid_mw.len() < 2 {
        return Err(Error::Parameter(
            "threshold synthesis needs at least two grid powers".into(),
        ));
    }
    let mut rows = Vec::with_capacity(p_grid_mw.len() * 2);
    for (detector, model) in [(DetectorId::D0, d0), (DetectorId::D1, d1)] {
        for &p in p_grid_mw {
            rows.push(ThresholdRow {
                detector,
                blinding_power_mw: p,
                thresholds: model.thresholds_at(p, transition_width)?,
            });
        }
    }
    ThresholdTable { rows }.validate(transition_width)
}

/// Outcome of the comparator-constant calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaCalibration {
    /// Below this the in-gate calibration pulse would not click.
    pub kappa_min_mv_per_pc: f64,
    /// Above this the gate alone (or the out-of-gate pulse) would click.
    pub kappa_max_mv_per_pc: f64,
    /// Geometric midpoint, the recommended value.
    pub kappa_mv_per_pc: f64,
    /// Comparator peak for the in-gate calibration pulse at the midpoint, mV.
    pub in_gate_peak_mv: f64,
    /// Comparator peak for the same pulse outside the gate, mV.
    pub out_of_gate_peak_mv: f64,
    /// Comparator peak of the gate alone, mV.
    pub gate_alone_peak_mv: f64,
}

/// Calibrates kappa from the one fully specified click/no-click pair: at
/// the calibration power a trigger of `trigger_energy_pj` clicks inside the
/// gate and does not click outside it. Any kappa in the returned bracket
/// reproduces that pair; the geometric midpoint maximizes margin.
pub fn calibrate_kappa(
    model: &ElectrothermalModel,
    trigger_energy_pj: f64,
) -> Result<KappaCalibration> {
    let p = &model.params;
    let op = model.steady_state(p.p_cal_mw)?;
    if !op.blinded {
        return Err(Error::Config(format!(
            "calibration power {} mW does not blind the detector",
            p.p_cal_mw
        )));
    }
    let g_gate = model.gain.at(op.v_internal_v + p.v_gate_v);
    let g_nogate = model.gain.at(op.v_internal_v);
    let q_gate = p.gate_charge_cal_pc;
    let q_in = q_gate + g_gate * trigger_energy_pj;
    let q_out = (g_nogate * trigger_energy_pj).max(q_gate);
    let kappa_min = p.v_th_mv / q_in;
    let kappa_max = p.v_th_mv / q_out;
    if kappa_min >= kappa_max {
        return Err(Error::Config(format!(
            "calibration pulse cannot separate in-gate from out-of-gate response \
             (kappa bracket [{kappa_min:.2}, {kappa_max:.2}] is empty)"
        )));
    }
    let kappa = (kappa_min * kappa_max).sqrt();
    Ok(KappaCalibration {
        kappa_min_mv_per_pc: kappa_min,
        kappa_max_mv_per_pc: kappa_max,
        kappa_mv_per_pc: kappa,
        in_gate_peak_mv: kappa * q_in,
        out_of_gate_peak_mv: kappa * g_nogate * trigger_energy_pj,
        gate_alone_peak_mv: kappa * q_gate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn heat_dissipation_matches_measured_points() {
        let h0 = heat_dissipation(54.14, 1.12, 0.564);
        assert!((h0 - 61.2).abs() / 61.2 < 0.005, "h0 = {h0}");
        let h1 = heat_dissipation(53.484, 1.224, 0.564);
        assert!((h1 - 66.03).abs() / 66.03 < 0.005, "h1 = {h1}");
        assert_eq!(heat_dissipation(40.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn vbr_shift_matches_measured_points() {
        let p = CircuitParams::clavis2_d0();
        let s0 = vbr_shift(61.2, &p);
        assert!((s0 - 1.16).abs() / 1.16 < 0.01, "s0 = {s0}");
        let s1 = vbr_shift(66.03, &p);
        assert!((s1 - 1.25).abs() / 1.25 < 0.01, "s1 = {s1}");
        assert_eq!(vbr_shift(0.0, &p), 0.0);
    }

    #[test]
    fn gain_from_charge_matches_measured_points() {
        let g_after = gain_from_charge(1.467 - 1.053, 0.32).unwrap();
        assert!((g_after - 1.3).abs() / 1.3 < 0.01, "g = {g_after}");
        let g_in = gain_from_charge(1.613 - 1.053, 0.32).unwrap();
        assert!((g_in - 1.76).abs() / 1.76 < 0.01, "g = {g_in}");
        assert_eq!(gain_from_charge(0.0, 0.5).unwrap(), 0.0);
        assert!(gain_from_charge(0.4, 0.0).is_err());
    }

    #[test]
    fn testpoint_formula_is_exact() {
        let mut p = CircuitParams::clavis2_d0();
        p.r_sense_ohm = 50.0;
        p.r_load_ohm = 1000.0;
        let v = vapd_from_testpoint(-54.0, &p);
        assert!((v - (-53.937)).abs() < 1e-12, "v = {v}");
        // Zero-current case: test point sits at the supply.
        assert_eq!(vapd_from_testpoint(p.v_bias_v, &p), p.v_bias_v);
        // Zero sense resistance collapses the correction.
        p.r_sense_ohm = 0.0;
        assert_eq!(vapd_from_testpoint(-54.0, &p), -54.0);
    }

    #[test]
    fn gain_curve_basics() {
        let g = GainCurve::clavis2_d0();
        assert_eq!(g.at(20.0), 0.0);
        assert_eq!(g.at(30.9), 0.0);
        assert!((g.at(53.77) - 3.0).abs() < 1e-12);
        assert!((g.at(56.77) - 13.0).abs() < 1e-12);
        // Clamped past the last sample.
        assert_eq!(g.at(60.0), 100.0);
        // Log-linear in between.
        let mid = g.at(55.27);
        assert!(mid > 3.0 && mid < 13.0);
    }

    #[test]
    fn gain_near_breakdown_is_plausible() {
        for m in ElectrothermalModel::clavis2_pair() {
            let g = m.gain.at(m.params.v_br_ref_v - 2.0);
            assert!((7.0..=10.0).contains(&g), "G(v_br - 2) = {g}");
        }
    }

    #[test]
    fn gain_csv_roundtrip() {
        let g = GainCurve::clavis2_d0();
        let text = g.to_csv_string();
        let back = GainCurve::from_csv_str(&text, "gain.csv").unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn gain_csv_missing_column() {
        let err = GainCurve::from_csv_str("v_apd_V\n31,\n", "g.csv").unwrap_err();
        match err {
            Error::CsvSchema { column, .. } => assert_eq!(column, "gain_A_per_W"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn steady_state_zero_power() {
        let m = ElectrothermalModel::clavis2_d0();
        let op = m.steady_state(0.0).unwrap();
        assert_eq!(op.i_apd_ma, 0.0);
        assert_eq!(op.v_apd_v, m.params.v_bias_abs());
        assert!(!op.blinded);
    }

    #[test]
    fn steady_state_satisfies_its_equations() {
        let m = ElectrothermalModel::clavis2_d0();
        for p in [0.1, 0.38, 0.56, 1.1] {
            let op = m.steady_state(p).unwrap();
            let recomputed = m.gain.at(op.v_internal_v) * p;
            let v_residual = (recomputed - op.i_apd_ma).abs() * m.params.r_series_kohm();
            assert!(v_residual < 2.0 * V_TOLERANCE, "residual {v_residual} V at {p} mW");
            assert!(
                (op.v_apd_v - (m.params.v_bias_abs() - op.i_apd_ma * m.params.r_series_kohm())).abs()
                    < 1e-12
            );
            assert!((op.heat_mw - (op.v_apd_v * op.i_apd_ma + p)).abs() < 1e-9);
        }
    }

    /// Independent route: dense bisection on the same response equation.
    fn bisect_current(m: &ElectrothermalModel, p_mw: f64) -> f64 {
        let (mut lo, mut hi) = (0.0f64, m.params.v_bias_abs() / m.params.r_series_kohm());
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if m.current_response_ma(mid, p_mw) - mid > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn steady_state_agrees_with_bisection_oracle() {
        for m in ElectrothermalModel::clavis2_pair() {
            for k in 1..=22 {
                let p = 0.05 * k as f64;
                let op = m.steady_state(p).unwrap();
                let i_ref = bisect_current(&m, p);
                assert!(
                    (op.i_apd_ma - i_ref).abs() * m.params.r_series_kohm() < 2.0 * V_TOLERANCE,
                    "p = {p}: i = {} vs oracle {}",
                    op.i_apd_ma,
                    i_ref
                );
            }
        }
    }

    #[test]
    fn current_rises_and_voltage_falls_with_power() {
        let m = ElectrothermalModel::clavis2_d0();
        let mut prev = m.steady_state(0.0).unwrap();
        for k in 1..=22 {
            let op = m.steady_state(0.05 * k as f64).unwrap();
            assert!(op.i_apd_ma > prev.i_apd_ma);
            assert!(op.v_apd_v < prev.v_apd_v);
            prev = op;
        }
    }

    #[test]
    fn blinding_thresholds_match_measured_values() {
        let d0 = ElectrothermalModel::clavis2_d0();
        let p0 = d0.blinding_threshold_mw().unwrap() * 1000.0; // uW
        assert!(
            (p0 - 73.4).abs() / 73.4 < 0.20,
            "P_blind,0 = {p0:.1} uW (expected 73.4 +- 20%)"
        );
        let d1 = ElectrothermalModel::clavis2_d1();
        let p1 = d1.blinding_threshold_mw().unwrap() * 1000.0;
        assert!(
            (p1 - 64.3).abs() / 64.3 < 0.20,
            "P_blind,1 = {p1:.1} uW (expected 64.3 +- 20%)"
        );
    }

    #[test]
    fn deeper_bias_needs_more_power_to_blind() {
        let nominal = ElectrothermalModel::clavis2_d0();
        let mut deeper_params = CircuitParams::clavis2_d0();
        deeper_params.v_bias_v = -57.0;
        let deeper = ElectrothermalModel::new(deeper_params, GainCurve::clavis2_d0()).unwrap();
        assert!(
            deeper.blinding_threshold_mw().unwrap() > nominal.blinding_threshold_mw().unwrap()
        );
    }

    #[test]
    fn synthesized_curves_hold_invariants() {
        let [d0, d1] = ElectrothermalModel::clavis2_pair();
        let grid: Vec<f64> = (0..9).map(|k| 0.3 + 0.1 * k as f64).collect();
        let curves = synthesize_threshold_curves(&d0, &d1, &grid, 0.1).unwrap();
        // Construction validates monotonicity and the nogate > always gap;
        // spot-check the interpolated values too.
        let set = curves.at(0.56).unwrap();
        for d in DetectorId::BOTH {
            let t = set.detector(d);
            assert!(t.e_nogate_never_fj > t.e_gate_always_fj);
            assert!(t.e_gate_always_fj > t.e_gate_never_fj);
        }
    }

    #[test]
    fn synthesized_curves_bracket_calibration_pulse() {
        // 0.32 pJ in the gate clicks, the same pulse without the gate does
        // not, at the 0.56 mW operating point.
        let [d0, _] = ElectrothermalModel::clavis2_pair();
        let t = d0.thresholds_at(0.56, 0.1).unwrap();
        assert!(
            t.e_gate_always_fj <= 320.0,
            "e_gate_always = {} fJ",
            t.e_gate_always_fj
        );
        assert!(
            t.e_nogate_never_fj >= 320.0,
            "e_nogate_never = {} fJ",
            t.e_nogate_never_fj
        );
    }

    #[test]
    fn synthesis_rejects_unblinded_grid_power() {
        let [d0, d1] = ElectrothermalModel::clavis2_pair();
        let err = synthesize_threshold_curves(&d0, &d1, &[0.01, 0.5], 0.1);
        assert!(err.is_err());
    }

    #[test]
    fn kappa_calibration_brackets_default() {
        for m in ElectrothermalModel::clavis2_pair() {
            let cal = calibrate_kappa(&m, 0.32).unwrap();
            let kappa = m.params.kappa_mv_per_pc;
            assert!(
                cal.kappa_min_mv_per_pc < kappa && kappa < cal.kappa_max_mv_per_pc,
                "default kappa {kappa} outside bracket [{}, {}]",
                cal.kappa_min_mv_per_pc,
                cal.kappa_max_mv_per_pc
            );
            assert!(cal.in_gate_peak_mv > m.params.v_th_mv);
            assert!(cal.out_of_gate_peak_mv < m.params.v_th_mv);
            assert!(cal.gate_alone_peak_mv < m.params.v_th_mv);
        }
    }

    proptest! {
        /// The test-point formula round-trips with its inverse to machine
        /// precision.
        #[test]
        fn testpoint_roundtrip(v_t2 in -60.0f64..-40.0) {
            let p = CircuitParams::clavis2_d0();
            let v_apd = vapd_from_testpoint(v_t2, &p);
            let back = testpoint_from_vapd(v_apd, &p);
            prop_assert!((back - v_t2).abs() < 1e-12);
        }

        /// gain_from_charge is linear in charge and inverse-linear in energy.
        #[test]
        fn gain_from_charge_scaling(q in 0.01f64..10.0, e in 0.01f64..10.0, s in 0.1f64..10.0) {
            let base = gain_from_charge(q, e).unwrap();
            let scaled_q = gain_from_charge(q * s, e).unwrap();
            prop_assert!((scaled_q - base * s).abs() < 1e-9 * base.max(1.0) * s.max(1.0));
            let scaled_e = gain_from_charge(q, e * s).unwrap();
            prop_assert!((scaled_e - base / s).abs() < 1e-9 * base.max(1.0));
        }
    }
}
