//! Per-slot click model for the two gated APDs.
//!
//! Covers both operating regimes: Geiger mode (honest single-photon
//! operation) and blinded linear mode, where a detector responds to the
//! energy of a classical trigger pulse against three thresholds: the
//! energy below which it never clicks with the gate applied, the energy
//! above which it always clicks with the gate applied, and the energy below
//! which it never clicks when the gate is absent. Between the never/always
//! thresholds the click probability ramps linearly; the measured curves are
//! S-shaped but no functional form is published, so the ramp width is a
//! configurable modeling choice and everything downstream relies only on
//! the deterministic regions.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Gates removed after a click to curb afterpulsing, shared by both
/// detectors.
pub const DEADTIME_GATES: u32 = 50;

/// Default relative width of the click-probability transition bands.
pub const DEFAULT_TRANSITION_WIDTH: f64 = 0.1;

/// One of Bob's two detectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DetectorId {
    D0 = 0,
    D1 = 1,
}

impl DetectorId {
    pub const BOTH: [DetectorId; 2] = [DetectorId::D0, DetectorId::D1];

    pub fn index(self) -> usize {
        self as usize
    }

    /// The other detector.
    pub fn other(self) -> DetectorId {
        match self {
            DetectorId::D0 => DetectorId::D1,
            DetectorId::D1 => DetectorId::D0,
        }
    }

    pub fn from_index(ix: usize) -> Result<Self> {
        match ix {
            0 => Ok(DetectorId::D0),
            1 => Ok(DetectorId::D1),
            _ => Err(Error::Parameter(format!(
                "detector index must be 0 or 1, got {ix}"
            ))),
        }
    }

    /// Detector that registers the given bit value.
    pub fn for_bit(bit: bool) -> DetectorId {
        if bit {
            DetectorId::D1
        } else {
            DetectorId::D0
        }
    }

    pub fn bit(self) -> bool {
        self == DetectorId::D1
    }
}

impl fmt::Display for DetectorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "D{}", self.index())
    }
}

/// Trigger-energy thresholds of one detector, in femtojoules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorThresholds {
    #[serde(rename = "e_gate_never_fJ")]
    pub e_gate_never_fj: f64,
    #[serde(rename = "e_gate_always_fJ")]
    pub e_gate_always_fj: f64,
    #[serde(rename = "e_nogate_never_fJ")]
    pub e_nogate_never_fj: f64,
}

impl DetectorThresholds {
    fn validate(&self, detector: DetectorId) -> Result<()> {
        let all = [
            self.e_gate_never_fj,
            self.e_gate_always_fj,
            self.e_nogate_never_fj,
        ];
        if all.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::Parameter(format!(
                "{detector}: threshold energies must be strictly positive"
            )));
        }
        if self.e_gate_never_fj > self.e_gate_always_fj {
            return Err(Error::Parameter(format!(
                "{detector}: e_gate_never ({}) exceeds e_gate_always ({})",
                self.e_gate_never_fj, self.e_gate_always_fj
            )));
        }
        Ok(())
    }
}

/// The six trigger-energy thresholds (three per detector) at one operating
/// point, plus the relative width of the click-probability ramp above the
/// no-gate threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSet {
    pub d0: DetectorThresholds,
    pub d1: DetectorThresholds,
    /// Relative width of the band above `e_nogate_never` over which the
    /// no-gate click probability ramps from 0 to 1.
    pub transition_width: f64,
}

impl ThresholdSet {
    pub fn new(d0: DetectorThresholds, d1: DetectorThresholds, transition_width: f64) -> Result<Self> {
        let set = Self {
            d0,
            d1,
            transition_width,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        self.d0.validate(DetectorId::D0)?;
        self.d1.validate(DetectorId::D1)?;
        if !(self.transition_width >= 0.0) {
            return Err(Error::Parameter(format!(
                "transition_width must be non-negative, got {}",
                self.transition_width
            )));
        }
        Ok(())
    }

    pub fn detector(&self, id: DetectorId) -> &DetectorThresholds {
        match id {
            DetectorId::D0 => &self.d0,
            DetectorId::D1 => &self.d1,
        }
    }
}

/// Trigger pulse sent by Eve: energy, timing relative to the gate centre,
/// and optical width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerPulse {
    #[serde(rename = "energy_fJ")]
    pub energy_fj: f64,
    pub timing_offset_ns: f64,
    pub width_ns: f64,
}

impl TriggerPulse {
    pub const DEFAULT_WIDTH_NS: f64 = 0.7;

    pub fn new(energy_fj: f64, timing_offset_ns: f64) -> Result<Self> {
        if !(energy_fj >= 0.0) {
            return Err(Error::Parameter(format!(
                "trigger energy must be non-negative, got {energy_fj}"
            )));
        }
        Ok(Self {
            energy_fj,
            timing_offset_ns,
            width_ns: Self::DEFAULT_WIDTH_NS,
        })
    }
}

/// Acceptance window of an in-gate trigger pulse: full response on a
/// plateau around the gate centre, falling linearly to zero at the support
/// edge. The plateau half-width defaults to the measured ±1.3 ns tolerance
/// and the support to the gate half-duration; the window narrows at lower
/// bias, which is what makes the timing variant of the two-level attack
/// possible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingWindow {
    pub plateau_ns: f64,
    pub support_ns: f64,
}

impl TimingWindow {
    /// Window at the full calibrated bias level.
    pub const FULL_BIAS: TimingWindow = TimingWindow {
        plateau_ns: 1.3,
        support_ns: 1.4,
    };

    /// Narrower window observed at the reduced bias level.
    pub const REDUCED_BIAS: TimingWindow = TimingWindow {
        plateau_ns: 0.6,
        support_ns: 1.1,
    };

    pub fn new(plateau_ns: f64, support_ns: f64) -> Result<Self> {
        if !(plateau_ns >= 0.0) || !(support_ns >= plateau_ns) {
            return Err(Error::Parameter(format!(
                "timing window requires 0 <= plateau <= support, got ({plateau_ns}, {support_ns})"
            )));
        }
        Ok(Self {
            plateau_ns,
            support_ns,
        })
    }

    /// Fraction of the pulse energy that acts on the in-gate click
    /// thresholds at the given offset from the gate centre.
    pub fn factor(&self, timing_offset_ns: f64) -> f64 {
        let t = timing_offset_ns.abs();
        if t <= self.plateau_ns {
            1.0
        } else if t >= self.support_ns {
            0.0
        } else {
            (self.support_ns - t) / (self.support_ns - self.plateau_ns)
        }
    }
}

impl Default for TimingWindow {
    fn default() -> Self {
        Self::FULL_BIAS
    }
}

/// Energy that acts on the click thresholds once trigger timing is taken
/// into account. With the gate applied the in-gate window scales the pulse
/// energy; without the gate the factor is 1 because the no-gate thresholds
/// already encode gate absence.
pub fn effective_trigger_energy(
    pulse: &TriggerPulse,
    gate_applied: bool,
    window: &TimingWindow,
) -> f64 {
    if gate_applied {
        pulse.energy_fj * window.factor(pulse.timing_offset_ns)
    } else {
        pulse.energy_fj
    }
}

/// Geiger-mode click decision: a present photon fires with probability
/// `efficiency`; dark counts are handled by the caller (disabled by
/// default).
pub fn click_geiger(efficiency: f64, photon_present: bool, rng: &mut SplitMix64) -> Result<bool> {
    if !(0.0..=1.0).contains(&efficiency) {
        return Err(Error::Parameter(format!(
            "efficiency must be in [0, 1], got {efficiency}"
        )));
    }
    Ok(photon_present && rng.bernoulli(efficiency))
}

/// Click probability of a blinded detector for a given arriving energy.
///
/// Deterministic outside the transition bands: zero at or below the
/// never threshold, one at or above the always threshold (gate applied).
pub fn blinded_click_probability(
    thresholds: &ThresholdSet,
    detector: DetectorId,
    arriving_energy_fj: f64,
    gate_applied: bool,
) -> f64 {
    let t = thresholds.detector(detector);
    if arriving_energy_fj <= 0.0 {
        return 0.0;
    }
    if gate_applied {
        if arriving_energy_fj <= t.e_gate_never_fj {
            0.0
        } else if arriving_energy_fj >= t.e_gate_always_fj {
            1.0
        } else {
            (arriving_energy_fj - t.e_gate_never_fj)
                / (t.e_gate_always_fj - t.e_gate_never_fj)
        }
    } else {
        let never = t.e_nogate_never_fj;
        if arriving_energy_fj <= never {
            0.0
        } else if thresholds.transition_width <= 0.0 {
            1.0
        } else {
            ((arriving_energy_fj - never) / (never * thresholds.transition_width)).min(1.0)
        }
    }
}

/// Click decision of a blinded detector.
pub fn click_blinded(
    thresholds: &ThresholdSet,
    detector: DetectorId,
    arriving_energy_fj: f64,
    gate_applied: bool,
    rng: &mut SplitMix64,
) -> bool {
    let p = blinded_click_probability(thresholds, detector, arriving_energy_fj, gate_applied);
    rng.bernoulli(p)
}

/// Detector operating regime for a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetectorMode {
    Geiger,
    Blinded,
}

/// Per-slot detector state. The deadtime counter is shared: a click on
/// either detector removes the next `DEADTIME_GATES` gates from both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorSlotState {
    pub mode: DetectorMode,
    pub deadtime_remaining: u32,
    pub efficiency_level: usize,
}

impl DetectorSlotState {
    pub fn new(mode: DetectorMode) -> Self {
        Self {
            mode,
            deadtime_remaining: 0,
            efficiency_level: 0,
        }
    }

    pub fn in_deadtime(&self) -> bool {
        self.deadtime_remaining > 0
    }
}

/// Advances the deadtime counter: a click (on either detector) arms the
/// full deadtime, otherwise the counter decays toward zero.
pub fn apply_deadtime(
    mut state: DetectorSlotState,
    click_happened_either_detector: bool,
) -> DetectorSlotState {
    if click_happened_either_detector {
        state.deadtime_remaining = DEADTIME_GATES;
    } else {
        state.deadtime_remaining = state.deadtime_remaining.saturating_sub(1);
    }
    state
}

/// Blinded-mode response of both detectors at one efficiency level:
/// thresholds plus the per-detector timing windows (lower bias narrows the
/// window).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelResponse {
    pub thresholds: ThresholdSet,
    #[serde(default)]
    pub window_d0: TimingWindow,
    #[serde(default)]
    pub window_d1: TimingWindow,
}

impl LevelResponse {
    pub fn window(&self, detector: DetectorId) -> &TimingWindow {
        match detector {
            DetectorId::D0 => &self.window_d0,
            DetectorId::D1 => &self.window_d1,
        }
    }
}

/// Per-level blinded response table, ascending with the policy's efficiency
/// levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlindedResponse {
    pub levels: Vec<LevelResponse>,
}

impl BlindedResponse {
    pub fn single(thresholds: ThresholdSet) -> Self {
        Self {
            levels: vec![LevelResponse {
                thresholds,
                window_d0: TimingWindow::FULL_BIAS,
                window_d1: TimingWindow::FULL_BIAS,
            }],
        }
    }

    pub fn validate(&self, n_levels: usize) -> Result<()> {
        if self.levels.len() != n_levels {
            return Err(Error::Config(format!(
                "blinded response has {} level(s) but the policy has {n_levels}",
                self.levels.len()
            )));
        }
        for level in &self.levels {
            level.thresholds.validate()?;
        }
        Ok(())
    }

    /// Smallest no-gate-never energy of a detector across levels: the
    /// alarm-safety bound for any energy aimed at it.
    pub fn min_nogate_never(&self, detector: DetectorId) -> f64 {
        self.levels
            .iter()
            .map(|l| l.thresholds.detector(detector).e_nogate_never_fj)
            .fold(f64::INFINITY, f64::min)
    }

    /// Smallest gate-never energy across detectors and levels: half-energy
    /// splashes below this never click anywhere.
    pub fn min_gate_never(&self) -> f64 {
        self.levels
            .iter()
            .flat_map(|l| {
                DetectorId::BOTH
                    .iter()
                    .map(move |&d| l.thresholds.detector(d).e_gate_never_fj)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// One measured row of a threshold table: both detectors' thresholds at a
/// single c.w. blinding power.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdRow {
    pub detector: DetectorId,
    pub blinding_power_mw: f64,
    pub thresholds: DetectorThresholds,
}

/// Raw threshold-vs-power table as loaded from CSV. Carries no curve
/// invariants so that feasibility checks can be run on arbitrary (even
/// degenerate) measured data; validate into [`ThresholdCurves`] before
/// using it to drive a simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    pub rows: Vec<ThresholdRow>,
}

pub const THRESHOLD_CSV_COLUMNS: [&str; 5] = [
    "detector",
    "blinding_power_mW",
    "e_gate_never_fJ",
    "e_gate_always_fJ",
    "e_nogate_never_fJ",
];

impl ThresholdTable {
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
        let mut indices = [0usize; 5];
        for (k, name) in THRESHOLD_CSV_COLUMNS.iter().enumerate() {
            indices[k] = columns
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::CsvSchema {
                    path: path.to_string(),
                    column: name.to_string(),
                })?;
        }
        let mut rows = Vec::new();
        for (line_ix, line) in lines {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            let cell = |k: usize| -> Result<&str> {
                cells.get(indices[k]).copied().ok_or_else(|| Error::CsvParse {
                    path: path.to_string(),
                    line: line_ix + 1,
                    message: format!("missing value for `{}`", THRESHOLD_CSV_COLUMNS[k]),
                })
            };
            let num = |k: usize| -> Result<f64> {
                let s = cell(k)?;
                s.parse::<f64>().map_err(|_| Error::CsvParse {
                    path: path.to_string(),
                    line: line_ix + 1,
                    message: format!("`{}` is not a number in column `{}`", s, THRESHOLD_CSV_COLUMNS[k]),
                })
            };
            let det_cell = cell(0)?;
            let detector = match det_cell {
                "0" | "D0" | "d0" => DetectorId::D0,
                "1" | "D1" | "d1" => DetectorId::D1,
                other => {
                    return Err(Error::CsvParse {
                        path: path.to_string(),
                        line: line_ix + 1,
                        message: format!("detector must be 0/1, got `{other}`"),
                    })
                }
            };
            rows.push(ThresholdRow {
                detector,
                blinding_power_mw: num(1)?,
                thresholds: DetectorThresholds {
                    e_gate_never_fj: num(2)?,
                    e_gate_always_fj: num(3)?,
                    e_nogate_never_fj: num(4)?,
                },
            });
        }
        if rows.is_empty() {
            return Err(Error::CsvParse {
                path: path.to_string(),
                line: 1,
                message: "no data rows".to_string(),
            });
        }
        Ok(Self { rows })
    }

    pub fn from_csv_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv_str(&text, &path.display().to_string())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&THRESHOLD_CSV_COLUMNS.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.detector.index(),
                row.blinding_power_mw,
                row.thresholds.e_gate_never_fj,
                row.thresholds.e_gate_always_fj,
                row.thresholds.e_nogate_never_fj,
            ));
        }
        out
    }

    fn powers_for(&self, detector: DetectorId) -> Vec<f64> {
        let mut p: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.detector == detector)
            .map(|r| r.blinding_power_mw)
            .collect();
        p.sort_by(|a, b| a.total_cmp(b));
        p
    }

    /// Interpolates both detectors' thresholds at the given power without
    /// enforcing curve invariants. Errors outside the measured domain
    /// rather than extrapolating.
    pub fn interpolate(&self, blinding_power_mw: f64, transition_width: f64) -> Result<ThresholdSet> {
        let interp_one = |detector: DetectorId| -> Result<DetectorThresholds> {
            let mut pts: Vec<&ThresholdRow> =
                self.rows.iter().filter(|r| r.detector == detector).collect();
            if pts.is_empty() {
                return Err(Error::Config(format!("no rows for detector {detector}")));
            }
            pts.sort_by(|a, b| a.blinding_power_mw.total_cmp(&b.blinding_power_mw));
            let (p_min, p_max) = (
                pts.first().unwrap().blinding_power_mw,
                pts.last().unwrap().blinding_power_mw,
            );
            if blinding_power_mw < p_min || blinding_power_mw > p_max {
                return Err(Error::Domain(format!(
                    "blinding power {blinding_power_mw} mW outside calibrated range [{p_min}, {p_max}] mW for {detector}"
                )));
            }
            let hi_ix = pts
                .iter()
                .position(|r| r.blinding_power_mw >= blinding_power_mw)
                .unwrap();
            if pts[hi_ix].blinding_power_mw == blinding_power_mw || hi_ix == 0 {
                return Ok(pts[hi_ix].thresholds);
            }
            let (a, b) = (pts[hi_ix - 1], pts[hi_ix]);
            let f = (blinding_power_mw - a.blinding_power_mw)
                / (b.blinding_power_mw - a.blinding_power_mw);
            let lerp = |x: f64, y: f64| x + f * (y - x);
            Ok(DetectorThresholds {
                e_gate_never_fj: lerp(a.thresholds.e_gate_never_fj, b.thresholds.e_gate_never_fj),
                e_gate_always_fj: lerp(a.thresholds.e_gate_always_fj, b.thresholds.e_gate_always_fj),
                e_nogate_never_fj: lerp(
                    a.thresholds.e_nogate_never_fj,
                    b.thresholds.e_nogate_never_fj,
                ),
            })
        };
        ThresholdSet::new(interp_one(DetectorId::D0)?, interp_one(DetectorId::D1)?, transition_width)
    }

    /// Validates curve invariants and wraps the table for simulation use.
    pub fn validate(self, transition_width: f64) -> Result<ThresholdCurves> {
        ThresholdCurves::new(self, transition_width)
    }
}

/// Validated monotone threshold-vs-power curves for both detectors.
///
/// Invariants, checked at construction: every threshold is non-decreasing
/// in blinding power, and `e_nogate_never` stays strictly above
/// `e_gate_always` at every measured point (hence everywhere under linear
/// interpolation of a shared power grid per detector).
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdCurves {
    table: ThresholdTable,
    transition_width: f64,
}

impl ThresholdCurves {
    pub fn new(table: ThresholdTable, transition_width: f64) -> Result<Self> {
        for detector in DetectorId::BOTH {
            let mut pts: Vec<&ThresholdRow> =
                table.rows.iter().filter(|r| r.detector == detector).collect();
            if pts.len() < 2 {
                return Err(Error::Config(format!(
                    "{detector}: at least two power points required, got {}",
                    pts.len()
                )));
            }
            pts.sort_by(|a, b| a.blinding_power_mw.total_cmp(&b.blinding_power_mw));
            for pair in pts.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                if a.blinding_power_mw == b.blinding_power_mw {
                    return Err(Error::Config(format!(
                        "{detector}: duplicate power point {} mW",
                        a.blinding_power_mw
                    )));
                }
                let decreasing = b.thresholds.e_gate_never_fj < a.thresholds.e_gate_never_fj
                    || b.thresholds.e_gate_always_fj < a.thresholds.e_gate_always_fj
                    || b.thresholds.e_nogate_never_fj < a.thresholds.e_nogate_never_fj;
                if decreasing {
                    return Err(Error::Config(format!(
                        "{detector}: thresholds must be non-decreasing in blinding power (violated between {} and {} mW)",
                        a.blinding_power_mw, b.blinding_power_mw
                    )));
                }
            }
            for r in &pts {
                r.thresholds.validate(detector)?;
                if r.thresholds.e_nogate_never_fj <= r.thresholds.e_gate_always_fj {
                    return Err(Error::Config(format!(
                        "{detector} at {} mW: e_nogate_never ({}) must exceed e_gate_always ({})",
                        r.blinding_power_mw,
                        r.thresholds.e_nogate_never_fj,
                        r.thresholds.e_gate_always_fj
                    )));
                }
            }
        }
        if !(transition_width >= 0.0) {
            return Err(Error::Parameter(format!(
                "transition_width must be non-negative, got {transition_width}"
            )));
        }
        Ok(Self {
            table,
            transition_width,
        })
    }

    pub fn from_csv_file(path: &Path, transition_width: f64) -> Result<Self> {
        ThresholdTable::from_csv_file(path)?.validate(transition_width)
    }

    pub fn table(&self) -> &ThresholdTable {
        &self.table
    }

    pub fn transition_width(&self) -> f64 {
        self.transition_width
    }

    /// Calibrated power domain (intersection of both detectors' grids).
    pub fn power_domain(&self) -> (f64, f64) {
        let p0 = self.table.powers_for(DetectorId::D0);
        let p1 = self.table.powers_for(DetectorId::D1);
        (
            p0.first().unwrap().max(*p1.first().unwrap()),
            p0.last().unwrap().min(*p1.last().unwrap()),
        )
    }

    /// ThresholdSet at the given blinding power.
    pub fn at(&self, blinding_power_mw: f64) -> Result<ThresholdSet> {
        self.table.interpolate(blinding_power_mw, self.transition_width)
    }
}
