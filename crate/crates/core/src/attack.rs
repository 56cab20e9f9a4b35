//! Eve-side strategy construction and feasibility analysis.
//!
//! The threshold inequalities decide everything. With the gate suppressed
//! a click raises the alarm, so Eve's trigger must stay below the no-gate
//! threshold; with the gate applied and bases matched it must always click;
//! with bases mismatched each detector sees half the energy and must stay
//! silent. The strong conditions make the perfect attack possible, the
//! necessary condition is the bare minimum for any attack, and the decoy
//! mixture solver finds the per-energy send probabilities that reproduce an
//! arbitrary schedule of decoy efficiencies.

use serde::{Deserialize, Serialize};

use crate::detector::{BlindedResponse, DetectorId, ThresholdSet, TimingWindow};
use crate::error::{Error, Result};

/// Trigger placement relative to the detector gate. Threshold sets are
/// calibrated at the attack's trigger timing, so the in-gate timing window
/// only applies in `InGate` mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerMode {
    InGate,
    AfterGate,
}

/// One component of Eve's trigger mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerChoice {
    #[serde(rename = "energy_fJ")]
    pub energy_fj: f64,
    #[serde(default)]
    pub timing_offset_ns: f64,
    pub probability: f64,
}

/// Maximum in-gate trigger offset: the gate half-duration.
pub const GATE_HALF_NS: f64 = 1.4;

/// Eve's full strategy: blinding power, trigger placement, and one trigger
/// mixture per target detector (she aims at the detector matching her
/// measured bit). Residual probability means "send nothing", which lets her
/// emulate efficiencies below her control ceiling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackPlan {
    #[serde(rename = "blinding_power_mW")]
    pub blinding_power_mw: f64,
    pub mode: TriggerMode,
    pub mixture_d0: Vec<TriggerChoice>,
    pub mixture_d1: Vec<TriggerChoice>,
    /// Scale on Eve's per-detection send probability (rate compensation;
    /// 1.0 resends on every detection).
    #[serde(default = "default_resend_scale")]
    pub resend_scale: f64,
}

fn default_resend_scale() -> f64 {
    1.0
}

impl AttackPlan {
    /// Single fixed-energy trigger sent mid-gate at both targets with the
    /// given per-slot probability.
    pub fn in_gate_single(blinding_power_mw: f64, energy_fj: f64, probability: f64) -> Self {
        let choice = TriggerChoice {
            energy_fj,
            timing_offset_ns: 0.0,
            probability,
        };
        Self {
            blinding_power_mw,
            mode: TriggerMode::InGate,
            mixture_d0: vec![choice],
            mixture_d1: vec![choice],
            resend_scale: 1.0,
        }
    }

    /// The original attack: trigger placed after the gate, thresholds
    /// calibrated at that timing.
    pub fn after_gate_single(blinding_power_mw: f64, energy_fj: f64, probability: f64) -> Self {
        let choice = TriggerChoice {
            energy_fj,
            timing_offset_ns: 3.0,
            probability,
        };
        Self {
            blinding_power_mw,
            mode: TriggerMode::AfterGate,
            mixture_d0: vec![choice],
            mixture_d1: vec![choice],
            resend_scale: 1.0,
        }
    }

    pub fn mixture(&self, target: DetectorId) -> &[TriggerChoice] {
        match target {
            DetectorId::D0 => &self.mixture_d0,
            DetectorId::D1 => &self.mixture_d1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blinding_power_mw > 0.0) {
            return Err(Error::Config(format!(
                "attack needs positive blinding power, got {}",
                self.blinding_power_mw
            )));
        }
        if !(self.resend_scale >= 0.0 && self.resend_scale <= 1.0) {
            return Err(Error::Config(format!(
                "resend_scale must be in [0, 1], got {}",
                self.resend_scale
            )));
        }
        for (target, mixture) in [(DetectorId::D0, &self.mixture_d0), (DetectorId::D1, &self.mixture_d1)]
        {
            let mut total = 0.0;
            for c in mixture {
                if !(c.energy_fj >= 0.0) {
                    return Err(Error::Config(format!(
                        "{target}: trigger energies must be non-negative"
                    )));
                }
                if !(c.probability >= 0.0) {
                    return Err(Error::Config(format!(
                        "{target}: mixture probabilities must be non-negative"
                    )));
                }
                if self.mode == TriggerMode::InGate && c.timing_offset_ns.abs() > GATE_HALF_NS {
                    return Err(Error::Config(format!(
                        "{target}: in-gate trigger offset {} ns outside the +-{GATE_HALF_NS} ns gate window",
                        c.timing_offset_ns
                    )));
                }
                total += c.probability;
            }
            if total > 1.0 + 1e-9 {
                return Err(Error::Config(format!(
                    "{target}: mixture probabilities sum to {total} > 1"
                )));
            }
        }
        Ok(())
    }

    /// Largest energy any mixture component can deliver to a gate-absent
    /// detector, per target (used by the alarm-safety invariant).
    pub fn max_energy(&self, target: DetectorId) -> f64 {
        self.mixture(target)
            .iter()
            .map(|c| c.energy_fj)
            .fold(0.0, f64::max)
    }
}

/// One evaluated inequality with its slack (positive when satisfied with
/// margin).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    /// rhs - lhs for `lhs < rhs` inequalities.
    pub slack: f64,
    pub holds: bool,
}

fn strict_less(name: &str, lhs: f64, rhs: f64) -> InequalityCheck {
    InequalityCheck {
        name: name.to_string(),
        lhs,
        rhs,
        slack: rhs - lhs,
        holds: lhs < rhs,
    }
}

/// Strong-condition evaluation: the threshold ordering per detector plus
/// the half-energy basis-mismatch bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrongConditions {
    pub holds: bool,
    pub inequalities: Vec<InequalityCheck>,
    /// The redundant no-gate mismatch bound, implied by the others.
    pub consistency: Vec<InequalityCheck>,
}

impl StrongConditions {
    pub fn violated(&self) -> Vec<&InequalityCheck> {
        self.inequalities.iter().filter(|c| !c.holds).collect()
    }
}

/// Necessary-condition evaluation per detector: some in-gate click energy
/// exists below the no-gate alarm threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NecessaryCondition {
    pub holds_d0: bool,
    pub holds_d1: bool,
    /// (e_nogate_never - e_gate_never) / e_nogate_never per detector.
    pub margin_vs_gate_never: [f64; 2],
    /// (e_nogate_never - e_gate_always) / e_gate_always per detector;
    /// negative when full-control energies already risk the alarm.
    pub margin_vs_gate_always: [f64; 2],
}

impl NecessaryCondition {
    pub fn holds(&self, target: DetectorId) -> bool {
        match target {
            DetectorId::D0 => self.holds_d0,
            DetectorId::D1 => self.holds_d1,
        }
    }
}

/// Closed energy interval, femtojoules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyInterval {
    #[serde(rename = "lo_fJ")]
    pub lo_fj: f64,
    #[serde(rename = "hi_fJ")]
    pub hi_fj: f64,
}

impl EnergyInterval {
    pub fn contains(&self, energy_fj: f64) -> bool {
        self.lo_fj <= energy_fj && energy_fj <= self.hi_fj
    }

    /// Half-width relative to the centre: the setting precision the attack
    /// tolerates.
    pub fn relative_half_width(&self) -> f64 {
        (self.hi_fj - self.lo_fj) / (self.hi_fj + self.lo_fj)
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo_fj + self.hi_fj)
    }
}

/// Combined feasibility verdict on one threshold set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub strong: StrongConditions,
    pub necessary: NecessaryCondition,
    /// Perfect-attack energy range per target detector; `None` when empty.
    pub perfect_range_d0: Option<EnergyInterval>,
    pub perfect_range_d1: Option<EnergyInterval>,
}

impl FeasibilityReport {
    pub fn evaluate(thresholds: &ThresholdSet) -> Self {
        let strong = check_strong_conditions(thresholds);
        let necessary = check_necessary_condition(thresholds);
        let perfect_range_d0 = perfect_energy_range(thresholds, DetectorId::D0);
        let perfect_range_d1 = perfect_energy_range(thresholds, DetectorId::D1);
        Self {
            strong,
            necessary,
            perfect_range_d0,
            perfect_range_d1,
        }
    }

    pub fn perfect_range(&self, target: DetectorId) -> Option<EnergyInterval> {
        match target {
            DetectorId::D0 => self.perfect_range_d0,
            DetectorId::D1 => self.perfect_range_d1,
        }
    }
}

/// Evaluates the strong attack conditions: per detector the threshold
/// ordering `e_nogate_never > e_gate_always > e_gate_never`, plus the
/// basis-mismatch bound `max_i(e_gate_always) / 2 < min_i(e_gate_never)`.
/// The no-gate mismatch bound `e_gate_always,i / 2 < e_nogate_never,other`
/// follows from those and is reported as a consistency check only.
pub fn check_strong_conditions(thresholds: &ThresholdSet) -> StrongConditions {
    let mut inequalities = Vec::with_capacity(5);
    for d in DetectorId::BOTH {
        let t = thresholds.detector(d);
        inequalities.push(strict_less(
            &format!("ordering_{d}: e_gate_always < e_nogate_never"),
            t.e_gate_always_fj,
            t.e_nogate_never_fj,
        ));
        inequalities.push(strict_less(
            &format!("ordering_{d}: e_gate_never < e_gate_always"),
            t.e_gate_never_fj,
            t.e_gate_always_fj,
        ));
    }
    let max_always = thresholds
        .d0
        .e_gate_always_fj
        .max(thresholds.d1.e_gate_always_fj);
    let min_never = thresholds
        .d0
        .e_gate_never_fj
        .min(thresholds.d1.e_gate_never_fj);
    inequalities.push(strict_less(
        "mismatch: max(e_gate_always) / 2 < min(e_gate_never)",
        0.5 * max_always,
        min_never,
    ));
    let holds = inequalities.iter().all(|c| c.holds);

    let mut consistency = Vec::with_capacity(2);
    for d in DetectorId::BOTH {
        let check = strict_less(
            &format!("nogate_mismatch_{d}: e_gate_always / 2 < e_nogate_never,{}", d.other()),
            0.5 * thresholds.detector(d).e_gate_always_fj,
            thresholds.detector(d.other()).e_nogate_never_fj,
        );
        // Implied by the ordering and mismatch inequalities.
        debug_assert!(!holds || check.holds);
        consistency.push(check);
    }
    StrongConditions {
        holds,
        inequalities,
        consistency,
    }
}

/// Evaluates the necessary attack condition per detector: there must be
/// energies that sometimes click in the gate yet never click without it,
/// i.e. `e_nogate_never > e_gate_never`.
pub fn check_necessary_condition(thresholds: &ThresholdSet) -> NecessaryCondition {
    let margin = |d: DetectorId| {
        let t = thresholds.detector(d);
        (
            t.e_nogate_never_fj > t.e_gate_never_fj,
            (t.e_nogate_never_fj - t.e_gate_never_fj) / t.e_nogate_never_fj,
            (t.e_nogate_never_fj - t.e_gate_always_fj) / t.e_gate_always_fj,
        )
    };
    let (h0, m0n, m0a) = margin(DetectorId::D0);
    let (h1, m1n, m1a) = margin(DetectorId::D1);
    NecessaryCondition {
        holds_d0: h0,
        holds_d1: h1,
        margin_vs_gate_never: [m0n, m1n],
        margin_vs_gate_always: [m0a, m1a],
    }
}

/// Energy range of the perfect attack on `target`: from the target's
/// always-click threshold up to the lowest of the mismatch bound
/// (half-energy must stay below every gate-never threshold), the target's
/// own no-gate alarm threshold, and the other detector's no-gate threshold
/// at half energy. Empty (None) when the strong conditions fail or the
/// bounds cross.
pub fn perfect_energy_range(thresholds: &ThresholdSet, target: DetectorId) -> Option<EnergyInterval> {
    if !check_strong_conditions(thresholds).holds {
        return None;
    }
    let t = thresholds.detector(target);
    let other = thresholds.detector(target.other());
    let min_gate_never = thresholds
        .d0
        .e_gate_never_fj
        .min(thresholds.d1.e_gate_never_fj);
    let lo = t.e_gate_always_fj;
    let hi = (2.0 * min_gate_never)
        .min(t.e_nogate_never_fj)
        .min(2.0 * other.e_nogate_never_fj);
    if lo < hi {
        Some(EnergyInterval {
            lo_fj: lo,
            hi_fj: hi,
        })
    } else {
        None
    }
}

/// Click-probability matrix of Eve's energy levels against Bob's decoy
/// efficiency levels: `entries[k][i]` is the matched-basis click
/// probability when Eve applies her k-th energy (descending energies) and
/// Bob gates at his i-th efficiency (ascending). Rows are non-decreasing in
/// the level index: more bias never loses clicks at fixed energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaMatrix {
    pub entries: Vec<Vec<f64>>,
}

impl BetaMatrix {
    pub fn new(entries: Vec<Vec<f64>>) -> Result<Self> {
        let n = entries.len();
        if n == 0 {
            return Err(Error::Parameter("beta matrix must be non-empty".into()));
        }
        for (k, row) in entries.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Parameter(format!(
                    "beta matrix must be square: row {k} has {} entries, expected {n}",
                    row.len()
                )));
            }
            for (i, &b) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&b) {
                    return Err(Error::Parameter(format!(
                        "beta[{k}][{i}] = {b} outside [0, 1]"
                    )));
                }
            }
            for i in 1..n {
                if row[i] < row[i - 1] {
                    return Err(Error::Parameter(format!(
                        "beta row {k} must be non-decreasing in the efficiency level (drops at column {i})"
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    /// Idealized response: energy `E_k` clicks at every level from `k` up
    /// and never below.
    pub fn staircase(n: usize) -> Self {
        let entries = (0..n)
            .map(|k| (0..n).map(|i| if i >= k { 1.0 } else { 0.0 }).collect())
            .collect();
        Self { entries }
    }

    pub fn n(&self) -> usize {
        self.entries.len()
    }

    /// Expected click probability per level for send probabilities `q`.
    pub fn response(&self, q: &[f64]) -> Vec<f64> {
        let n = self.n();
        (0..n)
            .map(|i| (0..n).map(|k| q[k] * self.entries[k][i]).sum())
            .collect()
    }
}

/// Infeasible-mixture diagnostic: the exact solution, which constraints it
/// violates, and the residual after projecting it back into the probability
/// simplex (clamp to [0, 1], rescale if the total exceeds one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialControl {
    pub unconstrained_q: Vec<f64>,
    pub violations: Vec<String>,
    pub projected_q: Vec<f64>,
    pub residual_norm: f64,
}

/// Result of the decoy-mixture solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MixtureOutcome {
    /// Valid send probabilities reproducing every decoy efficiency.
    Exact(Vec<f64>),
    /// No probability vector reproduces the schedule; Eve retains partial
    /// control only.
    PartialControl(PartialControl),
}

const FEASIBILITY_EPS: f64 = 1e-9;

/// Solves `sum_k q_k * beta[k][i] = eta_i` for the send probabilities.
///
/// Returns `Exact(q)` when the solution is a valid sub-probability vector,
/// a `PartialControl` diagnostic when it is not, and an error when the
/// matrix is singular.
#[allow(clippy::needless_range_loop)] // row swaps want indexed access
pub fn solve_decoy_mixture(beta: &BetaMatrix, etas: &[f64]) -> Result<MixtureOutcome> {
    let n = beta.n();
    if etas.len() != n {
        return Err(Error::Parameter(format!(
            "expected {n} efficiencies for a {n}x{n} beta matrix, got {}",
            etas.len()
        )));
    }
    // Row i of the linear system is Bob's level i; unknown k is Eve's
    // energy level.
    let mut lu: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|k| beta.entries[k][i]).collect())
        .collect();

    // LU factorization with partial pivoting; ties keep the earliest row,
    // and each substitution accumulates its sum before the one subtraction,
    // so triangular systems (the staircase) telescope exactly.
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_abs = lu[col][col].abs();
        for r in (col + 1)..n {
            if lu[r][col].abs() > pivot_abs {
                pivot_row = r;
                pivot_abs = lu[r][col].abs();
            }
        }
        if pivot_abs < 1e-12 {
            return Err(Error::Singular(format!(
                "beta matrix is singular (rank deficiency detected at column {col} of {n})"
            )));
        }
        lu.swap(col, pivot_row);
        perm.swap(col, pivot_row);
        for r in (col + 1)..n {
            let m = lu[r][col] / lu[col][col];
            lu[r][col] = m;
            if m != 0.0 {
                for c in (col + 1)..n {
                    let v = lu[col][c];
                    lu[r][c] -= m * v;
                }
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|j| lu[i][j] * y[j]).sum();
        y[i] = etas[perm[i]] - s;
    }
    let mut q = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = ((i + 1)..n).map(|j| lu[i][j] * q[j]).sum();
        q[i] = (y[i] - s) / lu[i][i];
    }

    let mut violations = Vec::new();
    for (k, &qk) in q.iter().enumerate() {
        if qk < -FEASIBILITY_EPS {
            violations.push(format!("q[{k}] = {qk:.6} < 0"));
        }
        if qk > 1.0 + FEASIBILITY_EPS {
            violations.push(format!("q[{k}] = {qk:.6} > 1"));
        }
    }
    let total: f64 = q.iter().sum();
    if total > 1.0 + FEASIBILITY_EPS {
        violations.push(format!("sum(q) = {total:.6} > 1"));
    }
    if violations.is_empty() {
        return Ok(MixtureOutcome::Exact(q));
    }

    let mut projected: Vec<f64> = q.iter().map(|&x| x.clamp(0.0, 1.0)).collect();
    let p_total: f64 = projected.iter().sum();
    if p_total > 1.0 {
        for x in &mut projected {
            *x /= p_total;
        }
    }
    let achieved = beta.response(&projected);
    let residual_norm = achieved
        .iter()
        .zip(etas)
        .map(|(r, e)| (r - e) * (r - e))
        .sum::<f64>()
        .sqrt();
    Ok(MixtureOutcome::PartialControl(PartialControl {
        unconstrained_q: q,
        violations,
        projected_q: projected,
        residual_norm,
    }))
}

/// The `(always, partial)` separating values found by a two-level planner,
/// per target detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoLevelSplit {
    pub always: f64,
    pub partial: f64,
}

fn mixture_from_split(
    split: TwoLevelSplit,
    offsets: (f64, f64),
    eta_lo: f64,
    eta_hi: f64,
) -> Vec<TriggerChoice> {
    // Staircase solution: the always component carries the low level's
    // efficiency, the partial component tops up the high level.
    if eta_lo == eta_hi {
        return vec![TriggerChoice {
            energy_fj: split.always,
            timing_offset_ns: offsets.0,
            probability: eta_hi,
        }];
    }
    vec![
        TriggerChoice {
            energy_fj: split.always,
            timing_offset_ns: offsets.0,
            probability: eta_lo,
        },
        TriggerChoice {
            energy_fj: split.partial,
            timing_offset_ns: offsets.1,
            probability: eta_hi - eta_lo,
        },
    ]
}

fn validate_etas(eta_lo: [f64; 2], eta_hi: [f64; 2]) -> Result<()> {
    for d in 0..2 {
        if !(eta_lo[d] > 0.0 && eta_lo[d] <= eta_hi[d] && eta_hi[d] <= 1.0) {
            return Err(Error::Parameter(format!(
                "need 0 < eta_lo <= eta_hi <= 1 per detector, got ({}, {}) for detector {d}",
                eta_lo[d], eta_hi[d]
            )));
        }
    }
    Ok(())
}

type LevelPair<'a> =
    (&'a crate::detector::LevelResponse, &'a crate::detector::LevelResponse);

fn two_level_response(response: &BlindedResponse) -> Result<LevelPair<'_>> {
    if response.levels.len() != 2 {
        return Err(Error::Parameter(format!(
            "two-level planner needs exactly two response levels, got {}",
            response.levels.len()
        )));
    }
    Ok((&response.levels[0], &response.levels[1]))
}

/// Ceiling below which any sent energy is safe: no alarm in suppressed
/// slots and no click from the half-energy mismatch splash on either
/// detector at any level.
fn safe_energy_ceiling(response: &BlindedResponse, target: DetectorId) -> f64 {
    response
        .min_nogate_never(target)
        .min(2.0 * response.min_gate_never())
        .min(2.0 * response.min_nogate_never(target.other()))
}

/// Plans the energy variant of the two-level attack from the measured
/// per-level click-response curves.
///
/// For each target it picks an energy that always clicks at both bias
/// levels and one that clicks only at the high level, both inside the
/// alarm/mismatch safety ceiling, and mixes them so the per-level detection
/// probabilities come out at `(eta_hi, eta_lo)`. In the equal-split case of
/// the published protocol each component gets probability `eta_hi / 2`.
pub fn plan_two_level_energy_attack(
    response: &BlindedResponse,
    eta_lo: [f64; 2],
    eta_hi: [f64; 2],
    blinding_power_mw: f64,
) -> Result<AttackPlan> {
    validate_etas(eta_lo, eta_hi)?;
    let (lo, hi) = two_level_response(response)?;
    let mut mixtures: [Vec<TriggerChoice>; 2] = [Vec::new(), Vec::new()];
    for target in DetectorId::BOTH {
        let t_lo = lo.thresholds.detector(target);
        let t_hi = hi.thresholds.detector(target);
        let ceiling = safe_energy_ceiling(response, target);

        let always_floor = t_lo.e_gate_always_fj.max(t_hi.e_gate_always_fj);
        if always_floor >= ceiling {
            return Err(Error::Planning(format!(
                "{target}: no always-click energy below the safety ceiling \
                 ({always_floor:.1} fJ needed, {ceiling:.1} fJ allowed); partial control only"
            )));
        }
        // Partial component: clicks at the high level, never at the low one.
        let partial_lo = t_hi.e_gate_always_fj;
        let partial_hi = t_lo.e_gate_never_fj.min(ceiling);
        if partial_lo >= partial_hi {
            return Err(Error::Planning(format!(
                "{target}: level responses are not separated \
                 (always-at-high {partial_lo:.1} fJ >= never-at-low {partial_hi:.1} fJ); partial control only"
            )));
        }
        let split = TwoLevelSplit {
            always: 0.5 * (always_floor + ceiling),
            partial: 0.5 * (partial_lo + partial_hi),
        };
        mixtures[target.index()] = mixture_from_split(
            split,
            (0.0, 0.0),
            eta_lo[target.index()],
            eta_hi[target.index()],
        );
    }
    let [mixture_d0, mixture_d1] = mixtures;
    let plan = AttackPlan {
        blinding_power_mw,
        mode: TriggerMode::InGate,
        mixture_d0,
        mixture_d1,
        resend_scale: 1.0,
    };
    plan.validate()?;
    Ok(plan)
}

/// Largest offset at which the window still passes at least fraction `f`
/// of the energy.
fn offset_while_at_least(window: &TimingWindow, f: f64) -> Option<f64> {
    if f > 1.0 {
        None
    } else if f <= 0.0 {
        Some(window.support_ns)
    } else {
        Some(window.plateau_ns + (1.0 - f) * (window.support_ns - window.plateau_ns))
    }
}

/// Smallest offset at which the window passes at most fraction `f`.
fn offset_while_at_most(window: &TimingWindow, f: f64) -> f64 {
    if f >= 1.0 {
        0.0
    } else if f <= 0.0 {
        window.support_ns
    } else {
        window.plateau_ns + (1.0 - f) * (window.support_ns - window.plateau_ns)
    }
}

/// Plans the timing variant of the two-level attack at fixed per-detector
/// trigger energies.
///
/// The reduced-bias response extends over a narrower time window, so a
/// mid-gate trigger clicks at both levels while one shifted toward the gate
/// edge clicks only at the high level. Same mixture arithmetic as the
/// energy planner.
pub fn plan_two_level_timing_attack(
    response: &BlindedResponse,
    trigger_energy_fj: [f64; 2],
    eta_lo: [f64; 2],
    eta_hi: [f64; 2],
    blinding_power_mw: f64,
) -> Result<AttackPlan> {
    validate_etas(eta_lo, eta_hi)?;
    let (lo, hi) = two_level_response(response)?;
    let mut mixtures: [Vec<TriggerChoice>; 2] = [Vec::new(), Vec::new()];
    for target in DetectorId::BOTH {
        let energy = trigger_energy_fj[target.index()];
        let t_lo = lo.thresholds.detector(target);
        let t_hi = hi.thresholds.detector(target);
        let w_lo = lo.window(target);
        let w_hi = hi.window(target);
        let ceiling = safe_energy_ceiling(response, target);
        if energy >= ceiling {
            return Err(Error::Planning(format!(
                "{target}: trigger energy {energy:.1} fJ reaches the safety ceiling {ceiling:.1} fJ"
            )));
        }
        if energy < t_lo.e_gate_always_fj.max(t_hi.e_gate_always_fj) {
            return Err(Error::Planning(format!(
                "{target}: {energy:.1} fJ cannot click at both levels mid-gate \
                 (needs at least {:.1} fJ)",
                t_lo.e_gate_always_fj.max(t_hi.e_gate_always_fj)
            )));
        }
        // Partial offset: high level still at full click, low level below
        // its never threshold.
        let hi_limit = offset_while_at_least(w_hi, t_hi.e_gate_always_fj / energy)
            .ok_or_else(|| {
                Error::Planning(format!(
                    "{target}: {energy:.1} fJ never reaches always-click at the high level"
                ))
            })?;
        let lo_limit = offset_while_at_most(w_lo, t_lo.e_gate_never_fj / energy);
        if lo_limit >= hi_limit {
            return Err(Error::Planning(format!(
                "{target}: time windows do not separate the levels at {energy:.1} fJ \
                 (low level silent only beyond {lo_limit:.2} ns, high level clicks only up to {hi_limit:.2} ns); \
                 partial control only"
            )));
        }
        let split = TwoLevelSplit {
            always: energy,
            partial: energy,
        };
        let t_partial = 0.5 * (lo_limit + hi_limit);
        mixtures[target.index()] = mixture_from_split(
            split,
            (0.0, t_partial),
            eta_lo[target.index()],
            eta_hi[target.index()],
        );
    }
    let [mixture_d0, mixture_d1] = mixtures;
    let plan = AttackPlan {
        blinding_power_mw,
        mode: TriggerMode::InGate,
        mixture_d0,
        mixture_d1,
        resend_scale: 1.0,
    };
    plan.validate()?;
    Ok(plan)
}
