//! Bob-side defenses and monitoring.
//!
//! Three generations of countermeasure are modeled: random gate suppression
//! with a lifetime alarm counter that bricks the receiver, the two-level
//! random-efficiency protocol with its blinding-factor estimator, and the
//! generalized n-level decoy-efficiency schedule. The factor
//! `(eta_hi * rate_lo - eta_lo * rate_hi) / (eta_hi - eta_lo)` is zero
//! whenever the detection rate is proportional to the efficiency, which is
//! the assumption the estimator stakes its security on.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Defense variant in force at the receiver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyVariant {
    /// Plain receiver, single calibrated efficiency, no monitoring.
    None,
    /// Random gate removal with the no-gate alarm counter.
    GateSuppression,
    /// Two non-zero efficiency levels plus the factor estimator.
    TwoLevel,
    /// n ascending efficiency levels plus the factor estimator.
    NLevel,
}

/// One detection-efficiency level: per-detector efficiency and the bias
/// voltage realizing it (the gate amplitude is fixed in this hardware, so
/// levels are set through the high-voltage supply).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfficiencyLevel {
    pub eta_d0: f64,
    pub eta_d1: f64,
    #[serde(rename = "v_bias_d0_V", default)]
    pub v_bias_d0_v: f64,
    #[serde(rename = "v_bias_d1_V", default)]
    pub v_bias_d1_v: f64,
    pub selection_probability: f64,
}

impl EfficiencyLevel {
    pub fn eta(&self, detector_index: usize) -> f64 {
        if detector_index == 0 {
            self.eta_d0
        } else {
            self.eta_d1
        }
    }

    /// Mean efficiency over the two detectors; the scalar the pooled
    /// rate at this level is proportional to under honest operation.
    pub fn eta_mean(&self) -> f64 {
        0.5 * (self.eta_d0 + self.eta_d1)
    }
}

/// Bob's defense configuration.
///
/// Levels are stored in ascending efficiency order (the published protocol
/// description indexes them both ways; explicit hi/lo accessors avoid the
/// ambiguity). Gate suppression composes with the multi-level variants:
/// the alarm counter stays active unless `p_suppress` is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountermeasurePolicy {
    pub variant: PolicyVariant,
    pub p_suppress: f64,
    pub alarm_limit: u32,
    pub levels: Vec<EfficiencyLevel>,
}

/// Calibrated single-level efficiencies of the tested receiver.
pub const CALIBRATED_ETA_D0: f64 = 0.226;
pub const CALIBRATED_ETA_D1: f64 = 0.189;
/// Efficiencies at the reduced bias level.
pub const REDUCED_ETA_D0: f64 = 0.128;
pub const REDUCED_ETA_D1: f64 = 0.097;

pub const DEFAULT_P_SUPPRESS: f64 = 0.02;
pub const DEFAULT_ALARM_LIMIT: u32 = 15;

impl CountermeasurePolicy {
    fn single_level() -> Vec<EfficiencyLevel> {
        vec![EfficiencyLevel {
            eta_d0: CALIBRATED_ETA_D0,
            eta_d1: CALIBRATED_ETA_D1,
            v_bias_d0_v: -55.26,
            v_bias_d1_v: -54.70,
            selection_probability: 1.0,
        }]
    }

    /// No countermeasure: every slot gated at the calibrated efficiency.
    pub fn none() -> Self {
        Self {
            variant: PolicyVariant::None,
            p_suppress: 0.0,
            alarm_limit: DEFAULT_ALARM_LIMIT,
            levels: Self::single_level(),
        }
    }

    /// First-generation countermeasure: 2% of gates removed, alarm at 15
    /// lifetime no-gate clicks.
    pub fn gate_suppression() -> Self {
        Self {
            variant: PolicyVariant::GateSuppression,
            p_suppress: DEFAULT_P_SUPPRESS,
            alarm_limit: DEFAULT_ALARM_LIMIT,
            levels: Self::single_level(),
        }
    }

    /// Full two-level countermeasure with the measured bias/efficiency
    /// pairs, equal selection, gate suppression retained.
    pub fn two_level() -> Self {
        Self {
            variant: PolicyVariant::TwoLevel,
            p_suppress: DEFAULT_P_SUPPRESS,
            alarm_limit: DEFAULT_ALARM_LIMIT,
            levels: vec![
                EfficiencyLevel {
                    eta_d0: REDUCED_ETA_D0,
                    eta_d1: REDUCED_ETA_D1,
                    v_bias_d0_v: -54.86,
                    v_bias_d1_v: -54.40,
                    selection_probability: 0.5,
                },
                EfficiencyLevel {
                    eta_d0: CALIBRATED_ETA_D0,
                    eta_d1: CALIBRATED_ETA_D1,
                    v_bias_d0_v: -55.26,
                    v_bias_d1_v: -54.70,
                    selection_probability: 0.5,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("policy needs at least one efficiency level".into()));
        }
        match self.variant {
            PolicyVariant::None => {
                if self.p_suppress != 0.0 {
                    return Err(Error::Config(
                        "variant `none` cannot suppress gates; use gate_suppression".into(),
                    ));
                }
                if self.levels.len() != 1 {
                    return Err(Error::Config("variant `none` takes exactly one level".into()));
                }
            }
            PolicyVariant::GateSuppression => {
                if !(self.p_suppress > 0.0 && self.p_suppress < 1.0) {
                    return Err(Error::Config(format!(
                        "gate_suppression requires 0 < p_suppress < 1, got {}",
                        self.p_suppress
                    )));
                }
                if self.levels.len() != 1 {
                    return Err(Error::Config(
                        "gate_suppression takes exactly one level".into(),
                    ));
                }
            }
            PolicyVariant::TwoLevel => {
                if self.levels.len() != 2 {
                    return Err(Error::Config(format!(
                        "two_level takes exactly two levels, got {}",
                        self.levels.len()
                    )));
                }
            }
            PolicyVariant::NLevel => {
                if self.levels.len() < 2 {
                    return Err(Error::Config("n_level needs at least two levels".into()));
                }
            }
        }
        if !(0.0..1.0).contains(&self.p_suppress) {
            return Err(Error::Config(format!(
                "p_suppress must be in [0, 1), got {}",
                self.p_suppress
            )));
        }
        for (d, etas) in [
            (0, self.levels.iter().map(|l| l.eta_d0).collect::<Vec<_>>()),
            (1, self.levels.iter().map(|l| l.eta_d1).collect::<Vec<_>>()),
        ] {
            for eta in &etas {
                if !(*eta > 0.0 && *eta <= 1.0) {
                    return Err(Error::Config(format!(
                        "efficiencies must be in (0, 1], got {eta} for detector {d}"
                    )));
                }
            }
            for pair in etas.windows(2) {
                if pair[1] <= pair[0] {
                    return Err(Error::Config(format!(
                        "efficiency levels must be strictly ascending for detector {d}"
                    )));
                }
            }
        }
        let total: f64 = self.levels.iter().map(|l| l.selection_probability).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "level selection probabilities must sum to 1, got {total}"
            )));
        }
        if self.levels.iter().any(|l| l.selection_probability < 0.0) {
            return Err(Error::Config("selection probabilities must be non-negative".into()));
        }
        Ok(())
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_hi(&self) -> &EfficiencyLevel {
        self.levels.last().unwrap()
    }

    pub fn level_lo(&self) -> &EfficiencyLevel {
        self.levels.first().unwrap()
    }

    pub fn monitors_factor(&self) -> bool {
        self.n_levels() >= 2
    }

    /// Draws one slot's gate setting: suppress with `p_suppress`, otherwise
    /// pick a level per the selection probabilities.
    pub fn draw_slot(&self, rng: &mut SplitMix64) -> GateSetting {
        if self.p_suppress > 0.0 && rng.bernoulli(self.p_suppress) {
            return GateSetting::suppressed();
        }
        let mut u = rng.next_f64();
        let mut level_index = self.levels.len() - 1;
        for (ix, level) in self.levels.iter().enumerate() {
            if u < level.selection_probability {
                level_index = ix;
                break;
            }
            u -= level.selection_probability;
        }
        GateSetting {
            applied: true,
            level_index,
            v_bias_d0_v: self.levels[level_index].v_bias_d0_v,
            v_bias_d1_v: self.levels[level_index].v_bias_d1_v,
        }
    }
}

/// Per-slot gate decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateSetting {
    pub applied: bool,
    pub level_index: usize,
    #[serde(rename = "v_bias_d0_V")]
    pub v_bias_d0_v: f64,
    #[serde(rename = "v_bias_d1_V")]
    pub v_bias_d1_v: f64,
}

impl GateSetting {
    pub fn suppressed() -> Self {
        Self {
            applied: false,
            level_index: 0,
            v_bias_d0_v: 0.0,
            v_bias_d1_v: 0.0,
        }
    }
}

/// Draws an i.i.d. gate plan for `n_slots` slots. Deterministic under a
/// fixed generator state.
pub fn draw_gate_plan(
    policy: &CountermeasurePolicy,
    n_slots: usize,
    rng: &mut SplitMix64,
) -> Result<Vec<GateSetting>> {
    policy.validate()?;
    Ok((0..n_slots).map(|_| policy.draw_slot(rng)).collect())
}

/// Lifetime no-gate-click counter. Bricking is absorbing: once set it
/// survives resets and subsequent sessions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AlarmState {
    pub counter: u32,
    pub bricked: bool,
}

impl AlarmState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let state: AlarmState = serde_json::from_str(&text)?;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Loads the persisted state, or a fresh one if the file does not exist
    /// yet.
    pub fn load_or_default(path: &Path) -> Result<Self> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::new())
        }
    }
}

/// Registers a click observed in the absence of the gate. Bricks the system
/// when the lifetime limit is reached.
pub fn register_no_gate_click(mut alarm: AlarmState, alarm_limit: u32) -> AlarmState {
    alarm.counter = alarm.counter.saturating_add(1);
    if alarm.counter >= alarm_limit {
        alarm.bricked = true;
    }
    alarm
}

/// Detection counts conditioned on the efficiency level.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EfficiencyMonitor {
    /// Gated slots observed at each level. Deadtime and suppressed slots
    /// carry no gate and are not counted.
    pub slots: Vec<u64>,
    /// Clicks (either detector) at each level.
    pub clicks: Vec<u64>,
    /// Clicks at each level split by detector.
    pub clicks_by_detector: Vec<[u64; 2]>,
}

impl EfficiencyMonitor {
    pub fn new(n_levels: usize) -> Self {
        Self {
            slots: vec![0; n_levels],
            clicks: vec![0; n_levels],
            clicks_by_detector: vec![[0, 0]; n_levels],
        }
    }

    pub fn record_gated_slot(&mut self, level: usize, clicked: [bool; 2]) {
        self.slots[level] += 1;
        if clicked[0] || clicked[1] {
            self.clicks[level] += 1;
        }
        for (d, &hit) in clicked.iter().enumerate() {
            if hit {
                self.clicks_by_detector[level][d] += 1;
            }
        }
    }

    /// Detection rate at a level (clicks per gated slot).
    pub fn rate(&self, level: usize) -> Result<f64> {
        let n = *self
            .slots
            .get(level)
            .ok_or_else(|| Error::Parameter(format!("no such level {level}")))?;
        if n == 0 {
            return Err(Error::InsufficientData(format!(
                "no gated slots observed at level {level}"
            )));
        }
        Ok(self.clicks[level] as f64 / n as f64)
    }
}

/// The blinding-factor estimator
/// `(eta_hi * rate_lo - eta_lo * rate_hi) / (eta_hi - eta_lo)`.
///
/// Zero when the detection rate is proportional to the efficiency; equal to
/// the common rate when the rate is independent of the level (the naive
/// blinding signature).
pub fn blinding_factor(
    monitor: &EfficiencyMonitor,
    level_hi: usize,
    level_lo: usize,
    eta_hi: f64,
    eta_lo: f64,
) -> Result<f64> {
    if eta_hi == eta_lo {
        return Err(Error::UndefinedFactor(format!(
            "eta_hi and eta_lo must differ, both are {eta_hi}"
        )));
    }
    let rate_hi = monitor.rate(level_hi)?;
    let rate_lo = monitor.rate(level_lo)?;
    Ok((eta_hi * rate_lo - eta_lo * rate_hi) / (eta_hi - eta_lo))
}

/// Verdict of the factor test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorVerdict {
    Clear,
    AttackDetected,
}

/// Blinding-factor estimate with its propagated binomial standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorReport {
    pub factor: f64,
    pub stderr: f64,
    pub sigma_threshold: f64,
    pub verdict: FactorVerdict,
}

pub const DEFAULT_SIGMA_THRESHOLD: f64 = 5.0;

/// One-sided significance test on the blinding factor: attack declared when
/// the factor exceeds `sigma_threshold` standard errors above zero.
pub fn factor_alarm_test(
    monitor: &EfficiencyMonitor,
    level_hi: usize,
    level_lo: usize,
    eta_hi: f64,
    eta_lo: f64,
    sigma_threshold: f64,
) -> Result<FactorReport> {
    let factor = blinding_factor(monitor, level_hi, level_lo, eta_hi, eta_lo)?;
    let rate_hi = monitor.rate(level_hi)?;
    let rate_lo = monitor.rate(level_lo)?;
    let n_hi = monitor.slots[level_hi] as f64;
    let n_lo = monitor.slots[level_lo] as f64;
    let var = (eta_hi * eta_hi * rate_lo * (1.0 - rate_lo) / n_lo
        + eta_lo * eta_lo * rate_hi * (1.0 - rate_hi) / n_hi)
        / ((eta_hi - eta_lo) * (eta_hi - eta_lo));
    let stderr = var.sqrt();
    let verdict = if factor > sigma_threshold * stderr {
        FactorVerdict::AttackDetected
    } else {
        FactorVerdict::Clear
    };
    Ok(FactorReport {
        factor,
        stderr,
        sigma_threshold,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn monitor_with(slots: [u64; 2], clicks: [u64; 2]) -> EfficiencyMonitor {
        EfficiencyMonitor {
            slots: slots.to_vec(),
            clicks: clicks.to_vec(),
            clicks_by_detector: vec![[0, 0]; 2],
        }
    }

    #[test]
    fn suppression_frequency() {
        let policy = CountermeasurePolicy::gate_suppression();
        let mut rng = SplitMix64::new(21);
        let n = 1_000_000usize;
        let plan = draw_gate_plan(&policy, n, &mut rng).unwrap();
        let suppressed = plan.iter().filter(|g| !g.applied).count() as f64;
        let expect = 0.02 * n as f64;
        let sigma = (0.02f64 * 0.98 * n as f64).sqrt();
        assert!((suppressed - expect).abs() < 3.0 * sigma);
    }

    #[test]
    fn no_policy_applies_every_gate() {
        let policy = CountermeasurePolicy::none();
        let mut rng = SplitMix64::new(1);
        let plan = draw_gate_plan(&policy, 10_000, &mut rng).unwrap();
        assert!(plan.iter().all(|g| g.applied && g.level_index == 0));
    }

    #[test]
    fn two_level_selection_frequency() {
        let mut policy = CountermeasurePolicy::two_level();
        policy.p_suppress = 0.0; // isolate the level draw
        let mut rng = SplitMix64::new(5);
        let n = 1_000_000usize;
        let plan = draw_gate_plan(&policy, n, &mut rng).unwrap();
        let hi = plan.iter().filter(|g| g.applied && g.level_index == 1).count() as f64;
        let sigma = (0.25 * n as f64).sqrt();
        assert!((hi - 0.5 * n as f64).abs() < 3.0 * sigma);
    }

    #[test]
    fn gate_plan_is_seeded() {
        let policy = CountermeasurePolicy::two_level();
        let a = draw_gate_plan(&policy, 1000, &mut SplitMix64::new(9)).unwrap();
        let b = draw_gate_plan(&policy, 1000, &mut SplitMix64::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn policy_validation_rejects_bad_levels() {
        let mut p = CountermeasurePolicy::two_level();
        p.levels[0].eta_d0 = 0.3; // not ascending vs 0.226
        assert!(p.validate().is_err());

        let mut p = CountermeasurePolicy::two_level();
        p.levels[0].selection_probability = 0.7;
        assert!(p.validate().is_err());

        let mut p = CountermeasurePolicy::gate_suppression();
        p.p_suppress = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn alarm_reaches_limit_and_bricks() {
        let mut alarm = AlarmState::new();
        alarm.counter = 14;
        alarm = register_no_gate_click(alarm, 15);
        assert_eq!(alarm.counter, 15);
        assert!(alarm.bricked);
    }

    #[test]
    fn alarm_counts_up() {
        let alarm = register_no_gate_click(AlarmState::new(), 15);
        assert_eq!(alarm.counter, 1);
        assert!(!alarm.bricked);
    }

    #[test]
    fn bricked_is_absorbing() {
        let mut alarm = AlarmState {
            counter: 15,
            bricked: true,
        };
        alarm = register_no_gate_click(alarm, 15);
        assert!(alarm.bricked);
        assert_eq!(alarm.counter, 16);
    }

    #[test]
    fn alarm_persistence_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("alarm.json");
        let fresh = AlarmState::load_or_default(&path).unwrap();
        assert_eq!(fresh, AlarmState::new());
        let state = AlarmState {
            counter: 7,
            bricked: false,
        };
        state.save(&path).unwrap();
        assert_eq!(AlarmState::load(&path).unwrap(), state);
    }

    #[test]
    fn factor_zero_for_proportional_rates() {
        // rate/eta identical at both levels: the factor vanishes exactly
        // (both products evaluate to the same f64).
        let m = monitor_with([1_000_000, 1_000_000], [113_000, 226_000]);
        let f = blinding_factor(&m, 1, 0, 0.226, 0.113).unwrap();
        assert_eq!(f, 0.0);
    }

    #[test]
    fn factor_equals_common_rate_for_level_independent_rates() {
        let m = monitor_with([500_000, 500_000], [50_000, 50_000]);
        let f = blinding_factor(&m, 1, 0, 0.226, 0.128).unwrap();
        assert!((f - 0.1).abs() < 1e-12);
    }

    #[test]
    fn factor_zero_rates() {
        let m = monitor_with([1000, 1000], [0, 0]);
        assert_eq!(blinding_factor(&m, 1, 0, 0.2, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn factor_error_paths() {
        let m = monitor_with([1000, 1000], [10, 10]);
        assert!(matches!(
            blinding_factor(&m, 1, 0, 0.2, 0.2),
            Err(Error::UndefinedFactor(_))
        ));
        let empty = monitor_with([0, 1000], [0, 10]);
        assert!(matches!(
            blinding_factor(&empty, 1, 0, 0.2, 0.1),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn factor_test_flags_naive_blinding() {
        let m = monitor_with([500_000, 500_000], [50_000, 50_000]);
        let report = factor_alarm_test(&m, 1, 0, 0.226, 0.128, 5.0).unwrap();
        assert_eq!(report.verdict, FactorVerdict::AttackDetected);
        assert!(report.factor / report.stderr > 5.0);
    }

    #[test]
    fn factor_test_clears_proportional_rates() {
        let m = monitor_with([1_000_000, 1_000_000], [113_000, 226_000]);
        let report = factor_alarm_test(&m, 1, 0, 0.226, 0.113, 5.0).unwrap();
        assert_eq!(report.verdict, FactorVerdict::Clear);
    }
}
