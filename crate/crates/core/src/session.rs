//! Slot-by-slot Monte Carlo engine for plug-and-play BB84 sessions.
//!
//! Each slot runs the full chain: Alice's random bit and basis, the
//! optional intercept-resend attacker, Bob's basis choice and gate policy
//! draw, the detector click decision (Geiger mode when honest, blinded
//! linear mode under attack), deadtime, alarm accounting, and the per-level
//! efficiency monitor. Sifting, the QBER, the blinding-factor test and the
//! session verdict are computed from the recorded trace.
//!
//! A session is sequential by contract (deadtime and the alarm couple
//! consecutive slots), but every random draw is keyed by `(seed, slot,
//! stream)`, so independent sessions and sweep points can run in parallel
//! and still reproduce byte-identical reports.

use serde::{Deserialize, Serialize};

use crate::attack::{AttackPlan, TriggerChoice, TriggerMode};
use crate::countermeasure::{
    factor_alarm_test, register_no_gate_click, AlarmState, CountermeasurePolicy, EfficiencyMonitor,
    FactorReport, FactorVerdict, DEFAULT_SIGMA_THRESHOLD,
};
use crate::detector::{
    apply_deadtime, click_blinded, click_geiger, effective_trigger_energy, BlindedResponse,
    DetectorId, DetectorMode, DetectorSlotState, TriggerPulse,
};
use crate::electrothermal::ElectrothermalModel;
use crate::error::{Error, Result};
use crate::rng::{SlotRandomness, SplitMix64, Stream};

fn default_qber_abort() -> f64 {
    0.11
}

fn default_min_sifted_rate() -> f64 {
    1e-4
}

fn default_sigma_threshold() -> f64 {
    DEFAULT_SIGMA_THRESHOLD
}

/// Complete description of one simulated session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_slots: u64,
    pub seed: u64,
    pub channel_transmittance: f64,
    /// Probability that a matched-basis photon lands in the wrong detector.
    #[serde(default)]
    pub flip_probability: f64,
    /// Per-detector dark-count probability in gated slots.
    #[serde(default)]
    pub dark_count_probability: f64,
    #[serde(default = "default_qber_abort")]
    pub qber_abort_threshold: f64,
    /// Sessions whose sifted rate falls below this floor fail without
    /// raising any alarm, mirroring ordinary low-efficiency session loss.
    #[serde(default = "default_min_sifted_rate")]
    pub min_sifted_rate: f64,
    #[serde(default = "default_sigma_threshold")]
    pub factor_sigma_threshold: f64,
    pub countermeasure: CountermeasurePolicy,
    /// Blinded-mode detector response per efficiency level; required when
    /// an attack is configured.
    #[serde(default)]
    pub response: Option<BlindedResponse>,
    /// Alternative to an inline response for single-level policies: a
    /// threshold-curve CSV, evaluated at the attack's blinding power. The
    /// loader resolves this into `response` before the session runs.
    #[serde(default)]
    pub response_curves_csv: Option<String>,
    #[serde(default = "default_transition_width")]
    pub response_transition_width: f64,
    #[serde(default)]
    pub attack: Option<AttackPlan>,
}

fn default_transition_width() -> f64 {
    crate::detector::DEFAULT_TRANSITION_WIDTH
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_slots == 0 {
            return Err(Error::Config("n_slots must be positive".into()));
        }
        if !(self.channel_transmittance > 0.0 && self.channel_transmittance <= 1.0) {
            return Err(Error::Config(format!(
                "channel_transmittance must be in (0, 1], got {}",
                self.channel_transmittance
            )));
        }
        for (name, p) in [
            ("flip_probability", self.flip_probability),
            ("dark_count_probability", self.dark_count_probability),
            ("qber_abort_threshold", self.qber_abort_threshold),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        self.countermeasure.validate()?;
        if let Some(attack) = &self.attack {
            attack.validate()?;
            match (&self.response, &self.response_curves_csv) {
                (Some(response), None) => {
                    response.validate(self.countermeasure.n_levels())?;
                }
                (None, Some(_)) => {
                    if self.countermeasure.n_levels() != 1 {
                        return Err(Error::Config(
                            "a threshold-curve reference covers a single level; \
                             multi-level policies need an inline response"
                                .into(),
                        ));
                    }
                }
                (None, None) => {
                    return Err(Error::Config(
                        "attacked scenarios need a blinded detector response".into(),
                    ))
                }
                (Some(_), Some(_)) => {
                    return Err(Error::Config(
                        "give either an inline response or a curve reference, not both".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Resolves a `response_curves_csv` reference (relative paths against
    /// `base_dir`) into an inline response at the attack's blinding power.
    pub fn resolve_response_reference(&mut self, base_dir: &std::path::Path) -> Result<()> {
        let Some(rel) = self.response_curves_csv.take() else {
            return Ok(());
        };
        if self.response.is_some() {
            return Err(Error::Config(
                "give either an inline response or a curve reference, not both".into(),
            ));
        }
        let attack = self.attack.as_ref().ok_or_else(|| {
            Error::Config("a threshold-curve reference needs an attack to fix the blinding power".into())
        })?;
        let path = base_dir.join(rel);
        let curves =
            crate::detector::ThresholdCurves::from_csv_file(&path, self.response_transition_width)?;
        self.response = Some(BlindedResponse::single(curves.at(attack.blinding_power_mw)?));
        Ok(())
    }

    /// Stable fingerprint of the scenario (FNV-1a over its canonical JSON),
    /// embedded in every artifact so outputs are traceable to their inputs.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("scenario serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Eve's action in one slot (present only in attacked sessions).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EveAction {
    pub basis: bool,
    pub bit: bool,
    pub sent: bool,
    #[serde(rename = "energy_fJ")]
    pub energy_fj: f64,
    pub timing_offset_ns: f64,
}

/// Everything that happened in one slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub slot: u64,
    pub alice_bit: bool,
    pub alice_basis: bool,
    pub bob_basis: bool,
    /// Gate pulse actually applied this slot.
    pub gate_applied: bool,
    /// Gate removed by the random-suppression policy.
    pub suppressed: bool,
    /// Gate removed by deadtime.
    pub in_deadtime: bool,
    pub level_index: usize,
    pub eve: Option<EveAction>,
    pub click_d0: bool,
    pub click_d1: bool,
    pub double_click: bool,
    /// Bob's registered bit: single click decides it, double clicks squash
    /// to a random bit.
    pub bob_bit: Option<bool>,
}

impl SlotRecord {
    pub fn clicked(&self) -> bool {
        self.click_d0 || self.click_d1
    }
}

/// Session outcome class. Bricking dominates, then the statistical attack
/// verdict, then ordinary protocol failure modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    KeyOk,
    AbortedQber,
    AttackDetected,
    Bricked,
    FailedLowRate,
}

/// Result of sifting a slot trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiftOutcome {
    pub sifted_count: u64,
    pub error_count: u64,
    /// None when nothing was sifted.
    pub qber: Option<f64>,
    /// Among sifted slots where Eve acted: how many of Bob's bits equal
    /// hers (her key overlap).
    pub eve_agreements: u64,
    pub eve_sifted: u64,
}

/// Keeps matched-basis clicked slots and counts bit errors against Alice.
pub fn sift(records: &[SlotRecord]) -> SiftOutcome {
    let mut sifted = 0u64;
    let mut errors = 0u64;
    let mut eve_agreements = 0u64;
    let mut eve_sifted = 0u64;
    for r in records {
        if r.alice_basis != r.bob_basis {
            continue;
        }
        let Some(bob_bit) = r.bob_bit else { continue };
        sifted += 1;
        if bob_bit != r.alice_bit {
            errors += 1;
        }
        if let Some(eve) = &r.eve {
            eve_sifted += 1;
            if eve.bit == bob_bit {
                eve_agreements += 1;
            }
        }
    }
    SiftOutcome {
        sifted_count: sifted,
        error_count: errors,
        qber: if sifted > 0 {
            Some(errors as f64 / sifted as f64)
        } else {
            None
        },
        eve_agreements,
        eve_sifted,
    }
}

/// Per-level statistics in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: usize,
    pub eta_d0: f64,
    pub eta_d1: f64,
    pub gated_slots: u64,
    pub clicks: u64,
    pub clicks_d0: u64,
    pub clicks_d1: u64,
    pub rate: Option<f64>,
}

/// Alarm bookkeeping for one session, split by what removed the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlarmSummary {
    pub counter_before: u32,
    pub counter_after: u32,
    pub increments: u32,
    pub increments_suppressed_slots: u32,
    pub increments_deadtime_slots: u32,
    pub bricked: bool,
}

/// Matched-basis click rates per level and target: the quantity Eve's
/// mixture is engineered to pin at Bob's per-level efficiency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedRates {
    pub level: usize,
    pub trials_d0: u64,
    pub clicks_d0: u64,
    pub rate_d0: Option<f64>,
    pub trials_d1: u64,
    pub clicks_d1: u64,
    pub rate_d1: Option<f64>,
}

/// Attack-side annotation of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub matched_rates: Vec<MatchedRates>,
    pub alarm_increments: u32,
    /// Fraction of sifted bits equal to Eve's, when anything was sifted.
    pub eve_key_overlap: Option<f64>,
    /// No alarm increments and every sifted bit known to Eve.
    pub traceless: bool,
}

/// Aggregate session statistics and verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub config_fingerprint: String,
    pub seed: u64,
    pub verdict: Verdict,
    pub n_slots_requested: u64,
    /// Slots actually executed; fewer than requested when the session
    /// bricked mid-run.
    pub n_slots_executed: u64,
    pub gated_slots: u64,
    pub suppressed_slots: u64,
    pub deadtime_slots: u64,
    pub raw_clicks: u64,
    pub double_clicks: u64,
    pub sifted_count: u64,
    pub qber: Option<f64>,
    pub levels: Vec<LevelStats>,
    pub alarm: AlarmSummary,
    pub blinding_factor: Option<FactorReport>,
    pub attack: Option<AttackSummary>,
}

impl SessionReport {
    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn draw_mixture_component(
    mixture: &[TriggerChoice],
    resend_scale: f64,
    rng: &mut SplitMix64,
) -> Option<TriggerChoice> {
    let mut u = rng.next_f64();
    for choice in mixture {
        let p = choice.probability * resend_scale;
        if u < p {
            return Some(*choice);
        }
        u -= p;
    }
    None
}

/// Runs one session. The alarm state is the receiver's lifetime counter:
/// pass the persisted value and store it back afterwards. A bricked
/// receiver refuses to run.
pub fn run_session(config: &ScenarioConfig, alarm: &mut AlarmState) -> Result<SessionReport> {
    let (report, _) = run_session_with_trace(config, alarm)?;
    Ok(report)
}

/// [`run_session`] variant that also returns the full slot trace.
pub fn run_session_with_trace(
    config: &ScenarioConfig,
    alarm: &mut AlarmState,
) -> Result<(SessionReport, Vec<SlotRecord>)> {
    config.validate()?;
    if config.attack.is_some() && config.response.is_none() {
        return Err(Error::Config(
            "threshold-curve reference not resolved; call resolve_response_reference first".into(),
        ));
    }
    let policy = &config.countermeasure;
    let counter_before = alarm.counter;

    if alarm.bricked {
        let report = SessionReport {
            config_fingerprint: config.fingerprint(),
            seed: config.seed,
            verdict: Verdict::Bricked,
            n_slots_requested: config.n_slots,
            n_slots_executed: 0,
            gated_slots: 0,
            suppressed_slots: 0,
            deadtime_slots: 0,
            raw_clicks: 0,
            double_clicks: 0,
            sifted_count: 0,
            qber: None,
            levels: Vec::new(),
            alarm: AlarmSummary {
                counter_before,
                counter_after: alarm.counter,
                increments: 0,
                increments_suppressed_slots: 0,
                increments_deadtime_slots: 0,
                bricked: true,
            },
            blinding_factor: None,
            attack: None,
        };
        return Ok((report, Vec::new()));
    }

    let rand = SlotRandomness::new(config.seed);
    let n_levels = policy.n_levels();
    let mut monitor = EfficiencyMonitor::new(n_levels);
    let mut matched_trials = vec![[0u64; 2]; n_levels];
    let mut matched_clicks = vec![[0u64; 2]; n_levels];
    let mut records: Vec<SlotRecord> = Vec::with_capacity(config.n_slots as usize);

    let mode = if config.attack.is_some() {
        DetectorMode::Blinded
    } else {
        DetectorMode::Geiger
    };
    let mut state = DetectorSlotState::new(mode);

    let mut suppressed_slots = 0u64;
    let mut deadtime_slots = 0u64;
    let mut gated_slots = 0u64;
    let mut raw_clicks = 0u64;
    let mut double_clicks = 0u64;
    let mut increments_suppressed = 0u32;
    let mut increments_deadtime = 0u32;

    for slot in 0..config.n_slots {
        let mut alice_rng = rand.stream(slot, Stream::Alice);
        let mut channel_rng = rand.stream(slot, Stream::Channel);
        let mut eve_rng = rand.stream(slot, Stream::Eve);
        let mut bob_rng = rand.stream(slot, Stream::BobPolicy);
        let mut det_rng = rand.stream(slot, Stream::Detector);

        let alice_bit = alice_rng.next_bool();
        let alice_basis = alice_rng.next_bool();
        let bob_basis = bob_rng.next_bool();

        let drawn = policy.draw_slot(&mut bob_rng);
        let in_deadtime = state.in_deadtime();
        let suppressed = !in_deadtime && !drawn.applied;
        let gate_applied = !in_deadtime && drawn.applied;
        let level = drawn.level_index;
        state.efficiency_level = level;

        if in_deadtime {
            deadtime_slots += 1;
        } else if suppressed {
            suppressed_slots += 1;
        }

        let mut clicks = [false, false];
        let mut eve_action: Option<EveAction> = None;

        match &config.attack {
            None => {
                if gate_applied {
                    if channel_rng.bernoulli(config.channel_transmittance) {
                        let target = if alice_basis == bob_basis {
                            let mut bit = alice_bit;
                            if config.flip_probability > 0.0
                                && channel_rng.bernoulli(config.flip_probability)
                            {
                                bit = !bit;
                            }
                            DetectorId::for_bit(bit)
                        } else {
                            DetectorId::for_bit(channel_rng.next_bool())
                        };
                        let eta = policy.levels[level].eta(target.index());
                        if click_geiger(eta, true, &mut det_rng)? {
                            clicks[target.index()] = true;
                        }
                    }
                    if config.dark_count_probability > 0.0 {
                        for click in &mut clicks {
                            if det_rng.bernoulli(config.dark_count_probability) {
                                *click = true;
                            }
                        }
                    }
                }
            }
            Some(plan) => {
                // c.w. blinding is on every slot; detectors respond only to
                // Eve's trigger energies.
                let response = config.response.as_ref().unwrap();
                let eve_basis = eve_rng.next_bool();
                let eve_bit = if eve_basis == alice_basis {
                    alice_bit
                } else {
                    eve_rng.next_bool()
                };
                let target = DetectorId::for_bit(eve_bit);
                let choice =
                    draw_mixture_component(plan.mixture(target), plan.resend_scale, &mut eve_rng);
                let basis_match = eve_basis == bob_basis;

                if let Some(choice) = choice {
                    let level_response = &response.levels[level];
                    for d in DetectorId::BOTH {
                        // Interference routes the whole pulse to the aimed
                        // detector on basis match and splits it evenly on
                        // mismatch.
                        let share = if basis_match {
                            if d == target {
                                choice.energy_fj
                            } else {
                                0.0
                            }
                        } else {
                            0.5 * choice.energy_fj
                        };
                        if share <= 0.0 {
                            continue;
                        }
                        let delivered = match plan.mode {
                            TriggerMode::InGate => {
                                let pulse = TriggerPulse {
                                    energy_fj: share,
                                    timing_offset_ns: choice.timing_offset_ns,
                                    width_ns: TriggerPulse::DEFAULT_WIDTH_NS,
                                };
                                effective_trigger_energy(
                                    &pulse,
                                    gate_applied,
                                    level_response.window(d),
                                )
                            }
                            // After-gate threshold sets are calibrated at
                            // the trigger's own timing.
                            TriggerMode::AfterGate => share,
                        };
                        if click_blinded(
                            &level_response.thresholds,
                            d,
                            delivered,
                            gate_applied,
                            &mut det_rng,
                        ) {
                            clicks[d.index()] = true;
                        }
                    }
                }
                if gate_applied && basis_match {
                    matched_trials[level][target.index()] += 1;
                    if clicks[target.index()] {
                        matched_clicks[level][target.index()] += 1;
                    }
                }
                eve_action = Some(EveAction {
                    basis: eve_basis,
                    bit: eve_bit,
                    sent: choice.is_some(),
                    energy_fj: choice.map_or(0.0, |c| c.energy_fj),
                    timing_offset_ns: choice.map_or(0.0, |c| c.timing_offset_ns),
                });
            }
        }

        let clicked = clicks[0] || clicks[1];
        let double_click = clicks[0] && clicks[1];
        if gate_applied {
            gated_slots += 1;
            monitor.record_gated_slot(level, clicks);
        }
        if clicked {
            raw_clicks += 1;
            if double_click {
                double_clicks += 1;
            }
        }

        // Clicks without a gate feed the lifetime alarm, whether the gate
        // was removed by the policy or by deadtime.
        if !gate_applied && clicked {
            *alarm = register_no_gate_click(*alarm, policy.alarm_limit);
            if in_deadtime {
                increments_deadtime += 1;
            } else {
                increments_suppressed += 1;
            }
        }

        let bob_bit = if double_click {
            let mut squash_rng = rand.stream(slot, Stream::Squash);
            Some(squash_rng.next_bool())
        } else if clicks[0] {
            Some(false)
        } else if clicks[1] {
            Some(true)
        } else {
            None
        };

        records.push(SlotRecord {
            slot,
            alice_bit,
            alice_basis,
            bob_basis,
            gate_applied,
            suppressed,
            in_deadtime,
            level_index: level,
            eve: eve_action,
            click_d0: clicks[0],
            click_d1: clicks[1],
            double_click,
            bob_bit,
        });

        state = apply_deadtime(state, clicked);

        if alarm.bricked {
            break;
        }
    }

    let n_executed = records.len() as u64;
    let sifted = sift(&records);

    let blinding_factor = if policy.monitors_factor() {
        let hi = n_levels - 1;
        let lo = 0;
        match factor_alarm_test(
            &monitor,
            hi,
            lo,
            policy.levels[hi].eta_mean(),
            policy.levels[lo].eta_mean(),
            config.factor_sigma_threshold,
        ) {
            Ok(report) => Some(report),
            Err(Error::InsufficientData(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };

    let increments = increments_suppressed + increments_deadtime;
    let attack_summary = config.attack.as_ref().map(|_| {
        let matched_rates = (0..n_levels)
            .map(|k| MatchedRates {
                level: k,
                trials_d0: matched_trials[k][0],
                clicks_d0: matched_clicks[k][0],
                rate_d0: (matched_trials[k][0] > 0)
                    .then(|| matched_clicks[k][0] as f64 / matched_trials[k][0] as f64),
                trials_d1: matched_trials[k][1],
                clicks_d1: matched_clicks[k][1],
                rate_d1: (matched_trials[k][1] > 0)
                    .then(|| matched_clicks[k][1] as f64 / matched_trials[k][1] as f64),
            })
            .collect();
        let eve_key_overlap = (sifted.sifted_count > 0)
            .then(|| sifted.eve_agreements as f64 / sifted.sifted_count as f64);
        AttackSummary {
            matched_rates,
            alarm_increments: increments,
            eve_key_overlap,
            traceless: increments == 0 && eve_key_overlap == Some(1.0),
        }
    });

    let sifted_rate = sifted.sifted_count as f64 / n_executed.max(1) as f64;
    let verdict = if alarm.bricked {
        Verdict::Bricked
    } else if blinding_factor
        .as_ref()
        .is_some_and(|f| f.verdict == FactorVerdict::AttackDetected)
    {
        Verdict::AttackDetected
    } else if sifted.sifted_count == 0 || sifted_rate < config.min_sifted_rate {
        Verdict::FailedLowRate
    } else if sifted.qber.unwrap_or(0.0) > config.qber_abort_threshold {
        Verdict::AbortedQber
    } else {
        Verdict::KeyOk
    };

    let levels = (0..n_levels)
        .map(|k| LevelStats {
            level: k,
            eta_d0: policy.levels[k].eta_d0,
            eta_d1: policy.levels[k].eta_d1,
            gated_slots: monitor.slots[k],
            clicks: monitor.clicks[k],
            clicks_d0: monitor.clicks_by_detector[k][0],
            clicks_d1: monitor.clicks_by_detector[k][1],
            rate: (monitor.slots[k] > 0).then(|| monitor.clicks[k] as f64 / monitor.slots[k] as f64),
        })
        .collect();

    let report = SessionReport {
        config_fingerprint: config.fingerprint(),
        seed: config.seed,
        verdict,
        n_slots_requested: config.n_slots,
        n_slots_executed: n_executed,
        gated_slots,
        suppressed_slots,
        deadtime_slots,
        raw_clicks,
        double_clicks,
        sifted_count: sifted.sifted_count,
        qber: sifted.qber,
        levels,
        alarm: AlarmSummary {
            counter_before,
            counter_after: alarm.counter,
            increments,
            increments_suppressed_slots: increments_suppressed,
            increments_deadtime_slots: increments_deadtime,
            bricked: alarm.bricked,
        },
        blinding_factor,
        attack: attack_summary,
    };
    Ok((report, records))
}

/// Sweep axes for curve regeneration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Blinded click probability versus trigger energy, per detector and
    /// level.
    TriggerEnergy,
    /// Blinded click probability versus trigger timing, per detector and
    /// level, at the attack plan's energies.
    TimingOffset,
    /// Electro-thermal operating point (and synthesized thresholds) versus
    /// c.w. power.
    BlindingPower,
    /// Synthesized in-gate thresholds versus a bias-voltage offset.
    VBiasLevel,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "trigger_energy" => Ok(Self::TriggerEnergy),
            "timing_offset" => Ok(Self::TimingOffset),
            "blinding_power" => Ok(Self::BlindingPower),
            "v_bias_level" => Ok(Self::VBiasLevel),
            other => Err(Error::Parameter(format!(
                "unknown sweep axis `{other}` (expected trigger_energy, timing_offset, blinding_power or v_bias_level)"
            ))),
        }
    }
}

/// Plot-ready sweep output: one row per grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub x_name: String,
    pub column_names: Vec<String>,
    pub rows: Vec<(f64, Vec<f64>)>,
}

impl SweepTable {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.x_name);
        for c in &self.column_names {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (x, cols) in &self.rows {
            out.push_str(&format!("{x}"));
            for v in cols {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

pub const DEFAULT_SWEEP_TRIALS: u32 = 2000;

/// Measured click frequency of one detector at one level for a given
/// delivered energy; deterministic outside the transition bands.
fn click_frequency(
    response: &BlindedResponse,
    level: usize,
    detector: DetectorId,
    delivered_fj: f64,
    gate_applied: bool,
    trials: u32,
    rng: &mut SplitMix64,
) -> f64 {
    let thresholds = &response.levels[level].thresholds;
    let mut hits = 0u32;
    for _ in 0..trials {
        if click_blinded(thresholds, detector, delivered_fj, gate_applied, rng) {
            hits += 1;
        }
    }
    hits as f64 / trials as f64
}

/// Runs a fixed-trial batch per grid point and emits plot-ready curve
/// tables. Electro-thermal axes need the detector models.
pub fn sweep(
    config: &ScenarioConfig,
    axis: SweepAxis,
    grid: &[f64],
    trials: u32,
    models: Option<&[ElectrothermalModel; 2]>,
) -> Result<SweepTable> {
    if grid.is_empty() {
        return Err(Error::Parameter("sweep grid is empty".into()));
    }
    if trials == 0 {
        return Err(Error::Parameter("sweep needs at least one trial per point".into()));
    }
    let rand = SlotRandomness::new(config.seed);
    match axis {
        SweepAxis::TriggerEnergy | SweepAxis::TimingOffset => {
            let response = config.response.as_ref().ok_or_else(|| {
                Error::Config("detector-response sweeps need a blinded response table".into())
            })?;
            let n_levels = response.levels.len();
            let energies: [f64; 2] = match axis {
                SweepAxis::TimingOffset => {
                    let plan = config.attack.as_ref().ok_or_else(|| {
                        Error::Config(
                            "timing sweeps take the trigger energy from the attack plan".into(),
                        )
                    })?;
                    [
                        plan.mixture(DetectorId::D0)
                            .first()
                            .map_or(0.0, |c| c.energy_fj),
                        plan.mixture(DetectorId::D1)
                            .first()
                            .map_or(0.0, |c| c.energy_fj),
                    ]
                }
                _ => [0.0, 0.0],
            };
            let mut column_names = Vec::new();
            for d in DetectorId::BOTH {
                for k in 0..n_levels {
                    column_names.push(format!("click_prob_{}_level{k}", d.to_string().to_lowercase()));
                }
            }
            if axis == SweepAxis::TriggerEnergy {
                for d in DetectorId::BOTH {
                    for k in 0..n_levels {
                        column_names.push(format!(
                            "nogate_click_prob_{}_level{k}",
                            d.to_string().to_lowercase()
                        ));
                    }
                }
            }
            let mut rows = Vec::with_capacity(grid.len());
            for (ix, &x) in grid.iter().enumerate() {
                let mut rng = rand.stream(ix as u64, Stream::Sweep);
                let mut cols = Vec::with_capacity(column_names.len());
                for d in DetectorId::BOTH {
                    for k in 0..n_levels {
                        let delivered = match axis {
                            SweepAxis::TriggerEnergy => x,
                            _ => {
                                energies[d.index()]
                                    * response.levels[k].window(d).factor(x)
                            }
                        };
                        cols.push(click_frequency(
                            response, k, d, delivered, true, trials, &mut rng,
                        ));
                    }
                }
                if axis == SweepAxis::TriggerEnergy {
                    for d in DetectorId::BOTH {
                        for k in 0..n_levels {
                            cols.push(click_frequency(
                                response, k, d, x, false, trials, &mut rng,
                            ));
                        }
                    }
                }
                rows.push((x, cols));
            }
            Ok(SweepTable {
                axis,
                x_name: match axis {
                    SweepAxis::TriggerEnergy => "trigger_energy_fJ".into(),
                    _ => "timing_offset_ns".into(),
                },
                column_names,
                rows,
            })
        }
        SweepAxis::BlindingPower => {
            let models = models.ok_or_else(|| {
                Error::Config("blinding-power sweeps need the electro-thermal models".into())
            })?;
            let mut column_names = Vec::new();
            for d in DetectorId::BOTH {
                let d = d.to_string().to_lowercase();
                column_names.extend([
                    format!("v_apd_{d}_V"),
                    format!("i_apd_{d}_mA"),
                    format!("blinded_{d}"),
                    format!("e_gate_never_{d}_fJ"),
                    format!("e_gate_always_{d}_fJ"),
                    format!("e_nogate_never_{d}_fJ"),
                ]);
            }
            let mut rows = Vec::with_capacity(grid.len());
            for &p in grid {
                let mut cols = Vec::with_capacity(column_names.len());
                for model in models {
                    let op = model.steady_state(p)?;
                    cols.extend([op.v_apd_v, op.i_apd_ma, op.blinded as u8 as f64]);
                    match model.thresholds_at(p, 0.1) {
                        Ok(t) => cols.extend([
                            t.e_gate_never_fj,
                            t.e_gate_always_fj,
                            t.e_nogate_never_fj,
                        ]),
                        // Below the blinding threshold or gate-dominated:
                        // thresholds undefined at this power.
                        Err(_) => cols.extend([f64::NAN, f64::NAN, f64::NAN]),
                    }
                }
                rows.push((p, cols));
            }
            Ok(SweepTable {
                axis,
                x_name: "blinding_power_mW".into(),
                column_names,
                rows,
            })
        }
        SweepAxis::VBiasLevel => {
            let models = models.ok_or_else(|| {
                Error::Config("bias-level sweeps need the electro-thermal models".into())
            })?;
            let p_blind = config
                .attack
                .as_ref()
                .map(|a| a.blinding_power_mw)
                .ok_or_else(|| {
                    Error::Config("bias-level sweeps take the blinding power from the attack plan".into())
                })?;
            let mut column_names = Vec::new();
            for d in DetectorId::BOTH {
                let d = d.to_string().to_lowercase();
                column_names.extend([
                    format!("e_gate_never_{d}_fJ"),
                    format!("e_gate_always_{d}_fJ"),
                ]);
            }
            let mut rows = Vec::with_capacity(grid.len());
            for &offset in grid {
                let mut cols = Vec::with_capacity(column_names.len());
                for model in models {
                    let mut shifted = model.clone();
                    // Positive offsets reduce the bias magnitude (the
                    // supply is negative), lowering the gain.
                    shifted.params.v_bias_v += offset;
                    match shifted.thresholds_at(p_blind, 0.1) {
                        Ok(t) => cols.extend([t.e_gate_never_fj, t.e_gate_always_fj]),
                        Err(_) => cols.extend([f64::NAN, f64::NAN]),
                    }
                }
                rows.push((offset, cols));
            }
            Ok(SweepTable {
                axis,
                x_name: "v_bias_offset_V".into(),
                column_names,
                rows,
            })
        }
    }
}
