//! Scenario description, loaded from TOML.
//!
//! Every section is optional and falls back to the defaults below; unknown
//! keys are rejected.

use crate::beaconing::{OmissionStrategy, OmissionVariant, VerificationBudgetConfig};
use crate::config::{parse_toml, ConfigError};
use crate::crypto::CryptoSuite;
use crate::identity::PseudonymChangePolicy;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SecurityMode {
    NoVc,
    UnsecuredVc,
    SecuredVc,
}

impl SecurityMode {
    pub fn name(&self) -> &'static str {
        match self {
            SecurityMode::NoVc => "no-vc",
            SecurityMode::UnsecuredVc => "unsecured-vc",
            SecurityMode::SecuredVc => "secured-vc",
        }
    }

    pub fn communicates(&self) -> bool {
        *self != SecurityMode::NoVc
    }
}

impl fmt::Display for SecurityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    AlwaysAttach,
    Periodic,
    NeighborTriggered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficConfig {
    pub vehicle_count: usize,
    pub lanes: usize,
    pub lane_spacing_m: f64,
    /// Distance between consecutive vehicles of a lane.
    pub initial_headway_m: f64,
    pub speed_mps: f64,
    /// Per-lane speeds; overrides `speed_mps`.
    pub lane_speeds_mps: Option<Vec<f64>>,
    /// Per-vehicle speeds; overrides both of the above.
    pub vehicle_speeds_mps: Option<Vec<f64>>,
    /// The last `opposite_lanes` lanes travel in the negative x direction.
    pub opposite_lanes: usize,
    pub beacon_interval_ms: u64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        TrafficConfig {
            vehicle_count: 10,
            lanes: 1,
            lane_spacing_m: 4.0,
            initial_headway_m: 40.0,
            speed_mps: 30.0,
            lane_speeds_mps: None,
            vehicle_speeds_mps: None,
            opposite_lanes: 0,
            beacon_interval_ms: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadioConfig {
    pub tx_range_m: f64,
    /// Loss probability on an idle channel.
    pub base_loss: f64,
    /// Added loss per unit of normalized load.
    pub load_coefficient: f64,
    pub load_window_ms: u64,
    /// Bytes per load window that count as a fully loaded channel.
    pub capacity_bytes_per_window: f64,
    /// Propagation plus medium access delay.
    pub delay_ms: u64,
}

impl Default for RadioConfig {
    fn default() -> Self {
        RadioConfig {
            tx_range_m: 300.0,
            base_loss: 0.01,
            load_coefficient: 1.0,
            load_window_ms: 100,
            // 6 Mbit/s over a 100 ms window
            capacity_bytes_per_window: 75_000.0,
            delay_ms: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SecurityConfig {
    pub mode: SecurityMode,
    pub crypto: CryptoSuite,
    pub strategy: StrategyKind,
    pub alpha: u32,
    pub beta: u32,
    pub neighbor_expiry_ms: u64,
    pub freshness_ms: u64,
    pub opposite_flow_filter: bool,
    pub pending_capacity: usize,
    pub budget: VerificationBudgetConfig,
}

impl Default for SecurityConfig {
    fn default() -> Self {
        SecurityConfig {
            mode: SecurityMode::SecuredVc,
            crypto: CryptoSuite::Modeled,
            strategy: StrategyKind::NeighborTriggered,
            alpha: 10,
            beta: 3,
            neighbor_expiry_ms: 3000,
            freshness_ms: 1000,
            opposite_flow_filter: false,
            pending_capacity: 64,
            budget: VerificationBudgetConfig::default(),
        }
    }
}

impl SecurityConfig {
    pub fn omission(&self) -> OmissionStrategy {
        let variant = match self.strategy {
            StrategyKind::AlwaysAttach => OmissionVariant::AlwaysAttach,
            StrategyKind::Periodic => OmissionVariant::Periodic { alpha: self.alpha },
            StrategyKind::NeighborTriggered => OmissionVariant::NeighborTriggered,
        };
        OmissionStrategy { variant, beta: self.beta }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudonymConfig {
    pub min_lifetime_ms: u64,
    pub max_lifetime_ms: u64,
    pub max_beacons: u64,
    /// Start every vehicle with a pseudonym of random age in
    /// `[0, max_lifetime_ms)`, so changes do not happen in lockstep.
    pub randomize_initial_age: bool,
}

impl Default for PseudonymConfig {
    fn default() -> Self {
        let p = PseudonymChangePolicy::default();
        PseudonymConfig {
            min_lifetime_ms: p.min_lifetime_ms,
            max_lifetime_ms: p.max_lifetime_ms,
            max_beacons: p.max_beacons,
            randomize_initial_age: true,
        }
    }
}

impl PseudonymConfig {
    pub fn policy(&self) -> PseudonymChangePolicy {
        PseudonymChangePolicy {
            min_lifetime_ms: self.min_lifetime_ms,
            max_lifetime_ms: self.max_lifetime_ms,
            max_beacons: self.max_beacons,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BrakingConfig {
    pub enabled: bool,
    pub trigger_time_s: f64,
    pub lead_deceleration_mps2: f64,
    /// Follower decelerations are drawn uniformly from this interval.
    pub follower_deceleration_mps2: [f64; 2],
    pub reaction_delay_ms: u64,
    /// Drivers react to a braking or stopped vehicle directly ahead once the
    /// gap is below this distance.
    pub sight_threshold_m: f64,
}

impl Default for BrakingConfig {
    fn default() -> Self {
        BrakingConfig {
            enabled: false,
            trigger_time_s: 30.0,
            lead_deceleration_mps2: 8.0,
            follower_deceleration_mps2: [7.0, 9.0],
            reaction_delay_ms: 1200,
            sight_threshold_m: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Beacons sent before this time do not count toward the certificate fraction.
    pub warmup_s: f64,
    pub queue_sample_ms: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { warmup_s: 5.0, queue_sample_ms: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub mobility_tick_ms: u64,
    /// Use the alternative frame encoding on every stack.
    pub trailer_frames: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig { mobility_tick_ms: 10, trailer_frames: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub scenario_id: String,
    pub seed: u64,
    pub duration_s: f64,
    pub traffic: TrafficConfig,
    pub radio: RadioConfig,
    pub security: SecurityConfig,
    pub pseudonym: PseudonymConfig,
    pub braking: BrakingConfig,
    pub metrics: MetricsConfig,
    pub sim: EngineConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scenario_id: "default".into(),
            seed: 1,
            duration_s: 60.0,
            traffic: TrafficConfig::default(),
            radio: RadioConfig::default(),
            security: SecurityConfig::default(),
            pseudonym: PseudonymConfig::default(),
            braking: BrakingConfig::default(),
            metrics: MetricsConfig::default(),
            sim: EngineConfig::default(),
        }
    }
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::invalid(field, reason)
}

/// Maps a component message such as "queue_capacity must be positive" to
/// the dotted field it names under `section`.
fn nested(section: &str, msg: &str) -> ConfigError {
    match msg.split_once(' ') {
        Some((field, reason)) => invalid(&format!("{section}.{field}"), reason),
        None => invalid(section, msg),
    }
}

fn positive_finite(field: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(field, "must be a positive number"))
    }
}

fn non_negative_finite(field: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(invalid(field, "must be a non-negative number"))
    }
}

impl ScenarioConfig {
    pub fn from_toml(src: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = parse_toml(src)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Fails only for values TOML cannot hold, such as a seed above `i64::MAX`.
    pub fn to_toml(&self) -> Result<String, ConfigError> {
        self.validate()?;
        toml::to_string(self).map_err(|e| invalid("scenario", e.to_string()))
    }

    pub fn duration_ms(&self) -> u64 {
        (self.duration_s * 1000.0).round() as u64
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seed > i64::MAX as u64 {
            return Err(invalid("seed", "must not exceed 9223372036854775807 (TOML integers are signed 64-bit)"));
        }
        let t = &self.traffic;
        if t.vehicle_count == 0 {
            return Err(invalid("traffic.vehicle_count", "must be at least 1"));
        }
        if t.lanes == 0 {
            return Err(invalid("traffic.lanes", "must be at least 1"));
        }
        if t.opposite_lanes >= t.lanes && t.opposite_lanes > 0 {
            return Err(invalid("traffic.opposite_lanes", "must leave at least one forward lane"));
        }
        if t.beacon_interval_ms == 0 {
            return Err(invalid("traffic.beacon_interval_ms", "must be positive"));
        }
        non_negative_finite("traffic.lane_spacing_m", t.lane_spacing_m)?;
        positive_finite("traffic.initial_headway_m", t.initial_headway_m)?;
        non_negative_finite("traffic.speed_mps", t.speed_mps)?;
        if let Some(s) = &t.lane_speeds_mps {
            if s.len() != t.lanes {
                return Err(invalid("traffic.lane_speeds_mps", "needs one entry per lane"));
            }
            s.iter().try_for_each(|v| non_negative_finite("traffic.lane_speeds_mps", *v))?;
        }
        if let Some(s) = &t.vehicle_speeds_mps {
            if s.len() != t.vehicle_count {
                return Err(invalid("traffic.vehicle_speeds_mps", "needs one entry per vehicle"));
            }
            s.iter().try_for_each(|v| non_negative_finite("traffic.vehicle_speeds_mps", *v))?;
        }
        positive_finite("duration_s", self.duration_s)?;

        let r = &self.radio;
        non_negative_finite("radio.tx_range_m", r.tx_range_m)?;
        if !(0.0..=1.0).contains(&r.base_loss) {
            return Err(invalid("radio.base_loss", "must lie in [0, 1]"));
        }
        non_negative_finite("radio.load_coefficient", r.load_coefficient)?;
        positive_finite("radio.capacity_bytes_per_window", r.capacity_bytes_per_window)?;
        if r.load_window_ms == 0 {
            return Err(invalid("radio.load_window_ms", "must be positive"));
        }

        let s = &self.security;
        s.omission().validate().map_err(|e| nested("security", e))?;
        s.budget.validate().map_err(|e| nested("security.budget", e))?;
        if s.freshness_ms == 0 {
            return Err(invalid("security.freshness_ms", "must be positive"));
        }
        self.pseudonym.policy().validate().map_err(|e| nested("pseudonym", e))?;
        if self.pseudonym.max_lifetime_ms == 0 {
            return Err(invalid("pseudonym.max_lifetime_ms", "must be positive"));
        }

        let b = &self.braking;
        non_negative_finite("braking.trigger_time_s", b.trigger_time_s)?;
        positive_finite("braking.lead_deceleration_mps2", b.lead_deceleration_mps2)?;
        let [lo, hi] = b.follower_deceleration_mps2;
        positive_finite("braking.follower_deceleration_mps2", lo)?;
        if !(hi.is_finite() && hi >= lo) {
            return Err(invalid("braking.follower_deceleration_mps2", "needs lower <= upper"));
        }
        non_negative_finite("braking.sight_threshold_m", b.sight_threshold_m)?;

        non_negative_finite("metrics.warmup_s", self.metrics.warmup_s)?;
        if self.metrics.queue_sample_ms == 0 {
            return Err(invalid("metrics.queue_sample_ms", "must be positive"));
        }
        if self.sim.mobility_tick_ms == 0 {
            return Err(invalid("sim.mobility_tick_ms", "must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ScenarioConfig::from_toml("").unwrap(), ScenarioConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = ScenarioConfig::default();
        c.security.strategy = StrategyKind::Periodic;
        c.traffic.lane_speeds_mps = Some(vec![30.0]);
        c.braking.enabled = true;
        assert_eq!(ScenarioConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn sections_parse() {
        let src = r#"
scenario_id = "platoon"
seed = 7
duration_s = 40

[traffic]
vehicle_count = 10
beacon_interval_ms = 200

[security]
mode = "unsecured-vc"
strategy = "periodic"
alpha = 5

[security.budget]
max_verifications_per_second = 30

[pseudonym]
min_lifetime_ms = 1000
max_lifetime_ms = 2000
max_beacons = 10

[braking]
enabled = true
follower_deceleration_mps2 = [8, 8]
"#;
        let c = ScenarioConfig::from_toml(src).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.traffic.beacon_interval_ms, 200);
        assert_eq!(c.security.mode, SecurityMode::UnsecuredVc);
        assert_eq!(c.security.omission().variant, OmissionVariant::Periodic { alpha: 5 });
        assert_eq!(c.security.budget.max_verifications_per_second, 30);
        assert_eq!(c.security.budget.queue_capacity, 16);
        assert_eq!(c.pseudonym.max_beacons, 10);
        assert_eq!(c.braking.follower_deceleration_mps2, [8.0, 8.0]);
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_problem() {
        let e = ScenarioConfig::from_toml("[traffic]\nvehicles = 3\n").unwrap_err();
        assert!(matches!(e, ConfigError::Parse { line: 2, .. }), "{e}");
        let e = ScenarioConfig::from_toml("[traffic]\nvehicle_count = 0\n").unwrap_err();
        assert!(e.to_string().contains("traffic.vehicle_count"), "{e}");
        let e = ScenarioConfig::from_toml("[security]\nstrategy = \"periodic\"\nalpha = 0\n").unwrap_err();
        assert!(e.to_string().contains("security.alpha"), "{e}");
        let e = ScenarioConfig::from_toml("[traffic]\nbeacon_interval_ms = 0\n").unwrap_err();
        assert!(e.to_string().contains("beacon_interval_ms"), "{e}");
        let e = ScenarioConfig::from_toml("duration_s = -1\n").unwrap_err();
        assert!(e.to_string().contains("duration_s"), "{e}");
    }
}
