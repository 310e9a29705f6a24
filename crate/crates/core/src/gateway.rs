//! In-vehicle gateway: a default-deny rule table mediating application access
//! to vehicle resources, and a range/transition anomaly detector that can
//! push deny rules into that table.

use crate::config::{parse_toml, ConfigError};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::RwLock;
use thiserror::Error;

/// Matches any application or resource in a rule.
pub const WILDCARD: &str = "*";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    Allow,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RuleOrigin {
    /// Sorted first: detector rules form their own band above all static rules.
    IdsInjected,
    Static,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FirewallRule {
    pub app_id: String,
    pub resource_id: String,
    pub action: Action,
    pub origin: RuleOrigin,
    /// Lower value wins within a band.
    pub priority: i32,
}

impl FirewallRule {
    pub fn allow(app: &str, resource: &str, priority: i32) -> Self {
        Self::new_static(app, resource, Action::Allow, priority)
    }

    pub fn deny(app: &str, resource: &str, priority: i32) -> Self {
        Self::new_static(app, resource, Action::Deny, priority)
    }

    fn new_static(app: &str, resource: &str, action: Action, priority: i32) -> Self {
        FirewallRule {
            app_id: app.to_string(),
            resource_id: resource.to_string(),
            action,
            origin: RuleOrigin::Static,
            priority,
        }
    }

    fn matches(&self, app: &str, resource: &str) -> bool {
        (self.app_id == WILDCARD || self.app_id == app) && (self.resource_id == WILDCARD || self.resource_id == resource)
    }

    /// Precedence key: band, then priority, then Deny before Allow.
    fn rank(&self) -> (RuleOrigin, i32, bool) {
        (self.origin, self.priority, self.action == Action::Allow)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("rule ({0}, {1}) at priority {2} already exists")]
    DuplicateRule(String, String, i32),
}

/// Rule table. Mutations are serialized; lookups may run concurrently.
#[derive(Debug, Default)]
pub struct Firewall {
    rules: RwLock<Vec<FirewallRule>>,
}

impl Clone for Firewall {
    fn clone(&self) -> Self {
        Firewall { rules: RwLock::new(self.rules()) }
    }
}

impl Firewall {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_rules(rules: impl IntoIterator<Item = FirewallRule>) -> Result<Self, GatewayError> {
        let fw = Firewall::new();
        for r in rules {
            fw.add_rule(r)?;
        }
        Ok(fw)
    }

    pub fn add_rule(&self, rule: FirewallRule) -> Result<(), GatewayError> {
        let mut rules = self.rules.write().expect("rule table lock");
        if rules.iter().any(|r| {
            r.app_id == rule.app_id && r.resource_id == rule.resource_id && r.priority == rule.priority && r.origin == rule.origin
        }) {
            return Err(GatewayError::DuplicateRule(rule.app_id, rule.resource_id, rule.priority));
        }
        rules.push(rule);
        Ok(())
    }

    pub fn check_access(&self, app_id: &str, resource_id: &str) -> Action {
        let rules = self.rules.read().expect("rule table lock");
        rules
            .iter()
            .filter(|r| r.matches(app_id, resource_id))
            .min_by_key(|r| r.rank())
            .map_or(Action::Deny, |r| r.action)
    }

    /// Adds a detector-originated deny for `(app_id, resource_id)` unless one
    /// is already present, and returns the effective rule.
    pub fn inject_deny(&self, app_id: &str, resource_id: &str) -> FirewallRule {
        let mut rules = self.rules.write().expect("rule table lock");
        if let Some(r) = rules
            .iter()
            .find(|r| r.origin == RuleOrigin::IdsInjected && r.app_id == app_id && r.resource_id == resource_id)
        {
            return r.clone();
        }
        let rule = FirewallRule {
            app_id: app_id.to_string(),
            resource_id: resource_id.to_string(),
            action: Action::Deny,
            origin: RuleOrigin::IdsInjected,
            priority: 0,
        };
        rules.push(rule.clone());
        rule
    }

    /// Removes every detector-originated rule.
    pub fn clear_injected(&self) -> usize {
        let mut rules = self.rules.write().expect("rule table lock");
        let before = rules.len();
        rules.retain(|r| r.origin != RuleOrigin::IdsInjected);
        before - rules.len()
    }

    pub fn clear(&self) {
        self.rules.write().expect("rule table lock").clear();
    }

    pub fn rules(&self) -> Vec<FirewallRule> {
        self.rules.read().expect("rule table lock").clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SignalValue {
    Number(f64),
    State(String),
}

impl From<f64> for SignalValue {
    fn from(v: f64) -> Self {
        SignalValue::Number(v)
    }
}

impl From<bool> for SignalValue {
    fn from(v: bool) -> Self {
        SignalValue::State(v.to_string())
    }
}

impl From<&str> for SignalValue {
    fn from(v: &str) -> Self {
        SignalValue::State(v.to_string())
    }
}

impl fmt::Display for SignalValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SignalValue::Number(v) => write!(f, "{v}"),
            SignalValue::State(s) => f.write_str(s),
        }
    }
}

/// Allowed behavior of one signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum SignalSpec {
    Range {
        min: f64,
        max: f64,
    },
    /// Remaining in the same state is always allowed.
    States {
        states: BTreeSet<String>,
        #[serde(default)]
        transitions: Vec<(String, String)>,
        #[serde(default)]
        initial: Option<String>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BehaviorSpec {
    pub signals: BTreeMap<String, SignalSpec>,
}

impl BehaviorSpec {
    pub fn range(mut self, signal: &str, min: f64, max: f64) -> Self {
        self.signals.insert(signal.to_string(), SignalSpec::Range { min, max });
        self
    }

    pub fn states(mut self, signal: &str, states: &[&str], transitions: &[(&str, &str)], initial: Option<&str>) -> Self {
        self.signals.insert(
            signal.to_string(),
            SignalSpec::States {
                states: states.iter().map(|s| s.to_string()).collect(),
                transitions: transitions.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
                initial: initial.map(str::to_string),
            },
        );
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, spec) in &self.signals {
            let field = format!("signal.{name}");
            match spec {
                SignalSpec::Range { min, max } => {
                    if !(min.is_finite() && max.is_finite() && min <= max) {
                        return Err(ConfigError::invalid(field, "range must be finite and non-empty"));
                    }
                }
                SignalSpec::States { states, transitions, initial } => {
                    if states.is_empty() {
                        return Err(ConfigError::invalid(field, "no states declared"));
                    }
                    let undeclared = transitions
                        .iter()
                        .flat_map(|(a, b)| [a, b])
                        .chain(initial.iter())
                        .find(|s| !states.contains(*s));
                    if let Some(s) = undeclared {
                        return Err(ConfigError::invalid(field, format!("undeclared state `{s}`")));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InVehicleEvent {
    /// Application or bus identifier.
    pub source: String,
    pub signal: String,
    pub value: SignalValue,
    pub timestamp: u64,
}

impl InVehicleEvent {
    pub fn new(source: &str, signal: &str, value: impl Into<SignalValue>, timestamp: u64) -> Self {
        InVehicleEvent { source: source.to_string(), signal: signal.to_string(), value: value.into(), timestamp }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum AnomalyKind {
    UnknownSignal,
    TypeMismatch,
    OutOfRange,
    UnknownState,
    ForbiddenTransition,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Anomaly {
    pub signal: String,
    pub kind: AnomalyKind,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdsVerdict {
    Normal,
    Anomaly(Anomaly),
}

/// Anomaly detector over a [`BehaviorSpec`]. The last accepted state of each
/// state signal is remembered; anomalous events do not move it.
#[derive(Debug, Clone, Default)]
pub struct Ids {
    last_state: BTreeMap<String, String>,
}

impl Ids {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, event: &InVehicleEvent, spec: &BehaviorSpec) -> IdsVerdict {
        let anomaly = |kind, description: String| {
            IdsVerdict::Anomaly(Anomaly { signal: event.signal.clone(), kind, description })
        };
        let Some(sig) = spec.signals.get(&event.signal) else {
            return anomaly(AnomalyKind::UnknownSignal, format!("undeclared signal `{}`", event.signal));
        };
        match (sig, &event.value) {
            (SignalSpec::Range { min, max }, SignalValue::Number(v)) => {
                if *v >= *min && *v <= *max {
                    IdsVerdict::Normal
                } else {
                    anomaly(AnomalyKind::OutOfRange, format!("{v} outside [{min}, {max}]"))
                }
            }
            (SignalSpec::States { states, transitions, initial }, SignalValue::State(s)) => {
                if !states.contains(s) {
                    return anomaly(AnomalyKind::UnknownState, format!("undeclared state `{s}`"));
                }
                let from = self.last_state.get(&event.signal).or(initial.as_ref());
                let allowed = match from {
                    None => true,
                    Some(f) => f == s || transitions.iter().any(|(a, b)| a == f && b == s),
                };
                if allowed {
                    self.last_state.insert(event.signal.clone(), s.clone());
                    IdsVerdict::Normal
                } else {
                    anomaly(
                        AnomalyKind::ForbiddenTransition,
                        format!("{} -> {s} not allowed", from.expect("checked")),
                    )
                }
            }
            (_, v) => anomaly(AnomalyKind::TypeMismatch, format!("value `{v}` has the wrong type")),
        }
    }

    pub fn reset(&mut self) {
        self.last_state.clear();
    }
}

/// Firewall plus detector, as deployed on the gateway.
#[derive(Debug, Default)]
pub struct Gateway {
    pub firewall: Firewall,
    pub spec: BehaviorSpec,
    ids: Ids,
}

impl Gateway {
    pub fn new(firewall: Firewall, spec: BehaviorSpec) -> Self {
        Gateway { firewall, spec, ids: Ids::new() }
    }

    pub fn from_config(cfg: GatewayConfig) -> Result<Self, ConfigError> {
        cfg.behavior.validate()?;
        let firewall = Firewall::with_rules(cfg.rules.into_iter().map(|r| FirewallRule {
            app_id: r.app,
            resource_id: r.resource,
            action: r.action,
            origin: RuleOrigin::Static,
            priority: r.priority,
        }))
        .map_err(|e| ConfigError::invalid("rule", e.to_string()))?;
        Ok(Gateway::new(firewall, cfg.behavior))
    }

    pub fn check_access(&self, app_id: &str, resource_id: &str) -> Action {
        self.firewall.check_access(app_id, resource_id)
    }

    pub fn ids_observe(&mut self, event: &InVehicleEvent) -> IdsVerdict {
        self.ids.observe(event, &self.spec)
    }

    /// Denies the offending application access to the anomalous signal.
    pub fn ids_react(&self, anomaly: &Anomaly, offending_app_id: &str) -> FirewallRule {
        self.firewall.inject_deny(offending_app_id, &anomaly.signal)
    }

    /// Observes an event and, on anomaly, blocks its source.
    pub fn process(&mut self, event: &InVehicleEvent) -> IdsVerdict {
        let verdict = self.ids_observe(event);
        if let IdsVerdict::Anomaly(a) = &verdict {
            self.ids_react(a, &event.source);
        }
        verdict
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleConfig {
    pub app: String,
    pub resource: String,
    pub action: Action,
    #[serde(default)]
    pub priority: i32,
}

/// Gateway configuration file:
///
/// ```toml
/// [[rule]]
/// app = "nav"
/// resource = "wheel_rotation"
/// action = "allow"
/// priority = 10
///
/// [signal.speed]
/// min = 0.0
/// max = 90.0
///
/// [signal.airbag_deployed]
/// states = ["false", "true"]
/// transitions = [["false", "true"]]
/// initial = "false"
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    #[serde(default, rename = "rule")]
    pub rules: Vec<RuleConfig>,
    #[serde(default, rename = "signal")]
    pub behavior: BehaviorSpec,
}

impl GatewayConfig {
    pub fn from_toml(src: &str) -> Result<Self, ConfigError> {
        let cfg: GatewayConfig = parse_toml(src)?;
        cfg.behavior.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> BehaviorSpec {
        BehaviorSpec::default().range("speed", 0.0, 90.0).states(
            "airbag_deployed",
            &["false", "true"],
            &[("false", "true")],
            Some("false"),
        )
    }

    #[test]
    fn empty_table_denies() {
        assert_eq!(Firewall::new().check_access("nav", "wheel_rotation"), Action::Deny);
    }

    #[test]
    fn static_allow() {
        let fw = Firewall::with_rules([FirewallRule::allow("nav", "wheel_rotation", 10)]).unwrap();
        assert_eq!(fw.check_access("nav", "wheel_rotation"), Action::Allow);
        assert_eq!(fw.check_access("nav", "brakes"), Action::Deny);
        assert_eq!(fw.check_access("radio", "wheel_rotation"), Action::Deny);
    }

    #[test]
    fn duplicate_triple_rejected() {
        let fw = Firewall::new();
        fw.add_rule(FirewallRule::allow("a", "r", 1)).unwrap();
        assert!(fw.add_rule(FirewallRule::deny("a", "r", 1)).is_err());
        fw.add_rule(FirewallRule::deny("a", "r", 2)).unwrap();
    }

    #[test]
    fn ids_rule_wins_over_static_in_every_order() {
        let ids_rule = FirewallRule {
            app_id: "nav".into(),
            resource_id: "wheel_rotation".into(),
            action: Action::Deny,
            origin: RuleOrigin::IdsInjected,
            priority: 1,
        };
        for static_prio in [-100, 1, 10] {
            let allow = FirewallRule::allow("nav", "wheel_rotation", static_prio);
            for order in [[allow.clone(), ids_rule.clone()], [ids_rule.clone(), allow.clone()]] {
                let fw = Firewall::with_rules(order).unwrap();
                assert_eq!(fw.check_access("nav", "wheel_rotation"), Action::Deny);
            }
        }
    }

    #[test]
    fn lower_priority_value_decides_and_deny_breaks_ties() {
        let fw = Firewall::with_rules([
            FirewallRule::deny("*", "*", 100),
            FirewallRule::allow("nav", "*", 5),
            FirewallRule::deny("nav", "brakes", 5),
        ])
        .unwrap();
        assert_eq!(fw.check_access("nav", "gps"), Action::Allow);
        assert_eq!(fw.check_access("nav", "brakes"), Action::Deny);
        assert_eq!(fw.check_access("radio", "gps"), Action::Deny);
    }

    #[test]
    fn observe_ranges_and_transitions() {
        let s = spec();
        let mut ids = Ids::new();
        assert_eq!(ids.observe(&InVehicleEvent::new("ecu", "speed", 30.0, 0), &s), IdsVerdict::Normal);
        assert!(matches!(ids.observe(&InVehicleEvent::new("ecu", "speed", 90.5, 0), &s), IdsVerdict::Anomaly(_)));
        assert_eq!(ids.observe(&InVehicleEvent::new("ecu", "airbag_deployed", true, 1), &s), IdsVerdict::Normal);
        match ids.observe(&InVehicleEvent::new("ecu", "airbag_deployed", false, 2), &s) {
            IdsVerdict::Anomaly(a) => assert_eq!(a.kind, AnomalyKind::ForbiddenTransition),
            v => panic!("{v:?}"),
        }
        match ids.observe(&InVehicleEvent::new("ecu", "horn", 1.0, 3), &s) {
            IdsVerdict::Anomaly(a) => assert_eq!(a.kind, AnomalyKind::UnknownSignal),
            v => panic!("{v:?}"),
        }
        match ids.observe(&InVehicleEvent::new("ecu", "speed", "fast", 3), &s) {
            IdsVerdict::Anomaly(a) => assert_eq!(a.kind, AnomalyKind::TypeMismatch),
            v => panic!("{v:?}"),
        }
    }

    #[test]
    fn initial_state_constrains_first_event() {
        let s = spec();
        let mut ids = Ids::new();
        assert_eq!(ids.observe(&InVehicleEvent::new("ecu", "airbag_deployed", false, 0), &s), IdsVerdict::Normal);
        let s2 = BehaviorSpec::default().states("gear", &["p", "d"], &[("p", "d")], Some("d"));
        assert!(matches!(ids.observe(&InVehicleEvent::new("ecu", "gear", "p", 0), &s2), IdsVerdict::Anomaly(_)));
    }

    #[test]
    fn reaction_flips_access_and_is_idempotent() {
        let fw = Firewall::with_rules([FirewallRule::allow("nav", "speed", 10)]).unwrap();
        let mut gw = Gateway::new(fw, spec());
        assert_eq!(gw.check_access("nav", "speed"), Action::Allow);
        let ev = InVehicleEvent::new("nav", "speed", 500.0, 0);
        let IdsVerdict::Anomaly(a) = gw.ids_observe(&ev) else { panic!() };
        let r1 = gw.ids_react(&a, "nav");
        let r2 = gw.ids_react(&a, "nav");
        assert_eq!(r1, r2);
        assert_eq!(r1.origin, RuleOrigin::IdsInjected);
        assert_eq!(gw.firewall.rules().len(), 2);
        assert_eq!(gw.check_access("nav", "speed"), Action::Deny);
        // persists through later normal traffic
        gw.process(&InVehicleEvent::new("nav", "speed", 10.0, 1));
        assert_eq!(gw.check_access("nav", "speed"), Action::Deny);
        assert_eq!(gw.firewall.clear_injected(), 1);
        assert_eq!(gw.check_access("nav", "speed"), Action::Allow);
    }

    #[test]
    fn config_round_trip() {
        let src = r#"
[[rule]]
app = "nav"
resource = "wheel_rotation"
action = "allow"
priority = 10

[signal.speed]
min = 0.0
max = 90.0

[signal.airbag_deployed]
states = ["false", "true"]
transitions = [["false", "true"]]
initial = "false"
"#;
        let cfg = GatewayConfig::from_toml(src).unwrap();
        assert_eq!(cfg.behavior, spec());
        let gw = Gateway::from_config(cfg).unwrap();
        assert_eq!(gw.check_access("nav", "wheel_rotation"), Action::Allow);
    }

    #[test]
    fn config_errors_are_positioned() {
        let err = GatewayConfig::from_toml("[[rule]]\napp = \"a\"\nresource = \"b\"\naction = \"maybe\"\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 4, .. }), "{err}");
        let err = GatewayConfig::from_toml("[signal.x]\nmin = 5.0\nmax = 1.0\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { .. }), "{err}");
        let err = GatewayConfig::from_toml("[signal.g]\nstates = [\"a\"]\ntransitions = [[\"a\", \"b\"]]\n").unwrap_err();
        assert!(err.to_string().contains("undeclared state"), "{err}");
        assert!(GatewayConfig::from_toml("[signal.x]\nmin = 1.0\nmax = 2.0\nunit = 3\n").is_err());
    }
}
