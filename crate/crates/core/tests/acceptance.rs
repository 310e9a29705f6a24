//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 3 4`.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::collections::HashMap;
use std::time::Instant;
use vcsec_core::beaconing::{
    Beacon, BeaconingConfig, BeaconingEngine, OmissionStrategy, OmissionVariant, SECURED_BEACON_LEN,
    SECURED_BEACON_WITH_CERT_LEN,
};
use vcsec_core::crypto::{CryptoSuite, KeyPair};
use vcsec_core::hook::{
    Direction, Handler, HandlerError, HandlerRegistration, IlpPosition, Message, Outcome, ProtocolStack, TypeFilter,
    Verdict,
};
use vcsec_core::hsm::Hsm;
use vcsec_core::identity::{provision, CertificateAuthority, IdentityManager};
use vcsec_core::selftest::{self, CheckResult};
use vcsec_core::sim::{run, run_with_trace, Metrics, ScenarioConfig, SecurityMode, StrategyKind, TraceEvent};

struct Judgement {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Judgement {
    Judgement { pass, detail: detail.into() }
}

fn from_checks(checks: &[CheckResult]) -> Judgement {
    let detail = checks.iter().map(|c| format!("{}: {}/{} failed", c.name, c.failures, c.cases)).collect::<Vec<_>>();
    let first = checks.iter().find_map(|c| c.detail.clone().or(c.skipped.map(str::to_string)));
    let mut d = detail.join("; ");
    if let Some(f) = first {
        d.push_str(&format!(" [{f}]"));
    }
    verdict(checks.iter().all(CheckResult::passed), d)
}

fn platoon(vehicles: usize, interval_ms: u64, seed: u64, duration_s: f64) -> ScenarioConfig {
    let mut c = ScenarioConfig::default();
    c.scenario_id = "platoon".into();
    c.seed = seed;
    c.duration_s = duration_s;
    c.traffic.vehicle_count = vehicles;
    c.traffic.lanes = 1;
    c.traffic.beacon_interval_ms = interval_ms;
    c.security.mode = SecurityMode::SecuredVc;
    c.security.strategy = StrategyKind::NeighborTriggered;
    c.security.beta = 3;
    c.security.neighbor_expiry_ms = 3000;
    c
}

fn run_ok(cfg: &ScenarioConfig) -> Metrics {
    run(cfg).unwrap_or_else(|e| panic!("scenario {} (seed {}) failed: {e}", cfg.scenario_id, cfg.seed))
}

const SEEDS_10: std::ops::Range<u64> = 1..11;

/// Mean certificate fraction of a dense platoon stays at or below 10%.
fn omission_threshold() -> Judgement {
    let fractions: Vec<f64> =
        SEEDS_10.map(|s| run_ok(&platoon(50, 100, s, 120.0)).certificate_fraction).collect();
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    verdict(mean <= 0.10, format!("mean certificate_fraction {mean:.4} over {} seeds (bound 0.10)", fractions.len()))
}

/// Shorter intervals never attach certificates more often, seed by seed.
fn omission_trend() -> Judgement {
    let mut bad = Vec::new();
    let mut rows = Vec::new();
    for seed in SEEDS_10 {
        let f: Vec<f64> =
            [100, 200, 500].iter().map(|&i| run_ok(&platoon(50, i, seed, 120.0)).certificate_fraction).collect();
        if !(f[0] <= f[1] && f[1] <= f[2]) {
            bad.push(seed);
        }
        rows.push(f);
    }
    let mean = |k: usize| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64;
    verdict(
        bad.is_empty(),
        format!(
            "mean fraction 100ms {:.4}, 200ms {:.4}, 500ms {:.4}; seeds violating order: {bad:?}",
            mean(0),
            mean(1),
            mean(2)
        ),
    )
}

fn braking_scenario(mode: SecurityMode, seed: u64) -> ScenarioConfig {
    let mut c = platoon(10, 100, seed, 45.0);
    c.scenario_id = "emergency-braking".into();
    c.traffic.initial_headway_m = 40.0;
    c.traffic.speed_mps = 30.0;
    c.security.mode = mode;
    c.security.budget.max_verifications_per_second = 50;
    c.braking.enabled = true;
    c.braking.trigger_time_s = 30.0;
    c.braking.lead_deceleration_mps2 = 8.0;
    c.braking.reaction_delay_ms = 1200;
    c.braking.sight_threshold_m = 50.0;
    c
}

/// Secured warnings prevent about as many crashes as unsecured ones, and
/// both beat drivers relying on sight alone.
fn braking_parity() -> Judgement {
    let total = |mode| (0..20u64).map(|s| run_ok(&braking_scenario(mode, s)).crashes).sum::<usize>();
    let no_vc = total(SecurityMode::NoVc);
    let unsecured = total(SecurityMode::UnsecuredVc);
    let secured = total(SecurityMode::SecuredVc);
    verdict(
        secured <= unsecured + 1 && no_vc > unsecured && no_vc > secured,
        format!("crashes over 20 seeds: no-vc {no_vc}, unsecured {unsecured}, secured {secured}"),
    )
}

/// 80 mutually reachable vehicles saturate a 50/s verification budget.
fn budget_saturation() -> Judgement {
    let mut c = platoon(80, 100, 7, 20.0);
    c.scenario_id = "saturation".into();
    c.traffic.lanes = 4;
    c.traffic.initial_headway_m = 10.0;
    c.security.budget.max_verifications_per_second = 50;
    c.metrics.queue_sample_ms = 5;
    let span = (c.traffic.vehicle_count / c.traffic.lanes - 1) as f64 * c.traffic.initial_headway_m;
    let diag = span.hypot((c.traffic.lanes - 1) as f64 * c.traffic.lane_spacing_m);
    if diag >= c.radio.tx_range_m {
        return verdict(false, format!("layout spans {diag:.1} m, beyond radio range"));
    }
    let m = run_ok(&c);
    let cap = c.security.budget.queue_capacity;
    let q = &m.queue_depth;
    let first_evict = q.iter().position(|s| s.evictions > 0);
    let Some(k) = first_evict else {
        return verdict(false, format!("rate {:.3}/s, queue never evicted", m.verification_rate_per_s));
    };
    let growing = q[..=k].windows(2).all(|w| w[0].max_depth <= w[1].max_depth) && q[k].max_depth == cap;
    let evicting = q[k..].windows(2).all(|w| w[0].evictions <= w[1].evictions)
        && q.last().is_some_and(|s| s.evictions > q[k].evictions);
    let rate_ok = (m.verification_rate_per_s - 50.0).abs() <= 1.0;
    let depths: Vec<usize> = q[..=k].iter().map(|s| s.max_depth).collect();
    verdict(
        rate_ok && growing && evicting,
        format!(
            "rate {:.3}/s; queue depth {depths:?} until first eviction at {} ms; {} evictions by {} s",
            m.verification_rate_per_s,
            q[k].t_ms,
            q.last().map_or(0, |s| s.evictions),
            c.duration_s
        ),
    )
}

fn hsm_api() -> Judgement {
    let (integrity, secrecy) = selftest::hsm_api_fuzz(10_000, 0xacce97);
    from_checks(&[integrity, secrecy])
}

fn crypto_correctness() -> Judgement {
    from_checks(&[selftest::sign_verify(1000, 0x516e), selftest::ecies_round_trip(1000, 0xec1e5)])
}

/// Handler behaviour described as data, so the reference can replay it.
#[derive(Debug, Clone, Copy)]
enum Act {
    Pass,
    Append(u8),
    Drop,
    Fail,
}

#[derive(Debug, Clone)]
struct Spec {
    id: String,
    tags: Option<Vec<u16>>,
    direction: Option<Direction>,
    priority: i32,
    act: Act,
}

impl Spec {
    fn matches(&self, tag: u16, d: Direction) -> bool {
        self.tags.as_ref().map_or(true, |t| t.contains(&tag)) && self.direction.map_or(true, |x| x == d)
    }
}

struct Scripted(Act);

impl Handler for Scripted {
    fn on_event(&mut self, m: &mut Message, _: Direction) -> Result<Verdict, HandlerError> {
        match self.0 {
            Act::Pass => {
                // edits under PassUnchanged must not leak
                m.body.push(0xee);
                Ok(Verdict::PassUnchanged)
            }
            Act::Append(b) => {
                m.body.push(b);
                Ok(Verdict::PassModified)
            }
            Act::Drop => Ok(Verdict::Drop),
            Act::Fail => Err(HandlerError("scripted failure".into())),
        }
    }
}

/// Straight-line dispatcher: stable sort by priority, then fold.
fn reference(specs: &[Spec], msg: &Message, d: Direction) -> Outcome {
    let mut order: Vec<&Spec> = specs.iter().collect();
    order.sort_by_key(|s| s.priority);
    let mut cur = msg.clone();
    for s in order {
        if !s.matches(cur.type_tag, d) {
            continue;
        }
        match s.act {
            Act::Pass => {}
            Act::Append(b) => cur.body.push(b),
            Act::Drop | Act::Fail => return Outcome::Dropped,
        }
    }
    Outcome::Delivered(cur)
}

fn hook_transparency() -> Judgement {
    let mut rng = ChaCha20Rng::seed_from_u64(0x400c);
    let dirs = [Direction::Up, Direction::Down];
    let mut identity_cases = 0;
    let mut identity_bad = 0;
    let mut stack = ProtocolStack::new();
    for _ in 0..1000 {
        let mut body = vec![0u8; rng.gen_range(0..300)];
        rng.fill_bytes(&mut body);
        let m = Message::new(rng.gen(), body);
        for ilp in IlpPosition::ALL {
            for d in dirs {
                identity_cases += 1;
                if stack.dispatch(ilp, m.clone(), d) != Ok(Outcome::Delivered(m.clone())) {
                    identity_bad += 1;
                }
            }
        }
    }

    let tags = [1u16, 2, 3];
    let mut oracle_cases = 0;
    let mut oracle_bad = Vec::new();
    for case in 0..2000 {
        let specs: Vec<Spec> = (0..rng.gen_range(0..8))
            .map(|i| Spec {
                id: format!("h{i}"),
                tags: rng.gen_bool(0.5).then(|| {
                    let n = rng.gen_range(1..3);
                    tags.choose_multiple(&mut rng, n).copied().collect()
                }),
                direction: [None, Some(Direction::Up), Some(Direction::Down)][rng.gen_range(0..3)],
                priority: rng.gen_range(-2..3),
                act: match rng.gen_range(0..10) {
                    0..=3 => Act::Pass,
                    4..=7 => Act::Append(rng.gen()),
                    8 => Act::Drop,
                    _ => Act::Fail,
                },
            })
            .collect();
        let ilp = *IlpPosition::ALL.choose(&mut rng).expect("non-empty");
        let mut stack = ProtocolStack::new();
        for s in &specs {
            let types = match &s.tags {
                None => TypeFilter::Any,
                Some(t) => TypeFilter::Tags(t.iter().copied().collect()),
            };
            stack
                .register_handler(ilp, HandlerRegistration::new(s.id.clone(), types, s.direction, s.priority), Box::new(Scripted(s.act)))
                .expect("unique ids");
        }
        let m = Message::new(*tags.choose(&mut rng).expect("non-empty"), vec![rng.gen(); rng.gen_range(0..16)]);
        let d = *dirs.choose(&mut rng).expect("non-empty");
        oracle_cases += 1;
        let got = stack.dispatch(ilp, m.clone(), d).expect("no reinsert in scripted handlers");
        if got != reference(&specs, &m, d) {
            oracle_bad.push(case);
        }
    }
    verdict(
        identity_bad == 0 && oracle_bad.is_empty(),
        format!(
            "identity {identity_bad}/{identity_cases} mismatches; reference dispatcher {}/{oracle_cases} mismatches",
            oracle_bad.len()
        ),
    )
}

/// Independent frame parser: simulator framing puts 8 bytes before the
/// message; the certificate presence flag follows tag, signer, beacon body
/// and signature block.
const FRAME_HEADER: usize = 6 + 2;
const FLAG_OFFSET: usize = 2 + 4 + 40 + 8 + 56;

fn overhead_accounting() -> Judgement {
    let mut notes = Vec::new();
    let layout_ok = SECURED_BEACON_LEN == FLAG_OFFSET + 1 && SECURED_BEACON_WITH_CERT_LEN == SECURED_BEACON_LEN + 134;
    notes.push(format!("declared sizes {SECURED_BEACON_LEN}/{SECURED_BEACON_WITH_CERT_LEN}"));

    // Real beacons from a real engine, with and without the certificate.
    let ca = CertificateAuthority::generate(1, CryptoSuite::EcdsaP224, 11);
    let root = KeyPair::generate(CryptoSuite::EcdsaP224, &mut ChaCha20Rng::seed_from_u64(12));
    let hsm = Hsm::factory_provision(root.public_key()).seed(13).build();
    let mut ids = IdentityManager::new(provision(&hsm, &ca, 1, 1_000_000, 0).expect("provisioned"), 14);
    ids.activate_next(0).expect("pool is not empty");
    let mut cfg = BeaconingConfig::new(ca.anchor());
    cfg.omission = OmissionStrategy { variant: OmissionVariant::Periodic { alpha: 2 }, beta: 0 };
    let mut engine = BeaconingEngine::new(cfg);
    let beacon = Beacon { position: (1.0, 2.0), velocity: 30.0, heading: 0.0, generation_time: 5, payload: 0 };
    let sizes: Vec<(bool, usize)> = (0..4)
        .map(|_| {
            let sb = engine.make_beacon(&hsm, &mut ids, beacon, 10).expect("signs");
            (sb.certificate.is_some(), sb.to_bytes().len())
        })
        .collect();
    let built_ok = sizes
        .iter()
        .all(|&(c, n)| n == if c { SECURED_BEACON_WITH_CERT_LEN } else { SECURED_BEACON_LEN })
        && sizes.iter().any(|s| s.0)
        && sizes.iter().any(|s| !s.0);
    notes.push(format!("built {sizes:?}"));

    let mut audit_ok = true;
    for seed in [1u64, 2, 3] {
        let cfg = platoon(20, 100, seed, 30.0);
        let out = run_with_trace(&cfg).expect("runs");
        let warmup = (cfg.metrics.warmup_s * 1000.0).round() as u64;
        let (mut sent, mut with_cert, mut malformed) = (0u64, 0u64, 0u64);
        for e in &out.trace {
            let TraceEvent::Tx { t, frame, .. } = e else { continue };
            let flag = frame.get(FRAME_HEADER + FLAG_OFFSET).copied();
            let consistent = match (frame.len() - FRAME_HEADER, flag) {
                (n, Some(0)) => n == SECURED_BEACON_LEN,
                (n, Some(1)) => n == SECURED_BEACON_WITH_CERT_LEN,
                _ => false,
            };
            if !consistent {
                malformed += 1;
            }
            if *t >= warmup {
                sent += 1;
                with_cert += u64::from(flag == Some(1));
            }
        }
        let fraction = with_cert as f64 / sent as f64;
        let m = &out.metrics;
        let same = sent == m.beacons_sent && with_cert == m.beacons_with_certificate && fraction == m.certificate_fraction;
        audit_ok &= same && malformed == 0;
        notes.push(format!(
            "seed {seed}: audited {with_cert}/{sent} = {fraction:.6}, reported {:.6}, {malformed} malformed",
            m.certificate_fraction
        ));
    }
    verdict(layout_ok && built_ok && audit_ok, notes.join("; "))
}

fn gateway() -> Judgement {
    from_checks(&selftest::gateway_suite(10_000, 0x6a7e))
}

type Criterion = (u32, &'static str, fn() -> Judgement);

const CRITERIA: [Criterion; 9] = [
    (1, "certificate omission threshold", omission_threshold),
    (2, "certificate fraction vs beacon interval", omission_trend),
    (3, "emergency braking crash parity", braking_parity),
    (4, "verification budget saturation", budget_saturation),
    (5, "HSM API root integrity and key secrecy", hsm_api),
    (6, "ECDSA and ECIES correctness", crypto_correctness),
    (7, "hook framework transparency", hook_transparency),
    (8, "overhead accounting", overhead_accounting),
    (9, "gateway suite", gateway),
];

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut results: HashMap<u32, bool> = HashMap::new();
    for (n, name, check) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        println!(
            "criterion {n} [{}] {name}: {} ({:.1} s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
        results.insert(n, v.pass);
    }
    let failed: Vec<u32> = CRITERIA.iter().map(|c| c.0).filter(|n| results.get(n) == Some(&false)).collect();
    println!("acceptance: {} run, {} failed {failed:?}", results.len(), failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
