use super::{decide_attach, Beacon, NeighborTable, OmissionStrategy, SecuredBeacon};
use crate::crypto::CryptoSuite;
use crate::hsm::{Hsm, HsmError, Timestamp};
use crate::identity::{CompactCertificate, IdentityManager, PseudonymChangeEvent, PseudonymId, TrustAnchor};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use thiserror::Error;

/// Order in which queued beacons reach the verification CPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scheduling {
    /// Oldest first; a full queue drops its oldest entry.
    Fifo,
    /// Emergency beacons first, then certificate-carrying beacons from
    /// signers not yet trusted, then the rest; oldest first within a class.
    /// A full queue drops the oldest entry of the least urgent class.
    #[default]
    Priority,
}

/// Verification CPU budget.
///
/// Each verification unit (one ECDSA verify) occupies the CPU for
/// `1 / max_verifications_per_second` seconds, so no one-second window ever
/// holds more than `max_verifications_per_second` units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerificationBudgetConfig {
    pub max_verifications_per_second: u32,
    pub queue_capacity: usize,
    pub scheduling: Scheduling,
}

impl VerificationBudgetConfig {
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.max_verifications_per_second == 0 {
            return Err("max_verifications_per_second must be positive");
        }
        if self.max_verifications_per_second > 1_000_000 {
            return Err("max_verifications_per_second must not exceed 1e6");
        }
        if self.queue_capacity == 0 {
            return Err("queue_capacity must be positive");
        }
        Ok(())
    }

    /// CPU time of one unit, in microseconds.
    pub fn unit_cost_us(&self) -> u64 {
        1_000_000 / u64::from(self.max_verifications_per_second.max(1))
    }
}

impl Default for VerificationBudgetConfig {
    fn default() -> Self {
        VerificationBudgetConfig { max_verifications_per_second: 50, queue_capacity: 16, scheduling: Scheduling::Priority }
    }
}

#[derive(Debug, Clone)]
pub struct BeaconingConfig {
    pub suite: CryptoSuite,
    pub anchor: TrustAnchor,
    pub omission: OmissionStrategy,
    pub budget: VerificationBudgetConfig,
    pub neighbor_expiry_ms: u64,
    pub freshness_ms: u64,
    pub opposite_flow_filter: bool,
    /// Beacons buffered per pseudonym whose certificate is still unknown.
    pub pending_capacity: usize,
    /// Keep a [`VerificationEvent`] log for auditing.
    pub record_events: bool,
}

impl BeaconingConfig {
    pub fn new(anchor: TrustAnchor) -> Self {
        BeaconingConfig {
            suite: anchor.suite,
            anchor,
            omission: OmissionStrategy::default(),
            budget: VerificationBudgetConfig::default(),
            neighbor_expiry_ms: 3000,
            freshness_ms: 1000,
            opposite_flow_filter: false,
            pending_capacity: 64,
            record_events: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum BeaconError {
    #[error("no active pseudonym")]
    NoActivePseudonym,
    #[error(transparent)]
    Hsm(#[from] HsmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PendingReason {
    /// Signer unknown and no certificate yet.
    AwaitingCertificate,
    /// Queued for the verification CPU.
    AwaitingVerification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DiscardReason {
    Malformed,
    Stale,
    OppositeFlow,
    BadSignature,
    BadCertificate,
    /// Pushed out of a full verification queue.
    Evicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReceiveDisposition {
    DeliveredTrusted,
    Pending(PendingReason),
    Discarded(DiscardReason),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceiveContext {
    /// Own heading in radians, for the opposite-flow filter.
    pub own_heading: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VerificationOutcome {
    Verified,
    BadSignature,
    BadCertificate,
}

/// One verification job as executed by the CPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerificationEvent {
    pub start_us: u64,
    /// Unit `k` runs at `start_us + k * unit_cost_us`.
    pub units: u32,
    pub signer: PseudonymId,
    pub certificate_checked: bool,
    pub outcome: VerificationOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrustedBeacon {
    pub beacon: Beacon,
    pub signer: PseudonymId,
    pub received_at: Timestamp,
    pub delivered_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Completion {
    pub seq: u64,
    pub signer: PseudonymId,
    pub disposition: ReceiveDisposition,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BeaconingStats {
    pub beacons_signed: u64,
    pub certificates_attached: u64,
    pub received: u64,
    pub signature_checks: u64,
    pub certificate_checks: u64,
    /// Beacons verified with a cached certificate.
    pub cache_hits: u64,
    pub evictions: u64,
    pub stale_discards: u64,
    pub opposite_flow_discards: u64,
    pub malformed: u64,
    pub bad_signatures: u64,
    pub bad_certificates: u64,
    pub pending_overflow: u64,
    pub delivered: u64,
    /// Per neighbor pseudonym: first reception to first trusted delivery, ms.
    pub time_to_trust_ms: Vec<u64>,
}

impl BeaconingStats {
    pub fn units_consumed(&self) -> u64 {
        self.signature_checks + self.certificate_checks
    }
}

#[derive(Debug, Clone)]
struct Queued {
    seq: u64,
    /// Lower is more urgent.
    class: u8,
    sb: SecuredBeacon,
    received_at: Timestamp,
    ready_us: u64,
}

#[derive(Debug, Clone)]
struct InService {
    item: Queued,
    finish_us: u64,
    outcome: VerificationOutcome,
    new_certificate: Option<CompactCertificate>,
}

/// Per-vehicle beaconing security: signs outgoing beacons and verifies
/// incoming ones on a single budgeted CPU with a bounded queue.
#[derive(Debug)]
pub struct BeaconingEngine {
    cfg: BeaconingConfig,
    neighbors: NeighborTable,
    queue: VecDeque<Queued>,
    pending: BTreeMap<PseudonymId, VecDeque<(SecuredBeacon, Timestamp)>>,
    in_service: Option<InService>,
    cpu_free_at_us: u64,
    next_seq: u64,
    outbox: Vec<TrustedBeacon>,
    events: Vec<VerificationEvent>,
    stats: BeaconingStats,
    first_heard: BTreeMap<PseudonymId, Timestamp>,
    trusted: BTreeSet<PseudonymId>,
    current_pseudonym: Option<PseudonymId>,
    counter: u64,
    beta_remaining: u32,
    insertions_at_last_beacon: u64,
}

impl BeaconingEngine {
    pub fn new(cfg: BeaconingConfig) -> Self {
        BeaconingEngine {
            neighbors: NeighborTable::new(cfg.neighbor_expiry_ms),
            cfg,
            queue: VecDeque::new(),
            pending: BTreeMap::new(),
            in_service: None,
            cpu_free_at_us: 0,
            next_seq: 0,
            outbox: Vec::new(),
            events: Vec::new(),
            stats: BeaconingStats::default(),
            first_heard: BTreeMap::new(),
            trusted: BTreeSet::new(),
            current_pseudonym: None,
            counter: 0,
            beta_remaining: 0,
            insertions_at_last_beacon: 0,
        }
    }

    pub fn config(&self) -> &BeaconingConfig {
        &self.cfg
    }

    pub fn neighbors(&self) -> &NeighborTable {
        &self.neighbors
    }

    pub fn stats(&self) -> &BeaconingStats {
        &self.stats
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.values().map(VecDeque::len).sum()
    }

    pub fn beta_remaining(&self) -> u32 {
        self.beta_remaining
    }

    pub fn on_pseudonym_change(&mut self, event: &PseudonymChangeEvent) {
        self.reset_sender(event.new_id);
    }

    fn reset_sender(&mut self, id: PseudonymId) {
        if self.current_pseudonym != Some(id) {
            self.current_pseudonym = Some(id);
            self.counter = 0;
            self.beta_remaining = self.cfg.omission.beta;
        }
    }

    /// Signs `beacon` under the active pseudonym and decides whether the
    /// certificate goes along.
    pub fn make_beacon(
        &mut self,
        hsm: &Hsm,
        ids: &mut IdentityManager,
        beacon: Beacon,
        now: Timestamp,
    ) -> Result<SecuredBeacon, BeaconError> {
        self.neighbor_maintenance(now);
        let p = ids.active_mut().ok_or(BeaconError::NoActivePseudonym)?;
        let id = p.id();
        self.reset_sender(id);
        let attach = decide_attach(
            &self.cfg.omission,
            self.counter,
            self.beta_remaining,
            &self.neighbors,
            self.insertions_at_last_beacon,
        );
        let blob = hsm.sign_and_timestamp(p.key_id, &beacon.to_bytes())?;
        p.beacons_signed += 1;
        self.counter += 1;
        self.beta_remaining = self.beta_remaining.saturating_sub(1);
        self.insertions_at_last_beacon = self.neighbors.insertions();
        self.stats.beacons_signed += 1;
        if attach {
            self.stats.certificates_attached += 1;
        }
        Ok(SecuredBeacon { beacon, signer: id, signature: blob.block(), certificate: attach.then_some(p.certificate) })
    }

    /// Expires neighbors and everything kept on their behalf.
    pub fn neighbor_maintenance(&mut self, now: Timestamp) -> Vec<PseudonymId> {
        let gone = self.neighbors.maintenance(now);
        for id in &gone {
            self.pending.remove(id);
            self.first_heard.remove(id);
            self.trusted.remove(id);
        }
        gone
    }

    pub fn on_receive_bytes(&mut self, bytes: &[u8], now: Timestamp, ctx: &ReceiveContext) -> ReceiveDisposition {
        match SecuredBeacon::from_bytes(bytes) {
            Some(sb) => self.on_receive(sb, now, ctx),
            None => {
                self.stats.received += 1;
                self.stats.malformed += 1;
                ReceiveDisposition::Discarded(DiscardReason::Malformed)
            }
        }
    }

    pub fn on_receive(&mut self, sb: SecuredBeacon, now: Timestamp, ctx: &ReceiveContext) -> ReceiveDisposition {
        self.stats.received += 1;
        if now.abs_diff(sb.beacon.generation_time) > self.cfg.freshness_ms {
            self.stats.stale_discards += 1;
            return ReceiveDisposition::Discarded(DiscardReason::Stale);
        }
        if self.cfg.opposite_flow_filter && (sb.beacon.heading - ctx.own_heading).cos() < 0.0 {
            self.stats.opposite_flow_discards += 1;
            return ReceiveDisposition::Discarded(DiscardReason::OppositeFlow);
        }
        if self.neighbors.observe(sb.signer, now, sb.beacon.heading) {
            self.first_heard.insert(sb.signer, now);
            self.trusted.remove(&sb.signer);
        }
        if self.neighbors.verified_certificate(sb.signer).is_none() && sb.certificate.is_none() {
            self.buffer_pending(sb, now);
            return ReceiveDisposition::Pending(PendingReason::AwaitingCertificate);
        }
        let Some(seq) = self.enqueue(sb, now, now * 1000) else {
            return ReceiveDisposition::Discarded(DiscardReason::Evicted);
        };
        self.verification_step(now)
            .into_iter()
            .find(|c| c.seq == seq)
            .map_or(ReceiveDisposition::Pending(PendingReason::AwaitingVerification), |c| c.disposition)
    }

    fn buffer_pending(&mut self, sb: SecuredBeacon, received_at: Timestamp) {
        let buf = self.pending.entry(sb.signer).or_default();
        if buf.len() >= self.cfg.pending_capacity {
            buf.pop_front();
            self.stats.pending_overflow += 1;
        }
        if self.cfg.pending_capacity > 0 {
            buf.push_back((sb, received_at));
        }
    }

    fn class(&self, sb: &SecuredBeacon) -> u8 {
        match self.cfg.budget.scheduling {
            Scheduling::Fifo => 0,
            Scheduling::Priority if sb.beacon.emergency_brake() => 0,
            Scheduling::Priority if sb.certificate.is_some() && self.neighbors.verified_certificate(sb.signer).is_none() => 1,
            Scheduling::Priority => 2,
        }
    }

    /// Queues a job; returns its sequence number unless the job itself was
    /// the one evicted.
    fn enqueue(&mut self, sb: SecuredBeacon, received_at: Timestamp, ready_us: u64) -> Option<u64> {
        let seq = self.next_seq;
        self.next_seq += 1;
        let class = self.class(&sb);
        self.queue.push_back(Queued { seq, class, sb, received_at, ready_us });
        if self.queue.len() > self.cfg.budget.queue_capacity {
            let worst = self.queue.iter().map(|q| q.class).max().expect("non-empty");
            let idx = self.queue.iter().position(|q| q.class == worst).expect("present");
            let gone = self.queue.remove(idx).expect("in range");
            self.stats.evictions += 1;
            if gone.seq == seq {
                return None;
            }
        }
        Some(seq)
    }

    fn dequeue(&mut self) -> Option<Queued> {
        let best = self.queue.iter().map(|q| q.class).min()?;
        let idx = self.queue.iter().position(|q| q.class == best).expect("present");
        self.queue.remove(idx)
    }

    /// Runs the verification CPU up to `now`: finishes the job in service,
    /// then starts queued jobs oldest first while the CPU is free.
    pub fn verification_step(&mut self, now: Timestamp) -> Vec<Completion> {
        let now_us = now * 1000;
        let cost = self.cfg.budget.unit_cost_us();
        let mut done = Vec::new();
        loop {
            if let Some(s) = &self.in_service {
                if s.finish_us > now_us {
                    break;
                }
                let s = self.in_service.take().expect("checked");
                self.finish(s, now, &mut done);
            }
            if self.cpu_free_at_us > now_us {
                break;
            }
            let Some(item) = self.dequeue() else { break };
            let start_us = self.cpu_free_at_us.max(item.ready_us);
            let start_ms = start_us / 1000;
            if start_ms.saturating_sub(item.sb.beacon.generation_time) > self.cfg.freshness_ms {
                self.stats.stale_discards += 1;
                done.push(Completion {
                    seq: item.seq,
                    signer: item.sb.signer,
                    disposition: ReceiveDisposition::Discarded(DiscardReason::Stale),
                });
                continue;
            }
            let signer = item.sb.signer;
            let cached = self.neighbors.verified_certificate(signer).copied();
            let (cert, check_cert) = match (cached, item.sb.certificate) {
                (Some(c), None) => (c, false),
                (Some(c), Some(carried)) if carried == c => (c, false),
                (_, Some(carried)) => (carried, true),
                (None, None) => {
                    // the cached certificate expired while this job waited
                    self.buffer_pending(item.sb, item.received_at);
                    continue;
                }
            };
            let mut units = 0u32;
            let mut outcome = VerificationOutcome::Verified;
            if check_cert {
                units += 1;
                self.stats.certificate_checks += 1;
                if cert.pseudonym_id() != signer || !cert.verify(&self.cfg.anchor, start_ms) {
                    outcome = VerificationOutcome::BadCertificate;
                }
            } else {
                self.stats.cache_hits += 1;
            }
            if outcome == VerificationOutcome::Verified {
                units += 1;
                self.stats.signature_checks += 1;
                if !item.sb.signature.verify(self.cfg.suite, &cert.subject_public_key, &item.sb.beacon.to_bytes()) {
                    outcome = VerificationOutcome::BadSignature;
                }
            }
            if self.cfg.record_events {
                self.events.push(VerificationEvent {
                    start_us,
                    units,
                    signer,
                    certificate_checked: check_cert,
                    outcome,
                });
            }
            let new_certificate = (check_cert && outcome != VerificationOutcome::BadCertificate).then_some(cert);
            self.cpu_free_at_us = start_us + u64::from(units) * cost;
            self.in_service = Some(InService {
                item,
                finish_us: start_us + u64::from(units - 1) * cost,
                outcome,
                new_certificate,
            });
        }
        done
    }

    fn finish(&mut self, s: InService, now: Timestamp, done: &mut Vec<Completion>) {
        let signer = s.item.sb.signer;
        if let Some(cert) = s.new_certificate {
            if self.neighbors.mark_verified(signer, cert) {
                if let Some(waiting) = self.pending.remove(&signer) {
                    for (sb, received_at) in waiting {
                        self.enqueue(sb, received_at, s.finish_us);
                    }
                }
            }
        }
        let disposition = match s.outcome {
            VerificationOutcome::Verified => {
                self.stats.delivered += 1;
                if self.trusted.insert(signer) {
                    if let Some(first) = self.first_heard.get(&signer) {
                        self.stats.time_to_trust_ms.push(now.saturating_sub(*first));
                    }
                }
                self.outbox.push(TrustedBeacon {
                    beacon: s.item.sb.beacon,
                    signer,
                    received_at: s.item.received_at,
                    delivered_at: now,
                });
                ReceiveDisposition::DeliveredTrusted
            }
            VerificationOutcome::BadSignature => {
                self.stats.bad_signatures += 1;
                ReceiveDisposition::Discarded(DiscardReason::BadSignature)
            }
            VerificationOutcome::BadCertificate => {
                self.stats.bad_certificates += 1;
                ReceiveDisposition::Discarded(DiscardReason::BadCertificate)
            }
        };
        done.push(Completion { seq: s.item.seq, signer, disposition });
    }

    /// Earliest time at which [`Self::verification_step`] has work to do.
    pub fn next_verification_time(&self) -> Option<Timestamp> {
        let us = match &self.in_service {
            Some(s) => s.finish_us,
            None if !self.queue.is_empty() => self.cpu_free_at_us,
            None => return None,
        };
        Some(us.div_ceil(1000))
    }

    pub fn drain_outbox(&mut self) -> Vec<TrustedBeacon> {
        std::mem::take(&mut self.outbox)
    }

    pub fn drain_events(&mut self) -> Vec<VerificationEvent> {
        std::mem::take(&mut self.events)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beaconing::{OmissionVariant, FLAG_EMERGENCY_BRAKE};
    use crate::crypto::KeyPair;
    use crate::hsm::VirtualClock;
    use crate::identity::{provision, CertificateAuthority};
    use rand::SeedableRng;
    use std::sync::Arc;

    struct Vehicle {
        hsm: Hsm,
        ids: IdentityManager,
        engine: BeaconingEngine,
    }

    fn ca() -> CertificateAuthority {
        CertificateAuthority::generate(1, CryptoSuite::Modeled, 77)
    }

    fn vehicle(ca: &CertificateAuthority, seed: u64, omission: OmissionStrategy, budget: VerificationBudgetConfig) -> Vehicle {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let root = KeyPair::generate(CryptoSuite::Modeled, &mut rng);
        let hsm = Hsm::factory_provision(root.public_key())
            .suite(CryptoSuite::Modeled)
            .clock(Arc::new(VirtualClock::new()))
            .seed(seed)
            .build();
        let pool = provision(&hsm, ca, 4, 10_000_000, 0).unwrap();
        let mut ids = IdentityManager::new(pool, seed);
        ids.activate_next(0).unwrap();
        let mut cfg = BeaconingConfig::new(ca.anchor());
        cfg.omission = omission;
        cfg.budget = budget;
        cfg.record_events = true;
        Vehicle { hsm, ids, engine: BeaconingEngine::new(cfg) }
    }

    fn beacon(t: Timestamp) -> Beacon {
        Beacon { position: (0.0, 0.0), velocity: 30.0, heading: 0.0, generation_time: t, payload: 0 }
    }

    const CTX: ReceiveContext = ReceiveContext { own_heading: 0.0 };

    impl Vehicle {
        fn send(&mut self, t: Timestamp) -> SecuredBeacon {
            self.engine.make_beacon(&self.hsm, &mut self.ids, beacon(t), t).unwrap()
        }
    }

    fn always() -> OmissionStrategy {
        OmissionStrategy { variant: OmissionVariant::AlwaysAttach, beta: 0 }
    }

    #[test]
    fn always_attach_every_beacon() {
        let ca = ca();
        let mut v = vehicle(&ca, 1, always(), Default::default());
        for t in 0..20 {
            assert!(v.send(t * 100).certificate.is_some());
        }
    }

    #[test]
    fn periodic_attaches_beacons_1_11_21() {
        let ca = ca();
        let s = OmissionStrategy { variant: OmissionVariant::Periodic { alpha: 10 }, beta: 0 };
        let mut v = vehicle(&ca, 1, s, Default::default());
        let with: Vec<u64> = (1..=25).filter(|&i| v.send(i * 100).certificate.is_some()).collect();
        assert_eq!(with, vec![1, 11, 21]);
    }

    #[test]
    fn beta_after_pseudonym_change() {
        let ca = ca();
        let s = OmissionStrategy { variant: OmissionVariant::Periodic { alpha: 1000 }, beta: 3 };
        let mut v = vehicle(&ca, 1, s, Default::default());
        for i in 0..10 {
            v.send(i * 100);
        }
        let ev = v.ids.activate_next(1000).unwrap();
        v.engine.on_pseudonym_change(&ev);
        let flags: Vec<bool> = (0..6).map(|i| v.send(1000 + i * 100).certificate.is_some()).collect();
        // beta covers three; the periodic counter restarts at the new pseudonym
        assert_eq!(flags, vec![true, true, true, false, false, false]);
    }

    #[test]
    fn known_neighbor_delivered_immediately() {
        let ca = ca();
        let mut a = vehicle(&ca, 1, always(), Default::default());
        let mut b = vehicle(&ca, 2, always(), Default::default());
        let first = a.send(0);
        assert_eq!(b.engine.on_receive(first, 1, &CTX), ReceiveDisposition::Pending(PendingReason::AwaitingVerification));
        b.engine.verification_step(21);
        let second = a.send(100);
        assert_eq!(b.engine.on_receive(second, 101, &CTX), ReceiveDisposition::DeliveredTrusted);
        let out = b.engine.drain_outbox();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].delivered_at, 21);
        assert_eq!(b.engine.stats().time_to_trust_ms, vec![20]);
    }

    #[test]
    fn pending_released_by_certificate() {
        let ca = ca();
        let never = OmissionStrategy { variant: OmissionVariant::Periodic { alpha: 5 }, beta: 0 };
        let mut a = vehicle(&ca, 1, never, Default::default());
        let mut b = vehicle(&ca, 2, always(), Default::default());
        let with_cert = a.send(0);
        assert!(with_cert.certificate.is_some());
        let bare = a.send(100);
        assert_eq!(b.engine.on_receive(bare, 100, &CTX), ReceiveDisposition::Pending(PendingReason::AwaitingCertificate));
        assert_eq!(b.engine.pending_len(), 1);
        b.engine.on_receive(with_cert, 150, &CTX);
        let mut t = 150;
        while let Some(next) = b.engine.next_verification_time() {
            t = next;
            b.engine.verification_step(t);
        }
        let out = b.engine.drain_outbox();
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].beacon.generation_time, 100);
        assert_eq!(b.engine.stats().certificate_checks, 1);
        assert_eq!(b.engine.stats().signature_checks, 2);
        assert_eq!(b.engine.stats().cache_hits, 1);
        // certificate and signature units at 150 and 170, released job at 190
        assert_eq!(t, 190);
    }

    /// `b` trusts `a`; then a burst of routine beacons and one emergency
    /// beacon arrive while the CPU is busy.
    fn burst(scheduling: Scheduling, capacity: usize) -> (Vehicle, Vec<ReceiveDisposition>) {
        let ca = ca();
        let never = OmissionStrategy { variant: OmissionVariant::Periodic { alpha: 1000 }, beta: 0 };
        let mut a = vehicle(&ca, 1, never, Default::default());
        let budget = VerificationBudgetConfig { queue_capacity: capacity, scheduling, ..Default::default() };
        let mut b = vehicle(&ca, 2, always(), budget);
        b.engine.on_receive(a.send(0), 0, &CTX);
        b.engine.verification_step(100);
        b.engine.drain_outbox();
        let mut d = Vec::new();
        for t in 100..104 {
            d.push(b.engine.on_receive(a.send(t), t, &CTX));
        }
        let mut alarm = beacon(104);
        alarm.payload = FLAG_EMERGENCY_BRAKE;
        let alarm = a.engine.make_beacon(&a.hsm, &mut a.ids, alarm, 104).unwrap();
        d.push(b.engine.on_receive(alarm, 104, &CTX));
        (b, d)
    }

    fn drain(b: &mut Vehicle) -> Vec<Timestamp> {
        while let Some(next) = b.engine.next_verification_time() {
            b.engine.verification_step(next);
        }
        b.engine.drain_outbox().iter().map(|t| t.beacon.generation_time).collect()
    }

    #[test]
    fn emergency_beacon_jumps_the_queue() {
        let (mut b, _) = burst(Scheduling::Priority, 16);
        assert_eq!(drain(&mut b), vec![100, 104, 101, 102, 103]);
        let (mut b, _) = burst(Scheduling::Fifo, 16);
        assert_eq!(drain(&mut b), vec![100, 101, 102, 103, 104]);
    }

    #[test]
    fn eviction_spares_urgent_jobs() {
        // job 100 is in service, so the queue holds 101..=104
        let (mut b, d) = burst(Scheduling::Priority, 2);
        assert_eq!(d[4], ReceiveDisposition::Pending(PendingReason::AwaitingVerification));
        assert_eq!(drain(&mut b), vec![100, 104, 103]);
        assert_eq!(b.engine.stats().evictions, 2);

        let (mut b, _) = burst(Scheduling::Fifo, 2);
        assert_eq!(drain(&mut b), vec![100, 103, 104]);
        assert_eq!(b.engine.stats().evictions, 2);
    }

    #[test]
    fn arrival_that_is_least_urgent_is_itself_evicted() {
        let ca = ca();
        let never = OmissionStrategy { variant: OmissionVariant::Periodic { alpha: 1000 }, beta: 0 };
        let mut a = vehicle(&ca, 1, never, Default::default());
        let budget = VerificationBudgetConfig { queue_capacity: 1, ..Default::default() };
        let mut b = vehicle(&ca, 2, always(), budget);
        b.engine.on_receive(a.send(0), 0, &CTX);
        b.engine.verification_step(100);
        let mut alarm = beacon(100);
        alarm.payload = FLAG_EMERGENCY_BRAKE;
        let alarm = a.engine.make_beacon(&a.hsm, &mut a.ids, alarm, 100).unwrap();
        b.engine.on_receive(a.send(100), 100, &CTX);
        b.engine.on_receive(alarm, 101, &CTX);
        assert_eq!(b.engine.on_receive(a.send(102), 102, &CTX), ReceiveDisposition::Discarded(DiscardReason::Evicted));
    }

    #[test]
    fn cached_certificate_costs_one_unit() {
        let ca = ca();
        let mut a = vehicle(&ca, 1, always(), Default::default());
        let mut b = vehicle(&ca, 2, always(), Default::default());
        b.engine.on_receive(a.send(0), 0, &CTX);
        b.engine.verification_step(100);
        b.engine.on_receive(a.send(100), 100, &CTX);
        b.engine.verification_step(200);
        let ev = b.engine.drain_events();
        assert_eq!(ev.iter().map(|e| e.units).collect::<Vec<_>>(), vec![2, 1]);
        assert!(ev[0].certificate_checked && !ev[1].certificate_checked);
    }

    #[test]
    fn stale_and_opposite_flow_discarded() {
        let ca = ca();
        let mut a = vehicle(&ca, 1, always(), Default::default());
        let mut b = vehicle(&ca, 2, always(), Default::default());
        b.engine.cfg.opposite_flow_filter = true;
        let old = a.send(0);
        assert_eq!(b.engine.on_receive(old.clone(), 1001, &CTX), ReceiveDisposition::Discarded(DiscardReason::Stale));
        assert_ne!(b.engine.on_receive(old.clone(), 1000, &CTX), ReceiveDisposition::Discarded(DiscardReason::Stale));
        let oncoming = a.engine.make_beacon(&a.hsm, &mut a.ids, Beacon { heading: std::f32::consts::PI, ..beacon(2000) }, 2000).unwrap();
        assert_eq!(
            b.engine.on_receive(oncoming.clone(), 2000, &CTX),
            ReceiveDisposition::Discarded(DiscardReason::OppositeFlow)
        );
        assert!(!b.engine.neighbors().is_empty());
        assert_eq!(b.engine.on_receive_bytes(&[1, 2, 3], 0, &CTX), ReceiveDisposition::Discarded(DiscardReason::Malformed));
    }

    #[test]
    fn forged_beacons_never_delivered() {
        let ca = ca();
        let rogue_ca = CertificateAuthority::generate(1, CryptoSuite::Modeled, 999);
        let mut a = vehicle(&ca, 1, always(), Default::default());
        let mut rogue = vehicle(&rogue_ca, 3, always(), Default::default());
        let mut b = vehicle(&ca, 2, always(), Default::default());
        let t = 0;
        // a failed certificate check ends the job after its first unit
        let d = b.engine.on_receive(rogue.send(t), t, &CTX);
        assert_eq!(d, ReceiveDisposition::Discarded(DiscardReason::BadCertificate));
        assert_eq!(b.engine.stats().units_consumed(), 1);

        let mut sb = a.send(t);
        sb.beacon.payload ^= FLAG_EMERGENCY_BRAKE;
        b.engine.on_receive(sb, t, &CTX);
        let done = b.engine.verification_step(t + 100);
        assert_eq!(done[0].disposition, ReceiveDisposition::Discarded(DiscardReason::BadSignature));
        assert!(b.engine.drain_outbox().is_empty());
    }

    #[test]
    fn thirty_cached_jobs_finish_within_one_second() {
        let ca = ca();
        let mut a = vehicle(&ca, 1, always(), Default::default());
        let mut b = vehicle(&ca, 2, always(), VerificationBudgetConfig { queue_capacity: 64, ..Default::default() });
        b.engine.on_receive(a.send(0), 0, &CTX);
        b.engine.verification_step(100);
        b.engine.drain_outbox();
        let base = 1000;
        let beacons: Vec<_> = (0..30).map(|i| a.send(base + i)).collect();
        for sb in beacons {
            b.engine.on_receive(sb, base + 30, &CTX);
        }
        let mut t = base + 30;
        while let Some(n) = b.engine.next_verification_time() {
            t = n;
            b.engine.verification_step(t);
        }
        assert_eq!(b.engine.drain_outbox().len(), 30);
        assert!(t < base + 30 + 1000);
    }

    #[test]
    fn sustained_overload_runs_at_budget() {
        let ca = ca();
        let mut senders: Vec<Vehicle> = (0..12).map(|i| vehicle(&ca, 10 + i, always(), Default::default())).collect();
        let mut rx = vehicle(&ca, 2, always(), Default::default());
        // 12 senders at 10 Hz: 120 arrivals per second
        for step in 0..300u64 {
            let t = step * 100;
            for (i, s) in senders.iter_mut().enumerate() {
                let at = t + i as u64 * 8;
                while let Some(n) = rx.engine.next_verification_time().filter(|&n| n <= at) {
                    rx.engine.verification_step(n);
                }
                let sb = s.send(at);
                rx.engine.on_receive(sb, at, &CTX);
            }
        }
        let ev = rx.engine.drain_events();
        let cost = 20_000u64;
        let mut unit_times: Vec<u64> =
            ev.iter().flat_map(|e| (0..e.units as u64).map(move |k| e.start_us + k * cost)).collect();
        unit_times.sort_unstable();
        for w in unit_times.windows(51) {
            assert!(w[50] - w[0] >= 1_000_000, "51 units inside one second");
        }
        let after_warmup = unit_times.iter().filter(|&&u| (5_000_000..25_000_000).contains(&u)).count();
        let rate = after_warmup as f64 / 20.0;
        assert!((rate - 50.0).abs() <= 1.0, "rate {rate}");
        assert!(rx.engine.stats().evictions > 0);
        let st = rx.engine.stats();
        assert_eq!(st.units_consumed(), ev.iter().map(|e| u64::from(e.units)).sum::<u64>());
    }

    #[test]
    fn steady_neighborhood_stops_attaching() {
        let ca = ca();
        let nt = OmissionStrategy { variant: OmissionVariant::NeighborTriggered, beta: 0 };
        let mut vs: Vec<Vehicle> = (0..3).map(|i| vehicle(&ca, 40 + i, nt, Default::default())).collect();
        let mut attached_late = 0;
        for step in 0..50u64 {
            let t = step * 100;
            let out: Vec<SecuredBeacon> = vs.iter_mut().map(|v| v.send(t)).collect();
            if step > 2 {
                attached_late += out.iter().filter(|b| b.certificate.is_some()).count();
            }
            for (i, sb) in out.iter().enumerate() {
                for (j, v) in vs.iter_mut().enumerate() {
                    if i != j {
                        v.engine.on_receive(sb.clone(), t + 1, &CTX);
                    }
                }
            }
        }
        assert_eq!(attached_late, 0);
    }

    #[test]
    fn returning_neighbor_triggers_certificate() {
        let ca = ca();
        let nt = OmissionStrategy { variant: OmissionVariant::NeighborTriggered, beta: 0 };
        let mut a = vehicle(&ca, 1, nt, Default::default());
        let mut b = vehicle(&ca, 2, nt, Default::default());
        assert!(a.send(0).certificate.is_none());
        a.engine.on_receive(b.send(0), 1, &CTX);
        assert!(a.send(100).certificate.is_some());
        assert!(a.send(200).certificate.is_none());
        // b out of range for longer than the 3 s expiry
        assert!(a.send(3500).certificate.is_none());
        a.engine.on_receive(b.send(3550), 3551, &CTX);
        assert!(a.send(3600).certificate.is_some());
    }

    #[test]
    fn single_vehicle_neighbor_triggered_never_attaches() {
        let ca = ca();
        let nt = OmissionStrategy { variant: OmissionVariant::NeighborTriggered, beta: 0 };
        let mut a = vehicle(&ca, 1, nt, Default::default());
        assert!((0..100).all(|i| a.send(i * 100).certificate.is_none()));
    }
}
