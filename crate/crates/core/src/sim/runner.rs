//! Discrete-event loop of one run.

use super::channel::Channel;
use super::config::{ScenarioConfig, SecurityMode};
use super::metrics::{percentile, Metrics, QueueSample};
use super::mobility::{lane_order, layout, Kinematics, Placement};
use super::trace::{BrakeCause, Trace, TraceEvent};
use crate::beaconing::{
    Beacon, BeaconingConfig, BeaconingEngine, ReceiveContext, SecuredBeacon, FLAG_EMERGENCY_BRAKE, PLAIN_BEACON_TAG,
    SECURED_BEACON_TAG,
};
use crate::config::ConfigError;
use crate::crypto::KeyPair;
use crate::hook::{
    Direction, HandlerError, HandlerRegistration, IlpPosition, Message, ProtocolStack, SimFrameAdapter,
    StackAdapter, StackCommand, TrailerFrameAdapter, TypeFilter, Verdict,
};
use crate::hsm::{Hsm, VirtualClock};
use crate::identity::{provision, should_change, CertificateAuthority, IdentityManager, LinkAddress};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::rc::Rc;
use std::sync::Arc;

/// Offset between simulated time and the timestamps seen by vehicles, so
/// that pseudonyms can be activated "before" the run starts.
pub fn epoch_ms(cfg: &ScenarioConfig) -> u64 {
    1_000_000 + cfg.pseudonym.max_lifetime_ms
}

const STREAM_PHASES: u64 = 1;
const STREAM_CHANNEL: u64 = 2;
const STREAM_DRIVERS: u64 = 3;
const STREAM_KEYS: u64 = 4;
const STREAM_AGES: u64 = 5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Same-time events run in this order, then by vehicle id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Kind {
    MobilityTick,
    BrakeOnset,
    VerificationTick,
    FrameRx,
    BeaconTx,
    QueueSample,
}

#[derive(Debug)]
enum Payload {
    None,
    Brake(BrakeCause),
    Frame { sender: usize, bytes: Arc<[u8]> },
}

#[derive(Debug)]
struct Event {
    t: u64,
    kind: Kind,
    vehicle: usize,
    seq: u64,
    payload: Payload,
}

impl Event {
    fn key(&self) -> (u64, Kind, usize, u64) {
        (self.t, self.kind, self.vehicle, self.seq)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

#[derive(Default)]
struct EventQueue {
    heap: BinaryHeap<Reverse<Event>>,
    seq: u64,
}

impl EventQueue {
    fn push(&mut self, t: u64, kind: Kind, vehicle: usize, payload: Payload) {
        self.seq += 1;
        self.heap.push(Reverse(Event { t, kind, vehicle, seq: self.seq, payload }));
    }

    fn pop(&mut self) -> Option<Event> {
        self.heap.pop().map(|Reverse(e)| e)
    }
}

/// Security components of one secured vehicle, shared with its hook handlers.
struct SecurityState {
    hsm: Hsm,
    ids: IdentityManager,
    engine: BeaconingEngine,
    now: u64,
    own_heading: f32,
}

enum Node {
    Silent,
    Unsecured(ProtocolStack),
    Secured { stack: ProtocolStack, sec: Rc<RefCell<SecurityState>>, tick_at: Option<u64> },
}

struct Vehicle {
    place: Placement,
    kin: Kinematics,
    deceleration: f64,
    braking: bool,
    crashed: bool,
    brake_at: Option<u64>,
    node: Node,
}

impl Vehicle {
    fn alarmed(&self) -> bool {
        self.braking || self.crashed
    }
}

fn adapter(cfg: &ScenarioConfig) -> Box<dyn StackAdapter> {
    if cfg.sim.trailer_frames {
        Box::new(TrailerFrameAdapter { allow_address_change: true })
    } else {
        Box::new(SimFrameAdapter)
    }
}

fn secured_stack(cfg: &ScenarioConfig, sec: &Rc<RefCell<SecurityState>>) -> ProtocolStack {
    let mut stack = ProtocolStack::new();
    stack.bind_convergence(adapter(cfg)).expect("frame-capable adapter");
    let s = Rc::clone(sec);
    let sign = move |msg: &mut Message, _: Direction| {
        let beacon = Beacon::from_message(msg).ok_or_else(|| HandlerError("malformed plain beacon".into()))?;
        let mut st = s.borrow_mut();
        let st = &mut *st;
        let sb = st
            .engine
            .make_beacon(&st.hsm, &mut st.ids, beacon, st.now)
            .map_err(|e| HandlerError(e.to_string()))?;
        *msg = sb.to_message();
        Ok(Verdict::PassModified)
    };
    let s = Rc::clone(sec);
    let verify = move |msg: &mut Message, _: Direction| {
        let mut st = s.borrow_mut();
        let ctx = ReceiveContext { own_heading: st.own_heading };
        let now = st.now;
        match SecuredBeacon::from_message(msg) {
            Some(sb) => st.engine.on_receive(sb, now, &ctx),
            None => st.engine.on_receive_bytes(&msg.to_bytes(), now, &ctx),
        };
        // trusted beacons leave through the engine outbox once verified
        Ok(Verdict::Drop)
    };
    let reject_plain = |_: &mut Message, _: Direction| Ok(Verdict::Drop);
    let regs: [(&str, u16, Direction, Box<dyn crate::hook::Handler>); 3] = [
        ("beacon-sign", PLAIN_BEACON_TAG, Direction::Down, Box::new(sign)),
        ("beacon-verify", SECURED_BEACON_TAG, Direction::Up, Box::new(verify)),
        ("reject-unsigned", PLAIN_BEACON_TAG, Direction::Up, Box::new(reject_plain)),
    ];
    for (id, tag, dir, h) in regs {
        stack
            .register_handler(IlpPosition::BelowNetwork, HandlerRegistration::new(id, TypeFilter::tag(tag), Some(dir), 0), h)
            .expect("unique handler ids");
    }
    stack
}

/// Result of a traced run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Metrics,
    pub trace: Vec<TraceEvent>,
}

/// Runs one scenario to completion.
pub fn run(cfg: &ScenarioConfig) -> Result<Metrics, ConfigError> {
    Ok(Simulation::new(cfg, false)?.execute().metrics)
}

/// Runs one scenario and keeps the full event trace.
pub fn run_with_trace(cfg: &ScenarioConfig) -> Result<RunOutput, ConfigError> {
    Ok(Simulation::new(cfg, true)?.execute())
}

struct Counters {
    beacons_sent: u64,
    beacons_with_certificate: u64,
    total_beacons: u64,
    per_vehicle: Vec<u64>,
    frames_received: u64,
    units_after_warmup: u64,
    crashes: usize,
}

struct Simulation<'a> {
    cfg: &'a ScenarioConfig,
    epoch: u64,
    duration: u64,
    warmup: u64,
    clock: VirtualClock,
    vehicles: Vec<Vehicle>,
    lanes: Vec<Vec<usize>>,
    crashed_pairs: Vec<bool>,
    channel: Channel,
    queue: EventQueue,
    trace: Trace,
    counters: Counters,
    samples: Vec<QueueSample>,
    positions: Vec<(f64, f64)>,
    positions_at: Option<u64>,
}

impl<'a> Simulation<'a> {
    fn new(cfg: &'a ScenarioConfig, traced: bool) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let n = cfg.traffic.vehicle_count;
        let epoch = epoch_ms(cfg);
        let duration = cfg.duration_ms();
        let clock = VirtualClock::new();
        let placements = layout(&cfg.traffic);

        let mut drivers = stream(cfg.seed, STREAM_DRIVERS);
        let [lo, hi] = cfg.braking.follower_deceleration_mps2;
        let decels: Vec<f64> = (0..n).map(|_| if hi > lo { drivers.gen_range(lo..=hi) } else { lo }).collect();

        let nodes = Self::build_nodes(cfg, epoch, &clock)?;
        let vehicles: Vec<Vehicle> = placements
            .iter()
            .zip(decels)
            .zip(nodes)
            .enumerate()
            .map(|(i, ((p, d), node))| Vehicle {
                place: *p,
                kin: Kinematics::cruising(p.speed),
                deceleration: if i == 0 { cfg.braking.lead_deceleration_mps2 } else { d },
                braking: false,
                crashed: false,
                brake_at: None,
                node,
            })
            .collect();

        let mut sim = Simulation {
            cfg,
            epoch,
            duration,
            warmup: (cfg.metrics.warmup_s * 1000.0).round() as u64,
            clock,
            lanes: lane_order(&placements, cfg.traffic.lanes),
            crashed_pairs: vec![false; n],
            channel: Channel::new(cfg.radio.clone(), n, stream(cfg.seed, STREAM_CHANNEL)),
            queue: EventQueue::default(),
            trace: Trace::new(traced),
            counters: Counters {
                beacons_sent: 0,
                beacons_with_certificate: 0,
                total_beacons: 0,
                per_vehicle: vec![0; n],
                frames_received: 0,
                units_after_warmup: 0,
                crashes: 0,
            },
            samples: Vec::new(),
            positions: Vec::with_capacity(n),
            positions_at: None,
            vehicles,
        };
        sim.schedule_initial();
        Ok(sim)
    }

    fn build_nodes(cfg: &ScenarioConfig, epoch: u64, clock: &VirtualClock) -> Result<Vec<Node>, ConfigError> {
        let n = cfg.traffic.vehicle_count;
        let mut keys = stream(cfg.seed, STREAM_KEYS);
        match cfg.security.mode {
            SecurityMode::NoVc => Ok((0..n).map(|_| Node::Silent).collect()),
            SecurityMode::UnsecuredVc => Ok((0..n)
                .map(|_| {
                    let mut stack = ProtocolStack::new();
                    stack.bind_convergence(adapter(cfg)).expect("frame-capable adapter");
                    stack
                        .command(StackCommand::SetLinkAddress(LinkAddress::random(&mut keys)))
                        .expect("adapter supports address changes");
                    Node::Unsecured(stack)
                })
                .collect()),
            SecurityMode::SecuredVc => {
                let suite = cfg.security.crypto;
                let ca = CertificateAuthority::generate(1, suite, keys.gen());
                let root = KeyPair::generate(suite, &mut keys).public_key();
                let mut ages = stream(cfg.seed, STREAM_AGES);
                let p = &cfg.pseudonym;
                let per_pseudonym = p.min_lifetime_ms.max(cfg.traffic.beacon_interval_ms).max(1);
                let pool = (cfg.duration_ms() / per_pseudonym + 2).min(10_000) as usize;
                let validity = epoch + cfg.duration_ms() + p.max_lifetime_ms + 1;
                let src: Arc<dyn crate::hsm::ClockSource> = Arc::new(clock.clone());
                let mut bcfg = BeaconingConfig::new(ca.anchor());
                bcfg.omission = cfg.security.omission();
                bcfg.budget = cfg.security.budget;
                bcfg.neighbor_expiry_ms = cfg.security.neighbor_expiry_ms;
                bcfg.freshness_ms = cfg.security.freshness_ms;
                bcfg.opposite_flow_filter = cfg.security.opposite_flow_filter;
                bcfg.pending_capacity = cfg.security.pending_capacity;
                bcfg.record_events = true;
                (0..n)
                    .map(|_| {
                        let hsm = Hsm::factory_provision(root).suite(suite).clock(Arc::clone(&src)).seed(keys.gen()).build();
                        let pseudonyms = provision(&hsm, &ca, pool, validity, 0)
                            .map_err(|e| ConfigError::invalid("pseudonym", e.to_string()))?;
                        let mut ids = IdentityManager::new(pseudonyms, keys.gen());
                        let age = if p.randomize_initial_age && p.max_lifetime_ms > 0 {
                            ages.gen_range(0..p.max_lifetime_ms)
                        } else {
                            0
                        };
                        let ev = ids.activate_next(epoch - age).expect("pool is non-empty");
                        let mut engine = BeaconingEngine::new(bcfg.clone());
                        engine.on_pseudonym_change(&ev);
                        let sec = Rc::new(RefCell::new(SecurityState { hsm, ids, engine, now: epoch, own_heading: 0.0 }));
                        let mut stack = secured_stack(cfg, &sec);
                        stack
                            .command(StackCommand::SetLinkAddress(ev.new_link_address))
                            .expect("adapter supports address changes");
                        Ok(Node::Secured { stack, sec, tick_at: None })
                    })
                    .collect()
            }
        }
    }

    fn schedule_initial(&mut self) {
        let cfg = self.cfg;
        self.queue.push(0, Kind::MobilityTick, 0, Payload::None);
        if cfg.security.mode == SecurityMode::SecuredVc {
            self.queue.push(0, Kind::QueueSample, 0, Payload::None);
        }
        if cfg.braking.enabled {
            let t = (cfg.braking.trigger_time_s * 1000.0).round() as u64;
            self.vehicles[0].brake_at = Some(t);
            self.queue.push(t, Kind::BrakeOnset, 0, Payload::Brake(BrakeCause::Trigger));
        }
        if cfg.security.mode.communicates() {
            let mut phases = stream(cfg.seed, STREAM_PHASES);
            for v in 0..self.vehicles.len() {
                let t = phases.gen_range(0..cfg.traffic.beacon_interval_ms);
                self.queue.push(t, Kind::BeaconTx, v, Payload::None);
            }
        }
    }

    fn execute(mut self) -> RunOutput {
        while let Some(ev) = self.queue.pop() {
            if ev.t >= self.duration {
                break;
            }
            self.clock.advance_to(self.epoch + ev.t);
            match ev.kind {
                Kind::MobilityTick => self.mobility_tick(ev.t),
                Kind::BrakeOnset => {
                    let cause = match ev.payload {
                        Payload::Brake(c) => c,
                        _ => unreachable!("brake events carry a cause"),
                    };
                    self.brake_onset(ev.vehicle, ev.t, cause);
                }
                Kind::VerificationTick => self.verification_tick(ev.vehicle, ev.t),
                Kind::FrameRx => {
                    let Payload::Frame { sender, bytes } = ev.payload else {
                        unreachable!("frame events carry the frame")
                    };
                    self.frame_rx(ev.vehicle, sender, bytes, ev.t);
                }
                Kind::BeaconTx => {
                    let next = ev.t + self.cfg.traffic.beacon_interval_ms;
                    self.queue.push(next, Kind::BeaconTx, ev.vehicle, Payload::None);
                    self.send_beacon(ev.vehicle, ev.t);
                }
                Kind::QueueSample => self.sample_queues(ev.t),
            }
        }
        self.finish()
    }

    fn position(&self, v: usize, t: u64) -> (f64, f64) {
        let veh = &self.vehicles[v];
        veh.place.position(veh.kin.at(t).0)
    }

    fn refresh_positions(&mut self, t: u64) {
        if self.positions_at != Some(t) {
            self.positions.clear();
            for v in 0..self.vehicles.len() {
                let p = self.position(v, t);
                self.positions.push(p);
            }
            self.positions_at = Some(t);
        }
    }

    fn invalidate_positions(&mut self) {
        self.positions_at = None;
    }

    fn gap(&self, front: usize, rear: usize, t: u64) -> f64 {
        let (xf, _) = self.position(front, t);
        let (xr, _) = self.position(rear, t);
        (xf - xr) * self.vehicles[rear].place.direction
    }

    fn mobility_tick(&mut self, t: u64) {
        let next = t + self.cfg.sim.mobility_tick_ms;
        self.queue.push(next, Kind::MobilityTick, 0, Payload::None);
        for l in 0..self.lanes.len() {
            for k in 1..self.lanes[l].len() {
                let (f, r) = (self.lanes[l][k - 1], self.lanes[l][k]);
                if !self.crashed_pairs[r] && self.gap(f, r, t) <= 0.0 {
                    self.crash(f, r, t);
                }
            }
        }
        let sight = self.cfg.braking.sight_threshold_m;
        let reaction = self.cfg.braking.reaction_delay_ms;
        for l in 0..self.lanes.len() {
            for k in 1..self.lanes[l].len() {
                let (f, r) = (self.lanes[l][k - 1], self.lanes[l][k]);
                let front = &self.vehicles[f];
                let visible = front.alarmed() || front.kin.at(t).1 == 0.0;
                if visible && self.gap(f, r, t) < sight {
                    self.schedule_brake(r, t + reaction, BrakeCause::Sight, t);
                }
            }
        }
    }

    fn crash(&mut self, front: usize, rear: usize, t: u64) {
        self.crashed_pairs[rear] = true;
        self.counters.crashes += 1;
        self.trace.push(TraceEvent::Crash { t, front, rear });
        for v in [front, rear] {
            let newly = !self.vehicles[v].alarmed();
            let veh = &mut self.vehicles[v];
            veh.kin = veh.kin.halt(t);
            veh.crashed = true;
            if newly {
                self.send_beacon(v, t);
            }
        }
        self.invalidate_positions();
    }

    /// Keeps the earliest pending brake time per vehicle.
    fn schedule_brake(&mut self, v: usize, at: u64, cause: BrakeCause, now: u64) {
        let veh = &self.vehicles[v];
        if veh.alarmed() || veh.kin.at(now).1 == 0.0 || veh.brake_at.is_some_and(|b| b <= at) {
            return;
        }
        self.vehicles[v].brake_at = Some(at);
        self.queue.push(at, Kind::BrakeOnset, v, Payload::Brake(cause));
    }

    fn brake_onset(&mut self, v: usize, t: u64, cause: BrakeCause) {
        let veh = &mut self.vehicles[v];
        if veh.alarmed() || veh.brake_at != Some(t) {
            return;
        }
        veh.kin = veh.kin.rebase(t, -veh.deceleration);
        veh.braking = true;
        let deceleration = veh.deceleration;
        self.invalidate_positions();
        self.trace.push(TraceEvent::BrakeOnset { t, vehicle: v, cause, deceleration });
        self.send_beacon(v, t);
    }

    fn send_beacon(&mut self, v: usize, t: u64) {
        if !self.cfg.security.mode.communicates() {
            return;
        }
        let now = self.epoch + t;
        let (s, speed) = self.vehicles[v].kin.at(t);
        let veh = &self.vehicles[v];
        let beacon = Beacon {
            position: veh.place.position(s),
            velocity: speed as f32,
            heading: veh.place.heading(),
            generation_time: now,
            payload: if veh.alarmed() { FLAG_EMERGENCY_BRAKE } else { 0 },
        };
        let policy = self.cfg.pseudonym.policy();
        let mut expired = Vec::new();
        let mut change = None;
        let (sent, attached) = match &mut self.vehicles[v].node {
            Node::Silent => return,
            Node::Unsecured(stack) => (stack.send(beacon.to_message()), false),
            Node::Secured { stack, sec, .. } => {
                let before = {
                    let mut st = sec.borrow_mut();
                    let st = &mut *st;
                    st.now = now;
                    expired = st.engine.neighbor_maintenance(now);
                    let due = st.ids.active().map_or(true, |p| should_change(now, p, &policy));
                    if due {
                        match st.ids.activate_next(now) {
                            Ok(ev) => {
                                st.engine.on_pseudonym_change(&ev);
                                change = Some(ev);
                            }
                            Err(e) => log::debug!("vehicle {v} keeps its pseudonym: {e}"),
                        }
                    }
                    st.engine.stats().certificates_attached
                };
                if let Some(ev) = &change {
                    let old_link = stack.link_address();
                    stack.command(StackCommand::SetLinkAddress(ev.new_link_address)).expect("supported");
                    self.trace.push(TraceEvent::PseudonymChange {
                        t,
                        vehicle: v,
                        old_id: ev.old_id,
                        new_id: ev.new_id,
                        old_link,
                        new_link: ev.new_link_address,
                    });
                }
                let sent = stack.send(beacon.to_message());
                let after = sec.borrow().engine.stats().certificates_attached;
                (sent, after > before)
            }
        };
        for signer in expired {
            self.trace.push(TraceEvent::NeighborExpired { t, vehicle: v, signer });
        }
        let frame: Arc<[u8]> = match sent {
            Ok(Some(f)) => f.into(),
            Ok(None) => return,
            Err(e) => {
                log::warn!("vehicle {v} could not send a beacon: {e}");
                return;
            }
        };
        self.counters.total_beacons += 1;
        self.counters.per_vehicle[v] += 1;
        if t >= self.warmup {
            self.counters.beacons_sent += 1;
            if attached {
                self.counters.beacons_with_certificate += 1;
            }
        }
        self.trace.push(TraceEvent::Tx { t, vehicle: v, frame: Arc::clone(&frame) });
        self.refresh_positions(t);
        let deliveries = self.channel.broadcast(v, frame.len(), t, &self.positions);
        for d in deliveries {
            self.queue.push(d.at, Kind::FrameRx, d.receiver, Payload::Frame { sender: v, bytes: Arc::clone(&frame) });
        }
    }

    fn frame_rx(&mut self, r: usize, sender: usize, bytes: Arc<[u8]>, t: u64) {
        self.counters.frames_received += 1;
        self.trace.push(TraceEvent::Rx { t, vehicle: r, sender });
        let now = self.epoch + t;
        let heading = self.vehicles[r].place.heading();
        match &mut self.vehicles[r].node {
            Node::Silent => {}
            Node::Unsecured(stack) => match stack.receive(&bytes) {
                Ok(Some(frame)) => {
                    if let Some(b) = Beacon::from_message(&frame.message) {
                        self.deliver(r, b, None, false, t);
                    }
                }
                Ok(None) => {}
                Err(e) => log::debug!("vehicle {r} dropped a frame: {e}"),
            },
            Node::Secured { stack, sec, .. } => {
                let expired = {
                    let mut st = sec.borrow_mut();
                    st.now = now;
                    st.own_heading = heading;
                    st.engine.neighbor_maintenance(now)
                };
                for signer in expired {
                    self.trace.push(TraceEvent::NeighborExpired { t, vehicle: r, signer });
                }
                match stack.receive(&bytes) {
                    Ok(Some(_)) => log::debug!("unsecured frame passed a secured stack"),
                    Ok(None) => {}
                    Err(e) => log::debug!("vehicle {r} dropped a frame: {e}"),
                }
                self.after_engine(r, t);
            }
        }
    }

    fn verification_tick(&mut self, v: usize, t: u64) {
        let now = self.epoch + t;
        if let Node::Secured { sec, tick_at, .. } = &mut self.vehicles[v].node {
            if *tick_at != Some(t) {
                return;
            }
            *tick_at = None;
            let mut st = sec.borrow_mut();
            st.now = now;
            st.engine.verification_step(now);
        }
        self.after_engine(v, t);
    }

    /// Collects verification records and trusted beacons, then arranges the
    /// next verification tick.
    fn after_engine(&mut self, v: usize, t: u64) {
        let (events, outbox, next, cost) = match &mut self.vehicles[v].node {
            Node::Secured { sec, .. } => {
                let mut st = sec.borrow_mut();
                let cost = st.engine.config().budget.unit_cost_us();
                (st.engine.drain_events(), st.engine.drain_outbox(), st.engine.next_verification_time(), cost)
            }
            _ => return,
        };
        let epoch_us = self.epoch * 1000;
        let (lo, hi) = (self.warmup * 1000, self.duration * 1000);
        for mut event in events {
            event.start_us -= epoch_us;
            self.counters.units_after_warmup += (0..u64::from(event.units))
                .map(|k| event.start_us + k * cost)
                .filter(|u| (lo..hi).contains(u))
                .count() as u64;
            self.trace.push(TraceEvent::Verification { vehicle: v, event });
        }
        for tb in outbox {
            let at = tb.delivered_at - self.epoch;
            self.deliver(v, tb.beacon, Some(tb.signer), true, at);
        }
        if let Some(next) = next {
            let next = (next - self.epoch).max(t + 1);
            if let Node::Secured { tick_at, .. } = &mut self.vehicles[v].node {
                if tick_at.map_or(true, |cur| next < cur) {
                    *tick_at = Some(next);
                    self.queue.push(next, Kind::VerificationTick, v, Payload::None);
                }
            }
        }
    }

    fn deliver(&mut self, r: usize, b: Beacon, signer: Option<crate::identity::PseudonymId>, trusted: bool, t: u64) {
        let emergency = b.emergency_brake();
        self.trace.push(TraceEvent::Delivered { t, vehicle: r, signer, trusted, emergency });
        if !emergency {
            return;
        }
        let (x, y) = self.position(r, t);
        let me = &self.vehicles[r].place;
        let same_lane = (b.position.1 - y).abs() < (self.cfg.traffic.lane_spacing_m / 2.0).max(1e-6);
        let same_flow = (b.heading - me.heading()).cos() > 0.0;
        let ahead = (b.position.0 - x) * me.direction > 0.0;
        if same_lane && same_flow && ahead {
            self.schedule_brake(r, t + self.cfg.braking.reaction_delay_ms, BrakeCause::Warning, t);
        }
    }

    fn sample_queues(&mut self, t: u64) {
        self.queue.push(t + self.cfg.metrics.queue_sample_ms, Kind::QueueSample, 0, Payload::None);
        let (mut max, mut sum, mut evictions) = (0usize, 0usize, 0u64);
        for veh in &self.vehicles {
            if let Node::Secured { sec, .. } = &veh.node {
                let st = sec.borrow();
                let d = st.engine.queue_len();
                max = max.max(d);
                sum += d;
                evictions += st.engine.stats().evictions;
            }
        }
        self.samples.push(QueueSample {
            t_ms: t,
            max_depth: max,
            mean_depth: sum as f64 / self.vehicles.len() as f64,
            evictions,
        });
    }

    fn finish(self) -> RunOutput {
        let cfg = self.cfg;
        let c = &self.counters;
        let mut ttt = Vec::new();
        let mut evictions = 0;
        for veh in &self.vehicles {
            if let Node::Secured { sec, .. } = &veh.node {
                let st = sec.borrow();
                ttt.extend_from_slice(&st.engine.stats().time_to_trust_ms);
                evictions += st.engine.stats().evictions;
            }
        }
        let secured = cfg.security.mode == SecurityMode::SecuredVc;
        let measured_s = self.duration.saturating_sub(self.warmup) as f64 / 1000.0;
        let ch = self.channel.stats();
        let metrics = Metrics {
            scenario_id: cfg.scenario_id.clone(),
            seed: cfg.seed,
            security_mode: cfg.security.mode,
            strategy: cfg.security.strategy,
            alpha: cfg.security.alpha,
            beta: cfg.security.beta,
            beacon_interval_ms: cfg.traffic.beacon_interval_ms,
            vehicle_count: cfg.traffic.vehicle_count,
            beacons_sent: c.beacons_sent,
            beacons_with_certificate: c.beacons_with_certificate,
            certificate_fraction: if c.beacons_sent == 0 {
                0.0
            } else {
                c.beacons_with_certificate as f64 / c.beacons_sent as f64
            },
            total_beacons_sent: c.total_beacons,
            beacons_per_vehicle: c.per_vehicle.clone(),
            offered_load_bps: ch.bytes as f64 / (self.duration as f64 / 1000.0),
            frames_received: c.frames_received,
            frames_lost: ch.losses,
            verification_rate_per_s: if secured && measured_s > 0.0 {
                c.units_after_warmup as f64 / self.vehicles.len() as f64 / measured_s
            } else {
                0.0
            },
            queue_depth: self.samples,
            evictions,
            p50_time_to_trust_ms: if secured { percentile(&ttt, 50.0) } else { None },
            p95_time_to_trust_ms: if secured { percentile(&ttt, 95.0) } else { None },
            crashes: c.crashes,
            stop_positions: self.vehicles.iter().map(|v| v.kin.at(self.duration).0).collect(),
        };
        RunOutput { metrics, trace: self.trace.into_events() }
    }
}
