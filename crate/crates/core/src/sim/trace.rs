//! Full event record of a run, for offline audits.

use crate::beaconing::VerificationEvent;
use crate::identity::{LinkAddress, PseudonymId};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BrakeCause {
    /// Scripted lead-vehicle trigger.
    Trigger,
    /// Driver saw the vehicle ahead braking or stopped.
    Sight,
    /// Emergency warning received over the radio.
    Warning,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    /// A frame put on the air, exactly as encoded by the sender's stack.
    Tx { t: u64, vehicle: usize, frame: Arc<[u8]> },
    /// A frame received by the radio, before any security processing.
    Rx { t: u64, vehicle: usize, sender: usize },
    Verification { vehicle: usize, event: VerificationEvent },
    /// A beacon handed to the application. `signer` is set for secured beacons.
    Delivered { t: u64, vehicle: usize, signer: Option<PseudonymId>, trusted: bool, emergency: bool },
    NeighborExpired { t: u64, vehicle: usize, signer: PseudonymId },
    PseudonymChange {
        t: u64,
        vehicle: usize,
        old_id: Option<PseudonymId>,
        new_id: PseudonymId,
        old_link: LinkAddress,
        new_link: LinkAddress,
    },
    BrakeOnset { t: u64, vehicle: usize, cause: BrakeCause, deceleration: f64 },
    Crash { t: u64, front: usize, rear: usize },
}

impl TraceEvent {
    /// Simulated time in ms. Verification events report the start of their
    /// first unit, rounded down.
    pub fn time(&self) -> u64 {
        match self {
            TraceEvent::Tx { t, .. }
            | TraceEvent::Rx { t, .. }
            | TraceEvent::Delivered { t, .. }
            | TraceEvent::NeighborExpired { t, .. }
            | TraceEvent::PseudonymChange { t, .. }
            | TraceEvent::BrakeOnset { t, .. }
            | TraceEvent::Crash { t, .. } => *t,
            TraceEvent::Verification { event, .. } => event.start_us / 1000,
        }
    }
}

/// Ordered list of trace events; disabled traces ignore everything.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    enabled: bool,
    events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new(enabled: bool) -> Self {
        Trace { enabled, events: Vec::new() }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn push(&mut self, e: TraceEvent) {
        if self.enabled {
            self.events.push(e);
        }
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<TraceEvent> {
        self.events
    }
}
