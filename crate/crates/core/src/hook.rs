//! Hook-based integration of security components into a layered stack.
//!
//! Inter Layer Proxies ([`IlpPosition`]) sit between stack layers. Security
//! components register callback handlers at an ILP for a set of message types
//! and a direction; every message crossing the ILP is offered to the matching
//! handlers in priority order, and each returns a [`Verdict`]. A convergence
//! adapter ([`StackAdapter`]) owns the concrete frame format and command set,
//! so the components above it only ever see abstract [`Message`]s.

use crate::identity::LinkAddress;
use log::warn;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

/// Maximum number of times a message may re-enter the same ILP.
pub const MAX_REINSERT_DEPTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IlpPosition {
    BelowApplication,
    AboveNetwork,
    BelowNetwork,
    AboveMac,
}

impl IlpPosition {
    /// Top of the stack first.
    pub const ALL: [IlpPosition; 4] = [
        IlpPosition::BelowApplication,
        IlpPosition::AboveNetwork,
        IlpPosition::BelowNetwork,
        IlpPosition::AboveMac,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Up,
    Down,
}

/// Abstract message: a 2-byte type tag and an opaque body.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Message {
    pub type_tag: u16,
    pub body: Vec<u8>,
}

impl Message {
    pub fn new(type_tag: u16, body: Vec<u8>) -> Self {
        Message { type_tag, body }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + self.body.len());
        out.extend_from_slice(&self.type_tag.to_be_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() < 2 {
            return None;
        }
        Some(Message { type_tag: u16::from_be_bytes([bytes[0], bytes[1]]), body: bytes[2..].to_vec() })
    }

    pub fn wire_len(&self) -> usize {
        2 + self.body.len()
    }
}

impl fmt::Debug for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Message(tag={:#06x}, {} bytes)", self.type_tag, self.body.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    PassUnchanged,
    PassModified,
    Reinsert,
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TypeFilter {
    Any,
    Tags(BTreeSet<u16>),
}

impl TypeFilter {
    pub fn tag(tag: u16) -> Self {
        TypeFilter::Tags(BTreeSet::from([tag]))
    }

    fn matches(&self, tag: u16) -> bool {
        match self {
            TypeFilter::Any => true,
            TypeFilter::Tags(t) => t.contains(&tag),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandlerRegistration {
    pub handler_id: String,
    pub types: TypeFilter,
    /// `None` subscribes to both directions.
    pub direction: Option<Direction>,
    /// Lower runs first; ties keep registration order.
    pub priority: i32,
}

impl HandlerRegistration {
    pub fn new(handler_id: impl Into<String>, types: TypeFilter, direction: Option<Direction>, priority: i32) -> Self {
        HandlerRegistration { handler_id: handler_id.into(), types, direction, priority }
    }

    fn matches(&self, message: &Message, direction: Direction) -> bool {
        self.types.matches(message.type_tag) && self.direction.map_or(true, |d| d == direction)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{0}")]
pub struct HandlerError(pub String);

/// Event listener interface for security components.
///
/// The handler receives a working copy of the message. Changes it makes are
/// kept only when it answers [`Verdict::PassModified`] or [`Verdict::Reinsert`].
pub trait Handler {
    fn on_event(&mut self, message: &mut Message, direction: Direction) -> Result<Verdict, HandlerError>;
}

impl<F> Handler for F
where
    F: FnMut(&mut Message, Direction) -> Result<Verdict, HandlerError>,
{
    fn on_event(&mut self, message: &mut Message, direction: Direction) -> Result<Verdict, HandlerError> {
        self(message, direction)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Delivered(Message),
    Dropped,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HookError {
    #[error("handler `{0}` already registered at {1:?}")]
    DuplicateHandler(String, IlpPosition),
    #[error("message re-entered {0:?} more than {MAX_REINSERT_DEPTH} times")]
    LoopGuard(IlpPosition),
    #[error("command not supported by the bound stack adapter: {0:?}")]
    UnsupportedCommand(StackCommand),
    #[error("stack adapter `{0}` lacks required capability: {1}")]
    MissingCapability(String, &'static str),
    #[error("no stack adapter bound")]
    Unbound,
    #[error("frame decode: {0}")]
    Frame(#[from] FrameError),
}

struct Entry {
    reg: HandlerRegistration,
    seq: u64,
    handler: Box<dyn Handler>,
}

/// The handler list of one ILP.
#[derive(Default)]
pub struct InterLayerProxy {
    entries: Vec<Entry>,
    next_seq: u64,
}

impl InterLayerProxy {
    fn register(&mut self, reg: HandlerRegistration, handler: Box<dyn Handler>) -> bool {
        if self.entries.iter().any(|e| e.reg.handler_id == reg.handler_id) {
            return false;
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.entries.push(Entry { reg, seq, handler });
        self.entries.sort_by_key(|e| (e.reg.priority, e.seq));
        true
    }

    fn dispatch(&mut self, ilp: IlpPosition, message: Message, direction: Direction) -> Result<Outcome, HookError> {
        let mut current = message;
        let mut depth = 0;
        'reenter: loop {
            for entry in self.entries.iter_mut() {
                if !entry.reg.matches(&current, direction) {
                    continue;
                }
                let mut working = current.clone();
                match entry.handler.on_event(&mut working, direction) {
                    Ok(Verdict::PassUnchanged) => {}
                    Ok(Verdict::PassModified) => current = working,
                    Ok(Verdict::Drop) => return Ok(Outcome::Dropped),
                    Ok(Verdict::Reinsert) => {
                        depth += 1;
                        if depth > MAX_REINSERT_DEPTH {
                            return Err(HookError::LoopGuard(ilp));
                        }
                        current = working;
                        continue 'reenter;
                    }
                    Err(e) => {
                        warn!("handler `{}` at {ilp:?} failed, dropping message: {e}", entry.reg.handler_id);
                        return Ok(Outcome::Dropped);
                    }
                }
            }
            return Ok(Outcome::Delivered(current));
        }
    }
}

/// Commands the security system may issue to stack layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackCommand {
    SetLinkAddress(LinkAddress),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub frames: bool,
    pub set_link_address: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame too short")]
    Truncated,
    #[error("length field mismatch")]
    Length,
    #[error("bad frame checksum")]
    Checksum,
}

/// A decoded link-layer frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub source: LinkAddress,
    pub message: Message,
}

/// Convergence layer towards a concrete communication stack.
pub trait StackAdapter {
    fn name(&self) -> &str;
    fn capabilities(&self) -> Capabilities;
    fn encode_frame(&self, source: LinkAddress, message: &Message) -> Vec<u8>;
    fn decode_frame(&self, frame: &[u8]) -> Result<Frame, FrameError>;
    /// Frame bytes added on top of the abstract message.
    fn framing_overhead(&self) -> usize;
}

/// Simulator framing: `source (6) ‖ length (2, BE) ‖ message`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimFrameAdapter;

impl StackAdapter for SimFrameAdapter {
    fn name(&self) -> &str {
        "sim"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { frames: true, set_link_address: true }
    }

    fn encode_frame(&self, source: LinkAddress, message: &Message) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + message.wire_len());
        out.extend_from_slice(&source.0);
        out.extend_from_slice(&(message.wire_len() as u16).to_be_bytes());
        out.extend_from_slice(&message.type_tag.to_be_bytes());
        out.extend_from_slice(&message.body);
        out
    }

    fn decode_frame(&self, frame: &[u8]) -> Result<Frame, FrameError> {
        if frame.len() < 10 {
            return Err(FrameError::Truncated);
        }
        let len = u16::from_be_bytes([frame[6], frame[7]]) as usize;
        if frame.len() != 8 + len {
            return Err(FrameError::Length);
        }
        let message = Message::from_bytes(&frame[8..]).ok_or(FrameError::Truncated)?;
        Ok(Frame { source: LinkAddress(frame[..6].try_into().unwrap()), message })
    }

    fn framing_overhead(&self) -> usize {
        8
    }
}

/// Alternative framing with the tag first, the address last and a trailing
/// additive checksum: `tag (2) ‖ body ‖ source (6) ‖ checksum (1)`.
/// Optionally refuses link-address changes, for capability tests.
#[derive(Debug, Clone, Copy)]
pub struct TrailerFrameAdapter {
    pub allow_address_change: bool,
}

impl TrailerFrameAdapter {
    fn checksum(bytes: &[u8]) -> u8 {
        bytes.iter().fold(0u8, |acc, b| acc.wrapping_add(*b))
    }
}

impl StackAdapter for TrailerFrameAdapter {
    fn name(&self) -> &str {
        "trailer"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { frames: true, set_link_address: self.allow_address_change }
    }

    fn encode_frame(&self, source: LinkAddress, message: &Message) -> Vec<u8> {
        let mut out = message.to_bytes();
        out.extend_from_slice(&source.0);
        out.push(Self::checksum(&out));
        out
    }

    fn decode_frame(&self, frame: &[u8]) -> Result<Frame, FrameError> {
        if frame.len() < 9 {
            return Err(FrameError::Truncated);
        }
        let (content, sum) = frame.split_at(frame.len() - 1);
        if Self::checksum(content) != sum[0] {
            return Err(FrameError::Checksum);
        }
        let (msg, src) = content.split_at(content.len() - 6);
        Ok(Frame {
            source: LinkAddress(src.try_into().unwrap()),
            message: Message::from_bytes(msg).ok_or(FrameError::Truncated)?,
        })
    }

    fn framing_overhead(&self) -> usize {
        7
    }
}

/// A layered stack with ILPs at every [`IlpPosition`] and a bound adapter.
pub struct ProtocolStack {
    ilps: BTreeMap<IlpPosition, InterLayerProxy>,
    adapter: Option<Box<dyn StackAdapter>>,
    link_address: LinkAddress,
}

impl Default for ProtocolStack {
    fn default() -> Self {
        Self::new()
    }
}

impl ProtocolStack {
    pub fn new() -> Self {
        ProtocolStack {
            ilps: IlpPosition::ALL.into_iter().map(|p| (p, InterLayerProxy::default())).collect(),
            adapter: None,
            link_address: LinkAddress::default(),
        }
    }

    pub fn register_handler(
        &mut self,
        ilp: IlpPosition,
        reg: HandlerRegistration,
        handler: Box<dyn Handler>,
    ) -> Result<(), HookError> {
        let id = reg.handler_id.clone();
        let proxy = self.ilps.get_mut(&ilp).expect("all positions exist");
        if proxy.register(reg, handler) {
            Ok(())
        } else {
            Err(HookError::DuplicateHandler(id, ilp))
        }
    }

    pub fn dispatch(&mut self, ilp: IlpPosition, message: Message, direction: Direction) -> Result<Outcome, HookError> {
        self.ilps.get_mut(&ilp).expect("all positions exist").dispatch(ilp, message, direction)
    }

    pub fn bind_convergence(&mut self, adapter: Box<dyn StackAdapter>) -> Result<(), HookError> {
        if !adapter.capabilities().frames {
            return Err(HookError::MissingCapability(adapter.name().to_string(), "frames"));
        }
        self.adapter = Some(adapter);
        Ok(())
    }

    pub fn adapter(&self) -> Option<&dyn StackAdapter> {
        self.adapter.as_deref()
    }

    pub fn command(&mut self, cmd: StackCommand) -> Result<(), HookError> {
        let adapter = self.adapter.as_ref().ok_or(HookError::Unbound)?;
        match cmd {
            StackCommand::SetLinkAddress(addr) => {
                if !adapter.capabilities().set_link_address {
                    return Err(HookError::UnsupportedCommand(cmd));
                }
                self.link_address = addr;
            }
        }
        Ok(())
    }

    pub fn link_address(&self) -> LinkAddress {
        self.link_address
    }

    /// Passes a message down through every ILP and frames it.
    /// Returns `None` if a handler dropped it.
    pub fn send(&mut self, message: Message) -> Result<Option<Vec<u8>>, HookError> {
        if self.adapter.is_none() {
            return Err(HookError::Unbound);
        }
        let mut current = message;
        for ilp in IlpPosition::ALL {
            match self.dispatch(ilp, current, Direction::Down)? {
                Outcome::Delivered(m) => current = m,
                Outcome::Dropped => return Ok(None),
            }
        }
        let adapter = self.adapter.as_ref().expect("checked above");
        Ok(Some(adapter.encode_frame(self.link_address, &current)))
    }

    /// Decodes a frame and passes it up through every ILP.
    pub fn receive(&mut self, frame: &[u8]) -> Result<Option<Frame>, HookError> {
        let adapter = self.adapter.as_ref().ok_or(HookError::Unbound)?;
        let Frame { source, message } = adapter.decode_frame(frame)?;
        let mut current = message;
        for ilp in IlpPosition::ALL.into_iter().rev() {
            match self.dispatch(ilp, current, Direction::Up)? {
                Outcome::Delivered(m) => current = m,
                Outcome::Dropped => return Ok(None),
            }
        }
        Ok(Some(Frame { source, message: current }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;
    use std::rc::Rc;

    fn reg(id: &str, prio: i32) -> HandlerRegistration {
        HandlerRegistration::new(id, TypeFilter::Any, None, prio)
    }

    #[test]
    fn no_handlers_is_identity() {
        let mut s = ProtocolStack::new();
        let m = Message::new(0x10, vec![1, 2, 3]);
        for ilp in IlpPosition::ALL {
            for d in [Direction::Up, Direction::Down] {
                assert_eq!(s.dispatch(ilp, m.clone(), d).unwrap(), Outcome::Delivered(m.clone()));
            }
        }
    }

    #[test]
    fn matching_handler_runs_once_and_filters_apply() {
        let mut s = ProtocolStack::new();
        let calls = Rc::new(RefCell::new(0));
        let c = calls.clone();
        s.register_handler(
            IlpPosition::AboveMac,
            HandlerRegistration::new("h", TypeFilter::tag(7), Some(Direction::Up), 0),
            Box::new(move |_: &mut Message, _| {
                *c.borrow_mut() += 1;
                Ok(Verdict::PassUnchanged)
            }),
        )
        .unwrap();
        s.dispatch(IlpPosition::AboveMac, Message::new(7, vec![]), Direction::Up).unwrap();
        s.dispatch(IlpPosition::AboveMac, Message::new(8, vec![]), Direction::Up).unwrap();
        s.dispatch(IlpPosition::AboveMac, Message::new(7, vec![]), Direction::Down).unwrap();
        s.dispatch(IlpPosition::BelowNetwork, Message::new(7, vec![]), Direction::Up).unwrap();
        assert_eq!(*calls.borrow(), 1);
    }

    #[test]
    fn duplicate_id_rejected_per_ilp() {
        let mut s = ProtocolStack::new();
        let h = || Box::new(|_: &mut Message, _| Ok(Verdict::PassUnchanged)) as Box<dyn Handler>;
        s.register_handler(IlpPosition::AboveMac, reg("a", 0), h()).unwrap();
        assert!(matches!(
            s.register_handler(IlpPosition::AboveMac, reg("a", 1), h()),
            Err(HookError::DuplicateHandler(..))
        ));
        s.register_handler(IlpPosition::BelowNetwork, reg("a", 0), h()).unwrap();
    }

    #[test]
    fn priority_order_independent_of_registration_order() {
        for order in [[1, 2], [2, 1]] {
            let mut s = ProtocolStack::new();
            let log = Rc::new(RefCell::new(Vec::new()));
            for p in order {
                let l = log.clone();
                s.register_handler(
                    IlpPosition::AboveMac,
                    reg(&format!("h{p}"), p),
                    Box::new(move |_: &mut Message, _| {
                        l.borrow_mut().push(p);
                        Ok(Verdict::PassUnchanged)
                    }),
                )
                .unwrap();
            }
            s.dispatch(IlpPosition::AboveMac, Message::new(1, vec![]), Direction::Up).unwrap();
            assert_eq!(*log.borrow(), vec![1, 2]);
        }
    }

    #[test]
    fn later_handler_observes_modification() {
        let mut s = ProtocolStack::new();
        let seen = Rc::new(RefCell::new(Vec::new()));
        s.register_handler(
            IlpPosition::AboveMac,
            reg("a", 1),
            Box::new(|m: &mut Message, _| {
                m.body.push(0xEE);
                Ok(Verdict::PassModified)
            }),
        )
        .unwrap();
        let sc = seen.clone();
        s.register_handler(
            IlpPosition::AboveMac,
            reg("b", 2),
            Box::new(move |m: &mut Message, _| {
                *sc.borrow_mut() = m.body.clone();
                Ok(Verdict::PassUnchanged)
            }),
        )
        .unwrap();
        let out = s.dispatch(IlpPosition::AboveMac, Message::new(1, vec![1]), Direction::Down).unwrap();
        assert_eq!(*seen.borrow(), vec![1, 0xEE]);
        assert_eq!(out, Outcome::Delivered(Message::new(1, vec![1, 0xEE])));
    }

    #[test]
    fn unchanged_verdict_discards_edits() {
        let mut s = ProtocolStack::new();
        s.register_handler(
            IlpPosition::AboveMac,
            reg("sneaky", 0),
            Box::new(|m: &mut Message, _| {
                m.body.clear();
                Ok(Verdict::PassUnchanged)
            }),
        )
        .unwrap();
        let m = Message::new(1, vec![9, 9]);
        assert_eq!(s.dispatch(IlpPosition::AboveMac, m.clone(), Direction::Up).unwrap(), Outcome::Delivered(m));
    }

    #[test]
    fn drop_short_circuits_and_errors_fail_closed() {
        let mut s = ProtocolStack::new();
        let later = Rc::new(RefCell::new(false));
        s.register_handler(IlpPosition::AboveMac, reg("drop", 0), Box::new(|_: &mut Message, _| Ok(Verdict::Drop)))
            .unwrap();
        let l = later.clone();
        s.register_handler(
            IlpPosition::AboveMac,
            reg("after", 5),
            Box::new(move |_: &mut Message, _| {
                *l.borrow_mut() = true;
                Ok(Verdict::PassUnchanged)
            }),
        )
        .unwrap();
        assert_eq!(s.dispatch(IlpPosition::AboveMac, Message::new(1, vec![]), Direction::Up).unwrap(), Outcome::Dropped);
        assert!(!*later.borrow());

        let mut s = ProtocolStack::new();
        s.register_handler(
            IlpPosition::AboveNetwork,
            reg("broken", 0),
            Box::new(|_: &mut Message, _| Err(HandlerError("boom".into()))),
        )
        .unwrap();
        assert_eq!(
            s.dispatch(IlpPosition::AboveNetwork, Message::new(1, vec![]), Direction::Up).unwrap(),
            Outcome::Dropped
        );
    }

    #[test]
    fn reinsert_reenters_until_depth_cap() {
        let mut s = ProtocolStack::new();
        let count = Rc::new(RefCell::new(0));
        let c = count.clone();
        s.register_handler(
            IlpPosition::BelowNetwork,
            reg("twice", 0),
            Box::new(move |m: &mut Message, _| {
                *c.borrow_mut() += 1;
                if m.body.len() < 2 {
                    m.body.push(0);
                    Ok(Verdict::Reinsert)
                } else {
                    Ok(Verdict::PassUnchanged)
                }
            }),
        )
        .unwrap();
        let out = s.dispatch(IlpPosition::BelowNetwork, Message::new(1, vec![]), Direction::Up).unwrap();
        assert_eq!(out, Outcome::Delivered(Message::new(1, vec![0, 0])));
        assert_eq!(*count.borrow(), 3);

        let mut s = ProtocolStack::new();
        s.register_handler(IlpPosition::AboveMac, reg("loop", 0), Box::new(|_: &mut Message, _| Ok(Verdict::Reinsert)))
            .unwrap();
        assert_eq!(
            s.dispatch(IlpPosition::AboveMac, Message::new(1, vec![]), Direction::Up),
            Err(HookError::LoopGuard(IlpPosition::AboveMac))
        );
    }

    #[test]
    fn link_address_commands_and_capabilities() {
        let mut s = ProtocolStack::new();
        assert_eq!(s.send(Message::new(1, vec![])), Err(HookError::Unbound));
        s.bind_convergence(Box::new(SimFrameAdapter)).unwrap();
        let a = LinkAddress([2, 0, 0, 0, 0, 1]);
        let b = LinkAddress([2, 0, 0, 0, 0, 2]);
        s.command(StackCommand::SetLinkAddress(a)).unwrap();
        s.command(StackCommand::SetLinkAddress(b)).unwrap();
        let frame = s.send(Message::new(3, vec![4])).unwrap().unwrap();
        assert_eq!(SimFrameAdapter.decode_frame(&frame).unwrap().source, b);

        let mut s = ProtocolStack::new();
        s.bind_convergence(Box::new(TrailerFrameAdapter { allow_address_change: false })).unwrap();
        assert!(matches!(s.command(StackCommand::SetLinkAddress(a)), Err(HookError::UnsupportedCommand(_))));
        let m = Message::new(3, vec![4, 5]);
        let frame = s.send(m.clone()).unwrap().unwrap();
        assert_eq!(s.receive(&frame).unwrap().unwrap().message, m);
    }

    #[test]
    fn adapter_without_frames_is_refused() {
        struct Mute;
        impl StackAdapter for Mute {
            fn name(&self) -> &str {
                "mute"
            }
            fn capabilities(&self) -> Capabilities {
                Capabilities { frames: false, set_link_address: true }
            }
            fn encode_frame(&self, _: LinkAddress, _: &Message) -> Vec<u8> {
                Vec::new()
            }
            fn decode_frame(&self, _: &[u8]) -> Result<Frame, FrameError> {
                Err(FrameError::Truncated)
            }
            fn framing_overhead(&self) -> usize {
                0
            }
        }
        let mut s = ProtocolStack::new();
        assert!(matches!(s.bind_convergence(Box::new(Mute)), Err(HookError::MissingCapability(..))));
    }

    #[test]
    fn corrupted_frames_are_rejected() {
        let m = Message::new(0xBEEF, vec![1, 2, 3]);
        let src = LinkAddress([2, 1, 2, 3, 4, 5]);
        let mut f = TrailerFrameAdapter { allow_address_change: true }.encode_frame(src, &m);
        f[1] ^= 0x40;
        assert_eq!(
            TrailerFrameAdapter { allow_address_change: true }.decode_frame(&f),
            Err(FrameError::Checksum)
        );
        let f = SimFrameAdapter.encode_frame(src, &m);
        assert_eq!(SimFrameAdapter.decode_frame(&f[..f.len() - 1]), Err(FrameError::Length));
    }
}
