//! The five-message coordination protocol and its per-role state machines.
//!
//! Clients ask for service with a `Request` (or `Emergency` after repeated
//! rejection), the server answers with exactly one `Accept` or `Reject`,
//! deliveries are announced per slot with `DeliveryNotice` (`StorageNotice`
//! for storage units) and confirmed by client `Ack`s. Messages travel over
//! an in-memory simulated channel with configurable delay and loss; the
//! default channel is instantaneous and lossless.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::pem::{PriorityClass, RequestId, ServiceRequest, ShapeConstraint, SlotIndex};

/// Address of a protocol participant.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum AgentId {
    Client(String),
    Router(String),
    Server,
    Source,
    Storage(String),
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentId::Client(id) => write!(f, "client:{id}"),
            AgentId::Router(id) => write!(f, "router:{id}"),
            AgentId::Server => f.write_str("server"),
            AgentId::Source => f.write_str("source"),
            AgentId::Storage(id) => write!(f, "storage:{id}"),
        }
    }
}

/// Resubmission guidance attached to every rejection: the earliest slot
/// from which an identical request would currently fit, and the largest
/// packet count that fits inside the original window right now.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RejectHint {
    pub earliest_feasible_slot: SlotIndex,
    pub max_packets_feasible_now: u32,
}

/// Kind-specific message body.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Request(ServiceRequest),
    Emergency(ServiceRequest),
    Accept { class: PriorityClass },
    Reject(RejectHint),
    DeliveryNotice { slot: SlotIndex, packets: u32 },
    StorageNotice { slot: SlotIndex, delta: i64 },
    Ack { slot: SlotIndex, packets: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    Request,
    Emergency,
    Accept,
    Reject,
    DeliveryNotice,
    StorageNotice,
    Ack,
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MessageKind::Request => "request",
            MessageKind::Emergency => "emergency",
            MessageKind::Accept => "accept",
            MessageKind::Reject => "reject",
            MessageKind::DeliveryNotice => "delivery_notice",
            MessageKind::StorageNotice => "storage_notice",
            MessageKind::Ack => "ack",
        };
        f.write_str(s)
    }
}

/// One protocol message. Replies carry the `correlation` of the request
/// they answer.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub sender: AgentId,
    pub receiver: AgentId,
    pub correlation: RequestId,
    pub sent_slot: SlotIndex,
    pub payload: Payload,
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self.payload {
            Payload::Request(_) => MessageKind::Request,
            Payload::Emergency(_) => MessageKind::Emergency,
            Payload::Accept { .. } => MessageKind::Accept,
            Payload::Reject(_) => MessageKind::Reject,
            Payload::DeliveryNotice { .. } => MessageKind::DeliveryNotice,
            Payload::StorageNotice { .. } => MessageKind::StorageNotice,
            Payload::Ack { .. } => MessageKind::Ack,
        }
    }
}

/// Renders one message as the canonical trace line. Traces are compared
/// byte for byte by the replay gate, so this rendering — field order
/// included — is part of the wire contract.
pub fn render_trace_line(msg: &Message) -> String {
    let mut line = String::new();
    let _ = write!(
        line,
        "{{\"slot\":{},\"kind\":\"{}\",\"sender\":\"{}\",\"receiver\":\"{}\",\"correlation\":\"{}\",\"payload\":",
        msg.sent_slot,
        msg.kind(),
        msg.sender,
        msg.receiver,
        msg.correlation
    );
    match &msg.payload {
        Payload::Request(req) | Payload::Emergency(req) => {
            let _ = write!(
                line,
                "{{\"packets\":{},\"earliest\":{},\"deadline\":{},\"shape\":{},\"submitted\":{}}}",
                req.packets,
                req.earliest_slot,
                req.deadline_slot,
                render_shape(&req.shape),
                req.submission_slot
            );
        }
        Payload::Accept { class } => {
            let _ = write!(line, "{{\"class\":{class}}}");
        }
        Payload::Reject(hint) => {
            let _ = write!(
                line,
                "{{\"earliest_feasible\":{},\"max_packets\":{}}}",
                hint.earliest_feasible_slot, hint.max_packets_feasible_now
            );
        }
        Payload::DeliveryNotice { slot, packets } | Payload::Ack { slot, packets } => {
            let _ = write!(line, "{{\"slot\":{slot},\"packets\":{packets}}}");
        }
        Payload::StorageNotice { slot, delta } => {
            let _ = write!(line, "{{\"slot\":{slot},\"delta\":{delta}}}");
        }
    }
    line.push('}');
    line
}

fn render_shape(shape: &ShapeConstraint) -> String {
    match shape {
        ShapeConstraint::Contiguous => String::from("\"contiguous\""),
        ShapeConstraint::Arbitrary => String::from("\"arbitrary\""),
        ShapeConstraint::PerSlotCap(m) => {
            let mut s = String::new();
            let _ = write!(s, "{{\"per_slot_cap\":{m}}}");
            s
        }
    }
}

/// Phase of one logical service need as seen by its client.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestPhase {
    Idle,
    Requested,
    Accepted,
    PartiallyDelivered,
    Completed,
    Rejected,
    EmergencyPending,
}

/// Client-side record of one logical need. Rejections re-issue the
/// request under a fresh id (same client namespace, next sequence
/// number), so the record tracks the id currently in flight alongside the
/// original demand.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRequestState {
    pub original: ServiceRequest,
    pub current_id: RequestId,
    pub phase: RequestPhase,
    pub delivered: u32,
    pub rejection_count: u32,
}

impl ClientRequestState {
    pub fn new_requested(req: ServiceRequest) -> Self {
        Self {
            current_id: req.request_id.clone(),
            original: req,
            phase: RequestPhase::Requested,
            delivered: 0,
            rejection_count: 0,
        }
    }
}

/// Per-client protocol parameters used when reacting to server messages.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientContext {
    pub now: SlotIndex,
    pub router: AgentId,
    /// Whether a rejection triggers a resubmission. Loads that replan on
    /// their own (space heating) leave this off.
    pub retry: bool,
    /// Rejections of one need before the next resubmission escalates.
    pub emergency_threshold: u32,
    pub acks_enabled: bool,
}

/// True once a need has been rejected often enough that its next
/// resubmission should be an emergency.
pub fn should_escalate(rejection_count: u32, threshold: u32) -> bool {
    rejection_count >= threshold
}

/// Advances one need's state machine on an incoming message and returns
/// the reply to send, if any. Illegal (phase, kind) pairs and unknown
/// correlations are protocol violations, not silently ignored.
pub fn client_on_message(
    need: &mut ClientRequestState,
    msg: &Message,
    ctx: &ClientContext,
) -> Result<Option<Message>, ProtocolError> {
    if msg.correlation != need.current_id {
        return Err(ProtocolError::UnknownCorrelation {
            correlation: msg.correlation.clone(),
        });
    }
    match (&need.phase, &msg.payload) {
        (RequestPhase::Requested | RequestPhase::EmergencyPending, Payload::Accept { .. }) => {
            need.phase = RequestPhase::Accepted;
            Ok(None)
        }
        (RequestPhase::Requested, Payload::Reject(hint)) => {
            need.rejection_count += 1;
            if !ctx.retry {
                need.phase = RequestPhase::Rejected;
                return Ok(None);
            }
            let escalate = should_escalate(need.rejection_count, ctx.emergency_threshold);
            let retry = build_retry(need, hint, ctx.now, escalate);
            need.current_id = retry.request_id.clone();
            need.phase = if escalate {
                RequestPhase::EmergencyPending
            } else {
                RequestPhase::Requested
            };
            let payload = if escalate {
                Payload::Emergency(retry.clone())
            } else {
                Payload::Request(retry.clone())
            };
            Ok(Some(Message {
                sender: AgentId::Client(need.original.client_id.0.clone()),
                receiver: ctx.router.clone(),
                correlation: retry.request_id,
                sent_slot: ctx.now,
                payload,
            }))
        }
        (RequestPhase::EmergencyPending, Payload::Reject(_)) => {
            need.rejection_count += 1;
            need.phase = RequestPhase::Rejected;
            Ok(None)
        }
        (
            RequestPhase::Accepted | RequestPhase::PartiallyDelivered,
            Payload::DeliveryNotice { slot, packets },
        ) => {
            if need.delivered + packets > need.original.packets {
                return Err(ProtocolError::OverDelivery {
                    correlation: msg.correlation.clone(),
                });
            }
            need.delivered += packets;
            need.phase = if need.delivered == need.original.packets {
                RequestPhase::Completed
            } else {
                RequestPhase::PartiallyDelivered
            };
            if ctx.acks_enabled {
                Ok(Some(Message {
                    sender: AgentId::Client(need.original.client_id.0.clone()),
                    receiver: msg.sender.clone(),
                    correlation: msg.correlation.clone(),
                    sent_slot: ctx.now,
                    payload: Payload::Ack {
                        slot: *slot,
                        packets: *packets,
                    },
                }))
            } else {
                Ok(None)
            }
        }
        (phase, _) => Err(ProtocolError::IllegalTransition {
            phase: *phase,
            kind: msg.kind(),
        }),
    }
}

fn build_retry(
    need: &ClientRequestState,
    hint: &RejectHint,
    now: SlotIndex,
    emergency: bool,
) -> ServiceRequest {
    let orig = &need.original;
    let span = orig.deadline_slot.index() - orig.earliest_slot.index();
    // A resubmission goes back through the router and reaches the server
    // one slot later, so its window must open after the current slot.
    let floor = now.index() + 1;
    let earliest = if emergency {
        orig.earliest_slot.index().max(floor)
    } else {
        orig.earliest_slot
            .index()
            .max(hint.earliest_feasible_slot.index())
            .max(floor)
    };
    let deadline = orig
        .deadline_slot
        .index()
        .max(earliest.saturating_add(span));
    ServiceRequest {
        request_id: RequestId::new(orig.client_id.clone(), need.current_id.seq + 1),
        client_id: orig.client_id.clone(),
        packets: orig.packets,
        earliest_slot: SlotIndex(earliest),
        deadline_slot: SlotIndex(deadline),
        shape: orig.shape,
        priority_hint: orig.priority_hint,
        is_emergency: emergency,
        submission_slot: now,
    }
}

/// How a household router treats client requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouterMode {
    /// Pass every request through to the server.
    ForwardOnly,
    /// Serve what local resources can cover, forward the remainder.
    LocalFirst,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouterPolicy {
    pub mode: RouterMode,
    /// Household-level buffer/source ids usable for local matching.
    pub local_resources: Vec<String>,
}

impl RouterPolicy {
    pub fn forward_only() -> Self {
        Self {
            mode: RouterMode::ForwardOnly,
            local_resources: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.mode == RouterMode::LocalFirst && self.local_resources.is_empty() {
            return Err(ProtocolError::LocalFirstWithoutResources);
        }
        Ok(())
    }
}

/// View of what the household can serve on its own right now.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LocalResources {
    pub available_packets: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RouterOutcome {
    pub forwarded: Vec<ServiceRequest>,
    pub locally_served: Vec<ServiceRequest>,
}

/// Splits a household batch into locally served requests and requests
/// forwarded to the server. Local matching is greedy earliest-deadline
/// first over whole requests; a request is served locally only when the
/// remaining local surplus covers all of its packets. Forwarded requests
/// keep their submission order.
pub fn router_process(
    policy: &RouterPolicy,
    batch: Vec<ServiceRequest>,
    local: &LocalResources,
) -> RouterOutcome {
    if policy.mode == RouterMode::ForwardOnly {
        return RouterOutcome {
            forwarded: batch,
            locally_served: Vec::new(),
        };
    }
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = &batch[a];
        let rb = &batch[b];
        (ra.deadline_slot, ra.submission_slot, &ra.request_id)
            .cmp(&(rb.deadline_slot, rb.submission_slot, &rb.request_id))
    });
    let mut surplus = local.available_packets;
    let mut served = alloc::vec![false; batch.len()];
    for idx in order {
        let req = &batch[idx];
        if req.packets <= surplus {
            surplus -= req.packets;
            served[idx] = true;
        }
    }
    let mut out = RouterOutcome::default();
    for (idx, req) in batch.into_iter().enumerate() {
        if served[idx] {
            out.locally_served.push(req);
        } else {
            out.forwarded.push(req);
        }
    }
    out
}

/// Simulated link parameters. Loss probability 1 is excluded: a channel
/// that drops everything is a configuration mistake, not a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelConfig {
    pub delay_slots: u32,
    pub loss_probability: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            delay_slots: 0,
            loss_probability: 0.0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if !(self.loss_probability >= 0.0 && self.loss_probability < 1.0) {
            return Err(ProtocolError::InvalidLossProbability {
                p: self.loss_probability,
            });
        }
        Ok(())
    }

    pub fn is_lossless(&self) -> bool {
        self.loss_probability == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    /// Message will arrive at this slot.
    Scheduled(SlotIndex),
    /// Message was lost in transit; a modeled outcome, not an error.
    Dropped,
}

/// In-memory transport between agents. Delivery order is canonical:
/// within one drain, messages sort by (arrival slot, sender, send
/// sequence), which keeps per-(sender, receiver) traffic FIFO and removes
/// every race the slot loop does not explicitly order.
#[derive(Debug, Clone)]
pub struct SimChannel {
    cfg: ChannelConfig,
    rng: ChaCha8Rng,
    next_seq: u64,
    in_flight: Vec<(SlotIndex, AgentId, u64, Message)>,
}

impl SimChannel {
    pub fn new(cfg: ChannelConfig, seed: u64) -> Result<Self, ProtocolError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_seq: 0,
            in_flight: Vec::new(),
        })
    }

    pub fn config(&self) -> ChannelConfig {
        self.cfg
    }

    /// Submits a message at slot `now`; it arrives `delay_slots` later
    /// with probability `1 - loss_probability`.
    pub fn send(&mut self, msg: Message, now: SlotIndex) -> SendOutcome {
        let seq = self.next_seq;
        self.next_seq += 1;
        if self.cfg.loss_probability > 0.0 {
            let draw: f64 = self.rng.gen();
            if draw < self.cfg.loss_probability {
                return SendOutcome::Dropped;
            }
        }
        let arrival = now.plus(self.cfg.delay_slots);
        self.in_flight.push((arrival, msg.sender.clone(), seq, msg));
        SendOutcome::Scheduled(arrival)
    }

    /// Removes and returns, in canonical order, every pending message due
    /// by `now` whose receiver satisfies the filter.
    pub fn drain_to<F>(&mut self, now: SlotIndex, mut receiver_matches: F) -> Vec<Message>
    where
        F: FnMut(&AgentId) -> bool,
    {
        let mut due: Vec<(SlotIndex, AgentId, u64, Message)> = Vec::new();
        let mut keep = Vec::with_capacity(self.in_flight.len());
        for entry in self.in_flight.drain(..) {
            if entry.0 <= now && receiver_matches(&entry.3.receiver) {
                due.push(entry);
            } else {
                keep.push(entry);
            }
        }
        self.in_flight = keep;
        due.sort_by(|a, b| (a.0, &a.1, a.2).cmp(&(b.0, &b.1, b.2)));
        due.into_iter().map(|(_, _, _, m)| m).collect()
    }

    pub fn pending(&self) -> usize {
        self.in_flight.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProtocolError {
    UnknownCorrelation { correlation: RequestId },
    IllegalTransition { phase: RequestPhase, kind: MessageKind },
    OverDelivery { correlation: RequestId },
    InvalidLossProbability { p: f64 },
    LocalFirstWithoutResources,
}

impl fmt::Display for ProtocolError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProtocolError::UnknownCorrelation { correlation } => {
                write!(f, "message correlates to unknown request {correlation}")
            }
            ProtocolError::IllegalTransition { phase, kind } => {
                write!(f, "{kind} message is illegal in phase {phase:?}")
            }
            ProtocolError::OverDelivery { correlation } => {
                write!(f, "delivery beyond requested packets for {correlation}")
            }
            ProtocolError::InvalidLossProbability { p } => {
                write!(f, "loss probability {p} outside [0, 1)")
            }
            ProtocolError::LocalFirstWithoutResources => {
                f.write_str("local-first routing needs at least one local resource")
            }
        }
    }
}

/// One handshake-conformance violation found in a message trace.
#[derive(Debug, Clone, PartialEq)]
pub enum HandshakeViolation {
    MultipleDecisions { correlation: RequestId },
    MissingDecision { correlation: RequestId },
    DecisionWithoutRequest { correlation: RequestId },
    DeliveryBeforeAccept { correlation: RequestId },
    AckMismatch { correlation: RequestId, delivered: u64, acked: u64 },
}

impl fmt::Display for HandshakeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HandshakeViolation::MultipleDecisions { correlation } => {
                write!(f, "{correlation}: more than one accept/reject")
            }
            HandshakeViolation::MissingDecision { correlation } => {
                write!(f, "{correlation}: request never answered")
            }
            HandshakeViolation::DecisionWithoutRequest { correlation } => {
                write!(f, "{correlation}: decision without a request")
            }
            HandshakeViolation::DeliveryBeforeAccept { correlation } => {
                write!(f, "{correlation}: delivery notice precedes accept")
            }
            HandshakeViolation::AckMismatch {
                correlation,
                delivered,
                acked,
            } => write!(
                f,
                "{correlation}: {delivered} packets delivered but {acked} acknowledged"
            ),
        }
    }
}

/// Checks a full trace for handshake conformance: every request gets
/// exactly one decision, accepts precede deliveries, and (when acks are
/// expected) acknowledged packets equal delivered packets. Assumes a
/// lossless channel — on lossy runs the stronger guarantees simply do not
/// hold and this check is not applicable.
pub fn check_handshake(trace: &[Message], expect_acks: bool) -> Vec<HandshakeViolation> {
    use alloc::collections::BTreeMap;

    #[derive(Default)]
    struct PerRequest {
        requested: bool,
        accepts: u32,
        rejects: u32,
        delivered: u64,
        acked: u64,
        delivery_before_accept: bool,
    }

    let mut by_id: BTreeMap<&RequestId, PerRequest> = BTreeMap::new();
    for msg in trace {
        let entry = by_id.entry(&msg.correlation).or_default();
        match &msg.payload {
            Payload::Request(_) | Payload::Emergency(_) => entry.requested = true,
            Payload::Accept { .. } => entry.accepts += 1,
            Payload::Reject(_) => entry.rejects += 1,
            Payload::DeliveryNotice { packets, .. } => {
                if entry.accepts == 0 {
                    entry.delivery_before_accept = true;
                }
                entry.delivered += u64::from(*packets);
            }
            Payload::Ack { packets, .. } => entry.acked += u64::from(*packets),
            Payload::StorageNotice { .. } => {}
        }
    }

    let mut violations = Vec::new();
    for (id, entry) in by_id {
        let decisions = entry.accepts + entry.rejects;
        if !entry.requested {
            if decisions > 0 || entry.delivered > 0 {
                violations.push(HandshakeViolation::DecisionWithoutRequest {
                    correlation: id.clone(),
                });
            }
            continue;
        }
        if decisions == 0 {
            violations.push(HandshakeViolation::MissingDecision {
                correlation: id.clone(),
            });
        } else if decisions > 1 {
            violations.push(HandshakeViolation::MultipleDecisions {
                correlation: id.clone(),
            });
        }
        if entry.delivery_before_accept {
            violations.push(HandshakeViolation::DeliveryBeforeAccept {
                correlation: id.clone(),
            });
        }
        if expect_acks && entry.delivered != entry.acked {
            violations.push(HandshakeViolation::AckMismatch {
                correlation: id.clone(),
                delivered: entry.delivered,
                acked: entry.acked,
            });
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pem::ClientId;

    fn base_req(seq: u32) -> ServiceRequest {
        let client = ClientId(String::from("h1/ev"));
        ServiceRequest {
            request_id: RequestId::new(client.clone(), seq),
            client_id: client,
            packets: 4,
            earliest_slot: SlotIndex(2),
            deadline_slot: SlotIndex(10),
            shape: ShapeConstraint::Arbitrary,
            priority_hint: None,
            is_emergency: false,
            submission_slot: SlotIndex(0),
        }
    }

    fn ctx(now: u32) -> ClientContext {
        ClientContext {
            now: SlotIndex(now),
            router: AgentId::Router(String::from("h1")),
            retry: true,
            emergency_threshold: 3,
            acks_enabled: true,
        }
    }

    fn server_msg(correlation: RequestId, payload: Payload) -> Message {
        Message {
            sender: AgentId::Server,
            receiver: AgentId::Client(String::from("h1/ev")),
            correlation,
            sent_slot: SlotIndex(1),
            payload,
        }
    }

    #[test]
    fn accept_moves_requested_to_accepted() {
        let mut need = ClientRequestState::new_requested(base_req(1));
        let msg = server_msg(
            need.current_id.clone(),
            Payload::Accept {
                class: PriorityClass::HIGHEST,
            },
        );
        let out = client_on_message(&mut need, &msg, &ctx(1)).unwrap();
        assert!(out.is_none());
        assert_eq!(need.phase, RequestPhase::Accepted);
    }

    #[test]
    fn reject_with_hint_reissues_an_honoring_request() {
        let mut need = ClientRequestState::new_requested(base_req(1));
        let msg = server_msg(
            need.current_id.clone(),
            Payload::Reject(RejectHint {
                earliest_feasible_slot: SlotIndex(18),
                max_packets_feasible_now: 2,
            }),
        );
        let out = client_on_message(&mut need, &msg, &ctx(1)).unwrap().unwrap();
        assert_eq!(need.phase, RequestPhase::Requested);
        assert_eq!(need.rejection_count, 1);
        let Payload::Request(retry) = &out.payload else {
            panic!("expected a resubmission");
        };
        assert_eq!(retry.earliest_slot, SlotIndex(18));
        assert_eq!(retry.request_id.seq, 2);
        assert!(retry.validate(SlotIndex(1)).is_ok());
        assert_eq!(need.current_id, retry.request_id);
    }

    #[test]
    fn duplicate_accept_is_a_protocol_violation() {
        let mut need = ClientRequestState::new_requested(base_req(1));
        let accept = server_msg(
            need.current_id.clone(),
            Payload::Accept {
                class: PriorityClass::HIGHEST,
            },
        );
        client_on_message(&mut need, &accept, &ctx(1)).unwrap();
        let err = client_on_message(&mut need, &accept, &ctx(1)).unwrap_err();
        assert!(matches!(err, ProtocolError::IllegalTransition { .. }));
    }

    #[test]
    fn third_rejection_escalates_to_emergency() {
        let mut need = ClientRequestState::new_requested(base_req(1));
        let hint = RejectHint {
            earliest_feasible_slot: SlotIndex(0),
            max_packets_feasible_now: 0,
        };
        for round in 0..2 {
            let msg = server_msg(need.current_id.clone(), Payload::Reject(hint));
            let out = client_on_message(&mut need, &msg, &ctx(round)).unwrap().unwrap();
            assert_eq!(out.kind(), MessageKind::Request);
        }
        let msg = server_msg(need.current_id.clone(), Payload::Reject(hint));
        let out = client_on_message(&mut need, &msg, &ctx(2)).unwrap().unwrap();
        assert_eq!(out.kind(), MessageKind::Emergency);
        assert_eq!(need.phase, RequestPhase::EmergencyPending);
        let Payload::Emergency(req) = &out.payload else {
            panic!()
        };
        assert!(req.is_emergency);
    }

    #[test]
    fn delivery_counts_and_acks_until_completed() {
        let mut need = ClientRequestState::new_requested(base_req(1));
        let accept = server_msg(
            need.current_id.clone(),
            Payload::Accept {
                class: PriorityClass::HIGHEST,
            },
        );
        client_on_message(&mut need, &accept, &ctx(1)).unwrap();
        let notice = server_msg(
            need.current_id.clone(),
            Payload::DeliveryNotice {
                slot: SlotIndex(3),
                packets: 3,
            },
        );
        let ack = client_on_message(&mut need, &notice, &ctx(3)).unwrap().unwrap();
        assert_eq!(ack.kind(), MessageKind::Ack);
        assert_eq!(need.phase, RequestPhase::PartiallyDelivered);
        let notice = server_msg(
            need.current_id.clone(),
            Payload::DeliveryNotice {
                slot: SlotIndex(4),
                packets: 1,
            },
        );
        client_on_message(&mut need, &notice, &ctx(4)).unwrap();
        assert_eq!(need.phase, RequestPhase::Completed);
        assert_eq!(need.delivered, 4);
    }

    #[test]
    fn escalation_thresholds() {
        assert!(should_escalate(3, 3));
        assert!(!should_escalate(0, 3));
        assert!(!should_escalate(2, 3));
    }

    #[test]
    fn forward_only_router_passes_everything() {
        let batch = alloc::vec![base_req(1), base_req(2), base_req(3)];
        let out = router_process(
            &RouterPolicy::forward_only(),
            batch.clone(),
            &LocalResources { available_packets: 10 },
        );
        assert_eq!(out.forwarded, batch);
        assert!(out.locally_served.is_empty());
    }

    #[test]
    fn local_first_serves_earliest_deadlines_from_surplus() {
        let policy = RouterPolicy {
            mode: RouterMode::LocalFirst,
            local_resources: alloc::vec![String::from("buffer")],
        };
        let mut a = base_req(1);
        a.packets = 1;
        a.deadline_slot = SlotIndex(5);
        let mut b = base_req(2);
        b.packets = 1;
        b.deadline_slot = SlotIndex(3);
        let mut c = base_req(3);
        c.packets = 1;
        c.deadline_slot = SlotIndex(9);
        let out = router_process(
            &policy,
            alloc::vec![a.clone(), b.clone(), c.clone()],
            &LocalResources { available_packets: 2 },
        );
        assert_eq!(out.locally_served, alloc::vec![a, b]);
        assert_eq!(out.forwarded, alloc::vec![c]);
    }

    #[test]
    fn local_first_with_zero_surplus_forwards_all() {
        let policy = RouterPolicy {
            mode: RouterMode::LocalFirst,
            local_resources: alloc::vec![String::from("buffer")],
        };
        let batch = alloc::vec![base_req(1), base_req(2)];
        let out = router_process(&policy, batch.clone(), &LocalResources::default());
        assert_eq!(out.forwarded, batch);
        assert!(out.locally_served.is_empty());
    }

    #[test]
    fn router_conserves_packets() {
        let policy = RouterPolicy {
            mode: RouterMode::LocalFirst,
            local_resources: alloc::vec![String::from("buffer")],
        };
        let batch: Vec<ServiceRequest> = (1..=5)
            .map(|i| {
                let mut r = base_req(i);
                r.packets = i;
                r.deadline_slot = SlotIndex(20 - i);
                r
            })
            .collect();
        let submitted: u32 = batch.iter().map(|r| r.packets).sum();
        let out = router_process(&policy, batch, &LocalResources { available_packets: 6 });
        let forwarded: u32 = out.forwarded.iter().map(|r| r.packets).sum();
        let local: u32 = out.locally_served.iter().map(|r| r.packets).sum();
        assert_eq!(forwarded + local, submitted);
    }

    #[test]
    fn instant_lossless_channel_delivers_same_slot() {
        let mut ch = SimChannel::new(ChannelConfig::default(), 7).unwrap();
        let msg = server_msg(base_req(1).request_id, Payload::Accept {
            class: PriorityClass::HIGHEST,
        });
        assert_eq!(ch.send(msg, SlotIndex(5)), SendOutcome::Scheduled(SlotIndex(5)));
        let got = ch.drain_to(SlotIndex(5), |_| true);
        assert_eq!(got.len(), 1);
    }

    #[test]
    fn delay_is_additive() {
        let cfg = ChannelConfig {
            delay_slots: 2,
            loss_probability: 0.0,
        };
        let mut ch = SimChannel::new(cfg, 7).unwrap();
        let msg = server_msg(base_req(1).request_id, Payload::Accept {
            class: PriorityClass::HIGHEST,
        });
        assert_eq!(ch.send(msg, SlotIndex(5)), SendOutcome::Scheduled(SlotIndex(7)));
        assert!(ch.drain_to(SlotIndex(6), |_| true).is_empty());
        assert_eq!(ch.drain_to(SlotIndex(7), |_| true).len(), 1);
    }

    #[test]
    fn total_loss_is_rejected_as_config() {
        let cfg = ChannelConfig {
            delay_slots: 0,
            loss_probability: 1.0,
        };
        assert!(SimChannel::new(cfg, 0).is_err());
    }

    #[test]
    fn drain_order_is_canonical() {
        let mut ch = SimChannel::new(ChannelConfig::default(), 7).unwrap();
        let a = Message {
            sender: AgentId::Client(String::from("b")),
            receiver: AgentId::Server,
            correlation: base_req(1).request_id,
            sent_slot: SlotIndex(0),
            payload: Payload::Ack { slot: SlotIndex(0), packets: 1 },
        };
        let b = Message {
            sender: AgentId::Client(String::from("a")),
            receiver: AgentId::Server,
            correlation: base_req(2).request_id,
            sent_slot: SlotIndex(0),
            payload: Payload::Ack { slot: SlotIndex(0), packets: 1 },
        };
        ch.send(a, SlotIndex(0));
        ch.send(b, SlotIndex(0));
        let got = ch.drain_to(SlotIndex(0), |_| true);
        // same arrival slot: sender id orders before send sequence
        assert_eq!(got[0].sender, AgentId::Client(String::from("a")));
        assert_eq!(got[1].sender, AgentId::Client(String::from("b")));
    }

    #[test]
    fn lossy_channel_is_seed_deterministic() {
        let cfg = ChannelConfig {
            delay_slots: 0,
            loss_probability: 0.5,
        };
        let outcomes = |seed: u64| {
            let mut ch = SimChannel::new(cfg, seed).unwrap();
            (0..32)
                .map(|i| {
                    let msg = server_msg(base_req(i).request_id, Payload::Accept {
                        class: PriorityClass::HIGHEST,
                    });
                    ch.send(msg, SlotIndex(i))
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(outcomes(42), outcomes(42));
        assert_ne!(outcomes(42), outcomes(43), "different seeds diverge");
    }

    #[test]
    fn trace_line_rendering_is_stable() {
        let req = base_req(1);
        let msg = Message {
            sender: AgentId::Client(String::from("h1/ev")),
            receiver: AgentId::Router(String::from("h1")),
            correlation: req.request_id.clone(),
            sent_slot: SlotIndex(0),
            payload: Payload::Request(req),
        };
        assert_eq!(
            render_trace_line(&msg),
            "{\"slot\":0,\"kind\":\"request\",\"sender\":\"client:h1/ev\",\"receiver\":\"router:h1\",\
             \"correlation\":\"h1/ev#1\",\"payload\":{\"packets\":4,\"earliest\":2,\"deadline\":10,\
             \"shape\":\"arbitrary\",\"submitted\":0}}"
        );
    }

    #[test]
    fn handshake_checker_flags_unanswered_and_unordered() {
        let req = base_req(1);
        let id = req.request_id.clone();
        let request = Message {
            sender: AgentId::Client(String::from("h1/ev")),
            receiver: AgentId::Server,
            correlation: id.clone(),
            sent_slot: SlotIndex(0),
            payload: Payload::Request(req),
        };
        let notice = server_msg(
            id.clone(),
            Payload::DeliveryNotice {
                slot: SlotIndex(1),
                packets: 1,
            },
        );
        let violations = check_handshake(&[request, notice], false);
        assert!(violations
            .iter()
            .any(|v| matches!(v, HandshakeViolation::MissingDecision { .. })));
        assert!(violations
            .iter()
            .any(|v| matches!(v, HandshakeViolation::DeliveryBeforeAccept { .. })));
    }
}
