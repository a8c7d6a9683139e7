//! Deterministic slot-stepped orchestration of the whole virtual
//! microgrid: flexible loads issue packetized requests, household routers
//! forward or serve them locally, the energy server runs its admission /
//! classification / slicing / allocation pipeline, and physical dispatch
//! is realized against actual generation — one fixed phase order per
//! slot, every race canonicalized, every run a pure function of its
//! configuration.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::loads::{
    ev_request, heating_requests, thermal_step, washing_machine_request, BaseloadTrace, EvSession,
    ThermalState, WashingMachineProgram,
};
use crate::pem::{
    ClientId, PacketSpec, RequestId, RequestRejection, Schedule, ServiceRequest, SlotIndex,
    StorageUnitId,
};
use crate::protocol::{
    check_handshake, client_on_message, render_trace_line, AgentId, ChannelConfig, ClientContext,
    ClientRequestState, HandshakeViolation, Message, MessageKind, Payload, RejectHint,
    RequestPhase, RouterMode, SendOutcome, SimChannel,
};
use crate::resources::{
    forecast_generation, realize_generation, ForecastErrorModel, GenerationProfile, StorageState,
    StorageTier,
};
use crate::server::{
    AdmissionDecision, AdmissionEvent, BorrowRecord, EnergyServer, OrderingRule, PlanningInputs,
    PolicyError, ServerPolicy, SliceShares, StorageView,
};

/// Outdoor temperature over the run, shared by all heated spaces.
#[derive(Debug, Clone, PartialEq)]
pub enum OutdoorProfile {
    Constant(f64),
    Trace(Vec<f64>),
}

impl OutdoorProfile {
    pub fn at(&self, slot: u32) -> f64 {
        match self {
            OutdoorProfile::Constant(c) => *c,
            OutdoorProfile::Trace(v) => v
                .get(slot as usize)
                .copied()
                .or_else(|| v.last().copied())
                .unwrap_or(0.0),
        }
    }
}

/// Server-side tunables as they appear in a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub class_shares: Vec<f64>,
    pub slack_threshold: u32,
    pub ordering: OrderingRule,
    pub emergency_threshold: u32,
    pub emergency_budget_per_day: u32,
    pub planning_horizon_slots: u32,
    pub acks_enabled: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            class_shares: alloc::vec![0.5, 0.5],
            slack_threshold: 6,
            ordering: OrderingRule::EarliestDeadline,
            emergency_threshold: 3,
            emergency_budget_per_day: 1,
            planning_horizon_slots: 144,
            acks_enabled: true,
        }
    }
}

impl ServerConfig {
    pub fn build_policy(&self) -> Result<ServerPolicy, PolicyError> {
        let policy = ServerPolicy {
            shares: SliceShares::from_fractions(&self.class_shares)?,
            slack_threshold: self.slack_threshold,
            ordering: self.ordering,
            emergency_threshold: self.emergency_threshold,
            emergency_budget_per_day: self.emergency_budget_per_day,
            planning_horizon_slots: self.planning_horizon_slots,
        };
        policy.validate()?;
        Ok(policy)
    }
}

/// One server-pool storage unit.
#[derive(Debug, Clone, PartialEq)]
pub struct StorageUnitConfig {
    pub name: String,
    pub tier: StorageTier,
    pub capacity_packets: u32,
    pub charge_rate: u32,
    pub discharge_rate: u32,
    /// Round-trip efficiency in thousandths (1000 = lossless).
    pub eta_permille: u32,
    pub initial_soc: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalBufferConfig {
    pub capacity_packets: u32,
    pub discharge_rate: u32,
    pub initial_soc: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WashingMachineConfig {
    pub submit_slot: u32,
    pub packets: u32,
    pub earliest_start: u32,
    pub ready_by: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvConfig {
    pub arrival_slot: u32,
    pub departure_slot: u32,
    pub energy_needed_wh: f64,
    pub max_packets_per_slot: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatingConfig {
    pub initial_temp_c: f64,
    pub t_min_c: f64,
    pub t_max_c: f64,
    /// Thermal resistance in degrees Celsius per watt.
    pub r_thermal: f64,
    /// Thermal capacitance in watt-hours per degree.
    pub c_thermal: f64,
    pub heater_w: f64,
    pub occupied: bool,
    pub unoccupied_relax_c: f64,
    pub lookahead_slots: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HouseholdConfig {
    pub name: String,
    pub router_mode: RouterMode,
    pub local_buffer: Option<LocalBufferConfig>,
    pub washing_machines: Vec<WashingMachineConfig>,
    pub evs: Vec<EvConfig>,
    pub heating: Vec<HeatingConfig>,
}

impl HouseholdConfig {
    pub fn forward_only(name: &str) -> Self {
        Self {
            name: String::from(name),
            router_mode: RouterMode::ForwardOnly,
            local_buffer: None,
            washing_machines: Vec::new(),
            evs: Vec::new(),
            heating: Vec::new(),
        }
    }
}

/// A complete scenario: one of these fully determines a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub packet: PacketSpec,
    pub horizon_slots: u32,
    pub seed: u64,
    pub server: ServerConfig,
    pub channel: ChannelConfig,
    pub source: GenerationProfile,
    pub forecast_error: ForecastErrorModel,
    pub baseload: BaseloadTrace,
    pub outdoor: OutdoorProfile,
    pub storage: Vec<StorageUnitConfig>,
    pub households: Vec<HouseholdConfig>,
}

impl ScenarioConfig {
    /// A minimal empty scenario; tests and builders start from here.
    pub fn empty(horizon_slots: u32) -> Self {
        Self {
            packet: PacketSpec::default(),
            horizon_slots,
            seed: 0,
            server: ServerConfig::default(),
            channel: ChannelConfig::default(),
            source: GenerationProfile::Constant { packets_per_slot: 0 },
            forecast_error: ForecastErrorModel::None,
            baseload: BaseloadTrace::constant(0, horizon_slots),
            outdoor: OutdoorProfile::Constant(10.0),
            storage: Vec::new(),
            households: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.horizon_slots == 0 {
            return Err(ScenarioError::ZeroHorizon);
        }
        self.server.build_policy().map_err(ScenarioError::Policy)?;
        self.channel.validate().map_err(|_| ScenarioError::Channel {
            p: self.channel.loss_probability,
        })?;
        self.baseload
            .check_len(self.horizon_slots)
            .map_err(|e| ScenarioError::Load {
                context: String::from("baseload"),
                message: alloc::format!("{e}"),
            })?;
        if let GenerationProfile::Trace(t) = &self.source {
            if t.len() as u32 != self.horizon_slots {
                return Err(ScenarioError::Load {
                    context: String::from("source trace"),
                    message: alloc::format!(
                        "{} entries for a {}-slot run",
                        t.len(),
                        self.horizon_slots
                    ),
                });
            }
        }
        for s in &self.storage {
            StorageState::new(
                s.initial_soc,
                s.capacity_packets,
                s.charge_rate,
                s.discharge_rate,
                s.eta_permille,
                s.tier,
            )
            .map_err(|e| ScenarioError::Load {
                context: alloc::format!("storage unit {}", s.name),
                message: alloc::format!("{e}"),
            })?;
        }
        let mut names = alloc::collections::BTreeSet::new();
        for h in &self.households {
            if !names.insert(h.name.clone()) {
                return Err(ScenarioError::DuplicateHousehold {
                    name: h.name.clone(),
                });
            }
            if h.router_mode == RouterMode::LocalFirst && h.local_buffer.is_none() {
                return Err(ScenarioError::LocalFirstWithoutBuffer {
                    household: h.name.clone(),
                });
            }
            if let Some(b) = &h.local_buffer {
                StorageState::new(
                    b.initial_soc,
                    b.capacity_packets,
                    b.discharge_rate.max(1),
                    b.discharge_rate,
                    1000,
                    StorageTier::Buffer,
                )
                .map_err(|e| ScenarioError::Load {
                    context: alloc::format!("local buffer of {}", h.name),
                    message: alloc::format!("{e}"),
                })?;
            }
            for (i, wm) in h.washing_machines.iter().enumerate() {
                let prog = WashingMachineProgram {
                    packets: wm.packets,
                    earliest_start: SlotIndex(wm.earliest_start),
                    ready_by_slot: SlotIndex(wm.ready_by),
                };
                let client = ClientId(alloc::format!("{}/wm{i}", h.name));
                washing_machine_request(&prog, client, 1, SlotIndex(wm.submit_slot)).map_err(
                    |e| ScenarioError::Load {
                        context: alloc::format!("washing machine {i} of {}", h.name),
                        message: alloc::format!("{e}"),
                    },
                )?;
                if wm.ready_by >= self.horizon_slots || wm.submit_slot > wm.earliest_start {
                    return Err(ScenarioError::Load {
                        context: alloc::format!("washing machine {i} of {}", h.name),
                        message: String::from("program window outside the run"),
                    });
                }
            }
            for (i, ev) in h.evs.iter().enumerate() {
                let session = EvSession {
                    arrival_slot: SlotIndex(ev.arrival_slot),
                    departure_slot: SlotIndex(ev.departure_slot),
                    energy_needed_wh: ev.energy_needed_wh,
                    max_packets_per_slot: ev.max_packets_per_slot,
                };
                let client = ClientId(alloc::format!("{}/ev{i}", h.name));
                ev_request(&session, &self.packet, client, 1).map_err(|e| ScenarioError::Load {
                    context: alloc::format!("EV {i} of {}", h.name),
                    message: alloc::format!("{e}"),
                })?;
                if ev.departure_slot > self.horizon_slots {
                    return Err(ScenarioError::Load {
                        context: alloc::format!("EV {i} of {}", h.name),
                        message: String::from("departure beyond the run"),
                    });
                }
            }
            for (i, heat) in h.heating.iter().enumerate() {
                let state = heating_state(heat);
                state.validate().map_err(|e| ScenarioError::Load {
                    context: alloc::format!("heating {i} of {}", h.name),
                    message: alloc::format!("{e}"),
                })?;
                if heat.lookahead_slots == 0 {
                    return Err(ScenarioError::Load {
                        context: alloc::format!("heating {i} of {}", h.name),
                        message: String::from("lookahead must be at least 1"),
                    });
                }
                if state.heater_packets_per_slot(&self.packet) == 0 {
                    return Err(ScenarioError::Load {
                        context: alloc::format!("heating {i} of {}", h.name),
                        message: String::from("heater cannot absorb a single packet per slot"),
                    });
                }
            }
        }
        Ok(())
    }
}

fn heating_state(cfg: &HeatingConfig) -> ThermalState {
    ThermalState {
        indoor_temp_c: cfg.initial_temp_c,
        t_min_c: cfg.t_min_c,
        t_max_c: cfg.t_max_c,
        r_thermal: cfg.r_thermal,
        c_thermal: cfg.c_thermal,
        heater_w: cfg.heater_w,
        occupied: cfg.occupied,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioError {
    ZeroHorizon,
    Policy(PolicyError),
    Channel { p: f64 },
    DuplicateHousehold { name: String },
    LocalFirstWithoutBuffer { household: String },
    Load { context: String, message: String },
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioError::ZeroHorizon => f.write_str("horizon must be at least one slot"),
            ScenarioError::Policy(e) => write!(f, "server policy: {e}"),
            ScenarioError::Channel { p } => write!(f, "loss probability {p} outside [0, 1)"),
            ScenarioError::DuplicateHousehold { name } => {
                write!(f, "duplicate household name {name}")
            }
            ScenarioError::LocalFirstWithoutBuffer { household } => write!(
                f,
                "household {household}: local-first routing needs a local buffer"
            ),
            ScenarioError::Load { context, message } => write!(f, "{context}: {message}"),
        }
    }
}

/// A run failure after validation: an internal invariant did not hold.
#[derive(Debug, Clone, PartialEq)]
pub enum SimError {
    Config(ScenarioError),
    Invariant { slot: u32, message: String },
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::Config(e) => write!(f, "configuration: {e}"),
            SimError::Invariant { slot, message } => {
                write!(f, "invariant breached at slot {slot}: {message}")
            }
        }
    }
}

/// Recorded noteworthy happenings, beyond the message trace.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Rejected { slot: u32, request: RequestId, hint: RejectHint },
    ValidationRejected { slot: u32, request: RequestId, reason: RequestRejection },
    EmergencyRaised { slot: u32, request: RequestId },
    EmergencyAccepted { slot: u32, request: RequestId },
    EmergencyRejected { slot: u32, request: RequestId },
    EmergencyDemoted { slot: u32, request: RequestId },
    DeadlineBreach { slot: u32, request: RequestId, remaining: u32 },
    MessageDropped { slot: u32, kind: MessageKind, correlation: RequestId },
    BaseloadShortfall { slot: u32, packets: u32 },
    LocalCommit { slot: u32, request: RequestId, packets: u32 },
}

/// One slot of realized dispatch, the row behind the exported table.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchRecord {
    pub slot: u32,
    pub gen_forecast: u32,
    pub gen_actual: u32,
    pub baseload: u32,
    pub baseload_served: u32,
    /// Delivered per class, running blocks included.
    pub class_alloc: Vec<u32>,
    pub charge: u32,
    pub discharge: u32,
    pub soc: u32,
    pub spill: u32,
    pub local_discharge: u32,
    pub local_delivered: u32,
    pub capacity_total: u32,
}

/// Per-slot, per-class slice accounting row.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceRecord {
    pub slot: u32,
    pub class_id: u8,
    pub allocated: u32,
    pub slice: u32,
    pub borrowed: u32,
    pub charge: u32,
    pub discharge: u32,
    pub spill: u32,
}

/// Service-quality measures of one run, all recomputable from the trace,
/// schedule and dispatch records.
#[derive(Debug, Clone, PartialEq)]
pub struct KpiSet {
    pub acceptance_rate: f64,
    pub rejection_rate: f64,
    /// No decision was ever taken; the rates above are the 1.0 / 0.0
    /// convention, not measurements.
    pub no_demand: bool,
    pub emergency_count: u64,
    pub deadline_miss_count: u64,
    pub unserved_packets: u64,
    pub spill_packets: u64,
    pub storage_cycles: f64,
    pub mean_request_latency_slots: f64,
    pub slice_utilization: Vec<f64>,
}

/// Everything a run produces. KPIs carry no hidden state: they are
/// derived from the other fields and [`compute_kpis`] re-derives them.
#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub horizon: u32,
    pub trace: Vec<Message>,
    pub schedule: Schedule,
    pub dispatch: Vec<DispatchRecord>,
    pub slices: Vec<SliceRecord>,
    pub borrows: Vec<(u32, BorrowRecord)>,
    pub events: Vec<Event>,
    pub kpis: KpiSet,
    pub acks_enabled: bool,
    pub lossless: bool,
    pub storage_capacity_total: u32,
}

impl SimResult {
    /// Canonical newline-delimited rendering of the trace; the replay
    /// gate compares these bytes.
    pub fn trace_lines(&self) -> String {
        let mut out = String::new();
        for msg in &self.trace {
            out.push_str(&render_trace_line(msg));
            out.push('\n');
        }
        out
    }

    /// All requests carried by trace messages, keyed by id.
    pub fn requests(&self) -> BTreeMap<RequestId, ServiceRequest> {
        self.trace
            .iter()
            .filter_map(|m| match &m.payload {
                Payload::Request(r) | Payload::Emergency(r) => {
                    Some((r.request_id.clone(), r.clone()))
                }
                _ => None,
            })
            .collect()
    }

    /// Handshake conformance over the full trace.
    pub fn handshake_violations(&self) -> Vec<HandshakeViolation> {
        check_handshake(&self.trace, self.acks_enabled && self.lossless)
    }
}

enum LoadKind {
    Washing(WashingMachineConfig),
    Ev(EvConfig),
    Heating {
        cfg: HeatingConfig,
        thermal: ThermalState,
        outstanding: BTreeMap<u32, RequestId>,
    },
}

struct ClientAgent {
    id: ClientId,
    agent: AgentId,
    router: AgentId,
    kind: LoadKind,
    needs: Vec<ClientRequestState>,
    by_request: BTreeMap<RequestId, usize>,
    retry: bool,
    next_seq: u32,
}

impl ClientAgent {
    fn track(&mut self, req: ServiceRequest) {
        let id = req.request_id.clone();
        self.needs.push(ClientRequestState::new_requested(req));
        self.by_request.insert(id, self.needs.len() - 1);
    }
}

struct LocalCommitment {
    req: ServiceRequest,
    remaining: u32,
}

struct RouterAgent {
    agent: AgentId,
    mode: RouterMode,
    buffer: Option<StorageState>,
    committed: Vec<LocalCommitment>,
}

impl RouterAgent {
    /// Whether the household can still serve `req` locally by its
    /// deadline, on top of everything already committed: enough state of
    /// charge overall, and a slot-forward check that the discharge rate
    /// sustains every deadline. Blocks always go to the central server.
    fn can_commit(&self, req: &ServiceRequest, now: u32, horizon: u32) -> bool {
        let Some(buffer) = &self.buffer else {
            return false;
        };
        if self.mode != RouterMode::LocalFirst {
            return false;
        }
        if matches!(req.shape, crate::pem::ShapeConstraint::Contiguous) {
            return false;
        }
        let total: u64 = self
            .committed
            .iter()
            .map(|c| u64::from(c.remaining))
            .sum::<u64>()
            + u64::from(req.packets);
        if total > u64::from(buffer.soc()) {
            return false;
        }
        // (deadline, earliest, remaining, per-slot cap), earliest
        // deadlines served first.
        let mut queue: Vec<(u32, u32, u32, u32)> = self
            .committed
            .iter()
            .map(|c| {
                (
                    c.req.deadline_slot.index(),
                    c.req.earliest_slot.index(),
                    c.remaining,
                    c.req.shape.slot_limit(),
                )
            })
            .collect();
        queue.push((
            req.deadline_slot.index(),
            req.earliest_slot.index(),
            req.packets,
            req.shape.slot_limit(),
        ));
        queue.sort_unstable();
        for slot in now..horizon {
            let mut budget = buffer.discharge_rate();
            for item in queue.iter_mut() {
                if budget == 0 {
                    break;
                }
                if item.2 == 0 || item.1 > slot {
                    continue;
                }
                let take = item.2.min(budget).min(item.3);
                item.2 -= take;
                budget -= take;
            }
            if queue.iter().any(|i| i.2 > 0 && i.0 <= slot) {
                return false;
            }
            if queue.iter().all(|i| i.2 == 0) {
                return true;
            }
        }
        queue.iter().all(|i| i.2 == 0)
    }
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(tag)
}

/// Runs a scenario to completion. Fully deterministic in the config.
pub fn run(config: &ScenarioConfig) -> Result<SimResult, SimError> {
    config.validate().map_err(SimError::Config)?;
    let n = config.horizon_slots;
    let spec = config.packet;
    let slots_per_day = spec.slots_per_day().max(1);

    let gen_forecast = forecast_generation(&config.source, 0..n, slots_per_day);
    let gen_actual = realize_generation(
        &gen_forecast,
        config.forecast_error,
        derive_seed(config.seed, 0x67656e),
    );
    let outdoor: Vec<f64> = (0..n).map(|t| config.outdoor.at(t)).collect();

    let policy = config
        .server
        .build_policy()
        .map_err(|e| SimError::Config(ScenarioError::Policy(e)))?;
    let classes = policy.num_classes() as usize;
    let mut server = EnergyServer::new(policy, n, slots_per_day)
        .map_err(|e| SimError::Config(ScenarioError::Policy(e)))?;

    // Server storage pool: buffer tiers ahead of cache, names break ties.
    let mut storage_cfg: Vec<&StorageUnitConfig> = config.storage.iter().collect();
    storage_cfg.sort_by_key(|s| (s.tier != StorageTier::Buffer, s.name.clone()));
    let mut storage: Vec<(StorageUnitId, StorageState)> = storage_cfg
        .iter()
        .map(|s| {
            (
                StorageUnitId::from(s.name.as_str()),
                StorageState::new(
                    s.initial_soc,
                    s.capacity_packets,
                    s.charge_rate,
                    s.discharge_rate,
                    s.eta_permille,
                    s.tier,
                )
                .expect("validated"),
            )
        })
        .collect();
    let storage_capacity_total: u32 = storage.iter().map(|(_, s)| s.capacity()).sum();

    let mut channel =
        SimChannel::new(config.channel, derive_seed(config.seed, 0x636861)).map_err(|_| {
            SimError::Config(ScenarioError::Channel {
                p: config.channel.loss_probability,
            })
        })?;

    let mut clients: Vec<ClientAgent> = Vec::new();
    let mut routers: Vec<RouterAgent> = Vec::new();
    for h in &config.households {
        let router_agent = AgentId::Router(h.name.clone());
        routers.push(RouterAgent {
            agent: router_agent.clone(),
            mode: h.router_mode,
            buffer: h.local_buffer.as_ref().map(|b| {
                StorageState::new(
                    b.initial_soc,
                    b.capacity_packets,
                    b.discharge_rate.max(1),
                    b.discharge_rate,
                    1000,
                    StorageTier::Buffer,
                )
                .expect("validated")
            }),
            committed: Vec::new(),
        });
        let mut add = |suffix: String, kind: LoadKind, retry: bool| {
            let id = ClientId(alloc::format!("{}/{}", h.name, suffix));
            clients.push(ClientAgent {
                agent: AgentId::Client(id.0.clone()),
                router: router_agent.clone(),
                id,
                kind,
                needs: Vec::new(),
                by_request: BTreeMap::new(),
                retry,
                next_seq: 1,
            });
        };
        for (i, wm) in h.washing_machines.iter().enumerate() {
            add(alloc::format!("wm{i}"), LoadKind::Washing(*wm), true);
        }
        for (i, ev) in h.evs.iter().enumerate() {
            add(alloc::format!("ev{i}"), LoadKind::Ev(*ev), true);
        }
        for (i, heat) in h.heating.iter().enumerate() {
            add(
                alloc::format!("heat{i}"),
                LoadKind::Heating {
                    cfg: *heat,
                    thermal: heating_state(heat),
                    outstanding: BTreeMap::new(),
                },
                false,
            );
        }
    }
    for c in &clients {
        if let LoadKind::Heating { cfg, .. } = &c.kind {
            let cap = heating_state(cfg).heater_packets_per_slot(&spec);
            server.set_intake_cap(c.id.clone(), cap);
        }
    }

    let mut trace: Vec<Message> = Vec::new();
    let mut events: Vec<Event> = Vec::new();
    let mut schedule = Schedule::new(SlotIndex(0), n);
    let mut dispatch_records: Vec<DispatchRecord> = Vec::new();
    let mut slice_records: Vec<SliceRecord> = Vec::new();
    let mut borrows: Vec<(u32, BorrowRecord)> = Vec::new();

    fn send(
        msg: Message,
        now: SlotIndex,
        channel: &mut SimChannel,
        trace: &mut Vec<Message>,
        events: &mut Vec<Event>,
    ) {
        trace.push(msg.clone());
        if let SendOutcome::Dropped = channel.send(msg.clone(), now) {
            events.push(Event::MessageDropped {
                slot: now.index(),
                kind: msg.kind(),
                correlation: msg.correlation,
            });
        }
    }

    for t in 0..n {
        let now = SlotIndex(t);

        // Phase 1: loads turn physical needs into requests.
        for client in clients.iter_mut() {
            let new_requests = generate_requests(client, now, &spec, &outdoor, n);
            for req in new_requests {
                let msg = Message {
                    sender: client.agent.clone(),
                    receiver: client.router.clone(),
                    correlation: req.request_id.clone(),
                    sent_slot: now,
                    payload: Payload::Request(req.clone()),
                };
                client.track(req);
                send(msg, now, &mut channel, &mut trace, &mut events);
            }
        }

        // Phase 2: routers either commit requests to household resources
        // or forward them to the server. Emergencies always go through.
        for router in routers.iter_mut() {
            let inbox = channel.drain_to(now, |r| *r == router.agent);
            for msg in inbox {
                match &msg.payload {
                    Payload::Request(req) | Payload::Emergency(req) => {
                        let emergency = matches!(msg.payload, Payload::Emergency(_));
                        if !emergency && router.can_commit(req, t, n) {
                            router.committed.push(LocalCommitment {
                                req: req.clone(),
                                remaining: req.packets,
                            });
                            events.push(Event::LocalCommit {
                                slot: t,
                                request: req.request_id.clone(),
                                packets: req.packets,
                            });
                            let accept = Message {
                                sender: router.agent.clone(),
                                receiver: msg.sender.clone(),
                                correlation: msg.correlation.clone(),
                                sent_slot: now,
                                payload: Payload::Accept {
                                    class: crate::pem::PriorityClass::HIGHEST,
                                },
                            };
                            send(accept, now, &mut channel, &mut trace, &mut events);
                        } else {
                            let forward = Message {
                                sender: router.agent.clone(),
                                receiver: AgentId::Server,
                                correlation: msg.correlation.clone(),
                                sent_slot: now,
                                payload: msg.payload.clone(),
                            };
                            send(forward, now, &mut channel, &mut trace, &mut events);
                        }
                    }
                    // Acks addressed to the router need no reaction.
                    _ => {}
                }
            }
        }

        // Phase 3+4: transport delivers and the server pipeline runs —
        // replan against the rolling horizon, then decide arrivals.
        let inputs = PlanningInputs {
            gen_forecast: &gen_forecast,
            baseload: &config.baseload.0,
            storage: storage
                .iter()
                .map(|(name, s)| StorageView::of(name, s))
                .collect(),
        };
        server.replan(now, &inputs);
        let inbox = channel.drain_to(now, |r| *r == AgentId::Server);
        for msg in inbox {
            let (req, emergency) = match &msg.payload {
                Payload::Request(r) => (r, false),
                Payload::Emergency(r) => (r, true),
                _ => continue, // acks et al.
            };
            let decision = match req.validate(now) {
                Err(reason) => {
                    events.push(Event::ValidationRejected {
                        slot: t,
                        request: req.request_id.clone(),
                        reason,
                    });
                    AdmissionDecision::Reject {
                        hint: RejectHint {
                            earliest_feasible_slot: now,
                            max_packets_feasible_now: 0,
                        },
                    }
                }
                Ok(()) => {
                    let (decision, admission_events) = if emergency {
                        server.handle_emergency(req.clone(), now, &inputs)
                    } else {
                        server.admit(req.clone(), now, &inputs)
                    };
                    for e in admission_events {
                        events.push(match e {
                            AdmissionEvent::EmergencyAccepted { request } => {
                                Event::EmergencyAccepted { slot: t, request }
                            }
                            AdmissionEvent::EmergencyRejected { request } => {
                                Event::EmergencyRejected { slot: t, request }
                            }
                            AdmissionEvent::EmergencyDemoted { request } => {
                                Event::EmergencyDemoted { slot: t, request }
                            }
                            AdmissionEvent::DuplicateRequest { request } => {
                                Event::ValidationRejected {
                                    slot: t,
                                    request,
                                    reason: RequestRejection::WindowInPast,
                                }
                            }
                        });
                    }
                    decision
                }
            };
            let payload = match &decision {
                AdmissionDecision::Accept { class } => Payload::Accept { class: *class },
                AdmissionDecision::Reject { hint } => {
                    events.push(Event::Rejected {
                        slot: t,
                        request: req.request_id.clone(),
                        hint: *hint,
                    });
                    Payload::Reject(*hint)
                }
            };
            let reply = Message {
                sender: AgentId::Server,
                receiver: AgentId::Client(req.client_id.0.clone()),
                correlation: msg.correlation.clone(),
                sent_slot: now,
                payload,
            };
            send(reply, now, &mut channel, &mut trace, &mut events);
        }

        // Phase 5: physical dispatch — household-local deliveries first,
        // then the central pool against realized generation.
        let mut delivered_by_client: BTreeMap<ClientId, u32> = BTreeMap::new();
        let mut local_discharge = 0u32;
        let mut local_delivered = 0u32;
        for router in routers.iter_mut() {
            if router.committed.is_empty() {
                continue;
            }
            let Some(buffer) = router.buffer.as_mut() else {
                continue;
            };
            let mut budget = buffer.discharge_rate().min(buffer.soc());
            router.committed.sort_by(|a, b| {
                (a.req.deadline_slot, a.req.submission_slot, &a.req.request_id).cmp(&(
                    b.req.deadline_slot,
                    b.req.submission_slot,
                    &b.req.request_id,
                ))
            });
            for item in router.committed.iter_mut() {
                if budget == 0 {
                    break;
                }
                if item.req.earliest_slot > now {
                    continue;
                }
                let take = item.remaining.min(budget).min(item.req.shape.slot_limit());
                if take == 0 {
                    continue;
                }
                crate::resources::apply_storage_action(buffer, -i64::from(take))
                    .expect("commitment check bounds the draw");
                budget -= take;
                item.remaining -= take;
                local_discharge += take;
                local_delivered += take;
                schedule.record_delivery(now, item.req.request_id.clone(), take);
                *delivered_by_client
                    .entry(item.req.client_id.clone())
                    .or_default() += take;
                let notice = Message {
                    sender: router.agent.clone(),
                    receiver: AgentId::Client(item.req.client_id.0.clone()),
                    correlation: item.req.request_id.clone(),
                    sent_slot: now,
                    payload: Payload::DeliveryNotice {
                        slot: now,
                        packets: take,
                    },
                };
                send(notice, now, &mut channel, &mut trace, &mut events);
            }
            router.committed.retain(|c| c.remaining > 0);
        }

        let out = server.dispatch_slot(
            now,
            gen_actual[t as usize],
            config.baseload.at(now),
            &mut storage,
        );
        if out.baseload_shortfall > 0 {
            events.push(Event::BaseloadShortfall {
                slot: t,
                packets: out.baseload_shortfall,
            });
        }
        for d in &out.deliveries {
            schedule.record_delivery(now, d.request.clone(), d.packets);
            *delivered_by_client.entry(d.client.clone()).or_default() += d.packets;
            let notice = Message {
                sender: AgentId::Server,
                receiver: AgentId::Client(d.client.0.clone()),
                correlation: d.request.clone(),
                sent_slot: now,
                payload: Payload::DeliveryNotice {
                    slot: now,
                    packets: d.packets,
                },
            };
            send(notice, now, &mut channel, &mut trace, &mut events);
        }
        for (unit, delta) in &out.storage_actions {
            schedule.record_storage(now, unit, *delta);
            let notice = Message {
                sender: AgentId::Server,
                receiver: AgentId::Storage(unit.clone()),
                correlation: RequestId::new(ClientId(unit.clone()), t),
                sent_slot: now,
                payload: Payload::StorageNotice {
                    slot: now,
                    delta: *delta,
                },
            };
            send(notice, now, &mut channel, &mut trace, &mut events);
        }
        for (request, remaining) in &out.breaches {
            events.push(Event::DeadlineBreach {
                slot: t,
                request: request.clone(),
                remaining: *remaining,
            });
        }
        for b in &out.borrows {
            borrows.push((t, b.clone()));
        }

        let soc_total: u32 = storage.iter().map(|(_, s)| s.soc()).sum();
        let class_alloc: Vec<u32> = (0..classes)
            .map(|c| out.sliced_allocated[c] + out.locked_allocated[c])
            .collect();
        let flex_delivered: u32 = class_alloc.iter().sum();
        if gen_actual[t as usize] + out.discharge_total
            != out.baseload_served + flex_delivered + out.charge_total + out.spill
        {
            return Err(SimError::Invariant {
                slot: t,
                message: String::from("slot energy balance does not close"),
            });
        }
        for c in 0..classes {
            let borrowed: u32 = out
                .borrows
                .iter()
                .filter(|b| b.class_idx == c)
                .map(|b| b.packets)
                .sum();
            if out.sliced_allocated[c] > out.slices[c] + borrowed {
                return Err(SimError::Invariant {
                    slot: t,
                    message: alloc::format!(
                        "class {} allocation exceeds slice plus borrows",
                        c + 1
                    ),
                });
            }
            slice_records.push(SliceRecord {
                slot: t,
                class_id: (c + 1) as u8,
                allocated: out.sliced_allocated[c],
                slice: out.slices[c],
                borrowed,
                charge: out.charge_total,
                discharge: out.discharge_total,
                spill: out.spill,
            });
        }
        dispatch_records.push(DispatchRecord {
            slot: t,
            gen_forecast: gen_forecast[t as usize],
            gen_actual: gen_actual[t as usize],
            baseload: config.baseload.at(now),
            baseload_served: out.baseload_served,
            class_alloc,
            charge: out.charge_total,
            discharge: out.discharge_total,
            soc: soc_total,
            spill: out.spill,
            local_discharge,
            local_delivered,
            capacity_total: out.capacity_total,
        });

        // Phase 6: clients digest decisions and deliveries, acknowledge,
        // resubmit or escalate.
        for client in clients.iter_mut() {
            let inbox = channel.drain_to(now, |r| *r == client.agent);
            for msg in inbox {
                let Some(&need_idx) = client.by_request.get(&msg.correlation) else {
                    return Err(SimError::Invariant {
                        slot: t,
                        message: alloc::format!("message for unknown request {}", msg.correlation),
                    });
                };
                let ctx = ClientContext {
                    now,
                    router: client.router.clone(),
                    retry: client.retry,
                    emergency_threshold: config.server.emergency_threshold,
                    acks_enabled: config.server.acks_enabled,
                };
                let outgoing = client_on_message(&mut client.needs[need_idx], &msg, &ctx)
                    .map_err(|e| SimError::Invariant {
                        slot: t,
                        message: alloc::format!("protocol violation: {e}"),
                    })?;
                if let Some(out_msg) = outgoing {
                    match &out_msg.payload {
                        Payload::Request(r) | Payload::Emergency(r) => {
                            client.by_request.insert(r.request_id.clone(), need_idx);
                            client.next_seq = client.next_seq.max(r.request_id.seq + 1);
                            if matches!(out_msg.payload, Payload::Emergency(_)) {
                                events.push(Event::EmergencyRaised {
                                    slot: t,
                                    request: r.request_id.clone(),
                                });
                            }
                        }
                        _ => {}
                    }
                    send(out_msg, now, &mut channel, &mut trace, &mut events);
                }
            }
        }

        // Phase 7: physical state advances — heated spaces integrate the
        // packets they actually received this slot.
        for client in clients.iter_mut() {
            let heat = delivered_by_client.get(&client.id).copied().unwrap_or(0);
            let by_request = &client.by_request;
            let needs = &client.needs;
            if let LoadKind::Heating {
                thermal,
                outstanding,
                ..
            } = &mut client.kind
            {
                *thermal = thermal_step(thermal, outdoor[t as usize], heat, &spec).map_err(
                    |e| SimError::Invariant {
                        slot: t,
                        message: alloc::format!("heater overdriven: {e}"),
                    },
                )?;
                outstanding.retain(|deadline, id| {
                    if *deadline < t {
                        return false;
                    }
                    match by_request.get(id).map(|&i| &needs[i]) {
                        Some(need) => !matches!(
                            need.phase,
                            RequestPhase::Completed | RequestPhase::Rejected
                        ),
                        None => false,
                    }
                });
            }
        }
    }

    let mut result = SimResult {
        horizon: n,
        trace,
        schedule,
        dispatch: dispatch_records,
        slices: slice_records,
        borrows,
        events,
        kpis: KpiSet {
            acceptance_rate: 1.0,
            rejection_rate: 0.0,
            no_demand: true,
            emergency_count: 0,
            deadline_miss_count: 0,
            unserved_packets: 0,
            spill_packets: 0,
            storage_cycles: 0.0,
            mean_request_latency_slots: 0.0,
            slice_utilization: alloc::vec![0.0; classes],
        },
        acks_enabled: config.server.acks_enabled,
        lossless: config.channel.is_lossless(),
        storage_capacity_total,
    };
    result.kpis = compute_kpis(&result);
    Ok(result)
}

fn generate_requests(
    client: &mut ClientAgent,
    now: SlotIndex,
    spec: &PacketSpec,
    outdoor: &[f64],
    horizon: u32,
) -> Vec<ServiceRequest> {
    let t = now.index();
    match &mut client.kind {
        LoadKind::Washing(cfg) => {
            if t != cfg.submit_slot {
                return Vec::new();
            }
            let prog = WashingMachineProgram {
                packets: cfg.packets,
                earliest_start: SlotIndex(cfg.earliest_start),
                ready_by_slot: SlotIndex(cfg.ready_by),
            };
            let seq = client.next_seq;
            client.next_seq += 1;
            match washing_machine_request(&prog, client.id.clone(), seq, now) {
                Ok(r) => alloc::vec![r],
                Err(_) => Vec::new(), // ruled out by validation
            }
        }
        LoadKind::Ev(cfg) => {
            if t != cfg.arrival_slot {
                return Vec::new();
            }
            let session = EvSession {
                arrival_slot: SlotIndex(cfg.arrival_slot),
                departure_slot: SlotIndex(cfg.departure_slot),
                energy_needed_wh: cfg.energy_needed_wh,
                max_packets_per_slot: cfg.max_packets_per_slot,
            };
            let seq = client.next_seq;
            client.next_seq += 1;
            match ev_request(&session, spec, client.id.clone(), seq) {
                Ok(Some(r)) => alloc::vec![r],
                _ => Vec::new(),
            }
        }
        LoadKind::Heating {
            cfg,
            thermal,
            outstanding,
        } => {
            let lookahead = cfg.lookahead_slots.min(horizon - t);
            if lookahead == 0 {
                return Vec::new();
            }
            let committed: BTreeMap<SlotIndex, u32> =
                outstanding.keys().map(|&d| (SlotIndex(d), 1)).collect();
            let window = &outdoor[t as usize..(t + lookahead) as usize];
            let reqs = heating_requests(
                thermal,
                window,
                lookahead,
                spec,
                now,
                cfg.unoccupied_relax_c,
                &committed,
                client.id.clone(),
                client.next_seq,
            );
            client.next_seq += reqs.len() as u32;
            for r in &reqs {
                outstanding.insert(r.deadline_slot.index(), r.request_id.clone());
            }
            reqs
        }
    }
}

/// Derives the service-quality measures from a result's trace, schedule
/// and dispatch records. `run` stores exactly this computation, so
/// recomputing must reproduce the embedded values bit for bit.
pub fn compute_kpis(result: &SimResult) -> KpiSet {
    let requests = result.requests();
    let mut accepts = 0u64;
    let mut rejects = 0u64;
    let mut accepted_ids: Vec<&RequestId> = Vec::new();
    let mut decided: BTreeMap<&RequestId, bool> = BTreeMap::new();
    for msg in &result.trace {
        match &msg.payload {
            Payload::Accept { .. } => {
                if decided.insert(&msg.correlation, true).is_none() {
                    accepts += 1;
                    accepted_ids.push(&msg.correlation);
                }
            }
            Payload::Reject(_) => {
                if decided.insert(&msg.correlation, false).is_none() {
                    rejects += 1;
                }
            }
            _ => {}
        }
    }
    let decisions = accepts + rejects;
    let (acceptance_rate, rejection_rate, no_demand) = if decisions == 0 {
        (1.0, 0.0, true)
    } else {
        (
            accepts as f64 / decisions as f64,
            rejects as f64 / decisions as f64,
            false,
        )
    };

    // Emergencies appear twice in the trace (client to router, router to
    // server); count each escalation once.
    let emergency_ids: alloc::collections::BTreeSet<&RequestId> = result
        .trace
        .iter()
        .filter(|m| matches!(m.payload, Payload::Emergency(_)))
        .map(|m| &m.correlation)
        .collect();

    let mut deadline_miss = 0u64;
    let mut unserved = 0u64;
    let mut latencies: Vec<u32> = Vec::new();
    for id in &accepted_ids {
        let Some(req) = requests.get(*id) else {
            continue;
        };
        let slots = result.schedule.delivery_slots(id);
        let by_deadline: u32 = slots
            .iter()
            .filter(|s| **s <= req.deadline_slot)
            .map(|s| {
                result
                    .schedule
                    .assignments_at(*s)
                    .iter()
                    .filter(|(rid, _)| rid == *id)
                    .map(|(_, n)| *n)
                    .sum::<u32>()
            })
            .sum();
        let total = result.schedule.delivered_total(id);
        if by_deadline < req.packets {
            deadline_miss += 1;
        }
        unserved += u64::from(req.packets - total.min(req.packets));
        if total >= req.packets {
            if let Some(last) = slots.last() {
                latencies.push(last.index().saturating_sub(req.submission_slot.index()));
            }
        }
    }

    let spill_packets: u64 = result.dispatch.iter().map(|d| u64::from(d.spill)).sum();
    let discharge_total: u64 = result.dispatch.iter().map(|d| u64::from(d.discharge)).sum();
    let storage_cycles = if result.storage_capacity_total > 0 {
        discharge_total as f64 / f64::from(result.storage_capacity_total)
    } else {
        0.0
    };
    let mean_latency = if latencies.is_empty() {
        0.0
    } else {
        latencies.iter().map(|&l| f64::from(l)).sum::<f64>() / latencies.len() as f64
    };

    let classes = result
        .slices
        .iter()
        .map(|s| s.class_id as usize)
        .max()
        .unwrap_or(0);
    let mut slice_utilization = alloc::vec![0.0; classes];
    for c in 1..=classes {
        let mut used = 0u64;
        let mut avail = 0u64;
        for row in result.slices.iter().filter(|s| s.class_id as usize == c) {
            used += u64::from(row.allocated.min(row.slice));
            avail += u64::from(row.slice);
        }
        slice_utilization[c - 1] = if avail > 0 {
            used as f64 / avail as f64
        } else {
            0.0
        };
    }

    KpiSet {
        acceptance_rate,
        rejection_rate,
        no_demand,
        emergency_count: emergency_ids.len() as u64,
        deadline_miss_count: deadline_miss,
        unserved_packets: unserved,
        spill_packets,
        storage_cycles,
        mean_request_latency_slots: mean_latency,
        slice_utilization,
    }
}

/// Where two traces first diverge.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayDiff {
    pub line: usize,
    pub first: Option<String>,
    pub second: Option<String>,
}

impl fmt::Display for ReplayDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "traces diverge at line {}: {:?} vs {:?}",
            self.line, self.first, self.second
        )
    }
}

/// Re-runs the scenario and verifies the message trace is byte-identical
/// to the recorded one — the determinism regression gate.
pub fn replay_check(result: &SimResult, config: &ScenarioConfig) -> Result<(), ReplayDiff> {
    let second = match run(config) {
        Ok(r) => r,
        Err(_) => {
            return Err(ReplayDiff {
                line: 0,
                first: None,
                second: Some(String::from("<rerun failed>")),
            })
        }
    };
    let a = result.trace_lines();
    let b = second.trace_lines();
    if a == b {
        return Ok(());
    }
    for (i, (la, lb)) in a.lines().zip(b.lines()).enumerate() {
        if la != lb {
            return Err(ReplayDiff {
                line: i + 1,
                first: Some(String::from(la)),
                second: Some(String::from(lb)),
            });
        }
    }
    let (an, bn) = (a.lines().count(), b.lines().count());
    Err(ReplayDiff {
        line: an.min(bn) + 1,
        first: a.lines().nth(bn).map(String::from),
        second: b.lines().nth(an).map(String::from),
    })
}
