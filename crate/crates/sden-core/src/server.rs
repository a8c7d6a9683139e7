//! The central energy server: a rolling-horizon inventory manager that
//! admits requests against forecast generation, classifies them into
//! priority classes, cuts each slot's capacity into per-class slices
//! (*energy network slicing*), and allocates packets earliest-deadline
//! first, with storage as the flexibility behind the highest class.
//!
//! Admission is slice-aware and conservative: a class's requests are
//! packed only into that class's slice trajectory (class 1 may also
//! reserve storage discharge), so an accepted request never depends on
//! another class leaving capacity idle. At dispatch time, capacity that
//! *does* go idle is lent across classes and topped up from unreserved
//! storage; every such borrow is logged, which is what keeps the slice
//! accounting auditable.
//!
//! The packing itself is greedy: slot-forward, serving live requests in
//! earliest-deadline order (emergencies first), with non-interruptible
//! blocks placed by start-slot search before divisible demand. Greedy
//! earliest-deadline packing is exact for divisible shapes; for blocks it
//! is a heuristic whose conservatism is bounded empirically by the
//! exhaustive search in [`crate::oracle`].

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

use crate::pem::{
    ClientId, PriorityClass, RequestId, ServiceRequest, ShapeConstraint, SlotIndex, StorageUnitId,
};
use crate::protocol::RejectHint;
use crate::resources::{apply_storage_action, StorageState};

/// Scale for exact slice-share arithmetic: shares are parts per million.
pub const SHARE_SCALE: u64 = 1_000_000;

/// Per-class slice shares held as exact scaled integers so that
/// `floor(share * capacity)` has one indisputable value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceShares {
    scaled: Vec<u64>,
}

impl SliceShares {
    /// Converts decimal fractions (e.g. `[0.6, 0.4]`) into exact scaled
    /// shares. The fractions must sum to exactly 1 after scaling.
    pub fn from_fractions(fractions: &[f64]) -> Result<Self, PolicyError> {
        if fractions.is_empty() {
            return Err(PolicyError::NoClasses);
        }
        let mut scaled = Vec::with_capacity(fractions.len());
        for &f in fractions {
            if !(f >= 0.0) || !f.is_finite() {
                return Err(PolicyError::InvalidShare { share: f });
            }
            scaled.push(crate::math::round_half_up(f * SHARE_SCALE as f64) as u64);
        }
        let total: u64 = scaled.iter().sum();
        if total != SHARE_SCALE {
            return Err(PolicyError::SharesDoNotSumToOne { total });
        }
        Ok(Self { scaled })
    }

    pub fn num_classes(&self) -> usize {
        self.scaled.len()
    }

    /// `floor(share_c * capacity)` in exact integer arithmetic.
    pub fn class_floor(&self, class_idx: usize, capacity: u32) -> u32 {
        (self.scaled[class_idx] * u64::from(capacity) / SHARE_SCALE) as u32
    }
}

/// Order in which pending packets of one class compete for a slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderingRule {
    /// Closest deadline first; ties by earlier submission, then id.
    EarliestDeadline,
    /// Earlier submission first; ties by closer deadline, then id.
    FirstComeFirstServed,
}

/// All tunables of the server pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerPolicy {
    pub shares: SliceShares,
    pub slack_threshold: u32,
    pub ordering: OrderingRule,
    pub emergency_threshold: u32,
    pub emergency_budget_per_day: u32,
    /// Planning lookahead in slots; the effective window is clipped to
    /// the run horizon.
    pub planning_horizon_slots: u32,
}

impl ServerPolicy {
    pub fn num_classes(&self) -> u8 {
        self.shares.num_classes() as u8
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.emergency_threshold == 0 {
            return Err(PolicyError::ZeroEmergencyThreshold);
        }
        if self.planning_horizon_slots == 0 {
            return Err(PolicyError::ZeroPlanningHorizon);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyError {
    NoClasses,
    InvalidShare { share: f64 },
    SharesDoNotSumToOne { total: u64 },
    ZeroEmergencyThreshold,
    ZeroPlanningHorizon,
}

impl fmt::Display for PolicyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyError::NoClasses => f.write_str("at least one priority class is required"),
            PolicyError::InvalidShare { share } => write!(f, "invalid slice share {share}"),
            PolicyError::SharesDoNotSumToOne { total } => {
                write!(f, "shares must sum to 1 (got {total}/{SHARE_SCALE})")
            }
            PolicyError::ZeroEmergencyThreshold => {
                f.write_str("emergency threshold must be at least 1")
            }
            PolicyError::ZeroPlanningHorizon => f.write_str("planning horizon must be positive"),
        }
    }
}

/// Snapshot of one storage unit as the planner sees it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StorageView {
    pub unit: StorageUnitId,
    pub soc: u32,
    pub charge_rate: u32,
    pub discharge_rate: u32,
}

impl StorageView {
    pub fn of(unit: &str, state: &StorageState) -> Self {
        Self {
            unit: StorageUnitId::from(unit),
            soc: state.soc(),
            charge_rate: state.charge_rate(),
            discharge_rate: state.discharge_rate(),
        }
    }
}

/// Forecast-side inputs the server plans against, absolute over the full
/// run horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanningInputs<'a> {
    pub gen_forecast: &'a [u32],
    pub baseload: &'a [u32],
    pub storage: Vec<StorageView>,
}

/// The inventory snapshot behind one planning round: forecast generation,
/// uncontrollable baseload, packets locked by running non-interruptible
/// blocks, packets committed by the current placement, and storage views.
#[derive(Debug, Clone, PartialEq)]
pub struct InventoryForecast {
    pub start: SlotIndex,
    pub gen: Vec<u32>,
    pub baseload: Vec<u32>,
    pub locked: Vec<u32>,
    pub committed: Vec<u32>,
    pub storage: Vec<StorageView>,
}

/// Per-slot system capacity for flexible demand: forecast generation
/// minus baseload minus the packets that running non-interruptible blocks
/// will consume, clamped at zero.
pub fn compute_availability(inv: &InventoryForecast, window: core::ops::Range<u32>) -> Vec<u32> {
    window
        .map(|slot| {
            let o = slot.wrapping_sub(inv.start.index()) as usize;
            let gen = inv.gen.get(o).copied().unwrap_or(0);
            let base = inv.baseload.get(o).copied().unwrap_or(0);
            let locked = inv.locked.get(o).copied().unwrap_or(0);
            gen.saturating_sub(base).saturating_sub(locked)
        })
        .collect()
}

/// Per-slot, per-class packet reservations plus the storage-backed
/// extension available on top.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlicePlan {
    pub start: SlotIndex,
    pub capacity_total: Vec<u32>,
    /// `per_class[c][o]`, class index 0 = highest priority.
    pub per_class: Vec<Vec<u32>>,
    pub storage_extension: Vec<u32>,
}

/// Cuts each slot's capacity into per-class slices. Every class gets
/// `floor(share * capacity)`; the flooring leftover goes to class 1. The
/// storage extension spreads the current state of charge forward under a
/// no-double-count rule: each stored packet extends exactly one slot, at
/// most the pooled discharge rate per slot.
pub fn plan_slices(
    start: SlotIndex,
    capacity_total: Vec<u32>,
    shares: &SliceShares,
    storage: &[StorageView],
) -> SlicePlan {
    let classes = shares.num_classes();
    let mut per_class = alloc::vec![Vec::with_capacity(capacity_total.len()); classes];
    for &cap in &capacity_total {
        let mut assigned = 0u32;
        for (c, column) in per_class.iter_mut().enumerate() {
            let s = shares.class_floor(c, cap);
            column.push(s);
            assigned += s;
        }
        if let Some(last) = per_class[0].last_mut() {
            *last += cap - assigned;
        }
    }
    let mut pool: u32 = storage.iter().map(|s| s.soc).sum();
    let rate: u32 = storage.iter().map(|s| s.discharge_rate).sum();
    let storage_extension = capacity_total
        .iter()
        .map(|_| {
            let ext = rate.min(pool);
            pool -= ext;
            ext
        })
        .collect();
    SlicePlan {
        start,
        capacity_total,
        per_class,
        storage_extension,
    }
}

/// Rule-based priority classification. Emergencies always land in class
/// 1. A client's priority hint, when present, is honored (clamped to the
/// configured class range). Otherwise the request's slack decides:
/// `slack = (deadline - now) - minimum slots needed`, and anything at or
/// under the threshold is urgent.
pub fn classify(req: &ServiceRequest, now: SlotIndex, policy: &ServerPolicy) -> PriorityClass {
    let classes = policy.num_classes();
    if req.is_emergency {
        return PriorityClass::HIGHEST;
    }
    if let Some(hint) = req.priority_hint {
        let id = hint.id().clamp(1, classes);
        return PriorityClass::new(id, classes).unwrap_or(PriorityClass::HIGHEST);
    }
    if classes == 1 {
        return PriorityClass::HIGHEST;
    }
    let min_slots = match req.shape {
        ShapeConstraint::Contiguous => req.packets,
        ShapeConstraint::Arbitrary => 1,
        ShapeConstraint::PerSlotCap(m) => req.packets.div_ceil(m),
    };
    let slack = req
        .deadline_slot
        .index()
        .saturating_sub(now.index())
        .saturating_sub(min_slots);
    if slack <= policy.slack_threshold {
        PriorityClass::HIGHEST
    } else {
        PriorityClass::new(classes, classes).unwrap_or(PriorityClass::HIGHEST)
    }
}

/// Greedy storage plan over a window: slots with surplus capacity charge
/// (bounded by charge rate and efficiency-adjusted headroom), slots where
/// allocation exceeds capacity discharge (bounded by rate and state of
/// charge). Simulated against a copy of the unit states so efficiency
/// remainders accumulate exactly as they will at dispatch.
pub fn plan_storage(
    capacity_total: &[u32],
    allocated: &[u32],
    storage: &[(StorageUnitId, StorageState)],
) -> Vec<Vec<(StorageUnitId, i64)>> {
    let mut units: Vec<(StorageUnitId, StorageState)> = storage.to_vec();
    capacity_total
        .iter()
        .zip(allocated.iter())
        .map(|(&cap, &alloc_)| {
            let mut actions = Vec::new();
            if cap > alloc_ {
                let mut surplus = cap - alloc_;
                for (unit, state) in units.iter_mut() {
                    let a = state.max_charge(surplus);
                    if a > 0 {
                        apply_storage_action(state, i64::from(a)).expect("charge within bounds");
                        actions.push((unit.clone(), i64::from(a)));
                        surplus -= a;
                    }
                }
            } else if alloc_ > cap {
                let mut deficit = alloc_ - cap;
                for (unit, state) in units.iter_mut() {
                    let d = deficit.min(state.discharge_rate()).min(state.soc());
                    if d > 0 {
                        apply_storage_action(state, -i64::from(d))
                            .expect("discharge within bounds");
                        actions.push((unit.clone(), -i64::from(d)));
                        deficit -= d;
                    }
                }
            }
            actions
        })
        .collect()
}

/// Verdict on one request.
#[derive(Debug, Clone, PartialEq)]
pub enum AdmissionDecision {
    Accept { class: PriorityClass },
    Reject { hint: RejectHint },
}

impl AdmissionDecision {
    pub fn is_accept(&self) -> bool {
        matches!(self, AdmissionDecision::Accept { .. })
    }
}

/// Notable outcomes of processing a request, surfaced to the event log.
#[derive(Debug, Clone, PartialEq)]
pub enum AdmissionEvent {
    EmergencyAccepted { request: RequestId },
    EmergencyRejected { request: RequestId },
    /// Emergency beyond the per-client daily budget, handled as ordinary.
    EmergencyDemoted { request: RequestId },
    DuplicateRequest { request: RequestId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ContiguousProgress {
    No,
    Unstarted,
    Started,
}

/// One accepted, not yet completed request as the server tracks it.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingRequest {
    pub req: ServiceRequest,
    pub class: PriorityClass,
    pub remaining: u32,
    pub breached: bool,
    contiguous: ContiguousProgress,
}

impl PendingRequest {
    fn new(req: ServiceRequest, class: PriorityClass) -> Self {
        let contiguous = if matches!(req.shape, ShapeConstraint::Contiguous) {
            ContiguousProgress::Unstarted
        } else {
            ContiguousProgress::No
        };
        Self {
            remaining: req.packets,
            class,
            req,
            breached: false,
            contiguous,
        }
    }

    pub fn started(&self) -> bool {
        self.contiguous == ContiguousProgress::Started
    }
}

/// One packet borrow outside a class's own slice, logged for auditing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BorrowRecord {
    pub class_idx: usize,
    pub source: BorrowSource,
    pub packets: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BorrowSource {
    /// Unused slice capacity of another class.
    OtherClass(usize),
    /// Storage discharge beyond the class's planned reservation.
    Storage,
    /// Realized generation above forecast.
    Surplus,
}

impl fmt::Display for BorrowSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BorrowSource::OtherClass(c) => write!(f, "class{}", c + 1),
            BorrowSource::Storage => f.write_str("storage"),
            BorrowSource::Surplus => f.write_str("surplus"),
        }
    }
}

/// Everything that physically happened in one dispatched slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotDispatch {
    pub slot: SlotIndex,
    pub baseload_served: u32,
    pub baseload_shortfall: u32,
    /// Packets delivered per request this slot, merged across paths.
    pub deliveries: Vec<SlotDelivery>,
    pub storage_actions: Vec<(StorageUnitId, i64)>,
    /// Gross packets sent into storage (before efficiency).
    pub charge_total: u32,
    pub discharge_total: u32,
    pub spill: u32,
    pub capacity_total: u32,
    pub slices: Vec<u32>,
    /// Delivered through the slice machinery, per class (locked excluded).
    pub sliced_allocated: Vec<u32>,
    /// Forced deliveries of running non-interruptible blocks, per class.
    pub locked_allocated: Vec<u32>,
    pub borrows: Vec<BorrowRecord>,
    /// Requests whose deadline passed this slot with packets outstanding.
    pub breaches: Vec<(RequestId, u32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotDelivery {
    pub request: RequestId,
    pub client: ClientId,
    pub class: PriorityClass,
    pub packets: u32,
}

/// Current placement of all committed demand over the planning window.
#[derive(Debug, Clone, PartialEq)]
struct PlanState {
    now: u32,
    len: u32,
    slice_plan: SlicePlan,
    /// Base-capacity usage per class per slot offset.
    base_used: Vec<Vec<u32>>,
    /// Planned storage draws per slot offset (class-1 reservations).
    storage_used: Vec<u32>,
    storage_pool_left: u32,
    storage_rate: u32,
    /// Planned deliveries in the current slot: (request, base, storage).
    current: Vec<(RequestId, u32, u32)>,
    /// Chosen start slots for unstarted non-interruptible blocks.
    planned_starts: BTreeMap<RequestId, u32>,
    /// Requests the plan could not fully place (forecast-error fallout).
    unplaced: BTreeSet<RequestId>,
    /// Per-client usage per slot offset, tracked only for clients with a
    /// physical intake cap.
    client_used: BTreeMap<ClientId, Vec<u32>>,
}

impl PlanState {
    fn end(&self) -> u32 {
        self.now + self.len
    }

    fn slice_residual(&self, class_idx: usize, o: usize) -> u32 {
        self.slice_plan.per_class[class_idx][o] - self.base_used[class_idx][o]
    }

    fn storage_slot_residual(&self, o: usize) -> u32 {
        (self.storage_rate - self.storage_used[o]).min(self.storage_pool_left)
    }
}

/// The server. One instance per run; all state evolves deterministically.
#[derive(Debug, Clone)]
pub struct EnergyServer {
    policy: ServerPolicy,
    horizon: u32,
    slots_per_day: u32,
    pending: BTreeMap<RequestId, PendingRequest>,
    decided: BTreeSet<RequestId>,
    emergencies_used: BTreeMap<(ClientId, u32), u32>,
    intake_caps: BTreeMap<ClientId, u32>,
    plan: Option<PlanState>,
    last_inventory: Option<InventoryForecast>,
}

impl EnergyServer {
    pub fn new(
        policy: ServerPolicy,
        horizon: u32,
        slots_per_day: u32,
    ) -> Result<Self, PolicyError> {
        policy.validate()?;
        Ok(Self {
            policy,
            horizon,
            slots_per_day: slots_per_day.max(1),
            pending: BTreeMap::new(),
            decided: BTreeSet::new(),
            emergencies_used: BTreeMap::new(),
            intake_caps: BTreeMap::new(),
            plan: None,
            last_inventory: None,
        })
    }

    pub fn policy(&self) -> &ServerPolicy {
        &self.policy
    }

    /// Registers a physical per-slot intake limit for a client (e.g. a
    /// heater's power rating); deliveries to that client never exceed it
    /// in any slot, whatever mix of its requests is pending.
    pub fn set_intake_cap(&mut self, client: ClientId, packets_per_slot: u32) {
        self.intake_caps.insert(client, packets_per_slot);
    }

    pub fn pending_requests(&self) -> impl Iterator<Item = &PendingRequest> {
        self.pending.values()
    }

    pub fn pending_remaining_total(&self) -> u64 {
        self.pending.values().map(|p| u64::from(p.remaining)).sum()
    }

    /// Inventory snapshot of the latest planning round.
    pub fn inventory(&self) -> Option<&InventoryForecast> {
        self.last_inventory.as_ref()
    }

    fn order_key(&self, p: &PendingRequest) -> (bool, u8, bool, u32, u32, RequestId) {
        let (k1, k2) = match self.policy.ordering {
            OrderingRule::EarliestDeadline => {
                (p.req.deadline_slot.index(), p.req.submission_slot.index())
            }
            OrderingRule::FirstComeFirstServed => {
                (p.req.submission_slot.index(), p.req.deadline_slot.index())
            }
        };
        (
            p.breached,
            p.class.id(),
            !p.req.is_emergency,
            k1,
            k2,
            p.req.request_id.clone(),
        )
    }

    fn locked_per_slot(&self, len: u32) -> Vec<u32> {
        let mut locked = alloc::vec![0u32; len as usize];
        for p in self.pending.values() {
            if p.started() && p.remaining > 0 {
                for o in 0..p.remaining.min(len) {
                    locked[o as usize] += 1;
                }
            }
        }
        locked
    }

    /// Re-plans the whole committed workload from slot `now`: recomputes
    /// availability, slices and the greedy placement. Commitments are to
    /// packet counts by deadline, not to particular slots, so placements
    /// may shift between rounds; started blocks never do.
    pub fn replan(&mut self, now: SlotIndex, inputs: &PlanningInputs) {
        let (plan, inv) = self.pack(now, inputs, None);
        self.plan = Some(plan);
        self.last_inventory = Some(inv);
    }

    fn pack(
        &self,
        now: SlotIndex,
        inputs: &PlanningInputs,
        extra: Option<&PendingRequest>,
    ) -> (PlanState, InventoryForecast) {
        let now_i = now.index();
        let len = self
            .policy
            .planning_horizon_slots
            .min(self.horizon.saturating_sub(now_i))
            .max(1);
        let window = now_i..now_i + len;
        let gen: Vec<u32> = window
            .clone()
            .map(|s| inputs.gen_forecast.get(s as usize).copied().unwrap_or(0))
            .collect();
        let baseload: Vec<u32> = window
            .clone()
            .map(|s| inputs.baseload.get(s as usize).copied().unwrap_or(0))
            .collect();
        let locked = self.locked_per_slot(len);
        let mut inv = InventoryForecast {
            start: now,
            gen,
            baseload,
            locked,
            committed: alloc::vec![0; len as usize],
            storage: inputs.storage.clone(),
        };
        let capacity_total = compute_availability(&inv, window);
        let slice_plan = plan_slices(now, capacity_total, &self.policy.shares, &inputs.storage);

        let mut candidates: Vec<&PendingRequest> = self
            .pending
            .values()
            .filter(|p| p.remaining > 0 && !p.started())
            .chain(extra)
            .collect();
        candidates.sort_by_key(|p| self.order_key(p));

        let storage_rate: u32 = inputs.storage.iter().map(|s| s.discharge_rate).sum();

        // Two block-placement variants: earliest feasible start, then
        // latest. Keep whichever leaves less demand unplaced.
        let first = self.pack_variant(&slice_plan, storage_rate, &candidates, false);
        let plan = if first.unplaced.is_empty() {
            first
        } else {
            let second = self.pack_variant(&slice_plan, storage_rate, &candidates, true);
            let weight = |p: &PlanState| -> u64 {
                candidates
                    .iter()
                    .filter(|c| p.unplaced.contains(&c.req.request_id))
                    .map(|c| u64::from(c.remaining))
                    .sum()
            };
            if weight(&second) < weight(&first) {
                second
            } else {
                first
            }
        };
        for o in 0..len as usize {
            let base: u32 = plan.base_used.iter().map(|cls| cls[o]).sum();
            inv.committed[o] = base + plan.storage_used[o] + inv.locked[o];
        }
        (plan, inv)
    }

    fn pack_variant(
        &self,
        slice_plan: &SlicePlan,
        storage_rate: u32,
        candidates: &[&PendingRequest],
        latest_start: bool,
    ) -> PlanState {
        let now = slice_plan.start.index();
        let len = slice_plan.capacity_total.len() as u32;
        let classes = self.policy.shares.num_classes();
        // Storage backs only the highest class; lower classes reach it at
        // dispatch time through logged borrows, never at admission.
        let mut plan = PlanState {
            now,
            len,
            slice_plan: slice_plan.clone(),
            base_used: alloc::vec![alloc::vec![0; len as usize]; classes],
            storage_used: alloc::vec![0; len as usize],
            storage_pool_left: slice_plan.storage_extension.iter().sum(),
            storage_rate,
            current: Vec::new(),
            planned_starts: BTreeMap::new(),
            unplaced: BTreeSet::new(),
            client_used: BTreeMap::new(),
        };

        // Non-interruptible blocks first: each needs a start slot from
        // which one packet per slot fits inside its class slice. Their
        // placements are immovable afterwards.
        for p in candidates {
            if p.contiguous != ContiguousProgress::Unstarted {
                continue;
            }
            if self.place_block(&mut plan, p, latest_start).is_none() {
                plan.unplaced.insert(p.req.request_id.clone());
            }
        }

        // Divisible demand: greedy slot-forward fill in canonical order,
        // then an augmenting-path repair that reroutes placed packets to
        // alternative slots until the per-class placement is a maximum
        // flow. Greedy earliest-deadline alone is not exact once per-slot
        // caps enter the mix.
        let mut x: BTreeMap<(usize, usize), u32> = BTreeMap::new();
        let mut left: Vec<u32> = candidates.iter().map(|p| p.remaining).collect();
        for o in 0..len as usize {
            let slot = now + o as u32;
            for (i, p) in candidates.iter().enumerate() {
                if p.contiguous != ContiguousProgress::No || left[i] == 0 {
                    continue;
                }
                if !self.in_window(p, slot, plan.end()) {
                    continue;
                }
                let class_idx = p.class.idx();
                let take = left[i]
                    .min(p.req.shape.slot_limit())
                    .min(self.intake_residual(&plan, &p.req.client_id, o))
                    .min(plan.slice_residual(class_idx, o));
                if take > 0 {
                    plan.base_used[class_idx][o] += take;
                    self.note_client_use(&mut plan, &p.req.client_id, o, take);
                    *x.entry((i, o)).or_default() += take;
                    left[i] -= take;
                }
            }
        }
        // Repair rounds run to a fixpoint: a packet placed for one
        // request can open vacate-chains for another.
        loop {
            let mut progressed = false;
            for i in 0..candidates.len() {
                if candidates[i].contiguous != ContiguousProgress::No {
                    continue;
                }
                while left[i] > 0 && self.augment(&mut plan, candidates, &mut x, i) {
                    left[i] -= 1;
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }

        // Storage backs whatever base capacity could not carry, for the
        // highest class only.
        let mut y: BTreeMap<(usize, usize), u32> = BTreeMap::new();
        for o in 0..len as usize {
            let slot = now + o as u32;
            for (i, p) in candidates.iter().enumerate() {
                if p.contiguous != ContiguousProgress::No
                    || left[i] == 0
                    || p.class.idx() != 0
                    || !self.in_window(p, slot, plan.end())
                {
                    continue;
                }
                let placed = x.get(&(i, o)).copied().unwrap_or(0);
                let take = left[i]
                    .min(p.req.shape.slot_limit().saturating_sub(placed))
                    .min(self.intake_residual(&plan, &p.req.client_id, o))
                    .min(plan.storage_slot_residual(o));
                if take > 0 {
                    plan.storage_used[o] += take;
                    plan.storage_pool_left -= take;
                    self.note_client_use(&mut plan, &p.req.client_id, o, take);
                    *y.entry((i, o)).or_default() += take;
                    left[i] -= take;
                }
            }
        }

        for (i, p) in candidates.iter().enumerate() {
            if p.contiguous == ContiguousProgress::No && left[i] > 0 {
                plan.unplaced.insert(p.req.request_id.clone());
            }
        }
        for (i, p) in candidates.iter().enumerate() {
            if p.contiguous != ContiguousProgress::No {
                continue;
            }
            let base = x.get(&(i, 0)).copied().unwrap_or(0);
            let storage = y.get(&(i, 0)).copied().unwrap_or(0);
            if base + storage > 0 {
                plan.current.push((p.req.request_id.clone(), base, storage));
            }
        }
        plan
    }

    /// One augmenting-path step for request `i` within its class's slice
    /// capacities: finds a chain of placed packets that can shift to
    /// alternative slots so that one more packet of `i` fits. Returns
    /// false when the placement is already maximal for `i`.
    fn augment(
        &self,
        plan: &mut PlanState,
        candidates: &[&PendingRequest],
        x: &mut BTreeMap<(usize, usize), u32>,
        i: usize,
    ) -> bool {
        let class_idx = candidates[i].class.idx();
        let len = plan.len as usize;
        let mut visited_req = alloc::vec![false; candidates.len()];
        let mut visited_slot = alloc::vec![false; len];
        // parent_slot[o]: request whose edge reached slot o;
        // parent_req[r]: slot through which request r was reached.
        let mut parent_slot = alloc::vec![usize::MAX; len];
        let mut parent_req = alloc::vec![usize::MAX; candidates.len()];
        let mut queue = alloc::collections::VecDeque::new();
        queue.push_back(i);
        visited_req[i] = true;

        let mut free_slot = None;
        'bfs: while let Some(r) = queue.pop_front() {
            let p = candidates[r];
            let shape_cap = p.req.shape.slot_limit();
            for o in 0..len {
                if visited_slot[o] {
                    continue;
                }
                let slot = plan.now + o as u32;
                if !self.in_window(p, slot, plan.end()) {
                    continue;
                }
                if x.get(&(r, o)).copied().unwrap_or(0) >= shape_cap {
                    continue;
                }
                if self.intake_residual(plan, &p.req.client_id, o) == 0 {
                    continue;
                }
                visited_slot[o] = true;
                parent_slot[o] = r;
                if plan.slice_residual(class_idx, o) > 0 {
                    free_slot = Some(o);
                    break 'bfs;
                }
                for (r2, p2) in candidates.iter().enumerate() {
                    if visited_req[r2]
                        || p2.class.idx() != class_idx
                        || p2.contiguous != ContiguousProgress::No
                        || x.get(&(r2, o)).copied().unwrap_or(0) == 0
                    {
                        continue;
                    }
                    visited_req[r2] = true;
                    parent_req[r2] = o;
                    queue.push_back(r2);
                }
            }
        }

        let Some(mut o) = free_slot else {
            return false;
        };
        // Walk the alternating path back to `i`, shifting one packet at
        // each hop.
        loop {
            let r = parent_slot[o];
            *x.entry((r, o)).or_default() += 1;
            plan.base_used[class_idx][o] += 1;
            let client = candidates[r].req.client_id.clone();
            self.note_client_use(plan, &client, o, 1);
            if r == i {
                return true;
            }
            let from = parent_req[r];
            let e = x.get_mut(&(r, from)).unwrap();
            *e -= 1;
            plan.base_used[class_idx][from] -= 1;
            if self.intake_caps.contains_key(&client) {
                if let Some(v) = plan.client_used.get_mut(&client) {
                    v[from] -= 1;
                }
            }
            o = from;
        }
    }

    /// Effective placement window: breached requests are served
    /// best-effort in any remaining slot.
    fn in_window(&self, p: &PendingRequest, slot: u32, end: u32) -> bool {
        if slot >= end {
            return false;
        }
        if p.breached {
            return true;
        }
        slot >= p.req.earliest_slot.index() && slot <= p.req.deadline_slot.index()
    }

    fn intake_residual(&self, plan: &PlanState, client: &ClientId, o: usize) -> u32 {
        match self.intake_caps.get(client) {
            None => u32::MAX,
            Some(cap) => {
                let used = plan
                    .client_used
                    .get(client)
                    .map(|v| v[o])
                    .unwrap_or(0);
                cap.saturating_sub(used)
            }
        }
    }

    fn note_client_use(&self, plan: &mut PlanState, client: &ClientId, o: usize, n: u32) {
        if n == 0 || !self.intake_caps.contains_key(client) {
            return;
        }
        let len = plan.len as usize;
        plan.client_used
            .entry(client.clone())
            .or_insert_with(|| alloc::vec![0; len])[o] += n;
    }

    /// Places one packet per slot of a block starting at the first (or
    /// last) feasible slot inside the request window. Returns the start.
    fn place_block(
        &self,
        plan: &mut PlanState,
        p: &PendingRequest,
        latest: bool,
    ) -> Option<u32> {
        let run = p.remaining;
        let lo = p.req.earliest_slot.index().max(plan.now);
        let hi_deadline = if p.breached {
            plan.end().saturating_sub(1)
        } else {
            p.req.deadline_slot.index().min(plan.end().saturating_sub(1))
        };
        if run == 0 || lo > hi_deadline {
            return None;
        }
        // Latest start that still finishes by the deadline and inside the
        // planning window.
        let hi = (hi_deadline + 1)
            .checked_sub(run)?
            .min(plan.end().checked_sub(run)?);
        if hi < lo {
            return None;
        }
        let class_idx = p.class.idx();
        let starts: Vec<u32> = if latest {
            (lo..=hi).rev().collect()
        } else {
            (lo..=hi).collect()
        };
        'starts: for s in starts {
            let base = (s - plan.now) as usize;
            for k in 0..run as usize {
                let o = base + k;
                if plan.slice_residual(class_idx, o) < 1
                    || self.intake_residual(plan, &p.req.client_id, o) < 1
                {
                    continue 'starts;
                }
            }
            for k in 0..run as usize {
                let o = base + k;
                plan.base_used[class_idx][o] += 1;
                self.note_client_use(plan, &p.req.client_id, o, 1);
            }
            plan.planned_starts.insert(p.req.request_id.clone(), s);
            if s == plan.now {
                plan.current.push((p.req.request_id.clone(), 1, 0));
            }
            return Some(s);
        }
        None
    }

    /// Fast-path admission: probes the candidate against the residual of
    /// the standing plan without disturbing existing placements. Returns
    /// true (and commits the placement) when every packet fits.
    fn try_fast_place(&mut self, cand: &PendingRequest) -> bool {
        let Some(plan) = self.plan.as_ref() else {
            return false;
        };
        if cand.contiguous == ContiguousProgress::Unstarted {
            let mut probe = self.plan.clone().unwrap();
            if self.place_block(&mut probe, cand, false).is_some() {
                self.plan = Some(probe);
                return true;
            }
            return false;
        }
        // Dry run over the window to confirm full placement.
        let end = plan.end();
        let mut need = cand.remaining;
        let class_idx = cand.class.idx();
        let mut takes: Vec<(usize, u32, u32)> = Vec::new();
        let mut pool_left = plan.storage_pool_left;
        for o in 0..plan.len as usize {
            if need == 0 {
                break;
            }
            let slot = plan.now + o as u32;
            if !self.in_window(cand, slot, end) {
                continue;
            }
            let intake = self.intake_residual(plan, &cand.req.client_id, o);
            let budget = need.min(cand.req.shape.slot_limit()).min(intake);
            let base = budget.min(plan.slice_residual(class_idx, o));
            let mut storage = 0;
            if class_idx == 0 && base < budget {
                storage = (budget - base)
                    .min((plan.storage_rate - plan.storage_used[o]).min(pool_left));
            }
            if base + storage > 0 {
                takes.push((o, base, storage));
                pool_left -= storage;
                need -= base + storage;
            }
        }
        if need > 0 {
            return false;
        }
        let plan = self.plan.as_mut().unwrap();
        for &(o, base, storage) in &takes {
            plan.base_used[class_idx][o] += base;
            plan.storage_used[o] += storage;
            plan.storage_pool_left -= storage;
            if o == 0 {
                plan.current.push((cand.req.request_id.clone(), base, storage));
            }
        }
        let caps = self.intake_caps.contains_key(&cand.req.client_id);
        if caps {
            let len = plan.len as usize;
            let used = plan
                .client_used
                .entry(cand.req.client_id.clone())
                .or_insert_with(|| alloc::vec![0; len]);
            for &(o, base, storage) in &takes {
                used[o] += base + storage;
            }
        }
        true
    }

    /// Stage-one admission for an ordinary request. The request must
    /// already be validated. Accepting reserves capacity immediately;
    /// rejecting returns resubmission hints computed from the residual
    /// plan.
    pub fn admit(
        &mut self,
        req: ServiceRequest,
        now: SlotIndex,
        inputs: &PlanningInputs,
    ) -> (AdmissionDecision, Vec<AdmissionEvent>) {
        self.process(req, now, inputs)
    }

    /// Admission for an escalated request: forced into class 1, backed by
    /// the class-1 slice plus storage, subject to the per-client daily
    /// emergency budget. Over-budget emergencies are demoted and handled
    /// as ordinary requests.
    pub fn handle_emergency(
        &mut self,
        mut req: ServiceRequest,
        now: SlotIndex,
        inputs: &PlanningInputs,
    ) -> (AdmissionDecision, Vec<AdmissionEvent>) {
        req.is_emergency = true;
        self.process(req, now, inputs)
    }

    fn process(
        &mut self,
        mut req: ServiceRequest,
        now: SlotIndex,
        inputs: &PlanningInputs,
    ) -> (AdmissionDecision, Vec<AdmissionEvent>) {
        let mut events = Vec::new();
        let id = req.request_id.clone();
        if self.decided.contains(&id) {
            events.push(AdmissionEvent::DuplicateRequest { request: id });
            return (
                AdmissionDecision::Reject {
                    hint: RejectHint {
                        earliest_feasible_slot: now,
                        max_packets_feasible_now: 0,
                    },
                },
                events,
            );
        }
        if self.plan.is_none() {
            self.replan(now, inputs);
        }

        let mut emergency = req.is_emergency;
        if emergency {
            let day = now.index() / self.slots_per_day;
            let used = self
                .emergencies_used
                .entry((req.client_id.clone(), day))
                .or_insert(0);
            if *used >= self.policy.emergency_budget_per_day {
                emergency = false;
                req.is_emergency = false;
                events.push(AdmissionEvent::EmergencyDemoted {
                    request: id.clone(),
                });
            } else {
                *used += 1;
            }
        }

        let class = classify(&req, now, &self.policy);
        self.decided.insert(id.clone());

        // Window entirely beyond the planning horizon: nothing to check,
        // the client can only retry once the horizon advances.
        let plan_end = self.plan.as_ref().map(|p| p.end()).unwrap_or(self.horizon);
        if req.earliest_slot.index() >= plan_end {
            return (
                AdmissionDecision::Reject {
                    hint: RejectHint {
                        earliest_feasible_slot: SlotIndex(plan_end),
                        max_packets_feasible_now: 0,
                    },
                },
                events,
            );
        }

        let cand = PendingRequest::new(req, class);
        let accepted = self.try_fast_place(&cand) || self.repack_with(&cand, now, inputs);
        if accepted {
            if emergency {
                events.push(AdmissionEvent::EmergencyAccepted { request: id.clone() });
            }
            self.pending.insert(id, cand);
            (AdmissionDecision::Accept { class }, events)
        } else {
            if emergency {
                events.push(AdmissionEvent::EmergencyRejected { request: id.clone() });
            }
            let hint = self.reject_hint(&cand);
            (AdmissionDecision::Reject { hint }, events)
        }
    }

    /// Full repack including the candidate. Adopted only when the
    /// candidate fits and no previously placed request is displaced.
    fn repack_with(&mut self, cand: &PendingRequest, now: SlotIndex, inputs: &PlanningInputs) -> bool {
        let old_unplaced = self
            .plan
            .as_ref()
            .map(|p| p.unplaced.clone())
            .unwrap_or_default();
        let (plan, inv) = self.pack(now, inputs, Some(cand));
        if plan.unplaced.contains(&cand.req.request_id) {
            return false;
        }
        if !plan.unplaced.iter().all(|id| old_unplaced.contains(id)) {
            return false;
        }
        self.plan = Some(plan);
        self.last_inventory = Some(inv);
        true
    }

    fn reject_hint(&self, cand: &PendingRequest) -> RejectHint {
        let Some(plan) = self.plan.as_ref() else {
            return RejectHint {
                earliest_feasible_slot: SlotIndex(self.horizon),
                max_packets_feasible_now: 0,
            };
        };
        let span = cand.req.deadline_slot.index() - cand.req.earliest_slot.index();
        let lo = cand.req.earliest_slot.index().max(plan.now);
        let max_now = self.fit_in_window(plan, cand, lo, cand.req.deadline_slot.index());
        let mut earliest = SlotIndex(plan.end());
        for s in plan.now..plan.end() {
            let fits = self.fit_in_window(plan, cand, s, s.saturating_add(span));
            if fits >= cand.req.packets {
                earliest = SlotIndex(s);
                break;
            }
        }
        RejectHint {
            earliest_feasible_slot: earliest,
            max_packets_feasible_now: max_now.min(cand.req.packets),
        }
    }

    /// Packets of `cand` that fit into the residual plan within
    /// `[from, to]`, honoring shape and class storage rules.
    fn fit_in_window(&self, plan: &PlanState, cand: &PendingRequest, from: u32, to: u32) -> u32 {
        if from > to || from >= plan.end() {
            return 0;
        }
        let class_idx = cand.class.idx();
        let to = to.min(plan.end() - 1);
        let storage_ok = class_idx == 0;
        match cand.req.shape {
            ShapeConstraint::Contiguous => {
                let mut best = 0u32;
                let mut run = 0u32;
                for s in from..=to {
                    let o = (s - plan.now) as usize;
                    if plan.slice_residual(class_idx, o) >= 1 {
                        run += 1;
                        best = best.max(run);
                    } else {
                        run = 0;
                    }
                }
                best.min(cand.req.packets)
            }
            _ => {
                let cap = cand.req.shape.slot_limit();
                let mut pool = if storage_ok { plan.storage_pool_left } else { 0 };
                let mut total = 0u64;
                for s in from..=to {
                    let o = (s - plan.now) as usize;
                    let base = plan.slice_residual(class_idx, o);
                    let st = if storage_ok {
                        (plan.storage_rate - plan.storage_used[o]).min(pool)
                    } else {
                        0
                    };
                    let take = (base + st).min(cap);
                    let st_used = take.saturating_sub(base).min(st);
                    pool -= st_used;
                    total += u64::from(take);
                }
                total.min(u64::from(cand.req.packets)) as u32
            }
        }
    }

    /// Executes one slot against realized generation: baseload first,
    /// then running blocks, then the planned slice allocations, then
    /// opportunistic top-ups (the borrowing hierarchy), then storage
    /// charging; whatever is left spills.
    ///
    /// Within a slot, all admissions must happen before dispatch: the
    /// standing plan describes the slot as not-yet-executed.
    pub fn dispatch_slot(
        &mut self,
        now: SlotIndex,
        gen_actual: u32,
        baseload: u32,
        storage: &mut [(StorageUnitId, StorageState)],
    ) -> SlotDispatch {
        let classes = self.policy.shares.num_classes();
        let plan = self.plan.take();
        let (slices, capacity_total, planned, future_storage_reserved) = match &plan {
            Some(p) => (
                (0..classes).map(|c| p.slice_plan.per_class[c][0]).collect::<Vec<u32>>(),
                p.slice_plan.capacity_total[0],
                p.current.clone(),
                p.storage_used.iter().skip(1).map(|&v| u64::from(v)).sum::<u64>(),
            ),
            None => (alloc::vec![0; classes], 0, Vec::new(), 0),
        };

        let mut pool = gen_actual;
        let mut rate_used = alloc::vec![0u32; storage.len()];
        let mut net_action = alloc::vec![0i64; storage.len()];
        let mut discharge_total = 0u32;

        let draw = |want: u32,
                        storage: &mut [(StorageUnitId, StorageState)],
                        rate_used: &mut [u32],
                        net_action: &mut [i64],
                        discharge_total: &mut u32|
         -> u32 {
            let mut got = 0;
            for (i, (_, state)) in storage.iter_mut().enumerate() {
                if got == want {
                    break;
                }
                let d = (want - got)
                    .min(state.discharge_rate() - rate_used[i])
                    .min(state.soc());
                if d > 0 {
                    apply_storage_action(state, -i64::from(d)).expect("discharge within bounds");
                    rate_used[i] += d;
                    net_action[i] -= i64::from(d);
                    got += d;
                }
            }
            *discharge_total += got;
            got
        };

        // Baseload is served unconditionally: generation first, storage
        // for the deficit, shortfall recorded if the system truly lacks
        // energy.
        let from_pool = baseload.min(pool);
        pool -= from_pool;
        let deficit = baseload - from_pool;
        let from_storage = if deficit > 0 {
            draw(deficit, storage, &mut rate_used, &mut net_action, &mut discharge_total)
        } else {
            0
        };
        let baseload_served = from_pool + from_storage;
        let baseload_shortfall = baseload - baseload_served;

        let mut delivered: BTreeMap<RequestId, u32> = BTreeMap::new();
        let mut client_slot_used: BTreeMap<ClientId, u32> = BTreeMap::new();
        let mut sliced_allocated = alloc::vec![0u32; classes];
        let mut locked_allocated = alloc::vec![0u32; classes];
        let mut base_backed = alloc::vec![0u32; classes];
        let mut storage_backed = alloc::vec![0u32; classes];

        // Running non-interruptible blocks deliver exactly one packet,
        // ahead of everything else (they cannot be turned off). Their
        // energy sits outside the slice accounting: availability already
        // subtracted it.
        let mut locked_keyed: Vec<_> = self
            .pending
            .values()
            .filter(|p| p.started() && p.remaining > 0)
            .map(|p| (self.order_key(p), p.req.request_id.clone()))
            .collect();
        locked_keyed.sort();
        for (_, id) in locked_keyed {
            let got = if pool > 0 {
                pool -= 1;
                1
            } else {
                draw(1, storage, &mut rate_used, &mut net_action, &mut discharge_total)
            };
            if got > 0 {
                let (class_idx, client) = {
                    let p = &self.pending[&id];
                    (p.class.idx(), p.req.client_id.clone())
                };
                locked_allocated[class_idx] += 1;
                *delivered.entry(id.clone()).or_default() += 1;
                *client_slot_used.entry(client).or_default() += 1;
                self.pending.get_mut(&id).unwrap().remaining -= 1;
            }
        }

        // Planned slice allocations for this slot, in plan order. A
        // realized shortfall against the plan (forecast error) leaves the
        // packets pending; the next replan re-places them.
        for (id, base_n, storage_n) in planned {
            let Some(p) = self.pending.get(&id) else {
                continue;
            };
            if p.started() {
                continue; // already force-delivered above
            }
            let class_idx = p.class.idx();
            let client = p.req.client_id.clone();
            let remaining = p.remaining;
            let was_unstarted_block = p.contiguous == ContiguousProgress::Unstarted;
            let got_base = base_n.min(pool).min(remaining);
            pool -= got_base;
            let want_storage = storage_n.min(remaining - got_base);
            let got_storage = if want_storage > 0 {
                draw(want_storage, storage, &mut rate_used, &mut net_action, &mut discharge_total)
            } else {
                0
            };
            let got = got_base + got_storage;
            if got == 0 {
                continue;
            }
            sliced_allocated[class_idx] += got;
            base_backed[class_idx] += got_base;
            storage_backed[class_idx] += got_storage;
            *delivered.entry(id.clone()).or_default() += got;
            *client_slot_used.entry(client).or_default() += got;
            let p = self.pending.get_mut(&id).unwrap();
            p.remaining -= got;
            if was_unstarted_block {
                p.contiguous = ContiguousProgress::Started;
            }
        }

        // Top-ups: idle capacity and unreserved storage accelerate
        // pending divisible demand in class order. Class 1 first (its
        // overflow may consume unused class-2 slice, then storage), then
        // class 2 onto the leftovers.
        let soc_now: u64 = storage.iter().map(|(_, s)| u64::from(s.soc())).sum();
        let mut unreserved = soc_now.saturating_sub(future_storage_reserved) as u32;
        let mut topup_keyed: Vec<_> = self
            .pending
            .values()
            .filter(|p| p.contiguous == ContiguousProgress::No && p.remaining > 0)
            .map(|p| (self.order_key(p), p.req.request_id.clone()))
            .collect();
        topup_keyed.sort();
        for (_, id) in topup_keyed {
            if pool == 0 && unreserved == 0 {
                break;
            }
            let (in_window, class_idx, client, shape_cap, remaining) = {
                let p = &self.pending[&id];
                (
                    p.req.earliest_slot <= now && (p.breached || now <= p.req.deadline_slot),
                    p.class.idx(),
                    p.req.client_id.clone(),
                    p.req.shape.slot_limit(),
                    p.remaining,
                )
            };
            if !in_window {
                continue;
            }
            let already = delivered.get(&id).copied().unwrap_or(0);
            let client_used = client_slot_used.get(&client).copied().unwrap_or(0);
            let intake = match self.intake_caps.get(&client) {
                None => u32::MAX,
                Some(cap) => cap.saturating_sub(client_used),
            };
            let budget = remaining.min(shape_cap.saturating_sub(already)).min(intake);
            if budget == 0 {
                continue;
            }
            let from_pool_n = budget.min(pool);
            pool -= from_pool_n;
            let want_st = (budget - from_pool_n).min(unreserved);
            let got_st = if want_st > 0 {
                let got = draw(want_st, storage, &mut rate_used, &mut net_action, &mut discharge_total);
                unreserved -= got;
                got
            } else {
                0
            };
            let got = from_pool_n + got_st;
            if got == 0 {
                continue;
            }
            sliced_allocated[class_idx] += got;
            base_backed[class_idx] += from_pool_n;
            storage_backed[class_idx] += got_st;
            *delivered.entry(id.clone()).or_default() += got;
            *client_slot_used.entry(client).or_default() += got;
            self.pending.get_mut(&id).unwrap().remaining -= got;
        }

        // Charge what remains, buffer tier first; the rest spills.
        let mut charge_total = 0u32;
        for (i, (_, state)) in storage.iter_mut().enumerate() {
            if rate_used[i] > 0 {
                continue; // a unit either charges or discharges in a slot
            }
            let a = state.max_charge(pool);
            if a > 0 {
                apply_storage_action(state, i64::from(a)).expect("charge within bounds");
                net_action[i] += i64::from(a);
                charge_total += a;
                pool -= a;
            }
        }
        let spill = pool;

        // Borrow attribution: anything a class delivered through slices
        // beyond its own slice came from other classes' unused slices,
        // from storage, or from above-forecast generation.
        let mut borrows = Vec::new();
        let mut unused: Vec<u32> = (0..classes)
            .map(|c| slices[c].saturating_sub(base_backed[c]))
            .collect();
        for c in 0..classes {
            if storage_backed[c] > 0 {
                borrows.push(BorrowRecord {
                    class_idx: c,
                    source: BorrowSource::Storage,
                    packets: storage_backed[c],
                });
            }
            let mut over = base_backed[c].saturating_sub(slices[c]);
            for other in 0..classes {
                if over == 0 {
                    break;
                }
                if other == c {
                    continue;
                }
                let lend = unused[other].min(over);
                if lend > 0 {
                    unused[other] -= lend;
                    over -= lend;
                    borrows.push(BorrowRecord {
                        class_idx: c,
                        source: BorrowSource::OtherClass(other),
                        packets: lend,
                    });
                }
            }
            if over > 0 {
                borrows.push(BorrowRecord {
                    class_idx: c,
                    source: BorrowSource::Surplus,
                    packets: over,
                });
            }
        }

        // Deadline breaches: flagged once, delivery continues best-effort.
        let mut breaches = Vec::new();
        for p in self.pending.values_mut() {
            if !p.breached && p.remaining > 0 && p.req.deadline_slot <= now {
                p.breached = true;
                breaches.push((p.req.request_id.clone(), p.remaining));
            }
        }

        let deliveries: Vec<SlotDelivery> = delivered
            .iter()
            .map(|(id, &packets)| {
                let p = &self.pending[id];
                SlotDelivery {
                    request: id.clone(),
                    client: p.req.client_id.clone(),
                    class: p.class,
                    packets,
                }
            })
            .collect();

        // Completed requests leave the pending set.
        let done: Vec<RequestId> = self
            .pending
            .iter()
            .filter(|(_, p)| p.remaining == 0)
            .map(|(id, _)| id.clone())
            .collect();
        for id in done {
            self.pending.remove(&id);
        }

        let storage_actions: Vec<(StorageUnitId, i64)> = storage
            .iter()
            .zip(net_action.iter())
            .filter(|(_, &a)| a != 0)
            .map(|((unit, _), &a)| (unit.clone(), a))
            .collect();

        // Put the (consumed) plan back so late admissions in the same
        // slot still see residuals; its current column is spent.
        if let Some(mut p) = plan {
            p.current.clear();
            self.plan = Some(p);
        }

        let flex_delivered: u32 = delivered.values().sum();
        debug_assert_eq!(
            gen_actual + discharge_total,
            baseload_served + flex_delivered + charge_total + spill,
            "slot energy balance"
        );

        SlotDispatch {
            slot: now,
            baseload_served,
            baseload_shortfall,
            deliveries,
            storage_actions,
            charge_total,
            discharge_total,
            spill,
            capacity_total,
            slices,
            sliced_allocated,
            locked_allocated,
            borrows,
            breaches,
        }
    }
}
