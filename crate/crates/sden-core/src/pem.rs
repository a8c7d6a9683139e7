//! Packet quantization and the domain types shared by every agent:
//! packets, slots, priority classes, service requests and schedules.
//!
//! All demand, supply and storage accounting in this crate is integral —
//! packet counts, never fractional energy. Watt-hour amounts only appear
//! at the boundary, where they are quantized (ceiling) into packets once.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::math;

/// The energy quantum of a run: every packet carries `size_wh` watt-hours
/// and occupies one slot of `slot_minutes` minutes. Both are fixed for the
/// whole simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacketSpec {
    size_wh: f64,
    slot_minutes: u32,
}

impl PacketSpec {
    /// 10 Wh packets over 10-minute slots.
    pub const DEFAULT_SIZE_WH: f64 = 10.0;
    pub const DEFAULT_SLOT_MINUTES: u32 = 10;

    pub fn new(size_wh: f64, slot_minutes: u32) -> Result<Self, PemError> {
        if !(size_wh > 0.0) || !size_wh.is_finite() {
            return Err(PemError::InvalidPacketSize);
        }
        if slot_minutes == 0 {
            return Err(PemError::InvalidSlotDuration);
        }
        Ok(Self {
            size_wh,
            slot_minutes,
        })
    }

    pub fn size_wh(&self) -> f64 {
        self.size_wh
    }

    pub fn slot_minutes(&self) -> u32 {
        self.slot_minutes
    }

    /// Slot duration in hours.
    pub fn slot_hours(&self) -> f64 {
        f64::from(self.slot_minutes) / 60.0
    }

    /// Number of slots in a 24 h day, when the slot length divides a day.
    pub fn slots_per_day(&self) -> u32 {
        (24 * 60) / self.slot_minutes
    }
}

impl Default for PacketSpec {
    fn default() -> Self {
        Self {
            size_wh: Self::DEFAULT_SIZE_WH,
            slot_minutes: Self::DEFAULT_SLOT_MINUTES,
        }
    }
}

/// Ordinal of a slot counted from simulation start. Slot `k` covers real
/// time `[k * slot_minutes, (k+1) * slot_minutes)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SlotIndex(pub u32);

impl SlotIndex {
    pub fn index(self) -> u32 {
        self.0
    }

    pub fn next(self) -> SlotIndex {
        SlotIndex(self.0 + 1)
    }

    pub fn plus(self, slots: u32) -> SlotIndex {
        SlotIndex(self.0 + slots)
    }
}

impl fmt::Display for SlotIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Priority class id, `1` being the highest priority. The number of
/// classes is fixed per run (two by default).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PriorityClass(u8);

impl PriorityClass {
    pub const HIGHEST: PriorityClass = PriorityClass(1);

    pub fn new(class_id: u8, num_classes: u8) -> Result<Self, PemError> {
        if class_id == 0 || class_id > num_classes {
            return Err(PemError::InvalidPriorityClass {
                class_id,
                num_classes,
            });
        }
        Ok(Self(class_id))
    }

    pub fn id(self) -> u8 {
        self.0
    }

    /// Zero-based index, convenient for per-class vectors.
    pub fn idx(self) -> usize {
        usize::from(self.0 - 1)
    }
}

impl fmt::Display for PriorityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// How a request's packets may be spread over its window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeConstraint {
    /// One non-interruptible block, one packet per slot. Once delivery
    /// starts it must continue every slot until the request completes.
    Contiguous,
    /// Any distribution over the window.
    Arbitrary,
    /// At most `m` packets in any single slot.
    PerSlotCap(u32),
}

impl ShapeConstraint {
    pub fn per_slot_cap(m: u32) -> Result<Self, PemError> {
        if m == 0 {
            return Err(PemError::InvalidPerSlotCap);
        }
        Ok(Self::PerSlotCap(m))
    }

    /// Upper bound on packets this shape admits in one slot.
    pub fn slot_limit(&self) -> u32 {
        match self {
            ShapeConstraint::Contiguous => 1,
            ShapeConstraint::Arbitrary => u32::MAX,
            ShapeConstraint::PerSlotCap(m) => *m,
        }
    }
}

/// Identifier of a client device (a flexible load).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClientId(pub String);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Request identifier, unique per run: assigned by the issuing client and
/// namespaced by the client id, so independent clients can never collide.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RequestId {
    pub client: ClientId,
    pub seq: u32,
}

impl RequestId {
    pub fn new(client: ClientId, seq: u32) -> Self {
        Self { client, seq }
    }
}

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.client, self.seq)
    }
}

/// A client's packetized demand: how many packets, over which window,
/// under which shape constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceRequest {
    pub request_id: RequestId,
    pub client_id: ClientId,
    pub packets: u32,
    pub earliest_slot: SlotIndex,
    pub deadline_slot: SlotIndex,
    pub shape: ShapeConstraint,
    pub priority_hint: Option<PriorityClass>,
    pub is_emergency: bool,
    pub submission_slot: SlotIndex,
}

impl ServiceRequest {
    /// Window length in slots (inclusive of both ends).
    pub fn window_len(&self) -> u32 {
        self.deadline_slot.index() - self.earliest_slot.index() + 1
    }

    /// First violated validity rule, if any. `now` is the slot at which
    /// the request is examined; windows opening in the past are refused.
    pub fn validate(&self, now: SlotIndex) -> Result<(), RequestRejection> {
        if self.packets == 0 {
            return Err(RequestRejection::ZeroPackets);
        }
        if self.earliest_slot > self.deadline_slot {
            return Err(RequestRejection::WindowInverted);
        }
        if matches!(self.shape, ShapeConstraint::Contiguous) && self.window_len() < self.packets {
            return Err(RequestRejection::ContiguousWindowTooShort);
        }
        if self.earliest_slot < now {
            return Err(RequestRejection::WindowInPast);
        }
        Ok(())
    }
}

/// Validates a request against its structural invariants at slot `now`.
pub fn validate_request(req: &ServiceRequest, now: SlotIndex) -> Result<(), RequestRejection> {
    req.validate(now)
}

/// Why a request failed validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestRejection {
    ZeroPackets,
    WindowInverted,
    ContiguousWindowTooShort,
    WindowInPast,
}

impl fmt::Display for RequestRejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RequestRejection::ZeroPackets => "request carries zero packets",
            RequestRejection::WindowInverted => "earliest slot is after the deadline",
            RequestRejection::ContiguousWindowTooShort => {
                "window is shorter than the contiguous block"
            }
            RequestRejection::WindowInPast => "window opens before the current slot",
        };
        f.write_str(s)
    }
}

/// Errors from quantization arithmetic and type constructors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PemError {
    NegativeEnergy,
    InvalidPacketSize,
    InvalidSlotDuration,
    InvalidPerSlotCap,
    InvalidPriorityClass { class_id: u8, num_classes: u8 },
    IndivisibleHorizon { minutes: u32, slot_minutes: u32 },
    ZeroHorizon,
}

impl fmt::Display for PemError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PemError::NegativeEnergy => f.write_str("energy amount must be non-negative"),
            PemError::InvalidPacketSize => f.write_str("packet size must be a positive energy"),
            PemError::InvalidSlotDuration => f.write_str("slot duration must be positive"),
            PemError::InvalidPerSlotCap => f.write_str("per-slot cap must be at least 1"),
            PemError::InvalidPriorityClass {
                class_id,
                num_classes,
            } => write!(
                f,
                "priority class {class_id} outside [1, {num_classes}]"
            ),
            PemError::IndivisibleHorizon {
                minutes,
                slot_minutes,
            } => write!(
                f,
                "horizon of {minutes} min is not a whole number of {slot_minutes}-min slots"
            ),
            PemError::ZeroHorizon => f.write_str("horizon must be positive"),
        }
    }
}

/// Number of packets needed to cover `amount_wh` of energy: the ceiling of
/// `amount_wh / size_wh`, zero only for zero energy.
pub fn packetize_energy(amount_wh: f64, spec: &PacketSpec) -> Result<u32, PemError> {
    if !(amount_wh >= 0.0) {
        return Err(PemError::NegativeEnergy);
    }
    if amount_wh == 0.0 {
        return Ok(0);
    }
    let mut n = math::ceil(amount_wh / spec.size_wh) as u32;
    // Guard the quantization against float rounding at exact multiples:
    // n must be the least count with n * size_wh >= amount_wh.
    while n > 0 && f64::from(n - 1) * spec.size_wh >= amount_wh {
        n -= 1;
    }
    while f64::from(n) * spec.size_wh < amount_wh {
        n += 1;
    }
    Ok(n.max(1))
}

/// Number of slots covering a horizon of `hours` whole hours. The slot
/// length must divide the horizon exactly.
pub fn slots_in_horizon(hours: u32, spec: &PacketSpec) -> Result<u32, PemError> {
    if hours == 0 {
        return Err(PemError::ZeroHorizon);
    }
    let minutes = hours * 60;
    if minutes % spec.slot_minutes != 0 {
        return Err(PemError::IndivisibleHorizon {
            minutes,
            slot_minutes: spec.slot_minutes,
        });
    }
    Ok(minutes / spec.slot_minutes)
}

/// Name of a storage unit as referenced by schedules and dispatch records.
pub type StorageUnitId = String;

/// The server's committed mapping from slots to delivered packets per
/// request, plus signed storage flows (positive = charge).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Schedule {
    start: u32,
    assignments: Vec<Vec<(RequestId, u32)>>,
    storage_actions: Vec<Vec<(StorageUnitId, i64)>>,
}

impl Schedule {
    pub fn new(start: SlotIndex, len: u32) -> Self {
        let n = len as usize;
        Self {
            start: start.index(),
            assignments: alloc::vec![Vec::new(); n],
            storage_actions: alloc::vec![Vec::new(); n],
        }
    }

    pub fn start(&self) -> SlotIndex {
        SlotIndex(self.start)
    }

    pub fn len(&self) -> u32 {
        self.assignments.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    fn offset(&self, slot: SlotIndex) -> Option<usize> {
        slot.index()
            .checked_sub(self.start)
            .map(|o| o as usize)
            .filter(|o| *o < self.assignments.len())
    }

    pub fn record_delivery(&mut self, slot: SlotIndex, request: RequestId, packets: u32) {
        if packets == 0 {
            return;
        }
        if let Some(o) = self.offset(slot) {
            let row = &mut self.assignments[o];
            if let Some(entry) = row.iter_mut().find(|(id, _)| *id == request) {
                entry.1 += packets;
            } else {
                row.push((request, packets));
            }
        }
    }

    pub fn record_storage(&mut self, slot: SlotIndex, unit: &str, delta: i64) {
        if delta == 0 {
            return;
        }
        if let Some(o) = self.offset(slot) {
            self.storage_actions[o].push((StorageUnitId::from(unit), delta));
        }
    }

    pub fn assignments_at(&self, slot: SlotIndex) -> &[(RequestId, u32)] {
        self.offset(slot)
            .map(|o| self.assignments[o].as_slice())
            .unwrap_or(&[])
    }

    pub fn storage_actions_at(&self, slot: SlotIndex) -> &[(StorageUnitId, i64)] {
        self.offset(slot)
            .map(|o| self.storage_actions[o].as_slice())
            .unwrap_or(&[])
    }

    /// Total packets delivered to one request across the horizon.
    pub fn delivered_total(&self, request: &RequestId) -> u32 {
        self.assignments
            .iter()
            .flat_map(|row| row.iter())
            .filter(|(id, _)| id == request)
            .map(|(_, n)| n)
            .sum()
    }

    /// Slots in which a request received packets, ascending.
    pub fn delivery_slots(&self, request: &RequestId) -> Vec<SlotIndex> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, row)| row.iter().any(|(id, _)| id == request))
            .map(|(o, _)| SlotIndex(self.start + o as u32))
            .collect()
    }

    /// Packets delivered per slot, summed over all requests.
    pub fn per_slot_totals(&self) -> Vec<u32> {
        self.assignments
            .iter()
            .map(|row| row.iter().map(|(_, n)| n).sum())
            .collect()
    }

    /// Checks that every assignment lies within its request's window.
    /// Pure: re-validating an unmodified schedule yields the same verdict.
    pub fn check_windows<'a, I>(&self, requests: I) -> Result<(), ScheduleViolation>
    where
        I: IntoIterator<Item = &'a ServiceRequest>,
    {
        use alloc::collections::BTreeMap;
        let by_id: BTreeMap<&RequestId, &ServiceRequest> =
            requests.into_iter().map(|r| (&r.request_id, r)).collect();
        for (o, row) in self.assignments.iter().enumerate() {
            let slot = SlotIndex(self.start + o as u32);
            for (id, _) in row {
                let Some(req) = by_id.get(id) else {
                    return Err(ScheduleViolation::UnknownRequest { slot });
                };
                if slot < req.earliest_slot || slot > req.deadline_slot {
                    return Err(ScheduleViolation::OutsideWindow { slot });
                }
            }
        }
        Ok(())
    }

    /// Checks per-slot delivery totals against a per-slot limit.
    pub fn check_slot_limits(&self, limits: &[u32]) -> Result<(), ScheduleViolation> {
        for (o, total) in self.per_slot_totals().iter().enumerate() {
            let limit = limits.get(o).copied().unwrap_or(0);
            if *total > limit {
                return Err(ScheduleViolation::SlotOverCommitted {
                    slot: SlotIndex(self.start + o as u32),
                    assigned: *total,
                    limit,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleViolation {
    UnknownRequest { slot: SlotIndex },
    OutsideWindow { slot: SlotIndex },
    SlotOverCommitted { slot: SlotIndex, assigned: u32, limit: u32 },
}

impl fmt::Display for ScheduleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleViolation::UnknownRequest { slot } => {
                write!(f, "slot {slot}: assignment for unknown request")
            }
            ScheduleViolation::OutsideWindow { slot } => {
                write!(f, "slot {slot}: assignment outside request window")
            }
            ScheduleViolation::SlotOverCommitted {
                slot,
                assigned,
                limit,
            } => write!(f, "slot {slot}: {assigned} packets assigned, limit {limit}"),
        }
    }
}
