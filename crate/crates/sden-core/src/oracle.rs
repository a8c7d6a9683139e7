//! Exhaustive feasibility search for small scheduling instances, used to
//! audit the server's greedy admission.
//!
//! The search enumerates, slot by slot, every way of distributing each
//! slot's capacity over the live requests (respecting shapes), memoizing
//! failed states. It shares no code with the admission path — that
//! independence is the point. Instances are deliberately tiny: at most 8
//! slots, 6 requests and 4 packets per request.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::pem::ShapeConstraint;

pub const MAX_HORIZON: u32 = 8;
pub const MAX_REQUESTS: usize = 6;
pub const MAX_PACKETS: u32 = 4;

/// One request of an oracle instance, classless and storage-free.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleRequest {
    pub packets: u32,
    pub earliest: u32,
    pub deadline: u32,
    pub shape: ShapeConstraint,
}

/// A small scheduling instance: per-slot capacities plus requests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleInstance {
    pub capacity: Vec<u32>,
    pub requests: Vec<OracleRequest>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleError {
    HorizonTooLong { slots: usize },
    TooManyRequests { count: usize },
    TooManyPackets { packets: u32 },
    BadWindow,
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::HorizonTooLong { slots } => {
                write!(f, "instance horizon {slots} exceeds {MAX_HORIZON} slots")
            }
            OracleError::TooManyRequests { count } => {
                write!(f, "instance has {count} requests, limit {MAX_REQUESTS}")
            }
            OracleError::TooManyPackets { packets } => {
                write!(f, "request of {packets} packets, limit {MAX_PACKETS}")
            }
            OracleError::BadWindow => f.write_str("request window outside the horizon"),
        }
    }
}

impl OracleInstance {
    pub fn validate(&self) -> Result<(), OracleError> {
        if self.capacity.len() > MAX_HORIZON as usize {
            return Err(OracleError::HorizonTooLong {
                slots: self.capacity.len(),
            });
        }
        if self.requests.len() > MAX_REQUESTS {
            return Err(OracleError::TooManyRequests {
                count: self.requests.len(),
            });
        }
        let h = self.capacity.len() as u32;
        for r in &self.requests {
            if r.packets > MAX_PACKETS {
                return Err(OracleError::TooManyPackets { packets: r.packets });
            }
            if r.earliest > r.deadline || r.deadline >= h {
                return Err(OracleError::BadWindow);
            }
        }
        Ok(())
    }

    pub fn contains_contiguous(&self) -> bool {
        self.requests
            .iter()
            .any(|r| matches!(r.shape, ShapeConstraint::Contiguous))
    }
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord)]
struct SearchState {
    slot: u32,
    remaining: Vec<u32>,
    started: Vec<bool>,
}

/// Decides feasibility by exhaustive search: is there any assignment of
/// packets to slots that serves every request within its window, under
/// per-slot capacities and shape rules?
pub fn is_feasible(instance: &OracleInstance) -> Result<bool, OracleError> {
    instance.validate()?;
    let mut failed: BTreeSet<SearchState> = BTreeSet::new();
    let state = SearchState {
        slot: 0,
        remaining: instance.requests.iter().map(|r| r.packets).collect(),
        started: alloc::vec![false; instance.requests.len()],
    };
    Ok(search(instance, state, &mut failed))
}

fn search(inst: &OracleInstance, state: SearchState, failed: &mut BTreeSet<SearchState>) -> bool {
    if state.remaining.iter().all(|&r| r == 0) {
        return true;
    }
    let h = inst.capacity.len() as u32;
    if state.slot >= h {
        return false;
    }
    // Deadline prune: anything unfinished past its deadline is fatal
    // (started blocks also may not pause, checked in enumeration).
    for (i, r) in inst.requests.iter().enumerate() {
        if state.remaining[i] > 0 && state.slot > r.deadline {
            return false;
        }
    }
    // Capacity prune.
    let left: u32 = state.remaining.iter().sum();
    let cap_left: u32 = inst.capacity[state.slot as usize..].iter().sum();
    if left > cap_left {
        return false;
    }
    if failed.contains(&state) {
        return false;
    }

    let n = inst.requests.len();
    let mut alloc_now = alloc::vec![0u32; n];
    if enumerate(inst, &state, 0, inst.capacity[state.slot as usize], &mut alloc_now, failed) {
        return true;
    }
    failed.insert(state);
    false
}

/// Enumerates per-request allocations for the current slot, recursing
/// into the next slot for each complete assignment.
fn enumerate(
    inst: &OracleInstance,
    state: &SearchState,
    idx: usize,
    cap_left: u32,
    alloc_now: &mut [u32],
    failed: &mut BTreeSet<SearchState>,
) -> bool {
    if idx == inst.requests.len() {
        let mut next = SearchState {
            slot: state.slot + 1,
            remaining: state.remaining.clone(),
            started: state.started.clone(),
        };
        for i in 0..alloc_now.len() {
            next.remaining[i] -= alloc_now[i];
            if alloc_now[i] > 0 {
                next.started[i] = true;
            }
        }
        return search(inst, next, failed);
    }
    let r = &inst.requests[idx];
    let slot = state.slot;
    let in_window = slot >= r.earliest && slot <= r.deadline;
    let remaining = state.remaining[idx];
    let choices: Vec<u32> = match r.shape {
        ShapeConstraint::Contiguous => {
            if remaining == 0 {
                alloc::vec![0]
            } else if state.started[idx] {
                // A running block may not pause.
                alloc::vec![1]
            } else if in_window && slot + remaining <= r.deadline + 1 {
                alloc::vec![0, 1]
            } else {
                alloc::vec![0]
            }
        }
        ShapeConstraint::Arbitrary => {
            if in_window {
                (0..=remaining).collect()
            } else {
                alloc::vec![0]
            }
        }
        ShapeConstraint::PerSlotCap(m) => {
            if in_window {
                (0..=remaining.min(m)).collect()
            } else {
                alloc::vec![0]
            }
        }
    };
    for take in choices {
        if take > cap_left {
            continue;
        }
        alloc_now[idx] = take;
        if enumerate(inst, state, idx + 1, cap_left - take, alloc_now, failed) {
            return true;
        }
    }
    alloc_now[idx] = 0;
    false
}

/// The bundled audit suite: `count` seeded random instances inside the
/// exhaustive-search bounds. A fixed seed makes the suite a stable
/// artifact rather than a moving target.
pub fn standard_suite(count: usize, seed: u64) -> Vec<OracleInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_instance(&mut rng)).collect()
}

pub const STANDARD_SUITE_SIZE: usize = 50;
pub const STANDARD_SUITE_SEED: u64 = 0x5eed_0e11;

fn random_instance(rng: &mut ChaCha8Rng) -> OracleInstance {
    let h: u32 = rng.gen_range(4..=MAX_HORIZON);
    let capacity: Vec<u32> = (0..h).map(|_| rng.gen_range(0..=4u32)).collect();
    let n: usize = rng.gen_range(2..=MAX_REQUESTS);
    let requests = (0..n)
        .map(|_| {
            let earliest = rng.gen_range(0..h);
            let deadline = rng.gen_range(earliest..h);
            let window = deadline - earliest + 1;
            let shape_pick: u32 = rng.gen_range(0..4);
            let shape = match shape_pick {
                0 => ShapeConstraint::Contiguous,
                1 => ShapeConstraint::PerSlotCap(rng.gen_range(1..=2)),
                _ => ShapeConstraint::Arbitrary,
            };
            let packets = match shape {
                // A block must fit its window to be a valid request at all.
                ShapeConstraint::Contiguous => rng.gen_range(1..=MAX_PACKETS.min(window)),
                _ => rng.gen_range(1..=MAX_PACKETS),
            };
            OracleRequest {
                packets,
                earliest,
                deadline,
                shape,
            }
        })
        .collect();
    OracleInstance { capacity, requests }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_single_request_fits() {
        let inst = OracleInstance {
            capacity: alloc::vec![1, 1, 1],
            requests: alloc::vec![OracleRequest {
                packets: 2,
                earliest: 0,
                deadline: 2,
                shape: ShapeConstraint::Arbitrary,
            }],
        };
        assert!(is_feasible(&inst).unwrap());
    }

    #[test]
    fn oversubscribed_instance_is_infeasible() {
        let inst = OracleInstance {
            capacity: alloc::vec![1, 1],
            requests: alloc::vec![
                OracleRequest {
                    packets: 2,
                    earliest: 0,
                    deadline: 1,
                    shape: ShapeConstraint::Arbitrary,
                },
                OracleRequest {
                    packets: 1,
                    earliest: 0,
                    deadline: 1,
                    shape: ShapeConstraint::Arbitrary,
                },
            ],
        };
        assert!(!is_feasible(&inst).unwrap());
    }

    #[test]
    fn contiguous_block_cannot_pause() {
        // Capacity dips mid-window: a 3-block cannot bridge the zero slot.
        let inst = OracleInstance {
            capacity: alloc::vec![1, 0, 1, 1],
            requests: alloc::vec![OracleRequest {
                packets: 3,
                earliest: 0,
                deadline: 3,
                shape: ShapeConstraint::Contiguous,
            }],
        };
        assert!(!is_feasible(&inst).unwrap());
        let inst2 = OracleInstance {
            capacity: alloc::vec![1, 1, 1, 0],
            requests: inst.requests.clone(),
        };
        assert!(is_feasible(&inst2).unwrap());
    }

    #[test]
    fn per_slot_cap_forces_spreading() {
        let inst = OracleInstance {
            capacity: alloc::vec![4, 4],
            requests: alloc::vec![OracleRequest {
                packets: 3,
                earliest: 0,
                deadline: 1,
                shape: ShapeConstraint::PerSlotCap(1),
            }],
        };
        assert!(!is_feasible(&inst).unwrap(), "cap 1 over 2 slots holds 2");
    }

    #[test]
    fn interleaving_blocks_and_flexible_demand() {
        // Block needs slots 1-2 or 2-3; flexible demand fills around it.
        let inst = OracleInstance {
            capacity: alloc::vec![1, 1, 1, 1],
            requests: alloc::vec![
                OracleRequest {
                    packets: 2,
                    earliest: 1,
                    deadline: 3,
                    shape: ShapeConstraint::Contiguous,
                },
                OracleRequest {
                    packets: 2,
                    earliest: 0,
                    deadline: 3,
                    shape: ShapeConstraint::Arbitrary,
                },
            ],
        };
        assert!(is_feasible(&inst).unwrap());
    }

    #[test]
    fn bounds_are_enforced() {
        let inst = OracleInstance {
            capacity: alloc::vec![1; 9],
            requests: alloc::vec![],
        };
        assert!(matches!(
            is_feasible(&inst),
            Err(OracleError::HorizonTooLong { .. })
        ));
    }

    #[test]
    fn standard_suite_is_stable_and_valid() {
        let a = standard_suite(STANDARD_SUITE_SIZE, STANDARD_SUITE_SEED);
        let b = standard_suite(STANDARD_SUITE_SIZE, STANDARD_SUITE_SEED);
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        for inst in &a {
            inst.validate().unwrap();
        }
        // The suite must exercise both verdicts and block shapes.
        let feasible = a.iter().filter(|i| is_feasible(i).unwrap()).count();
        assert!(feasible > 5, "suite too hard: {feasible} feasible");
        assert!(feasible < 50, "suite too easy: all feasible");
        assert!(a.iter().any(|i| i.contains_contiguous()));
    }
}
