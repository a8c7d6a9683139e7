//! Physical-side models: the aggregated packetized generation source
//! (a virtual power plant of distributed production) and storage units.
//!
//! Generation is quantized to whole packets per slot; forecast and actual
//! traces are produced by pure functions of (profile, window, seed), which
//! is what makes replay exact.

use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::math;

/// Shape of the aggregated generation over the run.
#[derive(Debug, Clone, PartialEq)]
pub enum GenerationProfile {
    /// Flat output every slot.
    Constant { packets_per_slot: u32 },
    /// Half-sine between sunrise and sunset (slots within a day), zero
    /// outside. The pattern repeats every `slots_per_day` slots.
    SolarDiurnal {
        peak_packets: u32,
        sunrise_slot: u32,
        sunset_slot: u32,
    },
    /// Explicit per-slot packet counts.
    Trace(Vec<u32>),
}

/// Deviation of realized generation from its forecast.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForecastErrorModel {
    None,
    /// `actual = max(0, round(forecast * (1 + e)))` with `e` drawn
    /// uniformly from `[-sigma, sigma]`, deterministic per (seed, slot).
    MultiplicativeNoise { sigma: f64 },
}

/// Per-slot forecast generation in packets for `window` (absolute slot
/// indices). Pure in (profile, window).
pub fn forecast_generation(
    profile: &GenerationProfile,
    window: core::ops::Range<u32>,
    slots_per_day: u32,
) -> Vec<u32> {
    window
        .map(|slot| match profile {
            GenerationProfile::Constant { packets_per_slot } => *packets_per_slot,
            GenerationProfile::SolarDiurnal {
                peak_packets,
                sunrise_slot,
                sunset_slot,
            } => {
                let t = slot % slots_per_day.max(1);
                if t < *sunrise_slot || t >= *sunset_slot || sunset_slot <= sunrise_slot {
                    0
                } else {
                    let span = f64::from(sunset_slot - sunrise_slot);
                    let phase = f64::from(t - sunrise_slot) / span;
                    let value = f64::from(*peak_packets) * math::sin(core::f64::consts::PI * phase);
                    math::round_half_up(value).max(0.0) as u32
                }
            }
            GenerationProfile::Trace(values) => values.get(slot as usize).copied().unwrap_or(0),
        })
        .collect()
}

/// Realized per-slot generation from a forecast. With no error model this
/// is the identity; with noise, draws are made slot by slot from a stream
/// seeded only by `seed`, so the output is reproducible.
pub fn realize_generation(forecast: &[u32], model: ForecastErrorModel, seed: u64) -> Vec<u32> {
    match model {
        ForecastErrorModel::None => forecast.to_vec(),
        ForecastErrorModel::MultiplicativeNoise { sigma } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            forecast
                .iter()
                .map(|&f| {
                    let unit: f64 = rng.gen();
                    if sigma == 0.0 {
                        return f;
                    }
                    let e = (unit * 2.0 - 1.0) * sigma;
                    let scaled = f64::from(f) * (1.0 + e);
                    math::round_half_up(scaled).max(0.0) as u32
                })
                .collect()
        }
    }
}

/// Storage tier: buffers are the short-term units (batteries, heat
/// pumps); the cache tier models long-horizon storage with the same
/// mechanics and stays disabled unless a scenario configures one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StorageTier {
    Buffer,
    Cache,
}

impl fmt::Display for StorageTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StorageTier::Buffer => f.write_str("buffer"),
            StorageTier::Cache => f.write_str("cache"),
        }
    }
}

/// State of charge and limits of one storage unit, all in packets.
///
/// Round-trip efficiency applies on charge: storing `a` packets gains
/// `floor(eta * a)` of state of charge, with the fractional remainder
/// carried forward exactly (in thousandths) so no energy is ever created
/// and at most one packet is lost to truncation over an entire run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StorageState {
    soc_packets: u32,
    capacity_packets: u32,
    charge_rate: u32,
    discharge_rate: u32,
    eta_permille: u32,
    remainder_permille: u32,
    tier: StorageTier,
}

pub const ETA_SCALE: u32 = 1000;

impl StorageState {
    pub fn new(
        soc_packets: u32,
        capacity_packets: u32,
        charge_rate: u32,
        discharge_rate: u32,
        eta_permille: u32,
        tier: StorageTier,
    ) -> Result<Self, StorageError> {
        if soc_packets > capacity_packets {
            return Err(StorageError::SocAboveCapacity);
        }
        if charge_rate == 0 || discharge_rate == 0 {
            return Err(StorageError::ZeroRate);
        }
        if eta_permille == 0 || eta_permille > ETA_SCALE {
            return Err(StorageError::InvalidEfficiency);
        }
        Ok(Self {
            soc_packets,
            capacity_packets,
            charge_rate,
            discharge_rate,
            eta_permille,
            remainder_permille: 0,
            tier,
        })
    }

    pub fn soc(&self) -> u32 {
        self.soc_packets
    }

    pub fn capacity(&self) -> u32 {
        self.capacity_packets
    }

    pub fn charge_rate(&self) -> u32 {
        self.charge_rate
    }

    pub fn discharge_rate(&self) -> u32 {
        self.discharge_rate
    }

    pub fn eta_permille(&self) -> u32 {
        self.eta_permille
    }

    pub fn tier(&self) -> StorageTier {
        self.tier
    }

    pub fn headroom(&self) -> u32 {
        self.capacity_packets - self.soc_packets
    }

    /// State-of-charge gain if `charge` packets were stored now.
    pub fn gain_for_charge(&self, charge: u32) -> u32 {
        (u64::from(self.remainder_permille) + u64::from(self.eta_permille) * u64::from(charge))
            as u32
            / ETA_SCALE
    }

    /// Largest charge (bounded by the charge rate and `offered`) whose
    /// efficiency-adjusted gain still fits under capacity.
    pub fn max_charge(&self, offered: u32) -> u32 {
        let mut a = offered.min(self.charge_rate);
        while a > 0 && self.gain_for_charge(a) > self.headroom() {
            a -= 1;
        }
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StorageError {
    SocAboveCapacity,
    ZeroRate,
    InvalidEfficiency,
    ChargeRateExceeded { action: u32, rate: u32 },
    DischargeRateExceeded { action: u32, rate: u32 },
    OverDischarge { action: u32, soc: u32 },
    OverCharge { gain: u32, headroom: u32 },
}

impl fmt::Display for StorageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StorageError::SocAboveCapacity => f.write_str("state of charge exceeds capacity"),
            StorageError::ZeroRate => f.write_str("charge and discharge rates must be >= 1"),
            StorageError::InvalidEfficiency => {
                f.write_str("round-trip efficiency must be in (0, 1]")
            }
            StorageError::ChargeRateExceeded { action, rate } => {
                write!(f, "charge of {action} exceeds rate {rate}")
            }
            StorageError::DischargeRateExceeded { action, rate } => {
                write!(f, "discharge of {action} exceeds rate {rate}")
            }
            StorageError::OverDischarge { action, soc } => {
                write!(f, "discharge of {action} exceeds state of charge {soc}")
            }
            StorageError::OverCharge { gain, headroom } => {
                write!(f, "charge gain of {gain} exceeds headroom {headroom}")
            }
        }
    }
}

/// Applies one slot's signed storage action (positive = charge packets in,
/// negative = discharge packets out) and returns the state-of-charge
/// delta. The caller — the server's dispatch — is responsible for never
/// emitting an action that violates rates or bounds; violations here are
/// hard errors, not clamps.
pub fn apply_storage_action(state: &mut StorageState, action: i64) -> Result<i64, StorageError> {
    if action > 0 {
        let charge = action as u32;
        if charge > state.charge_rate {
            return Err(StorageError::ChargeRateExceeded {
                action: charge,
                rate: state.charge_rate,
            });
        }
        let gain = state.gain_for_charge(charge);
        if gain > state.headroom() {
            return Err(StorageError::OverCharge {
                gain,
                headroom: state.headroom(),
            });
        }
        let total =
            u64::from(state.remainder_permille) + u64::from(state.eta_permille) * u64::from(charge);
        state.remainder_permille = (total % u64::from(ETA_SCALE)) as u32;
        state.soc_packets += gain;
        Ok(i64::from(gain))
    } else if action < 0 {
        let discharge = action.unsigned_abs() as u32;
        if discharge > state.discharge_rate {
            return Err(StorageError::DischargeRateExceeded {
                action: discharge,
                rate: state.discharge_rate,
            });
        }
        if discharge > state.soc_packets {
            return Err(StorageError::OverDischarge {
                action: discharge,
                soc: state.soc_packets,
            });
        }
        state.soc_packets -= discharge;
        Ok(-i64::from(discharge))
    } else {
        Ok(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn buffer(soc: u32, cap: u32, rate: u32, eta: u32) -> StorageState {
        StorageState::new(soc, cap, rate, rate, eta, StorageTier::Buffer).unwrap()
    }

    #[test]
    fn constant_profile_is_flat() {
        let p = GenerationProfile::Constant { packets_per_slot: 5 };
        assert_eq!(forecast_generation(&p, 0..3, 144), alloc::vec![5, 5, 5]);
    }

    #[test]
    fn solar_is_dark_at_midnight_and_peaks_at_noon() {
        let p = GenerationProfile::SolarDiurnal {
            peak_packets: 10,
            sunrise_slot: 36,
            sunset_slot: 108,
        };
        let day = forecast_generation(&p, 0..144, 144);
        assert_eq!(day[0], 0, "midnight slot produces nothing");
        assert_eq!(day[143], 0);
        // Solar noon sits mid-way through the daylight span.
        assert_eq!(day[72], 10, "half-sine maximum lands exactly on peak");
    }

    #[test]
    fn solar_is_unimodal_within_daylight() {
        let p = GenerationProfile::SolarDiurnal {
            peak_packets: 9,
            sunrise_slot: 30,
            sunset_slot: 100,
        };
        let day = forecast_generation(&p, 0..144, 144);
        for t in 0..30 {
            assert_eq!(day[t], 0);
        }
        for t in 100..144 {
            assert_eq!(day[t], 0);
        }
        let peak_at = (30 + 100) / 2;
        for t in 30..peak_at {
            assert!(day[t] <= day[t + 1], "rising flank at {t}");
        }
        for t in peak_at..99 {
            assert!(day[t] >= day[t + 1], "falling flank at {t}");
        }
    }

    #[test]
    fn realize_without_error_is_identity() {
        let f = alloc::vec![3, 7, 0, 12];
        assert_eq!(realize_generation(&f, ForecastErrorModel::None, 9), f);
        assert_eq!(
            realize_generation(&f, ForecastErrorModel::MultiplicativeNoise { sigma: 0.0 }, 9),
            f
        );
    }

    #[test]
    fn realize_with_noise_is_reproducible() {
        let f = alloc::vec![10, 10];
        let m = ForecastErrorModel::MultiplicativeNoise { sigma: 0.2 };
        let a = realize_generation(&f, m, 1234);
        let b = realize_generation(&f, m, 1234);
        assert_eq!(a, b);
        for (&actual, &fore) in a.iter().zip(f.iter()) {
            assert!(actual <= fore + 2 && actual + 2 >= fore, "within 20% of 10");
        }
    }

    #[test]
    fn charge_and_discharge_move_soc() {
        let mut s = buffer(5, 20, 10, 1000);
        assert_eq!(apply_storage_action(&mut s, 2), Ok(2));
        assert_eq!(s.soc(), 7);
        assert_eq!(apply_storage_action(&mut s, -3), Ok(-3));
        assert_eq!(s.soc(), 4);
    }

    #[test]
    fn over_discharge_is_an_error() {
        let mut s = buffer(5, 20, 10, 1000);
        assert_eq!(
            apply_storage_action(&mut s, -6),
            Err(StorageError::OverDischarge { action: 6, soc: 5 })
        );
        assert_eq!(s.soc(), 5, "state untouched on error");
    }

    #[test]
    fn efficiency_remainder_accumulates() {
        let mut s = buffer(0, 20, 10, 500);
        assert_eq!(apply_storage_action(&mut s, 1), Ok(0));
        assert_eq!(s.soc(), 0, "half a packet is carried, not stored");
        assert_eq!(apply_storage_action(&mut s, 1), Ok(1));
        assert_eq!(s.soc(), 1, "two half packets make one");
    }

    #[test]
    fn ninety_percent_efficiency_floors() {
        let mut s = buffer(0, 20, 10, 900);
        assert_eq!(apply_storage_action(&mut s, 10), Ok(9));
        assert_eq!(s.soc(), 9);
    }

    proptest! {
        #[test]
        fn stored_energy_never_exceeds_eta_adjusted_charge(
            eta in 1u32..=1000,
            charges in proptest::collection::vec(0u32..5, 1..40),
        ) {
            let mut s = buffer(0, 100_000, 5, eta);
            let mut total_charged = 0u64;
            let mut total_gained = 0u64;
            for c in charges {
                total_charged += u64::from(c);
                total_gained += apply_storage_action(&mut s, i64::from(c)).unwrap() as u64;
            }
            // floor-accumulated gains are within one packet of the exact
            // eta-scaled total and never above it
            let exact = total_charged * u64::from(eta) / 1000;
            prop_assert!(total_gained <= exact + 1);
            prop_assert!(total_gained + 1 >= exact);
            prop_assert!(u64::from(s.soc()) == total_gained);
        }

        #[test]
        fn realization_is_pure(seed in any::<u64>(), sigma in 0.0f64..0.5) {
            let f = alloc::vec![4, 9, 0, 17, 2];
            let m = ForecastErrorModel::MultiplicativeNoise { sigma };
            prop_assert_eq!(
                realize_generation(&f, m, seed),
                realize_generation(&f, m, seed)
            );
        }
    }
}
