//! End-to-end runs of the slot engine: conservation, determinism,
//! handshake conformance, service guarantees and the KPI pipeline.

use sden_core::engine::{
    compute_kpis, replay_check, run, Event, HeatingConfig, HouseholdConfig, LocalBufferConfig,
    OutdoorProfile, ScenarioConfig, SimResult, StorageUnitConfig, WashingMachineConfig,
};
use sden_core::engine::EvConfig;
use sden_core::loads::BaseloadTrace;
use sden_core::protocol::{ChannelConfig, Payload, RouterMode};
use sden_core::resources::{ForecastErrorModel, GenerationProfile, StorageTier};

fn buffer_unit(name: &str, soc: u32, cap: u32, rate: u32, eta: u32) -> StorageUnitConfig {
    StorageUnitConfig {
        name: name.into(),
        tier: StorageTier::Buffer,
        capacity_packets: cap,
        charge_rate: rate,
        discharge_rate: rate,
        eta_permille: eta,
        initial_soc: soc,
    }
}

/// Asserts the per-slot and cumulative energy balance from the records:
/// generation plus discharge equals served baseload plus deliveries plus
/// charge plus spill, with local flows balancing separately.
fn assert_conservation(result: &SimResult) {
    let mut cum = [0i64; 2];
    for d in &result.dispatch {
        let flex: u32 = d.class_alloc.iter().sum();
        let lhs = i64::from(d.gen_actual) + i64::from(d.discharge);
        let rhs = i64::from(d.baseload_served)
            + i64::from(flex)
            + i64::from(d.charge)
            + i64::from(d.spill);
        assert_eq!(lhs, rhs, "slot {} energy balance", d.slot);
        assert_eq!(
            d.local_discharge, d.local_delivered,
            "slot {} local flows", d.slot
        );
        cum[0] += lhs;
        cum[1] += rhs;
    }
    assert_eq!(cum[0], cum[1], "cumulative energy balance");
}

#[test]
fn empty_fleet_spills_or_charges_everything() {
    let mut config = ScenarioConfig::empty(10);
    config.source = GenerationProfile::Constant { packets_per_slot: 2 };
    config.storage = vec![buffer_unit("b", 0, 10, 1, 1000)];
    let result = run(&config).unwrap();
    assert!(result.trace.iter().all(|m| !matches!(
        m.payload,
        Payload::Request(_) | Payload::Emergency(_)
    )));
    assert_conservation(&result);
    let charged: u32 = result.dispatch.iter().map(|d| d.charge).sum();
    let spilled: u32 = result.dispatch.iter().map(|d| d.spill).sum();
    assert_eq!(charged + spilled, 20, "all generation charges or spills");
    assert_eq!(charged, 10, "buffer fills at its rate then saturates");
    assert!(result.kpis.no_demand);
    assert_eq!(result.kpis.acceptance_rate, 1.0);
}

#[test]
fn single_ev_completes_under_ample_supply() {
    let mut config = ScenarioConfig::empty(100);
    config.source = GenerationProfile::Constant { packets_per_slot: 8 };
    let mut h = HouseholdConfig::forward_only("h1");
    h.evs.push(EvConfig {
        arrival_slot: 0,
        departure_slot: 100,
        energy_needed_wh: 4000.0,
        max_packets_per_slot: 8,
    });
    config.households.push(h);
    let result = run(&config).unwrap();
    assert_conservation(&result);
    assert_eq!(result.kpis.unserved_packets, 0);
    assert_eq!(result.kpis.deadline_miss_count, 0);
    assert_eq!(result.kpis.acceptance_rate, 1.0);
    let delivered: u32 = result.dispatch.iter().flat_map(|d| &d.class_alloc).sum();
    assert_eq!(delivered, 400);
    assert!(result.handshake_violations().is_empty());
}

#[test]
fn oversubscription_rejects_but_conserves() {
    let mut config = ScenarioConfig::empty(20);
    config.source = GenerationProfile::Constant { packets_per_slot: 2 };
    for i in 0..4 {
        let mut h = HouseholdConfig::forward_only(&format!("h{i}"));
        h.evs.push(EvConfig {
            arrival_slot: 0,
            departure_slot: 20,
            energy_needed_wh: 300.0,
            max_packets_per_slot: 4,
        });
        config.households.push(h);
    }
    let result = run(&config).unwrap();
    assert!(result.kpis.rejection_rate > 0.0, "demand exceeds supply");
    assert_conservation(&result);
    assert!(result.handshake_violations().is_empty());
}

#[test]
fn hand_traced_three_request_scenario() {
    // Capacity one packet per slot over five slots; demand of six packets
    // across three clients. Walked by hand: the washing block takes slots
    // 0-1, the relaxed charger takes 2-3, the tight charger is rejected,
    // retries twice against a full horizon, escalates, and the emergency
    // still finds no energy. One packet spills in slot 4.
    let mut config = ScenarioConfig::empty(5);
    config.server.class_shares = vec![1.0];
    config.server.planning_horizon_slots = 5;
    config.source = GenerationProfile::Constant { packets_per_slot: 1 };
    let mut h1 = HouseholdConfig::forward_only("h1");
    h1.washing_machines.push(WashingMachineConfig {
        submit_slot: 0,
        packets: 2,
        earliest_start: 0,
        ready_by: 4,
    });
    let mut h2 = HouseholdConfig::forward_only("h2");
    h2.evs.push(EvConfig {
        arrival_slot: 0,
        departure_slot: 5,
        energy_needed_wh: 20.0,
        max_packets_per_slot: 1,
    });
    let mut h3 = HouseholdConfig::forward_only("h3");
    h3.evs.push(EvConfig {
        arrival_slot: 0,
        departure_slot: 2,
        energy_needed_wh: 20.0,
        max_packets_per_slot: 1,
    });
    config.households.extend([h1, h2, h3]);

    let result = run(&config).unwrap();
    assert_conservation(&result);
    let k = &result.kpis;
    assert!(!k.no_demand);
    assert_eq!(k.emergency_count, 1, "one escalation after three rejections");
    assert_eq!(k.unserved_packets, 0, "accepted requests all complete");
    assert_eq!(k.deadline_miss_count, 0);
    assert_eq!(k.spill_packets, 1, "slot 4 has no demand left");
    let accepts = (k.acceptance_rate * 6.0).round() as u32;
    assert_eq!(accepts, 2, "washing machine and relaxed charger");
    assert!((k.mean_request_latency_slots - 2.0).abs() < 1e-12);
    assert!(result
        .events
        .iter()
        .any(|e| matches!(e, Event::EmergencyRaised { .. })));
    assert!(result
        .events
        .iter()
        .any(|e| matches!(e, Event::EmergencyRejected { .. })));
    assert!(result.handshake_violations().is_empty());
}

#[test]
fn kpis_recompute_identically() {
    let mut config = ScenarioConfig::empty(30);
    config.source = GenerationProfile::Constant { packets_per_slot: 3 };
    config.storage = vec![buffer_unit("b", 5, 20, 2, 900)];
    let mut h = HouseholdConfig::forward_only("h1");
    h.washing_machines.push(WashingMachineConfig {
        submit_slot: 0,
        packets: 5,
        earliest_start: 2,
        ready_by: 20,
    });
    h.evs.push(EvConfig {
        arrival_slot: 3,
        departure_slot: 28,
        energy_needed_wh: 200.0,
        max_packets_per_slot: 2,
    });
    config.households.push(h);
    let result = run(&config).unwrap();
    assert_eq!(compute_kpis(&result), result.kpis);
}

#[test]
fn replay_is_byte_identical_and_seed_sensitive() {
    let mut config = ScenarioConfig::empty(24);
    config.seed = 99;
    config.source = GenerationProfile::SolarDiurnal {
        peak_packets: 6,
        sunrise_slot: 4,
        sunset_slot: 20,
    };
    config.forecast_error = ForecastErrorModel::MultiplicativeNoise { sigma: 0.3 };
    config.storage = vec![buffer_unit("b", 3, 12, 2, 900)];
    let mut h = HouseholdConfig::forward_only("h1");
    h.evs.push(EvConfig {
        arrival_slot: 2,
        departure_slot: 22,
        energy_needed_wh: 300.0,
        max_packets_per_slot: 3,
    });
    config.households.push(h);

    let result = run(&config).unwrap();
    assert!(replay_check(&result, &config).is_ok());

    let mut other = config.clone();
    other.seed = 100;
    let diff = replay_check(&result, &other);
    assert!(diff.is_err(), "a different seed must change the trace");
}

#[test]
fn acknowledged_packets_equal_deliveries_on_lossless_channels() {
    let mut config = ScenarioConfig::empty(40);
    config.source = GenerationProfile::Constant { packets_per_slot: 4 };
    for i in 0..3 {
        let mut h = HouseholdConfig::forward_only(&format!("h{i}"));
        h.evs.push(EvConfig {
            arrival_slot: i,
            departure_slot: 40,
            energy_needed_wh: 150.0,
            max_packets_per_slot: 2,
        });
        config.households.push(h);
    }
    let result = run(&config).unwrap();
    assert!(result.handshake_violations().is_empty());
    let delivered: u64 = result
        .trace
        .iter()
        .filter_map(|m| match m.payload {
            Payload::DeliveryNotice { packets, .. } => Some(u64::from(packets)),
            _ => None,
        })
        .sum();
    let acked: u64 = result
        .trace
        .iter()
        .filter_map(|m| match m.payload {
            Payload::Ack { packets, .. } => Some(u64::from(packets)),
            _ => None,
        })
        .sum();
    assert_eq!(delivered, acked);
    assert!(delivered > 0);
}

#[test]
fn heating_keeps_the_band_within_one_packet() {
    // A well-insulated zone sized so one packet per slot outweighs the
    // worst-case leak: loss near the floor is about 0.2 degrees per slot,
    // one packet adds 0.25. Served deadlines then keep the trajectory
    // within a quantum of the band.
    let mut config = ScenarioConfig::empty(72);
    config.source = GenerationProfile::Constant { packets_per_slot: 4 };
    config.outdoor = OutdoorProfile::Constant(-5.0);
    let mut h = HouseholdConfig::forward_only("h1");
    h.heating.push(HeatingConfig {
        initial_temp_c: 20.5,
        t_min_c: 19.0,
        t_max_c: 24.0,
        r_thermal: 0.5,
        c_thermal: 40.0,
        heater_w: 600.0,
        occupied: true,
        unoccupied_relax_c: 3.0,
        lookahead_slots: 6,
    });
    config.households.push(h);
    let result = run(&config).unwrap();
    assert_conservation(&result);
    assert_eq!(result.kpis.deadline_miss_count, 0);
    assert_eq!(result.kpis.unserved_packets, 0);

    // Replay the closed loop from the records to check the band.
    let spec = config.packet;
    let mut thermal = sden_core::loads::ThermalState {
        indoor_temp_c: 20.5,
        t_min_c: 19.0,
        t_max_c: 24.0,
        r_thermal: 0.5,
        c_thermal: 40.0,
        heater_w: 600.0,
        occupied: true,
    };
    let quantum = spec.size_wh() / thermal.c_thermal;
    let requests = result.requests();
    for t in 0..72u32 {
        let heat: u32 = result
            .schedule
            .assignments_at(sden_core::SlotIndex(t))
            .iter()
            .filter(|(id, _)| requests[id].client_id.0 == "h1/heat0")
            .map(|(_, n)| *n)
            .sum();
        thermal = sden_core::loads::thermal_step(&thermal, -5.0, heat, &spec).unwrap();
        assert!(
            thermal.indoor_temp_c >= 19.0 - quantum - 1e-9,
            "slot {t}: {:.3} fell more than a quantum below the band",
            thermal.indoor_temp_c
        );
    }
}

#[test]
fn local_first_household_serves_from_its_own_buffer() {
    let mut config = ScenarioConfig::empty(30);
    config.source = GenerationProfile::Constant { packets_per_slot: 0 };
    let mut h = HouseholdConfig::forward_only("h1");
    h.router_mode = RouterMode::LocalFirst;
    h.local_buffer = Some(LocalBufferConfig {
        capacity_packets: 20,
        discharge_rate: 2,
        initial_soc: 12,
    });
    h.evs.push(EvConfig {
        arrival_slot: 0,
        departure_slot: 30,
        energy_needed_wh: 100.0,
        max_packets_per_slot: 2,
    });
    config.households.push(h);
    let result = run(&config).unwrap();
    assert_conservation(&result);
    assert!(result
        .events
        .iter()
        .any(|e| matches!(e, Event::LocalCommit { packets: 10, .. })));
    let local: u32 = result.dispatch.iter().map(|d| d.local_delivered).sum();
    assert_eq!(local, 10, "the whole session rides the local buffer");
    assert_eq!(result.kpis.unserved_packets, 0);
    assert!(result.handshake_violations().is_empty());
}

#[test]
fn forecast_error_keeps_books_balanced() {
    let mut config = ScenarioConfig::empty(48);
    config.seed = 7;
    config.source = GenerationProfile::Constant { packets_per_slot: 5 };
    config.forecast_error = ForecastErrorModel::MultiplicativeNoise { sigma: 0.5 };
    config.baseload = BaseloadTrace::constant(1, 48);
    config.storage = vec![buffer_unit("b", 4, 16, 2, 900)];
    for i in 0..3 {
        let mut h = HouseholdConfig::forward_only(&format!("h{i}"));
        h.evs.push(EvConfig {
            arrival_slot: 0,
            departure_slot: 48,
            energy_needed_wh: 400.0,
            max_packets_per_slot: 2,
        });
        config.households.push(h);
    }
    let result = run(&config).unwrap();
    assert_conservation(&result);
    // State of charge stays within bounds throughout.
    for d in &result.dispatch {
        assert!(d.soc <= 16, "slot {}: soc {} over capacity", d.slot, d.soc);
    }
}

#[test]
fn lossy_channel_stays_deterministic() {
    let mut config = ScenarioConfig::empty(20);
    config.seed = 5;
    config.channel = ChannelConfig {
        delay_slots: 0,
        loss_probability: 0.4,
    };
    config.source = GenerationProfile::Constant { packets_per_slot: 2 };
    let mut h = HouseholdConfig::forward_only("h1");
    h.evs.push(EvConfig {
        arrival_slot: 0,
        departure_slot: 20,
        energy_needed_wh: 100.0,
        max_packets_per_slot: 2,
    });
    config.households.push(h);
    let a = run(&config).unwrap();
    let b = run(&config).unwrap();
    assert_eq!(a.trace_lines(), b.trace_lines());
    assert!(
        a.events
            .iter()
            .any(|e| matches!(e, Event::MessageDropped { .. })),
        "a 40% lossy channel should drop something"
    );
}

#[test]
fn delayed_channel_shifts_the_handshake() {
    let mut config = ScenarioConfig::empty(30);
    config.channel = ChannelConfig {
        delay_slots: 2,
        loss_probability: 0.0,
    };
    config.source = GenerationProfile::Constant { packets_per_slot: 3 };
    let mut h = HouseholdConfig::forward_only("h1");
    h.evs.push(EvConfig {
        arrival_slot: 0,
        departure_slot: 25,
        energy_needed_wh: 80.0,
        max_packets_per_slot: 2,
    });
    config.households.push(h);
    let result = run(&config).unwrap();
    assert_conservation(&result);
    // Request sent at 0 arrives at the router at 2, is forwarded at 2 and
    // reaches the server at 4.
    let decision_slot = result
        .trace
        .iter()
        .find(|m| matches!(m.payload, Payload::Accept { .. } | Payload::Reject(_)))
        .map(|m| m.sent_slot.index());
    assert_eq!(decision_slot, Some(4));
}
