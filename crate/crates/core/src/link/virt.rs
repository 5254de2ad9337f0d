//! Deterministic in-process link: client, pipe and drone server coupled on
//! a shared virtual clock.
//!
//! Datagrams are timestamped with the configured one-way latency and
//! delivered in order; drops draw from the run seed. While a reply-bearing
//! command waits, simulated physics keep ticking (the airframe does not
//! freeze because the radio is busy).

use std::collections::VecDeque;

use crate::clock::VirtualClock;
use crate::rng::{SeededRng, Stream};
use crate::sim::{Simulator, TickStatus};

use super::server::CommandProcessor;
use super::{LinkConfig, LinkError};

/// Harness owning the simulated drone, its protocol server and the lossy
/// datagram pipe, all advanced on one virtual clock.
pub struct VirtualHarness {
    clock: VirtualClock,
    cfg: LinkConfig,
    sim: Simulator,
    server: CommandProcessor,
    drops: SeededRng,
    /// Client -> server datagrams awaiting delivery: (deliver_at_us, bytes).
    inbound: VecDeque<(u64, Vec<u8>)>,
    /// Physics step used while waiting inside a blocking send.
    tick_dt_us: u64,
    sends_total: u32,
}

impl VirtualHarness {
    pub fn new(sim: Simulator, cfg: LinkConfig, seed: u64, tick_dt_us: u64) -> Self {
        assert!(tick_dt_us > 0);
        Self {
            clock: VirtualClock::new(),
            cfg,
            sim,
            server: CommandProcessor::new(),
            drops: SeededRng::new(seed, Stream::LinkDrops),
            inbound: VecDeque::new(),
            tick_dt_us,
            sends_total: 0,
        }
    }

    pub fn clock(&self) -> &VirtualClock {
        &self.clock
    }

    pub fn sim(&self) -> &Simulator {
        &self.sim
    }

    pub fn sim_mut(&mut self) -> &mut Simulator {
        &mut self.sim
    }

    pub fn config(&self) -> &LinkConfig {
        &self.cfg
    }

    pub fn sends_total(&self) -> u32 {
        self.sends_total
    }

    /// Apply every datagram whose delivery time has arrived.
    fn deliver_due(&mut self) {
        let now = self.clock.now_micros();
        while let Some(&(at, _)) = self.inbound.front() {
            if at > now {
                break;
            }
            let (_, bytes) = self.inbound.pop_front().expect("peeked");
            // replies to queued rc datagrams do not exist; other replies
            // from stale deliveries are dropped on the floor
            let _ = self.server.handle_datagram(&bytes, &mut self.sim);
        }
    }

    /// Advance the world by `dt_us`, delivering due datagrams first.
    pub fn tick(&mut self, dt_us: u64) -> TickStatus {
        self.deliver_due();
        let status = self.sim.tick(dt_us);
        self.clock.advance(dt_us);
        status
    }

    /// Tick up to an absolute instant in `tick_dt_us` steps plus a partial
    /// remainder, landing exactly on `t_us`.
    pub fn advance_to(&mut self, t_us: u64) {
        while self.clock.now_micros() < t_us {
            let remaining = t_us - self.clock.now_micros();
            let step = remaining.min(self.tick_dt_us);
            self.tick(step);
        }
    }

    /// Fire-and-forget rc update; returns immediately.
    pub fn send_rc(&mut self, a: i32, b: i32, c: i32, d: i32) {
        self.sends_total += 1;
        if self.drops.chance(self.cfg.drop_probability) {
            return; // lost on the air
        }
        let deliver_at = self.clock.now_micros() + self.cfg.one_way_latency_us;
        self.inbound
            .push_back((deliver_at, format!("rc {a} {b} {c} {d}").into_bytes()));
        self.deliver_due();
    }

    /// Reply-bearing request with timeout and retries. The virtual clock
    /// advances by one round trip on success, by the response timeout per
    /// failed attempt.
    pub fn send_command(&mut self, line: &str) -> Result<String, LinkError> {
        let mut attempts = 0u32;
        for _ in 0..=self.cfg.retries {
            attempts += 1;
            self.sends_total += 1;
            let sent_at = self.clock.now_micros();
            let deadline = sent_at + self.cfg.response_timeout_us;

            let request_lost = self.drops.chance(self.cfg.drop_probability);
            if !request_lost {
                let deliver_at = sent_at + self.cfg.one_way_latency_us;
                let reply_at = deliver_at + self.cfg.one_way_latency_us;
                if reply_at <= deadline {
                    // physics run while the datagram flies
                    self.advance_to(deliver_at);
                    self.deliver_due(); // earlier rc traffic applies first
                    let reply = self.server.handle_datagram(line.as_bytes(), &mut self.sim);
                    let reply_lost = self.drops.chance(self.cfg.drop_probability);
                    match reply {
                        Some(text) if !reply_lost => {
                            self.advance_to(reply_at);
                            return Ok(text);
                        }
                        _ => {}
                    }
                }
            }
            self.advance_to(deadline);
        }
        Err(LinkError::Timeout { attempts })
    }

    /// Current 10 Hz state line (virtual mode exposes it on demand).
    pub fn state_line(&self) -> String {
        super::encode_state(&self.sim.telemetry())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{EnergyProfile, FlightState, PayloadConfig, PowerState, SimParams};

    fn harness(cfg: LinkConfig) -> VirtualHarness {
        let sim = Simulator::new(
            PayloadConfig::OpenMv,
            EnergyProfile::default_table(),
            SimParams::default(),
        );
        VirtualHarness::new(sim, cfg, 42, 50_000)
    }

    #[test]
    fn zero_latency_round_trip() {
        let mut h = harness(LinkConfig::default());
        assert_eq!(h.send_command("command").unwrap(), "ok");
        assert_eq!(h.clock().now_micros(), 0, "no latency, no waiting");
        assert_eq!(h.send_command("battery?").unwrap(), "100");
    }

    #[test]
    fn latency_costs_one_round_trip_on_the_clock() {
        let cfg = LinkConfig {
            one_way_latency_us: 50_000,
            ..LinkConfig::default()
        };
        let mut h = harness(cfg);
        let t0 = h.clock().now_micros();
        assert_eq!(h.send_command("command").unwrap(), "ok");
        assert_eq!(h.clock().now_micros() - t0, 100_000);
    }

    #[test]
    fn full_drop_times_out_after_one_plus_retries_sends() {
        let cfg = LinkConfig {
            drop_probability: 1.0,
            response_timeout_us: 200_000,
            retries: 2,
            ..LinkConfig::default()
        };
        let mut h = harness(cfg);
        let t0 = h.clock().now_micros();
        match h.send_command("command") {
            Err(LinkError::Timeout { attempts }) => assert_eq!(attempts, 3),
            other => panic!("expected timeout, got {other:?}"),
        }
        assert_eq!(h.sends_total(), 3);
        assert_eq!(h.clock().now_micros() - t0, 3 * 200_000);
    }

    #[test]
    fn no_drops_and_finite_latency_never_time_out() {
        let cfg = LinkConfig {
            one_way_latency_us: 100_000,
            response_timeout_us: 1_000_000,
            ..LinkConfig::default()
        };
        let mut h = harness(cfg);
        for line in ["command", "battery?", "time?", "takeoff"] {
            assert!(h.send_command(line).is_ok(), "{line}");
        }
    }

    #[test]
    fn replies_arrive_in_request_order() {
        let mut h = harness(LinkConfig {
            one_way_latency_us: 10_000,
            ..LinkConfig::default()
        });
        let replies: Vec<String> = ["command", "battery?", "time?"]
            .iter()
            .map(|l| h.send_command(l).unwrap())
            .collect();
        assert_eq!(replies, ["ok", "100", "0"]);
    }

    #[test]
    fn rc_applies_at_delivery_time() {
        let cfg = LinkConfig {
            one_way_latency_us: 60_000,
            ..LinkConfig::default()
        };
        let mut h = harness(cfg);
        h.send_command("command").unwrap();
        h.send_command("takeoff").unwrap();
        while h.sim().state().flight_state == FlightState::TakingOff {
            h.tick(50_000);
        }
        h.send_rc(0, 100, 0, 0);
        assert_eq!(h.sim().state().rc_setpoint, [0, 0, 0, 0], "still in flight");
        // delivery lands 60 ms out; the first tick boundary at or past it
        // is the start of the third tick
        h.tick(50_000);
        h.tick(50_000);
        assert_eq!(h.sim().state().rc_setpoint, [0, 0, 0, 0]);
        h.tick(50_000);
        assert_eq!(h.sim().state().rc_setpoint, [0, 100, 0, 0]);
    }

    #[test]
    fn physics_continue_during_blocking_sends() {
        let cfg = LinkConfig {
            one_way_latency_us: 500_000,
            ..LinkConfig::default()
        };
        let sim = Simulator::airborne(
            PayloadConfig::OpenMv,
            EnergyProfile::default_table(),
            SimParams::default(),
            PowerState::Hover,
        );
        let mut h = VirtualHarness::new(sim, cfg, 42, 50_000);
        let e0 = h.sim().state().energy_remaining_j;
        h.send_command("command").unwrap();
        let burned = e0 - h.sim().state().energy_remaining_j;
        // one second of hover drain happened during the round trip
        let expected = h
            .sim()
            .profile()
            .power_w(PayloadConfig::OpenMv, PowerState::Hover)
            * 1.0;
        assert!(
            (burned - expected).abs() < 1e-6,
            "burned {burned} expected {expected}"
        );
    }

    #[test]
    fn deterministic_drop_sequences() {
        let cfg = LinkConfig {
            drop_probability: 0.5,
            response_timeout_us: 100_000,
            ..LinkConfig::default()
        };
        let run = || {
            let mut h = harness(cfg);
            (0..20)
                .map(|_| h.send_command("battery?").is_ok())
                .collect::<Vec<bool>>()
        };
        assert_eq!(run(), run());
    }
}
