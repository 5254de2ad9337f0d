//! Kinematic and energetic MAV simulation.
//!
//! The battery model is table-driven: each (payload, flight state) pair has
//! an energy budget in joules and an endurance in seconds, and drains at the
//! constant rate budget/endurance. Take-off and landing drain at the hover
//! rate; the tables define no rows for them and the state classifier keys
//! on horizontal speed only.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::clock::micros_to_secs;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("rc component {0} outside [-100, 100]")]
    RcOutOfRange(i32),
    #[error("takeoff only from idle on the ground")]
    TakeoffWhileAirborne,
    #[error("landing requires an airborne drone")]
    LandWhileGrounded,
}

/// Payload installed on the airframe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PayloadConfig {
    NoPayload,
    ArduinoNano,
    OpenMv,
    DistributedKit,
}

impl PayloadConfig {
    pub const ALL: [PayloadConfig; 4] = [
        PayloadConfig::NoPayload,
        PayloadConfig::ArduinoNano,
        PayloadConfig::OpenMv,
        PayloadConfig::DistributedKit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PayloadConfig::NoPayload => "nopayload",
            PayloadConfig::ArduinoNano => "arduino",
            PayloadConfig::OpenMv => "openmv",
            PayloadConfig::DistributedKit => "distributed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nopayload" | "none" => Some(PayloadConfig::NoPayload),
            "arduino" | "arduinonano" => Some(PayloadConfig::ArduinoNano),
            "openmv" => Some(PayloadConfig::OpenMv),
            "distributed" | "distributedkit" => Some(PayloadConfig::DistributedKit),
            _ => None,
        }
    }
}

/// Flight regime; `Depleted` is absorbing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlightState {
    Idle,
    TakingOff,
    Hover,
    Maneuver,
    Landing,
    Depleted,
}

impl FlightState {
    pub fn name(self) -> &'static str {
        match self {
            FlightState::Idle => "idle",
            FlightState::TakingOff => "takingoff",
            FlightState::Hover => "hover",
            FlightState::Maneuver => "maneuver",
            FlightState::Landing => "landing",
            FlightState::Depleted => "depleted",
        }
    }

    pub fn is_airborne(self) -> bool {
        matches!(
            self,
            FlightState::TakingOff
                | FlightState::Hover
                | FlightState::Maneuver
                | FlightState::Landing
        )
    }
}

/// Table row key: only these states have published budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PowerState {
    Idle,
    Hover,
    Maneuver,
}

impl PowerState {
    pub fn name(self) -> &'static str {
        match self {
            PowerState::Idle => "idle",
            PowerState::Hover => "hover",
            PowerState::Maneuver => "maneuver",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "idle" => Some(PowerState::Idle),
            "hover" | "hovering" => Some(PowerState::Hover),
            "maneuver" | "maneuvering" => Some(PowerState::Maneuver),
            _ => None,
        }
    }

    /// Which table row a flight state drains from. Take-off and landing are
    /// vertical transitions billed at the hover rate.
    pub fn for_flight_state(state: FlightState) -> PowerState {
        match state {
            FlightState::Idle | FlightState::Depleted => PowerState::Idle,
            FlightState::Maneuver => PowerState::Maneuver,
            FlightState::TakingOff | FlightState::Hover | FlightState::Landing => PowerState::Hover,
        }
    }
}

/// One published table row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyRow {
    pub budget_j: f64,
    pub endurance_s: f64,
}

impl EnergyRow {
    pub fn power_w(&self) -> f64 {
        self.budget_j / self.endurance_s
    }
}

/// Map (payload, state) -> (budget, endurance). Missing idle rows fall back
/// to the no-payload idle row.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyProfile {
    rows: BTreeMap<(PayloadConfig, PowerState), EnergyRow>,
}

impl EnergyProfile {
    /// The published consumption/endurance table.
    ///
    /// Budgets are kilojoule entries times 1000; endurances are the min:sec
    /// entries in seconds.
    pub fn default_table() -> Self {
        use PayloadConfig::*;
        use PowerState::*;
        let mut rows = BTreeMap::new();
        let mut put = |cfg, state, budget_j: f64, endurance_s: f64| {
            rows.insert(
                (cfg, state),
                EnergyRow {
                    budget_j,
                    endurance_s,
                },
            );
        };
        put(NoPayload, Idle, 60_192.0, 720.0); // 12:00
        put(NoPayload, Hover, 77_976.0, 563.0); // 09:23
        put(NoPayload, Maneuver, 89_727.0, 485.0); // 08:05
        put(ArduinoNano, Hover, 96_307.0, 470.0); // 7:50
        put(ArduinoNano, Maneuver, 112_449.0, 402.0); // 6:42
        put(OpenMv, Hover, 116_280.0, 380.0); // 6:20
        put(OpenMv, Maneuver, 141_588.0, 310.0); // 5:10
        put(DistributedKit, Hover, 86_320.0, 516.0); // 08:36
        put(DistributedKit, Maneuver, 101_232.0, 433.0); // 7:13
        Self { rows }
    }

    /// Override or add a row (config-file hook).
    pub fn set_row(&mut self, cfg: PayloadConfig, state: PowerState, row: EnergyRow) {
        self.rows.insert((cfg, state), row);
    }

    pub fn row(&self, cfg: PayloadConfig, state: PowerState) -> EnergyRow {
        if let Some(row) = self.rows.get(&(cfg, state)) {
            return *row;
        }
        // idle draw of payload electronics is not published; use the bare
        // airframe idle row
        if state == PowerState::Idle {
            if let Some(row) = self.rows.get(&(PayloadConfig::NoPayload, PowerState::Idle)) {
                return *row;
            }
        }
        panic!("energy profile has no row for ({cfg:?}, {state:?})");
    }

    pub fn has_row(&self, cfg: PayloadConfig, state: PowerState) -> bool {
        self.rows.contains_key(&(cfg, state))
    }

    pub fn power_w(&self, cfg: PayloadConfig, state: PowerState) -> f64 {
        self.row(cfg, state).power_w()
    }

    pub fn budget_j(&self, cfg: PayloadConfig, state: PowerState) -> f64 {
        self.row(cfg, state).budget_j
    }
}

/// Dynamics constants; config-overridable, pinned by golden tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimParams {
    /// Horizontal/vertical speed at |rc| = 100, m/s.
    pub v_max_mps: f64,
    /// First-order velocity response time constant, s.
    pub tau_s: f64,
    /// Take-off / landing vertical speed, m/s.
    pub vertical_speed_mps: f64,
    /// Horizontal speed above which the drone counts as maneuvering, m/s.
    pub maneuver_threshold_mps: f64,
    /// Take-off target altitude, m.
    pub hover_altitude_m: f64,
    /// Yaw rate at |rc| = 100, deg/s.
    pub yaw_rate_dps: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            v_max_mps: 1.0,
            tau_s: 0.5,
            vertical_speed_mps: 1.0,
            maneuver_threshold_mps: 0.1,
            hover_altitude_m: 5.0,
            yaw_rate_dps: 100.0,
        }
    }
}

/// Kinematic + energetic state of the vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct DroneState {
    pub position: [f64; 3],
    pub velocity: [f64; 3],
    /// Heading, radians, counter-clockwise from +x.
    pub yaw: f64,
    pub flight_state: FlightState,
    pub energy_remaining_j: f64,
    pub elapsed_us: u64,
    pub rc_setpoint: [i32; 4],
}

/// Read-only snapshot for telemetry consumers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Telemetry {
    pub position: [f64; 3],
    pub velocity: [f64; 3],
    pub yaw_deg: f64,
    pub flight_state: FlightState,
    pub energy_remaining_j: f64,
    pub battery_pct: i32,
    pub elapsed_s: f64,
}

/// Outcome of one tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TickStatus {
    Advanced,
    /// Battery hit zero during this tick; forced descent completed.
    DepletedNow,
    /// Tick on an already depleted drone: no-op.
    AlreadyDepleted,
}

/// Single-owner simulator advanced by explicit ticks.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub payload: PayloadConfig,
    profile: EnergyProfile,
    params: SimParams,
    state: DroneState,
    energy_used_j: f64,
}

impl Simulator {
    /// Grounded, idle drone with the idle budget for its payload.
    pub fn new(payload: PayloadConfig, profile: EnergyProfile, params: SimParams) -> Self {
        let budget = profile.row(payload, PowerState::Idle).budget_j;
        Self::with_initial_energy(payload, profile, params, budget)
    }

    pub fn with_initial_energy(
        payload: PayloadConfig,
        profile: EnergyProfile,
        params: SimParams,
        energy_j: f64,
    ) -> Self {
        Self {
            payload,
            profile,
            params,
            state: DroneState {
                position: [0.0; 3],
                velocity: [0.0; 3],
                yaw: 0.0,
                flight_state: FlightState::Idle,
                energy_remaining_j: energy_j,
                elapsed_us: 0,
                rc_setpoint: [0; 4],
            },
            energy_used_j: 0.0,
        }
    }

    /// Airborne at hover altitude with the given state's full budget;
    /// entry point for constant-state endurance runs.
    pub fn airborne(
        payload: PayloadConfig,
        profile: EnergyProfile,
        params: SimParams,
        state: PowerState,
    ) -> Self {
        let budget = profile.row(payload, state).budget_j;
        let mut sim = Self::with_initial_energy(payload, profile, params, budget);
        sim.state.position[2] = params.hover_altitude_m;
        sim.state.flight_state = FlightState::Hover;
        if state == PowerState::Maneuver {
            // steady-state forward flight from the first tick
            sim.state.rc_setpoint = [0, 100, 0, 0];
            sim.state.velocity = sim.velocity_target();
        }
        if state == PowerState::Idle {
            sim.state.position[2] = 0.0;
            sim.state.flight_state = FlightState::Idle;
        }
        sim
    }

    pub fn state(&self) -> &DroneState {
        &self.state
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn profile(&self) -> &EnergyProfile {
        &self.profile
    }

    pub fn energy_used_j(&self) -> f64 {
        self.energy_used_j
    }

    /// Store a velocity/yaw-rate setpoint. Components outside [-100, 100]
    /// leave the state untouched.
    pub fn apply_rc(&mut self, a: i32, b: i32, c: i32, d: i32) -> Result<(), SimError> {
        for v in [a, b, c, d] {
            if !(-100..=100).contains(&v) {
                return Err(SimError::RcOutOfRange(v));
            }
        }
        self.state.rc_setpoint = [a, b, c, d];
        Ok(())
    }

    /// Begin the climb to hover altitude.
    pub fn takeoff(&mut self) -> Result<(), SimError> {
        if self.state.flight_state != FlightState::Idle {
            return Err(SimError::TakeoffWhileAirborne);
        }
        self.state.flight_state = FlightState::TakingOff;
        Ok(())
    }

    /// Begin the descent to the ground.
    pub fn land(&mut self) -> Result<(), SimError> {
        if !self.state.flight_state.is_airborne() {
            return Err(SimError::LandWhileGrounded);
        }
        self.state.flight_state = FlightState::Landing;
        Ok(())
    }

    /// World-frame velocity target from the rc setpoint and heading.
    /// rc = (right, forward, up, clockwise-yaw), each +/-100 -> +/-v_max.
    fn velocity_target(&self) -> [f64; 3] {
        let [a, b, c, _] = self.state.rc_setpoint;
        let scale = self.params.v_max_mps / 100.0;
        let fwd = f64::from(b) * scale;
        let right = f64::from(a) * scale;
        let up = f64::from(c) * scale;
        let (sin_yaw, cos_yaw) = self.state.yaw.sin_cos();
        [
            fwd * cos_yaw + right * sin_yaw,
            fwd * sin_yaw - right * cos_yaw,
            up,
        ]
    }

    /// Advance the simulation by `dt_us` microseconds.
    pub fn tick(&mut self, dt_us: u64) -> TickStatus {
        assert!(dt_us > 0, "tick requires a positive dt");
        if self.state.flight_state == FlightState::Depleted {
            return TickStatus::AlreadyDepleted;
        }
        let dt = micros_to_secs(dt_us);
        let s = &mut self.state;

        match s.flight_state {
            FlightState::Idle => {
                s.velocity = [0.0; 3];
            }
            FlightState::TakingOff => {
                s.velocity = [0.0, 0.0, self.params.vertical_speed_mps];
                s.position[2] += s.velocity[2] * dt;
                if s.position[2] >= self.params.hover_altitude_m {
                    s.position[2] = self.params.hover_altitude_m;
                    s.velocity = [0.0; 3];
                    s.flight_state = FlightState::Hover;
                }
            }
            FlightState::Landing => {
                s.velocity = [0.0, 0.0, -self.params.vertical_speed_mps];
                s.position[2] += s.velocity[2] * dt;
                if s.position[2] <= 0.0 {
                    s.position[2] = 0.0;
                    s.velocity = [0.0; 3];
                    s.flight_state = FlightState::Idle;
                    s.rc_setpoint = [0; 4];
                }
            }
            FlightState::Hover | FlightState::Maneuver => {
                let target = {
                    let [a, b, c, _] = s.rc_setpoint;
                    let scale = self.params.v_max_mps / 100.0;
                    let fwd = f64::from(b) * scale;
                    let right = f64::from(a) * scale;
                    let up = f64::from(c) * scale;
                    let (sin_yaw, cos_yaw) = s.yaw.sin_cos();
                    [
                        fwd * cos_yaw + right * sin_yaw,
                        fwd * sin_yaw - right * cos_yaw,
                        up,
                    ]
                };
                let alpha = (dt / self.params.tau_s).min(1.0);
                for i in 0..3 {
                    s.velocity[i] += (target[i] - s.velocity[i]) * alpha;
                }
                for i in 0..3 {
                    s.position[i] += s.velocity[i] * dt;
                }
                if s.position[2] < 0.0 {
                    s.position[2] = 0.0;
                    s.velocity[2] = 0.0;
                }
                let yaw_rate =
                    -f64::from(s.rc_setpoint[3]) / 100.0 * self.params.yaw_rate_dps.to_radians();
                s.yaw += yaw_rate * dt;

                let horizontal = (s.velocity[0].powi(2) + s.velocity[1].powi(2)).sqrt();
                s.flight_state = if horizontal > self.params.maneuver_threshold_mps {
                    FlightState::Maneuver
                } else {
                    FlightState::Hover
                };
            }
            FlightState::Depleted => unreachable!(),
        }

        s.elapsed_us += dt_us;

        let power = self
            .profile
            .power_w(self.payload, PowerState::for_flight_state(s.flight_state));
        let drain = power * dt;
        if drain >= s.energy_remaining_j {
            self.energy_used_j += s.energy_remaining_j;
            s.energy_remaining_j = 0.0;
            // forced descent: the battery is gone, the airframe is down
            s.flight_state = FlightState::Depleted;
            s.velocity = [0.0; 3];
            s.position[2] = 0.0;
            return TickStatus::DepletedNow;
        }
        s.energy_remaining_j -= drain;
        self.energy_used_j += drain;
        TickStatus::Advanced
    }

    /// Read-only snapshot; does not mutate the simulation.
    pub fn telemetry(&self) -> Telemetry {
        let s = &self.state;
        let budget = self
            .profile
            .row(self.payload, PowerState::for_flight_state(s.flight_state))
            .budget_j;
        Telemetry {
            position: s.position,
            velocity: s.velocity,
            yaw_deg: s.yaw.to_degrees(),
            flight_state: s.flight_state,
            energy_remaining_j: s.energy_remaining_j,
            battery_pct: (100.0 * s.energy_remaining_j / budget).round() as i32,
            elapsed_s: micros_to_secs(s.elapsed_us),
        }
    }
}

/// Run a constant-state endurance simulation until depletion.
/// Returns (endurance seconds, energy used in joules).
pub fn endurance_run(
    payload: PayloadConfig,
    state: PowerState,
    profile: &EnergyProfile,
    dt_us: u64,
) -> (f64, f64) {
    let mut sim = Simulator::airborne(payload, profile.clone(), SimParams::default(), state);
    loop {
        match sim.tick(dt_us) {
            TickStatus::DepletedNow | TickStatus::AlreadyDepleted => break,
            TickStatus::Advanced => {}
        }
    }
    (micros_to_secs(sim.state().elapsed_us), sim.energy_used_j())
}
