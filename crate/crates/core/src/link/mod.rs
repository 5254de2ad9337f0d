//! Tello-style ASCII-datagram command protocol.
//!
//! Control is request/reply text over UDP port 8889 ("command", "takeoff",
//! "land", "battery?", "time?"); "rc a b c d" is fire-and-forget. A state
//! line streams on port 8890 at 10 Hz. The same protocol runs over real
//! sockets ([`udp`]) or an in-process deterministic pipe ([`virt`]).

pub mod server;
pub mod udp;
pub mod virt;

use thiserror::Error;

use crate::sim::Telemetry;

#[derive(Debug, Error, PartialEq)]
pub enum LinkError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("no reply after {attempts} sends")]
    Timeout { attempts: u32 },
    #[error("link closed")]
    Closed,
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for LinkError {
    fn from(e: std::io::Error) -> Self {
        LinkError::Io(e.to_string())
    }
}

/// Parsed control datagram.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// "command": enter SDK mode; must precede everything else.
    EnterSdk,
    Takeoff,
    Land,
    /// Four-axis velocity setpoint, each in [-100, 100].
    Rc(i32, i32, i32, i32),
    /// "battery?": state of charge percentage.
    BatteryQuery,
    /// "time?": elapsed flight seconds.
    TimeQuery,
}

impl Command {
    /// Whether the server answers this command with a datagram.
    pub fn expects_reply(self) -> bool {
        !matches!(self, Command::Rc(..))
    }

    /// Wire form of the command.
    pub fn encode(self) -> String {
        match self {
            Command::EnterSdk => "command".into(),
            Command::Takeoff => "takeoff".into(),
            Command::Land => "land".into(),
            Command::Rc(a, b, c, d) => format!("rc {a} {b} {c} {d}"),
            Command::BatteryQuery => "battery?".into(),
            Command::TimeQuery => "time?".into(),
        }
    }
}

/// Parse one datagram. Trailing whitespace is tolerated, keywords match
/// exactly, and rc takes four signed integers separated by single spaces.
pub fn parse_command(datagram: &[u8]) -> Result<Command, LinkError> {
    let text = std::str::from_utf8(datagram)
        .map_err(|_| LinkError::Parse("datagram is not valid ascii text".into()))?;
    let line = text.trim_end();
    match line {
        "command" => return Ok(Command::EnterSdk),
        "takeoff" => return Ok(Command::Takeoff),
        "land" => return Ok(Command::Land),
        "battery?" => return Ok(Command::BatteryQuery),
        "time?" => return Ok(Command::TimeQuery),
        _ => {}
    }
    if let Some(rest) = line.strip_prefix("rc ") {
        let parts: Vec<&str> = rest.split(' ').collect();
        if parts.len() != 4 {
            return Err(LinkError::Parse(format!(
                "rc takes 4 arguments, got {}",
                parts.len()
            )));
        }
        let mut vals = [0i32; 4];
        for (slot, raw) in vals.iter_mut().zip(&parts) {
            let v: i32 = raw
                .parse()
                .map_err(|_| LinkError::Parse(format!("rc argument {raw:?} is not an integer")))?;
            if !(-100..=100).contains(&v) {
                return Err(LinkError::Parse(format!(
                    "rc argument {v} outside [-100, 100]"
                )));
            }
            *slot = v;
        }
        return Ok(Command::Rc(vals[0], vals[1], vals[2], vals[3]));
    }
    Err(LinkError::Parse(format!("unknown command {line:?}")))
}

/// Fixed-order state line pushed at 10 Hz:
/// angles in degrees, velocities in dm/s, height in dm, battery in percent,
/// time in whole seconds, "\r\n"-terminated.
pub fn encode_state(t: &Telemetry) -> String {
    format!(
        "pitch:{};roll:{};yaw:{};vgx:{};vgy:{};vgz:{};h:{};bat:{};time:{};\r\n",
        0,
        0,
        t.yaw_deg.round() as i64,
        (t.velocity[0] * 10.0).round() as i64,
        (t.velocity[1] * 10.0).round() as i64,
        (t.velocity[2] * 10.0).round() as i64,
        (t.position[2] * 10.0).round() as i64,
        t.battery_pct,
        t.elapsed_s.floor() as i64,
    )
}

/// Link tuning; latencies in microseconds on the virtual clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkConfig {
    pub control_port: u16,
    pub state_port: u16,
    pub one_way_latency_us: u64,
    /// Per-datagram drop probability in [0, 1).
    pub drop_probability: f64,
    pub response_timeout_us: u64,
    /// Retries after the first send.
    pub retries: u32,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            control_port: 8889,
            state_port: 8890,
            one_way_latency_us: 0,
            drop_probability: 0.0,
            response_timeout_us: 1_000_000,
            retries: 2,
        }
    }
}
