//! Drone-side protocol state machine, transport-free.
//!
//! Commands apply to the simulator one at a time in arrival order. Nothing
//! but "command" succeeds before SDK mode is entered; rc is fire-and-forget
//! and never generates a reply datagram.

use crate::sim::Simulator;

use super::{parse_command, Command};

/// Applies parsed commands to a simulator and produces replies.
#[derive(Debug, Default)]
pub struct CommandProcessor {
    sdk_entered: bool,
}

impl CommandProcessor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sdk_entered(&self) -> bool {
        self.sdk_entered
    }

    /// Handle one raw datagram; `None` means no reply is sent.
    pub fn handle_datagram(&mut self, datagram: &[u8], sim: &mut Simulator) -> Option<String> {
        match parse_command(datagram) {
            Ok(cmd) => self.handle(cmd, sim),
            Err(_) => Some("error".into()),
        }
    }

    /// Handle one parsed command.
    pub fn handle(&mut self, cmd: Command, sim: &mut Simulator) -> Option<String> {
        if !self.sdk_entered && cmd != Command::EnterSdk {
            // rc before SDK entry is still an error reply: the sender is
            // using the protocol wrong, not flying
            return Some("error".into());
        }
        match cmd {
            Command::EnterSdk => {
                self.sdk_entered = true;
                Some("ok".into())
            }
            Command::Takeoff => Some(match sim.takeoff() {
                Ok(()) => "ok".into(),
                Err(_) => "error".into(),
            }),
            Command::Land => Some(match sim.land() {
                Ok(()) => "ok".into(),
                Err(_) => "error".into(),
            }),
            Command::Rc(a, b, c, d) => {
                // parser already bounds the args; a failed apply is ignored
                let _ = sim.apply_rc(a, b, c, d);
                None
            }
            Command::BatteryQuery => Some(sim.telemetry().battery_pct.to_string()),
            Command::TimeQuery => Some((sim.telemetry().elapsed_s.floor() as i64).to_string()),
        }
    }
}
