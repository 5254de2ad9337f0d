//! Real-socket transport: a UDP drone server pacing its simulator on the
//! wall clock, and a retrying request/reply client.

use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::clock::secs_to_micros;
use crate::sim::Simulator;

use super::server::CommandProcessor;
use super::{encode_state, LinkConfig, LinkError};

const STATE_PERIOD: Duration = Duration::from_millis(100);

/// UDP drone server: control request/reply plus the 10 Hz state push.
pub struct UdpDroneServer {
    shutdown: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
    control_addr: SocketAddr,
    state_addr: SocketAddr,
    sim: Arc<Mutex<Simulator>>,
}

impl UdpDroneServer {
    /// Bind `bind_ip:(control_port, state_port)` and start serving. Port 0
    /// picks ephemeral ports (tests).
    pub fn spawn(bind_ip: &str, cfg: LinkConfig, sim: Simulator) -> std::io::Result<Self> {
        let control = UdpSocket::bind((bind_ip, cfg.control_port))?;
        let state = UdpSocket::bind((bind_ip, cfg.state_port))?;
        control.set_read_timeout(Some(Duration::from_millis(10)))?;
        let control_addr = control.local_addr()?;
        let state_addr = state.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let sim = Arc::new(Mutex::new(sim));

        let thread_stop = Arc::clone(&shutdown);
        let thread_sim = Arc::clone(&sim);
        let state_dest_port = cfg.state_port;
        let handle = std::thread::spawn(move || {
            let mut server = CommandProcessor::new();
            let mut peer: Option<SocketAddr> = None;
            let mut last_tick = Instant::now();
            let mut last_state = Instant::now();
            let mut buf = [0u8; 2048];
            while !thread_stop.load(Ordering::Relaxed) {
                match control.recv_from(&mut buf) {
                    Ok((n, from)) => {
                        peer = Some(from);
                        let reply = {
                            let mut sim = thread_sim.lock().expect("sim lock");
                            server.handle_datagram(&buf[..n], &mut sim)
                        };
                        if let Some(text) = reply {
                            let _ = control.send_to(text.as_bytes(), from);
                        }
                    }
                    Err(e)
                        if e.kind() == std::io::ErrorKind::WouldBlock
                            || e.kind() == std::io::ErrorKind::TimedOut => {}
                    Err(_) => break,
                }
                // wall-clock pacing of the physics
                let elapsed = last_tick.elapsed();
                if elapsed >= Duration::from_millis(10) {
                    let dt_us = secs_to_micros(elapsed.as_secs_f64());
                    if dt_us > 0 {
                        thread_sim.lock().expect("sim lock").tick(dt_us);
                    }
                    last_tick = Instant::now();
                }
                if last_state.elapsed() >= STATE_PERIOD {
                    if let Some(to) = peer {
                        let line = {
                            let sim = thread_sim.lock().expect("sim lock");
                            encode_state(&sim.telemetry())
                        };
                        // convention: the controller listens on the state
                        // port; with an ephemeral (0) state port the push
                        // goes back to the peer's source port instead
                        let port = if state_dest_port == 0 {
                            to.port()
                        } else {
                            state_dest_port
                        };
                        let _ = state.send_to(line.as_bytes(), (to.ip(), port));
                    }
                    last_state = Instant::now();
                }
            }
        });

        Ok(Self {
            shutdown,
            handle: Some(handle),
            control_addr,
            state_addr,
            sim,
        })
    }

    pub fn control_addr(&self) -> SocketAddr {
        self.control_addr
    }

    pub fn state_addr(&self) -> SocketAddr {
        self.state_addr
    }

    /// Shared handle to the simulator (telemetry inspection).
    pub fn sim(&self) -> Arc<Mutex<Simulator>> {
        Arc::clone(&self.sim)
    }

    pub fn shutdown(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for UdpDroneServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Controller-side UDP client with timeout/retry on reply-bearing commands.
pub struct UdpClient {
    socket: UdpSocket,
    server: SocketAddr,
    cfg: LinkConfig,
}

impl UdpClient {
    pub fn connect(server: SocketAddr, cfg: LinkConfig) -> std::io::Result<Self> {
        let socket = UdpSocket::bind(("0.0.0.0", 0))?;
        socket.set_read_timeout(Some(Duration::from_micros(cfg.response_timeout_us.max(1))))?;
        Ok(Self {
            socket,
            server,
            cfg,
        })
    }

    /// Fire-and-forget rc update.
    pub fn send_rc(&self, a: i32, b: i32, c: i32, d: i32) -> Result<(), LinkError> {
        self.socket
            .send_to(format!("rc {a} {b} {c} {d}").as_bytes(), self.server)?;
        Ok(())
    }

    /// Reply-bearing request; retries up to `cfg.retries` times.
    pub fn send_command(&self, line: &str) -> Result<String, LinkError> {
        let mut buf = [0u8; 2048];
        let mut attempts = 0u32;
        for _ in 0..=self.cfg.retries {
            attempts += 1;
            self.socket.send_to(line.as_bytes(), self.server)?;
            match self.socket.recv_from(&mut buf) {
                Ok((n, _)) => {
                    return Ok(String::from_utf8_lossy(&buf[..n]).into_owned());
                }
                Err(e)
                    if e.kind() == std::io::ErrorKind::WouldBlock
                        || e.kind() == std::io::ErrorKind::TimedOut => {}
                Err(e) => return Err(e.into()),
            }
        }
        Err(LinkError::Timeout { attempts })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{EnergyProfile, PayloadConfig, SimParams};

    fn ephemeral_server() -> UdpDroneServer {
        let cfg = LinkConfig {
            control_port: 0,
            state_port: 0,
            ..LinkConfig::default()
        };
        let sim = Simulator::new(
            PayloadConfig::OpenMv,
            EnergyProfile::default_table(),
            SimParams::default(),
        );
        UdpDroneServer::spawn("127.0.0.1", cfg, sim).expect("bind ephemeral")
    }

    #[test]
    fn request_reply_over_real_sockets() {
        let mut server = ephemeral_server();
        let cfg = LinkConfig {
            response_timeout_us: 2_000_000,
            ..LinkConfig::default()
        };
        let client = UdpClient::connect(server.control_addr(), cfg).unwrap();
        assert_eq!(client.send_command("battery?").unwrap(), "error"); // pre-SDK
        assert_eq!(client.send_command("command").unwrap(), "ok");
        assert_eq!(client.send_command("battery?").unwrap(), "100");
        assert_eq!(client.send_command("rc 200 0 0 0").unwrap(), "error");
        client.send_rc(0, 0, 0, 10).unwrap();
        assert_eq!(client.send_command("nonsense").unwrap(), "error");
        server.shutdown();
    }

    #[test]
    fn state_push_reaches_the_peer() {
        let mut server = ephemeral_server();
        let cfg = LinkConfig {
            response_timeout_us: 2_000_000,
            ..LinkConfig::default()
        };
        let client = UdpClient::connect(server.control_addr(), cfg).unwrap();
        // with an ephemeral state port the push goes to the control peer's
        // source port; subscribe by sending one command first
        assert_eq!(client.send_command("command").unwrap(), "ok");
        let mut buf = [0u8; 2048];
        let deadline = Instant::now() + Duration::from_secs(3);
        let line = loop {
            assert!(Instant::now() < deadline, "no state line within 3 s");
            match client.socket.recv_from(&mut buf) {
                Ok((n, _)) => break String::from_utf8_lossy(&buf[..n]).into_owned(),
                Err(e)
                    if e.kind() == std::io::ErrorKind::WouldBlock
                        || e.kind() == std::io::ErrorKind::TimedOut => {}
                Err(e) => panic!("recv failed: {e}"),
            }
        };
        assert!(line.starts_with("pitch:0;roll:0;yaw:"), "{line}");
        assert!(line.ends_with("\r\n"));
        assert!(line.contains("bat:100;"));
        server.shutdown();
    }
}
