//! Software-in-the-loop energy-aware smart drone.
//!
//! The crate composes four subsystems into an autonomous mask-detection
//! mission that can be driven entirely on a deterministic virtual clock:
//!
//! - [`tensor`] / [`nn`] / [`quant`] — a tiny-CNN inference runtime with
//!   per-tensor affine int8 quantization, MCU-style flash/RAM accounting,
//!   model serialization and head-only training
//! - [`pid`] — the discrete PID law used by the detection-control loop
//! - [`sim`] — kinematic drone simulation with table-driven battery drain
//!   per payload configuration and flight state
//! - [`link`] — a Tello-style ASCII-datagram command protocol, runnable
//!   in-process (deterministic) or over real UDP sockets
//! - [`scene`] / [`detect`] / [`mission`] — synthetic scene generation,
//!   color-component face detection, and the end-to-end mission loop with
//!   CSV reporting

pub mod clock;
pub mod config;
pub mod detect;
pub mod link;
pub mod mission;
pub mod nn;
pub mod pid;
pub mod quant;
pub mod rng;
pub mod scene;
pub mod sim;
pub mod tensor;

pub mod cli;
