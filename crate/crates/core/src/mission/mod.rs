//! End-to-end autonomous mission on the virtual clock.
//!
//! The loop renders the camera view from the drone pose, detects the
//! largest face, and steers with one PID per axis through the datagram
//! link. Classification is charged as loop dead time: while an inference
//! is in flight the detector/control path is blocked and the last rc
//! holds, so consecutive decision timestamps differ by exactly the decision
//! period whenever a target stays in view. Missions end when every target
//! is classified, the battery depletes, or the time limit elapses.

pub mod report;

use thiserror::Error;

use crate::clock::{micros_to_secs, secs_to_micros};
use crate::detect::{detect_face, Detection};
use crate::link::virt::VirtualHarness;
use crate::link::{LinkConfig, LinkError};
use crate::nn::train::TrainError;
use crate::nn::{run_inference, ModelGraph, NnError};
use crate::pid::PidController;
use crate::quant::predicted_label;
use crate::scene::{render_scene, CameraPose, Frame, MaskLabel, SceneError, SceneSpec, FRAME_DIM};
use crate::sim::{
    EnergyProfile, FlightState, PayloadConfig, PowerState, SimParams, Simulator, TickStatus,
};

const FRAME_CENTER: f64 = (FRAME_DIM / 2) as f64;
/// Pixel errors normalize by 100 / half-frame so the stock gains span the
/// full rc range.
const ERROR_SCALE: f64 = 100.0 / FRAME_CENTER;
/// Detections narrower or shorter than this are skipped, not classified.
const MIN_CLASSIFY_EXTENT: f64 = 4.0;
/// Crop margin around the detection box, fraction of its extent per side.
const CROP_MARGIN: f64 = 0.2;
/// Consecutive reply-bearing link failures that abort the mission.
const MAX_LINK_FAILURES: u32 = 3;

#[derive(Debug, Error)]
pub enum MissionError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("mission config: {0}")]
    Config(String),
}

/// Where classification happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    Onboard,
    Distributed,
}

impl InferenceMode {
    pub fn name(self) -> &'static str {
        match self {
            InferenceMode::Onboard => "onboard",
            InferenceMode::Distributed => "distributed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "onboard" => Some(InferenceMode::Onboard),
            "distributed" => Some(InferenceMode::Distributed),
            _ => None,
        }
    }
}

/// Default onboard classification latency per payload, seconds.
pub fn default_inference_latency_s(payload: PayloadConfig) -> f64 {
    match payload {
        PayloadConfig::OpenMv => 0.859,
        PayloadConfig::ArduinoNano => 7.235,
        // the bare airframe flies under an external observer; a short
        // nominal decision period keeps the loop structure identical
        PayloadConfig::NoPayload => 0.1,
        PayloadConfig::DistributedKit => 0.1,
    }
}

/// Full mission parameterization.
#[derive(Debug, Clone)]
pub struct MissionConfig {
    pub payload: PayloadConfig,
    pub mode: InferenceMode,
    /// Onboard decision period, microseconds.
    pub inference_latency_us: u64,
    /// Remote compute time in Distributed mode, microseconds.
    pub remote_compute_us: u64,
    pub link: LinkConfig,
    pub pid_gains: (f64, f64, f64),
    pub scene: SceneSpec,
    pub sim_params: SimParams,
    pub energy_profile: EnergyProfile,
    /// Which table row funds the battery for this mission.
    pub budget_state: PowerState,
    pub dt_us: u64,
    pub seed: u64,
    pub time_limit_us: u64,
    pub target_width_px: f64,
    pub search_yaw: i32,
}

impl MissionConfig {
    pub fn new(payload: PayloadConfig, seed: u64) -> Self {
        let mode = if payload == PayloadConfig::DistributedKit {
            InferenceMode::Distributed
        } else {
            InferenceMode::Onboard
        };
        Self {
            payload,
            mode,
            inference_latency_us: secs_to_micros(default_inference_latency_s(payload)),
            remote_compute_us: 100_000,
            link: LinkConfig::default(),
            pid_gains: (
                crate::pid::DEFAULT_KP,
                crate::pid::DEFAULT_KI,
                crate::pid::DEFAULT_KD,
            ),
            scene: SceneSpec {
                world_extent_m: 20.0,
                targets: Vec::new(),
                face_radius_px: 40.0,
                noise_level: 0.1,
                seed,
            },
            sim_params: SimParams::default(),
            energy_profile: EnergyProfile::default_table(),
            budget_state: PowerState::Hover,
            dt_us: 50_000,
            seed,
            time_limit_us: secs_to_micros(600.0),
            target_width_px: 32.0,
            search_yaw: 15,
        }
    }

    /// Time between classification decisions on the virtual clock.
    pub fn decision_period_us(&self) -> u64 {
        match self.mode {
            InferenceMode::Onboard => self.inference_latency_us,
            InferenceMode::Distributed => self.remote_compute_us + 2 * self.link.one_way_latency_us,
        }
    }

    pub fn validate(&self) -> Result<(), MissionError> {
        if self.dt_us == 0 {
            return Err(MissionError::Config("dt must be positive".into()));
        }
        if self.decision_period_us() == 0 {
            return Err(MissionError::Config(
                "decision period must be positive".into(),
            ));
        }
        if !self.scene.targets.is_empty() {
            self.scene.validate()?;
        }
        Ok(())
    }
}

/// One PID per controlled axis plus the tracking setpoints.
pub struct TrackingPids {
    pub yaw: PidController,
    pub vertical: PidController,
    pub forward: PidController,
    pub target_width_px: f64,
    pub search_yaw: i32,
}

impl TrackingPids {
    pub fn new(gains: (f64, f64, f64), target_width_px: f64, search_yaw: i32) -> Self {
        let (kp, ki, kd) = gains;
        Self {
            yaw: PidController::new(kp, ki, kd),
            vertical: PidController::new(kp, ki, kd),
            forward: PidController::new(kp, ki, kd),
            target_width_px,
            search_yaw,
        }
    }

    /// rc 4-tuple from the current detection; a lost target yields a slow
    /// constant search yaw.
    pub fn control_step(&mut self, detection: Option<&Detection>) -> [i32; 4] {
        match detection {
            Some(det) => {
                let ex = (det.cx - FRAME_CENTER) * ERROR_SCALE;
                let ey = (det.cy - FRAME_CENTER) * ERROR_SCALE;
                let ew = (det.w - self.target_width_px) * ERROR_SCALE;
                let yaw = self.yaw.step(ex).expect("pixel errors are finite");
                let vertical = self.vertical.step(ey).expect("pixel errors are finite");
                let forward = self.forward.step(ew).expect("pixel errors are finite");
                [0, clamp_cmd(-forward), clamp_cmd(-vertical), clamp_cmd(yaw)]
            }
            None => [0, 0, 0, self.search_yaw],
        }
    }

    pub fn reset(&mut self) {
        self.yaw.reset();
        self.vertical.reset();
        self.forward.reset();
    }
}

fn clamp_cmd(v: f64) -> i32 {
    v.round().clamp(-100.0, 100.0) as i32
}

/// Crop the detection box with a 20% margin, nearest-resize to 96x96 and
/// classify. Degenerate boxes (extent under 4 px) are skipped.
pub fn classify_target(
    model: &ModelGraph,
    frame: &Frame,
    det: &Detection,
) -> Result<Option<(MaskLabel, f64)>, NnError> {
    if det.w < MIN_CLASSIFY_EXTENT || det.h < MIN_CLASSIFY_EXTENT {
        return Ok(None);
    }
    let half_w = det.w / 2.0 + CROP_MARGIN * det.w;
    let half_h = det.h / 2.0 + CROP_MARGIN * det.h;
    let max = (FRAME_DIM - 1) as f64;
    let x0 = (det.cx - half_w).floor().clamp(0.0, max) as usize;
    let x1 = (det.cx + half_w).ceil().clamp(0.0, max) as usize;
    let y0 = (det.cy - half_h).floor().clamp(0.0, max) as usize;
    let y1 = (det.cy + half_h).ceil().clamp(0.0, max) as usize;
    let (sw, sh) = (x1 - x0 + 1, y1 - y0 + 1);

    let mut crop = vec![0u8; FRAME_DIM * FRAME_DIM * 3];
    for y in 0..FRAME_DIM {
        let sy = y0 + (y * sh + sh / 2) / FRAME_DIM;
        for x in 0..FRAME_DIM {
            let sx = x0 + (x * sw + sw / 2) / FRAME_DIM;
            let src = frame.pixel(sx.min(x1), sy.min(y1));
            let base = (y * FRAME_DIM + x) * 3;
            crop[base..base + 3].copy_from_slice(&src);
        }
    }
    let crop_frame = Frame {
        pixels: crop,
        truth: None,
    };
    let probs = run_inference(model, &crop_frame.to_input_tensor())?;
    Ok(Some(predicted_label(&probs)))
}

/// How a mission ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissionOutcome {
    AllTargetsClassified,
    BatteryDepleted,
    TimeLimit,
    Aborted,
}

impl MissionOutcome {
    pub fn name(self) -> &'static str {
        match self {
            MissionOutcome::AllTargetsClassified => "complete",
            MissionOutcome::BatteryDepleted => "depleted",
            MissionOutcome::TimeLimit => "timelimit",
            MissionOutcome::Aborted => "aborted",
        }
    }
}

/// Final state of one scene target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetOutcome {
    pub index: usize,
    pub truth: MaskLabel,
    /// (prediction, confidence, decision time) of the binding first
    /// classification.
    pub classification: Option<(MaskLabel, f64, u64)>,
}

/// One timeline row; `event` is empty for periodic samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TimelineRecord {
    pub t_us: u64,
    pub position: [f64; 3],
    pub state: FlightState,
    pub energy_j: f64,
    pub event: String,
}

/// Mission result: decisions, per-target classifications, energy and time.
#[derive(Debug, Clone)]
pub struct MissionReport {
    pub payload: PayloadConfig,
    pub mode: InferenceMode,
    pub seed: u64,
    pub outcome: MissionOutcome,
    pub flight_time_s: f64,
    pub energy_used_j: f64,
    pub decision_period_us: u64,
    pub decision_times_us: Vec<u64>,
    pub decisions: usize,
    pub targets: Vec<TargetOutcome>,
    /// Rows = truth (mask, no-mask), cols = prediction; classified targets
    /// only.
    pub confusion: [[usize; 2]; 2],
    pub timeline: Vec<TimelineRecord>,
}

impl MissionReport {
    pub fn targets_correct(&self) -> usize {
        self.targets
            .iter()
            .filter(|t| matches!(t.classification, Some((pred, _, _)) if pred == t.truth))
            .count()
    }

    pub fn accuracy(&self) -> f64 {
        if self.targets.is_empty() {
            return 0.0;
        }
        self.targets_correct() as f64 / self.targets.len() as f64
    }
}

struct PendingClassification {
    done_at_us: u64,
    frame: Frame,
    detection: Detection,
}

/// Run one mission to completion; an aborted link produces a partial
/// report, not an error.
pub fn run_mission(cfg: &MissionConfig, model: &ModelGraph) -> Result<MissionReport, MissionError> {
    cfg.validate()?;
    let sim = Simulator::with_initial_energy(
        cfg.payload,
        cfg.energy_profile.clone(),
        cfg.sim_params,
        cfg.energy_profile.budget_j(cfg.payload, cfg.budget_state),
    );
    let mut harness = VirtualHarness::new(sim, cfg.link, cfg.seed, cfg.dt_us);
    let period = cfg.decision_period_us();

    let mut timeline: Vec<TimelineRecord> = Vec::new();
    let mut targets: Vec<TargetOutcome> = cfg
        .scene
        .targets
        .iter()
        .enumerate()
        .map(|(index, t)| TargetOutcome {
            index,
            truth: t.label,
            classification: None,
        })
        .collect();
    let mut decisions = 0usize;
    let mut decision_times = Vec::new();
    let mut link_failures = 0u32;

    let sample = |harness: &VirtualHarness, event: String| -> TimelineRecord {
        let s = harness.sim().state();
        TimelineRecord {
            t_us: harness.clock().now_micros(),
            position: s.position,
            state: s.flight_state,
            energy_j: s.energy_remaining_j,
            event,
        }
    };

    let finish = |harness: &VirtualHarness,
                  outcome: MissionOutcome,
                  timeline: Vec<TimelineRecord>,
                  targets: Vec<TargetOutcome>,
                  decisions: usize,
                  decision_times: Vec<u64>| {
        let mut confusion = [[0usize; 2]; 2];
        for t in &targets {
            if let Some((pred, _, _)) = t.classification {
                confusion[t.truth.class_index()][pred.class_index()] += 1;
            }
        }
        MissionReport {
            payload: cfg.payload,
            mode: cfg.mode,
            seed: cfg.seed,
            outcome,
            flight_time_s: micros_to_secs(harness.sim().state().elapsed_us),
            energy_used_j: harness.sim().energy_used_j(),
            decision_period_us: period,
            decision_times_us: decision_times,
            decisions,
            targets,
            confusion,
            timeline,
        }
    };

    // SDK entry and takeoff, with bounded retries
    for command in ["command", "takeoff"] {
        let mut ok = false;
        while !ok {
            match harness.send_command(command) {
                Ok(reply) if reply == "ok" => {
                    timeline.push(sample(&harness, command.to_string()));
                    ok = true;
                }
                Ok(other) => {
                    timeline.push(sample(&harness, format!("{command} rejected: {other}")));
                    return Ok(finish(
                        &harness,
                        MissionOutcome::Aborted,
                        timeline,
                        targets,
                        decisions,
                        decision_times,
                    ));
                }
                Err(LinkError::Timeout { attempts }) => {
                    link_failures += 1;
                    timeline.push(sample(
                        &harness,
                        format!("link timeout on {command} after {attempts} sends"),
                    ));
                    if link_failures >= MAX_LINK_FAILURES {
                        return Ok(finish(
                            &harness,
                            MissionOutcome::Aborted,
                            timeline,
                            targets,
                            decisions,
                            decision_times,
                        ));
                    }
                }
                Err(_) => {
                    return Ok(finish(
                        &harness,
                        MissionOutcome::Aborted,
                        timeline,
                        targets,
                        decisions,
                        decision_times,
                    ));
                }
            }
        }
        link_failures = 0;
    }
    while harness.sim().state().flight_state == FlightState::TakingOff {
        harness.tick(cfg.dt_us);
    }
    timeline.push(sample(&harness, "hover reached".into()));

    let mut pids = TrackingPids::new(cfg.pid_gains, cfg.target_width_px, cfg.search_yaw);
    let mut pending: Option<PendingClassification> = None;
    let mut current_target = nearest_unclassified(&cfg.scene, &targets, &harness);
    let mut next_sample_us = 1_000_000u64;
    let mut frame_counter = 0u64;

    let outcome = loop {
        let now = harness.clock().now_micros();
        if harness.sim().state().flight_state == FlightState::Depleted {
            break MissionOutcome::BatteryDepleted;
        }
        if !targets.is_empty() && targets.iter().all(|t| t.classification.is_some()) {
            break MissionOutcome::AllTargetsClassified;
        }
        if now >= cfg.time_limit_us {
            break MissionOutcome::TimeLimit;
        }
        if now >= next_sample_us {
            timeline.push(sample(&harness, String::new()));
            next_sample_us += 1_000_000;
        }

        // dead time: an inference is in flight, rc holds, physics tick on
        if let Some(p) = &pending {
            if now < p.done_at_us {
                let step = (p.done_at_us - now).min(cfg.dt_us);
                harness.tick(step);
                continue;
            }
            let p = pending.take().expect("checked above");
            decisions += 1;
            decision_times.push(now);
            match classify_target(model, &p.frame, &p.detection)? {
                Some((pred, confidence)) => {
                    if let Some(truth) = p.frame.truth {
                        let event = format!(
                            "decision target={} truth={} pred={} conf={:.3}",
                            truth.target_index,
                            truth.label.name(),
                            pred.name(),
                            confidence,
                        );
                        timeline.push(sample(&harness, event));
                        let record = &mut targets[truth.target_index];
                        if record.classification.is_none() {
                            record.classification = Some((pred, confidence, now));
                            current_target = nearest_unclassified(&cfg.scene, &targets, &harness);
                            pids.reset();
                        }
                    } else {
                        timeline.push(sample(&harness, "decision on unattributed face".into()));
                    }
                }
                None => timeline.push(sample(&harness, "decision skipped: degenerate box".into())),
            }
        }

        // camera + detector + one control iteration; an empty world has
        // nothing to render or detect
        let (frame, detection) = if cfg.scene.targets.is_empty() {
            (None, None)
        } else {
            let pose = {
                let s = harness.sim().state();
                CameraPose {
                    position: s.position,
                    yaw: s.yaw,
                }
            };
            let frame = render_scene(&cfg.scene, &pose, frame_counter);
            frame_counter += 1;
            let detection = detect_face(&frame);
            (Some(frame), detection)
        };

        // track the detection only while the planner's current target should
        // be on camera; otherwise the detector is looking at somebody
        // already classified and the drone must slew on
        let track_ok = match current_target {
            Some(idx) => target_in_view(&cfg.scene, &harness, idx),
            None => true,
        };
        let rc = match (&detection, current_target) {
            (Some(det), _) if track_ok => pids.control_step(Some(det)),
            (_, Some(idx)) => search_command(&cfg.scene, &harness, idx, cfg.search_yaw),
            _ => [0, 0, 0, 0],
        };
        harness.send_rc(rc[0], rc[1], rc[2], rc[3]);

        if pending.is_none() {
            if let (Some(frame), Some(det)) = (frame, detection) {
                pending = Some(PendingClassification {
                    done_at_us: now + period,
                    frame,
                    detection: det,
                });
            }
        }

        if harness.tick(cfg.dt_us) == TickStatus::DepletedNow {
            timeline.push(sample(&harness, "battery depleted".into()));
        }
    };

    if outcome == MissionOutcome::AllTargetsClassified
        && harness.sim().state().flight_state.is_airborne()
    {
        for _ in 0..MAX_LINK_FAILURES {
            match harness.send_command("land") {
                Ok(_) => {
                    timeline.push(sample(&harness, "land".into()));
                    let give_up = harness.clock().now_micros() + secs_to_micros(30.0);
                    while harness.sim().state().flight_state == FlightState::Landing
                        && harness.clock().now_micros() < give_up
                    {
                        harness.tick(cfg.dt_us);
                    }
                    break;
                }
                Err(_) => timeline.push(sample(&harness, "link timeout on land".into())),
            }
        }
    }
    timeline.push(sample(&harness, format!("mission end: {}", outcome.name())));
    Ok(finish(
        &harness,
        outcome,
        timeline,
        targets,
        decisions,
        decision_times,
    ))
}

/// Nearest unclassified target by ground distance from the drone.
fn nearest_unclassified(
    scene: &SceneSpec,
    targets: &[TargetOutcome],
    harness: &VirtualHarness,
) -> Option<usize> {
    let pos = harness.sim().state().position;
    targets
        .iter()
        .filter(|t| t.classification.is_none())
        .min_by(|a, b| {
            let da = ground_dist_sq(pos, scene.targets[a.index].position);
            let db = ground_dist_sq(pos, scene.targets[b.index].position);
            da.total_cmp(&db)
        })
        .map(|t| t.index)
}

fn ground_dist_sq(pos: [f64; 3], target: [f64; 3]) -> f64 {
    let dx = target[0] - pos[0];
    let dy = target[1] - pos[1];
    dx * dx + dy * dy
}

/// Whether a target sits comfortably inside the camera frustum.
fn target_in_view(scene: &SceneSpec, harness: &VirtualHarness, target_index: usize) -> bool {
    let target = &scene.targets[target_index];
    let s = harness.sim().state();
    let dx = target.position[0] - s.position[0];
    let dy = target.position[1] - s.position[1];
    let dz = target.position[2] - s.position[2];
    let horizontal = (dx * dx + dy * dy).sqrt();
    let mut azimuth = dy.atan2(dx) - s.yaw;
    while azimuth > std::f64::consts::PI {
        azimuth -= 2.0 * std::f64::consts::PI;
    }
    while azimuth < -std::f64::consts::PI {
        azimuth += 2.0 * std::f64::consts::PI;
    }
    let elevation = dz.atan2(horizontal);
    let half_fov = (crate::scene::FOV_DEG / 2.0).to_radians();
    azimuth.abs() <= 0.9 * half_fov && elevation.abs() <= 0.9 * half_fov
}

/// Slew toward a known target bearing until the detector picks it up; when
/// roughly aligned, close the distance.
fn search_command(
    scene: &SceneSpec,
    harness: &VirtualHarness,
    target_index: usize,
    search_yaw: i32,
) -> [i32; 4] {
    let target = &scene.targets[target_index];
    let s = harness.sim().state();
    let bearing = (target.position[1] - s.position[1]).atan2(target.position[0] - s.position[0]);
    let mut err = bearing - s.yaw;
    while err > std::f64::consts::PI {
        err -= 2.0 * std::f64::consts::PI;
    }
    while err < -std::f64::consts::PI {
        err += 2.0 * std::f64::consts::PI;
    }
    if err.abs() > 0.1 {
        // positive bearing error means turn counter-clockwise: negative rc yaw
        [0, 0, 0, if err > 0.0 { -search_yaw } else { search_yaw }]
    } else {
        // aligned but undetected: approach
        [0, 30, 0, 0]
    }
}
