//! Flat key=value mission configuration files.
//!
//! Lines are `key = value`; `#` starts a comment. Keys mirror the runtime
//! structures: `pid.*`, `link.*`, `scene.*`, `sim.*`, `control.*`,
//! `mission.*`, `distributed.*`, and `energy.<payload>.<state>.*`
//! overrides. Unknown keys are errors so typos surface instead of being
//! silently ignored.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::clock::secs_to_micros;
use crate::mission::{InferenceMode, MissionConfig};
use crate::scene::{MaskLabel, TargetSpec};
use crate::sim::{EnergyRow, PayloadConfig, PowerState};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("duplicate key {0}")]
    DuplicateKey(String),
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("key {key}: cannot parse {value:?} as {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
}

/// Parsed flat configuration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: idx + 1,
                text: raw.to_string(),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if entries.insert(key.clone(), value).is_some() {
                return Err(ConfigError::DuplicateKey(key));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    fn parse_as<T: std::str::FromStr>(
        key: &str,
        value: &str,
        expected: &'static str,
    ) -> Result<T, ConfigError> {
        value.parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            expected,
        })
    }

    /// Optional explicit model path (`mission.model`).
    pub fn model_path(&self) -> Option<PathBuf> {
        self.get("mission.model").map(PathBuf::from)
    }

    /// Number of repeat runs (`mission.runs`); ten seeded runs by default,
    /// matching the published measurement protocol.
    pub fn runs(&self) -> Result<usize, ConfigError> {
        match self.get("mission.runs") {
            Some(v) => Self::parse_as("mission.runs", v, "integer"),
            None => Ok(10),
        }
    }

    /// Build a mission config from the map, starting from the payload's
    /// defaults and overriding key by key.
    pub fn to_mission_config(&self) -> Result<MissionConfig, ConfigError> {
        let payload = match self.get("mission.payload") {
            Some(v) => PayloadConfig::parse(v).ok_or_else(|| ConfigError::BadValue {
                key: "mission.payload".into(),
                value: v.into(),
                expected: "nopayload|arduino|openmv|distributed",
            })?,
            None => PayloadConfig::OpenMv,
        };
        let seed = match self.get("mission.seed") {
            Some(v) => Self::parse_as("mission.seed", v, "integer")?,
            None => 42,
        };
        let mut cfg = MissionConfig::new(payload, seed);
        let mut explicit_targets: BTreeMap<usize, TargetSpec> = BTreeMap::new();
        let mut num_targets: Option<usize> = None;

        for (key, value) in &self.entries {
            let k = key.as_str();
            let v = value.as_str();
            match k {
                "mission.payload" | "mission.seed" | "mission.model" | "mission.runs" => {}
                "mission.mode" => {
                    cfg.mode = InferenceMode::parse(v).ok_or_else(|| ConfigError::BadValue {
                        key: k.into(),
                        value: v.into(),
                        expected: "onboard|distributed",
                    })?;
                }
                "mission.inference_latency_s" => {
                    cfg.inference_latency_us = secs_to_micros(Self::parse_as(k, v, "seconds")?);
                }
                "mission.dt" => cfg.dt_us = secs_to_micros(Self::parse_as(k, v, "seconds")?),
                "mission.time_limit_s" => {
                    cfg.time_limit_us = secs_to_micros(Self::parse_as(k, v, "seconds")?);
                }
                "mission.budget_state" => {
                    cfg.budget_state =
                        PowerState::parse(v).ok_or_else(|| ConfigError::BadValue {
                            key: k.into(),
                            value: v.into(),
                            expected: "idle|hover|maneuver",
                        })?;
                }
                "distributed.remote_compute_s" => {
                    cfg.remote_compute_us = secs_to_micros(Self::parse_as(k, v, "seconds")?);
                }
                "pid.kp" => cfg.pid_gains.0 = Self::parse_as(k, v, "real")?,
                "pid.ki" => cfg.pid_gains.1 = Self::parse_as(k, v, "real")?,
                "pid.kd" => cfg.pid_gains.2 = Self::parse_as(k, v, "real")?,
                "link.control_port" => cfg.link.control_port = Self::parse_as(k, v, "port")?,
                "link.state_port" => cfg.link.state_port = Self::parse_as(k, v, "port")?,
                "link.one_way_latency" => {
                    cfg.link.one_way_latency_us = secs_to_micros(Self::parse_as(k, v, "seconds")?);
                }
                "link.drop_probability" => {
                    cfg.link.drop_probability = Self::parse_as(k, v, "probability")?;
                }
                "link.response_timeout" => {
                    cfg.link.response_timeout_us = secs_to_micros(Self::parse_as(k, v, "seconds")?);
                }
                "link.retries" => cfg.link.retries = Self::parse_as(k, v, "integer")?,
                "scene.world_extent" => cfg.scene.world_extent_m = Self::parse_as(k, v, "meters")?,
                "scene.face_radius_px" => {
                    cfg.scene.face_radius_px = Self::parse_as(k, v, "pixels")?
                }
                "scene.noise_level" => cfg.scene.noise_level = Self::parse_as(k, v, "real")?,
                "scene.seed" => cfg.scene.seed = Self::parse_as(k, v, "integer")?,
                "scene.num_targets" => num_targets = Some(Self::parse_as(k, v, "integer")?),
                "sim.v_max_mps" => cfg.sim_params.v_max_mps = Self::parse_as(k, v, "m/s")?,
                "sim.tau_s" => cfg.sim_params.tau_s = Self::parse_as(k, v, "seconds")?,
                "sim.vertical_speed_mps" => {
                    cfg.sim_params.vertical_speed_mps = Self::parse_as(k, v, "m/s")?;
                }
                "sim.maneuver_threshold_mps" => {
                    cfg.sim_params.maneuver_threshold_mps = Self::parse_as(k, v, "m/s")?;
                }
                "sim.hover_altitude_m" => {
                    cfg.sim_params.hover_altitude_m = Self::parse_as(k, v, "meters")?;
                }
                "control.target_width_px" => cfg.target_width_px = Self::parse_as(k, v, "pixels")?,
                "control.search_yaw" => cfg.search_yaw = Self::parse_as(k, v, "command units")?,
                _ => {
                    if let Some(rest) = k.strip_prefix("scene.target.") {
                        let index: usize = Self::parse_as(k, rest, "target index")?;
                        explicit_targets.insert(index, parse_target(k, v)?);
                    } else if let Some(rest) = k.strip_prefix("energy.") {
                        apply_energy_override(&mut cfg, k, rest, v)?;
                    } else {
                        return Err(ConfigError::UnknownKey(k.into()));
                    }
                }
            }
        }

        if !explicit_targets.is_empty() {
            cfg.scene.targets = explicit_targets.into_values().collect();
        } else if let Some(n) = num_targets {
            cfg.scene = crate::scene::SceneSpec {
                targets: crate::scene::SceneSpec::ring(n, 6.0, cfg.scene.seed).targets,
                ..cfg.scene
            };
        }
        Ok(cfg)
    }
}

/// "x,y,label" or "x,y,z,label".
fn parse_target(key: &str, value: &str) -> Result<TargetSpec, ConfigError> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    let bad = |expected: &'static str| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    };
    match parts.as_slice() {
        [x, y, label] => Ok(TargetSpec {
            position: [
                x.parse().map_err(|_| bad("x,y,label"))?,
                y.parse().map_err(|_| bad("x,y,label"))?,
                1.7,
            ],
            label: MaskLabel::parse(label).ok_or_else(|| bad("mask|nomask"))?,
        }),
        [x, y, z, label] => Ok(TargetSpec {
            position: [
                x.parse().map_err(|_| bad("x,y,z,label"))?,
                y.parse().map_err(|_| bad("x,y,z,label"))?,
                z.parse().map_err(|_| bad("x,y,z,label"))?,
            ],
            label: MaskLabel::parse(label).ok_or_else(|| bad("mask|nomask"))?,
        }),
        _ => Err(bad("x,y[,z],label")),
    }
}

/// `energy.<payload>.<state>.budget_j` / `.endurance_s`.
fn apply_energy_override(
    cfg: &mut MissionConfig,
    key: &str,
    rest: &str,
    value: &str,
) -> Result<(), ConfigError> {
    let parts: Vec<&str> = rest.split('.').collect();
    let bad = || ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected: "energy.<payload>.<state>.budget_j|endurance_s",
    };
    let [payload, state, field] = parts.as_slice() else {
        return Err(bad());
    };
    let payload = PayloadConfig::parse(payload).ok_or_else(bad)?;
    let state = PowerState::parse(state).ok_or_else(bad)?;
    let num: f64 = ConfigMap::parse_as(key, value, "real")?;
    let mut row = if cfg.energy_profile.has_row(payload, state) {
        cfg.energy_profile.row(payload, state)
    } else {
        EnergyRow {
            budget_j: num,
            endurance_s: 1.0,
        }
    };
    match *field {
        "budget_j" => row.budget_j = num,
        "endurance_s" => row.endurance_s = num,
        _ => return Err(bad()),
    }
    cfg.energy_profile.set_row(payload, state, row);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_basic_file() {
        let text = "\
# mission setup
mission.payload = openmv
mission.seed = 7
pid.kp = 0.6
scene.num_targets = 4
link.one_way_latency = 0.05
";
        let map = ConfigMap::parse(text).unwrap();
        let cfg = map.to_mission_config().unwrap();
        assert_eq!(cfg.payload, PayloadConfig::OpenMv);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.pid_gains.0, 0.6);
        assert_eq!(cfg.scene.targets.len(), 4);
        assert_eq!(cfg.link.one_way_latency_us, 50_000);
    }

    #[test]
    fn explicit_targets_win() {
        let text = "\
scene.target.0 = 3.0, 1.0, mask
scene.target.1 = -2.0, 4.0, 1.6, nomask
";
        let cfg = ConfigMap::parse(text).unwrap().to_mission_config().unwrap();
        assert_eq!(cfg.scene.targets.len(), 2);
        assert_eq!(cfg.scene.targets[0].position, [3.0, 1.0, 1.7]);
        assert_eq!(cfg.scene.targets[1].position, [-2.0, 4.0, 1.6]);
        assert_eq!(cfg.scene.targets[1].label, MaskLabel::NoMask);
    }

    #[test]
    fn energy_override_applies() {
        let text = "energy.openmv.hover.budget_j = 50000\nenergy.openmv.hover.endurance_s = 200\n";
        let cfg = ConfigMap::parse(text).unwrap().to_mission_config().unwrap();
        let row = cfg
            .energy_profile
            .row(PayloadConfig::OpenMv, PowerState::Hover);
        assert_eq!(row.budget_j, 50_000.0);
        assert_eq!(row.endurance_s, 200.0);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(matches!(
            ConfigMap::parse("banana = 1").unwrap().to_mission_config(),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            ConfigMap::parse("pid.kp 0.5"),
            Err(ConfigError::Syntax { .. })
        ));
        assert!(matches!(
            ConfigMap::parse("pid.kp = x").unwrap().to_mission_config(),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            ConfigMap::parse("pid.kp = 1\npid.kp = 2"),
            Err(ConfigError::DuplicateKey(_))
        ));
    }

    #[test]
    fn missing_file_error_names_the_path() {
        let err = ConfigMap::load(Path::new("/definitely/missing.cfg")).unwrap_err();
        assert!(err.to_string().contains("/definitely/missing.cfg"));
    }

    #[test]
    fn distributed_mode_keys() {
        let text = "\
mission.payload = distributed
distributed.remote_compute_s = 0.1
link.one_way_latency = 0.05
";
        let cfg = ConfigMap::parse(text).unwrap().to_mission_config().unwrap();
        assert_eq!(cfg.mode, InferenceMode::Distributed);
        assert_eq!(cfg.decision_period_us(), 200_000);
    }
}
