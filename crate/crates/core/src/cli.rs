//! Command-line interface.
//!
//! Subcommands: `train`, `quantize`, `infer`, `simulate`, `mission`,
//! `report`, `serve`. Errors print one machine-parsable line to stderr and
//! exit nonzero; usage errors exit 2.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::clock::secs_to_micros;
use crate::config::ConfigMap;
use crate::link::udp::UdpDroneServer;
use crate::link::LinkConfig;
use crate::mission::report::{aggregate_summaries, export_batch, run_batch, summary_csv};
use crate::mission::MissionConfig;
use crate::nn::train::train_head;
use crate::nn::{build_mobilenet_v2, footprint, io as model_io, run_inference};
use crate::quant::{calibrate, evaluate, predicted_label, quantize_model, EvalResult};
use crate::scene::{generate_dataset, DatasetParams, Frame};
use crate::sim::{endurance_run, EnergyProfile, PayloadConfig, PowerState, SimParams, Simulator};
use crate::tensor::DType;

#[derive(Parser)]
#[command(
    name = "tinywing",
    about = "Energy-aware smart-drone toolkit: tiny-CNN runtime, PID control loop, endurance simulator, mission runner",
    version
)]
struct Cli {
    /// Base seed for all randomness.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Simulation step in seconds.
    #[arg(long, global = true, default_value_t = 0.05)]
    dt: f64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the width-0.35 backbone, train the classifier head on the
    /// synthetic set, and save the model.
    Train {
        /// Training frames (balanced).
        #[arg(long, default_value_t = 1000)]
        frames: usize,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 1.0)]
        lr: f64,
    },
    /// Calibrate and convert a Real32 model to int8; print the footprint
    /// report.
    Quantize {
        model: PathBuf,
        /// Calibration frames.
        #[arg(long, default_value_t = 100)]
        calib_frames: usize,
    },
    /// Classify one PNG frame.
    Infer { model: PathBuf, frame: PathBuf },
    /// Constant-state endurance run against the published tables.
    Simulate {
        #[arg(long)]
        payload: String,
        #[arg(long)]
        state: String,
    },
    /// Full autonomous mission from a key=value config file.
    Mission {
        #[arg(long)]
        config: PathBuf,
    },
    /// Aggregate summary CSVs in a directory.
    Report { dir: PathBuf },
    /// Run the drone simulator behind real UDP ports.
    Serve {
        #[arg(long, default_value = "openmv")]
        payload: String,
        #[arg(long, default_value = "0.0.0.0")]
        bind: String,
        #[arg(long, default_value_t = 8889)]
        control_port: u16,
        #[arg(long, default_value_t = 8890)]
        state_port: u16,
    },
}

/// Entry point used by main; returns the process exit code.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Train { frames, epochs, lr } => cmd_train(&cli.out, cli.seed, frames, epochs, lr),
        Command::Quantize {
            model,
            calib_frames,
        } => cmd_quantize(&cli.out, cli.seed, &model, calib_frames),
        Command::Infer { model, frame } => cmd_infer(&model, &frame),
        Command::Simulate { payload, state } => cmd_simulate(&payload, &state, cli.dt),
        Command::Mission { config } => cmd_mission(&cli.out, &config),
        Command::Report { dir } => cmd_report(&dir),
        Command::Serve {
            payload,
            bind,
            control_port,
            state_port,
        } => cmd_serve(&payload, &bind, control_port, state_port),
    }
}

fn parse_payload(s: &str) -> Result<PayloadConfig, String> {
    PayloadConfig::parse(s)
        .ok_or_else(|| format!("unknown payload {s:?} (nopayload|arduino|openmv|distributed)"))
}

fn cmd_train(out: &Path, seed: u64, frames: usize, epochs: usize, lr: f64) -> Result<(), String> {
    std::fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    let model = build_mobilenet_v2(0.35, 96, 2, seed).map_err(|e| e.to_string())?;
    let dataset = generate_dataset(frames, seed, &DatasetParams::default());
    let outcome = train_head(&model, &dataset, lr, epochs, seed).map_err(|e| e.to_string())?;
    let path = out.join("model.twng");
    model_io::save(&outcome.model, &path).map_err(|e| e.to_string())?;
    let fp = footprint::memory_footprint(&outcome.model).map_err(|e| e.to_string())?;
    println!(
        "train_accuracy={:.4} params={} flash_bytes={} ram_peak_bytes={} model={}",
        outcome.final_accuracy,
        outcome.model.param_count(),
        fp.flash_bytes,
        fp.ram_peak_bytes,
        path.display()
    );
    Ok(())
}

fn cmd_quantize(
    out: &Path,
    seed: u64,
    model_path: &Path,
    calib_frames: usize,
) -> Result<(), String> {
    std::fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    let model = model_io::load(model_path).map_err(|e| e.to_string())?;
    if model.dtype != DType::Real32 {
        return Err("model is already int8".into());
    }
    let calib = generate_dataset(calib_frames, seed, &DatasetParams::default());
    let profile = calibrate(&model, &calib).map_err(|e| e.to_string())?;
    let quantized = quantize_model(&model, &profile).map_err(|e| e.to_string())?;
    let out_path = out.join("model_int8.twng");
    model_io::save(&quantized, &out_path).map_err(|e| e.to_string())?;

    let f32_bytes = model_io::to_bytes(&model).map_err(|e| e.to_string())?.len();
    let int8_bytes = model_io::to_bytes(&quantized)
        .map_err(|e| e.to_string())?
        .len();
    let weights_f32: usize = model
        .layers
        .iter()
        .filter_map(|l| l.op.weights())
        .map(|w| w.byte_size())
        .sum();
    let weights_int8: usize = quantized
        .layers
        .iter()
        .filter_map(|l| l.op.weights())
        .map(|w| w.byte_size())
        .sum();
    let fp_f32 = footprint::memory_footprint(&model).map_err(|e| e.to_string())?;
    let fp_int8 = footprint::memory_footprint(&quantized).map_err(|e| e.to_string())?;
    println!(
        "flash_real32={} flash_int8={} flash_ratio={:.4} weight_ratio={:.4} ram_peak_real32={} ram_peak_int8={} model={}",
        f32_bytes,
        int8_bytes,
        int8_bytes as f64 / f32_bytes as f64,
        weights_int8 as f64 / weights_f32 as f64,
        fp_f32.ram_peak_bytes,
        fp_int8.ram_peak_bytes,
        out_path.display()
    );

    // quick agreement check against the float model on a fresh slice
    let eval_set = generate_dataset(200, seed + 1, &DatasetParams::default());
    let result: EvalResult =
        evaluate(&quantized, &eval_set, Some(&model)).map_err(|e| e.to_string())?;
    println!("{}", EvalResult::CSV_HEADER);
    println!("{}", result.csv_row("model_int8", DType::Int8));
    Ok(())
}

fn cmd_infer(model_path: &Path, frame_path: &Path) -> Result<(), String> {
    let model = model_io::load(model_path).map_err(|e| e.to_string())?;
    let frame = Frame::load_png(frame_path).map_err(|e| e.to_string())?;
    let probs = run_inference(&model, &frame.to_input_tensor()).map_err(|e| e.to_string())?;
    let (label, confidence) = predicted_label(&probs);
    println!("label={} confidence={confidence:.4}", label.name());
    Ok(())
}

fn cmd_simulate(payload: &str, state: &str, dt: f64) -> Result<(), String> {
    let payload = parse_payload(payload)?;
    let state = PowerState::parse(state)
        .ok_or_else(|| format!("unknown state {state:?} (idle|hover|maneuver)"))?;
    let profile = EnergyProfile::default_table();
    if !profile.has_row(payload, state) && state != PowerState::Idle {
        return Err(format!(
            "table has no row for {} {}",
            payload.name(),
            state.name()
        ));
    }
    let (endurance_s, energy_j) = endurance_run(payload, state, &profile, secs_to_micros(dt));
    println!(
        "payload={} state={} endurance_s={endurance_s:.3} energy_used_j={energy_j:.3} power_w={:.3}",
        payload.name(),
        state.name(),
        profile.power_w(payload, state)
    );
    Ok(())
}

fn cmd_mission(out: &Path, config_path: &Path) -> Result<(), String> {
    let map = ConfigMap::load(config_path).map_err(|e| e.to_string())?;
    let cfg: MissionConfig = map.to_mission_config().map_err(|e| e.to_string())?;
    let runs = map.runs().map_err(|e| e.to_string())?;
    let model = match map.model_path() {
        Some(path) => model_io::load(&path).map_err(|e| e.to_string())?,
        None => {
            // no model supplied: build and head-train a fresh one in place
            let model = build_mobilenet_v2(0.35, 96, 2, cfg.seed).map_err(|e| e.to_string())?;
            let data = generate_dataset(200, cfg.seed, &DatasetParams::default());
            train_head(&model, &data, 1.0, 30, cfg.seed)
                .map_err(|e| e.to_string())?
                .model
        }
    };
    let reports = run_batch(&cfg, &model, runs).map_err(|e| e.to_string())?;
    export_batch(&reports, out).map_err(|e| e.to_string())?;
    print!("{}", summary_csv(&reports));
    println!(
        "outcome={}",
        reports.last().map(|r| r.outcome.name()).unwrap_or("none")
    );
    Ok(())
}

fn cmd_report(dir: &Path) -> Result<(), String> {
    let csv = aggregate_summaries(dir).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("aggregate.csv"), &csv).map_err(|e| e.to_string())?;
    print!("{csv}");
    Ok(())
}

fn cmd_serve(payload: &str, bind: &str, control_port: u16, state_port: u16) -> Result<(), String> {
    let payload = parse_payload(payload)?;
    let cfg = LinkConfig {
        control_port,
        state_port,
        ..LinkConfig::default()
    };
    let sim = Simulator::new(
        payload,
        EnergyProfile::default_table(),
        SimParams::default(),
    );
    let server = UdpDroneServer::spawn(bind, cfg, sim).map_err(|e| e.to_string())?;
    println!(
        "serving payload={} control={} state={}",
        payload.name(),
        server.control_addr(),
        server.state_addr()
    );
    // serve until interrupted
    loop {
        std::thread::sleep(std::time::Duration::from_secs(3600));
    }
}
