//! Mission CSV export and the seeded repeat-runner.
//!
//! Exports are deterministic byte-for-byte for a given report: fixed column
//! order, fixed float precision.

use std::fs;
use std::io;
use std::path::Path;

use crate::clock::micros_to_secs;
use crate::nn::ModelGraph;

use super::{run_mission, MissionConfig, MissionError, MissionReport};

pub const SUMMARY_HEADER: &str =
    "run_id,payload,mode,flight_time_s,energy_j,targets,correct,accuracy";
pub const TIMELINE_HEADER: &str = "t,x,y,z,state,energy_j,event";
pub const CONFUSION_HEADER: &str = "truth,pred_mask,pred_nomask";

/// One summary data row.
pub fn summary_row(run_id: &str, report: &MissionReport) -> String {
    format!(
        "{run_id},{},{},{:.3},{:.3},{},{},{:.4}",
        report.payload.name(),
        report.mode.name(),
        report.flight_time_s,
        report.energy_used_j,
        report.targets.len(),
        report.targets_correct(),
        report.accuracy(),
    )
}

/// Summary CSV for a batch; more than one run appends a mean row.
pub fn summary_csv(reports: &[MissionReport]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for (i, report) in reports.iter().enumerate() {
        out.push_str(&summary_row(&i.to_string(), report));
        out.push('\n');
    }
    if reports.len() > 1 {
        let n = reports.len() as f64;
        let mean_time = reports.iter().map(|r| r.flight_time_s).sum::<f64>() / n;
        let mean_energy = reports.iter().map(|r| r.energy_used_j).sum::<f64>() / n;
        let mean_targets = reports.iter().map(|r| r.targets.len()).sum::<usize>() as f64 / n;
        let mean_correct = reports
            .iter()
            .map(MissionReport::targets_correct)
            .sum::<usize>() as f64
            / n;
        let mean_acc = reports.iter().map(MissionReport::accuracy).sum::<f64>() / n;
        out.push_str(&format!(
            "mean,{},{},{mean_time:.3},{mean_energy:.3},{mean_targets:.1},{mean_correct:.1},{mean_acc:.4}\n",
            reports[0].payload.name(),
            reports[0].mode.name(),
        ));
    }
    out
}

pub fn timeline_csv(report: &MissionReport) -> String {
    let mut out = String::from(TIMELINE_HEADER);
    out.push('\n');
    for rec in &report.timeline {
        out.push_str(&format!(
            "{:.3},{:.3},{:.3},{:.3},{},{:.3},{}\n",
            micros_to_secs(rec.t_us),
            rec.position[0],
            rec.position[1],
            rec.position[2],
            rec.state.name(),
            rec.energy_j,
            rec.event,
        ));
    }
    out
}

pub fn confusion_csv(report: &MissionReport) -> String {
    format!(
        "{CONFUSION_HEADER}\nmask,{},{}\nnomask,{},{}\n",
        report.confusion[0][0],
        report.confusion[0][1],
        report.confusion[1][0],
        report.confusion[1][1],
    )
}

/// Write summary/timeline/confusion files for one report.
pub fn export_report(report: &MissionReport, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("summary.csv"),
        summary_csv(std::slice::from_ref(report)),
    )?;
    fs::write(dir.join("timeline.csv"), timeline_csv(report))?;
    fs::write(dir.join("confusion.csv"), confusion_csv(report))?;
    Ok(())
}

/// Execute `runs` seeded missions (seed, seed+1, ...), both the link seed
/// and the scene seed advancing together.
pub fn run_batch(
    cfg: &MissionConfig,
    model: &ModelGraph,
    runs: usize,
) -> Result<Vec<MissionReport>, MissionError> {
    (0..runs)
        .map(|i| {
            let mut run_cfg = cfg.clone();
            run_cfg.seed = cfg.seed + i as u64;
            run_cfg.scene.seed = cfg.scene.seed + i as u64;
            run_mission(&run_cfg, model)
        })
        .collect()
}

/// Write a batch: one summary with mean row, per-run timelines, summed
/// confusion matrix.
pub fn export_batch(reports: &[MissionReport], dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("summary.csv"), summary_csv(reports))?;
    let mut confusion = [[0usize; 2]; 2];
    for (i, report) in reports.iter().enumerate() {
        fs::write(
            dir.join(format!("timeline_{i:02}.csv")),
            timeline_csv(report),
        )?;
        for r in 0..2 {
            for c in 0..2 {
                confusion[r][c] += report.confusion[r][c];
            }
        }
    }
    let total = format!(
        "{CONFUSION_HEADER}\nmask,{},{}\nnomask,{},{}\n",
        confusion[0][0], confusion[0][1], confusion[1][0], confusion[1][1],
    );
    fs::write(dir.join("confusion.csv"), total)?;
    Ok(())
}

/// Merge the data rows of every summary CSV under `dir` and append a fresh
/// mean row; returns the aggregate CSV text.
pub fn aggregate_summaries(dir: &Path) -> io::Result<String> {
    let mut rows: Vec<String> = Vec::new();
    let mut names: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension().map(|x| x == "csv").unwrap_or(false)
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with("summary"))
                    .unwrap_or(false)
        })
        .collect();
    names.sort();
    for path in names {
        let text = fs::read_to_string(&path)?;
        for line in text.lines().skip(1) {
            if !line.is_empty() && !line.starts_with("mean,") {
                rows.push(line.to_string());
            }
        }
    }
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    let mut time_sum = 0.0;
    let mut energy_sum = 0.0;
    let mut acc_sum = 0.0;
    for row in &rows {
        out.push_str(row);
        out.push('\n');
        let cols: Vec<&str> = row.split(',').collect();
        if cols.len() >= 8 {
            time_sum += cols[3].parse::<f64>().unwrap_or(0.0);
            energy_sum += cols[4].parse::<f64>().unwrap_or(0.0);
            acc_sum += cols[7].parse::<f64>().unwrap_or(0.0);
        }
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        out.push_str(&format!(
            "mean,-,-,{:.3},{:.3},-,-,{:.4}\n",
            time_sum / n,
            energy_sum / n,
            acc_sum / n
        ));
    }
    Ok(out)
}
