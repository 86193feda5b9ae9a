//! Run records and on-disk artifacts.
//!
//! Every run writes four files named `{scenario}_{hash}_{kind}`: the point
//! table (CSV), the fit parameters (JSON), a human-readable summary, and
//! the full machine-readable record. A record can later be turned back
//! into plot-ready CSVs without rerunning anything. All numbers are
//! written with fixed precision so a rerun of the same config and seed
//! reproduces every artifact byte for byte; the wall-time entries are the
//! one sanctioned exception.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use echolock::analysis::{FitOutcome, TwoTimescaleFit};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SweepAxis};

pub const FORMAT_VERSION: u32 = 1;

/// One sweep point. Failed points keep their axis value and carry the
/// failure text in `status`; all measured fields stay empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub axis_value: f64,
    #[serde(default)]
    pub intensity: Option<f64>,
    /// Intensity divided by the largest intensity in the sweep.
    #[serde(default)]
    pub normalized: Option<f64>,
    #[serde(default)]
    pub peak_time: Option<f64>,
    /// Retrieval efficiency for slab runs (equals `intensity` there).
    #[serde(default)]
    pub efficiency: Option<f64>,
    /// Depth sweeps only: both directions and their ratio.
    #[serde(default)]
    pub eta_forward: Option<f64>,
    #[serde(default)]
    pub eta_backward: Option<f64>,
    #[serde(default)]
    pub ratio: Option<f64>,
    pub status: String,
}

impl PointRecord {
    pub fn failed(axis_value: f64, message: &str) -> Self {
        PointRecord {
            axis_value,
            intensity: None,
            normalized: None,
            peak_time: None,
            efficiency: None,
            eta_forward: None,
            eta_backward: None,
            ratio: None,
            status: format!("failed: {}", message.replace(',', ";")),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitBundle {
    /// Single-exponential fit over the whole sweep.
    #[serde(default)]
    pub primary: Option<FitOutcome>,
    /// Independent fast/slow fits around the configured split.
    #[serde(default)]
    pub two_timescale: Option<TwoTimescaleFit>,
    /// Why a fit is absent, when one was expected.
    #[serde(default)]
    pub note: Option<String>,
}

/// Comparison of a fitted time constant against the configured rate it
/// should track.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub name: String,
    pub expected: f64,
    pub fitted: f64,
    /// |fitted - expected| / expected.
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format_version: u32,
    pub tool_version: String,
    pub scenario: String,
    pub config_hash: String,
    pub seed: u64,
    pub axis: String,
    /// Not reproducible across reruns; every artifact comparison must skip
    /// lines carrying it.
    pub wall_time_ms: u128,
    pub failed_points: usize,
    pub points: Vec<PointRecord>,
    pub fits: FitBundle,
    #[serde(default)]
    pub target: Option<TargetRecord>,
    /// Backward over forward retrieval efficiency at the first sweep point
    /// (backward-retrieval scenarios only).
    #[serde(default)]
    pub backward_forward_ratio: Option<f64>,
    pub config: ExperimentConfig,
}

fn num(v: f64) -> String {
    format!("{v:.12e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn artifact_name(record: &RunRecord, kind: &str) -> String {
    format!("{}_{}_{}", record.scenario, record.config_hash, kind)
}

fn fit_line(label: &str, fit: &FitOutcome) -> String {
    match fit {
        FitOutcome::Decaying(f) => format!(
            "{label}: tau = {} us, amplitude = {}, offset = {}, residual = {}",
            num(f.tau),
            num(f.amplitude),
            num(f.offset),
            num(f.residual_norm),
        ),
        FitOutcome::NonDecaying { level } => {
            format!("{label}: no decay, constant level {}", num(*level))
        }
    }
}

/// Evaluate a fit curve at one delay.
fn fit_value(fit: &FitOutcome, t: f64) -> f64 {
    match fit {
        FitOutcome::Decaying(f) => f.amplitude * (-2.0 * t / f.tau).exp() + f.offset,
        FitOutcome::NonDecaying { level } => *level,
    }
}

fn points_csv(record: &RunRecord) -> String {
    let mut out = String::new();
    if record.axis == SweepAxis::Depth.to_string() {
        out.push_str("depth,eta_forward,eta_backward,ratio,status\n");
        for p in &record.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                num(p.axis_value),
                opt(p.eta_forward),
                opt(p.eta_backward),
                opt(p.ratio),
                p.status,
            );
        }
    } else {
        let _ = writeln!(out, "{},intensity,normalized,peak_time,status", record.axis);
        for p in &record.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                num(p.axis_value),
                opt(p.intensity),
                opt(p.normalized),
                opt(p.peak_time),
                p.status,
            );
        }
    }
    out
}

const CURVE_SAMPLES: usize = 200;

/// Fit curves sampled densely over the swept range. Single fits produce a
/// `fit` column; two-timescale fits produce `fit_fast` and `fit_slow`
/// columns, each filled only on its own side of the split.
fn curve_csv(record: &RunRecord) -> Option<String> {
    let ok_values: Vec<f64> = record
        .points
        .iter()
        .filter(|p| p.is_ok())
        .map(|p| p.axis_value)
        .collect();
    let (&lo, &hi) = (ok_values.first()?, ok_values.last()?);
    let split = record.config.sweep.split;
    let mut out = String::new();
    let step = if CURVE_SAMPLES > 1 {
        (hi - lo) / (CURVE_SAMPLES - 1) as f64
    } else {
        0.0
    };
    match (&record.fits.primary, &record.fits.two_timescale) {
        (Some(fit), _) => {
            let _ = writeln!(out, "{},fit", record.axis);
            for i in 0..CURVE_SAMPLES {
                let t = lo + step * i as f64;
                let _ = writeln!(out, "{},{}", num(t), num(fit_value(fit, t)));
            }
        }
        (None, Some(two)) => {
            let split = split?;
            let _ = writeln!(out, "{},fit_fast,fit_slow", record.axis);
            for i in 0..CURVE_SAMPLES {
                let t = lo + step * i as f64;
                let fast = (t <= split).then(|| num(fit_value(&two.fast, t)));
                let slow = (t >= split).then(|| num(fit_value(&two.slow, t)));
                let _ = writeln!(
                    out,
                    "{},{},{}",
                    num(t),
                    fast.unwrap_or_default(),
                    slow.unwrap_or_default(),
                );
            }
        }
        (None, None) => return None,
    }
    Some(out)
}

fn fit_json(record: &RunRecord) -> String {
    #[derive(Serialize)]
    struct FitFile<'a> {
        scenario: &'a str,
        config_hash: &'a str,
        fits: &'a FitBundle,
        target: &'a Option<TargetRecord>,
        backward_forward_ratio: &'a Option<f64>,
    }
    let mut json = serde_json::to_string_pretty(&FitFile {
        scenario: &record.scenario,
        config_hash: &record.config_hash,
        fits: &record.fits,
        target: &record.target,
        backward_forward_ratio: &record.backward_forward_ratio,
    })
    .expect("fit bundle serializes");
    json.push('\n');
    json
}

fn summary_text(record: &RunRecord) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "scenario {}", record.scenario);
    let _ = writeln!(out, "config hash {}", record.config_hash);
    let _ = writeln!(out, "seed {}", record.seed);
    let _ = writeln!(
        out,
        "jitter {}",
        if record.config.jitter {
            format!(
                "on (sigma {}, {} repeats)",
                record.config.jitter_sigma, record.config.jitter_repeats
            )
        } else {
            "off".to_string()
        }
    );
    let _ = writeln!(
        out,
        "sweep {}: {} points, {} failed",
        record.axis,
        record.points.len(),
        record.failed_points,
    );
    if let Some(fit) = &record.fits.primary {
        let _ = writeln!(out, "{}", fit_line("fit", fit));
    }
    if let Some(two) = &record.fits.two_timescale {
        let _ = writeln!(out, "{}", fit_line("fast fit", &two.fast));
        let _ = writeln!(out, "{}", fit_line("slow fit", &two.slow));
    }
    if let Some(note) = &record.fits.note {
        let _ = writeln!(out, "fit note: {note}");
    }
    if let Some(t) = &record.target {
        let _ = writeln!(
            out,
            "target {} = {} us: fitted {} us, deviation {:.2}%",
            t.name,
            num(t.expected),
            num(t.fitted),
            100.0 * t.rel_err,
        );
    }
    if let Some(r) = record.backward_forward_ratio {
        let _ = writeln!(
            out,
            "backward/forward efficiency ratio at the first sweep point: {}",
            num(r),
        );
    }
    let _ = writeln!(out, "points:");
    let depth_axis = record.axis == SweepAxis::Depth.to_string();
    for p in &record.points {
        if !p.is_ok() {
            let _ = writeln!(out, "  {} = {}  {}", record.axis, num(p.axis_value), p.status);
        } else if depth_axis {
            let _ = writeln!(
                out,
                "  depth = {}  forward {}  backward {}  ratio {}",
                num(p.axis_value),
                opt(p.eta_forward),
                opt(p.eta_backward),
                opt(p.ratio),
            );
        } else {
            let _ = writeln!(
                out,
                "  {} = {}  intensity {}  normalized {}",
                record.axis,
                num(p.axis_value),
                opt(p.intensity),
                opt(p.normalized),
            );
        }
    }
    let _ = writeln!(out, "wall time: {} ms", record.wall_time_ms);
    out
}

fn write_file(dir: &Path, name: String, contents: &str) -> Result<PathBuf, String> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    Ok(path)
}

/// Write the full artifact set for a finished run. Returns the paths in a
/// fixed order: points, fit, summary, record.
pub fn write_artifacts(record: &RunRecord, dir: &Path) -> Result<Vec<PathBuf>, String> {
    fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    let mut record_json =
        serde_json::to_string_pretty(record).map_err(|e| format!("record serialization: {e}"))?;
    record_json.push('\n');
    let files = vec![
        write_file(dir, artifact_name(record, "points.csv"), &points_csv(record))?,
        write_file(dir, artifact_name(record, "fit.json"), &fit_json(record))?,
        write_file(dir, artifact_name(record, "summary.txt"), &summary_text(record))?,
        write_file(dir, artifact_name(record, "record.json"), &record_json)?,
    ];
    Ok(files)
}

/// Rebuild the plot-ready CSVs from a stored record: the point table, plus
/// a sampled fit curve when the record carries fits. Byte-identical to
/// what the original run wrote.
pub fn emit_plotdata(record_path: &Path, out_dir: Option<&Path>) -> Result<Vec<PathBuf>, String> {
    let text = fs::read_to_string(record_path)
        .map_err(|e| format!("cannot read {}: {e}", record_path.display()))?;
    let record: RunRecord =
        serde_json::from_str(&text).map_err(|e| format!("record parse: {e}"))?;
    if record.points.is_empty() {
        return Err("record has an empty sweep; nothing to plot".into());
    }
    let dir = out_dir
        .map(Path::to_path_buf)
        .or_else(|| record_path.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    let mut files = vec![write_file(
        &dir,
        artifact_name(&record, "points.csv"),
        &points_csv(&record),
    )?];
    if let Some(curve) = curve_csv(&record) {
        files.push(write_file(&dir, artifact_name(&record, "curve.csv"), &curve)?);
    }
    Ok(files)
}
