//! Sweep execution for the shipped scenarios.
//!
//! Every scenario is a sweep over one axis, point-parallel via rayon with
//! results collected in sweep order, so thread count and scheduling never
//! change any output. Jitter mode averages a few repeats per point with
//! pulse areas scaled by seeded Gaussian draws; each point's draws depend
//! only on the seed and the point index, not on execution order.

use echolock::analysis::{fit_exp_decay, two_timescale_fit, DecaySeries, FitOutcome};
use echolock::ensemble::{Ensemble, TraceOptions};
use echolock::propagation::{
    calibrate_coupling, efficiency_vs_depth, run_retrieval, CalibrationRecord, SlabSpec,
};
use echolock::sequence::{build_locked_echo, build_stimulated_echo, Geometry, PulseSpec};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Scenario, SequenceConfig, SweepAxis};
use crate::record::{FitBundle, PointRecord, TargetRecord};

pub struct ScenarioResult {
    pub points: Vec<PointRecord>,
    pub fits: FitBundle,
    pub target: Option<TargetRecord>,
    pub backward_forward_ratio: Option<f64>,
    pub failed: usize,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0f64);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

/// Multiplicative (data, write, read) area factors for every repeat of one
/// sweep point. A single unit triple when jitter is off.
fn area_factors(cfg: &ExperimentConfig, point: usize) -> Vec<[f64; 3]> {
    if !cfg.jitter {
        return vec![[1.0; 3]];
    }
    let stream = cfg
        .seed
        .wrapping_add((point as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    (0..cfg.jitter_repeats)
        .map(|_| {
            let mut f = [0.0; 3];
            for slot in &mut f {
                *slot = (1.0 + cfg.jitter_sigma * standard_normal(&mut rng)).max(0.05);
            }
            f
        })
        .collect()
}

/// (intensity, peak time, efficiency) for one repeat of one point.
type RepeatValue = (f64, Option<f64>, Option<f64>);

fn unlocked_repeat(
    ens: &Ensemble,
    seq: &SequenceConfig,
    delta_t: f64,
    f: [f64; 3],
) -> Result<RepeatValue, String> {
    let built = build_stimulated_echo(
        seq.t_dw,
        delta_t,
        &PulseSpec::hard(seq.d_area * f[0]),
        &PulseSpec::hard(seq.w_area * f[1]),
        &PulseSpec::hard(seq.r_area * f[2]),
        None,
    )
    .map_err(|e| e.to_string())?;
    let out = ens
        .run(&built, &TraceOptions::default())
        .map_err(|e| e.to_string())?;
    let ev = out
        .trace
        .events
        .first()
        .ok_or("no emission in the detection window")?;
    Ok((ev.peak_amplitude * ev.peak_amplitude, Some(ev.peak_time), None))
}

fn locked_repeat(
    ens: &Ensemble,
    seq: &SequenceConfig,
    t_lock: f64,
    f: [f64; 3],
) -> Result<RepeatValue, String> {
    let mut spec = seq.locked_spec(t_lock);
    spec.d = PulseSpec::hard(seq.d_area * f[0]);
    spec.w = PulseSpec::hard(seq.w_area * f[1]);
    spec.r = PulseSpec::hard(seq.r_area * f[2]);
    let built = build_locked_echo(&spec).map_err(|e| e.to_string())?;
    let out = ens
        .run(&built, &TraceOptions::default())
        .map_err(|e| e.to_string())?;
    let ev = out
        .trace
        .events
        .first()
        .ok_or("no emission in the detection window")?;
    Ok((ev.peak_amplitude * ev.peak_amplitude, Some(ev.peak_time), None))
}

fn slab_repeat(
    ens: &Ensemble,
    seq: &SequenceConfig,
    slab: SlabSpec,
    cal: &CalibrationRecord,
    t_lock: f64,
    direction: Geometry,
    f: [f64; 3],
) -> Result<RepeatValue, String> {
    let mut proto = seq.retrieval_protocol(t_lock);
    proto.data_area *= f[0];
    proto.write_area *= f[1];
    proto.read_area *= f[2];
    let out = run_retrieval(slab, ens, cal, &proto, direction).map_err(|e| e.to_string())?;
    let peak = out.trace.events.first().map(|e| e.peak_time);
    Ok((out.efficiency, peak, Some(out.efficiency)))
}

/// Average the repeats of one point; the peak time is taken from the first
/// repeat, whose areas are closest to nominal in expectation.
fn average_point<F>(axis_value: f64, factors: &[[f64; 3]], eval: F) -> PointRecord
where
    F: Fn([f64; 3]) -> Result<RepeatValue, String>,
{
    let mut intensity = 0.0;
    let mut efficiency = 0.0;
    let mut have_eff = false;
    let mut peak_time = None;
    for (i, &f) in factors.iter().enumerate() {
        match eval(f) {
            Ok((value, peak, eff)) => {
                intensity += value;
                if let Some(e) = eff {
                    efficiency += e;
                    have_eff = true;
                }
                if i == 0 {
                    peak_time = peak;
                }
            }
            Err(e) => return PointRecord::failed(axis_value, &e),
        }
    }
    let n = factors.len() as f64;
    PointRecord {
        axis_value,
        intensity: Some(intensity / n),
        normalized: None,
        peak_time,
        efficiency: have_eff.then_some(efficiency / n),
        eta_forward: None,
        eta_backward: None,
        ratio: None,
        status: "ok".into(),
    }
}

fn fill_normalized(points: &mut [PointRecord]) {
    let max = points
        .iter()
        .filter_map(|p| p.intensity)
        .fold(0.0f64, f64::max);
    if max <= 0.0 {
        return;
    }
    for p in points {
        p.normalized = p.intensity.map(|i| i / max);
    }
}

fn ok_series(axis: SweepAxis, points: &[PointRecord]) -> Option<DecaySeries> {
    let pairs: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.is_ok())
        .filter_map(|p| p.intensity.map(|i| (p.axis_value, i)))
        .collect();
    DecaySeries::from_pairs(axis.to_string(), &pairs).ok()
}

fn fitted_tau(fit: &FitOutcome) -> Option<f64> {
    fit.decaying().map(|f| f.tau)
}

fn target_record(name: &str, expected: f64, fitted: Option<f64>) -> Option<TargetRecord> {
    let fitted = fitted?;
    Some(TargetRecord {
        name: name.into(),
        expected,
        fitted,
        rel_err: ((fitted - expected) / expected).abs(),
    })
}

/// Run one thin-medium sweep (unlocked or locked depending on the axis).
fn run_thin(cfg: &ExperimentConfig) -> Result<ScenarioResult, String> {
    let ens = Ensemble::new(cfg.grid.line_shape(), cfg.rates(), cfg.sequence.mode_overlap)
        .map_err(|e| e.to_string())?;
    let axis = cfg.sweep.axis;
    let mut points: Vec<PointRecord> = cfg
        .sweep
        .values
        .par_iter()
        .enumerate()
        .map(|(i, &value)| {
            let factors = area_factors(cfg, i);
            match axis {
                SweepAxis::DeltaT => average_point(value, &factors, |f| {
                    unlocked_repeat(&ens, &cfg.sequence, value, f)
                }),
                SweepAxis::TLock => average_point(value, &factors, |f| {
                    locked_repeat(&ens, &cfg.sequence, value, f)
                }),
                SweepAxis::Depth => unreachable!("depth sweeps run through the slab path"),
            }
        })
        .collect();
    fill_normalized(&mut points);

    let mut fits = FitBundle::default();
    let mut target = None;
    match ok_series(axis, &points) {
        Some(series) => match (cfg.scenario, cfg.sweep.split) {
            (Scenario::Fig2bc, Some(split)) | (Scenario::Custom, Some(split)) => {
                match two_timescale_fit(&series, split) {
                    Ok(two) => {
                        if cfg.scenario == Scenario::Fig2bc {
                            target = target_record(
                                "t1_spin",
                                cfg.rates.t1_spin,
                                fitted_tau(&two.slow),
                            );
                        }
                        fits.two_timescale = Some(two);
                    }
                    Err(e) => fits.note = Some(format!("two-timescale fit failed: {e}")),
                }
            }
            _ => {
                let with_offset = axis == SweepAxis::TLock;
                match fit_exp_decay(&series, with_offset) {
                    Ok(fit) => {
                        if cfg.scenario == Scenario::Fig2a {
                            target = target_record("t1_opt", cfg.rates.t1_opt, fitted_tau(&fit));
                        }
                        fits.primary = Some(fit);
                    }
                    Err(e) => fits.note = Some(format!("fit failed: {e}")),
                }
            }
        },
        None => fits.note = Some("too few successful points to fit".into()),
    }

    let failed = points.iter().filter(|p| !p.is_ok()).count();
    Ok(ScenarioResult {
        points,
        fits,
        target,
        backward_forward_ratio: None,
        failed,
    })
}

/// Locked storage sweep through the slab, plus one forward reference run
/// at the first sweep point for the direction comparison.
fn run_slab_lock_sweep(cfg: &ExperimentConfig) -> Result<ScenarioResult, String> {
    let ens = Ensemble::new(cfg.grid.line_shape(), cfg.rates(), cfg.sequence.mode_overlap)
        .map_err(|e| e.to_string())?;
    let slab: SlabSpec = cfg.slab.ok_or("scenario needs a [slab] table")?.into();
    let cal = calibrate_coupling(&ens).map_err(|e| e.to_string())?;
    let direction: Geometry = cfg.sequence.geometry.into();

    let mut points: Vec<PointRecord> = cfg
        .sweep
        .values
        .par_iter()
        .enumerate()
        .map(|(i, &value)| {
            let factors = area_factors(cfg, i);
            average_point(value, &factors, |f| {
                slab_repeat(&ens, &cfg.sequence, slab, &cal, value, direction, f)
            })
        })
        .collect();
    fill_normalized(&mut points);

    // Direction comparison at the first point, same area factors on both
    // sides so jitter cancels out of the ratio's expectation.
    let first = cfg.sweep.values[0];
    let reference = average_point(first, &area_factors(cfg, 0), |f| {
        slab_repeat(&ens, &cfg.sequence, slab, &cal, first, Geometry::Forward, f)
    });
    let backward_forward_ratio = match (points[0].intensity, reference.intensity) {
        (Some(b), Some(fwd)) if fwd > 0.0 => Some(b / fwd),
        _ => None,
    };

    // The slow side carries the t1_spin target; the fast side absorbs the
    // bypassed-atom decay and the early-hold transient where the slab's
    // population difference, and with it the retrieval transparency, still
    // equilibrates.
    let mut fits = FitBundle::default();
    let mut target = None;
    match ok_series(cfg.sweep.axis, &points) {
        Some(series) => match cfg.sweep.split {
            Some(split) => match two_timescale_fit(&series, split) {
                Ok(two) => {
                    target = target_record("t1_spin", cfg.rates.t1_spin, fitted_tau(&two.slow));
                    fits.two_timescale = Some(two);
                }
                Err(e) => fits.note = Some(format!("two-timescale fit failed: {e}")),
            },
            None => match fit_exp_decay(&series, false) {
                Ok(fit) => {
                    target = target_record("t1_spin", cfg.rates.t1_spin, fitted_tau(&fit));
                    fits.primary = Some(fit);
                }
                Err(e) => fits.note = Some(format!("fit failed: {e}")),
            },
        },
        None => fits.note = Some("too few successful points to fit".into()),
    }

    let failed = points.iter().filter(|p| !p.is_ok()).count();
    Ok(ScenarioResult {
        points,
        fits,
        target,
        backward_forward_ratio,
        failed,
    })
}

/// Depth sweep: both retrieval directions at every depth, unlocked slab
/// timing, pulse parameters from the config.
fn run_depth_sweep(cfg: &ExperimentConfig) -> Result<ScenarioResult, String> {
    let ens = Ensemble::new(cfg.grid.line_shape(), cfg.rates(), cfg.sequence.mode_overlap)
        .map_err(|e| e.to_string())?;
    let template: SlabSpec = cfg.slab.ok_or("depth sweeps need a [slab] table")?.into();
    let cal = calibrate_coupling(&ens).map_err(|e| e.to_string())?;
    let proto = cfg.sequence.depth_protocol();

    // The helper runs the whole depth list per call, so jitter repeats wrap
    // the call instead of the point.
    let factors = area_factors(cfg, 0);
    let mut fwd = vec![0.0; cfg.sweep.values.len()];
    let mut bwd = vec![0.0; cfg.sweep.values.len()];
    for &f in &factors {
        let mut jittered = proto;
        jittered.data_area *= f[0];
        jittered.write_area *= f[1];
        jittered.read_area *= f[2];
        let sweep = efficiency_vs_depth(template, &ens, &cal, &jittered, &cfg.sweep.values)
            .map_err(|e| e.to_string())?;
        for (i, row) in sweep.rows.iter().enumerate() {
            fwd[i] += row.eta_forward;
            bwd[i] += row.eta_backward;
        }
    }
    let n = factors.len() as f64;
    let points: Vec<PointRecord> = cfg
        .sweep
        .values
        .iter()
        .enumerate()
        .map(|(i, &depth)| {
            let eta_f = fwd[i] / n;
            let eta_b = bwd[i] / n;
            PointRecord {
                axis_value: depth,
                intensity: Some(eta_b),
                normalized: None,
                peak_time: None,
                efficiency: Some(eta_b),
                eta_forward: Some(eta_f),
                eta_backward: Some(eta_b),
                ratio: Some(eta_b / eta_f.max(1e-300)),
                status: "ok".into(),
            }
        })
        .collect();

    Ok(ScenarioResult {
        points,
        fits: FitBundle::default(),
        target: None,
        backward_forward_ratio: None,
        failed: 0,
    })
}

/// Dispatch on scenario and axis. The config must already be validated.
pub fn run_scenario(cfg: &ExperimentConfig) -> Result<ScenarioResult, String> {
    match (cfg.scenario, cfg.sweep.axis) {
        (Scenario::Fig3, _) => run_slab_lock_sweep(cfg),
        (Scenario::Custom, SweepAxis::Depth) => run_depth_sweep(cfg),
        _ => run_thin(cfg),
    }
}
