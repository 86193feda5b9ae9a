//! One-dimensional field transport through an optically thick slab.
//!
//! The slab is cut into uniform slices, each holding one density matrix per
//! ensemble class. A slowly varying envelope marches slice to slice along
//! its propagation direction, s being the path coordinate from the entry
//! face:
//!
//!   dF/ds = i kappa P,   P = sum_i w_i rho13_i
//!
//! so a ground-state medium absorbs (rho13 = +i F w / 2 r in the weak-field
//! steady state) and an inverted grating emits. Atoms are driven by the
//! field evaluated at their own slice center, F_edge + i kappa (dz/2) P,
//! which makes each slice's amplitude map the (1,1) Pade approximant of
//! exp(-a/2) and keeps the discretization error at O((d/n_z)^2) overall.
//!
//! Time stepping is a two-sweep predictor-corrector: sweep the field
//! profile from the current states, advance all atoms one RK4 step against
//! the frozen profile, sweep again from the trial states, then redo the
//! atomic step with the (start, mid, end) drive triple. Slices couple
//! sequentially along z; parallelism stays inside the atomic updates, and
//! every field reduction runs in slice-class order, so reruns are
//! bit-identical at any thread count.
//!
//! The coupling kappa folds in dipole moments and number density that the
//! configuration does not carry; it is calibrated numerically so a weak
//! probe obeys Beer-Lambert intensity decay exp(-alpha z) on the caller's
//! own detuning grid (see [`calibrate_coupling`]).
//!
//! Counterpropagating stages never overlap in time here. At a direction
//! switch the off-diagonal elements are dropped: coherences written by the
//! previous direction carry the opposite carrier's spatial phase, average
//! to zero over a slice for the new direction, and keeping them would alias
//! sub-slice structure into the new field. Populations, where the
//! stimulated grating lives, cross the switch untouched. Deshelling pulses
//! are applied as spatially uniform hard rotations; they drive the control
//! transition far from the data line, and their finite absorption is out of
//! scope.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atom::{
    apply_rotation, free_evolve, rk4_step, AtomError, DecayChannels, DensityMatrix, Transition,
    C64, L1, L2, L3,
};
use crate::ensemble::{EchoTrace, Ensemble, EnsembleError, PopulationSpectrum};
use crate::sequence::{
    CarrierLabel, DetectionWindow, Geometry, Pulse, PulseLabel, PulseShape, WaveVector,
};

/// Fewest slices a slab may have.
pub const MIN_SLICES: usize = 16;
/// Largest optical depth one slice may carry before the per-slice amplitude
/// map degrades past the 1% transmission budget.
pub const SLICE_DEPTH_LIMIT: f64 = 0.1;
/// Default slice count.
pub const DEFAULT_SLICES: usize = 48;

/// Ring-down margin kept after the last pulse of a driven interval (us).
const RING_MARGIN: f64 = 2.0;
/// Lead time inserted before a pulse's support starts (us).
const EDGE_PAD: f64 = 0.05;
/// RK4 phase budget: dt <= this over (detuning span + peak Rabi rate).
const STEP_PHASE_BUDGET: f64 = 0.25;

const CAL_DEPTH: f64 = 1.5;
const CAL_SLICES: usize = 16;
const CAL_BETA: f64 = 1.2;
const CAL_AREA: f64 = 0.02;

fn czero() -> C64 {
    C64::new(0.0, 0.0)
}

#[derive(Debug, Error)]
pub enum PropagationError {
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Atom(#[from] AtomError),
    #[error("slab {name} must be positive and finite, got {value}")]
    BadSlab { name: &'static str, value: f64 },
    #[error("slab needs at least {min} slices, got {n_z}")]
    TooFewSlices { n_z: usize, min: usize },
    #[error(
        "optical depth per slice {per_slice:.3} exceeds {limit}; use at least {required} slices"
    )]
    SliceTooDeep {
        per_slice: f64,
        limit: f64,
        required: usize,
    },
    #[error("field step {dt:.4e} us too coarse for this slab; need <= {max:.4e}")]
    StepTooCoarse { dt: f64, max: f64 },
    #[error("pulse {label}: {reason}")]
    UnsupportedPulse { label: String, reason: &'static str },
    #[error("no stored grating to retrieve from")]
    NoGrating,
    #[error("protocol ordering violated: {what}")]
    BadProtocol { what: String },
    #[error(
        "coupling calibration did not converge (last probe transmission {transmission:.4e})"
    )]
    CalibrationFailed { transmission: f64 },
    #[error(
        "detuning grid recurrence {t_rec:.1} us shorter than the probe window {window:.1} us; refine the grid"
    )]
    GridRecurrence { t_rec: f64, window: f64 },
}

/// Slab geometry: length (mm), dimensionless optical depth d = alpha * l,
/// and the slice count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlabSpec {
    pub length: f64,
    pub optical_depth: f64,
    #[serde(default = "default_slices")]
    pub n_z: usize,
}

fn default_slices() -> usize {
    DEFAULT_SLICES
}

impl SlabSpec {
    /// Absorption coefficient alpha = d / l (1/mm), exact by construction.
    pub fn alpha(&self) -> f64 {
        self.optical_depth / self.length
    }

    pub fn validate(&self) -> Result<(), PropagationError> {
        if !(self.length.is_finite() && self.length > 0.0) {
            return Err(PropagationError::BadSlab {
                name: "length",
                value: self.length,
            });
        }
        if !(self.optical_depth.is_finite() && self.optical_depth >= 0.0) {
            return Err(PropagationError::BadSlab {
                name: "optical_depth",
                value: self.optical_depth,
            });
        }
        if self.n_z < MIN_SLICES {
            return Err(PropagationError::TooFewSlices {
                n_z: self.n_z,
                min: MIN_SLICES,
            });
        }
        let per_slice = self.optical_depth / self.n_z as f64;
        if per_slice > SLICE_DEPTH_LIMIT {
            return Err(PropagationError::SliceTooDeep {
                per_slice,
                limit: SLICE_DEPTH_LIMIT,
                required: (self.optical_depth / SLICE_DEPTH_LIMIT).ceil() as usize,
            });
        }
        Ok(())
    }
}

/// Uniformly sampled complex Rabi envelope at one face of the slab.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldEnvelope {
    pub start: f64,
    pub dt: f64,
    pub values: Vec<C64>,
    pub direction: Geometry,
}

impl FieldEnvelope {
    /// Sample a shaped pulse on a uniform mesh, padding `tail` us of zeros
    /// after its support so ring-down stays inside the window.
    pub fn from_pulse(pulse: &Pulse, dt: f64, tail: f64) -> Result<Self, PropagationError> {
        if pulse.is_hard() {
            return Err(PropagationError::UnsupportedPulse {
                label: format!("{:?}", pulse.label),
                reason: "hard pulses have no finite envelope to transport",
            });
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(PropagationError::BadSlab {
                name: "dt",
                value: dt,
            });
        }
        let (t0, t1) = pulse.support();
        let span = t1 - t0 + tail.max(0.0);
        let n = (span / dt).ceil() as usize + 1;
        let phase = C64::from_polar(1.0, -pulse.carrier_phase);
        let values = (0..n)
            .map(|k| phase * pulse.envelope(t0 + k as f64 * dt))
            .collect();
        Ok(FieldEnvelope {
            start: t0,
            dt,
            values,
            direction: direction_of(pulse.wavevector)?,
        })
    }

    /// Trapezoidal integral of |F|^2 over the samples.
    pub fn flux(&self) -> f64 {
        trapezoid_uniform(self.dt, &self.values)
    }

    pub fn peak(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn end(&self) -> f64 {
        self.start + self.dt * (self.values.len().saturating_sub(1)) as f64
    }
}

fn direction_of(k: WaveVector) -> Result<Geometry, PropagationError> {
    if k.z > 0 {
        Ok(Geometry::Forward)
    } else if k.z < 0 {
        Ok(Geometry::Backward)
    } else {
        Err(PropagationError::UnsupportedPulse {
            label: "field".into(),
            reason: "wavevector has no z component to propagate along",
        })
    }
}

fn trapezoid_uniform(dt: f64, values: &[C64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mut acc = 0.5 * (values[0].norm_sqr() + values[values.len() - 1].norm_sqr());
    for v in &values[1..values.len() - 1] {
        acc += v.norm_sqr();
    }
    acc * dt
}

fn trapezoid(times: &[f64], values: &[C64]) -> f64 {
    let mut acc = 0.0;
    for k in 1..times.len() {
        acc += 0.5 * (values[k].norm_sqr() + values[k - 1].norm_sqr()) * (times[k] - times[k - 1]);
    }
    acc
}

/// Result of matching the coupling constant to Beer-Lambert decay.
///
/// `kappa_per_alpha` is grid- and rate-specific but geometry-free: a slab
/// with absorption coefficient alpha uses kappa = kappa_per_alpha * alpha.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub kappa_per_alpha: f64,
    pub probe_beta: f64,
    pub probe_area: f64,
    /// Optical depth of the calibration run.
    pub reference_depth: f64,
    /// Probe transmission measured with the final kappa; its -ln must match
    /// the reference depth.
    pub reference_transmission: f64,
}

fn probe_pulse(beta: f64, area: f64) -> Pulse {
    let half = crate::sequence::SECH_HALF_WIDTH_OVER_BETA / beta;
    Pulse {
        label: PulseLabel::Custom,
        transition: Transition::Data,
        shape: PulseShape::Sech { beta },
        omega0: area * beta / std::f64::consts::PI,
        t0: half + 0.2,
        duration: 2.0 * half,
        carrier_phase: 0.0,
        wavevector: WaveVector::plus_z(),
        carrier: CarrierLabel::Omega1,
    }
}

/// Fix kappa so a weak hyperbolic-secant probe decays as exp(-d) on this
/// ensemble's grid and rates. One run measures the absorbance at a trial
/// coupling; -ln T is linear in kappa in the weak-field regime, so a couple
/// of Newton updates land within 0.2%.
pub fn calibrate_coupling(ensemble: &Ensemble) -> Result<CalibrationRecord, PropagationError> {
    let spec = SlabSpec {
        length: 1.0,
        optical_depth: CAL_DEPTH,
        n_z: CAL_SLICES,
    };
    let probe = probe_pulse(CAL_BETA, CAL_AREA);

    // Continuum estimate alpha = kappa * pi * g(0) seeds the iteration.
    let classes = ensemble.classes();
    let mut spacing = f64::INFINITY;
    let mut w_peak = 0.0f64;
    for pair in classes.windows(2) {
        let gap = (pair[1].detuning.delta_opt - pair[0].detuning.delta_opt).abs();
        if gap > 1e-12 {
            spacing = spacing.min(gap);
        }
    }
    for c in classes {
        w_peak = w_peak.max(c.weight);
    }
    if !spacing.is_finite() {
        // Single optical class: no continuum line to calibrate against.
        return Err(PropagationError::CalibrationFailed { transmission: 1.0 });
    }
    let mut kappa = spec.alpha() * spacing / (std::f64::consts::PI * w_peak);

    let mut last_t = f64::NAN;
    for _ in 0..5 {
        let mut slab = MediumSlab::with_coupling(spec, ensemble, kappa)?;
        let dt = slab.dt_limit(probe.omega0);
        let input = FieldEnvelope::from_pulse(&probe, dt, RING_MARGIN)?;
        slab.check_recurrence(input.end() - input.start)?;
        let out = slab.propagate(&input)?;
        let t = out.flux() / input.flux();
        last_t = t;
        if !(t > 0.0 && t < 1.0) {
            return Err(PropagationError::CalibrationFailed { transmission: t });
        }
        let absorbance = -t.ln();
        if (absorbance - CAL_DEPTH).abs() <= 0.002 * CAL_DEPTH {
            return Ok(CalibrationRecord {
                kappa_per_alpha: kappa / spec.alpha(),
                probe_beta: CAL_BETA,
                probe_area: CAL_AREA,
                reference_depth: CAL_DEPTH,
                reference_transmission: t,
            });
        }
        kappa *= CAL_DEPTH / absorbance;
    }
    Err(PropagationError::CalibrationFailed { transmission: last_t })
}

/// What the storage stage did to the data pulse.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreReport {
    /// Time-integrated |Omega_D|^2 at the entry face.
    pub input_flux: f64,
    /// Exit-face flux up to the data/write boundary.
    pub transmitted_flux: f64,
    pub absorbed_fraction: f64,
}

struct SlabClass {
    det: crate::atom::AtomDetuning,
    weight: f64,
    sees_control: bool,
    opt_index: usize,
}

/// Sliced medium with per-slice, per-class density matrices.
pub struct MediumSlab {
    spec: SlabSpec,
    kappa: f64,
    calibration: Option<CalibrationRecord>,
    classes: Vec<SlabClass>,
    opt_axis: Vec<f64>,
    channels: DecayChannels,
    delta_scale: f64,
    dz: f64,
    slices: Vec<Vec<DensityMatrix>>,
    time: f64,
    last_direction: Option<Geometry>,
    stored_data_flux: Option<f64>,
}

impl MediumSlab {
    /// Build and calibrate in one step.
    pub fn new(spec: SlabSpec, ensemble: &Ensemble) -> Result<Self, PropagationError> {
        let cal = calibrate_coupling(ensemble)?;
        Self::with_calibration(spec, ensemble, cal)
    }

    /// Reuse an existing calibration (same grid and rates).
    pub fn with_calibration(
        spec: SlabSpec,
        ensemble: &Ensemble,
        cal: CalibrationRecord,
    ) -> Result<Self, PropagationError> {
        let mut slab = Self::with_coupling(spec, ensemble, cal.kappa_per_alpha * spec.alpha())?;
        slab.calibration = Some(cal);
        Ok(slab)
    }

    /// Build with an explicit coupling constant; kappa = 0 makes the slab
    /// transparent regardless of its atoms.
    pub fn with_coupling(
        spec: SlabSpec,
        ensemble: &Ensemble,
        kappa: f64,
    ) -> Result<Self, PropagationError> {
        spec.validate()?;
        if !(kappa.is_finite() && kappa >= 0.0) {
            return Err(PropagationError::BadSlab {
                name: "kappa",
                value: kappa,
            });
        }
        let base = ensemble.classes();
        let mut opt_axis: Vec<f64> = Vec::new();
        let mut opt_index_of = Vec::with_capacity(base.len());
        for c in base {
            let is_new = opt_axis
                .last()
                .is_none_or(|&v| (v - c.detuning.delta_opt).abs() > 1e-12 * (1.0 + v.abs()));
            if is_new {
                opt_axis.push(c.detuning.delta_opt);
            }
            opt_index_of.push(opt_axis.len() - 1);
        }
        let mut classes = Vec::with_capacity(base.len() * ensemble.banks().len());
        let mut delta_scale = 0.0f64;
        for bank in ensemble.banks() {
            for (c, &opt_index) in base.iter().zip(&opt_index_of) {
                classes.push(SlabClass {
                    det: c.detuning,
                    weight: bank.coverage * c.weight,
                    sees_control: bank.sees_control,
                    opt_index,
                });
                delta_scale = delta_scale
                    .max(c.detuning.delta_opt.abs() + c.detuning.delta_spin.abs());
            }
        }
        let n_cls = classes.len();
        Ok(MediumSlab {
            spec,
            kappa,
            calibration: None,
            classes,
            opt_axis,
            channels: ensemble.channels(),
            delta_scale,
            dz: spec.length / spec.n_z as f64,
            slices: vec![vec![DensityMatrix::new_ground(); n_cls]; spec.n_z],
            time: 0.0,
            last_direction: None,
            stored_data_flux: None,
        })
    }

    pub fn spec(&self) -> SlabSpec {
        self.spec
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn calibration(&self) -> Option<&CalibrationRecord> {
        self.calibration.as_ref()
    }

    /// Largest usable field step for a given peak Rabi rate.
    pub fn dt_limit(&self, peak_omega: f64) -> f64 {
        STEP_PHASE_BUDGET / (self.delta_scale + peak_omega.abs() + 1e-9)
    }

    fn check_recurrence(&self, window: f64) -> Result<(), PropagationError> {
        let mut spacing = f64::INFINITY;
        for pair in self.opt_axis.windows(2) {
            spacing = spacing.min((pair[1] - pair[0]).abs());
        }
        if !spacing.is_finite() || spacing <= 0.0 {
            return Ok(());
        }
        let t_rec = std::f64::consts::TAU / spacing;
        if t_rec < window {
            return Err(PropagationError::GridRecurrence { t_rec, window });
        }
        Ok(())
    }

    /// Weighted rho13 of one slice, summed in class order.
    fn polarization(states: &[DensityMatrix], classes: &[SlabClass]) -> C64 {
        let mut acc = czero();
        for (s, c) in states.iter().zip(classes) {
            acc += s.coherence(L1, L3) * c.weight;
        }
        acc
    }

    /// March `input` through the slices, returning per-slice center drives
    /// and the exit value.
    fn sweep(
        &self,
        states: &[Vec<DensityMatrix>],
        direction: Geometry,
        input: C64,
    ) -> (Vec<C64>, C64) {
        let ik = C64::new(0.0, self.kappa);
        let n_z = self.spec.n_z;
        let mut centers = vec![czero(); n_z];
        let mut f = input;
        for step in 0..n_z {
            let j = match direction {
                Geometry::Forward => step,
                Geometry::Backward => n_z - 1 - step,
            };
            let p = Self::polarization(&states[j], &self.classes);
            centers[j] = f + ik * p * (0.5 * self.dz);
            f += ik * p * self.dz;
        }
        (centers, f)
    }

    /// Drop coherences that carry the previous direction's carrier phase.
    fn switch_direction(&mut self, direction: Geometry) {
        if self.last_direction == Some(direction) {
            return;
        }
        if self.last_direction.is_some() {
            for slice in &mut self.slices {
                for s in slice.iter_mut() {
                    *s = DensityMatrix::from_diagonal([
                        s.population(L1),
                        s.population(L2),
                        s.population(L3),
                    ]);
                }
            }
        }
        self.last_direction = Some(direction);
    }

    /// One predictor-corrector step from boundary samples at both ends.
    /// Returns the exit-face value at the step end.
    fn mb_step(&mut self, direction: Geometry, in_a: C64, in_b: C64, h: f64) -> C64 {
        let (centers_a, _) = self.sweep(&self.slices, direction, in_a);
        let classes = &self.classes;
        let channels = &self.channels;
        let trial: Vec<Vec<DensityMatrix>> = self
            .slices
            .par_iter()
            .enumerate()
            .map(|(j, slice)| {
                let d = centers_a[j];
                slice
                    .iter()
                    .zip(classes)
                    .map(|(s, c)| rk4_step(s, c.det, channels, Transition::Data, (d, d, d), h))
                    .collect()
            })
            .collect();
        let (centers_b, _) = self.sweep(&trial, direction, in_b);
        self.slices
            .par_iter_mut()
            .enumerate()
            .for_each(|(j, slice)| {
                let (da, db) = (centers_a[j], centers_b[j]);
                let dm = (da + db) * 0.5;
                for (s, c) in slice.iter_mut().zip(classes) {
                    *s = rk4_step(s, c.det, channels, Transition::Data, (da, dm, db), h);
                }
            });
        self.time += h;
        let (_, exit) = self.sweep(&self.slices, direction, in_b);
        exit
    }

    fn hermitize_all(&mut self) {
        for slice in &mut self.slices {
            for s in slice.iter_mut() {
                s.hermitize();
            }
        }
    }

    /// Push a sampled envelope through the slab; the transmitted envelope
    /// shares the input mesh. The slab idles (exact field-free evolution)
    /// up to the envelope start if it is ahead of the slab clock.
    pub fn propagate(
        &mut self,
        field: &FieldEnvelope,
    ) -> Result<FieldEnvelope, PropagationError> {
        if field.values.len() < 2 {
            return Err(PropagationError::BadProtocol {
                what: "field envelope needs at least two samples".into(),
            });
        }
        if !field.values.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
            return Err(PropagationError::BadSlab {
                name: "field sample",
                value: f64::NAN,
            });
        }
        let max_dt = self.dt_limit(field.peak());
        if field.dt > max_dt * (1.0 + 1e-12) {
            return Err(PropagationError::StepTooCoarse {
                dt: field.dt,
                max: max_dt,
            });
        }
        if field.start < self.time - 1e-9 {
            return Err(PropagationError::BadProtocol {
                what: format!(
                    "field starts at {} but the slab clock is already at {}",
                    field.start, self.time
                ),
            });
        }
        if field.start > self.time + 1e-9 {
            self.idle(field.start - self.time)?;
        }
        self.switch_direction(field.direction);
        let mut out = Vec::with_capacity(field.values.len());
        let (_, exit0) = self.sweep(&self.slices, field.direction, field.values[0]);
        out.push(exit0);
        for k in 1..field.values.len() {
            let exit = self.mb_step(
                field.direction,
                field.values[k - 1],
                field.values[k],
                field.dt,
            );
            out.push(exit);
        }
        self.hermitize_all();
        Ok(FieldEnvelope {
            start: field.start,
            dt: field.dt,
            values: out,
            direction: field.direction,
        })
    }

    /// Drive the slab with the given same-direction shaped pulses from the
    /// current clock to `end`, recording the exit field at every mesh node.
    fn integrate_interval(
        &mut self,
        direction: Geometry,
        pulses: &[&Pulse],
        end: f64,
        dt_max: f64,
    ) -> Result<(Vec<f64>, Vec<C64>), PropagationError> {
        let t0 = self.time;
        if end <= t0 + 1e-12 {
            return Err(PropagationError::BadProtocol {
                what: format!("interval end {end} not after the slab clock {t0}"),
            });
        }
        self.switch_direction(direction);
        let mut breaks = Vec::new();
        for p in pulses {
            let (a, b) = p.support();
            breaks.push(a);
            breaks.push(b);
        }
        let mesh = build_mesh(t0, end, dt_max, &breaks);
        let input = |t: f64| -> C64 {
            let mut acc = czero();
            for p in pulses {
                let env = p.envelope(t);
                if env != 0.0 {
                    acc += C64::from_polar(env, -p.carrier_phase);
                }
            }
            acc
        };
        let mut times = Vec::with_capacity(mesh.len());
        let mut exits = Vec::with_capacity(mesh.len());
        let (_, exit0) = self.sweep(&self.slices, direction, input(mesh[0]));
        times.push(mesh[0]);
        exits.push(exit0);
        let mut in_a = input(mesh[0]);
        for pair in mesh.windows(2) {
            let in_b = input(pair[1]);
            let exit = self.mb_step(direction, in_a, in_b, pair[1] - pair[0]);
            times.push(pair[1]);
            exits.push(exit);
            in_a = in_b;
        }
        self.hermitize_all();
        Ok((times, exits))
    }

    /// Exact field-free evolution of every class for `duration`.
    pub fn idle(&mut self, duration: f64) -> Result<(), PropagationError> {
        if duration == 0.0 {
            return Ok(());
        }
        let classes = &self.classes;
        let channels = &self.channels;
        let results: Vec<Result<(), AtomError>> = self
            .slices
            .par_iter_mut()
            .map(|slice| {
                for (s, c) in slice.iter_mut().zip(classes) {
                    *s = free_evolve(s, duration, c.det, channels)?;
                }
                Ok(())
            })
            .collect();
        for r in results {
            r?;
        }
        self.time += duration;
        Ok(())
    }

    /// Apply a hard control-transition pulse uniformly across the slab.
    /// Only classes covered by the control mode see it. The slab clock
    /// must already sit at the pulse time.
    pub fn apply_uniform(&mut self, pulse: &Pulse) -> Result<(), PropagationError> {
        let PulseShape::Hard { area } = pulse.shape else {
            return Err(PropagationError::UnsupportedPulse {
                label: format!("{:?}", pulse.label),
                reason: "only hard pulses may be applied uniformly",
            });
        };
        if pulse.transition != Transition::Control {
            return Err(PropagationError::UnsupportedPulse {
                label: format!("{:?}", pulse.label),
                reason: "data-transition pulses must propagate through the slab",
            });
        }
        if (pulse.t0 - self.time).abs() > 1e-6 {
            return Err(PropagationError::BadProtocol {
                what: format!(
                    "uniform pulse at {} but the slab clock is at {}",
                    pulse.t0, self.time
                ),
            });
        }
        let classes = &self.classes;
        self.slices.par_iter_mut().for_each(|slice| {
            for (s, c) in slice.iter_mut().zip(classes) {
                if c.sees_control {
                    *s = apply_rotation(s, Transition::Control, area, pulse.carrier_phase);
                }
            }
        });
        Ok(())
    }

    /// Absorb a data pulse and write the spectral grating. Integration runs
    /// to `settle_until` (default: past the write pulse and the first
    /// conjugate-pathway rephasing, plus ring-down), so any emission inside
    /// that span stays coupled to the field.
    pub fn store(
        &mut self,
        data: &Pulse,
        write: &Pulse,
        settle_until: Option<f64>,
    ) -> Result<StoreReport, PropagationError> {
        for (p, name) in [(data, "data"), (write, "write")] {
            if p.is_hard() {
                return Err(PropagationError::UnsupportedPulse {
                    label: name.to_string(),
                    reason: "storage pulses must be shaped to propagate",
                });
            }
            if p.transition != Transition::Data {
                return Err(PropagationError::UnsupportedPulse {
                    label: name.to_string(),
                    reason: "storage pulses drive the data transition",
                });
            }
        }
        let direction = direction_of(data.wavevector)?;
        if direction_of(write.wavevector)? != direction {
            return Err(PropagationError::BadProtocol {
                what: "data and write pulses must copropagate".into(),
            });
        }
        let (d0, d1) = data.support();
        let (w0, w1) = write.support();
        if w0 < d1 - 1e-9 {
            return Err(PropagationError::BadProtocol {
                what: "write pulse must follow the data pulse".into(),
            });
        }
        if self.time > d0 - EDGE_PAD + 1e-9 {
            return Err(PropagationError::BadProtocol {
                what: format!("slab clock {} already past the data pulse", self.time),
            });
        }
        // First conjugate-pathway rephasing after the write pulse.
        let conjugate_rephase = 2.0 * write.t0 - data.t0;
        let settle = settle_until.unwrap_or_else(|| w1.max(conjugate_rephase) + RING_MARGIN);
        if settle < w1 {
            return Err(PropagationError::BadProtocol {
                what: "settle time ends inside the write pulse".into(),
            });
        }
        self.idle(d0 - EDGE_PAD - self.time)?;
        let dt_max = self
            .dt_limit(data.omega0.max(write.omega0))
            .min(data.duration / 40.0)
            .min(write.duration / 40.0);
        let (times, exits) = self.integrate_interval(direction, &[data, write], settle, dt_max)?;
        let input_flux = pulse_flux(data).unwrap_or(0.0);
        let cut = 0.5 * (d1 + w0);
        let n_cut = times.partition_point(|&t| t <= cut);
        let transmitted_flux = trapezoid(&times[..n_cut], &exits[..n_cut]);
        self.stored_data_flux = Some(input_flux);
        Ok(StoreReport {
            input_flux,
            transmitted_flux,
            absorbed_fraction: 1.0 - transmitted_flux / input_flux.max(1e-300),
        })
    }

    /// Read the stored grating and collect the echo at the exit face of the
    /// read pulse's direction. Returns the trace over the detection window
    /// and the efficiency: windowed exit flux over stored data flux.
    pub fn retrieve(
        &mut self,
        read: &Pulse,
        window: &DetectionWindow,
    ) -> Result<(EchoTrace, f64), PropagationError> {
        if read.is_hard() || read.transition != Transition::Data {
            return Err(PropagationError::UnsupportedPulse {
                label: "read".to_string(),
                reason: "the read pulse must be a shaped data-transition pulse",
            });
        }
        let Some(data_flux) = self.stored_data_flux else {
            return Err(PropagationError::NoGrating);
        };
        if self.grating_depth() < 1e-12 {
            return Err(PropagationError::NoGrating);
        }
        let direction = direction_of(read.wavevector)?;
        let (r0, r1) = read.support();
        if !(window.start < window.end) || window.start < r1 - 1e-9 {
            return Err(PropagationError::BadProtocol {
                what: format!(
                    "detection window [{}, {}] must follow the read pulse end {}",
                    window.start, window.end, r1
                ),
            });
        }
        if self.time > r0 - EDGE_PAD + 1e-9 {
            return Err(PropagationError::BadProtocol {
                what: format!("slab clock {} already past the read pulse", self.time),
            });
        }
        self.idle(r0 - EDGE_PAD - self.time)?;
        let dt_max = self
            .dt_limit(read.omega0)
            .min(read.duration / 40.0);
        let (times, exits) = self.integrate_interval(direction, &[read], window.end, dt_max)?;
        let from = times.partition_point(|&t| t < window.start - 1e-12);
        let times: Vec<f64> = times[from..].to_vec();
        let polarization: Vec<C64> = exits[from..].to_vec();
        let windowed_flux = trapezoid(&times, &polarization);
        let efficiency = windowed_flux / data_flux.max(1e-300);
        let mut trace = EchoTrace {
            times,
            polarization,
            detection: *window,
            events: Vec::new(),
            data_reference: Some(data_flux),
        };
        // The echo burst spans most of a tight detection window, so locate
        // the peak directly instead of demanding prominence over a floor
        // the window does not contain.
        if let Some((peak_time, peak_amplitude)) = trace.max_abs_in(window.start, window.end) {
            if peak_amplitude > 1e-12 {
                trace.events.push(crate::ensemble::EchoEvent {
                    peak_time,
                    peak_amplitude,
                    integrated_intensity: windowed_flux,
                    efficiency: Some(efficiency),
                });
            }
        }
        Ok((trace, efficiency))
    }

    /// Populations of one slice resolved over the optical axis, spin
    /// classes and coverage banks collapsed by weight.
    pub fn slice_spectrum(&self, j: usize) -> PopulationSpectrum {
        let n = self.opt_axis.len();
        let mut w = vec![0.0; n];
        let mut p11 = vec![0.0; n];
        let mut p22 = vec![0.0; n];
        let mut p33 = vec![0.0; n];
        for (s, c) in self.slices[j].iter().zip(&self.classes) {
            w[c.opt_index] += c.weight;
            p11[c.opt_index] += c.weight * s.population(L1);
            p22[c.opt_index] += c.weight * s.population(L2);
            p33[c.opt_index] += c.weight * s.population(L3);
        }
        for i in 0..n {
            let norm = w[i].max(1e-300);
            p11[i] /= norm;
            p22[i] /= norm;
            p33[i] /= norm;
        }
        PopulationSpectrum {
            detunings: self.opt_axis.clone(),
            p11,
            p22,
            p33,
            time: self.time,
        }
    }

    /// Largest ground-population modulation across the optical axis, over
    /// all slices. Zero means nothing was stored.
    pub fn grating_depth(&self) -> f64 {
        let mut depth = 0.0f64;
        for j in 0..self.slices.len() {
            let spec = self.slice_spectrum(j);
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &p in &spec.p11 {
                lo = lo.min(p);
                hi = hi.max(p);
            }
            depth = depth.max(hi - lo);
        }
        depth
    }

    /// Weighted excited population summed over every slice.
    pub fn excited_population(&self) -> f64 {
        let mut acc = 0.0;
        for slice in &self.slices {
            for (s, c) in slice.iter().zip(&self.classes) {
                acc += c.weight * s.population(L3);
            }
        }
        acc
    }

    /// Flux equivalent of the stored excitation: with decay off,
    /// input flux - output flux = 2 kappa dz sum_z sum_i w_i rho33_i.
    pub fn absorbed_flux_equivalent(&self) -> f64 {
        2.0 * self.kappa * self.dz * self.excited_population()
    }
}

/// Uniform mesh from t0 to t1 with nodes pinned on every breakpoint, so
/// square edges never straddle a step.
fn build_mesh(t0: f64, t1: f64, dt_max: f64, breaks: &[f64]) -> Vec<f64> {
    let mut marks: Vec<f64> = breaks
        .iter()
        .copied()
        .filter(|b| *b > t0 + 1e-12 && *b < t1 - 1e-12)
        .collect();
    marks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    marks.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    marks.push(t1);
    let mut nodes = vec![t0];
    let mut prev = t0;
    for m in marks {
        if m <= prev + 1e-12 {
            continue;
        }
        let n = ((m - prev) / dt_max).ceil().max(1.0) as usize;
        for k in 1..=n {
            nodes.push(prev + (m - prev) * k as f64 / n as f64);
        }
        prev = m;
    }
    nodes
}

/// Time-integrated squared Rabi envelope; None for hard pulses.
fn pulse_flux(p: &Pulse) -> Option<f64> {
    match p.shape {
        PulseShape::Square => Some(p.omega0 * p.omega0 * p.duration),
        PulseShape::Sech { beta } => {
            let half = 0.5 * p.duration;
            Some(p.omega0 * p.omega0 * 2.0 * (beta * half).tanh() / beta)
        }
        PulseShape::Hard { .. } => None,
    }
}

/// Three-pulse storage and retrieval schedule for slab runs. All data
/// pulses are square; the deshelling pair, when enabled, is hard and
/// spatially uniform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalProtocol {
    pub data_area: f64,
    pub write_area: f64,
    pub read_area: f64,
    pub data_duration: f64,
    pub write_duration: f64,
    pub read_duration: f64,
    /// Data-to-write center delay (us); also the echo delay after the read.
    pub t_dw: f64,
    /// Write-to-read center delay (us).
    pub read_delay: f64,
    pub window_half: f64,
    /// Insert the hard pi / 3pi deshelling pair around the storage gap.
    pub locked: bool,
    /// Shelving pulse delay after the write center (us).
    pub shelve_after: f64,
    /// Release pulse lead before the read center (us).
    pub release_before: f64,
}

/// The defaults keep every parasitic rephasing pathway clear of the
/// detection window and leave room for the read pulse's free-induction
/// tail to die before the window opens.
impl Default for RetrievalProtocol {
    fn default() -> Self {
        RetrievalProtocol {
            data_area: 0.2,
            write_area: std::f64::consts::FRAC_PI_2,
            read_area: std::f64::consts::FRAC_PI_2,
            data_duration: 0.5,
            write_duration: 0.7,
            read_duration: 0.7,
            t_dw: 2.0,
            read_delay: 8.0,
            window_half: 1.0,
            locked: false,
            shelve_after: 1.0,
            release_before: 5.4,
        }
    }
}

impl RetrievalProtocol {
    fn square(
        &self,
        label: PulseLabel,
        area: f64,
        duration: f64,
        t0: f64,
        k: WaveVector,
    ) -> Pulse {
        Pulse {
            label,
            transition: Transition::Data,
            shape: PulseShape::Square,
            omega0: area / duration,
            t0,
            duration,
            carrier_phase: 0.0,
            wavevector: k,
            carrier: CarrierLabel::Omega1,
        }
    }

    fn hard_control(&self, label: PulseLabel, area: f64, t0: f64) -> Pulse {
        Pulse {
            label,
            transition: Transition::Control,
            shape: PulseShape::Hard { area },
            omega0: 0.0,
            t0,
            duration: 0.0,
            carrier_phase: 0.0,
            wavevector: WaveVector::plus_z(),
            carrier: CarrierLabel::Omega3,
        }
    }

    pub fn validate(&self) -> Result<(), PropagationError> {
        let fields = [
            ("data_area", self.data_area),
            ("write_area", self.write_area),
            ("read_area", self.read_area),
            ("data_duration", self.data_duration),
            ("write_duration", self.write_duration),
            ("read_duration", self.read_duration),
            ("t_dw", self.t_dw),
            ("read_delay", self.read_delay),
            ("window_half", self.window_half),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(PropagationError::BadSlab { name, value: v });
            }
        }
        let echo_after_read = self.t_dw - 0.5 * self.read_duration;
        if echo_after_read - self.window_half < 0.4 {
            return Err(PropagationError::BadProtocol {
                what: "detection window overlaps the read pulse ring-down".into(),
            });
        }
        // Parasite rephasings the read pulse conjugates out of leftover
        // coherence: the doubly conjugated data pathway at
        // read_delay - 2 t_dw from the echo, and the write-read two-pulse
        // echo at read_delay - t_dw. Shelving freezes optical phase for the
        // lock span, pulling both earlier by that amount. All must clear
        // the detection window.
        let lock_span = if self.locked {
            self.read_delay - self.shelve_after - self.release_before
        } else {
            0.0
        };
        // Parasite bursts are about one read-pulse duration wide, so they
        // need that much extra clearance beyond the window edge.
        let clearance = self.window_half + self.read_duration + 0.6;
        for (name, gap) in [
            ("conjugate-pathway", self.read_delay - 2.0 * self.t_dw - lock_span),
            ("write-read two-pulse", self.read_delay - self.t_dw - lock_span),
        ] {
            if gap.abs() < clearance {
                return Err(PropagationError::BadProtocol {
                    what: format!(
                        "{name} echo lands {:.2} us from the stimulated echo; \
                         retime the read or the deshelling pair",
                        gap.abs()
                    ),
                });
            }
        }
        if self.locked {
            if !(self.shelve_after > 0.5 * self.write_duration) {
                return Err(PropagationError::BadProtocol {
                    what: "shelving pulse overlaps the write pulse".into(),
                });
            }
            if !(self.release_before > 0.5 * self.read_duration) {
                return Err(PropagationError::BadProtocol {
                    what: "release pulse overlaps the read pulse".into(),
                });
            }
            if lock_span <= 0.0 {
                return Err(PropagationError::BadProtocol {
                    what: "deshelling pair does not fit inside the storage gap".into(),
                });
            }
        }
        Ok(())
    }
}

/// One full store-and-retrieve run on a fresh slab.
#[derive(Clone, Debug)]
pub struct RetrievalOutcome {
    pub store: StoreReport,
    pub trace: EchoTrace,
    /// Exit flux over the detection window divided by the data input flux.
    pub efficiency: f64,
}

pub fn run_retrieval(
    spec: SlabSpec,
    ensemble: &Ensemble,
    calibration: &CalibrationRecord,
    proto: &RetrievalProtocol,
    direction: Geometry,
) -> Result<RetrievalOutcome, PropagationError> {
    proto.validate()?;
    let mut slab = MediumSlab::with_calibration(spec, ensemble, *calibration)?;

    let t_d = EDGE_PAD + 0.5 * proto.data_duration + 0.05;
    let t_w = t_d + proto.t_dw;
    let t_r = t_w + proto.read_delay;
    let echo = t_r + proto.t_dw;
    let read_k = match direction {
        Geometry::Forward => WaveVector::plus_z(),
        Geometry::Backward => WaveVector::minus_z(),
    };
    let data = proto.square(
        PulseLabel::D,
        proto.data_area,
        proto.data_duration,
        t_d,
        WaveVector::plus_z(),
    );
    let write = proto.square(
        PulseLabel::W,
        proto.write_area,
        proto.write_duration,
        t_w,
        WaveVector::plus_z(),
    );
    let read = proto.square(PulseLabel::R, proto.read_area, proto.read_duration, t_r, read_k);

    let settle = if proto.locked {
        t_w + proto.shelve_after
    } else {
        (2.0 * t_w - t_d).max(write.support().1) + RING_MARGIN
    };
    let read_lead = read.support().0 - EDGE_PAD;
    let settle = settle.min(read_lead);
    let store = slab.store(&data, &write, Some(settle))?;

    if proto.locked {
        let t_b1 = t_w + proto.shelve_after;
        let t_b2 = t_r - proto.release_before;
        let shelve = proto.hard_control(PulseLabel::B1, std::f64::consts::PI, t_b1);
        let release = proto.hard_control(PulseLabel::B2, 3.0 * std::f64::consts::PI, t_b2);
        slab.apply_uniform(&shelve)?;
        slab.idle(t_b2 - t_b1)?;
        slab.apply_uniform(&release)?;
    }

    let window = DetectionWindow {
        start: echo - proto.window_half,
        end: echo + proto.window_half,
        direction: read_k,
        expected_echo: Some(echo),
    };
    let (trace, efficiency) = slab.retrieve(&read, &window)?;
    Ok(RetrievalOutcome {
        store,
        trace,
        efficiency,
    })
}

/// One row of the depth sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthEfficiencyRow {
    pub depth: f64,
    pub eta_forward: f64,
    pub eta_backward: f64,
    pub ratio: f64,
}

/// Depth sweep with its monotonicity verdicts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthSweep {
    pub rows: Vec<DepthEfficiencyRow>,
    /// Backward efficiency never decreases along the swept depths.
    pub backward_nondecreasing: bool,
    /// Backward beats forward on every row.
    pub backward_dominates: bool,
}

/// Run the protocol forward and backward at each depth. The slice count
/// grows with depth so no slice exceeds the per-slice depth limit.
pub fn efficiency_vs_depth(
    template: SlabSpec,
    ensemble: &Ensemble,
    calibration: &CalibrationRecord,
    proto: &RetrievalProtocol,
    depths: &[f64],
) -> Result<DepthSweep, PropagationError> {
    let mut rows = Vec::with_capacity(depths.len());
    for &depth in depths {
        let n_z = template
            .n_z
            .max((depth / SLICE_DEPTH_LIMIT).ceil() as usize);
        let spec = SlabSpec {
            length: template.length,
            optical_depth: depth,
            n_z,
        };
        let fwd = run_retrieval(spec, ensemble, calibration, proto, Geometry::Forward)?;
        let bwd = run_retrieval(spec, ensemble, calibration, proto, Geometry::Backward)?;
        rows.push(DepthEfficiencyRow {
            depth,
            eta_forward: fwd.efficiency,
            eta_backward: bwd.efficiency,
            ratio: bwd.efficiency / fwd.efficiency.max(1e-300),
        });
    }
    let backward_nondecreasing = rows
        .windows(2)
        .all(|w| w[1].eta_backward >= w[0].eta_backward);
    let backward_dominates = rows.iter().all(|r| r.eta_backward >= r.eta_forward);
    Ok(DepthSweep {
        rows,
        backward_nondecreasing,
        backward_dominates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atom::RelaxationRates;
    use crate::ensemble::{LineProfile, LineShape, LineSpec};
    use std::sync::OnceLock;

    fn test_line() -> LineShape {
        LineShape {
            optical: LineSpec {
                profile: LineProfile::Gaussian,
                width: 4.0 * std::f64::consts::PI,
                n: 109,
            },
            spin: LineSpec::single_class(),
        }
    }

    fn quiet_ensemble() -> Ensemble {
        Ensemble::new(test_line(), RelaxationRates::negligible(), 1.0).unwrap()
    }

    fn quiet_cal() -> CalibrationRecord {
        static CAL: OnceLock<CalibrationRecord> = OnceLock::new();
        *CAL.get_or_init(|| calibrate_coupling(&quiet_ensemble()).unwrap())
    }

    fn probe_transmission(depth: f64, beta: f64) -> f64 {
        let ens = quiet_ensemble();
        let spec = SlabSpec {
            length: 1.0,
            optical_depth: depth,
            n_z: MIN_SLICES.max((depth / SLICE_DEPTH_LIMIT).ceil() as usize),
        };
        let mut slab = MediumSlab::with_calibration(spec, &ens, quiet_cal()).unwrap();
        let probe = probe_pulse(beta, CAL_AREA);
        let dt = slab.dt_limit(probe.omega0);
        let input = FieldEnvelope::from_pulse(&probe, dt, RING_MARGIN).unwrap();
        let out = slab.propagate(&input).unwrap();
        out.flux() / input.flux()
    }

    #[test]
    fn slab_spec_validation_catches_bad_geometry() {
        assert!(matches!(
            SlabSpec {
                length: 1.0,
                optical_depth: 1.0,
                n_z: 8
            }
            .validate(),
            Err(PropagationError::TooFewSlices { .. })
        ));
        assert!(matches!(
            SlabSpec {
                length: 1.0,
                optical_depth: 10.0,
                n_z: 16
            }
            .validate(),
            Err(PropagationError::SliceTooDeep { required: 100, .. })
        ));
        assert!(SlabSpec {
            length: 1.0,
            optical_depth: 0.0,
            n_z: 16
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn weak_probe_obeys_beer_lambert_across_depths() {
        for depth in [0.1, 0.5, 1.0, 2.4, 3.0] {
            let t = probe_transmission(depth, CAL_BETA);
            let expect = (-depth).exp();
            assert!(
                (t / expect - 1.0).abs() <= 0.01,
                "depth {depth}: transmission {t:.5} vs {expect:.5}"
            );
        }
    }

    #[test]
    fn weak_square_probe_transmits_e_inverse_at_unit_depth() {
        let ens = quiet_ensemble();
        let spec = SlabSpec {
            length: 1.0,
            optical_depth: 1.0,
            n_z: 16,
        };
        let mut slab = MediumSlab::with_calibration(spec, &ens, quiet_cal()).unwrap();
        let duration = 16.0;
        let probe = Pulse {
            label: PulseLabel::Custom,
            transition: Transition::Data,
            shape: PulseShape::Square,
            omega0: 0.02 / duration,
            t0: 0.2 + 0.5 * duration,
            duration,
            carrier_phase: 0.0,
            wavevector: WaveVector::plus_z(),
            carrier: CarrierLabel::Omega1,
        };
        let dt = slab.dt_limit(probe.omega0);
        let input = FieldEnvelope::from_pulse(&probe, dt, RING_MARGIN).unwrap();
        let out = slab.propagate(&input).unwrap();
        let t = out.flux() / input.flux();
        let expect = (-1.0f64).exp();
        assert!(
            (t / expect - 1.0).abs() <= 0.01,
            "square-probe transmission {t:.5} vs {expect:.5}"
        );
    }

    #[test]
    fn zero_depth_slab_leaves_the_field_unchanged() {
        let ens = quiet_ensemble();
        let spec = SlabSpec {
            length: 1.0,
            optical_depth: 0.0,
            n_z: 16,
        };
        let mut slab = MediumSlab::with_calibration(spec, &ens, quiet_cal()).unwrap();
        let probe = probe_pulse(CAL_BETA, 0.5);
        let dt = slab.dt_limit(probe.omega0);
        let input = FieldEnvelope::from_pulse(&probe, dt, 1.0).unwrap();
        let out = slab.propagate(&input).unwrap();
        assert_eq!(input.values, out.values);
    }

    #[test]
    fn absorbed_energy_matches_stored_excitation() {
        let ens = quiet_ensemble();
        let spec = SlabSpec {
            length: 1.0,
            optical_depth: 1.0,
            n_z: 16,
        };
        let mut slab = MediumSlab::with_calibration(spec, &ens, quiet_cal()).unwrap();
        let probe = probe_pulse(CAL_BETA, 0.05);
        let dt = slab.dt_limit(probe.omega0);
        let input = FieldEnvelope::from_pulse(&probe, dt, RING_MARGIN).unwrap();
        let out = slab.propagate(&input).unwrap();
        let absorbed = input.flux() - out.flux();
        let ledger = slab.absorbed_flux_equivalent();
        assert!(
            (absorbed / ledger - 1.0).abs() <= 0.01,
            "flux deficit {absorbed:.6e} vs excitation ledger {ledger:.6e}"
        );
    }

    #[test]
    fn propagate_rejects_coarse_sampling() {
        let ens = quiet_ensemble();
        let spec = SlabSpec {
            length: 1.0,
            optical_depth: 1.0,
            n_z: 16,
        };
        let mut slab = MediumSlab::with_calibration(spec, &ens, quiet_cal()).unwrap();
        let field = FieldEnvelope {
            start: 0.0,
            dt: 1.0,
            values: vec![czero(); 8],
            direction: Geometry::Forward,
        };
        assert!(matches!(
            slab.propagate(&field),
            Err(PropagationError::StepTooCoarse { .. })
        ));
    }

    #[test]
    fn retrieve_without_grating_errors() {
        let ens = quiet_ensemble();
        let spec = SlabSpec {
            length: 1.0,
            optical_depth: 1.0,
            n_z: 16,
        };
        let mut slab = MediumSlab::with_calibration(spec, &ens, quiet_cal()).unwrap();
        let proto = RetrievalProtocol::default();
        let read = proto.square(PulseLabel::R, proto.read_area, 0.7, 5.0, WaveVector::plus_z());
        let window = DetectionWindow {
            start: 6.5,
            end: 8.5,
            direction: WaveVector::plus_z(),
            expected_echo: Some(7.0),
        };
        assert!(matches!(
            slab.retrieve(&read, &window),
            Err(PropagationError::NoGrating)
        ));
    }

    #[test]
    fn thin_medium_retrieval_is_direction_blind() {
        let ens = quiet_ensemble();
        let cal = quiet_cal();
        let spec = SlabSpec {
            length: 1.0,
            optical_depth: 0.1,
            n_z: 16,
        };
        let proto = RetrievalProtocol::default();
        let fwd = run_retrieval(spec, &ens, &cal, &proto, Geometry::Forward).unwrap();
        let bwd = run_retrieval(spec, &ens, &cal, &proto, Geometry::Backward).unwrap();
        assert!(fwd.efficiency > 0.0 && bwd.efficiency > 0.0);
        assert!(
            (fwd.efficiency / bwd.efficiency - 1.0).abs() <= 0.05,
            "thin-medium asymmetry: fwd {} bwd {}",
            fwd.efficiency,
            bwd.efficiency
        );
    }

    #[test]
    fn backward_dominates_and_grows_with_depth() {
        let ens = quiet_ensemble();
        let cal = quiet_cal();
        let template = SlabSpec {
            length: 1.0,
            optical_depth: 0.0,
            n_z: 24,
        };
        let proto = RetrievalProtocol::default();
        let sweep =
            efficiency_vs_depth(template, &ens, &cal, &proto, &[0.5, 1.0, 2.4]).unwrap();
        for r in &sweep.rows {
            eprintln!(
                "depth {:.1}: fwd {:.5} bwd {:.5} ratio {:.2}",
                r.depth, r.eta_forward, r.eta_backward, r.ratio
            );
        }
        assert!(sweep.backward_nondecreasing, "rows: {:?}", sweep.rows);
        assert!(sweep.backward_dominates, "rows: {:?}", sweep.rows);
    }

    #[test]
    fn forward_efficiency_peaks_inside_the_depth_sweep() {
        let ens = quiet_ensemble();
        let cal = quiet_cal();
        let proto = RetrievalProtocol::default();
        let mut etas = Vec::new();
        for depth in [0.25, 0.75, 1.5, 2.4, 3.2, 4.0] {
            let spec = SlabSpec {
                length: 1.0,
                optical_depth: depth,
                n_z: 24usize.max((depth / SLICE_DEPTH_LIMIT).ceil() as usize),
            };
            let out = run_retrieval(spec, &ens, &cal, &proto, Geometry::Forward).unwrap();
            etas.push(out.efficiency);
        }
        let best = etas
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert!(
            best > 0 && best < etas.len() - 1,
            "forward efficiency not interior: {etas:?}"
        );
    }

    #[test]
    fn empty_depth_list_yields_empty_table() {
        let ens = quiet_ensemble();
        let cal = quiet_cal();
        let template = SlabSpec {
            length: 1.0,
            optical_depth: 0.0,
            n_z: 16,
        };
        let sweep =
            efficiency_vs_depth(template, &ens, &cal, &RetrievalProtocol::default(), &[])
                .unwrap();
        assert!(sweep.rows.is_empty());
        assert!(sweep.backward_nondecreasing && sweep.backward_dominates);
    }

    /// On/off comparison with the shelving pulse placed after the
    /// write-side conjugate pathway has rephased and radiated. Both runs
    /// then carry identical pathway content and the hard pair itself is
    /// the only difference. Shelving earlier suppresses that radiated
    /// burst, which costs nothing stored but removes a secondary grating
    /// the burst writes on its way out, so an early-shelve comparison
    /// conflates the pair with parasite suppression.
    #[test]
    fn deshelling_pair_does_not_cost_efficiency() {
        let rates = RelaxationRates {
            t1_opt: 160.0,
            t2_opt: 25.0,
            t1_spin: 1.0e8,
            t2_spin: 500.0,
            branch_31: 1.0,
            spin_equilibrium: 0.5,
        };
        let ens = Ensemble::new(test_line(), rates, 1.0).unwrap();
        let cal = calibrate_coupling(&ens).unwrap();
        let spec = SlabSpec {
            length: 1.0,
            optical_depth: 1.0,
            n_z: 24,
        };
        let plain = RetrievalProtocol::default();
        let locked = RetrievalProtocol {
            locked: true,
            shelve_after: plain.t_dw + 1.2,
            release_before: plain.read_delay - plain.t_dw - 2.2,
            ..plain
        };
        let off = run_retrieval(spec, &ens, &cal, &plain, Geometry::Forward).unwrap();
        let on = run_retrieval(spec, &ens, &cal, &locked, Geometry::Forward).unwrap();
        assert!(
            (on.efficiency / off.efficiency - 1.0).abs() <= 0.05,
            "locking changed efficiency: on {} off {}",
            on.efficiency,
            off.efficiency
        );
    }

    #[test]
    fn doubling_slices_leaves_efficiency_stable() {
        let ens = quiet_ensemble();
        let cal = quiet_cal();
        let proto = RetrievalProtocol::default();
        let coarse = SlabSpec {
            length: 1.0,
            optical_depth: 1.0,
            n_z: 24,
        };
        let fine = SlabSpec {
            length: 1.0,
            optical_depth: 1.0,
            n_z: 48,
        };
        for dir in [Geometry::Forward, Geometry::Backward] {
            let a = run_retrieval(coarse, &ens, &cal, &proto, dir).unwrap();
            let b = run_retrieval(fine, &ens, &cal, &proto, dir).unwrap();
            assert!(
                (a.efficiency / b.efficiency - 1.0).abs() <= 0.02,
                "{dir:?}: 24 slices {} vs 48 slices {}",
                a.efficiency,
                b.efficiency
            );
        }
    }

    #[test]
    fn stored_grating_is_visible_and_echo_detected() {
        let ens = quiet_ensemble();
        let cal = quiet_cal();
        let spec = SlabSpec {
            length: 1.0,
            optical_depth: 1.0,
            n_z: 16,
        };
        let proto = RetrievalProtocol::default();
        let out = run_retrieval(spec, &ens, &cal, &proto, Geometry::Forward).unwrap();
        assert!(
            !out.trace.events.is_empty(),
            "no echo event found; efficiency {}",
            out.efficiency
        );
        let echo_at = out.trace.events[0].peak_time;
        let expect = out.trace.detection.expected_echo.unwrap();
        assert!(
            (echo_at - expect).abs() <= 0.25,
            "echo at {echo_at} expected {expect}"
        );
        assert!(out.store.absorbed_fraction > 0.3);
    }
}
