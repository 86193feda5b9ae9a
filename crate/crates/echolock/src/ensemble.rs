//! Detuning-grid ensemble: runs a pulse sequence over a grid of atom
//! classes, forms the macroscopic polarization in the detection window, and
//! inspects spectral population gratings.
//!
//! The grid is the outer product of an optical and a spin detuning axis,
//! each a fixed symmetric quadrature (uniform abscissas, profile weights) so
//! results are deterministic. Imperfect spatial overlap of the deshelling
//! beams is modeled by two atom banks: a covered bank that sees every pulse
//! and a bypass bank that skips control-transition pulses; the banks are
//! recombined by coverage weight at emission.
//!
//! After the last pulse nothing drives the atoms, so the detection-window
//! polarization is evaluated in closed form: each class contributes its
//! optical coherence at the window start times exp((i delta - r31) dt).
//! Storage delays of seconds therefore cost the same as microseconds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atom::{
    evolve_pulse, free_evolve, AtomDetuning, AtomError, DecayChannels, DensityMatrix,
    RelaxationRates, Transition, C64, L1, L2, L3,
};
use crate::sequence::{DetectionWindow, Pulse, PulseLabel, PulseSequence, SequenceError};

/// Default spacing of the emitted-polarization time grid (us).
pub const DEFAULT_TRACE_STEP: f64 = 0.02;

/// Minimum optical classes whenever the optical line has nonzero width;
/// coarser grids alias the pulse bandwidth and fake rephasing.
pub const MIN_OPTICAL_CLASSES: usize = 64;

/// A detected echo must top the trace noise floor by this factor.
pub const ECHO_FLOOR_FACTOR: f64 = 5.0;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error(transparent)]
    Atom(#[from] AtomError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error("{axis} line width must be non-negative and finite, got {width}")]
    BadLineWidth { axis: &'static str, width: f64 },
    #[error("{axis} grid needs at least {min} classes for a broadened line, got {n}")]
    GridTooCoarse {
        axis: &'static str,
        n: usize,
        min: usize,
    },
    #[error("mode overlap must lie in [0, 1], got {value}")]
    BadOverlap { value: f64 },
    #[error("trace step must be positive and finite, got {value}")]
    BadTraceStep { value: f64 },
}

/// Spectral profile of one detuning axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineProfile {
    Gaussian,
    Uniform,
}

/// One detuning axis: profile, width, and class count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LineSpec {
    pub profile: LineProfile,
    /// Full width at half maximum for Gaussian, full span for uniform
    /// (rad/us). Zero collapses the axis to a single resonant class.
    pub width: f64,
    /// Number of classes; bumped to the next odd value so the line center
    /// is always sampled.
    pub n: usize,
}

impl Default for LineSpec {
    fn default() -> Self {
        LineSpec {
            profile: LineProfile::Gaussian,
            width: 4.0 * std::f64::consts::PI,
            n: 257,
        }
    }
}

impl LineSpec {
    pub fn single_class() -> Self {
        LineSpec {
            profile: LineProfile::Gaussian,
            width: 0.0,
            n: 1,
        }
    }
}

/// Optical and spin inhomogeneous lines.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LineShape {
    pub optical: LineSpec,
    pub spin: LineSpec,
}

impl Default for LineShape {
    fn default() -> Self {
        LineShape {
            optical: LineSpec::default(),
            spin: LineSpec {
                profile: LineProfile::Gaussian,
                width: 0.06 * std::f64::consts::PI,
                n: 17,
            },
        }
    }
}

/// Symmetric quadrature of one detuning axis: abscissas and normalized
/// weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DetuningGrid {
    pub deltas: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Convert a Gaussian full width at half maximum to its standard deviation.
pub fn fwhm_to_sigma(fwhm: f64) -> f64 {
    fwhm / (8.0 * std::f64::consts::LN_2).sqrt()
}

impl DetuningGrid {
    /// Build the quadrature for one axis. Gaussian lines are sampled
    /// uniformly over +/- 3 sigma with profile weights; uniform lines over
    /// +/- width/2 with equal weights. Weights are normalized to sum to 1.
    pub fn from_spec(spec: &LineSpec, axis: &'static str) -> Result<Self, EnsembleError> {
        if !(spec.width.is_finite() && spec.width >= 0.0) {
            return Err(EnsembleError::BadLineWidth {
                axis,
                width: spec.width,
            });
        }
        if spec.width == 0.0 || spec.n <= 1 {
            return Ok(DetuningGrid {
                deltas: vec![0.0],
                weights: vec![1.0],
            });
        }
        let n = if spec.n % 2 == 0 { spec.n + 1 } else { spec.n }.max(3);
        let half_span = match spec.profile {
            LineProfile::Gaussian => 3.0 * fwhm_to_sigma(spec.width),
            LineProfile::Uniform => 0.5 * spec.width,
        };
        let step = 2.0 * half_span / (n - 1) as f64;
        let mid = (n - 1) / 2;
        // Abscissas from the center outward so the grid is exactly
        // symmetric in floating point.
        let mut deltas = vec![0.0; n];
        for k in 1..=mid {
            let d = k as f64 * step;
            deltas[mid + k] = d;
            deltas[mid - k] = -d;
        }
        let mut weights: Vec<f64> = match spec.profile {
            LineProfile::Gaussian => {
                let sigma = fwhm_to_sigma(spec.width);
                deltas
                    .iter()
                    .map(|d| (-0.5 * (d / sigma).powi(2)).exp())
                    .collect()
            }
            LineProfile::Uniform => vec![1.0; n],
        };
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        Ok(DetuningGrid { deltas, weights })
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }
}

/// One atom class: a detuning pair and its quadrature weight.
#[derive(Clone, Copy, Debug)]
pub struct AtomClass {
    pub detuning: AtomDetuning,
    pub weight: f64,
}

/// Coverage bank: what fraction of atoms it holds and whether they see
/// control-transition (deshelling) pulses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankSpec {
    pub coverage: f64,
    pub sees_control: bool,
}

/// Per-class density matrices for every bank at one instant.
#[derive(Clone, Debug)]
pub struct EnsembleState {
    pub time: f64,
    pub banks: Vec<BankState>,
}

#[derive(Clone, Debug)]
pub struct BankState {
    pub spec: BankSpec,
    /// One matrix per ensemble class, in class order.
    pub states: Vec<DensityMatrix>,
}

/// Snapshot of the ensemble right after one pulse's support ends.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub pulse_index: usize,
    pub after: PulseLabel,
    pub state: EnsembleState,
}

/// One detected emission event.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EchoEvent {
    pub peak_time: f64,
    /// |P| at the peak sample.
    pub peak_amplitude: f64,
    /// Trapezoidal integral of |P(t)|^2 over the search window.
    pub integrated_intensity: f64,
    /// Integrated intensity over the run's data-pulse reference, when the
    /// sequence has a shaped data pulse to reference against.
    pub efficiency: Option<f64>,
}

/// Macroscopic polarization over the detection window.
#[derive(Clone, Debug)]
pub struct EchoTrace {
    pub times: Vec<f64>,
    pub polarization: Vec<C64>,
    pub detection: DetectionWindow,
    /// Events found around the window's expected echo time, if any.
    pub events: Vec<EchoEvent>,
    /// Time integral of the squared data-pulse Rabi envelope, used as the
    /// efficiency denominator; None when D is a hard pulse or absent.
    pub data_reference: Option<f64>,
}

impl EchoTrace {
    /// Largest |P| sample with its time over [start, end].
    pub fn max_abs_in(&self, start: f64, end: f64) -> Option<(f64, f64)> {
        let mut best: Option<(f64, f64)> = None;
        for (t, p) in self.times.iter().zip(&self.polarization) {
            if *t < start || *t > end {
                continue;
            }
            let a = p.norm();
            if best.map_or(true, |(_, b)| a > b) {
                best = Some((*t, a));
            }
        }
        best
    }

    /// Find the echo as a local maximum of |P| inside
    /// [expected - half_window, expected + half_window]. The peak must rise
    /// at least [`ECHO_FLOOR_FACTOR`] above the window's noise floor (the
    /// mean of its lowest-quartile samples) and sit strictly inside the
    /// window, so a smooth decaying tail does not register. Returns None
    /// when no such peak exists; that outcome is distinct from a zero-height
    /// trace sample.
    pub fn detect_echo(&self, expected: f64, half_window: f64) -> Option<EchoEvent> {
        let lo = expected - half_window;
        let hi = expected + half_window;
        let idx: Vec<usize> = (0..self.times.len())
            .filter(|&k| self.times[k] >= lo && self.times[k] <= hi)
            .collect();
        if idx.len() < 3 {
            return None;
        }
        let amps: Vec<f64> = idx.iter().map(|&k| self.polarization[k].norm()).collect();
        let mut peak_at = 0;
        for (j, a) in amps.iter().enumerate() {
            if *a > amps[peak_at] {
                peak_at = j;
            }
        }
        let mut sorted = amps.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let quartile = (sorted.len() / 4).max(1);
        let floor = sorted[..quartile].iter().sum::<f64>() / quartile as f64;
        let peak = amps[peak_at];
        let interior = peak_at != 0 && peak_at != amps.len() - 1;
        if !(interior && peak > 1e-14 && peak >= ECHO_FLOOR_FACTOR * floor) {
            return None;
        }
        let mut integrated = 0.0;
        for j in 1..idx.len() {
            let dt = self.times[idx[j]] - self.times[idx[j - 1]];
            integrated += 0.5 * dt * (amps[j].powi(2) + amps[j - 1].powi(2));
        }
        Some(EchoEvent {
            peak_time: self.times[idx[peak_at]],
            peak_amplitude: peak,
            integrated_intensity: integrated,
            efficiency: self.data_reference.map(|r| integrated / r),
        })
    }
}

/// Everything a sequence run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub trace: EchoTrace,
    /// Post-pulse snapshots, populated when requested in [`TraceOptions`].
    pub snapshots: Vec<Snapshot>,
    /// Ensemble state at the detection-window start.
    pub final_state: EnsembleState,
}

/// Knobs for [`Ensemble::run`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceOptions {
    /// Output-grid spacing in the detection window (us).
    pub trace_step: f64,
    /// Record an [`EnsembleState`] snapshot after every pulse.
    pub record_snapshots: bool,
}

impl Default for TraceOptions {
    fn default() -> Self {
        TraceOptions {
            trace_step: DEFAULT_TRACE_STEP,
            record_snapshots: false,
        }
    }
}

/// Per-optical-detuning populations, spin axis and banks collapsed by
/// weight, plus the grating diagnostics.
#[derive(Clone, Debug)]
pub struct PopulationSpectrum {
    pub detunings: Vec<f64>,
    pub p11: Vec<f64>,
    pub p22: Vec<f64>,
    pub p33: Vec<f64>,
    pub time: f64,
}

impl PopulationSpectrum {
    /// Largest |p11 + p33 - 1| over the line: the gratings in the ground
    /// and excited level mirror each other exactly while the spin shelf is
    /// empty and branching returns decay to the ground level.
    pub fn opposition_residual(&self) -> f64 {
        self.p11
            .iter()
            .zip(&self.p33)
            .map(|(a, b)| (a + b - 1.0).abs())
            .fold(0.0, f64::max)
    }

    fn mean_removed(values: &[f64]) -> Vec<f64> {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        values.iter().map(|v| v - mean).collect()
    }

    /// Absolute difference of total modulation depth in the ground and
    /// excited level, sum over classes of |mean-removed population|. Zero
    /// when the two gratings carry equal and opposite modulation.
    pub fn modulation_balance(&self) -> f64 {
        let m11: f64 = Self::mean_removed(&self.p11).iter().map(|v| v.abs()).sum();
        let m33: f64 = Self::mean_removed(&self.p33).iter().map(|v| v.abs()).sum();
        (m11 - m33).abs()
    }

    /// Largest pointwise |mean-removed p11 + mean-removed p33|: the strict
    /// form of the grating-opposition check, baseline-independent.
    pub fn modulation_opposition(&self) -> f64 {
        let m11 = Self::mean_removed(&self.p11);
        let m33 = Self::mean_removed(&self.p33);
        m11.iter()
            .zip(&m33)
            .map(|(a, b)| (a + b).abs())
            .fold(0.0, f64::max)
    }

    /// Peak modulation depth of the excited-level grating.
    pub fn grating_depth(&self) -> f64 {
        Self::mean_removed(&self.p33)
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max)
    }

    /// Estimate the grating period along the detuning axis from the zero
    /// crossings of the mean-removed excited-level population. None when
    /// fewer than three crossings exist.
    pub fn grating_period(&self) -> Option<f64> {
        let m33 = Self::mean_removed(&self.p33);
        let mut crossings = Vec::new();
        for k in 1..m33.len() {
            let (a, b) = (m33[k - 1], m33[k]);
            if a * b >= 0.0 {
                continue;
            }
            let frac = a / (a - b);
            crossings
                .push(self.detunings[k - 1] + frac * (self.detunings[k] - self.detunings[k - 1]));
        }
        if crossings.len() < 3 {
            return None;
        }
        let span = crossings.last().unwrap() - crossings.first().unwrap();
        let mean_spacing = span / (crossings.len() - 1) as f64;
        Some(2.0 * mean_spacing)
    }
}

/// The atom-class grid plus shared rates and bank structure.
#[derive(Clone, Debug)]
pub struct Ensemble {
    line: LineShape,
    optical: DetuningGrid,
    classes: Vec<AtomClass>,
    rates: RelaxationRates,
    channels: DecayChannels,
    banks: Vec<BankSpec>,
    mode_overlap: f64,
    /// Largest |delta| across both axes, used to pick pulse substeps.
    delta_scale: f64,
}

impl Ensemble {
    /// Build the class grid as the outer product of the two axes.
    /// `mode_overlap` is the covered-atom fraction: 1 puts every atom in a
    /// single bank that sees all pulses; smaller values add a bypass bank
    /// of weight 1 - overlap that skips control-transition pulses.
    pub fn new(
        line: LineShape,
        rates: RelaxationRates,
        mode_overlap: f64,
    ) -> Result<Self, EnsembleError> {
        rates.validate()?;
        if !(mode_overlap.is_finite() && (0.0..=1.0).contains(&mode_overlap)) {
            return Err(EnsembleError::BadOverlap {
                value: mode_overlap,
            });
        }
        let optical = DetuningGrid::from_spec(&line.optical, "optical")?;
        let spin = DetuningGrid::from_spec(&line.spin, "spin")?;
        if line.optical.width > 0.0 && optical.len() < MIN_OPTICAL_CLASSES {
            return Err(EnsembleError::GridTooCoarse {
                axis: "optical",
                n: optical.len(),
                min: MIN_OPTICAL_CLASSES,
            });
        }
        let mut classes = Vec::with_capacity(optical.len() * spin.len());
        for (do_, wo) in optical.deltas.iter().zip(&optical.weights) {
            for (ds, ws) in spin.deltas.iter().zip(&spin.weights) {
                classes.push(AtomClass {
                    detuning: AtomDetuning {
                        delta_opt: *do_,
                        delta_spin: *ds,
                    },
                    weight: wo * ws,
                });
            }
        }
        let banks = if mode_overlap >= 1.0 {
            vec![BankSpec {
                coverage: 1.0,
                sees_control: true,
            }]
        } else if mode_overlap <= 0.0 {
            vec![BankSpec {
                coverage: 1.0,
                sees_control: false,
            }]
        } else {
            vec![
                BankSpec {
                    coverage: mode_overlap,
                    sees_control: true,
                },
                BankSpec {
                    coverage: 1.0 - mode_overlap,
                    sees_control: false,
                },
            ]
        };
        let delta_scale = optical.deltas.last().unwrap().abs() + spin.deltas.last().unwrap().abs();
        let channels = rates.channels()?;
        Ok(Ensemble {
            line,
            optical,
            classes,
            rates,
            channels,
            banks,
            mode_overlap,
            delta_scale,
        })
    }

    pub fn classes(&self) -> &[AtomClass] {
        &self.classes
    }

    pub fn banks(&self) -> &[BankSpec] {
        &self.banks
    }

    pub fn line(&self) -> &LineShape {
        &self.line
    }

    pub fn rates(&self) -> &RelaxationRates {
        &self.rates
    }

    pub fn channels(&self) -> DecayChannels {
        self.channels
    }

    pub fn mode_overlap(&self) -> f64 {
        self.mode_overlap
    }

    /// Everything in the ground level.
    pub fn initial_state(&self) -> EnsembleState {
        EnsembleState {
            time: 0.0,
            banks: self
                .banks
                .iter()
                .map(|spec| BankState {
                    spec: *spec,
                    states: vec![DensityMatrix::new_ground(); self.classes.len()],
                })
                .collect(),
        }
    }

    /// Integration substep for one shaped pulse: resolve both the envelope
    /// and the fastest detuning beat.
    fn pulse_step(&self, pulse: &Pulse) -> f64 {
        let rate = pulse.omega0 + self.delta_scale;
        let envelope_step = pulse.duration / 200.0;
        if rate > 0.0 {
            envelope_step.min(0.25 / rate)
        } else {
            envelope_step
        }
    }

    /// Run the full timeline and form the detection-window polarization
    /// P(t) = sum over banks and classes of coverage * weight * rho31(t),
    /// with rho31 continued analytically from the window start.
    pub fn run(
        &self,
        seq: &PulseSequence,
        opts: &TraceOptions,
    ) -> Result<RunOutput, EnsembleError> {
        seq.validate()?;
        if !(opts.trace_step.is_finite() && opts.trace_step > 0.0) {
            return Err(EnsembleError::BadTraceStep {
                value: opts.trace_step,
            });
        }
        let window = seq.detection;
        let start = seq.start_time();
        let steps: Vec<f64> = seq.pulses.iter().map(|p| self.pulse_step(p)).collect();

        struct ClassResult {
            /// coverage * weight * rho31 at the window start.
            amp: C64,
            delta_opt: f64,
            state: DensityMatrix,
            snapshots: Vec<DensityMatrix>,
        }

        let jobs: Vec<(usize, usize)> = (0..self.banks.len())
            .flat_map(|b| (0..self.classes.len()).map(move |c| (b, c)))
            .collect();
        let results: Vec<ClassResult> = jobs
            .par_iter()
            .map(|&(b, c)| -> Result<ClassResult, EnsembleError> {
                let bank = &self.banks[b];
                let class = &self.classes[c];
                let det = class.detuning;
                let mut state = DensityMatrix::new_ground();
                let mut t = start;
                let mut snapshots = Vec::new();
                for (p, dt) in seq.pulses.iter().zip(&steps) {
                    let (s, e) = p.support();
                    state = free_evolve(&state, s - t, det, &self.channels)?;
                    let skipped = !bank.sees_control && p.transition == Transition::Control;
                    state = if skipped {
                        free_evolve(&state, e - s, det, &self.channels)?
                    } else {
                        evolve_pulse(&state, p, det, &self.channels, *dt)?
                    };
                    t = e;
                    if opts.record_snapshots {
                        snapshots.push(state);
                    }
                }
                state = free_evolve(&state, window.start - t, det, &self.channels)?;
                let rho31 = state.element(L3, L1);
                Ok(ClassResult {
                    amp: rho31 * (bank.coverage * class.weight),
                    delta_opt: det.delta_opt,
                    state,
                    snapshots,
                })
            })
            .collect::<Result<_, _>>()?;

        let n_t = ((window.end - window.start) / opts.trace_step).floor() as usize + 1;
        let times: Vec<f64> = (0..n_t)
            .map(|k| window.start + k as f64 * opts.trace_step)
            .collect();
        let r31 = self.channels.r31;
        // Summation stays in job order inside each time sample, so the
        // trace is bitwise identical for any worker count.
        let polarization: Vec<C64> = times
            .par_iter()
            .map(|t| {
                let dt = t - window.start;
                let damp = (-r31 * dt).exp();
                results
                    .iter()
                    .map(|r| r.amp * C64::from_polar(damp, r.delta_opt * dt))
                    .sum()
            })
            .collect();

        let mut trace = EchoTrace {
            times,
            polarization,
            detection: window,
            events: Vec::new(),
            data_reference: data_reference(seq),
        };
        if let Some(expected) = window.expected_echo {
            let half = 0.5 * (window.end - window.start);
            if let Some(event) = trace.detect_echo(expected, half) {
                trace.events.push(event);
            }
        }

        let snapshots = if opts.record_snapshots {
            (0..seq.pulses.len())
                .map(|p_idx| Snapshot {
                    pulse_index: p_idx,
                    after: seq.pulses[p_idx].label,
                    state: EnsembleState {
                        time: seq.pulses[p_idx].support().1,
                        banks: self
                            .banks
                            .iter()
                            .enumerate()
                            .map(|(b, spec)| BankState {
                                spec: *spec,
                                states: (0..self.classes.len())
                                    .map(|c| {
                                        results[b * self.classes.len() + c].snapshots[p_idx]
                                    })
                                    .collect(),
                            })
                            .collect(),
                    },
                })
                .collect()
        } else {
            Vec::new()
        };
        let final_state = EnsembleState {
            time: window.start,
            banks: self
                .banks
                .iter()
                .enumerate()
                .map(|(b, spec)| BankState {
                    spec: *spec,
                    states: (0..self.classes.len())
                        .map(|c| results[b * self.classes.len() + c].state)
                        .collect(),
                })
                .collect(),
        };
        Ok(RunOutput {
            trace,
            snapshots,
            final_state,
        })
    }

    /// Collapse a state to populations versus optical detuning: spin axis
    /// and banks are averaged with their weights, each optical class
    /// normalized to unit total weight.
    pub fn population_spectrum(&self, state: &EnsembleState) -> PopulationSpectrum {
        let n_opt = self.optical.len();
        let n_spin = self.classes.len() / n_opt;
        let mut p11 = vec![0.0; n_opt];
        let mut p22 = vec![0.0; n_opt];
        let mut p33 = vec![0.0; n_opt];
        for bank in &state.banks {
            for i in 0..n_opt {
                let opt_weight = self.optical.weights[i];
                for j in 0..n_spin {
                    let c = i * n_spin + j;
                    // Per-node averages need the spin weight only; the
                    // optical weight cancels in the normalization.
                    let w = bank.spec.coverage * self.classes[c].weight / opt_weight;
                    let m = &bank.states[c];
                    p11[i] += w * m.population(L1);
                    p22[i] += w * m.population(L2);
                    p33[i] += w * m.population(L3);
                }
            }
        }
        PopulationSpectrum {
            detunings: self.optical.deltas.clone(),
            p11,
            p22,
            p33,
            time: state.time,
        }
    }
}

/// Efficiency denominator: integral of the squared data-pulse Rabi
/// envelope. Hard pulses have no finite envelope, so no reference.
fn data_reference(seq: &PulseSequence) -> Option<f64> {
    let d = seq.pulses.iter().find(|p| p.label == PulseLabel::D)?;
    match d.shape {
        crate::sequence::PulseShape::Square => Some(d.omega0.powi(2) * d.duration),
        crate::sequence::PulseShape::Sech { beta } => {
            // Integral of omega0^2 sech^2 = omega0^2 * 2 tanh(beta T/2)/beta.
            Some(d.omega0.powi(2) * 2.0 * (0.5 * beta * d.duration).tanh() / beta)
        }
        crate::sequence::PulseShape::Hard { .. } => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::{build_stimulated_echo, PulseSpec};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn hard_half_pi() -> PulseSpec {
        PulseSpec::hard(0.5 * PI)
    }

    fn frozen() -> RelaxationRates {
        RelaxationRates::negligible()
    }

    #[test]
    fn gaussian_grid_is_odd_symmetric_normalized() {
        let grid = DetuningGrid::from_spec(&LineSpec::default(), "optical").unwrap();
        assert_eq!(grid.len() % 2, 1);
        assert_abs_diff_eq!(grid.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let mid = grid.len() / 2;
        assert_eq!(grid.deltas[mid], 0.0);
        for k in 0..grid.len() {
            assert_abs_diff_eq!(
                grid.deltas[k] + grid.deltas[grid.len() - 1 - k],
                0.0,
                epsilon = 0.0
            );
            assert!(grid.weights[k] >= 0.0);
        }
    }

    #[test]
    fn zero_width_line_collapses_to_one_class() {
        let grid = DetuningGrid::from_spec(&LineSpec::single_class(), "optical").unwrap();
        assert_eq!(grid.deltas, vec![0.0]);
        assert_eq!(grid.weights, vec![1.0]);
    }

    #[test]
    fn coarse_broadened_grid_is_rejected() {
        let line = LineShape {
            optical: LineSpec {
                n: 31,
                ..LineSpec::default()
            },
            spin: LineSpec::single_class(),
        };
        assert!(matches!(
            Ensemble::new(line, frozen(), 1.0),
            Err(EnsembleError::GridTooCoarse { .. })
        ));
    }

    #[test]
    fn stimulated_echo_peaks_one_write_delay_after_read() {
        let seq = build_stimulated_echo(
            2.0,
            28.0,
            &hard_half_pi(),
            &hard_half_pi(),
            &hard_half_pi(),
            None,
        )
        .unwrap();
        let ens = Ensemble::new(LineShape::default(), frozen(), 1.0).unwrap();
        let out = ens.run(&seq, &TraceOptions::default()).unwrap();
        assert_eq!(out.trace.events.len(), 1);
        let event = out.trace.events[0];
        assert!((event.peak_time - 32.0).abs() <= DEFAULT_TRACE_STEP + 1e-12);
        // Three ideal half-pi pulses rephase a quarter of the initial
        // coherence; the counter-rotating grating term is fully dephased.
        assert_abs_diff_eq!(event.peak_amplitude, 0.25, epsilon = 1e-3);
    }

    #[test]
    fn single_class_shows_no_echo() {
        let seq = build_stimulated_echo(
            2.0,
            28.0,
            &hard_half_pi(),
            &hard_half_pi(),
            &hard_half_pi(),
            None,
        )
        .unwrap();
        let line = LineShape {
            optical: LineSpec::single_class(),
            spin: LineSpec::single_class(),
        };
        let ens = Ensemble::new(line, frozen(), 1.0).unwrap();
        let out = ens.run(&seq, &TraceOptions::default()).unwrap();
        assert!(out.trace.events.is_empty());
        assert!(out
            .trace
            .detect_echo(32.0, 1.0)
            .is_none());
    }

    #[test]
    fn lone_data_pulse_rings_down_within_the_line_fourier_time() {
        // FID after a single half-pi pulse: |P| starts at half the maximum
        // coherence and collapses on the inverse linewidth scale.
        let d = PulseSpec::hard(0.5 * PI);
        let pulse = d.realize_for_tests();
        let seq = PulseSequence {
            pulses: vec![pulse],
            detection: DetectionWindow {
                start: 0.0,
                end: 1.5,
                direction: crate::sequence::WaveVector::plus_z(),
                expected_echo: None,
            },
            t_dw: None,
            delta_t: None,
            t_lock: None,
            locking: None,
        };
        let ens = Ensemble::new(LineShape::default(), frozen(), 1.0).unwrap();
        let out = ens.run(&seq, &TraceOptions::default()).unwrap();
        let first = out.trace.polarization[0].norm();
        assert_abs_diff_eq!(first, 0.5, epsilon = 1e-6);
        let sigma = fwhm_to_sigma(LineSpec::default().width);
        let k_late = (1.0 / sigma / DEFAULT_TRACE_STEP) as usize * 4;
        assert!(out.trace.polarization[k_late].norm() < 0.02 * first);
        assert!(out.trace.events.is_empty());
    }

    #[test]
    fn two_pulse_grating_opposes_and_has_fourier_period() {
        let t_dw = 2.0;
        let seq = build_stimulated_echo(
            t_dw,
            28.0,
            &hard_half_pi(),
            &hard_half_pi(),
            &hard_half_pi(),
            None,
        )
        .unwrap();
        let ens = Ensemble::new(LineShape::default(), frozen(), 1.0).unwrap();
        let opts = TraceOptions {
            record_snapshots: true,
            ..TraceOptions::default()
        };
        let out = ens.run(&seq, &opts).unwrap();
        let after_w = &out.snapshots[1];
        assert_eq!(after_w.after, PulseLabel::W);
        let spec = ens.population_spectrum(&after_w.state);
        assert!(spec.opposition_residual() <= 1e-9);
        assert!(spec.modulation_balance() <= 1e-9 * spec.p33.len() as f64);
        assert!(spec.modulation_opposition() <= 1e-9);
        let period = spec.grating_period().unwrap();
        let expected = 2.0 * PI / t_dw;
        assert!((period - expected).abs() <= 0.05 * expected);
        // Resonant classes are fully inverted by the in-phase pulse pair.
        let mid = spec.detunings.len() / 2;
        assert_abs_diff_eq!(spec.p33[mid], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn deshelling_pulse_moves_grating_to_spin_shelf() {
        let mut spec = crate::sequence::LockedEchoSpec::hard_pulses(2.0, 4.0, 30.0);
        spec.detection_half_width = Some(1.0);
        let seq = crate::sequence::build_locked_echo(&spec).unwrap();
        let ens = Ensemble::new(LineShape::default(), frozen(), 1.0).unwrap();
        let opts = TraceOptions {
            record_snapshots: true,
            ..TraceOptions::default()
        };
        let out = ens.run(&seq, &opts).unwrap();
        let before = ens.population_spectrum(&out.snapshots[1].state);
        let after_b1 = &out.snapshots[2];
        assert_eq!(after_b1.after, PulseLabel::B1);
        let after = ens.population_spectrum(&after_b1.state);
        let p33_max = after.p33.iter().fold(0.0f64, |a, b| a.max(*b));
        assert!(p33_max <= 1e-9, "excited level should be emptied");
        // The modulation depth moved intact into the spin shelf.
        let depth_22: f64 = PopulationSpectrum::mean_removed(&after.p22)
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        assert_abs_diff_eq!(depth_22, before.grating_depth(), epsilon = 1e-9);
    }

    #[test]
    fn ground_ensemble_spectrum_is_flat() {
        let ens = Ensemble::new(LineShape::default(), frozen(), 0.9).unwrap();
        let spec = ens.population_spectrum(&ens.initial_state());
        for i in 0..spec.p11.len() {
            assert_abs_diff_eq!(spec.p11[i], 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(spec.p22[i], 0.0, epsilon = 1e-15);
            assert_abs_diff_eq!(spec.p33[i], 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn locked_intensity_follows_spin_lifetime() {
        // Stored-grating readout after storage T scales as exp(-T/T1_spin)
        // in amplitude; compare two storage times a full lifetime apart.
        let mut rates = RelaxationRates::negligible();
        rates.t1_spin = 100.0;
        // Lifetime-limited spin coherence keeps the dephasing floor at zero.
        rates.t2_spin = 200.0;
        rates.spin_equilibrium = 0.5;
        let run_at = |t_lock: f64| {
            let mut spec = crate::sequence::LockedEchoSpec::hard_pulses(2.0, 4.0, t_lock);
            // Keep t_R - t_W away from 2 t_dw: there the doubly conjugated
            // data coherence rephases on top of the stimulated echo and
            // interferes, and it only survives short storage times.
            spec.read_delay = 4.0;
            let seq = crate::sequence::build_locked_echo(&spec).unwrap();
            let ens = Ensemble::new(LineShape::default(), rates, 1.0).unwrap();
            let out = ens.run(&seq, &TraceOptions::default()).unwrap();
            out.trace.events[0].peak_amplitude.powi(2)
        };
        let i0 = run_at(0.01);
        let i1 = run_at(100.01);
        let ratio = i1 / i0;
        let expected = (-2.0f64).exp();
        assert!(
            (ratio / expected - 1.0).abs() <= 0.05,
            "ratio {ratio} vs {expected}"
        );
    }

    #[test]
    fn weak_data_pulse_responds_linearly() {
        let run_with = |area: f64| {
            let seq = build_stimulated_echo(
                2.0,
                20.0,
                &PulseSpec::hard(area),
                &hard_half_pi(),
                &hard_half_pi(),
                None,
            )
            .unwrap();
            let ens = Ensemble::new(LineShape::default(), frozen(), 1.0).unwrap();
            let out = ens.run(&seq, &TraceOptions::default()).unwrap();
            out.trace.events[0].peak_amplitude
        };
        let full = run_with(0.1);
        let half = run_with(0.05);
        assert!(
            (full / half / 2.0 - 1.0).abs() <= 0.02,
            "halving a weak data pulse should halve the echo"
        );
    }

    #[test]
    fn trace_is_identical_for_any_worker_count() {
        let seq = build_stimulated_echo(
            1.0,
            10.0,
            &hard_half_pi(),
            &hard_half_pi(),
            &hard_half_pi(),
            None,
        )
        .unwrap();
        let ens = Ensemble::new(LineShape::default(), RelaxationRates::default(), 0.9).unwrap();
        let run_with_threads = |n: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .unwrap();
            pool.install(|| ens.run(&seq, &TraceOptions::default()).unwrap())
        };
        let a = run_with_threads(1);
        let b = run_with_threads(4);
        assert_eq!(a.trace.times.len(), b.trace.times.len());
        for (x, y) in a.trace.polarization.iter().zip(&b.trace.polarization) {
            assert!(x.re.to_bits() == y.re.to_bits() && x.im.to_bits() == y.im.to_bits());
        }
    }

    impl PulseSpec {
        fn realize_for_tests(&self) -> Pulse {
            use crate::sequence::{CarrierLabel, PulseShape, WaveVector};
            Pulse {
                label: PulseLabel::D,
                transition: Transition::Data,
                shape: PulseShape::Hard { area: self.area },
                omega0: 0.0,
                t0: 0.0,
                duration: 0.0,
                carrier_phase: 0.0,
                wavevector: WaveVector::plus_z(),
                carrier: CarrierLabel::Omega1,
            }
        }
    }
}
