//! Pulse algebra and protocol construction.
//!
//! A [`Pulse`] is a shaped field on one transition with a symbolic wavevector
//! and carrier label; a [`PulseSequence`] is an ordered timeline of pulses
//! plus a detection window. Builders assemble the two canonical protocols:
//!
//! * [`build_stimulated_echo`] - data D, write W, read R on the data
//!   transition; the echo is expected one write delay after the read pulse.
//! * [`build_locked_echo`] - the same with a deshelling pair B1, B2 on the
//!   control transition between W and R, which parks the excited-state half
//!   of the spectral grating in the spin shelf for the storage interval.
//!
//! The deshelling pair is checked by [`validate_locking`]: the pair areas
//! must sum to a multiple of 4 pi for the pair to be the identity map, and
//! the first area must be an odd multiple of pi so that the stored half
//! actually sits in the spin shelf (not |3>) during storage. The two
//! conditions are reported independently; sequences that violate them are
//! still buildable since violation runs are a supported experiment.
//!
//! Wavevectors are symbolic integers along the propagation axis.
//! [`phase_match`] combines the three pulse wavevectors into the echo
//! direction (k_E = -k_D + k_W + k_R) and carrier mix, and flags whether the
//! result is a physical beam direction.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::atom::Transition;

/// Sech pulses are integrated over t0 +/- this many 1/beta. The clipped area
/// fraction is 1 - (2/pi) atan(sinh(10)) ~ 5.8e-5, well under the 0.1%
/// reporting threshold enforced by pulse validation.
pub const SECH_HALF_WIDTH_OVER_BETA: f64 = 10.0;

/// Default tolerance for the deshelling-pair area conditions (radians).
pub const DEFAULT_LOCKING_TOL: f64 = 0.01 * PI;

/// Largest integer multiple searched by [`validate_locking`].
pub const LOCKING_MAX_N: i32 = 8;

#[derive(Debug, Error)]
pub enum SequenceError {
    #[error("{label:?} pulse duration must be positive and finite, got {duration}")]
    NonPositiveDuration { label: PulseLabel, duration: f64 },
    #[error("{label:?} hard pulse must have zero duration, got {duration}")]
    HardPulseDuration { label: PulseLabel, duration: f64 },
    #[error("{label:?} pulse parameter {name} must be finite (and non-negative where applicable), got {value}")]
    BadParameter {
        label: PulseLabel,
        name: &'static str,
        value: f64,
    },
    #[error("{label:?} sech window clips {fraction:.2e} of the pulse area (limit 1e-3); widen duration")]
    ExcessiveTruncation { label: PulseLabel, fraction: f64 },
    #[error("pulses {first:?} and {second:?} overlap in time")]
    Overlapping {
        first: PulseLabel,
        second: PulseLabel,
    },
    #[error("delay {name} must be non-negative, got {value}")]
    NegativeDelay { name: &'static str, value: f64 },
    #[error("ordering violation: {what}")]
    OrderingViolation { what: String },
    #[error("detection window is empty or inverted (start {start}, end {end})")]
    EmptyDetection { start: f64, end: f64 },
    #[error("detection window starts at {start} inside or before the last pulse (ends {last_pulse_end})")]
    DetectionBeforeLastPulse { start: f64, last_pulse_end: f64 },
}

/// Protocol role of a pulse.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PulseLabel {
    /// Data pulse.
    D,
    /// Write pulse, paired with D to inscribe the spectral grating.
    W,
    /// Read pulse, scatters off the grating into the echo.
    R,
    /// First deshelling pulse: moves the grating's |3> half to the spin shelf.
    B1,
    /// Second deshelling pulse: returns the shelved half to |3>.
    B2,
    Custom,
}

/// Carrier frequency label; omega1/omega2 address the data transition,
/// omega3 the control transition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CarrierLabel {
    Omega1,
    Omega2,
    Omega3,
}

/// Integer combination of the three carrier labels, as produced by the
/// four-wave-mixing frequency rule omega_E = -omega_D + omega_W + omega_R.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CarrierMix(pub [i32; 3]);

impl CarrierMix {
    pub fn from_label(label: CarrierLabel) -> Self {
        let mut c = [0; 3];
        c[label as usize] = 1;
        CarrierMix(c)
    }

    /// Some(label) when the mix is exactly one unit carrier.
    pub fn as_single(&self) -> Option<CarrierLabel> {
        match self.0 {
            [1, 0, 0] => Some(CarrierLabel::Omega1),
            [0, 1, 0] => Some(CarrierLabel::Omega2),
            [0, 0, 1] => Some(CarrierLabel::Omega3),
            _ => None,
        }
    }
}

/// Symbolic wavevector along the propagation axis: +1 is +z, -1 is -z.
/// Derived echo vectors may be any integer; physical beams are unit sized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaveVector {
    pub z: i32,
}

impl WaveVector {
    pub fn plus_z() -> Self {
        WaveVector { z: 1 }
    }

    pub fn minus_z() -> Self {
        WaveVector { z: -1 }
    }

    /// True when the vector is a unit beam direction.
    pub fn is_physical(self) -> bool {
        self.z.abs() == 1
    }
}

impl std::ops::Neg for WaveVector {
    type Output = WaveVector;
    fn neg(self) -> WaveVector {
        WaveVector { z: -self.z }
    }
}

impl std::ops::Add for WaveVector {
    type Output = WaveVector;
    fn add(self, rhs: WaveVector) -> WaveVector {
        WaveVector { z: self.z + rhs.z }
    }
}

impl std::ops::Sub for WaveVector {
    type Output = WaveVector;
    fn sub(self, rhs: WaveVector) -> WaveVector {
        WaveVector { z: self.z - rhs.z }
    }
}

/// Envelope family of a pulse.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseShape {
    /// Constant envelope omega0 across the whole duration.
    Square,
    /// omega0 * sech(beta (t - t0)), truncated to the pulse window.
    Sech { beta: f64 },
    /// Zero-duration rotation by the given area; exact, decay-free limit.
    Hard { area: f64 },
}

/// One shaped field on one transition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pulse {
    pub label: PulseLabel,
    pub transition: Transition,
    pub shape: PulseShape,
    /// Peak Rabi frequency (rad/us); unused by hard pulses.
    pub omega0: f64,
    /// Pulse center (us). All protocol delays are center-to-center.
    pub t0: f64,
    /// Full support width (us); hard pulses have zero.
    pub duration: f64,
    /// Carrier phase (radians).
    pub carrier_phase: f64,
    pub wavevector: WaveVector,
    pub carrier: CarrierLabel,
}

impl Pulse {
    /// Pulse area in radians: the time integral of the Rabi envelope
    /// (untruncated closed form for sech).
    pub fn area(&self) -> f64 {
        match self.shape {
            PulseShape::Square => self.omega0 * self.duration,
            PulseShape::Sech { beta } => PI * self.omega0 / beta,
            PulseShape::Hard { area } => area,
        }
    }

    /// Fraction of the ideal area lost to window truncation.
    pub fn clip_fraction(&self) -> f64 {
        match self.shape {
            PulseShape::Sech { beta } => {
                let half = 0.5 * beta * self.duration;
                1.0 - (2.0 / PI) * half.sinh().atan()
            }
            _ => 0.0,
        }
    }

    /// Support interval (start, end); zero length for hard pulses.
    pub fn support(&self) -> (f64, f64) {
        (self.t0 - 0.5 * self.duration, self.t0 + 0.5 * self.duration)
    }

    /// Real Rabi envelope at time t; zero outside the support window.
    pub fn envelope(&self, t: f64) -> f64 {
        let (start, end) = self.support();
        if t < start || t > end {
            return 0.0;
        }
        match self.shape {
            PulseShape::Square => self.omega0,
            PulseShape::Sech { beta } => self.omega0 / (beta * (t - self.t0)).cosh(),
            PulseShape::Hard { .. } => 0.0,
        }
    }

    pub fn is_hard(&self) -> bool {
        matches!(self.shape, PulseShape::Hard { .. })
    }

    pub fn validate(&self) -> Result<(), SequenceError> {
        let finite = [
            ("t0", self.t0),
            ("carrier_phase", self.carrier_phase),
            ("omega0", self.omega0),
        ];
        for (name, value) in finite {
            if !value.is_finite() {
                return Err(SequenceError::BadParameter {
                    label: self.label,
                    name,
                    value,
                });
            }
        }
        if self.omega0 < 0.0 {
            return Err(SequenceError::BadParameter {
                label: self.label,
                name: "omega0",
                value: self.omega0,
            });
        }
        match self.shape {
            PulseShape::Hard { area } => {
                if !area.is_finite() {
                    return Err(SequenceError::BadParameter {
                        label: self.label,
                        name: "area",
                        value: area,
                    });
                }
                if self.duration != 0.0 {
                    return Err(SequenceError::HardPulseDuration {
                        label: self.label,
                        duration: self.duration,
                    });
                }
            }
            PulseShape::Square => {
                if !(self.duration.is_finite() && self.duration > 0.0) {
                    return Err(SequenceError::NonPositiveDuration {
                        label: self.label,
                        duration: self.duration,
                    });
                }
            }
            PulseShape::Sech { beta } => {
                if !(self.duration.is_finite() && self.duration > 0.0) {
                    return Err(SequenceError::NonPositiveDuration {
                        label: self.label,
                        duration: self.duration,
                    });
                }
                if !(beta.is_finite() && beta > 0.0) {
                    return Err(SequenceError::BadParameter {
                        label: self.label,
                        name: "beta",
                        value: beta,
                    });
                }
                let fraction = self.clip_fraction();
                if fraction > 1e-3 {
                    return Err(SequenceError::ExcessiveTruncation {
                        label: self.label,
                        fraction,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Outcome of the deshelling-pair area check. `pair_identity` certifies the
/// sum condition (areas total a multiple of 4 pi, so B2 after B1 is the
/// identity map); `b1_odd_pi` certifies that B1 alone is an odd-pi pulse, so
/// the grating half is fully shelved during storage. `valid` requires both.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LockingReport {
    pub valid: bool,
    /// Matched n with |phi_b1 + phi_b2 - 4 n pi| <= tol, if any.
    pub pair_identity: Option<i32>,
    /// Matched n with |phi_b1 - (2n - 1) pi| <= tol, if any.
    pub b1_odd_pi: Option<i32>,
    /// Smallest sum-condition residual over the searched n (radians).
    pub sum_residual: f64,
    /// Smallest B1-condition residual over the searched n (radians).
    pub b1_residual: f64,
    pub tol: f64,
}

/// Check the deshelling-pair areas against both locking conditions,
/// searching integer multiples 1..=LOCKING_MAX_N.
pub fn validate_locking(phi_b1: f64, phi_b2: f64, tol: f64) -> LockingReport {
    let tol = if tol > 0.0 { tol } else { DEFAULT_LOCKING_TOL };
    let mut pair_identity = None;
    let mut b1_odd_pi = None;
    let mut sum_residual = f64::INFINITY;
    let mut b1_residual = f64::INFINITY;
    if phi_b1.is_finite() && phi_b2.is_finite() {
        for n in 1..=LOCKING_MAX_N {
            let rs = (phi_b1 + phi_b2 - 4.0 * f64::from(n) * PI).abs();
            if rs < sum_residual {
                sum_residual = rs;
                if rs <= tol {
                    pair_identity.get_or_insert(n);
                }
            }
            let rb = (phi_b1 - (2.0 * f64::from(n) - 1.0) * PI).abs();
            if rb < b1_residual {
                b1_residual = rb;
                if rb <= tol {
                    b1_odd_pi.get_or_insert(n);
                }
            }
        }
    }
    LockingReport {
        valid: pair_identity.is_some() && b1_odd_pi.is_some(),
        pair_identity,
        b1_odd_pi,
        sum_residual,
        b1_residual,
        tol,
    }
}

/// Echo direction and carrier implied by the three pulses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseMatchResult {
    pub k_echo: WaveVector,
    pub carrier_echo: CarrierMix,
    /// True when k_echo is a unit beam direction.
    pub physical: bool,
}

/// Four-wave-mixing bookkeeping: k_E = -k_D + k_W + k_R and the analogous
/// carrier combination.
pub fn phase_match(
    k_d: WaveVector,
    k_w: WaveVector,
    k_r: WaveVector,
    w_d: CarrierLabel,
    w_w: CarrierLabel,
    w_r: CarrierLabel,
) -> PhaseMatchResult {
    let k_echo = k_w + k_r - k_d;
    let mut carrier = [0i32; 3];
    carrier[w_d as usize] -= 1;
    carrier[w_w as usize] += 1;
    carrier[w_r as usize] += 1;
    PhaseMatchResult {
        k_echo,
        carrier_echo: CarrierMix(carrier),
        physical: k_echo.is_physical(),
    }
}

/// Where and in which direction the emitted field is recorded.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionWindow {
    pub start: f64,
    pub end: f64,
    pub direction: WaveVector,
    /// Predicted echo arrival, when the protocol defines one.
    pub expected_echo: Option<f64>,
}

/// Ordered timeline of pulses plus a detection window and the protocol's
/// named delays (all center-to-center).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    pub pulses: Vec<Pulse>,
    pub detection: DetectionWindow,
    /// W center minus D center.
    pub t_dw: Option<f64>,
    /// R center minus W center (unlocked protocol sweep axis).
    pub delta_t: Option<f64>,
    /// B2 center minus B1 center (locked protocol sweep axis).
    pub t_lock: Option<f64>,
    /// Deshelling-pair check attached by the locked builder; violations are
    /// a warning, not an error.
    pub locking: Option<LockingReport>,
}

impl PulseSequence {
    /// Structural checks: every pulse valid, pulses time-ordered and
    /// non-overlapping, detection window after the last pulse, named delays
    /// non-negative.
    pub fn validate(&self) -> Result<(), SequenceError> {
        for p in &self.pulses {
            p.validate()?;
        }
        for pair in self.pulses.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let same_instant = a.is_hard() && b.is_hard() && a.t0 == b.t0;
            if b.support().0 < a.support().1 - 1e-9 || same_instant {
                return Err(SequenceError::Overlapping {
                    first: a.label,
                    second: b.label,
                });
            }
        }
        if !(self.detection.start < self.detection.end) {
            return Err(SequenceError::EmptyDetection {
                start: self.detection.start,
                end: self.detection.end,
            });
        }
        let last_end = self
            .pulses
            .iter()
            .map(|p| p.support().1)
            .fold(f64::NEG_INFINITY, f64::max);
        if self.detection.start < last_end - 1e-9 {
            return Err(SequenceError::DetectionBeforeLastPulse {
                start: self.detection.start,
                last_pulse_end: last_end,
            });
        }
        let delays = [
            ("t_dw", self.t_dw),
            ("delta_t", self.delta_t),
            ("t_lock", self.t_lock),
        ];
        for (name, value) in delays {
            if let Some(v) = value {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(SequenceError::NegativeDelay { name, value: v });
                }
            }
        }
        Ok(())
    }

    /// First pulse support start; free evolution begins here.
    pub fn start_time(&self) -> f64 {
        self.pulses
            .iter()
            .map(|p| p.support().0)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Shape and area of one protocol pulse before scheduling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseSpec {
    /// Pulse area in radians.
    pub area: f64,
    pub shape: ShapeSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeSpec {
    /// Zero-duration rotation; exact and decay-free.
    Hard,
    /// Constant envelope of the given duration (us).
    Square { duration: f64 },
    /// Sech envelope of the given sharpness (1/us); the window spans
    /// +/- SECH_HALF_WIDTH_OVER_BETA / beta around the center.
    Sech { beta: f64 },
}

impl PulseSpec {
    pub fn hard(area: f64) -> Self {
        PulseSpec {
            area,
            shape: ShapeSpec::Hard,
        }
    }

    pub fn square(area: f64, duration: f64) -> Self {
        PulseSpec {
            area,
            shape: ShapeSpec::Square { duration },
        }
    }

    pub fn sech(area: f64, beta: f64) -> Self {
        PulseSpec {
            area,
            shape: ShapeSpec::Sech { beta },
        }
    }

    /// Half of the scheduled support width.
    pub fn half_extent(&self) -> f64 {
        match self.shape {
            ShapeSpec::Hard => 0.0,
            ShapeSpec::Square { duration } => 0.5 * duration,
            ShapeSpec::Sech { beta } => SECH_HALF_WIDTH_OVER_BETA / beta,
        }
    }

    fn realize(
        &self,
        label: PulseLabel,
        transition: Transition,
        t0: f64,
        wavevector: WaveVector,
        carrier: CarrierLabel,
    ) -> Pulse {
        let (shape, omega0, duration) = match self.shape {
            ShapeSpec::Hard => (PulseShape::Hard { area: self.area }, 0.0, 0.0),
            ShapeSpec::Square { duration } => {
                (PulseShape::Square, self.area / duration, duration)
            }
            ShapeSpec::Sech { beta } => (
                PulseShape::Sech { beta },
                self.area * beta / PI,
                2.0 * SECH_HALF_WIDTH_OVER_BETA / beta,
            ),
        };
        Pulse {
            label,
            transition,
            shape,
            omega0,
            t0,
            duration,
            carrier_phase: 0.0,
            wavevector,
            carrier,
        }
    }
}

fn default_half_window(t_dw: f64, read_half_extent: f64) -> f64 {
    (0.5 * t_dw).clamp(0.3, 2.0).min(t_dw - read_half_extent - 1e-6)
}

/// D at 0, W at t_dw, R one delta_t after W (bumped to keep supports
/// disjoint when delta_t is smaller than the pulse extents), forward
/// geometry, detection centered on the predicted echo at t_R + t_dw.
pub fn build_stimulated_echo(
    t_dw: f64,
    delta_t: f64,
    d: &PulseSpec,
    w: &PulseSpec,
    r: &PulseSpec,
    detection_half_width: Option<f64>,
) -> Result<PulseSequence, SequenceError> {
    if !(t_dw.is_finite() && t_dw > 0.0) {
        return Err(SequenceError::NegativeDelay {
            name: "t_dw",
            value: t_dw,
        });
    }
    if !(delta_t.is_finite() && delta_t >= 0.0) {
        return Err(SequenceError::NegativeDelay {
            name: "delta_t",
            value: delta_t,
        });
    }
    if t_dw < d.half_extent() + w.half_extent() - 1e-12 {
        return Err(SequenceError::OrderingViolation {
            what: format!(
                "t_dw = {t_dw} is shorter than the D/W half extents {} + {}",
                d.half_extent(),
                w.half_extent()
            ),
        });
    }
    let k = WaveVector::plus_z();
    let t_w = t_dw;
    let min_gap = w.half_extent() + r.half_extent() + 1e-9;
    let t_r = t_w + delta_t.max(min_gap);
    let echo = t_r + t_dw;
    let half = detection_half_width
        .unwrap_or_else(|| default_half_window(t_dw, r.half_extent()));
    if half <= 0.0 {
        return Err(SequenceError::EmptyDetection {
            start: echo,
            end: echo,
        });
    }
    let pm = phase_match(k, k, k, CarrierLabel::Omega1, CarrierLabel::Omega1, CarrierLabel::Omega1);
    let seq = PulseSequence {
        pulses: vec![
            d.realize(PulseLabel::D, Transition::Data, 0.0, k, CarrierLabel::Omega1),
            w.realize(PulseLabel::W, Transition::Data, t_w, k, CarrierLabel::Omega1),
            r.realize(PulseLabel::R, Transition::Data, t_r, k, CarrierLabel::Omega1),
        ],
        detection: DetectionWindow {
            start: echo - half,
            end: echo + half,
            direction: pm.k_echo,
            expected_echo: Some(echo),
        },
        t_dw: Some(t_dw),
        delta_t: Some(t_r - t_w),
        t_lock: None,
        locking: None,
    };
    seq.validate()?;
    Ok(seq)
}

/// Beam geometry of the locked protocol: forward reads with k_R = k_W, so
/// the echo exits along the data path; backward reads counter-propagating,
/// so the echo retraces the data path (k_E = -k_D).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    Forward,
    Backward,
}

/// Inputs for [`build_locked_echo`]; all delays center-to-center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LockedEchoSpec {
    /// W center minus D center (us).
    pub t_dw: f64,
    /// B1 center, absolute (D sits at 0).
    pub t_b1: f64,
    /// B2 center minus B1 center: the storage interval swept in experiments.
    pub t_lock: f64,
    /// R center minus B2 center.
    pub read_delay: f64,
    pub geometry: Geometry,
    pub d: PulseSpec,
    pub w: PulseSpec,
    pub r: PulseSpec,
    pub b1: PulseSpec,
    pub b2: PulseSpec,
    pub detection_half_width: Option<f64>,
    /// Tolerance handed to the deshelling-pair validator (radians).
    pub locking_tol: f64,
}

impl LockedEchoSpec {
    /// Ideal hard-pulse protocol: half-pi data pulses, a pi/3pi deshelling
    /// pair, forward geometry, read pulse 2 us after B2.
    pub fn hard_pulses(t_dw: f64, t_b1: f64, t_lock: f64) -> Self {
        LockedEchoSpec {
            t_dw,
            t_b1,
            t_lock,
            read_delay: 2.0,
            geometry: Geometry::Forward,
            d: PulseSpec::hard(0.5 * PI),
            w: PulseSpec::hard(0.5 * PI),
            r: PulseSpec::hard(0.5 * PI),
            b1: PulseSpec::hard(PI),
            b2: PulseSpec::hard(3.0 * PI),
            detection_half_width: None,
            locking_tol: DEFAULT_LOCKING_TOL,
        }
    }
}

/// Full locked sequence D, W, B1, B2, R with the deshelling-pair check
/// attached and the detection direction derived from phase matching.
pub fn build_locked_echo(spec: &LockedEchoSpec) -> Result<PulseSequence, SequenceError> {
    for (name, value) in [
        ("t_dw", spec.t_dw),
        ("t_lock", spec.t_lock),
        ("read_delay", spec.read_delay),
    ] {
        if !(value.is_finite() && value >= 0.0) {
            return Err(SequenceError::NegativeDelay { name, value });
        }
    }
    let k_data = WaveVector::plus_z();
    let k_read = match spec.geometry {
        Geometry::Forward => k_data,
        Geometry::Backward => -k_data,
    };
    let t_w = spec.t_dw;
    let t_b2 = spec.t_b1 + spec.t_lock;
    let t_r = t_b2 + spec.read_delay;
    let echo = t_r + spec.t_dw;

    let w_end = t_w + spec.w.half_extent();
    let b1_start = spec.t_b1 - spec.b1.half_extent();
    if b1_start < w_end - 1e-12 {
        return Err(SequenceError::OrderingViolation {
            what: format!("B1 (starts {b1_start}) must follow W (ends {w_end})"),
        });
    }

    let half = spec
        .detection_half_width
        .unwrap_or_else(|| default_half_window(spec.t_dw, spec.r.half_extent()));
    if half <= 0.0 {
        return Err(SequenceError::EmptyDetection {
            start: echo,
            end: echo,
        });
    }
    let pm = phase_match(
        k_data,
        k_data,
        k_read,
        CarrierLabel::Omega1,
        CarrierLabel::Omega1,
        CarrierLabel::Omega1,
    );
    let seq = PulseSequence {
        pulses: vec![
            spec.d
                .realize(PulseLabel::D, Transition::Data, 0.0, k_data, CarrierLabel::Omega1),
            spec.w
                .realize(PulseLabel::W, Transition::Data, t_w, k_data, CarrierLabel::Omega1),
            spec.b1.realize(
                PulseLabel::B1,
                Transition::Control,
                spec.t_b1,
                k_data,
                CarrierLabel::Omega3,
            ),
            spec.b2.realize(
                PulseLabel::B2,
                Transition::Control,
                t_b2,
                k_data,
                CarrierLabel::Omega3,
            ),
            spec.r
                .realize(PulseLabel::R, Transition::Data, t_r, k_read, CarrierLabel::Omega1),
        ],
        detection: DetectionWindow {
            start: echo - half,
            end: echo + half,
            direction: pm.k_echo,
            expected_echo: Some(echo),
        },
        t_dw: Some(spec.t_dw),
        delta_t: None,
        t_lock: Some(spec.t_lock),
        locking: Some(validate_locking(
            spec.b1.area,
            spec.b2.area,
            spec.locking_tol,
        )),
    };
    seq.validate()?;
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn square_area_is_omega_times_duration() {
        let spec = PulseSpec::square(0.5 * PI, 1.0);
        let p = spec.realize(
            PulseLabel::D,
            Transition::Data,
            0.0,
            WaveVector::plus_z(),
            CarrierLabel::Omega1,
        );
        assert_abs_diff_eq!(p.area(), 0.5 * PI, epsilon = 1e-12);
        assert_abs_diff_eq!(p.omega0, 0.5 * PI, epsilon = 1e-12);
    }

    #[test]
    fn sech_area_closed_form() {
        let p = Pulse {
            label: PulseLabel::Custom,
            transition: Transition::Data,
            shape: PulseShape::Sech { beta: 2.0 },
            omega0: 2.0,
            t0: 0.0,
            duration: 10.0,
            carrier_phase: 0.0,
            wavevector: WaveVector::plus_z(),
            carrier: CarrierLabel::Omega1,
        };
        assert_abs_diff_eq!(p.area(), PI, epsilon = 1e-12);
        assert!(p.clip_fraction() < 1e-4);
        p.validate().unwrap();
    }

    #[test]
    fn vanishing_duration_means_vanishing_area() {
        let spec = PulseSpec::square(0.0, 1e-9);
        let p = spec.realize(
            PulseLabel::Custom,
            Transition::Data,
            0.0,
            WaveVector::plus_z(),
            CarrierLabel::Omega1,
        );
        assert_abs_diff_eq!(p.area(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn narrow_sech_window_is_rejected() {
        let p = Pulse {
            label: PulseLabel::Custom,
            transition: Transition::Data,
            shape: PulseShape::Sech { beta: 1.0 },
            omega0: 1.0,
            t0: 0.0,
            duration: 4.0, // +/- 2/beta clips ~ 13% of the area
            carrier_phase: 0.0,
            wavevector: WaveVector::plus_z(),
            carrier: CarrierLabel::Omega1,
        };
        assert!(matches!(
            p.validate(),
            Err(SequenceError::ExcessiveTruncation { .. })
        ));
    }

    #[test]
    fn locking_accepts_the_canonical_pair() {
        let r = validate_locking(PI, 3.0 * PI, DEFAULT_LOCKING_TOL);
        assert!(r.valid);
        assert_eq!(r.pair_identity, Some(1));
        assert_eq!(r.b1_odd_pi, Some(1));
    }

    #[test]
    fn locking_rejects_pi_pi() {
        let r = validate_locking(PI, PI, DEFAULT_LOCKING_TOL);
        assert!(!r.valid);
        assert_eq!(r.pair_identity, None);
        assert_eq!(r.b1_odd_pi, Some(1));
        assert_abs_diff_eq!(r.sum_residual, 2.0 * PI, epsilon = 1e-12);
    }

    #[test]
    fn locking_accepts_three_five() {
        let r = validate_locking(3.0 * PI, 5.0 * PI, DEFAULT_LOCKING_TOL);
        assert!(r.valid);
        assert_eq!(r.pair_identity, Some(2));
        assert_eq!(r.b1_odd_pi, Some(2));
    }

    #[test]
    fn phase_match_forward_and_backward() {
        let z = WaveVector::plus_z();
        let fwd = phase_match(
            z,
            z,
            z,
            CarrierLabel::Omega1,
            CarrierLabel::Omega1,
            CarrierLabel::Omega1,
        );
        assert_eq!(fwd.k_echo, z);
        assert!(fwd.physical);
        assert_eq!(fwd.carrier_echo.as_single(), Some(CarrierLabel::Omega1));

        let bwd = phase_match(
            z,
            z,
            -z,
            CarrierLabel::Omega1,
            CarrierLabel::Omega1,
            CarrierLabel::Omega1,
        );
        assert_eq!(bwd.k_echo, -z);
        assert!(bwd.physical);
    }

    #[test]
    fn stimulated_builder_places_echo_one_write_delay_after_read() {
        let hard = PulseSpec::hard(0.5 * PI);
        let seq = build_stimulated_echo(2.0, 28.0, &hard, &hard, &hard, None).unwrap();
        assert_abs_diff_eq!(seq.pulses[2].t0, 30.0, epsilon = 1e-12);
        assert_abs_diff_eq!(seq.detection.expected_echo.unwrap(), 32.0, epsilon = 1e-12);
        seq.validate().unwrap();
    }

    #[test]
    fn zero_gap_read_follows_write_immediately() {
        let hard = PulseSpec::hard(0.5 * PI);
        let seq = build_stimulated_echo(2.0, 0.0, &hard, &hard, &hard, None).unwrap();
        let t_r = seq.pulses[2].t0;
        assert!(t_r > 2.0 && t_r < 2.0 + 1e-6);
        assert_abs_diff_eq!(
            seq.detection.expected_echo.unwrap(),
            t_r + 2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn negative_read_delay_is_rejected() {
        let hard = PulseSpec::hard(0.5 * PI);
        assert!(matches!(
            build_stimulated_echo(2.0, -1.0, &hard, &hard, &hard, None),
            Err(SequenceError::NegativeDelay { name: "delta_t", .. })
        ));
    }

    #[test]
    fn locked_builder_attaches_passing_report() {
        let seq = build_locked_echo(&LockedEchoSpec::hard_pulses(2.0, 6.0, 100.0)).unwrap();
        let report = seq.locking.unwrap();
        assert!(report.valid);
        assert_eq!(seq.pulses.len(), 5);
        // R sits read_delay after B2, echo one t_dw later.
        assert_abs_diff_eq!(seq.pulses[4].t0, 108.0, epsilon = 1e-12);
        assert_abs_diff_eq!(seq.detection.expected_echo.unwrap(), 110.0, epsilon = 1e-12);
    }

    #[test]
    fn violating_pair_builds_with_warning() {
        let mut spec = LockedEchoSpec::hard_pulses(2.0, 6.0, 50.0);
        spec.b2 = PulseSpec::hard(PI);
        let seq = build_locked_echo(&spec).unwrap();
        assert!(!seq.locking.unwrap().valid);
    }

    #[test]
    fn backward_geometry_detects_along_minus_z() {
        let mut spec = LockedEchoSpec::hard_pulses(2.0, 6.0, 50.0);
        spec.geometry = Geometry::Backward;
        let seq = build_locked_echo(&spec).unwrap();
        assert_eq!(seq.detection.direction, WaveVector::minus_z());
    }

    #[test]
    fn b1_inside_write_pulse_is_rejected() {
        let mut spec = LockedEchoSpec::hard_pulses(2.0, 2.2, 50.0);
        spec.w = PulseSpec::square(0.5 * PI, 1.0);
        assert!(matches!(
            build_locked_echo(&spec),
            Err(SequenceError::OrderingViolation { .. })
        ));
    }

    proptest! {
        /// Area is linear in omega0 for both shaped families.
        #[test]
        fn area_linear_in_omega0(omega in 0.01f64..10.0, scale in 0.1f64..10.0) {
            let mut sq = Pulse {
                label: PulseLabel::Custom,
                transition: Transition::Data,
                shape: PulseShape::Square,
                omega0: omega,
                t0: 0.0,
                duration: 1.3,
                carrier_phase: 0.0,
                wavevector: WaveVector::plus_z(),
                carrier: CarrierLabel::Omega1,
            };
            let base = sq.area();
            sq.omega0 *= scale;
            prop_assert!((sq.area() - scale * base).abs() < 1e-9 * scale * base.max(1.0));

            let mut sech = sq;
            sech.shape = PulseShape::Sech { beta: 2.0 };
            sech.omega0 = omega;
            sech.duration = 10.0;
            let base = sech.area();
            sech.omega0 *= scale;
            prop_assert!((sech.area() - scale * base).abs() < 1e-9 * scale * base.max(1.0));
        }

        /// Exact-lattice pairs keep their verdict under perturbations below
        /// half the tolerance.
        #[test]
        fn locking_verdict_is_stable(
            n1 in 1usize..=5,
            n2 in 1usize..=5,
            e1 in -0.49f64..0.49,
            e2 in -0.49f64..0.49,
        ) {
            let tol = DEFAULT_LOCKING_TOL;
            let phi1 = n1 as f64 * PI;
            let phi2 = n2 as f64 * PI;
            let clean = validate_locking(phi1, phi2, tol);
            let noisy = validate_locking(phi1 + e1 * tol, phi2 + e2 * tol, tol);
            prop_assert_eq!(clean.valid, noisy.valid);
            prop_assert_eq!(clean.pair_identity.is_some(), noisy.pair_identity.is_some());
            prop_assert_eq!(clean.b1_odd_pi.is_some(), noisy.b1_odd_pi.is_some());
        }

        /// Wavevector combination is componentwise linear.
        #[test]
        fn phase_match_is_linear(kd in -1i32..=1, kw in -1i32..=1, kr in -1i32..=1, kd2 in -1i32..=1) {
            let w = CarrierLabel::Omega1;
            let a = phase_match(WaveVector { z: kd }, WaveVector { z: kw }, WaveVector { z: kr }, w, w, w);
            let b = phase_match(WaveVector { z: kd2 }, WaveVector { z: kw }, WaveVector { z: kr }, w, w, w);
            let sum = phase_match(
                WaveVector { z: kd + kd2 },
                WaveVector { z: 2 * kw },
                WaveVector { z: 2 * kr },
                w,
                w,
                w,
            );
            prop_assert_eq!(sum.k_echo.z, a.k_echo.z + b.k_echo.z);
        }
    }
}
