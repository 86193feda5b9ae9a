//! Density-matrix dynamics of a single three-level lambda atom class.
//!
//! Basis order is (|1>, |2>, |3>): |1> is the ground level of the data
//! transition, |2> is the long-lived spin shelf, |3> is the shared optical
//! excited state. The data field drives |1>-|3>, the locking field drives
//! |2>-|3>. In the frame rotating at both carriers the Hamiltonian is
//!
//! ```text
//! H = -delta_opt |3><3| - delta_spin |2><2|
//!     + (Omega(t)/2) (e^{-i phi} |g><3| + e^{+i phi} |3><g|)
//! ```
//!
//! where |g> is the ground level of the driven transition. Relaxation enters
//! as Lindblad channels: branched |3> population decay to |1> and |2>,
//! thermal |1><->|2> exchange with a configurable equilibrium split, and pure
//! dephasing on the optical and spin coherences.
//!
//! Three evolution paths cover every need:
//!
//! * [`apply_rotation`] - exact conjugation by a hard (zero-duration) pulse;
//! * [`evolve_pulse`] - fixed-step RK4 integration of the full master
//!   equation under a shaped pulse (fixed step keeps runs bit-reproducible);
//! * [`free_evolve`] - closed-form field-free solution, exact for any
//!   duration, so second-scale storage delays cost one exponential each.
//!
//! Times are in microseconds, angular frequencies and Rabi envelopes in
//! rad/us.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sequence::{Pulse, PulseShape};

/// Complex scalar used throughout the crate.
pub type C64 = Complex64;

const CZERO: C64 = C64::new(0.0, 0.0);
/// -i, the prefactor of the coherent part of the master equation.
const MINUS_I: C64 = C64::new(0.0, -1.0);

/// Basis index of |1>, the ground level.
pub const L1: usize = 0;
/// Basis index of |2>, the spin shelf.
pub const L2: usize = 1;
/// Basis index of |3>, the optical excited state.
pub const L3: usize = 2;

type M3 = [[C64; 3]; 3];

/// Which two-level pair an optical field couples. Both include |3>.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    /// |1>-|3>, driven by the data pulses D, W, R.
    Data,
    /// |2>-|3>, driven by the deshelling (locking) pair B1, B2.
    Control,
}

impl Transition {
    /// Basis index of the transition's ground level.
    pub fn ground_index(self) -> usize {
        match self {
            Transition::Data => L1,
            Transition::Control => L2,
        }
    }
}

#[derive(Debug, Error)]
pub enum AtomError {
    #[error("{name} must be positive and finite, got {value}")]
    NonPositiveTime { name: &'static str, value: f64 },
    #[error("{name} must lie in [0, 1], got {value}")]
    FractionOutOfRange { name: &'static str, value: f64 },
    #[error(
        "negative pure {which} dephasing: 1/T2 = {t2_rate} is below the \
         population-decay floor {floor} (require T2 <= 2 T1)"
    )]
    NegativeDephasing {
        which: &'static str,
        t2_rate: f64,
        floor: f64,
    },
    #[error("integration step must be positive and finite, got {dt}")]
    BadStep { dt: f64 },
    #[error("integration step {dt} exceeds pulse duration / 50 = {max}")]
    StepTooCoarse { dt: f64, max: f64 },
    #[error("pulse envelope is not finite at t = {t}")]
    NonFiniteEnvelope { t: f64 },
    #[error("free evolution duration must be non-negative, got {duration}")]
    NegativeDuration { duration: f64 },
}

/// 3x3 complex Hermitian density matrix, basis order (|1>, |2>, |3>).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityMatrix {
    pub(crate) m: M3,
}

impl DensityMatrix {
    /// All population in |1>.
    pub fn new_ground() -> Self {
        Self::from_diagonal([1.0, 0.0, 0.0])
    }

    /// Diagonal state with the given populations (not renormalized).
    pub fn from_diagonal(p: [f64; 3]) -> Self {
        let mut m = [[CZERO; 3]; 3];
        for (i, &pi) in p.iter().enumerate() {
            m[i][i] = C64::new(pi, 0.0);
        }
        Self { m }
    }

    /// Pure state |psi><psi| from (not necessarily normalized) amplitudes.
    pub fn pure(amps: [C64; 3]) -> Self {
        let norm: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
        let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        let mut m = [[CZERO; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = amps[i] * amps[j].conj() * scale;
            }
        }
        Self { m }
    }

    /// Raw elements, row-major; the caller promises Hermiticity.
    pub fn from_elements(m: [[C64; 3]; 3]) -> Self {
        Self { m }
    }

    pub fn element(&self, i: usize, j: usize) -> C64 {
        self.m[i][j]
    }

    /// Real part of the diagonal element for the given level index.
    pub fn population(&self, level: usize) -> f64 {
        self.m[level][level].re
    }

    /// Coherence between two levels, rho_ij with i, j level indices.
    pub fn coherence(&self, i: usize, j: usize) -> C64 {
        self.m[i][j]
    }

    pub fn trace(&self) -> C64 {
        self.m[0][0] + self.m[1][1] + self.m[2][2]
    }

    /// |tr(rho) - 1|.
    pub fn trace_error(&self) -> f64 {
        (self.trace() - C64::new(1.0, 0.0)).norm()
    }

    /// max_ij |rho_ij - conj(rho_ji)|.
    pub fn hermiticity_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                worst = worst.max((self.m[i][j] - self.m[j][i].conj()).norm());
            }
        }
        worst
    }

    /// Replace rho by (rho + rho^dagger)/2 with an exactly real diagonal.
    pub fn hermitize(&mut self) {
        for i in 0..3 {
            self.m[i][i] = C64::new(self.m[i][i].re, 0.0);
            for j in (i + 1)..3 {
                let avg = (self.m[i][j] + self.m[j][i].conj()) * 0.5;
                self.m[i][j] = avg;
                self.m[j][i] = avg.conj();
            }
        }
    }

    /// Eigenvalues in ascending order, via the trigonometric closed form for
    /// 3x3 Hermitian matrices (no iteration, no allocation).
    pub fn eigenvalues(&self) -> [f64; 3] {
        // Work on the Hermitian average so roundoff asymmetry cannot produce
        // spurious imaginary parts.
        let mut h = *self;
        h.hermitize();
        let a = &h.m;
        let off = a[0][1].norm_sqr() + a[0][2].norm_sqr() + a[1][2].norm_sqr();
        let d = [a[0][0].re, a[1][1].re, a[2][2].re];
        if off == 0.0 {
            let mut eig = d;
            eig.sort_by(|x, y| x.partial_cmp(y).unwrap());
            return eig;
        }
        let q = (d[0] + d[1] + d[2]) / 3.0;
        let p2 = (d[0] - q).powi(2) + (d[1] - q).powi(2) + (d[2] - q).powi(2) + 2.0 * off;
        let p = (p2 / 6.0).sqrt();
        // B = (A - q I)/p is traceless with eigenvalues 2 cos(phi + 2k pi/3).
        let inv_p = 1.0 / p;
        let mut b = [[CZERO; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                b[i][j] = a[i][j] * inv_p;
            }
            b[i][i] -= q * inv_p;
        }
        let det_b = (b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
            - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
            + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]))
            .re;
        let r = (det_b / 2.0).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        let e1 = q + 2.0 * p * phi.cos();
        let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        let e2 = 3.0 * q - e1 - e3;
        let mut eig = [e1, e2, e3];
        eig.sort_by(|x, y| x.partial_cmp(y).unwrap());
        eig
    }

    /// Smallest eigenvalue; >= -1e-8 for any physically valid state.
    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }
}

/// Relaxation time constants and branching fractions, times in microseconds.
///
/// The defaults are the cryogenic rare-earth-ion values used by the bundled
/// scenarios: optical T1 = 160 us with full decay back to |1>, optical
/// T2 = 25 us, spin T2 = 500 us, spin T1 = 1e8 us, equal thermal split of the
/// two ground levels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelaxationRates {
    /// |3> population lifetime (us).
    pub t1_opt: f64,
    /// Fraction of |3> decay returning to |1>; the remainder lands in |2>.
    pub branch_31: f64,
    /// |1>-|3> coherence lifetime (us).
    pub t2_opt: f64,
    /// |1>-|2> coherence lifetime (us).
    pub t2_spin: f64,
    /// |1><->|2> population equilibration time (us).
    pub t1_spin: f64,
    /// Equilibrium fraction rho_22/(rho_11 + rho_22).
    pub spin_equilibrium: f64,
}

impl Default for RelaxationRates {
    fn default() -> Self {
        Self {
            t1_opt: 160.0,
            branch_31: 1.0,
            t2_opt: 25.0,
            t2_spin: 500.0,
            t1_spin: 1.0e8,
            spin_equilibrium: 0.5,
        }
    }
}

impl RelaxationRates {
    /// Rates slower than 1e-12/us on every channel; isolates coherent
    /// dynamics in tests and oracles.
    pub fn negligible() -> Self {
        Self {
            t1_opt: 1.0e12,
            branch_31: 1.0,
            t2_opt: 1.0e12,
            t2_spin: 1.0e12,
            t1_spin: 1.0e12,
            spin_equilibrium: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), AtomError> {
        let times = [
            ("t1_opt", self.t1_opt),
            ("t2_opt", self.t2_opt),
            ("t2_spin", self.t2_spin),
            ("t1_spin", self.t1_spin),
        ];
        for (name, value) in times {
            if !(value.is_finite() && value > 0.0) {
                return Err(AtomError::NonPositiveTime { name, value });
            }
        }
        let fractions = [
            ("branch_31", self.branch_31),
            ("spin_equilibrium", self.spin_equilibrium),
        ];
        for (name, value) in fractions {
            if !(0.0..=1.0).contains(&value) || !value.is_finite() {
                return Err(AtomError::FractionOutOfRange { name, value });
            }
        }
        // Pure dephasing rates 1/T2 - 1/(2 T1) must be representable as
        // Lindblad channels, i.e. non-negative.
        if 1.0 / self.t2_opt < 0.5 / self.t1_opt {
            return Err(AtomError::NegativeDephasing {
                which: "optical",
                t2_rate: 1.0 / self.t2_opt,
                floor: 0.5 / self.t1_opt,
            });
        }
        if 1.0 / self.t2_spin < 0.5 / self.t1_spin {
            return Err(AtomError::NegativeDephasing {
                which: "spin",
                t2_rate: 1.0 / self.t2_spin,
                floor: 0.5 / self.t1_spin,
            });
        }
        Ok(())
    }

    /// Validate and expand into per-channel rates.
    pub fn channels(&self) -> Result<DecayChannels, AtomError> {
        self.validate()?;
        Ok(DecayChannels::new(self))
    }
}

/// Lindblad channel rates derived from [`RelaxationRates`], all in 1/us.
///
/// The coherence decay rates are the exact totals implied by the population
/// and pure-dephasing channels:
///
/// ```text
/// r31 = gamma3/2 + g_up/2 + deph_opt               (= 1/T2_opt + g_up/2)
/// r21 = (g_up + g_dn)/2 + deph_spin                (= 1/T2_spin)
/// r32 = gamma3/2 + g_dn/2 + deph_opt + deph_spin
/// ```
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecayChannels {
    /// Total |3> population decay rate, 1/t1_opt.
    pub gamma3: f64,
    /// |3> -> |1> population rate.
    pub g31: f64,
    /// |3> -> |2> population rate.
    pub g32: f64,
    /// Thermal |1> -> |2> rate.
    pub g_up: f64,
    /// Thermal |2> -> |1> rate.
    pub g_dn: f64,
    /// Pure optical dephasing rate.
    pub deph_opt: f64,
    /// Pure spin dephasing rate.
    pub deph_spin: f64,
    /// Total rho_31 decay rate.
    pub r31: f64,
    /// Total rho_21 decay rate.
    pub r21: f64,
    /// Total rho_32 decay rate.
    pub r32: f64,
    /// Equilibrium fraction rho_22/(rho_11 + rho_22).
    pub eps: f64,
}

impl DecayChannels {
    fn new(r: &RelaxationRates) -> Self {
        let gamma3 = 1.0 / r.t1_opt;
        let g31 = r.branch_31 * gamma3;
        let g32 = gamma3 - g31;
        let r_spin = 1.0 / r.t1_spin;
        let g_up = r.spin_equilibrium * r_spin;
        let g_dn = r_spin - g_up;
        let deph_opt = 1.0 / r.t2_opt - 0.5 * gamma3;
        let deph_spin = 1.0 / r.t2_spin - 0.5 * r_spin;
        Self {
            gamma3,
            g31,
            g32,
            g_up,
            g_dn,
            deph_opt,
            deph_spin,
            r31: 0.5 * gamma3 + 0.5 * g_up + deph_opt,
            r21: 0.5 * (g_up + g_dn) + deph_spin,
            r32: 0.5 * gamma3 + 0.5 * g_dn + deph_opt + deph_spin,
            eps: r.spin_equilibrium,
        }
    }
}

/// Static detunings of one atom class, rad/us.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AtomDetuning {
    /// |3> offset from the optical carrier.
    pub delta_opt: f64,
    /// |2> offset from the nominal spin splitting.
    pub delta_spin: f64,
}

/// Conjugate the state by the hard-pulse unitary
/// U = exp(-i (area/2) (cos(phase) sigma_x + sin(phase) sigma_y)) acting on
/// the driven pair; the spectator level is untouched in amplitude and its
/// coherences transform accordingly. Exact and decay-free (zero duration).
pub fn apply_rotation(
    state: &DensityMatrix,
    transition: Transition,
    area: f64,
    phase: f64,
) -> DensityMatrix {
    let g = transition.ground_index();
    let c = (0.5 * area).cos();
    let s = (0.5 * area).sin();
    let mut u = [[CZERO; 3]; 3];
    for (i, row) in u.iter_mut().enumerate() {
        row[i] = C64::new(1.0, 0.0);
    }
    u[g][g] = C64::new(c, 0.0);
    u[L3][L3] = C64::new(c, 0.0);
    u[g][L3] = MINUS_I * C64::from_polar(s, -phase);
    u[L3][g] = MINUS_I * C64::from_polar(s, phase);

    // out = U rho U^dagger
    let mut t = [[CZERO; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = CZERO;
            for k in 0..3 {
                acc += u[i][k] * state.m[k][j];
            }
            t[i][j] = acc;
        }
    }
    let mut out = [[CZERO; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = CZERO;
            for k in 0..3 {
                acc += t[i][k] * u[j][k].conj();
            }
            out[i][j] = acc;
        }
    }
    DensityMatrix { m: out }
}

/// Exact field-free solution of the master equation for any duration.
///
/// Coherences pick up their detuning phases and decay at the total rates
/// r31/r21/r32; |3> population decays at gamma3 with branched refill of the
/// two ground levels; the ground populations then equilibrate toward the
/// spin_equilibrium split at rate 1/t1_spin. The trace is preserved exactly
/// (the diagonal is rebuilt from the analytic solution), and tiny imaginary
/// parts left on the diagonal by a preceding integration are discarded.
pub fn free_evolve(
    state: &DensityMatrix,
    duration: f64,
    det: AtomDetuning,
    ch: &DecayChannels,
) -> Result<DensityMatrix, AtomError> {
    if !duration.is_finite() || duration < 0.0 {
        return Err(AtomError::NegativeDuration { duration });
    }
    if duration == 0.0 {
        return Ok(*state);
    }
    let t = duration;
    let p1 = state.m[0][0].re;
    let p2 = state.m[1][1].re;
    let p3 = state.m[2][2].re;

    let decay3 = (-ch.gamma3 * t).exp();
    let p3_t = p3 * decay3;
    // s = p1 + p2 grows by exactly what |3> loses: trace preserved exactly.
    let s_t = (p1 + p2) + (p3 - p3_t);

    // w = eps p1 - (1 - eps) p2 obeys dw/dt = -w/t1_spin + c_w p3(t).
    let r_spin = ch.g_up + ch.g_dn;
    let c_w = ch.eps * ch.g31 - (1.0 - ch.eps) * ch.g32;
    let w0 = ch.eps * p1 - (1.0 - ch.eps) * p2;
    let decay_s = (-r_spin * t).exp();
    let forced = if (r_spin - ch.gamma3).abs() <= 1e-12 * r_spin.max(ch.gamma3) {
        // Degenerate-rate limit of (e^{-gamma3 t} - e^{-t/t1_spin})/(r - gamma3).
        t * decay3
    } else {
        (decay3 - decay_s) / (r_spin - ch.gamma3)
    };
    let w_t = w0 * decay_s + c_w * p3 * forced;
    let p1_t = (1.0 - ch.eps) * s_t + w_t;
    let p2_t = ch.eps * s_t - w_t;

    let c21 = C64::from_polar((-ch.r21 * t).exp(), det.delta_spin * t);
    let c31 = C64::from_polar((-ch.r31 * t).exp(), det.delta_opt * t);
    let c32 = C64::from_polar((-ch.r32 * t).exp(), (det.delta_opt - det.delta_spin) * t);

    let mut m = [[CZERO; 3]; 3];
    m[0][0] = C64::new(p1_t, 0.0);
    m[1][1] = C64::new(p2_t, 0.0);
    m[2][2] = C64::new(p3_t, 0.0);
    m[1][0] = state.m[1][0] * c21;
    m[0][1] = m[1][0].conj();
    m[2][0] = state.m[2][0] * c31;
    m[0][2] = m[2][0].conj();
    m[2][1] = state.m[2][1] * c32;
    m[1][2] = m[2][1].conj();
    Ok(DensityMatrix { m })
}

/// Full master-equation right-hand side with the drive folded in.
/// `half_drive` is Omega_c(t)/2 where Omega_c is the complex Rabi envelope
/// (carrier phase included), coupling <g|H|3> = half_drive.
fn lindblad_rhs(m: &M3, det: AtomDetuning, ch: &DecayChannels, g: usize, half_drive: C64) -> M3 {
    let d = [0.0, -det.delta_spin, -det.delta_opt];
    let r = [
        [0.0, ch.r21, ch.r31],
        [ch.r21, 0.0, ch.r32],
        [ch.r31, ch.r32, 0.0],
    ];
    let h = half_drive;
    let hc = half_drive.conj();
    let mut out = [[CZERO; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            // Commutator [H, rho], expanded over H's sparsity pattern.
            let mut c = m[i][j] * (d[i] - d[j]);
            if i == g {
                c += h * m[L3][j];
            }
            if i == L3 {
                c += hc * m[g][j];
            }
            if j == L3 {
                c -= m[i][g] * h;
            }
            if j == g {
                c -= m[i][L3] * hc;
            }
            let mut dm = MINUS_I * c;
            if i != j {
                dm -= m[i][j] * r[i][j];
            }
            out[i][j] = dm;
        }
    }
    // Population exchange from the jump operators. Each line moves weight
    // between diagonal entries only, so the right-hand side stays traceless
    // and RK4 conserves the trace to roundoff regardless of step size.
    out[0][0] += m[2][2] * ch.g31 + m[1][1] * ch.g_dn - m[0][0] * ch.g_up;
    out[1][1] += m[2][2] * ch.g32 + m[0][0] * ch.g_up - m[1][1] * ch.g_dn;
    out[2][2] -= m[2][2] * ch.gamma3;
    out
}

fn mat_axpy(base: &M3, a: f64, x: &M3) -> M3 {
    let mut out = *base;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] += x[i][j] * a;
        }
    }
    out
}

/// One classical RK4 step of the driven master equation.
///
/// `drive` holds the complex Rabi envelope Omega_c(t) = Omega(t) e^{-i phi}
/// sampled at the step start, midpoint, and end; the propagation layer feeds
/// locally interpolated fields through the same entry point.
pub fn rk4_step(
    state: &DensityMatrix,
    det: AtomDetuning,
    ch: &DecayChannels,
    transition: Transition,
    drive: (C64, C64, C64),
    dt: f64,
) -> DensityMatrix {
    let g = transition.ground_index();
    let m = &state.m;
    let k1 = lindblad_rhs(m, det, ch, g, drive.0 * 0.5);
    let m2 = mat_axpy(m, 0.5 * dt, &k1);
    let k2 = lindblad_rhs(&m2, det, ch, g, drive.1 * 0.5);
    let m3 = mat_axpy(m, 0.5 * dt, &k2);
    let k3 = lindblad_rhs(&m3, det, ch, g, drive.1 * 0.5);
    let m4 = mat_axpy(m, dt, &k3);
    let k4 = lindblad_rhs(&m4, det, ch, g, drive.2 * 0.5);
    let sixth = dt / 6.0;
    let mut out = *m;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] += (k1[i][j] + (k2[i][j] + k3[i][j]) * 2.0 + k4[i][j]) * sixth;
        }
    }
    DensityMatrix { m: out }
}

/// Integrate the state through one shaped pulse with fixed-step RK4.
///
/// `dt` is the requested maximum step; the actual step divides the pulse
/// support evenly. Hard pulses delegate to [`apply_rotation`] (their
/// zero-duration limit is exact). The result is hermitized to scrub
/// integrator roundoff.
pub fn evolve_pulse(
    state: &DensityMatrix,
    pulse: &Pulse,
    det: AtomDetuning,
    ch: &DecayChannels,
    dt: f64,
) -> Result<DensityMatrix, AtomError> {
    if let PulseShape::Hard { area } = pulse.shape {
        return Ok(apply_rotation(
            state,
            pulse.transition,
            area,
            pulse.carrier_phase,
        ));
    }
    if !dt.is_finite() || dt <= 0.0 {
        return Err(AtomError::BadStep { dt });
    }
    let max_dt = pulse.duration / 50.0;
    // Resolution floor: fewer than 50 steps across a pulse is rejected.
    if dt > max_dt * (1.0 + 1e-12) {
        return Err(AtomError::StepTooCoarse { dt, max: max_dt });
    }
    let (t_start, t_end) = pulse.support();
    let span = t_end - t_start;
    let n = (span / dt).ceil().max(1.0) as usize;
    let h = span / n as f64;
    let carrier = C64::from_polar(1.0, -pulse.carrier_phase);
    let mut rho = *state;
    for k in 0..n {
        let t0 = t_start + h * k as f64;
        // Pin the last stage to the exact support end: accumulated rounding
        // can land an ulp outside, where the envelope cuts off.
        let t1 = if k + 1 == n { t_end } else { t0 + h };
        let e0 = pulse.envelope(t0);
        let em = pulse.envelope(0.5 * (t0 + t1));
        let e1 = pulse.envelope(t1);
        if !(e0.is_finite() && em.is_finite() && e1.is_finite()) {
            return Err(AtomError::NonFiniteEnvelope { t: t0 });
        }
        let drive = (carrier * e0, carrier * em, carrier * e1);
        rho = rk4_step(&rho, det, ch, pulse.transition, drive, h);
    }
    rho.hermitize();
    Ok(rho)
}
