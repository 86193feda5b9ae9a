//! Decay-constant extraction from echo-vs-delay sweeps.
//!
//! The fit model is intensity against delay, I(t) = A exp(-2 t / tau) + C,
//! so tau is the amplitude time constant and intensities decay twice as
//! fast; every tau reported anywhere in the crate follows this convention.
//! Fitting is damped Gauss-Newton (Levenberg style) from a log-linear
//! initial guess, with optional per-point sigma weighting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least {need} points, got {have}")]
    TooFewPoints { have: usize, need: usize },
    #[error("delays must increase strictly: violation at index {index}")]
    NotIncreasing { index: usize },
    #[error("point {index}: {what} must be finite and non-negative, got {value}")]
    BadValue {
        index: usize,
        what: &'static str,
        value: f64,
    },
    #[error("split time {split} outside the sweep range [{lo}, {hi}] or a side has under 4 points")]
    SplitOutsideRange { split: f64, lo: f64, hi: f64 },
    #[error(
        "fit slid into a negative time constant (tau {tau:.4e} at iteration {iteration}, residual {residual:.4e}); data does not decay"
    )]
    NegativeTau {
        tau: f64,
        iteration: usize,
        residual: f64,
    },
}

/// One sweep sample: delay (us), echo intensity, optional uncertainty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub delay: f64,
    pub intensity: f64,
    pub sigma: Option<f64>,
}

/// An echo-intensity-versus-delay sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecaySeries {
    /// Name of the swept delay, e.g. "delta_t" or "t_lock".
    pub axis: String,
    pub points: Vec<DecayPoint>,
}

impl DecaySeries {
    /// Validate invariants: strictly increasing delays, finite non-negative
    /// intensities, positive sigmas where present.
    pub fn new(axis: impl Into<String>, points: Vec<DecayPoint>) -> Result<Self, AnalysisError> {
        if points.is_empty() {
            return Err(AnalysisError::TooFewPoints { have: 0, need: 1 });
        }
        for (index, p) in points.iter().enumerate() {
            if !p.delay.is_finite() {
                return Err(AnalysisError::BadValue {
                    index,
                    what: "delay",
                    value: p.delay,
                });
            }
            if !(p.intensity.is_finite() && p.intensity >= 0.0) {
                return Err(AnalysisError::BadValue {
                    index,
                    what: "intensity",
                    value: p.intensity,
                });
            }
            if let Some(s) = p.sigma {
                if !(s.is_finite() && s > 0.0) {
                    return Err(AnalysisError::BadValue {
                        index,
                        what: "sigma",
                        value: s,
                    });
                }
            }
            if index > 0 && p.delay <= points[index - 1].delay {
                return Err(AnalysisError::NotIncreasing { index });
            }
        }
        Ok(DecaySeries {
            axis: axis.into(),
            points,
        })
    }

    pub fn from_pairs(
        axis: impl Into<String>,
        pairs: &[(f64, f64)],
    ) -> Result<Self, AnalysisError> {
        Self::new(
            axis,
            pairs
                .iter()
                .map(|&(delay, intensity)| DecayPoint {
                    delay,
                    intensity,
                    sigma: None,
                })
                .collect(),
        )
    }

    pub fn delay_range(&self) -> (f64, f64) {
        (
            self.points.first().unwrap().delay,
            self.points.last().unwrap().delay,
        )
    }
}

/// Converged fit of I(t) = A exp(-2 t / tau) + C.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub amplitude: f64,
    /// Amplitude time constant (us); intensities decay as exp(-2t/tau).
    pub tau: f64,
    pub offset: f64,
    /// Square root of the weighted residual sum of squares.
    pub residual_norm: f64,
    /// Diagonal of the parameter covariance for (A, tau, C); the C entry is
    /// zero when the offset was not fitted.
    pub covariance_diag: [f64; 3],
    pub iterations: usize,
    /// Final over initial Jacobian-weighted residual norm; near zero at a
    /// true least-squares stationary point.
    pub gradient_ratio: f64,
}

/// Fit result distinguishing genuine decay from degenerate flat data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FitOutcome {
    Decaying(DecayFit),
    /// Constant series: reported level, nothing to fit.
    NonDecaying { level: f64 },
}

impl FitOutcome {
    pub fn decaying(&self) -> Option<&DecayFit> {
        match self {
            FitOutcome::Decaying(fit) => Some(fit),
            FitOutcome::NonDecaying { .. } => None,
        }
    }
}

/// Fast/slow decomposition from [`two_timescale_fit`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoTimescaleFit {
    pub fast: FitOutcome,
    pub slow: FitOutcome,
}

impl TwoTimescaleFit {
    /// Saturation floor: the slow side's offset, or its level when flat.
    pub fn saturation(&self) -> f64 {
        match self.slow {
            FitOutcome::Decaying(fit) => fit.offset,
            FitOutcome::NonDecaying { level } => level,
        }
    }
}

struct Design<'a> {
    t: Vec<f64>,
    y: Vec<f64>,
    /// 1/sigma^2 weights; unit when no sigmas given.
    w: Vec<f64>,
    with_offset: bool,
    _marker: std::marker::PhantomData<&'a ()>,
}

impl Design<'_> {
    fn n_params(&self) -> usize {
        if self.with_offset {
            3
        } else {
            2
        }
    }

    /// Weighted residuals y - f and the cost 0.5 sum w r^2.
    fn residuals(&self, a: f64, tau: f64, c: f64) -> (Vec<f64>, f64) {
        let mut cost = 0.0;
        let r: Vec<f64> = self
            .t
            .iter()
            .zip(&self.y)
            .zip(&self.w)
            .map(|((t, y), w)| {
                let r = y - (a * (-2.0 * t / tau).exp() + c);
                cost += 0.5 * w * r * r;
                r
            })
            .collect();
        (r, cost)
    }

    /// Normal-equation matrix JtWJ (row-major p x p) and gradient JtWr.
    fn normal_eqs(&self, a: f64, tau: f64) -> ([[f64; 3]; 3], impl Fn(&[f64]) -> [f64; 3] + '_) {
        let p = self.n_params();
        let mut jtj = [[0.0; 3]; 3];
        let mut rows: Vec<[f64; 3]> = Vec::with_capacity(self.t.len());
        for (t, w) in self.t.iter().zip(&self.w) {
            let e = (-2.0 * t / tau).exp();
            let j = [e, a * e * 2.0 * t / (tau * tau), 1.0];
            for i in 0..p {
                for k in 0..p {
                    jtj[i][k] += w * j[i] * j[k];
                }
            }
            rows.push(j);
        }
        let w = self.w.clone();
        let grad = move |r: &[f64]| {
            let mut g = [0.0; 3];
            for ((row, wi), ri) in rows.iter().zip(&w).zip(r) {
                for i in 0..3 {
                    g[i] += wi * row[i] * ri;
                }
            }
            g
        };
        (jtj, grad)
    }
}

/// Solve the symmetric p x p system M x = b by Gaussian elimination with
/// partial pivoting. Returns None when singular.
fn solve_sym(mut m: [[f64; 3]; 3], mut b: [f64; 3], p: usize) -> Option<[f64; 3]> {
    for col in 0..p {
        let pivot = (col..p).max_by(|&i, &j| {
            m[i][col]
                .abs()
                .partial_cmp(&m[j][col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..p {
            let f = m[row][col] / m[col][col];
            for k in col..p {
                m[row][k] -= f * m[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for col in (0..p).rev() {
        let mut s = b[col];
        for k in (col + 1)..p {
            s -= m[col][k] * x[k];
        }
        x[col] = s / m[col][col];
    }
    Some(x)
}

/// Log-linear starting point: regress ln(I - C0) on delay. A non-negative
/// slope is the negative-tau basin and fails here with diagnostics.
fn initial_guess(
    series: &DecaySeries,
    with_offset: bool,
) -> Result<(f64, f64, f64), AnalysisError> {
    let min_i = series
        .points
        .iter()
        .map(|p| p.intensity)
        .fold(f64::INFINITY, f64::min);
    let c0 = if with_offset { 0.95 * min_i } else { 0.0 };
    let max_excess = series
        .points
        .iter()
        .map(|p| p.intensity - c0)
        .fold(0.0f64, f64::max);
    let floor = (max_excess * 1e-9).max(1e-300);
    let (mut st, mut sy, mut stt, mut sty, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for p in &series.points {
        let y = (p.intensity - c0).max(floor).ln();
        st += p.delay;
        sy += y;
        stt += p.delay * p.delay;
        sty += p.delay * y;
        n += 1.0;
    }
    let denom = n * stt - st * st;
    let slope = if denom.abs() > 0.0 {
        (n * sty - st * sy) / denom
    } else {
        0.0
    };
    let intercept = (sy - slope * st) / n;
    if slope >= 0.0 {
        let mean = series.points.iter().map(|p| p.intensity).sum::<f64>() / n;
        let rms = (series
            .points
            .iter()
            .map(|p| (p.intensity - mean).powi(2))
            .sum::<f64>())
        .sqrt();
        return Err(AnalysisError::NegativeTau {
            tau: if slope > 0.0 { -2.0 / slope } else { f64::NEG_INFINITY },
            iteration: 0,
            residual: rms,
        });
    }
    Ok((intercept.exp(), -2.0 / slope, c0))
}

/// Least-squares fit of I(t) = A exp(-2t/tau) (+ C when `with_offset`).
///
/// Exactly constant series come back as [`FitOutcome::NonDecaying`]. Data
/// that drives tau negative (growing trends) fails with diagnostics.
pub fn fit_exp_decay(
    series: &DecaySeries,
    with_offset: bool,
) -> Result<FitOutcome, AnalysisError> {
    let n = series.points.len();
    if n < 4 {
        return Err(AnalysisError::TooFewPoints { have: n, need: 4 });
    }
    let max_i = series
        .points
        .iter()
        .map(|p| p.intensity)
        .fold(f64::NEG_INFINITY, f64::max);
    let min_i = series
        .points
        .iter()
        .map(|p| p.intensity)
        .fold(f64::INFINITY, f64::min);
    if max_i - min_i <= 1e-14 * max_i.abs().max(1e-300) {
        return Ok(FitOutcome::NonDecaying {
            level: 0.5 * (max_i + min_i),
        });
    }

    let design = Design {
        t: series.points.iter().map(|p| p.delay).collect(),
        y: series.points.iter().map(|p| p.intensity).collect(),
        w: series
            .points
            .iter()
            .map(|p| p.sigma.map_or(1.0, |s| 1.0 / (s * s)))
            .collect(),
        with_offset,
        _marker: std::marker::PhantomData,
    };
    let p = design.n_params();
    let (mut a, mut tau, mut c) = initial_guess(series, with_offset)?;
    let (mut r, mut cost) = design.residuals(a, tau, c);
    let (_, grad0) = design.normal_eqs(a, tau);
    let g0 = grad0(&r);
    let g0_norm = (g0[..p].iter().map(|g| g * g).sum::<f64>()).sqrt();

    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut g_norm = g0_norm;
    for iter in 0..200 {
        iterations = iter + 1;
        let (jtj, grad) = design.normal_eqs(a, tau);
        let g = grad(&r);
        g_norm = (g[..p].iter().map(|x| x * x).sum::<f64>()).sqrt();
        if g_norm <= 1e-12 * g0_norm.max(1e-300) {
            break;
        }
        let mut stepped = false;
        for _ in 0..40 {
            let mut damped = jtj;
            for i in 0..p {
                damped[i][i] += lambda * jtj[i][i].max(1e-300);
            }
            let Some(step) = solve_sym(damped, g, p) else {
                lambda *= 10.0;
                continue;
            };
            let (na, ntau, nc) = (a + step[0], tau + step[1], if with_offset { c + step[2] } else { c });
            if ntau <= 0.0 {
                lambda *= 10.0;
                if lambda > 1e14 {
                    return Err(AnalysisError::NegativeTau {
                        tau: ntau,
                        iteration: iterations,
                        residual: (2.0 * cost).sqrt(),
                    });
                }
                continue;
            }
            let (nr, ncost) = design.residuals(na, ntau, nc);
            if ncost <= cost {
                let rel_step = (step[..p]
                    .iter()
                    .map(|s| s * s)
                    .sum::<f64>())
                .sqrt()
                    / (1.0 + (a * a + tau * tau + c * c).sqrt());
                a = na;
                tau = ntau;
                c = nc;
                r = nr;
                cost = ncost;
                lambda = (lambda / 3.0).max(1e-14);
                stepped = true;
                if rel_step < 1e-10 {
                    iterations = iter + 1;
                    // Converged by step size; recompute the gradient below.
                    let (_, grad) = design.normal_eqs(a, tau);
                    let g = grad(&r);
                    g_norm = (g[..p].iter().map(|x| x * x).sum::<f64>()).sqrt();
                    return finish(&design, series, a, tau, c, cost, iterations, g_norm, g0_norm);
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e14 {
                // No direction improves the cost: numerical minimum.
                break;
            }
        }
        if !stepped {
            break;
        }
    }
    if tau <= 0.0 {
        return Err(AnalysisError::NegativeTau {
            tau,
            iteration: iterations,
            residual: (2.0 * cost).sqrt(),
        });
    }
    finish(&design, series, a, tau, c, cost, iterations, g_norm, g0_norm)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    design: &Design,
    series: &DecaySeries,
    a: f64,
    tau: f64,
    c: f64,
    cost: f64,
    iterations: usize,
    g_norm: f64,
    g0_norm: f64,
) -> Result<FitOutcome, AnalysisError> {
    let p = design.n_params();
    let n = series.points.len();
    let ssr = 2.0 * cost;
    let s2 = if n > p { ssr / (n - p) as f64 } else { 0.0 };
    let (jtj, _) = design.normal_eqs(a, tau);
    let mut cov = [0.0; 3];
    for i in 0..p {
        // Covariance diagonal via unit solves against the normal matrix.
        let mut e = [0.0; 3];
        e[i] = 1.0;
        if let Some(col) = solve_sym(jtj, e, p) {
            cov[i] = s2 * col[i];
        }
    }
    Ok(FitOutcome::Decaying(DecayFit {
        amplitude: a,
        tau,
        offset: c,
        residual_norm: ssr.sqrt(),
        covariance_diag: cov,
        iterations,
        gradient_ratio: g_norm / g0_norm.max(1e-300),
    }))
}

/// Independent exponential fits (with offset) on the points at or before
/// `split_time` and at or after it. The slow side's offset is the
/// saturation floor.
pub fn two_timescale_fit(
    series: &DecaySeries,
    split_time: f64,
) -> Result<TwoTimescaleFit, AnalysisError> {
    let (lo, hi) = series.delay_range();
    let fast: Vec<DecayPoint> = series
        .points
        .iter()
        .copied()
        .filter(|p| p.delay <= split_time)
        .collect();
    let slow: Vec<DecayPoint> = series
        .points
        .iter()
        .copied()
        .filter(|p| p.delay >= split_time)
        .collect();
    if !(split_time > lo && split_time < hi) || fast.len() < 4 || slow.len() < 4 {
        return Err(AnalysisError::SplitOutsideRange {
            split: split_time,
            lo,
            hi,
        });
    }
    let fast_fit = fit_exp_decay(&DecaySeries::new(series.axis.clone(), fast)?, true)?;
    let slow_fit = fit_exp_decay(&DecaySeries::new(series.axis.clone(), slow)?, true)?;
    Ok(TwoTimescaleFit {
        fast: fast_fit,
        slow: slow_fit,
    })
}
