//! Experiment configuration: schema, validation, and content hashing.
//!
//! Configs are TOML or JSON (chosen by file extension). Every table rejects
//! unknown keys so typos fail loudly instead of silently using defaults.
//! The content hash covers everything that affects results (including the
//! effective seed) and excludes the output directory, so identical physics
//! lands in identically named artifacts wherever they are written.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use echolock::atom::RelaxationRates;
use echolock::ensemble::{Ensemble, LineProfile, LineShape, LineSpec};
use echolock::propagation::{RetrievalProtocol, SlabSpec};
use echolock::sequence::{
    build_locked_echo, build_stimulated_echo, Geometry, LockedEchoSpec, PulseSpec,
    DEFAULT_LOCKING_TOL,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Unlocked three-pulse sweep of the storage delay; fits the optical
    /// population lifetime.
    Fig2a,
    /// Locked sweep of the shelved interval with a two-timescale fit; the
    /// long scale tracks the spin population lifetime.
    Fig2bc,
    /// Locked sweep through an absorbing slab with backward retrieval and a
    /// forward reference point.
    Fig3,
    /// Whatever the sweep section says: delta_t, t_lock, or depth.
    Custom,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Scenario::Fig2a => "fig2a",
            Scenario::Fig2bc => "fig2bc",
            Scenario::Fig3 => "fig3",
            Scenario::Custom => "custom",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometryConfig {
    Forward,
    Backward,
}

impl From<GeometryConfig> for Geometry {
    fn from(g: GeometryConfig) -> Self {
        match g {
            GeometryConfig::Forward => Geometry::Forward,
            GeometryConfig::Backward => Geometry::Backward,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatesConfig {
    /// Excited-state population lifetime (us).
    pub t1_opt: f64,
    /// Optical coherence lifetime (us).
    pub t2_opt: f64,
    /// Spin population lifetime (us).
    pub t1_spin: f64,
    /// Spin coherence lifetime (us).
    pub t2_spin: f64,
    /// Fraction of excited-state decay returning to the lower ground level.
    pub branch_31: f64,
    /// Equilibrium population fraction of the upper ground level.
    pub spin_equilibrium: f64,
}

impl From<RatesConfig> for RelaxationRates {
    fn from(r: RatesConfig) -> Self {
        RelaxationRates {
            t1_opt: r.t1_opt,
            t2_opt: r.t2_opt,
            t1_spin: r.t1_spin,
            t2_spin: r.t2_spin,
            branch_31: r.branch_31,
            spin_equilibrium: r.spin_equilibrium,
        }
    }
}

fn default_spin_classes() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Optical inhomogeneous full width at half maximum (rad/us).
    pub optical_width: f64,
    /// Number of optical detuning classes.
    pub optical_classes: usize,
    /// Spin inhomogeneous full width at half maximum (rad/us); 0 for a
    /// single spin class.
    #[serde(default)]
    pub spin_width: f64,
    #[serde(default = "default_spin_classes")]
    pub spin_classes: usize,
}

impl GridConfig {
    pub fn line_shape(&self) -> LineShape {
        LineShape {
            optical: LineSpec {
                profile: LineProfile::Gaussian,
                width: self.optical_width,
                n: self.optical_classes,
            },
            spin: LineSpec {
                profile: LineProfile::Gaussian,
                width: self.spin_width,
                n: self.spin_classes,
            },
        }
    }
}

const fn default_t_dw() -> f64 {
    2.0
}
const fn default_t_b1() -> f64 {
    4.0
}
const fn default_read_delay() -> f64 {
    4.0
}
const fn default_overlap() -> f64 {
    1.0
}
const fn default_half_pi() -> f64 {
    PI / 2.0
}
const fn default_pi() -> f64 {
    PI
}
const fn default_three_pi() -> f64 {
    3.0 * PI
}
const fn default_d_duration() -> f64 {
    0.5
}
const fn default_w_duration() -> f64 {
    0.7
}
const fn default_r_duration() -> f64 {
    0.7
}
const fn default_shelve_after() -> f64 {
    3.2
}
const fn default_release_before() -> f64 {
    3.8
}
const fn default_window_half() -> f64 {
    1.0
}
const fn default_geometry() -> GeometryConfig {
    GeometryConfig::Forward
}

/// Protocol timing and pulse parameters. Thin-medium scenarios use hard
/// pulses placed by `t_dw`, `t_b1`, the swept delay, and `read_delay`
/// (read minus deshelling release). Slab scenarios use the shaped-pulse
/// fields (durations, shelve/release offsets, detection half width).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfig {
    #[serde(default = "default_t_dw")]
    pub t_dw: f64,
    /// First deshelling pulse center, absolute (data pulse at 0); thin
    /// locked protocol only.
    #[serde(default = "default_t_b1")]
    pub t_b1: f64,
    /// Read center minus the second deshelling pulse center (thin locked
    /// protocol only).
    #[serde(default = "default_read_delay")]
    pub read_delay: f64,
    /// Fraction of the ensemble addressed by the deshelling beams.
    #[serde(default = "default_overlap")]
    pub mode_overlap: f64,
    #[serde(default = "default_geometry")]
    pub geometry: GeometryConfig,
    #[serde(default = "default_half_pi")]
    pub d_area: f64,
    #[serde(default = "default_half_pi")]
    pub w_area: f64,
    #[serde(default = "default_half_pi")]
    pub r_area: f64,
    #[serde(default = "default_pi")]
    pub b1_area: f64,
    #[serde(default = "default_three_pi")]
    pub b2_area: f64,
    #[serde(default = "default_d_duration")]
    pub d_duration: f64,
    #[serde(default = "default_w_duration")]
    pub w_duration: f64,
    #[serde(default = "default_r_duration")]
    pub r_duration: f64,
    /// First deshelling pulse delay after the write pulse center (slab
    /// protocol only).
    #[serde(default = "default_shelve_after")]
    pub shelve_after: f64,
    /// Second deshelling pulse lead before the read pulse center (slab
    /// protocol only).
    #[serde(default = "default_release_before")]
    pub release_before: f64,
    /// Detection window half width around the expected echo (slab protocol
    /// only).
    #[serde(default = "default_window_half")]
    pub window_half: f64,
}

impl SequenceConfig {
    pub fn locked_spec(&self, t_lock: f64) -> LockedEchoSpec {
        LockedEchoSpec {
            t_dw: self.t_dw,
            t_b1: self.t_b1,
            t_lock,
            read_delay: self.read_delay,
            geometry: self.geometry.into(),
            d: PulseSpec::hard(self.d_area),
            w: PulseSpec::hard(self.w_area),
            r: PulseSpec::hard(self.r_area),
            b1: PulseSpec::hard(self.b1_area),
            b2: PulseSpec::hard(self.b2_area),
            detection_half_width: None,
            locking_tol: DEFAULT_LOCKING_TOL,
        }
    }

    /// Unlocked slab protocol for depth sweeps: pulse parameters from the
    /// config, storage timing from the safe defaults.
    pub fn depth_protocol(&self) -> RetrievalProtocol {
        RetrievalProtocol {
            data_area: self.d_area,
            write_area: self.w_area,
            read_area: self.r_area,
            data_duration: self.d_duration,
            write_duration: self.w_duration,
            read_duration: self.r_duration,
            t_dw: self.t_dw,
            window_half: self.window_half,
            ..RetrievalProtocol::default()
        }
    }

    /// Slab protocol for one swept lock span. The read delay is derived so
    /// the span between the deshelling pulses equals `t_lock` exactly.
    pub fn retrieval_protocol(&self, t_lock: f64) -> RetrievalProtocol {
        RetrievalProtocol {
            data_area: self.d_area,
            write_area: self.w_area,
            read_area: self.r_area,
            data_duration: self.d_duration,
            write_duration: self.w_duration,
            read_duration: self.r_duration,
            t_dw: self.t_dw,
            read_delay: t_lock + self.shelve_after + self.release_before,
            window_half: self.window_half,
            locked: true,
            shelve_after: self.shelve_after,
            release_before: self.release_before,
        }
    }
}

fn default_n_z() -> usize {
    echolock::propagation::DEFAULT_SLICES
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlabConfig {
    /// Slab length (mm).
    pub length: f64,
    /// Total optical depth at line center.
    pub optical_depth: f64,
    #[serde(default = "default_n_z")]
    pub n_z: usize,
}

impl From<SlabConfig> for SlabSpec {
    fn from(s: SlabConfig) -> Self {
        SlabSpec {
            length: s.length,
            optical_depth: s.optical_depth,
            n_z: s.n_z,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Read delay after the write pulse (unlocked protocol).
    DeltaT,
    /// Interval between the deshelling pulses (locked protocols).
    TLock,
    /// Slab optical depth (runs both retrieval directions per point).
    Depth,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            SweepAxis::DeltaT => "delta_t",
            SweepAxis::TLock => "t_lock",
            SweepAxis::Depth => "depth",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Boundary between the fast and slow fit ranges (same unit as the
    /// axis); enables the two-timescale fit.
    #[serde(default)]
    pub split: Option<f64>,
}

fn default_jitter_sigma() -> f64 {
    0.02
}
fn default_jitter_repeats() -> u32 {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub seed: u64,
    /// Average several area-jittered repeats per sweep point (all drawn
    /// deterministically from the seed).
    #[serde(default)]
    pub jitter: bool,
    #[serde(default = "default_jitter_sigma")]
    pub jitter_sigma: f64,
    #[serde(default = "default_jitter_repeats")]
    pub jitter_repeats: u32,
    /// Output directory; the --out flag overrides it. Not part of the
    /// content hash.
    #[serde(default)]
    pub output: Option<String>,
    pub rates: RatesConfig,
    pub grid: GridConfig,
    pub sequence: SequenceConfig,
    #[serde(default)]
    pub slab: Option<SlabConfig>,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn rates(&self) -> RelaxationRates {
        self.rates.into()
    }

    /// Twelve hex characters of the SHA-256 of the canonical (JSON) form,
    /// with the output directory blanked.
    pub fn content_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = None;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut hex = String::with_capacity(12);
        for byte in digest.iter().take(6) {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }

    /// Full schema-plus-physics check without running anything. Returns
    /// every problem found, one message per line, each tagged with its
    /// category.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut errors = Vec::new();

        if let Err(e) = self.rates().validate() {
            errors.push(format!("physics: {e}"));
        }
        match Ensemble::new(self.grid.line_shape(), self.rates(), self.sequence.mode_overlap) {
            Ok(_) => {}
            Err(e) => errors.push(format!("physics: {e}")),
        }
        if let Some(slab) = self.slab {
            if let Err(e) = SlabSpec::from(slab).validate() {
                errors.push(format!("physics: {e}"));
            }
        }

        let sweep = &self.sweep;
        if sweep.values.is_empty() {
            errors.push("sweep: values must not be empty".into());
        }
        if sweep.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            errors.push("sweep: values must be finite and non-negative".into());
        }
        if sweep.values.windows(2).any(|w| w[1] <= w[0]) {
            errors.push("sweep: values must be strictly increasing".into());
        }
        if let Some(split) = sweep.split {
            let inside = sweep
                .values
                .first()
                .zip(sweep.values.last())
                .is_some_and(|(lo, hi)| split > *lo && split < *hi);
            if !inside {
                errors.push("sweep: split must lie strictly inside the swept values".into());
            }
        }

        match self.scenario {
            Scenario::Fig2a => {
                if sweep.axis != SweepAxis::DeltaT {
                    errors.push("sweep: this scenario sweeps delta_t".into());
                }
            }
            Scenario::Fig2bc => {
                if sweep.axis != SweepAxis::TLock {
                    errors.push("sweep: this scenario sweeps t_lock".into());
                }
                if sweep.split.is_none() {
                    errors.push("sweep: this scenario needs a split for the two-timescale fit".into());
                }
            }
            Scenario::Fig3 => {
                if sweep.axis != SweepAxis::TLock {
                    errors.push("sweep: this scenario sweeps t_lock".into());
                }
                if sweep.split.is_none() {
                    errors.push("sweep: this scenario needs a split for the two-timescale fit".into());
                }
                if self.slab.is_none() {
                    errors.push("slab: this scenario propagates through a slab; add a [slab] table".into());
                }
                if self.sequence.geometry != GeometryConfig::Backward {
                    errors.push("sequence: this scenario retrieves backward; set geometry = \"backward\"".into());
                }
            }
            Scenario::Custom => {
                if sweep.axis == SweepAxis::Depth && self.slab.is_none() {
                    errors.push("slab: a depth sweep needs a [slab] table as the template".into());
                }
            }
        }

        // Dry-build the protocol at the first sweep value so scheduling
        // violations are caught before any run.
        if errors.is_empty() {
            if let Some(&first) = sweep.values.first() {
                let probe = match (self.scenario, sweep.axis) {
                    (Scenario::Fig2a, _) | (Scenario::Custom, SweepAxis::DeltaT) => {
                        build_stimulated_echo(
                            self.sequence.t_dw,
                            first,
                            &PulseSpec::hard(self.sequence.d_area),
                            &PulseSpec::hard(self.sequence.w_area),
                            &PulseSpec::hard(self.sequence.r_area),
                            None,
                        )
                        .map(|_| ())
                        .map_err(|e| e.to_string())
                    }
                    (Scenario::Fig2bc, _) | (Scenario::Custom, SweepAxis::TLock) => {
                        build_locked_echo(&self.sequence.locked_spec(first))
                            .map(|_| ())
                            .map_err(|e| e.to_string())
                    }
                    (Scenario::Fig3, _) => self
                        .sequence
                        .retrieval_protocol(first)
                        .validate()
                        .map_err(|e| e.to_string()),
                    (Scenario::Custom, SweepAxis::Depth) => self
                        .sequence
                        .depth_protocol()
                        .validate()
                        .map_err(|e| e.to_string()),
                };
                if let Err(e) = probe {
                    errors.push(format!("sequence: {e}"));
                }
            }
        }

        if !(self.jitter_sigma.is_finite() && (0.0..0.5).contains(&self.jitter_sigma)) {
            errors.push("jitter: jitter_sigma must be in [0, 0.5)".into());
        }
        if self.jitter && self.jitter_repeats == 0 {
            errors.push("jitter: jitter_repeats must be positive".into());
        }

        // The direct rate check and the ensemble dry-build can surface the
        // same message; report it once.
        errors.dedup();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }
}

/// Parse a config file, TOML or JSON by extension.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| vec![format!("io: cannot read {}: {e}", path.display())])?;
    let is_json = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text).map_err(|e| vec![format!("schema: {e}")])
    } else {
        toml::from_str(&text).map_err(|e| vec![format!("schema: {e}")])
    }
}
