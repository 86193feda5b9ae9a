//! Simulation core for optically locked stimulated photon echoes in a
//! three-level lambda ensemble.
//!
//! The crate is organized bottom-up:
//!
//! * [`atom`] - density-matrix dynamics of a single atom class: hard
//!   rotations, pulsed Lindblad evolution (fixed-step RK4), and closed-form
//!   free evolution so storage delays of seconds cost nothing.
//! * [`sequence`] - pulse shapes and areas, the deshelling-pair (locking)
//!   validator, symbolic phase matching, and builders for the canonical
//!   three-pulse and locked echo protocols.
//! * [`ensemble`] - a detuning grid of atom classes, macroscopic
//!   polarization, spectral-grating inspection, and echo detection.
//! * [`propagation`] - a one-dimensional two-direction slab that absorbs the
//!   data pulse and retrieves the echo forward or backward, quantifying
//!   reabsorption against phase-conjugate retrieval.
//! * [`analysis`] - exponential decay fitting of echo-vs-delay sweeps.
//!
//! Units are microseconds for time, rad/us for angular frequencies and Rabi
//! envelopes, and millimeters for propagation length. All dynamics are
//! deterministic: grids are fixed quadratures, integrators use fixed steps,
//! and ensemble reductions run in index order regardless of thread count.

pub mod analysis;
pub mod atom;
pub mod ensemble;
pub mod propagation;
pub mod sequence;

pub use analysis::{fit_exp_decay, two_timescale_fit, DecayFit, DecaySeries, FitOutcome};
pub use propagation::{
    calibrate_coupling, efficiency_vs_depth, run_retrieval, CalibrationRecord, DepthSweep,
    FieldEnvelope, MediumSlab, RetrievalProtocol, SlabSpec,
};
pub use atom::{AtomDetuning, DecayChannels, DensityMatrix, RelaxationRates, Transition, C64};
pub use ensemble::{DetuningGrid, EchoTrace, Ensemble, LineShape, LineSpec};
pub use sequence::{Pulse, PulseSequence, WaveVector};
