//! Simulation toolkit for cognitive cellular M2M networks.
//!
//! * [`sigmodel`]: wideband multiband and narrowband signal synthesis with
//!   timing and noise-level impairments.
//! * [`detectors`]: energy, matched-filter and cyclostationary detectors with
//!   Monte Carlo threshold calibration.
//! * [`fusion`]: hard-decision K-out-of-N cooperative sensing.
//! * [`widecs`]: sub-Nyquist compressive wideband sensing with greedy band
//!   recovery and an exhaustive-search reference.
//! * [`protosim`]: discrete-event simulation of the Smart-eNodeB unlicensed
//!   carrier handshake and the DRX battery lifetime model.
//! * [`harness`]: experiment runner, configuration files and CSV output.

pub mod detectors;
pub mod fusion;
pub mod harness;
pub mod protosim;
pub mod rng;
pub mod sigmodel;
pub mod widecs;
