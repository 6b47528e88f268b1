//! Positive/negative-frequency propagators for the reduced Dirac equation on a
//! spatial 3-torus: geometry reduction, Hamiltonian flows and phase functions,
//! symbol calculus, frequency projections, transport-equation amplitudes, kernel
//! assembly with a Feynman-type inverse, mode-level oracles, and two-point
//! functions of the associated quasifree states.

pub mod error;
pub mod flow_phase;
pub mod geometry;
pub mod jet;
pub mod linalg;
pub mod ode;
pub mod projections;
pub mod symbols;
pub mod transport;
pub mod oracle;
pub mod kernel;
pub mod hadamard;

/// CLI entry point; returns the process exit code.
pub fn run() -> i32 {
    eprintln!("CLI not yet wired");
    2
}
