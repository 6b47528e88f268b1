//! Independent reference propagators for the torus presets: the exact Fourier
//! propagator on the flat torus, and adaptive per-mode ODE integration of the
//! reduced first-order system for the conformally flat family.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{MetricModel, Preset};
use crate::linalg::{pauli, Mat2};
use crate::ode::{integrate_to, OdeOpts};
use crate::symbols::{wavenumber, SpinorGrid};

/// Which half of the doubled first-order system a field belongs to. The left
/// block evolves with the reduced operator, the right block with its negative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Left,
    Right,
}

impl Block {
    /// Sign of the generator for this block: `−i∂_t u + sign·M_k(t) u = 0`.
    pub fn sign(self) -> f64 {
        match self {
            Block::Left => 1.0,
            Block::Right => -1.0,
        }
    }
}

fn sigma_dot_k(k: [i64; 3]) -> Mat2 {
    let mut out = Mat2::zero();
    for (a, &kc) in k.iter().enumerate() {
        out = out.add(&pauli(a).scale(Complex64::new(kc as f64, 0.0)));
    }
    out
}

/// Exact per-mode matrix of the reduced operator on the presets where Fourier
/// modes decouple: `σ·k` on the flat torus and `a(t)⁻¹ σ·k` on the conformally
/// flat one. Agreement with the grid-level operator is asserted in the tests.
pub fn mode_matrix(m: &MetricModel, t: f64, k: [i64; 3]) -> Result<Mat2> {
    let mr = if m.reduced { m.clone() } else { m.reduce() };
    match &mr.preset {
        Preset::UltrastaticTorus => Ok(sigma_dot_k(k)),
        Preset::FlrwTorus { .. } => {
            Ok(sigma_dot_k(k).scale(Complex64::new(1.0 / mr.scale_factor(t), 0.0)))
        }
        _ => Err(Error::WrongPreset(
            "per-mode oracle needs a preset with decoupled Fourier modes".into(),
        )),
    }
}

/// Exact 2×2 propagator `e^{−i(t−s)·sign·σ·k}` of one flat mode.
pub fn flat_mode_propagator(k: [i64; 3], block: Block, dt: f64) -> Mat2 {
    let kn = ((k[0] * k[0] + k[1] * k[1] + k[2] * k[2]) as f64).sqrt();
    if kn == 0.0 {
        return Mat2::identity();
    }
    let theta = block.sign() * dt * kn;
    // e^{−iθ σ·k̂} = cos θ · Id − i sin θ · σ·k̂
    let sk = sigma_dot_k(k).scale(Complex64::new(1.0 / kn, 0.0));
    Mat2::identity()
        .scale(Complex64::new(theta.cos(), 0.0))
        .add(&sk.scale(Complex64::new(0.0, -theta.sin())))
}

/// Exact Fourier-mode propagation on the flat torus:
/// `uL(t) = e^{−i(t−s)σ·k} uL(s)` per mode, and the opposite sign on the
/// right block.
pub fn exact_flat_propagate(
    m: &MetricModel,
    g: &SpinorGrid,
    block: Block,
    s: f64,
    t: f64,
) -> Result<SpinorGrid> {
    let mr = if m.reduced { m.clone() } else { m.reduce() };
    if !matches!(mr.preset, Preset::UltrastaticTorus) {
        return Err(Error::WrongPreset("exact propagator is flat-only".into()));
    }
    Ok(crate::symbols::apply_mode_matrix(g, |k| flat_mode_propagator(k, block, t - s)))
}

/// Propagate one mode amplitude through `−i u̇ + sign·M_k(t) u = 0` with the
/// adaptive integrator.
pub fn mode_ode_step(
    m: &MetricModel,
    k: [i64; 3],
    block: Block,
    u0: [Complex64; 2],
    s: f64,
    t: f64,
    tol: f64,
) -> Result<[Complex64; 2]> {
    if t == s {
        return Ok(u0);
    }
    let opts = OdeOpts { rtol: tol, atol: tol * 1e-2, ..OdeOpts::default() };
    let mut rhs = |tau: f64, u: &Vec<Complex64>| -> Vec<Complex64> {
        // u̇ = −i·sign·M_k(τ) u
        let mk = mode_matrix(m, tau, k).expect("preset checked before integration");
        let v = mk.apply([u[0], u[1]]);
        vec![
            v[0] * Complex64::new(0.0, -block.sign()),
            v[1] * Complex64::new(0.0, -block.sign()),
        ]
    };
    mode_matrix(m, s, k)?; // preset check before entering the integrator
    let out = integrate_to(&mut rhs, s, vec![u0[0], u0[1]], t, &opts)?;
    Ok([out[0], out[1]])
}

/// Per-mode ODE propagation of a whole field on a preset with decoupled modes.
/// The global error is of order `tol·|t−s|`.
pub fn mode_ode_propagate(
    m: &MetricModel,
    g: &SpinorGrid,
    block: Block,
    s: f64,
    t: f64,
    tol: f64,
) -> Result<SpinorGrid> {
    mode_matrix(m, s, [1, 0, 0])?;
    let n = g.n;
    let mut hat = g.clone();
    hat.fft_forward();
    let results: Vec<Result<[Complex64; 2]>> = (0..n * n * n)
        .into_par_iter()
        .map(|idx| {
            let (i3, rem) = (idx % n, idx / n);
            let (i2, i1) = (rem % n, rem / n);
            let k = [wavenumber(n, i1), wavenumber(n, i2), wavenumber(n, i3)];
            let u = hat.data[idx];
            if u[0].norm() + u[1].norm() < 1e-300 {
                return Ok([Complex64::new(0.0, 0.0); 2]);
            }
            mode_ode_step(m, k, block, u, s, t, tol)
        })
        .collect();
    let mut out = SpinorGrid::zeros(n);
    for (idx, r) in results.into_iter().enumerate() {
        out.data[idx] = r?;
    }
    out.fft_inverse();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::eigenprojection;
    use crate::symbols::reduced_dirac_apply;

    fn flat() -> MetricModel {
        MetricModel::ultrastatic().reduce()
    }

    fn flrw() -> MetricModel {
        MetricModel::flrw(1.0, 0.1, 1.0).reduce()
    }

    fn mode_field(n: usize, k: [i64; 3], u: [Complex64; 2]) -> SpinorGrid {
        SpinorGrid::plane_wave(n, k, u)
    }

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn mode_matrix_matches_grid_operator() {
        for m in [flat(), flrw()] {
            let t = 0.7;
            for k in [[1i64, 0, 0], [2, -1, 3], [0, 0, 0]] {
                let u = [c(0.3) + Complex64::new(0.0, 0.4), c(-0.8)];
                let g = mode_field(16, k, u);
                let applied = reduced_dirac_apply(&m, t, &g).unwrap();
                let mk = mode_matrix(&m, t, k).unwrap();
                let expect = mode_field(16, k, mk.apply(u));
                let mut diff = 0.0f64;
                for (a, b) in applied.data.iter().zip(expect.data.iter()) {
                    diff = diff.max((a[0] - b[0]).norm() + (a[1] - b[1]).norm());
                }
                assert!(diff < 1e-10, "mode matrix mismatch {diff} at k={k:?}");
            }
        }
    }

    #[test]
    fn zero_mode_is_identity() {
        let p = flat_mode_propagator([0, 0, 0], Block::Left, 0.8);
        assert!(p.sub(&Mat2::identity()).norm() < 1e-14);
    }

    #[test]
    fn positive_eigenvector_gets_scalar_phase() {
        let k = [2i64, 1, -2];
        let kn = 3.0;
        let khat = [2.0 / 3.0, 1.0 / 3.0, -2.0 / 3.0];
        let p = eigenprojection(khat, 1);
        let u = [p.0[0][0], p.0[1][0]]; // column of the rank-one projection
        let dt = 0.9;
        let prop = flat_mode_propagator(k, Block::Left, dt);
        let got = prop.apply(u);
        let ph = Complex64::new(0.0, -dt * kn).exp();
        let err = (got[0] - ph * u[0]).norm() + (got[1] - ph * u[1]).norm();
        assert!(err < 1e-13, "eigenvector phase error {err}");
    }

    #[test]
    fn exact_flat_norm_conservation() {
        let m = flat();
        let mut g = SpinorGrid::zeros(16);
        for (i, v) in g.data.iter_mut().enumerate() {
            let x = (i % 97) as f64;
            v[0] = Complex64::new((0.3 * x).sin(), (0.11 * x).cos());
            v[1] = Complex64::new((0.07 * x).cos(), -(0.2 * x).sin());
        }
        let out = exact_flat_propagate(&m, &g, Block::Left, 0.0, 1.3).unwrap();
        assert!((out.norm() - g.norm()).abs() < 1e-14 * g.norm());
    }

    #[test]
    fn ode_matches_exact_on_flat() {
        let m = flat();
        let u = [c(0.6), Complex64::new(0.2, -0.7)];
        for block in [Block::Left, Block::Right] {
            let g = mode_field(16, [2, -1, 1], u);
            let exact = exact_flat_propagate(&m, &g, block, 0.0, 1.1).unwrap();
            let ode = mode_ode_propagate(&m, &g, block, 0.0, 1.1, 1e-12).unwrap();
            let mut diff = 0.0f64;
            for (a, b) in exact.data.iter().zip(ode.data.iter()) {
                diff = diff.max((a[0] - b[0]).norm() + (a[1] - b[1]).norm());
            }
            assert!(diff < 1e-10, "cross-oracle disagreement {diff}");
        }
    }

    #[test]
    fn flrw_zero_amplitude_reduces_to_flat() {
        let m = MetricModel::flrw(1.0, 0.0, 1.0).reduce();
        let k = [1i64, 2, 0];
        let u = [c(0.4), c(0.9)];
        let got = mode_ode_step(&m, k, Block::Left, u, 0.2, 1.4, 1e-12).unwrap();
        let exact = flat_mode_propagator(k, Block::Left, 1.2).apply(u);
        let err = (got[0] - exact[0]).norm() + (got[1] - exact[1]).norm();
        assert!(err < 1e-10, "ε→0 limit error {err}");
    }

    #[test]
    fn flrw_ode_conserves_norm() {
        let m = flrw();
        let u = [Complex64::new(0.3, 0.5), Complex64::new(-0.6, 0.1)];
        let n0 = (u[0].norm_sqr() + u[1].norm_sqr()).sqrt();
        let got = mode_ode_step(&m, [3, -2, 1], Block::Left, u, 0.0, 2.0, 1e-11).unwrap();
        let n1 = (got[0].norm_sqr() + got[1].norm_sqr()).sqrt();
        assert!((n1 - n0).abs() < 1e-9 * n0, "norm drift {}", (n1 - n0).abs());
    }

    #[test]
    fn wrong_preset_is_rejected(){
        let m = MetricModel::wavy(0.1).reduce();
        assert!(matches!(mode_matrix(&m, 0.0, [1, 0, 0]), Err(Error::WrongPreset(_))));
    }
}
