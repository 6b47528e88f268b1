//! Matrix symbol calculus for the reduced Dirac operator: principal data
//! (eigenvalues `h±` and eigenprojections `P±`), polyhomogeneous symbols as
//! jet-valued callables, the composition/adjoint expansions for right
//! quantization, and grid application of the reduced operator.
//!
//! Symbols are evaluated on a fixed jet-variable layout: variable 0 is time,
//! variables 1–3 the base point `y`, variables 4–6 the covector `η`. Every
//! derivative the projection recursion or the transport hierarchy needs is read
//! off the jets; grids only ever appear in the operator appliers.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::geometry::{MetricModel, Preset, TWO_PI};
use crate::jet::{Jet, JetSpace};
use crate::linalg::Mat2;

/// Jet-variable indices: time, base point, covector.
pub const VT: usize = 0;
pub const VY: usize = 1;
pub const VE: usize = 4;

/// Jet space with the symbol layout `(t | y₁y₂y₃ | η₁η₂η₃)` and given caps.
pub fn sym_space(ct: u8, cy: u8, ce: u8) -> Arc<JetSpace> {
    JetSpace::new(&[(1, ct), (3, cy), (3, ce)])
}

/// Evaluation point of a symbol, as jets.
#[derive(Clone)]
pub struct SymArgs {
    pub sp: Arc<JetSpace>,
    pub t: Jet,
    pub y: [Jet; 3],
    pub eta: [Jet; 3],
}

impl SymArgs {
    pub fn at(sp: &Arc<JetSpace>, t0: f64, y0: [f64; 3], eta0: [f64; 3]) -> Self {
        Self {
            sp: sp.clone(),
            t: sp.rvar(VT, t0),
            y: std::array::from_fn(|a| sp.rvar(VY + a, y0[a])),
            eta: std::array::from_fn(|a| sp.rvar(VE + a, eta0[a])),
        }
    }
}

/// 2×2 matrix of jets.
pub type MatJet = [[Jet; 2]; 2];

/// A symbol as a reusable callable on jet arguments.
pub type SymFn = Arc<dyn Fn(&SymArgs) -> MatJet + Send + Sync>;

/// One homogeneous component of a polyhomogeneous symbol.
#[derive(Clone)]
pub struct SymbolComponent {
    pub degree: i32,
    pub eval: SymFn,
}

/// Ordered list of homogeneous components, degrees strictly decreasing by 1.
#[derive(Clone)]
pub struct PolyhomSymbol {
    pub components: Vec<SymbolComponent>,
}

impl PolyhomSymbol {
    pub fn leading_degree(&self) -> i32 {
        self.components.first().map(|c| c.degree).unwrap_or(0)
    }

    pub fn component(&self, degree: i32) -> Option<&SymbolComponent> {
        self.components.iter().find(|c| c.degree == degree)
    }

    /// Check the degree ladder invariant.
    pub fn degrees_valid(&self) -> bool {
        self.components
            .windows(2)
            .all(|w| w[1].degree == w[0].degree - 1)
    }
}

// ---- MatJet helpers -------------------------------------------------------

pub fn mat_zero(sp: &Arc<JetSpace>) -> MatJet {
    let z = sp.constant(Complex64::new(0.0, 0.0));
    [[z.clone(), z.clone()], [z.clone(), z]]
}

pub fn mat_identity(sp: &Arc<JetSpace>) -> MatJet {
    let mut m = mat_zero(sp);
    let one = sp.constant(Complex64::new(1.0, 0.0));
    m[0][0] = one.clone();
    m[1][1] = one;
    m
}

pub fn mat_add(a: &MatJet, b: &MatJet) -> MatJet {
    std::array::from_fn(|r| std::array::from_fn(|c| a[r][c].add(&b[r][c])))
}

pub fn mat_sub(a: &MatJet, b: &MatJet) -> MatJet {
    std::array::from_fn(|r| std::array::from_fn(|c| a[r][c].sub(&b[r][c])))
}

pub fn mat_mul(a: &MatJet, b: &MatJet) -> MatJet {
    std::array::from_fn(|r| {
        std::array::from_fn(|c| a[r][0].mul(&b[0][c]).add(&a[r][1].mul(&b[1][c])))
    })
}

pub fn mat_scale(a: &MatJet, s: Complex64) -> MatJet {
    std::array::from_fn(|r| std::array::from_fn(|c| a[r][c].scale(s)))
}

pub fn mat_scale_jet(a: &MatJet, s: &Jet) -> MatJet {
    std::array::from_fn(|r| std::array::from_fn(|c| a[r][c].mul(s)))
}

pub fn mat_diff(a: &MatJet, v: usize) -> MatJet {
    std::array::from_fn(|r| std::array::from_fn(|c| a[r][c].diff(v)))
}

/// Pointwise conjugate transpose (as a function of real variables).
pub fn mat_dagger(a: &MatJet) -> MatJet {
    std::array::from_fn(|r| std::array::from_fn(|c| a[c][r].conj()))
}

pub fn mat_val(a: &MatJet) -> Mat2 {
    Mat2([[a[0][0].val(), a[0][1].val()], [a[1][0].val(), a[1][1].val()]])
}

pub fn mat_max_abs(a: &MatJet) -> f64 {
    a.iter().flatten().map(|j| j.max_abs()).fold(0.0, f64::max)
}

/// Pauli matrix contraction `σ(ζ) = Σ ζ_α σ^α` with jet coefficients.
pub fn sigma_jet(zeta: &[Jet; 3]) -> MatJet {
    let i = Complex64::new(0.0, 1.0);
    let z0 = &zeta[0];
    let z1 = &zeta[1];
    let z2 = &zeta[2];
    [
        [z2.clone(), z0.sub(&z1.scale(i))],
        [z0.add(&z1.scale(i)), z2.neg()],
    ]
}

// ---- principal data -------------------------------------------------------

/// Frame-rescaled transported covector `ζ̃(t, y, η)` such that the principal
/// symbol of the reduced operator is `σ_Pauli(ζ̃)` in the fixed trivialization:
/// `ζ̃` is the parallel transport of `η` along `∂_t` from time `t` to time 0,
/// expressed in an orthonormal coframe of `ĥ_0`. Its Euclidean length equals
/// `‖η‖_{ĥ_t}`.
pub fn zeta_tilde_jet(m: &MetricModel, args: &SymArgs) -> [Jet; 3] {
    match &m.preset {
        Preset::UltrastaticTorus => args.eta.clone(),
        Preset::FlrwTorus { .. } => {
            // transport t → 0 scales spatial covectors by a(0)/a(t); the ĥ_0
            // coframe contributes another 1/a(0)
            let ainv = m.scale_factor_jet(&args.t).inv();
            std::array::from_fn(|a| args.eta[a].mul(&ainv))
        }
        Preset::WavyTorus { eps } => {
            // static metric: transport is trivial; coframe factor 1/c(y)
            let c = args.y[0]
                .cos()
                .rscale(*eps)
                .add(&args.sp.constant(Complex64::new(1.0, 0.0)));
            let cinv = c.inv();
            std::array::from_fn(|a| args.eta[a].mul(&cinv))
        }
        Preset::CustomTable(_) => {
            unimplemented!("symbol calculus is restricted to the analytic presets")
        }
    }
}

/// Eigenvalue `h± = ±√(ĥ_t^{αβ} η_α η_β)` as a jet.
pub fn h_pm_jet(m: &MetricModel, args: &SymArgs, sign: i32) -> Jet {
    let z = zeta_tilde_jet(m, args);
    let n = z[0]
        .mul(&z[0])
        .add(&z[1].mul(&z[1]))
        .add(&z[2].mul(&z[2]))
        .sqrt();
    n.rscale(sign as f64)
}

/// Principal symbol `σ_Pauli(ζ̃)` of the reduced operator as a jet matrix.
pub fn principal_symbol_jet(m: &MetricModel, args: &SymArgs) -> MatJet {
    sigma_jet(&zeta_tilde_jet(m, args))
}

/// Eigenprojection `P± = ½(I ± σ(ζ̃)/|ζ̃|)` as a jet matrix.
pub fn eigenprojection_jet(m: &MetricModel, args: &SymArgs, sign: i32) -> MatJet {
    let z = zeta_tilde_jet(m, args);
    let ninv = z[0]
        .mul(&z[0])
        .add(&z[1].mul(&z[1]))
        .add(&z[2].mul(&z[2]))
        .sqrt()
        .inv();
    let s = sigma_jet(&z);
    let half = Complex64::new(0.5, 0.0);
    let signed = mat_scale_jet(&s, &ninv.rscale(0.5 * sign as f64));
    mat_add(&mat_scale(&mat_identity(&args.sp), half), &signed)
}

/// Point evaluation of the principal symbol.
pub fn reduced_principal_symbol(m: &MetricModel, t: f64, y: [f64; 3], eta: [f64; 3]) -> Mat2 {
    let sp = sym_space(0, 0, 0);
    mat_val(&principal_symbol_jet(m, &SymArgs::at(&sp, t, y, eta)))
}

/// Point evaluation of both eigenprojections and eigenvalues.
pub fn eigenprojections(
    m: &MetricModel,
    t: f64,
    y: [f64; 3],
    eta: [f64; 3],
) -> (Mat2, Mat2, f64, f64) {
    let sp = sym_space(0, 0, 0);
    let args = SymArgs::at(&sp, t, y, eta);
    let pp = mat_val(&eigenprojection_jet(m, &args, 1));
    let pm = mat_val(&eigenprojection_jet(m, &args, -1));
    let hp = h_pm_jet(m, &args, 1).val().re;
    (pp, pm, hp, -hp)
}

// ---- right-quantization calculus ------------------------------------------

/// Multi-indices `α` over 3 variables with `|α| = k`.
pub fn multi_indices(k: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for a in 0..=k {
        for b in 0..=(k - a) {
            out.push([a, b, k - a - b]);
        }
    }
    out
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

fn mat_diff_multi(a: &MatJet, base: usize, alpha: [usize; 3]) -> MatJet {
    let mut out = a.clone();
    for (v, &n) in alpha.iter().enumerate() {
        for _ in 0..n {
            out = mat_diff(&out, base + v);
        }
    }
    out
}

/// Order-`k` term of the composition expansion for right quantization:
/// `c_k = Σ_{|α|=k} (i^{|α|}/α!) (∂_y^α a)(∂_η^α b)`, so that
/// `Op_R(a) Op_R(b) ~ Op_R(Σ_k c_k)`. Each term lowers the total degree by `k`.
pub fn compose_order(a: &MatJet, b: &MatJet, k: usize) -> MatJet {
    let sp = a[0][0].sp.clone();
    let ik = Complex64::new(0.0, 1.0).powi(k as i32);
    let mut out = mat_zero(&sp);
    for alpha in multi_indices(k) {
        let coeff = ik / (factorial(alpha[0]) * factorial(alpha[1]) * factorial(alpha[2]));
        let da = mat_diff_multi(a, VY, alpha);
        let db = mat_diff_multi(b, VE, alpha);
        out = mat_add(&out, &mat_scale(&mat_mul(&da, &db), coeff));
    }
    out
}

/// Order-`k` term of the (unweighted `L²`) adjoint expansion for right
/// quantization: `Op_R(p)* ~ Op_R(Σ_k q_k)` with
/// `q_k = Σ_{|α|=k} (i^{|α|}/α!) ∂_y^α ∂_η^α (p†)`.
pub fn adjoint_order(p: &MatJet, k: usize) -> MatJet {
    let sp = p[0][0].sp.clone();
    let ik = Complex64::new(0.0, 1.0).powi(k as i32);
    let dag = mat_dagger(p);
    let mut out = mat_zero(&sp);
    for alpha in multi_indices(k) {
        let coeff = ik / (factorial(alpha[0]) * factorial(alpha[1]) * factorial(alpha[2]));
        let d = mat_diff_multi(&mat_diff_multi(&dag, VY, alpha), VE, alpha);
        out = mat_add(&out, &mat_scale(&d, coeff));
    }
    out
}

// ---- grid application -----------------------------------------------------

/// 2-spinor field sampled on the uniform N³ torus grid, site order
/// `((i1*n + i2)*n + i3)`.
#[derive(Clone)]
pub struct SpinorGrid {
    pub n: usize,
    pub data: Vec<[Complex64; 2]>,
}

impl SpinorGrid {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![[Complex64::new(0.0, 0.0); 2]; n * n * n] }
    }

    /// Plane-wave mode `u e^{i k·x}`.
    pub fn plane_wave(n: usize, k: [i64; 3], u: [Complex64; 2]) -> Self {
        let mut g = Self::zeros(n);
        for i1 in 0..n {
            for i2 in 0..n {
                for i3 in 0..n {
                    let x: [f64; 3] = [i1, i2, i3].map(|i| TWO_PI * i as f64 / n as f64);
                    let ph = (Complex64::new(0.0, 1.0)
                        * (k[0] as f64 * x[0] + k[1] as f64 * x[1] + k[2] as f64 * x[2]))
                        .exp();
                    g.data[(i1 * n + i2) * n + i3] = [u[0] * ph, u[1] * ph];
                }
            }
        }
        g
    }

    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v[0].norm_sqr() + v[1].norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    /// In-place forward FFT of both spinor components.
    pub fn fft_forward(&mut self) {
        self.fft_in_place(false);
    }

    /// In-place inverse FFT of both spinor components (with the 1/N³ factor).
    pub fn fft_inverse(&mut self) {
        self.fft_in_place(true);
    }

    fn fft_in_place(&mut self, inverse: bool) {
        let n = self.n;
        let mut c0: Vec<Complex64> = self.data.iter().map(|v| v[0]).collect();
        let mut c1: Vec<Complex64> = self.data.iter().map(|v| v[1]).collect();
        fft3(n, &mut c0, inverse);
        fft3(n, &mut c1, inverse);
        for (i, v) in self.data.iter_mut().enumerate() {
            *v = [c0[i], c1[i]];
        }
    }

    /// Plain grid inner product `Σ u†v` (no measure weight).
    pub fn inner(&self, o: &Self) -> Complex64 {
        self.data
            .iter()
            .zip(&o.data)
            .map(|(u, v)| u[0].conj() * v[0] + u[1].conj() * v[1])
            .sum()
    }
}

/// In-place 3d FFT of one spinor component; `inverse` applies the 1/N³ factor.
pub(crate) fn fft3(n: usize, buf: &mut [Complex64], inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    // axis 3 (contiguous)
    for chunk in buf.chunks_mut(n) {
        fft.process(chunk);
    }
    // axis 2
    for i1 in 0..n {
        for i3 in 0..n {
            for i2 in 0..n {
                line[i2] = buf[(i1 * n + i2) * n + i3];
            }
            fft.process(&mut line);
            for i2 in 0..n {
                buf[(i1 * n + i2) * n + i3] = line[i2];
            }
        }
    }
    // axis 1
    for i2 in 0..n {
        for i3 in 0..n {
            for i1 in 0..n {
                line[i1] = buf[(i1 * n + i2) * n + i3];
            }
            fft.process(&mut line);
            for i1 in 0..n {
                buf[(i1 * n + i2) * n + i3] = line[i1];
            }
        }
    }
    if inverse {
        let s = 1.0 / (n * n * n) as f64;
        for v in buf.iter_mut() {
            *v *= s;
        }
    }
}

/// Signed wavenumber of FFT bin `i`.
pub fn wavenumber(n: usize, i: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// Apply a per-Fourier-mode 2×2 matrix `f(k)` to the field.
pub fn apply_mode_matrix(g: &SpinorGrid, f: impl Fn([i64; 3]) -> Mat2) -> SpinorGrid {
    let n = g.n;
    let mut c0: Vec<Complex64> = g.data.iter().map(|v| v[0]).collect();
    let mut c1: Vec<Complex64> = g.data.iter().map(|v| v[1]).collect();
    fft3(n, &mut c0, false);
    fft3(n, &mut c1, false);
    for i1 in 0..n {
        for i2 in 0..n {
            for i3 in 0..n {
                let idx = (i1 * n + i2) * n + i3;
                let k = [wavenumber(n, i1), wavenumber(n, i2), wavenumber(n, i3)];
                let m = f(k);
                let u = [c0[idx], c1[idx]];
                let v = m.apply(u);
                c0[idx] = v[0];
                c1[idx] = v[1];
            }
        }
    }
    fft3(n, &mut c0, true);
    fft3(n, &mut c1, true);
    SpinorGrid {
        n,
        data: c0.iter().zip(&c1).map(|(a, b)| [*a, *b]).collect(),
    }
}

/// Flat Dirac operator `−i σ^α ∂_α` (spectral).
pub fn dirac_flat_apply(g: &SpinorGrid) -> SpinorGrid {
    apply_mode_matrix(g, |k| crate::linalg::sigma_of([k[0] as f64, k[1] as f64, k[2] as f64]))
}

/// Dirac operator of the conformally flat metric `ĥ = γ² δ`, assembled from the
/// orthonormal frame `ê_α = γ⁻¹ ∂_α` and its spin connection:
/// `D̂ψ = −i γ⁻¹ σ^α ∂_α ψ − i γ⁻² (σ^α ∂_α γ) ψ`.
pub fn dirac_conformal_apply(gamma: &[f64], g: &SpinorGrid) -> SpinorGrid {
    let n = g.n;
    assert_eq!(gamma.len(), n * n * n);
    // spectral partial derivatives of ψ and γ
    let mut parts: Vec<SpinorGrid> = Vec::with_capacity(3);
    for a in 0..3 {
        parts.push(apply_mode_matrix(g, |k| {
            Mat2::identity().scale(Complex64::new(0.0, 1.0) * k[a] as f64)
        }));
    }
    let mut gbuf: Vec<Complex64> = gamma.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    fft3(n, &mut gbuf, false);
    let mut dgamma: Vec<[Complex64; 3]> = vec![[Complex64::new(0.0, 0.0); 3]; n * n * n];
    for a in 0..3 {
        let mut db = gbuf.clone();
        for i1 in 0..n {
            for i2 in 0..n {
                for i3 in 0..n {
                    let idx = (i1 * n + i2) * n + i3;
                    let k = [wavenumber(n, i1), wavenumber(n, i2), wavenumber(n, i3)];
                    db[idx] *= Complex64::new(0.0, k[a] as f64);
                }
            }
        }
        fft3(n, &mut db, true);
        for (idx, v) in db.iter().enumerate() {
            dgamma[idx][a] = *v;
        }
    }
    let mi = Complex64::new(0.0, -1.0);
    let mut out = SpinorGrid::zeros(n);
    for idx in 0..n * n * n {
        let ga = gamma[idx];
        let mut acc = [Complex64::new(0.0, 0.0); 2];
        for a in 0..3 {
            let s = crate::linalg::pauli(a);
            let dpsi = [parts[a].data[idx][0], parts[a].data[idx][1]];
            let t1 = s.apply(dpsi);
            let t2 = s.apply(g.data[idx]);
            for r in 0..2 {
                acc[r] += mi / ga * t1[r] + mi / (ga * ga) * dgamma[idx][a] * t2[r];
            }
        }
        out.data[idx] = acc;
    }
    out
}

/// Apply the reduced operator `D̄_t = V_t D̂_t V_t⁻¹` on a grid field over `Σ₀`.
pub fn reduced_dirac_apply(m: &MetricModel, t: f64, g: &SpinorGrid) -> Result<SpinorGrid> {
    if g.n < 8 {
        return Err(Error::GridTooCoarse(g.n));
    }
    match &m.preset {
        Preset::UltrastaticTorus => Ok(dirac_flat_apply(g)),
        Preset::FlrwTorus { .. } => {
            // homogeneous conformal factor: `aρ` is spatially constant and the
            // frame is parallel along ∂_t, so `D̄_t = a(t)⁻¹ (−i σ^α ∂_α)` exactly
            let ainv = 1.0 / m.scale_factor(t);
            let flat = dirac_flat_apply(g);
            Ok(SpinorGrid {
                n: g.n,
                data: flat.data.iter().map(|v| [v[0] * ainv, v[1] * ainv]).collect(),
            })
        }
        Preset::WavyTorus { eps } => {
            let n = g.n;
            let mut gamma = vec![0.0; n * n * n];
            for i1 in 0..n {
                let c = 1.0 + *eps * (TWO_PI * i1 as f64 / n as f64).cos();
                for i2 in 0..n {
                    for i3 in 0..n {
                        gamma[(i1 * n + i2) * n + i3] = c;
                    }
                }
            }
            Ok(dirac_conformal_apply(&gamma, g))
        }
        Preset::CustomTable(_) => Err(Error::Config(
            "reduced_dirac_apply supports only the analytic presets".into(),
        )),
    }
}
