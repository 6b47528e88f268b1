//! Recursive construction of the one-parameter families of pseudodifferential
//! projections attached to the generator `A_t = ±D̄_t`: the degree-by-degree
//! recursion for their full symbols, residual diagnostics for the defining
//! identities, right quantization on a finite mode box, and the finite-mode
//! Riesz exactification that upgrades approximate projections to exact ones.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{MetricModel, Preset, TWO_PI};
use crate::jet::Jet;
use crate::linalg::Mat2;
use crate::symbols::{
    adjoint_order, compose_order, eigenprojection_jet, h_pm_jet, mat_add, mat_diff,
    mat_identity, mat_mul, mat_scale, mat_scale_jet, mat_sub, mat_val, mat_zero, sigma_jet,
    sym_space, zeta_tilde_jet, MatJet, PolyhomSymbol, SymArgs, SymbolComponent, SymFn,
};

/// Which operator generates the evolution: `A_t = +D̄_t` or `A_t = −D̄_t`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum GeneratorSign {
    ForPlusD,
    ForMinusD,
}

impl GeneratorSign {
    pub fn factor(self) -> f64 {
        match self {
            GeneratorSign::ForPlusD => 1.0,
            GeneratorSign::ForMinusD => -1.0,
        }
    }
}

/// Truncated full symbol of one projection family.
#[derive(Clone)]
pub struct ProjectionSymbol {
    /// +1 for the family with leading symbol `P⁺_A`, −1 for `P⁻_A`.
    pub sign: i32,
    pub generator_sign: GeneratorSign,
    pub sym: PolyhomSymbol,
    /// Components run over degrees `0, −1, …, −k_max`.
    pub k_max: u32,
}

/// Exact right symbol of the generator `A_t = ±D̄_t` as a polyhomogeneous
/// symbol. For the spatially homogeneous presets this is the single
/// degree-1 component; the inhomogeneous preset picks up a degree-0 term from
/// commuting the derivative through the conformal factor.
pub fn generator_symbol(m: &MetricModel, gs: GeneratorSign) -> PolyhomSymbol {
    let m = m.clone().reduce();
    let s = gs.factor();
    let mut components = Vec::new();
    let m1 = m.clone();
    let lead: SymFn = Arc::new(move |args: &SymArgs| {
        let zeta = zeta_tilde_jet(&m1, args);
        mat_scale(&sigma_jet(&zeta), Complex64::new(s, 0.0))
    });
    components.push(SymbolComponent { degree: 1, eval: lead });
    if let Preset::WavyTorus { eps } = m.preset {
        // right symbol of −iγ⁻¹σ^α∂_α − iγ⁻²(∂_αγ)σ^α with γ = 1 + eps·cos y₁
        let sub: SymFn = Arc::new(move |args: &SymArgs| {
            let c = args.y[0]
                .cos()
                .rscale(eps)
                .add(&args.sp.constant(Complex64::new(1.0, 0.0)));
            let dc = args.y[0].sin().rscale(-eps);
            let coef = dc.mul(&c.inv()).mul(&c.inv()).scale(Complex64::new(0.0, -2.0 * s));
            let p1 = crate::linalg::pauli(0);
            let mut out = mat_zero(&args.sp);
            for r in 0..2 {
                for cc in 0..2 {
                    out[r][cc] = coef.scale(p1.0[r][cc]);
                }
            }
            out
        });
        components.push(SymbolComponent { degree: 0, eval: sub });
    }
    PolyhomSymbol { components }
}

/// Full composition expansion of two truncated symbols, keeping output degrees
/// down to `min_degree`.
pub fn symbol_compose(a: &PolyhomSymbol, b: &PolyhomSymbol, min_degree: i32) -> PolyhomSymbol {
    let top = a.leading_degree() + b.leading_degree();
    let mut components = Vec::new();
    for degree in (min_degree..=top).rev() {
        let a = a.clone();
        let b = b.clone();
        let eval: SymFn = Arc::new(move |args: &SymArgs| {
            let mut out = mat_zero(&args.sp);
            for ca in &a.components {
                for cb in &b.components {
                    let ord = ca.degree + cb.degree - degree;
                    if ord < 0 {
                        continue;
                    }
                    let av = (ca.eval)(args);
                    let bv = (cb.eval)(args);
                    out = mat_add(&out, &compose_order(&av, &bv, ord as usize));
                }
            }
            out
        });
        components.push(SymbolComponent { degree, eval });
    }
    PolyhomSymbol { components }
}

/// All components of a truncated symbol evaluated once at `args`.
fn eval_components(p: &PolyhomSymbol, args: &SymArgs) -> Vec<(i32, MatJet)> {
    p.components.iter().map(|c| (c.degree, (c.eval)(args))).collect()
}

/// Component of the operator adjoint at `degree`, from precomputed values.
fn adjoint_component(vals: &[(i32, MatJet)], degree: i32, args: &SymArgs) -> MatJet {
    let mut out = mat_zero(&args.sp);
    for (d, v) in vals {
        let ord = d - degree;
        if ord < 0 {
            continue;
        }
        out = mat_add(&out, &adjoint_order(v, ord as usize));
    }
    out
}

/// Degree-`deg` component of `a∘b` from precomputed component values.
fn compose_vals(
    a: &[(i32, MatJet)],
    b: &[(i32, MatJet)],
    deg: i32,
    args: &SymArgs,
) -> MatJet {
    let mut out = mat_zero(&args.sp);
    for (da, av) in a {
        for (db, bv) in b {
            let ord = da + db - deg;
            if ord < 0 {
                continue;
            }
            out = mat_add(&out, &compose_order(av, bv, ord as usize));
        }
    }
    out
}

/// Riemannian volume density `√det h_t(y)` of the reduced spatial metric, as
/// a scalar jet. This is the weight of the inner product in which the reduced
/// operator is symmetric, so operator adjoints are taken relative to it.
fn density_jet(m: &MetricModel, args: &SymArgs) -> Jet {
    let one = args.sp.constant(Complex64::new(1.0, 0.0));
    match &m.preset {
        Preset::UltrastaticTorus => one,
        Preset::FlrwTorus { .. } => {
            let a = m.scale_factor_jet(&args.t);
            a.mul(&a).mul(&a)
        }
        Preset::WavyTorus { eps } => {
            let c = args.y[0].cos().rscale(*eps).add(&one);
            c.mul(&c).mul(&c)
        }
        Preset::CustomTable(_) => {
            unimplemented!("symbol calculus is restricted to the analytic presets")
        }
    }
}

/// Components of the adjoint of `vals` in the density-weighted inner product:
/// `ρ⁻¹ ∘ (plain adjoint) ∘ ρ` with `ρ` the multiplication operator by the
/// Riemannian density.
fn weighted_adjoint_vals(
    m: &MetricModel,
    vals: &[(i32, MatJet)],
    k_max: i32,
    args: &SymArgs,
) -> Vec<(i32, MatJet)> {
    let rho = density_jet(m, args);
    let rho_vals = vec![(0, mat_scale_jet(&mat_identity(&args.sp), &rho))];
    let rho_inv_vals = vec![(0, mat_scale_jet(&mat_identity(&args.sp), &rho.inv()))];
    let plain: Vec<(i32, MatJet)> =
        (0..=k_max).map(|k| (-k, adjoint_component(vals, -k, args))).collect();
    let inner: Vec<(i32, MatJet)> =
        (0..=k_max).map(|k| (-k, compose_vals(&plain, &rho_vals, -k, args))).collect();
    (0..=k_max).map(|k| (-k, compose_vals(&rho_inv_vals, &inner, -k, args))).collect()
}

/// Degree-`deg` component of `a∘b` for truncated symbols, evaluated at `args`.
fn compose_component(a: &PolyhomSymbol, b: &PolyhomSymbol, deg: i32, args: &SymArgs) -> MatJet {
    compose_vals(&eval_components(a, args), &eval_components(b, args), deg, args)
}

/// One recursion step: given the components of `P` through degree `1−k`, the
/// generator `A` and its principal data, produce the degree `−k` correction.
fn recursion_step(
    m: &MetricModel,
    gs: GeneratorSign,
    sign: i32,
    known: &PolyhomSymbol,
    a_sym: &PolyhomSymbol,
    k: i32,
) -> SymFn {
    let m = m.clone();
    let known = known.clone();
    let a_sym = a_sym.clone();
    Arc::new(move |args: &SymArgs| {
        let s = gs.factor();
        // principal data of A: eigenprojections of s·σ(ζ̃), eigenvalues ±|ζ̃|
        let p_plus = eigenprojection_jet(&m, args, if s > 0.0 { 1 } else { -1 });
        let p_minus = eigenprojection_jet(&m, args, if s > 0.0 { -1 } else { 1 });
        let p_own = if sign > 0 { &p_plus } else { &p_minus };
        let gap = h_pm_jet(&m, args, 1).rscale(2.0); // h⁺_A − h⁻_A = 2|ζ̃|
        // R = −(P∘P − P)_{−k}
        let pp = compose_component(&known, &known, -k, args);
        let p_at = {
            let mut out = mat_zero(&args.sp);
            for c in &known.components {
                if c.degree == -k {
                    out = mat_add(&out, &(c.eval)(args));
                }
            }
            out
        };
        let r = mat_sub(&p_at, &pp);
        // S = −R + P_A R + R P_A
        let s_mat = mat_sub(&mat_add(&mat_mul(p_own, &r), &mat_mul(&r, p_own)), &r);
        // T = ([P, A] + i∂_tP)_{1−k} + [S, A_prin]
        let pa = compose_component(&known, &a_sym, 1 - k, args);
        let ap = compose_component(&a_sym, &known, 1 - k, args);
        let mut dtp = mat_zero(&args.sp);
        for c in &known.components {
            if c.degree == 1 - k {
                dtp = mat_add(&dtp, &mat_diff(&(c.eval)(args), crate::symbols::VT));
            }
        }
        let a_prin = {
            let zeta = zeta_tilde_jet(&m, args);
            mat_scale(&sigma_jet(&zeta), Complex64::new(s, 0.0))
        };
        let t_mat = mat_add(
            &mat_add(&mat_sub(&pa, &ap), &mat_scale(&dtp, Complex64::new(0.0, 1.0))),
            &mat_sub(&mat_mul(&s_mat, &a_prin), &mat_mul(&a_prin, &s_mat)),
        );
        // Q = S + (P⁺_A T P⁻_A − P⁻_A T P⁺_A)/(h⁺ − h⁻)
        let w = mat_sub(
            &mat_mul(&p_plus, &mat_mul(&t_mat, &p_minus)),
            &mat_mul(&p_minus, &mat_mul(&t_mat, &p_plus)),
        );
        mat_add(&s_mat, &mat_scale_jet(&w, &gap.inv()))
    })
}

/// Build both projection families for the generator `A_t = ±D̄_t`, truncated
/// at degree `−K`, optionally seeding the degree-0 operator with an extra
/// admissible lower-order term (used by the uniqueness probe).
pub fn build_projection_symbols_seeded(
    m: &MetricModel,
    gs: GeneratorSign,
    k_max: u32,
    seed: Option<SymFn>,
) -> Result<(ProjectionSymbol, ProjectionSymbol)> {
    if k_max > 3 {
        return Err(Error::Config(format!("truncation order {k_max} > 3 unsupported")));
    }
    let m = m.clone().reduce();
    if matches!(m.preset, Preset::CustomTable(_)) {
        return Err(Error::Config("projection symbols require an analytic preset".into()));
    }
    let a_sym = generator_symbol(&m, gs);
    let mut out = Vec::new();
    for sign in [1i32, -1] {
        let mm = m.clone();
        let s = gs.factor();
        let lead: SymFn = Arc::new(move |args: &SymArgs| {
            eigenprojection_jet(&mm, args, if s > 0.0 { sign } else { -sign })
        });
        let mut components = vec![SymbolComponent { degree: 0, eval: lead }];
        if let Some(extra) = &seed {
            components.push(SymbolComponent { degree: -1, eval: extra.clone() });
        }
        let mut sym = PolyhomSymbol { components };
        for k in 1..=k_max as i32 {
            let q = recursion_step(&m, gs, sign, &sym, &a_sym, k);
            // merge the correction into the (possibly seeded) component
            let prev = sym.component(-k).map(|c| c.eval.clone());
            let merged: SymFn = match prev {
                None => q,
                Some(p) => Arc::new(move |args: &SymArgs| mat_add(&p(args), &q(args))),
            };
            let mut components: Vec<SymbolComponent> = sym
                .components
                .iter()
                .filter(|c| c.degree != -k)
                .cloned()
                .collect();
            components.push(SymbolComponent { degree: -k, eval: merged });
            components.sort_by_key(|c| -c.degree);
            sym = PolyhomSymbol { components };
        }
        out.push(ProjectionSymbol { sign, generator_sign: gs, sym, k_max });
    }
    let minus = out.pop().unwrap();
    let plus = out.pop().unwrap();
    Ok((plus, minus))
}

pub fn build_projection_symbols(
    m: &MetricModel,
    gs: GeneratorSign,
    k_max: u32,
) -> Result<(ProjectionSymbol, ProjectionSymbol)> {
    build_projection_symbols_seeded(m, gs, k_max, None)
}

/// Residuals of the five defining identities, per degree.
#[derive(Clone, Debug)]
pub struct ResidualRow {
    pub degree: i32,
    pub idempotence: f64,
    pub evolution: f64,
    pub self_adjointness: f64,
    pub orthogonality: f64,
    pub completeness: f64,
}

/// Sample point for residual evaluation.
#[derive(Clone, Copy, Debug)]
pub struct SymbolSample {
    pub t: f64,
    pub y: [f64; 3],
    pub eta: [f64; 3],
}

/// Max-over-samples residuals of the projection identities order by order:
/// `(P∘P − P)_{−k}`, `([A,P] − i∂_tP)_{1−k}`, `(P − P*)_{−k}`,
/// `(P₊∘P₋)_{−k}`, `(P₊ + P₋ − I)_{−k}` for `k = 0 … K`.
pub fn projection_residuals(
    m: &MetricModel,
    plus: &ProjectionSymbol,
    minus: &ProjectionSymbol,
    samples: &[SymbolSample],
) -> Vec<ResidualRow> {
    let m = m.clone().reduce();
    let a_sym = generator_symbol(&m, plus.generator_sign);
    let k_max = plus.k_max as i32;
    // caps must cover external composition derivatives plus the derivatives
    // taken internally by the recursion closures
    let cap = (2 * k_max.max(1)) as u8;
    let sp = sym_space(2, cap, cap);
    let rows: Vec<Vec<ResidualRow>> = samples
        .par_iter()
        .map(|smp| {
            let args = SymArgs::at(&sp, smp.t, smp.y, smp.eta);
            let vp = eval_components(&plus.sym, &args);
            let vm = eval_components(&minus.sym, &args);
            let va = eval_components(&a_sym, &args);
            let adj_vals = weighted_adjoint_vals(&m, &vp, k_max, &args);
            let mut rows = Vec::new();
            for k in 0..=k_max {
                let p_at = |vals: &[(i32, MatJet)], deg: i32| -> MatJet {
                    let mut out = mat_zero(&args.sp);
                    for (d, v) in vals {
                        if *d == deg {
                            out = mat_add(&out, v);
                        }
                    }
                    out
                };
                let idem = mat_sub(&compose_vals(&vp, &vp, -k, &args), &p_at(&vp, -k));
                let ap = compose_vals(&va, &vp, 1 - k, &args);
                let pa = compose_vals(&vp, &va, 1 - k, &args);
                let dtp = mat_diff(&p_at(&vp, 1 - k), crate::symbols::VT);
                let evol = mat_sub(
                    &mat_sub(&ap, &pa),
                    &mat_scale(&dtp, Complex64::new(0.0, 1.0)),
                );
                let adj = mat_sub(&p_at(&vp, -k), &p_at(&adj_vals, -k));
                let ortho = compose_vals(&vp, &vm, -k, &args);
                let mut sum = mat_add(&p_at(&vp, -k), &p_at(&vm, -k));
                if k == 0 {
                    sum = mat_sub(&sum, &mat_identity(&args.sp));
                }
                rows.push(ResidualRow {
                    degree: -k,
                    idempotence: mat_val(&idem).norm(),
                    evolution: mat_val(&evol).norm(),
                    self_adjointness: mat_val(&adj).norm(),
                    orthogonality: mat_val(&ortho).norm(),
                    completeness: mat_val(&sum).norm(),
                });
            }
            rows
        })
        .collect();
    let mut out: Vec<ResidualRow> = (0..=k_max)
        .map(|k| ResidualRow {
            degree: -k,
            idempotence: 0.0,
            evolution: 0.0,
            self_adjointness: 0.0,
            orthogonality: 0.0,
            completeness: 0.0,
        })
        .collect();
    for per_sample in &rows {
        for (acc, r) in out.iter_mut().zip(per_sample) {
            acc.idempotence = acc.idempotence.max(r.idempotence);
            acc.evolution = acc.evolution.max(r.evolution);
            acc.self_adjointness = acc.self_adjointness.max(r.self_adjointness);
            acc.orthogonality = acc.orthogonality.max(r.orthogonality);
            acc.completeness = acc.completeness.max(r.completeness);
        }
    }
    out
}

/// Value of the full truncated symbol at a numeric point. The jet caps cover
/// the derivatives taken internally by the recursion closures.
/// Value of a single homogeneous component of the truncated symbol.
pub fn symbol_component_value(
    p: &ProjectionSymbol,
    degree: i32,
    t: f64,
    y: [f64; 3],
    eta: [f64; 3],
) -> Mat2 {
    let cap = p.k_max.max(1) as u8;
    let sp = sym_space(cap, cap, cap);
    let args = SymArgs::at(&sp, t, y, eta);
    match p.sym.component(degree) {
        Some(c) => mat_val(&(c.eval)(&args)),
        None => Mat2::zero(),
    }
}

pub fn symbol_value(p: &ProjectionSymbol, t: f64, y: [f64; 3], eta: [f64; 3]) -> Mat2 {
    let cap = p.k_max.max(1) as u8;
    let sp = sym_space(cap, cap, cap);
    let args = SymArgs::at(&sp, t, y, eta);
    let mut acc = Mat2::zero();
    for c in &p.sym.components {
        acc = acc.add(&mat_val(&(c.eval)(&args)));
    }
    acc
}

/// Untruncated idempotence defect `P∘P − P` evaluated numerically at `η`
/// (all composition orders available at the truncation), used for decay fits.
pub fn idempotence_defect(p: &ProjectionSymbol, t: f64, y: [f64; 3], eta: [f64; 3]) -> f64 {
    let cap = (2 * p.k_max + 1).max(2) as u8;
    let sp = sym_space(2, cap, cap);
    let args = SymArgs::at(&sp, t, y, eta);
    let vals = eval_components(&p.sym, &args);
    let mut acc = Mat2::zero();
    for (_, av) in &vals {
        for (_, bv) in &vals {
            for ord in 0..=(p.k_max as usize + 1) {
                acc = acc.add(&mat_val(&compose_order(av, bv, ord)));
            }
        }
        acc = acc.sub(&mat_val(av));
    }
    acc.norm()
}

// ---- right quantization and Riesz exactification --------------------------

/// Finite-mode operator on the spinor mode box `‖k‖∞ ≤ kmode`, right
/// quantization convention.
#[derive(Clone)]
pub enum ModeOperator {
    /// Block-diagonal over Fourier modes (spatially homogeneous symbols).
    PerMode { kmode: i64, t: f64, blocks: Vec<Mat2> },
    /// Dense matrix over all (mode, spinor) pairs, mode-major ordering.
    Dense { kmode: i64, t: f64, mat: Vec<Vec<Complex64>> },
}

pub fn mode_count(kmode: i64) -> usize {
    let n = (2 * kmode + 1) as usize;
    n * n * n
}

/// Flat index of mode `k` in the box.
pub fn mode_index(kmode: i64, k: [i64; 3]) -> usize {
    let n = (2 * kmode + 1) as usize;
    let a = (k[0] + kmode) as usize;
    let b = (k[1] + kmode) as usize;
    let c = (k[2] + kmode) as usize;
    (a * n + b) * n + c
}

pub fn mode_of_index(kmode: i64, idx: usize) -> [i64; 3] {
    let n = (2 * kmode + 1) as usize;
    [
        (idx / (n * n)) as i64 - kmode,
        ((idx / n) % n) as i64 - kmode,
        (idx % n) as i64 - kmode,
    ]
}

/// Replacement covector for the zero mode (symbols are undefined at η = 0).
pub fn mode_eta(k: [i64; 3]) -> [f64; 3] {
    if k == [0, 0, 0] {
        [0.0, 0.0, 1.0]
    } else {
        [k[0] as f64, k[1] as f64, k[2] as f64]
    }
}

impl ModeOperator {
    pub fn kmode(&self) -> i64 {
        match self {
            ModeOperator::PerMode { kmode, .. } | ModeOperator::Dense { kmode, .. } => *kmode,
        }
    }

    pub fn dimension(&self) -> usize {
        2 * mode_count(self.kmode())
    }

    /// Apply to a coefficient vector ordered mode-major, 2 spinor entries per mode.
    pub fn apply(&self, v: &[Complex64]) -> Vec<Complex64> {
        match self {
            ModeOperator::PerMode { blocks, .. } => {
                let mut out = vec![Complex64::new(0.0, 0.0); v.len()];
                for (i, b) in blocks.iter().enumerate() {
                    let w = b.apply([v[2 * i], v[2 * i + 1]]);
                    out[2 * i] = w[0];
                    out[2 * i + 1] = w[1];
                }
                out
            }
            ModeOperator::Dense { mat, .. } => mat
                .iter()
                .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
                .collect(),
        }
    }

    /// Dense entry accessor (row, col) in the mode-major ordering.
    pub fn entry(&self, r: usize, c: usize) -> Complex64 {
        match self {
            ModeOperator::PerMode { blocks, .. } => {
                if r / 2 == c / 2 {
                    blocks[r / 2].0[r % 2][c % 2]
                } else {
                    Complex64::new(0.0, 0.0)
                }
            }
            ModeOperator::Dense { mat, .. } => mat[r][c],
        }
    }

    pub fn sub_norm(&self, o: &ModeOperator) -> f64 {
        let d = self.dimension();
        let mut s = 0.0;
        for r in 0..d {
            for c in 0..d {
                s += (self.entry(r, c) - o.entry(r, c)).norm_sqr();
            }
        }
        s.sqrt()
    }

    /// Largest singular-value estimate via a few power iterations on `M†M`.
    pub fn op_norm_estimate(&self) -> f64 {
        let d = self.dimension();
        let mut v: Vec<Complex64> = (0..d)
            .map(|i| Complex64::new((i as f64 * 0.7).sin() + 0.1, (i as f64 * 1.3).cos()))
            .collect();
        let mut norm = 0.0;
        for _ in 0..30 {
            let w = self.apply(&v);
            // multiply by adjoint
            let mut u = vec![Complex64::new(0.0, 0.0); d];
            for r in 0..d {
                let wr = w[r];
                for c in 0..d {
                    u[c] += self.entry(r, c).conj() * wr;
                }
            }
            let n: f64 = u.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if n == 0.0 {
                return 0.0;
            }
            norm = n.sqrt();
            for z in u.iter_mut() {
                *z /= n;
            }
            v = u;
        }
        norm
    }
}

/// Right quantization of a truncated symbol on the mode box: matrix elements
/// `M_{(k,i),(k′,j)} = (2π)⁻³ ∫ e^{−ik·y} sym(t,y,k′)_{ij} e^{ik′·y} dy`.
/// Spatially homogeneous presets produce the block-diagonal fast path.
pub fn quantize_right(m: &MetricModel, sym: &ProjectionSymbol, t: f64, kmode: i64) -> ModeOperator {
    assert!(kmode >= 2, "kmode must be at least 2");
    let mm = m.clone().reduce();
    let homogeneous = matches!(mm.preset, Preset::UltrastaticTorus | Preset::FlrwTorus { .. });
    if homogeneous {
        let blocks: Vec<Mat2> = (0..mode_count(kmode))
            .into_par_iter()
            .map(|idx| {
                let k = mode_of_index(kmode, idx);
                symbol_value(sym, t, [0.0; 3], mode_eta(k))
            })
            .collect();
        return ModeOperator::PerMode { kmode, t, blocks };
    }
    // dense path: direct Fourier projection over a y-grid of 2(2kmode+1) per axis
    let nm = mode_count(kmode);
    let d = 2 * nm;
    let ng = 2 * (2 * kmode + 1) as usize;
    let mut mat = vec![vec![Complex64::new(0.0, 0.0); d]; d];
    let cols: Vec<(usize, Vec<[Mat2; 1]>)> = (0..nm)
        .into_par_iter()
        .map(|cidx| {
            let kp = mode_of_index(kmode, cidx);
            let eta = mode_eta(kp);
            // sample sym(t, y, k') over the grid, then project onto row modes
            let mut samples = vec![[Mat2::zero(); 1]; ng * ng * ng];
            for i1 in 0..ng {
                for i2 in 0..ng {
                    for i3 in 0..ng {
                        let y = [i1, i2, i3].map(|i| TWO_PI * i as f64 / ng as f64);
                        samples[(i1 * ng + i2) * ng + i3][0] = symbol_value(sym, t, y, eta);
                    }
                }
            }
            (cidx, samples)
        })
        .collect();
    for (cidx, samples) in cols {
        let kp = mode_of_index(kmode, cidx);
        for ridx in 0..nm {
            let k = mode_of_index(kmode, ridx);
            // (1/N³) Σ_y e^{i(k'−k)·y} sym(y)
            let mut acc = Mat2::zero();
            for i1 in 0..ng {
                for i2 in 0..ng {
                    for i3 in 0..ng {
                        let y = [i1, i2, i3].map(|i| TWO_PI * i as f64 / ng as f64);
                        let ph = (Complex64::new(0.0, 1.0)
                            * ((kp[0] - k[0]) as f64 * y[0]
                                + (kp[1] - k[1]) as f64 * y[1]
                                + (kp[2] - k[2]) as f64 * y[2]))
                            .exp();
                        acc = acc.add(&samples[(i1 * ng + i2) * ng + i3][0].scale(ph));
                    }
                }
            }
            let acc = acc.scale(Complex64::new(1.0 / (ng * ng * ng) as f64, 0.0));
            for i in 0..2 {
                for j in 0..2 {
                    mat[2 * ridx + i][2 * cidx + j] = acc.0[i][j];
                }
            }
        }
    }
    ModeOperator::Dense { kmode, t, mat }
}

fn symmetrize(op: &ModeOperator) -> ModeOperator {
    match op {
        ModeOperator::PerMode { kmode, t, blocks } => ModeOperator::PerMode {
            kmode: *kmode,
            t: *t,
            blocks: blocks
                .iter()
                .map(|b| b.add(&b.dagger()).scale(Complex64::new(0.5, 0.0)))
                .collect(),
        },
        ModeOperator::Dense { kmode, t, mat } => {
            let d = mat.len();
            let mut out = vec![vec![Complex64::new(0.0, 0.0); d]; d];
            for (r, row) in out.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = 0.5 * (mat[r][c] + mat[c][r].conj());
                }
            }
            ModeOperator::Dense { kmode: *kmode, t: *t, mat: out }
        }
    }
}

/// Exactify the pair of approximate projections through the spectral clusters
/// of `𝒫 = P₊ + 2P₋`: eigenvalues near 1 → plus cluster, near 2 → minus.
/// Returns exact orthogonal complementary projectors.
pub fn riesz_exactify(
    p_plus: &ModeOperator,
    p_minus: &ModeOperator,
    threshold: f64,
) -> Result<(ModeOperator, ModeOperator)> {
    let pp = symmetrize(p_plus);
    let pm = symmetrize(p_minus);
    match (&pp, &pm) {
        (
            ModeOperator::PerMode { kmode, t, blocks: bp },
            ModeOperator::PerMode { blocks: bm, .. },
        ) => {
            let mut out_p = Vec::with_capacity(bp.len());
            let mut out_m = Vec::with_capacity(bp.len());
            for (a, b) in bp.iter().zip(bm) {
                let script_p = a.add(&b.scale(Complex64::new(2.0, 0.0)));
                let (vals, vecs) = script_p.eigh();
                for v in vals {
                    if (1.4..=1.6).contains(&v) {
                        return Err(Error::ClusterAmbiguity { value: v, lo: 1.4, hi: 1.6 });
                    }
                }
                let mut proj = Mat2::zero();
                for (v, vec) in vals.iter().zip(vecs.iter()) {
                    if *v < threshold {
                        for r in 0..2 {
                            for c in 0..2 {
                                proj.0[r][c] += vec[r] * vec[c].conj();
                            }
                        }
                    }
                }
                let compl = Mat2::identity().sub(&proj);
                out_p.push(proj);
                out_m.push(compl);
            }
            Ok((
                ModeOperator::PerMode { kmode: *kmode, t: *t, blocks: out_p },
                ModeOperator::PerMode { kmode: *kmode, t: *t, blocks: out_m },
            ))
        }
        (ModeOperator::Dense { kmode, t, mat: mp }, ModeOperator::Dense { mat: mm, .. }) => {
            let d = mp.len();
            let script = nalgebra::DMatrix::from_fn(d, d, |r, c| mp[r][c] + 2.0 * mm[r][c]);
            let eig = script.symmetric_eigen();
            for v in eig.eigenvalues.iter() {
                if (1.4..=1.6).contains(v) {
                    return Err(Error::ClusterAmbiguity { value: *v, lo: 1.4, hi: 1.6 });
                }
            }
            let mut proj = nalgebra::DMatrix::from_element(d, d, Complex64::new(0.0, 0.0));
            for (i, v) in eig.eigenvalues.iter().enumerate() {
                if *v < threshold {
                    let col = eig.eigenvectors.column(i);
                    for r in 0..d {
                        for c in 0..d {
                            proj[(r, c)] += col[r] * col[c].conj();
                        }
                    }
                }
            }
            let to_rows = |m: &nalgebra::DMatrix<Complex64>| -> Vec<Vec<Complex64>> {
                (0..d).map(|r| (0..d).map(|c| m[(r, c)]).collect()).collect()
            };
            let compl = nalgebra::DMatrix::<Complex64>::identity(d, d) - &proj;
            Ok((
                ModeOperator::Dense { kmode: *kmode, t: *t, mat: to_rows(&proj) },
                ModeOperator::Dense { kmode: *kmode, t: *t, mat: to_rows(&compl) },
            ))
        }
        _ => Err(Error::Config("mismatched mode operator representations".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{eigenprojection, sigma_of};

    fn scalar_symbol(components: Vec<(i32, SymFn)>) -> PolyhomSymbol {
        PolyhomSymbol {
            components: components
                .into_iter()
                .map(|(degree, eval)| SymbolComponent { degree, eval })
                .collect(),
        }
    }

    fn eta_norm_fn() -> SymFn {
        Arc::new(|args: &SymArgs| {
            let n = args.eta[0]
                .mul(&args.eta[0])
                .add(&args.eta[1].mul(&args.eta[1]))
                .add(&args.eta[2].mul(&args.eta[2]))
                .sqrt();
            let mut out = mat_zero(&args.sp);
            out[0][0] = n.clone();
            out[1][1] = n;
            out
        })
    }

    fn eta_norm_inv_fn() -> SymFn {
        Arc::new(|args: &SymArgs| {
            let n = args.eta[0]
                .mul(&args.eta[0])
                .add(&args.eta[1].mul(&args.eta[1]))
                .add(&args.eta[2].mul(&args.eta[2]))
                .sqrt()
                .inv();
            let mut out = mat_zero(&args.sp);
            out[0][0] = n.clone();
            out[1][1] = n;
            out
        })
    }

    #[test]
    fn compose_identity_and_inverse() {
        let sp = sym_space(0, 3, 3);
        let args = SymArgs::at(&sp, 0.3, [1.0, 2.0, 0.5], [0.8, -0.4, 1.1]);
        let ident: SymFn = Arc::new(|a: &SymArgs| mat_identity(&a.sp));
        let id_sym = scalar_symbol(vec![(0, ident)]);
        let b: SymFn = Arc::new(|a: &SymArgs| {
            let f = a.y[0].sin().mul(&a.eta[2]);
            let mut out = mat_identity(&a.sp);
            out[0][1] = f;
            out
        });
        let b_sym = scalar_symbol(vec![(1, b)]);
        let c = symbol_compose(&id_sym, &b_sym, -1);
        // compose(I, b) = b exactly: degree-1 part matches, lower parts vanish
        let lead = mat_val(&(c.component(1).unwrap().eval)(&args));
        let blead = mat_val(&(b_sym.component(1).unwrap().eval)(&args));
        assert!(lead.sub(&blead).norm() < 1e-14);
        for deg in [0, -1] {
            let v = mat_val(&(c.component(deg).unwrap().eval)(&args));
            assert!(v.norm() < 1e-14, "degree {deg} not zero: {}", v.norm());
        }
        // ‖η‖ ∘ ‖η‖⁻¹ = 1 with vanishing lower components (flat symbols)
        let prod = symbol_compose(
            &scalar_symbol(vec![(1, eta_norm_fn())]),
            &scalar_symbol(vec![(-1, eta_norm_inv_fn())]),
            -2,
        );
        let v0 = mat_val(&(prod.component(0).unwrap().eval)(&args));
        assert!(v0.sub(&Mat2::identity()).norm() < 1e-9);
        for deg in [-1, -2] {
            let v = mat_val(&(prod.component(deg).unwrap().eval)(&args));
            assert!(v.norm() < 1e-9, "degree {deg}: {}", v.norm());
        }
    }

    #[test]
    fn compose_associativity() {
        let sp = sym_space(0, 3, 3);
        let args = SymArgs::at(&sp, 0.0, [0.7, 1.9, 2.4], [1.3, 0.2, -0.6]);
        let a: SymFn = Arc::new(|ar: &SymArgs| {
            let mut out = mat_identity(&ar.sp);
            out[0][0] = ar.y[0].cos().mul(&ar.eta[0]).add(&out[0][0]);
            out[1][0] = ar.y[2].sin();
            out
        });
        let b: SymFn = Arc::new(|ar: &SymArgs| {
            let n = ar.eta[0]
                .mul(&ar.eta[0])
                .add(&ar.eta[1].mul(&ar.eta[1]))
                .add(&ar.eta[2].mul(&ar.eta[2]))
                .sqrt();
            let mut out = mat_zero(&ar.sp);
            out[0][0] = n.clone();
            out[1][1] = n.mul(&ar.y[1].cos().rscale(0.5).add(&ar.sp.constant(1.0.into())));
            out[0][1] = ar.eta[2].clone();
            out
        });
        let c: SymFn = Arc::new(|ar: &SymArgs| {
            let mut out = mat_identity(&ar.sp);
            out[1][1] = ar.y[0].sin().rscale(0.3).add(&out[1][1]);
            out[0][1] = ar.y[1].sin().mul(&ar.eta[1]).rscale(0.2);
            out
        });
        let sa = scalar_symbol(vec![(1, a)]);
        let sb = scalar_symbol(vec![(1, b)]);
        let sc = scalar_symbol(vec![(0, c)]);
        let left = symbol_compose(&symbol_compose(&sa, &sb, 0), &sc, 0);
        let right = symbol_compose(&sa, &symbol_compose(&sb, &sc, 0), 0);
        for deg in [2, 1, 0] {
            let l = mat_val(&(left.component(deg).unwrap().eval)(&args));
            let r = mat_val(&(right.component(deg).unwrap().eval)(&args));
            assert!(l.sub(&r).norm() < 1e-8, "degree {deg}: {}", l.sub(&r).norm());
        }
    }

    fn samples() -> Vec<SymbolSample> {
        let mut out = Vec::new();
        for i in 0..3 {
            let a = i as f64;
            out.push(SymbolSample {
                t: 0.1 + 0.15 * a,
                y: [0.5 + a, 2.0 - 0.3 * a, 1.0 + 0.2 * a],
                eta: [1.0 + 0.3 * a, -0.5 + 0.2 * a, 2.0 - 0.1 * a],
            });
        }
        out
    }

    #[test]
    fn leading_component_and_flat_triviality() {
        let flat = MetricModel::ultrastatic().reduce();
        let (plus, minus) = build_projection_symbols(&flat, GeneratorSign::ForPlusD, 2).unwrap();
        let sp = sym_space(2, 2, 2);
        for smp in samples() {
            let args = SymArgs::at(&sp, smp.t, smp.y, smp.eta);
            let lead = mat_val(&(plus.sym.component(0).unwrap().eval)(&args));
            let expect = eigenprojection(smp.eta, 1);
            assert!(lead.sub(&expect).norm() < 1e-12);
            // ultrastatic: all sub-leading components vanish
            for p in [&plus, &minus] {
                for deg in [-1, -2] {
                    let v = mat_val(&(p.sym.component(deg).unwrap().eval)(&args));
                    assert!(v.norm() < 1e-10, "degree {deg}: {}", v.norm());
                }
            }
        }
    }

    #[test]
    fn flrw_recursion_trivial_and_residuals() {
        let m = MetricModel::flrw(1.0, 0.1, 1.0).reduce();
        let (plus, minus) = build_projection_symbols(&m, GeneratorSign::ForPlusD, 2).unwrap();
        let sp = sym_space(2, 2, 2);
        for smp in samples() {
            let args = SymArgs::at(&sp, smp.t, smp.y, smp.eta);
            for deg in [-1, -2] {
                let v = mat_val(&(plus.sym.component(deg).unwrap().eval)(&args));
                assert!(v.norm() < 1e-10);
            }
        }
        let rows = projection_residuals(&m, &plus, &minus, &samples());
        for r in &rows {
            assert!(r.idempotence < 1e-8, "idem {:?}", r);
            assert!(r.evolution < 1e-8, "evol {:?}", r);
            assert!(r.self_adjointness < 1e-8, "adj {:?}", r);
            assert!(r.orthogonality < 1e-8, "ortho {:?}", r);
            assert!(r.completeness < 1e-8, "sum {:?}", r);
        }
    }

    #[test]
    fn wavy_residuals_and_decay() {
        let m = MetricModel::wavy(0.2).reduce();
        let (plus, minus) = build_projection_symbols(&m, GeneratorSign::ForPlusD, 2).unwrap();
        let rows = projection_residuals(&m, &plus, &minus, &samples());
        for r in &rows {
            assert!(r.idempotence < 1e-8, "{:?}", r);
            assert!(r.evolution < 1e-8, "{:?}", r);
            assert!(r.self_adjointness < 1e-8, "{:?}", r);
            assert!(r.orthogonality < 1e-8, "{:?}", r);
            assert!(r.completeness < 1e-8, "{:?}", r);
        }
        // nontrivial sub-leading content
        let v = symbol_value(&plus, 0.0, [1.0, 0.0, 0.0], [2.0, 1.0, 0.5])
            .sub(&symbol_value(&plus, 0.0, [1.0, 0.0, 0.0], [4.0, 2.0, 1.0]));
        assert!(v.norm() > 1e-6, "recursion unexpectedly trivial");
        // untruncated idempotence defect decays at order −(K+1)
        let eta_hat = [0.6f64, 0.48, 0.64];
        let mut logs = Vec::new();
        for scale in [4.0f64, 8.0, 16.0] {
            let eta = eta_hat.map(|v| v * scale);
            let d = idempotence_defect(&plus, 0.0, [1.0, 0.2, 0.0], eta);
            logs.push((scale.log2(), d.log2()));
        }
        let n = logs.len() as f64;
        let sx: f64 = logs.iter().map(|v| v.0).sum();
        let sy: f64 = logs.iter().map(|v| v.1).sum();
        let sxx: f64 = logs.iter().map(|v| v.0 * v.0).sum();
        let sxy: f64 = logs.iter().map(|v| v.0 * v.1).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        assert!(slope <= -3.0 + 0.2, "decay slope {slope}");
    }

    #[test]
    fn uniqueness_probe() {
        let m = MetricModel::wavy(0.15).reduce();
        let (p1, _) = build_projection_symbols(&m, GeneratorSign::ForPlusD, 2).unwrap();
        // admissible alternative start: extra degree −1 junk in the seed
        let seed: SymFn = Arc::new(|args: &SymArgs| {
            let n = args.eta[0]
                .mul(&args.eta[0])
                .add(&args.eta[1].mul(&args.eta[1]))
                .add(&args.eta[2].mul(&args.eta[2]))
                .sqrt()
                .inv();
            let f = args.y[0].cos().mul(&n).rscale(0.3);
            let mut out = mat_zero(&args.sp);
            out[0][0] = f.clone();
            out[1][1] = f.neg();
            out[0][1] = n.rscale(0.1);
            out[1][0] = n.rscale(0.1);
            out
        });
        let (p2, _) =
            build_projection_symbols_seeded(&m, GeneratorSign::ForPlusD, 2, Some(seed)).unwrap();
        // the recursion output is canonical, so the components below leading
        // order must agree regardless of the admissible starting choice
        let sp = sym_space(2, 2, 2);
        for smp in samples() {
            let args = SymArgs::at(&sp, smp.t, smp.y, smp.eta);
            let a = mat_val(&(p1.sym.component(-1).unwrap().eval)(&args));
            let b = mat_val(&(p2.sym.component(-1).unwrap().eval)(&args));
            assert!(a.sub(&b).norm() < 1e-9, "degree -1 differ by {}", a.sub(&b).norm());
        }
    }

    #[test]
    fn quantize_and_riesz_flat() {
        let flat = MetricModel::ultrastatic().reduce();
        let (plus, minus) = build_projection_symbols(&flat, GeneratorSign::ForPlusD, 2).unwrap();
        let kmode = 2;
        let qp = quantize_right(&flat, &plus, 0.0, kmode);
        let qm = quantize_right(&flat, &minus, 0.0, kmode);
        // y-independent symbol → block-diagonal with exact spectral projectors
        if let ModeOperator::PerMode { blocks, .. } = &qp {
            for (idx, b) in blocks.iter().enumerate() {
                let k = mode_of_index(kmode, idx);
                let expect = eigenprojection(mode_eta(k), 1);
                assert!(b.sub(&expect).norm() < 1e-12);
            }
        } else {
            panic!("expected per-mode fast path");
        }
        let (rp, rm) = riesz_exactify(&qp, &qm, 1.5).unwrap();
        // exactness identities
        let d = rp.dimension();
        let v: Vec<Complex64> = (0..d)
            .map(|i| Complex64::new((i as f64).sin(), 0.3 * (i as f64).cos()))
            .collect();
        let idem: f64 = rp
            .apply(&rp.apply(&v))
            .iter()
            .zip(rp.apply(&v))
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(idem < 1e-12);
        let cross: f64 = rp
            .apply(&rm.apply(&v))
            .iter()
            .map(|z| z.norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(cross < 1e-12);
        let sum: f64 = rp
            .apply(&v)
            .iter()
            .zip(rm.apply(&v))
            .zip(&v)
            .map(|((a, b), c)| (a + b - c).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(sum < 1e-12);
        // flat: exactified projectors equal the mode-wise spectral projectors of σ·k
        if let ModeOperator::PerMode { blocks, .. } = &rp {
            for (idx, b) in blocks.iter().enumerate() {
                let k = mode_of_index(kmode, idx);
                let expect = eigenprojection(mode_eta(k), 1);
                assert!(b.sub(&expect).norm() < 1e-12);
            }
        }
        // threshold invariance across (1.3, 1.7)
        let (rp2, _) = riesz_exactify(&qp, &qm, 1.35).unwrap();
        assert!(rp.sub_norm(&rp2) < 1e-10);
        let (rp3, _) = riesz_exactify(&qp, &qm, 1.65).unwrap();
        assert!(rp.sub_norm(&rp3) < 1e-10);
    }

    #[test]
    fn riesz_flrw_close_to_quantization() {
        let m = MetricModel::flrw(1.0, 0.1, 1.0).reduce();
        let (plus, minus) = build_projection_symbols(&m, GeneratorSign::ForPlusD, 2).unwrap();
        let kmode = 3;
        let qp = quantize_right(&m, &plus, 0.7, kmode);
        let qm = quantize_right(&m, &minus, 0.7, kmode);
        let (rp, _) = riesz_exactify(&qp, &qm, 1.5).unwrap();
        // compare per-mode (both are block diagonal here)
        if let (ModeOperator::PerMode { blocks: a, .. }, ModeOperator::PerMode { blocks: b, .. }) =
            (&rp, &qp)
        {
            let dev = a
                .iter()
                .zip(b)
                .map(|(x, y)| x.sub(y).norm())
                .fold(0.0f64, f64::max);
            assert!(dev <= 0.1, "deviation {dev}");
        } else {
            panic!("expected per-mode operators");
        }
    }

    #[test]
    fn dense_quantization_matches_per_mode_on_plane_waves() {
        // wavy preset forces the dense path; check it against a hand-computed
        // action on a single spinor plane wave for the degree-0 generator part
        let m = MetricModel::wavy(0.1).reduce();
        let (plus, _) = build_projection_symbols(&m, GeneratorSign::ForPlusD, 0).unwrap();
        let kmode = 2;
        let q = quantize_right(&m, &plus, 0.0, kmode);
        assert!(matches!(q, ModeOperator::Dense { .. }));
        // symbol is y-independent at leading order for this preset (ζ̃/|ζ̃| has
        // no y-dependence), so the dense matrix must be block diagonal
        let d = q.dimension();
        let mut off = 0.0f64;
        for r in 0..d {
            for c in 0..d {
                if r / 2 != c / 2 {
                    off = off.max(q.entry(r, c).norm());
                }
            }
        }
        assert!(off < 1e-12, "unexpected off-diagonal content {off}");
        let idx = mode_index(kmode, [1, -2, 0]);
        let b = Mat2::from_rows(
            q.entry(2 * idx, 2 * idx),
            q.entry(2 * idx, 2 * idx + 1),
            q.entry(2 * idx + 1, 2 * idx),
            q.entry(2 * idx + 1, 2 * idx + 1),
        );
        let expect = eigenprojection([1.0, -2.0, 0.0], 1);
        assert!(b.sub(&expect).norm() < 1e-10);
    }

    #[test]
    fn symbol_homogeneity_of_components() {
        let m = MetricModel::wavy(0.2).reduce();
        let (plus, _) = build_projection_symbols(&m, GeneratorSign::ForPlusD, 2).unwrap();
        let sp = sym_space(2, 2, 2);
        let y = [1.1, 0.4, 2.0];
        let eta = [0.9, -0.3, 0.7];
        for lam in [2.0f64, 5.0] {
            for (deg, tol) in [(0i32, 1e-9), (-1, 1e-9), (-2, 1e-8)] {
                let a1 = SymArgs::at(&sp, 0.3, y, eta);
                let al = SymArgs::at(&sp, 0.3, y, eta.map(|v| lam * v));
                let c = plus.sym.component(deg).unwrap();
                let v1 = mat_val(&(c.eval)(&a1));
                let vl = mat_val(&(c.eval)(&al));
                let scaled = v1.scale(Complex64::new(lam.powi(deg), 0.0));
                assert!(
                    vl.sub(&scaled).norm() < tol * (1.0 + scaled.norm()),
                    "degree {deg} λ {lam}: {}",
                    vl.sub(&scaled).norm()
                );
            }
        }
    }

    #[test]
    fn generator_symbol_matches_sigma() {
        let m = MetricModel::flrw(1.0, 0.2, 1.0).reduce();
        let a = generator_symbol(&m, GeneratorSign::ForMinusD);
        let sp = sym_space(0, 0, 0);
        let args = SymArgs::at(&sp, 0.4, [0.0; 3], [1.0, 2.0, -1.0]);
        let v = mat_val(&(a.component(1).unwrap().eval)(&args));
        let expect = sigma_of([1.0, 2.0, -1.0]).scale(Complex64::new(-1.0 / m.scale_factor(0.4), 0.0));
        assert!(v.sub(&expect).norm() < 1e-12);
    }
}
