//! Positive/negative null-flow machinery on the reduced spacetime: the flows
//! `(x±(t; s, y, η), ξ±(t; s, y, η))`, the complex phase functions `φ±` in surface
//! form, the half-density weights `w±`, and the smooth cut-offs `χ±`.
//!
//! The flow is the Hamiltonian flow of `±‖ξ‖_{ĥ_t}` in the spatial cotangent
//! bundle, which is the time-reparameterized null cogeodesic flow of the reduced
//! metric with the covector transported from the initial surface. Inside a
//! neighbourhood of the flow the phase is
//! `φ± = ⟨ξ±, x − x±⟩ + (i/2) ‖η‖_{h_s(y)} · dist²_{Σ_t}(x, x±)`,
//! which vanishes on the flow, has `∂_x φ± = ξ±` there, and has positive-definite
//! imaginary spatial Hessian `‖η‖ ĥ_t`. Outside it is blended into the constant
//! `i ‖η‖ r_in²` so that the imaginary part stays uniformly positive and the
//! extension region is suppressed exponentially in `‖η‖`.

use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::geometry::{det3, inv3, wrap_coord, wrap_diff, MetricModel, Preset};
use crate::jet::{Jet, JetSpace};
use crate::ode::{integrate_path, OdeOpts};

/// Maximum admissible `|t − s|` for flow integration.
pub const FLOW_HORIZON: f64 = 25.0;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FlowSign {
    Plus,
    Minus,
}

impl FlowSign {
    /// Direction factor `ε = ±1`.
    pub fn eps(self) -> f64 {
        match self {
            FlowSign::Plus => 1.0,
            FlowSign::Minus => -1.0,
        }
    }
}

/// A point of the flow: the propagated position/covector with its labels.
#[derive(Clone, Copy, Debug)]
pub struct FlowPoint {
    pub t: f64,
    pub s: f64,
    pub y: [f64; 3],
    pub eta: [f64; 3],
    pub x_flow: [f64; 3],
    pub xi_flow: [f64; 3],
    pub sign: FlowSign,
}

/// Phase evaluation with the derivative blocks the amplitude machinery consumes.
#[derive(Clone, Debug)]
pub struct PhaseEval {
    pub value: Complex64,
    pub dx: [Complex64; 3],
    pub deta: [Complex64; 3],
    pub dxdeta: [[Complex64; 3]; 3],
    pub dxdx: [[Complex64; 3]; 3],
    pub in_neighbourhood: bool,
}

/// Weight evaluation with branch-tracking status.
#[derive(Clone, Copy, Debug)]
pub struct WeightEval {
    pub value: Complex64,
    pub branch_continuous: bool,
}

/// Immutable context shared by phase/weight/cutoff evaluation: the reduced metric
/// and the inner/outer radii of the flow neighbourhood.
#[derive(Clone, Debug)]
pub struct PhaseCtx {
    pub m: MetricModel,
    pub r_in: f64,
    pub r_out: f64,
}

impl PhaseCtx {
    /// Radii default to 0.3 / 0.6 of the injectivity-radius estimate.
    pub fn new(m: &MetricModel) -> Self {
        let m = if m.reduced { m.clone() } else { m.reduce() };
        let nr = m.normal_radius();
        Self { m, r_in: 0.3 * nr, r_out: 0.6 * nr }
    }
}

/// 16-point Gauss–Legendre rule on [-1, 1] (nodes ≥ 0; mirror for the rest).
const GL16_X: [f64; 8] = [
    0.0950125098376374,
    0.2816035507792589,
    0.4580167776572274,
    0.6178762444026438,
    0.7554044083550030,
    0.8656312023878318,
    0.9445750230732326,
    0.9894009349916499,
];
const GL16_W: [f64; 8] = [
    0.1894506104550685,
    0.1826034150449236,
    0.1691565193950025,
    0.1495959888165767,
    0.1246289712555339,
    0.0951585116824928,
    0.0622535239386479,
    0.0271524594117541,
];

/// `∫_s^t dr / a(r)` for the FLRW preset (conformal-time difference).
pub fn conformal_time(m: &MetricModel, s: f64, t: f64) -> f64 {
    let panels = ((t - s).abs().ceil() as usize).max(1);
    let mut total = 0.0;
    for p in 0..panels {
        let lo = s + (t - s) * p as f64 / panels as f64;
        let hi = s + (t - s) * (p + 1) as f64 / panels as f64;
        let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        for k in 0..8 {
            for sgn in [-1.0, 1.0] {
                total += half * GL16_W[k] / m.scale_factor(mid + sgn * half * GL16_X[k]);
            }
        }
    }
    total
}

fn check_span(s: f64, t: f64) -> Result<()> {
    if (t - s).abs() > FLOW_HORIZON {
        return Err(Error::FlowEscape { span: (t - s).abs(), horizon: FLOW_HORIZON });
    }
    Ok(())
}

/// Zero every coefficient that involves the variables `lo..hi` (used to project
/// probe directions out of flow states).
fn strip_vars(j: &Jet, lo: usize, hi: usize) -> Jet {
    let mut out = j.clone();
    for i in 0..j.sp.len() {
        let e = j.sp.mono_exp(i);
        if (lo..hi).any(|v| e[v] != 0) {
            out.c[i] = Complex64::new(0.0, 0.0);
        }
    }
    out
}

/// Flow position/covector as jets in the covector directions. The returned jets
/// live in `sp`; variables `be..be+3` are the η directions (centered at `eta0`)
/// and variables `bx..bx+3` are free for use as spatial probes (the result does
/// not depend on them). Requires a spatial-probe cap of at least 1 for metrics
/// without a closed-form flow.
pub fn flow_jets(
    m: &MetricModel,
    sign: FlowSign,
    s: f64,
    y: [f64; 3],
    eta0: [f64; 3],
    t: f64,
    sp: &Arc<JetSpace>,
    bx: usize,
    be: usize,
) -> Result<([Jet; 3], [Jet; 3])> {
    check_span(s, t)?;
    assert!(eta0.iter().any(|v| *v != 0.0), "zero covector direction");
    let eps = sign.eps();
    let etaj: [Jet; 3] = std::array::from_fn(|a| sp.rvar(be + a, eta0[a]));
    match &m.preset {
        Preset::UltrastaticTorus | Preset::FlrwTorus { .. } => {
            // conformally flat spatial metric ⇒ straight coordinate rays at the
            // conformal-time rate; the covector is constant.
            let theta = match &m.preset {
                Preset::UltrastaticTorus => t - s,
                _ => conformal_time(m, s, t),
            };
            let norm2 = etaj[0]
                .mul(&etaj[0])
                .add(&etaj[1].mul(&etaj[1]))
                .add(&etaj[2].mul(&etaj[2]));
            let ninv = norm2.sqrt().inv();
            let x = std::array::from_fn(|a| {
                etaj[a]
                    .mul(&ninv)
                    .rscale(eps * theta)
                    .add(&sp.constant(Complex64::new(y[a], 0.0)))
            });
            Ok((x, etaj))
        }
        Preset::WavyTorus { .. } | Preset::CustomTable(_) => {
            let mr = if m.reduced { m.clone() } else { m.reduce() };
            let mut y0: Vec<Jet> = Vec::with_capacity(6);
            for v in y {
                y0.push(sp.constant(Complex64::new(v, 0.0)));
            }
            y0.extend(etaj.iter().cloned());
            let opts = OdeOpts { rtol: 1e-11, atol: 1e-11, ..OdeOpts::default() };
            let out = integrate_path(
                &mut |tc, st: &Vec<Jet>| {
                    let tj = sp.constant(Complex64::new(tc, 0.0));
                    let xprobe: [Jet; 3] = std::array::from_fn(|a| st[a].add(&sp.rvar(bx + a, 0.0)));
                    let hinv = inv3(&mr.h_jet(&tj, &xprobe));
                    let mut n2 = sp.constant(Complex64::new(0.0, 0.0));
                    for a in 0..3 {
                        for b in 0..3 {
                            n2 = n2.add(&hinv[a][b].mul(&st[3 + a]).mul(&st[3 + b]));
                        }
                    }
                    let norm = n2.sqrt();
                    let ninv = norm.inv();
                    let mut rhs = Vec::with_capacity(6);
                    for a in 0..3 {
                        let mut v = sp.constant(Complex64::new(0.0, 0.0));
                        for b in 0..3 {
                            v = v.add(&hinv[a][b].mul(&st[3 + b]));
                        }
                        rhs.push(strip_vars(&v.mul(&ninv).rscale(eps), bx, bx + 3));
                    }
                    for a in 0..3 {
                        rhs.push(strip_vars(&norm.diff(bx + a).rscale(-eps), bx, bx + 3));
                    }
                    rhs
                },
                s,
                y0,
                &[t],
                &opts,
            )?;
            let st = &out[0];
            Ok((
                std::array::from_fn(|a| st[a].clone()),
                std::array::from_fn(|a| st[3 + a].clone()),
            ))
        }
    }
}

/// The flow through `(s, y, η)` evaluated at time `t`.
pub fn levi_civita_flow(
    m: &MetricModel,
    sign: FlowSign,
    s: f64,
    y: [f64; 3],
    eta: [f64; 3],
    t: f64,
) -> Result<FlowPoint> {
    let sp = JetSpace::new(&[(3, 1), (3, 0)]);
    let (x, xi) = flow_jets(m, sign, s, y, eta, t, &sp, 0, 3)?;
    Ok(FlowPoint {
        t,
        s,
        y,
        eta,
        x_flow: std::array::from_fn(|a| wrap_coord(x[a].val().re)),
        xi_flow: std::array::from_fn(|a| xi[a].val().re),
        sign,
    })
}

/// `‖η‖_{h_s(y)}` as a jet of the η variables `be..be+3` centered at `eta0`.
fn eta_norm_jet(
    m: &MetricModel,
    s: f64,
    y: [f64; 3],
    eta0: [f64; 3],
    sp: &Arc<JetSpace>,
    be: usize,
) -> Jet {
    let sp0 = JetSpace::new(&[(4, 0)]);
    let tj = sp0.rvar(0, s);
    let xj = [sp0.rvar(1, y[0]), sp0.rvar(2, y[1]), sp0.rvar(3, y[2])];
    let h = m.h_jet(&tj, &xj).map(|r| r.map(|e| e.val().re));
    let hm = nalgebra::Matrix3::from_fn(|r, c| h[r][c]);
    let hinv = hm.try_inverse().expect("singular spatial metric");
    let mut n2 = sp.constant(Complex64::new(0.0, 0.0));
    for a in 0..3 {
        for b in 0..3 {
            let e = sp.rvar(be + a, eta0[a]).mul(&sp.rvar(be + b, eta0[b]));
            n2 = n2.add(&e.rscale(hinv[(a, b)]));
        }
    }
    n2.sqrt()
}

/// `C^∞` transition equal to 0 for `z ≤ 0` and 1 for `z ≥ 1`.
fn smoothstep_jet(z: &Jet) -> Jet {
    let zv = z.val().re;
    if zv <= 1e-12 {
        return z.sp.constant(Complex64::new(0.0, 0.0));
    }
    if zv >= 1.0 - 1e-12 {
        return z.sp.constant(Complex64::new(1.0, 0.0));
    }
    let one = z.sp.constant(Complex64::new(1.0, 0.0));
    let f = |u: &Jet| u.inv().neg().exp();
    let fz = f(z);
    let fo = f(&one.sub(z));
    fz.div(&fz.add(&fo))
}

/// Scalar version of [`smoothstep_jet`].
pub fn smoothstep(z: f64) -> f64 {
    if z <= 0.0 {
        0.0
    } else if z >= 1.0 {
        1.0
    } else {
        let f = |u: f64| (-1.0 / u).exp();
        f(z) / (f(z) + f(1.0 - z))
    }
}

/// Phase as a jet; variables `bx..bx+3` are x (centered at `x0`), `be..be+3` are η
/// (centered at `eta0`). Returns the jet and the `in_neighbourhood` flag.
pub fn phase_jet(
    ctx: &PhaseCtx,
    sign: FlowSign,
    t: f64,
    x0: [f64; 3],
    s: f64,
    y: [f64; 3],
    eta0: [f64; 3],
    sp: &Arc<JetSpace>,
    bx: usize,
    be: usize,
) -> Result<(Jet, bool)> {
    let m = &ctx.m;
    let (xf, xif) = flow_jets(m, sign, s, y, eta0, t, sp, bx, be)?;
    // torus-minimal offset u = x − x±, as a jet whose constant term is wrapped
    let u: [Jet; 3] = std::array::from_fn(|a| {
        let shift = wrap_diff(x0[a], xf[a].val().re) - (x0[a] - xf[a].val().re);
        sp.rvar(bx + a, x0[a]).sub(&xf[a]).add(&sp.constant(Complex64::new(shift, 0.0)))
    });
    let norm = eta_norm_jet(m, s, y, eta0, sp, be);
    // spatial metric at the flow point (η-dependent through x±)
    let tj = sp.constant(Complex64::new(t, 0.0));
    let ht = m.h_jet(&tj, &xf);
    let mut dist2 = sp.constant(Complex64::new(0.0, 0.0));
    for a in 0..3 {
        for b in 0..3 {
            dist2 = dist2.add(&ht[a][b].mul(&u[a]).mul(&u[b]));
        }
    }
    let mut linear = sp.constant(Complex64::new(0.0, 0.0));
    for a in 0..3 {
        linear = linear.add(&xif[a].mul(&u[a]));
    }
    let phi_in = linear.add(&norm.mul(&dist2).scale(Complex64::new(0.0, 0.5)));
    let dval = dist2.val().re.max(0.0).sqrt();
    if dval <= ctx.r_in {
        return Ok((phi_in, true));
    }
    let far = norm.scale(Complex64::new(0.0, ctx.r_in * ctx.r_in));
    if dval >= ctx.r_out {
        return Ok((far, false));
    }
    let dist = dist2.sqrt();
    let z = dist
        .neg()
        .add(&sp.constant(Complex64::new(ctx.r_out, 0.0)))
        .rscale(1.0 / (ctx.r_out - ctx.r_in));
    let mu = smoothstep_jet(&z);
    let one = sp.constant(Complex64::new(1.0, 0.0));
    Ok((one.sub(&mu).mul(&far).add(&mu.mul(&phi_in)), false))
}

/// Full phase evaluation with all derivative blocks.
pub fn phase(
    ctx: &PhaseCtx,
    sign: FlowSign,
    t: f64,
    x: [f64; 3],
    s: f64,
    y: [f64; 3],
    eta: [f64; 3],
) -> Result<PhaseEval> {
    let sp = JetSpace::new(&[(3, 2), (3, 1)]);
    let (phi, inside) = phase_jet(ctx, sign, t, x, s, y, eta, &sp, 0, 3)?;
    let blk = |e: &[u8]| phi.coeff(e);
    let mut dx = [Complex64::new(0.0, 0.0); 3];
    let mut deta = dx;
    let mut dxdeta = [[Complex64::new(0.0, 0.0); 3]; 3];
    let mut dxdx = dxdeta;
    for a in 0..3 {
        let mut ex = [0u8; 6];
        ex[a] = 1;
        dx[a] = blk(&ex);
        let mut ee = [0u8; 6];
        ee[3 + a] = 1;
        deta[a] = blk(&ee);
        for b in 0..3 {
            let mut em = [0u8; 6];
            em[a] += 1;
            em[3 + b] += 1;
            dxdeta[a][b] = blk(&em);
            let mut exx = [0u8; 6];
            exx[a] += 1;
            exx[b] += 1;
            let fac = if a == b { 2.0 } else { 1.0 };
            dxdx[a][b] = blk(&exx) * fac;
        }
    }
    Ok(PhaseEval { value: phi.val(), dx, deta, dxdeta, dxdx, in_neighbourhood: inside })
}

/// Residual of the conjugation symmetry `φ⁺(η) = −conj(φ⁻(−η))`.
pub fn phase_conjugation_check(
    ctx: &PhaseCtx,
    t: f64,
    x: [f64; 3],
    s: f64,
    y: [f64; 3],
    eta: [f64; 3],
) -> Result<f64> {
    let p = phase(ctx, FlowSign::Plus, t, x, s, y, eta)?;
    let mneg = [-eta[0], -eta[1], -eta[2]];
    let q = phase(ctx, FlowSign::Minus, t, x, s, y, mneg)?;
    Ok((p.value + q.value.conj()).norm())
}

/// Riemannian density `√det h_t(x)` of the reduced spatial metric.
pub fn riemannian_density(m: &MetricModel, t: f64, x: [f64; 3]) -> f64 {
    let sp = JetSpace::new(&[(4, 0)]);
    let tj = sp.rvar(0, t);
    let xj = [sp.rvar(1, x[0]), sp.rvar(2, x[1]), sp.rvar(3, x[2])];
    det3(&m.h_jet(&tj, &xj)).val().re.sqrt()
}

/// `det ∂²φ/∂x∂η` at a sample.
fn mixed_hessian_det(
    ctx: &PhaseCtx,
    sign: FlowSign,
    t: f64,
    x: [f64; 3],
    s: f64,
    y: [f64; 3],
    eta: [f64; 3],
) -> Result<Complex64> {
    let sp = JetSpace::new(&[(3, 1), (3, 1)]);
    let (phi, _) = phase_jet(ctx, sign, t, x, s, y, eta, &sp, 0, 3)?;
    let mut m2 = [[Complex64::new(0.0, 0.0); 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            let mut e = [0u8; 6];
            e[a] += 1;
            e[3 + b] += 1;
            m2[a][b] = phi.coeff(&e);
        }
    }
    Ok(m2[0][0] * (m2[1][1] * m2[2][2] - m2[1][2] * m2[2][1])
        - m2[0][1] * (m2[1][0] * m2[2][2] - m2[1][2] * m2[2][0])
        + m2[0][2] * (m2[1][0] * m2[2][1] - m2[1][1] * m2[2][0]))
}

/// Weight `w± = [ρ_{h_s}(y) ρ_{h_t}(x)]^{−1/2} [(det φ_{xη})²]^{1/4}` with the
/// complex-root branch tracked by continuity along a path from the diagonal
/// (first along the flow in time, then radially in x).
pub fn weight(
    ctx: &PhaseCtx,
    sign: FlowSign,
    t: f64,
    x: [f64; 3],
    s: f64,
    y: [f64; 3],
    eta: [f64; 3],
) -> Result<WeightEval> {
    let steps = 24usize;
    let mut w_cur = Complex64::new(1.0, 0.0); // sqrt(det) at the diagonal
    let mut continuous = true;
    let track = |det: Complex64, w_cur: &mut Complex64, continuous: &mut bool| {
        let r = det.sqrt();
        let cand = if (r - *w_cur).norm() <= (-r - *w_cur).norm() { r } else { -r };
        if (cand - *w_cur).norm() > 0.5 * (1.0 + w_cur.norm()) {
            *continuous = false;
        }
        *w_cur = cand;
    };
    // leg 1: move time from s to t staying on the flow
    for k in 1..=steps {
        let tk = s + (t - s) * k as f64 / steps as f64;
        let fp = levi_civita_flow(&ctx.m, sign, s, y, eta, tk)?;
        let det = mixed_hessian_det(ctx, sign, tk, fp.x_flow, s, y, eta)?;
        track(det, &mut w_cur, &mut continuous);
    }
    // leg 2: move x from x±(t) to the target along the minimal segment
    let fp = levi_civita_flow(&ctx.m, sign, s, y, eta, t)?;
    let du: [f64; 3] = std::array::from_fn(|a| wrap_diff(x[a], fp.x_flow[a]));
    let mut last_det = Complex64::new(1.0, 0.0);
    for k in 1..=steps {
        let lam = k as f64 / steps as f64;
        let xk = std::array::from_fn(|a| fp.x_flow[a] + lam * du[a]);
        last_det = mixed_hessian_det(ctx, sign, t, xk, s, y, eta)?;
        track(last_det, &mut w_cur, &mut continuous);
    }
    let dist = {
        let h = ctx.m.h(t, fp.x_flow);
        (0..3)
            .map(|a| (0..3).map(|b| h[a][b] * du[a] * du[b]).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    };
    if last_det.norm() < 1e-12 && dist <= ctx.r_in {
        return Err(Error::DegenerateMixedHessian(last_det.norm()));
    }
    let dens = (riemannian_density(&ctx.m, s, y) * riemannian_density(&ctx.m, t, x)).sqrt();
    Ok(WeightEval { value: w_cur / dens, branch_continuous: continuous })
}

/// Smooth cut-off `χ±`: vanishes for `‖η‖_{h_s} ≤ 1/2`, equals 1 for `‖η‖ ≥ 1`
/// near the flow, vanishes beyond the outer radius, and is 0-homogeneous in η
/// for `‖η‖ ≥ 1`.
pub fn cutoff(
    ctx: &PhaseCtx,
    sign: FlowSign,
    t: f64,
    x: [f64; 3],
    s: f64,
    y: [f64; 3],
    eta: [f64; 3],
) -> Result<f64> {
    let sp = JetSpace::new(&[(3, 0), (3, 0)]);
    let norm = eta_norm_jet(&ctx.m, s, y, eta, &sp, 3).val().re;
    let radial = smoothstep((norm - 0.5) / 0.5);
    if radial == 0.0 {
        return Ok(0.0);
    }
    let fp = levi_civita_flow(&ctx.m, sign, s, y, eta, t)?;
    let du: [f64; 3] = std::array::from_fn(|a| wrap_diff(x[a], fp.x_flow[a]));
    let h = ctx.m.h(t, fp.x_flow);
    let dist = (0..3)
        .map(|a| (0..3).map(|b| h[a][b] * du[a] * du[b]).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    let spatial = smoothstep((ctx.r_out - dist) / (ctx.r_out - ctx.r_in));
    Ok(radial * spatial)
}
