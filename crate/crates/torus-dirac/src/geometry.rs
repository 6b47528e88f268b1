//! Spacetime geometry on `ℝ × T³` with metric `g = −β² dt² + h_t`: metric presets,
//! conformal reduction to unit lapse, volume-density ratio, mean curvature,
//! cogeodesic flow, parallel transport of covectors and the Ruse–Synge world
//! function computed by Newton shooting on the exponential map.
//!
//! Conventions: spatial coordinates live on `[0, 2π)³`; the signature is
//! `(−,+,+,+)`; the world function is negative on timelike separation.

use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::jet::{Jet, JetSpace};
use crate::ode::{integrate_path, integrate_to, OdeOpts};

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Reduce a coordinate to `[0, 2π)`.
pub fn wrap_coord(x: f64) -> f64 {
    x.rem_euclid(TWO_PI)
}

/// Signed difference `a − b` reduced to `(−π, π]` (torus-minimal representative).
pub fn wrap_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TWO_PI);
    if d > std::f64::consts::PI {
        d - TWO_PI
    } else {
        d
    }
}

/// A point of the spacetime `ℝ × T³`.
#[derive(Clone, Copy, Debug)]
pub struct SpacetimePoint {
    pub t: f64,
    pub x: [f64; 3],
}

impl SpacetimePoint {
    pub fn new(t: f64, x: [f64; 3]) -> Self {
        Self { t, x: [wrap_coord(x[0]), wrap_coord(x[1]), wrap_coord(x[2])] }
    }
}

/// A cotangent vector attached to a spacetime point; `xi = (ξ_0, ξ_1, ξ_2, ξ_3)`.
#[derive(Clone, Copy, Debug)]
pub struct CovectorAtPoint {
    pub base: SpacetimePoint,
    pub xi: [f64; 4],
}

/// One sample of a cogeodesic path: parameter value, position and momentum covector.
#[derive(Clone, Copy, Debug)]
pub struct GeodesicPoint {
    pub tau: f64,
    pub t: f64,
    pub x: [f64; 3],
    pub xi: [f64; 4],
}

/// World-function evaluation with both point-gradients.
#[derive(Clone, Copy, Debug)]
pub struct WorldFunctionEval {
    pub value: f64,
    /// Gradient with respect to the first argument.
    pub grad_first: [f64; 4],
    /// Gradient with respect to the second argument.
    pub grad_second: [f64; 4],
    pub converged: bool,
}

/// Tabulated metric data for the `CustomTable` preset: values of `h` and `β` on a
/// uniform periodic spatial grid at a sorted list of times. Space is interpolated
/// trilinearly with periodic wrap; time by a local (Catmull–Rom) cubic.
#[derive(Clone, Debug)]
pub struct MetricTable {
    pub times: Vec<f64>,
    pub n: usize,
    /// `h[ti][site][k]` with `site = (i1*n + i2)*n + i3` and `k` indexing the six
    /// components `(h11,h12,h13,h22,h23,h33)`; the seventh slot stores `β`.
    pub data: Vec<Vec<[f64; 7]>>,
}

impl MetricTable {
    /// Parse the CSV interchange format with header
    /// `t,x1,x2,x3,h11,h12,h13,h22,h23,h33,beta`. Rows may come in any order; the
    /// spatial grid must be the uniform grid `x_i = 2π k/n`.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Config("empty metric table".into()))?;
        let expect = "t,x1,x2,x3,h11,h12,h13,h22,h23,h33,beta";
        if header.trim().replace(' ', "") != expect {
            return Err(Error::Config(format!("metric table header must be `{expect}`")));
        }
        let mut rows: Vec<[f64; 11]> = Vec::new();
        for line in lines {
            let vals: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("bad metric table row `{line}`: {e}")))?;
            if vals.len() != 11 {
                return Err(Error::Config(format!("metric table row has {} fields", vals.len())));
            }
            let mut r = [0.0; 11];
            r.copy_from_slice(&vals);
            rows.push(r);
        }
        let mut times: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        times.sort_by(f64::total_cmp);
        times.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        // infer n from the count of distinct x1 values at the first time
        let mut x1s: Vec<f64> = rows
            .iter()
            .filter(|r| (r[0] - times[0]).abs() < 1e-12)
            .map(|r| r[1])
            .collect();
        x1s.sort_by(f64::total_cmp);
        x1s.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        let n = x1s.len();
        if n == 0 || rows.len() != times.len() * n * n * n {
            return Err(Error::Config("metric table is not a full t × n³ grid".into()));
        }
        let mut data = vec![vec![[0.0; 7]; n * n * n]; times.len()];
        let step = TWO_PI / n as f64;
        let idx_of = |x: f64| -> Result<usize> {
            let k = x / step;
            let ki = k.round() as i64;
            if (k - ki as f64).abs() > 1e-8 {
                return Err(Error::Config(format!("x value {x} is off the uniform grid")));
            }
            Ok(ki.rem_euclid(n as i64) as usize)
        };
        for r in &rows {
            let ti = times.partition_point(|&t| t < r[0] - 1e-12);
            let (i1, i2, i3) = (idx_of(r[1])?, idx_of(r[2])?, idx_of(r[3])?);
            let mut cell = [0.0; 7];
            cell[..6].copy_from_slice(&r[4..10]);
            cell[6] = r[10];
            data[ti][(i1 * n + i2) * n + i3] = cell;
        }
        Ok(Self { times, n, data })
    }

    /// Catmull–Rom weights in time: returns the bracketing index `j` and the four
    /// cubic coefficients for samples `j−1..j+2` (clamped at the ends).
    fn time_stencil(&self, t: f64) -> (usize, [f64; 4]) {
        let m = self.times.len();
        if m == 1 {
            return (0, [0.0, 1.0, 0.0, 0.0]);
        }
        let j = self.times.partition_point(|&tv| tv <= t).clamp(1, m - 1) - 1;
        let (t0, t1) = (self.times[j], self.times[j + 1]);
        let u = ((t - t0) / (t1 - t0)).clamp(-1.0, 2.0);
        let (u2, u3) = (u * u, u * u * u);
        (
            j,
            [
                -0.5 * u3 + u2 - 0.5 * u,
                1.5 * u3 - 2.5 * u2 + 1.0,
                -1.5 * u3 + 2.0 * u2 + 0.5 * u,
                0.5 * u3 - 0.5 * u2,
            ],
        )
    }

    /// Evaluate the seven interpolated channels on jet inputs. Time enters through
    /// `tj` (the interpolation is polynomial within each bracket), space through
    /// periodic trilinear weights in `xj`.
    fn eval_jets(&self, tj: &Jet, xj: &[Jet; 3]) -> [Jet; 7] {
        let sp = tj.sp.clone();
        let m = self.times.len();
        let (j, _) = self.time_stencil(tj.val().re);
        // rebuild the cubic weights as jets of the normalized time variable
        let wts: [Jet; 4] = if m == 1 {
            [
                sp.constant(Complex64::new(0.0, 0.0)),
                sp.constant(Complex64::new(1.0, 0.0)),
                sp.constant(Complex64::new(0.0, 0.0)),
                sp.constant(Complex64::new(0.0, 0.0)),
            ]
        } else {
            let (t0, t1) = (self.times[j], self.times[j + 1]);
            let u = tj.sub(&sp.constant(Complex64::new(t0, 0.0))).rscale(1.0 / (t1 - t0));
            let u2 = u.mul(&u);
            let u3 = u2.mul(&u);
            let c = |a: f64, b: f64, cc: f64, d: f64| {
                u3.rscale(a)
                    .add(&u2.rscale(b))
                    .add(&u.rscale(cc))
                    .add(&sp.constant(Complex64::new(d, 0.0)))
            };
            [
                c(-0.5, 1.0, -0.5, 0.0),
                c(1.5, -2.5, 0.0, 1.0),
                c(-1.5, 2.0, 0.5, 0.0),
                c(0.5, -0.5, 0.0, 0.0),
            ]
        };
        let step = TWO_PI / self.n as f64;
        // spatial cell and linear weights as jets
        let mut cell = [0usize; 3];
        let mut lw: Vec<[Jet; 2]> = Vec::with_capacity(3);
        for a in 0..3 {
            let xv = xj[a].val().re.rem_euclid(TWO_PI);
            let k = (xv / step).floor() as usize % self.n;
            cell[a] = k;
            let frac = xj[a]
                .sub(&sp.constant(Complex64::new((xv / step).floor() * step + (xj[a].val().re - xv), 0.0)))
                .rscale(1.0 / step);
            let one = sp.constant(Complex64::new(1.0, 0.0));
            lw.push([one.sub(&frac), frac]);
        }
        let zero = sp.constant(Complex64::new(0.0, 0.0));
        let mut out: [Jet; 7] = std::array::from_fn(|_| zero.clone());
        for (dj, wt) in wts.iter().enumerate() {
            if wt.max_abs() == 0.0 {
                continue;
            }
            let ti = (j + dj).saturating_sub(1).min(m - 1);
            let slab = &self.data[ti];
            for d1 in 0..2 {
                for d2 in 0..2 {
                    for d3 in 0..2 {
                        let site = ((cell[0] + d1) % self.n * self.n + (cell[1] + d2) % self.n)
                            * self.n
                            + (cell[2] + d3) % self.n;
                        let w = wt.mul(&lw[0][d1]).mul(&lw[1][d2]).mul(&lw[2][d3]);
                        let vals = &slab[site];
                        for k in 0..7 {
                            out[k] = out[k].add(&w.rscale(vals[k]));
                        }
                    }
                }
            }
        }
        out
    }
}

/// Metric presets. `Flrw` uses scale factor `a(t) = a0 (1 + eps sin(ω t))`; `Wavy`
/// is the static conformally flat metric `h = c(x)² δ`, `c = 1 + eps cos(x₁)`,
/// which exercises the spatially inhomogeneous code paths.
#[derive(Clone, Debug)]
pub enum Preset {
    UltrastaticTorus,
    FlrwTorus { a0: f64, eps: f64, omega: f64 },
    WavyTorus { eps: f64 },
    CustomTable(Arc<MetricTable>),
}

/// The single source of geometric truth: lapse `β` and spatial metric `h_t`,
/// both evaluable on truncated Taylor (jet) inputs so that every derivative the
/// downstream calculus needs is exact.
#[derive(Clone, Debug)]
pub struct MetricModel {
    pub preset: Preset,
    /// When set, the model presents the conformally reduced data `β̂ ≡ 1`,
    /// `ĥ = β⁻² h`; the original lapse stays available for the data map `ψ ↦ βψ`.
    pub reduced: bool,
}

impl MetricModel {
    pub fn new(preset: Preset) -> Self {
        Self { preset, reduced: false }
    }

    pub fn ultrastatic() -> Self {
        Self::new(Preset::UltrastaticTorus)
    }

    pub fn flrw(a0: f64, eps: f64, omega: f64) -> Self {
        Self::new(Preset::FlrwTorus { a0, eps, omega })
    }

    pub fn wavy(eps: f64) -> Self {
        Self::new(Preset::WavyTorus { eps })
    }

    /// FLRW scale factor as a jet (identity 1 for the other presets).
    pub fn scale_factor_jet(&self, tj: &Jet) -> Jet {
        match &self.preset {
            Preset::FlrwTorus { a0, eps, omega } => {
                tj.rscale(*omega).sin().rscale(a0 * eps).add(&tj.sp.constant(Complex64::new(*a0, 0.0)))
            }
            _ => tj.sp.constant(Complex64::new(1.0, 0.0)),
        }
    }

    pub fn scale_factor(&self, t: f64) -> f64 {
        match &self.preset {
            Preset::FlrwTorus { a0, eps, omega } => a0 * (1.0 + eps * (omega * t).sin()),
            _ => 1.0,
        }
    }

    /// Lapse of the underlying (unreduced) model on jets.
    pub fn beta_raw_jet(&self, tj: &Jet, xj: &[Jet; 3]) -> Jet {
        match &self.preset {
            Preset::UltrastaticTorus | Preset::FlrwTorus { .. } | Preset::WavyTorus { .. } => {
                tj.sp.constant(Complex64::new(1.0, 0.0))
            }
            Preset::CustomTable(tab) => tab.eval_jets(tj, xj)[6].clone(),
        }
    }

    /// Spatial metric of the underlying model on jets (symmetric 3×3).
    pub fn h_raw_jet(&self, tj: &Jet, xj: &[Jet; 3]) -> [[Jet; 3]; 3] {
        let sp = tj.sp.clone();
        let zero = sp.constant(Complex64::new(0.0, 0.0));
        match &self.preset {
            Preset::UltrastaticTorus => {
                let one = sp.constant(Complex64::new(1.0, 0.0));
                diag3(&one, &zero)
            }
            Preset::FlrwTorus { .. } => {
                let a = self.scale_factor_jet(tj);
                diag3(&a.mul(&a), &zero)
            }
            Preset::WavyTorus { eps } => {
                let c = xj[0].cos().rscale(*eps).add(&sp.constant(Complex64::new(1.0, 0.0)));
                diag3(&c.mul(&c), &zero)
            }
            Preset::CustomTable(tab) => {
                let v = tab.eval_jets(tj, xj);
                [
                    [v[0].clone(), v[1].clone(), v[2].clone()],
                    [v[1].clone(), v[3].clone(), v[4].clone()],
                    [v[2].clone(), v[4].clone(), v[5].clone()],
                ]
            }
        }
    }

    /// Effective lapse: 1 after reduction.
    pub fn beta_jet(&self, tj: &Jet, xj: &[Jet; 3]) -> Jet {
        if self.reduced {
            tj.sp.constant(Complex64::new(1.0, 0.0))
        } else {
            self.beta_raw_jet(tj, xj)
        }
    }

    /// Effective spatial metric: `β⁻² h` after reduction.
    pub fn h_jet(&self, tj: &Jet, xj: &[Jet; 3]) -> [[Jet; 3]; 3] {
        let h = self.h_raw_jet(tj, xj);
        if self.reduced {
            let b = self.beta_raw_jet(tj, xj);
            let s = b.mul(&b).inv();
            h.map(|row| row.map(|e| e.mul(&s)))
        } else {
            h
        }
    }

    /// Conformal reduction: the returned model has unit lapse and `ĥ = β⁻² h`.
    /// Idempotent. The data-map factor `β` for `ψ ↦ βψ` remains available via
    /// [`MetricModel::data_map_beta`].
    pub fn reduce(&self) -> MetricModel {
        MetricModel { preset: self.preset.clone(), reduced: true }
    }

    /// The lapse of the pre-reduction model, used to round-trip spinor data.
    pub fn data_map_beta(&self, t: f64, x: [f64; 3]) -> f64 {
        let sp = JetSpace::new(&[(4, 0)]);
        let tj = sp.rvar(0, t);
        let xj = [sp.rvar(1, x[0]), sp.rvar(2, x[1]), sp.rvar(3, x[2])];
        self.beta_raw_jet(&tj, &xj).val().re
    }

    /// Point values of `h` (post-reduction if reduced).
    pub fn h(&self, t: f64, x: [f64; 3]) -> [[f64; 3]; 3] {
        let sp = JetSpace::new(&[(4, 0)]);
        let tj = sp.rvar(0, t);
        let xj = [sp.rvar(1, x[0]), sp.rvar(2, x[1]), sp.rvar(3, x[2])];
        self.h_jet(&tj, &xj).map(|r| r.map(|e| e.val().re))
    }

    pub fn beta(&self, t: f64, x: [f64; 3]) -> f64 {
        let sp = JetSpace::new(&[(4, 0)]);
        let tj = sp.rvar(0, t);
        let xj = [sp.rvar(1, x[0]), sp.rvar(2, x[1]), sp.rvar(3, x[2])];
        self.beta_jet(&tj, &xj).val().re
    }

    /// `∂_t h` (post-reduction), from the exact time-jet.
    pub fn dh_dt(&self, t: f64, x: [f64; 3]) -> [[f64; 3]; 3] {
        let sp = JetSpace::new(&[(1, 1), (3, 0)]);
        let tj = sp.rvar(0, t);
        let xj = [sp.rvar(1, x[0]), sp.rvar(2, x[1]), sp.rvar(3, x[2])];
        self.h_jet(&tj, &xj).map(|r| r.map(|e| e.diff(0).val().re))
    }

    /// Volume-density ratio `ρ(t,x) = (det ĥ_t(x) / det ĥ_0(x))^{1/4}` of the
    /// reduced model.
    pub fn density_ratio(&self, t: f64, x: [f64; 3]) -> Result<f64> {
        assert!(self.reduced, "density_ratio requires the reduced model");
        let sp = JetSpace::new(&[(4, 0)]);
        let tj = sp.rvar(0, t);
        let xj = [sp.rvar(1, x[0]), sp.rvar(2, x[1]), sp.rvar(3, x[2])];
        let j = self.density_ratio_jet(&tj, &xj)?;
        Ok(j.val().re)
    }

    /// Jet-valued density ratio; `tj`/`xj` may carry derivative directions.
    pub fn density_ratio_jet(&self, tj: &Jet, xj: &[Jet; 3]) -> Result<Jet> {
        let det_t = det3(&self.h_jet(tj, xj));
        let t0 = tj.sp.constant(Complex64::new(0.0, 0.0));
        let det_0 = det3(&self.h_jet(&t0, xj));
        let (dt, d0) = (det_t.val().re, det_0.val().re);
        if dt <= 0.0 || d0 <= 0.0 {
            return Err(Error::NonPositiveDeterminant {
                t: tj.val().re,
                x: [xj[0].val().re, xj[1].val().re, xj[2].val().re],
            });
        }
        Ok(det_t.div(&det_0).powf(0.25))
    }

    /// Mean curvature `H_t` of the slice, from `−3H = ½ ∂_t ln det h`.
    pub fn mean_curvature(&self, t: f64, x: [f64; 3]) -> f64 {
        let sp = JetSpace::new(&[(1, 1), (3, 0)]);
        let tj = sp.rvar(0, t);
        let xj = [sp.rvar(1, x[0]), sp.rvar(2, x[1]), sp.rvar(3, x[2])];
        let det = det3(&self.h_jet(&tj, &xj));
        let dlog = det.ln().diff(0).val().re;
        -dlog / 6.0
    }

    /// Spacetime metric components `(g_00, g_αβ) = (−β², h)` on jets.
    fn g_blocks_jet(&self, tj: &Jet, xj: &[Jet; 3]) -> (Jet, [[Jet; 3]; 3]) {
        let b = self.beta_jet(tj, xj);
        (b.mul(&b).rscale(-1.0), self.h_jet(tj, xj))
    }

    /// Christoffel symbols `Γ^λ_{μν}` of `g` at a point (indices 0..4, 0 = time).
    pub fn christoffel(&self, t: f64, x: [f64; 3]) -> [[[f64; 4]; 4]; 4] {
        let sp = JetSpace::new(&[(4, 1)]);
        let tj = sp.rvar(0, t);
        let xj = [sp.rvar(1, x[0]), sp.rvar(2, x[1]), sp.rvar(3, x[2])];
        let (g00, h) = self.g_blocks_jet(&tj, &xj);
        // g and ∂g as plain numbers
        let mut g = [[0.0f64; 4]; 4];
        let mut dg = [[[0.0f64; 4]; 4]; 4]; // dg[ρ][μ][ν] = ∂_ρ g_{μν}
        g[0][0] = g00.val().re;
        for r in 0..4 {
            dg[r][0][0] = g00.diff(r).val().re;
        }
        for a in 0..3 {
            for b in 0..3 {
                g[a + 1][b + 1] = h[a][b].val().re;
                for r in 0..4 {
                    dg[r][a + 1][b + 1] = h[a][b].diff(r).val().re;
                }
            }
        }
        // block-diagonal inverse
        let hinv = inv3_f64([
            [g[1][1], g[1][2], g[1][3]],
            [g[2][1], g[2][2], g[2][3]],
            [g[3][1], g[3][2], g[3][3]],
        ]);
        let mut ginv = [[0.0f64; 4]; 4];
        ginv[0][0] = 1.0 / g[0][0];
        for a in 0..3 {
            for b in 0..3 {
                ginv[a + 1][b + 1] = hinv[a][b];
            }
        }
        let mut gam = [[[0.0f64; 4]; 4]; 4];
        for l in 0..4 {
            for m in 0..4 {
                for nn in 0..4 {
                    let mut s = 0.0;
                    for r in 0..4 {
                        s += ginv[l][r] * (dg[m][r][nn] + dg[nn][r][m] - dg[r][m][nn]);
                    }
                    gam[l][m][nn] = 0.5 * s;
                }
            }
        }
        gam
    }

    /// Rough injectivity-radius scale `π · min-eig(h)^{1/2}` over a coarse sample;
    /// the world function refuses beyond a fraction of this.
    pub fn normal_radius(&self) -> f64 {
        let mut min_eig = f64::INFINITY;
        for it in -4..=4 {
            let t = it as f64 * 0.5;
            for ix in 0..4 {
                for iy in 0..4 {
                    for iz in 0..4 {
                        let x = [ix as f64 * TWO_PI / 4.0, iy as f64 * TWO_PI / 4.0, iz as f64 * TWO_PI / 4.0];
                        let h = self.h(t, x);
                        let m = nalgebra::Matrix3::from_fn(|r, c| h[r][c]);
                        let eig = m.symmetric_eigenvalues();
                        min_eig = min_eig.min(eig.min());
                    }
                }
            }
        }
        std::f64::consts::PI * min_eig.max(0.0).sqrt()
    }
}

fn diag3(d: &Jet, zero: &Jet) -> [[Jet; 3]; 3] {
    [
        [d.clone(), zero.clone(), zero.clone()],
        [zero.clone(), d.clone(), zero.clone()],
        [zero.clone(), zero.clone(), d.clone()],
    ]
}

/// Determinant of a jet-valued 3×3 matrix.
pub fn det3(m: &[[Jet; 3]; 3]) -> Jet {
    let c0 = m[1][1].mul(&m[2][2]).sub(&m[1][2].mul(&m[2][1]));
    let c1 = m[1][0].mul(&m[2][2]).sub(&m[1][2].mul(&m[2][0]));
    let c2 = m[1][0].mul(&m[2][1]).sub(&m[1][1].mul(&m[2][0]));
    m[0][0].mul(&c0).sub(&m[0][1].mul(&c1)).add(&m[0][2].mul(&c2))
}

/// Inverse of a jet-valued 3×3 matrix via the adjugate.
pub fn inv3(m: &[[Jet; 3]; 3]) -> [[Jet; 3]; 3] {
    let det = det3(m);
    let dinv = det.inv();
    let cof = |r: usize, c: usize| -> Jet {
        let (r1, r2) = ((r + 1) % 3, (r + 2) % 3);
        let (c1, c2) = ((c + 1) % 3, (c + 2) % 3);
        m[r1][c1].mul(&m[r2][c2]).sub(&m[r1][c2].mul(&m[r2][c1]))
    };
    // adj[c][r] = cof(r, c); inverse = adj / det
    std::array::from_fn(|r| std::array::from_fn(|c| cof(c, r).mul(&dinv)))
}

fn inv3_f64(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let a = nalgebra::Matrix3::from_fn(|r, c| m[r][c]);
    let inv = a.try_inverse().expect("singular spatial metric");
    std::array::from_fn(|r| std::array::from_fn(|c| inv[(r, c)]))
}

/// Hamiltonian `g⁻¹(ξ,ξ)/2` of the cogeodesic flow.
pub fn cogeodesic_hamiltonian(m: &MetricModel, t: f64, x: [f64; 3], xi: [f64; 4]) -> f64 {
    let sp = JetSpace::new(&[(4, 0)]);
    let tj = sp.rvar(0, t);
    let xj = [sp.rvar(1, x[0]), sp.rvar(2, x[1]), sp.rvar(3, x[2])];
    let b = m.beta_jet(&tj, &xj).val().re;
    let h = m.h_jet(&tj, &xj).map(|r| r.map(|e| e.val().re));
    let hinv = inv3_f64(h);
    let mut s = -xi[0] * xi[0] / (b * b);
    for a in 0..3 {
        for c in 0..3 {
            s += hinv[a][c] * xi[a + 1] * xi[c + 1];
        }
    }
    0.5 * s
}

fn cogeodesic_rhs(m: &MetricModel, state: &[f64]) -> Vec<f64> {
    let sp = JetSpace::new(&[(4, 1)]);
    let tj = sp.rvar(0, state[0]);
    let xj = [sp.rvar(1, state[1]), sp.rvar(2, state[2]), sp.rvar(3, state[3])];
    let b = m.beta_jet(&tj, &xj);
    let hinv = inv3(&m.h_jet(&tj, &xj));
    // H(X, ξ) as a jet in X only; momentum derivatives taken analytically
    let binv2 = b.mul(&b).inv();
    let mut hjet = binv2.rscale(-0.5 * state[4] * state[4]);
    for a in 0..3 {
        for c in 0..3 {
            hjet = hjet.add(&hinv[a][c].rscale(0.5 * state[4 + a + 1] * state[4 + c + 1]));
        }
    }
    let mut out = vec![0.0; 8];
    // dX^μ/dτ = ∂H/∂ξ_μ
    out[0] = -binv2.val().re * state[4];
    for a in 0..3 {
        let mut v = 0.0;
        for c in 0..3 {
            v += hinv[a][c].val().re * state[4 + c + 1];
        }
        out[1 + a] = v;
    }
    // dξ_μ/dτ = −∂H/∂X^μ
    for mu in 0..4 {
        out[4 + mu] = -hjet.diff(mu).val().re;
    }
    out
}

/// Integrate the cogeodesic flow from `start`, reporting the state at each value in
/// `taus` (monotone, starting after 0).
pub fn geodesic(
    m: &MetricModel,
    start: &CovectorAtPoint,
    taus: &[f64],
    tol: f64,
) -> Result<Vec<GeodesicPoint>> {
    assert!(start.xi.iter().any(|v| *v != 0.0), "zero start covector");
    let y0: Vec<f64> = start
        .base
        .x
        .iter()
        .copied()
        .chain(start.xi.iter().copied())
        .collect::<Vec<_>>();
    let mut y = vec![start.base.t];
    y.extend_from_slice(&y0);
    let opts = OdeOpts { rtol: tol, atol: tol, ..OdeOpts::default() };
    let states = integrate_path(&mut |_tau, s: &Vec<f64>| cogeodesic_rhs(m, s), 0.0, y, taus, &opts)?;
    Ok(taus
        .iter()
        .zip(states)
        .map(|(&tau, s)| GeodesicPoint {
            tau,
            t: s[0],
            x: [s[1], s[2], s[3]],
            xi: [s[4], s[5], s[6], s[7]],
        })
        .collect())
}

/// Parallel transport a covector `xi0` along the geodesic issued from `start`
/// (joint integration of the geodesic and `∇_{γ̇} ξ = 0`).
pub fn parallel_transport_covector(
    m: &MetricModel,
    start: &CovectorAtPoint,
    xi0: [f64; 4],
    taus: &[f64],
    tol: f64,
) -> Result<Vec<[f64; 4]>> {
    let mut y = vec![start.base.t, start.base.x[0], start.base.x[1], start.base.x[2]];
    y.extend_from_slice(&start.xi);
    y.extend_from_slice(&xi0);
    let opts = OdeOpts { rtol: tol, atol: tol, ..OdeOpts::default() };
    let states = integrate_path(
        &mut |_tau, s: &Vec<f64>| {
            let mut rhs = cogeodesic_rhs(m, &s[..8]);
            let gam = m.christoffel(s[0], [s[1], s[2], s[3]]);
            let xdot = [rhs[0], rhs[1], rhs[2], rhs[3]];
            for mu in 0..4 {
                let mut v = 0.0;
                for l in 0..4 {
                    for nn in 0..4 {
                        v += gam[l][mu][nn] * xdot[nn] * s[8 + l];
                    }
                }
                rhs.push(v);
            }
            rhs
        },
        0.0,
        y,
        taus,
        &opts,
    )?;
    Ok(states.iter().map(|s| [s[8], s[9], s[10], s[11]]).collect())
}

/// Parallel transport a covector along the integral curve of `∂_t` through `x`,
/// from time `t0` to `t1` (the curve parameter is coordinate time).
pub fn transport_along_time(
    m: &MetricModel,
    x: [f64; 3],
    t0: f64,
    t1: f64,
    xi0: [f64; 4],
    tol: f64,
) -> Result<[f64; 4]> {
    let opts = OdeOpts { rtol: tol, atol: tol, ..OdeOpts::default() };
    let s = integrate_to(
        &mut |t, xi: &Vec<f64>| {
            let gam = m.christoffel(t, x);
            (0..4)
                .map(|mu| (0..4).map(|l| gam[l][mu][0] * xi[l]).sum())
                .collect()
        },
        t0,
        xi0.to_vec(),
        t1,
        &opts,
    )?;
    Ok([s[0], s[1], s[2], s[3]])
}

/// Exponential map target: endpoint of the unit-parameter geodesic from `xp` with
/// initial covector `xi0`.
fn exp_endpoint(m: &MetricModel, xp: &SpacetimePoint, xi0: [f64; 4], tol: f64) -> Result<([f64; 4], [f64; 4])> {
    let g = geodesic(m, &CovectorAtPoint { base: *xp, xi: xi0 }, &[1.0], tol)?;
    let p = &g[0];
    Ok(([p.t, p.x[0], p.x[1], p.x[2]], p.xi))
}

/// Ruse–Synge world function `σ(X, Y) = ½ g⁻¹(ξ₀, ξ₀)` where `exp_X(ξ₀) = Y`
/// along the unit-parameter connecting geodesic, found by Newton shooting.
/// Negative on timelike separation. Fails with `NoConvergence` outside the
/// normal neighbourhood.
pub fn world_function(
    m: &MetricModel,
    xp: &SpacetimePoint,
    yp: &SpacetimePoint,
    tol: f64,
) -> Result<WorldFunctionEval> {
    let radius = 0.8 * m.normal_radius();
    let dxm = [
        wrap_diff(yp.x[0], xp.x[0]),
        wrap_diff(yp.x[1], xp.x[1]),
        wrap_diff(yp.x[2], xp.x[2]),
    ];
    let sep2 = (yp.t - xp.t).powi(2) + dxm.iter().map(|v| v * v).sum::<f64>();
    if sep2.sqrt() > radius {
        return Err(Error::NoConvergence { residual: f64::INFINITY });
    }
    if sep2 == 0.0 {
        return Ok(WorldFunctionEval {
            value: 0.0,
            grad_first: [0.0; 4],
            grad_second: [0.0; 4],
            converged: true,
        });
    }
    // initial guess: flat chord lowered with the metric at X
    let h = m.h(xp.t, xp.x);
    let b = m.beta(xp.t, xp.x);
    let mut xi0 = [0.0f64; 4];
    xi0[0] = -b * b * (yp.t - xp.t);
    for a in 0..3 {
        xi0[1 + a] = (0..3).map(|c| h[a][c] * dxm[c]).sum();
    }
    let ode_tol = (tol * 1e-2).clamp(1e-13, 1e-10);
    let residual_of = |end: &[f64; 4]| -> [f64; 4] {
        [
            end[0] - yp.t,
            wrap_diff(end[1], yp.x[0]),
            wrap_diff(end[2], yp.x[1]),
            wrap_diff(end[3], yp.x[2]),
        ]
    };
    let mut last_res = f64::INFINITY;
    for _iter in 0..50 {
        let (end, xi_end) = exp_endpoint(m, xp, xi0, ode_tol)?;
        let res = residual_of(&end);
        let rnorm = res.iter().map(|v| v.abs()).fold(0.0, f64::max);
        last_res = rnorm;
        if rnorm < tol {
            let ham = cogeodesic_hamiltonian(m, xp.t, xp.x, xi0);
            return Ok(WorldFunctionEval {
                value: ham,
                grad_first: [-xi0[0], -xi0[1], -xi0[2], -xi0[3]],
                grad_second: xi_end,
                converged: true,
            });
        }
        // finite-difference Jacobian of the endpoint in the shooting covector
        let mut jac = nalgebra::Matrix4::<f64>::zeros();
        let hstep = 1e-6 * (1.0 + xi0.iter().map(|v| v.abs()).fold(0.0, f64::max));
        for c in 0..4 {
            let mut xp_xi = xi0;
            let mut xm_xi = xi0;
            xp_xi[c] += hstep;
            xm_xi[c] -= hstep;
            let (ep, _) = exp_endpoint(m, xp, xp_xi, ode_tol)?;
            let (em, _) = exp_endpoint(m, xp, xm_xi, ode_tol)?;
            for r in 0..4 {
                let d = if r == 0 { ep[r] - em[r] } else { wrap_diff(ep[r], em[r]) };
                jac[(r, c)] = d / (2.0 * hstep);
            }
        }
        let rhs = nalgebra::Vector4::new(res[0], res[1], res[2], res[3]);
        let delta = jac
            .lu()
            .solve(&rhs)
            .ok_or(Error::NoConvergence { residual: rnorm })?;
        for c in 0..4 {
            xi0[c] -= delta[c];
        }
    }
    Err(Error::NoConvergence { residual: last_res })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn flrw() -> MetricModel {
        MetricModel::flrw(1.0, 0.1, 1.0).reduce()
    }

    #[test]
    fn reduce_trivial_and_idempotent() {
        let m = MetricModel::flrw(1.0, 0.1, 1.0);
        let r = m.reduce();
        let x = [0.3, 1.1, 4.0];
        for t in [0.0, 0.7] {
            let a = m.h(t, x);
            let b = r.h(t, x);
            for i in 0..3 {
                for j in 0..3 {
                    assert_abs_diff_eq!(a[i][j], b[i][j], epsilon = 1e-15);
                }
            }
        }
        let rr = r.reduce();
        assert_eq!(r.h(0.4, x), rr.h(0.4, x));
        assert_eq!(r.beta(0.4, x), 1.0);
    }

    #[test]
    fn density_ratio_presets() {
        let u = MetricModel::ultrastatic().reduce();
        assert_abs_diff_eq!(u.density_ratio(1.3, [0.1, 0.2, 0.3]).unwrap(), 1.0, epsilon = 1e-14);
        let f = flrw();
        for t in [0.0, 0.5, 2.0] {
            let a = f.scale_factor(t);
            assert_abs_diff_eq!(
                f.density_ratio(t, [1.0, 2.0, 3.0]).unwrap(),
                a.powf(1.5),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn mean_curvature_presets_and_identity() {
        let u = MetricModel::ultrastatic().reduce();
        assert_abs_diff_eq!(u.mean_curvature(0.3, [0.0; 3]), 0.0, epsilon = 1e-14);
        let f = flrw();
        for t in [0.1f64, 0.9, 1.7] {
            let adot = 0.1 * t.cos();
            let a = f.scale_factor(t);
            assert_abs_diff_eq!(f.mean_curvature(t, [0.0; 3]), -adot / a, epsilon = 1e-12);
            // 2 ρ⁻¹ ∂_t ρ + 3H = 0
            let eps = 1e-5;
            let x = [0.4, 5.0, 2.2];
            let rho_p = f.density_ratio(t + eps, x).unwrap();
            let rho_m = f.density_ratio(t - eps, x).unwrap();
            let rho = f.density_ratio(t, x).unwrap();
            let lhs = 2.0 / rho * (rho_p - rho_m) / (2.0 * eps) + 3.0 * f.mean_curvature(t, x);
            assert_abs_diff_eq!(lhs, 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn dh_dt_matches_finite_difference() {
        let f = flrw();
        let w = MetricModel::wavy(0.15).reduce();
        for m in [&f, &w] {
            let (t, x) = (0.6, [1.0, 2.0, 3.0]);
            let d = m.dh_dt(t, x);
            let eps = 1e-5;
            let hp = m.h(t + eps, x);
            let hm = m.h(t - eps, x);
            for i in 0..3 {
                for j in 0..3 {
                    let fd = (hp[i][j] - hm[i][j]) / (2.0 * eps);
                    assert!((d[i][j] - fd).abs() <= 1e-6 * (1.0 + fd.abs()));
                }
            }
        }
    }

    #[test]
    fn flat_null_geodesic_is_straight() {
        let m = MetricModel::ultrastatic().reduce();
        let eta = [2.0f64.sqrt().recip(), 2.0f64.sqrt().recip(), 0.0];
        // null covector: ξ = (−1, η̂) has g⁻¹(ξ,ξ) = −1 + 1 = 0
        let start = CovectorAtPoint {
            base: SpacetimePoint::new(0.0, [0.5, 1.0, 1.5]),
            xi: [-1.0, eta[0], eta[1], eta[2]],
        };
        let taus = [0.5, 1.0, 2.0];
        let path = geodesic(&m, &start, &taus, 1e-11).unwrap();
        for p in &path {
            assert_abs_diff_eq!(p.t, p.tau, epsilon = 1e-9);
            for a in 0..3 {
                assert_abs_diff_eq!(p.x[a], start.base.x[a] + p.tau * eta[a], epsilon = 1e-9);
                assert_abs_diff_eq!(p.xi[1 + a], eta[a], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn flrw_geodesic_conserves_hamiltonian() {
        let m = flrw();
        let start = CovectorAtPoint {
            base: SpacetimePoint::new(0.2, [1.0, 2.0, 3.0]),
            xi: [-1.3, 0.7, -0.4, 0.5],
        };
        let h0 = cogeodesic_hamiltonian(&m, start.base.t, start.base.x, start.xi);
        let taus = [1.0, 2.5, 5.0];
        let path = geodesic(&m, &start, &taus, 1e-11).unwrap();
        for p in &path {
            let h = cogeodesic_hamiltonian(&m, p.t, p.x, p.xi);
            assert!((2.0 * (h - h0)).abs() <= 1e-9, "drift {}", 2.0 * (h - h0));
        }
    }

    #[test]
    fn transport_laws() {
        // flat: components constant along any geodesic
        let u = MetricModel::ultrastatic().reduce();
        let start = CovectorAtPoint {
            base: SpacetimePoint::new(0.0, [0.1, 0.2, 0.3]),
            xi: [-1.0, 0.3, 0.4, 0.5],
        };
        let xi0 = [0.2, -0.7, 0.1, 0.9];
        let out = parallel_transport_covector(&u, &start, xi0, &[1.5], 1e-11).unwrap();
        for c in 0..4 {
            assert_abs_diff_eq!(out[0][c], xi0[c], epsilon = 1e-10);
        }
        // FLRW along ∂_t: spatial components scale with a(t)/a(t0)
        let f = flrw();
        let (t0, t1) = (0.0, 1.2);
        let xi = [0.3, 1.0, -2.0, 0.5];
        let moved = transport_along_time(&f, [0.7, 0.1, 4.4], t0, t1, xi, 1e-11).unwrap();
        let ratio = f.scale_factor(t1) / f.scale_factor(t0);
        for a in 0..3 {
            assert_abs_diff_eq!(moved[1 + a], ratio * xi[1 + a], epsilon = 1e-9);
        }
        // norm preservation along a curved geodesic
        let g0 = cogeodesic_hamiltonian(&f, start.base.t, start.base.x, xi0);
        let path = geodesic(&f, &start, &[2.0], 1e-11).unwrap();
        let xit = parallel_transport_covector(&f, &start, xi0, &[2.0], 1e-11).unwrap();
        let g1 = cogeodesic_hamiltonian(&f, path[0].t, path[0].x, xit[0]);
        assert!((g1 - g0).abs() <= 1e-9);
    }

    #[test]
    fn world_function_flat_closed_form() {
        let m = MetricModel::ultrastatic().reduce();
        let xp = SpacetimePoint::new(0.1, [0.4, 1.0, 2.0]);
        let yp = SpacetimePoint::new(0.6, [0.9, 1.2, 1.7]);
        let ev = world_function(&m, &xp, &yp, 1e-10).unwrap();
        let dx = [
            wrap_diff(yp.x[0], xp.x[0]),
            wrap_diff(yp.x[1], xp.x[1]),
            wrap_diff(yp.x[2], xp.x[2]),
        ];
        let exact = 0.5 * (-(xp.t - yp.t).powi(2) + dx.iter().map(|v| v * v).sum::<f64>());
        assert!(ev.converged);
        assert_abs_diff_eq!(ev.value, exact, epsilon = 1e-9);
    }

    #[test]
    fn world_function_coincidence_and_hessian() {
        let m = flrw();
        let xp = SpacetimePoint::new(0.5, [1.0, 2.0, 3.0]);
        let ev = world_function(&m, &xp, &xp, 1e-10).unwrap();
        assert!(ev.value.abs() <= 1e-10);
        for c in 0..4 {
            assert!(ev.grad_first[c].abs() <= 1e-10);
            assert!(ev.grad_second[c].abs() <= 1e-10);
        }
        // finite-difference Hessian in the second argument equals g(X)
        let h = m.h(xp.t, xp.x);
        let b = m.beta(xp.t, xp.x);
        let mut g = [[0.0f64; 4]; 4];
        g[0][0] = -b * b;
        for a in 0..3 {
            for c in 0..3 {
                g[1 + a][1 + c] = h[a][c];
            }
        }
        let eps = 1e-3;
        let sig = |d: [f64; 4]| -> f64 {
            let yp = SpacetimePoint::new(
                xp.t + d[0],
                [xp.x[0] + d[1], xp.x[1] + d[2], xp.x[2] + d[3]],
            );
            world_function(&m, &xp, &yp, 1e-11).unwrap().value
        };
        for r in 0..4 {
            for c in 0..4 {
                let mut d = [[0.0f64; 4]; 4]; // (±e_r ± e_c) displacements
                for (k, (sr, sc)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
                    .into_iter()
                    .enumerate()
                {
                    d[k][r] += sr * eps;
                    d[k][c] += sc * eps;
                }
                let hess = (sig(d[0]) - sig(d[1]) - sig(d[2]) + sig(d[3])) / (4.0 * eps * eps);
                assert!(
                    (hess - g[r][c]).abs() <= 1e-6 * (1.0 + g[r][c].abs()) + 2e-6,
                    "hessian[{r}][{c}] = {hess}, g = {}",
                    g[r][c]
                );
            }
        }
    }

    #[test]
    fn world_function_symmetric() {
        let m = flrw();
        let xp = SpacetimePoint::new(0.2, [1.0, 2.0, 3.0]);
        let yp = SpacetimePoint::new(0.5, [1.3, 1.8, 3.2]);
        let a = world_function(&m, &xp, &yp, 1e-11).unwrap().value;
        let b = world_function(&m, &yp, &xp, 1e-11).unwrap().value;
        assert!((a - b).abs() <= 1e-8);
    }

    #[test]
    fn custom_table_round_trip() {
        // tabulate the FLRW metric and compare interpolation against closed form
        let f = MetricModel::flrw(1.0, 0.1, 1.0);
        let n = 4;
        let mut csv = String::from("t,x1,x2,x3,h11,h12,h13,h22,h23,h33,beta\n");
        for it in 0..9 {
            let t = -1.0 + 0.25 * it as f64;
            let a2 = f.scale_factor(t).powi(2);
            for i1 in 0..n {
                for i2 in 0..n {
                    for i3 in 0..n {
                        let x = [
                            TWO_PI * i1 as f64 / n as f64,
                            TWO_PI * i2 as f64 / n as f64,
                            TWO_PI * i3 as f64 / n as f64,
                        ];
                        csv.push_str(&format!(
                            "{},{},{},{},{a2},0,0,{a2},0,{a2},1\n",
                            t, x[0], x[1], x[2]
                        ));
                    }
                }
            }
        }
        let tab = MetricTable::from_csv(&csv).unwrap();
        let m = MetricModel::new(Preset::CustomTable(Arc::new(tab))).reduce();
        let (t, x) = (0.33, [1.0, 2.0, 3.0]);
        let exact = f.scale_factor(t).powi(2);
        let h = m.h(t, x);
        assert!((h[0][0] - exact).abs() < 5e-4, "interp {} vs {}", h[0][0], exact);
        // ρ² equals the direct determinant quotient
        let rho = m.density_ratio(t, x).unwrap();
        let sp = JetSpace::new(&[(4, 0)]);
        let tj = sp.rvar(0, t);
        let xj = [sp.rvar(1, x[0]), sp.rvar(2, x[1]), sp.rvar(3, x[2])];
        let d_t = det3(&m.h_jet(&tj, &xj)).val().re;
        let d_0 = det3(&m.h_jet(&sp.rvar(0, 0.0), &xj)).val().re;
        assert!((rho * rho - (d_t / d_0).sqrt()).abs() <= 1e-10);
    }
}
