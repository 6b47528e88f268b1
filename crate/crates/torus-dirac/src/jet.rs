//! Truncated multivariate Taylor ("jet") arithmetic over complex coefficients.
//!
//! A [`Jet`] stores the Taylor coefficients of a smooth function at a base point,
//! truncated by *group caps*: the variables are partitioned into groups and the total
//! degree within each group is bounded separately. This matters for the amplitude
//! machinery, where the spatial offset needs a deeper Taylor depth than the covector
//! and time directions, and a single total-order bound would be wasteful.
//!
//! Arithmetic (ring operations, division, analytic functions via composition with a
//! 1-d outer series) propagates all retained coefficients exactly. Derivatives are
//! coefficient shifts and lose one order in the corresponding group, which callers
//! must budget for when choosing caps.

use num_complex::Complex64;
use std::collections::HashMap;
use std::sync::Arc;

const MAX_VARS: usize = 8;

type Expo = [u8; MAX_VARS];

/// Shared description of a jet space: variable count, group caps and the
/// precomputed monomial tables.
pub struct JetSpace {
    /// Number of active variables.
    pub nv: usize,
    /// `(first_var, last_var_exclusive, cap)` per group; groups partition `0..nv`.
    pub groups: Vec<(usize, usize, u8)>,
    monos: Vec<Expo>,
    index: HashMap<Expo, usize>,
    /// All products `monos[i] * monos[j] = monos[k]` that stay inside the caps.
    pairs: Vec<(u32, u32, u32)>,
    /// For each variable `v`, entries `(source_mono, factor, target_mono)` of ∂/∂x_v.
    dtab: Vec<Vec<(u32, f64, u32)>>,
    /// Maximum total degree of any retained monomial.
    pub max_total: usize,
}

impl JetSpace {
    /// Create a space with the given per-group caps. `groups` are `(n_vars, cap)`
    /// listed in variable order.
    pub fn new(groups: &[(usize, u8)]) -> Arc<Self> {
        let nv: usize = groups.iter().map(|g| g.0).sum();
        assert!(nv <= MAX_VARS, "at most {MAX_VARS} jet variables supported");
        let mut gr = Vec::new();
        let mut start = 0;
        for &(n, cap) in groups {
            gr.push((start, start + n, cap));
            start += n;
        }
        // Enumerate admissible monomials in graded-lexicographic order.
        let mut monos: Vec<Expo> = vec![[0u8; MAX_VARS]];
        let mut frontier: Vec<Expo> = monos.clone();
        loop {
            let mut next: Vec<Expo> = Vec::new();
            for e in &frontier {
                for v in 0..nv {
                    let mut e2 = *e;
                    e2[v] += 1;
                    if Self::admissible(&gr, &e2) && !next.contains(&e2) {
                        next.push(e2);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            next.sort();
            next.dedup();
            monos.extend(next.iter().copied());
            frontier = next;
        }
        monos.sort_by_key(|e| (e.iter().map(|&x| x as usize).sum::<usize>(), *e));
        monos.dedup();
        let index: HashMap<Expo, usize> = monos.iter().enumerate().map(|(i, e)| (*e, i)).collect();
        let mut pairs = Vec::new();
        for (i, a) in monos.iter().enumerate() {
            for (j, b) in monos.iter().enumerate() {
                let mut s = [0u8; MAX_VARS];
                for v in 0..nv {
                    s[v] = a[v] + b[v];
                }
                if Self::admissible(&gr, &s) {
                    let k = index[&s];
                    pairs.push((i as u32, j as u32, k as u32));
                }
            }
        }
        let mut dtab = vec![Vec::new(); nv];
        for (i, e) in monos.iter().enumerate() {
            for v in 0..nv {
                if e[v] > 0 {
                    let mut t = *e;
                    t[v] -= 1;
                    dtab[v].push((i as u32, e[v] as f64, index[&t] as u32));
                }
            }
        }
        let max_total = monos
            .iter()
            .map(|e| e.iter().map(|&x| x as usize).sum())
            .max()
            .unwrap_or(0);
        Arc::new(Self { nv, groups: gr, monos, index, pairs, dtab, max_total })
    }

    fn admissible(groups: &[(usize, usize, u8)], e: &Expo) -> bool {
        for &(a, b, cap) in groups {
            let s: u16 = e[a..b].iter().map(|&x| x as u16).sum();
            if s > cap as u16 {
                return false;
            }
        }
        true
    }

    /// Number of retained coefficients.
    pub fn len(&self) -> usize {
        self.monos.len()
    }

    /// Exponent vector of the `i`-th retained monomial.
    pub fn mono_exp(&self, i: usize) -> [u8; MAX_VARS] {
        self.monos[i]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of a monomial given its exponent list (padded with zeros).
    pub fn mono_index(&self, expo: &[u8]) -> Option<usize> {
        let mut e = [0u8; MAX_VARS];
        e[..expo.len()].copy_from_slice(expo);
        self.index.get(&e).copied()
    }

    /// Constant jet.
    pub fn constant(self: &Arc<Self>, v: Complex64) -> Jet {
        let mut c = vec![Complex64::new(0.0, 0.0); self.len()];
        c[0] = v;
        Jet { sp: self.clone(), c }
    }

    /// Jet of the coordinate function `x_v` with base value `v0`.
    pub fn var(self: &Arc<Self>, var: usize, v0: Complex64) -> Jet {
        let mut j = self.constant(v0);
        let mut e = [0u8; MAX_VARS];
        e[var] = 1;
        if let Some(i) = self.index.get(&e) {
            j.c[*i] = Complex64::new(1.0, 0.0);
        }
        j
    }

    pub fn rvar(self: &Arc<Self>, var: usize, v0: f64) -> Jet {
        self.var(var, Complex64::new(v0, 0.0))
    }
}

/// A truncated Taylor expansion with complex coefficients in a shared [`JetSpace`].
#[derive(Clone)]
pub struct Jet {
    pub sp: Arc<JetSpace>,
    pub c: Vec<Complex64>,
}

impl Jet {
    /// Value at the base point.
    pub fn val(&self) -> Complex64 {
        self.c[0]
    }

    pub fn re(&self) -> f64 {
        self.c[0].re
    }

    /// Coefficient (not derivative: no factorials applied) of a monomial.
    pub fn coeff(&self, expo: &[u8]) -> Complex64 {
        self.sp
            .mono_index(expo)
            .map(|i| self.c[i])
            .unwrap_or_else(|| Complex64::new(0.0, 0.0))
    }

    /// Partial derivative ∂/∂x_v as a jet (top order in v's group is lost).
    pub fn diff(&self, v: usize) -> Jet {
        let mut out = self.sp.constant(Complex64::new(0.0, 0.0));
        for &(src, fac, dst) in &self.sp.dtab[v] {
            out.c[dst as usize] += self.c[src as usize] * fac;
        }
        out
    }

    pub fn neg(&self) -> Jet {
        Jet { sp: self.sp.clone(), c: self.c.iter().map(|z| -z).collect() }
    }

    /// Complex conjugate of the represented function (valid for real variables:
    /// conjugates every coefficient).
    pub fn conj(&self) -> Jet {
        Jet { sp: self.sp.clone(), c: self.c.iter().map(|z| z.conj()).collect() }
    }

    pub fn add(&self, o: &Jet) -> Jet {
        debug_assert!(Arc::ptr_eq(&self.sp, &o.sp));
        Jet {
            sp: self.sp.clone(),
            c: self.c.iter().zip(&o.c).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, o: &Jet) -> Jet {
        debug_assert!(Arc::ptr_eq(&self.sp, &o.sp));
        Jet {
            sp: self.sp.clone(),
            c: self.c.iter().zip(&o.c).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn mul(&self, o: &Jet) -> Jet {
        debug_assert!(Arc::ptr_eq(&self.sp, &o.sp));
        let mut c = vec![Complex64::new(0.0, 0.0); self.sp.len()];
        for &(i, j, k) in &self.sp.pairs {
            let a = self.c[i as usize];
            if a.re == 0.0 && a.im == 0.0 {
                continue;
            }
            c[k as usize] += a * o.c[j as usize];
        }
        Jet { sp: self.sp.clone(), c }
    }

    pub fn scale(&self, s: Complex64) -> Jet {
        Jet { sp: self.sp.clone(), c: self.c.iter().map(|z| z * s).collect() }
    }

    pub fn rscale(&self, s: f64) -> Jet {
        self.scale(Complex64::new(s, 0.0))
    }

    pub fn add_scaled(&self, o: &Jet, s: Complex64) -> Jet {
        Jet {
            sp: self.sp.clone(),
            c: self.c.iter().zip(&o.c).map(|(a, b)| a + b * s).collect(),
        }
    }

    /// Composition with an outer analytic function given by the derivatives of `g`
    /// at the base value: `ders[k] = g^(k)(self.val())`.
    fn outer(&self, ders: &[Complex64]) -> Jet {
        let mut n = self.clone();
        n.c[0] = Complex64::new(0.0, 0.0); // nilpotent part
        let mut acc = self.sp.constant(ders[0]);
        let mut pow = self.sp.constant(Complex64::new(1.0, 0.0));
        let mut fact = 1.0;
        for (k, d) in ders.iter().enumerate().skip(1) {
            pow = pow.mul(&n);
            fact *= k as f64;
            acc = acc.add_scaled(&pow, d / fact);
        }
        acc
    }

    fn outer_len(&self) -> usize {
        self.sp.max_total + 1
    }

    pub fn inv(&self) -> Jet {
        // g(x) = 1/x: g^(k)(a) = (-1)^k k! a^{-k-1}
        let a = self.val();
        let n = self.outer_len();
        let mut ders = Vec::with_capacity(n);
        let mut v = Complex64::new(1.0, 0.0) / a;
        let mut sf = 1.0;
        for k in 0..n {
            ders.push(v * sf);
            v /= a;
            sf *= -((k + 1) as f64);
        }
        self.outer(&ders)
    }

    pub fn sqrt(&self) -> Jet {
        // principal branch; callers manage branch continuity at the call site
        let a = self.val();
        let r = a.sqrt();
        let mut ders = vec![r];
        let mut coef = Complex64::new(0.5, 0.0);
        let mut pw = r / a; // a^{-1/2}
        for k in 1..self.outer_len() {
            ders.push(coef * pw);
            coef *= Complex64::new(0.5 - k as f64, 0.0);
            pw /= a;
        }
        self.outer(&ders)
    }

    pub fn exp(&self) -> Jet {
        let e = self.val().exp();
        let ders = vec![e; self.outer_len()];
        self.outer(&ders)
    }

    pub fn ln(&self) -> Jet {
        let a = self.val();
        let mut ders = vec![a.ln()];
        let mut pw = Complex64::new(1.0, 0.0) / a;
        let mut f = 1.0;
        for k in 1..self.outer_len() {
            ders.push(pw * f);
            pw /= a;
            f *= -(k as f64);
        }
        self.outer(&ders)
    }

    pub fn sin(&self) -> Jet {
        let a = self.val();
        let (s, c) = (a.sin(), a.cos());
        let cyc = [s, c, -s, -c];
        let ders: Vec<Complex64> = (0..self.outer_len()).map(|k| cyc[k % 4]).collect();
        self.outer(&ders)
    }

    pub fn cos(&self) -> Jet {
        let a = self.val();
        let (s, c) = (a.sin(), a.cos());
        let cyc = [c, -s, -c, s];
        let ders: Vec<Complex64> = (0..self.outer_len()).map(|k| cyc[k % 4]).collect();
        self.outer(&ders)
    }

    /// Real power (principal branch).
    pub fn powf(&self, p: f64) -> Jet {
        let a = self.val();
        let mut ders = Vec::with_capacity(self.outer_len());
        let mut coef = Complex64::new(1.0, 0.0);
        for k in 0..self.outer_len() {
            ders.push(coef * a.powf(p - k as f64));
            coef *= Complex64::new(p - k as f64, 0.0);
        }
        self.outer(&ders)
    }

    pub fn div(&self, o: &Jet) -> Jet {
        self.mul(&o.inv())
    }

    /// Max coefficient magnitude, for residual checks.
    pub fn max_abs(&self) -> f64 {
        self.c.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}
