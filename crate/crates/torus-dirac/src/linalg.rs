//! Small complex linear algebra: 2×2 matrices, Pauli matrices and the
//! eigenprojections of `σ(ζ) = ζ_α σ^α` used throughout the symbol calculus.

use num_complex::Complex64;

pub const I: Complex64 = Complex64::new(0.0, 1.0);

/// Row-major 2×2 complex matrix: entry `(r, c)` is `m.0[r][c]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat2(pub [[Complex64; 2]; 2]);

impl Mat2 {
    pub fn zero() -> Self {
        Mat2([[Complex64::new(0.0, 0.0); 2]; 2])
    }
    pub fn identity() -> Self {
        let mut m = Self::zero();
        m.0[0][0] = Complex64::new(1.0, 0.0);
        m.0[1][1] = Complex64::new(1.0, 0.0);
        m
    }
    pub fn from_rows(a: Complex64, b: Complex64, c: Complex64, d: Complex64) -> Self {
        Mat2([[a, b], [c, d]])
    }
    pub fn add(&self, o: &Mat2) -> Mat2 {
        let mut m = Self::zero();
        for r in 0..2 {
            for c in 0..2 {
                m.0[r][c] = self.0[r][c] + o.0[r][c];
            }
        }
        m
    }
    pub fn sub(&self, o: &Mat2) -> Mat2 {
        let mut m = Self::zero();
        for r in 0..2 {
            for c in 0..2 {
                m.0[r][c] = self.0[r][c] - o.0[r][c];
            }
        }
        m
    }
    pub fn mul(&self, o: &Mat2) -> Mat2 {
        let mut m = Self::zero();
        for r in 0..2 {
            for c in 0..2 {
                m.0[r][c] = self.0[r][0] * o.0[0][c] + self.0[r][1] * o.0[1][c];
            }
        }
        m
    }
    pub fn scale(&self, s: Complex64) -> Mat2 {
        let mut m = *self;
        for r in 0..2 {
            for c in 0..2 {
                m.0[r][c] *= s;
            }
        }
        m
    }
    pub fn apply(&self, v: [Complex64; 2]) -> [Complex64; 2] {
        [
            self.0[0][0] * v[0] + self.0[0][1] * v[1],
            self.0[1][0] * v[0] + self.0[1][1] * v[1],
        ]
    }
    /// Conjugate transpose.
    pub fn dagger(&self) -> Mat2 {
        Mat2([
            [self.0[0][0].conj(), self.0[1][0].conj()],
            [self.0[0][1].conj(), self.0[1][1].conj()],
        ])
    }
    pub fn trace(&self) -> Complex64 {
        self.0[0][0] + self.0[1][1]
    }
    pub fn det(&self) -> Complex64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }
    pub fn inv(&self) -> Mat2 {
        let d = self.det();
        Mat2([
            [self.0[1][1] / d, -self.0[0][1] / d],
            [-self.0[1][0] / d, self.0[0][0] / d],
        ])
    }
    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }
    /// Hermitian eigen-decomposition, eigenvalues ascending. Panics if the matrix
    /// is not (numerically) Hermitian.
    pub fn eigh(&self) -> ([f64; 2], [[Complex64; 2]; 2]) {
        debug_assert!(self.sub(&self.dagger()).norm() < 1e-8 * (1.0 + self.norm()));
        let a = self.0[0][0].re;
        let d = self.0[1][1].re;
        let b = self.0[0][1];
        let half = 0.5 * (a + d);
        let r = (0.25 * (a - d) * (a - d) + b.norm_sqr()).sqrt();
        let (lo, hi) = (half - r, half + r);
        // eigenvector for hi: (b, hi - a) unless b ~ 0
        let v_hi = if b.norm() > 1e-14 * (1.0 + r) {
            normalize2([b, Complex64::new(hi - a, 0.0)])
        } else if a >= d {
            [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]
        } else {
            [Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)]
        };
        let v_lo = [-v_hi[1].conj(), v_hi[0].conj()];
        ([lo, hi], [v_lo, v_hi])
    }
}

fn normalize2(v: [Complex64; 2]) -> [Complex64; 2] {
    let n = (v[0].norm_sqr() + v[1].norm_sqr()).sqrt();
    [v[0] / n, v[1] / n]
}

/// Pauli matrices σ¹, σ², σ³.
pub fn pauli(alpha: usize) -> Mat2 {
    let o = Complex64::new(0.0, 0.0);
    let one = Complex64::new(1.0, 0.0);
    match alpha {
        0 => Mat2([[o, one], [one, o]]),
        1 => Mat2([[o, -I], [I, o]]),
        2 => Mat2([[one, o], [o, -one]]),
        _ => panic!("pauli index out of range"),
    }
}

/// `σ(ζ) = ζ_α σ^α` for a real covector `ζ`.
pub fn sigma_of(zeta: [f64; 3]) -> Mat2 {
    let mut m = Mat2::zero();
    for (a, &z) in zeta.iter().enumerate() {
        m = m.add(&pauli(a).scale(Complex64::new(z, 0.0)));
    }
    m
}

/// Spectral projections `P±(ζ) = (I ± σ(ζ)/|ζ|)/2` onto the ±|ζ| eigenspaces
/// of `σ(ζ)`. `ζ` must be nonzero.
pub fn eigenprojection(zeta: [f64; 3], sign: i32) -> Mat2 {
    let n = (zeta[0] * zeta[0] + zeta[1] * zeta[1] + zeta[2] * zeta[2]).sqrt();
    assert!(n > 0.0, "eigenprojection at zero covector");
    let s = Complex64::new(0.5 * sign as f64 / n, 0.0);
    Mat2::identity().scale(Complex64::new(0.5, 0.0)).add(&sigma_of(zeta).scale(s))
}
