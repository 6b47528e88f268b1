//! Adaptive Dormand–Prince 5(4) integration over generic linear states.
//!
//! The integrator is generic over the state container so the same stepper drives
//! plain real systems (geodesics), complex mode systems (per-mode evolution) and
//! jet-valued systems (flows carrying covector-direction Taylor data). Output times
//! are hit exactly by step clamping, never by interpolation, so results feed
//! tolerance-critical comparisons directly.

/// Linear-space operations the stepper needs from a state.
pub trait OdeState: Clone {
    /// `self += a * x`.
    fn axpy(&mut self, a: f64, x: &Self);
    fn scale(&mut self, a: f64);
    /// Max-norm, used for the error controller.
    fn norm_inf(&self) -> f64;
}

impl OdeState for Vec<f64> {
    fn axpy(&mut self, a: f64, x: &Self) {
        for (s, v) in self.iter_mut().zip(x) {
            *s += a * v;
        }
    }
    fn scale(&mut self, a: f64) {
        for s in self.iter_mut() {
            *s *= a;
        }
    }
    fn norm_inf(&self) -> f64 {
        self.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl OdeState for Vec<num_complex::Complex64> {
    fn axpy(&mut self, a: f64, x: &Self) {
        for (s, v) in self.iter_mut().zip(x) {
            *s += v * a;
        }
    }
    fn scale(&mut self, a: f64) {
        for s in self.iter_mut() {
            *s *= a;
        }
    }
    fn norm_inf(&self) -> f64 {
        self.iter().fold(0.0, |m, v| m.max(v.norm()))
    }
}

impl OdeState for Vec<crate::jet::Jet> {
    fn axpy(&mut self, a: f64, x: &Self) {
        for (s, v) in self.iter_mut().zip(x) {
            *s = s.add_scaled(v, num_complex::Complex64::new(a, 0.0));
        }
    }
    fn scale(&mut self, a: f64) {
        for s in self.iter_mut() {
            *s = s.rscale(a);
        }
    }
    fn norm_inf(&self) -> f64 {
        self.iter().map(|j| j.max_abs()).fold(0.0, f64::max)
    }
}

/// Dormand–Prince RK5(4) Butcher data.
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const C: [f64; 6] = [0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
/// 5th-order weights (FSAL row) and embedded 4th-order weights.
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Options for the adaptive stepper.
#[derive(Clone, Copy)]
pub struct OdeOpts {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub max_steps: usize,
}

impl Default for OdeOpts {
    fn default() -> Self {
        Self { rtol: 1e-10, atol: 1e-10, h_init: 1e-2, h_min: 1e-12, max_steps: 200_000 }
    }
}

/// Integrate `dy/dt = f(t, y)` from `t0` to `t1` (either direction).
pub fn integrate_to<S: OdeState>(
    f: &mut impl FnMut(f64, &S) -> S,
    t0: f64,
    y0: S,
    t1: f64,
    opts: &OdeOpts,
) -> crate::error::Result<S> {
    let mut out = integrate_path(f, t0, y0, &[t1], opts)?;
    Ok(out.pop().unwrap())
}

/// Integrate through a sorted monotone sequence of output times, returning the state
/// at each. Times must be monotone in the direction of `times.last() - t0`.
pub fn integrate_path<S: OdeState>(
    f: &mut impl FnMut(f64, &S) -> S,
    t0: f64,
    y0: S,
    times: &[f64],
    opts: &OdeOpts,
) -> crate::error::Result<Vec<S>> {
    use crate::error::Error;
    let mut outs = Vec::with_capacity(times.len());
    let mut t = t0;
    let mut y = y0;
    let dir = if times.last().copied().unwrap_or(t0) >= t0 { 1.0 } else { -1.0 };
    let mut h = opts.h_init * dir;
    let mut k1 = f(t, &y);
    for &tout in times {
        if (tout - t) * dir <= 0.0 {
            // repeated or zero-length segment
            if (tout - t).abs() < 1e-14 {
                outs.push(y.clone());
                continue;
            }
            panic!("integrate_path: non-monotone output times");
        }
        let mut steps = 0;
        while (tout - t) * dir > 1e-14 {
            steps += 1;
            if steps >= opts.max_steps {
                return Err(Error::StepFailure("step limit exceeded".into()));
            }
            if (t + h - tout) * dir > 0.0 {
                h = tout - t;
            }
            // stages
            let mut ks: Vec<S> = Vec::with_capacity(7);
            ks.push(k1.clone());
            for i in 0..6 {
                let mut yi = y.clone();
                for (j, kj) in ks.iter().enumerate() {
                    let a = A[i][j];
                    if a != 0.0 {
                        yi.axpy(h * a, kj);
                    }
                }
                ks.push(f(t + C[i] * h, &yi));
            }
            let mut y5 = y.clone();
            let mut err = y.clone();
            err.scale(0.0);
            for (j, kj) in ks.iter().enumerate() {
                if B5[j] != 0.0 {
                    y5.axpy(h * B5[j], kj);
                }
                let d = B5[j] - B4[j];
                if d != 0.0 {
                    err.axpy(h * d, kj);
                }
            }
            let sc = opts.atol + opts.rtol * y5.norm_inf().max(y.norm_inf());
            let e = err.norm_inf() / sc;
            if e <= 1.0 {
                t += h;
                y = y5;
                k1 = ks.pop().unwrap(); // FSAL
                let fac = (0.9 * e.powf(-0.2)).clamp(0.2, 5.0);
                h *= fac;
            } else {
                let fac = (0.9 * e.powf(-0.2)).clamp(0.1, 1.0);
                h *= fac;
                if h.abs() < opts.h_min {
                    return Err(Error::StepFailure("step underflow (stiff or singular RHS)".into()));
                }
            }
        }
        t = tout;
        outs.push(y.clone());
        k1 = f(t, &y);
    }
    Ok(outs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn exponential_and_oscillator() {
        let opts = OdeOpts::default();
        let y = integrate_to(&mut |_t, y: &Vec<f64>| vec![y[0]], 0.0, vec![1.0], 1.0, &opts).unwrap();
        assert_abs_diff_eq!(y[0], 1f64.exp(), epsilon = 1e-9);
        let y = integrate_to(
            &mut |_t, y: &Vec<f64>| vec![y[1], -y[0]],
            0.0,
            vec![1.0, 0.0],
            2.0,
            &opts,
        )
        .unwrap();
        assert_abs_diff_eq!(y[0], 2f64.cos(), epsilon = 1e-9);
        assert_abs_diff_eq!(y[1], -2f64.sin(), epsilon = 1e-9);
    }

    #[test]
    fn backward_integration() {
        let opts = OdeOpts::default();
        let y = integrate_to(&mut |_t, y: &Vec<f64>| vec![y[0]], 1.0, vec![1f64.exp()], 0.0, &opts).unwrap();
        assert_abs_diff_eq!(y[0], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn path_output_matches_direct() {
        let opts = OdeOpts::default();
        let outs = integrate_path(
            &mut |t, y: &Vec<f64>| vec![t * y[0]],
            0.0,
            vec![1.0],
            &[0.5, 1.0, 1.5],
            &opts,
        )
        .unwrap();
        for (&t, y) in [0.5f64, 1.0, 1.5].iter().zip(&outs) {
            assert_abs_diff_eq!(y[0], (0.5 * t * t).exp(), epsilon = 1e-8);
        }
    }
}
