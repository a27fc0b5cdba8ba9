//! Dormand–Prince 5(4) with FSAL and 4th-order dense output, on complex
//! state vectors.

use crate::error::{Error, Result};
use crate::C64;

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const BETA: f64 = 0.04;
const MAX_GROWTH: f64 = 10.0;
const MIN_SHRINK: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdeTolerances {
    pub rtol: f64,
    pub atol: f64,
    pub max_step: f64,
}

/// Adaptive integrator state. The right-hand side is `f(t, y, dy)`.
pub struct Dopri5<F> {
    f: F,
    tol: OdeTolerances,
    t: f64,
    h: f64,
    y: Vec<C64>,
    k: [Vec<C64>; 7],
    stage: Vec<C64>,
    y_new: Vec<C64>,
    // Dense output of the last accepted step.
    t_old: f64,
    h_done: f64,
    cont: [Vec<C64>; 5],
    fac_old: f64,
    pub n_eval: usize,
    pub n_accept: usize,
    pub n_reject: usize,
}

impl<F: FnMut(f64, &[C64], &mut [C64])> Dopri5<F> {
    pub fn new(mut f: F, t0: f64, y0: Vec<C64>, tol: OdeTolerances) -> Self {
        let n = y0.len();
        let zeros = || vec![C64::new(0.0, 0.0); n];
        let mut k = [zeros(), zeros(), zeros(), zeros(), zeros(), zeros(), zeros()];
        f(t0, &y0, &mut k[0]);
        let mut s = Self {
            f,
            tol,
            t: t0,
            h: 0.0,
            y: y0,
            k,
            stage: zeros(),
            y_new: zeros(),
            t_old: t0,
            h_done: 0.0,
            cont: [zeros(), zeros(), zeros(), zeros(), zeros()],
            fac_old: 1e-4,
            n_eval: 1,
            n_accept: 0,
            n_reject: 0,
        };
        s.h = s.initial_step();
        s
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn y(&self) -> &[C64] {
        &self.y
    }

    /// Restarts from a new state at the current time, keeping the step size.
    pub fn reset(&mut self, t: f64, y: &[C64]) {
        self.t = t;
        self.t_old = t;
        self.h_done = 0.0;
        self.y.copy_from_slice(y);
        (self.f)(t, &self.y, &mut self.k[0]);
        self.n_eval += 1;
    }

    fn norm_scaled(&self, v: &[C64], y: &[C64]) -> f64 {
        let s: f64 = v
            .iter()
            .zip(y)
            .map(|(a, b)| {
                let sc = self.tol.atol + self.tol.rtol * b.norm();
                (a.norm() / sc).powi(2)
            })
            .sum();
        (s / v.len().max(1) as f64).sqrt()
    }

    fn initial_step(&mut self) -> f64 {
        let d0 = self.norm_scaled(&self.y, &self.y);
        let d1 = self.norm_scaled(&self.k[0], &self.y);
        let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h0 = h0.min(self.tol.max_step);
        for ((s, y), k) in self.stage.iter_mut().zip(&self.y).zip(&self.k[0]) {
            *s = y + k * h0;
        }
        let (k0, k1) = self.k.split_at_mut(1);
        (self.f)(self.t + h0, &self.stage, &mut k1[0]);
        self.n_eval += 1;
        let diff: Vec<C64> = k1[0].iter().zip(&k0[0]).map(|(a, b)| a - b).collect();
        let d2 = self.norm_scaled(&diff, &self.y) / h0;
        let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
        (100.0 * h0).min(h1).min(self.tol.max_step)
    }

    /// Takes one accepted step, never stepping past `t_end`.
    pub fn step(&mut self, t_end: f64) -> Result<()> {
        let y = &self.y;
        let n = y.len();
        loop {
            let mut h = self.h.min(self.tol.max_step);
            let mut last = false;
            if self.t + h >= t_end - 1e-12 * t_end.abs().max(1.0) {
                h = t_end - self.t;
                last = true;
            }
            if h <= 1e-14 * self.t.abs().max(1.0) {
                if last && h >= 0.0 {
                    self.t = t_end;
                    return Ok(());
                }
                return Err(Error::NumericalFailure(format!("step size underflow at t = {}", self.t)));
            }
            let t = self.t;
            let [k1, k2, k3, k4, k5, k6, k7] = &mut self.k;
            let st = &mut self.stage;
            let f = &mut self.f;

            for i in 0..n {
                st[i] = y[i] + k1[i] * (h * A21);
            }
            f(t + C2 * h, st, k2);
            for i in 0..n {
                st[i] = y[i] + (k1[i] * A31 + k2[i] * A32) * h;
            }
            f(t + C3 * h, st, k3);
            for i in 0..n {
                st[i] = y[i] + (k1[i] * A41 + k2[i] * A42 + k3[i] * A43) * h;
            }
            f(t + C4 * h, st, k4);
            for i in 0..n {
                st[i] = y[i] + (k1[i] * A51 + k2[i] * A52 + k3[i] * A53 + k4[i] * A54) * h;
            }
            f(t + C5 * h, st, k5);
            for i in 0..n {
                st[i] = y[i] + (k1[i] * A61 + k2[i] * A62 + k3[i] * A63 + k4[i] * A64 + k5[i] * A65) * h;
            }
            f(t + h, st, k6);
            let yn = &mut self.y_new;
            for i in 0..n {
                yn[i] = y[i] + (k1[i] * A71 + k3[i] * A73 + k4[i] * A74 + k5[i] * A75 + k6[i] * A76) * h;
            }
            f(t + h, yn, k7);
            self.n_eval += 6;

            let mut acc = 0.0;
            for i in 0..n {
                let e = (k1[i] * E1 + k3[i] * E3 + k4[i] * E4 + k5[i] * E5 + k6[i] * E6 + k7[i] * E7) * h;
                let sc = self.tol.atol + self.tol.rtol * y[i].norm().max(yn[i].norm());
                acc += (e.norm() / sc).powi(2);
            }
            let err = (acc / n.max(1) as f64).sqrt();
            if !err.is_finite() {
                return Err(Error::NumericalFailure(format!("non-finite error estimate at t = {t}")));
            }

            let fac11 = err.powf(0.2 - 0.75 * BETA);
            if err <= 1.0 {
                let fac = (fac11 / self.fac_old.powf(BETA) / SAFETY).clamp(1.0 / MAX_GROWTH, 1.0 / MIN_SHRINK);
                self.fac_old = err.max(1e-4);
                let [c1, c2, c3, c4, c5] = &mut self.cont;
                for i in 0..n {
                    let ydiff = yn[i] - y[i];
                    let bspl = k1[i] * h - ydiff;
                    c1[i] = y[i];
                    c2[i] = ydiff;
                    c3[i] = bspl;
                    c4[i] = ydiff - k7[i] * h - bspl;
                    c5[i] = (k1[i] * D1 + k3[i] * D3 + k4[i] * D4 + k5[i] * D5 + k6[i] * D6 + k7[i] * D7) * h;
                }
                std::mem::swap(k1, k7);
                std::mem::swap(&mut self.y, &mut self.y_new);
                self.t_old = t;
                self.h_done = h;
                self.t = if last { t_end } else { t + h };
                self.n_accept += 1;
                let grown = h / fac;
                // Keep the natural step size when the last one was clamped.
                self.h = if last { self.h.max(grown) } else { grown };
                return Ok(());
            }
            self.n_reject += 1;
            self.h = h / (fac11 / SAFETY).min(1.0 / MIN_SHRINK);
        }
    }

    /// Interpolates the last accepted step at `t ∈ [t_old, t]`.
    pub fn dense(&self, t: f64, out: &mut [C64]) {
        if self.h_done == 0.0 {
            out.copy_from_slice(&self.y);
            return;
        }
        let s = (t - self.t_old) / self.h_done;
        let s1 = 1.0 - s;
        let [c1, c2, c3, c4, c5] = &self.cont;
        for i in 0..out.len() {
            out[i] = c1[i] + (c2[i] + (c3[i] + (c4[i] + c5[i] * s1) * s) * s1) * s;
        }
    }

    pub fn last_step_start(&self) -> f64 {
        self.t_old
    }

    /// Integrates to `t_end` exactly.
    pub fn advance_to(&mut self, t_end: f64) -> Result<()> {
        while self.t < t_end {
            let before = self.t;
            self.step(t_end)?;
            if self.t == before {
                break;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tol(rtol: f64) -> OdeTolerances {
        OdeTolerances { rtol, atol: rtol * 1e-2, max_step: f64::INFINITY }
    }

    #[test]
    fn rotating_decaying_scalar() {
        let lam = C64::new(-0.3, 2.0);
        let f = |_t: f64, y: &[C64], dy: &mut [C64]| dy[0] = lam * y[0];
        let mut s = Dopri5::new(f, 0.0, vec![C64::new(1.0, 0.0)], tol(1e-10));
        s.advance_to(5.0).unwrap();
        assert_eq!(s.t(), 5.0);
        let exact = (lam * 5.0).exp();
        assert!((s.y()[0] - exact).norm() < 1e-8);
    }

    #[test]
    fn dense_output_is_accurate() {
        let f = |_t: f64, y: &[C64], dy: &mut [C64]| {
            dy[0] = C64::new(0.0, -1.0) * y[0];
        };
        let mut s = Dopri5::new(f, 0.0, vec![C64::new(1.0, 0.0)], tol(1e-9));
        let mut out = vec![C64::new(0.0, 0.0)];
        let mut worst: f64 = 0.0;
        while s.t() < 10.0 {
            s.step(10.0).unwrap();
            let (a, b) = (s.last_step_start(), s.t());
            for q in 1..8 {
                let t = a + (b - a) * q as f64 / 8.0;
                s.dense(t, &mut out);
                worst = worst.max((out[0] - C64::new(0.0, -t).exp()).norm());
            }
        }
        assert!(worst < 1e-7, "{worst}");
    }

    #[test]
    fn respects_end_point_and_max_step() {
        let f = |t: f64, _y: &[C64], dy: &mut [C64]| dy[0] = C64::new(t.cos(), 0.0);
        let mut s = Dopri5::new(
            f,
            0.0,
            vec![C64::new(0.0, 0.0)],
            OdeTolerances { rtol: 1e-8, atol: 1e-10, max_step: 0.05 },
        );
        let mut prev = 0.0;
        while s.t() < 1.0 {
            s.step(1.0).unwrap();
            assert!(s.t() - prev <= 0.05 + 1e-15);
            prev = s.t();
        }
        assert_eq!(s.t(), 1.0);
        assert!((s.y()[0].re - 1f64.sin()).abs() < 1e-9);
    }
}
