//! Dormand–Prince 5(4) integrator with continuous (dense) output.
//!
//! The stepper keeps every accepted step together with its fourth-order
//! interpolation coefficients, so callers can evaluate the solution at any
//! time inside the integrated range. After each accepted step an observer may
//! inspect and rewrite the state (used for chart transitions), or stop the
//! integration.

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

/// Right-hand side of `y' = f(t, y)`.
pub trait OdeSystem {
    fn dim(&self) -> usize;

    /// Writes `f(t, y)` into `dy`. Returns `false` when the evaluation is not
    /// finite or otherwise undefined.
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) -> bool;
}

#[derive(Debug, Clone, Copy)]
pub struct Dopri5Options {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step magnitude; estimated when `None`.
    pub h_init: Option<f64>,
    /// Upper bound on the step magnitude.
    pub h_max: f64,
    pub max_steps: usize,
    /// States whose max-norm exceeds this bound count as a blow-up.
    pub overflow: f64,
}

impl Dopri5Options {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            rtol: tol,
            atol: tol,
            ..Self::default()
        }
    }
}

impl Default for Dopri5Options {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-10,
            h_init: None,
            h_max: 0.25,
            max_steps: 200_000,
            overflow: 1e8,
        }
    }
}

/// One accepted step with its continuous extension.
#[derive(Debug, Clone)]
pub struct DenseStep {
    pub t0: f64,
    pub h: f64,
    rcont: [Vec<f64>; 5],
}

impl DenseStep {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    pub fn contains(&self, t: f64) -> bool {
        let (lo, hi) = if self.h >= 0.0 {
            (self.t0, self.t0 + self.h)
        } else {
            (self.t0 + self.h, self.t0)
        };
        t >= lo - 1e-14 * (1.0 + lo.abs()) && t <= hi + 1e-14 * (1.0 + hi.abs())
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let theta = if self.h == 0.0 { 0.0 } else { (t - self.t0) / self.h };
        let theta1 = 1.0 - theta;
        let [r1, r2, r3, r4, r5] = &self.rcont;
        for i in 0..out.len() {
            out[i] = r1[i] + theta * (r2[i] + theta1 * (r3[i] + theta * (r4[i] + theta1 * r5[i])));
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.rcont[0].len()];
        self.eval_into(t, &mut out);
        out
    }
}

/// What the observer wants after an accepted step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepAction {
    Continue,
    /// The observer rewrote the state; derivative caches must be refreshed.
    Modified,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    Completed,
    Stopped { t: f64 },
    StepUnderflow { t: f64 },
    NonFinite { t: f64 },
    Overflow { t: f64 },
    MaxSteps { t: f64 },
}

impl Outcome {
    pub fn is_completed(&self) -> bool {
        matches!(self, Outcome::Completed)
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    /// Accepted grid, starting with `t0`.
    pub t: Vec<f64>,
    /// State after each accepted step (after observer rewrites).
    pub y: Vec<Vec<f64>>,
    pub steps: Vec<DenseStep>,
    pub outcome: Outcome,
    pub rhs_evals: usize,
    pub rejected: usize,
}

impl Solution {
    pub fn t_last(&self) -> f64 {
        *self.t.last().expect("solution holds the initial time")
    }

    pub fn y_last(&self) -> &[f64] {
        self.y.last().expect("solution holds the initial state")
    }

    /// Index of the dense step covering `t`, if any.
    pub fn step_index(&self, t: f64) -> Option<usize> {
        if self.steps.is_empty() {
            return None;
        }
        let forward = self.steps[0].h >= 0.0;
        let idx = self.steps.partition_point(|s| {
            if forward {
                s.t1() < t
            } else {
                s.t1() > t
            }
        });
        let idx = idx.min(self.steps.len() - 1);
        if self.steps[idx].contains(t) {
            Some(idx)
        } else {
            None
        }
    }

    pub fn eval(&self, t: f64) -> Option<Vec<f64>> {
        if self.steps.is_empty() {
            return (t == self.t[0]).then(|| self.y[0].clone());
        }
        self.step_index(t).map(|i| self.steps[i].eval(t))
    }
}

fn weighted_rms(err: &[f64], y0: &[f64], y1: &[f64], rtol: f64, atol: f64) -> f64 {
    let n = err.len().max(1) as f64;
    let s: f64 = err
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| {
            let sk = atol + rtol * a.abs().max(b.abs());
            (e / sk).powi(2)
        })
        .sum();
    (s / n).sqrt()
}

fn max_abs(y: &[f64]) -> f64 {
    y.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

fn initial_step<S: OdeSystem>(sys: &S, t0: f64, y0: &[f64], f0: &[f64], dir: f64, opts: &Dopri5Options) -> f64 {
    let dim = y0.len();
    let sk: Vec<f64> = y0.iter().map(|v| opts.atol + opts.rtol * v.abs()).collect();
    let dnf: f64 = f0.iter().zip(&sk).map(|(f, s)| (f / s).powi(2)).sum::<f64>() / dim as f64;
    let dny: f64 = y0.iter().zip(&sk).map(|(y, s)| (y / s).powi(2)).sum::<f64>() / dim as f64;
    let mut h = if dnf <= 1e-10 || dny <= 1e-10 {
        1e-6
    } else {
        (dny / dnf).sqrt() * 0.01
    };
    h = h.min(opts.h_max);
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, f)| y + dir * h * f).collect();
    let mut f1 = vec![0.0; dim];
    if !sys.rhs(t0 + dir * h, &y1, &mut f1) {
        return h * 0.1;
    }
    let der2 = (f1
        .iter()
        .zip(f0)
        .zip(&sk)
        .map(|((a, b), s)| ((a - b) / s).powi(2))
        .sum::<f64>()
        / dim as f64)
        .sqrt()
        / h;
    let der12 = der2.abs().max(dnf.sqrt());
    let h1 = if der12 <= 1e-15 {
        (h * 1e-3).max(1e-6)
    } else {
        (0.01 / der12).powf(1.0 / 5.0)
    };
    (100.0 * h).min(h1).min(opts.h_max)
}

/// Integrates from `t0` to `t_end` (either direction).
pub fn integrate<S, F>(sys: &S, t0: f64, y0: &[f64], t_end: f64, opts: &Dopri5Options, mut observer: F) -> Solution
where
    S: OdeSystem,
    F: FnMut(f64, &mut [f64]) -> StepAction,
{
    let dim = sys.dim();
    assert_eq!(dim, y0.len(), "state dimension mismatch");
    let mut sol = Solution {
        t: vec![t0],
        y: vec![y0.to_vec()],
        steps: Vec::new(),
        outcome: Outcome::Completed,
        rhs_evals: 0,
        rejected: 0,
    };
    if t_end == t0 {
        return sol;
    }
    let dir = if t_end > t0 { 1.0 } else { -1.0 };
    let mut t = t0;
    let mut y = y0.to_vec();

    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut k5 = vec![0.0; dim];
    let mut k6 = vec![0.0; dim];
    let mut k7 = vec![0.0; dim];
    let mut ytmp = vec![0.0; dim];
    let mut ynew = vec![0.0; dim];
    let mut err = vec![0.0; dim];

    if !sys.rhs(t, &y, &mut k1) {
        sol.outcome = Outcome::NonFinite { t };
        return sol;
    }
    sol.rhs_evals += 1;

    let mut h = opts
        .h_init
        .unwrap_or_else(|| initial_step(sys, t, &y, &k1, dir, opts))
        .abs()
        .min(opts.h_max);
    let mut reject_prev = false;
    let mut n_steps = 0usize;

    loop {
        let remaining = (t_end - t) * dir;
        if remaining <= 1e-15 * (1.0 + t_end.abs()) {
            break;
        }
        if n_steps >= opts.max_steps {
            sol.outcome = Outcome::MaxSteps { t };
            break;
        }
        let h_min = 16.0 * f64::EPSILON * t.abs().max(1.0);
        if h < h_min {
            sol.outcome = Outcome::StepUnderflow { t };
            break;
        }
        let last = h >= remaining;
        let hs = if last { remaining * dir } else { h * dir };

        let mut ok = true;
        for i in 0..dim {
            ytmp[i] = y[i] + hs * A21 * k1[i];
        }
        ok &= sys.rhs(t + C2 * hs, &ytmp, &mut k2);
        for i in 0..dim {
            ytmp[i] = y[i] + hs * (A31 * k1[i] + A32 * k2[i]);
        }
        ok &= ok && sys.rhs(t + C3 * hs, &ytmp, &mut k3);
        for i in 0..dim {
            ytmp[i] = y[i] + hs * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        ok &= ok && sys.rhs(t + C4 * hs, &ytmp, &mut k4);
        for i in 0..dim {
            ytmp[i] = y[i] + hs * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        ok &= ok && sys.rhs(t + C5 * hs, &ytmp, &mut k5);
        for i in 0..dim {
            ytmp[i] = y[i] + hs * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        ok &= ok && sys.rhs(t + hs, &ytmp, &mut k6);
        for i in 0..dim {
            ynew[i] = y[i] + hs * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        ok &= ok && sys.rhs(t + hs, &ynew, &mut k7);
        sol.rhs_evals += 6;

        if !ok || ynew.iter().any(|v| !v.is_finite()) {
            // Shrink aggressively; a persistent failure ends in underflow.
            h *= 0.25;
            reject_prev = true;
            sol.rejected += 1;
            continue;
        }

        for i in 0..dim {
            err[i] = hs * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
        let en = weighted_rms(&err, &y, &ynew, opts.rtol, opts.atol);

        if en <= 1.0 {
            let mut r5 = vec![0.0; dim];
            let mut r2 = vec![0.0; dim];
            let mut r3 = vec![0.0; dim];
            let mut r4 = vec![0.0; dim];
            for i in 0..dim {
                let ydiff = ynew[i] - y[i];
                let bspl = hs * k1[i] - ydiff;
                r2[i] = ydiff;
                r3[i] = bspl;
                r4[i] = ydiff - hs * k7[i] - bspl;
                r5[i] = hs * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
            }
            sol.steps.push(DenseStep {
                t0: t,
                h: hs,
                rcont: [y.clone(), r2, r3, r4, r5],
            });
            t = if last { t_end } else { t + hs };
            y.copy_from_slice(&ynew);
            std::mem::swap(&mut k1, &mut k7);
            n_steps += 1;

            if max_abs(&y) > opts.overflow {
                sol.t.push(t);
                sol.y.push(y.clone());
                sol.outcome = Outcome::Overflow { t };
                break;
            }

            let action = observer(t, &mut y);
            sol.t.push(t);
            sol.y.push(y.clone());
            match action {
                StepAction::Continue => {}
                StepAction::Modified => {
                    if !sys.rhs(t, &y, &mut k1) {
                        sol.outcome = Outcome::NonFinite { t };
                        break;
                    }
                    sol.rhs_evals += 1;
                }
                StepAction::Stop => {
                    sol.outcome = Outcome::Stopped { t };
                    break;
                }
            }

            let mut fac = 0.9 * en.max(1e-10).powf(-0.2);
            fac = fac.clamp(0.2, 10.0);
            if reject_prev {
                fac = fac.min(1.0);
            }
            h = (h * fac).min(opts.h_max);
            reject_prev = false;
        } else {
            let fac = (0.9 * en.powf(-0.2)).max(0.2);
            h *= fac;
            reject_prev = true;
            sol.rejected += 1;
        }
    }
    sol
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Oscillator;

    impl OdeSystem for Oscillator {
        fn dim(&self) -> usize {
            2
        }
        fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) -> bool {
            dy[0] = y[1];
            dy[1] = -y[0];
            true
        }
    }

    struct Blowup;

    impl OdeSystem for Blowup {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) -> bool {
            dy[0] = y[0] * y[0];
            true
        }
    }

    #[test]
    fn oscillator_matches_closed_form() {
        let opts = Dopri5Options::with_tol(1e-12);
        let sol = integrate(&Oscillator, 0.0, &[1.0, 0.0], 10.0, &opts, |_, _| StepAction::Continue);
        assert!(sol.outcome.is_completed());
        let y = sol.y_last();
        assert!((y[0] - 10f64.cos()).abs() < 1e-9);
        assert!((y[1] + 10f64.sin()).abs() < 1e-9);
        for &t in &[0.3, 2.71, 7.7] {
            let v = sol.eval(t).unwrap();
            assert!((v[0] - t.cos()).abs() < 1e-8, "dense output at {t}");
        }
    }

    #[test]
    fn backward_integration_returns_start() {
        let opts = Dopri5Options::with_tol(1e-12);
        let fwd = integrate(&Oscillator, 0.0, &[0.2, 0.7], 3.0, &opts, |_, _| StepAction::Continue);
        let back = integrate(&Oscillator, 3.0, fwd.y_last(), 0.0, &opts, |_, _| StepAction::Continue);
        let y = back.y_last();
        assert!((y[0] - 0.2).abs() < 1e-9 && (y[1] - 0.7).abs() < 1e-9);
        assert!(back.eval(1.5).is_some());
    }

    #[test]
    fn finite_time_blowup_is_reported() {
        let opts = Dopri5Options::with_tol(1e-8);
        let sol = integrate(&Blowup, 0.0, &[1.0], 2.0, &opts, |_, _| StepAction::Continue);
        assert!(!sol.outcome.is_completed());
        assert!(sol.t_last() < 1.0 + 1e-6);
    }

    #[test]
    fn zero_length_interval_is_identity() {
        let sol = integrate(&Oscillator, 1.0, &[0.5, 0.5], 1.0, &Dopri5Options::default(), |_, _| StepAction::Continue);
        assert_eq!(sol.t, vec![1.0]);
        assert_eq!(sol.eval(1.0).unwrap(), vec![0.5, 0.5]);
    }
}
