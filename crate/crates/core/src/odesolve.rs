//! Adaptive Dormand–Prince 5(4) integrator for dosing schedules.
//!
//! Integration is split at every breakpoint (output time, bolus time,
//! infusion start/end). Bolus jumps and infusion-rate changes are applied by
//! hard restarts: the step size is reset and the first stage re-evaluated, so
//! a discontinuity never falls inside a step. Outputs at a bolus time are
//! recorded before the jump.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("step budget of {max_steps} exhausted at t = {t}")]
    StepLimit { t: f64, max_steps: usize },
    #[error("non-finite state or derivative at t = {t}")]
    Divergence { t: f64 },
    #[error("invalid problem: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// Overrides the default `1e-3 * (first interval length)`.
    pub initial_step: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { rtol: 1e-6, atol: 1e-6, max_steps: 100_000, initial_step: None }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), OdeError> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(OdeError::Invalid(format!(
                "tolerances must be positive (rtol={}, atol={})",
                self.rtol, self.atol
            )));
        }
        if self.max_steps < 1 {
            return Err(OdeError::Invalid("max_steps must be at least 1".into()));
        }
        if let Some(h) = self.initial_step {
            if !(h > 0.0) {
                return Err(OdeError::Invalid(format!("initial step must be positive, got {h}")));
            }
        }
        Ok(())
    }
}

/// A discontinuity in the forcing of the system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Event<const D: usize> {
    /// Instantaneous state jump `x += jump` at `time`.
    Bolus { time: f64, jump: [f64; D] },
    /// Constant additive input `rate` to `dx/dt` on `[start, end)`.
    Infusion { start: f64, end: f64, rate: [f64; D] },
}

/// Initial value problem with a dosing schedule. `rhs(t, x, rate, dx)`
/// receives the summed active infusion rate.
pub struct OdeProblem<const D: usize, F>
where
    F: Fn(f64, &[f64; D], &[f64; D], &mut [f64; D]),
{
    pub rhs: F,
    pub t0: f64,
    pub x0: [f64; D],
    pub events: Vec<Event<D>>,
    pub output_times: Vec<f64>,
}

// Dormand–Prince 5(4) tableau.
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
// error coefficients: b5 - b4
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const BETA: f64 = 0.04;
const ALPHA: f64 = 0.2 - 0.75 * BETA;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Output,
    Restart,
}

fn finite<const D: usize>(v: &[f64; D]) -> bool {
    v.iter().all(|x| x.is_finite())
}

struct Stepper<'a, const D: usize, F> {
    rhs: &'a F,
    config: &'a SolverConfig,
    steps: usize,
    h: f64,
    err_prev: f64,
}

impl<const D: usize, F> Stepper<'_, D, F>
where
    F: Fn(f64, &[f64; D], &[f64; D], &mut [f64; D]),
{
    fn eval(&self, t: f64, x: &[f64; D], rate: &[f64; D], out: &mut [f64; D]) -> Result<(), OdeError> {
        (self.rhs)(t, x, rate, out);
        if finite(out) {
            Ok(())
        } else {
            Err(OdeError::Divergence { t })
        }
    }

    /// Advances `x` from `t` to exactly `t_end` under a constant `rate`.
    fn advance(&mut self, t: &mut f64, t_end: f64, x: &mut [f64; D], rate: &[f64; D]) -> Result<(), OdeError> {
        let mut k1 = [0.0; D];
        self.eval(*t, x, rate, &mut k1)?;
        let (mut k2, mut k3, mut k4, mut k5, mut k6, mut k7) = ([0.0; D], [0.0; D], [0.0; D], [0.0; D], [0.0; D], [0.0; D]);
        let mut y = [0.0; D];
        let mut y5 = [0.0; D];
        let mut last_rejected = false;
        while *t < t_end {
            if self.steps >= self.config.max_steps {
                return Err(OdeError::StepLimit { t: *t, max_steps: self.config.max_steps });
            }
            self.steps += 1;
            let mut h = self.h;
            let landing = *t + 1.01 * h >= t_end;
            if landing {
                h = t_end - *t;
            }
            if !(h > f64::EPSILON * t.abs().max(1.0) * 4.0) && !landing {
                return Err(OdeError::Divergence { t: *t });
            }
            let t0 = *t;
            for i in 0..D {
                y[i] = x[i] + h * A21 * k1[i];
            }
            self.eval(t0 + C2 * h, &y, rate, &mut k2)?;
            for i in 0..D {
                y[i] = x[i] + h * (A31 * k1[i] + A32 * k2[i]);
            }
            self.eval(t0 + C3 * h, &y, rate, &mut k3)?;
            for i in 0..D {
                y[i] = x[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            self.eval(t0 + C4 * h, &y, rate, &mut k4)?;
            for i in 0..D {
                y[i] = x[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            self.eval(t0 + C5 * h, &y, rate, &mut k5)?;
            for i in 0..D {
                y[i] = x[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            self.eval(t0 + h, &y, rate, &mut k6)?;
            for i in 0..D {
                y5[i] = x[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
            }
            let t_new = if landing { t_end } else { t0 + h };
            self.eval(t_new, &y5, rate, &mut k7)?;

            let mut err: f64 = 0.0;
            for i in 0..D {
                let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
                let scale = self.config.atol + self.config.rtol * x[i].abs().max(y5[i].abs());
                err = err.max((e / scale).abs());
            }
            if !err.is_finite() {
                return Err(OdeError::Divergence { t: t0 });
            }

            if err <= 1.0 {
                let mut fac = if err == 0.0 {
                    FAC_MAX
                } else {
                    SAFETY * err.powf(-ALPHA) * self.err_prev.powf(BETA)
                };
                if last_rejected {
                    fac = fac.min(1.0);
                }
                fac = fac.clamp(FAC_MIN, FAC_MAX);
                self.err_prev = err.max(1e-4);
                *x = y5;
                k1 = k7;
                *t = t_new;
                // keep the controller's step, not the truncated landing step
                self.h = if landing { self.h.max(h) } else { h * fac };
                last_rejected = false;
            } else {
                let fac = (SAFETY * err.powf(-ALPHA)).clamp(FAC_MIN, 1.0);
                self.h = h * fac;
                last_rejected = true;
            }
        }
        Ok(())
    }
}

/// Integrates the problem, returning the state at each output time (in the
/// order given).
pub fn integrate<const D: usize, F>(problem: &OdeProblem<D, F>, config: &SolverConfig) -> Result<Vec<[f64; D]>, OdeError>
where
    F: Fn(f64, &[f64; D], &[f64; D], &mut [f64; D]),
{
    config.validate()?;
    let t0 = problem.t0;
    if !finite(&problem.x0) || !t0.is_finite() {
        return Err(OdeError::Invalid("initial state or time not finite".into()));
    }
    for w in problem.output_times.windows(2) {
        if w[1] < w[0] {
            return Err(OdeError::Invalid("output times not sorted".into()));
        }
    }
    if let Some(&t) = problem.output_times.iter().find(|&&t| !(t >= t0) || !t.is_finite()) {
        return Err(OdeError::Invalid(format!("output time {t} before start time {t0}")));
    }
    let t_end = match problem.output_times.last() {
        Some(&t) => t,
        None => return Ok(Vec::new()),
    };

    let mut marks: Vec<(f64, Kind)> = problem.output_times.iter().map(|&t| (t, Kind::Output)).collect();
    for ev in &problem.events {
        match *ev {
            Event::Bolus { time, .. } => marks.push((time, Kind::Restart)),
            Event::Infusion { start, end, .. } => {
                if !(end >= start) {
                    return Err(OdeError::Invalid(format!("infusion ends ({end}) before it starts ({start})")));
                }
                marks.push((start, Kind::Restart));
                marks.push((end, Kind::Restart));
            }
        }
    }
    marks.retain(|&(t, _)| t >= t0 && t <= t_end);
    marks.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points: Vec<(f64, bool)> = Vec::with_capacity(marks.len());
    for (t, kind) in marks {
        match points.last_mut() {
            Some(last) if last.0 == t => last.1 |= kind == Kind::Restart,
            _ => points.push((t, kind == Kind::Restart)),
        }
    }

    let rate_on = |a: f64, b: f64| -> [f64; D] {
        let mid = 0.5 * (a + b);
        let mut r = [0.0; D];
        for ev in &problem.events {
            if let Event::Infusion { start, end, rate } = *ev {
                if start <= mid && mid < end {
                    for i in 0..D {
                        r[i] += rate[i];
                    }
                }
            }
        }
        r
    };
    let restart_step = |t: f64, idx: usize| -> f64 {
        let next = points[idx..].iter().map(|p| p.0).find(|&p| p > t).unwrap_or(t_end);
        config.initial_step.unwrap_or(1e-3 * (next - t)).max(f64::MIN_POSITIVE)
    };

    let mut stepper = Stepper { rhs: &problem.rhs, config, steps: 0, h: restart_step(t0, 0), err_prev: 1e-4 };
    let mut x = problem.x0;
    let mut t = t0;
    let mut outputs = Vec::with_capacity(problem.output_times.len());
    let mut next_output = 0;

    for (idx, &(bp, restart)) in points.iter().enumerate() {
        if bp > t {
            let rate = rate_on(t, bp);
            stepper.advance(&mut t, bp, &mut x, &rate)?;
        }
        while next_output < problem.output_times.len() && problem.output_times[next_output] == bp {
            outputs.push(x);
            next_output += 1;
        }
        if restart {
            for ev in &problem.events {
                if let Event::Bolus { time, jump } = *ev {
                    if time == bp {
                        for i in 0..D {
                            x[i] += jump[i];
                        }
                    }
                }
            }
            stepper.h = restart_step(bp, idx);
            stepper.err_prev = 1e-4;
        }
    }
    debug_assert_eq!(outputs.len(), problem.output_times.len());
    Ok(outputs)
}
