//! Explicit Runge-Kutta integrators.
//!
//! Fixed-step Euler and classical RK4, plus the adaptive Dormand-Prince 5(4)
//! embedded pair (seven stages, FSAL) with a standard step-size controller.
//! [`integrate`] evaluates a trajectory at a sorted list of requested times;
//! requested times are hit exactly by clamping the step to the next boundary,
//! there is no dense-output interpolation.

use crate::error::{Error, Result};

/// Integration scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Euler,
    Rk4,
    Dopri5,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
            Method::Dopri5 => "dopri5",
        }
    }
}

/// Solver settings. Step sizes are in the same units as the requested times;
/// the defaults assume a unit time span (see [`SolverConfig::for_span`]).
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub method: Method,
    /// Relative tolerance (adaptive mode).
    pub rtol: f64,
    /// Absolute tolerance (adaptive mode).
    pub atol: f64,
    /// Initial step; also the fixed step for Euler/RK4.
    pub h_init: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub max_steps: usize,
    /// Safety factor of the step controller, in (0, 1].
    pub safety: f64,
    /// Lower bound on the per-step growth factor.
    pub scale_min: f64,
    /// Upper bound on the per-step growth factor.
    pub scale_max: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig::for_span(1.0)
    }
}

impl SolverConfig {
    /// Adaptive dopri5 defaults sized for integrating over `span` time units:
    /// rtol 1e-6, atol 1e-9, initial step span/100.
    pub fn for_span(span: f64) -> Self {
        SolverConfig {
            method: Method::Dopri5,
            rtol: 1e-6,
            atol: 1e-9,
            h_init: span / 100.0,
            h_min: 1e-10,
            h_max: span,
            max_steps: 100_000,
            safety: 0.9,
            scale_min: 0.2,
            scale_max: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::invalid("rtol and atol must be positive"));
        }
        if !(self.h_min > 0.0 && self.h_min <= self.h_init && self.h_init <= self.h_max) {
            return Err(Error::invalid("step sizes must satisfy 0 < h_min <= h_init <= h_max"));
        }
        if self.max_steps == 0 {
            return Err(Error::invalid("max_steps must be at least 1"));
        }
        if !(self.safety > 0.0 && self.safety <= 1.0) {
            return Err(Error::invalid("safety must be in (0, 1]"));
        }
        if !(self.scale_min > 0.0 && self.scale_min < 1.0 && self.scale_max > 1.0) {
            return Err(Error::invalid("growth bounds must satisfy 0 < scale_min < 1 < scale_max"));
        }
        Ok(())
    }
}

/// A time-dependent vector field `dz/dt = f(z, t)`. The output slice has the
/// same length as `z`.
pub trait VectorField {
    fn eval(&self, z: &[f64], t: f64, out: &mut [f64]);
}

impl<F> VectorField for F
where
    F: Fn(&[f64], f64, &mut [f64]),
{
    fn eval(&self, z: &[f64], t: f64, out: &mut [f64]) {
        self(z, t, out)
    }
}

fn ensure_finite(k: &[f64], t: f64, state: &[f64]) -> Result<()> {
    if k.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Integration {
            t,
            state: state.to_vec(),
            reason: "vector field returned a non-finite value".into(),
        })
    }
}

/// One explicit Euler step: `z + h * f(z, t)`.
pub fn euler_step<F: VectorField + ?Sized>(f: &F, z: &[f64], t: f64, h: f64) -> Result<Vec<f64>> {
    let mut k = vec![0.0; z.len()];
    f.eval(z, t, &mut k);
    ensure_finite(&k, t, z)?;
    Ok(z.iter().zip(&k).map(|(zi, ki)| zi + h * ki).collect())
}

/// One classical fourth-order Runge-Kutta step.
pub fn rk4_step<F: VectorField + ?Sized>(f: &F, z: &[f64], t: f64, h: f64) -> Result<Vec<f64>> {
    let n = z.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    f.eval(z, t, &mut k1);
    ensure_finite(&k1, t, z)?;
    for i in 0..n {
        tmp[i] = z[i] + 0.5 * h * k1[i];
    }
    f.eval(&tmp, t + 0.5 * h, &mut k2);
    ensure_finite(&k2, t, z)?;
    for i in 0..n {
        tmp[i] = z[i] + 0.5 * h * k2[i];
    }
    f.eval(&tmp, t + 0.5 * h, &mut k3);
    ensure_finite(&k3, t, z)?;
    for i in 0..n {
        tmp[i] = z[i] + h * k3[i];
    }
    f.eval(&tmp, t + h, &mut k4);
    ensure_finite(&k4, t, z)?;

    Ok((0..n)
        .map(|i| z[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

// Dormand-Prince 5(4) tableau.
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
// Fifth-order weights (b7 = 0); the seventh stage is f at the new point and
// is reused as k1 of the next step (FSAL).
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// b(5th) - b(4th), the embedded error weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// All seven dopri5 stages starting from a precomputed `k1 = f(z, t)`.
/// Returns the fifth-order solution, the embedded error estimate, and the
/// last stage `f(t + h, z5)` for FSAL reuse.
fn dopri5_stages<F: VectorField + ?Sized>(
    f: &F,
    z: &[f64],
    t: f64,
    h: f64,
    k1: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = z.len();
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    for i in 0..n {
        tmp[i] = z[i] + h * A21 * k1[i];
    }
    f.eval(&tmp, t + C2 * h, &mut k2);
    ensure_finite(&k2, t, z)?;

    for i in 0..n {
        tmp[i] = z[i] + h * (A31 * k1[i] + A32 * k2[i]);
    }
    f.eval(&tmp, t + C3 * h, &mut k3);
    ensure_finite(&k3, t, z)?;

    for i in 0..n {
        tmp[i] = z[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
    }
    f.eval(&tmp, t + C4 * h, &mut k4);
    ensure_finite(&k4, t, z)?;

    for i in 0..n {
        tmp[i] = z[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
    }
    f.eval(&tmp, t + C5 * h, &mut k5);
    ensure_finite(&k5, t, z)?;

    for i in 0..n {
        tmp[i] = z[i]
            + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
    }
    f.eval(&tmp, t + h, &mut k6);
    ensure_finite(&k6, t, z)?;

    let z5: Vec<f64> = (0..n)
        .map(|i| {
            z[i] + h * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i])
        })
        .collect();
    ensure_finite(&z5, t, z)?;

    f.eval(&z5, t + h, &mut k7);
    ensure_finite(&k7, t, z)?;

    let err: Vec<f64> = (0..n)
        .map(|i| {
            h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i])
        })
        .collect();

    Ok((z5, err, k7))
}

/// One Dormand-Prince 5(4) step. Returns the fifth-order solution and the
/// embedded fourth-vs-fifth-order error estimate.
pub fn dopri5_step<F: VectorField + ?Sized>(
    f: &F,
    z: &[f64],
    t: f64,
    h: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut k1 = vec![0.0; z.len()];
    f.eval(z, t, &mut k1);
    ensure_finite(&k1, t, z)?;
    let (z5, err, _) = dopri5_stages(f, z, t, h, &k1)?;
    Ok((z5, err))
}

/// Mixed-tolerance RMS error norm: the step is acceptable when this is <= 1.
fn error_norm(err: &[f64], z_old: &[f64], z_new: &[f64], cfg: &SolverConfig) -> f64 {
    let n = err.len() as f64;
    let sum: f64 = err
        .iter()
        .zip(z_old.iter().zip(z_new))
        .map(|(e, (a, b))| {
            let scale = cfg.atol + cfg.rtol * a.abs().max(b.abs());
            let r = e / scale;
            r * r
        })
        .sum();
    (sum / n).sqrt()
}

// Below this the error estimate is treated as exact and the step grows
// maximally instead of dividing by ~zero.
const ERR_NORM_FLOOR: f64 = 1e-12;

/// Step-size controller for an embedded pair of the given order.
/// Accepts when `err_norm <= 1` and proposes the next step
/// `h * clamp(safety * err_norm^(-1/order), scale_min, scale_max)`,
/// clamped to `[h_min, h_max]`.
pub fn adapt_step(err_norm: f64, h: f64, order: u32, cfg: &SolverConfig) -> (bool, f64) {
    let accept = err_norm <= 1.0;
    let factor = if err_norm < ERR_NORM_FLOOR {
        cfg.scale_max
    } else {
        (cfg.safety * err_norm.powf(-1.0 / order as f64)).clamp(cfg.scale_min, cfg.scale_max)
    };
    let h_next = (h * factor).clamp(cfg.h_min, cfg.h_max);
    (accept, h_next)
}

fn validate_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::invalid("times must be non-empty"));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("times must be finite"));
    }
    for (i, w) in times.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(Error::invalid(format!(
                "times not strictly increasing at index {}",
                i + 1
            )));
        }
    }
    Ok(())
}

/// Integrate `dz/dt = f(z, t)` from `z0` at `times[0]` and return the state
/// at every requested time. The first output is `z0` itself, bit for bit.
pub fn integrate<F: VectorField + ?Sized>(
    f: &F,
    z0: &[f64],
    times: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    validate_times(times)?;
    if z0.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("initial state must be finite"));
    }

    match cfg.method {
        Method::Euler | Method::Rk4 => integrate_fixed(f, z0, times, cfg),
        Method::Dopri5 => integrate_adaptive(f, z0, times, cfg),
    }
}

fn integrate_fixed<F: VectorField + ?Sized>(
    f: &F,
    z0: &[f64],
    times: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(times.len());
    out.push(z0.to_vec());
    let mut z = z0.to_vec();
    let mut steps = 0usize;

    for w in times.windows(2) {
        let t_end = w[1];
        let mut t = w[0];
        loop {
            let remaining = t_end - t;
            if remaining <= 0.0 {
                break;
            }
            steps += 1;
            if steps > cfg.max_steps {
                return Err(Error::Integration {
                    t,
                    state: z,
                    reason: format!("max_steps ({}) exceeded", cfg.max_steps),
                });
            }
            let clamped = cfg.h_init >= remaining;
            let h = if clamped { remaining } else { cfg.h_init };
            z = match cfg.method {
                Method::Euler => euler_step(f, &z, t, h)?,
                _ => rk4_step(f, &z, t, h)?,
            };
            t = if clamped { t_end } else { t + h };
        }
        out.push(z.clone());
    }
    Ok(out)
}

fn integrate_adaptive<F: VectorField + ?Sized>(
    f: &F,
    z0: &[f64],
    times: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<Vec<f64>>> {
    let n = z0.len();
    let mut out = Vec::with_capacity(times.len());
    out.push(z0.to_vec());

    let mut z = z0.to_vec();
    let mut t = times[0];
    let mut k1 = vec![0.0; n];
    f.eval(&z, t, &mut k1);
    ensure_finite(&k1, t, &z)?;
    let mut h = cfg.h_init;
    let mut steps = 0usize;

    for &target in &times[1..] {
        while t < target {
            steps += 1;
            if steps > cfg.max_steps {
                return Err(Error::Integration {
                    t,
                    state: z,
                    reason: format!("max_steps ({}) exceeded", cfg.max_steps),
                });
            }
            let remaining = target - t;
            let clamped = h >= remaining;
            let h_try = if clamped { remaining } else { h };

            let (z5, err, k7) = dopri5_stages(f, &z, t, h_try, &k1)?;
            let en = error_norm(&err, &z, &z5, cfg);
            let (accept, h_next) = adapt_step(en, h_try, 5, cfg);

            if accept {
                t = if clamped { target } else { t + h_try };
                z = z5;
                k1 = k7;
                h = h_next;
            } else {
                if h_try <= cfg.h_min {
                    return Err(Error::Integration {
                        t,
                        state: z,
                        reason: format!("step size underflow below h_min ({:e})", cfg.h_min),
                    });
                }
                h = h_next;
            }
        }
        out.push(z.clone());
    }
    Ok(out)
}
