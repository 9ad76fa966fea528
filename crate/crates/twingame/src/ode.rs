//! Initial-value ODE integration: classical RK4 on a fixed mesh and an
//! embedded Dormand–Prince 5(4) pair with error control and cubic-Hermite
//! dense output.

use crate::error::{Error, Result};

/// Right-hand side written into a caller-provided buffer.
pub type Rhs<'a> = &'a (dyn Fn(f64, &[f64], &mut [f64]) + Sync);

/// Initial-value problem over `[t0, t1]`.
pub struct OdeProblem<'a> {
    pub rhs: Rhs<'a>,
    pub t0: f64,
    pub t1: f64,
    pub y0: Vec<f64>,
}

impl<'a> OdeProblem<'a> {
    pub fn new(rhs: Rhs<'a>, t0: f64, t1: f64, y0: Vec<f64>) -> Self {
        OdeProblem { rhs, t0, t1, y0 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.t1 > self.t0) {
            return Err(Error::InvalidParameter(format!(
                "integration bounds require t1 > t0 (got {} .. {})",
                self.t0, self.t1
            )));
        }
        Ok(())
    }
}

/// Time-sampled solution with node derivatives for dense output.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub derivs: Vec<Vec<f64>>,
}

impl Trajectory {
    /// Builds a trajectory from raw samples; node derivatives are
    /// reconstructed by finite differences on the mesh.
    pub fn from_samples(times: Vec<f64>, values: Vec<Vec<f64>>) -> Self {
        assert_eq!(times.len(), values.len());
        assert!(times.len() >= 2, "a trajectory needs at least two samples");
        let n = times.len();
        let dim = values[0].len();
        let mut derivs = vec![vec![0.0; dim]; n];
        for i in 0..n {
            let (lo, hi) = if i == 0 {
                (0, 1)
            } else if i == n - 1 {
                (n - 2, n - 1)
            } else {
                (i - 1, i + 1)
            };
            let dt = times[hi] - times[lo];
            for d in 0..dim {
                derivs[i][d] = (values[hi][d] - values[lo][d]) / dt;
            }
        }
        Trajectory {
            times,
            values,
            derivs,
        }
    }

    pub fn from_samples_with_derivs(
        times: Vec<f64>,
        values: Vec<Vec<f64>>,
        derivs: Vec<Vec<f64>>,
    ) -> Self {
        assert_eq!(times.len(), values.len());
        assert_eq!(times.len(), derivs.len());
        Trajectory {
            times,
            values,
            derivs,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn t_start(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn last(&self) -> &[f64] {
        self.values.last().unwrap()
    }

    /// Cubic Hermite interpolation between the bracketing mesh nodes
    /// (4th-order accurate on smooth solutions).
    pub fn sample_into(&self, t: f64, out: &mut [f64]) {
        let n = self.times.len();
        let t = t.clamp(self.times[0], self.times[n - 1]);
        let hi = self
            .times
            .partition_point(|&s| s < t)
            .clamp(1, n - 1);
        let lo = hi - 1;
        let h = self.times[hi] - self.times[lo];
        let theta = (t - self.times[lo]) / h;
        let t2 = theta * theta;
        let t3 = t2 * theta;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + theta;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        let (ya, yb) = (&self.values[lo], &self.values[hi]);
        let (fa, fb) = (&self.derivs[lo], &self.derivs[hi]);
        for d in 0..out.len() {
            out[d] = h00 * ya[d] + h01 * yb[d] + h * (h10 * fa[d] + h11 * fb[d]);
        }
    }

    pub fn sample(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.sample_into(t, &mut out);
        out
    }

    /// Resamples onto a uniform mesh with `points` nodes.
    pub fn resample_uniform(&self, points: usize) -> Trajectory {
        assert!(points >= 2);
        let (a, b) = (self.t_start(), self.t_end());
        let times: Vec<f64> = (0..points)
            .map(|i| a + (b - a) * i as f64 / (points - 1) as f64)
            .collect();
        let values: Vec<Vec<f64>> = times.iter().map(|&t| self.sample(t)).collect();
        Trajectory::from_samples(times, values)
    }
}

/// Per-step state projection. Returns `Ok(true)` when the state was
/// adjusted (derivatives are then refreshed), `Err` to abort integration.
pub type StepGuard<'a> = &'a (dyn Fn(&mut [f64]) -> std::result::Result<bool, String> + Sync);

#[derive(Default)]
pub struct AdaptiveOptions<'a> {
    /// Hard cap on accepted + rejected steps (0 = default 10_000_000).
    pub max_steps: usize,
    pub h_init: Option<f64>,
    pub h_max: Option<f64>,
    pub guard: Option<StepGuard<'a>>,
}

fn check_finite(t: f64, y: &[f64]) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Integration {
            t,
            msg: "non-finite state or derivative".into(),
        })
    }
}

// ---------------------------------------------------------------------------
// Fixed-step classical RK4
// ---------------------------------------------------------------------------

/// Scratch buffers for an RK4 step, reused across propagations.
pub struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Scratch {
    pub fn new(dim: usize) -> Self {
        Rk4Scratch {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }
}

/// One classical RK4 step in place.
pub fn rk4_step(rhs: Rhs, t: f64, h: f64, y: &mut [f64], s: &mut Rk4Scratch) {
    let n = y.len();
    (rhs)(t, y, &mut s.k1);
    for i in 0..n {
        s.tmp[i] = y[i] + 0.5 * h * s.k1[i];
    }
    (rhs)(t + 0.5 * h, &s.tmp, &mut s.k2);
    for i in 0..n {
        s.tmp[i] = y[i] + 0.5 * h * s.k2[i];
    }
    (rhs)(t + 0.5 * h, &s.tmp, &mut s.k3);
    for i in 0..n {
        s.tmp[i] = y[i] + h * s.k3[i];
    }
    (rhs)(t + h, &s.tmp, &mut s.k4);
    for i in 0..n {
        y[i] += h / 6.0 * (s.k1[i] + 2.0 * s.k2[i] + 2.0 * s.k3[i] + s.k4[i]);
    }
}

/// Propagates `y` over `nsteps` uniform RK4 steps of width `h` without
/// storing the path. Used heavily by the shooting solver.
pub fn rk4_propagate(
    rhs: Rhs,
    t0: f64,
    h: f64,
    nsteps: usize,
    y: &mut [f64],
    s: &mut Rk4Scratch,
) -> Result<()> {
    for step in 0..nsteps {
        let t = t0 + h * step as f64;
        rk4_step(rhs, t, h, y, s);
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::Integration {
                t: t + h,
                msg: "non-finite state during segment propagation".into(),
            });
        }
    }
    Ok(())
}

/// Classical RK4 on a uniform mesh; global error O(step^4) on smooth
/// problems.
pub fn integrate_fixed(p: &OdeProblem, step: f64) -> Result<Trajectory> {
    p.validate()?;
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "step must be positive (got {step})"
        )));
    }
    let n = p.y0.len();
    let span = p.t1 - p.t0;
    let nsteps = (span / step).ceil().max(1.0) as usize;
    let h = span / nsteps as f64;

    let mut times = Vec::with_capacity(nsteps + 1);
    let mut values = Vec::with_capacity(nsteps + 1);
    let mut derivs = Vec::with_capacity(nsteps + 1);
    let mut y = p.y0.clone();
    let mut s = Rk4Scratch::new(n);
    let mut f = vec![0.0; n];

    (p.rhs)(p.t0, &y, &mut f);
    check_finite(p.t0, &f)?;
    times.push(p.t0);
    values.push(y.clone());
    derivs.push(f.clone());

    for step_idx in 0..nsteps {
        let t = p.t0 + h * step_idx as f64;
        rk4_step(p.rhs, t, h, &mut y, &mut s);
        let t_next = if step_idx + 1 == nsteps {
            p.t1
        } else {
            p.t0 + h * (step_idx + 1) as f64
        };
        check_finite(t_next, &y)?;
        (p.rhs)(t_next, &y, &mut f);
        check_finite(t_next, &f)?;
        times.push(t_next);
        values.push(y.clone());
        derivs.push(f.clone());
    }
    Ok(Trajectory {
        times,
        values,
        derivs,
    })
}

// ---------------------------------------------------------------------------
// Dormand–Prince 5(4)
// ---------------------------------------------------------------------------

const DP_C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A2: [f64; 1] = [1.0 / 5.0];
const DP_A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const DP_A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const DP_A5: [f64; 4] = [
    19372.0 / 6561.0,
    -25360.0 / 2187.0,
    64448.0 / 6561.0,
    -212.0 / 729.0,
];
const DP_A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
const DP_B: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
// b - b*: weights of the embedded 4th-order error estimate.
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Default tolerances used across the crate for game-system integration.
pub const DEFAULT_RTOL: f64 = 1e-8;
pub const DEFAULT_ATOL: f64 = 1e-10;

pub fn integrate_adaptive(p: &OdeProblem, rtol: f64, atol: f64) -> Result<Trajectory> {
    integrate_adaptive_with(p, rtol, atol, &AdaptiveOptions::default())
}

/// Embedded Dormand–Prince 5(4) with per-step error control
/// `err_i <= atol + rtol * |y_i|`, step halving/growth within [0.2, 5],
/// and FSAL reuse of the last stage.
pub fn integrate_adaptive_with(
    p: &OdeProblem,
    rtol: f64,
    atol: f64,
    opts: &AdaptiveOptions,
) -> Result<Trajectory> {
    p.validate()?;
    if !(rtol > 0.0 && atol > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "tolerances must be positive (rtol={rtol}, atol={atol})"
        )));
    }
    let n = p.y0.len();
    let span = p.t1 - p.t0;
    let max_steps = if opts.max_steps == 0 {
        10_000_000
    } else {
        opts.max_steps
    };
    let h_max = opts.h_max.unwrap_or(span);

    let mut k: Vec<Vec<f64>> = (0..7).map(|_| vec![0.0; n]).collect();
    let mut y = p.y0.clone();
    let mut t = p.t0;
    let mut ynew = vec![0.0; n];
    let mut ytmp = vec![0.0; n];

    (p.rhs)(t, &y, &mut k[0]);
    check_finite(t, &k[0])?;

    let mut h = match opts.h_init {
        Some(h0) => h0.min(h_max),
        None => initial_step(p, rtol, atol, &y, &k[0], h_max),
    };

    let mut times = vec![t];
    let mut values = vec![y.clone()];
    let mut derivs = vec![k[0].clone()];

    let mut steps = 0usize;
    while t < p.t1 {
        steps += 1;
        if steps > max_steps {
            return Err(Error::Integration {
                t,
                msg: format!("step budget of {max_steps} exhausted"),
            });
        }
        if h < 1e-14 * span.max(t.abs()) {
            return Err(Error::Stiffness { t, h });
        }
        if t + h > p.t1 {
            h = p.t1 - t;
        }

        // Stages 2..7 (stage 1 is the FSAL carry-over in k[0]).
        stage(p.rhs, t, h, &y, &k, &DP_A2, DP_C[0], &mut ytmp, &mut k[1]);
        stage(p.rhs, t, h, &y, &k, &DP_A3, DP_C[1], &mut ytmp, &mut k[2]);
        stage(p.rhs, t, h, &y, &k, &DP_A4, DP_C[2], &mut ytmp, &mut k[3]);
        stage(p.rhs, t, h, &y, &k, &DP_A5, DP_C[3], &mut ytmp, &mut k[4]);
        stage(p.rhs, t, h, &y, &k, &DP_A6, DP_C[4], &mut ytmp, &mut k[5]);
        for i in 0..n {
            let mut acc = 0.0;
            for (j, b) in DP_B.iter().enumerate().take(6) {
                acc += b * k[j][i];
            }
            ynew[i] = y[i] + h * acc;
        }
        (p.rhs)(t + h, &ynew, &mut k[6]);

        let mut err_sq = 0.0;
        for i in 0..n {
            let mut e = 0.0;
            for (j, w) in DP_E.iter().enumerate() {
                e += w * k[j][i];
            }
            e *= h;
            let sc = atol + rtol * y[i].abs().max(ynew[i].abs());
            err_sq += (e / sc) * (e / sc);
        }
        let err = (err_sq / n as f64).sqrt();

        if !err.is_finite() || !ynew.iter().all(|v| v.is_finite()) {
            // Retry with a halved step; error out only via the underflow path.
            h *= 0.5;
            continue;
        }

        if err <= 1.0 {
            t += h;
            y.copy_from_slice(&ynew);
            let mut refresh_deriv = false;
            if let Some(guard) = opts.guard {
                match guard(&mut y) {
                    Ok(changed) => refresh_deriv = changed,
                    Err(msg) => return Err(Error::Integration { t, msg }),
                }
            }
            if refresh_deriv {
                (p.rhs)(t, &y, &mut k[6]);
            }
            check_finite(t, &y)?;
            times.push(t);
            values.push(y.clone());
            derivs.push(k[6].clone());
            k.swap(0, 6); // FSAL
            let factor = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            h = (h * factor).min(h_max);
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.2, 0.9);
        }
    }

    Ok(Trajectory {
        times,
        values,
        derivs,
    })
}

#[allow(clippy::too_many_arguments)]
fn stage(
    rhs: Rhs,
    t: f64,
    h: f64,
    y: &[f64],
    k: &[Vec<f64>],
    a: &[f64],
    c: f64,
    ytmp: &mut [f64],
    out: &mut [f64],
) {
    for i in 0..y.len() {
        let mut acc = 0.0;
        for (j, aj) in a.iter().enumerate() {
            acc += aj * k[j][i];
        }
        ytmp[i] = y[i] + h * acc;
    }
    rhs(t + c * h, ytmp, out);
}

/// Hairer-style starting step size estimate.
fn initial_step(p: &OdeProblem, rtol: f64, atol: f64, y0: &[f64], f0: &[f64], h_max: f64) -> f64 {
    let n = y0.len() as f64;
    let rms = |v: &[f64], y: &[f64]| -> f64 {
        let s: f64 = v
            .iter()
            .zip(y)
            .map(|(vi, yi)| {
                let sc = atol + rtol * yi.abs();
                (vi / sc) * (vi / sc)
            })
            .sum();
        (s / n).sqrt()
    };
    let d0 = rms(y0, y0);
    let d1 = rms(f0, y0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let h0 = h0.min(h_max);

    let mut y1 = vec![0.0; y0.len()];
    for i in 0..y0.len() {
        y1[i] = y0[i] + h0 * f0[i];
    }
    let mut f1 = vec![0.0; y0.len()];
    (p.rhs)(p.t0 + h0, &y1, &mut f1);
    let mut diff = vec![0.0; y0.len()];
    for i in 0..y0.len() {
        diff[i] = f1[i] - f0[i];
    }
    let d2 = rms(&diff, y0) / h0;
    let dm = d1.max(d2);
    let h1 = if dm <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / dm).powf(0.2)
    };
    (100.0 * h0).min(h1).min(h_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn decay(_t: f64, y: &[f64], out: &mut [f64]) {
        out[0] = -y[0];
    }

    #[test]
    fn rk4_matches_exponential() {
        let p = OdeProblem::new(&decay, 0.0, 1.0, vec![1.0]);
        let traj = integrate_fixed(&p, 0.01).unwrap();
        assert_abs_diff_eq!(traj.last()[0], (-1.0f64).exp(), epsilon = 1e-8);
    }

    #[test]
    fn rk4_order_four_under_step_halving() {
        let p = OdeProblem::new(&decay, 0.0, 1.0, vec![1.0]);
        let exact = (-1.0f64).exp();
        let e1 = (integrate_fixed(&p, 0.1).unwrap().last()[0] - exact).abs();
        let e2 = (integrate_fixed(&p, 0.05).unwrap().last()[0] - exact).abs();
        let ratio = e1 / e2;
        assert!(
            (10.0..24.0).contains(&ratio),
            "expected ~16x error reduction, got {ratio}"
        );
    }

    #[test]
    fn rk4_harmonic_oscillator_closes_orbit() {
        let rhs = |_t: f64, y: &[f64], out: &mut [f64]| {
            out[0] = y[1];
            out[1] = -y[0];
        };
        let p = OdeProblem::new(&rhs, 0.0, 2.0 * std::f64::consts::PI, vec![1.0, 0.0]);
        let traj = integrate_fixed(&p, 1e-3).unwrap();
        assert_abs_diff_eq!(traj.last()[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(traj.last()[1], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn rk4_zero_field_is_exactly_constant() {
        let rhs = |_t: f64, _y: &[f64], out: &mut [f64]| out.fill(0.0);
        let p = OdeProblem::new(&rhs, 0.0, 5.0, vec![3.5, -2.0]);
        let traj = integrate_fixed(&p, 0.25).unwrap();
        for row in &traj.values {
            assert_eq!(row[0], 3.5);
            assert_eq!(row[1], -2.0);
        }
    }

    #[test]
    fn adaptive_matches_exponential() {
        let p = OdeProblem::new(&decay, 0.0, 1.0, vec![1.0]);
        let traj = integrate_adaptive(&p, 1e-9, 1e-12).unwrap();
        assert_abs_diff_eq!(traj.last()[0], 0.36787944117144233, epsilon = 1e-8);
    }

    #[test]
    fn adaptive_matches_logistic() {
        let rhs = |_t: f64, y: &[f64], out: &mut [f64]| out[0] = y[0] * (1.0 - y[0]);
        let p = OdeProblem::new(&rhs, 0.0, 1.0, vec![0.5]);
        let traj = integrate_adaptive(&p, 1e-10, 1e-12).unwrap();
        let exact = 1.0 / (1.0 + (-1.0f64).exp());
        assert_abs_diff_eq!(traj.last()[0], exact, epsilon = 1e-7);
    }

    #[test]
    fn adaptive_output_is_finite_and_ordered() {
        let rhs = |t: f64, y: &[f64], out: &mut [f64]| {
            out[0] = y[1];
            out[1] = -y[0] * (1.0 + 0.3 * (3.0 * t).sin());
        };
        let p = OdeProblem::new(&rhs, 0.0, 25.0, vec![1.0, 0.0]);
        let traj = integrate_adaptive(&p, 1e-8, 1e-10).unwrap();
        assert!(traj.times.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(traj.times[0], 0.0);
        assert_eq!(traj.t_end(), 25.0);
        for row in &traj.values {
            assert!(row.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn forward_then_backward_returns_initial_state() {
        // Linear system y' = A y; reversal integrates z' = -A z from y(T).
        let a = [[0.0, 1.0], [-2.0, -0.4]];
        let fwd = move |_t: f64, y: &[f64], out: &mut [f64]| {
            out[0] = a[0][0] * y[0] + a[0][1] * y[1];
            out[1] = a[1][0] * y[0] + a[1][1] * y[1];
        };
        let bwd = move |_t: f64, y: &[f64], out: &mut [f64]| {
            out[0] = -(a[0][0] * y[0] + a[0][1] * y[1]);
            out[1] = -(a[1][0] * y[0] + a[1][1] * y[1]);
        };
        let rtol = 1e-9;
        let p = OdeProblem::new(&fwd, 0.0, 4.0, vec![1.0, -0.5]);
        let end = integrate_adaptive(&p, rtol, 1e-12).unwrap().last().to_vec();
        let pb = OdeProblem::new(&bwd, 0.0, 4.0, end);
        let back = integrate_adaptive(&pb, rtol, 1e-12).unwrap();
        assert_abs_diff_eq!(back.last()[0], 1.0, epsilon = 10.0 * rtol);
        assert_abs_diff_eq!(back.last()[1], -0.5, epsilon = 10.0 * rtol);
    }

    #[test]
    fn non_finite_rhs_reports_offending_time() {
        let rhs = |t: f64, _y: &[f64], out: &mut [f64]| {
            out[0] = if t > 0.5 { f64::NAN } else { 1.0 };
        };
        let p = OdeProblem::new(&rhs, 0.0, 1.0, vec![0.0]);
        match integrate_fixed(&p, 0.1) {
            Err(Error::Integration { t, .. }) => assert!(t > 0.5),
            other => panic!("expected integration failure, got {other:?}"),
        }
    }

    #[test]
    fn stiff_blowup_reports_underflow() {
        // Finite-time blowup y' = y^2 forces the step below the floor.
        let rhs = |_t: f64, y: &[f64], out: &mut [f64]| out[0] = y[0] * y[0];
        let p = OdeProblem::new(&rhs, 0.0, 2.0, vec![1.0]);
        match integrate_adaptive(&p, 1e-8, 1e-10) {
            Err(Error::Stiffness { t, .. }) => assert!(t > 0.9 && t < 1.1),
            Err(Error::Integration { .. }) => {}
            other => panic!("expected stiffness failure, got {other:?}"),
        }
    }

    #[test]
    fn hermite_sampling_reproduces_smooth_solution() {
        let p = OdeProblem::new(&decay, 0.0, 2.0, vec![1.0]);
        let traj = integrate_adaptive(&p, 1e-9, 1e-12).unwrap();
        for i in 0..40 {
            let t = 2.0 * i as f64 / 39.0;
            assert_abs_diff_eq!(traj.sample(t)[0], (-t).exp(), epsilon = 1e-7);
        }
    }
}
