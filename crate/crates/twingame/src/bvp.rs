//! Two-point boundary-value solvers for the state/costate systems of the
//! maximum principle: multiple shooting with RK4 segment propagation and
//! 3-stage Lobatto-IIIA (Hermite–Simpson) collocation.
//!
//! Both discretizations feed one damped-Newton core. When the boundary
//! conditions are separated (each residual row touches only w(t0) or only
//! w(t1)) the Newton system is block banded and solved in O(nodes); coupled
//! conditions fall back to a dense factorization.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{norm_2, norm_inf, BandedMatrix, DenseMatrix};
use crate::ode::{self, Rk4Scratch, Trajectory};

/// Boundary-value problem over the stacked vector `w`.
///
/// `boundary(w0, wT, out)` writes a residual of length `dim`; `guess(t, out)`
/// supplies the initial iterate at arbitrary mesh times.
pub struct BvpProblem<'a> {
    pub rhs: ode::Rhs<'a>,
    pub boundary: &'a (dyn Fn(&[f64], &[f64], &mut [f64]) + Sync),
    pub t0: f64,
    pub t1: f64,
    pub dim: usize,
    pub guess: &'a (dyn Fn(f64, &mut [f64]) + Sync),
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SolveStats {
    pub rhs_evals: u64,
    pub jacobian_builds: usize,
    pub backtracks: usize,
}

#[derive(Clone, Debug)]
pub struct BvpSolution {
    pub trajectory: Trajectory,
    /// Max-norm over matching and boundary residuals at the final iterate.
    pub residual_norm: f64,
    /// Newton iterations spent.
    pub iterations: usize,
    pub stats: SolveStats,
}

#[derive(Clone, Copy, Debug)]
pub struct NewtonSettings {
    pub max_iterations: usize,
    pub armijo_c: f64,
    pub armijo_factor: f64,
    pub min_step: f64,
    pub stagnation_window: usize,
    pub stagnation_reduction: f64,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings {
            max_iterations: 60,
            armijo_c: 1e-4,
            armijo_factor: 0.5,
            min_step: 1e-4,
            stagnation_window: 5,
            stagnation_reduction: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ShootingSettings {
    /// RK4 steps per shooting segment.
    pub steps_per_segment: usize,
    pub newton: NewtonSettings,
}

impl Default for ShootingSettings {
    fn default() -> Self {
        ShootingSettings {
            steps_per_segment: 24,
            newton: NewtonSettings::default(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CollocationSettings {
    /// One bisection pass over the worst fifth of the mesh intervals.
    pub refine: bool,
    pub newton: NewtonSettings,
}

impl Default for CollocationSettings {
    fn default() -> Self {
        CollocationSettings {
            refine: true,
            newton: NewtonSettings::default(),
        }
    }
}

/// Forward-difference step for Jacobian columns.
#[inline]
fn fd_step(w: f64) -> f64 {
    1e-7 * w.abs().max(1.0)
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect()
}

// ---------------------------------------------------------------------------
// Newton core over a mesh discretization
// ---------------------------------------------------------------------------

/// Factored Newton matrix plus the map from matrix rows to canonical
/// residual indices (canonical order: interval/matching rows first, then
/// the boundary rows).
enum FactoredSystem {
    Banded {
        lu: crate::linalg::BandedLu,
        row_order: Vec<usize>,
    },
    Dense {
        lu: crate::linalg::DenseLu,
        row_order: Vec<usize>,
    },
}

impl FactoredSystem {
    fn solve(&self, residual: &[f64]) -> Vec<f64> {
        let (order, inner): (&[usize], &dyn Fn(&mut [f64])) = match self {
            FactoredSystem::Banded { lu, row_order } => (row_order, &|b| lu.solve_in_place(b)),
            FactoredSystem::Dense { lu, row_order } => (row_order, &|b| lu.solve_in_place(b)),
        };
        let mut rhs: Vec<f64> = order.iter().map(|&r| -residual[r]).collect();
        inner(&mut rhs);
        rhs
    }
}

/// Left/right/coupled split of the boundary rows, detected from the
/// boundary Jacobian blocks at the current iterate.
struct BoundaryJacobian {
    ba: Vec<f64>, // n x n, d boundary / d w(t0)
    bb: Vec<f64>, // n x n, d boundary / d w(t1)
    left: Vec<usize>,
    right: Vec<usize>,
    coupled: Vec<usize>,
}

fn boundary_jacobian(p: &BvpProblem, w0: &[f64], wt: &[f64]) -> BoundaryJacobian {
    let n = p.dim;
    let mut base = vec![0.0; n];
    (p.boundary)(w0, wt, &mut base);
    let mut ba = vec![0.0; n * n];
    let mut bb = vec![0.0; n * n];
    let mut pert = vec![0.0; n];
    let mut w = w0.to_vec();
    for j in 0..n {
        let h = fd_step(w[j]);
        w[j] += h;
        (p.boundary)(&w, wt, &mut pert);
        w[j] = w0[j];
        for i in 0..n {
            ba[i * n + j] = (pert[i] - base[i]) / h;
        }
    }
    let mut w = wt.to_vec();
    for j in 0..n {
        let h = fd_step(w[j]);
        w[j] += h;
        (p.boundary)(w0, &w, &mut pert);
        w[j] = wt[j];
        for i in 0..n {
            bb[i * n + j] = (pert[i] - base[i]) / h;
        }
    }
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut coupled = Vec::new();
    for i in 0..n {
        let dep_a = (0..n).any(|j| ba[i * n + j] != 0.0);
        let dep_b = (0..n).any(|j| bb[i * n + j] != 0.0);
        match (dep_a, dep_b) {
            (true, false) => left.push(i),
            (false, true) => right.push(i),
            // Rows depending on both ends, or on neither (the latter will
            // surface as a singular matrix), go through the dense path.
            _ => coupled.push(i),
        }
    }
    BoundaryJacobian {
        ba,
        bb,
        left,
        right,
        coupled,
    }
}

/// Block Jacobian of one mesh interval/segment.
struct IntervalBlock {
    /// d residual_k / d s_k (n x n, row-major).
    a: Vec<f64>,
    /// d residual_k / d s_{k+1}; `None` means -I (shooting).
    c: Option<Vec<f64>>,
}

trait Discretization: Sync {
    fn problem(&self) -> &BvpProblem<'_>;
    fn nodes(&self) -> &[f64];
    /// Canonical residual: matching/interval rows, then boundary rows.
    fn residual(&self, s: &[f64]) -> Result<Vec<f64>>;
    /// Interval Jacobian blocks by forward differences.
    fn interval_blocks(&self, s: &[f64], base: &[f64]) -> Result<Vec<IntervalBlock>>;
    fn solution_trajectory(&self, s: &[f64]) -> Result<Trajectory>;
}

fn intervals(disc: &dyn Discretization) -> usize {
    disc.nodes().len() - 1
}

fn assemble(disc: &dyn Discretization, s: &[f64], base: &[f64]) -> Result<FactoredSystem> {
    let p = disc.problem();
    let n = p.dim;
    let k = intervals(disc);
    let total = (k + 1) * n;
    let bj = boundary_jacobian(p, &s[..n], &s[k * n..]);
    let blocks = disc.interval_blocks(s, base)?;

    if bj.coupled.is_empty() && bj.left.len() + bj.right.len() == n {
        let (na, _nb) = (bj.left.len(), bj.right.len());
        let band = 2 * n;
        let mut mat = BandedMatrix::zeros(total, band, band);
        let mut row_order = vec![0usize; total];
        for (r, &bc_row) in bj.left.iter().enumerate() {
            row_order[r] = k * n + bc_row;
            for j in 0..n {
                let v = bj.ba[bc_row * n + j];
                if v != 0.0 {
                    mat.set(r, j, v);
                }
            }
        }
        for (kk, block) in blocks.iter().enumerate() {
            for i in 0..n {
                let row = na + kk * n + i;
                row_order[row] = kk * n + i;
                for j in 0..n {
                    let v = block.a[i * n + j];
                    if v != 0.0 {
                        mat.set(row, kk * n + j, v);
                    }
                    let v = match &block.c {
                        Some(c) => c[i * n + j],
                        None => {
                            if i == j {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    if v != 0.0 {
                        mat.set(row, (kk + 1) * n + j, v);
                    }
                }
            }
        }
        for (r, &bc_row) in bj.right.iter().enumerate() {
            let row = na + k * n + r;
            row_order[row] = k * n + bc_row;
            for j in 0..n {
                let v = bj.bb[bc_row * n + j];
                if v != 0.0 {
                    mat.set(row, k * n + j, v);
                }
            }
        }
        Ok(FactoredSystem::Banded {
            lu: mat.factor()?,
            row_order,
        })
    } else {
        if total > 6000 {
            return Err(Error::Unsupported(format!(
                "coupled boundary conditions need a dense solve; system of size {total} is too large"
            )));
        }
        let mut mat = DenseMatrix::zeros(total);
        for (kk, block) in blocks.iter().enumerate() {
            for i in 0..n {
                let row = kk * n + i;
                for j in 0..n {
                    mat.set(row, kk * n + j, block.a[i * n + j]);
                    match &block.c {
                        Some(c) => mat.set(row, (kk + 1) * n + j, c[i * n + j]),
                        None => {
                            if i == j {
                                mat.set(row, (kk + 1) * n + j, -1.0);
                            }
                        }
                    }
                }
            }
        }
        for i in 0..n {
            let row = k * n + i;
            for j in 0..n {
                mat.set(row, j, bj.ba[i * n + j]);
                mat.set(row, k * n + j, bj.bb[i * n + j]);
            }
        }
        Ok(FactoredSystem::Dense {
            lu: mat.factor()?,
            row_order: (0..total).collect(),
        })
    }
}

fn best_effort_solution(
    disc: &dyn Discretization,
    s: &[f64],
    residual_norm: f64,
    iterations: usize,
    stats: SolveStats,
) -> BvpSolution {
    let n = disc.problem().dim;
    let trajectory = disc.solution_trajectory(s).unwrap_or_else(|_| {
        let values: Vec<Vec<f64>> = s.chunks(n).map(|c| c.to_vec()).collect();
        Trajectory::from_samples(disc.nodes().to_vec(), values)
    });
    BvpSolution {
        trajectory,
        residual_norm,
        iterations,
        stats,
    }
}

fn newton_solve(
    disc: &dyn Discretization,
    mut s: Vec<f64>,
    tol: f64,
    nt: &NewtonSettings,
    stats: &mut SolveStats,
) -> Result<(Vec<f64>, f64, usize)> {
    let mut residual = disc.residual(&s)?;
    let mut res_inf = norm_inf(&residual);
    let mut best = (s.clone(), res_inf);
    let mut history = vec![res_inf];

    for iter in 1..=nt.max_iterations {
        if res_inf <= tol {
            return Ok((s, res_inf, iter - 1));
        }
        let system = assemble(disc, &s, &residual)?;
        stats.jacobian_builds += 1;
        let delta = system.solve(&residual);

        let phi0 = norm_2(&residual);
        let mut alpha = 1.0;
        let mut accepted = None;
        let mut last_err = None;
        loop {
            let trial: Vec<f64> = s
                .iter()
                .zip(&delta)
                .map(|(si, di)| si + alpha * di)
                .collect();
            match disc.residual(&trial) {
                Ok(rt) => {
                    let phi = norm_2(&rt);
                    if phi <= (1.0 - nt.armijo_c * alpha) * phi0 || alpha <= nt.min_step {
                        accepted = Some((trial, rt));
                        break;
                    }
                }
                Err(e) => {
                    last_err = Some(e);
                }
            }
            stats.backtracks += 1;
            alpha *= nt.armijo_factor;
            if alpha < nt.min_step {
                break;
            }
        }
        let (trial, rt) = match accepted {
            Some(pair) => pair,
            None => {
                return Err(last_err.unwrap_or(Error::NewtonStagnated {
                    iterations: iter,
                    best_residual: best.1,
                    best: Box::new(best_effort_solution(disc, &best.0, best.1, iter, *stats)),
                }))
            }
        };
        s = trial;
        residual = rt;
        res_inf = norm_inf(&residual);
        history.push(res_inf);
        if res_inf < best.1 {
            best = (s.clone(), res_inf);
        }

        if history.len() > nt.stagnation_window {
            let prev = history[history.len() - 1 - nt.stagnation_window];
            let relative_drop = if prev > 0.0 {
                (prev - res_inf) / prev
            } else {
                1.0
            };
            if res_inf > tol && relative_drop < nt.stagnation_reduction {
                return Err(Error::NewtonStagnated {
                    iterations: iter,
                    best_residual: best.1,
                    best: Box::new(best_effort_solution(disc, &best.0, best.1, iter, *stats)),
                });
            }
        }
    }
    if res_inf <= tol {
        return Ok((s, res_inf, nt.max_iterations));
    }
    Err(Error::NewtonStagnated {
        iterations: nt.max_iterations,
        best_residual: best.1,
        best: Box::new(best_effort_solution(
            disc,
            &best.0,
            best.1,
            nt.max_iterations,
            *stats,
        )),
    })
}

fn initial_unknowns(p: &BvpProblem, nodes: &[f64]) -> Vec<f64> {
    let n = p.dim;
    let mut s = vec![0.0; nodes.len() * n];
    for (k, &t) in nodes.iter().enumerate() {
        (p.guess)(t, &mut s[k * n..(k + 1) * n]);
    }
    s
}

const PAR_WORK_THRESHOLD: usize = 4096;

// ---------------------------------------------------------------------------
// Multiple shooting
// ---------------------------------------------------------------------------

struct ShootingDisc<'a> {
    p: &'a BvpProblem<'a>,
    nodes: Vec<f64>,
    steps: usize,
    rhs_evals: AtomicU64,
}

impl ShootingDisc<'_> {
    fn propagate(&self, k: usize, start: &[f64], out: &mut [f64]) -> Result<()> {
        let h = (self.nodes[k + 1] - self.nodes[k]) / self.steps as f64;
        out.copy_from_slice(start);
        let mut scratch = Rk4Scratch::new(self.p.dim);
        ode::rk4_propagate(self.p.rhs, self.nodes[k], h, self.steps, out, &mut scratch)?;
        self.rhs_evals
            .fetch_add(4 * self.steps as u64, Ordering::Relaxed);
        Ok(())
    }

    fn parallel(&self) -> bool {
        (self.nodes.len() - 1) * self.p.dim * self.steps >= PAR_WORK_THRESHOLD
    }
}

impl Discretization for ShootingDisc<'_> {
    fn problem(&self) -> &BvpProblem<'_> {
        self.p
    }

    fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    fn residual(&self, s: &[f64]) -> Result<Vec<f64>> {
        let n = self.p.dim;
        let k = self.nodes.len() - 1;
        let mut out = vec![0.0; (k + 1) * n];
        let compute = |kk: usize, slot: &mut [f64]| -> Result<()> {
            self.propagate(kk, &s[kk * n..(kk + 1) * n], slot)?;
            for i in 0..n {
                slot[i] -= s[(kk + 1) * n + i];
            }
            Ok(())
        };
        if self.parallel() {
            out[..k * n]
                .par_chunks_mut(n)
                .enumerate()
                .try_for_each(|(kk, slot)| compute(kk, slot))?;
        } else {
            for (kk, slot) in out[..k * n].chunks_mut(n).enumerate() {
                compute(kk, slot)?;
            }
        }
        let (match_rows, bc_rows) = out.split_at_mut(k * n);
        (self.p.boundary)(&s[..n], &s[k * n..(k + 1) * n], bc_rows);
        let _ = match_rows;
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::Integration {
                t: self.p.t1,
                msg: "non-finite residual".into(),
            });
        }
        Ok(out)
    }

    fn interval_blocks(&self, s: &[f64], base: &[f64]) -> Result<Vec<IntervalBlock>> {
        let n = self.p.dim;
        let k = self.nodes.len() - 1;
        let build = |kk: usize| -> Result<IntervalBlock> {
            // Base endpoint recovered from the matching residual.
            let mut phi0 = vec![0.0; n];
            for i in 0..n {
                phi0[i] = base[kk * n + i] + s[(kk + 1) * n + i];
            }
            let mut a = vec![0.0; n * n];
            let mut start = s[kk * n..(kk + 1) * n].to_vec();
            let mut phi = vec![0.0; n];
            for j in 0..n {
                let h = fd_step(start[j]);
                let saved = start[j];
                start[j] += h;
                self.propagate(kk, &start, &mut phi)?;
                start[j] = saved;
                for i in 0..n {
                    a[i * n + j] = (phi[i] - phi0[i]) / h;
                }
            }
            Ok(IntervalBlock { a, c: None })
        };
        if self.parallel() {
            (0..k).into_par_iter().map(build).collect()
        } else {
            (0..k).map(build).collect()
        }
    }

    fn solution_trajectory(&self, s: &[f64]) -> Result<Trajectory> {
        let n = self.p.dim;
        let k = self.nodes.len() - 1;
        let mut times = Vec::new();
        let mut values: Vec<Vec<f64>> = Vec::new();
        let mut derivs: Vec<Vec<f64>> = Vec::new();
        let mut scratch = Rk4Scratch::new(n);
        let mut f = vec![0.0; n];
        for kk in 0..k {
            let h = (self.nodes[kk + 1] - self.nodes[kk]) / self.steps as f64;
            let mut y = s[kk * n..(kk + 1) * n].to_vec();
            for step in 0..self.steps {
                let t = self.nodes[kk] + h * step as f64;
                (self.p.rhs)(t, &y, &mut f);
                times.push(t);
                values.push(y.clone());
                derivs.push(f.clone());
                ode::rk4_step(self.p.rhs, t, h, &mut y, &mut scratch);
                if !y.iter().all(|v| v.is_finite()) {
                    return Err(Error::Integration {
                        t: t + h,
                        msg: "non-finite state while sampling the solution".into(),
                    });
                }
            }
        }
        let y_end = s[k * n..(k + 1) * n].to_vec();
        (self.p.rhs)(self.p.t1, &y_end, &mut f);
        times.push(self.p.t1);
        values.push(y_end);
        derivs.push(f.clone());
        Ok(Trajectory::from_samples_with_derivs(times, values, derivs))
    }
}

/// Multiple shooting over `segments` equal segments.
///
/// Unknowns are the segment-start vectors; a damped Newton iteration with
/// Armijo backtracking drives matching and boundary residuals below `tol`
/// in max-norm. Jacobians use forward differences with step
/// `max(1e-7, 1e-7 |w|)`.
pub fn solve_multiple_shooting(p: &BvpProblem, segments: usize, tol: f64) -> Result<BvpSolution> {
    solve_multiple_shooting_with(p, segments, tol, &ShootingSettings::default())
}

pub fn solve_multiple_shooting_with(
    p: &BvpProblem,
    segments: usize,
    tol: f64,
    settings: &ShootingSettings,
) -> Result<BvpSolution> {
    validate_problem(p, tol)?;
    if segments < 1 {
        return Err(Error::InvalidParameter(
            "multiple shooting needs at least one segment".into(),
        ));
    }
    let disc = ShootingDisc {
        p,
        nodes: linspace(p.t0, p.t1, segments + 1),
        steps: settings.steps_per_segment.max(1),
        rhs_evals: AtomicU64::new(0),
    };
    let s0 = initial_unknowns(p, &disc.nodes);
    let mut stats = SolveStats::default();
    let (s, res, iters) = newton_solve(&disc, s0, tol, &settings.newton, &mut stats)?;
    stats.rhs_evals = disc.rhs_evals.load(Ordering::Relaxed);
    let trajectory = disc.solution_trajectory(&s)?;
    Ok(BvpSolution {
        trajectory,
        residual_norm: res,
        iterations: iters,
        stats,
    })
}

// ---------------------------------------------------------------------------
// Hermite–Simpson collocation (3-stage Lobatto IIIA, 4th order)
// ---------------------------------------------------------------------------

struct CollocationDisc<'a> {
    p: &'a BvpProblem<'a>,
    nodes: Vec<f64>,
    rhs_evals: AtomicU64,
}

impl CollocationDisc<'_> {
    /// Hermite–Simpson residual of interval k given its endpoint values.
    fn interval_residual(&self, k: usize, wa: &[f64], wb: &[f64], out: &mut [f64]) {
        let n = self.p.dim;
        let (ta, tb) = (self.nodes[k], self.nodes[k + 1]);
        let h = tb - ta;
        let mut fa = vec![0.0; n];
        let mut fb = vec![0.0; n];
        let mut wm = vec![0.0; n];
        let mut fm = vec![0.0; n];
        (self.p.rhs)(ta, wa, &mut fa);
        (self.p.rhs)(tb, wb, &mut fb);
        for i in 0..n {
            wm[i] = 0.5 * (wa[i] + wb[i]) + h / 8.0 * (fa[i] - fb[i]);
        }
        (self.p.rhs)(0.5 * (ta + tb), &wm, &mut fm);
        self.rhs_evals.fetch_add(3, Ordering::Relaxed);
        for i in 0..n {
            out[i] = wb[i] - wa[i] - h / 6.0 * (fa[i] + 4.0 * fm[i] + fb[i]);
        }
    }

    fn parallel(&self) -> bool {
        (self.nodes.len() - 1) * self.p.dim >= PAR_WORK_THRESHOLD / 8
    }
}

impl Discretization for CollocationDisc<'_> {
    fn problem(&self) -> &BvpProblem<'_> {
        self.p
    }

    fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    fn residual(&self, s: &[f64]) -> Result<Vec<f64>> {
        let n = self.p.dim;
        let k = self.nodes.len() - 1;
        let mut out = vec![0.0; (k + 1) * n];
        let compute = |kk: usize, slot: &mut [f64]| {
            self.interval_residual(kk, &s[kk * n..(kk + 1) * n], &s[(kk + 1) * n..(kk + 2) * n], slot);
        };
        if self.parallel() {
            out[..k * n]
                .par_chunks_mut(n)
                .enumerate()
                .for_each(|(kk, slot)| compute(kk, slot));
        } else {
            for (kk, slot) in out[..k * n].chunks_mut(n).enumerate() {
                compute(kk, slot);
            }
        }
        (self.p.boundary)(&s[..n], &s[k * n..(k + 1) * n], &mut out[k * n..]);
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::Integration {
                t: self.p.t0,
                msg: "non-finite collocation residual".into(),
            });
        }
        Ok(out)
    }

    fn interval_blocks(&self, s: &[f64], base: &[f64]) -> Result<Vec<IntervalBlock>> {
        let n = self.p.dim;
        let k = self.nodes.len() - 1;
        let build = |kk: usize| -> IntervalBlock {
            let base_k = &base[kk * n..(kk + 1) * n];
            let mut a = vec![0.0; n * n];
            let mut c = vec![0.0; n * n];
            let mut wa = s[kk * n..(kk + 1) * n].to_vec();
            let wb0 = &s[(kk + 1) * n..(kk + 2) * n];
            let mut pert = vec![0.0; n];
            for j in 0..n {
                let h = fd_step(wa[j]);
                let saved = wa[j];
                wa[j] += h;
                self.interval_residual(kk, &wa, wb0, &mut pert);
                wa[j] = saved;
                for i in 0..n {
                    a[i * n + j] = (pert[i] - base_k[i]) / h;
                }
            }
            let mut wb = wb0.to_vec();
            for j in 0..n {
                let h = fd_step(wb[j]);
                let saved = wb[j];
                wb[j] += h;
                self.interval_residual(kk, &wa, &wb, &mut pert);
                wb[j] = saved;
                for i in 0..n {
                    c[i * n + j] = (pert[i] - base_k[i]) / h;
                }
            }
            IntervalBlock { a, c: Some(c) }
        };
        let blocks = if self.parallel() {
            (0..k).into_par_iter().map(build).collect()
        } else {
            (0..k).map(build).collect()
        };
        Ok(blocks)
    }

    fn solution_trajectory(&self, s: &[f64]) -> Result<Trajectory> {
        let n = self.p.dim;
        let mut values = Vec::with_capacity(self.nodes.len());
        let mut derivs = Vec::with_capacity(self.nodes.len());
        let mut f = vec![0.0; n];
        for (k, &t) in self.nodes.iter().enumerate() {
            let w = s[k * n..(k + 1) * n].to_vec();
            (self.p.rhs)(t, &w, &mut f);
            values.push(w);
            derivs.push(f.clone());
        }
        Ok(Trajectory::from_samples_with_derivs(
            self.nodes.clone(),
            values,
            derivs,
        ))
    }
}

/// Collocation on `mesh_points` nodes with the Hermite–Simpson scheme,
/// optionally followed by one bisection refinement pass on the worst
/// fifth of the intervals.
pub fn solve_collocation(p: &BvpProblem, mesh_points: usize, tol: f64) -> Result<BvpSolution> {
    solve_collocation_with(p, mesh_points, tol, &CollocationSettings::default())
}

pub fn solve_collocation_with(
    p: &BvpProblem,
    mesh_points: usize,
    tol: f64,
    settings: &CollocationSettings,
) -> Result<BvpSolution> {
    validate_problem(p, tol)?;
    if mesh_points < 3 {
        return Err(Error::InvalidParameter(
            "collocation needs at least 3 mesh points".into(),
        ));
    }
    let mut stats = SolveStats::default();
    let disc = CollocationDisc {
        p,
        nodes: linspace(p.t0, p.t1, mesh_points),
        rhs_evals: AtomicU64::new(0),
    };
    let s0 = initial_unknowns(p, &disc.nodes);
    let (s, res, iters) = newton_solve(&disc, s0, tol, &settings.newton, &mut stats)?;
    let mut rhs_evals = disc.rhs_evals.load(Ordering::Relaxed);

    let (disc, s, res, iters) = if settings.refine {
        match refine_once(p, &disc, &s, tol, &settings.newton, &mut stats)? {
            Some((d2, s2, r2, i2)) => {
                rhs_evals += d2.rhs_evals.load(Ordering::Relaxed);
                (d2, s2, r2, iters + i2)
            }
            None => (disc, s, res, iters),
        }
    } else {
        (disc, s, res, iters)
    };

    stats.rhs_evals = rhs_evals;
    let trajectory = disc.solution_trajectory(&s)?;
    Ok(BvpSolution {
        trajectory,
        residual_norm: res,
        iterations: iters,
        stats,
    })
}

/// One bisection pass: estimate per-interval defects by a short RK4
/// re-integration, split the worst 20%, and re-run Newton on the new mesh.
fn refine_once<'a>(
    p: &'a BvpProblem<'a>,
    disc: &CollocationDisc<'a>,
    s: &[f64],
    tol: f64,
    nt: &NewtonSettings,
    stats: &mut SolveStats,
) -> Result<Option<(CollocationDisc<'a>, Vec<f64>, f64, usize)>> {
    let n = p.dim;
    let k = disc.nodes.len() - 1;
    let mut scratch = Rk4Scratch::new(n);
    let mut defects = Vec::with_capacity(k);
    for kk in 0..k {
        let h = (disc.nodes[kk + 1] - disc.nodes[kk]) / 4.0;
        let mut y = s[kk * n..(kk + 1) * n].to_vec();
        if ode::rk4_propagate(p.rhs, disc.nodes[kk], h, 4, &mut y, &mut scratch).is_err() {
            defects.push((kk, f64::INFINITY));
            continue;
        }
        let wb = &s[(kk + 1) * n..(kk + 2) * n];
        let mut d = 0.0f64;
        for i in 0..n {
            d = d.max((y[i] - wb[i]).abs() / (1.0 + wb[i].abs()));
        }
        defects.push((kk, d));
    }
    let threshold = (10.0 * tol).max(1e-12);
    let mut flagged: Vec<(usize, f64)> = defects
        .iter()
        .copied()
        .filter(|&(_, d)| d > threshold)
        .collect();
    if flagged.is_empty() {
        return Ok(None);
    }
    flagged.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let take = flagged.len().min(k.div_ceil(5));
    let mut split: Vec<usize> = flagged[..take].iter().map(|&(i, _)| i).collect();
    split.sort_unstable();

    let mut nodes = Vec::with_capacity(disc.nodes.len() + split.len());
    let mut guesses: Vec<Vec<f64>> = Vec::with_capacity(nodes.capacity());
    let old_traj = disc.solution_trajectory(s)?;
    for kk in 0..k {
        nodes.push(disc.nodes[kk]);
        guesses.push(s[kk * n..(kk + 1) * n].to_vec());
        if split.binary_search(&kk).is_ok() {
            let tm = 0.5 * (disc.nodes[kk] + disc.nodes[kk + 1]);
            nodes.push(tm);
            guesses.push(old_traj.sample(tm));
        }
    }
    nodes.push(disc.nodes[k]);
    guesses.push(s[k * n..(k + 1) * n].to_vec());

    let refined = CollocationDisc {
        p,
        nodes,
        rhs_evals: AtomicU64::new(0),
    };
    let s0: Vec<f64> = guesses.into_iter().flatten().collect();
    let (s2, r2, i2) = newton_solve(&refined, s0, tol, nt, stats)?;
    Ok(Some((refined, s2, r2, i2)))
}

fn validate_problem(p: &BvpProblem, tol: f64) -> Result<()> {
    if !(p.t1 > p.t0) {
        return Err(Error::InvalidParameter(format!(
            "boundary-value problem requires t1 > t0 (got {} .. {})",
            p.t0, p.t1
        )));
    }
    if p.dim == 0 {
        return Err(Error::InvalidParameter("state dimension must be > 0".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "tolerance must be positive (got {tol})"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::{integrate_adaptive, OdeProblem};
    use approx::assert_abs_diff_eq;

    fn oscillator(_t: f64, w: &[f64], out: &mut [f64]) {
        out[0] = w[1];
        out[1] = -w[0];
    }

    fn sine_problem<'a>() -> BvpProblem<'a> {
        BvpProblem {
            rhs: &oscillator,
            boundary: &|w0: &[f64], wt: &[f64], out: &mut [f64]| {
                out[0] = w0[0];
                out[1] = wt[0] - 1.0;
            },
            t0: 0.0,
            t1: std::f64::consts::FRAC_PI_2,
            dim: 2,
            guess: &|_t, out: &mut [f64]| {
                out[0] = 0.5;
                out[1] = 0.5;
            },
        }
    }

    fn check_sine(sol: &BvpSolution, tol: f64) {
        // y(t) = sin t, so y'(0) = 1.
        assert_abs_diff_eq!(sol.trajectory.values[0][1], 1.0, epsilon = tol);
        for (i, &t) in sol.trajectory.times.iter().enumerate() {
            assert_abs_diff_eq!(sol.trajectory.values[i][0], t.sin(), epsilon = tol);
        }
    }

    #[test]
    fn shooting_solves_sine_bvp() {
        let p = sine_problem();
        let sol = solve_multiple_shooting(&p, 8, 1e-10).unwrap();
        assert!(sol.residual_norm <= 1e-10);
        check_sine(&sol, 1e-6);
    }

    #[test]
    fn collocation_solves_sine_bvp() {
        let p = sine_problem();
        let sol = solve_collocation(&p, 41, 1e-10).unwrap();
        check_sine(&sol, 1e-6);
    }

    fn sinh_problem<'a>() -> BvpProblem<'a> {
        BvpProblem {
            rhs: &|_t, w: &[f64], out: &mut [f64]| {
                out[0] = w[1];
                out[1] = w[0];
            },
            boundary: &|w0: &[f64], wt: &[f64], out: &mut [f64]| {
                out[0] = w0[0];
                out[1] = wt[0] - 1.0f64.sinh();
            },
            t0: 0.0,
            t1: 1.0,
            dim: 2,
            guess: &|t, out: &mut [f64]| {
                out[0] = t;
                out[1] = 1.0;
            },
        }
    }

    #[test]
    fn shooting_solves_sinh_bvp() {
        let p = sinh_problem();
        let sol = solve_multiple_shooting(&p, 4, 1e-10).unwrap();
        for (i, &t) in sol.trajectory.times.iter().enumerate() {
            assert_abs_diff_eq!(sol.trajectory.values[i][0], t.sinh(), epsilon = 1e-6);
            assert_abs_diff_eq!(sol.trajectory.values[i][1], t.cosh(), epsilon = 1e-6);
        }
    }

    #[test]
    fn collocation_solves_sinh_bvp() {
        let p = sinh_problem();
        let sol = solve_collocation(&p, 51, 1e-10).unwrap();
        for (i, &t) in sol.trajectory.times.iter().enumerate() {
            assert_abs_diff_eq!(sol.trajectory.values[i][0], t.sinh(), epsilon = 1e-6);
        }
    }

    /// Scalar linear-quadratic control: minimize ∫ (x² + u²) dt with
    /// ẋ = u. The stationarity system is ẋ = -λ/2, λ̇ = -2x with x(0) = 1,
    /// λ(1) = 0; the independent oracle integrates the matching Riccati
    /// equation P' = P² - 1 (reversed in time) and the closed-loop state.
    fn lq_rhs(_t: f64, w: &[f64], out: &mut [f64]) {
        out[0] = -0.5 * w[1];
        out[1] = -2.0 * w[0];
    }

    fn lq_problem<'a>() -> BvpProblem<'a> {
        BvpProblem {
            rhs: &lq_rhs,
            boundary: &|w0: &[f64], wt: &[f64], out: &mut [f64]| {
                out[0] = w0[0] - 1.0;
                out[1] = wt[1];
            },
            t0: 0.0,
            t1: 1.0,
            dim: 2,
            guess: &|_t, out: &mut [f64]| {
                out[0] = 1.0;
                out[1] = 0.0;
            },
        }
    }

    fn lq_riccati_oracle() -> (f64, f64) {
        // P(s) with s = 1 - t: dP/ds = 1 - P², P(0) = 0.
        let riccati = |_s: f64, p: &[f64], out: &mut [f64]| out[0] = 1.0 - p[0] * p[0];
        let p_traj = integrate_adaptive(
            &OdeProblem::new(&riccati, 0.0, 1.0, vec![0.0]),
            1e-11,
            1e-13,
        )
        .unwrap();
        // Closed loop: ẋ = -P(1-t) x, x(0) = 1.
        let closed = |t: f64, x: &[f64], out: &mut [f64]| {
            let p = p_traj.sample(1.0 - t)[0];
            out[0] = -p * x[0];
        };
        let x_traj = integrate_adaptive(
            &OdeProblem::new(&closed, 0.0, 1.0, vec![1.0]),
            1e-11,
            1e-13,
        )
        .unwrap();
        let lambda0 = 2.0 * p_traj.sample(1.0)[0] * 1.0;
        (x_traj.last()[0], lambda0)
    }

    #[test]
    fn shooting_matches_riccati_oracle_on_lq_problem() {
        let (x1_oracle, lambda0_oracle) = lq_riccati_oracle();
        let p = lq_problem();
        let sol = solve_multiple_shooting_with(
            &p,
            4,
            1e-11,
            &ShootingSettings {
                steps_per_segment: 64,
                ..Default::default()
            },
        )
        .unwrap();
        assert_abs_diff_eq!(sol.trajectory.last()[0], x1_oracle, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.trajectory.values[0][1], lambda0_oracle, epsilon = 1e-6);
    }

    #[test]
    fn collocation_matches_riccati_oracle_on_lq_problem() {
        let (x1_oracle, lambda0_oracle) = lq_riccati_oracle();
        let p = lq_problem();
        let sol = solve_collocation(&p, 101, 1e-11).unwrap();
        assert_abs_diff_eq!(sol.trajectory.last()[0], x1_oracle, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.trajectory.values[0][1], lambda0_oracle, epsilon = 1e-6);
    }

    /// 2x2 matrix exponential by scaling and squaring (oracle only).
    fn expm2(a: [[f64; 2]; 2], t: f64) -> [[f64; 2]; 2] {
        let mut m = [[a[0][0] * t, a[0][1] * t], [a[1][0] * t, a[1][1] * t]];
        let norm = m
            .iter()
            .flatten()
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        let s = (norm.log2().ceil().max(0.0) as u32) + 4;
        let scale = 0.5f64.powi(s as i32);
        for row in &mut m {
            for v in row {
                *v *= scale;
            }
        }
        // Taylor series of the scaled block.
        let mut result = [[1.0, 0.0], [0.0, 1.0]];
        let mut term = [[1.0, 0.0], [0.0, 1.0]];
        for k in 1..=16 {
            term = mat2_mul(term, m);
            for row in term.iter_mut() {
                for v in row.iter_mut() {
                    *v /= k as f64;
                }
            }
            for i in 0..2 {
                for j in 0..2 {
                    result[i][j] += term[i][j];
                }
            }
        }
        for _ in 0..s {
            result = mat2_mul(result, result);
        }
        result
    }

    fn mat2_mul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
        let mut c = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        c
    }

    #[test]
    fn collocation_matches_matrix_exponential() {
        let a = [[0.3, 1.2], [-0.7, -0.1]];
        let w0 = [1.0, 0.5];
        let e = expm2(a, 1.0);
        let wt = [
            e[0][0] * w0[0] + e[0][1] * w0[1],
            e[1][0] * w0[0] + e[1][1] * w0[1],
        ];
        let rhs = move |_t: f64, w: &[f64], out: &mut [f64]| {
            out[0] = a[0][0] * w[0] + a[0][1] * w[1];
            out[1] = a[1][0] * w[0] + a[1][1] * w[1];
        };
        let boundary = move |w0v: &[f64], wtv: &[f64], out: &mut [f64]| {
            out[0] = w0v[0] - w0[0];
            out[1] = wtv[1] - wt[1];
        };
        let p = BvpProblem {
            rhs: &rhs,
            boundary: &boundary,
            t0: 0.0,
            t1: 1.0,
            dim: 2,
            guess: &|_t, out: &mut [f64]| {
                out[0] = 1.0;
                out[1] = 0.0;
            },
        };
        let sol = solve_collocation(&p, 201, 1e-12).unwrap();
        assert_abs_diff_eq!(sol.trajectory.values[0][1], w0[1], epsilon = 1e-8);
        assert_abs_diff_eq!(sol.trajectory.last()[0], wt[0], epsilon = 1e-8);
    }

    #[test]
    fn shooting_consistency_under_reintegration() {
        let tol = 1e-10;
        let p = sine_problem();
        let sol = solve_multiple_shooting(&p, 8, tol).unwrap();
        let w0 = sol.trajectory.values[0].clone();
        let ivp = OdeProblem::new(&oscillator, p.t0, p.t1, w0);
        let forward = integrate_adaptive(&ivp, 1e-12, 1e-14).unwrap();
        for i in 0..2 {
            assert!((forward.last()[i] - sol.trajectory.last()[i]).abs() <= 10.0 * tol.max(1e-8));
        }
    }

    #[test]
    fn coupled_boundary_conditions_use_dense_path() {
        // r1 couples both ends: y(0) + y(pi/2) - 1; r2 = y(0) - y'(0) + 1.
        // Unique solution y = sin t.
        let p = BvpProblem {
            rhs: &oscillator,
            boundary: &|w0: &[f64], wt: &[f64], out: &mut [f64]| {
                out[0] = w0[0] + wt[0] - 1.0;
                out[1] = w0[0] - w0[1] + 1.0;
            },
            t0: 0.0,
            t1: std::f64::consts::FRAC_PI_2,
            dim: 2,
            guess: &|_t, out: &mut [f64]| {
                out[0] = 0.2;
                out[1] = 0.8;
            },
        };
        let sol = solve_multiple_shooting(&p, 6, 1e-10).unwrap();
        for (i, &t) in sol.trajectory.times.iter().enumerate() {
            assert_abs_diff_eq!(sol.trajectory.values[i][0], t.sin(), epsilon = 1e-6);
        }
    }

    #[test]
    fn degenerate_boundary_reports_singular_jacobian() {
        // Both conditions constrain w(T); nothing pins w(0) -> singular.
        let p = BvpProblem {
            rhs: &|_t, _w: &[f64], out: &mut [f64]| out.fill(0.0),
            boundary: &|_w0: &[f64], wt: &[f64], out: &mut [f64]| {
                out[0] = wt[0] - 1.0;
                out[1] = wt[0] - 1.0;
            },
            t0: 0.0,
            t1: 1.0,
            dim: 2,
            guess: &|_t, out: &mut [f64]| out.fill(0.0),
        };
        match solve_multiple_shooting(&p, 2, 1e-10) {
            Err(Error::SingularJacobian { .. }) => {}
            other => panic!("expected singular Jacobian, got {other:?}"),
        }
    }

    #[test]
    fn newton_stagnation_returns_best_iterate() {
        // No solution: y' = 0 forces y(0) = y(1), but the boundary demands
        // different values at both ends.
        let p = BvpProblem {
            rhs: &|_t, _w: &[f64], out: &mut [f64]| out.fill(0.0),
            boundary: &|w0: &[f64], wt: &[f64], out: &mut [f64]| {
                out[0] = w0[0];
                out[1] = wt[1] - (wt[0] - 1.0) * (wt[0] - 1.0) - 1.0;
            },
            t0: 0.0,
            t1: 1.0,
            dim: 2,
            guess: &|_t, out: &mut [f64]| out.fill(0.0),
        };
        // w = (w0, w1) constant; residuals [w0, w1 - (w0-1)^2 - 1]; solvable
        // actually (w0 = 0, w1 = 2) -- so craft an infeasible variant:
        // demand w0 = 0 at the left and w0 = 1 at the right.
        let p2 = BvpProblem {
            boundary: &|w0: &[f64], wt: &[f64], out: &mut [f64]| {
                out[0] = w0[0];
                out[1] = wt[0] - 1.0;
            },
            ..p
        };
        match solve_multiple_shooting(&p2, 2, 1e-10) {
            Err(Error::SingularJacobian { .. }) | Err(Error::NewtonStagnated { .. }) => {}
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn solves_are_deterministic() {
        let p = sine_problem();
        let a = solve_multiple_shooting(&p, 8, 1e-10).unwrap();
        let b = solve_multiple_shooting(&p, 8, 1e-10).unwrap();
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.trajectory.values, b.trajectory.values);
        let c = solve_collocation(&p, 31, 1e-10).unwrap();
        let d = solve_collocation(&p, 31, 1e-10).unwrap();
        assert_eq!(c.iterations, d.iterations);
        assert_eq!(c.trajectory.values, d.trajectory.values);
    }
}
