//! Domain types and instantaneous formulas of the synchronization game:
//! incentive pools, device utilities, twin-value dynamics, replicator
//! right-hand sides, and provider payoff integrands.
//!
//! State layout used across the crate: the flat system state
//! `y = [x_1..x_M, z_1..z_M]` stacks population shares (a point on the
//! unit simplex) on top of twin values (nonnegative).

use crate::error::{Error, Result};
use crate::ode::Trajectory;
use crate::quad;

/// Repo-convention default for the per-device sensing cost.
pub const DEFAULT_COST: f64 = 0.1;
/// Default coefficients of the affine incentive weighting.
pub const DEFAULT_G: f64 = 1.0;

/// Position of a provider in the hierarchical game.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Leader,
    Follower,
    Simultaneous,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Role::Leader => write!(f, "leader"),
            Role::Follower => write!(f, "follower"),
            Role::Simultaneous => write!(f, "simultaneous"),
        }
    }
}

/// Economic and decay parameters of one virtual service provider.
#[derive(Clone, Debug, PartialEq)]
pub struct VspParams {
    /// Number of digital twins.
    pub d: f64,
    /// Twin value decay rate (1/time, > 0).
    pub theta: f64,
    /// Unit data price.
    pub alpha: f64,
    /// Unit value preference. `None` derives `e^{10 theta}`.
    pub beta: Option<f64>,
    /// Average data request per twin per synchronization (Mb).
    pub k: f64,
    /// Desired twin value.
    pub v: f64,
    /// Per-device sensing cost.
    pub c: f64,
    /// Payoff weights of the data-revenue, twin-value, value-gap and
    /// demand-mismatch terms.
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub role: Role,
}

impl VspParams {
    /// Derived preference weight when none is configured.
    pub fn default_beta(theta: f64) -> f64 {
        (10.0 * theta).exp()
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or_else(|| Self::default_beta(self.theta))
    }

    pub fn validate(&self, idx: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::ScenarioInvalid(format!("vsp {}: {msg}", idx + 1)));
        if !(self.theta > 0.0) {
            return fail(format!("theta must be > 0 (got {})", self.theta));
        }
        if !(self.d >= 1.0) {
            return fail(format!("d must be >= 1 (got {})", self.d));
        }
        if !(self.k > 0.0) {
            return fail(format!("k must be > 0 (got {})", self.k));
        }
        if self.alpha < 0.0 || self.c < 0.0 || self.v < 0.0 {
            return fail("alpha, c, v must be nonnegative".into());
        }
        if self.w1 < 0.0 || self.w2 < 0.0 || self.w3 < 0.0 {
            return fail("weights must be nonnegative".into());
        }
        if !(self.w4 > 0.0) {
            return fail(format!(
                "w4 must be > 0 for strict payoff concavity in the control (got {})",
                self.w4
            ));
        }
        if let Some(b) = self.beta {
            if !(b > 0.0) {
                return fail(format!("beta must be > 0 (got {b})"));
            }
        }
        Ok(())
    }
}

/// Device-population parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PopulationParams {
    /// Population size.
    pub n: f64,
    /// Strategy-adaptation learning rate (1/time, > 0).
    pub delta: f64,
    /// Average data contribution per device (Mb).
    pub b: f64,
}

impl PopulationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.n >= 1.0) {
            return Err(Error::ScenarioInvalid(format!(
                "population size must be >= 1 (got {})",
                self.n
            )));
        }
        if !(self.delta > 0.0) {
            return Err(Error::ScenarioInvalid(format!(
                "learning rate must be > 0 (got {})",
                self.delta
            )));
        }
        if !(self.b > 0.0) {
            return Err(Error::ScenarioInvalid(format!(
                "data contribution must be > 0 (got {})",
                self.b
            )));
        }
        Ok(())
    }
}

/// A full game instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub vsps: Vec<VspParams>,
    pub pop: PopulationParams,
    /// Affine incentive-weight coefficients g(theta) = g0 + g1 * theta.
    pub g0: f64,
    pub g1: f64,
    /// Discount rate (1/time, >= 0).
    pub rho: f64,
    /// Time horizon T (> 0).
    pub horizon: f64,
    /// Initial population shares (on the simplex).
    pub x0: Vec<f64>,
    /// Initial twin values (componentwise >= 0).
    pub z0: Vec<f64>,
}

impl Scenario {
    /// Number of providers.
    pub fn m(&self) -> usize {
        self.vsps.len()
    }

    /// Incentive weight g(theta_m) of provider `m`.
    #[inline]
    pub fn g(&self, m: usize) -> f64 {
        self.g0 + self.g1 * self.vsps[m].theta
    }

    pub fn leaders(&self) -> Vec<usize> {
        (0..self.m())
            .filter(|&i| self.vsps[i].role == Role::Leader)
            .collect()
    }

    pub fn followers(&self) -> Vec<usize> {
        (0..self.m())
            .filter(|&i| self.vsps[i].role != Role::Leader)
            .collect()
    }

    pub fn initial_state(&self) -> Vec<f64> {
        let mut y = self.x0.clone();
        y.extend_from_slice(&self.z0);
        y
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        if m == 0 {
            return Err(Error::ScenarioInvalid("at least one VSP is required".into()));
        }
        for (i, p) in self.vsps.iter().enumerate() {
            p.validate(i)?;
        }
        self.pop.validate()?;
        if !(self.g1 > 0.0) {
            return Err(Error::ScenarioInvalid(format!(
                "g1 must be > 0 (got {})",
                self.g1
            )));
        }
        for i in 0..m {
            if !(self.g(i) > 0.0) {
                return Err(Error::ScenarioInvalid(format!(
                    "incentive weight g(theta) must be positive for vsp {}",
                    i + 1
                )));
            }
        }
        if !(self.rho >= 0.0) {
            return Err(Error::ScenarioInvalid(format!(
                "discount rate must be >= 0 (got {})",
                self.rho
            )));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::ScenarioInvalid(format!(
                "horizon must be > 0 (got {})",
                self.horizon
            )));
        }
        if self.x0.len() != m || self.z0.len() != m {
            return Err(Error::ScenarioInvalid(format!(
                "x0 and z0 must each have {m} entries (got {} and {})",
                self.x0.len(),
                self.z0.len()
            )));
        }
        let sum: f64 = self.x0.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::ScenarioInvalid(format!(
                "initial shares must sum to 1 within 1e-12 (got {sum:.15})"
            )));
        }
        if self.x0.iter().any(|&x| x < 0.0) {
            return Err(Error::ScenarioInvalid(
                "initial shares must be nonnegative".into(),
            ));
        }
        if self.z0.iter().any(|&z| z < 0.0) {
            return Err(Error::ScenarioInvalid(
                "initial twin values must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Sample time used to read off "equilibrium" states and controls:
    /// late enough for the population transient to settle, but clear of
    /// the terminal layer forced by the zero terminal costates.
    pub fn equilibrium_sample_time(&self) -> f64 {
        let t = self.horizon;
        let width = (15.0 / self.rho.max(0.05)).clamp(t / 20.0, t / 2.0);
        t - width
    }
}

/// Stacked system state split into its two blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemState {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

impl SystemState {
    pub fn new(x: Vec<f64>, z: Vec<f64>) -> Result<Self> {
        if x.len() != z.len() {
            return Err(Error::InvalidParameter(
                "share and value blocks must have equal length".into(),
            ));
        }
        let sum: f64 = x.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || x.iter().any(|&v| v < -1e-12) {
            return Err(Error::InvalidParameter(format!(
                "shares must lie on the unit simplex (sum {sum:.12})"
            )));
        }
        if z.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidParameter(
                "twin values must be nonnegative".into(),
            ));
        }
        Ok(SystemState { x, z })
    }

    pub fn from_flat(y: &[f64]) -> Self {
        let m = y.len() / 2;
        SystemState {
            x: y[..m].to_vec(),
            z: y[m..2 * m].to_vec(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut y = self.x.clone();
        y.extend_from_slice(&self.z);
        y
    }
}

/// Synchronization intensities, componentwise nonnegative.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlVector {
    pub eta: Vec<f64>,
}

impl ControlVector {
    pub fn new(eta: Vec<f64>) -> Result<Self> {
        if eta.iter().any(|&e| e < 0.0) {
            return Err(Error::InvalidParameter(
                "synchronization intensities must be nonnegative".into(),
            ));
        }
        Ok(ControlVector { eta })
    }
}

// ---------------------------------------------------------------------------
// Instantaneous formulas
// ---------------------------------------------------------------------------

/// Incentive pool R_m = eta_m * d_m * (g0 + g1 * theta_m).
pub fn incentive_pool(eta_m: f64, p: &VspParams, g0: f64, g1: f64) -> Result<f64> {
    if eta_m < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "synchronization intensity must be nonnegative (got {eta_m})"
        )));
    }
    Ok(eta_m * p.d * (g0 + g1 * p.theta))
}

/// Utility of one device selecting provider `m` under uniform incentive
/// sharing. Defined as exactly 0 on the x_m = 0 vertex so the replicator
/// field vanishes there.
pub fn uav_utility(
    x_m: f64,
    eta_m: f64,
    p: &VspParams,
    pop: &PopulationParams,
    g0: f64,
    g1: f64,
) -> f64 {
    debug_assert!((-1e-12..=1.0 + 1e-12).contains(&x_m), "share out of range");
    if x_m <= 0.0 {
        return 0.0;
    }
    eta_m * p.d * (g0 + g1 * p.theta) / (pop.n * x_m) - p.c
}

/// Population-average device utility over the current selection mix.
pub fn mean_utility(scenario: &Scenario, x: &[f64], eta: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (m, p) in scenario.vsps.iter().enumerate() {
        acc += x[m] * uav_utility(x[m], eta[m], p, &scenario.pop, scenario.g0, scenario.g1);
    }
    acc
}

/// Replicator field dx_m/dt = delta * x_m * (u_m - mean(u)).
pub fn replicator_rhs_into(scenario: &Scenario, x: &[f64], eta: &[f64], out: &mut [f64]) {
    let m = scenario.m();
    debug_assert_eq!(x.len(), m);
    let mut u = [0.0f64; 8];
    let mut u_heap;
    let u: &mut [f64] = if m <= 8 {
        &mut u[..m]
    } else {
        u_heap = vec![0.0; m];
        &mut u_heap
    };
    let mut ubar = 0.0;
    for i in 0..m {
        u[i] = uav_utility(
            x[i],
            eta[i],
            &scenario.vsps[i],
            &scenario.pop,
            scenario.g0,
            scenario.g1,
        );
        ubar += x[i] * u[i];
    }
    for i in 0..m {
        out[i] = scenario.pop.delta * x[i] * (u[i] - ubar);
    }
}

pub fn replicator_rhs(scenario: &Scenario, x: &[f64], eta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; scenario.m()];
    replicator_rhs_into(scenario, x, eta, &mut out);
    out
}

/// Twin value decay/refresh rate dz_m/dt = eta_m - theta_m * z_m.
#[inline]
pub fn value_rhs(z_m: f64, eta_m: f64, theta: f64) -> f64 {
    eta_m - theta * z_m
}

/// Full state field over y = [x, z].
pub fn state_rhs_into(scenario: &Scenario, y: &[f64], eta: &[f64], out: &mut [f64]) {
    let m = scenario.m();
    let (x, z) = y.split_at(m);
    let (out_x, out_z) = out.split_at_mut(m);
    replicator_rhs_into(scenario, x, eta, out_x);
    for i in 0..m {
        out_z[i] = value_rhs(z[i], eta[i], scenario.vsps[i].theta);
    }
}

pub fn state_rhs(scenario: &Scenario, y: &[f64], eta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; 2 * scenario.m()];
    state_rhs_into(scenario, y, eta, &mut out);
    out
}

/// Instantaneous provider payoff
/// `J_m = w1 x_m N b alpha + w2 beta z_m d - w3 (z_m - v)^2 - w4 (x_m N b - eta_m d k)^2`.
pub fn instantaneous_payoff(scenario: &Scenario, m: usize, y: &[f64], eta: &[f64]) -> f64 {
    let mm = scenario.m();
    let p = &scenario.vsps[m];
    let x_m = y[m];
    let z_m = y[mm + m];
    let supply = x_m * scenario.pop.n * scenario.pop.b;
    let j1 = supply * p.alpha;
    let j2 = p.beta() * z_m * p.d;
    let gap = z_m - p.v;
    let j3 = gap * gap;
    let mismatch = supply - eta[m] * p.d * p.k;
    let j4 = mismatch * mismatch;
    p.w1 * j1 + p.w2 * j2 - p.w3 * j3 - p.w4 * j4
}

/// Discounted cumulative payoff over a trajectory whose rows start with
/// the state block `y` (extra columns such as costates are ignored).
/// The control at off-mesh times comes from `eta_at(t, row, out)`.
pub fn discounted_payoff(
    scenario: &Scenario,
    m: usize,
    traj: &Trajectory,
    eta_at: &(dyn Fn(f64, &[f64], &mut [f64]) + Sync),
    rho: f64,
) -> Result<f64> {
    if traj.times.len() < 2 {
        return Err(Error::InvalidParameter(
            "discounted payoff needs a trajectory with at least two samples".into(),
        ));
    }
    let mm = scenario.m();
    if traj.dim() < 2 * mm {
        return Err(Error::InvalidParameter(format!(
            "trajectory rows must carry at least the {} state entries",
            2 * mm
        )));
    }
    let mut row = vec![0.0; traj.dim()];
    let mut eta = vec![0.0; mm];
    let value = quad::discounted_mesh_integral(rho, &traj.times, &mut |t| {
        traj.sample_into(t, &mut row);
        eta_at(t, &row, &mut eta);
        instantaneous_payoff(scenario, m, &row[..2 * mm], &eta)
    });
    Ok(value)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
pub(crate) fn test_vsp(theta: f64) -> VspParams {
    VspParams {
        d: 80.0,
        theta,
        alpha: 0.1,
        beta: None,
        k: 0.1,
        v: 60.0,
        c: DEFAULT_COST,
        w1: 1.0,
        w2: 0.001,
        w3: 0.01,
        w4: 0.01,
        role: Role::Simultaneous,
    }
}

/// Two-provider test instance mirroring the reference experiment
/// economics (decay rates 0.05/0.1, 80 twins each, 500 devices).
#[cfg(test)]
pub(crate) fn test_scenario_2vsp() -> Scenario {
    Scenario {
        name: "test_2vsp".into(),
        vsps: vec![test_vsp(0.05), test_vsp(0.1)],
        pop: PopulationParams {
            n: 500.0,
            delta: 0.05,
            b: 0.1,
        },
        g0: 1.0,
        g1: 1.0,
        rho: 1.0,
        horizon: 300.0,
        x0: vec![0.5, 0.5],
        z0: vec![40.0, 40.0],
    }
}
