//! Robust adaptive tube MPC on difference-of-convex surrogate dynamics.
//!
//! The controller linearizes the surrogate pair around a nominal trajectory,
//! bounds the linearization error through convexity, and optimizes a
//! feedforward sequence together with a tube of simplex cross-sections that
//! contains the state deviation under every admissible disturbance and
//! parameter realization.

mod controller;
mod problem;

pub use controller::{
    advance_time, fallback_shift, iterate_update, ControlStep, DcTmpc, FeasibilityPath,
    NominalTrajectory, StepDiagnostics,
};
pub use problem::{build_problem, ProblemCounts, ProblemInputs, TubeOutcome, TubeProblem, TubeSolution};

use nalgebra::{Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::icnn::{pack_input, DcModel, Linearization};
use crate::lqr::{riccati_gains, GainSchedule};
use crate::plant::{ConstraintSets, StateVec, N_STATES};

/// Simplex tube cross-sections: S_k = {s : -s <= alpha_k, 1's <= beta_k}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexTube {
    pub alpha: Vec<StateVec>,
    pub beta: Vec<f64>,
}

impl SimplexTube {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// Width measure of cross-section k: beta_k + 1' alpha_k.
    pub fn width(&self, k: usize) -> f64 {
        self.beta[k] + self.alpha[k].sum()
    }

    pub fn contains(&self, k: usize, s: &StateVec, slack: f64) -> bool {
        (0..N_STATES).all(|i| -s[i] <= self.alpha[k][i] + slack) && s.sum() <= self.beta[k] + slack
    }
}

/// Vertices of the simplex {s : -s <= alpha, 1's <= beta}:
/// s^0 = -alpha and s^j = -alpha + (beta + 1'alpha) e_j.
pub fn simplex_vertices(alpha: &StateVec, beta: f64) -> Result<[StateVec; N_STATES + 1]> {
    let spread = beta + alpha.sum();
    if spread < 0.0 {
        return Err(Error::ModelInput(format!(
            "empty simplex: beta + 1'alpha = {spread}"
        )));
    }
    let base = -alpha;
    let mut verts = [base; N_STATES + 1];
    for j in 0..N_STATES {
        verts[j + 1][j] += spread;
    }
    Ok(verts)
}

/// Forward-Euler step of the surrogate model: x + delta*(f1 - f2)(x,u) + w.
pub fn discrete_step(dc_f: &DcModel, x: &StateVec, u: f64, w: &StateVec, delta: f64) -> Result<StateVec> {
    let f = dc_f.dc_eval(&pack_input(x, u))?;
    Ok(x + Vector4::new(f[0], f[1], f[2], f[3]) * delta + w)
}

/// Forward-Euler step of the parameterized surrogate:
/// x + delta*(f1-f2) + delta*e2*(g1-g2)'theta + w.
pub fn discrete_step_uncertain(
    dc_f: &DcModel,
    dc_g: &DcModel,
    theta: &Vector2<f64>,
    x: &StateVec,
    u: f64,
    w: &StateVec,
    delta: f64,
) -> Result<StateVec> {
    let y = pack_input(x, u);
    let f = dc_f.dc_eval(&y)?;
    let g = dc_g.dc_eval(&y)?;
    let mut next = x + Vector4::new(f[0], f[1], f[2], f[3]) * delta + w;
    next[1] += delta * (g[0] * theta[0] + g[1] * theta[1]);
    Ok(next)
}

/// Controller configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MpcConfig {
    /// Prediction horizon N.
    pub horizon: usize,
    /// Control-smoothing weight in the objective.
    pub gamma: f64,
    /// Sample interval [h].
    pub delta: f64,
    /// Terminal state bound.
    pub x_term: StateVec,
    /// Number of trailing steps pinned to the terminal set (on top of step N).
    pub n_term: usize,
    /// Recovery feed rate held beyond the horizon [L/h].
    pub u_recovery: f64,
    /// Convergence threshold on the change in optimal cost.
    pub cost_tol: f64,
    /// Convergence threshold on the feedforward norm sum_k |c_k|.
    pub feedforward_tol: f64,
    /// Iteration cap for the successive linearization loop at t=0.
    pub max_iters_initial: usize,
    /// Iteration cap at later sample instants.
    pub max_iters: usize,
    /// LQR weights for the gain schedule.
    pub lqr_q: f64,
    pub lqr_r: f64,
    /// Tiny objective weight pulling epigraph variables onto the network
    /// values; keeps the optimal face bounded.
    pub epigraph_nudge: f64,
    /// Include the absolute parameter-mismatch constant
    /// `delta * g(x_k, u_k)' (theta^m - theta_hat)` in the robust tube
    /// recursion. With it, the tube provably contains the surrogate state
    /// for every theta in the parameter set (at the cost of a much wider
    /// tube); without it, the recursion bounds only the perturbation terms,
    /// matching the nominal-estimate propagation.
    pub exact_theta_mismatch: bool,
    /// Componentwise relaxation of the *vertex* lower state bounds. The
    /// plant cannot drive concentrations negative (uptake saturates at
    /// zero), so tube cross-sections may dip below the physical floor
    /// without endangering true-state feasibility.
    pub state_floor_relax: StateVec,
    pub constraints: ConstraintSets,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 25,
            gamma: 0.1,
            delta: 1.0,
            x_term: Vector4::new(3.7, 0.1, 3.0, 5.0),
            n_term: 5,
            u_recovery: 0.01,
            cost_tol: 1e-3,
            feedforward_tol: 1e-4,
            max_iters_initial: 15,
            max_iters: 5,
            lqr_q: 1e-5,
            lqr_r: 1.0,
            epigraph_nudge: 1e-7,
            exact_theta_mismatch: false,
            state_floor_relax: Vector4::new(0.05, 0.2, 0.05, 0.02),
            constraints: ConstraintSets::default(),
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < self.n_term {
            return Err(Error::Config("horizon must be at least n_term".into()));
        }
        if self.cost_tol <= 0.0 || self.feedforward_tol <= 0.0 {
            return Err(Error::Config("convergence thresholds must be positive".into()));
        }
        if self.delta <= 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("delta must be positive and gamma non-negative".into()));
        }
        self.constraints.validate()
    }
}

/// Jacobians and values of the surrogate pair(s) at one trajectory point.
#[derive(Debug, Clone)]
pub struct StepLinearization {
    pub f1: Linearization,
    pub f2: Linearization,
    pub g1: Option<Linearization>,
    pub g2: Option<Linearization>,
}

/// Linearize the surrogate pair (and optionally the regressor pair) at every
/// point of the nominal trajectory, k = 0..N.
pub fn linearize_trajectory(
    dc_f: &DcModel,
    dc_g: Option<&DcModel>,
    traj: &NominalTrajectory,
) -> Result<Vec<StepLinearization>> {
    let n = traj.controls.len();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let y = pack_input(&traj.states[k].as_vector(), traj.controls[k]);
        out.push(StepLinearization {
            f1: Linearization::at(&dc_f.f1, &y, N_STATES)?,
            f2: Linearization::at(&dc_f.f2, &y, N_STATES)?,
            g1: dc_g.map(|g| Linearization::at(&g.f1, &y, N_STATES)).transpose()?,
            g2: dc_g.map(|g| Linearization::at(&g.f2, &y, N_STATES)).transpose()?,
        });
    }
    Ok(out)
}

/// LQR gain schedule along the trajectory from the linearized discrete
/// surrogate model A_k = I + delta (A1 - A2), B_k = delta (B1 - B2).
pub fn lqr_gains(lins: &[StepLinearization], cfg: &MpcConfig) -> Result<GainSchedule> {
    let mut a_seq = Vec::with_capacity(lins.len());
    let mut b_seq = Vec::with_capacity(lins.len());
    for lin in lins {
        let mut a = Matrix4::identity();
        let mut b = Vector4::zeros();
        for r in 0..N_STATES {
            for c in 0..N_STATES {
                a[(r, c)] += cfg.delta * (lin.f1.a[(r, c)] - lin.f2.a[(r, c)]);
            }
            b[r] = cfg.delta * (lin.f1.b[(r, 0)] - lin.f2.b[(r, 0)]);
        }
        a_seq.push(a);
        b_seq.push(b);
    }
    riccati_gains(&a_seq, &b_seq, cfg.lqr_q, cfg.lqr_r)
}
