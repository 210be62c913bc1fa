//! Trajectory updates and the closed-loop controller driver.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::estimate::ParamSet;
use crate::icnn::DcModel;
use crate::lqr::GainSchedule;
use crate::plant::{Control, NominalModel, State, StateVec, UncertainTheta};
use crate::train::DisturbanceBounds;

use super::problem::{build_problem, ProblemCounts, ProblemInputs, TubeOutcome, TubeSolution};
use super::{linearize_trajectory, lqr_gains, MpcConfig, SimplexTube};

/// One-step prediction map used for nominal propagation.
pub type Propagator<'a> = &'a dyn Fn(&State, Control) -> Result<State>;

/// Linearization trajectory: states x_0..x_{N+1}, controls u_0..u_N, and the
/// parameter estimate they were propagated under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalTrajectory {
    pub states: Vec<State>,
    pub controls: Vec<f64>,
    pub estimate: Option<UncertainTheta>,
}

impl NominalTrajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len() - 1
    }

    /// Constant-input rollout from the measured state (the initialization
    /// rule at t = 0).
    pub fn initialize(
        x0: &State,
        u_hold: f64,
        horizon: usize,
        estimate: Option<UncertainTheta>,
        phi: Propagator,
    ) -> Result<Self> {
        let mut states = Vec::with_capacity(horizon + 2);
        states.push(*x0);
        for k in 0..=horizon {
            let next = phi(&states[k], Control(u_hold))?;
            states.push(next);
        }
        Ok(NominalTrajectory {
            states,
            controls: vec![u_hold; horizon + 1],
            estimate,
        })
    }

    /// Worst defect of the stored states against a fresh propagation,
    /// for invariant checks.
    pub fn propagation_defect(&self, phi: Propagator) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for k in 0..self.controls.len() {
            let next = phi(&self.states[k], Control(self.controls[k]))?;
            worst = worst.max((next.as_vector() - self.states[k + 1].as_vector()).abs().max());
        }
        Ok(worst)
    }
}

/// Within-instant update: apply the optimal feedforward and re-propagate,
/// in place, in the stated order (control first, then state, per step).
pub fn iterate_update(
    traj: &NominalTrajectory,
    gains: &GainSchedule,
    c_star: &[f64],
    x_now: &StateVec,
    phi: Propagator,
) -> Result<NominalTrajectory> {
    let n = traj.horizon();
    let mut out = traj.clone();
    let mut s = x_now - traj.states[0].as_vector();
    for k in 0..=n {
        out.controls[k] += (gains.gains[k] * s)[0] + c_star[k];
        let next = phi(&out.states[k], Control(out.controls[k]))?;
        s = next.as_vector() - out.states[k + 1].as_vector();
        out.states[k + 1] = next;
    }
    Ok(out)
}

/// Sample-instant advance: re-anchor to the measured state, shift the input
/// plan by one step reusing the last optimal feedforward, and append the
/// recovery input.
pub fn advance_time(
    traj: &NominalTrajectory,
    gains: &GainSchedule,
    c_star: &[f64],
    x_meas: &State,
    u_recovery: f64,
    estimate: Option<UncertainTheta>,
    phi: Propagator,
) -> Result<NominalTrajectory> {
    let n = traj.horizon();
    let mut out = traj.clone();
    out.estimate = estimate;
    out.states[0] = *x_meas;
    let mut s = StateVec::zeros();
    for k in 0..=n {
        out.controls[k] = if k < n {
            traj.controls[k + 1] + (gains.gains[k + 1] * s)[0] + c_star[k + 1]
        } else {
            u_recovery
        };
        let next = phi(&out.states[k], Control(out.controls[k]))?;
        s = next.as_vector() - traj.states[k + 1].as_vector();
        out.states[k + 1] = next;
    }
    Ok(out)
}

/// Pure time shift of the previous nominal trajectory (the recursive
/// feasibility fallback): no feedback terms, no re-anchoring.
pub fn fallback_shift(
    traj: &NominalTrajectory,
    u_recovery: f64,
    estimate: Option<UncertainTheta>,
    phi: Propagator,
) -> Result<NominalTrajectory> {
    let n = traj.horizon();
    let mut out = traj.clone();
    out.estimate = estimate;
    for k in 0..=n {
        out.states[k] = traj.states[k + 1];
        out.controls[k] = if k < n { traj.controls[k + 1] } else { u_recovery };
    }
    let last = phi(&out.states[n], Control(out.controls[n]))?;
    out.states[n + 1] = last;
    Ok(out)
}

/// How the controller obtained a feasible problem at this instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeasibilityPath {
    /// t = 0 initialization.
    Initial,
    /// Advanced trajectory was feasible directly.
    Normal,
    /// Advanced trajectory was infeasible; the time-shift fallback was used.
    Fallback,
    /// Both attempts infeasible; the recovery input is applied open-loop.
    EmergencyHold,
}

/// Per-instant diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct StepDiagnostics {
    pub iterations: usize,
    /// Both convergence thresholds fired before the iteration cap.
    pub converged: bool,
    /// Conic solves that ended in a numerical breakdown (degraded to the
    /// infeasibility handling path).
    pub numerical_failures: usize,
    pub cost_sequence: Vec<f64>,
    pub feedforward_norms: Vec<f64>,
    pub path: FeasibilityPath,
    pub solve_seconds: Vec<f64>,
    pub epigraph_gap: f64,
    pub feasibility_violation: f64,
    #[serde(skip)]
    pub counts: ProblemCounts,
}

/// Result of one control step.
#[derive(Debug, Clone)]
pub struct ControlStep {
    pub u_command: f64,
    /// Tube of the final feasible solve.
    pub tube: SimplexTube,
    /// Trajectory the tube is anchored to (solve-time linearization points).
    pub tube_reference: NominalTrajectory,
    /// Trajectory after the final within-instant update.
    pub predicted: NominalTrajectory,
    pub cost: f64,
    pub diagnostics: StepDiagnostics,
}

/// Stateful DC tube MPC controller.
pub struct DcTmpc {
    pub dc_f: DcModel,
    pub dc_g: Option<DcModel>,
    pub cfg: MpcConfig,
    pub model: NominalModel,
    pub w: DisturbanceBounds,
    traj: Option<NominalTrajectory>,
    gains: Option<GainSchedule>,
    c_star: Vec<f64>,
    u_prev: f64,
}

impl DcTmpc {
    pub fn new(
        dc_f: DcModel,
        dc_g: Option<DcModel>,
        cfg: MpcConfig,
        model: NominalModel,
        w: DisturbanceBounds,
    ) -> Result<Self> {
        cfg.validate()?;
        dc_f.validate()?;
        if let Some(g) = &dc_g {
            g.validate()?;
        }
        let u0 = cfg.u_recovery;
        Ok(DcTmpc {
            dc_f,
            dc_g,
            cfg,
            model,
            w,
            traj: None,
            gains: None,
            c_star: Vec::new(),
            u_prev: u0,
        })
    }

    /// Previously applied control (the smoothing reference u(t - delta)).
    pub fn u_prev(&self) -> f64 {
        self.u_prev
    }

    /// One sample instant: advance (or initialize) the trajectory, run the
    /// successive linearization loop, and return the input to apply.
    ///
    /// `theta_set` switches the robust vertex-wise constraints on;
    /// `theta_hat` selects the prediction model for nominal propagation.
    pub fn step(
        &mut self,
        x_now: &State,
        theta_set: Option<&ParamSet>,
        theta_hat: Option<UncertainTheta>,
    ) -> Result<ControlStep> {
        let n = self.cfg.horizon;
        let model = self.model.clone();
        let phi_est = theta_hat;
        let phi = move |x: &State, u: Control| model.propagate(x, u, phi_est.as_ref());
        let phi: Propagator = &phi;

        let mut path;
        let mut traj = match (&self.traj, &self.gains) {
            (Some(prev), Some(gains)) => {
                path = FeasibilityPath::Normal;
                advance_time(prev, gains, &self.c_star, x_now, self.cfg.u_recovery, theta_hat, phi)?
            }
            _ => {
                path = FeasibilityPath::Initial;
                NominalTrajectory::initialize(x_now, self.cfg.u_recovery, n, theta_hat, phi)?
            }
        };

        let cap = if path == FeasibilityPath::Initial {
            self.cfg.max_iters_initial
        } else {
            self.cfg.max_iters
        };

        let mut gains = lqr_gains(&linearize_trajectory(&self.dc_f, None, &traj)?, &self.cfg)?;
        let mut diag = StepDiagnostics {
            iterations: 0,
            converged: false,
            numerical_failures: 0,
            cost_sequence: Vec::new(),
            feedforward_norms: Vec::new(),
            path,
            solve_seconds: Vec::new(),
            epigraph_gap: 0.0,
            feasibility_violation: 0.0,
            counts: ProblemCounts::default(),
        };
        let mut last: Option<(TubeSolution, NominalTrajectory)> = None;

        let mut iter = 0;
        while iter < cap {
            let lins = linearize_trajectory(&self.dc_f, self.dc_g.as_ref(), &traj)?;
            let problem = build_problem(
                &ProblemInputs {
                    traj: &traj,
                    gains: &gains,
                    lins: &lins,
                    w: &self.w,
                    theta_set,
                    x_now: x_now.as_vector(),
                    u_prev: self.u_prev,
                },
                &self.dc_f,
                self.dc_g.as_ref(),
                &self.cfg,
            )?;
            if diag.iterations == 0 {
                diag.counts = problem.counts.clone();
            }
            let t0 = std::time::Instant::now();
            // a numerical breakdown on one instance degrades to the
            // infeasibility path instead of aborting the closed loop
            let outcome = match problem.solve() {
                Ok(outcome) => outcome,
                Err(e) => {
                    log::warn!("conic solve failed numerically: {e}; treating as infeasible");
                    diag.numerical_failures += 1;
                    TubeOutcome::Infeasible
                }
            };
            diag.solve_seconds.push(t0.elapsed().as_secs_f64());

            match outcome {
                TubeOutcome::Feasible(sol) => {
                    diag.iterations += 1;
                    diag.epigraph_gap = diag.epigraph_gap.max(sol.epigraph_gap);
                    diag.feasibility_violation =
                        diag.feasibility_violation.max(sol.feasibility_violation);
                    let ff_norm: f64 = sol.c.iter().map(|c| c.abs()).sum();
                    let converged = ff_norm <= self.cfg.feedforward_tol
                        && diag
                            .cost_sequence
                            .last()
                            .map(|prev| (sol.cost - prev).abs() <= self.cfg.cost_tol)
                            .unwrap_or(diag.iterations > 0 && ff_norm <= self.cfg.feedforward_tol);
                    diag.cost_sequence.push(sol.cost);
                    diag.feedforward_norms.push(ff_norm);
                    let reference = traj.clone();
                    traj = iterate_update(&traj, &gains, &sol.c, &x_now.as_vector(), phi)?;
                    self.c_star = sol.c.clone();
                    last = Some((sol, reference));
                    if converged {
                        diag.converged = true;
                        break;
                    }
                    iter += 1;
                }
                TubeOutcome::Infeasible => {
                    if std::env::var("DCTMPC_DIAG_INFEASIBLE").is_ok() {
                        if let Ok((slack, rows)) = problem.raw_slack_rows() {
                            let labels: Vec<String> =
                                rows.iter().take(8).map(|r| problem.locate_row(*r)).collect();
                            eprintln!(
                                "  [infeasible] path={path:?} slack={slack:.3e} rows={}: {labels:?}",
                                rows.len()
                            );
                        }
                    }
                    if diag.iterations > 0 {
                        // keep the last feasible iterate
                        log::warn!("re-linearized problem infeasible; keeping previous iterate");
                        break;
                    }
                    match (path, &self.traj, &self.gains) {
                        (FeasibilityPath::Normal, Some(prev), Some(_)) => {
                            log::warn!("advanced trajectory infeasible; applying time-shift fallback");
                            path = FeasibilityPath::Fallback;
                            diag.path = path;
                            traj = fallback_shift(prev, self.cfg.u_recovery, theta_hat, phi)?;
                            gains = lqr_gains(&linearize_trajectory(&self.dc_f, None, &traj)?, &self.cfg)?;
                        }
                        _ => {
                            log::warn!("no feasible problem at this instant; holding recovery input");
                            path = FeasibilityPath::EmergencyHold;
                            diag.path = path;
                            break;
                        }
                    }
                }
            }
        }

        let (u_command, cost, tube, reference) = match (&last, path) {
            (Some((sol, reference)), _) => {
                let u = traj.controls[0]
                    .clamp(self.cfg.constraints.u_lower, self.cfg.constraints.u_upper);
                (u, sol.cost, sol.tube.clone(), reference.clone())
            }
            (None, _) => {
                // emergency: hold the recovery input on the unsolved plan
                let u = self
                    .cfg
                    .u_recovery
                    .clamp(self.cfg.constraints.u_lower, self.cfg.constraints.u_upper);
                (
                    u,
                    f64::NAN,
                    SimplexTube {
                        alpha: vec![StateVec::zeros(); n + 1],
                        beta: vec![0.0; n + 1],
                    },
                    traj.clone(),
                )
            }
        };
        if last.is_none() {
            // ensure the held input is reflected in the stored plan
            for u in traj.controls.iter_mut() {
                *u = u_command;
            }
            self.c_star = vec![0.0; n + 1];
        }

        self.traj = Some(traj.clone());
        self.gains = Some(gains);
        if self.c_star.len() != n + 1 {
            self.c_star = vec![0.0; n + 1];
        }
        self.u_prev = u_command;

        Ok(ControlStep {
            u_command,
            tube,
            tube_reference: reference,
            predicted: traj,
            cost,
            diagnostics: diag,
        })
    }
}

impl std::fmt::Debug for DcTmpc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DcTmpc")
            .field("horizon", &self.cfg.horizon)
            .field("robust", &self.dc_g.is_some())
            .finish()
    }
}
