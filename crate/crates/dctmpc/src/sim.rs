//! Closed-loop simulation scenarios and the batch driver.

use nalgebra::{Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{
    compute_gain_bound, lms_update, regression_matrices, update_set, Observation, ParamSet,
    PointEstimate, RegressionWindow, SetUpdate,
};
use crate::icnn::DcModel;
use crate::plant::{integrate_step, Control, ModelParams, NominalModel, State, StateVec, UncertainTheta};
use crate::rng::{stream, uniform, Stream};
use crate::train::DisturbanceBounds;
use crate::tube::{DcTmpc, FeasibilityPath, MpcConfig, NominalTrajectory, SimplexTube};

pub const SCENARIO_SCHEMA: &str = "scenario/1";

/// Controller/estimation mode of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Known parameters, nominal tube constraints, no estimation.
    NominalMpc,
    /// Parameter uncertainty with set-membership + LMS estimation and
    /// robust vertex-wise tube constraints.
    AdaptiveMpc,
    /// Adaptive mode with exploratory input dither.
    AdaptiveDither,
}

/// Process-noise configuration for the plant simulation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub enabled: bool,
    /// Componentwise bounds on the piecewise-constant disturbance rate.
    pub bounds: StateVec,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            enabled: true,
            bounds: Vector4::new(5e-5, 5e-5, 5e-6, 2.5e-5),
        }
    }
}

/// Estimator configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Observation window length for the set-membership update.
    pub window: usize,
    pub theta_lower: [f64; 2],
    pub theta_upper: [f64; 2],
    pub theta_hat0: [f64; 2],
    /// Samples for the LMS gain bound.
    pub gain_samples: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            window: 10,
            theta_lower: [-0.222, -0.15],
            theta_upper: [0.778, 0.25],
            theta_hat0: [0.0, 0.0],
            gain_samples: 10_000,
        }
    }
}

/// A complete closed-loop scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub schema: String,
    pub name: String,
    pub mode: Mode,
    /// Batch duration [h]; the number of steps is duration / mpc.delta.
    pub duration: f64,
    pub seed: u64,
    pub true_params: ModelParams,
    pub nominal_params: ModelParams,
    /// Uniform dither amplitude added to the commanded input (dither mode).
    pub dither_amplitude: f64,
    pub noise: NoiseConfig,
    pub f_model: std::path::PathBuf,
    pub g_model: std::path::PathBuf,
    pub mpc: MpcConfig,
    /// Disturbance box consumed by the tube recursion.
    pub w_tube: DisturbanceBounds,
    /// Disturbance box consumed by the set-membership estimator.
    pub w_est: DisturbanceBounds,
    pub estimator: EstimatorConfig,
}

impl Scenario {
    pub fn adaptive(name: &str) -> Self {
        Scenario {
            schema: SCENARIO_SCHEMA.into(),
            name: name.into(),
            mode: Mode::AdaptiveMpc,
            duration: 100.0,
            seed: 0,
            true_params: ModelParams::default(),
            nominal_params: ModelParams::nominal(),
            dither_amplitude: 1e-2,
            noise: NoiseConfig::default(),
            f_model: "models/f.json".into(),
            g_model: "models/g.json".into(),
            mpc: MpcConfig::default(),
            w_tube: DisturbanceBounds {
                lower: -Vector4::new(1.5e-4, 2e-4, 2e-5, 1e-4),
                upper: Vector4::new(1.5e-4, 2e-4, 2e-5, 1e-4),
            },
            // the floor enlarged in the substrate component to the
            // one-step residual envelope of the shipped surrogate (forward
            // Euler truncation plus fit error exceed the floor there)
            w_est: DisturbanceBounds {
                lower: -Vector4::new(1e-2, 1e-2, 1e-3, 1e-2),
                upper: Vector4::new(1e-2, 1e-2, 1e-3, 1e-2),
            },
            estimator: EstimatorConfig::default(),
        }
    }

    pub fn nominal(name: &str) -> Self {
        Scenario {
            mode: Mode::NominalMpc,
            // the known-parameter study runs the plant at the nominal values
            true_params: ModelParams::nominal(),
            ..Scenario::adaptive(name)
        }
    }

    pub fn dither(name: &str) -> Self {
        Scenario {
            mode: Mode::AdaptiveDither,
            ..Scenario::adaptive(name)
        }
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.mpc.delta).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCENARIO_SCHEMA {
            return Err(Error::Config(format!("unsupported scenario schema {:?}", self.schema)));
        }
        let steps = self.duration / self.mpc.delta;
        if (steps - steps.round()).abs() > 1e-9 || steps < 1.0 {
            return Err(Error::Config("duration must be a positive multiple of delta".into()));
        }
        if self.dither_amplitude < 0.0 {
            return Err(Error::Config("dither amplitude must be non-negative".into()));
        }
        self.mpc.validate()?;
        self.true_params.validate()?;
        self.nominal_params.validate()?;
        Ok(())
    }

    pub fn initial_theta_set(&self) -> ParamSet {
        ParamSet::from_bounds(
            Vector2::new(self.estimator.theta_lower[0], self.estimator.theta_lower[1]),
            Vector2::new(self.estimator.theta_upper[0], self.estimator.theta_upper[1]),
        )
    }
}

/// Per-step estimator state entering the log.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EstimatorRecord {
    pub h: [f64; 4],
    pub theta_hat: [f64; 2],
    pub innovation_norm: f64,
    pub frozen: bool,
}

/// One sample instant of the closed loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub state: State,
    pub u_applied: f64,
    /// One-step-ahead tube cross-section of the final solve.
    pub alpha: StateVec,
    pub beta: f64,
    pub cost: f64,
    pub iterations: usize,
    pub path: FeasibilityPath,
    pub estimator: Option<EstimatorRecord>,
    /// Wall time spent in conic solves this step [s] (not part of the
    /// deterministic log contract).
    pub solve_seconds: f64,
    pub epigraph_gap: f64,
    pub feasibility_violation: f64,
}

/// Tube envelopes of the t=0 prediction, for plot data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionSnapshot {
    pub states: Vec<State>,
    pub controls: Vec<f64>,
    pub lower: Vec<StateVec>,
    pub upper: Vec<StateVec>,
}

impl PredictionSnapshot {
    pub fn from_solution(reference: &NominalTrajectory, tube: &SimplexTube) -> Self {
        let n = tube.len();
        let mut lower = Vec::with_capacity(n);
        let mut upper = Vec::with_capacity(n);
        for k in 0..n {
            let x = reference.states[k].as_vector();
            let spread = tube.width(k);
            lower.push(x - tube.alpha[k]);
            upper.push(x - tube.alpha[k] + Vector4::from_element(spread));
        }
        PredictionSnapshot {
            states: reference.states[..n].to_vec(),
            controls: reference.controls[..n.min(reference.controls.len())].to_vec(),
            lower,
            upper,
        }
    }
}

/// Aggregate metrics of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub final_product: f64,
    pub min_substrate: f64,
    pub max_biomass: f64,
    pub constraint_violations: usize,
    pub fallback_steps: usize,
    pub emergency_steps: usize,
    pub theta_star_excluded_steps: usize,
    pub estimator_frozen_steps: usize,
    pub final_theta_set_area: f64,
    pub max_epigraph_gap: f64,
    pub max_step_solve_seconds: f64,
    pub mean_step_solve_seconds: f64,
    pub total_iterations: usize,
}

/// Full log of one closed-loop run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimLog {
    pub scenario: String,
    pub mode: Mode,
    pub seed: u64,
    pub records: Vec<StepRecord>,
    pub final_state: State,
    pub prediction_t0: Option<PredictionSnapshot>,
    pub metrics: Metrics,
}

/// Run one closed-loop scenario to completion.
pub fn run_closed_loop(sc: &Scenario, f_model: &DcModel, g_model: &DcModel) -> Result<SimLog> {
    sc.validate()?;
    f_model.validate()?;
    g_model.validate()?;

    let adaptive = sc.mode != Mode::NominalMpc;
    let steps = sc.steps();
    let delta = sc.mpc.delta;
    let boxes = sc.mpc.constraints.clone();

    let model = NominalModel::new(sc.nominal_params, delta);
    let mut controller = DcTmpc::new(
        f_model.clone(),
        adaptive.then(|| g_model.clone()),
        sc.mpc.clone(),
        model,
        sc.w_tube.clone(),
    )?;

    let mut noise_rng = stream(sc.seed, Stream::ProcessNoise);
    let mut dither_rng = stream(sc.seed, Stream::Dither);

    let mut theta_set = sc.initial_theta_set();
    let gain = if adaptive {
        compute_gain_bound(g_model, &f_model.sampling_box, sc.estimator.gain_samples, delta, sc.seed)?
    } else {
        0.0
    };
    let mut estimate = PointEstimate::new(
        Vector2::new(sc.estimator.theta_hat0[0], sc.estimator.theta_hat0[1]),
        gain,
    );
    let mut window = RegressionWindow::new(sc.estimator.window);
    let theta_star = UncertainTheta::from_physical(
        sc.true_params.yield_biomass,
        sc.true_params.feed_substrate,
        &sc.nominal_params,
    );

    let mut x = State::batch_start();
    let mut records: Vec<StepRecord> = Vec::with_capacity(steps);
    let mut prediction_t0 = None;
    let mut metrics = Metrics {
        final_product: f64::NAN,
        min_substrate: f64::INFINITY,
        max_biomass: f64::NEG_INFINITY,
        constraint_violations: 0,
        fallback_steps: 0,
        emergency_steps: 0,
        theta_star_excluded_steps: 0,
        estimator_frozen_steps: 0,
        final_theta_set_area: f64::NAN,
        max_epigraph_gap: 0.0,
        max_step_solve_seconds: 0.0,
        mean_step_solve_seconds: 0.0,
        total_iterations: 0,
    };
    let slack = 1e-9;

    for n in 0..steps {
        let t = n as f64 * delta;
        let (set_arg, hat_arg) = if adaptive {
            (Some(&theta_set), Some(UncertainTheta { theta: estimate.theta_hat }))
        } else {
            (None, None)
        };
        let step = controller.step(&x, set_arg, hat_arg)?;

        let mut u = step.u_command;
        if sc.mode == Mode::AdaptiveDither {
            u += uniform(&mut dither_rng, -sc.dither_amplitude, sc.dither_amplitude);
        }
        u = u.clamp(boxes.u_lower, boxes.u_upper);

        if n == 0 {
            prediction_t0 = Some(PredictionSnapshot::from_solution(&step.tube_reference, &step.tube));
        }

        // constraint accounting at the sample instant
        if !boxes.contains_state(&x.as_vector(), slack) || !boxes.contains_control(u, slack) {
            metrics.constraint_violations += 1;
        }
        match step.diagnostics.path {
            FeasibilityPath::Fallback => metrics.fallback_steps += 1,
            FeasibilityPath::EmergencyHold => metrics.emergency_steps += 1,
            _ => {}
        }
        metrics.max_epigraph_gap = metrics.max_epigraph_gap.max(step.diagnostics.epigraph_gap);
        if std::env::var("DCTMPC_TRACE").is_ok() {
            eprintln!(
                "  [trace] t={t} path={:?} costs={:?} ff={:?}",
                step.diagnostics.path, step.diagnostics.cost_sequence, step.diagnostics.feedforward_norms
            );
        }
        let step_secs: f64 = step.diagnostics.solve_seconds.iter().sum();
        metrics.max_step_solve_seconds = metrics.max_step_solve_seconds.max(step_secs);
        metrics.mean_step_solve_seconds += step_secs;
        metrics.total_iterations += step.diagnostics.iterations;
        metrics.min_substrate = metrics.min_substrate.min(x.substrate);
        metrics.max_biomass = metrics.max_biomass.max(x.biomass);

        // plant step under the applied input
        let xi = if sc.noise.enabled {
            let mut v = StateVec::zeros();
            for i in 0..4 {
                v[i] = uniform(&mut noise_rng, -sc.noise.bounds[i], sc.noise.bounds[i]);
            }
            Some(v)
        } else {
            None
        };
        let x_next = integrate_step(&x, Control(u), &sc.true_params, delta, xi.as_ref())?;

        // estimation on the applied input and observed transition
        let estimator_record = if adaptive {
            window.push(Observation {
                x: x.as_vector(),
                u,
                x_next: x_next.as_vector(),
            });
            let (next_set, status) = update_set(&theta_set, &window, &sc.w_est, f_model, g_model, delta)?;
            theta_set = next_set;
            let (d_mat, d_vec) = regression_matrices(f_model, g_model, &x.as_vector(), u, delta)?;
            let innovation = (x_next.as_vector() - (d_mat * estimate.theta_hat + d_vec)).norm();
            estimate = lms_update(&estimate, &d_mat, &d_vec, &x_next.as_vector(), &theta_set);
            if !theta_set.contains(&theta_star.theta, 1e-9) {
                metrics.theta_star_excluded_steps += 1;
            }
            if status == SetUpdate::FrozenInconsistent {
                metrics.estimator_frozen_steps += 1;
            }
            Some(EstimatorRecord {
                h: [theta_set.h[0], theta_set.h[1], theta_set.h[2], theta_set.h[3]],
                theta_hat: [estimate.theta_hat[0], estimate.theta_hat[1]],
                innovation_norm: innovation,
                frozen: status == SetUpdate::FrozenInconsistent,
            })
        } else {
            None
        };

        records.push(StepRecord {
            t,
            state: x,
            u_applied: u,
            alpha: step.tube.alpha.get(1).cloned().unwrap_or_else(StateVec::zeros),
            beta: step.tube.beta.get(1).cloned().unwrap_or(0.0),
            cost: step.cost,
            iterations: step.diagnostics.iterations,
            path: step.diagnostics.path,
            estimator: estimator_record,
            solve_seconds: step_secs,
            epigraph_gap: step.diagnostics.epigraph_gap,
            feasibility_violation: step.diagnostics.feasibility_violation,
        });

        x = x_next;
    }

    // final state accounting
    if !boxes.contains_state(&x.as_vector(), slack) {
        metrics.constraint_violations += 1;
    }
    metrics.min_substrate = metrics.min_substrate.min(x.substrate);
    metrics.max_biomass = metrics.max_biomass.max(x.biomass);
    metrics.final_product = x.product;
    metrics.final_theta_set_area = if adaptive { theta_set.area() } else { f64::NAN };
    metrics.mean_step_solve_seconds /= steps as f64;

    Ok(SimLog {
        scenario: sc.name.clone(),
        mode: sc.mode,
        seed: sc.seed,
        records,
        final_state: x,
        prediction_t0,
        metrics,
    })
}

/// Run the same scenario across a seed range, in parallel.
pub fn run_seed_batch(
    base: &Scenario,
    seeds: std::ops::Range<u64>,
    f_model: &DcModel,
    g_model: &DcModel,
    parallelism: usize,
) -> Result<Vec<SimLog>> {
    let seeds: Vec<u64> = seeds.collect();
    let chunk = seeds.len().div_ceil(parallelism.max(1));
    let mut out: Vec<Option<SimLog>> = vec![None; seeds.len()];
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for (ci, chunk_seeds) in seeds.chunks(chunk.max(1)).enumerate() {
            let base = base.clone();
            let handle = scope.spawn(move || -> Result<Vec<(usize, SimLog)>> {
                let mut logs = Vec::new();
                for (i, seed) in chunk_seeds.iter().enumerate() {
                    let mut sc = base.clone();
                    sc.seed = *seed;
                    sc.name = format!("{}-seed{}", base.name, seed);
                    logs.push((ci * chunk.max(1) + i, run_closed_loop(&sc, f_model, g_model)?));
                }
                Ok(logs)
            });
            handles.push(handle);
        }
        for handle in handles {
            for (idx, log) in handle.join().expect("batch thread panicked")? {
                out[idx] = Some(log);
            }
        }
        Ok(())
    })?;
    Ok(out.into_iter().map(|l| l.expect("all seeds ran")).collect())
}
