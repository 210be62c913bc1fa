//! Fed-batch bioreactor model: ground-truth continuous-time dynamics, the
//! linearly-parameterized uncertain form, ODE integration, and the nominal
//! one-step propagation map used by the controller.

use nalgebra::{Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// State vector ordering: (biomass, substrate, product, volume).
pub type StateVec = Vector4<f64>;

pub const N_STATES: usize = 4;

/// Bioreactor state with physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    /// Biomass concentration X [g/L].
    pub biomass: f64,
    /// Substrate concentration S [g/L].
    pub substrate: f64,
    /// Product concentration P [g/L].
    pub product: f64,
    /// Added volume V [L] (on top of the initial volume).
    pub volume: f64,
}

impl State {
    pub fn new(biomass: f64, substrate: f64, product: f64, volume: f64) -> Self {
        State {
            biomass,
            substrate,
            product,
            volume,
        }
    }

    /// Initial condition of the batch: X=1, S=0.5, P=0, V=0.
    pub fn batch_start() -> Self {
        State::new(1.0, 0.5, 0.0, 0.0)
    }

    pub fn as_vector(&self) -> StateVec {
        Vector4::new(self.biomass, self.substrate, self.product, self.volume)
    }

    pub fn from_vector(v: &StateVec) -> Self {
        State::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.as_vector().iter().all(|x| x.is_finite())
    }
}

/// Feed flow rate u [L/h].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Control(pub f64);

/// Kinetic and stoichiometric parameters of the plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Maximal growth rate [1/h].
    pub mu_max: f64,
    /// Substrate affinity constant [g/L].
    pub k_s: f64,
    /// Substrate inhibition constant [g/L].
    pub k_i: f64,
    /// Production rate constant [L/h].
    pub production_rate: f64,
    /// Inlet substrate concentration [g/L].
    pub feed_substrate: f64,
    /// Yield of biomass per substrate [g/g].
    pub yield_biomass: f64,
    /// Yield of product per substrate [g/g].
    pub yield_product: f64,
    /// Initial reactor volume [L].
    pub initial_volume: f64,
}

impl Default for ModelParams {
    /// True plant values.
    fn default() -> Self {
        ModelParams {
            mu_max: 0.02,
            k_s: 0.05,
            k_i: 5.0,
            production_rate: 0.004,
            feed_substrate: 200.0,
            yield_biomass: 0.4,
            yield_product: 1.2,
            initial_volume: 120.0,
        }
    }
}

impl ModelParams {
    /// Nominal parameter set assumed by the controller: the uncertain
    /// yield and inlet concentration are replaced by their nominal values.
    pub fn nominal() -> Self {
        ModelParams {
            yield_biomass: 0.45,
            feed_substrate: 195.0,
            ..ModelParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.mu_max,
            self.k_s,
            self.k_i,
            self.production_rate,
            self.feed_substrate,
            self.yield_biomass,
            self.yield_product,
            self.initial_volume,
        ];
        if fields.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(Error::ModelInput(
                "model parameters must be finite and strictly positive".into(),
            ));
        }
        Ok(())
    }
}

/// State and control box constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSets {
    pub x_lower: StateVec,
    pub x_upper: StateVec,
    pub u_lower: f64,
    pub u_upper: f64,
}

impl Default for ConstraintSets {
    fn default() -> Self {
        ConstraintSets {
            x_lower: StateVec::zeros(),
            x_upper: Vector4::new(3.7, 1.0, 3.0, 5.0),
            u_lower: 0.0,
            u_upper: 0.2,
        }
    }
}

impl ConstraintSets {
    pub fn validate(&self) -> Result<()> {
        if self.u_lower > self.u_upper
            || self
                .x_lower
                .iter()
                .zip(self.x_upper.iter())
                .any(|(lo, hi)| lo > hi)
        {
            return Err(Error::ModelInput(
                "constraint lower bounds must not exceed upper bounds".into(),
            ));
        }
        Ok(())
    }

    pub fn contains_state(&self, x: &StateVec, slack: f64) -> bool {
        (0..N_STATES).all(|i| x[i] >= self.x_lower[i] - slack && x[i] <= self.x_upper[i] + slack)
    }

    pub fn contains_control(&self, u: f64, slack: f64) -> bool {
        u >= self.u_lower - slack && u <= self.u_upper + slack
    }
}

/// The uncertain parameter vector: theta_1 = 1/Y_xs - 1/Ybar_xs,
/// theta_2 = (S_i - Sbar_i) / 100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertainTheta {
    pub theta: Vector2<f64>,
}

impl UncertainTheta {
    pub fn new(theta1: f64, theta2: f64) -> Self {
        UncertainTheta {
            theta: Vector2::new(theta1, theta2),
        }
    }

    /// Map physical (yield, inlet concentration) to theta coordinates
    /// relative to the nominal parameter set.
    pub fn from_physical(yield_biomass: f64, feed_substrate: f64, nominal: &ModelParams) -> Self {
        UncertainTheta::new(
            1.0 / yield_biomass - 1.0 / nominal.yield_biomass,
            (feed_substrate - nominal.feed_substrate) / 100.0,
        )
    }

    /// Inverse of [`UncertainTheta::from_physical`].
    pub fn to_physical(&self, nominal: &ModelParams) -> (f64, f64) {
        (
            1.0 / (self.theta[0] + 1.0 / nominal.yield_biomass),
            100.0 * self.theta[1] + nominal.feed_substrate,
        )
    }

    /// Parameter set obtained by applying this estimate to the nominal model.
    pub fn apply_to(&self, nominal: &ModelParams) -> ModelParams {
        let (yield_biomass, feed_substrate) = self.to_physical(nominal);
        ModelParams {
            yield_biomass,
            feed_substrate,
            ..*nominal
        }
    }
}

/// Specific growth rate mu(S) = mu_max * S / (S + K_S + S^2/K_i).
pub fn growth_rate(substrate: f64, p: &ModelParams) -> Result<f64> {
    if substrate < 0.0 {
        return Err(Error::ModelInput(format!(
            "negative substrate concentration {substrate}"
        )));
    }
    Ok(p.mu_max * substrate / (substrate + p.k_s + substrate * substrate / p.k_i))
}

/// Right-hand side of the bioreactor ODE.
pub fn rhs(x: &State, u: Control, p: &ModelParams) -> Result<StateVec> {
    let vol = p.initial_volume + x.volume;
    if vol <= 0.0 {
        return Err(Error::ModelInput(format!("non-positive total volume {vol}")));
    }
    let mu = growth_rate(x.substrate, p)?;
    let dilution = u.0 / vol;
    let dx = mu * x.biomass - dilution * x.biomass;
    let ds = -mu * x.biomass / p.yield_biomass - p.production_rate * x.biomass / p.yield_product
        + dilution * (p.feed_substrate - x.substrate);
    let dp = p.production_rate * x.biomass - dilution * x.product;
    let dv = u.0;
    Ok(Vector4::new(dx, ds, dp, dv))
}

/// Regressor of the linearly-parameterized uncertainty:
/// psi(x,u) = (-mu(S) X, 100 u / (V + V0)).
///
/// The uncertain parameters do not enter psi, so it evaluates identically
/// under true and nominal parameter sets.
pub fn regressor_psi(x: &State, u: Control, p: &ModelParams) -> Result<Vector2<f64>> {
    let vol = p.initial_volume + x.volume;
    if vol <= 0.0 {
        return Err(Error::ModelInput(format!("non-positive total volume {vol}")));
    }
    let mu = growth_rate(x.substrate, p)?;
    Ok(Vector2::new(-mu * x.biomass, 100.0 * u.0 / vol))
}

/// Integrator tolerances shared by all propagation paths.
pub const ODE_ABS_TOL: f64 = 1e-8;
pub const ODE_REL_TOL: f64 = 1e-8;

// Dormand-Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Stage states can step slightly below zero near the substrate-depletion
/// boundary; evaluate the vector field on the clamped physical domain.
fn stage_rhs(v: &StateVec, u: Control, p: &ModelParams, dist: Option<&StateVec>) -> Result<StateVec> {
    let clamped = State::new(v[0].max(0.0), v[1].max(0.0), v[2].max(0.0), v[3]);
    let mut d = rhs(&clamped, u, p)?;
    if let Some(xi) = dist {
        d += xi;
    }
    Ok(d)
}

/// Propagate the plant ODE over `[0, dt]` under zero-order-hold control and
/// an optional piecewise-constant disturbance, with an adaptive embedded
/// Runge-Kutta 5(4) pair.
pub fn integrate_step(
    x: &State,
    u: Control,
    p: &ModelParams,
    dt: f64,
    dist: Option<&StateVec>,
) -> Result<State> {
    if !(dt > 0.0) {
        return Err(Error::Integration(format!("non-positive step {dt}")));
    }
    p.validate()?;

    let mut y = x.as_vector();
    let mut t = 0.0;
    let mut h = dt;
    let h_min = dt * 1e-12;
    let mut k = [StateVec::zeros(); 7];
    let mut n_steps = 0usize;

    while t < dt {
        if h < h_min {
            return Err(Error::Integration(format!(
                "step size underflow at t={t} (h={h})"
            )));
        }
        if n_steps > 200_000 {
            return Err(Error::Integration("step count exceeded".into()));
        }
        h = h.min(dt - t);

        for s in 0..7 {
            let mut ys = y;
            for (j, kj) in k.iter().enumerate().take(s) {
                ys += kj * (h * DP_A[s][j]);
            }
            let _ = DP_C[s];
            k[s] = stage_rhs(&ys, u, p, dist)?;
        }
        let mut y5 = y;
        let mut y4 = y;
        for s in 0..7 {
            y5 += k[s] * (h * DP_B5[s]);
            y4 += k[s] * (h * DP_B4[s]);
        }
        if !y5.iter().all(|v| v.is_finite()) {
            return Err(Error::Integration("non-finite state during integration".into()));
        }

        // Weighted RMS error against the embedded 4th-order solution.
        let mut err_sq = 0.0;
        for i in 0..N_STATES {
            let scale = ODE_ABS_TOL + ODE_REL_TOL * y[i].abs().max(y5[i].abs());
            let e = (y5[i] - y4[i]) / scale;
            err_sq += e * e;
        }
        let err = (err_sq / N_STATES as f64).sqrt();

        if err <= 1.0 {
            t += h;
            y = y5;
        }
        let factor = if err > 0.0 {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        } else {
            5.0
        };
        h *= factor;
        n_steps += 1;
    }

    let mut out = State::from_vector(&y);
    for c in [&mut out.biomass, &mut out.substrate, &mut out.product] {
        if *c < 0.0 {
            if *c < -1e-9 {
                log::warn!("integration produced negative concentration {c}; clamping to 0");
            }
            *c = 0.0;
        }
    }
    Ok(out)
}

/// The controller's one-step prediction map: one sample interval of the
/// plant ODE with zero disturbance, at nominal parameters or at parameters
/// derived from a point estimate of theta.
#[derive(Debug, Clone)]
pub struct NominalModel {
    pub nominal: ModelParams,
    /// Sample interval [h].
    pub delta: f64,
}

impl NominalModel {
    pub fn new(nominal: ModelParams, delta: f64) -> Self {
        NominalModel { nominal, delta }
    }

    pub fn propagate(&self, x: &State, u: Control, estimate: Option<&UncertainTheta>) -> Result<State> {
        let params = match estimate {
            Some(theta) => theta.apply_to(&self.nominal),
            None => self.nominal,
        };
        integrate_step(x, u, &params, self.delta, None)
    }
}
