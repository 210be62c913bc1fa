//! Online parameter estimation: set-membership box updates via linear
//! programs over a window of observations, and a projected least-mean-squares
//! point estimate.
//!
//! The one-step model is x_{n+1} = D_n theta + d_n + w_n with w_n in a known
//! box, where D_n and d_n come from the learned surrogate pair. Parameter
//! values inconsistent with an observation are cut from the box; if an
//! observation is inconsistent with *every* parameter value (disturbance
//! outside its assumed bound), the set is left unchanged and a warning is
//! logged, since shrinking on faulty data would forfeit soundness.

use nalgebra::{Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::icnn::{pack_input, DcModel};
use crate::plant::StateVec;
use crate::socp::{LinExpr, SocpBuilder, SolveOutcome};
use crate::train::DisturbanceBounds;

/// Box-shaped parameter set {theta : H theta <= h} with H = [I; -I], so
/// h = (upper_1, upper_2, -lower_1, -lower_2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub h: Vector4<f64>,
}

impl ParamSet {
    pub fn from_bounds(lower: Vector2<f64>, upper: Vector2<f64>) -> Self {
        ParamSet {
            h: Vector4::new(upper[0], upper[1], -lower[0], -lower[1]),
        }
    }

    /// Prior box used in the case study:
    /// (-0.222, -0.15) <= theta <= (0.778, 0.25).
    pub fn initial_paper() -> Self {
        ParamSet::from_bounds(Vector2::new(-0.222, -0.15), Vector2::new(0.778, 0.25))
    }

    /// Degenerate set holding a single point.
    pub fn point(theta: Vector2<f64>) -> Self {
        ParamSet::from_bounds(theta, theta)
    }

    pub fn lower(&self) -> Vector2<f64> {
        Vector2::new(-self.h[2], -self.h[3])
    }

    pub fn upper(&self) -> Vector2<f64> {
        Vector2::new(self.h[0], self.h[1])
    }

    pub fn is_empty(&self) -> bool {
        let lo = self.lower();
        let hi = self.upper();
        lo[0] > hi[0] || lo[1] > hi[1]
    }

    pub fn contains(&self, theta: &Vector2<f64>, slack: f64) -> bool {
        let lo = self.lower();
        let hi = self.upper();
        (0..2).all(|i| theta[i] >= lo[i] - slack && theta[i] <= hi[i] + slack)
    }

    pub fn is_subset_of(&self, other: &ParamSet, slack: f64) -> bool {
        (0..4).all(|i| self.h[i] <= other.h[i] + slack)
    }

    pub fn area(&self) -> f64 {
        let lo = self.lower();
        let hi = self.upper();
        (hi[0] - lo[0]).max(0.0) * (hi[1] - lo[1]).max(0.0)
    }

    /// Euclidean projection onto the box (componentwise clamp).
    pub fn project(&self, theta: &Vector2<f64>) -> Vector2<f64> {
        let lo = self.lower();
        let hi = self.upper();
        Vector2::new(theta[0].clamp(lo[0], hi[0]), theta[1].clamp(lo[1], hi[1]))
    }

    /// The four corners, in (lo,lo), (lo,hi), (hi,lo), (hi,hi) order.
    pub fn vertices(&self) -> Result<[Vector2<f64>; 4]> {
        if self.is_empty() {
            return Err(Error::EmptyParamSet);
        }
        let lo = self.lower();
        let hi = self.upper();
        Ok([
            Vector2::new(lo[0], lo[1]),
            Vector2::new(lo[0], hi[1]),
            Vector2::new(hi[0], lo[1]),
            Vector2::new(hi[0], hi[1]),
        ])
    }
}

/// Split a vertex into non-negative and non-positive parts,
/// theta = theta_plus + theta_minus.
pub fn split_vertex(theta: &Vector2<f64>) -> (Vector2<f64>, Vector2<f64>) {
    (theta.map(|v| v.max(0.0)), theta.map(|v| v.min(0.0)))
}

/// One observed transition.
#[derive(Debug, Clone, Copy)]
pub struct Observation {
    pub x: StateVec,
    pub u: f64,
    pub x_next: StateVec,
}

/// Ring buffer of the most recent observations.
#[derive(Debug, Clone)]
pub struct RegressionWindow {
    entries: std::collections::VecDeque<Observation>,
    capacity: usize,
}

impl RegressionWindow {
    pub fn new(capacity: usize) -> Self {
        RegressionWindow {
            entries: std::collections::VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, obs: Observation) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(obs);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Observation> {
        self.entries.iter()
    }
}

/// Regression matrices of the one-step model x_{n+1} = D theta + d + w:
/// D = delta * e2 (g1 - g2)^T (only the substrate row is nonzero) and
/// d = x + delta * (f1 - f2).
pub fn regression_matrices(
    dc_f: &DcModel,
    dc_g: &DcModel,
    x: &StateVec,
    u: f64,
    delta: f64,
) -> Result<(Matrix4x2<f64>, Vector4<f64>)> {
    let y = pack_input(x, u);
    let g = dc_g.dc_eval(&y)?;
    let f = dc_f.dc_eval(&y)?;
    let mut d_mat = Matrix4x2::zeros();
    d_mat[(1, 0)] = delta * g[0];
    d_mat[(1, 1)] = delta * g[1];
    let d_vec = x + Vector4::new(f[0], f[1], f[2], f[3]) * delta;
    Ok((d_mat, d_vec))
}

/// Outcome of a set-membership update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetUpdate {
    /// The LP tightened (or confirmed) the set.
    Updated,
    /// Window data was inconsistent with the disturbance bound; the set was
    /// left unchanged.
    FrozenInconsistent,
}

/// Margin added to LP maxima before intersecting with the previous bounds,
/// covering solver tolerance so soundness is not lost to rounding.
const LP_PAD: f64 = 1e-9;

/// Tighten the parameter set against a window of observations by solving one
/// LP per face of the box.
pub fn update_set(
    prev: &ParamSet,
    window: &RegressionWindow,
    w: &DisturbanceBounds,
    dc_f: &DcModel,
    dc_g: &DcModel,
    delta: f64,
) -> Result<(ParamSet, SetUpdate)> {
    if window.is_empty() {
        return Ok((*prev, SetUpdate::Updated));
    }
    if prev.is_empty() {
        return Err(Error::EmptyParamSet);
    }

    // Precompute per-observation residual data: x_next - d = D theta + w.
    // Rows other than the substrate row carry no theta information and act
    // as pure consistency checks on the disturbance bound.
    let mut halfplanes: Vec<(Vector2<f64>, f64, f64)> = Vec::new(); // (psi, lo, hi)
    for obs in window.iter() {
        let (d_mat, d_vec) = regression_matrices(dc_f, dc_g, &obs.x, obs.u, delta)?;
        let r = obs.x_next - d_vec;
        for i in [0usize, 2, 3] {
            if r[i] < w.lower[i] - 1e-12 || r[i] > w.upper[i] + 1e-12 {
                log::warn!(
                    "set-membership window inconsistent in state component {i} (residual {}); freezing parameter set",
                    r[i]
                );
                return Ok((*prev, SetUpdate::FrozenInconsistent));
            }
        }
        let psi = Vector2::new(d_mat[(1, 0)], d_mat[(1, 1)]);
        halfplanes.push((psi, r[1] - w.upper[1], r[1] - w.lower[1]));
    }

    // h_i = max H_i theta subject to theta in prev and all window halfplanes
    let rows: [Vector2<f64>; 4] = [
        Vector2::new(1.0, 0.0),
        Vector2::new(0.0, 1.0),
        Vector2::new(-1.0, 0.0),
        Vector2::new(0.0, -1.0),
    ];
    let mut h_new = prev.h;
    for (i, row) in rows.iter().enumerate() {
        let mut lp = SocpBuilder::new();
        let t1 = lp.add_var();
        let t2 = lp.add_var();
        lp.minimize_term(t1, -row[0]);
        lp.minimize_term(t2, -row[1]);
        let lo = prev.lower();
        let hi = prev.upper();
        for (idx, var) in [(0usize, t1), (1usize, t2)] {
            let mut le = LinExpr::var(var);
            le.add_constant(-hi[idx]);
            lp.add_le_zero(le);
            let mut ge = LinExpr::constant(lo[idx]);
            ge.push(var, -1.0);
            lp.add_le_zero(ge);
        }
        for (psi, lo_b, hi_b) in &halfplanes {
            // lo_b <= psi' theta <= hi_b
            let mut upper = LinExpr::term(t1, psi[0]);
            upper.push(t2, psi[1]);
            upper.add_constant(-hi_b);
            lp.add_le_zero(upper);
            let mut lower = LinExpr::constant(*lo_b);
            lower.push(t1, -psi[0]);
            lower.push(t2, -psi[1]);
            lp.add_le_zero(lower);
        }
        match lp.solve()? {
            SolveOutcome::Optimal(sol) => {
                let value = -sol.min_objective;
                h_new[i] = (value + LP_PAD).min(prev.h[i]);
            }
            SolveOutcome::Infeasible => {
                log::warn!("set-membership LP infeasible; freezing parameter set");
                return Ok((*prev, SetUpdate::FrozenInconsistent));
            }
        }
    }
    let next = ParamSet { h: h_new };
    if next.is_empty() {
        log::warn!("set-membership update produced an empty set; freezing");
        return Ok((*prev, SetUpdate::FrozenInconsistent));
    }
    Ok((next, SetUpdate::Updated))
}

/// Projected least-mean-squares point estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointEstimate {
    pub theta_hat: Vector2<f64>,
    pub gain: f64,
}

impl PointEstimate {
    pub fn new(theta_hat: Vector2<f64>, gain: f64) -> Self {
        PointEstimate { theta_hat, gain }
    }
}

/// One LMS step: gradient update on the one-step prediction error, then
/// Euclidean projection onto the current parameter set.
pub fn lms_update(
    est: &PointEstimate,
    d_mat: &Matrix4x2<f64>,
    d_vec: &Vector4<f64>,
    x_next: &StateVec,
    set_next: &ParamSet,
) -> PointEstimate {
    let predicted = d_mat * est.theta_hat + d_vec;
    let innovation = x_next - predicted;
    let raw = est.theta_hat + d_mat.transpose() * innovation * est.gain;
    PointEstimate {
        theta_hat: set_next.project(&raw),
        gain: est.gain,
    }
}

/// Upper cap applied when the sampled regressor is degenerate.
pub const GAIN_CAP: f64 = 1e3;

/// Sample the regressor over the operating box and return a gain satisfying
/// 1/gain > ||D(x,u)||^2 with a factor-2 safety margin.
pub fn compute_gain_bound(
    dc_g: &DcModel,
    sampling_box: &crate::icnn::SamplingBox,
    n_samples: usize,
    delta: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = crate::rng::stream(seed, crate::rng::Stream::GainBound);
    let mut max_sq: f64 = 0.0;
    for _ in 0..n_samples.max(1) {
        let y = sampling_box.sample(&mut rng);
        let g = dc_g.dc_eval(&y)?;
        // D = delta e2 g^T is rank one, so ||D||^2 = delta^2 ||g||^2
        let norm_sq = delta * delta * (g[0] * g[0] + g[1] * g[1]);
        max_sq = max_sq.max(norm_sq);
    }
    if max_sq <= 0.0 {
        return Ok(GAIN_CAP);
    }
    Ok((1.0 / (2.0 * max_sq)).min(GAIN_CAP))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::icnn::{IcnnLayer, IcnnParams, SamplingBox, TrainingMeta};
    use nalgebra::{DMatrix, DVector};

    /// DC pair whose difference is a constant vector.
    fn constant_pair(value: &[f64], input_dim: usize) -> DcModel {
        let n_out = value.len();
        let make = |bias: DVector<f64>| {
            IcnnParams::with_identity_scaling(
                input_dim,
                n_out,
                vec![IcnnLayer {
                    kernel: None,
                    passthrough: DMatrix::zeros(2, input_dim),
                    bias: DVector::zeros(2),
                }],
                IcnnLayer {
                    kernel: Some(DMatrix::zeros(n_out, 2)),
                    passthrough: DMatrix::zeros(n_out, input_dim),
                    bias,
                },
            )
        };
        DcModel {
            f1: make(DVector::from_column_slice(value)),
            f2: make(DVector::zeros(n_out)),
            sampling_box: SamplingBox::new(
                DVector::from_element(input_dim, 0.0),
                DVector::from_element(input_dim, 1.0),
            )
            .unwrap(),
            meta: TrainingMeta {
                seed: 0,
                epochs: 0,
                samples: 0,
                train_mae: 0.0,
                val_mae: 0.0,
            },
        }
    }

    fn zero_f_model() -> DcModel {
        constant_pair(&[0.0, 0.0, 0.0, 0.0], 5)
    }

    #[test]
    fn initial_set_vertices_match_prior_bounds() {
        let set = ParamSet::initial_paper();
        let v = set.vertices().unwrap();
        assert_eq!(v[0], Vector2::new(-0.222, -0.15));
        assert_eq!(v[1], Vector2::new(-0.222, 0.25));
        assert_eq!(v[2], Vector2::new(0.778, -0.15));
        assert_eq!(v[3], Vector2::new(0.778, 0.25));
        for vert in v {
            let (p, m) = split_vertex(&vert);
            assert_eq!(p + m, vert);
            assert!(p.iter().all(|x| *x >= 0.0));
            assert!(m.iter().all(|x| *x <= 0.0));
        }
    }

    #[test]
    fn point_set_has_identical_vertices() {
        let theta = Vector2::new(0.3, -0.05);
        let set = ParamSet::point(theta);
        let v = set.vertices().unwrap();
        assert!(v.iter().all(|x| *x == theta));
        assert_eq!(set.area(), 0.0);
    }

    #[test]
    fn empty_set_rejects_vertices() {
        let set = ParamSet::from_bounds(Vector2::new(0.5, 0.0), Vector2::new(0.0, 1.0));
        assert!(set.is_empty());
        assert!(set.vertices().is_err());
    }

    #[test]
    fn regression_rows_other_than_substrate_are_zero() {
        let dc_f = zero_f_model();
        let dc_g = constant_pair(&[0.5, -0.25], 5);
        let x = Vector4::new(1.0, 0.4, 0.1, 0.2);
        let (d_mat, d_vec) = regression_matrices(&dc_f, &dc_g, &x, 0.1, 1.0).unwrap();
        for i in [0usize, 2, 3] {
            assert_eq!(d_mat[(i, 0)], 0.0);
            assert_eq!(d_mat[(i, 1)], 0.0);
        }
        assert_eq!(d_mat[(1, 0)], 0.5);
        assert_eq!(d_mat[(1, 1)], -0.25);
        // d = x + delta * dc_f = x here
        assert_eq!(d_vec, x);
    }

    #[test]
    fn uninformative_window_leaves_set_unchanged() {
        // g1 == g2 makes D vanish; residuals inside W keep the data
        // consistent, so the LP reproduces the previous box exactly
        let dc_f = zero_f_model();
        let dc_g = constant_pair(&[0.0, 0.0], 5);
        let prev = ParamSet::initial_paper();
        let mut window = RegressionWindow::new(10);
        let x = Vector4::new(1.0, 0.4, 0.0, 0.0);
        window.push(Observation {
            x,
            u: 0.05,
            x_next: x,
        });
        let w = DisturbanceBounds::paper_floor();
        let (next, status) = update_set(&prev, &window, &w, &dc_f, &dc_g, 1.0).unwrap();
        assert_eq!(status, SetUpdate::Updated);
        assert_eq!(next.h, prev.h);
    }

    #[test]
    fn synthetic_observation_pins_first_parameter() {
        // D row = (1, 0), w = 0: theta_1 is identified exactly
        let dc_f = zero_f_model();
        let dc_g = constant_pair(&[1.0, 0.0], 5);
        let prev = ParamSet::initial_paper();
        let mut window = RegressionWindow::new(10);
        let x = Vector4::new(1.0, 0.4, 0.0, 0.0);
        let theta_true = 0.3;
        let mut x_next = x;
        x_next[1] += theta_true; // x_next = d + D (0.3, 0)
        window.push(Observation { x, u: 0.0, x_next });
        let w = DisturbanceBounds::zero();
        let (next, status) = update_set(&prev, &window, &w, &dc_f, &dc_g, 1.0).unwrap();
        assert_eq!(status, SetUpdate::Updated);
        assert!((next.upper()[0] - theta_true).abs() < 1e-6);
        assert!((next.lower()[0] - theta_true).abs() < 1e-6);
        // the second coordinate is untouched
        assert!((next.upper()[1] - prev.upper()[1]).abs() < 1e-9);
        assert!((next.lower()[1] - prev.lower()[1]).abs() < 1e-9);
    }

    #[test]
    fn inconsistent_window_freezes_set() {
        // residual in a theta-free row far outside W
        let dc_f = zero_f_model();
        let dc_g = constant_pair(&[1.0, 0.0], 5);
        let prev = ParamSet::initial_paper();
        let mut window = RegressionWindow::new(10);
        let x = Vector4::new(1.0, 0.4, 0.0, 0.0);
        let mut x_next = x;
        x_next[0] += 0.5; // biomass residual 0.5 >> w bound
        window.push(Observation { x, u: 0.0, x_next });
        let w = DisturbanceBounds::paper_floor();
        let (next, status) = update_set(&prev, &window, &w, &dc_f, &dc_g, 1.0).unwrap();
        assert_eq!(status, SetUpdate::FrozenInconsistent);
        assert_eq!(next.h, prev.h);
    }

    #[test]
    fn updates_are_monotone() {
        let dc_f = zero_f_model();
        let dc_g = constant_pair(&[0.8, 0.3], 5);
        let theta_star = Vector2::new(0.278, 0.05);
        let mut set = ParamSet::initial_paper();
        let mut window = RegressionWindow::new(5);
        let w = DisturbanceBounds::paper_floor();
        let mut rng = crate::rng::stream(4, crate::rng::Stream::MonteCarlo);
        for _ in 0..20 {
            let x = Vector4::new(
                crate::rng::uniform(&mut rng, 0.5, 3.0),
                crate::rng::uniform(&mut rng, 0.0, 1.0),
                0.0,
                0.0,
            );
            let psi = Vector2::new(0.8, 0.3);
            let noise = crate::rng::uniform(&mut rng, -5e-4, 5e-4);
            let mut x_next = x;
            x_next[1] += psi.dot(&theta_star) + noise;
            window.push(Observation { x, u: 0.0, x_next });
            let prev = set;
            let (next, _) = update_set(&prev, &window, &w, &dc_f, &dc_g, 1.0).unwrap();
            for i in 0..4 {
                assert!(next.h[i] <= prev.h[i] + 1e-12, "h grew at row {i}");
            }
            assert!(next.contains(&theta_star, 1e-9), "true value cut from the set");
            set = next;
        }
        // the informative direction psi pins psi' theta; the set shrinks
        assert!(set.area() < ParamSet::initial_paper().area());
    }

    #[test]
    fn lms_zero_innovation_is_fixed_point() {
        let est = PointEstimate::new(Vector2::new(0.1, 0.05), 10.0);
        let mut d_mat = Matrix4x2::zeros();
        d_mat[(1, 0)] = 0.4;
        d_mat[(1, 1)] = 0.2;
        let d_vec = Vector4::new(1.0, 0.5, 0.2, 0.1);
        let x_next = d_mat * est.theta_hat + d_vec;
        let set = ParamSet::initial_paper();
        let next = lms_update(&est, &d_mat, &d_vec, &x_next, &set);
        assert_eq!(next.theta_hat, est.theta_hat);
    }

    #[test]
    fn lms_converges_on_noiseless_persistent_excitation() {
        let theta_star = Vector2::new(0.278, 0.05);
        let set = ParamSet::initial_paper();
        let mut rng = crate::rng::stream(9, crate::rng::Stream::MonteCarlo);
        // gain from the sampled supremum of ||D||^2 over the draws used
        let mut max_sq: f64 = 0.0;
        let mut psis = Vec::new();
        for _ in 0..200 {
            let psi = Vector2::new(
                crate::rng::uniform(&mut rng, -0.1, 0.1),
                crate::rng::uniform(&mut rng, 0.0, 0.2),
            );
            max_sq = max_sq.max(psi.norm_squared());
            psis.push(psi);
        }
        let mut est = PointEstimate::new(Vector2::new(0.0, 0.0), 1.0 / (2.0 * max_sq));
        let mut err_prev = (est.theta_hat - theta_star).norm();
        for psi in &psis {
            let mut d_mat = Matrix4x2::zeros();
            d_mat[(1, 0)] = psi[0];
            d_mat[(1, 1)] = psi[1];
            let d_vec = Vector4::new(0.0, 0.1, 0.0, 0.0);
            let x_next = d_mat * theta_star + d_vec;
            est = lms_update(&est, &d_mat, &d_vec, &x_next, &set);
            let err = (est.theta_hat - theta_star).norm();
            assert!(err <= err_prev + 1e-12, "noiseless LMS error grew: {err_prev} -> {err}");
            err_prev = err;
        }
        assert!(err_prev < 0.01, "final error {err_prev}");
    }

    #[test]
    fn lms_projects_outside_seed_into_set() {
        let set = ParamSet::initial_paper();
        let est = PointEstimate::new(Vector2::new(5.0, -3.0), 1.0);
        let next = lms_update(&est, &Matrix4x2::zeros(), &Vector4::zeros(), &Vector4::zeros(), &set);
        assert_eq!(next.theta_hat, Vector2::new(0.778, -0.15));
    }

    #[test]
    fn gain_bound_caps_degenerate_regressor() {
        let dc_g = constant_pair(&[0.0, 0.0], 5);
        let sampling_box = crate::train::constraint_box();
        let gain = compute_gain_bound(&dc_g, &sampling_box, 100, 1.0, 1).unwrap();
        assert_eq!(gain, GAIN_CAP);
    }

    #[test]
    fn gain_bound_satisfies_margin_on_holdout() {
        let dc_g = constant_pair(&[0.4, -0.2], 5);
        let sampling_box = crate::train::constraint_box();
        let gain = compute_gain_bound(&dc_g, &sampling_box, 1000, 1.0, 2).unwrap();
        // fresh sample set
        let mut rng = crate::rng::stream(77, crate::rng::Stream::MonteCarlo);
        let mut max_sq: f64 = 0.0;
        for _ in 0..1000 {
            let y = sampling_box.sample(&mut rng);
            let g = dc_g.dc_eval(&y).unwrap();
            max_sq = max_sq.max(g.norm_squared());
        }
        assert!(gain * max_sq <= 0.5 + 1e-12);
    }

    #[test]
    fn gain_bound_monotone_under_box_shrinkage() {
        // constant regressor: any sub-box gives the same supremum, and a
        // genuinely varying one cannot have a larger supremum on a sub-box
        let dc_g = constant_pair(&[0.4, -0.2], 5);
        let full = crate::train::constraint_box();
        let half = SamplingBox::new(full.lower.clone(), &full.lower + (&full.upper - &full.lower) * 0.5).unwrap();
        let g_full = compute_gain_bound(&dc_g, &full, 500, 1.0, 3).unwrap();
        let g_half = compute_gain_bound(&dc_g, &half, 500, 1.0, 3).unwrap();
        assert!(g_half >= g_full - 1e-12);
    }

    #[test]
    fn window_ring_buffer_evicts_oldest() {
        let mut w = RegressionWindow::new(2);
        let mk = |v: f64| Observation {
            x: Vector4::new(v, 0.0, 0.0, 0.0),
            u: 0.0,
            x_next: Vector4::zeros(),
        };
        w.push(mk(1.0));
        w.push(mk(2.0));
        w.push(mk(3.0));
        assert_eq!(w.len(), 2);
        let xs: Vec<f64> = w.iter().map(|o| o.x[0]).collect();
        assert_eq!(xs, vec![2.0, 3.0]);
    }
}
