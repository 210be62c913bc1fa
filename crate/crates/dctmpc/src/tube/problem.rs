//! Assembly and solution of the convex tube-MPC problem.
//!
//! Decision variables: feedforward corrections c_k, simplex parameters
//! (alpha_k, beta_k), product lower bounds l_{x,k}, smoothing epigraphs
//! l_{u,k}, and one set of layer epigraph variables per network evaluation
//! at a decision-dependent point. Network values enter every constraint with
//! a sign for which an over-estimate is conservative, so the layerwise
//! relaxation z >= pre-activation, z >= 0 is valid; after the solve, the
//! epigraph variables are tightened onto the exact activations (which keeps
//! every constraint satisfied and the objective unchanged) and the tightened
//! point is re-verified against all rows.

use nalgebra::{DVector, Vector2};

use crate::error::{Error, Result};
use crate::icnn::{DcModel, IcnnParams};
use crate::lqr::GainSchedule;
use crate::plant::{StateVec, N_STATES};
use crate::socp::{LinExpr, SocpBuilder, SolveOutcome};
use crate::train::DisturbanceBounds;
use crate::estimate::{split_vertex, ParamSet};

use super::controller::NominalTrajectory;
use super::{MpcConfig, SimplexTube, StepLinearization};

/// Row/variable counts per constraint family, for size diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProblemCounts {
    pub alpha_recursion_rows: usize,
    pub beta_recursion_rows: usize,
    pub state_box_rows: usize,
    pub control_box_rows: usize,
    pub product_bound_rows: usize,
    pub terminal_state_rows: usize,
    pub terminal_feedforward_eqs: usize,
    pub initial_rows: usize,
    pub smoothing_cones: usize,
    pub epigraph_rows: usize,
    pub epigraph_vars: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NetRole {
    F1,
    F2,
    G1,
    G2,
}

struct EpigraphInstance {
    role: NetRole,
    input_exprs: Vec<LinExpr>,
    layer_vars: Vec<std::ops::Range<usize>>,
    out_exprs: Vec<LinExpr>,
}

/// A fully assembled convex problem instance.
pub struct TubeProblem {
    builder: SocpBuilder,
    horizon: usize,
    gamma: f64,
    c_vars: Vec<usize>,
    alpha_vars: Vec<[usize; N_STATES]>,
    beta_vars: Vec<usize>,
    lx_vars: Vec<usize>,
    lu_vars: Vec<usize>,
    instances: Vec<EpigraphInstance>,
    dc_f: DcModel,
    dc_g: Option<DcModel>,
    pub counts: ProblemCounts,
    /// Inequality-row families for infeasibility diagnostics.
    row_map: Vec<(String, std::ops::Range<usize>)>,
}

/// Solution of a tube problem (maximization objective).
#[derive(Debug, Clone)]
pub struct TubeSolution {
    /// sum_k (l_{x,k} - gamma l_{u,k}) at the optimum.
    pub cost: f64,
    pub c: Vec<f64>,
    pub tube: SimplexTube,
    pub lx: Vec<f64>,
    pub lu: Vec<f64>,
    /// Worst gap between pre-tightening epigraph outputs and re-evaluated
    /// network outputs.
    pub epigraph_gap: f64,
    /// Worst constraint violation of the tightened solution.
    pub feasibility_violation: f64,
}

#[derive(Debug, Clone)]
pub enum TubeOutcome {
    Feasible(TubeSolution),
    Infeasible,
}

/// Inputs to problem construction at one sample instant.
pub struct ProblemInputs<'a> {
    pub traj: &'a NominalTrajectory,
    pub gains: &'a GainSchedule,
    pub lins: &'a [StepLinearization],
    pub w: &'a DisturbanceBounds,
    /// Parameter set for the robust variant; `None` builds the nominal
    /// problem without regressor terms.
    pub theta_set: Option<&'a ParamSet>,
    pub x_now: StateVec,
    pub u_prev: f64,
}

/// Encode one network evaluation at an affine input point.
fn encode_network(
    builder: &mut SocpBuilder,
    net: &IcnnParams,
    y_exprs: &[LinExpr],
    nudge: f64,
    counts: &mut ProblemCounts,
) -> (Vec<std::ops::Range<usize>>, Vec<LinExpr>) {
    // scaled input expressions
    let ys: Vec<LinExpr> = (0..net.input_dim)
        .map(|i| {
            let mut e = LinExpr::constant(net.scale_b[i]);
            e.add(&y_exprs[i], net.scale_w[i]);
            e
        })
        .collect();

    let mut layer_vars: Vec<std::ops::Range<usize>> = Vec::with_capacity(net.hidden.len());
    for layer in &net.hidden {
        let n = layer.output_dim();
        let vars = builder.add_vars(n);
        for r in 0..n {
            let mut pre = LinExpr::constant(layer.bias[r]);
            for c in 0..net.input_dim {
                pre.add(&ys[c], layer.passthrough[(r, c)]);
            }
            if let (Some(kernel), Some(prev)) = (&layer.kernel, layer_vars.last()) {
                for (p, var) in prev.clone().enumerate() {
                    pre.push(var, kernel[(r, p)]);
                }
            }
            let z = vars.start + r;
            // z >= pre-activation and z >= 0
            let mut row = pre;
            row.push(z, -1.0);
            builder.add_le_zero(row);
            builder.add_le_zero(LinExpr::term(z, -1.0));
            builder.minimize_term(z, nudge);
            counts.epigraph_rows += 2;
        }
        counts.epigraph_vars += n;
        layer_vars.push(vars);
    }
    let last = layer_vars.last().cloned().expect("at least one hidden layer");
    let out_exprs: Vec<LinExpr> = (0..net.output_dim)
        .map(|r| {
            let mut e = LinExpr::constant(net.output.bias[r]);
            for c in 0..net.input_dim {
                e.add(&ys[c], net.output.passthrough[(r, c)]);
            }
            if let Some(kernel) = &net.output.kernel {
                for (p, var) in last.clone().enumerate() {
                    e.push(var, kernel[(r, p)]);
                }
            }
            e
        })
        .collect();
    (layer_vars, out_exprs)
}

/// Build the convex problem (nominal variant when `theta_set` is absent,
/// robust vertex-enumerated variant otherwise).
pub fn build_problem(inputs: &ProblemInputs, dc_f: &DcModel, dc_g: Option<&DcModel>, cfg: &MpcConfig) -> Result<TubeProblem> {
    cfg.validate()?;
    let n = cfg.horizon;
    let delta = cfg.delta;
    if inputs.traj.controls.len() != n + 1 || inputs.traj.states.len() != n + 2 {
        return Err(Error::ProblemBuild(format!(
            "trajectory lengths ({}, {}) do not match horizon {}",
            inputs.traj.states.len(),
            inputs.traj.controls.len(),
            n
        )));
    }
    if inputs.gains.len() != n + 1 || inputs.lins.len() != n + 1 {
        return Err(Error::ProblemBuild("gain/linearization length mismatch".into()));
    }
    let robust = inputs.theta_set.is_some();
    if robust && dc_g.is_none() {
        return Err(Error::ProblemBuild("robust variant requires the regressor pair".into()));
    }
    let theta_vertices = match inputs.theta_set {
        Some(set) => set.vertices()?.to_vec(),
        None => Vec::new(),
    };
    let theta_hat = inputs
        .traj
        .estimate
        .map(|e| e.theta)
        .unwrap_or_else(|| Vector2::zeros());

    let mut builder = SocpBuilder::new();
    let mut counts = ProblemCounts::default();
    let mut row_map: Vec<(String, std::ops::Range<usize>)> = Vec::new();
    let mut mark = 0usize;

    let c_vars: Vec<usize> = (0..=n).map(|_| builder.add_var()).collect();
    let alpha_vars: Vec<[usize; N_STATES]> = (0..=n)
        .map(|_| {
            let r = builder.add_vars(N_STATES);
            [r.start, r.start + 1, r.start + 2, r.start + 3]
        })
        .collect();
    let beta_vars: Vec<usize> = (0..=n).map(|_| builder.add_var()).collect();
    let lx_vars: Vec<usize> = (0..=n).map(|_| builder.add_var()).collect();
    let lu_vars: Vec<usize> = (0..=n).map(|_| builder.add_var()).collect();

    // objective: maximize sum(lx - gamma lu)
    for k in 0..=n {
        builder.minimize_term(lx_vars[k], -1.0);
        builder.minimize_term(lu_vars[k], cfg.gamma);
    }

    // vertex expressions s_k^j and the control at each vertex
    let vertex_s = |k: usize, j: usize| -> [LinExpr; N_STATES] {
        let mut s: [LinExpr; N_STATES] = std::array::from_fn(|i| LinExpr::term(alpha_vars[k][i], -1.0));
        if j >= 1 {
            let i = j - 1;
            s[i].push(beta_vars[k], 1.0);
            for m in 0..N_STATES {
                if m != i {
                    // -alpha_i + beta + sum alpha: the alpha_i terms cancel
                    s[i].push(alpha_vars[k][m], 1.0);
                }
            }
            // cancel the -alpha_i with +alpha_i from the spread
            s[i].push(alpha_vars[k][i], 1.0);
        }
        s
    };
    let vertex_u = |k: usize, s: &[LinExpr; N_STATES]| -> LinExpr {
        let mut u = LinExpr::constant(inputs.traj.controls[k]);
        u.push(c_vars[k], 1.0);
        let gain = &inputs.gains.gains[k];
        for i in 0..N_STATES {
            u.add(&s[i], gain[i]);
        }
        u
    };

    let n_vertices = N_STATES + 1;
    let mut s_exprs: Vec<Vec<[LinExpr; N_STATES]>> = Vec::with_capacity(n + 1);
    let mut u_exprs: Vec<Vec<LinExpr>> = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let mut sk = Vec::with_capacity(n_vertices);
        let mut uk = Vec::with_capacity(n_vertices);
        for j in 0..n_vertices {
            let s = vertex_s(k, j);
            let u = vertex_u(k, &s);
            sk.push(s);
            uk.push(u);
        }
        s_exprs.push(sk);
        u_exprs.push(uk);
    }

    // epigraph instances at recursion points k = 0..N-1
    // indexing: instance_idx[k][j] -> (f1, f2, optional g1, g2)
    let mut instances: Vec<EpigraphInstance> = Vec::new();
    let mut instance_of = vec![vec![[usize::MAX; 4]; n_vertices]; n];
    for k in 0..n {
        for j in 0..n_vertices {
            let mut y_exprs: Vec<LinExpr> = Vec::with_capacity(N_STATES + 1);
            for i in 0..N_STATES {
                let mut e = LinExpr::constant(inputs.traj.states[k].as_vector()[i]);
                e.add(&s_exprs[k][j][i], 1.0);
                y_exprs.push(e);
            }
            y_exprs.push(u_exprs[k][j].clone());

            let mut encode = |role: NetRole, net: &IcnnParams, builder: &mut SocpBuilder, counts: &mut ProblemCounts| {
                let (layer_vars, out_exprs) =
                    encode_network(builder, net, &y_exprs, cfg.epigraph_nudge, counts);
                instances.push(EpigraphInstance {
                    role,
                    input_exprs: y_exprs.clone(),
                    layer_vars,
                    out_exprs,
                });
                instances.len() - 1
            };
            let f1_idx = encode(NetRole::F1, &dc_f.f1, &mut builder, &mut counts);
            let f2_idx = encode(NetRole::F2, &dc_f.f2, &mut builder, &mut counts);
            let (g1_idx, g2_idx) = if robust {
                let g = dc_g.expect("checked above");
                (
                    encode(NetRole::G1, &g.f1, &mut builder, &mut counts),
                    encode(NetRole::G2, &g.f2, &mut builder, &mut counts),
                )
            } else {
                (usize::MAX, usize::MAX)
            };
            instance_of[k][j] = [f1_idx, f2_idx, g1_idx, g2_idx];
        }
    }

    row_map.push(("epigraph".into(), mark..builder.n_ineq_rows()));
    mark = builder.n_ineq_rows();

    // initial tube: alpha_0 >= x0 - x(t), beta_0 >= 1'(x(t) - x0)
    let x0 = inputs.traj.states[0].as_vector();
    for i in 0..N_STATES {
        let mut row = LinExpr::constant(x0[i] - inputs.x_now[i]);
        row.push(alpha_vars[0][i], -1.0);
        builder.add_le_zero(row);
        counts.initial_rows += 1;
    }
    {
        let mut row = LinExpr::constant((inputs.x_now - x0).sum());
        row.push(beta_vars[0], -1.0);
        builder.add_le_zero(row);
        counts.initial_rows += 1;
    }

    // cross-sections must stay non-empty: beta_k + 1'alpha_k >= 0
    for k in 0..=n {
        let mut row = LinExpr::term(beta_vars[k], -1.0);
        for i in 0..N_STATES {
            row.push(alpha_vars[k][i], -1.0);
        }
        builder.add_le_zero(row);
    }

    row_map.push(("initial+nonempty".into(), mark..builder.n_ineq_rows()));
    mark = builder.n_ineq_rows();

    // state/control boxes and product bound at every vertex, k = 0..N
    let boxes = &cfg.constraints;
    for k in 0..=n {
        let xk = inputs.traj.states[k].as_vector();
        for j in 0..n_vertices {
            for i in 0..N_STATES {
                // x lower (vertex bound, relaxed where the plant saturates)
                let mut lo = LinExpr::constant(boxes.x_lower[i] - cfg.state_floor_relax[i] - xk[i]);
                lo.add(&s_exprs[k][j][i], -1.0);
                builder.add_le_zero(lo);
                // x upper
                let mut hi = LinExpr::constant(xk[i] - boxes.x_upper[i]);
                hi.add(&s_exprs[k][j][i], 1.0);
                builder.add_le_zero(hi);
                counts.state_box_rows += 2;
            }
            // u box
            let mut lo = LinExpr::constant(boxes.u_lower);
            lo.add(&u_exprs[k][j], -1.0);
            builder.add_le_zero(lo);
            let mut hi = u_exprs[k][j].clone();
            hi.add_constant(-boxes.u_upper);
            builder.add_le_zero(hi);
            counts.control_box_rows += 2;

            // product lower bound: lx_k <= e3' (x_k + s_k^j)
            let mut row = LinExpr::term(lx_vars[k], 1.0);
            row.add_constant(-xk[2]);
            row.add(&s_exprs[k][j][2], -1.0);
            builder.add_le_zero(row);
            counts.product_bound_rows += 1;
        }
    }

    row_map.push(("boxes+product".into(), mark..builder.n_ineq_rows()));
    mark = builder.n_ineq_rows();

    // control smoothing cones: lu_0 against the previously applied input,
    // lu_{k+1} against consecutive vertex controls
    for j in 0..n_vertices {
        let mut du = u_exprs[0][j].clone();
        du.add_constant(-inputs.u_prev);
        builder.add_square_le(du, LinExpr::var(lu_vars[0]));
        counts.smoothing_cones += 1;
    }
    for k in 0..n {
        for j in 0..n_vertices {
            let mut du = u_exprs[k + 1][j].clone();
            du.add(&u_exprs[k][j], -1.0);
            builder.add_square_le(du, LinExpr::var(lu_vars[k + 1]));
            counts.smoothing_cones += 1;
        }
    }

    row_map.push(("smoothing".into(), mark..builder.n_ineq_rows()));
    mark = builder.n_ineq_rows();

    // tube recursion
    let w_min = inputs.w.w_min();
    let w_max = inputs.w.w_max_sum();
    for k in 0..n {
        let lin = &inputs.lins[k];
        let gain = &inputs.gains.gains[k];
        let xk = inputs.traj.states[k].as_vector();
        let xk1 = inputs.traj.states[k + 1].as_vector();

        // F_i = delta (A_i + B_i K), delta B_i
        let mut f1_lin = [[0.0; N_STATES]; N_STATES];
        let mut f2_lin = [[0.0; N_STATES]; N_STATES];
        let mut b1 = [0.0; N_STATES];
        let mut b2 = [0.0; N_STATES];
        for r in 0..N_STATES {
            for c in 0..N_STATES {
                f1_lin[r][c] = delta * (lin.f1.a[(r, c)] + lin.f1.b[(r, 0)] * gain[c]);
                f2_lin[r][c] = delta * (lin.f2.a[(r, c)] + lin.f2.b[(r, 0)] * gain[c]);
            }
            b1[r] = delta * lin.f1.b[(r, 0)];
            b2[r] = delta * lin.f2.b[(r, 0)];
        }
        let f1_0 = &lin.f1.value;
        let f2_0 = &lin.f2.value;

        // known defect of the stored nominal propagation relative to the
        // discrete surrogate recursion; subtracting it keeps tube containment
        // exact for the surrogate dynamics
        let mut defect = StateVec::zeros();
        for i in 0..N_STATES {
            defect[i] = xk1[i] - xk[i] - delta * (f1_0[i] - f2_0[i]);
        }
        let (g_lin, g_hat0) = if robust {
            let g1 = lin.g1.as_ref().expect("robust linearization");
            let g2 = lin.g2.as_ref().expect("robust linearization");
            let mut g1_lin = [[0.0; N_STATES]; 2];
            let mut g2_lin = [[0.0; N_STATES]; 2];
            let mut bg1 = [0.0; 2];
            let mut bg2 = [0.0; 2];
            for r in 0..2 {
                for c in 0..N_STATES {
                    g1_lin[r][c] = delta * (g1.a[(r, c)] + g1.b[(r, 0)] * gain[c]);
                    g2_lin[r][c] = delta * (g2.a[(r, c)] + g2.b[(r, 0)] * gain[c]);
                }
                bg1[r] = delta * g1.b[(r, 0)];
                bg2[r] = delta * g2.b[(r, 0)];
            }
            let g_hat0 = Vector2::new(g1.value[0] - g2.value[0], g1.value[1] - g2.value[1]);
            defect[1] -= delta * g_hat0.dot(&theta_hat);
            let g_hat0 = if cfg.exact_theta_mismatch { g_hat0 } else { Vector2::zeros() };
            (Some((g1_lin, g2_lin, bg1, bg2, g1.value.clone(), g2.value.clone())), g_hat0)
        } else {
            (None, Vector2::zeros())
        };

        for j in 0..n_vertices {
            let s = &s_exprs[k][j];
            let [f1_idx, f2_idx, g1_idx, g2_idx] = instance_of[k][j];
            let f1_out = &instances[f1_idx].out_exprs;
            let f2_out = &instances[f2_idx].out_exprs;

            // theta-independent parts, shared across parameter vertices
            let mut alpha_base: Vec<LinExpr> = Vec::with_capacity(N_STATES);
            for i in 0..N_STATES {
                // -s_i - (F1 s)_i - dB1_i c + d(f2_out_i - f2_0_i) - d w_min_i + defect_i
                let mut row = LinExpr::constant(
                    -delta * f2_0[i] - delta * w_min[i] + defect[i],
                );
                row.add(&s[i], -1.0);
                for c in 0..N_STATES {
                    row.add(&s[c], -f1_lin[i][c]);
                }
                row.push(c_vars[k], -b1[i]);
                row.add(&f2_out[i], delta);
                alpha_base.push(row);
            }
            let mut beta_base = LinExpr::constant(delta * w_max - defect.sum());
            for i in 0..N_STATES {
                beta_base.add(&s[i], 1.0);
                for c in 0..N_STATES {
                    beta_base.add(&s[c], -f2_lin[i][c]);
                }
                beta_base.push(c_vars[k], -b2[i]);
                beta_base.add(&f1_out[i], delta);
                beta_base.add_constant(-delta * f1_0[i]);
            }

            if let Some((g1_lin, g2_lin, bg1, bg2, g1_0, g2_0)) = &g_lin {
                let g1_out = instances[g1_idx].out_exprs.clone();
                let g2_out = instances[g2_idx].out_exprs.clone();
                for theta_m in &theta_vertices {
                    let (tp, tm) = split_vertex(theta_m);
                    let mismatch = delta * g_hat0.dot(&(theta_m - theta_hat));

                    // alpha row gets theta terms only in the substrate component
                    let mut theta_alpha = LinExpr::constant(-mismatch);
                    let mut theta_beta = LinExpr::constant(mismatch);
                    for r in 0..2 {
                        // + d tp' (g2(point) - g2_0) - tp' (G1 s + d Bg1 c)
                        theta_alpha.add(&g2_out[r], delta * tp[r]);
                        theta_alpha.add_constant(-delta * tp[r] * g2_0[r]);
                        for c in 0..N_STATES {
                            theta_alpha.add(&s[c], -tp[r] * g1_lin[r][c]);
                        }
                        theta_alpha.push(c_vars[k], -tp[r] * bg1[r]);
                        // - d tm' (g1(point) - g1_0) + tm' (G2 s + d Bg2 c)
                        theta_alpha.add(&g1_out[r], -delta * tm[r]);
                        theta_alpha.add_constant(delta * tm[r] * g1_0[r]);
                        for c in 0..N_STATES {
                            theta_alpha.add(&s[c], tm[r] * g2_lin[r][c]);
                        }
                        theta_alpha.push(c_vars[k], tm[r] * bg2[r]);

                        // + d tp' (g1(point) - g1_0) - tp' (G2 s + d Bg2 c)
                        theta_beta.add(&g1_out[r], delta * tp[r]);
                        theta_beta.add_constant(-delta * tp[r] * g1_0[r]);
                        for c in 0..N_STATES {
                            theta_beta.add(&s[c], -tp[r] * g2_lin[r][c]);
                        }
                        theta_beta.push(c_vars[k], -tp[r] * bg2[r]);
                        // - d tm' (g2(point) - g2_0) + tm' (G1 s + d Bg1 c)
                        theta_beta.add(&g2_out[r], -delta * tm[r]);
                        theta_beta.add_constant(delta * tm[r] * g2_0[r]);
                        for c in 0..N_STATES {
                            theta_beta.add(&s[c], tm[r] * g1_lin[r][c]);
                        }
                        theta_beta.push(c_vars[k], tm[r] * bg1[r]);
                    }

                    for i in 0..N_STATES {
                        let mut row = alpha_base[i].clone();
                        if i == 1 {
                            row.add(&theta_alpha, 1.0);
                        }
                        row.push(alpha_vars[k + 1][i], -1.0);
                        builder.add_le_zero(row);
                        counts.alpha_recursion_rows += 1;
                    }
                    let mut row = beta_base.clone();
                    row.add(&theta_beta, 1.0);
                    row.push(beta_vars[k + 1], -1.0);
                    builder.add_le_zero(row);
                    counts.beta_recursion_rows += 1;
                }
            } else {
                for i in 0..N_STATES {
                    let mut row = alpha_base[i].clone();
                    row.push(alpha_vars[k + 1][i], -1.0);
                    builder.add_le_zero(row);
                    counts.alpha_recursion_rows += 1;
                }
                let mut row = beta_base;
                row.push(beta_vars[k + 1], -1.0);
                builder.add_le_zero(row);
                counts.beta_recursion_rows += 1;
            }
        }
    }

    row_map.push(("recursion".into(), mark..builder.n_ineq_rows()));
    mark = builder.n_ineq_rows();

    // terminal constraints: c_{N-k} = 0 and x_{N-k} + s^j <= x_term
    for back in 0..=cfg.n_term {
        let k = n - back;
        builder.add_eq(LinExpr::var(c_vars[k]));
        counts.terminal_feedforward_eqs += 1;
        let xk = inputs.traj.states[k].as_vector();
        for j in 0..n_vertices {
            for i in 0..N_STATES {
                let mut row = LinExpr::constant(xk[i] - cfg.x_term[i]);
                row.add(&s_exprs[k][j][i], 1.0);
                builder.add_le_zero(row);
                counts.terminal_state_rows += 1;
            }
        }
    }

    row_map.push(("terminal".into(), mark..builder.n_ineq_rows()));

    Ok(TubeProblem {
        builder,
        horizon: n,
        gamma: cfg.gamma,
        c_vars,
        alpha_vars,
        beta_vars,
        lx_vars,
        lu_vars,
        instances,
        dc_f: dc_f.clone(),
        dc_g: dc_g.cloned(),
        counts,
        row_map,
    })
}

impl TubeProblem {
    fn net(&self, role: NetRole) -> &IcnnParams {
        match role {
            NetRole::F1 => &self.dc_f.f1,
            NetRole::F2 => &self.dc_f.f2,
            NetRole::G1 => &self.dc_g.as_ref().expect("g pair present").f1,
            NetRole::G2 => &self.dc_g.as_ref().expect("g pair present").f2,
        }
    }

    /// Solve the problem. Infeasibility is a reportable outcome; only
    /// numerical solver breakdowns surface as errors.
    pub fn solve(&self) -> Result<TubeOutcome> {
        let sol = match self.builder.solve()? {
            SolveOutcome::Optimal(s) => s,
            SolveOutcome::Infeasible => return Ok(TubeOutcome::Infeasible),
        };
        let mut values = sol.values;

        // Tighten epigraph variables onto the exact activations at the
        // optimal decision variables. Network outputs enter constraints with
        // conservative sign, so this preserves feasibility; the objective
        // does not involve the epigraph variables beyond the nudge.
        let mut gap: f64 = 0.0;
        for inst in &self.instances {
            let net = self.net(inst.role);
            let y = DVector::from_fn(inst.input_exprs.len(), |i, _| inst.input_exprs[i].eval(&values));
            let (acts, out) = net.forward_full(&y)?;
            for (r, e) in inst.out_exprs.iter().enumerate() {
                gap = gap.max((e.eval(&values) - out[r]).abs());
            }
            for (range, act) in inst.layer_vars.iter().zip(acts.iter()) {
                for (offset, var) in range.clone().enumerate() {
                    values[var] = act[offset];
                }
            }
        }
        let violation = self.builder.max_violation(&values);

        let n = self.horizon;
        let tube = SimplexTube {
            alpha: (0..=n)
                .map(|k| {
                    StateVec::from_fn(|i, _| values[self.alpha_vars[k][i]])
                })
                .collect(),
            beta: (0..=n).map(|k| values[self.beta_vars[k]]).collect(),
        };
        let lx: Vec<f64> = (0..=n).map(|k| values[self.lx_vars[k]]).collect();
        let lu: Vec<f64> = (0..=n).map(|k| values[self.lu_vars[k]]).collect();
        let cost = lx.iter().sum::<f64>() - self.gamma * lu.iter().sum::<f64>();
        Ok(TubeOutcome::Feasible(TubeSolution {
            cost,
            c: (0..=n).map(|k| values[self.c_vars[k]]).collect(),
            tube,
            lx,
            lu,
            epigraph_gap: gap,
            feasibility_violation: violation,
        }))
    }

    /// Evaluate the epigraph encoding of every instance at a candidate
    /// assignment of the structural variables (testing hook).
    pub fn n_variables(&self) -> usize {
        self.builder.n_vars()
    }

    pub fn n_rows(&self) -> usize {
        self.builder.n_eq_rows() + self.builder.n_ineq_rows()
    }

    /// Diagnose infeasibility: minimal uniform slack over all inequality
    /// rows and a histogram of the binding constraint families.
    pub fn diagnose_infeasibility(&self) -> Result<(f64, Vec<(String, usize)>)> {
        let (slack, rows) = self.raw_slack_rows()?;
        let mut hist: Vec<(String, usize)> = Vec::new();
        for (name, range) in &self.row_map {
            let count = rows.iter().filter(|r| range.contains(r)).count();
            if count > 0 {
                hist.push((name.clone(), count));
            }
        }
        Ok((slack, hist))
    }

    /// Raw elastic diagnosis (slack, binding row indices). Epigraph rows are
    /// never relaxed (slack there would just under-estimate network values).
    pub fn raw_slack_rows(&self) -> Result<(f64, Vec<usize>)> {
        let epigraph = self
            .row_map
            .iter()
            .find(|(n, _)| n == "epigraph")
            .map(|(_, r)| r.clone())
            .unwrap_or(0..0);
        self.builder
            .min_uniform_slack_filtered(1e-9, &|i| !epigraph.contains(&i))
    }

    /// Human-readable location of an inequality row, following the emission
    /// order of `build_problem`.
    pub fn locate_row(&self, idx: usize) -> String {
        let n = self.horizon;
        let robust = self.dc_g.is_some() && self.counts.alpha_recursion_rows > n * (N_STATES + 1) * N_STATES;
        for (name, range) in &self.row_map {
            if !range.contains(&idx) {
                continue;
            }
            let off = idx - range.start;
            return match name.as_str() {
                "boxes+product" => {
                    let per_vertex = 2 * N_STATES + 3;
                    let (kj, r) = (off / per_vertex, off % per_vertex);
                    let (k, j) = (kj / (N_STATES + 1), kj % (N_STATES + 1));
                    let what = match r {
                        0..=7 => format!("x{} {}", r / 2, if r % 2 == 0 { "lo" } else { "hi" }),
                        8 => "u lo".into(),
                        9 => "u hi".into(),
                        _ => "lx".into(),
                    };
                    format!("box k={k} j={j} {what}")
                }
                "recursion" => {
                    let per_vertex = if robust { 4 * (N_STATES + 1) } else { N_STATES + 1 };
                    let (kj, r) = (off / per_vertex, off % per_vertex);
                    let (k, j) = (kj / (N_STATES + 1), kj % (N_STATES + 1));
                    let (m, c) = (r / (N_STATES + 1), r % (N_STATES + 1));
                    let what = if c < N_STATES {
                        format!("alpha{c}")
                    } else {
                        "beta".into()
                    };
                    format!("recursion k={k} j={j} m={m} {what}")
                }
                "terminal" => {
                    let (bj, i) = (off / N_STATES, off % N_STATES);
                    let (back, j) = (bj / (N_STATES + 1), bj % (N_STATES + 1));
                    format!("terminal k={} j={j} x{i}", n - back)
                }
                other => format!("{other} +{off}"),
            };
        }
        format!("row {idx}")
    }
}
