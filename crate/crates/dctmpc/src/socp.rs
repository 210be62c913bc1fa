//! Thin builder for sparse conic programs (LP + second-order cone) and the
//! interface to the embedded conic solver.
//!
//! Problems are assembled as affine expressions over scalar decision
//! variables; the builder compiles them into the solver's standard form
//! `min q'v  s.t.  Av + s = b, s in K` with zero, non-negative, and
//! second-order cones.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

use crate::error::{Error, Result};

/// Sparse affine expression `sum coeff_i * v_i + constant`.
#[derive(Debug, Clone, Default)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn constant(c: f64) -> Self {
        LinExpr {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(idx: usize) -> Self {
        LinExpr {
            terms: vec![(idx, 1.0)],
            constant: 0.0,
        }
    }

    pub fn term(idx: usize, coeff: f64) -> Self {
        LinExpr {
            terms: vec![(idx, coeff)],
            constant: 0.0,
        }
    }

    pub fn push(&mut self, idx: usize, coeff: f64) {
        if coeff != 0.0 {
            self.terms.push((idx, coeff));
        }
    }

    pub fn add_constant(&mut self, c: f64) {
        self.constant += c;
    }

    pub fn add(&mut self, other: &LinExpr, scale: f64) {
        if scale == 0.0 {
            return;
        }
        self.constant += scale * other.constant;
        for (idx, c) in &other.terms {
            self.push(*idx, scale * c);
        }
    }

    pub fn eval(&self, v: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|(i, c)| c * v[*i]).sum::<f64>()
    }
}

/// Outcome of a solve: either an optimal point or certified infeasibility.
/// Numerical failures are reported as errors instead.
enum SolveAttempt {
    Done(SolveOutcome),
    Stalled(SolverStatus),
}

#[derive(Debug, Clone)]
pub enum SolveOutcome {
    Optimal(Solution),
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub values: Vec<f64>,
    /// Objective of the *minimization* form actually solved.
    pub min_objective: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SocpBuilder {
    n_vars: usize,
    objective: Vec<(usize, f64)>,
    eq_rows: Vec<LinExpr>,
    ineq_rows: Vec<LinExpr>,
    soc_blocks: Vec<Vec<LinExpr>>,
}

impl SocpBuilder {
    pub fn new() -> Self {
        SocpBuilder::default()
    }

    pub fn add_var(&mut self) -> usize {
        self.n_vars += 1;
        self.n_vars - 1
    }

    pub fn add_vars(&mut self, n: usize) -> std::ops::Range<usize> {
        let start = self.n_vars;
        self.n_vars += n;
        start..self.n_vars
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    /// Add `coeff * v_idx` to the minimization objective.
    pub fn minimize_term(&mut self, idx: usize, coeff: f64) {
        if coeff != 0.0 {
            self.objective.push((idx, coeff));
        }
    }

    /// Constrain `expr == 0`.
    pub fn add_eq(&mut self, expr: LinExpr) {
        self.eq_rows.push(expr);
    }

    /// Constrain `expr <= 0`.
    pub fn add_le_zero(&mut self, expr: LinExpr) {
        self.ineq_rows.push(expr);
    }

    /// Constrain `lhs <= rhs`.
    pub fn add_le(&mut self, lhs: LinExpr, rhs: &LinExpr) {
        let mut e = lhs;
        e.add(rhs, -1.0);
        self.ineq_rows.push(e);
    }

    /// Constrain `||tail|| <= head` (second-order cone on expressions).
    pub fn add_soc(&mut self, head: LinExpr, tail: Vec<LinExpr>) {
        let mut block = Vec::with_capacity(tail.len() + 1);
        block.push(head);
        block.extend(tail);
        self.soc_blocks.push(block);
    }

    /// Constrain `target >= expr^2` via the standard second-order cone
    /// embedding `||(2 expr, target - 1)|| <= target + 1`.
    pub fn add_square_le(&mut self, expr: LinExpr, target: LinExpr) {
        let mut head = target.clone();
        head.add_constant(1.0);
        let mut t2 = target;
        t2.add_constant(-1.0);
        let mut e2 = LinExpr::default();
        e2.add(&expr, 2.0);
        self.add_soc(head, vec![e2, t2]);
    }

    pub fn n_eq_rows(&self) -> usize {
        self.eq_rows.len()
    }

    pub fn n_ineq_rows(&self) -> usize {
        self.ineq_rows.len()
    }

    pub fn n_soc_blocks(&self) -> usize {
        self.soc_blocks.len()
    }

    /// Diagnostic: minimize a single uniform slack added to every inequality
    /// row. Returns the minimal slack and the indices of rows within `tol`
    /// of it (the irreducibly violated families when slack > 0).
    pub fn min_uniform_slack(&self, tol: f64) -> Result<(f64, Vec<usize>)> {
        self.min_uniform_slack_filtered(tol, &|_| true)
    }

    /// Like [`SocpBuilder::min_uniform_slack`] but only relaxing rows the
    /// filter accepts.
    pub fn min_uniform_slack_filtered(
        &self,
        tol: f64,
        relax: &dyn Fn(usize) -> bool,
    ) -> Result<(f64, Vec<usize>)> {
        let mut relaxed = self.clone();
        relaxed.objective.clear();
        relaxed.soc_blocks.clear();
        let sigma = relaxed.add_var();
        relaxed.minimize_term(sigma, 1.0);
        for (i, row) in relaxed.ineq_rows.iter_mut().enumerate() {
            if relax(i) {
                row.push(sigma, -1.0);
            }
        }
        // sigma >= 0
        relaxed.ineq_rows.push(LinExpr::term(sigma, -1.0));
        match relaxed.solve()? {
            SolveOutcome::Optimal(sol) => {
                let s = sol.values[sigma];
                let binding = self
                    .ineq_rows
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| e.eval(&sol.values) > s - tol)
                    .map(|(i, _)| i)
                    .collect();
                Ok((s, binding))
            }
            SolveOutcome::Infeasible => Err(Error::SolverFailure(
                "elastic relaxation infeasible (equality rows conflict)".into(),
            )),
        }
    }

    /// Worst constraint violation of a candidate point, across equality,
    /// inequality, and cone rows. Used to certify post-processed solutions.
    pub fn max_violation(&self, v: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for e in &self.eq_rows {
            worst = worst.max(e.eval(v).abs());
        }
        for e in &self.ineq_rows {
            worst = worst.max(e.eval(v));
        }
        for block in &self.soc_blocks {
            let head = block[0].eval(v);
            let tail: f64 = block[1..].iter().map(|e| e.eval(v).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(tail - head);
        }
        worst
    }

    fn compile(&self) -> (CscMatrix<f64>, Vec<f64>, Vec<SupportedConeT<f64>>, Vec<f64>) {
        let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
        let mut b: Vec<f64> = Vec::new();
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
        let mut row = 0usize;

        let push_row = |expr: &LinExpr, triplets: &mut Vec<(usize, usize, f64)>, b: &mut Vec<f64>, row: &mut usize| {
            // s_row = b_row - A_row v must equal expr(v): A_row = -terms
            for (idx, c) in &expr.terms {
                triplets.push((*row, *idx, -c));
            }
            b.push(expr.constant);
            *row += 1;
        };

        if !self.eq_rows.is_empty() {
            cones.push(SupportedConeT::ZeroConeT(self.eq_rows.len()));
            for e in &self.eq_rows {
                push_row(e, &mut triplets, &mut b, &mut row);
            }
        }
        if !self.ineq_rows.is_empty() {
            // expr <= 0 becomes s = -expr >= 0
            cones.push(SupportedConeT::NonnegativeConeT(self.ineq_rows.len()));
            for e in &self.ineq_rows {
                let neg = LinExpr {
                    terms: e.terms.iter().map(|(i, c)| (*i, -c)).collect(),
                    constant: -e.constant,
                };
                push_row(&neg, &mut triplets, &mut b, &mut row);
            }
        }
        for block in &self.soc_blocks {
            cones.push(SupportedConeT::SecondOrderConeT(block.len()));
            for e in block {
                push_row(e, &mut triplets, &mut b, &mut row);
            }
        }

        let m = row;
        triplets.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        // merge duplicates (sorted, so equal (col,row) pairs are adjacent)
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(triplets.len());
        for (r, c, v) in triplets {
            match merged.last_mut() {
                Some((lr, lc, lv)) if *lr == r && *lc == c => *lv += v,
                _ => merged.push((r, c, v)),
            }
        }
        let mut colptr = vec![0usize; self.n_vars + 1];
        let mut rowval = Vec::with_capacity(merged.len());
        let mut nzval = Vec::with_capacity(merged.len());
        for (r, c, v) in merged {
            colptr[c + 1] += 1;
            rowval.push(r);
            nzval.push(v);
        }
        for c in 0..self.n_vars {
            colptr[c + 1] += colptr[c];
        }
        let a = CscMatrix::new(m, self.n_vars, colptr, rowval, nzval);

        let mut q = vec![0.0; self.n_vars];
        for (idx, c) in &self.objective {
            q[*idx] += c;
        }
        (a, q, cones, b)
    }

    /// Solve the assembled problem. Stalled runs are retried once at a
    /// relaxed tolerance before reporting a numerical failure.
    pub fn solve(&self) -> Result<SolveOutcome> {
        let tol = solver_tolerance();
        match self.solve_with_tolerance(tol)? {
            SolveAttempt::Done(outcome) => Ok(outcome),
            SolveAttempt::Stalled(status) => {
                log::warn!("conic solve stalled ({status:?}); retrying at relaxed tolerance");
                match self.solve_with_tolerance(tol * 100.0)? {
                    SolveAttempt::Done(outcome) => Ok(outcome),
                    SolveAttempt::Stalled(status) => {
                        Err(Error::SolverFailure(format!("solver status {status:?}")))
                    }
                }
            }
        }
    }

    fn solve_with_tolerance(&self, tol: f64) -> Result<SolveAttempt> {
        let (a, q, cones, b) = self.compile();
        let p = CscMatrix::<f64>::zeros((self.n_vars, self.n_vars));

        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .tol_gap_abs(tol)
            .tol_gap_rel(tol)
            .tol_feas(tol)
            .max_iter(200)
            .build()
            .map_err(|e| Error::SolverFailure(format!("settings: {e:?}")))?;

        let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings)
            .map_err(|e| Error::SolverFailure(format!("setup: {e:?}")))?;
        solver.solve();

        match solver.solution.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => {
                Ok(SolveAttempt::Done(SolveOutcome::Optimal(Solution {
                    values: solver.solution.x.clone(),
                    min_objective: solver.solution.obj_val,
                })))
            }
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                Ok(SolveAttempt::Done(SolveOutcome::Infeasible))
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => Err(
                Error::SolverFailure("problem is unbounded (dual infeasible)".into()),
            ),
            other => Ok(SolveAttempt::Stalled(other)),
        }
    }
}

/// Solver tolerance, overridable through the environment.
pub fn solver_tolerance() -> f64 {
    std::env::var("DCTMPC_SOLVER_TOL")
        .ok()
        .and_then(|s| s.parse::<f64>().ok())
        .filter(|t| *t > 0.0 && t.is_finite())
        .unwrap_or(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_box_lp() {
        // min -x - 2y  s.t. 0 <= x <= 1, 0 <= y <= 2
        let mut p = SocpBuilder::new();
        let x = p.add_var();
        let y = p.add_var();
        p.minimize_term(x, -1.0);
        p.minimize_term(y, -2.0);
        let mut row = LinExpr::var(x);
        row.add_constant(-1.0);
        p.add_le_zero(row); // x <= 1
        let mut row = LinExpr::var(y);
        row.add_constant(-2.0);
        p.add_le_zero(row); // y <= 2
        p.add_le_zero(LinExpr::term(x, -1.0)); // x >= 0
        p.add_le_zero(LinExpr::term(y, -1.0)); // y >= 0
        let sol = match p.solve().unwrap() {
            SolveOutcome::Optimal(s) => s,
            SolveOutcome::Infeasible => panic!("feasible LP reported infeasible"),
        };
        assert!((sol.values[x] - 1.0).abs() < 1e-6);
        assert!((sol.values[y] - 2.0).abs() < 1e-6);
        assert!((sol.min_objective - (-5.0)).abs() < 1e-6);
    }

    #[test]
    fn solves_equality_constrained_lp() {
        // min x + y  s.t. x + y = 3, x >= 1, y >= 0 -> objective 3
        let mut p = SocpBuilder::new();
        let x = p.add_var();
        let y = p.add_var();
        p.minimize_term(x, 1.0);
        p.minimize_term(y, 1.0);
        let mut eq = LinExpr::var(x);
        eq.push(y, 1.0);
        eq.add_constant(-3.0);
        p.add_eq(eq);
        let mut ge = LinExpr::constant(1.0);
        ge.push(x, -1.0);
        p.add_le_zero(ge); // 1 - x <= 0
        p.add_le_zero(LinExpr::term(y, -1.0));
        let sol = match p.solve().unwrap() {
            SolveOutcome::Optimal(s) => s,
            SolveOutcome::Infeasible => panic!("feasible LP reported infeasible"),
        };
        assert!((sol.min_objective - 3.0).abs() < 1e-6);
    }

    #[test]
    fn certifies_infeasibility() {
        // x <= -1 and x >= 1
        let mut p = SocpBuilder::new();
        let x = p.add_var();
        let mut le = LinExpr::var(x);
        le.add_constant(1.0);
        p.add_le_zero(le); // x <= -1
        let mut ge = LinExpr::constant(1.0);
        ge.push(x, -1.0);
        p.add_le_zero(ge); // x >= 1
        match p.solve().unwrap() {
            SolveOutcome::Infeasible => {}
            SolveOutcome::Optimal(_) => panic!("infeasible LP reported optimal"),
        }
    }

    #[test]
    fn square_epigraph_cone_is_tight_under_pressure() {
        // min t s.t. t >= (x - 3)^2, x = 1 -> t = 4
        let mut p = SocpBuilder::new();
        let x = p.add_var();
        let t = p.add_var();
        p.minimize_term(t, 1.0);
        let mut eq = LinExpr::var(x);
        eq.add_constant(-1.0);
        p.add_eq(eq);
        let mut dx = LinExpr::var(x);
        dx.add_constant(-3.0);
        p.add_square_le(dx, LinExpr::var(t));
        let sol = match p.solve().unwrap() {
            SolveOutcome::Optimal(s) => s,
            SolveOutcome::Infeasible => panic!("feasible SOCP reported infeasible"),
        };
        assert!((sol.values[t] - 4.0).abs() < 1e-5, "t = {}", sol.values[t]);
    }

    #[test]
    fn lin_expr_eval_matches_construction() {
        let mut e = LinExpr::constant(0.5);
        e.push(0, 2.0);
        e.push(2, -1.0);
        assert_eq!(e.eval(&[1.0, 9.0, 3.0]), 0.5 + 2.0 - 3.0);
    }

    #[test]
    fn duplicate_terms_accumulate() {
        // x + x <= 4 -> x <= 2 under maximization of x
        let mut p = SocpBuilder::new();
        let x = p.add_var();
        p.minimize_term(x, -1.0);
        let mut e = LinExpr::term(x, 1.0);
        e.push(x, 1.0);
        e.add_constant(-4.0);
        p.add_le_zero(e);
        let sol = match p.solve().unwrap() {
            SolveOutcome::Optimal(s) => s,
            SolveOutcome::Infeasible => panic!("feasible LP reported infeasible"),
        };
        assert!((sol.values[x] - 2.0).abs() < 1e-6);
    }
}
