//! Time-varying LQR gains by backward Riccati recursion on the linearized
//! discrete surrogate model.

use nalgebra::{Matrix4, RowVector4, Vector4};

use crate::error::{Error, Result};

/// Feedback gain schedule; the control perturbation is `v_k = K_k s_k + c_k`,
/// so the closed-loop transition is `A_k + B_k K_k`.
#[derive(Debug, Clone)]
pub struct GainSchedule {
    pub gains: Vec<RowVector4<f64>>,
}

impl GainSchedule {
    pub fn zero(n: usize) -> Self {
        GainSchedule {
            gains: vec![RowVector4::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }
}

/// Backward Riccati recursion over a sequence of (A_k, B_k) pairs with stage
/// cost `s' Q s + r v^2` and terminal weight Q.
pub fn riccati_gains(a_seq: &[Matrix4<f64>], b_seq: &[Vector4<f64>], q: f64, r: f64) -> Result<GainSchedule> {
    if a_seq.len() != b_seq.len() {
        return Err(Error::Dimension {
            expected: a_seq.len(),
            got: b_seq.len(),
        });
    }
    if r <= 0.0 {
        return Err(Error::ModelInput("control weight must be positive".into()));
    }
    let q_mat = Matrix4::identity() * q;
    let mut p = q_mat;
    let mut gains = vec![RowVector4::zeros(); a_seq.len()];
    for k in (0..a_seq.len()).rev() {
        let a = &a_seq[k];
        let b = &b_seq[k];
        let pb = p * b;
        let denom = r + b.dot(&pb);
        if !denom.is_finite() || denom <= 0.0 {
            return Err(Error::SolverFailure(format!(
                "Riccati breakdown at step {k}: denominator {denom}"
            )));
        }
        let k_row: RowVector4<f64> = -(pb.transpose() * a) / denom;
        let a_cl = a + b * k_row;
        // Joseph-free update P = Q + K' r K + A_cl' P A_cl keeps P symmetric PSD
        p = q_mat + k_row.transpose() * r * k_row + a_cl.transpose() * p * a_cl;
        p = (p + p.transpose()) * 0.5;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::SolverFailure(format!("non-finite Riccati iterate at step {k}")));
        }
        gains[k] = k_row;
    }
    Ok(GainSchedule { gains })
}
