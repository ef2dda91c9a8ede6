use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, NonnegativeConeT, SecondOrderConeT, SolverStatus, SupportedConeT, ZeroConeT,
};

use super::standard::StandardForm;
use super::{BackendOutput, SolveStatus, SolverConfig};
use crate::error::{Error, Result};

struct Triplets {
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    b: Vec<f64>,
}

impl Triplets {
    fn push_row(&mut self, coefs: impl IntoIterator<Item = (usize, f64)>, rhs: f64) {
        let r = self.b.len();
        for (c, v) in coefs {
            self.rows.push(r);
            self.cols.push(c);
            self.vals.push(v);
        }
        self.b.push(rhs);
    }
}

/// Lower to `A x + s = b, s in K` and run Clarabel.
pub(crate) fn solve(form: &StandardForm, cfg: &SolverConfig) -> Result<BackendOutput> {
    let mut t = Triplets { rows: vec![], cols: vec![], vals: vec![], b: vec![] };
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();

    for (row, rhs) in &form.eq {
        t.push_row(row.iter().copied(), *rhs);
    }
    if !form.eq.is_empty() {
        cones.push(ZeroConeT(form.eq.len()));
    }
    let before = t.b.len();
    for (row, rhs) in &form.le {
        t.push_row(row.iter().copied(), *rhs);
    }
    for (j, &nn) in form.nonneg.iter().enumerate() {
        if nn {
            t.push_row([(j, -1.0)], 0.0);
        }
    }
    if t.b.len() > before {
        cones.push(NonnegativeConeT(t.b.len() - before));
    }
    for soc in &form.socs {
        t.push_row([(soc.t, -1.0)], 0.0);
        for (row, c) in &soc.rows {
            t.push_row(row.iter().map(|&(j, v)| (j, -v)), *c);
        }
        cones.push(SecondOrderConeT(1 + soc.rows.len()));
    }

    let m = t.b.len();
    let n = form.n;
    let a = CscMatrix::new_from_triplets(m, n, t.rows, t.cols, t.vals);
    let p = CscMatrix::zeros((n, n));
    let settings = DefaultSettings {
        verbose: false,
        max_iter: cfg.max_iter,
        tol_gap_abs: cfg.opt_tol,
        tol_gap_rel: cfg.opt_tol,
        tol_feas: (cfg.feas_tol * 1e-2).min(cfg.opt_tol * 0.1).max(1e-13),
        ..DefaultSettings::default()
    };
    let mut solver = DefaultSolver::new(&p, &form.c, &a, &t.b, &cones, settings)
        .map_err(|e| Error::Model(format!("clarabel rejected the program: {e}")))?;
    solver.solve();
    let sol = &solver.solution;
    let status = match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => SolveStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
        _ => SolveStatus::NumericFailure,
    };
    Ok(BackendOutput { status, x: sol.x.clone(), objective: sol.obj_val })
}
