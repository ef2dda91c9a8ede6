use std::collections::BTreeMap;

use microlp::{ComparisonOp, OptimizationDirection, Problem, Variable};

use super::standard::{SparseRow, StandardForm};
use super::{Backend, BackendOutput, SolveStatus};
use crate::error::{Error, Result};

// microlp rejects repeated indices within one row.
fn merged(row: &SparseRow, vars: &[Variable]) -> Vec<(Variable, f64)> {
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for &(j, v) in row {
        *acc.entry(j).or_insert(0.0) += v;
    }
    acc.into_iter().filter(|(_, v)| *v != 0.0).map(|(j, v)| (vars[j], v)).collect()
}

pub(crate) fn solve(form: &StandardForm) -> Result<BackendOutput> {
    if !form.socs.is_empty() {
        return Err(Error::BackendUnsupported(Backend::Simplex.to_string()));
    }
    let infeasible = || BackendOutput { status: SolveStatus::Infeasible, x: vec![], objective: f64::NAN };

    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<Variable> = (0..form.n)
        .map(|j| {
            let lo = if form.nonneg[j] { 0.0 } else { f64::NEG_INFINITY };
            lp.add_var(form.c[j], (lo, f64::INFINITY))
        })
        .collect();
    for (op, rows) in [(ComparisonOp::Eq, &form.eq), (ComparisonOp::Le, &form.le)] {
        for (row, rhs) in rows {
            let terms = merged(row, &vars);
            if terms.is_empty() {
                let ok = match op {
                    ComparisonOp::Eq => rhs.abs() <= 1e-12,
                    _ => *rhs >= -1e-12,
                };
                if !ok {
                    return Ok(infeasible());
                }
                continue;
            }
            lp.add_constraint(terms.as_slice(), op, *rhs);
        }
    }
    match lp.solve() {
        Ok(outcome) => match outcome.into_solution() {
            Ok(sol) => {
                let x = vars.iter().map(|&v| sol.var_value(v)).collect();
                Ok(BackendOutput { status: SolveStatus::Optimal, x, objective: sol.objective() })
            }
            Err(_) => Ok(BackendOutput { status: SolveStatus::NumericFailure, x: vec![], objective: f64::NAN }),
        },
        Err(microlp::Error::Infeasible) => Ok(infeasible()),
        Err(microlp::Error::Unbounded) => Ok(BackendOutput { status: SolveStatus::Unbounded, x: vec![], objective: f64::NAN }),
        Err(_) => Ok(BackendOutput { status: SolveStatus::NumericFailure, x: vec![], objective: f64::NAN }),
    }
}
