//! Backend-agnostic linear and second-order-cone programs.
//!
//! Problems are stated declaratively as a [`ConicProgram`]: named variable
//! blocks, sparse linear rows, nonnegative blocks and a sum of norm terms in
//! the objective. [`SolverGateway`] lowers the program to a backend's
//! standard form, solves it, and certifies the primal residuals of the
//! returned point before reporting it as optimal.

mod clarabel_backend;
mod program;
mod simplex_backend;
mod standard;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use program::{Block, ConicProgram, LinExpr, NormTerm, Var};
use standard::StandardForm;

/// Environment variable overriding `solver.backend`.
pub const BACKEND_ENV: &str = "AGGFLEX_SOLVER";

/// Norm used by objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
    Linf,
}

impl Norm {
    pub fn eval(self, v: &[f64]) -> f64 {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        })
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            "linf" | "inf" => Ok(Norm::Linf),
            other => Err(Error::Config(format!("unknown norm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericFailure,
}

/// Which backend handles a program.
///
/// `Auto` sends small pure LPs to the simplex backend (vertex solutions,
/// residuals at round-off level) and everything else to Clarabel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Auto,
    Clarabel,
    Simplex,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Auto => "auto",
            Backend::Clarabel => "clarabel",
            Backend::Simplex => "simplex",
        })
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(Backend::Auto),
            "clarabel" => Ok(Backend::Clarabel),
            "simplex" | "microlp" => Ok(Backend::Simplex),
            other => Err(Error::Config(format!("unknown solver backend `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub backend: Backend,
    /// Primal feasibility tolerance used to certify returned points.
    pub feas_tol: f64,
    /// Optimality (duality gap) tolerance handed to the interior-point backend.
    pub opt_tol: f64,
    pub max_iter: u32,
    /// Pure LPs with at most this many columns go to the simplex backend under `Auto`.
    pub simplex_max_vars: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { backend: Backend::Auto, feas_tol: 1e-7, opt_tol: 1e-10, max_iter: 400, simplex_max_vars: 4000 }
    }
}

impl SolverConfig {
    /// Apply one `solver.*` configuration key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse = |v: &str| v.parse::<f64>().map_err(|_| Error::Config(format!("`{key}` expects a number, got `{v}`")));
        match key {
            "solver.backend" | "backend" => self.backend = value.parse()?,
            "solver.feas_tol" | "feas_tol" => self.feas_tol = parse(value)?,
            "solver.opt_tol" | "opt_tol" => self.opt_tol = parse(value)?,
            "solver.max_iter" | "max_iter" => {
                self.max_iter = value.parse().map_err(|_| Error::Config(format!("`{key}` expects an integer")))?
            }
            _ => return Err(Error::Config(format!("unknown solver key `{key}`"))),
        }
        self.validate()
    }

    /// Apply the `AGGFLEX_SOLVER` override, if set.
    pub fn with_env_override(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(BACKEND_ENV) {
            if !v.is_empty() {
                self.backend = v.parse()?;
            }
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.feas_tol > 0.0 && self.feas_tol < 1.0) {
            return Err(Error::Config("solver.feas_tol must lie in (0, 1)".into()));
        }
        if !(self.opt_tol > 0.0 && self.opt_tol < 1.0) {
            return Err(Error::Config("solver.opt_tol must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Result of one solve.
#[derive(Debug, Clone)]
pub struct Solution {
    pub status: SolveStatus,
    /// Values of the program's own variables (epigraph auxiliaries stripped).
    pub x: Vec<f64>,
    /// Objective evaluated directly at `x` (linear part plus norm terms).
    pub objective: f64,
    /// Objective reported by the backend on its epigraph reformulation.
    pub backend_objective: f64,
    pub solve_ms: f64,
    pub max_eq_residual: f64,
    pub max_ineq_violation: f64,
    pub backend: Backend,
}

impl Solution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    pub fn value(&self, v: Var) -> f64 {
        self.x[v.index()]
    }

    pub fn block_values(&self, b: &Block) -> &[f64] {
        &self.x[b.offset()..b.offset() + b.len()]
    }

    /// Block values as a `rows x cols` matrix (row-major layout).
    pub fn block_matrix(&self, b: &Block) -> DMatrix<f64> {
        DMatrix::from_row_slice(b.rows(), b.cols(), self.block_values(b))
    }

    /// Values keyed by block name.
    pub fn values_by_name(&self, prog: &ConicProgram) -> std::collections::BTreeMap<String, Vec<f64>> {
        prog.blocks().map(|(name, b)| (name.to_string(), self.block_values(&b).to_vec())).collect()
    }

    /// Turn a non-optimal status into an error.
    pub fn require_optimal(self) -> Result<Self> {
        match self.status {
            SolveStatus::Optimal => Ok(self),
            SolveStatus::Infeasible => Err(Error::Infeasible),
            SolveStatus::Unbounded => Err(Error::Unbounded),
            s => Err(Error::Solver(s)),
        }
    }
}

/// Raw output of a backend on the lowered program.
pub(crate) struct BackendOutput {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub objective: f64,
}

/// Entry point for every optimization in the crate.
#[derive(Debug, Clone, Default)]
pub struct SolverGateway {
    config: SolverConfig,
}

impl SolverGateway {
    pub fn new(config: SolverConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    /// Solve a program without L2 terms.
    pub fn solve_linear_program(&self, prog: &ConicProgram) -> Result<Solution> {
        if prog.has_l2_terms() {
            return Err(Error::Model("linear program contains L2 norm terms; use solve_conic_program".into()));
        }
        self.solve_conic_program(prog)
    }

    /// Solve any program; L2 terms are lowered to second-order cones.
    pub fn solve_conic_program(&self, prog: &ConicProgram) -> Result<Solution> {
        prog.validate()?;
        let backend = self.pick_backend(prog)?;
        let form = StandardForm::lower(prog);
        let start = Instant::now();
        let out = match backend {
            Backend::Simplex => simplex_backend::solve(&form),
            _ => clarabel_backend::solve(&form, &self.config),
        }?;
        let solve_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(self.certify(prog, out, backend, solve_ms))
    }

    /// Alias for [`Self::solve_conic_program`].
    pub fn solve(&self, prog: &ConicProgram) -> Result<Solution> {
        self.solve_conic_program(prog)
    }

    fn pick_backend(&self, prog: &ConicProgram) -> Result<Backend> {
        match self.config.backend {
            Backend::Simplex if prog.has_l2_terms() => Err(Error::BackendUnsupported(Backend::Simplex.to_string())),
            Backend::Auto => {
                if !prog.has_l2_terms() && prog.num_vars() <= self.config.simplex_max_vars {
                    Ok(Backend::Simplex)
                } else {
                    Ok(Backend::Clarabel)
                }
            }
            b => Ok(b),
        }
    }

    fn certify(&self, prog: &ConicProgram, out: BackendOutput, backend: Backend, solve_ms: f64) -> Solution {
        let n = prog.num_vars();
        let x: Vec<f64> = if out.x.len() >= n { out.x[..n].to_vec() } else { vec![f64::NAN; n] };
        let mut status = out.status;
        let (mut eq_res, mut ineq_viol) = (0.0, 0.0);
        if status == SolveStatus::Optimal {
            let (e, i, eq_scale, in_scale) = prog.residuals(&x);
            eq_res = e;
            ineq_viol = i;
            let ok = x.iter().all(|v| v.is_finite())
                && e <= self.config.feas_tol * (1.0 + eq_scale)
                && i <= self.config.feas_tol * (1.0 + in_scale);
            if !ok {
                status = SolveStatus::NumericFailure;
            }
        }
        let objective = if x.iter().all(|v| v.is_finite()) { prog.objective_value(&x) } else { f64::NAN };
        Solution {
            status,
            x,
            objective,
            backend_objective: out.objective,
            solve_ms,
            max_eq_residual: eq_res,
            max_ineq_violation: ineq_viol,
            backend,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gw(backend: Backend) -> SolverGateway {
        SolverGateway::new(SolverConfig { backend, ..Default::default() }).unwrap()
    }

    #[test]
    fn min_x_with_lower_bound() {
        for b in [Backend::Simplex, Backend::Clarabel] {
            let mut p = ConicProgram::new();
            let x = p.add_block("x", 1, 1);
            p.add_ge(LinExpr::from(x.idx(0)), 1.0);
            p.add_objective(x.idx(0), 1.0);
            let s = gw(b).solve_linear_program(&p).unwrap();
            assert_eq!(s.status, SolveStatus::Optimal);
            assert!((s.objective - 1.0).abs() < 1e-7, "{b}: {}", s.objective);
        }
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        for b in [Backend::Simplex, Backend::Clarabel] {
            let mut p = ConicProgram::new();
            let x = p.add_block("x", 1, 1);
            p.add_le(LinExpr::from(x.idx(0)), 0.0);
            p.add_ge(LinExpr::from(x.idx(0)), 1.0);
            let s = gw(b).solve_linear_program(&p).unwrap();
            assert_eq!(s.status, SolveStatus::Infeasible, "{b}");
        }
    }

    #[test]
    fn unbounded_lp_is_reported() {
        for b in [Backend::Simplex, Backend::Clarabel] {
            let mut p = ConicProgram::new();
            let x = p.add_block("x", 1, 1);
            p.add_le(LinExpr::from(x.idx(0)), 0.0);
            p.add_objective(x.idx(0), 1.0);
            let s = gw(b).solve_linear_program(&p).unwrap();
            assert_eq!(s.status, SolveStatus::Unbounded, "{b}");
        }
    }

    #[test]
    fn euclidean_distance_to_shifted_orthant() {
        let mut p = ConicProgram::new();
        let x = p.add_block("x", 2, 1);
        for i in 0..2 {
            p.add_ge(LinExpr::from(x.idx(i)), 2.0);
        }
        p.add_norm_term((0..2).map(|i| LinExpr::from(x.idx(i)).plus_constant(-1.0)).collect(), Norm::L2);
        let s = gw(Backend::Auto).solve_conic_program(&p).unwrap();
        assert_eq!(s.backend, Backend::Clarabel);
        assert!((s.objective - 2f64.sqrt()).abs() < 1e-7);
        let v = s.block_values(&x);
        assert!((v[0] - 2.0).abs() < 1e-6 && (v[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn l1_on_simplex_face() {
        for b in [Backend::Simplex, Backend::Clarabel] {
            let mut p = ConicProgram::new();
            let x = p.add_block("x", 2, 1);
            p.nonneg(&x);
            p.add_eq(LinExpr::from(x.idx(0)).plus(x.idx(1), 1.0), 2.0);
            p.add_norm_term((0..2).map(|i| LinExpr::from(x.idx(i))).collect(), Norm::L1);
            let s = gw(b).solve_linear_program(&p).unwrap();
            assert!((s.objective - 2.0).abs() < 1e-7, "{b}");
            assert!((s.objective - s.backend_objective).abs() < 1e-7);
        }
    }

    #[test]
    fn simplex_rejects_l2() {
        let mut p = ConicProgram::new();
        let x = p.add_block("x", 1, 1);
        p.add_norm_term(vec![LinExpr::from(x.idx(0))], Norm::L2);
        let err = gw(Backend::Simplex).solve_conic_program(&p).unwrap_err();
        assert!(matches!(err, Error::BackendUnsupported(_)));
        let err = gw(Backend::Auto).solve_linear_program(&p).unwrap_err();
        assert!(matches!(err, Error::Model(_)));
    }

    #[test]
    fn config_keys() {
        let mut c = SolverConfig::default();
        c.set("solver.backend", "clarabel").unwrap();
        c.set("solver.feas_tol", "1e-6").unwrap();
        assert_eq!(c.backend, Backend::Clarabel);
        assert_eq!(c.feas_tol, 1e-6);
        assert!(c.set("solver.feas_tol", "-1").is_err());
        assert!(c.set("solver.colour", "red").is_err());
        assert!("gurobi".parse::<Backend>().is_err());
    }
}
