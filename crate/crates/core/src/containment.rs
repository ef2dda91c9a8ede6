//! AH-polytope in H-polytope containment.
//!
//! `gamma + Gamma X` lies in `Y = { y : H_y y <= h_y }` for a nonempty
//! `X = { x : H_x x <= h_x }` exactly when some `Lambda >= 0` satisfies
//! `Lambda H_x = H_y Gamma` and `Lambda h_x <= h_y - H_y gamma`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::polytope::HPolytope;
use crate::solver::{Block, ConicProgram, LinExpr, SolveStatus, SolverGateway};

/// Witness `(Lambda, gamma, Gamma)` of a containment.
#[derive(Debug, Clone, PartialEq)]
pub struct ContainmentCertificate {
    pub lambda: DMatrix<f64>,
    pub gamma: DVector<f64>,
    pub gamma_map: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContainmentOutcome {
    Contained(ContainmentCertificate),
    NotContained,
}

impl ContainmentOutcome {
    pub fn is_contained(&self) -> bool {
        matches!(self, ContainmentOutcome::Contained(_))
    }

    pub fn certificate(&self) -> Option<&ContainmentCertificate> {
        match self {
            ContainmentOutcome::Contained(c) => Some(c),
            ContainmentOutcome::NotContained => None,
        }
    }
}

/// Residuals of the three certificate conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertificateResiduals {
    /// Smallest entry of `Lambda`.
    pub min_lambda: f64,
    /// `max |Lambda H_x - H_y Gamma|`.
    pub map_residual: f64,
    /// `max (Lambda h_x - h_y + H_y gamma)`, floored at zero.
    pub bound_violation: f64,
    /// `1 + ||H_y||_inf`, the scale of `map_residual`.
    pub map_scale: f64,
    /// `1 + ||h_y||_inf`, the scale of `bound_violation`.
    pub bound_scale: f64,
}

impl CertificateResiduals {
    pub fn within(&self, tol: f64) -> bool {
        self.min_lambda >= -tol && self.map_residual <= tol * self.map_scale && self.bound_violation <= tol * self.bound_scale
    }
}

/// Matrix `infinity` norm (largest absolute row sum).
pub(crate) fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

pub fn certificate_residuals(cert: &ContainmentCertificate, x: &HPolytope, y: &HPolytope) -> Result<CertificateResiduals> {
    let (my, mx) = (y.num_constraints(), x.num_constraints());
    if cert.lambda.shape() != (my, mx) || cert.gamma.len() != y.dim() || cert.gamma_map.shape() != (y.dim(), x.dim()) {
        return Err(Error::DimensionMismatch(format!(
            "certificate shapes Lambda {:?}, gamma {}, Gamma {:?} do not fit X in R^{} ({} rows) and Y in R^{} ({} rows)",
            cert.lambda.shape(),
            cert.gamma.len(),
            cert.gamma_map.shape(),
            x.dim(),
            mx,
            y.dim(),
            my
        )));
    }
    let min_lambda = cert.lambda.iter().copied().fold(f64::INFINITY, f64::min);
    let map_residual = (&cert.lambda * x.a() - y.a() * &cert.gamma_map).amax();
    let slack = &cert.lambda * x.b() - y.b() + y.a() * &cert.gamma;
    let bound_violation = slack.iter().copied().fold(0.0, f64::max);
    Ok(CertificateResiduals {
        min_lambda: if min_lambda.is_finite() { min_lambda } else { 0.0 },
        map_residual,
        bound_violation,
        map_scale: 1.0 + inf_norm(y.a()),
        bound_scale: 1.0 + y.b().amax(),
    })
}

/// Pure arithmetic check of the certificate at tolerance `tol`.
pub fn verify_certificate(cert: &ContainmentCertificate, x: &HPolytope, y: &HPolytope, tol: f64) -> Result<bool> {
    if tol < 0.0 {
        return Err(Error::Domain("verification tolerance must be nonnegative".into()));
    }
    Ok(certificate_residuals(cert, x, y)?.within(tol))
}

/// Affine-map term that is either data or a decision block.
#[derive(Clone, Copy)]
pub(crate) enum MatTerm<'a> {
    Fixed(&'a DMatrix<f64>),
    Var(&'a Block),
}

#[derive(Clone, Copy)]
pub(crate) enum VecTerm<'a> {
    Fixed(&'a DVector<f64>),
    Var(&'a Block),
}

/// One summand `Gamma_k X_k` of a stacked left-hand side.
pub(crate) struct SumPart<'a> {
    pub lambda: &'a Block,
    pub hx: &'a DMatrix<f64>,
    pub bx: &'a DVector<f64>,
    pub map: MatTerm<'a>,
}

pub(crate) fn sparse_cols(m: &DMatrix<f64>) -> Vec<Vec<(usize, f64)>> {
    (0..m.ncols()).map(|c| (0..m.nrows()).map(|r| (r, m[(r, c)])).filter(|(_, v)| *v != 0.0).collect()).collect()
}

pub(crate) fn sparse_rows(m: &DMatrix<f64>) -> Vec<Vec<(usize, f64)>> {
    (0..m.nrows()).map(|r| (0..m.ncols()).map(|c| (c, m[(r, c)])).filter(|(_, v)| *v != 0.0).collect()).collect()
}

/// Add the containment conditions for
/// `gamma + sum_k Gamma_k X_k  in  { y : hy y <= by }`, i.e. the stacked
/// form with the product set `X_1 x ... x X_K` and `[Gamma_1 ... Gamma_K]`.
pub(crate) fn encode_sum_in_h(prog: &mut ConicProgram, hy: &DMatrix<f64>, by: &DVector<f64>, gamma: VecTerm, parts: &[SumPart]) {
    let my = hy.nrows();
    let hy_rows = sparse_rows(hy);
    for part in parts {
        prog.nonneg(part.lambda);
        let hx_cols = sparse_cols(part.hx);
        let map_fixed = match part.map {
            MatTerm::Fixed(g) => Some(hy * g),
            MatTerm::Var(_) => None,
        };
        for r in 0..my {
            for (c, col) in hx_cols.iter().enumerate() {
                let mut e = LinExpr::with_capacity(col.len() + hy_rows[r].len());
                for &(j, v) in col {
                    e.add_term(part.lambda.at(r, j), v);
                }
                let rhs = match (&part.map, &map_fixed) {
                    (MatTerm::Var(g), _) => {
                        for &(l, v) in &hy_rows[r] {
                            e.add_term(g.at(l, c), -v);
                        }
                        0.0
                    }
                    (_, Some(hg)) => hg[(r, c)],
                    _ => unreachable!(),
                };
                prog.add_eq(e, rhs);
            }
        }
    }
    let gamma_fixed = match gamma {
        VecTerm::Fixed(g) => Some(hy * g),
        VecTerm::Var(_) => None,
    };
    for r in 0..my {
        let mut e = LinExpr::new();
        for part in parts {
            for (j, &bj) in part.bx.iter().enumerate() {
                e.add_term(part.lambda.at(r, j), bj);
            }
        }
        let mut rhs = by[r];
        match (gamma, &gamma_fixed) {
            (VecTerm::Var(g), _) => {
                for &(l, v) in &hy_rows[r] {
                    e.add_term(g.idx(l), v);
                }
            }
            (_, Some(hg)) => rhs -= hg[r],
            _ => unreachable!(),
        }
        prog.add_le(e, rhs);
    }
}

/// Decide `gamma + Gamma X  subset of  Y` and return a certificate when it holds.
pub fn check_ah_in_h(
    gamma: &DVector<f64>,
    gamma_map: &DMatrix<f64>,
    x: &HPolytope,
    y: &HPolytope,
    gw: &SolverGateway,
) -> Result<ContainmentOutcome> {
    if gamma.len() != y.dim() || gamma_map.shape() != (y.dim(), x.dim()) {
        return Err(Error::DimensionMismatch(format!(
            "affine map R^{} -> R^{} with offset of length {} does not fit X in R^{} and Y in R^{}",
            gamma_map.ncols(),
            gamma_map.nrows(),
            gamma.len(),
            x.dim(),
            y.dim()
        )));
    }
    if x.is_empty(gw)? {
        return Err(Error::EmptyInputSet);
    }
    let mut prog = ConicProgram::new();
    let lambda = prog.add_block("lambda", y.num_constraints(), x.num_constraints());
    encode_sum_in_h(
        &mut prog,
        y.a(),
        y.b(),
        VecTerm::Fixed(gamma),
        &[SumPart { lambda: &lambda, hx: x.a(), bx: x.b(), map: MatTerm::Fixed(gamma_map) }],
    );
    let sol = gw.solve_linear_program(&prog)?;
    match sol.status {
        SolveStatus::Optimal => {
            let lam = sol.block_matrix(&lambda).map(|v| v.max(0.0));
            Ok(ContainmentOutcome::Contained(ContainmentCertificate {
                lambda: lam,
                gamma: gamma.clone(),
                gamma_map: gamma_map.clone(),
            }))
        }
        SolveStatus::Infeasible => Ok(ContainmentOutcome::NotContained),
        s => Err(Error::Solver(s)),
    }
}
