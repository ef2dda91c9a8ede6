use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::solver::{ConicProgram, LinExpr, SolveStatus, SolverGateway};

/// Convex polytope `{ y : A y <= b }`.
#[derive(Debug, Clone, PartialEq)]
pub struct HPolytope {
    a: DMatrix<f64>,
    b: DVector<f64>,
    label: Option<String>,
}

impl HPolytope {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::DimensionMismatch(format!(
                "constraint matrix has {} rows but bound vector has {} entries",
                a.nrows(),
                b.len()
            )));
        }
        Ok(Self { a, b, label: None })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    /// Axis-aligned box `lo <= y <= hi` written as `(I; -I) y <= (hi; -lo)`.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch("box bounds differ in length".into()));
        }
        let n = lo.len();
        let eye = DMatrix::<f64>::identity(n, n);
        let mut a = DMatrix::zeros(2 * n, n);
        a.rows_mut(0, n).copy_from(&eye);
        a.rows_mut(n, n).copy_from(&-eye);
        let b = DVector::from_iterator(2 * n, hi.iter().copied().chain(lo.iter().map(|v| -v)));
        Self::new(a, b)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn num_constraints(&self) -> usize {
        self.a.nrows()
    }

    /// Same matrix, new right-hand side.
    pub fn with_rhs(&self, b: DVector<f64>) -> Result<Self> {
        Self::new(self.a.clone(), b)
    }

    /// `max_j (A y - b)_j`.
    pub fn max_violation(&self, y: &DVector<f64>) -> Result<f64> {
        if y.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "point has dimension {} but polytope lives in R^{}",
                y.len(),
                self.dim()
            )));
        }
        Ok((&self.a * y - &self.b).iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v)))
    }

    pub fn is_member(&self, y: &DVector<f64>, tol: f64) -> Result<bool> {
        if tol < 0.0 {
            return Err(Error::Domain("membership tolerance must be nonnegative".into()));
        }
        Ok(self.max_violation(y)? <= tol)
    }

    /// `translation + scale * self`, which keeps the matrix:
    /// `{ y : A y <= A translation + scale b }`.
    pub fn homothet(&self, translation: &DVector<f64>, scale: f64) -> Result<Self> {
        if translation.len() != self.dim() {
            return Err(Error::DimensionMismatch("translation has the wrong dimension".into()));
        }
        if scale < 0.0 {
            return Err(Error::Domain("homothet scale must be nonnegative".into()));
        }
        Self::new(self.a.clone(), &self.a * translation + &self.b * scale)
    }

    /// Cartesian product `P_1 x ... x P_K` with block-diagonal matrix.
    pub fn product(parts: &[&HPolytope]) -> Self {
        let rows: usize = parts.iter().map(|p| p.num_constraints()).sum();
        let cols: usize = parts.iter().map(|p| p.dim()).sum();
        let mut a = DMatrix::zeros(rows, cols);
        let mut b = DVector::zeros(rows);
        let (mut r, mut c) = (0, 0);
        for p in parts {
            a.view_mut((r, c), (p.num_constraints(), p.dim())).copy_from(&p.a);
            b.rows_mut(r, p.num_constraints()).copy_from(&p.b);
            r += p.num_constraints();
            c += p.dim();
        }
        Self { a, b, label: None }
    }

    fn feasibility_program(&self) -> (ConicProgram, crate::solver::Block) {
        let mut prog = ConicProgram::new();
        let y = prog.add_block("y", self.dim(), 1);
        for i in 0..self.num_constraints() {
            let mut row = LinExpr::with_capacity(self.dim());
            for j in 0..self.dim() {
                row.add_term(y.idx(j), self.a[(i, j)]);
            }
            prog.add_le(row, self.b[i]);
        }
        (prog, y)
    }

    /// Maximizer and value of `direction . y` over the polytope.
    pub fn support_point(&self, direction: &DVector<f64>, gw: &SolverGateway) -> Result<(f64, DVector<f64>)> {
        if direction.len() != self.dim() {
            return Err(Error::DimensionMismatch("direction has the wrong dimension".into()));
        }
        let (mut prog, y) = self.feasibility_program();
        for j in 0..self.dim() {
            if direction[j] != 0.0 {
                prog.add_objective(y.idx(j), -direction[j]);
            }
        }
        let sol = gw.solve_linear_program(&prog)?.require_optimal()?;
        let point = DVector::from_column_slice(sol.block_values(&y));
        Ok((direction.dot(&point), point))
    }

    /// `h_P(d) = max { d . y : y in P }`.
    pub fn support_function(&self, direction: &DVector<f64>, gw: &SolverGateway) -> Result<f64> {
        self.support_point(direction, gw).map(|(v, _)| v)
    }

    /// Any point of the polytope, or `None` when it is empty (phase-1 LP).
    pub fn feasible_point(&self, gw: &SolverGateway) -> Result<Option<DVector<f64>>> {
        let (prog, y) = self.feasibility_program();
        let sol = gw.solve_linear_program(&prog)?;
        match sol.status {
            SolveStatus::Optimal => Ok(Some(DVector::from_column_slice(sol.block_values(&y)))),
            SolveStatus::Infeasible => Ok(None),
            s => Err(Error::Solver(s)),
        }
    }

    pub fn is_empty(&self, gw: &SolverGateway) -> Result<bool> {
        Ok(self.feasible_point(gw)?.is_none())
    }
}

/// Finite point set standing for its convex hull.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VPolytope {
    pub vertices: Vec<DVector<f64>>,
}

impl VPolytope {
    pub fn new(vertices: Vec<DVector<f64>>) -> Self {
        Self { vertices }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vertices.first().map_or(0, |v| v.len())
    }

    /// `max_v direction . v`.
    pub fn support_function(&self, direction: &DVector<f64>) -> f64 {
        self.vertices.iter().map(|v| direction.dot(v)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// True when both hold the same points up to `tol` (order ignored).
    pub fn same_points(&self, other: &VPolytope, tol: f64) -> bool {
        let covered = |a: &VPolytope, b: &VPolytope| a.vertices.iter().all(|v| b.vertices.iter().any(|w| (v - w).norm() <= tol));
        covered(self, other) && covered(other, self)
    }
}

/// `{ y : A y <= sum_i b_i }`, a superset of the Minkowski sum of sets that
/// share the matrix `A`.
pub fn aggregate_outer_bound(sets: &[&HPolytope]) -> Result<HPolytope> {
    let first = sets.first().ok_or_else(|| Error::Domain("no sets to aggregate".into()))?;
    let mut b = DVector::zeros(first.num_constraints());
    for s in sets {
        if s.a != first.a {
            return Err(Error::DimensionMismatch("sets do not share a constraint matrix".into()));
        }
        b += &s.b;
    }
    HPolytope::new(first.a.clone(), b)
}
