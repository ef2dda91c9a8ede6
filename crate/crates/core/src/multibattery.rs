//! Multi-battery inner approximation of the aggregate flexibility set.
//!
//! The aggregate `U = sum_i U_i` is approximated from inside by
//! `B = sum_k mu_k + sigma_k B_k`, where every base set `B_k` shares the
//! grid's constraint matrix `A`. Containment `B subset U` is enforced through
//! the stacked certificate conditions, and the objective is the surrogate
//! `sum_k || A mu_k + (sigma_k - |C_k|) b_k ||`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::Clustering;
use crate::containment::{encode_sum_in_h, sparse_cols, sparse_rows, MatTerm, SumPart, VecTerm};
use crate::error::{Error, Result};
use crate::polytope::{ChargingGrid, HPolytope, VPolytope};
use crate::solver::{Block, ConicProgram, LinExpr, Norm, SolveStatus, SolverGateway, Var};

/// Tolerance at which every returned model is audited.
pub const AUDIT_TOL: f64 = 1e-6;
/// Base-set membership tolerance required before disaggregation.
pub const BASE_MEMBERSHIP_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Joint,
    ClusterWise,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Joint => "joint",
            Variant::ClusterWise => "clusterwise",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "joint" => Ok(Variant::Joint),
            "clusterwise" => Ok(Variant::ClusterWise),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// `mu + sum_k sigma_k B_k` in the grid's active coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiBatteryModel {
    pub grid: ChargingGrid,
    pub bases: Vec<HPolytope>,
    pub mu: Vec<DVector<f64>>,
    pub sigma: Vec<f64>,
    pub cluster_sizes: Vec<usize>,
    pub assignments: Vec<usize>,
}

impl MultiBatteryModel {
    pub fn k(&self) -> usize {
        self.bases.len()
    }

    pub fn mu_total(&self) -> DVector<f64> {
        self.mu.iter().fold(DVector::zeros(self.grid.periods()), |acc, m| acc + m)
    }

    /// `mu_k + sigma_k B_k = { y : A y <= A mu_k + sigma_k b_k }`.
    pub fn homothet(&self, k: usize) -> Result<HPolytope> {
        self.bases[k].homothet(&self.mu[k], self.sigma[k].max(0.0))
    }

    /// Base set `k` in power coordinates.
    pub fn base_power(&self, k: usize) -> Result<HPolytope> {
        HPolytope::new(self.grid.power_matrix().clone(), self.bases[k].b().clone())
    }

    /// `mu_k + sigma_k B_k` in power coordinates.
    pub fn homothet_power(&self, k: usize) -> Result<HPolytope> {
        self.base_power(k)?.homothet(&self.grid.to_power(&self.mu[k]), self.sigma[k].max(0.0))
    }

    pub fn mu_power(&self) -> DVector<f64> {
        self.grid.to_power(&self.mu_total())
    }

    /// Aggregate profile `mu + sum_k sigma_k v_k` in power coordinates, with
    /// `v_k` in the model's coordinates.
    pub fn aggregate(&self, v_tilde: &[DVector<f64>]) -> DVector<f64> {
        let mut y = self.mu_total();
        for (k, v) in v_tilde.iter().enumerate() {
            y += v * self.sigma[k];
        }
        self.grid.to_power(&y)
    }

    /// `h_B(d) = d . mu + sum_k sigma_k h_{B_k}(d)` for a power direction.
    pub fn support_function(&self, direction: &DVector<f64>, gw: &SolverGateway) -> Result<f64> {
        let mut s = direction.dot(&self.mu_power());
        for k in 0..self.k() {
            if self.sigma[k] > 0.0 {
                s += self.sigma[k] * self.base_power(k)?.support_function(direction, gw)?;
            }
        }
        Ok(s)
    }

    /// Exact vertex list of `B` in power coordinates (desk scale only).
    pub fn vertices(&self, gw: &SolverGateway) -> Result<VPolytope> {
        let parts = (0..self.k()).map(|k| self.homothet_power(k)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&HPolytope> = parts.iter().collect();
        crate::polytope::minkowski_sum_oracle(&refs, gw)
    }
}

/// Per-EV translations, maps and (optionally) certificates, in the model's
/// coordinates. `gamma_map[k][i]` and `lambda[k][i]` are indexed by base
/// set, then EV.
#[derive(Debug, Clone, PartialEq)]
pub struct DisaggregationMap {
    pub gamma: Vec<DVector<f64>>,
    pub gamma_map: Vec<Vec<DMatrix<f64>>>,
    pub lambda: Option<Vec<Vec<DMatrix<f64>>>>,
}

impl DisaggregationMap {
    pub fn n(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApproximationResult {
    pub model: MultiBatteryModel,
    pub map: DisaggregationMap,
    pub surrogate_objective: f64,
    pub status: SolveStatus,
    pub variant: Variant,
    pub norm: Norm,
    /// Wall time of the conic solves.
    pub solve_ms: f64,
    /// Wall time of the certificate re-derivation.
    pub certify_ms: f64,
    pub audit: InvariantReport,
}

/// One conic program together with the blocks it declares.
#[derive(Debug, Clone)]
pub struct SubProgram {
    pub program: ConicProgram,
    clusters: Vec<usize>,
    evs: Vec<usize>,
    mu: Vec<Block>,
    sigma: Block,
    gamma: Vec<Block>,
    gamma_map: Vec<Vec<Block>>,
}

impl SubProgram {
    pub fn clusters(&self) -> &[usize] {
        &self.clusters
    }

    pub fn evs(&self) -> &[usize] {
        &self.evs
    }
}

/// The approximation problem: one program (joint) or one per cluster.
#[derive(Debug, Clone)]
pub struct ApproxProgram {
    pub variant: Variant,
    pub norm: Norm,
    pub parts: Vec<SubProgram>,
}

impl ApproxProgram {
    pub fn num_vars(&self) -> usize {
        self.parts.iter().map(|p| p.program.num_vars()).sum()
    }
}

fn check_inputs(h_list: &[DVector<f64>], clustering: &Clustering, grid: &ChargingGrid) -> Result<()> {
    let m = grid.num_constraints();
    if h_list.is_empty() {
        return Err(Error::Domain("no flexibility sets".into()));
    }
    if let Some(h) = h_list.iter().find(|h| h.len() != m) {
        return Err(Error::DimensionMismatch(format!("right-hand side of length {} for {} constraints", h.len(), m)));
    }
    if clustering.assignments.len() != h_list.len() {
        return Err(Error::DimensionMismatch(format!(
            "clustering covers {} EVs but {} sets were given",
            clustering.assignments.len(),
            h_list.len()
        )));
    }
    if let Some(b) = clustering.centroids.iter().find(|b| b.len() != m) {
        return Err(Error::DimensionMismatch(format!("centroid of length {} for {} constraints", b.len(), m)));
    }
    Ok(())
}

/// Implicit equalities of every EV set and every base set.
#[derive(Debug, Clone)]
pub(crate) struct RowSplits {
    evs: Vec<SplitRows>,
    bases: Vec<SplitRows>,
}

impl RowSplits {
    fn new(h_list: &[DVector<f64>], clustering: &Clustering, grid: &ChargingGrid, gw: &SolverGateway) -> Result<Self> {
        let a = grid.constraint_matrix();
        let simplex = simplex_gateway(gw)?;
        let split = |b: &DVector<f64>| SplitRows::new(a, b, &simplex);
        Ok(RowSplits {
            evs: h_list.par_iter().map(split).collect::<Result<_>>()?,
            bases: clustering.centroids.par_iter().map(split).collect::<Result<_>>()?,
        })
    }
}

/// How the containment conditions are written out.
#[derive(Debug, Clone, Copy)]
enum Encoding<'a> {
    /// Rows exactly as stated: one nonnegative `Lambda_{k,i}` per pair.
    Literal,
    /// Implicit equalities of `U_i` become equality rows whose certificates
    /// only use the implicit equalities of `B_k`, and those of `B_k` get
    /// one free multiplier each. Same feasible maps as the literal form, but
    /// the interior-point method gets a strictly feasible point.
    Reduced(&'a RowSplits),
}

/// Program over the clusters `ks` and the EVs `evs` (all EVs of those
/// clusters).
fn build_part(
    h_list: &[DVector<f64>],
    clustering: &Clustering,
    grid: &ChargingGrid,
    norm: Norm,
    ks: &[usize],
    evs: &[usize],
    encoding: Encoding,
) -> SubProgram {
    let t = grid.periods();
    let m = grid.num_constraints();
    let a = grid.constraint_matrix();
    let mut prog = ConicProgram::new();
    let mu: Vec<Block> = ks.iter().map(|k| prog.add_block(format!("mu[{k}]"), t, 1)).collect();
    let sigma = prog.add_block("sigma", ks.len(), 1);
    prog.nonneg(&sigma);
    let gamma: Vec<Block> = evs.iter().map(|i| prog.add_block(format!("gamma[{i}]"), t, 1)).collect();
    let gamma_map: Vec<Vec<Block>> =
        ks.iter().map(|k| evs.iter().map(|i| prog.add_block(format!("Gamma[{k},{i}]"), t, t)).collect()).collect();

    // sum_k mu_k = sum_i gamma_i
    for r in 0..t {
        let mut e = LinExpr::new();
        for b in &mu {
            e.add_term(b.idx(r), 1.0);
        }
        for g in &gamma {
            e.add_term(g.idx(r), -1.0);
        }
        prog.add_eq(e, 0.0);
    }
    // sum_i Gamma_{k,i} = sigma_k I
    for (lk, row) in gamma_map.iter().enumerate() {
        for r in 0..t {
            for c in 0..t {
                let mut e = LinExpr::with_capacity(row.len() + 1);
                for g in row {
                    e.add_term(g.at(r, c), 1.0);
                }
                if r == c {
                    e.add_term(sigma.idx(lk), -1.0);
                }
                prog.add_eq(e, 0.0);
            }
        }
    }
    // Lambda_{k,i} A = A Gamma_{k,i},  sum_k Lambda_{k,i} b_k <= h_i - A gamma_i
    match encoding {
        Encoding::Literal => {
            let lambda: Vec<Vec<Block>> =
                ks.iter().map(|k| evs.iter().map(|i| prog.add_block(format!("Lambda[{k},{i}]"), m, m)).collect()).collect();
            for (li, &i) in evs.iter().enumerate() {
                let parts: Vec<SumPart> = ks
                    .iter()
                    .enumerate()
                    .map(|(lk, &k)| SumPart {
                        lambda: &lambda[lk][li],
                        hx: a,
                        bx: &clustering.centroids[k],
                        map: MatTerm::Var(&gamma_map[lk][li]),
                    })
                    .collect();
                encode_sum_in_h(&mut prog, a, &h_list[i], VecTerm::Var(&gamma[li]), &parts);
            }
        }
        Encoding::Reduced(splits) => {
            let bases: Vec<BaseRows> =
                ks.iter().map(|&k| BaseRows { b: &clustering.centroids[k], rows: &splits.bases[k] }).collect();
            // On the affine hull of B_k, the columns of Gamma_{k,i} at the
            // pivots of the hull's equations act as translations, which
            // gamma_i can absorb. Only the first EV keeps them.
            for (lk, base) in bases.iter().enumerate() {
                for p in pivot_columns(a, &base.rows.flat) {
                    for g in gamma_map[lk].iter().skip(1) {
                        for l in 0..t {
                            prog.add_eq(LinExpr::new().plus(g.at(l, p), 1.0), 0.0);
                        }
                    }
                }
            }
            for (li, &i) in evs.iter().enumerate() {
                let maps: Vec<&Block> = gamma_map.iter().map(|row| &row[li]).collect();
                encode_reduced(&mut prog, a, &h_list[i], &splits.evs[i], &gamma[li], &bases, &maps, ks, i);
            }
        }
    }
    // sum_k || A mu_k + (sigma_k - |C_k|) b_k ||
    let a_rows = sparse_rows(a);
    for (lk, &k) in ks.iter().enumerate() {
        let b = &clustering.centroids[k];
        let size = clustering.sizes[k] as f64;
        let rows = (0..m)
            .map(|r| {
                let mut e = LinExpr::constant(-size * b[r]);
                for &(l, v) in &a_rows[r] {
                    e.add_term(mu[lk].idx(l), v);
                }
                e.add_term(sigma.idx(lk), b[r]);
                e
            })
            .collect();
        prog.add_norm_term(rows, norm);
    }
    SubProgram { program: prog, clusters: ks.to_vec(), evs: evs.to_vec(), mu, sigma, gamma, gamma_map }
}

/// Rows of a polytope split into implicit equalities and the rest, with a
/// point that is strictly inside every other row.
#[derive(Debug, Clone)]
pub(crate) struct SplitRows {
    /// Rows with positive slack somewhere in the set.
    open: Vec<usize>,
    /// Linearly independent implicit equalities; together they carry the
    /// affine hull of the set.
    flat: Vec<usize>,
    inner: DVector<f64>,
    slack: DVector<f64>,
}

/// Slack below which a row counts as tight.
const TIGHT_TOL: f64 = 1e-9;

impl SplitRows {
    /// Finds the implicit equalities by repeatedly maximizing the (capped)
    /// slack of the rows not yet seen loose; every round either frees a row
    /// or proves the remaining ones tight.
    pub(crate) fn new(a: &DMatrix<f64>, b: &DVector<f64>, simplex: &SolverGateway) -> Result<Self> {
        let (m, t) = a.shape();
        let scale = 1.0 + b.amax();
        let mut loose = vec![false; m];
        let mut points: Vec<DVector<f64>> = Vec::new();
        loop {
            let mut prog = ConicProgram::new();
            let y = prog.add_block("y", t, 1);
            let pending: Vec<usize> = (0..m).filter(|&r| !loose[r]).collect();
            let tau = prog.add_block("tau", pending.len(), 1);
            let mut slot = vec![None; m];
            for (j, &r) in pending.iter().enumerate() {
                slot[r] = Some(j);
            }
            for r in 0..m {
                let mut e = LinExpr::new();
                for c in 0..t {
                    if a[(r, c)] != 0.0 {
                        e.add_term(y.idx(c), a[(r, c)]);
                    }
                }
                if let Some(j) = slot[r] {
                    e.add_term(tau.idx(j), 1.0);
                    prog.add_le(LinExpr::new().plus(tau.idx(j), 1.0), 1.0);
                    prog.add_objective(tau.idx(j), -1.0);
                }
                prog.add_le(e, b[r]);
            }
            prog.nonneg(&tau);
            let sol = simplex.solve_linear_program(&prog)?;
            match sol.status {
                SolveStatus::Optimal => {}
                SolveStatus::Infeasible => return Err(Error::EmptyInputSet),
                s => return Err(Error::Solver(s)),
            }
            let mut freed = false;
            for (j, &r) in pending.iter().enumerate() {
                if sol.value(tau.idx(j)) > TIGHT_TOL * scale {
                    loose[r] = true;
                    freed = true;
                }
            }
            points.push(DVector::from_column_slice(sol.block_values(&y)));
            if !freed || pending.is_empty() {
                break;
            }
        }
        let inner = points.iter().fold(DVector::zeros(t), |s, p| s + p) / points.len() as f64;
        let slack = b - a * &inner;
        Ok(SplitRows {
            open: (0..m).filter(|&r| loose[r]).collect(),
            flat: independent_rows(a, (0..m).filter(|&r| !loose[r])),
            inner,
            slack,
        })
    }
}

fn rows_of(a: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), a.ncols(), |i, j| a[(rows[i], j)])
}

/// Orthogonal projector onto the complement of the span of `rows` of `a`.
fn complement_projector(a: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let t = a.ncols();
    let q = rows_of(a, rows);
    match (&q * q.transpose()).try_inverse() {
        Some(g) if q.nrows() > 0 => DMatrix::identity(t, t) - q.transpose() * g * q,
        _ => DMatrix::identity(t, t),
    }
}

/// Pivot columns of the (independent) rows `rows` of `a`.
fn pivot_columns(a: &DMatrix<f64>, rows: &[usize]) -> Vec<usize> {
    let mut m = DMatrix::from_fn(rows.len(), a.ncols(), |i, j| a[(rows[i], j)]);
    let mut used = vec![false; a.ncols()];
    let mut pivots = Vec::with_capacity(rows.len());
    for i in 0..m.nrows() {
        let Some((p, _)) = (0..m.ncols()).filter(|&j| !used[j]).map(|j| (j, m[(i, j)].abs())).max_by(|x, y| x.1.total_cmp(&y.1))
        else {
            break;
        };
        used[p] = true;
        pivots.push(p);
        let piv = m.row(i).clone_owned() / m[(i, p)];
        for r in i + 1..m.nrows() {
            let f = m[(r, p)];
            if f != 0.0 {
                let upd = m.row(r) - &piv * f;
                m.set_row(r, &upd);
            }
        }
    }
    pivots
}

/// Greedy subset of `rows` whose rows of `a` are linearly independent. The
/// others are combinations of these, so their equalities are implied.
fn independent_rows(a: &DMatrix<f64>, rows: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for r in rows {
        let mut v = a.row(r).transpose();
        for q in &basis {
            let d = v.dot(q);
            v -= q * d;
        }
        let n = v.norm();
        if n > 1e-9 * (1.0 + a.row(r).norm()) {
            basis.push(v / n);
            keep.push(r);
        }
    }
    keep
}

struct BaseRows<'a> {
    b: &'a DVector<f64>,
    rows: &'a SplitRows,
}

/// Row `r` of a certificate: `sum_j lam_j a_j = Gamma^T a_r`.
fn add_map_rows(prog: &mut ConicProgram, a: &DMatrix<f64>, a_row: &[(usize, f64)], lam: &[(Var, usize)], g: &Block) {
    for c in 0..a.ncols() {
        let mut e = LinExpr::with_capacity(lam.len() + a_row.len());
        for &(v, j) in lam {
            let coef = a[(j, c)];
            if coef != 0.0 {
                e.add_term(v, coef);
            }
        }
        for &(l, coef) in a_row {
            e.add_term(g.at(l, c), -coef);
        }
        prog.add_eq(e, 0.0);
    }
}

/// Reduced containment conditions for
/// `gamma + sum_k Gamma_k B_k  in  { y : a y <= h }`.
#[allow(clippy::too_many_arguments)]
fn encode_reduced(
    prog: &mut ConicProgram,
    a: &DMatrix<f64>,
    h: &DVector<f64>,
    own: &SplitRows,
    gamma: &Block,
    bases: &[BaseRows],
    maps: &[&Block],
    ks: &[usize],
    i: usize,
) {
    let a_rows = sparse_rows(a);
    let mut open_bound: Vec<LinExpr> = own.open.iter().map(|_| LinExpr::new()).collect();
    let mut flat_bound: Vec<LinExpr> = own.flat.iter().map(|_| LinExpr::new()).collect();
    for ((base, g), k) in bases.iter().zip(maps).zip(ks) {
        let lp = prog.add_block(format!("Lambda[{k},{i}]"), own.open.len(), base.rows.open.len());
        prog.nonneg(&lp);
        let lf = prog.add_block(format!("LambdaFlat[{k},{i}]"), own.open.len(), base.rows.flat.len());
        for (ro, &r) in own.open.iter().enumerate() {
            let lam: Vec<(Var, usize)> = base
                .rows
                .open
                .iter()
                .enumerate()
                .map(|(c, &j)| (lp.at(ro, c), j))
                .chain(base.rows.flat.iter().enumerate().map(|(c, &j)| (lf.at(ro, c), j)))
                .collect();
            add_map_rows(prog, a, &a_rows[r], &lam, g);
            for &(v, j) in &lam {
                open_bound[ro].add_term(v, base.b[j]);
            }
        }
        let th = prog.add_block(format!("Theta[{k},{i}]"), own.flat.len(), base.rows.flat.len());
        for (rf, &r) in own.flat.iter().enumerate() {
            let lam: Vec<(Var, usize)> = base.rows.flat.iter().enumerate().map(|(c, &j)| (th.at(rf, c), j)).collect();
            add_map_rows(prog, a, &a_rows[r], &lam, g);
            for &(v, j) in &lam {
                flat_bound[rf].add_term(v, base.b[j]);
            }
        }
    }
    for (mut e, &r) in open_bound.into_iter().zip(&own.open) {
        for &(l, v) in &a_rows[r] {
            e.add_term(gamma.idx(l), v);
        }
        prog.add_le(e, h[r]);
    }
    for (mut e, &r) in flat_bound.into_iter().zip(&own.flat) {
        for &(l, v) in &a_rows[r] {
            e.add_term(gamma.idx(l), v);
        }
        prog.add_eq(e, h[r]);
    }
}

/// Assemble the approximation program(s).
pub fn build_approx_program(
    h_list: &[DVector<f64>],
    clustering: &Clustering,
    grid: &ChargingGrid,
    norm: Norm,
    variant: Variant,
) -> Result<ApproxProgram> {
    assemble(h_list, clustering, grid, norm, variant, Encoding::Literal)
}

fn assemble(
    h_list: &[DVector<f64>],
    clustering: &Clustering,
    grid: &ChargingGrid,
    norm: Norm,
    variant: Variant,
    encoding: Encoding,
) -> Result<ApproxProgram> {
    check_inputs(h_list, clustering, grid)?;
    let parts = match variant {
        Variant::Joint => {
            let ks: Vec<usize> = (0..clustering.k()).collect();
            let evs: Vec<usize> = (0..h_list.len()).collect();
            vec![build_part(h_list, clustering, grid, norm, &ks, &evs, encoding)]
        }
        Variant::ClusterWise => (0..clustering.k())
            .map(|k| build_part(h_list, clustering, grid, norm, &[k], &clustering.members(k), encoding))
            .collect(),
    };
    Ok(ApproxProgram { variant, norm, parts })
}

/// Tightest certificate rows for fixed maps: row `r` of `Lambda_{k,i}`
/// minimizes `lambda . b_k` subject to `A^T lambda = Gamma_{k,i}^T a_r`,
/// `lambda >= 0`, whose value is the support function of `B_k` in the
/// direction `Gamma_{k,i}^T a_r`.
pub fn derive_certificates(
    model: &MultiBatteryModel,
    gamma_map: &[Vec<DMatrix<f64>>],
    gw: &SolverGateway,
) -> Result<Vec<Vec<DMatrix<f64>>>> {
    let a = model.grid.constraint_matrix();
    let (m, t) = a.shape();
    let a_cols = sparse_cols(a);
    let simplex = simplex_gateway(gw)?;
    gamma_map
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let b = model.bases[k].b();
            row.par_iter()
                .map(|g| {
                    let target = a * g;
                    let mut lam = DMatrix::zeros(m, m);
                    for r in 0..m {
                        let dir = target.row(r);
                        if dir.iter().all(|v| *v == 0.0) {
                            continue;
                        }
                        let mut prog = ConicProgram::new();
                        let x = prog.add_block("lambda", m, 1);
                        prog.nonneg(&x);
                        for c in 0..t {
                            let mut e = LinExpr::with_capacity(a_cols[c].len());
                            for &(j, v) in &a_cols[c] {
                                e.add_term(x.idx(j), v);
                            }
                            prog.add_eq(e, dir[c]);
                        }
                        for j in 0..m {
                            prog.add_objective(x.idx(j), b[j]);
                        }
                        let sol = simplex.solve_linear_program(&prog)?.require_optimal()?;
                        for (j, v) in sol.block_values(&x).iter().enumerate() {
                            lam[(r, j)] = v.max(0.0);
                        }
                    }
                    Ok(lam)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

fn simplex_gateway(gw: &SolverGateway) -> Result<SolverGateway> {
    SolverGateway::new(crate::solver::SolverConfig { backend: crate::solver::Backend::Simplex, ..gw.config().clone() })
}

/// Move each `gamma_i` to satisfy `A gamma_i <= h_i - sum_k Lambda_{k,i} b_k`
/// as well as possible (interior-point output only meets it up to the
/// solver tolerance), staying close to the current value. Implicit
/// equalities are kept exact; what is left on the other rows goes to
/// [`pull_inside`]. Returns the shifts `gamma_new - gamma_old`.
fn polish_translations(
    model: &MultiBatteryModel,
    lambda: &[Vec<DMatrix<f64>>],
    h_list: &[DVector<f64>],
    gamma: &mut [DVector<f64>],
    splits: &RowSplits,
    gw: &SolverGateway,
) -> Result<Vec<DVector<f64>>> {
    let a = model.grid.constraint_matrix();
    let (m, t) = a.shape();
    let simplex = simplex_gateway(gw)?;
    let shifts = gamma
        .par_iter()
        .enumerate()
        .map(|(i, g0)| {
            let mut room = h_list[i].clone();
            for (lam, base) in lambda.iter().zip(&model.bases) {
                room -= &lam[i] * base.b();
            }
            if (a * g0 - &room).max() <= 0.0 {
                return Ok(DVector::zeros(t));
            }
            let mut open = vec![false; m];
            for &r in &splits.evs[i].open {
                open[r] = true;
            }
            // smallest uniform violation
            let mut prog = ConicProgram::new();
            let g = prog.add_block("gamma", t, 1);
            let slack = prog.add_block("t", 1, 1);
            for r in 0..m {
                let mut e = LinExpr::new();
                if open[r] {
                    e.add_term(slack.idx(0), -1.0);
                }
                for c in 0..t {
                    if a[(r, c)] != 0.0 {
                        e.add_term(g.idx(c), a[(r, c)]);
                    }
                }
                prog.add_le(e, room[r]);
            }
            prog.add_objective(slack.idx(0), 1.0);
            let first = simplex.solve_linear_program(&prog)?.require_optimal()?;
            let worst = first.value(slack.idx(0)).max(0.0);
            let fallback = DVector::from_column_slice(first.block_values(&g)) - g0;
            // closest point with that violation
            let mut prog = ConicProgram::new();
            let g = prog.add_block("gamma", t, 1);
            let dist = prog.add_block("s", 1, 1);
            for r in 0..m {
                let mut e = LinExpr::new();
                for c in 0..t {
                    if a[(r, c)] != 0.0 {
                        e.add_term(g.idx(c), a[(r, c)]);
                    }
                }
                prog.add_le(e, if open[r] { room[r] + worst } else { room[r] });
            }
            for c in 0..t {
                prog.add_le(LinExpr::new().plus(g.idx(c), 1.0).plus(dist.idx(0), -1.0), g0[c]);
                prog.add_ge(LinExpr::new().plus(g.idx(c), 1.0).plus(dist.idx(0), 1.0), g0[c]);
            }
            prog.add_objective(dist.idx(0), 1.0);
            // Near-degenerate feasible regions can be rejected by the simplex
            // tolerance; the first solution already attains `worst`.
            let sol = simplex.solve_linear_program(&prog)?;
            if sol.status == SolveStatus::Infeasible {
                return Ok(fallback);
            }
            let sol = sol.require_optimal()?;
            Ok(DVector::from_column_slice(sol.block_values(&g)) - g0)
        })
        .collect::<Result<Vec<_>>>()?;
    for (g, d) in gamma.iter_mut().zip(&shifts) {
        *g += d;
    }
    Ok(shifts)
}

/// Remove the violation an interior-point solution leaves in
/// `A gamma_i + sum_k Lambda_{k,i} b_k <= h_i`: scale every `Gamma_{k,i}`,
/// `Lambda_{k,i}` and `sigma_k` of the part by `1 - eps` and move each
/// `gamma_i` the fraction `eps` toward an inner point of `U_i`. This keeps
/// every equality and costs `O(eps)` in the objective.
fn pull_inside(
    part: &SubProgram,
    model: &mut MultiBatteryModel,
    gamma: &mut [DVector<f64>],
    gamma_map: &mut [Vec<DMatrix<f64>>],
    lambda: &mut [Vec<DMatrix<f64>>],
    h_list: &[DVector<f64>],
    splits: &RowSplits,
) -> Result<()> {
    let a = model.grid.constraint_matrix();
    let mut eps: f64 = 0.0;
    for &i in &part.evs {
        let mut lhs = a * &gamma[i] - &h_list[i];
        for &k in &part.clusters {
            lhs += &lambda[k][i] * model.bases[k].b();
        }
        let split = &splits.evs[i];
        for &r in &split.open {
            if lhs[r] > 0.0 {
                eps = eps.max(lhs[r] / (lhs[r] + split.slack[r]));
            }
        }
    }
    if eps == 0.0 {
        return Ok(());
    }
    let eps = (eps * 1.01).min(1.0);
    let keep = 1.0 - eps;
    let t = model.grid.periods();
    let mut moved = DVector::zeros(t);
    for &i in &part.evs {
        let target = &gamma[i] * keep + &splits.evs[i].inner * eps;
        moved += &target - &gamma[i];
        gamma[i] = target;
        for &k in &part.clusters {
            gamma_map[k][i] *= keep;
            lambda[k][i] *= keep;
        }
    }
    let share = moved / part.clusters.len() as f64;
    for &k in &part.clusters {
        model.sigma[k] *= keep;
        model.mu[k] += &share;
    }
    Ok(())
}

/// Largest residual of each certificate condition group.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InvariantReport {
    /// `|| sum_i gamma_i - sum_k mu_k ||_inf`
    pub translation: f64,
    /// `max_k || sum_i Gamma_{k,i} - sigma_k I ||_max`
    pub scaling: f64,
    /// Most negative entry of any `Lambda` (0 when none is negative).
    pub lambda_negativity: f64,
    /// `max || Lambda A - A Gamma ||_max`
    pub map: f64,
    /// `max (sum_k Lambda_{k,i} b_k - h_i + A gamma_i)`, floored at 0.
    pub bound: f64,
    /// Most negative `sigma_k` (0 when none is negative).
    pub sigma_negativity: f64,
}

impl InvariantReport {
    pub fn max_residual(&self) -> f64 {
        [self.translation, self.scaling, self.lambda_negativity, self.map, self.bound, self.sigma_negativity]
            .into_iter()
            .fold(0.0, f64::max)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.max_residual() <= tol
    }
}

/// Residuals of all certificate conditions given explicit `Lambda`s.
pub fn audit(
    model: &MultiBatteryModel,
    map: &DisaggregationMap,
    h_list: &[DVector<f64>],
    lambda: &[Vec<DMatrix<f64>>],
) -> Result<InvariantReport> {
    let t = model.grid.periods();
    let a = model.grid.constraint_matrix();
    if h_list.len() != map.n() {
        return Err(Error::DimensionMismatch(format!("{} sets for a map over {} EVs", h_list.len(), map.n())));
    }
    let mut rep = InvariantReport {
        translation: (map.gamma.iter().fold(DVector::zeros(t), |s, g| s + g) - model.mu_total()).amax(),
        ..Default::default()
    };
    for (k, row) in map.gamma_map.iter().enumerate() {
        let sum = row.iter().fold(DMatrix::zeros(t, t), |s, g| s + g);
        rep.scaling = rep.scaling.max((sum - DMatrix::identity(t, t) * model.sigma[k]).amax());
        rep.sigma_negativity = rep.sigma_negativity.max(-model.sigma[k]);
    }
    for (i, h) in h_list.iter().enumerate() {
        let mut lhs = a * &map.gamma[i] - h;
        for ((lam, maps), base) in lambda.iter().zip(&map.gamma_map).zip(&model.bases) {
            let lam = &lam[i];
            rep.lambda_negativity = rep.lambda_negativity.max(-lam.min());
            rep.map = rep.map.max((lam * a - a * &maps[i]).amax());
            lhs += lam * base.b();
        }
        rep.bound = rep.bound.max(lhs.max());
    }
    Ok(rep)
}

/// Audit a model, re-deriving certificates when the map carries none.
pub fn verify_model(
    model: &MultiBatteryModel,
    map: &DisaggregationMap,
    h_list: &[DVector<f64>],
    gw: &SolverGateway,
) -> Result<InvariantReport> {
    match &map.lambda {
        Some(l) => audit(model, map, h_list, l),
        None => audit(model, map, h_list, &derive_certificates(model, &map.gamma_map, gw)?),
    }
}

/// `sum_k || A mu_k + (sigma_k - |C_k|) b_k ||` in `norm`.
pub fn surrogate_value(model: &MultiBatteryModel, norm: Norm) -> f64 {
    let a = model.grid.constraint_matrix();
    (0..model.k())
        .map(|k| {
            let b = model.bases[k].b();
            let v = a * &model.mu[k] + b * (model.sigma[k] - model.cluster_sizes[k] as f64);
            norm.eval(v.as_slice())
        })
        .sum()
}

/// Surrogate objective of a solved approximation.
pub fn hausdorff_surrogate(result: &ApproximationResult) -> f64 {
    surrogate_value(&result.model, result.norm)
}

/// Model, map and certificates after the repair steps that keep the
/// objective, before any bound violation is pulled inside.
struct Certified {
    model: MultiBatteryModel,
    gamma: Vec<DVector<f64>>,
    gamma_map: Vec<Vec<DMatrix<f64>>>,
    lambda: Vec<Vec<DMatrix<f64>>>,
    solve_ms: f64,
}

fn solve_and_certify(
    program: &ApproxProgram,
    h_list: &[DVector<f64>],
    clustering: &Clustering,
    grid: &ChargingGrid,
    splits: &RowSplits,
    gw: &SolverGateway,
) -> Result<Certified> {
    let start = Instant::now();
    let sols = program
        .parts
        .par_iter()
        .map(|p| {
            let sol = gw.solve_conic_program(&p.program)?;
            match sol.status {
                // A stalled but finite iterate still goes through the repair
                // and the audit, which decide whether it is usable.
                SolveStatus::Optimal | SolveStatus::NumericFailure if sol.x.iter().all(|v| v.is_finite()) => Ok(sol),
                SolveStatus::Infeasible => {
                    Err(Error::Internal("approximation program reported infeasible although sigma = 0 is feasible".into()))
                }
                s => Err(Error::Solver(s)),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let solve_ms = start.elapsed().as_secs_f64() * 1e3;

    let (t, n, kk) = (grid.periods(), h_list.len(), clustering.k());
    let a = grid.constraint_matrix();
    let mut mu = vec![DVector::zeros(t); kk];
    let mut sigma = vec![0.0; kk];
    let mut gamma = vec![DVector::zeros(t); n];
    let mut gamma_map = vec![vec![DMatrix::zeros(t, t); n]; kk];
    for (part, sol) in program.parts.iter().zip(&sols) {
        for (lk, &k) in part.clusters.iter().enumerate() {
            mu[k] = DVector::from_column_slice(sol.block_values(&part.mu[lk]));
            sigma[k] = sol.value(part.sigma.idx(lk)).max(0.0);
            for (li, &i) in part.evs.iter().enumerate() {
                gamma_map[k][i] = sol.block_matrix(&part.gamma_map[lk][li]);
            }
        }
        for (li, &i) in part.evs.iter().enumerate() {
            gamma[i] = DVector::from_column_slice(sol.block_values(&part.gamma[li]));
        }
    }
    let bases = clustering
        .centroids
        .iter()
        .enumerate()
        .map(|(k, b)| Ok(HPolytope::new(grid.constraint_matrix().clone(), b.clone())?.with_label(format!("B{}", k + 1))))
        .collect::<Result<Vec<_>>>()?;
    let mut model = MultiBatteryModel {
        grid: grid.clone(),
        bases,
        mu,
        sigma,
        cluster_sizes: clustering.sizes.clone(),
        assignments: clustering.assignments.clone(),
    };
    for part in &program.parts {
        for &k in &part.clusters {
            let sum = part.evs.iter().fold(DMatrix::zeros(t, t), |s, &i| s + &gamma_map[k][i]);
            let fix = (DMatrix::identity(t, t) * model.sigma[k] - sum) / part.evs.len() as f64;
            for &i in &part.evs {
                gamma_map[k][i] += &fix;
            }
        }
    }
    for part in &program.parts {
        for &k in &part.clusters {
            let off_hull = complement_projector(a, &splits.bases[k].flat);
            for &i in &part.evs {
                let q = rows_of(a, &splits.evs[i].flat);
                if q.nrows() == 0 {
                    continue;
                }
                let gram = (&q * q.transpose())
                    .try_inverse()
                    .ok_or_else(|| Error::Internal("implicit equalities of an EV set are not independent".into()))?;
                let fix = q.transpose() * gram * &q * &gamma_map[k][i] * &off_hull;
                gamma_map[k][i] -= fix;
            }
        }
    }
    let lambda = derive_certificates(&model, &gamma_map, gw)?;
    let shifted = polish_translations(&model, &lambda, h_list, &mut gamma, splits, gw)?;
    for part in &program.parts {
        let delta = part.evs.iter().fold(DVector::zeros(t), |s, &i| s + &shifted[i]) / part.clusters.len() as f64;
        for &k in &part.clusters {
            model.mu[k] += &delta;
        }
    }
    Ok(Certified { model, gamma, gamma_map, lambda, solve_ms })
}

/// Largest violation of each EV's bound rows, floored at 0.
fn bound_excess(c: &Certified, h_list: &[DVector<f64>], splits: &RowSplits) -> Vec<f64> {
    let a = c.model.grid.constraint_matrix();
    (0..h_list.len())
        .map(|i| {
            let mut lhs = a * &c.gamma[i] - &h_list[i];
            for k in 0..c.model.k() {
                lhs += &c.lambda[k][i] * c.model.bases[k].b();
            }
            splits.evs[i].open.iter().map(|&r| lhs[r]).fold(0.0, f64::max)
        })
        .collect()
}

/// Solve the approximation program and return a certified model.
///
/// When the interior-point iterate leaves some EV bound slightly violated,
/// the program is solved once more with that EV's open rows tightened by
/// twice the violation; what remains is pulled inside by shrinking.
pub fn solve_approximation(
    h_list: &[DVector<f64>],
    clustering: &Clustering,
    grid: &ChargingGrid,
    norm: Norm,
    variant: Variant,
    gw: &SolverGateway,
) -> Result<ApproximationResult> {
    check_inputs(h_list, clustering, grid)?;
    let splits = RowSplits::new(h_list, clustering, grid, gw)?;
    let program = assemble(h_list, clustering, grid, norm, variant, Encoding::Reduced(&splits))?;
    let start = Instant::now();
    let mut c = solve_and_certify(&program, h_list, clustering, grid, &splits, gw)?;
    let excess = bound_excess(&c, h_list, &splits);
    if excess.iter().any(|e| *e > 0.0) {
        let tightened: Vec<DVector<f64>> = h_list
            .iter()
            .zip(&splits.evs)
            .zip(&excess)
            .map(|((h, split), e)| {
                let mut h = h.clone();
                for &r in &split.open {
                    h[r] -= (2.0 * e).min(0.5 * split.slack[r]);
                }
                h
            })
            .collect();
        let retry = assemble(&tightened, clustering, grid, norm, variant, Encoding::Reduced(&splits))?;
        let first_ms = c.solve_ms;
        c = solve_and_certify(&retry, h_list, clustering, grid, &splits, gw)?;
        c.solve_ms += first_ms;
    }
    let Certified { mut model, mut gamma, mut gamma_map, mut lambda, solve_ms } = c;
    for part in &program.parts {
        pull_inside(part, &mut model, &mut gamma, &mut gamma_map, &mut lambda, h_list, &splits)?;
    }
    let certify_ms = start.elapsed().as_secs_f64() * 1e3 - solve_ms;
    let map = DisaggregationMap { gamma, gamma_map, lambda: Some(lambda) };
    let report = audit(&model, &map, h_list, map.lambda.as_ref().expect("set above"))?;
    if !report.within(AUDIT_TOL) {
        return Err(Error::Solver(SolveStatus::NumericFailure));
    }
    let surrogate_objective = surrogate_value(&model, norm);
    Ok(ApproximationResult {
        model,
        map,
        surrogate_objective,
        status: SolveStatus::Optimal,
        variant,
        norm,
        solve_ms,
        certify_ms,
        audit: report,
    })
}

/// Write a power profile `u` as `mu + sum_k sigma_k v_k` with `v_k` in
/// `B_k`; `None` when `u` is not in `B`.
pub fn decompose_into_bases(
    u: &DVector<f64>,
    model: &MultiBatteryModel,
    gw: &SolverGateway,
) -> Result<Option<Vec<DVector<f64>>>> {
    let t = model.grid.periods();
    if u.len() != t {
        return Err(Error::DimensionMismatch(format!("profile of length {} on {} periods", u.len(), t)));
    }
    let target = model.grid.to_internal(u) - model.mu_total();
    let mut prog = ConicProgram::new();
    let v: Vec<Block> = (0..model.k()).map(|k| prog.add_block(format!("v[{k}]"), t, 1)).collect();
    for (k, base) in model.bases.iter().enumerate() {
        for r in 0..base.num_constraints() {
            let mut e = LinExpr::new();
            for c in 0..t {
                e.add_term(v[k].idx(c), base.a()[(r, c)]);
            }
            prog.add_le(e, base.b()[r]);
        }
    }
    for c in 0..t {
        let mut e = LinExpr::new();
        for (k, vk) in v.iter().enumerate() {
            e.add_term(vk.idx(c), model.sigma[k]);
        }
        prog.add_eq(e, target[c]);
    }
    let sol = gw.solve_linear_program(&prog)?;
    match sol.status {
        SolveStatus::Optimal => Ok(Some(v.iter().map(|b| DVector::from_column_slice(sol.block_values(b))).collect())),
        SolveStatus::Infeasible => Ok(None),
        s => Err(Error::Solver(s)),
    }
}

/// Per-EV power profiles `u_i = gamma_i + sum_k Gamma_{k,i} v_k`, with
/// `v_k` in the model's coordinates.
pub fn disaggregate(v_tilde: &[DVector<f64>], model: &MultiBatteryModel, map: &DisaggregationMap) -> Result<Vec<DVector<f64>>> {
    if v_tilde.len() != model.k() {
        return Err(Error::DimensionMismatch(format!("{} base-set points for {} base sets", v_tilde.len(), model.k())));
    }
    for (k, v) in v_tilde.iter().enumerate() {
        let viol = model.bases[k].max_violation(v)?;
        if viol > BASE_MEMBERSHIP_TOL {
            return Err(Error::PreconditionViolation(format!("point {k} violates base set {} by {viol:e}", k + 1)));
        }
    }
    Ok((0..map.n())
        .map(|i| {
            let mut y = map.gamma[i].clone();
            for (k, v) in v_tilde.iter().enumerate() {
                y += &map.gamma_map[k][i] * v;
            }
            model.grid.to_power(&y)
        })
        .collect())
}
