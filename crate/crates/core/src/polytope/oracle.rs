//! Exact desk-scale oracles (dimension at most 3).

use nalgebra::{DMatrix, DVector};

use super::hpoly::{HPolytope, VPolytope};
use crate::error::{Error, Result};
use crate::solver::{ConicProgram, LinExpr, Norm, SolverGateway};

pub const MAX_ORACLE_DIM: usize = 3;
pub const DEDUP_TOL: f64 = 1e-9;

fn check_dim(n: usize) -> Result<()> {
    if n > MAX_ORACLE_DIM {
        return Err(Error::DimensionTooLarge(n));
    }
    Ok(())
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= n {
        rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    }
    out
}

pub(crate) fn subsets_up_to(n: usize, max_size: usize) -> Vec<Vec<usize>> {
    (1..=max_size.min(n)).flat_map(|k| combinations(n, k)).collect()
}

fn dedup(points: Vec<DVector<f64>>) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(points.len());
    for p in points {
        if !out.iter().any(|q| (q - &p).norm() <= DEDUP_TOL) {
            out.push(p);
        }
    }
    out
}

/// `min || sum_j lambda_j v_j - p ||` over the simplex of weights.
fn hull_distance_lp(p: &DVector<f64>, pts: &[&DVector<f64>], norm: Norm, gw: &SolverGateway) -> Result<f64> {
    let n = p.len();
    let mut prog = ConicProgram::new();
    let lam = prog.add_block("lambda", pts.len(), 1);
    prog.nonneg(&lam);
    let mut sum = LinExpr::with_capacity(pts.len());
    for j in 0..pts.len() {
        sum.add_term(lam.idx(j), 1.0);
    }
    prog.add_eq(sum, 1.0);
    let rows = (0..n)
        .map(|r| {
            let mut e = LinExpr::constant(-p[r]);
            for (j, v) in pts.iter().enumerate() {
                e.add_term(lam.idx(j), v[r]);
            }
            e
        })
        .collect();
    prog.add_norm_term(rows, norm);
    let sol = gw.solve_conic_program(&prog)?.require_optimal()?;
    Ok(sol.objective.max(0.0))
}

/// Drop points lying in the convex hull of the remaining ones.
pub fn prune_to_extreme(points: Vec<DVector<f64>>, gw: &SolverGateway) -> Result<Vec<DVector<f64>>> {
    let mut pts = dedup(points);
    let mut i = 0;
    while i < pts.len() {
        if pts.len() == 1 {
            break;
        }
        let others: Vec<&DVector<f64>> = pts.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v).collect();
        let scale = 1.0 + pts[i].amax();
        if hull_distance_lp(&pts[i], &others, Norm::Linf, gw)? <= DEDUP_TOL * scale {
            pts.remove(i);
        } else {
            i += 1;
        }
    }
    Ok(pts)
}

/// Vertices of a bounded nonempty H-polytope by brute-force row-subset
/// enumeration.
pub fn enumerate_vertices(p: &HPolytope, gw: &SolverGateway) -> Result<VPolytope> {
    let n = p.dim();
    check_dim(n)?;
    let m = p.num_constraints();
    let bscale = 1.0 + p.b().amax();
    if n == 0 {
        return if p.b().iter().all(|v| *v >= -DEDUP_TOL * bscale) {
            Ok(VPolytope::new(vec![DVector::zeros(0)]))
        } else {
            Err(Error::Infeasible)
        };
    }
    let mut found = Vec::new();
    for rows in combinations(m, n) {
        let a = DMatrix::from_fn(n, n, |r, c| p.a()[(rows[r], c)]);
        let b = DVector::from_fn(n, |r, _| p.b()[rows[r]]);
        let scale: f64 = (0..n).map(|r| a.row(r).norm()).product();
        if scale == 0.0 || a.determinant().abs() <= 1e-12 * scale {
            continue;
        }
        let Some(x) = a.lu().solve(&b) else { continue };
        if p.max_violation(&x)? <= DEDUP_TOL * bscale {
            found.push(x);
        }
    }
    if found.is_empty() {
        return Err(if p.is_empty(gw)? { Error::Infeasible } else { Error::Unbounded });
    }
    for j in 0..n {
        for s in [1.0, -1.0] {
            let mut d = DVector::zeros(n);
            d[j] = s;
            p.support_function(&d, gw)?;
        }
    }
    Ok(VPolytope::new(prune_to_extreme(found, gw)?))
}

/// Extreme points of the Minkowski sum of finitely many point hulls.
pub fn minkowski_sum_vertices(parts: &[VPolytope], gw: &SolverGateway) -> Result<VPolytope> {
    let mut iter = parts.iter();
    let first = iter.next().ok_or_else(|| Error::Domain("empty Minkowski sum".into()))?;
    check_dim(first.dim())?;
    let mut acc = first.vertices.clone();
    for part in iter {
        if part.dim() != first.dim() {
            return Err(Error::DimensionMismatch("summands live in different spaces".into()));
        }
        let sums = acc.iter().flat_map(|a| part.vertices.iter().map(move |b| a + b)).collect();
        acc = prune_to_extreme(sums, gw)?;
    }
    Ok(VPolytope::new(acc))
}

/// Vertices of `P_1 + ... + P_N`.
pub fn minkowski_sum_oracle(sets: &[&HPolytope], gw: &SolverGateway) -> Result<VPolytope> {
    for s in sets {
        check_dim(s.dim())?;
    }
    let parts = sets.iter().map(|s| enumerate_vertices(s, gw)).collect::<Result<Vec<_>>>()?;
    minkowski_sum_vertices(&parts, gw)
}

/// Euclidean projection of `p` onto the affine hull of `pts`, returned only
/// when it falls inside their convex hull.
fn project_onto_simplex_face(p: &DVector<f64>, pts: &[&DVector<f64>]) -> Option<f64> {
    let v0 = pts[0];
    if pts.len() == 1 {
        return Some((p - v0).norm());
    }
    let k = pts.len() - 1;
    let d = DMatrix::from_fn(p.len(), k, |r, c| pts[c + 1][r] - v0[r]);
    let gram = d.transpose() * &d;
    let scale = gram.diagonal().iter().fold(0.0_f64, |m, v| m.max(*v)).max(f64::MIN_POSITIVE);
    if gram.determinant().abs() <= 1e-12 * scale.powi(k as i32) {
        return None;
    }
    let c = gram.lu().solve(&(d.transpose() * (p - v0)))?;
    let tol = 1e-12;
    if c.iter().any(|v| *v < -tol) || c.sum() > 1.0 + tol {
        return None;
    }
    Some((v0 + d * c - p).norm())
}

/// Distance from a point to the convex hull of a vertex list.
///
/// L2 is exact: the nearest point lies in the relative interior of a face,
/// so it is the projection onto the affine hull of at most `n` affinely
/// independent vertices. L1 and Linf use one LP.
pub fn point_to_hull_distance(p: &DVector<f64>, hull: &VPolytope, norm: Norm, gw: &SolverGateway) -> Result<f64> {
    if hull.is_empty() {
        return Err(Error::EmptyInputSet);
    }
    if hull.dim() != p.len() {
        return Err(Error::DimensionMismatch("point and hull dimensions differ".into()));
    }
    check_dim(p.len())?;
    let all: Vec<&DVector<f64>> = hull.vertices.iter().collect();
    match norm {
        Norm::L2 => {
            let scale = 1.0 + p.amax();
            if hull_distance_lp(p, &all, Norm::Linf, gw)? <= DEDUP_TOL * scale {
                return Ok(0.0);
            }
            let mut best = f64::INFINITY;
            for subset in subsets_up_to(all.len(), p.len().max(1)) {
                let pts: Vec<&DVector<f64>> = subset.iter().map(|&j| all[j]).collect();
                if let Some(d) = project_onto_simplex_face(p, &pts) {
                    best = best.min(d);
                }
            }
            Ok(best)
        }
        _ => hull_distance_lp(p, &all, norm, gw),
    }
}

/// Hausdorff distance between two point hulls.
pub fn hausdorff_vertices(x: &VPolytope, y: &VPolytope, norm: Norm, gw: &SolverGateway) -> Result<f64> {
    let mut d: f64 = 0.0;
    for v in &x.vertices {
        d = d.max(point_to_hull_distance(v, y, norm, gw)?);
    }
    for w in &y.vertices {
        d = d.max(point_to_hull_distance(w, x, norm, gw)?);
    }
    Ok(d)
}

/// Exact Hausdorff distance between two bounded nonempty H-polytopes.
pub fn hausdorff_oracle(x: &HPolytope, y: &HPolytope, norm: Norm, gw: &SolverGateway) -> Result<f64> {
    check_dim(x.dim())?;
    check_dim(y.dim())?;
    let vx = enumerate_vertices(x, gw)?;
    let vy = enumerate_vertices(y, gw)?;
    hausdorff_vertices(&vx, &vy, norm, gw)
}

/// Weights `lambda_j >= 0` writing `p` as a convex combination of `pts`,
/// if such weights exist.
pub fn convex_weights(p: &DVector<f64>, hull: &VPolytope, gw: &SolverGateway) -> Result<Option<Vec<f64>>> {
    let all: Vec<&DVector<f64>> = hull.vertices.iter().collect();
    let n = p.len();
    let mut prog = ConicProgram::new();
    let lam = prog.add_block("lambda", all.len(), 1);
    prog.nonneg(&lam);
    let mut sum = LinExpr::new();
    for j in 0..all.len() {
        sum.add_term(lam.idx(j), 1.0);
    }
    prog.add_eq(sum, 1.0);
    for r in 0..n {
        let mut e = LinExpr::new();
        for (j, v) in all.iter().enumerate() {
            e.add_term(lam.idx(j), v[r]);
        }
        prog.add_eq(e, p[r]);
    }
    let sol = gw.solve_linear_program(&prog)?;
    Ok(sol.is_optimal().then(|| sol.block_values(&lam).to_vec()))
}
