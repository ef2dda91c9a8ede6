//! Random points in polytopes for sampling-based checks.

use nalgebra::DVector;
use rand::{Rng, RngExt};

use super::hpoly::{HPolytope, VPolytope};
use crate::error::{Error, Result};
use crate::solver::SolverGateway;

/// Standard normal draw (Box-Muller).
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform direction on the unit sphere.
pub fn random_direction(n: usize, rng: &mut impl Rng) -> DVector<f64> {
    loop {
        let d = DVector::from_fn(n, |_, _| standard_normal(rng));
        let norm = d.norm();
        if norm > 1e-12 {
            return d / norm;
        }
    }
}

/// Flat Dirichlet weights of length `k`.
pub fn dirichlet_weights(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = raw.iter().sum();
    if s <= 0.0 {
        let mut w = vec![0.0; k];
        w[0] = 1.0;
        return w;
    }
    raw.into_iter().map(|x| x / s).collect()
}

/// Random convex combination of up to three points of `pool`.
pub fn random_combination(pool: &[DVector<f64>], rng: &mut impl Rng) -> DVector<f64> {
    let size = rng.random_range(1..=pool.len().min(3));
    let w = dirichlet_weights(size, rng);
    let mut out = DVector::zeros(pool[0].len());
    for wj in w {
        out += &pool[rng.random_range(0..pool.len())] * wj;
    }
    out
}

/// Support points of `p` in `count` random directions (LP optima, so
/// vertices when the backend returns basic solutions).
pub fn boundary_pool(p: &HPolytope, count: usize, rng: &mut impl Rng, gw: &SolverGateway) -> Result<Vec<DVector<f64>>> {
    (0..count)
        .map(|_| {
            let d = random_direction(p.dim(), rng);
            p.support_point(&d, gw).map(|(_, x)| x)
        })
        .collect()
}

/// Points of `p` spread over the whole set: random convex combinations of
/// support points.
pub fn sample_points(p: &HPolytope, count: usize, rng: &mut impl Rng, gw: &SolverGateway) -> Result<Vec<DVector<f64>>> {
    let pool = boundary_pool(p, (4 * p.dim()).max(16), rng, gw)?;
    Ok((0..count).map(|_| random_combination(&pool, rng)).collect())
}

/// Points of a vertex hull, same scheme as [`sample_points`].
pub fn sample_hull(hull: &VPolytope, count: usize, rng: &mut impl Rng) -> Result<Vec<DVector<f64>>> {
    if hull.is_empty() {
        return Err(Error::EmptyInputSet);
    }
    Ok((0..count).map(|_| random_combination(&hull.vertices, rng)).collect())
}

/// Uniform samples by rejection from the bounding box. Falls back to
/// [`sample_points`] for flat sets where rejection stalls.
pub fn sample_uniform(p: &HPolytope, count: usize, rng: &mut impl Rng, gw: &SolverGateway) -> Result<Vec<DVector<f64>>> {
    let n = p.dim();
    let mut lo = DVector::zeros(n);
    let mut hi = DVector::zeros(n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        hi[j] = p.support_function(&e, gw)?;
        lo[j] = -p.support_function(&-e, gw)?;
    }
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count && attempts < 2000 * count.max(1) {
        attempts += 1;
        let y = DVector::from_fn(n, |j, _| if hi[j] > lo[j] { rng.random_range(lo[j]..hi[j]) } else { lo[j] });
        if p.is_member(&y, 0.0)? {
            out.push(y);
        }
    }
    if out.len() < count {
        out.extend(sample_points(p, count - out.len(), rng, gw)?);
    }
    Ok(out)
}
