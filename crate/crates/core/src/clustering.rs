//! Base-set selection by k-means on right-hand sides, and the Lipschitz
//! constant of H-polytopes with respect to their right-hand side.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flexibility::derive_seed;
use crate::polytope::oracle::subsets_up_to;
use crate::polytope::{ChargingGrid, HPolytope};
use crate::solver::{Norm, SolverGateway};

pub const DEFAULT_RESTARTS: usize = 10;
pub const DEFAULT_MAX_ITERS: usize = 300;

/// Partition of the EVs into clusters (ids are 0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centroids: Vec<DVector<f64>>,
    pub sizes: Vec<usize>,
    pub loss: f64,
    /// Loss after every Lloyd update of the winning restart.
    pub loss_history: Vec<f64>,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Members of cluster `k` in increasing order.
    pub fn members(&self, k: usize) -> Vec<usize> {
        self.assignments.iter().enumerate().filter(|(_, c)| **c == k).map(|(i, _)| i).collect()
    }

    /// Build from an assignment vector; centroids are the exact member means.
    pub fn from_assignments(points: &[DVector<f64>], assignments: Vec<usize>, k: usize) -> Result<Self> {
        if assignments.len() != points.len() {
            return Err(Error::DimensionMismatch("one assignment per point is required".into()));
        }
        if let Some(bad) = assignments.iter().find(|c| **c >= k) {
            return Err(Error::Index(format!("cluster id {bad} with only {k} clusters")));
        }
        let centroids = centroids_of(points, &assignments, k);
        let mut sizes = vec![0; k];
        for &c in &assignments {
            sizes[c] += 1;
        }
        if sizes.contains(&0) {
            return Err(Error::Config("every cluster needs at least one member".into()));
        }
        let loss = loss_of(points, &assignments, &centroids);
        Ok(Self { assignments, centroids, sizes, loss, loss_history: vec![loss] })
    }

    /// One cluster holding everything.
    pub fn single(points: &[DVector<f64>]) -> Result<Self> {
        Self::from_assignments(points, vec![0; points.len()], 1)
    }
}

fn sq_dist(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn centroids_of(points: &[DVector<f64>], assignments: &[usize], k: usize) -> Vec<DVector<f64>> {
    let dim = points.first().map_or(0, |p| p.len());
    let mut sums = vec![DVector::zeros(dim); k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignments) {
        sums[c] += p;
        counts[c] += 1;
    }
    sums.into_iter().zip(counts).map(|(s, n)| if n > 0 { s / n as f64 } else { s }).collect()
}

fn loss_of(points: &[DVector<f64>], assignments: &[usize], centroids: &[DVector<f64>]) -> f64 {
    points.iter().zip(assignments).map(|(p, &c)| sq_dist(p, &centroids[c])).sum()
}

fn nearest(p: &DVector<f64>, centroids: &[DVector<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

fn seed_plus_plus(points: &[DVector<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[idx].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

/// Move the point farthest from its centroid into each empty cluster.
fn repair_empty(points: &[DVector<f64>], assignments: &mut [usize], centroids: &[DVector<f64>], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        for &c in assignments.iter() {
            sizes[c] += 1;
        }
        let Some(empty) = sizes.iter().position(|s| *s == 0) else { return };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            let c = assignments[i];
            if sizes[c] > 1 {
                let d = sq_dist(p, &centroids[c]);
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
        }
        match far {
            Some(i) => assignments[i] = empty,
            None => return,
        }
    }
}

struct Run {
    assignments: Vec<usize>,
    centroids: Vec<DVector<f64>>,
    loss: f64,
    history: Vec<f64>,
}

fn lloyd(points: &[DVector<f64>], k: usize, max_iters: usize, rng: &mut ChaCha8Rng) -> Run {
    let mut centroids = seed_plus_plus(points, k, rng);
    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        repair_empty(points, &mut next, &centroids, k);
        if next == assignments {
            break;
        }
        assignments = next;
        centroids = centroids_of(points, &assignments, k);
        history.push(loss_of(points, &assignments, &centroids));
    }
    let loss = loss_of(points, &assignments, &centroids);
    Run { assignments, centroids, loss, history }
}

/// Lloyd's algorithm with k-means++ seeding; best of `restarts` runs by
/// loss, then by restart index.
pub fn kmeans_rhs(h_list: &[DVector<f64>], k: usize, seed: u64, max_iters: usize, restarts: usize) -> Result<Clustering> {
    let n = h_list.len();
    if k < 1 || k > n {
        return Err(Error::Config(format!("need 1 <= K <= N, got K = {k} with N = {n}")));
    }
    if let Some(p) = h_list.iter().find(|p| p.len() != h_list[0].len()) {
        return Err(Error::DimensionMismatch(format!("feature length {} differs from {}", p.len(), h_list[0].len())));
    }
    let runs: Vec<Run> = (0..restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64));
            lloyd(h_list, k, max_iters, &mut rng)
        })
        .collect();
    let best = runs
        .into_iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| a.loss.total_cmp(&b.loss).then(ia.cmp(ib)))
        .map(|(_, r)| r)
        .expect("at least one restart");
    let mut out = Clustering::from_assignments(h_list, best.assignments, k)?;
    out.centroids = best.centroids;
    out.loss = best.loss;
    out.loss_history = best.history;
    Ok(out)
}

/// `B_k = { y : A y <= b_k }` on the grid's active constraint matrix.
pub fn base_sets_from_clustering(clustering: &Clustering, grid: &ChargingGrid, gw: &SolverGateway) -> Result<Vec<HPolytope>> {
    let a = grid.constraint_matrix();
    clustering
        .centroids
        .iter()
        .enumerate()
        .map(|(k, b)| {
            if b.len() != a.nrows() {
                return Err(Error::DimensionMismatch(format!("centroid of length {} for {} constraints", b.len(), a.nrows())));
            }
            let p = HPolytope::new(a.clone(), b.clone())?.with_label(format!("B{}", k + 1));
            if p.is_empty(gw)? {
                return Err(Error::Internal(format!("base set {} is empty", k + 1)));
            }
            Ok(p)
        })
        .collect()
}

/// `L(A)` for Hausdorff distances in `p` and right-hand side changes in `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub value: f64,
    pub p: Norm,
    pub q: Norm,
    /// True when every support was enumerated.
    pub exact: bool,
}

fn dual(n: Norm) -> Norm {
    match n {
        Norm::L1 => Norm::Linf,
        Norm::L2 => Norm::L2,
        Norm::Linf => Norm::L1,
    }
}

fn rows_of(a: &DMatrix<f64>, s: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(s.len(), a.ncols(), |r, c| a[(s[r], c)])
}

fn independent(rows: &DMatrix<f64>) -> bool {
    let sv = rows.clone().svd(false, false).singular_values;
    let top = sv.iter().fold(0.0_f64, |m, v| m.max(*v));
    top > 0.0 && sv.iter().all(|v| *v > 1e-10 * top)
}

/// Whether the span of `basis` (columns, orthonormal) contains a strictly
/// positive vector; `rest` spans the orthogonal complement.
fn has_positive_vector(basis: &[DVector<f64>], rest: &[DVector<f64>], tol: f64) -> bool {
    if rest.is_empty() {
        return true;
    }
    if basis.len() == 1 {
        let v = &basis[0];
        return v.iter().all(|x| *x > tol) || v.iter().all(|x| *x < -tol);
    }
    if rest.len() == 1 {
        let w = &rest[0];
        return w.iter().any(|x| *x > tol) && w.iter().any(|x| *x < -tol);
    }
    false
}

/// Largest `||x||_2` with `||A_S^T x||_2 = 1`, `x > 0` on one support.
fn support_value(a_s: &DMatrix<f64>) -> f64 {
    let m = a_s * a_s.transpose();
    let eig = SymmetricEigen::new(m);
    let vals = eig.eigenvalues;
    let top = vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let cluster_tol = 1e-9 * top.max(1.0);
    let mut best: f64 = 0.0;
    let mut seen = vec![false; vals.len()];
    for i in 0..vals.len() {
        if seen[i] {
            continue;
        }
        let group: Vec<usize> = (0..vals.len()).filter(|j| (vals[*j] - vals[i]).abs() <= cluster_tol).collect();
        for &j in &group {
            seen[j] = true;
        }
        let lam = group.iter().map(|j| vals[*j]).sum::<f64>() / group.len() as f64;
        if lam <= 0.0 {
            continue;
        }
        let basis: Vec<DVector<f64>> = group.iter().map(|j| eig.eigenvectors.column(*j).into_owned()).collect();
        let rest: Vec<DVector<f64>> =
            (0..vals.len()).filter(|j| !group.contains(j)).map(|j| eig.eigenvectors.column(j).into_owned()).collect();
        if has_positive_vector(&basis, &rest, 1e-12) {
            best = best.max(1.0 / lam.sqrt());
        }
    }
    best
}

/// Exhaustive support enumeration for `n <= 3` with `p = q = L2`; a seeded
/// sampling lower bound otherwise.
pub fn estimate_lipschitz(a: &DMatrix<f64>, p: Norm, q: Norm) -> Result<LipschitzEstimate> {
    let n = a.ncols();
    if n <= 3 {
        if p != Norm::L2 || q != Norm::L2 {
            return Err(Error::Unsupported(format!("exact Lipschitz constant needs p = q = l2, got p = {p}, q = {q}")));
        }
        let mut value: f64 = 0.0;
        for s in subsets_up_to(a.nrows(), n) {
            let a_s = rows_of(a, &s);
            if !independent(&a_s) {
                continue;
            }
            value = value.max(support_value(&a_s));
        }
        return Ok(LipschitzEstimate { value, p, q, exact: true });
    }
    Ok(LipschitzEstimate { value: sample_lipschitz(a, p, q, 4000, 0), p, q, exact: false })
}

/// Best ratio `||x||_{q*} / ||A^T x||_{p*}` over random nonnegative `x` on
/// random independent supports.
pub fn sample_lipschitz(a: &DMatrix<f64>, p: Norm, q: Norm, samples: usize, seed: u64) -> f64 {
    let (m, n) = a.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: f64 = 0.0;
    for _ in 0..samples {
        let size = rng.random_range(1..=n.min(m));
        let mut s: Vec<usize> = Vec::with_capacity(size);
        while s.len() < size {
            let r = rng.random_range(0..m);
            if !s.contains(&r) {
                s.push(r);
            }
        }
        let a_s = rows_of(a, &s);
        if !independent(&a_s) {
            continue;
        }
        let x = DVector::from_fn(size, |_, _| rng.random::<f64>());
        let denom = dual(p).eval((a_s.transpose() * &x).as_slice());
        if denom > 0.0 {
            best = best.max(dual(q).eval(x.as_slice()) / denom);
        }
        if p == Norm::L2 && q == Norm::L2 {
            best = best.max(support_value(&a_s));
        }
    }
    best
}
