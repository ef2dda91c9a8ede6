//! Peak-shaving study: exact and multi-battery peak minimization,
//! suboptimality gap and seeded batches of trials.

use std::io::Write;
use std::ops::RangeInclusive;
use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans_rhs, DEFAULT_MAX_ITERS, DEFAULT_RESTARTS};
use crate::error::{Error, Result};
use crate::flexibility::{build_flexibility_set, derive_seed, sample_scenario, FlexibilitySet, ScenarioRanges};
use crate::multibattery::{
    decompose_into_bases, disaggregate, solve_approximation, ApproximationResult, DisaggregationMap, MultiBatteryModel, Variant,
};
use crate::polytope::sample::sample_points;
use crate::polytope::{HPolytope, Representation};
use crate::solver::{Block, ConicProgram, LinExpr, Norm, SolveStatus, SolverGateway};

/// Baselines at or below this are treated as zero by [`suboptimality_gap`].
pub const ZERO_BASELINE: f64 = 1e-12;

/// Optimum of the exact peak-shaving LP with a witness decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactPeak {
    pub peak: f64,
    pub aggregate: DVector<f64>,
    pub profiles: Vec<DVector<f64>>,
}

/// Optimum of peak shaving over a multi-battery model.
#[derive(Debug, Clone, PartialEq)]
pub struct BatteryPeak {
    pub peak: f64,
    /// Aggregate power profile.
    pub aggregate: DVector<f64>,
    /// Base-set points `v_k`, in the model's coordinates.
    pub v_tilde: Vec<DVector<f64>>,
}

/// `t >= |row . x|` for every row of `rows`.
fn add_abs_bounds(prog: &mut ConicProgram, t: Block, rows: Vec<LinExpr>) {
    for e in rows {
        let mut up = e.clone();
        up.add_term(t.idx(0), -1.0);
        prog.add_le(up, 0.0);
        let mut down = LinExpr::new();
        for &(v, c) in e.terms() {
            down.add_term(v, -c);
        }
        down.add_constant(-e.constant_part());
        down.add_term(t.idx(0), -1.0);
        prog.add_le(down, 0.0);
    }
}

fn add_membership(prog: &mut ConicProgram, p: &HPolytope, x: &Block) {
    for r in 0..p.num_constraints() {
        let mut e = LinExpr::new();
        for c in 0..p.dim() {
            let v = p.a()[(r, c)];
            if v != 0.0 {
                e.add_term(x.idx(c), v);
            }
        }
        prog.add_le(e, p.b()[r]);
    }
}

/// `min ||sum_i u_i||_inf` over `u_i in U_i`, one LP in power coordinates.
pub fn peak_shave_exact(flex_sets: &[FlexibilitySet], gw: &SolverGateway) -> Result<ExactPeak> {
    let first = flex_sets.first().ok_or_else(|| Error::Domain("peak shaving needs at least one EV".into()))?;
    let t = first.power.dim();
    if let Some(f) = flex_sets.iter().find(|f| f.power.dim() != t) {
        return Err(Error::DimensionMismatch(format!("EV set on {} periods among sets on {t}", f.power.dim())));
    }
    let mut prog = ConicProgram::new();
    let peak = prog.add_block("t", 1, 1);
    let u: Vec<Block> = (0..flex_sets.len()).map(|i| prog.add_block(format!("u[{i}]"), t, 1)).collect();
    for (f, ui) in flex_sets.iter().zip(&u) {
        add_membership(&mut prog, &f.power, ui);
    }
    let sums = (0..t).map(|c| u.iter().fold(LinExpr::new(), |e, ui| e.plus(ui.idx(c), 1.0))).collect();
    add_abs_bounds(&mut prog, peak, sums);
    prog.add_objective(peak.idx(0), 1.0);
    let sol = gw.solve_linear_program(&prog)?;
    if sol.status == SolveStatus::Infeasible {
        return Err(Error::Internal("exact peak shaving reported infeasible for nonempty sets".into()));
    }
    let sol = sol.require_optimal()?;
    let profiles: Vec<DVector<f64>> = u.iter().map(|b| DVector::from_column_slice(sol.block_values(b))).collect();
    let aggregate = profiles.iter().fold(DVector::zeros(t), |s, p| s + p);
    Ok(ExactPeak { peak: aggregate.amax(), aggregate, profiles })
}

/// `min ||u||_inf` over `u = mu + sum_k sigma_k v_k`, `v_k in B_k`.
pub fn peak_shave_multibattery(model: &MultiBatteryModel, gw: &SolverGateway) -> Result<BatteryPeak> {
    let t = model.grid.periods();
    let mut prog = ConicProgram::new();
    let peak = prog.add_block("t", 1, 1);
    let v: Vec<Block> = (0..model.k()).map(|k| prog.add_block(format!("v[{k}]"), t, 1)).collect();
    for (base, vk) in model.bases.iter().zip(&v) {
        add_membership(&mut prog, base, vk);
    }
    // Aggregate in active coordinates, mapped to power row by row.
    let mu = model.mu_total();
    let to_power = match model.grid.representation() {
        Representation::Power => nalgebra::DMatrix::identity(t, t),
        Representation::Energy => model.grid.cumulative_inverse().clone(),
    };
    let rows = (0..t)
        .map(|r| {
            let mut e = LinExpr::constant((to_power.row(r) * &mu)[0]);
            for c in 0..t {
                let w = to_power[(r, c)];
                if w == 0.0 {
                    continue;
                }
                for (k, vk) in v.iter().enumerate() {
                    if model.sigma[k] != 0.0 {
                        e.add_term(vk.idx(c), w * model.sigma[k]);
                    }
                }
            }
            e
        })
        .collect();
    add_abs_bounds(&mut prog, peak, rows);
    prog.add_objective(peak.idx(0), 1.0);
    let sol = gw.solve_linear_program(&prog)?.require_optimal()?;
    let v_tilde: Vec<DVector<f64>> = v.iter().map(|b| DVector::from_column_slice(sol.block_values(b))).collect();
    let aggregate = model.aggregate(&v_tilde);
    Ok(BatteryPeak { peak: aggregate.amax(), aggregate, v_tilde })
}

/// `100 (J_K - J_star) / J_star`, with `0/0 = 0`.
pub fn suboptimality_gap(j_k: f64, j_star: f64) -> Result<f64> {
    if j_star.is_nan() || j_star < 0.0 || !j_k.is_finite() {
        return Err(Error::Domain(format!("gap needs finite J_K and J_star >= 0, got ({j_k}, {j_star})")));
    }
    if j_star <= ZERO_BASELINE {
        return if j_k <= ZERO_BASELINE { Ok(0.0) } else { Err(Error::DegenerateBaseline(j_k)) };
    }
    Ok(100.0 * (j_k - j_star) / j_star)
}

/// Outcome of sampling-based disaggregation checks on one model.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DisaggregationCheck {
    pub samples: usize,
    pub passed: usize,
    /// Largest constraint violation of a per-EV profile, in kW or kWh.
    pub max_violation: f64,
    /// Largest `||sum_i u_i - u||_inf / (1 + ||u||_inf)`, so that an
    /// all-zero fleet is not judged on round-off.
    pub max_relative_residual: f64,
    /// Samples whose aggregate the decomposition LP failed to place in `B`.
    pub decomposition_failures: usize,
}

impl DisaggregationCheck {
    pub fn all_passed(&self) -> bool {
        self.passed == self.samples
    }
}

/// Draw `samples` points `v_k in B_k`, disaggregate
/// `u = mu + sum_k sigma_k v_k` and check every `u_i in U_i` at `tol`,
/// `sum_i u_i = u` at relative `tol`, and that the decomposition LP
/// recovers `u in B`. `ev_sets` are the EV sets in power coordinates.
pub fn check_disaggregation(
    model: &MultiBatteryModel,
    map: &DisaggregationMap,
    ev_sets: &[HPolytope],
    samples: usize,
    seed: u64,
    tol: f64,
    gw: &SolverGateway,
) -> Result<DisaggregationCheck> {
    if ev_sets.len() != map.n() {
        return Err(Error::DimensionMismatch(format!("{} EV sets for a map over {} EVs", ev_sets.len(), map.n())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws: Vec<Vec<DVector<f64>>> = vec![Vec::with_capacity(model.k()); samples];
    for base in &model.bases {
        for (d, p) in draws.iter_mut().zip(sample_points(base, samples, &mut rng, gw)?) {
            d.push(p);
        }
    }
    let mut out = DisaggregationCheck { samples, ..Default::default() };
    for v in &draws {
        let u = model.aggregate(v);
        let parts = disaggregate(v, model, map)?;
        let mut ok = true;
        for (p, set) in parts.iter().zip(ev_sets) {
            let viol = set.max_violation(p)?;
            out.max_violation = out.max_violation.max(viol);
            ok &= viol <= tol;
        }
        let sum = parts.iter().fold(DVector::zeros(u.len()), |s, p| s + p);
        let rel = (sum - &u).amax() / (1.0 + u.amax());
        out.max_relative_residual = out.max_relative_residual.max(rel);
        ok &= rel <= tol;
        if decompose_into_bases(&u, model, gw)?.is_none() {
            out.decomposition_failures += 1;
            ok = false;
        }
        out.passed += ok as usize;
    }
    Ok(out)
}

/// Settings of a batch of trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub trials: usize,
    pub evs: usize,
    pub ranges: ScenarioRanges,
    pub k_min: usize,
    pub k_max: usize,
    pub variant: Variant,
    pub norm: Norm,
    pub representation: Representation,
    pub master_seed: u64,
    pub restarts: usize,
    pub max_iters: usize,
    /// Worker threads; 0 uses the global pool.
    pub jobs: usize,
    /// Fill the timing columns. Off by default so that results are
    /// byte-identical across runs.
    pub timings: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            evs: 50,
            ranges: ScenarioRanges::default(),
            k_min: 1,
            k_max: 5,
            variant: Variant::Joint,
            norm: Norm::L2,
            representation: Representation::Energy,
            master_seed: 0,
            restarts: DEFAULT_RESTARTS,
            max_iters: DEFAULT_MAX_ITERS,
            jobs: 0,
            timings: false,
        }
    }
}

impl ExperimentConfig {
    pub fn k_values(&self) -> RangeInclusive<usize> {
        self.k_min..=self.k_max
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials < 1 {
            return Err(Error::Config("need at least one trial".into()));
        }
        if self.evs < 1 {
            return Err(Error::Config("need at least one EV per trial".into()));
        }
        if self.k_min < 1 || self.k_min > self.k_max {
            return Err(Error::Config(format!("invalid K range {}..{}", self.k_min, self.k_max)));
        }
        if self.k_max > self.evs {
            return Err(Error::Config(format!("K = {} exceeds N = {}", self.k_max, self.evs)));
        }
        if self.restarts < 1 || self.max_iters < 1 {
            return Err(Error::Config("k-means needs restarts >= 1 and max_iters >= 1".into()));
        }
        self.ranges.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    /// A solver did not return a certified optimum.
    SolverFailure,
    /// Bad input or an internal consistency check failed.
    Error,
}

/// One row of a batch: a trial at one K.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub n: usize,
    pub t: usize,
    pub k: usize,
    pub variant: Variant,
    pub norm: Norm,
    pub j_star: Option<f64>,
    pub j_k: Option<f64>,
    pub gap_percent: Option<f64>,
    pub surrogate_objective: Option<f64>,
    pub cluster_ms: f64,
    pub solve_ms: f64,
    pub shave_ms: f64,
    pub status: TrialStatus,
    pub message: Option<String>,
}

/// Inputs shared by every K of one trial, handed to batch hooks.
pub struct TrialContext<'a> {
    pub trial: usize,
    pub seed: u64,
    pub flex_sets: &'a [FlexibilitySet],
}

fn status_of(e: &Error) -> TrialStatus {
    if e.is_solver_failure() {
        TrialStatus::SolverFailure
    } else {
        TrialStatus::Error
    }
}

fn ms_since(s: Instant) -> f64 {
    s.elapsed().as_secs_f64() * 1e3
}

/// One trial: sample, build sets, solve the exact LP, then sweep K.
pub fn run_trial<F>(config: &ExperimentConfig, trial: usize, gw: &SolverGateway, hook: &F) -> Vec<TrialResult>
where
    F: Fn(&TrialContext, &ApproximationResult) + Sync,
{
    let seed = derive_seed(config.master_seed, trial as u64);
    let t = config.ranges.periods;
    let row = |k: usize| TrialResult {
        trial,
        seed,
        n: config.evs,
        t,
        k,
        variant: config.variant,
        norm: config.norm,
        j_star: None,
        j_k: None,
        gap_percent: None,
        surrogate_objective: None,
        cluster_ms: 0.0,
        solve_ms: 0.0,
        shave_ms: 0.0,
        status: TrialStatus::Ok,
        message: None,
    };
    let fail_all = |e: Error, j_star: Option<f64>| {
        config
            .k_values()
            .map(|k| TrialResult { j_star, status: status_of(&e), message: Some(e.to_string()), ..row(k) })
            .collect::<Vec<_>>()
    };
    let sets = sample_scenario(config.evs, seed, &config.ranges).and_then(|specs| {
        let grid = config.ranges.grid(config.representation)?;
        let sets = specs.iter().map(|s| build_flexibility_set(s, &grid, gw)).collect::<Result<Vec<_>>>()?;
        Ok((grid, sets))
    });
    let (grid, sets) = match sets {
        Ok(v) => v,
        Err(e) => return fail_all(e, None),
    };
    let start = Instant::now();
    let exact = match peak_shave_exact(&sets, gw) {
        Ok(v) => v,
        Err(e) => return fail_all(e, None),
    };
    let exact_ms = ms_since(start);
    let h_list: Vec<DVector<f64>> = sets.iter().map(|s| s.h.clone()).collect();
    let ctx = TrialContext { trial, seed, flex_sets: &sets };
    config
        .k_values()
        .map(|k| {
            let mut r = TrialResult { j_star: Some(exact.peak), ..row(k) };
            let start = Instant::now();
            let clustering = kmeans_rhs(&h_list, k, derive_seed(seed, 1_000 + k as u64), config.max_iters, config.restarts);
            r.cluster_ms = ms_since(start);
            let outcome = clustering.and_then(|c| {
                let res = solve_approximation(&h_list, &c, &grid, config.norm, config.variant, gw)?;
                r.solve_ms = res.solve_ms + res.certify_ms;
                let start = Instant::now();
                let peak = peak_shave_multibattery(&res.model, gw)?;
                r.shave_ms = exact_ms + ms_since(start);
                r.surrogate_objective = Some(res.surrogate_objective);
                r.j_k = Some(peak.peak);
                r.gap_percent = Some(suboptimality_gap(peak.peak, exact.peak)?);
                if peak.peak < exact.peak - 1e-6 {
                    return Err(Error::Internal(format!("J_K = {} below J_star = {}", peak.peak, exact.peak)));
                }
                hook(&ctx, &res);
                Ok(())
            });
            if let Err(e) = outcome {
                r.status = status_of(&e);
                r.message = Some(e.to_string());
            }
            r
        })
        .collect()
}

/// Per-K box-plot statistics of the gap over successful trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub k: usize,
    pub count: usize,
    pub failures: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantile with linear interpolation between order statistics
/// (`h = (n - 1) q`). `sorted` must be nonempty and ascending.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(results: &[TrialResult]) -> Vec<GapSummary> {
    let mut ks: Vec<usize> = results.iter().map(|r| r.k).collect();
    ks.sort_unstable();
    ks.dedup();
    ks.into_iter()
        .map(|k| {
            let rows: Vec<&TrialResult> = results.iter().filter(|r| r.k == k).collect();
            let mut gaps: Vec<f64> = rows.iter().filter_map(|r| r.gap_percent.filter(|_| r.status == TrialStatus::Ok)).collect();
            gaps.sort_by(f64::total_cmp);
            let failures = rows.len() - gaps.len();
            if gaps.is_empty() {
                return GapSummary {
                    k,
                    count: 0,
                    failures,
                    min: f64::NAN,
                    q1: f64::NAN,
                    median: f64::NAN,
                    q3: f64::NAN,
                    max: f64::NAN,
                };
            }
            GapSummary {
                k,
                count: gaps.len(),
                failures,
                min: gaps[0],
                q1: quantile(&gaps, 0.25),
                median: quantile(&gaps, 0.5),
                q3: quantile(&gaps, 0.75),
                max: gaps[gaps.len() - 1],
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    /// Sorted by trial, then K.
    pub results: Vec<TrialResult>,
    pub summary: Vec<GapSummary>,
    pub timings: bool,
}

pub fn run_batch(config: &ExperimentConfig, gw: &SolverGateway) -> Result<BatchOutcome> {
    run_batch_with(config, gw, |_, _| {})
}

/// [`run_batch`] calling `hook` on every certified model.
pub fn run_batch_with<F>(config: &ExperimentConfig, gw: &SolverGateway, hook: F) -> Result<BatchOutcome>
where
    F: Fn(&TrialContext, &ApproximationResult) + Sync + Send,
{
    config.validate()?;
    let work = || -> Vec<TrialResult> {
        (0..config.trials).into_par_iter().flat_map_iter(|i| run_trial(config, i, gw, &hook)).collect()
    };
    let mut results = if config.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", config.jobs)))?
            .install(work)
    } else {
        work()
    };
    results.sort_by_key(|r| (r.trial, r.k));
    let summary = summarize(&results);
    Ok(BatchOutcome { results, summary, timings: config.timings })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    trial: usize,
    seed: u64,
    #[serde(rename = "K")]
    k: usize,
    variant: String,
    norm: String,
    #[serde(rename = "J_star_kw")]
    j_star: Option<f64>,
    #[serde(rename = "J_K_kw")]
    j_k: Option<f64>,
    gap_percent: Option<f64>,
    surrogate_objective: Option<f64>,
    cluster_ms: Option<f64>,
    solve_ms: Option<f64>,
    shave_ms: Option<f64>,
    status: &'a str,
}

fn status_label(s: TrialStatus) -> &'static str {
    match s {
        TrialStatus::Ok => "ok",
        TrialStatus::SolverFailure => "solver_failure",
        TrialStatus::Error => "error",
    }
}

/// Write `results.csv`; timing columns stay empty unless `timings`.
pub fn write_results_csv<W: Write>(results: &[TrialResult], timings: bool, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in results {
        let time = |v: f64| timings.then_some(v);
        w.serialize(CsvRow {
            trial: r.trial,
            seed: r.seed,
            k: r.k,
            variant: r.variant.to_string(),
            norm: r.norm.to_string(),
            j_star: r.j_star,
            j_k: r.j_k,
            gap_percent: r.gap_percent,
            surrogate_objective: r.surrogate_objective,
            cluster_ms: time(r.cluster_ms),
            solve_ms: time(r.solve_ms),
            shave_ms: time(r.shave_ms),
            status: status_label(r.status),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(summary: &[GapSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in summary {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}
