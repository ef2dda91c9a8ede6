//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Heavy criteria 5, 6 and 9 share one batch configuration.

use std::sync::Mutex;
use std::time::Instant;

use aggflex::clustering::{estimate_lipschitz, kmeans_rhs, Clustering};
use aggflex::containment::check_ah_in_h;
use aggflex::experiments::{
    check_disaggregation, peak_shave_exact, peak_shave_multibattery, run_batch, run_batch_with, suboptimality_gap,
    write_results_csv, DisaggregationCheck, ExperimentConfig, TrialStatus,
};
use aggflex::flexibility::{build_flexibility_set, flexibility_rhs, sample_scenario, EvSpec, FlexibilitySet, ScenarioRanges};
use aggflex::multibattery::{solve_approximation, MultiBatteryModel, Variant};
use aggflex::polytope::sample::random_direction;
use aggflex::polytope::{enumerate_vertices, hausdorff_vertices, minkowski_sum_oracle, ChargingGrid, HPolytope, Representation};
use aggflex::solver::{Backend, Block, ConicProgram, LinExpr, Norm, SolveStatus, SolverConfig, SolverGateway};
use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn simplex() -> SolverGateway {
    SolverGateway::new(SolverConfig { backend: Backend::Simplex, ..Default::default() }).unwrap()
}

fn h_of(sets: &[FlexibilitySet]) -> Vec<DVector<f64>> {
    sets.iter().map(|s| s.h.clone()).collect()
}

/// Sum of support values of the EV sets in power coordinates.
fn aggregate_support(sets: &[FlexibilitySet], d: &DVector<f64>, gw: &SolverGateway) -> f64 {
    sets.iter().map(|s| s.power.support_function(d, gw).unwrap()).sum()
}

fn homothet_recovery() -> Verdict {
    let gw = SolverGateway::default();
    let lp = simplex();
    let t = 6;
    let grid = ChargingGrid::new(t, 1.0, Representation::Energy).unwrap();
    let base = EvSpec::new(0, 4, 7.0, 15.0);
    let h0 = flexibility_rhs(&base, &grid);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // U_i = tau_i + U_0, i.e. h_i = h_0 + H tau_i for a power shift tau_i.
    let sets: Vec<FlexibilitySet> = (0..5)
        .map(|_| {
            let tau = DVector::from_fn(t, |_, _| rng.random_range(-2.0..2.0));
            let h = &h0 + grid.power_matrix() * &tau;
            FlexibilitySet {
                spec: base,
                h: h.clone(),
                polytope: HPolytope::new(grid.energy_matrix().clone(), h.clone()).unwrap(),
                power: HPolytope::new(grid.power_matrix().clone(), h).unwrap(),
            }
        })
        .collect();
    let h = h_of(&sets);
    let res = solve_approximation(&h, &Clustering::single(&h).unwrap(), &grid, Norm::L2, Variant::Joint, &gw).unwrap();
    let mut worst_support: f64 = 0.0;
    for _ in 0..100 {
        let d = random_direction(t, &mut rng);
        let sb = res.model.support_function(&d, &lp).unwrap();
        worst_support = worst_support.max((sb - aggregate_support(&sets, &d, &lp)).abs());
    }
    let exact = peak_shave_exact(&sets, &lp).unwrap();
    let approx = peak_shave_multibattery(&res.model, &lp).unwrap();
    let gap = suboptimality_gap(approx.peak, exact.peak).unwrap();
    verdict(
        res.surrogate_objective <= 1e-6 && worst_support <= 1e-6 && gap <= 0.01,
        format!("surrogate {:.2e}, support mismatch {:.2e}, gap(1) {:.2e} %", res.surrogate_objective, worst_support, gap),
    )
}

/// Random nonempty virtual-battery right-hand side on a `T = 2` grid.
fn random_battery(rng: &mut ChaCha8Rng, grid: &ChargingGrid, gw: &SolverGateway) -> DVector<f64> {
    let t = grid.periods();
    loop {
        let u_hi: Vec<f64> = (0..t).map(|_| rng.random_range(0.5..4.0)).collect();
        let u_lo: Vec<f64> = u_hi.iter().map(|u| rng.random_range(0.0..0.3) * u).collect();
        let mut h = DVector::zeros(4 * t);
        let (mut lo_cum, mut hi_cum) = (0.0, 0.0);
        for k in 0..t {
            lo_cum += u_lo[k];
            hi_cum += u_hi[k];
            let x_lo = rng.random_range(lo_cum..lo_cum + 0.6 * (hi_cum - lo_cum));
            let x_hi = rng.random_range(x_lo + 0.1 * (hi_cum - x_lo)..=hi_cum);
            h[k] = x_hi;
            h[t + k] = -x_lo;
            h[2 * t + k] = u_hi[k];
            h[3 * t + k] = -u_lo[k];
        }
        let p = HPolytope::new(grid.power_matrix().clone(), h.clone()).unwrap();
        if !p.is_empty(gw).unwrap() {
            return h;
        }
    }
}

struct DeskFixture {
    sets: Vec<HPolytope>,
    model: MultiBatteryModel,
    surrogate: f64,
}

fn desk_fixtures() -> Vec<DeskFixture> {
    let gw = SolverGateway::default();
    let lp = simplex();
    let grid = ChargingGrid::new(2, 1.0, Representation::Power).unwrap();
    let mut out = Vec::new();
    for seed in 0..25u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let h: Vec<DVector<f64>> = (0..3).map(|_| random_battery(&mut rng, &grid, &lp)).collect();
        let sets: Vec<HPolytope> = h.iter().map(|b| HPolytope::new(grid.power_matrix().clone(), b.clone()).unwrap()).collect();
        for k in 1..=2 {
            let c = kmeans_rhs(&h, k, seed, 300, 10).unwrap();
            let res = solve_approximation(&h, &c, &grid, Norm::L2, Variant::Joint, &gw).unwrap();
            out.push(DeskFixture { sets: sets.clone(), model: res.model, surrogate: res.surrogate_objective });
        }
    }
    out
}

/// Smallest `s` with `|sum_i u_i - v| <= s`, `u_i in U_i`.
fn decomposition_slack(v: &DVector<f64>, sets: &[HPolytope], gw: &SolverGateway) -> f64 {
    let t = v.len();
    let mut prog = ConicProgram::new();
    let s = prog.add_block("s", 1, 1);
    let u: Vec<Block> = (0..sets.len()).map(|i| prog.add_block(format!("u{i}"), t, 1)).collect();
    for (p, ui) in sets.iter().zip(&u) {
        for r in 0..p.num_constraints() {
            let e = (0..t).fold(LinExpr::new(), |e, c| e.plus(ui.idx(c), p.a()[(r, c)]));
            prog.add_le(e, p.b()[r]);
        }
    }
    for c in 0..t {
        let sum = u.iter().fold(LinExpr::new(), |e, ui| e.plus(ui.idx(c), 1.0));
        prog.add_le(sum.clone().plus(s.idx(0), -1.0), v[c]);
        prog.add_ge(sum.plus(s.idx(0), 1.0), v[c]);
    }
    prog.add_objective(s.idx(0), 1.0);
    let sol = gw.solve_linear_program(&prog).unwrap();
    assert_eq!(sol.status, SolveStatus::Optimal);
    sol.objective
}

fn oracle_containment(fixtures: &[DeskFixture]) -> Verdict {
    let lp = simplex();
    let (mut vertices, mut violations, mut worst) = (0, 0, 0.0_f64);
    for f in fixtures {
        for v in &f.model.vertices(&lp).unwrap().vertices {
            vertices += 1;
            let slack = decomposition_slack(v, &f.sets, &lp);
            worst = worst.max(slack);
            if slack > 1e-7 * (1.0 + v.amax()) {
                violations += 1;
            }
        }
    }
    verdict(
        violations == 0,
        format!("{} models, {vertices} vertices of B, {violations} violations, worst slack {worst:.1e}", fixtures.len()),
    )
}

fn bound_ordering(fixtures: &[DeskFixture]) -> Verdict {
    let lp = simplex();
    let grid = ChargingGrid::new(2, 1.0, Representation::Power).unwrap();
    let l = estimate_lipschitz(grid.power_matrix(), Norm::L2, Norm::L2).unwrap();
    assert!(l.exact);
    let mut failures = 0;
    let mut tightest = f64::INFINITY;
    for f in fixtures {
        let u = minkowski_sum_oracle(&f.sets.iter().collect::<Vec<_>>(), &lp).unwrap();
        let b = f.model.vertices(&lp).unwrap();
        let d = hausdorff_vertices(&b, &u, Norm::L2, &lp).unwrap();
        let bound = l.value * f.surrogate;
        tightest = tightest.min(bound - d);
        if d > bound + 1e-9 {
            failures += 1;
        }
    }
    verdict(
        failures == 0,
        format!("L(H) = {:.6}, {failures} of {} above the bound, smallest margin {tightest:.2e}", l.value, fixtures.len()),
    )
}

fn lemma_exactness() -> Verdict {
    let lp = simplex();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut agree, mut contained) = (0, 0);
    for _ in 0..100 {
        // X: unit box cut by a random half-plane through a point of the box.
        let mut xa = HPolytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap().a().clone().insert_row(4, 0.0);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        xa[(4, 0)] = theta.cos();
        xa[(4, 1)] = theta.sin();
        let xb = DVector::from_vec(vec![1.0, 1.0, 1.0, 1.0, rng.random_range(-0.5..1.0)]);
        let x = HPolytope::new(xa, xb).unwrap();
        // Y: six jittered directions around the circle with random offsets.
        let mut ya = DMatrix::zeros(6, 2);
        let mut yb = DVector::zeros(6);
        for j in 0..6 {
            let phi = std::f64::consts::TAU * (j as f64 + rng.random_range(-0.3..0.3)) / 6.0;
            ya[(j, 0)] = phi.cos();
            ya[(j, 1)] = phi.sin();
            yb[j] = rng.random_range(0.8..3.0);
        }
        let y = HPolytope::new(ya, yb).unwrap();
        let gamma = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let gmap = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.2..1.2));
        let truth =
            enumerate_vertices(&x, &lp).unwrap().vertices.iter().all(|v| y.is_member(&(&gamma + &gmap * v), 1e-9).unwrap());
        let got = check_ah_in_h(&gamma, &gmap, &x, &y, &lp).unwrap().is_contained();
        agree += (truth == got) as usize;
        contained += truth as usize;
    }
    verdict(agree == 100, format!("{agree}/100 agree with the vertex oracle ({contained} contained)"))
}

fn batch_config() -> ExperimentConfig {
    ExperimentConfig {
        trials: 20,
        evs: 20,
        ranges: ScenarioRanges::with_periods(12),
        k_min: 1,
        k_max: 4,
        variant: Variant::ClusterWise,
        master_seed: 0,
        ..Default::default()
    }
}

fn csv_bytes(out: &aggflex::experiments::BatchOutcome) -> Vec<u8> {
    let mut buf = Vec::new();
    write_results_csv(&out.results, out.timings, &mut buf).unwrap();
    buf
}

/// Smallest loss over every 2-partition with point 0 in the first part.
fn exhaustive_two_means(pts: &[DVector<f64>]) -> f64 {
    let (n, d) = (pts.len(), pts[0].len());
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << (n - 1)) {
        let assign: Vec<usize> = (0..n).map(|i| usize::from(i > 0 && mask & (1 << (i - 1)) != 0)).collect();
        let loss: f64 = (0..2)
            .map(|k| {
                let members: Vec<&DVector<f64>> = pts.iter().zip(&assign).filter(|(_, &a)| a == k).map(|(p, _)| p).collect();
                let mean = members.iter().fold(DVector::zeros(d), |s, p| s + *p) / members.len() as f64;
                members.iter().map(|p| (*p - &mean).norm_squared()).sum::<f64>()
            })
            .sum();
        best = best.min(loss);
    }
    best
}

fn reaches_minimum(pts: &[DVector<f64>], seed: u64) -> (bool, bool) {
    let c = kmeans_rhs(pts, 2, seed, 300, 10).unwrap();
    let best = exhaustive_two_means(pts);
    let d = pts[0].len();
    let exact_means = (0..2).all(|k| {
        let m = c.members(k);
        let mean = m.iter().fold(DVector::zeros(d), |s, &i| s + &pts[i]) / m.len() as f64;
        (&mean - &c.centroids[k]).amax() <= 1e-12 * (1.0 + mean.amax())
    });
    (c.loss <= best * (1.0 + 1e-9) + 1e-12, exact_means)
}

fn kmeans_optimality() -> Verdict {
    // Right-hand sides of sampled EVs at T = 2, so each point has 4T = 8 entries.
    let ranges = ScenarioRanges::with_periods(2);
    let grid = ranges.grid(Representation::Energy).unwrap();
    let (mut optimal, mut centroid_ok) = (0, 0);
    for run in 0..100u64 {
        let specs = sample_scenario(8, 7000 + run, &ranges).unwrap();
        let pts: Vec<DVector<f64>> = specs.iter().map(|s| flexibility_rhs(s, &grid)).collect();
        let (opt, means) = reaches_minimum(&pts, run);
        optimal += opt as usize;
        centroid_ok += means as usize;
    }
    // Uniform points in [0, 10]^8 have many more Lloyd fixed points; reported only.
    let mut cube = 0;
    for run in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + run);
        let pts: Vec<DVector<f64>> = (0..8).map(|_| DVector::from_fn(8, |_, _| rng.random_range(0.0..10.0))).collect();
        let (opt, means) = reaches_minimum(&pts, run);
        cube += opt as usize;
        centroid_ok += means as usize;
    }
    verdict(
        optimal >= 95 && centroid_ok == 200,
        format!(
            "{optimal}/100 EV runs reach the exhaustive minimum ({cube}/100 on uniform cube points), centroid identity in {centroid_ok}/200"
        ),
    )
}

fn variant_ordering() -> Verdict {
    let gw = SolverGateway::default();
    let ranges = ScenarioRanges::with_periods(6);
    let grid = ranges.grid(Representation::Energy).unwrap();
    let mut worst = f64::INFINITY;
    let mut failures = 0;
    for seed in 0..10u64 {
        let specs = sample_scenario(8, 500 + seed, &ranges).unwrap();
        let sets: Vec<FlexibilitySet> = specs.iter().map(|s| build_flexibility_set(s, &grid, &gw).unwrap()).collect();
        let h = h_of(&sets);
        let c = kmeans_rhs(&h, 2 + (seed as usize % 2), seed, 300, 10).unwrap();
        let joint = solve_approximation(&h, &c, &grid, Norm::L2, Variant::Joint, &gw).unwrap().surrogate_objective;
        let split = solve_approximation(&h, &c, &grid, Norm::L2, Variant::ClusterWise, &gw).unwrap().surrogate_objective;
        worst = worst.min(split - joint);
        if split < joint - 1e-6 {
            failures += 1;
        }
    }
    verdict(failures == 0, format!("{failures}/10 violations, smallest ClusterWise - Joint = {worst:.3e}"))
}

fn timed(f: impl FnOnce() -> Verdict) -> (Verdict, f64) {
    let s = Instant::now();
    let v = f();
    (v, s.elapsed().as_secs_f64())
}

fn main() {
    let mut lines: Vec<(usize, bool, String)> = Vec::new();
    let mut record = |n: usize, v: Verdict, secs: f64| {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {n}: {tag} ({secs:.1} s) {}", v.detail);
        lines.push((n, v.pass, v.detail));
    };

    let (v, s) = timed(homothet_recovery);
    let v = Verdict { pass: v.pass && s < 10.0, ..v };
    record(1, v, s);

    let start = Instant::now();
    let fixtures = desk_fixtures();
    let build = start.elapsed().as_secs_f64();
    let (v, s) = timed(|| oracle_containment(&fixtures));
    let s = s + build;
    record(2, Verdict { pass: v.pass && s < 60.0, ..v }, s);
    let (v, s) = timed(|| bound_ordering(&fixtures));
    record(3, v, s);

    let (v, s) = timed(lemma_exactness);
    record(4, v, s);

    let cfg = batch_config();
    let lp = simplex();
    let checks: Mutex<Vec<DisaggregationCheck>> = Mutex::new(Vec::new());
    let start = Instant::now();
    let first = run_batch_with(&cfg, &SolverGateway::default(), |ctx, res| {
        let power: Vec<HPolytope> = ctx.flex_sets.iter().map(|f| f.power.clone()).collect();
        let seed = ctx.seed ^ res.model.k() as u64;
        let c = check_disaggregation(&res.model, &res.map, &power, 100, seed, 1e-7, &lp).unwrap();
        checks.lock().unwrap().push(c);
    })
    .unwrap();
    let batch_secs = start.elapsed().as_secs_f64();
    let failed = first.results.iter().filter(|r| r.status != TrialStatus::Ok).count();
    let med: Vec<f64> = first.summary.iter().map(|s| s.median).collect();
    let drop = med[0] - med[2];
    let monotone = med.windows(2).all(|w| w[1] <= w[0] + 0.5);
    let v = verdict(
        failed == 0 && drop >= 1.0 && monotone && batch_secs < 1800.0,
        format!(
            "ClusterWise, {failed} failed rows, median gap by K = {}, gap(1) - gap(3) = {drop:.3} pp",
            med.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>().join(" / ")
        ),
    );
    record(5, v, batch_secs);

    let checks = checks.into_inner().unwrap();
    let samples: usize = checks.iter().map(|c| c.samples).sum();
    let passed: usize = checks.iter().map(|c| c.passed).sum();
    let worst_v = checks.iter().map(|c| c.max_violation).fold(0.0, f64::max);
    let worst_r = checks.iter().map(|c| c.max_relative_residual).fold(0.0, f64::max);
    let v = verdict(
        checks.len() == 80 && passed == samples,
        format!(
            "{} models, {passed}/{samples} draws pass, worst violation {worst_v:.1e}, worst relative residual {worst_r:.1e}",
            checks.len()
        ),
    );
    record(6, v, 0.0);

    let (v, s) = timed(kmeans_optimality);
    record(7, v, s);
    let (v, s) = timed(variant_ordering);
    record(8, v, s);

    let (v, s) = timed(|| {
        let second = run_batch(&cfg, &SolverGateway::default()).unwrap();
        let (a, b) = (csv_bytes(&first), csv_bytes(&second));
        verdict(a == b, format!("{} bytes, identical: {}", a.len(), a == b))
    });
    record(9, v, s);

    let failed: Vec<usize> = lines.iter().filter(|l| !l.1).map(|l| l.0).collect();
    if failed.is_empty() {
        println!("acceptance: all 9 criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
