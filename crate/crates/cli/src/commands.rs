use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use aggflex::experiments::{
    check_disaggregation, peak_shave_exact, peak_shave_multibattery, run_batch, summarize, write_results_csv, write_summary_csv,
    TrialResult, TrialStatus,
};
use aggflex::flexibility::sample_scenario;
use aggflex::io::{LoadedModel, ModelFile, ScenarioFile};
use aggflex::multibattery::{decompose_into_bases, disaggregate, AUDIT_TOL};
use aggflex::{kmeans_rhs, solve_approximation, Error, Result, ScenarioRanges, SolveStatus, SolverGateway};
use nalgebra::DVector;
use serde::Serialize;

use crate::config::Config;
use crate::plot;
use crate::{Cli, Command, KmeansArgs, PlotCommand};

/// Write to `path`, or stdout when absent.
fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => fs::write(p, bytes)?,
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn emit_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    emit(path, text.as_bytes())
}

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.as_slice().to_vec()
}

fn parse_k_range(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("K range must look like `1..4`, got `{s}`"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let b = b.strip_prefix('=').unwrap_or(b);
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn read_profile(path: &Path, periods: usize) -> Result<DVector<f64>> {
    let v: Vec<f64> = serde_json::from_str(&fs::read_to_string(path)?)?;
    if v.len() != periods {
        return Err(Error::DimensionMismatch(format!("profile has {} entries, model has {periods} periods", v.len())));
    }
    Ok(DVector::from_vec(v))
}

fn load_model(path: &Path, gw: &SolverGateway) -> Result<LoadedModel> {
    ModelFile::load_verified(path, gw)
}

fn ranges_for(cfg: &Config, periods: Option<usize>) -> ScenarioRanges {
    let mut r = cfg.experiment.ranges.clone();
    if let Some(t) = periods {
        let fresh = ScenarioRanges::with_periods(t);
        r.periods = fresh.periods;
        r.delta = fresh.delta;
    }
    r
}

#[derive(Serialize)]
struct ClusterOut {
    k: usize,
    loss: f64,
    assignments: Vec<usize>,
    sizes: Vec<usize>,
    centroids: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct PeakOut {
    kind: &'static str,
    peak_kw: f64,
    aggregate_kw: Vec<f64>,
    profiles_kw: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize)]
struct DisaggregateOut {
    profiles_kw: Vec<Vec<f64>>,
    max_violation: f64,
    max_abs_residual_kw: f64,
}

/// Per-EV profiles for an aggregate `u`, after checking `u in B`.
fn split_profile(loaded: &LoadedModel, u: &DVector<f64>, gw: &SolverGateway) -> Result<DisaggregateOut> {
    let v = decompose_into_bases(u, &loaded.model, gw)?
        .ok_or_else(|| Error::PreconditionViolation("profile is not a member of the multi-battery set".into()))?;
    let parts = disaggregate(&v, &loaded.model, &loaded.map)?;
    let sets = loaded.power_sets();
    let mut max_violation = 0.0_f64;
    for (p, s) in parts.iter().zip(&sets) {
        max_violation = max_violation.max(s.max_violation(p)?);
    }
    let sum = parts.iter().fold(DVector::zeros(u.len()), |s, p| s + p);
    Ok(DisaggregateOut { profiles_kw: parts.iter().map(vec_of).collect(), max_violation, max_abs_residual_kw: (sum - u).amax() })
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = Config::load(cli.config.as_deref())?;
    let gw = SolverGateway::new(cfg.solver.clone())?;
    match &cli.command {
        Command::Generate { n, seed, periods, output } => {
            let ranges = ranges_for(&cfg, *periods);
            let specs = sample_scenario(*n, *seed, &ranges)?;
            let file = ScenarioFile::new(&specs, ranges.periods, ranges.delta, Some(*seed));
            emit_json(output.as_deref(), &file)
        }
        Command::Cluster { scenario, k, kmeans, output } => {
            let file = ScenarioFile::load(scenario)?;
            let (_, sets) = file.flexibility_sets(aggflex::Representation::Power, &gw)?;
            let h: Vec<DVector<f64>> = sets.iter().map(|s| s.h.clone()).collect();
            let c = kmeans_rhs(&h, *k, kmeans.seed, kmeans.max_iters, kmeans.restarts)?;
            emit_json(
                output.as_deref(),
                &ClusterOut {
                    k: *k,
                    loss: c.loss,
                    assignments: c.assignments.clone(),
                    sizes: c.sizes.clone(),
                    centroids: c.centroids.iter().map(vec_of).collect(),
                },
            )
        }
        Command::Approximate { scenario, k, model, kmeans, with_certificates, output } => {
            approximate(&gw, scenario, *k, model, kmeans, *with_certificates, output.as_deref())
        }
        Command::PeakShave { exact, scenario, model, output } => {
            let out = if *exact {
                let file = ScenarioFile::load(scenario.as_deref().expect("clap requires --scenario"))?;
                let (_, sets) = file.flexibility_sets(aggflex::Representation::Power, &gw)?;
                let p = peak_shave_exact(&sets, &gw)?;
                PeakOut {
                    kind: "exact",
                    peak_kw: p.peak,
                    aggregate_kw: vec_of(&p.aggregate),
                    profiles_kw: Some(p.profiles.iter().map(vec_of).collect()),
                }
            } else {
                let loaded = load_model(model.as_deref().expect("clap requires --model"), &gw)?;
                let p = peak_shave_multibattery(&loaded.model, &gw)?;
                let parts = disaggregate(&p.v_tilde, &loaded.model, &loaded.map)?;
                PeakOut {
                    kind: "multibattery",
                    peak_kw: p.peak,
                    aggregate_kw: vec_of(&p.aggregate),
                    profiles_kw: Some(parts.iter().map(vec_of).collect()),
                }
            };
            eprintln!("{} peak: {:.6} kW", out.kind, out.peak_kw);
            emit_json(output.as_deref(), &out)
        }
        Command::Gap { k_range, trials, n, periods, seed, jobs, variant, norm, representation, timings, summary, output } => {
            let mut e = cfg.experiment.clone();
            e.ranges = ranges_for(&cfg, *periods);
            if let Some(r) = k_range {
                (e.k_min, e.k_max) = parse_k_range(r)?;
            }
            e.trials = trials.unwrap_or(e.trials);
            e.evs = n.unwrap_or(e.evs);
            e.master_seed = seed.unwrap_or(e.master_seed);
            e.jobs = jobs.unwrap_or(e.jobs);
            e.variant = variant.unwrap_or(e.variant);
            e.norm = norm.unwrap_or(e.norm);
            e.representation = representation.unwrap_or(e.representation);
            e.timings |= *timings;
            let out = run_batch(&e, &gw)?;
            let mut buf = Vec::new();
            write_results_csv(&out.results, out.timings, &mut buf)?;
            emit(output.as_deref(), &buf)?;
            if let Some(p) = summary {
                write_summary_csv(&out.summary, fs::File::create(p)?)?;
            }
            for s in &out.summary {
                eprintln!(
                    "K={} n={} failed={} min={:.3} q1={:.3} median={:.3} q3={:.3} max={:.3}",
                    s.k, s.count, s.failures, s.min, s.q1, s.median, s.q3, s.max
                );
            }
            Ok(())
        }
        Command::Disaggregate { model, profile, output } => {
            let loaded = load_model(model, &gw)?;
            let u = read_profile(profile, loaded.model.grid.periods())?;
            emit_json(output.as_deref(), &split_profile(&loaded, &u, &gw)?)
        }
        Command::Verify { model, samples, seed, tol } => {
            let loaded = ModelFile::load(model)?.to_model(&gw)?;
            let audit = loaded.verify(*tol, &gw)?;
            let check = check_disaggregation(&loaded.model, &loaded.map, &loaded.power_sets(), *samples, *seed, *tol, &gw)?;
            println!("invariants: max residual {:.3e} (tol {tol:e})", audit.max_residual());
            println!(
                "{}/{} contained samples (max violation {:.3e}, max relative residual {:.3e})",
                check.passed, check.samples, check.max_violation, check.max_relative_residual
            );
            if !check.all_passed() {
                return Err(Error::PreconditionViolation(format!(
                    "{} of {} samples failed",
                    check.samples - check.passed,
                    check.samples
                )));
            }
            Ok(())
        }
        Command::Plot { figure } => plot_cmd(figure, &gw),
    }
}

fn approximate(
    gw: &SolverGateway,
    scenario: &Path,
    k: usize,
    args: &crate::ModelArgs,
    kmeans: &KmeansArgs,
    with_certificates: bool,
    output: Option<&Path>,
) -> Result<()> {
    let file = ScenarioFile::load(scenario)?;
    let (grid, sets) = file.flexibility_sets(args.representation, gw)?;
    let h: Vec<DVector<f64>> = sets.iter().map(|s| s.h.clone()).collect();
    let c = kmeans_rhs(&h, k, kmeans.seed, kmeans.max_iters, kmeans.restarts)?;
    let res = solve_approximation(&h, &c, &grid, args.norm, args.variant, gw)?;
    let backend = gw.config().backend.to_string();
    let mf = ModelFile::from_result(&res, &file.specs(), with_certificates, &backend, file.meta.seed);
    // An emitted model must pass its own verification.
    mf.to_model(gw)?.verify(AUDIT_TOL, gw).map_err(|_| Error::Solver(SolveStatus::NumericFailure))?;
    eprintln!(
        "surrogate objective {:.6} ({} / {}, {}), sigma = {:?}",
        res.surrogate_objective, args.norm, args.variant, args.representation, res.model.sigma
    );
    emit_json(output, &mf)
}

fn read_results(path: &PathBuf) -> Result<Vec<TrialResult>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Config(format!("results file lacks column `{name}`")))
    };
    let (ck, cg, cs) = (col("K")?, col("gap_percent")?, col("status")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| rec.get(i).filter(|s| !s.is_empty()).map(|s| s.parse::<f64>());
        let k: usize = rec[ck].parse().map_err(|_| Error::Config(format!("bad K `{}`", &rec[ck])))?;
        let gap = num(cg).transpose().map_err(|_| Error::Config("bad gap_percent value".into()))?;
        let status = if &rec[cs] == "ok" { TrialStatus::Ok } else { TrialStatus::Error };
        out.push(TrialResult {
            trial: out.len(),
            seed: 0,
            n: 0,
            t: 0,
            k,
            variant: Default::default(),
            norm: aggflex::Norm::L2,
            j_star: None,
            j_k: None,
            gap_percent: gap,
            surrogate_objective: None,
            cluster_ms: 0.0,
            solve_ms: 0.0,
            shave_ms: 0.0,
            status,
            message: None,
        });
    }
    Ok(out)
}

fn plot_cmd(figure: &PlotCommand, gw: &SolverGateway) -> Result<()> {
    match figure {
        PlotCommand::Gap { results, data, output } => {
            let summary = summarize(&read_results(results)?);
            if let Some(p) = data {
                write_summary_csv(&summary, fs::File::create(p)?)?;
            }
            emit(output.as_deref(), plot::gap_boxplot(&summary).as_bytes())
        }
        PlotCommand::Profiles { model, profile, data, output } => {
            let loaded = load_model(model, gw)?;
            let u = match profile {
                Some(p) => read_profile(p, loaded.model.grid.periods())?,
                None => peak_shave_multibattery(&loaded.model, gw)?.aggregate,
            };
            let split = split_profile(&loaded, &u, gw)?;
            if let Some(p) = data {
                let mut w = csv::Writer::from_path(p)?;
                for row in &split.profiles_kw {
                    w.serialize(row)?;
                }
                w.flush()?;
            }
            emit(output.as_deref(), plot::stacked_profiles(&split.profiles_kw, "Disaggregated EV charging profiles").as_bytes())
        }
    }
}
