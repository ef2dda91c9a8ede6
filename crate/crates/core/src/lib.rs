//! Multi-battery inner approximations of aggregate EV flexibility sets.

pub mod clustering;
pub mod containment;
pub mod error;
pub mod experiments;
pub mod flexibility;
pub mod io;
pub mod multibattery;
pub mod polytope;
pub mod solver;

pub use clustering::{estimate_lipschitz, kmeans_rhs, Clustering, LipschitzEstimate};
pub use containment::{check_ah_in_h, verify_certificate, ContainmentCertificate, ContainmentOutcome};
pub use error::{Error, Result};
pub use experiments::{
    peak_shave_exact, peak_shave_multibattery, run_batch, suboptimality_gap, ExperimentConfig, GapSummary, TrialResult,
    TrialStatus,
};
pub use flexibility::{build_flexibility_set, sample_scenario, EvSpec, FlexibilitySet, ScenarioRanges};
pub use io::{ModelFile, ScenarioFile};
pub use multibattery::{
    build_approx_program, disaggregate, solve_approximation, ApproximationResult, DisaggregationMap, MultiBatteryModel, Variant,
};
pub use polytope::{ChargingGrid, HPolytope, Representation, VPolytope};
pub use solver::{Backend, Norm, SolveStatus, SolverConfig, SolverGateway};
