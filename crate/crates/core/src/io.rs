//! JSON artifacts: scenario and model files.
//!
//! Floats are written as the shortest decimal that parses back to the same
//! `f64`, so files round-trip exactly.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flexibility::{build_flexibility_set, EvSpec, FlexibilitySet};
use crate::multibattery::{
    verify_model, ApproximationResult, DisaggregationMap, InvariantReport, MultiBatteryModel, Variant, AUDIT_TOL,
};
use crate::polytope::{ChargingGrid, HPolytope, Representation};
use crate::solver::{Norm, SolverGateway};

pub const GENERATOR_VERSION: &str = concat!("aggflex ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub seed: Option<u64>,
    pub generator_version: String,
}

impl Meta {
    pub fn new(seed: Option<u64>) -> Self {
        Self { seed, generator_version: GENERATOR_VERSION.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvRecord {
    pub arrival: usize,
    pub departure: usize,
    pub max_rate_kw: f64,
    pub energy_kwh: f64,
}

impl From<&EvSpec> for EvRecord {
    fn from(s: &EvSpec) -> Self {
        Self { arrival: s.arrival, departure: s.departure, max_rate_kw: s.max_rate, energy_kwh: s.energy }
    }
}

impl From<&EvRecord> for EvSpec {
    fn from(r: &EvRecord) -> Self {
        EvSpec::new(r.arrival, r.departure, r.max_rate_kw, r.energy_kwh)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub delta_hours: f64,
    #[serde(rename = "T")]
    pub periods: usize,
    pub evs: Vec<EvRecord>,
    pub meta: Meta,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

impl ScenarioFile {
    pub fn new(specs: &[EvSpec], periods: usize, delta_hours: f64, seed: Option<u64>) -> Self {
        Self { delta_hours, periods, evs: specs.iter().map(EvRecord::from).collect(), meta: Meta::new(seed) }
    }

    pub fn specs(&self) -> Vec<EvSpec> {
        self.evs.iter().map(EvSpec::from).collect()
    }

    pub fn grid(&self, representation: Representation) -> Result<ChargingGrid> {
        ChargingGrid::new(self.periods, self.delta_hours, representation)
    }

    /// Every EV must pass spec validation on the file's grid.
    pub fn validate(&self) -> Result<()> {
        if self.evs.is_empty() {
            return Err(Error::Config("scenario has no EVs".into()));
        }
        let grid = self.grid(Representation::Power)?;
        for (i, s) in self.specs().iter().enumerate() {
            s.validate(&grid).map_err(|e| Error::Config(format!("EV {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn flexibility_sets(
        &self,
        representation: Representation,
        gw: &SolverGateway,
    ) -> Result<(ChargingGrid, Vec<FlexibilitySet>)> {
        let grid = self.grid(representation)?;
        let sets = self.specs().iter().map(|s| build_flexibility_set(s, &grid, gw)).collect::<Result<Vec<_>>>()?;
        Ok((grid, sets))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = read_json(path)?;
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(self, path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    #[serde(rename = "T")]
    pub periods: usize,
    pub delta_hours: f64,
    pub representation: Representation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringRecord {
    /// 0-based cluster of each EV.
    pub assignments: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Base-set right-hand sides `b_k`.
    pub b: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRecord {
    pub gamma: Vec<Vec<f64>>,
    /// `gamma_map[k][i]`, row-major.
    pub gamma_map: Vec<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<Vec<Vec<Vec<f64>>>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverRecord {
    pub backend: String,
    pub variant: Variant,
    pub norm: Norm,
    pub surrogate_objective: f64,
    pub audit: InvariantReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub grid: GridRecord,
    pub clustering: ClusteringRecord,
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
    pub map: MapRecord,
    /// EVs the map disaggregates to, so a model can be verified on its own.
    pub evs: Vec<EvRecord>,
    pub solver: SolverRecord,
    pub meta: Meta,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>], shape: (usize, usize), what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(Error::DimensionMismatch(format!("{what} is not {}x{}", shape.0, shape.1)));
    }
    Ok(DMatrix::from_fn(shape.0, shape.1, |r, c| rows[r][c]))
}

fn vector(v: &[f64], len: usize, what: &str) -> Result<DVector<f64>> {
    if v.len() != len {
        return Err(Error::DimensionMismatch(format!("{what} has length {} instead of {len}", v.len())));
    }
    Ok(DVector::from_column_slice(v))
}

/// A model reloaded from disk together with its EV sets.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub model: MultiBatteryModel,
    pub map: DisaggregationMap,
    pub flex_sets: Vec<FlexibilitySet>,
    pub variant: Variant,
    pub norm: Norm,
}

impl LoadedModel {
    pub fn h_list(&self) -> Vec<DVector<f64>> {
        self.flex_sets.iter().map(|f| f.h.clone()).collect()
    }

    pub fn power_sets(&self) -> Vec<HPolytope> {
        self.flex_sets.iter().map(|f| f.power.clone()).collect()
    }

    /// Audit every map invariant at `tol`, re-deriving certificates when the
    /// file carried none.
    pub fn verify(&self, tol: f64, gw: &SolverGateway) -> Result<InvariantReport> {
        let report = verify_model(&self.model, &self.map, &self.h_list(), gw)?;
        if !report.within(tol) {
            return Err(Error::PreconditionViolation(format!(
                "model fails its invariants: largest residual {:e} above {tol:e}",
                report.max_residual()
            )));
        }
        Ok(report)
    }
}

impl ModelFile {
    pub fn from_result(
        res: &ApproximationResult,
        specs: &[EvSpec],
        with_certificates: bool,
        backend: &str,
        seed: Option<u64>,
    ) -> Self {
        let m = &res.model;
        let g = &m.grid;
        Self {
            grid: GridRecord { periods: g.periods(), delta_hours: g.delta(), representation: g.representation() },
            clustering: ClusteringRecord {
                assignments: m.assignments.clone(),
                sizes: m.cluster_sizes.clone(),
                b: m.bases.iter().map(|b| b.b().as_slice().to_vec()).collect(),
            },
            mu: m.mu.iter().map(|v| v.as_slice().to_vec()).collect(),
            sigma: m.sigma.clone(),
            map: MapRecord {
                gamma: res.map.gamma.iter().map(|v| v.as_slice().to_vec()).collect(),
                gamma_map: res.map.gamma_map.iter().map(|row| row.iter().map(rows).collect()).collect(),
                lambda: if with_certificates {
                    res.map.lambda.as_ref().map(|l| l.iter().map(|row| row.iter().map(rows).collect()).collect())
                } else {
                    None
                },
            },
            evs: specs.iter().map(EvRecord::from).collect(),
            solver: SolverRecord {
                backend: backend.into(),
                variant: res.variant,
                norm: res.norm,
                surrogate_objective: res.surrogate_objective,
                audit: res.audit,
            },
            meta: Meta::new(seed),
        }
    }

    /// Rebuild the model without checking its invariants.
    pub fn to_model(&self, gw: &SolverGateway) -> Result<LoadedModel> {
        let grid = ChargingGrid::new(self.grid.periods, self.grid.delta_hours, self.grid.representation)?;
        let (t, m) = (grid.periods(), grid.num_constraints());
        let k = self.clustering.b.len();
        let n = self.evs.len();
        if k < 1 || self.mu.len() != k || self.sigma.len() != k || self.clustering.sizes.len() != k {
            return Err(Error::DimensionMismatch("base sets, mu, sigma and cluster sizes disagree in K".into()));
        }
        if self.clustering.assignments.len() != n || self.map.gamma.len() != n {
            return Err(Error::DimensionMismatch("assignments and translations must list every EV".into()));
        }
        if let Some(&bad) = self.clustering.assignments.iter().find(|&&a| a >= k) {
            return Err(Error::Index(format!("cluster id {bad} with K = {k}")));
        }
        let bases = self
            .clustering
            .b
            .iter()
            .enumerate()
            .map(|(j, b)| {
                Ok(HPolytope::new(grid.constraint_matrix().clone(), vector(b, m, "b_k")?)?.with_label(format!("B{}", j + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        let model = MultiBatteryModel {
            grid: grid.clone(),
            bases,
            mu: self.mu.iter().map(|v| vector(v, t, "mu_k")).collect::<Result<_>>()?,
            sigma: self.sigma.clone(),
            cluster_sizes: self.clustering.sizes.clone(),
            assignments: self.clustering.assignments.clone(),
        };
        let blocks = |b: &Vec<Vec<Vec<Vec<f64>>>>, shape: (usize, usize), what: &str| -> Result<Vec<Vec<DMatrix<f64>>>> {
            if b.len() != k || b.iter().any(|row| row.len() != n) {
                return Err(Error::DimensionMismatch(format!("{what} must be indexed K x N")));
            }
            b.iter().map(|row| row.iter().map(|g| matrix(g, shape, what)).collect()).collect()
        };
        let map = DisaggregationMap {
            gamma: self.map.gamma.iter().map(|v| vector(v, t, "gamma_i")).collect::<Result<_>>()?,
            gamma_map: blocks(&self.map.gamma_map, (t, t), "Gamma")?,
            lambda: self.map.lambda.as_ref().map(|l| blocks(l, (m, m), "Lambda")).transpose()?,
        };
        let flex_sets =
            self.evs.iter().map(|r| build_flexibility_set(&EvSpec::from(r), &grid, gw)).collect::<Result<Vec<_>>>()?;
        Ok(LoadedModel { model, map, flex_sets, variant: self.solver.variant, norm: self.solver.norm })
    }

    /// Load and verify at the audit tolerance before use.
    pub fn load_verified(path: &Path, gw: &SolverGateway) -> Result<LoadedModel> {
        let loaded = Self::load(path)?.to_model(gw)?;
        loaded.verify(AUDIT_TOL, gw)?;
        Ok(loaded)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(self, path)
    }
}
