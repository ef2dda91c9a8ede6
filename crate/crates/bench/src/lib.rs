//! Shared fixtures for the benchmarks.

use aggflex::flexibility::{build_flexibility_set, sample_scenario, FlexibilitySet, ScenarioRanges};
use aggflex::{ChargingGrid, Representation, SolverGateway};
use nalgebra::DVector;

pub struct Fleet {
    pub grid: ChargingGrid,
    pub sets: Vec<FlexibilitySet>,
}

impl Fleet {
    pub fn sample(n: usize, periods: usize, seed: u64) -> Self {
        let ranges = ScenarioRanges::with_periods(periods);
        let grid = ranges.grid(Representation::Energy).expect("valid ranges");
        let gw = SolverGateway::default();
        let sets = sample_scenario(n, seed, &ranges)
            .expect("valid scenario")
            .iter()
            .map(|s| build_flexibility_set(s, &grid, &gw).expect("sampled EVs are feasible"))
            .collect();
        Self { grid, sets }
    }

    pub fn h_list(&self) -> Vec<DVector<f64>> {
        self.sets.iter().map(|s| s.h.clone()).collect()
    }
}
