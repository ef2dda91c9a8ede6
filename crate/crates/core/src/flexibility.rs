//! EV flexibility sets, scenario sampling and unmanaged charging.

use nalgebra::DVector;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polytope::{ChargingGrid, HPolytope, Representation};
use crate::solver::SolverGateway;

/// One EV: plugged in at period `arrival`, must be done by period
/// `departure`, charges at most `max_rate` kW and needs `energy` kWh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvSpec {
    pub arrival: usize,
    pub departure: usize,
    pub max_rate: f64,
    pub energy: f64,
}

impl EvSpec {
    pub fn new(arrival: usize, departure: usize, max_rate: f64, energy: f64) -> Self {
        Self { arrival, departure, max_rate, energy }
    }

    /// Largest deliverable energy `delta R (d - a)`.
    pub fn capacity(&self, delta: f64) -> f64 {
        delta * self.max_rate * (self.departure - self.arrival) as f64
    }

    pub fn validate(&self, grid: &ChargingGrid) -> Result<()> {
        let t = grid.periods();
        if self.arrival >= t || self.departure >= t {
            return Err(Error::Index(format!(
                "arrival {} / departure {} outside periods 0..{}",
                self.arrival,
                self.departure,
                t - 1
            )));
        }
        if self.departure < self.arrival {
            return Err(Error::InfeasibleSpec(format!("departure {} precedes arrival {}", self.departure, self.arrival)));
        }
        if !(self.max_rate >= 0.0 && self.max_rate.is_finite()) {
            return Err(Error::InfeasibleSpec(format!("max rate {} is not a nonnegative number", self.max_rate)));
        }
        if !(self.energy >= 0.0 && self.energy.is_finite()) {
            return Err(Error::InfeasibleSpec(format!("energy {} is not a nonnegative number", self.energy)));
        }
        Ok(())
    }
}

/// Right-hand side `h = (x_max, -x_min, u_max, -u_min)` of one EV.
pub fn flexibility_rhs(spec: &EvSpec, grid: &ChargingGrid) -> DVector<f64> {
    let t_len = grid.periods();
    let delta = grid.delta();
    let (a, d, r, e) = (spec.arrival as f64, spec.departure as f64, spec.max_rate, spec.energy);
    let mut h = DVector::zeros(4 * t_len);
    for k in 0..t_len {
        // Energy limits are indexed t = 1..T, power limits t = 0..T-1.
        let t = (k + 1) as f64;
        let x_max = if t >= a { e.min(delta * r * (t - a)) } else { 0.0 };
        let x_min = if t >= a && t <= d {
            (e - delta * r * (d - t)).max(0.0)
        } else if t > d {
            e
        } else {
            0.0
        };
        let tu = k as f64;
        let u_max = if tu >= a && tu <= d { r } else { 0.0 };
        h[k] = x_max;
        h[t_len + k] = -x_min;
        h[2 * t_len + k] = u_max;
        h[3 * t_len + k] = 0.0;
    }
    h
}

/// Admissible charging profiles of one EV.
#[derive(Debug, Clone, PartialEq)]
pub struct FlexibilitySet {
    pub spec: EvSpec,
    pub h: DVector<f64>,
    /// Set in the grid's active coordinates.
    pub polytope: HPolytope,
    /// Same set in power coordinates.
    pub power: HPolytope,
}

impl FlexibilitySet {
    pub fn upper_energy(&self) -> DVector<f64> {
        let t = self.h.len() / 4;
        self.h.rows(0, t).into_owned()
    }

    pub fn lower_energy(&self) -> DVector<f64> {
        let t = self.h.len() / 4;
        -self.h.rows(t, t).into_owned()
    }

    pub fn upper_power(&self) -> DVector<f64> {
        let t = self.h.len() / 4;
        self.h.rows(2 * t, t).into_owned()
    }

    pub fn lower_power(&self) -> DVector<f64> {
        let t = self.h.len() / 4;
        -self.h.rows(3 * t, t).into_owned()
    }

    /// Membership of a power profile.
    pub fn contains_profile(&self, u: &DVector<f64>, tol: f64) -> Result<bool> {
        self.power.is_member(u, tol)
    }
}

pub fn build_flexibility_set(spec: &EvSpec, grid: &ChargingGrid, gw: &SolverGateway) -> Result<FlexibilitySet> {
    spec.validate(grid)?;
    let h = flexibility_rhs(spec, grid);
    let power = HPolytope::new(grid.power_matrix().clone(), h.clone())?;
    if power.is_empty(gw)? {
        return Err(Error::InfeasibleSpec(format!(
            "energy {} kWh exceeds deliverable {} kWh",
            spec.energy,
            spec.capacity(grid.delta())
        )));
    }
    let polytope = match grid.representation() {
        Representation::Power => power.clone(),
        Representation::Energy => HPolytope::new(grid.energy_matrix().clone(), h.clone())?,
    };
    Ok(FlexibilitySet { spec: *spec, h, polytope, power })
}

/// Charge at full rate from arrival until the demand is met.
pub fn unmanaged_profile(spec: &EvSpec, grid: &ChargingGrid) -> Result<DVector<f64>> {
    spec.validate(grid)?;
    let delta = grid.delta();
    let mut u = DVector::zeros(grid.periods());
    let mut remaining = spec.energy;
    for t in spec.arrival..grid.periods() {
        if remaining <= 0.0 || spec.max_rate <= 0.0 {
            break;
        }
        let full = delta * spec.max_rate;
        if remaining >= full {
            u[t] = spec.max_rate;
            remaining -= full;
        } else {
            u[t] = remaining / delta;
            remaining = 0.0;
        }
    }
    Ok(u)
}

/// Sampling ranges for random scenarios. Clock times are hours of the day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioRanges {
    pub periods: usize,
    pub delta: f64,
    pub start_hour: f64,
    pub arrival_hours: (f64, f64),
    pub departure_hours: (f64, f64),
    pub rate_kw: (f64, f64),
    /// Energy drawn as this fraction of `delta R (d - a)`.
    pub energy_fraction: (f64, f64),
}

impl Default for ScenarioRanges {
    fn default() -> Self {
        Self {
            periods: 18,
            delta: 2.0 / 3.0,
            start_hour: 7.0,
            arrival_hours: (7.0, 10.0),
            departure_hours: (16.0, 19.0),
            rate_kw: (7.0, 13.0),
            energy_fraction: (0.0, 1.0),
        }
    }
}

impl ScenarioRanges {
    /// Defaults on `periods` periods spanning the same 7 AM to 7 PM window.
    pub fn with_periods(periods: usize) -> Self {
        let base = Self::default();
        let span = base.periods as f64 * base.delta;
        Self { periods, delta: span / periods.max(1) as f64, ..base }
    }

    pub fn grid(&self, representation: Representation) -> Result<ChargingGrid> {
        ChargingGrid::new(self.periods, self.delta, representation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.periods < 1 || !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config("scenario grid needs T >= 1 and delta > 0".into()));
        }
        for (name, (lo, hi)) in [
            ("arrival", self.arrival_hours),
            ("departure", self.departure_hours),
            ("rate", self.rate_kw),
            ("energy fraction", self.energy_fraction),
        ] {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::Config(format!("{name} range [{lo}, {hi}] is inverted or not finite")));
            }
        }
        if self.rate_kw.0 < 0.0 {
            return Err(Error::Config("charging rates must be nonnegative".into()));
        }
        if self.energy_fraction.0 < 0.0 || self.energy_fraction.1 > 1.0 {
            return Err(Error::Config("energy fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn period_of(&self, hour: f64) -> usize {
        let k = ((hour - self.start_hour) / self.delta).floor();
        if k <= 0.0 {
            0
        } else {
            (k as usize).min(self.periods - 1)
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// `n` random EVs, reproducible from `seed`.
pub fn sample_scenario(n: usize, seed: u64, ranges: &ScenarioRanges) -> Result<Vec<EvSpec>> {
    if n < 1 {
        return Err(Error::Config("scenario needs at least one EV".into()));
    }
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let a = ranges.period_of(draw(&mut rng, ranges.arrival_hours));
        let d = ranges.period_of(draw(&mut rng, ranges.departure_hours)).max(a);
        let r = draw(&mut rng, ranges.rate_kw);
        let frac = draw(&mut rng, ranges.energy_fraction);
        let cap = ranges.delta * r * (d - a) as f64;
        out.push(EvSpec::new(a, d, r, frac * cap));
    }
    Ok(out)
}

/// SplitMix64 finalizer applied to `master + stream`, used to derive
/// independent per-trial seeds.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
