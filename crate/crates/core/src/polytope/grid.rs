use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coordinates in which flexibility polytopes are written.
///
/// `Power` uses charging profiles `u` with constraint matrix `H`; `Energy`
/// uses cumulative energy profiles `x = L u` with constraint matrix `H L^-1`,
/// whose blocks are `±I` and the bidiagonal `±L^-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    #[default]
    Power,
    Energy,
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Representation::Power => "power",
            Representation::Energy => "energy",
        })
    }
}

impl FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "power" | "powerspace" => Ok(Representation::Power),
            "energy" | "energyspace" => Ok(Representation::Energy),
            other => Err(Error::Config(format!("unknown representation `{other}`"))),
        }
    }
}

/// Time discretization and the stacked charging constraint matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ChargingGrid {
    periods: usize,
    delta: f64,
    representation: Representation,
    cumulative: DMatrix<f64>,
    cumulative_inv: DMatrix<f64>,
    power_matrix: DMatrix<f64>,
    energy_matrix: DMatrix<f64>,
}

impl ChargingGrid {
    pub fn new(periods: usize, delta: f64, representation: Representation) -> Result<Self> {
        if periods < 1 {
            return Err(Error::Domain("horizon must have at least one period".into()));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Domain(format!("period length must be positive, got {delta}")));
        }
        let t = periods;
        let cumulative = DMatrix::from_fn(t, t, |i, j| if j <= i { delta } else { 0.0 });
        let cumulative_inv = DMatrix::from_fn(t, t, |i, j| {
            if i == j {
                1.0 / delta
            } else if i == j + 1 {
                -1.0 / delta
            } else {
                0.0
            }
        });
        let eye = DMatrix::<f64>::identity(t, t);
        let power_matrix = stack(&[&cumulative, &-&cumulative, &eye, &-&eye]);
        let energy_matrix = stack(&[&eye, &-&eye, &cumulative_inv, &-&cumulative_inv]);
        Ok(Self { periods, delta, representation, cumulative, cumulative_inv, power_matrix, energy_matrix })
    }

    pub fn periods(&self) -> usize {
        self.periods
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn representation(&self) -> Representation {
        self.representation
    }

    pub fn with_representation(&self, representation: Representation) -> Self {
        Self { representation, ..self.clone() }
    }

    /// Number of stacked constraint rows (`4T`).
    pub fn num_constraints(&self) -> usize {
        4 * self.periods
    }

    /// `L`, with `L[i][j] = delta` for `j <= i`.
    pub fn cumulative(&self) -> &DMatrix<f64> {
        &self.cumulative
    }

    /// Closed-form `L^-1`: `1/delta` on the diagonal, `-1/delta` below it.
    pub fn cumulative_inverse(&self) -> &DMatrix<f64> {
        &self.cumulative_inv
    }

    /// `H = (L, -L, I, -I)`.
    pub fn power_matrix(&self) -> &DMatrix<f64> {
        &self.power_matrix
    }

    /// `H L^-1 = (I, -I, L^-1, -L^-1)`.
    pub fn energy_matrix(&self) -> &DMatrix<f64> {
        &self.energy_matrix
    }

    /// Constraint matrix of the active representation.
    pub fn constraint_matrix(&self) -> &DMatrix<f64> {
        match self.representation {
            Representation::Power => &self.power_matrix,
            Representation::Energy => &self.energy_matrix,
        }
    }

    /// Power profile to active coordinates.
    pub fn to_internal(&self, u: &DVector<f64>) -> DVector<f64> {
        match self.representation {
            Representation::Power => u.clone(),
            Representation::Energy => &self.cumulative * u,
        }
    }

    /// Active coordinates to power profile.
    pub fn to_power(&self, y: &DVector<f64>) -> DVector<f64> {
        match self.representation {
            Representation::Power => y.clone(),
            Representation::Energy => &self.cumulative_inv * y,
        }
    }

    /// Linear map on active coordinates to the equivalent map on power
    /// profiles (`L^-1 G L` in energy space).
    pub fn map_to_power(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        match self.representation {
            Representation::Power => g.clone(),
            Representation::Energy => &self.cumulative_inv * g * &self.cumulative,
        }
    }
}

/// Alias matching the operation name used throughout the docs.
pub fn build_charging_grid(periods: usize, delta: f64, representation: Representation) -> Result<ChargingGrid> {
    ChargingGrid::new(periods, delta, representation)
}

fn stack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks[0].ncols();
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(*b);
        r += b.nrows();
    }
    out
}

/// Count of nonzero entries.
pub fn nnz(m: &DMatrix<f64>) -> usize {
    m.iter().filter(|v| **v != 0.0).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cumulative_matrix_half_hour() {
        let g = ChargingGrid::new(3, 0.5, Representation::Power).unwrap();
        let want = DMatrix::from_row_slice(3, 3, &[0.5, 0.0, 0.0, 0.5, 0.5, 0.0, 0.5, 0.5, 0.5]);
        assert_eq!(g.cumulative(), &want);
    }

    #[test]
    fn single_period_stack() {
        let g = ChargingGrid::new(1, 1.0, Representation::Power).unwrap();
        assert_eq!(g.power_matrix().as_slice(), &[1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn energy_matrix_matches_numeric_inverse() {
        let g = ChargingGrid::new(2, 2.0, Representation::Energy).unwrap();
        let linv = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, -0.5, 0.5]);
        assert_eq!(g.cumulative_inverse(), &linv);
        let numeric = g.power_matrix() * g.cumulative().clone().try_inverse().unwrap();
        assert!((g.constraint_matrix() - numeric).amax() < 1e-12);
        let eye = DMatrix::<f64>::identity(2, 2);
        let m = g.constraint_matrix();
        assert_eq!(m.rows(0, 2), eye);
        assert_eq!(m.rows(2, 2), -eye);
        assert_eq!(m.rows(4, 2), linv);
    }

    #[test]
    fn energy_matrix_times_cumulative_recovers_h() {
        for t in 1..=12 {
            for delta in [0.25, 2.0 / 3.0, 1.0, 3.0] {
                let g = ChargingGrid::new(t, delta, Representation::Energy).unwrap();
                let back = g.energy_matrix() * g.cumulative();
                assert!((back - g.power_matrix()).amax() < 1e-12, "T={t} delta={delta}");
            }
        }
    }

    #[test]
    fn energy_matrix_is_sparser() {
        // Equal at T = 2 (10 nonzeros each), strictly sparser from T = 3 on.
        let g2 = ChargingGrid::new(2, 1.0, Representation::Energy).unwrap();
        assert_eq!(nnz(g2.energy_matrix()), nnz(g2.power_matrix()));
        for t in 3..20 {
            let g = ChargingGrid::new(t, 1.0, Representation::Energy).unwrap();
            assert_eq!(nnz(g.energy_matrix()), 6 * t - 2);
            assert!(nnz(g.energy_matrix()) < nnz(g.power_matrix()));
        }
    }

    #[test]
    fn invalid_grids() {
        assert!(matches!(ChargingGrid::new(0, 1.0, Representation::Power), Err(Error::Domain(_))));
        assert!(matches!(ChargingGrid::new(3, 0.0, Representation::Power), Err(Error::Domain(_))));
        assert!(matches!(ChargingGrid::new(3, -1.0, Representation::Power), Err(Error::Domain(_))));
    }

    #[test]
    fn coordinate_round_trip() {
        let g = ChargingGrid::new(4, 2.0 / 3.0, Representation::Energy).unwrap();
        let u = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let back = g.to_power(&g.to_internal(&u));
        assert!((back - u).amax() < 1e-12);
    }
}
