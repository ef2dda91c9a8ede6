mod grid;
mod hpoly;
pub mod oracle;
pub mod sample;

pub use grid::nnz;
pub use grid::{build_charging_grid, ChargingGrid, Representation};
pub use hpoly::{aggregate_outer_bound, HPolytope, VPolytope};
pub use oracle::{
    enumerate_vertices, hausdorff_oracle, hausdorff_vertices, minkowski_sum_oracle, minkowski_sum_vertices,
    point_to_hull_distance,
};
