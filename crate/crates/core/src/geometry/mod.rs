//! Rigid-body math, Procrustes solving, distances and neighbor queries.

mod chamfer;
mod cloud;
mod kabsch;
mod overlap;
mod sampling;
mod transform;

pub use chamfer::chamfer_distance;
pub use cloud::{object_scale, MultiPartCloud, Part};
pub use kabsch::kabsch_solve;
pub use overlap::{overlap_labels, overlap_labels_brute};
pub use sampling::{sample_part_points, IndexSampler, SequentialSampler};
pub use transform::{
    axis_angle, center_of_mass, check_rotation, gaussian, random_direction, random_rotation,
    rotation_geodesic_deg, RigidTransform, ROTATION_TOL,
};
