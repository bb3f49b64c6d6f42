//! Camera geometry and the lift-splat view transformer.

mod camera;
mod lss;

pub use camera::{
    camera_rotation, det, is_rotation, mat_mul, mat_vec, transpose, BevGrid, CameraModel, FrustumSpec, Mat3, Vec3,
};
pub use lss::{frustum_points, lift, point_cells, splat, view_transform, LiftedPoints};
