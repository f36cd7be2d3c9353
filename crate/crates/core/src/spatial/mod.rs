//! Array geometry, plane-wave steering templates and complex Gaussian densities.

mod gaussian;
mod geometry;
pub mod linalg;
mod templates;

pub use gaussian::{log_cgauss, omega_features, omega_from_quads};
pub use geometry::{
    circular_distance, direction_vector, steering_vector, ArrayGeometry, DirectionGrid,
    DEFAULT_SPEED_OF_SOUND,
};
pub use templates::{bin_frequency, build_templates, Hyperparams, SteeringTemplate};
