//! Deterministic synthetic LiDAR world: moving primitives over a ground
//! plane, an ego vehicle driven by planar actions, and an exact ray caster.

mod cloud;
mod pose;
mod scene;
mod sensor;

pub use cloud::{
    ground_filter, load_cloud, read_cloud, save_cloud, transform_to_frame, write_cloud, PointCloud,
    CLOUD_HEADER_LEN, CLOUD_MAGIC, CLOUD_VERSION,
};
pub use pose::{EgoAction, Pose2};
pub use scene::{Hit, Primitive, RandomSceneParams, SceneSpec, Shape};
pub use sensor::{generate_sequence, intensity_of, scan, scan_cloud, BeamPattern, BeamReturn, Sequence};

/// Default frame interval in seconds.
pub const FRAME_INTERVAL: f64 = 0.5;

/// Default ground threshold in the sensor frame: 0.3 m above the ground plane.
pub fn default_ground_threshold(sensor_height: f64) -> f64 {
    -sensor_height + 0.3
}
