//! Conversions between the drone body frame and the world-fixed odometry frame.

use crate::pose::{wrap_angle, Pose};

/// Maps a pose expressed in the drone frame (x forward, y left, z up) to
/// the odometry frame, given the drone's own odometry pose.
pub fn to_odometry(pred_in_drone: &Pose, drone: &Pose) -> Pose {
    let (s, c) = drone.theta.sin_cos();
    Pose::new(
        drone.x + c * pred_in_drone.x - s * pred_in_drone.y,
        drone.y + s * pred_in_drone.x + c * pred_in_drone.y,
        drone.z + pred_in_drone.z,
        wrap_angle(pred_in_drone.theta + drone.theta),
    )
}

/// Inverse of [`to_odometry`]: expresses a world pose in the drone frame.
pub fn from_odometry(world: &Pose, drone: &Pose) -> Pose {
    let (s, c) = drone.theta.sin_cos();
    let (dx, dy) = (world.x - drone.x, world.y - drone.y);
    Pose::new(c * dx + s * dy, -s * dx + c * dy, world.z - drone.z, wrap_angle(world.theta - drone.theta))
}
