//! High-level velocity controller and the low-level dynamics proxy.

use serde::{Deserialize, Serialize};

use super::kalman::SubjectState;
use super::ControlConfig;
use crate::pose::{angle_diff, wrap_angle, Pose};

/// World-frame velocity set-point.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Command {
    pub v: [f64; 3],
    pub omega: f64,
}

/// Drone pose in the target configuration for a subject pose: `delta`
/// metres along the subject's facing direction, looking back at them.
pub fn target_pose(subject: &Pose, delta: f64) -> Pose {
    let (s, c) = subject.theta.sin_cos();
    Pose::new(subject.x + delta * c, subject.y + delta * s, subject.z, wrap_angle(subject.theta + std::f64::consts::PI))
}

/// Velocity command that reaches the target position in `tau` seconds while
/// turning toward the subject. Heading is held when the bearing is undefined.
pub fn velocity_command(drone: &Pose, subject: &SubjectState, cfg: &ControlConfig) -> Command {
    let target = target_pose(&subject.pose, cfg.delta);
    let clamp = |v: f64, m: f64| v.clamp(-m, m);
    let vx = clamp((target.x - drone.x) / cfg.tau + subject.vel[0], cfg.v_max);
    let vy = clamp((target.y - drone.y) / cfg.tau + subject.vel[1], cfg.v_max);
    let (bx, by) = (subject.pose.x - drone.x, subject.pose.y - drone.y);
    let omega = if bx.hypot(by) < 1e-9 {
        0.0
    } else {
        clamp(angle_diff(by.atan2(bx), drone.theta) / cfg.tau, cfg.omega_max)
    };
    Command { v: [vx, vy, 0.0], omega }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DroneState {
    pub pose: Pose,
    pub vel: [f64; 3],
    pub omega: f64,
    /// Horizontal acceleration applied during the last step.
    pub accel: [f64; 2],
}

/// First-order velocity and yaw-rate tracking, with the horizontal
/// acceleration limited to `cfg.accel_max` (the tilt limit of the attitude loop).
pub fn step_dynamics(s: &DroneState, cmd: &Command, dt: f64, cfg: &ControlConfig) -> DroneState {
    // 1 / t_v, capped so one step never overshoots the set-point
    let gain = (dt / cfg.t_v).min(1.0) / dt;
    let mut a = [(cmd.v[0] - s.vel[0]) * gain, (cmd.v[1] - s.vel[1]) * gain];
    let norm = a[0].hypot(a[1]);
    if norm > cfg.accel_max {
        a = [a[0] * cfg.accel_max / norm, a[1] * cfg.accel_max / norm];
    }
    let vel = [s.vel[0] + a[0] * dt, s.vel[1] + a[1] * dt, s.vel[2] + (cmd.v[2] - s.vel[2]) * (dt / cfg.t_v).min(1.0)];
    let omega = s.omega + (cmd.omega - s.omega) * (dt / cfg.t_omega).min(1.0);
    let p = &s.pose;
    DroneState {
        pose: Pose::new(p.x + vel[0] * dt, p.y + vel[1] * dt, p.z + vel[2] * dt, wrap_angle(p.theta + omega * dt)),
        vel,
        omega,
        accel: a,
    }
}
