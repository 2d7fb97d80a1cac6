//! Scripted subject motion.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use super::kalman::SubjectState;
use crate::pose::{wrap_angle, Pose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    Stand,
    /// Displacement in the subject's frame at phase start (forward, left); heading fixed.
    Walk { forward: f64, left: f64 },
    /// Circular arc turning left for positive `angle`, facing along the path.
    Arc { radius: f64, angle: f64 },
    /// In-place rotation, positive to the left.
    Rotate { angle: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub motion: Motion,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub phases: Vec<Phase>,
    pub subject_start: Pose,
    /// Horizontal distance from subject to drone at start, along the subject's facing.
    pub separation: f64,
    /// Drone heading offset from looking straight at the subject (rad, subject appears to the left for positive values).
    pub heading_offset: f64,
    pub drone_height: f64,
}

impl Default for ScenarioScript {
    fn default() -> Self {
        let phase = |name: &str, motion, duration| Phase { name: name.into(), motion, duration };
        Self {
            phases: vec![
                phase("stand", Motion::Stand, 5.0),
                phase("forward", Motion::Walk { forward: 2.4, left: 0.0 }, 6.0),
                phase("backward", Motion::Walk { forward: -2.4, left: 0.0 }, 6.0),
                phase("left", Motion::Walk { forward: 0.0, left: 2.4 }, 7.0),
                phase("right", Motion::Walk { forward: 0.0, left: -2.4 }, 7.0),
                phase("quarter_circle", Motion::Arc { radius: 2.4, angle: FRAC_PI_2 }, 6.0),
                phase("rotate", Motion::Rotate { angle: PI }, 8.0),
                phase("stand", Motion::Stand, 5.0),
            ],
            subject_start: Pose::new(0.0, 0.0, 1.7, FRAC_PI_2),
            separation: 3.6,
            heading_offset: 30f64.to_radians(),
            drone_height: 1.5,
        }
    }
}

// smooth 0 -> 1 profile with zero speed at both ends, and its time derivative
fn profile(t: f64, duration: f64) -> (f64, f64) {
    let u = (t / duration).clamp(0.0, 1.0);
    ((1.0 - (PI * u).cos()) / 2.0, PI / (2.0 * duration) * (PI * u).sin())
}

impl ScenarioScript {
    pub fn duration(&self) -> f64 {
        self.phases.iter().map(|p| p.duration).sum()
    }

    /// Index of the phase active at `t` (the last one after the end).
    pub fn phase_at(&self, t: f64) -> usize {
        let mut end = 0.0;
        for (i, p) in self.phases.iter().enumerate() {
            end += p.duration;
            if t < end {
                return i;
            }
        }
        self.phases.len().saturating_sub(1)
    }

    pub fn phase_end_times(&self) -> Vec<f64> {
        self.phases
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p.duration;
                Some(*acc)
            })
            .collect()
    }

    pub fn drone_start(&self) -> Pose {
        let h = &self.subject_start;
        let (s, c) = h.theta.sin_cos();
        // looking at the subject is the subject's heading + pi; turning right puts them on the left
        Pose::new(h.x + self.separation * c, h.y + self.separation * s, self.drone_height, wrap_angle(h.theta + PI - self.heading_offset))
    }

    /// Ground-truth subject pose and velocity at time `t`.
    pub fn subject_at(&self, t: f64) -> SubjectState {
        let mut pose = self.subject_start;
        let mut start = 0.0;
        for p in &self.phases {
            let local = t - start;
            let (s, c) = pose.theta.sin_cos();
            let (frac, rate) = if local < p.duration { profile(local, p.duration) } else { (1.0, 0.0) };
            let (next, vel) = match p.motion {
                Motion::Stand => (pose, [0.0; 4]),
                Motion::Walk { forward, left } => {
                    let (dx, dy) = (forward * c - left * s, forward * s + left * c);
                    (Pose { x: pose.x + dx * frac, y: pose.y + dy * frac, ..pose }, [dx * rate, dy * rate, 0.0, 0.0])
                }
                Motion::Arc { radius, angle } => {
                    let sign = angle.signum();
                    // centre sits to the side the subject turns toward
                    let (cx, cy) = (pose.x - sign * radius * s, pose.y + sign * radius * c);
                    let phi = pose.theta + angle * frac;
                    let at = Pose::new(cx + sign * radius * phi.sin(), cy - sign * radius * phi.cos(), pose.z, wrap_angle(phi));
                    let w = angle * rate;
                    (at, [radius * w.abs() * phi.cos(), radius * w.abs() * phi.sin(), 0.0, w])
                }
                Motion::Rotate { angle } => (Pose { theta: wrap_angle(pose.theta + angle * frac), ..pose }, [0.0, 0.0, 0.0, angle * rate]),
            };
            if local < p.duration {
                return SubjectState { pose: next, vel };
            }
            pose = next;
            start += p.duration;
        }
        SubjectState { pose, vel: [0.0; 4] }
    }
}
