//! Closed-loop human-following simulation: pose observations at the
//! inference rate, per-component Kalman filtering in the odometry frame,
//! clamped velocity control and a first-order drone dynamics proxy, all on
//! one deterministic timeline.

pub mod controller;
pub mod frames;
pub mod kalman;
pub mod metrics;
pub mod scenario;
mod sim;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use controller::{step_dynamics, target_pose, velocity_command, Command, DroneState};
pub use frames::{from_odometry, to_odometry};
pub use kalman::{kf_step, Kalman1, KalmanState, SubjectState};
pub use scenario::{Motion, Phase, ScenarioScript};
pub use sim::{run_experiment, trajectory_csv, LogRow, Metrics, RunLog};

use crate::graph::Variant;

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("invalid control configuration: {0}")]
    Config(String),
    #[error("unknown observation source '{0}' (expected 160x32, 160x16, 80x32 or mocap)")]
    Source(String),
    #[error("Kalman covariance lost positive definiteness at t = {0} s")]
    Covariance(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    /// Target distance in front of the subject (m).
    pub delta: f64,
    /// Controller horizon (s).
    pub tau: f64,
    pub v_max: f64,
    pub omega_max: f64,
    /// Velocity and yaw-rate tracking time constants of the low-level loop (s).
    pub t_v: f64,
    pub t_omega: f64,
    /// Horizontal acceleration limit (m/s^2).
    pub accel_max: f64,
    /// Kalman process noise as an acceleration standard deviation.
    pub sigma_accel: f64,
    /// Per-component observation variance; `None` derives it from the noise model.
    pub obs_variance: Option<[f64; 4]>,
    pub dynamics_hz: f64,
    pub log_hz: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            delta: 1.3,
            tau: 0.5,
            v_max: 1.0,
            omega_max: 0.8,
            t_v: 0.3,
            t_omega: 0.1,
            // the attitude loop caps tilt at 12 degrees; sin keeps thrust-limited
            // horizontal acceleration at or under 2.04 m/s^2
            accel_max: GRAVITY * 12f64.to_radians().sin(),
            sigma_accel: 1.0,
            obs_variance: None,
            dynamics_hz: 500.0,
            log_hz: 100.0,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        let positive = [
            ("delta", self.delta),
            ("tau", self.tau),
            ("v_max", self.v_max),
            ("omega_max", self.omega_max),
            ("t_v", self.t_v),
            ("t_omega", self.t_omega),
            ("accel_max", self.accel_max),
            ("sigma_accel", self.sigma_accel),
            ("dynamics_hz", self.dynamics_hz),
            ("log_hz", self.log_hz),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(ControlError::Config(format!("{name} = {v} must be positive")));
        }
        if self.dynamics_hz < 100.0 {
            return Err(ControlError::Config("dynamics step must be at most 10 ms".into()));
        }
        if self.obs_variance.is_some_and(|r| r.iter().any(|v| !(v.is_finite() && *v >= 0.0))) {
            return Err(ControlError::Config("observation variances must be non-negative".into()));
        }
        Ok(())
    }
}

/// Where observations come from: a network's error profile or motion capture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    Net(Variant),
    Mocap,
}

impl Source {
    pub const ALL: [Source; 4] = [Source::Net(Variant::W160C32), Source::Net(Variant::W160C16), Source::Net(Variant::W80C32), Source::Mocap];

    /// Observation rate in Hz.
    pub fn rate(self) -> f64 {
        match self {
            Source::Net(Variant::W160C32) => 48.0,
            Source::Net(Variant::W160C16) => 111.0,
            Source::Net(Variant::W80C32) => 135.0,
            Source::Mocap => 30.0,
        }
    }

    /// Per-component observation standard deviation `(x, y, z, theta)`,
    /// the square root of each network's test-set mean squared error.
    pub fn noise_std(self) -> [f64; 4] {
        let mse: [f64; 4] = match self {
            Source::Net(Variant::W160C32) => [0.066, 0.078, 0.020, 0.386],
            Source::Net(Variant::W160C16) => [0.074, 0.083, 0.025, 0.412],
            Source::Net(Variant::W80C32) => [0.088, 0.084, 0.029, 0.504],
            Source::Mocap => [0.0; 4],
        };
        mse.map(f64::sqrt)
    }

    pub fn noise(self, seed: u64) -> NoiseModel {
        NoiseModel { std: self.noise_std(), seed }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Net(v) => write!(f, "{v}"),
            Source::Mocap => f.write_str("mocap"),
        }
    }
}

impl FromStr for Source {
    type Err = ControlError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mocap" => Ok(Source::Mocap),
            _ => serde_json::from_value::<Variant>(serde_json::Value::String(s.into()))
                .map(Source::Net)
                .map_err(|_| ControlError::Source(s.into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// `(x, y, z, theta)` standard deviations in m and rad.
    pub std: [f64; 4],
    pub seed: u64,
}

impl NoiseModel {
    pub fn none(seed: u64) -> Self {
        Self { std: [0.0; 4], seed }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn source_parsing_and_profiles() {
        for s in Source::ALL {
            assert_eq!(s.to_string().parse::<Source>().unwrap(), s);
        }
        assert!("90x8".parse::<Source>().is_err());
        let n = Source::Net(Variant::W160C32).noise_std();
        assert!((n[0] - 0.257).abs() < 1e-3 && (n[1] - 0.279).abs() < 1e-3 && (n[2] - 0.141).abs() < 1e-3 && (n[3] - 0.621).abs() < 1e-3);
        assert_eq!(Source::Mocap.noise_std(), [0.0; 4]);
    }

    #[test]
    fn default_acceleration_limit() {
        let a = ControlConfig::default().accel_max;
        assert!(a <= 2.04 && a > 2.03, "{a}");
        assert!(ControlConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(ControlConfig { dynamics_hz: 50.0, ..Default::default() }.validate().is_err());
    }
}
