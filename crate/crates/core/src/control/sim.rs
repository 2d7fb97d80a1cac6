use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::controller::{step_dynamics, target_pose, velocity_command, Command, DroneState};
use super::frames::{from_odometry, to_odometry};
use super::kalman::KalmanState;
use super::metrics::{median, percentile, r2, r2_angular};
use super::scenario::ScenarioScript;
use super::{ControlConfig, ControlError, NoiseModel};
use crate::pose::{angle_diff, wrap_angle, Pose};

/// One state readout (at the logging rate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: f64,
    pub phase: usize,
    pub subject: Pose,
    pub drone: Pose,
    /// Filtered subject pose in the odometry frame, once the first observation arrived.
    pub estimate: Option<Pose>,
    pub cmd: Command,
    pub vel: [f64; 3],
    pub omega: f64,
    pub accel: f64,
    pub e_xy: f64,
    pub e_theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
    /// `(prediction, ground truth)` subject poses in the drone frame, one per observation.
    pub observations: Vec<(Pose, Pose)>,
    pub phase_end_times: Vec<f64>,
    /// Largest magnitudes seen at any dynamics tick.
    pub max_cmd_axis: f64,
    pub max_cmd_omega: f64,
    pub max_vel_axis: f64,
    pub max_omega: f64,
    pub max_accel: f64,
    pub clamps_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub median_e_xy: f64,
    pub p90_e_xy: f64,
    /// Heading errors in degrees.
    pub median_e_theta: f64,
    pub p90_e_theta: f64,
    /// Drone-to-subject horizontal distance at the end of each phase.
    pub phase_end_distance: Vec<f64>,
    pub phases_completed: usize,
    /// Observation vs ground truth for `(x, y, z, theta)`.
    pub r2: [f64; 4],
}

impl Metrics {
    pub fn from_log(log: &RunLog) -> Self {
        let exy: Vec<f64> = log.rows.iter().map(|r| r.e_xy).collect();
        let eth: Vec<f64> = log.rows.iter().map(|r| r.e_theta.to_degrees()).collect();
        let last_t = log.rows.last().map_or(0.0, |r| r.t);
        let phase_end_distance = log
            .phase_end_times
            .iter()
            .filter_map(|&te| {
                // last readout at or before the phase end
                log.rows.iter().rev().find(|r| r.t <= te + 1e-9).map(|r| r.drone.horizontal_distance(&r.subject))
            })
            .collect();
        let pick = |i: usize| -> (Vec<f64>, Vec<f64>) {
            log.observations.iter().map(|(p, t)| (p.components()[i], t.components()[i])).unzip()
        };
        let r2s = std::array::from_fn(|i| {
            let (p, t) = pick(i);
            if i == 3 {
                r2_angular(&p, &t)
            } else {
                r2(&p, &t)
            }
        });
        Self {
            median_e_xy: median(&exy),
            p90_e_xy: percentile(&exy, 90.0),
            median_e_theta: median(&eth),
            p90_e_theta: percentile(&eth, 90.0),
            phase_end_distance,
            phases_completed: log.phase_end_times.iter().filter(|&&te| te <= last_t + 1e-9).count(),
            r2: r2s,
        }
    }
}

/// Runs the scripted experiment with observations at `rate` Hz, each
/// arriving one period after its image was captured.
pub fn run_experiment(script: &ScenarioScript, noise: &NoiseModel, rate: f64, cfg: &ControlConfig) -> Result<(RunLog, Metrics), ControlError> {
    cfg.validate()?;
    if !(rate.is_finite() && rate > 0.0) {
        return Err(ControlError::Config(format!("observation rate {rate} Hz must be positive")));
    }
    if noise.std.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(ControlError::Config("noise std must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let r = cfg.obs_variance.unwrap_or(noise.std.map(|s| s * s)).map(|v| v.max(1e-6));
    let q = cfg.sigma_accel * cfg.sigma_accel;
    let dt = 1.0 / cfg.dynamics_hz;
    let ticks = (script.duration() * cfg.dynamics_hz).round() as u64;
    let log_every = (cfg.dynamics_hz / cfg.log_hz).round().max(1.0) as u64;

    let mut drone = DroneState { pose: script.drone_start(), ..Default::default() };
    let mut kf: Option<(KalmanState, f64)> = None;
    let mut pending: Option<(Pose, Pose)> = None;
    let mut cmd = Command::default();
    let mut next_obs = 0u64;
    let mut log = RunLog {
        rows: Vec::with_capacity((ticks / log_every + 1) as usize),
        observations: Vec::new(),
        phase_end_times: script.phase_end_times(),
        max_cmd_axis: 0.0,
        max_cmd_omega: 0.0,
        max_vel_axis: 0.0,
        max_omega: 0.0,
        max_accel: 0.0,
        clamps_ok: true,
    };

    for k in 0..=ticks {
        let t = k as f64 * dt;
        let subject = script.subject_at(t);
        if t + 1e-9 >= next_obs as f64 / rate {
            next_obs += 1;
            // the previous frame's prediction lands now
            if let Some((pred, drone_then)) = pending.take() {
                let obs = to_odometry(&pred, &drone_then);
                let state = match kf.take() {
                    None => KalmanState::new(&obs, q, r),
                    Some((mut s, t_last)) => {
                        s.predict(t - t_last);
                        s.update(&obs);
                        s
                    }
                };
                if !state.is_positive_definite() {
                    return Err(ControlError::Covariance(t));
                }
                cmd = velocity_command(&drone.pose, &state.state(), cfg);
                kf = Some((state, t));
            }
            let truth = from_odometry(&subject.pose, &drone.pose);
            let z: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            let c = truth.components();
            let pred = Pose::new(c[0] + noise.std[0] * z[0], c[1] + noise.std[1] * z[1], c[2] + noise.std[2] * z[2], wrap_angle(c[3] + noise.std[3] * z[3]));
            log.observations.push((pred, truth));
            pending = Some((pred, drone.pose));
        }

        if k % log_every == 0 {
            let target = target_pose(&subject.pose, cfg.delta);
            let estimate = kf.as_ref().map(|(s, t_last)| {
                let mut s = s.clone();
                s.predict(t - t_last);
                s.state().pose
            });
            log.rows.push(LogRow {
                t,
                phase: script.phase_at(t),
                subject: subject.pose,
                drone: drone.pose,
                estimate,
                cmd,
                vel: drone.vel,
                omega: drone.omega,
                accel: drone.accel[0].hypot(drone.accel[1]),
                e_xy: drone.pose.horizontal_distance(&target),
                e_theta: angle_diff(drone.pose.theta, target.theta).abs(),
            });
        }

        if k < ticks {
            drone = step_dynamics(&drone, &cmd, dt, cfg);
        }
        let cmd_axis = cmd.v.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let vel_axis = drone.vel.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let accel = drone.accel[0].hypot(drone.accel[1]);
        log.max_cmd_axis = log.max_cmd_axis.max(cmd_axis);
        log.max_cmd_omega = log.max_cmd_omega.max(cmd.omega.abs());
        log.max_vel_axis = log.max_vel_axis.max(vel_axis);
        log.max_omega = log.max_omega.max(drone.omega.abs());
        log.max_accel = log.max_accel.max(accel);
        let tol = 1e-12;
        if cmd_axis > cfg.v_max + tol
            || vel_axis > cfg.v_max + tol
            || cmd.omega.abs() > cfg.omega_max + tol
            || drone.omega.abs() > cfg.omega_max + tol
            || accel > cfg.accel_max + tol
        {
            log.clamps_ok = false;
        }
    }
    let metrics = Metrics::from_log(&log);
    Ok((log, metrics))
}

/// Trajectory log as CSV, one row per readout. Estimate columns are empty
/// until the first observation arrives.
pub fn trajectory_csv(log: &RunLog) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "t", "phase", "subject_x", "subject_y", "subject_z", "subject_theta", "drone_x", "drone_y", "drone_z", "drone_theta", "est_x",
        "est_y", "est_z", "est_theta", "cmd_vx", "cmd_vy", "cmd_omega", "vx", "vy", "omega", "accel", "e_xy", "e_theta",
    ])
    .expect("in-memory write");
    let f = |v: f64| format!("{v:.6}");
    for r in &log.rows {
        let mut rec = vec![format!("{:.3}", r.t), r.phase.to_string()];
        rec.extend(r.subject.components().map(f));
        rec.extend(r.drone.components().map(f));
        match r.estimate {
            Some(e) => rec.extend(e.components().map(f)),
            None => rec.extend(std::iter::repeat_n(String::new(), 4)),
        }
        rec.extend([r.cmd.v[0], r.cmd.v[1], r.cmd.omega, r.vel[0], r.vel[1], r.omega, r.accel, r.e_xy, r.e_theta].map(f));
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}
