//! Decoupled constant-velocity Kalman filters, one per pose component.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::pose::{angle_diff, wrap_angle, Pose};

/// Filter for one scalar component with state `(position, velocity)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kalman1 {
    pub x: Vector2<f64>,
    pub p: Matrix2<f64>,
    /// Acceleration variance driving the process noise.
    pub q: f64,
    /// Observation variance.
    pub r: f64,
    /// Innovations and the state are wrapped to `[-pi, pi]`.
    pub angular: bool,
}

impl Kalman1 {
    pub fn new(first_obs: f64, q: f64, r: f64, angular: bool) -> Self {
        // unknown velocity: start with a wide prior on it
        Self { x: Vector2::new(first_obs, 0.0), p: Matrix2::new(r.max(1e-6), 0.0, 0.0, 1.0), q, r, angular }
    }

    pub fn predict(&mut self, dt: f64) {
        if dt <= 0.0 {
            return;
        }
        let f = Matrix2::new(1.0, dt, 0.0, 1.0);
        let (dt2, dt3, dt4) = (dt * dt, dt * dt * dt, dt * dt * dt * dt);
        let q = self.q * Matrix2::new(dt4 / 4.0, dt3 / 2.0, dt3 / 2.0, dt2);
        self.x = f * self.x;
        self.p = f * self.p * f.transpose() + q;
        self.symmetrize();
        if self.angular {
            self.x[0] = wrap_angle(self.x[0]);
        }
    }

    pub fn update(&mut self, obs: f64) {
        let innov = if self.angular { angle_diff(obs, self.x[0]) } else { obs - self.x[0] };
        let s = self.p[(0, 0)] + self.r;
        if s <= 0.0 || !s.is_finite() {
            return;
        }
        let k = Vector2::new(self.p[(0, 0)] / s, self.p[(1, 0)] / s);
        self.x += k * innov;
        // Joseph form keeps P positive semi-definite under rounding
        let i_kh = Matrix2::new(1.0 - k[0], 0.0, -k[1], 1.0);
        let kr = k * k.transpose() * self.r;
        self.p = i_kh * self.p * i_kh.transpose() + kr;
        self.symmetrize();
        if self.angular {
            self.x[0] = wrap_angle(self.x[0]);
        }
    }

    fn symmetrize(&mut self) {
        let off = 0.5 * (self.p[(0, 1)] + self.p[(1, 0)]);
        self.p[(0, 1)] = off;
        self.p[(1, 0)] = off;
    }

    pub fn is_positive_definite(&self) -> bool {
        self.p[(0, 1)] == self.p[(1, 0)] && self.p.cholesky().is_some()
    }
}

/// Subject position, heading and their rates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SubjectState {
    pub pose: Pose,
    /// `(vx, vy, vz, omega)` in m/s and rad/s.
    pub vel: [f64; 4],
}

/// Four independent filters over `(x, y, z, theta)` in the odometry frame.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub filters: [Kalman1; 4],
}

impl KalmanState {
    /// `q`: acceleration variance; `r`: per-component observation variance.
    pub fn new(first: &Pose, q: f64, r: [f64; 4]) -> Self {
        let c = first.components();
        Self { filters: std::array::from_fn(|i| Kalman1::new(c[i], q, r[i], i == 3)) }
    }

    pub fn predict(&mut self, dt: f64) {
        self.filters.iter_mut().for_each(|f| f.predict(dt));
    }

    pub fn update(&mut self, obs: &Pose) {
        for (f, o) in self.filters.iter_mut().zip(obs.components()) {
            f.update(o);
        }
    }

    pub fn state(&self) -> SubjectState {
        SubjectState {
            pose: Pose::from_components(std::array::from_fn(|i| self.filters[i].x[0])),
            vel: std::array::from_fn(|i| self.filters[i].x[1]),
        }
    }

    pub fn is_positive_definite(&self) -> bool {
        self.filters.iter().all(Kalman1::is_positive_definite)
    }
}

/// One filter step: predict by `dt`, then update when an observation is present.
pub fn kf_step(ks: &KalmanState, obs: Option<&Pose>, dt: f64) -> KalmanState {
    let mut next = ks.clone();
    next.predict(dt);
    if let Some(o) = obs {
        next.update(o);
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn noiseless_track_converges() {
        let mut f = Kalman1::new(0.0, 1e-9, 1e-9, false);
        let (v, dt) = (0.7, 0.01);
        for k in 1..=500 {
            f.predict(dt);
            f.update(v * k as f64 * dt);
        }
        assert!((f.x[0] - 3.5).abs() < 1e-6 && (f.x[1] - v).abs() < 1e-4, "{:?}", f.x);
    }

    #[test]
    fn prediction_only_grows_covariance() {
        let mut ks = KalmanState::new(&Pose::new(1.0, 2.0, 1.7, 0.3), 1.0, [0.07, 0.08, 0.02, 0.39]);
        let mut prev = ks.filters[0].p[(0, 0)];
        for _ in 0..200 {
            ks = kf_step(&ks, None, 0.01);
            let now = ks.filters[0].p[(0, 0)];
            assert!(now > prev);
            prev = now;
        }
    }

    #[test]
    fn heading_innovation_wraps() {
        let mut f = Kalman1::new(3.1, 0.0, 0.1, true);
        f.update(-3.1);
        // the short way round crosses pi, not zero
        assert!(f.x[0].abs() > 3.0, "{}", f.x[0]);
    }

    #[test]
    fn filter_beats_raw_observations() {
        let (dt, std) = (1.0 / 48.0, 0.257);
        let noise = Normal::new(0.0, std).unwrap();
        let (mut raw, mut filt) = (0.0, 0.0);
        let mut n = 0usize;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = 0.4 + 0.01 * seed as f64;
            let o0 = noise.sample(&mut rng);
            let mut f = Kalman1::new(o0, 1.0, std * std, false);
            for k in 1..240 {
                let truth = v * k as f64 * dt;
                let o = truth + noise.sample(&mut rng);
                f.predict(dt);
                f.update(o);
                if k >= 48 {
                    raw += (o - truth).powi(2);
                    filt += (f.x[0] - truth).powi(2);
                    n += 1;
                }
            }
        }
        let (raw, filt) = (raw / n as f64, filt / n as f64);
        assert!(filt < 0.5 * raw, "filtered MSE {filt}, raw {raw}");
    }
}
