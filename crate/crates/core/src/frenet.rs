//! Frenet-frame terminal-condition actions and the quintic lateral planner.

use serde::{Deserialize, Serialize};

/// Terminal speed and lateral centerline offset (positive to the left).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrenetAction {
    pub v_f: f64,
    pub d_f: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    pub v_max: f64,
    pub d_max: f64,
}

impl Default for ActionBounds {
    fn default() -> Self {
        Self {
            v_max: 8.0,
            d_max: 1.75 + 0.5,
        }
    }
}

impl ActionBounds {
    pub fn clamp(&self, a: FrenetAction) -> FrenetAction {
        FrenetAction {
            v_f: a.v_f.clamp(0.0, self.v_max),
            d_f: a.d_f.clamp(-self.d_max, self.d_max),
        }
    }

    /// Map unbounded pre-activations to the box with `tanh`.
    pub fn squash(&self, u: [f64; 2]) -> FrenetAction {
        FrenetAction {
            v_f: 0.5 * self.v_max * (u[0].tanh() + 1.0),
            d_f: self.d_max * u[1].tanh(),
        }
    }
}

/// Route-relative state the planner starts from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrenetState {
    pub station: f64,
    pub offset: f64,
    /// Lateral velocity d(offset)/dt.
    pub offset_rate: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Setpoint {
    pub t: f64,
    pub station: f64,
    pub offset: f64,
    pub speed: f64,
}

/// Coefficients `c0..c5` of `d(t)` with `d(0)=d0, d'(0)=v0, d''(0)=a0` and
/// `d(T)=d1, d'(T)=0, d''(T)=0`.
pub fn quintic_coefficients(d0: f64, v0: f64, a0: f64, d1: f64, horizon: f64) -> [f64; 6] {
    let t = horizon;
    let c0 = d0;
    let c1 = v0;
    let c2 = 0.5 * a0;
    let dp = d1 - (c0 + c1 * t + c2 * t * t);
    let dv = -(c1 + 2.0 * c2 * t);
    let da = -2.0 * c2;
    let c3 = (10.0 * dp - 4.0 * dv * t + 0.5 * da * t * t) / t.powi(3);
    let c4 = (-15.0 * dp + 7.0 * dv * t - da * t * t) / t.powi(4);
    let c5 = (6.0 * dp - 3.0 * dv * t + 0.5 * da * t * t) / t.powi(5);
    [c0, c1, c2, c3, c4, c5]
}

pub fn eval_poly(c: &[f64], t: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, k| acc * t + k)
}

/// Receding-horizon plan sampled every `dt` over `horizon` seconds: quintic
/// lateral profile and a linear speed ramp.
pub fn plan_frenet(state: &FrenetState, a: FrenetAction, horizon: f64, dt: f64) -> Vec<Setpoint> {
    assert!(horizon > 0.0 && dt > 0.0, "horizon and dt must be positive");
    let c = quintic_coefficients(state.offset, state.offset_rate, 0.0, a.d_f, horizon);
    let n = (horizon / dt).round().max(1.0) as usize;
    let dv = a.v_f - state.speed;
    (1..=n)
        .map(|k| {
            let t = (k as f64 * dt).min(horizon);
            Setpoint {
                t,
                station: state.station + state.speed * t + 0.5 * dv * t * t / horizon,
                offset: eval_poly(&c, t),
                speed: state.speed + dv * t / horizon,
            }
        })
        .collect()
}

/// Lateral offset of the plan at time `t` (clamped to the horizon).
pub fn planned_offset(state: &FrenetState, a: FrenetAction, horizon: f64, t: f64) -> f64 {
    let c = quintic_coefficients(state.offset, state.offset_rate, 0.0, a.d_f, horizon);
    eval_poly(&c, t.clamp(0.0, horizon))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn derivative(c: &[f64; 6]) -> Vec<f64> {
        (1..6).map(|i| i as f64 * c[i]).collect()
    }

    #[test]
    fn boundary_conditions_hold() {
        let c = quintic_coefficients(0.4, -0.3, 0.2, -1.2, 2.0);
        let d1 = derivative(&c);
        let d2: Vec<f64> = (1..5).map(|i| i as f64 * d1[i]).collect();
        assert!((eval_poly(&c, 0.0) - 0.4).abs() < 1e-12);
        assert!((eval_poly(&d1, 0.0) + 0.3).abs() < 1e-12);
        assert!((eval_poly(&d2, 0.0) - 0.2).abs() < 1e-12);
        assert!((eval_poly(&c, 2.0) + 1.2).abs() < 1e-9);
        assert!(eval_poly(&d1, 2.0).abs() < 1e-9);
        assert!(eval_poly(&d2, 2.0).abs() < 1e-9);
    }

    #[test]
    fn fixed_point_plan() {
        let s = FrenetState {
            station: 3.0,
            offset: 0.5,
            offset_rate: 0.0,
            speed: 4.0,
        };
        let plan = plan_frenet(&s, FrenetAction { v_f: 4.0, d_f: 0.5 }, 2.0, 0.1);
        assert_eq!(plan.len(), 20);
        for p in &plan {
            assert!((p.speed - 4.0).abs() < 1e-12);
            assert!((p.offset - 0.5).abs() < 1e-12);
            assert!((p.station - (3.0 + 4.0 * p.t)).abs() < 1e-12);
        }
    }

    #[test]
    fn endpoint_reaches_target() {
        let s = FrenetState {
            station: 0.0,
            offset: -1.0,
            offset_rate: 0.4,
            speed: 1.0,
        };
        let plan = plan_frenet(&s, FrenetAction { v_f: 6.0, d_f: 1.5 }, 2.0, 0.1);
        let last = plan.last().unwrap();
        assert!((last.offset - 1.5).abs() < 1e-6);
        assert!((last.speed - 6.0).abs() < 1e-9);
        assert!((last.t - 2.0).abs() < 1e-12);
    }

    #[test]
    fn squash_maps_into_bounds() {
        let b = ActionBounds::default();
        let mid = b.squash([0.0, 0.0]);
        assert_eq!(mid, FrenetAction { v_f: 4.0, d_f: 0.0 });
        let hi = b.squash([50.0, -50.0]);
        assert!(hi.v_f <= b.v_max && hi.d_f >= -b.d_max);
    }
}
