//! Torque-limited pendulum seen from above and from the side.
//!
//! The angle is measured from upright, so `θ = 0` is the goal and `θ = π`
//! the hanging rest position. Gravity pulls away from upright:
//! `θ̈ = (g/l)·sin θ + τ·a`.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;

use super::raster::{Canvas, Image};
use super::wrap_angle;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumState {
    pub theta: f64,
    pub theta_dot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pendulum {
    pub gravity_over_length: f64,
    pub torque_gain: f64,
    pub max_speed: f64,
    pub dt: f64,
    /// Semi-implicit Euler sub-steps per control step of length `dt`.
    pub substeps: usize,
    pub canvas: Canvas,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self {
            gravity_over_length: 10.0,
            torque_gain: 8.0,
            max_speed: 8.0,
            dt: 0.05,
            substeps: 10,
            canvas: Canvas {
                size: 24,
                extent: 1.75,
            },
        }
    }
}

const ROD_HALF_WIDTH: f64 = 0.05;
const BOB_RADIUS: f64 = 0.16;

impl Pendulum {
    pub fn reset(&self, rng: &mut impl Rng) -> PendulumState {
        PendulumState {
            theta: wrap_angle(PI + rng.random_range(-0.1..=0.1)),
            theta_dot: 0.0,
        }
    }

    /// Advances by `dt` with semi-implicit Euler (velocity first); returns
    /// the next state and `cos θ'`.
    pub fn step(&self, s: &PendulumState, action: f64) -> (PendulumState, f64) {
        let a = action.clamp(-1.0, 1.0);
        let h = self.dt / self.substeps.max(1) as f64;
        let mut next = *s;
        for _ in 0..self.substeps.max(1) {
            let acc = self.gravity_over_length * libm::sin(next.theta) + self.torque_gain * a;
            next.theta_dot = (next.theta_dot + h * acc).clamp(-self.max_speed, self.max_speed);
            next.theta = wrap_angle(next.theta + h * next.theta_dot);
        }
        (next, self.reward(&next))
    }

    pub fn reward(&self, s: &PendulumState) -> f64 {
        libm::cos(s.theta)
    }

    /// Mechanical energy per unit mass·length² of the unforced system.
    pub fn energy(&self, s: &PendulumState) -> f64 {
        0.5 * s.theta_dot * s.theta_dot + self.gravity_over_length * libm::cos(s.theta)
    }

    /// View 1 looks straight down (only the horizontal offset `sin θ`
    /// survives); view 2 looks from the side (only the height `cos θ`).
    pub fn render(&self, s: &PendulumState) -> Vec<Image> {
        let x = libm::sin(s.theta);
        let y = libm::cos(s.theta);
        let c = &self.canvas;

        let mut top = c.blank();
        c.segment(&mut top, (0.0, 0.0), (x, 0.0), ROD_HALF_WIDTH, 0.5);
        c.disc(&mut top, (x, 0.0), BOB_RADIUS, 1.0);

        let mut side = c.blank();
        c.segment(&mut side, (0.0, 0.0), (0.0, y), ROD_HALF_WIDTH, 0.5);
        c.disc(&mut side, (0.0, y), BOB_RADIUS, 1.0);
        vec![top, side]
    }

    /// Energy-pumping swing-up with a gravity-compensating PD catch near the
    /// top.
    pub fn oracle(&self, s: &PendulumState) -> f64 {
        let g = self.gravity_over_length;
        if libm::cos(s.theta) > 0.8 {
            let u = (-g * libm::sin(s.theta) - 12.0 * s.theta - 4.0 * s.theta_dot) / self.torque_gain;
            return u.clamp(-1.0, 1.0);
        }
        let deficit = g - self.energy(s);
        let dir = if s.theta_dot.abs() < 1e-6 {
            // push away from the hanging position to start the swing
            if s.theta >= 0.0 { -1.0 } else { 1.0 }
        } else {
            s.theta_dot.signum()
        };
        (dir * deficit).clamp(-1.0, 1.0)
    }
}
