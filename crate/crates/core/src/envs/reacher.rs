//! Planar two-link arm reaching for a target, observed through two
//! half-blinded cameras.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;

use super::raster::{Canvas, Image};
use super::wrap_angle;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReacherState {
    pub joints: [f64; 2],
    pub target: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reacher {
    pub links: [f64; 2],
    pub joint_speed: f64,
    pub dt: f64,
    pub target_radius: f64,
    pub canvas: Canvas,
}

impl Default for Reacher {
    fn default() -> Self {
        Self {
            links: [0.3, 0.25],
            joint_speed: 2.0,
            dt: 0.05,
            target_radius: 0.15,
            canvas: Canvas {
                size: 24,
                extent: 0.95,
            },
        }
    }
}

impl Reacher {
    pub fn reach(&self) -> f64 {
        self.links[0] + self.links[1]
    }

    pub fn fingertip(&self, joints: [f64; 2]) -> (f64, f64) {
        let [l1, l2] = self.links;
        let (a, b) = (joints[0], joints[0] + joints[1]);
        (
            l1 * libm::cos(a) + l2 * libm::cos(b),
            l1 * libm::sin(a) + l2 * libm::sin(b),
        )
    }

    fn elbow(&self, joints: [f64; 2]) -> (f64, f64) {
        let l1 = self.links[0];
        (l1 * libm::cos(joints[0]), l1 * libm::sin(joints[0]))
    }

    /// Random arm pose; the target is the fingertip of another random pose,
    /// so it is always reachable.
    pub fn reset(&self, rng: &mut impl Rng) -> ReacherState {
        let mut pose = || [rng.random_range(-PI..PI), rng.random_range(-PI..PI)];
        let joints = pose();
        let target = self.fingertip(pose());
        ReacherState { joints, target }
    }

    pub fn step(&self, s: &ReacherState, action: [f64; 2]) -> (ReacherState, f64) {
        let mut joints = s.joints;
        for (q, a) in joints.iter_mut().zip(action) {
            *q = wrap_angle(*q + self.joint_speed * a.clamp(-1.0, 1.0) * self.dt);
        }
        let next = ReacherState {
            joints,
            target: s.target,
        };
        (next, self.reward(&next))
    }

    pub fn distance_to_target(&self, s: &ReacherState) -> f64 {
        let (x, y) = self.fingertip(s.joints);
        libm::hypot(x - s.target.0, y - s.target.1)
    }

    pub fn reward(&self, s: &ReacherState) -> f64 {
        if self.distance_to_target(s) <= self.target_radius {
            1.0
        } else {
            0.0
        }
    }

    /// Full scene; view 1 then blacks out the right half, view 2 the left.
    pub fn render_scene(&self, s: &ReacherState) -> Image {
        let c = &self.canvas;
        let mut img = c.blank();
        c.disc(&mut img, s.target, self.target_radius, 0.6);
        let elbow = self.elbow(s.joints);
        let tip = self.fingertip(s.joints);
        c.segment(&mut img, (0.0, 0.0), elbow, 0.03, 1.0);
        c.segment(&mut img, elbow, tip, 0.03, 1.0);
        c.disc(&mut img, tip, 0.04, 1.0);
        img
    }

    pub fn render(&self, s: &ReacherState) -> Vec<Image> {
        let scene = self.render_scene(s);
        let half = scene.width / 2;
        let mut left = scene.clone();
        left.blank_columns(half, scene.width);
        let mut right = scene;
        right.blank_columns(0, half);
        vec![left, right]
    }

    /// Moves each joint proportionally towards the closer inverse-kinematics
    /// solution for the target.
    pub fn oracle(&self, s: &ReacherState) -> [f64; 2] {
        let [l1, l2] = self.links;
        let (tx, ty) = s.target;
        let d2 = tx * tx + ty * ty;
        let c2 = ((d2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
        let best = [libm::acos(c2), -libm::acos(c2)]
            .into_iter()
            .map(|q2| {
                let q1 = libm::atan2(ty, tx) - libm::atan2(l2 * libm::sin(q2), l1 + l2 * libm::cos(q2));
                let delta = [wrap_angle(q1 - s.joints[0]), wrap_angle(q2 - s.joints[1])];
                (delta[0].abs().max(delta[1].abs()), delta)
            })
            .fold((f64::INFINITY, [0.0; 2]), |acc, c| if c.0 < acc.0 { c } else { acc })
            .1;
        let gain = 1.0 / (self.joint_speed * self.dt);
        [
            (gain * best[0]).clamp(-1.0, 1.0),
            (gain * best[1]).clamp(-1.0, 1.0),
        ]
    }
}
