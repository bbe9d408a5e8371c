//! Miniature multi-view pixel environments.
//!
//! * `BlindReacher`: a two-link arm and a target, rendered once and shown
//!   through two cameras that each black out one half of the image.
//! * `DualPendulum`: a swing-up pendulum seen from directly above (only the
//!   horizontal bob offset is visible) and from the side (only its height).
//!
//! Both render 24×24 grayscale views. Stepping is a pure function of the
//! state and the action.

mod pendulum;
mod raster;
mod reacher;

use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use pendulum::{Pendulum, PendulumState};
pub use raster::{Canvas, Image};
pub use reacher::{Reacher, ReacherState};

use crate::error::{invalid, Error};

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = libm::fmod(a + PI, 2.0 * PI);
    if r <= 0.0 {
        r += 2.0 * PI;
    }
    r - PI
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    BlindReacher,
    DualPendulum,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::BlindReacher => "blind_reacher",
            EnvKind::DualPendulum => "dual_pendulum",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "blind_reacher" => Ok(EnvKind::BlindReacher),
            "dual_pendulum" => Ok(EnvKind::DualPendulum),
            other => Err(invalid(alloc::format!("unknown environment {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Physics {
    Reacher(ReacherState),
    Pendulum(PendulumState),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    pub physics: Physics,
    pub step: usize,
}

/// Action dimension; every component is clipped to `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionSpec {
    pub dim: usize,
}

impl ActionSpec {
    pub fn clip(&self, action: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| action.get(i).copied().unwrap_or(0.0).clamp(-1.0, 1.0))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewFrame {
    pub views: Vec<Image>,
    pub reward: f64,
    pub done: bool,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Env {
    pub kind: EnvKind,
    /// Physics steps per episode.
    pub max_steps: usize,
    pub reacher: Reacher,
    pub pendulum: Pendulum,
}

impl Env {
    pub fn new(kind: EnvKind) -> Self {
        Self {
            kind,
            max_steps: 100,
            reacher: Reacher::default(),
            pendulum: Pendulum::default(),
        }
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn views(&self) -> usize {
        2
    }

    pub fn image_size(&self) -> usize {
        match self.kind {
            EnvKind::BlindReacher => self.reacher.canvas.size,
            EnvKind::DualPendulum => self.pendulum.canvas.size,
        }
    }

    pub fn action_spec(&self) -> ActionSpec {
        match self.kind {
            EnvKind::BlindReacher => ActionSpec { dim: 2 },
            EnvKind::DualPendulum => ActionSpec { dim: 1 },
        }
    }

    pub fn reset(&self, seed: u64) -> (EnvState, MultiViewFrame) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let physics = match self.kind {
            EnvKind::BlindReacher => Physics::Reacher(self.reacher.reset(&mut rng)),
            EnvKind::DualPendulum => Physics::Pendulum(self.pendulum.reset(&mut rng)),
        };
        let state = EnvState { physics, step: 0 };
        let frame = MultiViewFrame {
            views: self.render_views(&state),
            reward: self.reward(&state),
            done: false,
            step: 0,
        };
        (state, frame)
    }

    fn reward(&self, s: &EnvState) -> f64 {
        match &s.physics {
            Physics::Reacher(r) => self.reacher.reward(r),
            Physics::Pendulum(p) => self.pendulum.reward(p),
        }
    }

    fn advance(&self, s: &EnvState, action: &[f64]) -> (EnvState, f64) {
        let a = self.action_spec().clip(action);
        let (physics, reward) = match &s.physics {
            Physics::Reacher(r) => {
                let (n, rew) = self.reacher.step(r, [a[0], a[1]]);
                (Physics::Reacher(n), rew)
            }
            Physics::Pendulum(p) => {
                let (n, rew) = self.pendulum.step(p, a[0]);
                (Physics::Pendulum(n), rew)
            }
        };
        (
            EnvState {
                physics,
                step: s.step + 1,
            },
            reward,
        )
    }

    /// One physics step.
    pub fn step(&self, s: &EnvState, action: &[f64]) -> (EnvState, MultiViewFrame) {
        self.step_repeat(s, action, 1)
    }

    /// Applies `action` for `repeat` physics steps (stopping early at the
    /// episode end); the frame carries the mean reward of those steps.
    pub fn step_repeat(&self, s: &EnvState, action: &[f64], repeat: usize) -> (EnvState, MultiViewFrame) {
        let mut state = *s;
        let mut total = 0.0;
        let mut n = 0;
        for _ in 0..repeat.max(1) {
            if state.step >= self.max_steps {
                break;
            }
            let (next, r) = self.advance(&state, action);
            state = next;
            total += r;
            n += 1;
        }
        let frame = MultiViewFrame {
            views: self.render_views(&state),
            reward: if n > 0 { total / n as f64 } else { 0.0 },
            done: state.step >= self.max_steps,
            step: state.step,
        };
        (state, frame)
    }

    pub fn render_views(&self, s: &EnvState) -> Vec<Image> {
        match &s.physics {
            Physics::Reacher(r) => self.reacher.render(r),
            Physics::Pendulum(p) => self.pendulum.render(p),
        }
    }

    /// Hand-coded controller with access to the true state.
    pub fn oracle_policy(&self, s: &EnvState) -> Vec<f64> {
        match &s.physics {
            Physics::Reacher(r) => self.reacher.oracle(r).to_vec(),
            Physics::Pendulum(p) => alloc::vec![self.pendulum.oracle(p)],
        }
    }
}
