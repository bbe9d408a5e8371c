//! Actor-critic trained on imagined latent rollouts.
//!
//! The actor maps features `[h, z]` to a tanh-squashed Gaussian action; the
//! critic regresses λ-returns computed with a slowly updated target copy.
//! Actor gradients flow back through the (frozen) world model.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::distributions::{self, GaussianParams, LatentParams, LatentSample};
use crate::error::{invalid, Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::{Activation, Mlp, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::worldmodel::{RssmState, WorldModel};

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub entropy_weight: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub target_every: u64,
    pub hidden: usize,
    pub min_std: f64,
    pub grad_clip: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            gamma: 0.99,
            lambda: 0.95,
            entropy_weight: 1e-3,
            actor_lr: 1e-4,
            critic_lr: 1e-4,
            target_every: 100,
            hidden: 128,
            min_std: 0.1,
            grad_clip: 100.0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(invalid(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.target_every == 0 {
            return Err(invalid("target_every must be positive"));
        }
        Ok(())
    }
}

/// Actor and critic layer handles.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub config: AgentConfig,
    pub action_dim: usize,
    pub actor: Mlp,
    pub critic: Mlp,
}

/// Trainable agent state.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentParams<S> {
    pub actor: ParamSet<S>,
    pub critic: ParamSet<S>,
    pub target_critic: ParamSet<S>,
    pub actor_adam: AdamState<S>,
    pub critic_adam: AdamState<S>,
    pub updates: u64,
}

impl Agent {
    pub fn new<S: Scalar>(
        config: AgentConfig,
        feature_dim: usize,
        action_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<(Self, AgentParams<S>)> {
        config.validate()?;
        let hd = config.hidden;
        let mut actor_ps = ParamSet::new();
        let actor = Mlp::new(
            &mut actor_ps,
            "actor",
            &[feature_dim, hd, hd, 2 * action_dim],
            Activation::Elu,
            Activation::Identity,
            rng,
        );
        let mut critic_ps = ParamSet::new();
        let critic = Mlp::new(
            &mut critic_ps,
            "critic",
            &[feature_dim, hd, hd, 1],
            Activation::Elu,
            Activation::Identity,
            rng,
        );
        let params = AgentParams {
            actor_adam: AdamState::new(&actor_ps),
            critic_adam: AdamState::new(&critic_ps),
            target_critic: critic_ps.clone(),
            actor: actor_ps,
            critic: critic_ps,
            updates: 0,
        };
        Ok((
            Self {
                config,
                action_dim,
                actor,
                critic,
            },
            params,
        ))
    }

    /// Pre-squash action distribution for rows of features.
    pub fn policy<S: Scalar>(&self, g: &Graph<S>, actor_vars: &[Var], feat: Var) -> Result<GaussianParams> {
        let raw = self.actor.forward(g, actor_vars, feat)?;
        let a = self.action_dim;
        let mean = g.slice(raw, 0, a)?;
        let std = g.add_scalar(g.softplus(g.slice(raw, a, 2 * a)?), S::from_f64(self.config.min_std));
        Ok(GaussianParams { mean, std })
    }

    /// `[R, 1]` state values.
    pub fn value<S: Scalar>(&self, g: &Graph<S>, critic_vars: &[Var], feat: Var) -> Result<Var> {
        self.critic.forward(g, critic_vars, feat)
    }

    /// Noise-free action `tanh(mean)`.
    pub fn mode_action<S: Scalar>(&self, g: &Graph<S>, actor_vars: &[Var], feat: Var) -> Result<Var> {
        Ok(g.tanh(self.policy(g, actor_vars, feat)?.mean))
    }
}

/// λ-returns for `rewards[0..H]` and `values[0..=H]`:
/// `G_t = r_t + γ·((1 − λ)·v_{t+1} + λ·G_{t+1})`, `G_H = v_H`.
pub fn lambda_returns(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    let h = rewards.len();
    if values.len() != h + 1 {
        return Err(invalid(format!(
            "{} rewards need {} values, got {}",
            h,
            h + 1,
            values.len()
        )));
    }
    let mut out = vec![0.0; h];
    let mut next = values[h];
    for t in (0..h).rev() {
        next = rewards[t] + gamma * ((1.0 - lambda) * values[t + 1] + lambda * next);
        out[t] = next;
    }
    Ok(out)
}

/// Graph form of [`lambda_returns`] over `[R, 1]` columns.
pub fn lambda_returns_graph<S: Scalar>(
    g: &Graph<S>,
    rewards: &[Var],
    values: &[Var],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<Var>> {
    let h = rewards.len();
    if values.len() != h + 1 {
        return Err(invalid(format!(
            "{} rewards need {} values, got {}",
            h,
            h + 1,
            values.len()
        )));
    }
    let (gl, g1l) = (S::from_f64(gamma * lambda), S::from_f64(gamma * (1.0 - lambda)));
    let mut out = vec![values[h]; h];
    let mut next = values[h];
    for t in (0..h).rev() {
        let boot = g.add(g.scale(values[t + 1], g1l), g.scale(next, gl))?;
        next = g.add(rewards[t], boot)?;
        out[t] = next;
    }
    Ok(out)
}

/// Latent trajectory produced without touching an environment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImaginedRollout {
    /// `H + 1` feature rows `[h, z]`, starting with the start states.
    pub features: Vec<Var>,
    pub actions: Vec<Var>,
    pub policies: Vec<GaussianParams>,
    /// `rewards[i]` is the predicted reward on reaching `features[i + 1]`.
    pub rewards: Vec<Var>,
}

/// Rolls the transition prior forward from `start` under the actor.
pub fn imagine<S: Scalar>(
    g: &Graph<S>,
    wm: &WorldModel,
    world_vars: &[Var],
    agent: &Agent,
    actor_vars: &[Var],
    start: RssmState,
    horizon: usize,
    rng: &mut impl Rng,
) -> Result<ImaginedRollout> {
    let mut state = start;
    let mut rollout = ImaginedRollout {
        features: vec![wm.features(g, state)?],
        actions: Vec::with_capacity(horizon),
        policies: Vec::with_capacity(horizon),
        rewards: Vec::with_capacity(horizon),
    };
    for _ in 0..horizon {
        let feat = *rollout.features.last().unwrap();
        let pi = agent.policy(g, actor_vars, feat)?;
        let shape = g.shape(pi.mean);
        let noise: Vec<S> = (0..shape.iter().product())
            .map(|_| S::from_f64(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let eps = g.constant_vec(&shape, noise)?;
        let action = g.tanh(g.add(pi.mean, g.mul(pi.std, eps)?)?);
        let deter = wm.recurrent_step(g, world_vars, state, action)?;
        let prior = wm.transition_predict(g, world_vars, deter)?;
        state = RssmState {
            deter,
            stoch: distributions::sample(g, &prior, rng)?,
        };
        let next = wm.features(g, state)?;
        rollout.rewards.push(wm.predict_reward(g, world_vars, next)?);
        rollout.features.push(next);
        rollout.actions.push(action);
        rollout.policies.push(pi);
    }
    Ok(rollout)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AgentLosses {
    pub actor: f64,
    pub critic: f64,
    pub mean_return: f64,
    pub entropy: f64,
}

impl AgentLosses {
    pub fn is_finite(&self) -> bool {
        [self.actor, self.critic, self.mean_return, self.entropy]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn mean_of<S: Scalar>(g: &Graph<S>, parts: &[Var]) -> Result<Var> {
    let mut acc = g.scalar(S::ZERO);
    for &p in parts {
        acc = g.add(acc, g.mean(p))?;
    }
    Ok(g.scale(acc, S::from_f64(1.0 / parts.len().max(1) as f64)))
}

/// Actor objective and its parts, recorded on `g`.
pub struct ActorObjective {
    pub loss: Var,
    pub mean_return: Var,
    pub entropy: Var,
    pub returns: Vec<Var>,
    pub rollout: ImaginedRollout,
}

impl Agent {
    /// `−mean(λ-returns) − η·mean(entropy)` over an imagined rollout from
    /// detached start states, bootstrapped with the target critic.
    pub fn actor_objective<S: Scalar>(
        &self,
        g: &Graph<S>,
        wm: &WorldModel,
        world_vars: &[Var],
        actor_vars: &[Var],
        target_vars: &[Var],
        start: RssmState,
        rng: &mut impl Rng,
    ) -> Result<ActorObjective> {
        let c = &self.config;
        let rollout = imagine(g, wm, world_vars, self, actor_vars, start, c.horizon, rng)?;
        let values = rollout
            .features
            .iter()
            .map(|&f| self.value(g, target_vars, f))
            .collect::<Result<Vec<_>>>()?;
        let returns = lambda_returns_graph(g, &rollout.rewards, &values, c.gamma, c.lambda)?;
        let entropies = rollout
            .policies
            .iter()
            .map(|p| distributions::entropy(g, &LatentParams::Gaussian(*p)))
            .collect::<Result<Vec<_>>>()?;
        let mean_return = mean_of(g, &returns)?;
        let entropy = mean_of(g, &entropies)?;
        let loss = g.neg(g.add(mean_return, g.scale(entropy, S::from_f64(c.entropy_weight)))?);
        Ok(ActorObjective {
            loss,
            mean_return,
            entropy,
            returns,
            rollout,
        })
    }

    /// One critic regression step of `0.5·(v(feat) − target)²` on constant
    /// inputs. Returns the loss before the step.
    pub fn critic_step<S: Scalar>(&self, params: &mut AgentParams<S>, feats: &Tensor<S>, targets: &Tensor<S>) -> Result<f64> {
        let g = Graph::new();
        let vars = params.critic.bind(&g, true);
        let v = self.value(&g, &vars, g.constant(feats))?;
        let loss = g.scale(g.mean(g.squared_error(v, g.constant(targets))?), S::from_f64(0.5));
        let value = g.item(loss).to_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("critic loss {value}")));
        }
        let mut grads = g.backward(loss)?;
        grads.clip_global_norm(self.config.grad_clip);
        adam_step(
            &mut params.critic,
            &grads,
            &mut params.critic_adam,
            &AdamConfig::with_lr(self.config.critic_lr),
        )?;
        Ok(value)
    }

    /// One actor and one critic update from `start` states
    /// (`[N, H]` deterministic and `[N, Z]` stochastic rows).
    pub fn update<S: Scalar>(
        &self,
        params: &mut AgentParams<S>,
        wm: &WorldModel,
        world: &ParamSet<S>,
        start_deter: &Tensor<S>,
        start_stoch: &Tensor<S>,
        rng: &mut impl Rng,
    ) -> Result<AgentLosses> {
        let c = &self.config;
        let g = Graph::new();
        let world_vars = world.bind(&g, false);
        let actor_vars = params.actor.bind(&g, true);
        let target_vars = params.target_critic.bind(&g, false);
        let start = RssmState {
            deter: g.constant(start_deter),
            stoch: LatentSample {
                value: g.constant(start_stoch),
                pathwise: false,
            },
        };
        let obj = self.actor_objective(&g, wm, &world_vars, &actor_vars, &target_vars, start, rng)?;
        let mut losses = AgentLosses {
            actor: g.item(obj.loss).to_f64(),
            mean_return: g.item(obj.mean_return).to_f64(),
            entropy: g.item(obj.entropy).to_f64(),
            critic: 0.0,
        };
        if !losses.is_finite() {
            return Err(Error::NonFinite(format!("actor objective {losses:?}")));
        }
        let h = c.horizon;
        let feats = if h == 0 {
            g.value(obj.rollout.features[0])
        } else {
            g.value(g.concat_rows(&obj.rollout.features[..h])?)
        };
        let targets = if h == 0 {
            None
        } else {
            Some(g.value(g.concat_rows(&obj.returns)?))
        };
        let mut grads = g.backward(obj.loss)?;
        grads.clip_global_norm(c.grad_clip);
        adam_step(
            &mut params.actor,
            &grads,
            &mut params.actor_adam,
            &AdamConfig::with_lr(c.actor_lr),
        )?;
        if let Some(targets) = targets {
            losses.critic = self.critic_step(params, &feats, &targets)?;
        }
        params.updates += 1;
        if params.updates % c.target_every == 0 {
            params.target_critic.copy_from(&params.critic);
        }
        Ok(losses)
    }
}

/// Recurrent filter state of one environment while acting.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    deter: Tensor<f32>,
    stoch: Tensor<f32>,
    started: bool,
}

impl Controller {
    pub fn new(wm: &WorldModel) -> Self {
        Self {
            deter: Tensor::zeros(&[1, wm.config.deter]),
            stoch: Tensor::zeros(&[1, wm.config.latent_dim()]),
            started: false,
        }
    }

    /// Updates the filter with the action that led into `views` and returns
    /// the policy's noise-free action.
    pub fn act(
        &mut self,
        wm: &WorldModel,
        world: &ParamSet<f32>,
        agent: &Agent,
        actor: &ParamSet<f32>,
        views: &[Vec<u8>],
        prev_action: &[f64],
    ) -> Result<Vec<f64>> {
        let g = Graph::new();
        let wv = world.bind(&g, false);
        let av = actor.bind(&g, false);
        let mut state = RssmState {
            deter: g.constant(&self.deter),
            stoch: LatentSample {
                value: g.constant(&self.stoch),
                pathwise: false,
            },
        };
        if self.started {
            let a: Vec<f32> = prev_action.iter().map(|&x| x as f32).collect();
            let a = g.constant_vec(&[1, a.len()], a)?;
            state.deter = wm.recurrent_step(&g, &wv, state, a)?;
        }
        let crops = g.constant(&wm.frame_input::<f32>(views)?);
        let post = wm.posterior(&g, &wv, state.deter, crops)?;
        state.stoch.value = post.mode(&g)?;
        let feat = wm.features(&g, state)?;
        let action = agent.mode_action(&g, &av, feat)?;
        self.deter = g.value(state.deter);
        self.stoch = g.value(state.stoch.value);
        self.started = true;
        let out = g.data(action).iter().map(|&v| v as f64).collect();
        Ok(out)
    }
}
