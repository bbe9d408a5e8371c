//! Training objective: contrastive and KL terms over overshooting
//! distances, reward regression, and the detached reconstruction monitor.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::{ContrastiveBatch, Observations, WorldModel};
use crate::autodiff::{Graph, Var};
use crate::distributions::{self, LatentParams};
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::ParamSet;
use crate::replay::EpisodeBatch;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Scalar graph handles of each loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossVars {
    pub nce: Var,
    pub kl: Var,
    pub reward: Var,
    pub reconstruction: Var,
    /// `nce + kl_scale·kl + reward`.
    pub total: Var,
    /// Filtered `h` rows, `[L·B, H]`.
    pub deter: Var,
    /// Posterior samples, `[L·B, Z]`.
    pub stoch: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub nce: f64,
    pub kl: f64,
    pub reward: f64,
    pub reconstruction: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn read<S: Scalar>(g: &Graph<S>, v: &LossVars) -> Self {
        Self {
            nce: g.item(v.nce).to_f64(),
            kl: g.item(v.kl).to_f64(),
            reward: g.item(v.reward).to_f64(),
            reconstruction: g.item(v.reconstruction).to_f64(),
            total: g.item(v.total).to_f64(),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.nce, self.kl, self.reward, self.reconstruction, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Result of one world-model update.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput<S> {
    pub losses: LossBreakdown,
    pub grad_norm: f64,
    /// Detached filtered states, usable as imagination start points.
    pub start_deter: Tensor<S>,
    pub start_stoch: Tensor<S>,
}

/// Prior chain at one overshooting level: rows cover steps `first..L`.
struct Level {
    first: usize,
    deter: Var,
    prior: LatentParams,
    sample: Var,
}

impl WorldModel {
    /// `α·KL(sg(q) ‖ p) + (1 − α)·KL(q ‖ sg(p))`, averaged over rows, with
    /// each row mean floored at `free_nats`.
    pub(crate) fn balanced_kl<S: Scalar>(&self, g: &Graph<S>, post: &LatentParams, prior: &LatentParams) -> Result<Var> {
        let c = &self.config;
        let floor = |kl: Var| {
            if c.free_nats > 0.0 {
                g.clamp_min(kl, S::from_f64(c.free_nats))
            } else {
                kl
            }
        };
        if !c.balance_kl {
            return Ok(floor(g.mean(distributions::kl_divergence(g, post, prior)?)));
        }
        let a = S::from_f64(c.kl_balance);
        let to_prior = floor(g.mean(distributions::kl_divergence(g, &post.stop_gradient(g), prior)?));
        let to_post = floor(g.mean(distributions::kl_divergence(g, post, &prior.stop_gradient(g))?));
        g.add(g.scale(to_prior, a), g.scale(to_post, S::ONE - a))
    }

    pub(crate) fn nce_term<S: Scalar>(
        &self,
        g: &Graph<S>,
        vars: &[Var],
        anchors: Var,
        candidates: Var,
        positives: &[Vec<usize>],
    ) -> Result<Var> {
        let a = self.anchor_projection.forward(g, vars, anchors)?;
        distributions::info_nce(g, a, candidates, positives, vars[self.nce_weight])
    }

    /// Records the full objective on `g`.
    pub fn loss<S: Scalar>(
        &self,
        g: &Graph<S>,
        vars: &[Var],
        obs: &Observations<S>,
        contrast: &ContrastiveBatch<S>,
        rng: &mut impl Rng,
    ) -> Result<LossVars> {
        let c = &self.config;
        let (bn, ln) = (obs.batch, obs.steps);
        let m = c.model_views();
        if ln < 2 {
            return Err(Error::Invalid(format!("training sequences need length >= 2, got {ln}")));
        }

        let actions = g.constant(&obs.actions);
        let features = self.encode(g, vars, g.constant(&obs.posterior))?;

        // filtering pass
        let mut state = self.initial_state(g, bn);
        let (mut deters, mut posts, mut samples) = (Vec::new(), Vec::new(), Vec::new());
        for t in 0..ln {
            if t > 0 {
                let a = g.slice_rows(actions, t * bn, (t + 1) * bn)?;
                state.deter = self.recurrent_step(g, vars, state, a)?;
            }
            let f = g.slice_rows(features, t * m * bn, (t + 1) * m * bn)?;
            let post = self.posterior_from_features(g, vars, state.deter, f, bn, m)?;
            state.stoch = distributions::sample(g, &post, rng)?;
            deters.push(state.deter);
            posts.push(post);
            samples.push(state.stoch.value);
        }
        let deter = g.concat_rows(&deters)?;
        let stoch = g.concat_rows(&samples)?;
        let post = LatentParams::concat_rows(g, &posts)?;

        // overshooting: level j+1 feeds level-j prior samples one step on
        let first_prior = self.transition_predict(g, vars, deter)?;
        let mut levels = Vec::with_capacity(c.overshoot + 1);
        levels.push(Level {
            first: 0,
            deter,
            sample: distributions::sample(g, &first_prior, rng)?.value,
            prior: first_prior,
        });
        for j in 1..=c.overshoot {
            if j >= ln {
                break;
            }
            let prev = levels.last().unwrap();
            let rows = (ln - j) * bn;
            let prev_deter = g.slice_rows(prev.deter, 0, rows)?;
            let prev_sample = g.slice_rows(prev.sample, 0, rows)?;
            let a = g.slice_rows(actions, j * bn, ln * bn)?;
            let x = g.concat(&[prev_sample, a])?;
            let h = self.gru.forward(g, vars, x, prev_deter)?;
            let prior = self.transition_predict(g, vars, h)?;
            let sample = distributions::sample(g, &prior, rng)?.value;
            levels.push(Level {
                first: j,
                deter: h,
                prior,
                sample,
            });
        }

        let candidates = self.embed(g, vars, g.constant(&contrast.candidates))?;
        let mut nce = g.scalar(S::ZERO);
        let mut kl = g.scalar(S::ZERO);
        for k in 0..=c.overshoot {
            if let Some(level) = levels.get(k) {
                let q = post.slice_rows(g, level.first * bn, ln * bn)?;
                kl = g.add(kl, self.balanced_kl(g, &q, &level.prior)?)?;
            }
            let (anchors, first) = if k == 0 {
                (stoch, 0)
            } else if let Some(level) = levels.get(k - 1) {
                (level.sample, level.first)
            } else {
                continue;
            };
            let term = self.nce_term(g, vars, anchors, candidates, &contrast.positives[first * bn..])?;
            nce = g.add(nce, term)?;
        }

        let feat = g.concat(&[deter, stoch])?;
        let pred = self.predict_reward(g, vars, g.slice_rows(feat, bn, ln * bn)?)?;
        let target = g.slice_rows(g.constant(&obs.rewards), bn, ln * bn)?;
        let reward = g.scale(g.mean(g.squared_error(pred, target)?), S::from_f64(0.5));

        let recon = self.decode(g, vars, feat)?;
        let reconstruction = g.mean(g.squared_error(recon, g.constant(&obs.recon_target))?);

        let total = g.add(g.add(nce, g.scale(kl, S::from_f64(c.kl_scale)))?, reward)?;
        Ok(LossVars {
            nce,
            kl,
            reward,
            reconstruction,
            total,
            deter,
            stoch,
        })
    }
}

/// One world-model update on `batch`: builds inputs, records the loss,
/// backpropagates `total + reconstruction` (the decoder sits behind a
/// stop-gradient, so it only ever sees the reconstruction term), clips and
/// applies Adam.
pub fn train_step<S: Scalar>(
    model: &WorldModel,
    params: &mut ParamSet<S>,
    adam: &mut AdamState<S>,
    batch: &EpisodeBatch,
    rng: &mut impl Rng,
) -> Result<TrainOutput<S>> {
    let obs = model.observations::<S>(batch, true, rng)?;
    let contrast = model.build_contrastive_batch::<S>(batch, rng)?;
    let g = Graph::new();
    let vars = params.bind(&g, true);
    let lv = model.loss(&g, &vars, &obs, &contrast, rng)?;
    let losses = LossBreakdown::read(&g, &lv);
    if !losses.is_finite() {
        return Err(Error::NonFinite(format!("world-model loss {losses:?}")));
    }
    let start_deter = g.value(lv.deter);
    let start_stoch = g.value(lv.stoch);
    let objective = g.add(lv.total, lv.reconstruction)?;
    let mut grads = g.backward(objective).map_err(|e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m}; losses {losses:?}")),
        e => e,
    })?;
    let grad_norm = grads.clip_global_norm(model.config.grad_clip);
    adam_step(params, &grads, adam, &AdamConfig::with_lr(model.config.lr))?;
    Ok(TrainOutput {
        losses,
        grad_norm,
        start_deter,
        start_stoch,
    })
}
