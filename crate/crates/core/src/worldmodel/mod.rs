//! Recurrent state-space world model with per-view posteriors fused by a
//! product of experts, trained by a multi-view contrastive objective.
//!
//! Batched tensors produced from an [`EpisodeBatch`] are laid out time-major:
//! row `t·B + b` is sequence `b` at step `t`. Per-view blocks inside a step
//! are view-major (`(t·M + m)·B + b`), and contrastive candidates are
//! indexed `(t·B + b)·M + m`.

mod loss;
#[cfg(test)]
mod tests;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;
use core::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::distributions::{self, CategoricalAveraging, LatentFamily, LatentParams, LatentSample};
use crate::error::{invalid, Error, Result};
use crate::params::{glorot, Activation, GruCell, Linear, Mlp, ParamSet};
use crate::replay::{dequantize, EpisodeBatch};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use loss::{train_step, LossBreakdown, LossVars, TrainOutput};

/// How the views of one time step are turned into a posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionMode {
    /// One posterior per view, fused by product of experts.
    #[default]
    Poe,
    /// All views stacked as channels of a single input.
    ChannelStack,
    /// Only view `k` (1-based) is observed.
    SingleView(usize),
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionMode::Poe => f.write_str("poe"),
            FusionMode::ChannelStack => f.write_str("channel_stack"),
            FusionMode::SingleView(k) => write!(f, "single_view:{k}"),
        }
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poe" => Ok(FusionMode::Poe),
            "channel_stack" => Ok(FusionMode::ChannelStack),
            _ => {
                let k = s
                    .strip_prefix("single_view:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| {
                        invalid(format!(
                            "unknown fusion mode {s:?} (expected poe, channel_stack or single_view:k)"
                        ))
                    })?;
                Ok(FusionMode::SingleView(k))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub views: usize,
    pub image_size: usize,
    pub crop_size: usize,
    /// Largest per-axis shift of a training crop away from the centered
    /// crop; `None` draws offsets uniformly over the whole image.
    pub crop_jitter: Option<usize>,
    pub action_dim: usize,
    pub fusion: FusionMode,
    pub family: LatentFamily,
    pub averaging: CategoricalAveraging,
    pub deter: usize,
    pub hidden: usize,
    pub embed: usize,
    pub min_std: f64,
    pub overshoot: usize,
    /// Weight of the prior-training direction of the KL term.
    pub kl_balance: f64,
    /// When off, the KL term is the plain `KL(posterior ‖ prior)`.
    pub balance_kl: bool,
    pub kl_scale: f64,
    /// Floor on each KL term; below it the term passes no gradient.
    pub free_nats: f64,
    pub lr: f64,
    pub grad_clip: f64,
}

impl ModelConfig {
    pub fn new(views: usize, image_size: usize, action_dim: usize) -> Self {
        Self {
            views,
            image_size,
            crop_size: 16,
            crop_jitter: Some(0),
            action_dim,
            fusion: FusionMode::Poe,
            family: LatentFamily::Gaussian { dim: 32 },
            averaging: CategoricalAveraging::Probability,
            deter: 64,
            hidden: 128,
            embed: 32,
            min_std: 0.1,
            overshoot: 3,
            kl_balance: 0.8,
            balance_kl: true,
            kl_scale: 1.0,
            free_nats: 3.0,
            lr: 1e-3,
            grad_clip: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.views == 0 || self.action_dim == 0 {
            return Err(invalid("views and action_dim must be positive"));
        }
        if self.crop_size == 0 || self.crop_size > self.image_size {
            return Err(invalid(format!(
                "crop size {} must be in 1..={}",
                self.crop_size, self.image_size
            )));
        }
        if let FusionMode::SingleView(k) = self.fusion {
            if k == 0 || k > self.views {
                return Err(invalid(format!(
                    "single_view:{k} requires 1 <= k <= {}",
                    self.views
                )));
            }
        }
        if let LatentFamily::Categorical { factors, classes } = self.family {
            if factors == 0 || classes < 2 {
                return Err(invalid("categorical latents need F >= 1 and C >= 2"));
            }
        }
        if !(self.free_nats >= 0.0) {
            return Err(invalid("free_nats must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.kl_balance) {
            return Err(invalid("kl_balance must lie in [0, 1]"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        Ok(())
    }

    /// Environment views feeding each model view.
    pub fn channels(&self) -> Vec<Vec<usize>> {
        match self.fusion {
            FusionMode::Poe => (0..self.views).map(|v| vec![v]).collect(),
            FusionMode::ChannelStack => vec![(0..self.views).collect()],
            FusionMode::SingleView(k) => vec![vec![k - 1]],
        }
    }

    /// Number of model views `M`.
    pub fn model_views(&self) -> usize {
        self.channels().len()
    }

    pub fn crop_len(&self) -> usize {
        self.crop_size * self.crop_size
    }

    pub fn input_dim(&self) -> usize {
        self.channels()[0].len() * self.crop_len()
    }

    pub fn latent_dim(&self) -> usize {
        self.family.sample_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.deter + self.latent_dim()
    }

    /// Largest random-crop offset along either axis.
    pub fn max_offset(&self) -> usize {
        self.image_size - self.crop_size
    }

    pub fn center_offset(&self) -> usize {
        self.max_offset() / 2
    }
}

/// Layer handles into a world-model [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel {
    pub config: ModelConfig,
    pub encoder: Mlp,
    pub projection: Linear,
    pub anchor_projection: Linear,
    pub nce_weight: usize,
    pub gru: GruCell,
    pub representation: Mlp,
    pub transition: Mlp,
    pub reward: Mlp,
    pub decoder: Mlp,
    /// Ids of the decoder parameters (the only ones reconstruction trains).
    pub decoder_params: Range<usize>,
}

/// Deterministic and stochastic state of a batch of rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RssmState {
    pub deter: Var,
    pub stoch: LatentSample,
}

impl WorldModel {
    pub fn new<S: Scalar>(config: ModelConfig, rng: &mut impl Rng) -> Result<(Self, ParamSet<S>)> {
        config.validate()?;
        let c = &config;
        let (hd, act) = (c.hidden, Activation::Elu);
        let mut ps = ParamSet::new();
        let encoder = Mlp::new(&mut ps, "encoder", &[c.input_dim(), hd, hd], act, act, rng);
        let projection = Linear::new(&mut ps, "projection", hd, c.embed, rng);
        let anchor_projection = Linear::new(&mut ps, "anchor", c.latent_dim(), c.embed, rng);
        let nce_weight = ps.push("nce.w", glorot(rng, c.embed, c.embed));
        let gru = GruCell::new(&mut ps, "gru", c.latent_dim() + c.action_dim, c.deter, rng);
        let pd = c.family.param_dim();
        let representation = Mlp::new(
            &mut ps,
            "representation",
            &[c.deter + hd, hd, hd, pd],
            act,
            Activation::Identity,
            rng,
        );
        let transition = Mlp::new(&mut ps, "transition", &[c.deter, hd, hd, pd], act, Activation::Identity, rng);
        let reward = Mlp::new(
            &mut ps,
            "reward",
            &[c.feature_dim(), hd, hd, 1],
            act,
            Activation::Identity,
            rng,
        );
        let first_decoder = ps.len();
        let decoder = Mlp::new(
            &mut ps,
            "decoder",
            &[c.feature_dim(), hd, hd, c.views * c.crop_len()],
            act,
            Activation::Sigmoid,
            rng,
        );
        let decoder_params = first_decoder..ps.len();
        Ok((
            Self {
                config,
                encoder,
                projection,
                anchor_projection,
                nce_weight,
                gru,
                representation,
                transition,
                reward,
                decoder,
                decoder_params,
            },
            ps,
        ))
    }

    /// `h_t = GRU(h_{t−1}, [z_{t−1}, a_{t−1}])`.
    pub fn recurrent_step<S: Scalar>(&self, g: &Graph<S>, vars: &[Var], prev: RssmState, action: Var) -> Result<Var> {
        let x = g.concat(&[prev.stoch.value, action])?;
        self.gru.forward(g, vars, x, prev.deter)
    }

    /// Shared encoder features for rows of flattened crops.
    pub fn encode<S: Scalar>(&self, g: &Graph<S>, vars: &[Var], crops: Var) -> Result<Var> {
        self.encoder.forward(g, vars, crops)
    }

    /// Contrastive embedding of rows of flattened crops.
    pub fn embed<S: Scalar>(&self, g: &Graph<S>, vars: &[Var], crops: Var) -> Result<Var> {
        let f = self.encode(g, vars, crops)?;
        self.projection.forward(g, vars, f)
    }

    /// Posterior of one view given `h` and that view's encoder features.
    pub fn represent_features<S: Scalar>(
        &self,
        g: &Graph<S>,
        vars: &[Var],
        deter: Var,
        features: Var,
    ) -> Result<LatentParams> {
        let raw = self.representation.forward(g, vars, g.concat(&[deter, features])?)?;
        LatentParams::from_head(g, self.config.family, raw, self.config.min_std)
    }

    /// Posterior of one view given `h` and flattened crops of that view.
    pub fn represent_view<S: Scalar>(&self, g: &Graph<S>, vars: &[Var], deter: Var, crops: Var) -> Result<LatentParams> {
        let f = self.encode(g, vars, crops)?;
        self.represent_features(g, vars, deter, f)
    }

    pub fn fuse_posteriors<S: Scalar>(&self, g: &Graph<S>, per_view: &[LatentParams]) -> Result<LatentParams> {
        match per_view {
            [] => Err(invalid("fuse_posteriors needs at least one view")),
            [one] => Ok(*one),
            _ => distributions::poe(g, per_view, self.config.averaging),
        }
    }

    /// Posterior from `h` and `[M·R, input_dim]` crops laid out view-major.
    pub fn posterior<S: Scalar>(&self, g: &Graph<S>, vars: &[Var], deter: Var, crops: Var) -> Result<LatentParams> {
        let m = self.config.model_views();
        let rows = g.shape(deter)[0];
        let f = self.encode(g, vars, crops)?;
        self.posterior_from_features(g, vars, deter, f, rows, m)
    }

    fn posterior_from_features<S: Scalar>(
        &self,
        g: &Graph<S>,
        vars: &[Var],
        deter: Var,
        features: Var,
        rows: usize,
        m: usize,
    ) -> Result<LatentParams> {
        let h = if m == 1 {
            deter
        } else {
            g.concat_rows(&vec![deter; m])?
        };
        let all = self.represent_features(g, vars, h, features)?;
        if m == 1 {
            return Ok(all);
        }
        let views = (0..m)
            .map(|v| all.slice_rows(g, v * rows, (v + 1) * rows))
            .collect::<Result<Vec<_>>>()?;
        self.fuse_posteriors(g, &views)
    }

    pub fn transition_predict<S: Scalar>(&self, g: &Graph<S>, vars: &[Var], deter: Var) -> Result<LatentParams> {
        let raw = self.transition.forward(g, vars, deter)?;
        LatentParams::from_head(g, self.config.family, raw, self.config.min_std)
    }

    /// `[R, 1]` reward means.
    pub fn predict_reward<S: Scalar>(&self, g: &Graph<S>, vars: &[Var], feat: Var) -> Result<Var> {
        self.reward.forward(g, vars, feat)
    }

    /// `[R, V·crop²]` reconstructed center crops of every view, in `[0, 1]`.
    /// The decoder input is cut from the graph.
    pub fn decode<S: Scalar>(&self, g: &Graph<S>, vars: &[Var], feat: Var) -> Result<Var> {
        self.decoder.forward(g, vars, g.stop_gradient(feat))
    }

    pub fn features<S: Scalar>(&self, g: &Graph<S>, state: RssmState) -> Result<Var> {
        g.concat(&[state.deter, state.stoch.value])
    }

    pub fn initial_state<S: Scalar>(&self, g: &Graph<S>, rows: usize) -> RssmState {
        RssmState {
            deter: g.zeros(&[rows, self.config.deter]),
            stoch: LatentSample {
                value: g.zeros(&[rows, self.config.latent_dim()]),
                pathwise: false,
            },
        }
    }

    /// Names of all parameters outside the decoder.
    pub fn non_decoder_params(&self, ps_len: usize) -> Vec<usize> {
        (0..ps_len).filter(|i| !self.decoder_params.contains(i)).collect()
    }
}

/// Copies a `crop × crop` window at `(ox, oy)` out of a quantized square
/// image, appending dequantized values to `out`.
pub fn crop_into<S: Scalar>(image: &[u8], size: usize, crop: usize, ox: usize, oy: usize, out: &mut Vec<S>) {
    for y in oy..oy + crop {
        let row = &image[y * size + ox..y * size + ox + crop];
        out.extend(row.iter().map(|&q| S::from_f64(dequantize(q) as f64)));
    }
}

/// Model inputs for one [`EpisodeBatch`].
#[derive(Debug, Clone, PartialEq)]
pub struct Observations<S> {
    pub batch: usize,
    pub steps: usize,
    /// `[L·M·B, input_dim]`, rows `(t·M + m)·B + b`.
    pub posterior: Tensor<S>,
    /// `[L·B, A]`
    pub actions: Tensor<S>,
    /// `[L·B, 1]`
    pub rewards: Tensor<S>,
    /// `[L·B, V·crop²]` centered crops of every environment view.
    pub recon_target: Tensor<S>,
}

/// Candidates for the contrastive objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch<S> {
    /// `[L·B·M, input_dim]` independently cropped views, rows
    /// `(t·B + b)·M + m`.
    pub candidates: Tensor<S>,
    /// For anchor row `t·B + b`, the candidates showing the same step.
    pub positives: Vec<Vec<usize>>,
}

impl<S: Scalar> ContrastiveBatch<S> {
    pub fn len(&self) -> usize {
        self.candidates.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl WorldModel {
    fn check_batch(&self, batch: &EpisodeBatch) -> Result<()> {
        let c = &self.config;
        let l = &batch.layout;
        if l.views != c.views || l.height != c.image_size || l.width != c.image_size || l.action_dim != c.action_dim {
            return Err(invalid(format!(
                "batch layout {l:?} does not match model views={} image={} actions={}",
                c.views, c.image_size, c.action_dim
            )));
        }
        Ok(())
    }

    /// Crops of model view `m` for sequence `b`, step `t`, at one offset
    /// shared by all stacked channels.
    fn push_view_crop(&self, batch: &EpisodeBatch, b: usize, t: usize, channels: &[usize], ox: usize, oy: usize, out: &mut Vec<impl Scalar>) {
        let c = &self.config;
        for &v in channels {
            crop_into(batch.image(b, t, v), c.image_size, c.crop_size, ox, oy, out);
        }
    }

    /// Random-crop (or, with `augment == false`, center-crop) model inputs.
    pub fn observations<S: Scalar>(&self, batch: &EpisodeBatch, augment: bool, rng: &mut impl Rng) -> Result<Observations<S>> {
        self.check_batch(batch)?;
        let c = &self.config;
        let channels = c.channels();
        let (bn, ln, m) = (batch.batch, batch.length, channels.len());
        let mut post = Vec::with_capacity(ln * m * bn * c.input_dim());
        for t in 0..ln {
            for ch in &channels {
                for b in 0..bn {
                    let (ox, oy) = self.offset(augment, rng);
                    self.push_view_crop(batch, b, t, ch, ox, oy, &mut post);
                }
            }
        }
        let mut actions = Vec::with_capacity(ln * bn * c.action_dim);
        let mut rewards = Vec::with_capacity(ln * bn);
        let mut target = Vec::with_capacity(ln * bn * c.views * c.crop_len());
        let center = c.center_offset();
        for t in 0..ln {
            for b in 0..bn {
                actions.extend(batch.action(b, t).iter().map(|&a| S::from_f64(a as f64)));
                rewards.push(S::from_f64(batch.reward(b, t) as f64));
                for v in 0..c.views {
                    crop_into(batch.image(b, t, v), c.image_size, c.crop_size, center, center, &mut target);
                }
            }
        }
        Ok(Observations {
            batch: bn,
            steps: ln,
            posterior: Tensor::new(&[ln * m * bn, c.input_dim()], post)?,
            actions: Tensor::new(&[ln * bn, c.action_dim], actions)?,
            rewards: Tensor::new(&[ln * bn, 1], rewards)?,
            recon_target: Tensor::new(&[ln * bn, c.views * c.crop_len()], target)?,
        })
    }

    fn offset(&self, augment: bool, rng: &mut impl Rng) -> (usize, usize) {
        let c = &self.config;
        if !augment {
            let center = c.center_offset();
            return (center, center);
        }
        let (lo, hi) = match c.crop_jitter {
            None => (0, c.max_offset()),
            Some(j) => (c.center_offset().saturating_sub(j), (c.center_offset() + j).min(c.max_offset())),
        };
        (rng.random_range(lo..=hi), rng.random_range(lo..=hi))
    }

    /// Independently cropped candidates of every (sequence, step, view)
    /// and, per anchor, the indices of its same-step candidates.
    pub fn build_contrastive_batch<S: Scalar>(&self, batch: &EpisodeBatch, rng: &mut impl Rng) -> Result<ContrastiveBatch<S>> {
        self.check_batch(batch)?;
        if batch.length < 2 {
            return Err(invalid(format!(
                "contrastive batch needs sequences of length >= 2, got {}",
                batch.length
            )));
        }
        let c = &self.config;
        let channels = c.channels();
        let (bn, ln, m) = (batch.batch, batch.length, channels.len());
        let mut data = Vec::with_capacity(ln * bn * m * c.input_dim());
        let mut positives = Vec::with_capacity(ln * bn);
        for t in 0..ln {
            for b in 0..bn {
                let row = t * bn + b;
                positives.push((0..m).map(|v| row * m + v).collect());
                for ch in &channels {
                    let (ox, oy) = self.offset(true, rng);
                    self.push_view_crop(batch, b, t, ch, ox, oy, &mut data);
                }
            }
        }
        Ok(ContrastiveBatch {
            candidates: Tensor::new(&[ln * bn * m, c.input_dim()], data)?,
            positives,
        })
    }

    /// Center crops of one multi-view frame as `[M, input_dim]` rows.
    pub fn frame_input<S: Scalar>(&self, views: &[Vec<u8>]) -> Result<Tensor<S>> {
        let c = &self.config;
        if views.len() != c.views || views.iter().any(|v| v.len() != c.image_size * c.image_size) {
            return Err(invalid("frame does not match the model's views or image size"));
        }
        let center = c.center_offset();
        let channels = c.channels();
        let mut out = Vec::with_capacity(channels.len() * c.input_dim());
        for ch in &channels {
            for &v in ch {
                crop_into(&views[v], c.image_size, c.crop_size, center, center, &mut out);
            }
        }
        Tensor::new(&[channels.len(), c.input_dim()], out)
    }
}
