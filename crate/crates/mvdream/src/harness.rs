//! Collect / train / evaluate loop, evaluation of saved checkpoints and
//! reconstruction dumps.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use mvdream_core::agent::{Agent, AgentParams, Controller};
use mvdream_core::checkpoint::{fnv1a64, Checkpoint};
use mvdream_core::envs::Env;
use mvdream_core::optim::AdamState;
use mvdream_core::params::ParamSet;
use mvdream_core::replay::{Episode, ReplayBuffer, ReplayLayout};
use mvdream_core::worldmodel::{train_step, RssmState, WorldModel};
use mvdream_core::{Graph, Tensor};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::io::{save_checkpoint, save_replay, Graymap};
use crate::metrics::{LossSummary, MetricsRecord, MetricsWriter};

const WORLD: &str = "world";
const ACTOR: &str = "actor";
const CRITIC: &str = "critic";
const EVAL_SALT: u64 = 0x6576_616c_7365_6564;

/// Seeds of the evaluation episodes; the same set is used at every
/// evaluation of a run.
pub fn eval_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_SALT);
    (0..n).map(|_| rng.random()).collect()
}

/// Trained networks needed to act.
pub struct PolicyView<'a> {
    pub wm: &'a WorldModel,
    pub world: &'a ParamSet<f32>,
    pub agent: &'a Agent,
    pub actor: &'a ParamSet<f32>,
}

impl PolicyView<'_> {
    /// Runs one episode with the policy's mean action plus Gaussian noise
    /// of scale `noise` (drawn from `rng`), clipped to the action bounds.
    pub fn record(
        &self,
        cfg: &ExperimentConfig,
        env: &Env,
        seed: u64,
        id: u64,
        noise: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Episode> {
        let mut controller = Controller::new(self.wm);
        let mut prev = vec![0.0; env.action_spec().dim];
        let mut failure = None;
        let ep = Episode::record(env, seed, id, cfg.episode_len, cfg.action_repeat, |_, views, _| {
            if failure.is_some() {
                return prev.clone();
            }
            match controller.act(self.wm, self.world, self.agent, self.actor, views, &prev) {
                Ok(mut a) => {
                    if noise > 0.0 {
                        for x in &mut a {
                            *x += noise * rng.sample::<f64, _>(StandardNormal);
                        }
                    }
                    prev = env.action_spec().clip(&a);
                }
                Err(e) => failure = Some(e),
            }
            prev.clone()
        });
        match failure {
            Some(e) => Err(e.into()),
            None => Ok(ep),
        }
    }

    /// Noise-free returns on each of `seeds`.
    pub fn evaluate(&self, cfg: &ExperimentConfig, env: &Env, seeds: &[u64]) -> Result<Vec<f64>> {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        seeds
            .iter()
            .map(|&s| Ok(self.record(cfg, env, s, 0, 0.0, &mut unused)?.total_reward()))
            .collect()
    }
}

fn random_episode(cfg: &ExperimentConfig, env: &Env, seed: u64, id: u64, rng: &mut ChaCha8Rng) -> Episode {
    let dim = env.action_spec().dim;
    Episode::record(env, seed, id, cfg.episode_len, cfg.action_repeat, |_, _, _| {
        (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

impl EvalSummary {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            returns,
        }
    }
}

/// Paths and final numbers of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub final_eval: Option<EvalSummary>,
    pub train_steps: u64,
}

/// Full training state of one run.
pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub env: Env,
    pub wm: WorldModel,
    pub world: ParamSet<f32>,
    pub world_adam: AdamState<f32>,
    pub agent: Agent,
    pub agent_params: AgentParams<f32>,
    pub replay: ReplayBuffer,
    rng: ChaCha8Rng,
    episodes: usize,
    train_steps: u64,
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let env = cfg.make_env();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (wm, world) = WorldModel::new::<f32>(cfg.model_config(), &mut rng)?;
        let (agent, agent_params) =
            Agent::new::<f32>(cfg.agent_config(), wm.config.feature_dim(), env.action_spec().dim, &mut rng)?;
        let layout = ReplayLayout {
            views: env.views(),
            steps: cfg.episode_len + 1,
            height: env.image_size(),
            width: env.image_size(),
            action_dim: env.action_spec().dim,
        };
        Ok(Self {
            world_adam: AdamState::new(&world),
            replay: ReplayBuffer::new(layout, cfg.replay_capacity),
            cfg,
            env,
            wm,
            world,
            agent,
            agent_params,
            rng,
            episodes: 0,
            train_steps: 0,
        })
    }

    pub fn policy(&self) -> PolicyView<'_> {
        PolicyView {
            wm: &self.wm,
            world: &self.world,
            agent: &self.agent,
            actor: &self.agent_params.actor,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(&self.cfg.to_text());
        ckpt.add_params(WORLD, &self.world);
        ckpt.add_params(ACTOR, &self.agent_params.actor);
        ckpt.add_params(CRITIC, &self.agent_params.critic);
        ckpt
    }

    /// Exploration noise for the `j`-th of `n` collected episodes.
    fn noise_at(&self, j: usize, n: usize) -> f64 {
        let c = &self.cfg;
        if n <= 1 {
            return c.expl_noise;
        }
        c.expl_noise + (c.expl_noise_final - c.expl_noise) * j as f64 / (n - 1) as f64
    }

    fn collect(&mut self, noise: Option<f64>) -> Result<Episode> {
        let seed = self.rng.random();
        let id = self.replay.peek_next_id();
        let ep = match noise {
            None => random_episode(&self.cfg, &self.env, seed, id, &mut self.rng),
            Some(sigma) => {
                let mut rng = self.rng.clone();
                let policy = PolicyView {
                    wm: &self.wm,
                    world: &self.world,
                    agent: &self.agent,
                    actor: &self.agent_params.actor,
                };
                let ep = policy.record(&self.cfg, &self.env, seed, id, sigma, &mut rng)?;
                self.rng = rng;
                ep
            }
        };
        self.replay.append(ep.clone())?;
        Ok(ep)
    }

    /// World-model and actor-critic updates; returns the mean losses.
    fn train(&mut self, steps: usize) -> mvdream_core::Result<LossSummary> {
        let mut sum = LossSummary::default();
        for _ in 0..steps {
            let batch = self.replay.sample_batch(self.cfg.batch, self.cfg.seq_len, &mut self.rng)?;
            let out = train_step(&self.wm, &mut self.world, &mut self.world_adam, &batch, &mut self.rng)?;
            let al = self.agent.update(
                &mut self.agent_params,
                &self.wm,
                &self.world,
                &out.start_deter,
                &out.start_stoch,
                &mut self.rng,
            )?;
            self.train_steps += 1;
            sum.nce += out.losses.nce;
            sum.kl += out.losses.kl;
            sum.reward += out.losses.reward;
            sum.reconstruction += out.losses.reconstruction;
            sum.total += out.losses.total;
            sum.actor += al.actor;
            sum.critic += al.critic;
            sum.imagined_return += al.mean_return;
            sum.entropy += al.entropy;
        }
        let n = steps.max(1) as f64;
        for v in [
            &mut sum.nce,
            &mut sum.kl,
            &mut sum.reward,
            &mut sum.reconstruction,
            &mut sum.total,
            &mut sum.actor,
            &mut sum.critic,
            &mut sum.imagined_return,
            &mut sum.entropy,
        ] {
            *v /= n;
        }
        Ok(sum)
    }

    fn crash(&self, out: &Path, message: String) -> HarnessError {
        let path = out.join("crash.mvwm");
        let diag = out.join("crash.json");
        let report = serde_json::json!({
            "episode": self.episodes,
            "train_steps": self.train_steps,
            "message": message,
        });
        let saved = save_checkpoint(&self.checkpoint(), &path)
            .and_then(|_| fs::write(&diag, report.to_string()).map_err(|e| HarnessError::io(&diag, e)));
        HarnessError::Diverged {
            episode: self.episodes,
            step: self.train_steps,
            message,
            checkpoint: match saved {
                Ok(()) => path.display().to_string(),
                Err(e) => format!("not written ({e})"),
            },
        }
    }

    /// Runs the whole schedule, writing metrics, timing and checkpoints
    /// into `out`.
    pub fn run(mut self, out: &Path) -> Result<TrainSummary> {
        fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
        let started = Instant::now();
        let mut metrics = MetricsWriter::create(out)?;
        metrics.write_config(&self.cfg)?;
        let ckpt_path = out.join("checkpoint.mvwm");
        let total = self.cfg.total_episodes();
        let prefill = self.cfg.prefill_episodes;
        let seeds = eval_seeds(self.cfg.seed, self.cfg.eval_episodes);
        let mut final_eval = None;

        for e in 0..total {
            let is_prefill = e < prefill;
            let noise = (!is_prefill).then(|| self.noise_at(e - prefill, total - prefill));
            let ep = self.collect(noise)?;
            let losses = if is_prefill {
                None
            } else {
                match self.train(self.cfg.train_steps_per_episode()) {
                    Ok(l) => Some(l),
                    Err(mvdream_core::Error::NonFinite(m)) => return Err(self.crash(out, m)),
                    Err(err) => return Err(err.into()),
                }
            };
            self.episodes = e + 1;
            let done = self.episodes;
            let eval = if done % self.cfg.eval_every.max(1) == 0 || done == total {
                let returns = self.policy().evaluate(&self.cfg, &self.env, &seeds)?;
                Some(EvalSummary::from_returns(returns))
            } else {
                None
            };
            if done % self.cfg.checkpoint_every.max(1) == 0 || done == total {
                save_checkpoint(&self.checkpoint(), &ckpt_path)?;
            }
            let rec = MetricsRecord {
                step: (done * self.cfg.episode_env_steps()) as u64,
                episode: done as u64,
                seed: self.cfg.seed,
                train_steps: self.train_steps,
                prefill: is_prefill,
                train_return: ep.total_reward(),
                expl_noise: noise,
                losses,
                eval_return: eval.as_ref().map(|s| s.mean),
                eval_returns: eval.as_ref().map(|s| s.returns.clone()),
            };
            metrics.write_episode(rec, started.elapsed().as_secs_f64())?;
            if eval.is_some() {
                final_eval = eval;
            }
        }
        if self.cfg.save_replay {
            save_replay(&self.replay, &out.join("replay.mvrb"))?;
        }
        Ok(TrainSummary {
            metrics: metrics.path().to_path_buf(),
            checkpoint: ckpt_path,
            final_eval,
            train_steps: self.train_steps,
        })
    }
}

pub fn run_training(cfg: &ExperimentConfig, out: &Path) -> Result<TrainSummary> {
    Trainer::new(cfg.clone())?.run(out)
}

/// Networks restored from a checkpoint.
pub struct Restored {
    pub wm: WorldModel,
    pub world: ParamSet<f32>,
    pub agent: Agent,
    pub actor: ParamSet<f32>,
}

impl Restored {
    pub fn policy(&self) -> PolicyView<'_> {
        PolicyView {
            wm: &self.wm,
            world: &self.world,
            agent: &self.agent,
            actor: &self.actor,
        }
    }
}

fn has_decoder(ckpt: &Checkpoint) -> bool {
    ckpt.has_prefix(&format!("{WORLD}/decoder"))
}

/// Rebuilds the networks of `cfg` and loads their weights from `ckpt`,
/// after checking that `ckpt` was written under the same config.
pub fn restore(ckpt: &Checkpoint, cfg: &ExperimentConfig) -> Result<Restored> {
    let expected = fnv1a64(cfg.to_text().as_bytes());
    if ckpt.config_hash != expected {
        return Err(HarnessError::Checkpoint(format!(
            "config hash {:016x} of the checkpoint does not match {:016x} of the given config",
            ckpt.config_hash, expected
        )));
    }
    let trainer = Trainer::new(cfg.clone())?;
    let (wm, mut world, agent, mut actor) = (trainer.wm, trainer.world, trainer.agent, trainer.agent_params.actor);
    if has_decoder(ckpt) {
        ckpt.load_params(WORLD, &mut world)?;
    } else {
        // acting does not need the decoder
        for id in wm.non_decoder_params(world.len()) {
            let key = format!("{WORLD}/{}", world.name(id));
            let t = ckpt
                .get(&key)
                .filter(|t| t.shape() == world.tensor(id).shape())
                .ok_or_else(|| HarnessError::Checkpoint(format!("missing or misshapen block {key}")))?;
            *world.tensor_mut(id) = t.clone();
        }
    }
    ckpt.load_params(ACTOR, &mut actor)?;
    Ok(Restored { wm, world, agent, actor })
}

/// Noise-free evaluation of a checkpoint on `n` episodes seeded from the
/// config seed.
pub fn run_eval(ckpt: &Checkpoint, cfg: &ExperimentConfig, n: usize) -> Result<EvalSummary> {
    let r = restore(ckpt, cfg)?;
    let returns = r.policy().evaluate(cfg, &cfg.make_env(), &eval_seeds(cfg.seed, n))?;
    Ok(EvalSummary::from_returns(returns))
}

/// One frame of a reconstruction dump.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpedFrame {
    pub step: usize,
    /// Environment state at this frame.
    pub state: mvdream_core::envs::EnvState,
    pub observed: Vec<Graymap>,
    pub reconstructed: Vec<Graymap>,
}

/// Runs one noise-free episode from a checkpoint and reconstructs the
/// center crop of every view from the filtered global latent of the first
/// `n_frames` frames. Writes `{step}_{view}_{obs|rec}.pgm` files (views
/// numbered from 1) into `out` when given.
pub fn dump_reconstructions(
    ckpt: &Checkpoint,
    cfg: &ExperimentConfig,
    n_frames: usize,
    out: Option<&Path>,
) -> Result<Vec<DumpedFrame>> {
    if !has_decoder(ckpt) {
        return Err(HarnessError::Checkpoint(
            "checkpoint has no decoder parameters; reconstructions need the decoder".into(),
        ));
    }
    let r = restore(ckpt, cfg)?;
    let env = cfg.make_env();
    let seed = eval_seeds(cfg.seed, 1)[0];
    let ep = r.policy().record(cfg, &env, seed, 0, 0.0, &mut ChaCha8Rng::seed_from_u64(0))?;
    let states = replay_states(cfg, &env, &ep);

    let mc = &r.wm.config;
    let (size, crop, views) = (mc.image_size, mc.crop_size, mc.views);
    let frame_len = views * size * size;
    let adim = env.action_spec().dim;
    let mut deter = Tensor::<f32>::zeros(&[1, mc.deter]);
    let mut stoch = Tensor::<f32>::zeros(&[1, mc.latent_dim()]);
    let mut frames = Vec::new();
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    for t in 0..n_frames.min(ep.len()) {
        let images: Vec<Vec<u8>> = ep.images[t * frame_len..(t + 1) * frame_len]
            .chunks(size * size)
            .map(|c| c.to_vec())
            .collect();
        let g = Graph::new();
        let vars = r.world.bind(&g, false);
        let mut state = RssmState {
            deter: g.constant(&deter),
            stoch: mvdream_core::distributions::LatentSample {
                value: g.constant(&stoch),
                pathwise: false,
            },
        };
        if t > 0 {
            let a = g.constant_vec(&[1, adim], ep.actions[t * adim..(t + 1) * adim].to_vec())?;
            state.deter = r.wm.recurrent_step(&g, &vars, state, a)?;
        }
        let crops = g.constant(&r.wm.frame_input::<f32>(&images)?);
        let post = r.wm.posterior(&g, &vars, state.deter, crops)?;
        state.stoch.value = post.mode(&g)?;
        let feat = r.wm.features(&g, state)?;
        let recon = g.value(r.wm.decode(&g, &vars, feat)?);
        deter = g.value(state.deter);
        stoch = g.value(state.stoch.value);

        let observed: Vec<Graymap> = images
            .iter()
            .map(|img| Graymap {
                width: size,
                height: size,
                pixels: img.clone(),
            })
            .collect();
        let reconstructed: Vec<Graymap> = recon
            .data()
            .chunks(crop * crop)
            .map(|c| Graymap::from_unit(crop, crop, c))
            .collect();
        if let Some(dir) = out {
            for (v, (o, rec)) in observed.iter().zip(&reconstructed).enumerate() {
                o.save(&dir.join(format!("{t}_{}_obs.pgm", v + 1)))?;
                rec.save(&dir.join(format!("{t}_{}_rec.pgm", v + 1)))?;
            }
        }
        frames.push(DumpedFrame {
            step: t,
            state: states[t],
            observed,
            reconstructed,
        });
    }
    Ok(frames)
}

/// Re-simulates the recorded actions to recover the true state of every
/// record of `ep`.
fn replay_states(cfg: &ExperimentConfig, env: &Env, ep: &Episode) -> Vec<mvdream_core::envs::EnvState> {
    let env = env.with_max_steps(cfg.episode_env_steps());
    let adim = env.action_spec().dim;
    let (mut s, _) = env.reset(ep.seed);
    let mut out = vec![s];
    for t in 1..ep.len() {
        let a: Vec<f64> = ep.actions[t * adim..(t + 1) * adim].iter().map(|&x| x as f64).collect();
        s = env.step_repeat(&s, &a, cfg.action_repeat).0;
        out.push(s);
    }
    out
}

/// Writes `frames` oracle-policy frames of every view as graymaps.
pub fn env_demo(cfg: &ExperimentConfig, frames: usize, out: &Path) -> Result<f64> {
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let env = cfg.make_env().with_max_steps(cfg.episode_env_steps());
    let (mut s, mut frame) = env.reset(cfg.seed);
    let mut total = 0.0;
    for t in 0..frames {
        for (v, img) in frame.views.iter().enumerate() {
            Graymap::from_unit(img.width, img.height, &img.pixels).save(&out.join(format!("{t}_{}_obs.pgm", v + 1)))?;
        }
        if t + 1 == frames {
            break;
        }
        let a = env.oracle_policy(&s);
        (s, frame) = env.step_repeat(&s, &a, cfg.action_repeat);
        total += frame.reward;
    }
    Ok(total)
}

/// Finite-difference check of the composite world-model objective at
/// 64-bit precision on a short batch of random-policy episodes. Non-decoder
/// elements are probed against `total` and decoder elements against
/// `total + reconstruction`, matching what each group is trained on; the
/// probes are split evenly between the two groups. KL balancing is turned
/// off: it only reroutes gradient, which finite differences cannot see.
pub fn composite_grad_check(
    cfg: &ExperimentConfig,
    probes: usize,
    tol: f64,
) -> Result<mvdream_core::gradcheck::GradCheckReport> {
    use mvdream_core::gradcheck::check_param_gradients;

    let mut mc = cfg.model_config();
    mc.balance_kl = false;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (wm, ps) = WorldModel::new::<f64>(mc, &mut rng)?;
    let env = cfg.make_env();
    let mut trainer_cfg = cfg.clone();
    trainer_cfg.episode_len = 4;
    let layout = ReplayLayout {
        views: env.views(),
        steps: trainer_cfg.episode_len + 1,
        height: env.image_size(),
        width: env.image_size(),
        action_dim: env.action_spec().dim,
    };
    let mut replay = ReplayBuffer::new(layout, 2);
    for id in 0..2 {
        let seed = rng.random();
        replay.append(random_episode(&trainer_cfg, &env, seed, id, &mut rng))?;
    }
    let batch = replay.sample_batch(2, 3, &mut rng)?;
    let obs = wm.observations::<f64>(&batch, true, &mut rng)?;
    let contrast = wm.build_contrastive_batch::<f64>(&batch, &mut rng)?;
    let groups = [wm.non_decoder_params(ps.len()), wm.decoder_params.clone().collect()];
    let noise_seed: u64 = rng.random();
    let mut report = mvdream_core::gradcheck::GradCheckReport { tol, entries: Vec::new() };
    for (with_recon, group) in [false, true].into_iter().zip(&groups) {
        let count = if with_recon { probes / 2 } else { probes - probes / 2 };
        let picks: Vec<(usize, usize)> = (0..count)
            .map(|_| {
                let p = group[rng.random_range(0..group.len())];
                (p, rng.random_range(0..ps.tensor(p).len()))
            })
            .collect();
        let part = check_param_gradients(
            |g, vars| {
                let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
                let lv = wm.loss(g, vars, &obs, &contrast, &mut noise)?;
                if with_recon {
                    g.add(lv.total, lv.reconstruction)
                } else {
                    Ok(lv.total)
                }
            },
            ps.tensors(),
            &picks,
            tol,
            &[],
        )?;
        report.entries.extend(part.entries);
    }
    Ok(report)
}
