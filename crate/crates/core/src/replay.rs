//! Episode storage, uniform sequence sampling and the `MVRB` byte format.
//!
//! Layout of an encoded buffer (all integers and floats little-endian):
//!
//! ```text
//! "MVRB"            4 bytes
//! version           u16   (= 1)
//! views             u16
//! steps             u32   records per episode
//! height, width     u16, u16
//! action_dim        u16
//! capacity          u32
//! next_id           u64
//! episode_count     u32
//! per episode:
//!   id, seed        u64, u64
//!   n_image_bytes   u32, then n bytes      (step, view, row, col order)
//!   n_actions       u32, then n × f32      (step, dim)
//!   n_rewards       u32, then n × f32
//! ```
//!
//! Pixels are stored quantized to 8 bits: `q = round(255·p)`, `p = q/255`.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::envs::{Env, EnvState, Image};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MVRB";
pub const VERSION: u16 = 1;

pub fn quantize(p: f32) -> u8 {
    libm::roundf(p.clamp(0.0, 1.0) * 255.0) as u8
}

pub fn dequantize(q: u8) -> f32 {
    q as f32 / 255.0
}

/// Per-episode array extents shared by every episode in a buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayLayout {
    pub views: usize,
    pub steps: usize,
    pub height: usize,
    pub width: usize,
    pub action_dim: usize,
}

impl ReplayLayout {
    pub fn image_len(&self) -> usize {
        self.height * self.width
    }

    pub fn frame_len(&self) -> usize {
        self.views * self.image_len()
    }

    /// Encoded size of one episode block.
    pub fn episode_bytes(&self) -> usize {
        16 + 12 + self.steps * (self.frame_len() + 4 * self.action_dim + 4)
    }
}

/// One episode. Record `t` holds the views observed at `t`, the action that
/// led into them and the reward received on that transition; record 0 comes
/// from the reset and carries a zero action and reward.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: u64,
    pub seed: u64,
    pub images: Vec<u8>,
    pub actions: Vec<f32>,
    pub rewards: Vec<f32>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().map(|&r| r as f64).sum()
    }

    fn check(&self, layout: &ReplayLayout) -> Result<()> {
        let t = layout.steps;
        if self.rewards.len() != t
            || self.actions.len() != t * layout.action_dim
            || self.images.len() != t * layout.frame_len()
        {
            return Err(Error::Format(format!(
                "episode {} has {} rewards, {} actions, {} image bytes; layout expects {} steps of {} actions and {} bytes",
                self.id,
                self.rewards.len(),
                self.actions.len(),
                self.images.len(),
                t,
                layout.action_dim,
                layout.frame_len()
            )));
        }
        Ok(())
    }

    /// Runs one episode of `steps` agent steps, each repeating the policy's
    /// action `repeat` times, and records `steps + 1` frames. The policy sees
    /// the quantized views that will be stored.
    pub fn record<P>(env: &Env, seed: u64, id: u64, steps: usize, repeat: usize, mut policy: P) -> Self
    where
        P: FnMut(&EnvState, &[Vec<u8>], usize) -> Vec<f64>,
    {
        let env = env.with_max_steps(steps * repeat.max(1));
        let a = env.action_spec().dim;
        let (mut state, frame) = env.reset(seed);
        let mut views: Vec<Vec<u8>> = frame.views.iter().map(quantize_image).collect();
        let mut ep = Episode {
            id,
            seed,
            images: views.concat(),
            actions: vec![0.0; a],
            rewards: vec![0.0],
        };
        for t in 0..steps {
            let action = env.action_spec().clip(&policy(&state, &views, t));
            let (next, frame) = env.step_repeat(&state, &action, repeat);
            state = next;
            views = frame.views.iter().map(quantize_image).collect();
            ep.images.extend(views.iter().flatten());
            ep.actions.extend(action.iter().map(|&x| x as f32));
            ep.rewards.push(frame.reward as f32);
        }
        ep
    }
}

pub fn quantize_image(img: &Image) -> Vec<u8> {
    img.pixels.iter().map(|&p| quantize(p)).collect()
}

/// `B` contiguous sequences of `L` records, batch-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBatch {
    pub batch: usize,
    pub length: usize,
    pub layout: ReplayLayout,
    /// `[B, L, V, H, W]`
    pub images: Vec<u8>,
    /// `[B, L, A]`
    pub actions: Vec<f32>,
    /// `[B, L]`
    pub rewards: Vec<f32>,
    /// `(episode id, start offset)` of each sequence.
    pub origins: Vec<(u64, usize)>,
}

impl EpisodeBatch {
    /// Quantized pixels of sequence `b`, step `t`, view `v`.
    pub fn image(&self, b: usize, t: usize, v: usize) -> &[u8] {
        let n = self.layout.image_len();
        let start = ((b * self.length + t) * self.layout.views + v) * n;
        &self.images[start..start + n]
    }

    pub fn action(&self, b: usize, t: usize) -> &[f32] {
        let a = self.layout.action_dim;
        let start = (b * self.length + t) * a;
        &self.actions[start..start + a]
    }

    pub fn reward(&self, b: usize, t: usize) -> f32 {
        self.rewards[b * self.length + t]
    }
}

/// FIFO episode store.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    layout: ReplayLayout,
    capacity: usize,
    next_id: u64,
    episodes: VecDeque<Episode>,
}

impl ReplayBuffer {
    pub fn new(layout: ReplayLayout, capacity: usize) -> Self {
        Self {
            layout,
            capacity: capacity.max(1),
            next_id: 0,
            episodes: VecDeque::new(),
        }
    }

    pub fn layout(&self) -> &ReplayLayout {
        &self.layout
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    /// Id that the next [`ReplayBuffer::next_episode_id`] call returns.
    pub fn peek_next_id(&self) -> u64 {
        self.next_id
    }

    pub fn next_episode_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    /// Stores an episode, evicting the oldest beyond capacity.
    pub fn append(&mut self, episode: Episode) -> Result<()> {
        episode.check(&self.layout)?;
        self.next_id = self.next_id.max(episode.id + 1);
        self.episodes.push_back(episode);
        while self.episodes.len() > self.capacity {
            self.episodes.pop_front();
        }
        Ok(())
    }

    /// Samples `batch` sequences of `length` records uniformly over all
    /// valid `(episode, offset)` pairs.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch: usize, length: usize, rng: &mut R) -> Result<EpisodeBatch> {
        let t = self.layout.steps;
        if self.episodes.is_empty() || length == 0 || length > t {
            return Err(Error::NotReady(format!(
                "{} episodes of {} steps stored, sequences of {} requested",
                self.episodes.len(),
                t,
                length
            )));
        }
        let per_episode = t - length + 1;
        let total = self.episodes.len() * per_episode;
        let l = &self.layout;
        let mut out = EpisodeBatch {
            batch,
            length,
            layout: *l,
            images: Vec::with_capacity(batch * length * l.frame_len()),
            actions: Vec::with_capacity(batch * length * l.action_dim),
            rewards: Vec::with_capacity(batch * length),
            origins: Vec::with_capacity(batch),
        };
        for _ in 0..batch {
            let k = rng.random_range(0..total);
            let (e, offset) = (k / per_episode, k % per_episode);
            let ep = &self.episodes[e];
            let fl = l.frame_len();
            out.images
                .extend_from_slice(&ep.images[offset * fl..(offset + length) * fl]);
            out.actions.extend_from_slice(
                &ep.actions[offset * l.action_dim..(offset + length) * l.action_dim],
            );
            out.rewards
                .extend_from_slice(&ep.rewards[offset..offset + length]);
            out.origins.push((ep.id, offset));
        }
        Ok(out)
    }

    pub fn byte_size(&self) -> usize {
        header_len() + self.episodes.len() * self.layout.episode_bytes()
    }

    pub fn encode(&self) -> Vec<u8> {
        let l = &self.layout;
        let mut w = Vec::with_capacity(self.byte_size());
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        w.extend_from_slice(&(l.views as u16).to_le_bytes());
        w.extend_from_slice(&(l.steps as u32).to_le_bytes());
        w.extend_from_slice(&(l.height as u16).to_le_bytes());
        w.extend_from_slice(&(l.width as u16).to_le_bytes());
        w.extend_from_slice(&(l.action_dim as u16).to_le_bytes());
        w.extend_from_slice(&(self.capacity as u32).to_le_bytes());
        w.extend_from_slice(&self.next_id.to_le_bytes());
        w.extend_from_slice(&(self.episodes.len() as u32).to_le_bytes());
        for ep in &self.episodes {
            w.extend_from_slice(&ep.id.to_le_bytes());
            w.extend_from_slice(&ep.seed.to_le_bytes());
            w.extend_from_slice(&(ep.images.len() as u32).to_le_bytes());
            w.extend_from_slice(&ep.images);
            w.extend_from_slice(&(ep.actions.len() as u32).to_le_bytes());
            ep.actions.iter().for_each(|v| w.extend_from_slice(&v.to_le_bytes()));
            w.extend_from_slice(&(ep.rewards.len() as u32).to_le_bytes());
            ep.rewards.iter().for_each(|v| w.extend_from_slice(&v.to_le_bytes()));
        }
        w
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a replay buffer file (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported replay format version {version} (expected {VERSION})"
            )));
        }
        let layout = ReplayLayout {
            views: r.u16()? as usize,
            steps: r.u32()? as usize,
            height: r.u16()? as usize,
            width: r.u16()? as usize,
            action_dim: r.u16()? as usize,
        };
        let capacity = r.u32()? as usize;
        let next_id = r.u64()?;
        let count = r.u32()? as usize;
        let mut buf = ReplayBuffer::new(layout, capacity);
        for _ in 0..count {
            let id = r.u64()?;
            let seed = r.u64()?;
            let n = r.u32()? as usize;
            let images = r.take(n)?.to_vec();
            let n = r.u32()? as usize;
            let actions = r.f32s(n)?;
            let n = r.u32()? as usize;
            let rewards = r.f32s(n)?;
            let ep = Episode {
                id,
                seed,
                images,
                actions,
                rewards,
            };
            ep.check(&layout)?;
            buf.episodes.push_back(ep);
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        buf.next_id = next_id;
        Ok(buf)
    }
}

fn header_len() -> usize {
    4 + 2 + 2 + 4 + 2 + 2 + 2 + 4 + 8 + 4
}

/// Little-endian cursor over a byte slice; every read is bounds-checked.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!(
                "truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
