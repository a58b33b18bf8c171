//! Fine-tuning trajectories of the bias vector and their binary store.
//!
//! Store layout (little-endian):
//!
//! ```text
//! magic "GFTR", u32 version
//! u8 split (0 train, 1 val), u32 |θ|, u32 T, u64 layout hash
//! u8 optimizer (0 adam, 1 plain-gd), f64 lr, f64 beta1, f64 beta2, f64 eps, f64 perturbation std
//! u8 has_stats, then μ, σ_norm, drift scale (each f64 × |θ|) when set
//! u64 record count
//! record: u64 episode id, u64 episode offset, u64 init seed, f64 std,
//!         f64 × (T+1)·|θ| points, f64 × (T+1) losses
//! ```

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{self, ByteReader, ByteWriter};
use crate::episodes::{encode_episodes, sample_episode, DomainSpec, Episode, Protocol, Split};
use crate::error::{Error, Result};
use crate::model::{support_loss, support_loss_grad, Backbone, BiasLayout, TaskBatch};
use crate::optim::{AdamConfig, AdamState};
use crate::rng;

pub const MAGIC: &[u8; 4] = b"GFTR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Adam,
    PlainGd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub steps: usize,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub perturb_std: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        SimConfig {
            steps: 10,
            optimizer: Optimizer::Adam,
            lr: 1e-2,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            perturb_std: 0.2,
        }
    }
}

impl SimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::InvalidArgument("trajectory needs at least one step".into()));
        }
        if !(self.lr >= 0.0) || !(self.perturb_std >= 0.0) {
            return Err(Error::InvalidArgument("lr and perturbation std must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub episode_id: u64,
    pub episode_offset: u64,
    pub init_seed: u64,
    pub perturb_std: f64,
    /// `(T+1) × |θ|`, row k is θ_k.
    pub points: Vec<f64>,
    /// Support loss at each θ_k.
    pub losses: Vec<f64>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.losses.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.points.len() / self.losses.len()
    }

    pub fn point(&self, k: usize) -> &[f64] {
        let p = self.dim();
        &self.points[k * p..(k + 1) * p]
    }

    pub fn first(&self) -> &[f64] {
        self.point(0)
    }

    pub fn last(&self) -> &[f64] {
        self.point(self.steps())
    }
}

/// `θ_init + ε`, ε i.i.d. `N(0, std²)` from the stream keyed by `seed`.
pub fn perturb_init(theta_init: &[f64], std: f64, seed: u64) -> Result<Vec<f64>> {
    if !(std >= 0.0) {
        return Err(Error::InvalidArgument(format!("perturbation std must be >= 0, got {std}")));
    }
    if std == 0.0 {
        return Ok(theta_init.to_vec());
    }
    let mut r = rng::stream(&[seed, rng::tag("perturb")]);
    Ok(theta_init.iter().map(|t| t + std * rng::gaussian(&mut r)).collect())
}

/// Runs `cfg.steps` optimizer updates against an arbitrary loss oracle;
/// returns the T+1 points (flattened) and the loss at each. The final point
/// is scored with `loss_only`, so exactly T gradients are taken.
pub fn simulate(
    oracle: &mut dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    loss_only: &mut dyn FnMut(&[f64]) -> Result<f64>,
    theta0: &[f64],
    cfg: &SimConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    let p = theta0.len();
    let mut theta = theta0.to_vec();
    let mut points = Vec::with_capacity((cfg.steps + 1) * p);
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let mut state = AdamState::for_sizes([p]);
    let adam = cfg.adam();
    let diverged = |step: usize, e: Error| Error::Diverged {
        step,
        detail: e.to_string(),
    };
    for k in 0..cfg.steps {
        let (loss, grad) = oracle(&theta).map_err(|e| diverged(k, e))?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step: k,
                detail: format!("non-finite support loss {loss}"),
            });
        }
        points.extend_from_slice(&theta);
        losses.push(loss);
        match cfg.optimizer {
            Optimizer::PlainGd => theta.iter_mut().zip(&grad).for_each(|(t, g)| *t -= cfg.lr * g),
            Optimizer::Adam if cfg.lr == 0.0 => {}
            Optimizer::Adam => state.update(&adam, &mut [(&mut theta[..], &grad[..])])?,
        }
    }
    let last = loss_only(&theta).map_err(|e| diverged(cfg.steps, e))?;
    if !last.is_finite() || theta.iter().any(|x| !x.is_finite()) {
        return Err(Error::Diverged {
            step: cfg.steps,
            detail: format!("non-finite support loss {last}"),
        });
    }
    points.extend_from_slice(&theta);
    losses.push(last);
    Ok((points, losses))
}

pub fn simulate_trajectory(
    bb: &Backbone,
    layout: &BiasLayout,
    support: &TaskBatch,
    theta0: &[f64],
    cfg: &SimConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    simulate(
        &mut |t| support_loss_grad(bb, layout, t, support),
        &mut |t| support_loss(bb, layout, t, support),
        theta0,
        cfg,
    )
}

/// Per-coordinate standardization of θ and of drift targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Per-coordinate std of θ_T − θ_0.
    pub drift_scale: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl NormStats {
    pub fn standardize(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((t, m), s)| (t - m) / s)
            .collect()
    }

    pub fn unstandardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((z, m), s)| z * s + m)
            .collect()
    }
}

fn floored_std(centered_sq: &[f64], n: f64) -> Vec<f64> {
    centered_sq.iter().map(|q| (q / n).sqrt().max(STD_FLOOR)).collect()
}

pub fn compute_normalization_stats(trajs: &[Trajectory]) -> Result<NormStats> {
    let first = trajs.first().ok_or(Error::Empty("trajectory store"))?;
    let p = first.dim();
    let mut mean = vec![0.0; p];
    let mut dmean = vec![0.0; p];
    let mut count = 0.0;
    for t in trajs {
        for k in 0..=t.steps() {
            mean.iter_mut().zip(t.point(k)).for_each(|(m, x)| *m += x);
            count += 1.0;
        }
        for i in 0..p {
            dmean[i] += t.last()[i] - t.first()[i];
        }
    }
    let n = trajs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= count);
    dmean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; p];
    let mut dvar = vec![0.0; p];
    for t in trajs {
        for k in 0..=t.steps() {
            for (i, x) in t.point(k).iter().enumerate() {
                var[i] += (x - mean[i]).powi(2);
            }
        }
        for i in 0..p {
            dvar[i] += (t.last()[i] - t.first()[i] - dmean[i]).powi(2);
        }
    }
    Ok(NormStats {
        std: floored_std(&var, count),
        drift_scale: floored_std(&dvar, n),
        mean,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStore {
    pub split: Split,
    pub dim: usize,
    pub steps: usize,
    pub layout_hash: u64,
    pub sim: SimConfig,
    pub stats: Option<NormStats>,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryStore {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn stats(&self) -> Result<&NormStats> {
        self.stats.as_ref().ok_or(Error::MissingArtifact("normalization stats".into()))
    }

    pub fn compatible_with(&self, other: &TrajectoryStore) -> Result<()> {
        if self.layout_hash != other.layout_hash {
            return Err(Error::LayoutMismatch {
                expected: self.layout_hash,
                found: other.layout_hash,
            });
        }
        if self.steps != other.steps || self.dim != other.dim {
            return Err(Error::Incompatible(format!(
                "stores differ in shape: T {} vs {}, |θ| {} vs {}",
                self.steps, other.steps, self.dim, other.dim
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u8(match self.split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        });
        w.u32(self.dim as u32);
        w.u32(self.steps as u32);
        w.u64(self.layout_hash);
        w.u8(match self.sim.optimizer {
            Optimizer::Adam => 0,
            Optimizer::PlainGd => 1,
        });
        for v in [self.sim.lr, self.sim.beta1, self.sim.beta2, self.sim.eps, self.sim.perturb_std] {
            w.f64(v);
        }
        match &self.stats {
            Some(s) => {
                w.u8(1);
                w.f64s(&s.mean);
                w.f64s(&s.std);
                w.f64s(&s.drift_scale);
            }
            None => w.u8(0),
        }
        w.u64(self.trajectories.len() as u64);
        for t in &self.trajectories {
            w.u64(t.episode_id);
            w.u64(t.episode_offset);
            w.u64(t.init_seed);
            w.f64(t.perturb_std);
            w.f64s(&t.points);
            w.f64s(&t.losses);
        }
        w.buf
    }

    /// Decodes and, when `expected_layout` is given, checks the layout hash.
    pub fn decode(bytes: &[u8], expected_layout: Option<u64>) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                expected: VERSION,
                found: version,
            });
        }
        let at = r.offset();
        let split = match r.u8()? {
            0 => Split::Train,
            1 => Split::Val,
            2 => Split::Test,
            s => {
                return Err(Error::Malformed {
                    offset: at,
                    detail: format!("split tag {s}"),
                })
            }
        };
        let dim = r.u32()? as usize;
        let steps = r.u32()? as usize;
        let layout_hash = r.u64()?;
        if let Some(expected) = expected_layout {
            if expected != layout_hash {
                return Err(Error::LayoutMismatch {
                    expected,
                    found: layout_hash,
                });
            }
        }
        let at = r.offset();
        let optimizer = match r.u8()? {
            0 => Optimizer::Adam,
            1 => Optimizer::PlainGd,
            o => {
                return Err(Error::Malformed {
                    offset: at,
                    detail: format!("optimizer tag {o}"),
                })
            }
        };
        let sim = SimConfig {
            steps,
            optimizer,
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
            perturb_std: r.f64()?,
        };
        let stats = match r.u8()? {
            0 => None,
            _ => Some(NormStats {
                mean: r.f64s(dim)?,
                std: r.f64s(dim)?,
                drift_scale: r.f64s(dim)?,
            }),
        };
        let count = r.u64()?;
        let mut trajectories = Vec::with_capacity(count.min(1 << 20) as usize);
        for _ in 0..count {
            trajectories.push(Trajectory {
                episode_id: r.u64()?,
                episode_offset: r.u64()?,
                init_seed: r.u64()?,
                perturb_std: r.f64()?,
                points: r.f64s((steps + 1) * dim)?,
                losses: r.f64s(steps + 1)?,
            });
        }
        if r.remaining() != 0 {
            return Err(Error::Malformed {
                offset: r.offset(),
                detail: format!("{} trailing bytes", r.remaining()),
            });
        }
        Ok(TrajectoryStore {
            split,
            dim,
            steps,
            layout_hash,
            sim,
            stats,
            trajectories,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.encode())
    }

    pub fn load(path: &Path, expected_layout: Option<u64>) -> Result<Self> {
        Self::decode(&binio::read_file(path)?, expected_layout)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectConfig {
    pub episodes_per_domain: usize,
    pub inits_per_episode: usize,
    pub val_trajectories: usize,
    pub sim: SimConfig,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            episodes_per_domain: 100,
            inits_per_episode: 10,
            val_trajectories: 80,
            sim: SimConfig::default(),
        }
    }
}

/// Trajectory stores plus the episodes they reference.
#[derive(Debug, Clone)]
pub struct TrajectoryDataset {
    pub train: TrajectoryStore,
    pub val: TrajectoryStore,
    pub train_episodes: Vec<Episode>,
    pub val_episodes: Vec<Episode>,
}

impl TrajectoryDataset {
    /// Episode lookup by id across both splits.
    pub fn episode_index(&self) -> HashMap<u64, &Episode> {
        self.train_episodes
            .iter()
            .chain(&self.val_episodes)
            .map(|e| (e.id, e))
            .collect()
    }
}

fn run_split(
    bb: &Backbone,
    layout: &BiasLayout,
    theta_init: &[f64],
    episodes: &[Episode],
    inits: usize,
    limit: usize,
    sim: &SimConfig,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let (_, offsets) = encode_episodes(episodes, bb.input_dim())?;
    let mut out = Vec::new();
    for (ep, &offset) in episodes.iter().zip(&offsets) {
        let support = TaskBatch::support(ep)?;
        for i in 0..inits {
            if out.len() == limit {
                return Ok(out);
            }
            let init_seed = rng::derive_seed(&[seed, ep.id, i as u64]);
            let theta0 = perturb_init(theta_init, sim.perturb_std, init_seed)?;
            let (points, losses) = simulate_trajectory(bb, layout, &support, &theta0, sim).map_err(|e| match e {
                Error::Diverged { step, detail } => Error::Diverged {
                    step,
                    detail: format!("episode {} init {i}: {detail}", ep.id),
                },
                other => other,
            })?;
            out.push(Trajectory {
                episode_id: ep.id,
                episode_offset: offset,
                init_seed,
                perturb_std: sim.perturb_std,
                points,
                losses,
            });
        }
    }
    Ok(out)
}

/// Simulates `episodes_per_domain × |domains| × inits` training trajectories
/// on train-split episodes and a validation store from val-split episodes.
pub fn collect_dataset(
    bb: &Backbone,
    layout: &BiasLayout,
    theta_init: &[f64],
    domains: &[DomainSpec],
    cfg: &CollectConfig,
    seed: u64,
) -> Result<TrajectoryDataset> {
    if cfg.inits_per_episode < 1 {
        return Err(Error::InvalidArgument("inits_per_episode must be >= 1".into()));
    }
    if domains.is_empty() || cfg.episodes_per_domain == 0 {
        return Err(Error::Empty("trajectory sources"));
    }
    layout.check(bb, theta_init)?;
    let ep_seed = rng::derive_seed(&[seed, rng::tag("trajectory-episodes")]);
    let init_seed = rng::derive_seed(&[seed, rng::tag("trajectory-inits")]);
    let train_episodes: Vec<Episode> = domains
        .iter()
        .flat_map(|d| (0..cfg.episodes_per_domain as u64).map(move |i| (d, i)))
        .map(|(d, i)| sample_episode(d, Protocol::various(), Split::Train, i, ep_seed))
        .collect();
    let n_val_eps = cfg.val_trajectories.div_ceil(cfg.inits_per_episode);
    let val_episodes: Vec<Episode> = (0..n_val_eps)
        .map(|i| sample_episode(&domains[i % domains.len()], Protocol::various(), Split::Val, i as u64, ep_seed))
        .collect();

    let inits = cfg.inits_per_episode;
    let train = run_split(bb, layout, theta_init, &train_episodes, inits, usize::MAX, &cfg.sim, init_seed)?;
    let val = run_split(bb, layout, theta_init, &val_episodes, inits, cfg.val_trajectories, &cfg.sim, init_seed)?;
    let stats = compute_normalization_stats(&train)?;
    let store = |split, trajectories| TrajectoryStore {
        split,
        dim: layout.len(),
        steps: cfg.sim.steps,
        layout_hash: layout.hash(),
        sim: cfg.sim,
        stats: Some(stats.clone()),
        trajectories,
    };
    Ok(TrajectoryDataset {
        train: store(Split::Train, train),
        val: store(Split::Val, val),
        train_episodes,
        val_episodes,
    })
}

/// Fraction of trajectories whose final support loss does not exceed the
/// initial one.
pub fn endpoint_improvement_rate(trajs: &[Trajectory]) -> f64 {
    let ok = trajs.iter().filter(|t| t.losses[t.steps()] <= t.losses[0]).count();
    ok as f64 / trajs.len().max(1) as f64
}

/// Support loss at θ, exposed for diagnostics that do not need gradients.
pub fn loss_at(bb: &Backbone, layout: &BiasLayout, theta: &[f64], ep: &Episode) -> Result<f64> {
    support_loss(bb, layout, theta, &TaskBatch::support(ep)?)
}
