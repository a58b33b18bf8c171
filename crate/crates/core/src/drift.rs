//! Support-conditioned drift network `h_φ(θ_t, t | S)` and its
//! flow-matching training loop.

use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Eager, Graph, Ops};
use crate::checkpoint::{self, Checkpoint};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::flows::{self, FlowKind, FlowSample};
use crate::model::{prototypes, Backbone, BiasLayout, TaskBatch};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::trajectories::{NormStats, TrajectoryStore};

/// What the network is trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Constant drift along the straight line θ_0 → θ_T.
    Linear,
    /// Catmull–Rom drift, per knot.
    Cubic,
    /// θ_T − θ_0 from θ_0 at t = 0 only; one query adapts.
    Hypernet,
}

impl Objective {
    pub fn flow(self) -> FlowKind {
        match self {
            Objective::Cubic => FlowKind::Cubic,
            Objective::Linear | Objective::Hypernet => FlowKind::Linear,
        }
    }

    /// Length of the time axis over which the drift integrates to θ_T − θ_0.
    pub fn time_span(self, steps: usize) -> f64 {
        match self {
            Objective::Cubic => steps as f64,
            Objective::Linear | Objective::Hypernet => 1.0,
        }
    }

    pub fn convention(self) -> &'static str {
        match self {
            Objective::Cubic => "per-knot",
            Objective::Linear | Objective::Hypernet => "per-horizon",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub width: usize,
    pub blocks: usize,
    pub ffn: usize,
    pub decoder: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            width: 64,
            blocks: 2,
            ffn: 128,
            decoder: vec![128, 128, 128],
        }
    }
}

#[derive(Debug, Clone)]
pub struct DriftNet {
    pub arch: Architecture,
    pub objective: Objective,
    /// Trajectory length T the net was trained on.
    pub steps: usize,
    pub layout: BiasLayout,
    pub stats: NormStats,
    pub backbone_checksum: u64,
    pub params: ParamStore,
}

fn linear_init(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, gain: f64, r: &mut Rng) -> Result<()> {
    let std = (gain / fan_in as f64).sqrt();
    store.add(
        format!("{name}.weight"),
        Tensor::matrix(fan_in, fan_out, rng::gaussian_vec(r, fan_in * fan_out, std))?,
        true,
    );
    store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), true);
    Ok(())
}

fn norm_init(store: &mut ParamStore, name: &str, width: usize) {
    store.add(format!("{name}.gamma"), Tensor::vector(vec![1.0; width]), true);
    store.add(format!("{name}.beta"), Tensor::zeros(&[width]), true);
}

impl DriftNet {
    pub fn new(
        arch: Architecture,
        objective: Objective,
        steps: usize,
        bb: &Backbone,
        layout: &BiasLayout,
        stats: NormStats,
        seed: u64,
    ) -> Result<Self> {
        let p = layout.len();
        if stats.mean.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: stats.mean.len(),
            });
        }
        if steps < 1 || arch.width == 0 || arch.decoder.is_empty() {
            return Err(Error::InvalidArgument("bad drift-net architecture".into()));
        }
        let w = arch.width;
        let mut r = rng::stream(&[seed, rng::tag("drift-init")]);
        let mut s = ParamStore::new();
        linear_init(&mut s, "proj", bb.embed_dim(), w, 1.0, &mut r)?;
        s.add("task_token", Tensor::matrix(1, w, rng::gaussian_vec(&mut r, w, 0.02))?, true);
        for b in 0..arch.blocks {
            norm_init(&mut s, &format!("block{b}.ln1"), w);
            for m in ["q", "k", "v", "o"] {
                linear_init(&mut s, &format!("block{b}.{m}"), w, w, 1.0, &mut r)?;
            }
            norm_init(&mut s, &format!("block{b}.ln2"), w);
            linear_init(&mut s, &format!("block{b}.ff1"), w, arch.ffn, 2.0, &mut r)?;
            linear_init(&mut s, &format!("block{b}.ff2"), arch.ffn, w, 1.0, &mut r)?;
        }
        norm_init(&mut s, "final_ln", w);
        linear_init(&mut s, "param_embed", p, w, 1.0, &mut r)?;
        linear_init(&mut s, "time_embed", 1, w, 1.0, &mut r)?;
        let mut fan_in = w;
        for (i, &h) in arch.decoder.iter().enumerate() {
            linear_init(&mut s, &format!("dec{i}"), fan_in, h, 2.0, &mut r)?;
            fan_in = h;
        }
        linear_init(&mut s, &format!("dec{}", arch.decoder.len()), fan_in, p, 1.0, &mut r)?;
        Ok(DriftNet {
            arch,
            objective,
            steps,
            layout: layout.clone(),
            stats,
            backbone_checksum: bb.checksum(),
            params: s,
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.len()
    }

    /// Divisor mapping raw drift to the network's standardized output.
    pub fn drift_unit(&self) -> Vec<f64> {
        flows::drift_unit(self.objective.flow(), &self.stats, self.steps)
    }

    pub fn check_backbone(&self, bb: &Backbone, layout: &BiasLayout) -> Result<()> {
        if layout.hash() != self.layout.hash() {
            return Err(Error::LayoutMismatch {
                expected: self.layout.hash(),
                found: layout.hash(),
            });
        }
        if bb.checksum() != self.backbone_checksum {
            return Err(Error::Incompatible("drift net was trained against a different backbone".into()));
        }
        Ok(())
    }

    fn meta(&self) -> serde_json::Value {
        json!({
            "kind": "drift",
            "objective": self.objective,
            "drift_units": self.objective.convention(),
            "time_span": self.objective.time_span(self.steps),
            "steps": self.steps,
            "layout": self.layout,
            "layout_hash": self.layout.hash().to_string(),
            "backbone_checksum": self.backbone_checksum.to_string(),
            "stats": self.stats,
            "arch": self.arch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.meta(), &self.params)
    }

    pub fn encode(&self) -> Vec<u8> {
        checkpoint::encode(&self.meta(), &self.params)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let m = &ck.meta;
        if m["kind"] != "drift" {
            return Err(Error::Incompatible(format!("not a drift checkpoint: {}", m["kind"])));
        }
        let field = |k: &str| -> Result<serde_json::Value> {
            m.get(k)
                .cloned()
                .ok_or_else(|| Error::Incompatible(format!("drift checkpoint lacks {k}")))
        };
        let parse = |k: &str| -> Result<u64> {
            field(k)?
                .as_str()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Incompatible(format!("bad {k}")))
        };
        let de = |e: serde_json::Error| Error::Incompatible(e.to_string());
        let objective: Objective = serde_json::from_value(field("objective")?).map_err(de)?;
        if field("drift_units")? != objective.convention() {
            return Err(Error::Incompatible("drift-unit convention does not match objective".into()));
        }
        let layout: BiasLayout = serde_json::from_value(field("layout")?).map_err(de)?;
        if parse("layout_hash")? != layout.hash() {
            return Err(Error::LayoutMismatch {
                expected: parse("layout_hash")?,
                found: layout.hash(),
            });
        }
        Ok(DriftNet {
            arch: serde_json::from_value(field("arch")?).map_err(de)?,
            objective,
            steps: serde_json::from_value(field("steps")?).map_err(de)?,
            layout,
            stats: serde_json::from_value(field("stats")?).map_err(de)?,
            backbone_checksum: parse("backbone_checksum")?,
            params: ck.params,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(checkpoint::load(path)?)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::from_checkpoint(checkpoint::decode(bytes)?)
    }

    fn bind<O: Ops>(&self, o: &mut O) -> Vars<O::V> {
        let mut get = |name: String| o.param(&self.params, self.params.id(&name).expect("parameter registered"));
        let lin = |name: &str, get: &mut dyn FnMut(String) -> O::V| Lin {
            w: get(format!("{name}.weight")),
            b: get(format!("{name}.bias")),
        };
        let norm = |name: &str, get: &mut dyn FnMut(String) -> O::V| Norm {
            g: get(format!("{name}.gamma")),
            b: get(format!("{name}.beta")),
        };
        let proj = lin("proj", &mut get);
        let token = get("task_token".into());
        let blocks = (0..self.arch.blocks)
            .map(|b| Block {
                ln1: norm(&format!("block{b}.ln1"), &mut get),
                q: lin(&format!("block{b}.q"), &mut get),
                k: lin(&format!("block{b}.k"), &mut get),
                v: lin(&format!("block{b}.v"), &mut get),
                o: lin(&format!("block{b}.o"), &mut get),
                ln2: norm(&format!("block{b}.ln2"), &mut get),
                ff1: lin(&format!("block{b}.ff1"), &mut get),
                ff2: lin(&format!("block{b}.ff2"), &mut get),
            })
            .collect();
        let final_ln = norm("final_ln", &mut get);
        let param_embed = lin("param_embed", &mut get);
        let time_embed = lin("time_embed", &mut get);
        let decoder = (0..=self.arch.decoder.len())
            .map(|i| lin(&format!("dec{i}"), &mut get))
            .collect();
        Vars {
            proj,
            token,
            blocks,
            final_ln,
            param_embed,
            time_embed,
            decoder,
        }
    }
}

struct Lin<V> {
    w: V,
    b: V,
}

struct Norm<V> {
    g: V,
    b: V,
}

struct Block<V> {
    ln1: Norm<V>,
    q: Lin<V>,
    k: Lin<V>,
    v: Lin<V>,
    o: Lin<V>,
    ln2: Norm<V>,
    ff1: Lin<V>,
    ff2: Lin<V>,
}

struct Vars<V> {
    proj: Lin<V>,
    token: V,
    blocks: Vec<Block<V>>,
    final_ln: Norm<V>,
    param_embed: Lin<V>,
    time_embed: Lin<V>,
    decoder: Vec<Lin<V>>,
}

fn lin<O: Ops>(o: &mut O, l: &Lin<O::V>, x: &O::V) -> Result<O::V> {
    o.linear(x, &l.w, &l.b)
}

fn norm<O: Ops>(o: &mut O, n: &Norm<O::V>, x: &O::V) -> Result<O::V> {
    o.layer_norm(x, &n.g, &n.b)
}

/// `[1, w]` task vector from `[way, e]` prototypes.
fn encode_with<O: Ops>(o: &mut O, v: &Vars<O::V>, protos: &O::V) -> Result<O::V> {
    let projected = lin(o, &v.proj, protos)?;
    let mut x = o.concat_rows(&[&v.token, &projected])?;
    for b in &v.blocks {
        let h = norm(o, &b.ln1, &x)?;
        let q = lin(o, &b.q, &h)?;
        let k = lin(o, &b.k, &h)?;
        let val = lin(o, &b.v, &h)?;
        let a = o.attention(&q, &k, &val)?;
        let a = lin(o, &b.o, &a)?;
        x = o.add(&x, &a)?;
        let h = norm(o, &b.ln2, &x)?;
        let h = lin(o, &b.ff1, &h)?;
        let h = o.relu(&h)?;
        let h = lin(o, &b.ff2, &h)?;
        x = o.add(&x, &h)?;
    }
    let x = norm(o, &v.final_ln, &x)?;
    o.narrow(&x, 0, 1)
}

/// Decoder over `n` rows: `z` is `[n, w]` or `[1, w]`, θ `[n, |θ|]`,
/// normalized time `[n, 1]`.
fn decode_with<O: Ops>(o: &mut O, v: &Vars<O::V>, z: &O::V, theta: &O::V, tnorm: &O::V) -> Result<O::V> {
    let pe = lin(o, &v.param_embed, theta)?;
    let te = lin(o, &v.time_embed, tnorm)?;
    let h = o.add(&pe, &te)?;
    let mut h = o.add(&h, z)?;
    let last = v.decoder.len() - 1;
    for (i, l) in v.decoder.iter().enumerate() {
        h = lin(o, l, &h)?;
        if i < last {
            h = o.relu(&h)?;
        }
    }
    Ok(h)
}

/// Prototypes of each referenced episode under the frozen encoder.
#[derive(Debug, Clone, Default)]
pub struct TaskCache {
    protos: HashMap<u64, Rc<Tensor>>,
}

impl TaskCache {
    pub fn build<'a>(
        bb: &Backbone,
        layout: &BiasLayout,
        theta_init: &[f64],
        episodes: impl IntoIterator<Item = &'a Episode>,
    ) -> Result<Self> {
        let mut protos = HashMap::new();
        for ep in episodes {
            let p = prototypes(bb, layout, theta_init, &TaskBatch::support(ep)?)?;
            protos.insert(ep.id, Rc::new(p));
        }
        Ok(TaskCache { protos })
    }

    pub fn get(&self, episode_id: u64) -> Result<&Rc<Tensor>> {
        self.protos
            .get(&episode_id)
            .ok_or_else(|| Error::MissingArtifact(format!("episode {episode_id}")))
    }

    pub fn len(&self) -> usize {
        self.protos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.protos.is_empty()
    }
}

/// Task vector `z` for a support set.
pub fn encode_task(net: &DriftNet, bb: &Backbone, theta_init: &[f64], support: &TaskBatch) -> Result<Vec<f64>> {
    let protos = Rc::new(prototypes(bb, &net.layout, theta_init, support)?);
    encode_prototypes(net, &protos)
}

pub fn encode_prototypes(net: &DriftNet, protos: &Rc<Tensor>) -> Result<Vec<f64>> {
    if protos.shape()[0] == 0 {
        return Err(Error::Empty("support"));
    }
    let mut o = Eager;
    let vars = net.bind(&mut o);
    let p = o.shared(protos);
    Ok(encode_with(&mut o, &vars, &p)?.to_vec())
}

/// Drift evaluator with parameters bound and the task vector fixed, so each
/// solver step only runs the decoder.
pub struct DriftField<'a> {
    net: &'a DriftNet,
    vars: Vars<Rc<Tensor>>,
    z: Rc<Tensor>,
    unit: Vec<f64>,
}

impl<'a> DriftField<'a> {
    pub fn new(net: &'a DriftNet, z: &[f64]) -> Result<Self> {
        let mut o = Eager;
        let vars = net.bind(&mut o);
        let z = Rc::new(Tensor::matrix(1, z.len(), z.to_vec())?);
        Ok(DriftField {
            net,
            vars,
            z,
            unit: net.drift_unit(),
        })
    }

    /// Standardized drift at standardized θ and absolute time `t ∈ [0, T]`.
    pub fn standardized(&self, theta_std: &[f64], t: f64) -> Result<Vec<f64>> {
        if theta_std.len() != self.net.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.net.dim(),
                found: theta_std.len(),
            });
        }
        let mut o = Eager;
        let th = o.constant(Tensor::matrix(1, theta_std.len(), theta_std.to_vec())?);
        let tn = o.constant(Tensor::matrix(1, 1, vec![t / self.net.steps as f64])?);
        Ok(decode_with(&mut o, &self.vars, &self.z, &th, &tn)?.to_vec())
    }

    /// Raw-space drift at raw θ: standardize, evaluate, rescale by the drift unit.
    pub fn raw(&self, theta: &[f64], t: f64) -> Result<Vec<f64>> {
        let out = self.standardized(&self.net.stats.standardize(theta), t)?;
        Ok(out.iter().zip(&self.unit).map(|(v, u)| v * u).collect())
    }
}

pub fn drift_forward(net: &DriftNet, theta_std: &[f64], t: f64, z: &[f64]) -> Result<Vec<f64>> {
    DriftField::new(net, z)?.standardized(theta_std, t)
}

pub fn drift_raw(net: &DriftNet, theta: &[f64], t: f64, z: &[f64]) -> Result<Vec<f64>> {
    DriftField::new(net, z)?.raw(theta, t)
}

/// Groups of standardized samples sharing one task.
pub type Groups<'a> = [(u64, Vec<FlowSample>)];

fn group_loss<O: Ops>(o: &mut O, net: &DriftNet, v: &Vars<O::V>, tasks: &TaskCache, groups: &Groups) -> Result<O::V> {
    let n: usize = groups.iter().map(|(_, g)| g.len()).sum();
    if n == 0 {
        return Err(Error::Empty("flow batch"));
    }
    let p = net.dim();
    let mut zs = Vec::with_capacity(groups.len());
    for (id, _) in groups {
        let protos = o.shared(tasks.get(*id)?);
        zs.push(encode_with(o, v, &protos)?);
    }
    let zrefs: Vec<&O::V> = zs.iter().collect();
    let z = o.concat_rows(&zrefs)?;
    let mut select = vec![0.0; n * groups.len()];
    let mut theta = Vec::with_capacity(n * p);
    let mut target = Vec::with_capacity(n * p);
    let mut tnorm = Vec::with_capacity(n);
    let mut row = 0;
    for (gi, (_, samples)) in groups.iter().enumerate() {
        for s in samples {
            select[row * groups.len() + gi] = 1.0;
            theta.extend_from_slice(&s.theta);
            target.extend_from_slice(&s.v);
            tnorm.push(s.t / net.steps as f64);
            row += 1;
        }
    }
    let select = o.constant(Tensor::matrix(n, groups.len(), select)?);
    let z = o.matmul(&select, &z)?;
    let theta = o.constant(Tensor::matrix(n, p, theta)?);
    let tnorm = o.constant(Tensor::matrix(n, 1, tnorm)?);
    let target = o.constant(Tensor::matrix(n, p, target)?);
    let out = decode_with(o, v, &z, &theta, &tnorm)?;
    let diff = o.sub(&out, &target)?;
    let sq = o.mul(&diff, &diff)?;
    let total = o.sum(&sq)?;
    o.scale(&total, 1.0 / n as f64)
}

/// Mean over samples of `‖v̂ − v‖²` in standardized space.
pub fn flow_matching_loss(net: &DriftNet, tasks: &TaskCache, groups: &Groups) -> Result<f64> {
    let mut o = Eager;
    let vars = net.bind(&mut o);
    Ok(group_loss(&mut o, net, &vars, tasks, groups)?.item())
}

/// Loss and accumulated parameter gradients (in `net.params`).
pub fn flow_matching_grad(net: &mut DriftNet, tasks: &TaskCache, groups: &Groups) -> Result<f64> {
    let mut g = Graph::new();
    let vars = net.bind(&mut g);
    let loss = group_loss(&mut g, net, &vars, tasks, groups)?;
    let value = g.value(&loss).item();
    net.params.zero_grads();
    g.backward_into(loss, &mut net.params)?;
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Trajectories per batch; each contributes `samples_per_trajectory`.
    pub trajectories_per_batch: usize,
    pub samples_per_trajectory: usize,
    pub lr: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    /// Samples drawn per validation trajectory for the fixed validation set.
    pub val_samples_per_trajectory: usize,
    pub seed: u64,
    pub arch: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Cubic,
            trajectories_per_batch: 16,
            samples_per_trajectory: 16,
            lr: 1e-3,
            max_steps: 2000,
            eval_every: 100,
            patience: 10,
            val_samples_per_trajectory: 16,
            seed: 0,
            arch: Architecture::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.patience < 1 || self.eval_every < 1 {
            return Err(Error::InvalidArgument("patience and eval_every must be >= 1".into()));
        }
        if self.trajectories_per_batch < 1 || self.samples_per_trajectory < 1 {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub objective: Option<Objective>,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub best_step: usize,
    pub steps_run: usize,
    /// `(step, mean train loss since previous eval)`.
    pub train_curve: Vec<(usize, f64)>,
    pub val_curve: Vec<(usize, f64)>,
}

fn draw_groups(store: &TrajectoryStore, kind: FlowKind, objective: Objective, n_traj: usize, per: usize, r: &mut Rng) -> Result<Vec<(u64, Vec<FlowSample>)>> {
    if objective == Objective::Hypernet {
        let stats = store.stats()?;
        let unit = flows::drift_unit(kind, stats, store.steps);
        return (0..n_traj)
            .map(|_| {
                let traj = &store.trajectories[rand::Rng::random_range(r, 0..store.len())];
                let s = flows::standardize(&flows::linear_sample(traj, 0.0)?, stats, &unit);
                Ok((traj.episode_id, vec![s]))
            })
            .collect();
    }
    Ok(flows::sample_grouped(store, kind, n_traj, per, r)?
        .into_iter()
        .map(|(i, g)| (store.trajectories[i].episode_id, g))
        .collect())
}

/// Fixed validation set: every validation trajectory, fixed t draws.
pub fn validation_groups(store: &TrajectoryStore, objective: Objective, per: usize, seed: u64) -> Result<Vec<(u64, Vec<FlowSample>)>> {
    if store.is_empty() {
        return Err(Error::Empty("validation store"));
    }
    let stats = store.stats()?;
    let kind = objective.flow();
    let unit = flows::drift_unit(kind, stats, store.steps);
    let mut r = rng::stream(&[seed, rng::tag("drift-val")]);
    store
        .trajectories
        .iter()
        .map(|traj| {
            let samples = if objective == Objective::Hypernet {
                vec![flows::standardize(&flows::linear_sample(traj, 0.0)?, stats, &unit)]
            } else {
                (0..per)
                    .map(|_| {
                        let t = rand::Rng::random::<f64>(&mut r) * store.steps as f64;
                        Ok(flows::standardize(&flows::sample(traj, kind, t)?, stats, &unit))
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            Ok((traj.episode_id, samples))
        })
        .collect()
}

/// Adam on φ with early stopping on a fixed validation sample set; returns
/// the best checkpoint seen.
#[allow(clippy::too_many_arguments)]
pub fn train_drift(
    bb: &Backbone,
    layout: &BiasLayout,
    theta_init: &[f64],
    train: &TrajectoryStore,
    val: &TrajectoryStore,
    episodes: &[&Episode],
    cfg: &TrainConfig,
) -> Result<(DriftNet, TrainReport)> {
    cfg.validate()?;
    train.compatible_with(val)?;
    if train.layout_hash != layout.hash() {
        return Err(Error::LayoutMismatch {
            expected: layout.hash(),
            found: train.layout_hash,
        });
    }
    if train.is_empty() {
        return Err(Error::Empty("training store"));
    }
    let stats = train.stats()?.clone();
    let mut net = DriftNet::new(cfg.arch.clone(), cfg.objective, train.steps, bb, layout, stats, cfg.seed)?;
    let tasks = TaskCache::build(bb, layout, theta_init, episodes.iter().copied())?;
    let val_groups = validation_groups(val, cfg.objective, cfg.val_samples_per_trajectory, cfg.seed)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::for_store(&net.params);
    let mut r = rng::stream(&[cfg.seed, rng::tag("drift-batches")]);
    let kind = cfg.objective.flow();
    // The hypernet target has one sample per trajectory, so it gets wider
    // batches of trajectories instead.
    let n_traj = match cfg.objective {
        Objective::Hypernet => cfg.trajectories_per_batch * 4,
        _ => cfg.trajectories_per_batch,
    };

    let initial = flow_matching_loss(&net, &tasks, &val_groups)?;
    let mut report = TrainReport {
        objective: Some(cfg.objective),
        initial_val_loss: initial,
        best_val_loss: initial,
        ..TrainReport::default()
    };
    let mut best = net.params.clone();
    let mut bad_evals = 0;
    let mut running = (0.0, 0usize);
    for step in 1..=cfg.max_steps {
        let groups = draw_groups(train, kind, cfg.objective, n_traj, cfg.samples_per_trajectory, &mut r)?;
        let loss = flow_matching_grad(&mut net, &tasks, &groups).map_err(|e| match e {
            Error::NonFinite { op } => Error::Diverged {
                step,
                detail: format!("non-finite {op} in drift training"),
            },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("drift training loss {loss}"),
            });
        }
        adam_step(&mut net.params, &adam, &mut state)?;
        running = (running.0 + loss, running.1 + 1);
        report.steps_run = step;
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            report.train_curve.push((step, running.0 / running.1 as f64));
            running = (0.0, 0);
            let vl = flow_matching_loss(&net, &tasks, &val_groups)?;
            report.val_curve.push((step, vl));
            if vl < report.best_val_loss {
                report.best_val_loss = vl;
                report.best_step = step;
                best = net.params.clone();
                bad_evals = 0;
            } else {
                bad_evals += 1;
                if bad_evals >= cfg.patience {
                    break;
                }
            }
        }
    }
    net.params = best;
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, relative_error};
    use crate::episodes::{make_domains, DomainParams};
    use crate::model::{select_bias_params, BiasSelector};
    use crate::trajectories::{collect_dataset, CollectConfig, SimConfig, TrajectoryDataset};

    fn tiny_arch() -> Architecture {
        Architecture {
            width: 8,
            blocks: 2,
            ffn: 12,
            decoder: vec![10, 10, 10],
        }
    }

    struct Fixture {
        bb: Backbone,
        layout: BiasLayout,
        theta: Vec<f64>,
        ds: TrajectoryDataset,
    }

    fn fixture(eps_per_domain: usize) -> Fixture {
        let doms = make_domains(3, 2, 0, 6, &DomainParams::default()).unwrap();
        let bb = Backbone::new(&[6, 5, 4], 1.0, 1).unwrap();
        let (layout, theta) = select_bias_params(&bb, &BiasSelector::AllBias).unwrap();
        let cfg = CollectConfig {
            episodes_per_domain: eps_per_domain,
            inits_per_episode: 2,
            val_trajectories: 6,
            sim: SimConfig {
                steps: 4,
                lr: 0.05,
                ..SimConfig::default()
            },
        };
        let ds = collect_dataset(&bb, &layout, &theta, &doms, &cfg, 2).unwrap();
        Fixture { bb, layout, theta, ds }
    }

    fn net(f: &Fixture, objective: Objective) -> DriftNet {
        let stats = f.ds.train.stats().unwrap().clone();
        DriftNet::new(tiny_arch(), objective, 4, &f.bb, &f.layout, stats, 5).unwrap()
    }

    fn all_episodes(f: &Fixture) -> Vec<&Episode> {
        f.ds.train_episodes.iter().chain(&f.ds.val_episodes).collect()
    }

    #[test]
    fn task_vector_is_permutation_invariant() {
        let f = fixture(2);
        let n = net(&f, Objective::Cubic);
        let ep = &f.ds.train_episodes[0];
        let z = encode_task(&n, &f.bb, &f.theta, &TaskBatch::support(ep).unwrap()).unwrap();
        assert_eq!(z.len(), 8);
        // Relabel classes in reverse order.
        let relabeled: Vec<_> = ep
            .support
            .iter()
            .map(|e| crate::episodes::Example {
                x: e.x.clone(),
                y: ep.way - 1 - e.y,
            })
            .collect();
        let z2 = encode_task(&n, &f.bb, &f.theta, &TaskBatch::new(&relabeled, ep.way).unwrap()).unwrap();
        assert!(relative_error(&z, &z2, 1e-12) < 1e-10);
    }

    #[test]
    fn drift_output_shape_and_conditioning() {
        let f = fixture(2);
        let n = net(&f, Objective::Cubic);
        let a = encode_task(&n, &f.bb, &f.theta, &TaskBatch::support(&f.ds.train_episodes[0]).unwrap()).unwrap();
        let b = encode_task(&n, &f.bb, &f.theta, &TaskBatch::support(&f.ds.train_episodes[1]).unwrap()).unwrap();
        let th = vec![0.1; n.dim()];
        let va = drift_forward(&n, &th, 1.0, &a).unwrap();
        assert_eq!(va.len(), n.dim());
        assert_eq!(va, drift_forward(&n, &th, 1.0, &a).unwrap());
        assert_ne!(va, drift_forward(&n, &th, 1.0, &b).unwrap());
        assert!(drift_forward(&n, &th[1..], 1.0, &a).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let f = fixture(2);
        let mut n = net(&f, Objective::Cubic);
        let tasks = TaskCache::build(&f.bb, &f.layout, &f.theta, all_episodes(&f)).unwrap();
        let mut r = rng::stream(&[1]);
        let groups = draw_groups(&f.ds.train, FlowKind::Cubic, Objective::Cubic, 2, 3, &mut r).unwrap();
        flow_matching_grad(&mut n, &tasks, &groups).unwrap();
        for name in ["dec3.weight", "dec0.bias", "task_token", "block0.q.weight"] {
            let id = n.params.id(name).unwrap();
            let analytic = n.params.get(id).grad.to_vec();
            let x0 = n.params.value(id).to_vec();
            let mut probe = n.clone();
            let fd = finite_difference(
                &mut |x| {
                    probe.params.value_mut(id).data_mut().copy_from_slice(x);
                    flow_matching_loss(&probe, &tasks, &groups)
                },
                &x0,
                1e-5,
            )
            .unwrap();
            assert!(relative_error(&analytic, &fd, 1e-7) < 1e-4, "{name}");
        }
    }

    #[test]
    fn zero_prediction_loss_is_mean_target_norm() {
        let f = fixture(2);
        let mut n = net(&f, Objective::Linear);
        let last = n.params.id("dec3.weight").unwrap();
        n.params.value_mut(last).data_mut().fill(0.0);
        let tasks = TaskCache::build(&f.bb, &f.layout, &f.theta, all_episodes(&f)).unwrap();
        let groups = validation_groups(&f.ds.val, Objective::Linear, 3, 0).unwrap();
        let expected: f64 = groups
            .iter()
            .flat_map(|(_, g)| g)
            .map(|s| s.v.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            / groups.iter().map(|(_, g)| g.len()).sum::<usize>() as f64;
        let loss = flow_matching_loss(&n, &tasks, &groups).unwrap();
        assert!((loss - expected).abs() < 1e-9 * expected.max(1.0));
    }

    #[test]
    fn training_improves_and_is_deterministic() {
        let f = fixture(4);
        let eps = all_episodes(&f);
        let cfg = TrainConfig {
            max_steps: 60,
            eval_every: 20,
            trajectories_per_batch: 4,
            samples_per_trajectory: 4,
            arch: tiny_arch(),
            ..TrainConfig::default()
        };
        let before = f.bb.checksum();
        let (a, rep) = train_drift(&f.bb, &f.layout, &f.theta, &f.ds.train, &f.ds.val, &eps, &cfg).unwrap();
        assert!(rep.best_val_loss < rep.initial_val_loss);
        assert_eq!(f.bb.checksum(), before);
        let (b, _) = train_drift(&f.bb, &f.layout, &f.theta, &f.ds.train, &f.ds.val, &eps, &cfg).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
    }

    #[test]
    fn checkpoint_round_trip_and_rejections() {
        let f = fixture(2);
        let n = net(&f, Objective::Linear);
        let bytes = n.encode();
        let back = DriftNet::decode(&bytes).unwrap();
        assert_eq!(back.params.checksum(), n.params.checksum());
        assert_eq!(back.stats, n.stats);
        assert_eq!(back.objective, Objective::Linear);
        assert!(DriftNet::decode(&bytes[..bytes.len() - 5]).is_err());

        let (other, _) = select_bias_params(&f.bb, &BiasSelector::Layers(vec![1])).unwrap();
        assert!(matches!(back.check_backbone(&f.bb, &other), Err(Error::LayoutMismatch { .. })));
        back.check_backbone(&f.bb, &f.layout).unwrap();
    }
}
