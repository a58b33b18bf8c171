//! Frozen-backbone prototype classifier whose biases are the adaptation
//! target.

use std::path::Path;
use std::rc::Rc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Eager, Graph, Ops};
use crate::checkpoint;
use crate::episodes::{sample_episode, DomainSpec, Episode, Example, Protocol, Split};
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::{Fnv, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

/// Dense layers `dims[0] → dims[1] → …` with relu between layers and a
/// linear output.
#[derive(Debug, Clone)]
pub struct Backbone {
    dims: Vec<usize>,
    tau: f64,
    params: ParamStore,
}

fn weight_name(layer: usize) -> String {
    format!("layer{layer}.weight")
}

fn bias_name(layer: usize) -> String {
    format!("layer{layer}.bias")
}

impl Backbone {
    /// He-initialized weights, zero biases.
    pub fn new(dims: &[usize], tau: f64, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer sizes {dims:?}")));
        }
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
        }
        let mut r = rng::stream(&[seed, rng::tag("backbone-init")]);
        let mut params = ParamStore::new();
        for (l, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let data = rng::gaussian_vec(&mut r, fan_in * fan_out, std);
            params.add(weight_name(l), Tensor::matrix(fan_in, fan_out, data)?, true);
            params.add(bias_name(l), Tensor::zeros(&[fan_out]), true);
        }
        Ok(Backbone {
            dims: dims.to_vec(),
            tau,
            params,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn embed_dim(&self) -> usize {
        *self.dims.last().expect("at least two sizes")
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    fn weight(&self, layer: usize) -> &Rc<Tensor> {
        self.params.value(self.params.id(&weight_name(layer)).expect("weight present"))
    }

    fn bias(&self, layer: usize) -> &Rc<Tensor> {
        self.params.value(self.params.id(&bias_name(layer)).expect("bias present"))
    }

    /// Overwrites the selected bias slots with `theta`.
    pub fn scatter(&mut self, layout: &BiasLayout, theta: &[f64]) -> Result<()> {
        layout.check(self, theta)?;
        for s in &layout.slots {
            let id = self.params.id(&bias_name(s.layer)).expect("bias present");
            self.params
                .value_mut(id)
                .data_mut()
                .copy_from_slice(&theta[s.offset..s.offset + s.len]);
        }
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.params.freeze_all();
    }

    /// Forward pass with each layer's weight and bias supplied by the caller.
    fn forward<O: Ops>(&self, o: &mut O, x: &O::V, weights: &[O::V], biases: &[O::V]) -> Result<O::V> {
        let mut h = x.clone();
        for l in 0..self.num_layers() {
            h = o.linear(&h, &weights[l], &biases[l])?;
            if l + 1 < self.num_layers() {
                h = o.relu(&h)?;
            }
        }
        Ok(h)
    }

    /// Embeds the rows of `x` with `theta` scattered into the selected
    /// bias slots; unselected biases keep their stored values.
    pub fn embed_with<O: Ops>(&self, o: &mut O, layout: &BiasLayout, theta: &O::V, x: &O::V) -> Result<O::V> {
        layout.check_len(o.value(theta).len())?;
        let weights: Vec<O::V> = (0..self.num_layers()).map(|l| o.shared(self.weight(l))).collect();
        let mut biases: Vec<O::V> = (0..self.num_layers()).map(|l| o.shared(self.bias(l))).collect();
        for s in &layout.slots {
            biases[s.layer] = o.narrow(theta, s.offset, s.len)?;
        }
        self.forward(o, x, &weights, &biases)
    }

    pub fn embed(&self, layout: &BiasLayout, theta: &[f64], x: &Tensor) -> Result<Tensor> {
        layout.check(self, theta)?;
        let mut o = Eager;
        let th = Rc::new(Tensor::vector(theta.to_vec()));
        let x = Rc::new(x.clone());
        let e = self.embed_with(&mut o, layout, &th, &x)?;
        Ok(Rc::try_unwrap(e).unwrap_or_else(|rc| (*rc).clone()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = json!({"kind": "backbone", "dims": self.dims, "tau": self.tau});
        checkpoint::save(path, &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        Self::from_checkpoint(ck)
    }

    pub fn from_checkpoint(ck: checkpoint::Checkpoint) -> Result<Self> {
        if ck.meta["kind"] != "backbone" {
            return Err(Error::Incompatible(format!("not a backbone checkpoint: {}", ck.meta["kind"])));
        }
        let dims: Vec<usize> = serde_json::from_value(ck.meta["dims"].clone())
            .map_err(|e| Error::Incompatible(format!("backbone dims: {e}")))?;
        let tau = ck.meta["tau"]
            .as_f64()
            .ok_or_else(|| Error::Incompatible("backbone tau missing".into()))?;
        let bb = Backbone {
            dims,
            tau,
            params: ck.params,
        };
        for l in 0..bb.num_layers() {
            let (w, b) = (bb.params.id(&weight_name(l)), bb.params.id(&bias_name(l)));
            let ok = match (w, b) {
                (Some(w), Some(b)) => {
                    bb.params.value(w).shape() == [bb.dims[l], bb.dims[l + 1]]
                        && bb.params.value(b).shape() == [bb.dims[l + 1]]
                }
                _ => false,
            };
            if !ok {
                return Err(Error::Incompatible(format!("layer {l} tensors missing or misshapen")));
            }
        }
        Ok(bb)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasSlot {
    pub layer: usize,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasSelector {
    AllBias,
    Layers(Vec<usize>),
}

/// Where each coordinate of θ lives in the backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasLayout {
    pub dims: Vec<usize>,
    pub slots: Vec<BiasSlot>,
}

impl BiasLayout {
    pub fn len(&self) -> usize {
        self.slots.iter().map(|s| s.len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Stable identifier of the layout, stored in every artifact that holds
    /// θ-shaped data.
    pub fn hash(&self) -> u64 {
        let mut h = Fnv::new();
        h.bytes(b"bias-layout");
        for &d in &self.dims {
            h.bytes(&(d as u64).to_le_bytes());
        }
        for s in &self.slots {
            for v in [s.layer, s.offset, s.len] {
                h.bytes(&(v as u64).to_le_bytes());
            }
        }
        h.finish()
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: n,
            });
        }
        Ok(())
    }

    pub fn check(&self, bb: &Backbone, theta: &[f64]) -> Result<()> {
        if self.dims != bb.dims {
            return Err(Error::Incompatible(format!(
                "layout built for {:?}, backbone is {:?}",
                self.dims, bb.dims
            )));
        }
        self.check_len(theta.len())
    }
}

/// Builds the layout and gathers θ_init from the backbone's current biases.
pub fn select_bias_params(bb: &Backbone, selector: &BiasSelector) -> Result<(BiasLayout, Vec<f64>)> {
    let layers: Vec<usize> = match selector {
        BiasSelector::AllBias => (0..bb.num_layers()).collect(),
        BiasSelector::Layers(ls) => {
            let mut ls = ls.clone();
            ls.sort_unstable();
            ls.dedup();
            ls
        }
    };
    if layers.is_empty() {
        return Err(Error::Empty("bias selection"));
    }
    let mut slots = Vec::new();
    let mut theta = Vec::new();
    for l in layers {
        if l >= bb.num_layers() {
            return Err(Error::InvalidArgument(format!("layer {l} out of range")));
        }
        let b = bb.bias(l);
        slots.push(BiasSlot {
            layer: l,
            offset: theta.len(),
            len: b.len(),
        });
        theta.extend_from_slice(b.data());
    }
    Ok((
        BiasLayout {
            dims: bb.dims.clone(),
            slots,
        },
        theta,
    ))
}

/// Inputs and labels of one side of an episode, packed for the model.
#[derive(Debug, Clone)]
pub struct TaskBatch {
    pub x: Rc<Tensor>,
    pub labels: Vec<usize>,
    pub way: usize,
    /// `[way, n]` row-averaging matrix: `avg · E` gives class prototypes.
    pub avg: Rc<Tensor>,
}

impl TaskBatch {
    pub fn new(examples: &[Example], way: usize) -> Result<Self> {
        let n = examples.len();
        if n == 0 {
            return Err(Error::Empty("examples"));
        }
        let d = examples[0].x.len();
        let mut x = Vec::with_capacity(n * d);
        let mut counts = vec![0usize; way];
        for e in examples {
            if e.x.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: e.x.len(),
                });
            }
            if e.y >= way {
                return Err(Error::InvalidArgument(format!("label {} outside 0..{way}", e.y)));
            }
            x.extend_from_slice(&e.x);
            counts[e.y] += 1;
        }
        if let Some(c) = counts.iter().position(|&k| k == 0) {
            return Err(Error::InvalidArgument(format!("class {c} has no examples")));
        }
        let mut avg = vec![0.0; way * n];
        for (i, e) in examples.iter().enumerate() {
            avg[e.y * n + i] = 1.0 / counts[e.y] as f64;
        }
        Ok(TaskBatch {
            x: Rc::new(Tensor::matrix(n, d, x)?),
            labels: examples.iter().map(|e| e.y).collect(),
            way,
            avg: Rc::new(Tensor::matrix(way, n, avg)?),
        })
    }

    pub fn support(ep: &Episode) -> Result<Self> {
        Self::new(&ep.support, ep.way)
    }

    pub fn query(ep: &Episode) -> Result<Self> {
        // Query rows need no averaging matrix of their own but share the type.
        Self::new(&ep.query, ep.way)
    }
}

/// Class-mean prototypes `[way, e]` from embeddings `[n, e]`.
pub fn prototypes_with<O: Ops>(o: &mut O, task: &TaskBatch, emb: &O::V) -> Result<O::V> {
    let avg = o.shared(&task.avg);
    o.matmul(&avg, emb)
}

/// Logits `−τ‖e − p_c‖²`.
pub fn logits_with<O: Ops>(o: &mut O, tau: f64, emb: &O::V, protos: &O::V) -> Result<O::V> {
    let d = o.sq_dist(emb, protos)?;
    o.scale(&d, -tau)
}

pub fn prototypes(bb: &Backbone, layout: &BiasLayout, theta: &[f64], support: &TaskBatch) -> Result<Tensor> {
    let emb = Rc::new(bb.embed(layout, theta, &support.x)?);
    let mut o = Eager;
    Ok((*prototypes_with(&mut o, support, &emb)?).clone())
}

fn support_loss_with<O: Ops>(o: &mut O, bb: &Backbone, layout: &BiasLayout, theta: &O::V, s: &TaskBatch) -> Result<O::V> {
    if s.way < 2 {
        return Err(Error::InvalidArgument("support loss needs at least two classes".into()));
    }
    let x = o.shared(&s.x);
    let emb = bb.embed_with(o, layout, theta, &x)?;
    let protos = prototypes_with(o, s, &emb)?;
    let logits = logits_with(o, bb.tau, &emb, &protos)?;
    o.softmax_ce(&logits, &s.labels, false)
}

/// Summed cross-entropy over the support set, prototypes from the same
/// support.
pub fn support_loss(bb: &Backbone, layout: &BiasLayout, theta: &[f64], support: &TaskBatch) -> Result<f64> {
    layout.check(bb, theta)?;
    let mut o = Eager;
    let th = Rc::new(Tensor::vector(theta.to_vec()));
    Ok(support_loss_with(&mut o, bb, layout, &th, support)?.item())
}

/// Loss and its gradient with respect to θ only.
pub fn support_loss_grad(bb: &Backbone, layout: &BiasLayout, theta: &[f64], support: &TaskBatch) -> Result<(f64, Vec<f64>)> {
    layout.check(bb, theta)?;
    let mut g = Graph::new();
    let th = g.leaf(Tensor::vector(theta.to_vec()), true);
    let loss = support_loss_with(&mut g, bb, layout, &th, support)?;
    let value = g.value(&loss).item();
    let grads = g.backward(loss)?;
    let grad = grads.get(th).map_or_else(|| vec![0.0; theta.len()], Tensor::to_vec);
    Ok((value, grad))
}

/// Predicted class of each query row.
pub fn predict(bb: &Backbone, layout: &BiasLayout, theta: &[f64], support: &TaskBatch, query: &Tensor) -> Result<Vec<usize>> {
    let protos = Rc::new(prototypes(bb, layout, theta, support)?);
    let emb = Rc::new(bb.embed(layout, theta, query)?);
    let mut o = Eager;
    let logits = logits_with(&mut o, bb.tau, &emb, &protos)?;
    let c = protos.shape()[0];
    Ok(logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect())
}

/// Query accuracy of the prototype classifier with biases θ.
pub fn accuracy(bb: &Backbone, layout: &BiasLayout, theta: &[f64], ep: &Episode) -> Result<f64> {
    let support = TaskBatch::support(ep)?;
    let query = TaskBatch::query(ep)?;
    let pred = predict(bb, layout, theta, &support, &query.x)?;
    let hits = pred.iter().zip(&query.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaTrainConfig {
    pub hidden: Vec<usize>,
    pub tau: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub lr: f64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig {
            hidden: vec![32, 32],
            tau: 1.0,
            epochs: 30,
            episodes_per_epoch: 200,
            lr: 1e-3,
        }
    }
}

/// Episodic prototype-loss training on base domains. Returns the frozen
/// backbone.
pub fn meta_train_backbone(domains: &[DomainSpec], cfg: &MetaTrainConfig, seed: u64) -> Result<Backbone> {
    let first = domains.first().ok_or(Error::Empty("domains"))?;
    if domains.iter().any(|d| d.severity != crate::episodes::Severity::Base) {
        return Err(Error::InvalidArgument("meta-training uses base domains only".into()));
    }
    let mut dims = vec![first.d];
    dims.extend_from_slice(&cfg.hidden);
    let mut bb = Backbone::new(&dims, cfg.tau, seed)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::for_store(&bb.params);
    let mut pick = rng::stream(&[seed, rng::tag("meta-train")]);
    let episode_seed = rng::derive_seed(&[seed, rng::tag("meta-episodes")]);
    let ids: Vec<_> = bb.params.ids().collect();
    for step in 0..cfg.epochs * cfg.episodes_per_epoch {
        let dom = &domains[pick.random_range(0..domains.len())];
        let ep = sample_episode(dom, Protocol::various(), Split::Train, step as u64, episode_seed);
        let s = TaskBatch::support(&ep)?;
        let q = TaskBatch::query(&ep)?;
        let mut g = Graph::new();
        let vars: Vec<_> = ids.iter().map(|&id| g.param(&bb.params, id)).collect();
        let (weights, biases): (Vec<_>, Vec<_>) = vars.chunks(2).map(|wb| (wb[0], wb[1])).unzip();
        let sx = g.shared(&s.x);
        let qx = g.shared(&q.x);
        let loss = (|| {
            let se = bb.forward(&mut g, &sx, &weights, &biases)?;
            let protos = prototypes_with(&mut g, &s, &se)?;
            let qe = bb.forward(&mut g, &qx, &weights, &biases)?;
            let logits = logits_with(&mut g, bb.tau, &qe, &protos)?;
            g.softmax_ce(&logits, &q.labels, true)
        })()
        .map_err(|e| match e {
            Error::NonFinite { op } => Error::Diverged {
                step,
                detail: format!("non-finite {op} during meta-training"),
            },
            other => other,
        })?;
        bb.params.zero_grads();
        g.backward_into(loss, &mut bb.params)?;
        adam_step(&mut bb.params, &adam, &mut state)?;
    }
    bb.freeze();
    Ok(bb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, relative_error};
    use crate::episodes::{make_domains, DomainParams};

    fn tiny() -> (Backbone, BiasLayout, Vec<f64>) {
        let bb = Backbone::new(&[4, 6, 5], 1.0, 3).unwrap();
        let (layout, mut theta) = select_bias_params(&bb, &BiasSelector::AllBias).unwrap();
        let mut r = rng::stream(&[1]);
        theta.iter_mut().for_each(|t| *t = 0.3 * rng::gaussian(&mut r));
        (bb, layout, theta)
    }

    fn episode(d: usize) -> Episode {
        let doms = make_domains(2, 1, 0, d, &DomainParams::default()).unwrap();
        sample_episode(&doms[0], Protocol::Fixed { way: 3, shot: 3, queries: 4 }, Split::Train, 0, 1)
    }

    #[test]
    fn layout_counts() {
        let bb = Backbone::new(&[16, 32, 32], 1.0, 0).unwrap();
        let (all, theta) = select_bias_params(&bb, &BiasSelector::AllBias).unwrap();
        assert_eq!(all.len(), 64);
        assert_eq!(theta.len(), 64);
        let (l2, _) = select_bias_params(&bb, &BiasSelector::Layers(vec![1])).unwrap();
        assert_eq!(l2.len(), 32);
        assert_ne!(all.hash(), l2.hash());
        assert!(matches!(
            select_bias_params(&bb, &BiasSelector::Layers(vec![])),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn scatter_then_gather_is_identity() {
        let (mut bb, layout, theta) = tiny();
        bb.scatter(&layout, &theta).unwrap();
        let (_, back) = select_bias_params(&bb, &BiasSelector::AllBias).unwrap();
        assert_eq!(back, theta);
    }

    #[test]
    fn stored_biases_reproduce_plain_forward() {
        let (mut bb, layout, theta) = tiny();
        bb.scatter(&layout, &theta).unwrap();
        let x = Tensor::matrix(2, 4, vec![0.1, -0.2, 0.3, 0.9, 1.0, 0.0, -1.0, 0.5]).unwrap();
        let via_theta = bb.embed(&layout, &theta, &x).unwrap();
        let mut o = Eager;
        let ws: Vec<_> = (0..2).map(|l| bb.weight(l).clone()).collect();
        let bs: Vec<_> = (0..2).map(|l| bb.bias(l).clone()).collect();
        let plain = bb.forward(&mut o, &Rc::new(x), &ws, &bs).unwrap();
        assert_eq!(via_theta.data(), plain.data());
    }

    #[test]
    fn zero_weights_propagate_relu_of_bias() {
        let mut bb = Backbone::new(&[3, 2, 2], 1.0, 0).unwrap();
        for l in 0..2 {
            let id = bb.params.id(&weight_name(l)).unwrap();
            bb.params.value_mut(id).data_mut().fill(0.0);
        }
        let (layout, _) = select_bias_params(&bb, &BiasSelector::AllBias).unwrap();
        let theta = [0.5, -0.5, 2.0, 3.0];
        let e = bb.embed(&layout, &theta, &Tensor::matrix(1, 3, vec![7.0, 8.0, 9.0]).unwrap()).unwrap();
        assert_eq!(e.data(), &[2.0, 3.0]);
    }

    #[test]
    fn two_class_support_loss_closed_form() {
        // Identity network: 2-d input, one layer with identity weights.
        let mut bb = Backbone::new(&[2, 2], 1.0, 0).unwrap();
        let id = bb.params.id(&weight_name(0)).unwrap();
        bb.params.value_mut(id).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let (layout, theta) = select_bias_params(&bb, &BiasSelector::AllBias).unwrap();
        let dist = 1.3;
        let ex = vec![
            Example { x: vec![0.0, 0.0], y: 0 },
            Example { x: vec![dist, 0.0], y: 1 },
        ];
        let s = TaskBatch::new(&ex, 2).unwrap();
        let loss = support_loss(&bb, &layout, &theta, &s).unwrap();
        let expected = 2.0 * (1.0 + (-dist * dist).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);

        let same = vec![
            Example { x: vec![1.0, 1.0], y: 0 },
            Example { x: vec![1.0, 1.0], y: 1 },
        ];
        let s = TaskBatch::new(&same, 2).unwrap();
        let loss = support_loss(&bb, &layout, &theta, &s).unwrap();
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn support_loss_grad_matches_finite_differences() {
        let (bb, layout, theta) = tiny();
        let ep = episode(4);
        let s = TaskBatch::support(&ep).unwrap();
        let (_, g) = support_loss_grad(&bb, &layout, &theta, &s).unwrap();
        let fd = finite_difference(&mut |t| support_loss(&bb, &layout, t, &s), &theta, 1e-5).unwrap();
        assert!(relative_error(&g, &fd, 1e-8) < 1e-4, "{g:?} vs {fd:?}");
    }

    #[test]
    fn single_class_and_bad_theta_rejected() {
        let (bb, layout, theta) = tiny();
        let ex = vec![Example { x: vec![0.0; 4], y: 0 }];
        let s = TaskBatch::new(&ex, 1).unwrap();
        assert!(support_loss(&bb, &layout, &theta, &s).is_err());
        let ep = episode(4);
        let s = TaskBatch::support(&ep).unwrap();
        assert!(matches!(
            support_loss(&bb, &layout, &theta[1..], &s),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn prototypes_ignore_order_and_duplicates() {
        let (bb, layout, theta) = tiny();
        let ep = episode(4);
        let base = prototypes(&bb, &layout, &theta, &TaskBatch::support(&ep).unwrap()).unwrap();
        let mut rev = ep.support.clone();
        rev.reverse();
        let p = prototypes(&bb, &layout, &theta, &TaskBatch::new(&rev, 3).unwrap()).unwrap();
        assert!(relative_error(base.data(), p.data(), 1e-12) < 1e-12);

        let single: Vec<Example> = (0..3).map(|c| ep.support.iter().find(|e| e.y == c).unwrap().clone()).collect();
        let mut dup = single.clone();
        dup.extend(single.clone());
        let a = prototypes(&bb, &layout, &theta, &TaskBatch::new(&single, 3).unwrap()).unwrap();
        let b = prototypes(&bb, &layout, &theta, &TaskBatch::new(&dup, 3).unwrap()).unwrap();
        assert!(relative_error(a.data(), b.data(), 1e-12) < 1e-12);
        let e0 = bb.embed(&layout, &theta, &Tensor::matrix(1, 4, single[0].x.clone()).unwrap()).unwrap();
        assert!(relative_error(&a.data()[..5], e0.data(), 1e-12) < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (bb, _, _) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.ck");
        bb.save(&path).unwrap();
        let back = Backbone::load(&path).unwrap();
        assert_eq!(back.checksum(), bb.checksum());
        assert_eq!(back.dims(), bb.dims());
    }

    #[test]
    fn short_meta_training_is_deterministic_and_freezes() {
        let doms = make_domains(5, 2, 0, 8, &DomainParams::default()).unwrap();
        let cfg = MetaTrainConfig {
            hidden: vec![8, 8],
            epochs: 1,
            episodes_per_epoch: 20,
            ..MetaTrainConfig::default()
        };
        let a = meta_train_backbone(&doms, &cfg, 9).unwrap();
        let b = meta_train_backbone(&doms, &cfg, 9).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert!(a.params.entries().iter().all(|e| !e.trainable));
    }
}
