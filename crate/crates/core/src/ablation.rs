//! Data ablations for the drift net and the steps-versus-accuracy frontier.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::drift::{train_drift, DriftNet, TrainConfig};
use crate::episodes::{DomainSpec, Episode, Severity};
use crate::error::{Error, Result};
use crate::eval::{aggregate, score_episodes, EvalRow, Method, Summary, Variant};
use crate::model::{Backbone, BiasLayout};
use crate::solver::{eta_grid, step_size_search};
use crate::trajectories::{compute_normalization_stats, TrajectoryDataset, TrajectoryStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Number of base domains the trajectories come from.
    Domains,
    /// Episodes per domain.
    Tasks,
    /// Perturbed initializations per episode.
    Inits,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Domains => "domains",
            Axis::Tasks => "tasks",
            Axis::Inits => "inits",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "domains" => Ok(Axis::Domains),
            "tasks" => Ok(Axis::Tasks),
            "inits" => Ok(Axis::Inits),
            _ => Err(Error::InvalidArgument(format!("unknown ablation axis {s:?}"))),
        }
    }
}

/// Keeps the part of `store` selected by `level` along `axis` and recomputes
/// its normalization statistics. `domain_of` maps episode ids to domains;
/// domains are taken in ascending id order, episodes and inits in store order.
pub fn restrict_store(store: &TrajectoryStore, domain_of: &HashMap<u64, u32>, axis: Axis, level: usize) -> Result<TrajectoryStore> {
    if level == 0 {
        return Err(Error::InvalidArgument("ablation level must be >= 1".into()));
    }
    let domain = |id: u64| {
        domain_of
            .get(&id)
            .copied()
            .ok_or_else(|| Error::MissingArtifact(format!("episode {id}")))
    };
    let mut keep = Vec::new();
    match axis {
        Axis::Domains => {
            let all: BTreeSet<u32> = store.trajectories.iter().map(|t| domain(t.episode_id)).collect::<Result<_>>()?;
            if level > all.len() {
                return Err(Error::InvalidArgument(format!("{level} domains requested, {} available", all.len())));
            }
            let chosen: BTreeSet<u32> = all.into_iter().take(level).collect();
            for t in &store.trajectories {
                if chosen.contains(&domain(t.episode_id)?) {
                    keep.push(t.clone());
                }
            }
        }
        Axis::Tasks => {
            let mut per_domain: HashMap<u32, Vec<u64>> = HashMap::new();
            for t in &store.trajectories {
                let eps = per_domain.entry(domain(t.episode_id)?).or_default();
                if eps.last() != Some(&t.episode_id) {
                    eps.push(t.episode_id);
                }
            }
            let available = per_domain.values().map(Vec::len).min().unwrap_or(0);
            if level > available {
                return Err(Error::InvalidArgument(format!("{level} tasks per domain requested, {available} available")));
            }
            let chosen: BTreeSet<u64> = per_domain.values().flat_map(|v| v[..level].iter().copied()).collect();
            keep.extend(store.trajectories.iter().filter(|t| chosen.contains(&t.episode_id)).cloned());
        }
        Axis::Inits => {
            let mut seen: HashMap<u64, usize> = HashMap::new();
            for t in &store.trajectories {
                *seen.entry(t.episode_id).or_default() += 1;
            }
            let available = seen.values().copied().min().unwrap_or(0);
            if level > available {
                return Err(Error::InvalidArgument(format!("{level} inits per episode requested, {available} available")));
            }
            let mut taken: HashMap<u64, usize> = HashMap::new();
            for t in &store.trajectories {
                let n = taken.entry(t.episode_id).or_default();
                if *n < level {
                    *n += 1;
                    keep.push(t.clone());
                }
            }
        }
    }
    let stats = compute_normalization_stats(&keep)?;
    Ok(TrajectoryStore {
        stats: Some(stats),
        trajectories: keep,
        ..store.clone()
    })
}

/// Frozen pieces shared by every retraining and evaluation in a sweep.
pub struct SweepContext<'a> {
    pub bb: &'a Backbone,
    pub layout: &'a BiasLayout,
    pub theta_init: &'a [f64],
    pub domains: &'a [DomainSpec],
    pub dataset: &'a TrajectoryDataset,
    pub drift: TrainConfig,
    pub steps: usize,
    pub eta_multipliers: &'a [f64],
    pub val_ood: &'a [Episode],
    pub val_base: &'a [Episode],
    pub test_ood: &'a [Episode],
    pub test_base: &'a [Episode],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationLevel {
    pub axis: Axis,
    pub level: usize,
    pub trajectories: usize,
    pub eta_ood: f64,
    pub eta_base: f64,
    pub ood: EvalRow,
    pub base: EvalRow,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub fingerprint: String,
    pub levels: Vec<AblationLevel>,
}

impl AblationReport {
    pub fn axis(&self, axis: Axis) -> Vec<&AblationLevel> {
        self.levels.iter().filter(|l| l.axis == axis).collect()
    }

    /// Adjacent levels never drop by more than the intervals explain.
    pub fn non_decreasing_ood(&self, axis: Axis) -> bool {
        self.axis(axis)
            .windows(2)
            .all(|w| !w[0].ood.summary().clearly_above(&w[1].ood.summary()))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("axis,level,trajectories,eta_ood,eta_base,ood_mean,ood_ci95,base_mean,base_ci95\n");
        for l in &self.levels {
            s.push_str(&format!(
                "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                l.axis, l.level, l.trajectories, l.eta_ood, l.eta_base, l.ood.mean, l.ood.ci95, l.base.mean, l.base.ci95
            ));
        }
        s
    }
}

fn group_row(rows: Vec<EvalRow>, scope: &str) -> Result<EvalRow> {
    rows.into_iter()
        .find(|r| r.scope == scope)
        .ok_or_else(|| Error::Empty("evaluation group"))
}

fn tuned_eval(ctx: &SweepContext, net: &DriftNet, val: &[Episode], test: &[Episode], scope: &str) -> Result<(f64, EvalRow)> {
    let grid = eta_grid(net, ctx.steps, ctx.eta_multipliers);
    let eta = step_size_search(net, ctx.bb, ctx.layout, ctx.theta_init, val, &grid, ctx.steps)?.best_eta;
    let method = Method::Euler {
        net,
        steps: ctx.steps,
        eta,
    };
    let scores = score_episodes(ctx.bb, ctx.layout, ctx.theta_init, method, test)?;
    let variant = match net.objective {
        crate::drift::Objective::Linear => Variant::HyperflowL,
        crate::drift::Objective::Cubic => Variant::HyperflowC,
        crate::drift::Objective::Hypernet => Variant::Hypernet,
    };
    Ok((eta, group_row(aggregate(variant, "md", &scores, ctx.domains), scope)?))
}

/// Evaluates a drift net trained on the full store as the top level, or
/// retrains on each restricted subset. `full` is reused for any level that
/// selects the whole store.
pub fn ablation_sweep(ctx: &SweepContext, axis: Axis, levels: &[usize], full: Option<&DriftNet>) -> Result<Vec<AblationLevel>> {
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("ablation levels must be strictly ascending".into()));
    }
    if ctx.domains.iter().any(|d| d.severity == Severity::Ood && ctx.test_base.iter().any(|e| e.domain == d.id)) {
        return Err(Error::InvalidArgument("base test episodes include an OOD domain".into()));
    }
    let domain_of: HashMap<u64, u32> = ctx
        .dataset
        .train_episodes
        .iter()
        .chain(&ctx.dataset.val_episodes)
        .map(|e| (e.id, e.domain))
        .collect();
    let episodes: Vec<&Episode> = ctx.dataset.train_episodes.iter().chain(&ctx.dataset.val_episodes).collect();
    let mut out = Vec::with_capacity(levels.len());
    for &level in levels {
        let train = restrict_store(&ctx.dataset.train, &domain_of, axis, level)?;
        let is_full = train.len() == ctx.dataset.train.len();
        let trained;
        let net = match full {
            Some(n) if is_full => n,
            _ => {
                let val = match axis {
                    Axis::Domains => restrict_store(&ctx.dataset.val, &domain_of, axis, level.min(distinct_domains(&ctx.dataset.val, &domain_of)))?,
                    _ => ctx.dataset.val.clone(),
                };
                trained = train_drift(ctx.bb, ctx.layout, ctx.theta_init, &train, &val, &episodes, &ctx.drift)?.0;
                &trained
            }
        };
        let (eta_ood, ood) = tuned_eval(ctx, net, ctx.val_ood, ctx.test_ood, "ood")?;
        let (eta_base, base) = tuned_eval(ctx, net, ctx.val_base, ctx.test_base, "base")?;
        out.push(AblationLevel {
            axis,
            level,
            trajectories: train.len(),
            eta_ood,
            eta_base,
            ood,
            base,
        });
    }
    Ok(out)
}

fn distinct_domains(store: &TrajectoryStore, domain_of: &HashMap<u64, u32>) -> usize {
    store
        .trajectories
        .iter()
        .filter_map(|t| domain_of.get(&t.episode_id))
        .collect::<BTreeSet<_>>()
        .len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub variant: Variant,
    pub steps: usize,
    pub mean_acc: f64,
    pub ci95: f64,
    pub adapt_ms: f64,
    /// Tuned step size for drift variants.
    pub eta: Option<f64>,
}

pub fn frontier_csv(rows: &[FrontierRow]) -> String {
    let mut s = String::from("variant,steps,mean_acc,ci95,adapt_ms\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.6},{:.6},{:.4}\n", r.variant, r.steps, r.mean_acc, r.ci95, r.adapt_ms));
    }
    s
}

/// Accuracy and per-episode adaptation time at each step count. Drift
/// variants get η re-tuned per level on `val`.
#[allow(clippy::too_many_arguments)]
pub fn steps_frontier(
    bb: &Backbone,
    layout: &BiasLayout,
    theta_init: &[f64],
    nets: &[(Variant, &DriftNet)],
    lr_grid: &[f64],
    levels: &[usize],
    eta_multipliers: &[f64],
    val: &[Episode],
    test: &[Episode],
) -> Result<Vec<FrontierRow>> {
    let mut rows = Vec::new();
    for &steps in levels {
        for &(variant, net) in nets {
            let grid = eta_grid(net, steps, eta_multipliers);
            let eta = step_size_search(net, bb, layout, theta_init, val, &grid, steps)?.best_eta;
            let scores = score_episodes(bb, layout, theta_init, Method::Euler { net, steps, eta }, test)?;
            rows.push(frontier_row(variant, steps, &scores, Some(eta)));
        }
        if !lr_grid.is_empty() {
            let scores = score_episodes(bb, layout, theta_init, Method::FineTune { steps, lr_grid }, test)?;
            rows.push(frontier_row(Variant::BiasTune, steps, &scores, None));
        }
    }
    Ok(rows)
}

fn frontier_row(variant: Variant, steps: usize, scores: &[crate::eval::EpisodeScore], eta: Option<f64>) -> FrontierRow {
    let acc = Summary::of(&scores.iter().map(|s| s.accuracy).collect::<Vec<_>>());
    let ms = scores.iter().map(|s| s.adapt_ms).sum::<f64>() / scores.len().max(1) as f64;
    FrontierRow {
        variant,
        steps,
        mean_acc: acc.mean,
        ci95: acc.ci95,
        adapt_ms: ms,
        eta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectories::{SimConfig, Trajectory};

    fn store(domains: u32, eps: u64, inits: usize) -> (TrajectoryStore, HashMap<u64, u32>) {
        let mut trajs = Vec::new();
        let mut dom = HashMap::new();
        for d in 0..domains {
            for e in 0..eps {
                let id = 100 * d as u64 + e;
                dom.insert(id, d);
                for i in 0..inits {
                    let x = (id * 10 + i as u64) as f64;
                    trajs.push(Trajectory {
                        episode_id: id,
                        episode_offset: 0,
                        init_seed: i as u64,
                        perturb_std: 0.1,
                        points: vec![x, 0.0, x + 1.0, 1.0],
                        losses: vec![1.0, 0.5],
                    });
                }
            }
        }
        let s = TrajectoryStore {
            split: crate::episodes::Split::Train,
            dim: 2,
            steps: 1,
            layout_hash: 7,
            sim: SimConfig::default(),
            stats: Some(compute_normalization_stats(&trajs).unwrap()),
            trajectories: trajs,
        };
        (s, dom)
    }

    #[test]
    fn restriction_sizes() {
        let (s, dom) = store(4, 3, 5);
        assert_eq!(restrict_store(&s, &dom, Axis::Domains, 1).unwrap().len(), 15);
        assert_eq!(restrict_store(&s, &dom, Axis::Domains, 4).unwrap().len(), 60);
        assert_eq!(restrict_store(&s, &dom, Axis::Tasks, 2).unwrap().len(), 40);
        let one = restrict_store(&s, &dom, Axis::Inits, 1).unwrap();
        assert_eq!(one.len(), 12);
        assert!(one.trajectories.iter().all(|t| t.init_seed == 0));
        assert!(restrict_store(&s, &dom, Axis::Domains, 5).is_err());
        assert!(restrict_store(&s, &dom, Axis::Inits, 6).is_err());
        assert!(restrict_store(&s, &dom, Axis::Tasks, 0).is_err());
    }

    #[test]
    fn restriction_recomputes_stats() {
        let (s, dom) = store(4, 3, 5);
        let r = restrict_store(&s, &dom, Axis::Domains, 1).unwrap();
        let direct = compute_normalization_stats(&r.trajectories).unwrap();
        assert_eq!(r.stats.as_ref(), Some(&direct));
        assert_ne!(r.stats, s.stats);
        let first: BTreeSet<u32> = r.trajectories.iter().map(|t| dom[&t.episode_id]).collect();
        assert_eq!(first.into_iter().collect::<Vec<_>>(), [0]);
    }

    #[test]
    fn axis_round_trips() {
        for a in [Axis::Domains, Axis::Tasks, Axis::Inits] {
            assert_eq!(a.to_string().parse::<Axis>().unwrap(), a);
        }
        assert!("seeds".parse::<Axis>().is_err());
    }

    #[test]
    fn frontier_schema_is_fixed() {
        let rows = [FrontierRow {
            variant: Variant::HyperflowC,
            steps: 20,
            mean_acc: 0.5,
            ci95: 0.01,
            adapt_ms: 1.0,
            eta: Some(0.1),
        }];
        let csv = frontier_csv(&rows);
        assert_eq!(csv.lines().next().unwrap(), "variant,steps,mean_acc,ci95,adapt_ms");
        assert!(csv.lines().nth(1).unwrap().starts_with("hyperflow-C,20,"));
    }
}
