//! Evaluation of adaptation variants: per-episode query accuracy,
//! aggregated per domain and per domain group with normal-approximation
//! 95% intervals.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::drift::DriftNet;
use crate::episodes::{DomainSpec, Episode, Severity};
use crate::error::{Error, Result};
use crate::model::{accuracy, Backbone, BiasLayout, TaskBatch};
use crate::solver::{euler_adapt, finetune_adapt, hypernet_adapt, AdaptResult, SolveConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Direct,
    #[serde(rename = "hyperflow-L")]
    HyperflowL,
    #[serde(rename = "hyperflow-C")]
    HyperflowC,
    Hypernet,
    BiasTune,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Direct,
        Variant::HyperflowL,
        Variant::HyperflowC,
        Variant::Hypernet,
        Variant::BiasTune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Direct => "direct",
            Variant::HyperflowL => "hyperflow-L",
            Variant::HyperflowC => "hyperflow-C",
            Variant::Hypernet => "hypernet",
            Variant::BiasTune => "bias-tune",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How a variant turns a support set into adapted biases.
#[derive(Debug, Clone, Copy)]
pub enum Method<'a> {
    Direct,
    Euler { net: &'a DriftNet, steps: usize, eta: f64 },
    Hypernet { net: &'a DriftNet },
    FineTune { steps: usize, lr_grid: &'a [f64] },
}

pub fn adapt(
    bb: &Backbone,
    layout: &BiasLayout,
    theta_init: &[f64],
    method: Method,
    support: &TaskBatch,
    diagnostics: bool,
) -> Result<AdaptResult> {
    match method {
        Method::Direct => {
            let mut cfg = SolveConfig::new(0, 1.0);
            cfg.diagnostics = diagnostics;
            // Zero Euler steps is the identity and needs no net.
            finetune_or_identity(bb, layout, theta_init, support, cfg)
        }
        Method::Euler { net, steps, eta } => euler_adapt(
            net,
            bb,
            layout,
            support,
            theta_init,
            &SolveConfig {
                steps,
                eta,
                diagnostics,
            },
        ),
        Method::Hypernet { net } => hypernet_adapt(net, bb, layout, support, theta_init, diagnostics),
        Method::FineTune { steps, lr_grid } => finetune_adapt(bb, layout, support, theta_init, steps, lr_grid),
    }
}

fn finetune_or_identity(
    bb: &Backbone,
    layout: &BiasLayout,
    theta_init: &[f64],
    support: &TaskBatch,
    cfg: SolveConfig,
) -> Result<AdaptResult> {
    if cfg.diagnostics {
        finetune_adapt(bb, layout, support, theta_init, 0, &[1.0])
    } else {
        layout.check(bb, theta_init)?;
        Ok(AdaptResult {
            theta: theta_init.to_vec(),
            trace: vec![(0.0, f64::NAN)],
            wall_ms: 0.0,
            peak_transient_bytes: 0,
            drift_forwards: 0,
            backward_passes: 0,
            graph_nodes: 0,
        })
    }
}

/// Per-episode outcome; a diverged adaptation scores zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScore {
    pub episode_id: u64,
    pub domain: u32,
    pub accuracy: f64,
    pub diverged: bool,
    /// Adaptation wall time; kept out of every aggregated report.
    pub adapt_ms: f64,
}

pub fn score_episodes(
    bb: &Backbone,
    layout: &BiasLayout,
    theta_init: &[f64],
    method: Method,
    episodes: &[Episode],
) -> Result<Vec<EpisodeScore>> {
    episodes
        .iter()
        .map(|ep| {
            let support = TaskBatch::support(ep)?;
            let t0 = std::time::Instant::now();
            let outcome = adapt(bb, layout, theta_init, method, &support, false);
            let adapt_ms = t0.elapsed().as_secs_f64() * 1e3;
            let (acc, diverged) = match outcome {
                Ok(r) => (accuracy(bb, layout, &r.theta, ep)?, false),
                Err(Error::Diverged { .. }) => (0.0, true),
                Err(e) => return Err(e),
            };
            Ok(EpisodeScore {
                episode_id: ep.id,
                domain: ep.domain,
                accuracy: acc,
                diverged,
                adapt_ms,
            })
        })
        .collect()
}

/// Mean with a 95% normal-approximation half-width over per-item values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Summary {
        let n = xs.len();
        if n == 0 {
            return Summary {
                mean: f64::NAN,
                ci95: f64::NAN,
                n,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let ci95 = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * (var / n as f64).sqrt()
        } else {
            0.0
        };
        Summary { mean, ci95, n }
    }

    pub fn lo(&self) -> f64 {
        self.mean - self.ci95
    }

    pub fn hi(&self) -> f64 {
        self.mean + self.ci95
    }

    /// Intervals are disjoint and `self` lies entirely above `other`.
    pub fn clearly_above(&self, other: &Summary) -> bool {
        self.lo() > other.hi()
    }

    pub fn overlaps(&self, other: &Summary) -> bool {
        self.lo() <= other.hi() && other.lo() <= self.hi()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub variant: Variant,
    pub benchmark: String,
    /// `domain-<id>`, `base` or `ood`.
    pub scope: String,
    pub mean: f64,
    pub ci95: f64,
    pub episodes: usize,
    pub diverged: usize,
}

impl EvalRow {
    pub fn summary(&self) -> Summary {
        Summary {
            mean: self.mean,
            ci95: self.ci95,
            n: self.episodes,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fingerprint: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn get(&self, variant: Variant, benchmark: &str, scope: &str) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.benchmark == benchmark && r.scope == scope)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,benchmark,scope,mean_acc,ci95,episodes,diverged\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:.6},{:.6},{},{}\n",
                r.variant, r.benchmark, r.scope, r.mean, r.ci95, r.episodes, r.diverged
            ));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<12} {:<10} {:<10} {:>8} {:>8} {:>6}\n", "variant", "benchmark", "scope", "acc%", "±ci95", "n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<12} {:<10} {:<10} {:>8.2} {:>8.2} {:>6}\n",
                r.variant.name(),
                r.benchmark,
                r.scope,
                100.0 * r.mean,
                100.0 * r.ci95,
                r.episodes
            ));
        }
        s
    }
}

/// Rows per domain (in id order) followed by the base and ood groups.
pub fn aggregate(variant: Variant, benchmark: &str, scores: &[EpisodeScore], domains: &[DomainSpec]) -> Vec<EvalRow> {
    let severity: BTreeMap<u32, Severity> = domains.iter().map(|d| (d.id, d.severity)).collect();
    let mut by_domain: BTreeMap<u32, Vec<&EpisodeScore>> = BTreeMap::new();
    for s in scores {
        by_domain.entry(s.domain).or_default().push(s);
    }
    let row = |scope: String, items: &[&EpisodeScore]| {
        let xs: Vec<f64> = items.iter().map(|s| s.accuracy).collect();
        let sm = Summary::of(&xs);
        EvalRow {
            variant,
            benchmark: benchmark.to_string(),
            scope,
            mean: sm.mean,
            ci95: sm.ci95,
            episodes: sm.n,
            diverged: items.iter().filter(|s| s.diverged).count(),
        }
    };
    let mut rows: Vec<EvalRow> = by_domain.iter().map(|(id, items)| row(format!("domain-{id}"), items)).collect();
    for (name, sev) in [("base", Severity::Base), ("ood", Severity::Ood)] {
        let items: Vec<&EpisodeScore> = scores.iter().filter(|s| severity.get(&s.domain) == Some(&sev)).collect();
        if !items.is_empty() {
            rows.push(row(name.to_string(), &items));
        }
    }
    rows
}

/// Relative support-loss curves `L(θ_k)/L(θ_0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurves {
    pub variant: Variant,
    pub curves: Vec<Vec<f64>>,
    /// Fraction of curves whose last value is below 1.
    pub fraction_below_one: f64,
    pub diverged: usize,
}

pub fn loss_trajectory_report(
    bb: &Backbone,
    layout: &BiasLayout,
    theta_init: &[f64],
    variant: Variant,
    method: Method,
    episodes: &[Episode],
) -> Result<LossCurves> {
    if matches!(method, Method::Direct | Method::Hypernet { .. }) {
        return Err(Error::InvalidArgument(format!("{variant} does not adapt iteratively")));
    }
    let mut curves = Vec::with_capacity(episodes.len());
    let mut diverged = 0;
    for ep in episodes {
        let support = TaskBatch::support(ep)?;
        match adapt(bb, layout, theta_init, method, &support, true) {
            Ok(r) => curves.push(r.relative_losses()),
            Err(Error::Diverged { .. }) => diverged += 1,
            Err(e) => return Err(e),
        }
    }
    let below = curves.iter().filter(|c| c.last().is_some_and(|&l| l < 1.0)).count();
    Ok(LossCurves {
        variant,
        fraction_below_one: below as f64 / episodes.len().max(1) as f64,
        curves,
        diverged,
    })
}
