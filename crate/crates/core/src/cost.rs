//! Cost profiling: wall time, pass counts and transient allocation of each
//! adaptation variant on identical episodes.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::drift::{Architecture, DriftNet, Objective};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::eval::{adapt, Method, Variant};
use crate::model::{accuracy, select_bias_params, Backbone, BiasLayout, BiasSelector, TaskBatch};
use crate::solver::{euler_adapt, finetune_adapt, SolveConfig};
use crate::trajectories::NormStats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantCost {
    pub variant: Variant,
    /// Median over repeats of the mean per-episode adaptation time.
    pub adapt_ms: f64,
    /// Same, for classifying the query set with the adapted biases.
    pub inference_ms: f64,
    pub drift_forwards: u64,
    pub task_encodings: u64,
    pub backward_passes: u64,
    pub graph_nodes: u64,
    /// Largest per-episode adaptation-phase transient allocation.
    pub peak_transient_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthProbe {
    pub shallow_dims: Vec<usize>,
    pub deep_dims: Vec<usize>,
    pub euler_bytes: [usize; 2],
    pub finetune_bytes: [usize; 2],
}

impl DepthProbe {
    /// Relative change of the Euler transient from shallow to deep.
    pub fn euler_change(&self) -> f64 {
        rel_change(self.euler_bytes)
    }

    pub fn finetune_change(&self) -> f64 {
        rel_change(self.finetune_bytes)
    }
}

fn rel_change([a, b]: [usize; 2]) -> f64 {
    (b as f64 - a as f64).abs() / (a as f64).max(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub fingerprint: String,
    pub repeats: usize,
    pub episodes: usize,
    pub rows: Vec<VariantCost>,
    pub depth: Option<DepthProbe>,
}

impl CostReport {
    pub fn get(&self, variant: Variant) -> Option<&VariantCost> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "variant,adapt_ms,inference_ms,drift_forwards,task_encodings,backward_passes,graph_nodes,peak_transient_bytes\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.4},{:.4},{},{},{},{},{}\n",
                r.variant, r.adapt_ms, r.inference_ms, r.drift_forwards, r.task_encodings, r.backward_passes, r.graph_nodes, r.peak_transient_bytes
            ));
        }
        s
    }
}

pub fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Runs every variant over `episodes` once as warm-up and then `repeats`
/// timed passes. Timing is single-threaded by construction.
pub fn profile_cost(
    bb: &Backbone,
    layout: &BiasLayout,
    theta_init: &[f64],
    variants: &[(Variant, Method)],
    episodes: &[Episode],
    repeats: usize,
) -> Result<CostReport> {
    if repeats < 3 {
        return Err(Error::InvalidArgument(format!("profiling needs >= 3 repeats, got {repeats}")));
    }
    if episodes.is_empty() {
        return Err(Error::Empty("profiling episodes"));
    }
    let supports = episodes.iter().map(TaskBatch::support).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(variants.len());
    for &(variant, method) in variants {
        let mut adapt_ms = Vec::with_capacity(repeats);
        let mut infer_ms = Vec::with_capacity(repeats);
        let mut row = VariantCost {
            variant,
            adapt_ms: 0.0,
            inference_ms: 0.0,
            drift_forwards: 0,
            task_encodings: 0,
            backward_passes: 0,
            graph_nodes: 0,
            peak_transient_bytes: 0,
        };
        for rep in 0..=repeats {
            let (mut a, mut q) = (0.0, 0.0);
            for (ep, s) in episodes.iter().zip(&supports) {
                let t0 = Instant::now();
                let r = adapt(bb, layout, theta_init, method, s, false)?;
                a += t0.elapsed().as_secs_f64() * 1e3;
                let t1 = Instant::now();
                std::hint::black_box(accuracy(bb, layout, &r.theta, ep)?);
                q += t1.elapsed().as_secs_f64() * 1e3;
                if rep == 0 {
                    row.drift_forwards = row.drift_forwards.max(r.drift_forwards);
                    row.task_encodings = u64::from(r.drift_forwards > 0);
                    row.backward_passes = row.backward_passes.max(r.backward_passes);
                    row.graph_nodes = row.graph_nodes.max(r.graph_nodes);
                    row.peak_transient_bytes = row.peak_transient_bytes.max(r.peak_transient_bytes);
                }
            }
            if rep > 0 {
                adapt_ms.push(a / episodes.len() as f64);
                infer_ms.push(q / episodes.len() as f64);
            }
        }
        row.adapt_ms = median(&mut adapt_ms);
        row.inference_ms = median(&mut infer_ms);
        rows.push(row);
    }
    Ok(CostReport {
        fingerprint: String::new(),
        repeats,
        episodes: episodes.len(),
        rows,
        depth: None,
    })
}

/// Adaptation-phase transient allocation for Euler and fine-tuning on a
/// backbone and on one with the hidden stack doubled. θ is restricted to the
/// first two layers so its size, and hence the drift net, is the same for
/// both depths.
pub fn depth_probe(hidden: &[usize], episode: &Episode, steps: usize, seed: u64) -> Result<DepthProbe> {
    if hidden.is_empty() {
        return Err(Error::InvalidArgument("depth probe needs at least one hidden layer".into()));
    }
    let d = episode.dim();
    let shallow: Vec<usize> = std::iter::once(d).chain(hidden.iter().copied()).collect();
    let deep: Vec<usize> = std::iter::once(d).chain(hidden.iter().chain(hidden).copied()).collect();
    let support = TaskBatch::support(episode)?;
    let selector = BiasSelector::Layers(vec![0, 1.min(hidden.len() - 1)]);
    let mut euler_bytes = [0; 2];
    let mut finetune_bytes = [0; 2];
    for (i, dims) in [&shallow, &deep].into_iter().enumerate() {
        let bb = Backbone::new(dims, 1.0, seed)?;
        let (layout, theta) = select_bias_params(&bb, &selector)?;
        let p = theta.len();
        let stats = NormStats {
            mean: theta.clone(),
            std: vec![1.0; p],
            drift_scale: vec![1e-3; p],
        };
        let net = DriftNet::new(Architecture::default(), Objective::Cubic, 10, &bb, &layout, stats, seed)?;
        let cfg = SolveConfig {
            steps,
            eta: 1.0 / steps.max(1) as f64,
            diagnostics: false,
        };
        euler_bytes[i] = euler_adapt(&net, &bb, &layout, &support, &theta, &cfg)?.peak_transient_bytes;
        finetune_bytes[i] = finetune_adapt(&bb, &layout, &support, &theta, steps, &[1e-2])?.peak_transient_bytes;
    }
    Ok(DepthProbe {
        shallow_dims: shallow,
        deep_dims: deep,
        euler_bytes,
        finetune_bytes,
    })
}
