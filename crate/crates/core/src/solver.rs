//! Test-time adaptation engines.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::counters::{AllocProbe, Counts};
use crate::drift::{encode_task, DriftField, DriftNet, Objective};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::model::{accuracy, support_loss, Backbone, BiasLayout, TaskBatch};
use crate::trajectories::{simulate_trajectory, Optimizer, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub steps: usize,
    pub eta: f64,
    /// Record the support loss after every step (costs one forward each).
    pub diagnostics: bool,
}

impl SolveConfig {
    pub fn new(steps: usize, eta: f64) -> Self {
        SolveConfig {
            steps,
            eta,
            diagnostics: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps > 0 && !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("step size must be > 0, got {}", self.eta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptResult {
    pub theta: Vec<f64>,
    /// `(t, support loss)` at each of the N+1 iterates; empty losses are NaN
    /// when diagnostics are off.
    pub trace: Vec<(f64, f64)>,
    pub wall_ms: f64,
    pub peak_transient_bytes: usize,
    pub drift_forwards: u64,
    pub backward_passes: u64,
    pub graph_nodes: u64,
}

impl AdaptResult {
    /// `L(θ_k)/L(θ_0)`; a support set already at zero loss stays at 1 while
    /// it remains there.
    pub fn relative_losses(&self) -> Vec<f64> {
        let l0 = self.trace.first().map_or(f64::NAN, |x| x.1);
        self.trace
            .iter()
            .map(|&(_, l)| if l0 == 0.0 && l == 0.0 { 1.0 } else { l / l0 })
            .collect()
    }
}

/// Guard against runaway solves: ‖θ‖ beyond this multiple of its initial
/// norm aborts.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

struct Meter {
    probe: AllocProbe,
    counts: Counts,
    start: Instant,
}

impl Meter {
    fn start() -> Self {
        Meter {
            probe: AllocProbe::start(),
            counts: Counts::now(),
            start: Instant::now(),
        }
    }

    fn finish(self, theta: Vec<f64>, trace: Vec<(f64, f64)>, drift_forwards: u64) -> AdaptResult {
        let wall_ms = self.start.elapsed().as_secs_f64() * 1e3;
        let c = Counts::now().since(self.counts);
        AdaptResult {
            theta,
            trace,
            wall_ms,
            peak_transient_bytes: self.probe.peak_transient(),
            drift_forwards,
            backward_passes: c.backward_passes,
            graph_nodes: c.graph_nodes,
        }
    }
}

/// Euler integration of the learned drift from θ_init: `θ ← θ + η·v̂(θ, t_k)`
/// with `t_k = k·T/N`. Reads only the support set and never differentiates
/// the target model.
pub fn euler_adapt(
    net: &DriftNet,
    bb: &Backbone,
    layout: &BiasLayout,
    support: &TaskBatch,
    theta_init: &[f64],
    cfg: &SolveConfig,
) -> Result<AdaptResult> {
    cfg.validate()?;
    net.check_backbone(bb, layout)?;
    layout.check(bb, theta_init)?;
    let meter = Meter::start();
    let loss = |theta: &[f64]| -> Result<f64> {
        if cfg.diagnostics {
            support_loss(bb, layout, theta, support)
        } else {
            Ok(f64::NAN)
        }
    };
    let mut theta = theta_init.to_vec();
    let mut trace = vec![(0.0, loss(&theta)?)];
    if cfg.steps == 0 {
        return Ok(meter.finish(theta, trace, 0));
    }
    let field = DriftField::new(net, &encode_task(net, bb, theta_init, support)?)?;
    let big_t = net.steps as f64;
    let limit = DIVERGENCE_FACTOR * norm(theta_init).max(1.0);
    for k in 0..cfg.steps {
        let t = k as f64 * big_t / cfg.steps as f64;
        let v = field.raw(&theta, t)?;
        theta.iter_mut().zip(&v).for_each(|(x, v)| *x += cfg.eta * v);
        if theta.iter().any(|x| !x.is_finite()) || norm(&theta) > limit {
            return Err(Error::Diverged {
                step: k + 1,
                detail: format!("‖θ‖ = {:.3e} exceeds guard {:.3e}", norm(&theta), limit),
            });
        }
        trace.push(((k + 1) as f64 * big_t / cfg.steps as f64, loss(&theta)?));
    }
    Ok(meter.finish(theta, trace, cfg.steps as u64))
}

/// One drift query at `(θ_init, t = 0)`, added with unit step.
pub fn hypernet_adapt(
    net: &DriftNet,
    bb: &Backbone,
    layout: &BiasLayout,
    support: &TaskBatch,
    theta_init: &[f64],
    diagnostics: bool,
) -> Result<AdaptResult> {
    if net.objective != Objective::Hypernet {
        return Err(Error::Incompatible(format!("net trained for {:?}, not hypernet", net.objective)));
    }
    euler_adapt(
        net,
        bb,
        layout,
        support,
        theta_init,
        &SolveConfig {
            steps: 1,
            eta: 1.0,
            diagnostics,
        },
    )
}

/// Adam bias-tuning on the support loss for each learning rate; keeps the
/// run with the lowest final support loss.
pub fn finetune_adapt(
    bb: &Backbone,
    layout: &BiasLayout,
    support: &TaskBatch,
    theta_init: &[f64],
    steps: usize,
    lr_grid: &[f64],
) -> Result<AdaptResult> {
    if lr_grid.is_empty() {
        return Err(Error::Empty("learning-rate grid"));
    }
    layout.check(bb, theta_init)?;
    let meter = Meter::start();
    if steps == 0 {
        let l0 = support_loss(bb, layout, theta_init, support)?;
        return Ok(meter.finish(theta_init.to_vec(), vec![(0.0, l0)], 0));
    }
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let mut last_err = None;
    for &lr in lr_grid {
        let cfg = SimConfig {
            steps,
            optimizer: Optimizer::Adam,
            lr,
            perturb_std: 0.0,
            ..SimConfig::default()
        };
        match simulate_trajectory(bb, layout, support, theta_init, &cfg) {
            Ok((points, losses)) => {
                let fin = losses[steps];
                if best.as_ref().is_none_or(|b| fin < b.0) {
                    let p = theta_init.len();
                    best = Some((fin, points[steps * p..].to_vec(), losses));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let (_, theta, losses) = best.ok_or_else(|| last_err.expect("grid is nonempty"))?;
    let trace = losses.into_iter().enumerate().map(|(k, l)| (k as f64, l)).collect();
    Ok(meter.finish(theta, trace, 0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSizeTable {
    pub steps: usize,
    /// `(η, mean query accuracy)` for every grid point, in grid order.
    pub rows: Vec<(f64, f64)>,
    pub best_eta: f64,
    pub best_accuracy: f64,
}

/// Multipliers of `T/N` in the default step-size grid.
pub const DEFAULT_ETA_MULTIPLIERS: [f64; 5] = [0.1, 0.25, 0.5, 1.0, 2.0];

/// `multipliers × T/N`, with `T` the trajectory length the net was trained on.
pub fn eta_grid(net: &DriftNet, steps: usize, multipliers: &[f64]) -> Vec<f64> {
    let base = net.steps as f64 / steps.max(1) as f64;
    multipliers.iter().map(|m| m * base).collect()
}

pub fn default_eta_grid(net: &DriftNet, steps: usize) -> Vec<f64> {
    eta_grid(net, steps, &DEFAULT_ETA_MULTIPLIERS)
}

/// Picks η by mean query accuracy on validation episodes. A diverging η
/// scores zero on the episodes it diverges on.
pub fn step_size_search(
    net: &DriftNet,
    bb: &Backbone,
    layout: &BiasLayout,
    theta_init: &[f64],
    val: &[Episode],
    grid: &[f64],
    steps: usize,
) -> Result<StepSizeTable> {
    if grid.is_empty() {
        return Err(Error::Empty("step-size grid"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation episodes"));
    }
    let supports = val.iter().map(TaskBatch::support).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(grid.len());
    for &eta in grid {
        let cfg = SolveConfig {
            steps,
            eta,
            diagnostics: false,
        };
        let mut total = 0.0;
        for (ep, s) in val.iter().zip(&supports) {
            total += match euler_adapt(net, bb, layout, s, theta_init, &cfg) {
                Ok(r) => accuracy(bb, layout, &r.theta, ep)?,
                Err(Error::Diverged { .. }) => 0.0,
                Err(e) => return Err(e),
            };
        }
        rows.push((eta, total / val.len() as f64));
    }
    let (best_eta, best_accuracy) = rows
        .iter()
        .copied()
        .fold((f64::NAN, f64::NEG_INFINITY), |b, r| if r.1 > b.1 { r } else { b });
    Ok(StepSizeTable {
        steps,
        rows,
        best_eta,
        best_accuracy,
    })
}
