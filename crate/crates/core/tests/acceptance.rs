//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 5 through 10 need two fresh runs of the default pipeline, which
//! take several minutes each. A FAIL is reported, not hidden: the process
//! exits non-zero only on harness errors, or on any FAIL when
//! `HYPERFLOW_STRICT_ACCEPTANCE=1` is set.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use hyperflow::autodiff::{finite_difference, relative_error};
use hyperflow::cost::CostReport;
use hyperflow::drift::{flow_matching_grad, flow_matching_loss, validation_groups, Architecture, DriftNet, Objective, TaskCache};
use hyperflow::episodes::{make_domains, sample_episode, DomainParams, Protocol, Severity, Split};
use hyperflow::eval::{EvalReport, Variant};
use hyperflow::ablation::{AblationReport, Axis};
use hyperflow::flows::{catmull_rom_coeffs, cubic_sample, linear_sample};
use hyperflow::model::{select_bias_params, support_loss, support_loss_grad, Backbone, BiasSelector, TaskBatch};
use hyperflow::pipeline::{episodes_for, load_artifacts, run_pipeline, Config, CurvesReport};
use hyperflow::rng;
use hyperflow::solver::{euler_adapt, hypernet_adapt, SolveConfig};
use hyperflow::trajectories::{collect_dataset, perturb_init, simulate, simulate_trajectory, CollectConfig, NormStats, Optimizer, SimConfig, Trajectory};
use rand::Rng as _;
use serde_json::Value;

type Outcome = Result<(bool, String), String>;

struct Ledger {
    rows: Vec<(u8, &'static str, Outcome)>,
}

impl Ledger {
    fn record(&mut self, id: u8, name: &'static str, outcome: Outcome) {
        let line = match &outcome {
            Ok((true, d)) => format!("PASS  criterion {id:>2}  {name}: {d}"),
            Ok((false, d)) => format!("FAIL  criterion {id:>2}  {name}: {d}"),
            Err(e) => format!("ERROR criterion {id:>2}  {name}: {e}"),
        };
        println!("{line}");
        self.rows.push((id, name, outcome));
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_trajectory(r: &mut rng::Rng, steps: usize, dim: usize) -> Trajectory {
    let points = (0..(steps + 1) * dim).map(|_| r.random_range(-3.0..3.0)).collect();
    Trajectory {
        episode_id: 0,
        episode_offset: 0,
        init_seed: 0,
        perturb_std: 0.0,
        points,
        losses: vec![0.0; steps + 1],
    }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn splines() -> Outcome {
    let start = Instant::now();
    let mut r = rng::stream(&[1, rng::tag("acceptance-splines")]);
    let (mut knot, mut c1, mut collinear, mut linear) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for case in 0..200 {
        let steps = 2 + case % 12;
        let dim = 1 + case % 9;
        let traj = random_trajectory(&mut r, steps, dim);
        for j in 0..=steps {
            knot = knot.max(max_abs(&cubic_sample(&traj, j as f64).map_err(err)?.theta, traj.point(j)));
        }
        for k in 1..steps {
            let left = catmull_rom_coeffs(&traj, k).map_err(err)?.eval(1.0).1;
            let right = catmull_rom_coeffs(&traj, k + 1).map_err(err)?.eval(0.0).1;
            c1 = c1.max(max_abs(&left, &right));
        }
        // Straight line and constant drift of magnitude θ_T − θ_0 per unit
        // normalized time, at random times.
        for _ in 0..5 {
            let t = r.random_range(0.0..=steps as f64);
            let s = linear_sample(&traj, t).map_err(err)?;
            let w = t / steps as f64;
            let want: Vec<f64> = traj.first().iter().zip(traj.last()).map(|(a, b)| (1.0 - w) * a + w * b).collect();
            let v: Vec<f64> = traj.first().iter().zip(traj.last()).map(|(a, b)| b - a).collect();
            linear = linear.max(max_abs(&s.theta, &want)).max(max_abs(&s.v, &v));
        }
        // Collinear, uniformly spaced knots: interior segments move in a
        // straight line at the knot spacing.
        let a: Vec<f64> = (0..dim).map(|_| r.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut line = traj.clone();
        for k in 0..=steps {
            for i in 0..dim {
                line.points[k * dim + i] = a[i] + k as f64 * b[i];
            }
        }
        for k in 2..steps {
            for u in [0.0, 0.25, 0.5, 0.9] {
                let (pos, vel) = catmull_rom_coeffs(&line, k).map_err(err)?.eval(u);
                let want: Vec<f64> = (0..dim).map(|i| a[i] + (k as f64 - 1.0 + u) * b[i]).collect();
                collinear = collinear.max(max_abs(&pos, &want)).max(max_abs(&vel, &b));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = knot <= 1e-10 && c1 <= 1e-9 && collinear <= 1e-12 && linear == 0.0 && secs < 10.0;
    Ok((
        pass,
        format!("knot {knot:.1e} (<=1e-10), C1 gap {c1:.1e} (<=1e-9), collinear interior {collinear:.1e}, linear flow {linear:.1e} (exact), {secs:.2}s (<10s)"),
    ))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst_target = 0.0f64;
    for i in 0..20u64 {
        let d = 4 + (i as usize % 5);
        let dims = [d, 3 + i as usize % 4, 2 + i as usize % 3];
        let bb = Backbone::new(&dims, 0.5 + 0.1 * i as f64, i).map_err(err)?;
        let (layout, theta) = select_bias_params(&bb, &BiasSelector::AllBias).map_err(err)?;
        let theta = perturb_init(&theta, 0.3, i).map_err(err)?;
        let doms = make_domains(i, 1, 1, d, &DomainParams::default()).map_err(err)?;
        let ep = sample_episode(&doms[(i % 2) as usize], Protocol::various(), Split::Train, i, i);
        let s = TaskBatch::support(&ep).map_err(err)?;
        let (_, g) = support_loss_grad(&bb, &layout, &theta, &s).map_err(err)?;
        let fd = finite_difference(&mut |t| support_loss(&bb, &layout, t, &s), &theta, 1e-5).map_err(err)?;
        worst_target = worst_target.max(relative_error(&g, &fd, 1e-7));
    }
    let mut worst_flow = 0.0f64;
    let arch = Architecture {
        width: 6,
        blocks: 1,
        ffn: 8,
        decoder: vec![7, 7],
    };
    for i in 0..20u64 {
        let doms = make_domains(100 + i, 2, 0, 5, &DomainParams::default()).map_err(err)?;
        let bb = Backbone::new(&[5, 4, 3], 1.0, i).map_err(err)?;
        let (layout, theta) = select_bias_params(&bb, &BiasSelector::AllBias).map_err(err)?;
        let cfg = CollectConfig {
            episodes_per_domain: 2,
            inits_per_episode: 1,
            val_trajectories: 2,
            sim: SimConfig {
                steps: 3,
                lr: 0.05,
                ..SimConfig::default()
            },
        };
        let ds = collect_dataset(&bb, &layout, &theta, &doms, &cfg, i).map_err(err)?;
        let objective = [Objective::Linear, Objective::Cubic, Objective::Hypernet][i as usize % 3];
        let stats = ds.train.stats().map_err(err)?.clone();
        let mut net = DriftNet::new(arch.clone(), objective, 3, &bb, &layout, stats, i).map_err(err)?;
        let eps = ds.train_episodes.iter().chain(&ds.val_episodes);
        let tasks = TaskCache::build(&bb, &layout, &theta, eps).map_err(err)?;
        let groups = validation_groups(&ds.train, objective, 2, i).map_err(err)?;
        flow_matching_grad(&mut net, &tasks, &groups).map_err(err)?;
        let ids: Vec<_> = net.params.ids().collect();
        let analytic: Vec<f64> = ids.iter().flat_map(|&id| net.params.get(id).grad.to_vec()).collect();
        let flat: Vec<f64> = ids.iter().flat_map(|&id| net.params.value(id).to_vec()).collect();
        let mut probe = net.clone();
        let fd = finite_difference(
            &mut |x| {
                let mut off = 0;
                for &id in &ids {
                    let t = probe.params.value_mut(id).data_mut();
                    let n = t.len();
                    t.copy_from_slice(&x[off..off + n]);
                    off += n;
                }
                flow_matching_loss(&probe, &tasks, &groups)
            },
            &flat,
            1e-5,
        )
        .map_err(err)?;
        worst_flow = worst_flow.max(relative_error(&analytic, &fd, 1e-7));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst_target < 1e-4 && worst_flow < 1e-4 && secs < 60.0,
        format!("worst rel. error: support loss wrt θ {worst_target:.1e}, flow matching wrt φ {worst_flow:.1e} (<1e-4, 20 instances each), {secs:.1}s (<60s)"),
    ))
}

/// Drift net whose raw output is exactly −θ: the parameter embedding splits
/// θ into `[θ, −θ]`, ReLU keeps the positive parts and the last layer
/// recombines them with opposite signs. Everything else is zero, so the task
/// vector and time have no influence.
fn decay_net(bb: &Backbone, objective: Objective) -> Result<DriftNet, String> {
    let (layout, _) = select_bias_params(bb, &BiasSelector::AllBias).map_err(err)?;
    let p = layout.len();
    let arch = Architecture {
        width: 2 * p,
        blocks: 1,
        ffn: 4,
        decoder: vec![2 * p],
    };
    let stats = NormStats {
        mean: vec![0.0; p],
        std: vec![1.0; p],
        drift_scale: vec![1.0; p],
    };
    let mut net = DriftNet::new(arch, objective, 1, bb, &layout, stats, 0).map_err(err)?;
    let ids: Vec<_> = net.params.ids().collect();
    for id in ids {
        net.params.value_mut(id).data_mut().fill(0.0);
    }
    let set = |net: &mut DriftNet, name: &str, f: &dyn Fn(usize, usize) -> f64| {
        let id = net.params.id(name).expect("parameter exists");
        let t = net.params.value_mut(id);
        let cols = t.shape()[1];
        for (k, x) in t.data_mut().iter_mut().enumerate() {
            *x = f(k / cols, k % cols);
        }
    };
    set(&mut net, "param_embed.weight", &|i, j| if j == i { 1.0 } else if j == i + p { -1.0 } else { 0.0 });
    set(&mut net, "dec0.weight", &|i, j| f64::from(u8::from(i == j)));
    set(&mut net, "dec1.weight", &|i, j| if i == j { -1.0 } else if i == j + p { 1.0 } else { 0.0 });
    Ok(net)
}

fn solver() -> Outcome {
    let bb = Backbone::new(&[6, 5, 4], 1.0, 3).map_err(err)?;
    let (layout, theta) = select_bias_params(&bb, &BiasSelector::AllBias).map_err(err)?;
    let theta = perturb_init(&theta, 1.0, 9).map_err(err)?;
    let doms = make_domains(5, 1, 0, 6, &DomainParams::default()).map_err(err)?;
    let ep = sample_episode(&doms[0], Protocol::Fixed { way: 3, shot: 4, queries: 5 }, Split::Test, 0, 1);
    let s = TaskBatch::support(&ep).map_err(err)?;
    let net = decay_net(&bb, Objective::Cubic)?;
    let n = 1000;
    let r = euler_adapt(&net, &bb, &layout, &s, &theta, &SolveConfig::new(n, 1.0 / n as f64)).map_err(err)?;
    let exact: Vec<f64> = theta.iter().map(|x| x * (-1.0f64).exp()).collect();
    let decay_err = max_abs(&r.theta, &exact);
    let id = euler_adapt(&net, &bb, &layout, &s, &theta, &SolveConfig::new(0, 0.0)).map_err(err)?;
    let hyper = hypernet_adapt(&decay_net(&bb, Objective::Hypernet)?, &bb, &layout, &s, &theta, true).map_err(err)?;
    let backward = r.backward_passes + r.graph_nodes + id.backward_passes + hyper.backward_passes + hyper.graph_nodes;
    Ok((
        decay_err <= 1e-2 && id.theta == theta && backward == 0,
        format!("|θ(1) − e^-1 θ_0|_inf = {decay_err:.1e} (<=1e-2, Δt=1e-3); N=0 identity {}; backward passes + graph nodes {backward}", id.theta == theta),
    ))
}

fn quadratic_gd() -> Result<(bool, String), String> {
    let theta0 = [3.0, -4.0, 0.7, 1e-3];
    let mut exact = true;
    let mut worst = 0.0f64;
    for (lr, bit_exact) in [(0.5, true), (0.1, false), (0.3, false)] {
        let cfg = SimConfig {
            steps: 25,
            optimizer: Optimizer::PlainGd,
            lr,
            ..SimConfig::default()
        };
        let half_sq = |t: &[f64]| 0.5 * t.iter().map(|x| x * x).sum::<f64>();
        let (points, _) = simulate(&mut |t| Ok((half_sq(t), t.to_vec())), &mut |t| Ok(half_sq(t)), &theta0, &cfg).map_err(err)?;
        for k in 0..=cfg.steps {
            let f = (1.0 - lr).powi(k as i32);
            for (i, &x0) in theta0.iter().enumerate() {
                let got = points[k * theta0.len() + i];
                if bit_exact {
                    exact &= got == f * x0;
                } else {
                    worst = worst.max((got - f * x0).abs() / x0.abs());
                }
            }
        }
    }
    Ok((exact && worst < 1e-13, format!("λ=0.5 bit-exact {exact}, λ∈{{0.1,0.3}} max rel. deviation {worst:.1e} (rounding)")))
}

fn trajectories(root: &Path, cfg: &Config, quadratic: (bool, String)) -> Outcome {
    let art = load_artifacts(cfg, root).map_err(err)?;
    let eps = episodes_for(&art.domains, Severity::Base, Protocol::various(), Split::Test, 13, 4242, "acceptance-adam");
    let sim = SimConfig::default();
    let mut improved = 0;
    let total = 100;
    for (i, ep) in eps.iter().take(total).enumerate() {
        let s = TaskBatch::support(ep).map_err(err)?;
        let theta0 = perturb_init(&art.theta_init, sim.perturb_std, i as u64).map_err(err)?;
        let (_, losses) = simulate_trajectory(&art.backbone, &art.layout, &s, &theta0, &sim).map_err(err)?;
        improved += usize::from(losses[sim.steps] < losses[0]);
    }
    let rate = improved as f64 / total as f64;
    Ok((quadratic.0 && rate >= 0.95, format!("{}; Adam end below start on {improved}/{total} base episodes (>=95%)", quadratic.1)))
}

fn read<T: serde::de::DeserializeOwned>(root: &Path, name: &str) -> Result<T, String> {
    let text = std::fs::read_to_string(root.join("reports").join(name)).map_err(|e| format!("{name}: {e}"))?;
    serde_json::from_str(&text).map_err(|e| format!("{name}: {e}"))
}

fn ood_ordering(eval: &EvalReport, minutes: f64) -> Outcome {
    let row = |v| {
        eval.get(v, "various", "ood")
            .map(|r| r.summary())
            .ok_or_else(|| format!("missing {v} row"))
    };
    let (d, l, c, b) = (row(Variant::Direct)?, row(Variant::HyperflowL)?, row(Variant::HyperflowC)?, row(Variant::BiasTune)?);
    let gain = |x: &hyperflow::eval::Summary| x.mean - d.mean >= 0.02 && x.clearly_above(&d);
    let pass = d.n >= 200 && gain(&l) && gain(&c) && b.mean >= c.mean && minutes <= 15.0;
    let pct = |s: &hyperflow::eval::Summary| format!("{:.2}±{:.2}", 100.0 * s.mean, 100.0 * s.ci95);
    Ok((
        pass,
        format!(
            "n={} OOD: direct {} < L {} (+{:.2}), C {} (+{:.2}) [need +2.00, disjoint CIs], bias-tune {}; pipeline {minutes:.1} min (<=15)",
            d.n,
            pct(&d),
            pct(&l),
            100.0 * (l.mean - d.mean),
            pct(&c),
            100.0 * (c.mean - d.mean),
            pct(&b)
        ),
    ))
}

fn hypernet_ablation(eval: &EvalReport) -> Outcome {
    let row = |v| eval.get(v, "various", "ood").map(|r| r.summary()).ok_or_else(|| format!("missing {v} row"));
    let (c, h) = (row(Variant::HyperflowC)?, row(Variant::Hypernet)?);
    Ok((
        c.mean >= h.mean || !h.clearly_above(&c),
        format!("C {:.2}±{:.2} vs hypernet {:.2}±{:.2}", 100.0 * c.mean, 100.0 * c.ci95, 100.0 * h.mean, 100.0 * h.ci95),
    ))
}

fn loss_curves(curves: &CurvesReport) -> Outcome {
    let c = curves.get(Variant::HyperflowC, "ood").ok_or("missing hyperflow-C ood curves")?;
    Ok((
        c.fraction_below_one >= 0.8,
        format!("final relative loss < 1 on {:.1}% of {} OOD episodes (>=80%), {} diverged", 100.0 * c.fraction_below_one, c.episodes, c.diverged),
    ))
}

fn cost(cost: &CostReport) -> Outcome {
    let e = cost.get(Variant::HyperflowC).ok_or("missing hyperflow-C cost")?;
    let f = cost.get(Variant::BiasTune).ok_or("missing bias-tune cost")?;
    let depth = cost.depth.as_ref().ok_or("missing depth probe")?;
    let ratio = f.adapt_ms / e.adapt_ms;
    let time_ok = e.adapt_ms <= f.adapt_ms / 10.0;
    let counts_ok = e.backward_passes == 0 && f.backward_passes == 50;
    let depth_ok = depth.euler_change() < 0.05 && depth.finetune_bytes[1] > depth.finetune_bytes[0];
    Ok((
        time_ok && counts_ok && depth_ok,
        format!(
            "time euler {:.3} ms vs fine-tune {:.3} ms (ratio {ratio:.2}, need >=10) [{}]; backward {} vs {} [{}]; depth x2: euler {:+.1}%, fine-tune {:+.1}% [{}]",
            e.adapt_ms,
            f.adapt_ms,
            if time_ok { "ok" } else { "miss" },
            e.backward_passes,
            f.backward_passes,
            if counts_ok { "ok" } else { "miss" },
            100.0 * depth.euler_change(),
            100.0 * depth.finetune_change(),
            if depth_ok { "ok" } else { "miss" },
        ),
    ))
}

fn ablation(rep: &AblationReport) -> Outcome {
    let levels = |axis| rep.axis(axis).iter().map(|l| l.level).collect::<Vec<_>>();
    let line = |axis| {
        rep.axis(axis)
            .iter()
            .map(|l| format!("{}:{:.2}±{:.2}", l.level, 100.0 * l.ood.mean, 100.0 * l.ood.ci95))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let shape = levels(Axis::Domains) == [1, 4, 8] && levels(Axis::Inits) == [1, 10];
    Ok((
        shape && rep.non_decreasing_ood(Axis::Domains) && rep.non_decreasing_ood(Axis::Inits),
        format!("domains [{}], inits [{}]", line(Axis::Domains), line(Axis::Inits)),
    ))
}

const TIMING_KEYS: [&str; 4] = ["adapt_ms", "inference_ms", "wall_ms", "seconds"];

fn mask_json(v: &mut Value) {
    match v {
        Value::Object(m) => {
            for (k, x) in m.iter_mut() {
                if TIMING_KEYS.contains(&k.as_str()) {
                    *x = Value::Null;
                } else {
                    mask_json(x);
                }
            }
        }
        Value::Array(xs) => xs.iter_mut().for_each(mask_json),
        _ => {}
    }
}

fn mask_csv(text: &str) -> String {
    let mut masked = Vec::new();
    let mut cols: Vec<usize> = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') {
            masked.push(line.to_string());
            continue;
        }
        let mut fields: Vec<&str> = line.split(',').collect();
        if cols.is_empty() && masked.iter().all(|l: &String| l.starts_with('#')) {
            cols = fields.iter().enumerate().filter(|(_, f)| TIMING_KEYS.contains(f)).map(|(i, _)| i).collect();
        } else {
            for &i in &cols {
                if i < fields.len() {
                    fields[i] = "-";
                }
            }
        }
        masked.push(fields.join(","));
    }
    masked.join("\n")
}

fn masked_reports(root: &Path) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(root.join("reports")).map_err(err)? {
        let path = entry.map_err(err)?.path();
        let name = path.file_name().unwrap_or_default().to_string_lossy().to_string();
        let text = std::fs::read_to_string(&path).map_err(err)?;
        let masked = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => {
                let mut v: Value = serde_json::from_str(&text).map_err(|e| format!("{name}: {e}"))?;
                mask_json(&mut v);
                v.to_string()
            }
            Some("csv") => mask_csv(&text),
            _ => text,
        };
        out.insert(name, masked);
    }
    Ok(out)
}

fn determinism(a: &Path, b: &Path, minutes: [f64; 2]) -> Outcome {
    let (ra, rb) = (masked_reports(a)?, masked_reports(b)?);
    let differing: Vec<&String> = ra.keys().chain(rb.keys()).filter(|k| ra.get(*k) != rb.get(*k)).collect();
    let worst = minutes[0].max(minutes[1]);
    Ok((
        differing.is_empty() && worst <= 30.0,
        format!(
            "{} reports compared (timing fields masked), differing: {:?}; runs took {:.1} and {:.1} min (<=30)",
            ra.len(),
            differing,
            minutes[0],
            minutes[1]
        ),
    ))
}

fn timed_run(cfg: &Config, root: &Path) -> Result<f64, String> {
    let start = Instant::now();
    run_pipeline(cfg, root).map_err(err)?;
    Ok(start.elapsed().as_secs_f64() / 60.0)
}

fn main() {
    // Tolerate libtest flags forwarded by `cargo test`.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let strict = std::env::var("HYPERFLOW_STRICT_ACCEPTANCE").is_ok_and(|v| v == "1");
    let mut ledger = Ledger { rows: Vec::new() };

    ledger.record(1, "spline correctness", splines());
    ledger.record(2, "gradient oracles", gradients());
    ledger.record(3, "solver oracle", solver());

    let cfg = Config::default();
    let dirs = (tempfile::tempdir().expect("temp dir"), tempfile::tempdir().expect("temp dir"));
    let first = timed_run(&cfg, dirs.0.path());
    let quadratic = quadratic_gd();
    let sim = first.clone().and_then(|_| quadratic).and_then(|q| trajectories(dirs.0.path(), &cfg, q));
    ledger.record(4, "trajectory simulator", sim);
    let root = dirs.0.path();
    let run_a = first.clone();
    let with_run = |f: &dyn Fn() -> Outcome| run_a.clone().and_then(|_| f());
    ledger.record(5, "OOD ordering", with_run(&|| ood_ordering(&read(root, "eval.json")?, *first.as_ref().unwrap())));
    ledger.record(6, "hypernet ablation", with_run(&|| hypernet_ablation(&read(root, "eval.json")?)));
    ledger.record(7, "loss curves", with_run(&|| loss_curves(&read(root, "curves.json")?)));
    ledger.record(8, "cost frontier", with_run(&|| cost(&read(root, "cost.json")?)));
    ledger.record(9, "ablation monotonicity", with_run(&|| ablation(&read(root, "ablation.json")?)));
    let second = timed_run(&cfg, dirs.1.path());
    let det = match (&first, &second) {
        (Ok(a), Ok(b)) => determinism(dirs.0.path(), dirs.1.path(), [*a, *b]),
        (Err(e), _) | (_, Err(e)) => Err(e.clone()),
    };
    ledger.record(10, "determinism", det);

    let passed = ledger.rows.iter().filter(|r| matches!(r.2, Ok((true, _)))).count();
    let errors = ledger.rows.iter().filter(|r| r.2.is_err()).count();
    println!("acceptance: {passed}/{} criteria pass, {errors} harness errors", ledger.rows.len());
    if errors > 0 || (strict && passed < ledger.rows.len()) {
        std::process::exit(1);
    }
}
