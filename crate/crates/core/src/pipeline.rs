//! Config-driven end-to-end run.
//!
//! Each stage writes into `cache/<stage>-<key>/`, where the key hashes the
//! stage's own config section together with the keys of the stages it reads
//! from. A stage whose directory is complete is skipped, so an unchanged
//! config reruns as pure cache hits and a changed seed only rebuilds what
//! depends on it. Reports land in `reports/`, stamped with the fingerprint of
//! the whole config.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::ablation::{ablation_sweep, frontier_csv, steps_frontier, AblationReport, Axis, FrontierRow, SweepContext};
use crate::cost::{depth_probe, profile_cost, CostReport};
use crate::drift::{train_drift, Architecture, DriftNet, Objective, TrainConfig, TrainReport};
use crate::episodes::{load_episodes, make_domains, sample_episode, save_episodes, DomainParams, DomainSpec, Episode, Protocol, Severity, Split};
use crate::error::{Error, Result};
use crate::eval::{aggregate, loss_trajectory_report, score_episodes, EvalReport, LossCurves, Method, Variant};
use crate::model::{meta_train_backbone, select_bias_params, Backbone, BiasLayout, BiasSelector, MetaTrainConfig};
use crate::rng;
use crate::solver::{eta_grid, step_size_search, StepSizeTable};
use crate::trajectories::{collect_dataset, endpoint_improvement_rate, CollectConfig, TrajectoryDataset, TrajectoryStore};

const CACHE_FORMAT: &str = "hyperflow-stage-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub domains: u64,
    pub backbone: u64,
    pub collect: u64,
    pub drift: u64,
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            domains: 7,
            backbone: 7,
            collect: 7,
            drift: 0,
            eval: 99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainsSection {
    pub n_base: usize,
    pub n_ood: usize,
    pub dim: usize,
    pub params: DomainParams,
}

impl Default for DomainsSection {
    fn default() -> Self {
        DomainsSection {
            n_base: 8,
            n_ood: 2,
            dim: 16,
            params: DomainParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftSection {
    pub objectives: Vec<Objective>,
    pub trajectories_per_batch: usize,
    pub samples_per_trajectory: usize,
    pub lr: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub val_samples_per_trajectory: usize,
    pub arch: Architecture,
}

impl Default for DriftSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        DriftSection {
            objectives: vec![Objective::Linear, Objective::Cubic, Objective::Hypernet],
            trajectories_per_batch: t.trajectories_per_batch,
            samples_per_trajectory: t.samples_per_trajectory,
            lr: t.lr,
            max_steps: t.max_steps,
            eval_every: t.eval_every,
            patience: t.patience,
            val_samples_per_trajectory: t.val_samples_per_trajectory,
            arch: t.arch,
        }
    }
}

impl DriftSection {
    pub fn train_config(&self, objective: Objective, seed: u64) -> TrainConfig {
        TrainConfig {
            objective,
            trajectories_per_batch: self.trajectories_per_batch,
            samples_per_trajectory: self.samples_per_trajectory,
            lr: self.lr,
            max_steps: self.max_steps,
            eval_every: self.eval_every,
            patience: self.patience,
            val_samples_per_trajectory: self.val_samples_per_trajectory,
            seed,
            arch: self.arch.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSection {
    pub steps: usize,
    /// η candidates as multiples of `T/N`.
    pub eta_multipliers: Vec<f64>,
    pub val_episodes_per_domain: usize,
    pub finetune_steps: usize,
    pub lr_grid: Vec<f64>,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            steps: 50,
            eta_multipliers: vec![0.1, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            val_episodes_per_domain: 100,
            finetune_steps: 50,
            lr_grid: vec![0.01, 0.03, 0.1, 0.3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub test_episodes_per_domain: usize,
    /// Fixed-way benchmarks on OOD domains, one per shot count.
    pub fixed_way: usize,
    pub fixed_shots: Vec<usize>,
    pub fixed_queries: usize,
    pub curve_episodes_per_domain: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            test_episodes_per_domain: 200,
            fixed_way: 5,
            fixed_shots: vec![5, 20],
            fixed_queries: 10,
            curve_episodes_per_domain: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileSection {
    pub enabled: bool,
    pub episodes: usize,
    pub repeats: usize,
    pub steps: usize,
    pub finetune_lr: f64,
    pub depth_probe: bool,
}

impl Default for ProfileSection {
    fn default() -> Self {
        ProfileSection {
            enabled: true,
            episodes: 20,
            repeats: 5,
            steps: 50,
            finetune_lr: 0.1,
            depth_probe: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSection {
    pub enabled: bool,
    pub domains: Vec<usize>,
    pub tasks: Vec<usize>,
    pub inits: Vec<usize>,
    pub val_episodes_per_domain: usize,
    pub test_episodes_per_domain: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            enabled: true,
            domains: vec![1, 4, 8],
            tasks: vec![],
            inits: vec![1, 10],
            val_episodes_per_domain: 50,
            test_episodes_per_domain: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontierSection {
    pub enabled: bool,
    pub levels: Vec<usize>,
    pub val_episodes_per_domain: usize,
    pub test_episodes_per_domain: usize,
}

impl Default for FrontierSection {
    fn default() -> Self {
        FrontierSection {
            enabled: true,
            levels: vec![1, 20, 50],
            val_episodes_per_domain: 50,
            test_episodes_per_domain: 100,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub seeds: Seeds,
    pub domains: DomainsSection,
    pub meta: MetaTrainConfig,
    pub collect: CollectConfig,
    pub drift: DriftSection,
    pub solver: SolverSection,
    pub eval: EvalSection,
    pub profile: ProfileSection,
    pub ablation: AblationSection,
    pub frontier: FrontierSection,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of every seed and setting.
    pub fn fingerprint(&self) -> String {
        hash_json(&json!(self))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.domains;
        if d.n_base == 0 || d.n_ood == 0 || d.dim == 0 {
            return Err(Error::Config("need at least one base domain, one OOD domain and dim >= 1".into()));
        }
        if !self.drift.objectives.contains(&Objective::Cubic) {
            return Err(Error::Config("drift.objectives must include cubic".into()));
        }
        if self.solver.eta_multipliers.is_empty() || self.solver.lr_grid.is_empty() {
            return Err(Error::Config("solver grids must be nonempty".into()));
        }
        if self.solver.val_episodes_per_domain == 0 || self.eval.test_episodes_per_domain == 0 {
            return Err(Error::Config("episode counts must be >= 1".into()));
        }
        if self.profile.enabled && self.profile.repeats < 3 {
            return Err(Error::Config("profile.repeats must be >= 3".into()));
        }
        for (name, levels) in [("domains", &self.ablation.domains), ("tasks", &self.ablation.tasks), ("inits", &self.ablation.inits)] {
            if levels.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!("ablation.{name} levels must be strictly ascending")));
            }
        }
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_json(v: &Value) -> String {
    hex(&Sha256::digest(v.to_string().as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub key: String,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub fingerprint: String,
    pub stages: Vec<StageRecord>,
    pub report_dir: PathBuf,
    /// Wall time per stage in seconds; not part of any report.
    pub seconds: Vec<(String, f64)>,
}

impl PipelineOutcome {
    pub fn all_hits(&self) -> bool {
        self.stages.iter().all(|s| s.cache_hit)
    }

    pub fn hit(&self, stage: &str) -> Option<bool> {
        self.stages.iter().find(|s| s.stage == stage).map(|s| s.cache_hit)
    }
}

struct Runner {
    root: PathBuf,
    records: Vec<StageRecord>,
    seconds: Vec<(String, f64)>,
}

impl Runner {
    /// Runs `build` into a fresh directory unless a complete one exists for
    /// the same key. Returns the key and the directory.
    fn stage(&mut self, name: &str, upstream: &[&str], section: Value, build: impl FnOnce(&Path) -> Result<()>) -> Result<(String, PathBuf)> {
        let key = hash_json(&json!({
            "format": CACHE_FORMAT,
            "stage": name,
            "upstream": upstream,
            "section": section,
        }));
        let dir = self.root.join("cache").join(format!("{name}-{}", &key[..16]));
        let done = dir.join("DONE");
        let start = Instant::now();
        let hit = done.exists();
        if !hit {
            let tmp = dir.with_extension("partial");
            if tmp.exists() {
                fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
            }
            fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
            build(&tmp).map_err(|e| Error::Stage {
                stage: name.to_string(),
                source: Box::new(e),
            })?;
            write(&tmp.join("DONE"), key.as_bytes())?;
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
        }
        self.records.push(StageRecord {
            stage: name.to_string(),
            key: key.clone(),
            cache_hit: hit,
        });
        self.seconds.push((name.to_string(), start.elapsed().as_secs_f64()));
        Ok((key, dir))
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    write(path, s.as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Malformed {
        offset: 0,
        detail: format!("{}: {e}", path.display()),
    })
}

fn in_stage<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: stage.to_string(),
        source: Box::new(e),
    })
}

/// Named episode families evaluated in every run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Benchmark {
    pub name: &'static str,
    pub protocol: Protocol,
    pub ood_only: bool,
}

pub fn benchmarks(eval: &EvalSection) -> Vec<Benchmark> {
    let mut out = vec![Benchmark {
        name: "various",
        protocol: Protocol::various(),
        ood_only: false,
    }];
    for &shot in &eval.fixed_shots {
        out.push(Benchmark {
            name: match shot {
                1 => "5w1s",
                5 => "5w5s",
                20 => "5w20s",
                50 => "5w50s",
                _ => "fixed",
            },
            protocol: Protocol::Fixed {
                way: eval.fixed_way,
                shot,
                queries: eval.fixed_queries,
            },
            ood_only: true,
        });
    }
    out
}

/// `per_domain` episodes from each domain of the given severity, grouped by
/// domain in id order.
pub fn episodes_for(domains: &[DomainSpec], severity: Severity, protocol: Protocol, split: Split, per_domain: usize, seed: u64, bench: &str) -> Vec<Episode> {
    let seed = rng::derive_seed(&[seed, rng::tag(bench)]);
    domains
        .iter()
        .filter(|d| d.severity == severity)
        .flat_map(|d| (0..per_domain as u64).map(move |i| sample_episode(d, protocol, split, i, seed)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneEntry {
    pub variant: Variant,
    pub benchmark: String,
    pub scope: String,
    pub table: StepSizeTable,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub fingerprint: String,
    pub entries: Vec<TuneEntry>,
}

impl TuneReport {
    pub fn eta(&self, variant: Variant, benchmark: &str, scope: &str) -> Result<f64> {
        self.entries
            .iter()
            .find(|e| e.variant == variant && e.benchmark == benchmark && e.scope == scope)
            .map(|e| e.table.best_eta)
            .ok_or_else(|| Error::MissingArtifact(format!("tuned η for {variant} on {benchmark}/{scope}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub variant: Variant,
    pub scope: String,
    pub episodes: usize,
    pub fraction_below_one: f64,
    pub diverged: usize,
    pub mean_curve: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurvesReport {
    pub fingerprint: String,
    pub summaries: Vec<CurveSummary>,
}

impl CurvesReport {
    pub fn get(&self, variant: Variant, scope: &str) -> Option<&CurveSummary> {
        self.summaries.iter().find(|s| s.variant == variant && s.scope == scope)
    }
}

fn summarize_curves(c: &LossCurves, scope: &str) -> CurveSummary {
    let len = c.curves.iter().map(Vec::len).max().unwrap_or(0);
    let mean_curve = (0..len)
        .map(|k| {
            let xs: Vec<f64> = c.curves.iter().filter_map(|v| v.get(k).copied()).collect();
            xs.iter().sum::<f64>() / xs.len().max(1) as f64
        })
        .collect();
    CurveSummary {
        variant: c.variant,
        scope: scope.to_string(),
        episodes: c.curves.len() + c.diverged,
        fraction_below_one: c.fraction_below_one,
        diverged: c.diverged,
        mean_curve,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrontierReport {
    pub fingerprint: String,
    pub rows: Vec<FrontierRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSummary {
    pub objective: Objective,
    pub report: TrainReport,
}

/// Loaded artifacts of a finished run.
pub struct Artifacts {
    pub domains: Vec<DomainSpec>,
    pub backbone: Backbone,
    pub layout: BiasLayout,
    pub theta_init: Vec<f64>,
    pub dataset: TrajectoryDataset,
    pub nets: Vec<DriftNet>,
    pub tune: TuneReport,
}

impl Artifacts {
    pub fn net(&self, objective: Objective) -> Result<&DriftNet> {
        self.nets
            .iter()
            .find(|n| n.objective == objective)
            .ok_or_else(|| Error::MissingArtifact(format!("{objective:?} drift net")))
    }

    pub fn variant_net(&self, v: Variant) -> Result<&DriftNet> {
        match v {
            Variant::HyperflowL => self.net(Objective::Linear),
            Variant::HyperflowC => self.net(Objective::Cubic),
            Variant::Hypernet => self.net(Objective::Hypernet),
            _ => Err(Error::InvalidArgument(format!("{v} has no drift net"))),
        }
    }
}

fn objective_variant(o: Objective) -> Variant {
    match o {
        Objective::Linear => Variant::HyperflowL,
        Objective::Cubic => Variant::HyperflowC,
        Objective::Hypernet => Variant::Hypernet,
    }
}

fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::Linear => "linear",
        Objective::Cubic => "cubic",
        Objective::Hypernet => "hypernet",
    }
}

fn scope_name(s: Severity) -> &'static str {
    match s {
        Severity::Base => "base",
        Severity::Ood => "ood",
    }
}

fn groups(b: &Benchmark) -> Vec<Severity> {
    if b.ood_only {
        vec![Severity::Ood]
    } else {
        vec![Severity::Base, Severity::Ood]
    }
}

fn load_dataset(dir: &Path, layout: &BiasLayout) -> Result<TrajectoryDataset> {
    let h = Some(layout.hash());
    Ok(TrajectoryDataset {
        train: TrajectoryStore::load(&dir.join("train.gftr"), h)?,
        val: TrajectoryStore::load(&dir.join("val.gftr"), h)?,
        train_episodes: load_episodes(&dir.join("train-episodes.jsonl"))?.1,
        val_episodes: load_episodes(&dir.join("val-episodes.jsonl"))?.1,
    })
}

/// Runs (or reuses) every stage under `root` and publishes reports to
/// `root/reports`.
pub fn run_pipeline(cfg: &Config, root: &Path) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let mut run = Runner {
        root: root.to_path_buf(),
        records: Vec::new(),
        seconds: Vec::new(),
    };
    let fingerprint = cfg.fingerprint();
    let seeds = &cfg.seeds;
    let d = &cfg.domains;
    let domains = make_domains(seeds.domains, d.n_base, d.n_ood, d.dim, &d.params)?;
    let base: Vec<DomainSpec> = domains.iter().filter(|x| x.severity == Severity::Base).cloned().collect();

    let (bb_key, bb_dir) = run.stage(
        "backbone",
        &[],
        json!({"domains": d, "meta": cfg.meta, "seed_domains": seeds.domains, "seed": seeds.backbone}),
        |dir| {
            let bb = meta_train_backbone(&base, &cfg.meta, seeds.backbone)?;
            bb.save(&dir.join("backbone.ckpt"))
        },
    )?;
    let bb = in_stage("backbone", Backbone::load(&bb_dir.join("backbone.ckpt")))?;
    let (layout, theta_init) = select_bias_params(&bb, &BiasSelector::AllBias)?;

    let (traj_key, traj_dir) = run.stage("trajectories", &[&bb_key], json!({"collect": cfg.collect, "seed": seeds.collect}), |dir| {
        let ds = collect_dataset(&bb, &layout, &theta_init, &base, &cfg.collect, seeds.collect)?;
        ds.train.save(&dir.join("train.gftr"))?;
        ds.val.save(&dir.join("val.gftr"))?;
        save_episodes(&ds.train_episodes, d.dim, &dir.join("train-episodes.jsonl"))?;
        save_episodes(&ds.val_episodes, d.dim, &dir.join("val-episodes.jsonl"))?;
        write_json(
            &dir.join("summary.json"),
            &json!({
                "train_trajectories": ds.train.len(),
                "val_trajectories": ds.val.len(),
                "train_improvement_rate": endpoint_improvement_rate(&ds.train.trajectories),
            }),
        )
    })?;
    let dataset = in_stage("trajectories", load_dataset(&traj_dir, &layout))?;
    let task_episodes: Vec<&Episode> = dataset.train_episodes.iter().chain(&dataset.val_episodes).collect();

    let mut nets = Vec::new();
    let mut drift_keys = Vec::new();
    let mut drift_dirs = Vec::new();
    for &objective in &cfg.drift.objectives {
        let name = format!("drift-{}", objective_name(objective));
        let tc = cfg.drift.train_config(objective, seeds.drift);
        let (key, dir) = run.stage(&name, &[&traj_key], json!({"train": tc}), |dir| {
            let (net, report) = train_drift(&bb, &layout, &theta_init, &dataset.train, &dataset.val, &task_episodes, &tc)?;
            net.save(&dir.join("drift.ckpt"))?;
            write_json(&dir.join("train-report.json"), &DriftSummary { objective, report })
        })?;
        nets.push(in_stage(&name, DriftNet::load(&dir.join("drift.ckpt")))?);
        drift_keys.push(key);
        drift_dirs.push(dir);
    }
    let drift_refs: Vec<&str> = drift_keys.iter().map(String::as_str).collect();
    let benches = benchmarks(&cfg.eval);

    let mut up: Vec<&str> = vec![&bb_key];
    up.extend(&drift_refs);
    let (tune_key, tune_dir) = run.stage("tune", &up, json!({"solver": cfg.solver, "eval": cfg.eval, "seed": seeds.eval, "seed_domains": seeds.domains}), |dir| {
        let mut entries = Vec::new();
        for net in nets.iter().filter(|n| n.objective != Objective::Hypernet) {
            let grid = eta_grid(net, cfg.solver.steps, &cfg.solver.eta_multipliers);
            for b in &benches {
                for sev in groups(b) {
                    let val = episodes_for(&domains, sev, b.protocol, Split::Val, cfg.solver.val_episodes_per_domain, seeds.eval, b.name);
                    let table = step_size_search(net, &bb, &layout, &theta_init, &val, &grid, cfg.solver.steps)?;
                    entries.push(TuneEntry {
                        variant: objective_variant(net.objective),
                        benchmark: b.name.to_string(),
                        scope: scope_name(sev).to_string(),
                        table,
                    });
                }
            }
        }
        write_json(&dir.join("tune.json"), &TuneReport { fingerprint: String::new(), entries })
    })?;
    let tune: TuneReport = in_stage("tune", read_json(&tune_dir.join("tune.json")))?;

    let art = Artifacts {
        domains: domains.clone(),
        backbone: bb,
        layout,
        theta_init,
        dataset,
        nets,
        tune,
    };
    let method = |v: Variant, bench: &str, scope: &str, steps: usize| -> Result<Method> {
        Ok(match v {
            Variant::Direct => Method::Direct,
            Variant::BiasTune => Method::FineTune {
                steps: cfg.solver.finetune_steps,
                lr_grid: &cfg.solver.lr_grid,
            },
            Variant::Hypernet => Method::Hypernet { net: art.variant_net(v)? },
            _ => Method::Euler {
                net: art.variant_net(v)?,
                steps,
                eta: art.tune.eta(v, bench, scope)?,
            },
        })
    };
    let variants: Vec<Variant> = Variant::ALL
        .into_iter()
        .filter(|v| matches!(v, Variant::Direct | Variant::BiasTune) || art.variant_net(*v).is_ok())
        .collect();

    let (eval_key, eval_dir) = run.stage("eval", &[&tune_key], json!({"eval": cfg.eval, "solver": cfg.solver, "seed": seeds.eval}), |dir| {
        let mut report = EvalReport::default();
        for b in &benches {
            for sev in groups(b) {
                let test = episodes_for(&art.domains, sev, b.protocol, Split::Test, cfg.eval.test_episodes_per_domain, seeds.eval, b.name);
                for &v in &variants {
                    let scores = score_episodes(&art.backbone, &art.layout, &art.theta_init, method(v, b.name, scope_name(sev), cfg.solver.steps)?, &test)?;
                    let mut rows = aggregate(v, b.name, &scores, &art.domains);
                    if !b.ood_only || sev == Severity::Ood {
                        report.rows.append(&mut rows);
                    }
                }
            }
        }
        write_json(&dir.join("eval.json"), &report)
    })?;
    let _ = eval_key;

    let (_, curves_dir) = run.stage("curves", &[&tune_key], json!({"eval": cfg.eval, "solver": cfg.solver, "seed": seeds.eval}), |dir| {
        let mut rep = CurvesReport::default();
        let b = &benches[0];
        let mut raw = Vec::new();
        for sev in [Severity::Base, Severity::Ood] {
            let eps = episodes_for(&art.domains, sev, b.protocol, Split::Test, cfg.eval.curve_episodes_per_domain, seeds.eval, b.name);
            for &v in variants.iter().filter(|v| matches!(v, Variant::HyperflowL | Variant::HyperflowC | Variant::BiasTune)) {
                let c = loss_trajectory_report(&art.backbone, &art.layout, &art.theta_init, v, method(v, b.name, scope_name(sev), cfg.solver.steps)?, &eps)?;
                rep.summaries.push(summarize_curves(&c, scope_name(sev)));
                raw.push(json!({"variant": v, "scope": scope_name(sev), "curves": c.curves}));
            }
        }
        write_json(&dir.join("curves.json"), &rep)?;
        write_json(&dir.join("curves-raw.json"), &raw)
    })?;

    let mut profile_dir = None;
    if cfg.profile.enabled {
        let (_, dir) = run.stage("profile", &[&tune_key], json!({"profile": cfg.profile, "solver": cfg.solver, "seed": seeds.eval}), |dir| {
            let b = &benches[0];
            let eps: Vec<Episode> = episodes_for(&art.domains, Severity::Ood, b.protocol, Split::Test, cfg.profile.episodes.div_ceil(d.n_ood), seeds.eval, b.name)
                .into_iter()
                .take(cfg.profile.episodes)
                .collect();
            let lr = [cfg.profile.finetune_lr];
            let mut list = Vec::new();
            for &v in &variants {
                let m = match v {
                    Variant::BiasTune => Method::FineTune {
                        steps: cfg.profile.steps,
                        lr_grid: &lr,
                    },
                    _ => method(v, b.name, "ood", cfg.profile.steps)?,
                };
                list.push((v, m));
            }
            let mut rep: CostReport = profile_cost(&art.backbone, &art.layout, &art.theta_init, &list, &eps, cfg.profile.repeats)?;
            if cfg.profile.depth_probe {
                rep.depth = Some(depth_probe(&cfg.meta.hidden, &eps[0], cfg.profile.steps, seeds.eval)?);
            }
            write_json(&dir.join("cost.json"), &rep)
        })?;
        profile_dir = Some(dir);
    }

    let mut ablation_dir = None;
    let cubic_key = drift_keys[cfg.drift.objectives.iter().position(|o| *o == Objective::Cubic).expect("validated")].clone();
    if cfg.ablation.enabled {
        let (_, dir) = run.stage(
            "ablation",
            &[&traj_key, &cubic_key],
            json!({"ablation": cfg.ablation, "drift": cfg.drift, "solver": cfg.solver, "eval": cfg.eval, "seeds": seeds}),
            |dir| {
                let b = &benches[0];
                let a = &cfg.ablation;
                let eps = |sev, split, n| episodes_for(&art.domains, sev, b.protocol, split, n, seeds.eval, b.name);
                let (val_ood, val_base) = (eps(Severity::Ood, Split::Val, a.val_episodes_per_domain), eps(Severity::Base, Split::Val, a.val_episodes_per_domain));
                let (test_ood, test_base) = (eps(Severity::Ood, Split::Test, a.test_episodes_per_domain), eps(Severity::Base, Split::Test, a.test_episodes_per_domain));
                let ctx = SweepContext {
                    bb: &art.backbone,
                    layout: &art.layout,
                    theta_init: &art.theta_init,
                    domains: &art.domains,
                    dataset: &art.dataset,
                    drift: cfg.drift.train_config(Objective::Cubic, seeds.drift),
                    steps: cfg.solver.steps,
                    eta_multipliers: &cfg.solver.eta_multipliers,
                    val_ood: &val_ood,
                    val_base: &val_base,
                    test_ood: &test_ood,
                    test_base: &test_base,
                };
                let full = art.net(Objective::Cubic)?;
                let mut rep = AblationReport::default();
                for (axis, levels) in [(Axis::Domains, &a.domains), (Axis::Tasks, &a.tasks), (Axis::Inits, &a.inits)] {
                    if !levels.is_empty() {
                        rep.levels.extend(ablation_sweep(&ctx, axis, levels, Some(full))?);
                    }
                }
                write_json(&dir.join("ablation.json"), &rep)
            },
        )?;
        ablation_dir = Some(dir);
    }

    let mut frontier_dir = None;
    if cfg.frontier.enabled {
        let (_, dir) = run.stage("frontier", &drift_refs, json!({"frontier": cfg.frontier, "solver": cfg.solver, "eval": cfg.eval, "seed": seeds.eval, "bb": bb_key}), |dir| {
            let b = &benches[0];
            let f = &cfg.frontier;
            let val = episodes_for(&art.domains, Severity::Ood, b.protocol, Split::Val, f.val_episodes_per_domain, seeds.eval, b.name);
            let test = episodes_for(&art.domains, Severity::Ood, b.protocol, Split::Test, f.test_episodes_per_domain, seeds.eval, b.name);
            let nets: Vec<(Variant, &DriftNet)> = [Variant::HyperflowL, Variant::HyperflowC]
                .into_iter()
                .filter_map(|v| art.variant_net(v).ok().map(|n| (v, n)))
                .collect();
            let rows = steps_frontier(&art.backbone, &art.layout, &art.theta_init, &nets, &cfg.solver.lr_grid, &f.levels, &cfg.solver.eta_multipliers, &val, &test)?;
            write_json(&dir.join("frontier.json"), &FrontierReport { fingerprint: String::new(), rows })
        })?;
        frontier_dir = Some(dir);
    }

    let reports = root.join("reports");
    fs::create_dir_all(&reports).map_err(|e| Error::io(&reports, e))?;
    let stamp = |v: &mut Value| {
        v["fingerprint"] = Value::String(fingerprint.clone());
    };
    let header = format!("# fingerprint={fingerprint}\n");

    write(&reports.join("config.toml"), cfg.to_toml_string().as_bytes())?;
    let mut drift_reports = Vec::new();
    for dir in &drift_dirs {
        drift_reports.push(read_json::<Value>(&dir.join("train-report.json"))?);
    }
    write_json(&reports.join("drift-training.json"), &json!({"fingerprint": fingerprint, "nets": drift_reports}))?;
    let mut tune = art.tune.clone();
    tune.fingerprint = fingerprint.clone();
    write_json(&reports.join("tune.json"), &tune)?;

    let mut ev: EvalReport = read_json(&eval_dir.join("eval.json"))?;
    ev.fingerprint = fingerprint.clone();
    write_json(&reports.join("eval.json"), &ev)?;
    write(&reports.join("eval.csv"), format!("{header}{}", ev.to_csv()).as_bytes())?;
    write(&reports.join("eval.txt"), format!("{header}{}", ev.to_table()).as_bytes())?;

    let mut cv: Value = read_json(&curves_dir.join("curves.json"))?;
    stamp(&mut cv);
    write_json(&reports.join("curves.json"), &cv)?;
    let raw: Value = read_json(&curves_dir.join("curves-raw.json"))?;
    write(&reports.join("curves.csv"), format!("{header}{}", curves_csv(&raw)).as_bytes())?;

    if let Some(dir) = profile_dir {
        let mut c: CostReport = read_json(&dir.join("cost.json"))?;
        c.fingerprint = fingerprint.clone();
        write_json(&reports.join("cost.json"), &c)?;
        write(&reports.join("cost.csv"), format!("{header}{}", c.to_csv()).as_bytes())?;
    }
    if let Some(dir) = ablation_dir {
        let mut a: AblationReport = read_json(&dir.join("ablation.json"))?;
        a.fingerprint = fingerprint.clone();
        write_json(&reports.join("ablation.json"), &a)?;
        write(&reports.join("ablation.csv"), format!("{header}{}", a.to_csv()).as_bytes())?;
    }
    if let Some(dir) = frontier_dir {
        let mut f: FrontierReport = read_json(&dir.join("frontier.json"))?;
        f.fingerprint = fingerprint.clone();
        write_json(&reports.join("frontier.json"), &f)?;
        write(&reports.join("frontier.csv"), format!("{header}{}", frontier_csv(&f.rows)).as_bytes())?;
    }
    let outcome = PipelineOutcome {
        fingerprint,
        stages: run.records,
        report_dir: reports.clone(),
        seconds: run.seconds,
    };
    write_json(&reports.join("stages.json"), &json!({"fingerprint": outcome.fingerprint, "stages": outcome.stages}))?;
    Ok(outcome)
}

/// Long-format relative loss curves: `variant,scope,episode,step,rel_loss`.
fn curves_csv(raw: &Value) -> String {
    let mut s = String::from("variant,scope,episode,step,rel_loss\n");
    for entry in raw.as_array().into_iter().flatten() {
        let (v, scope) = (entry["variant"].as_str().unwrap_or(""), entry["scope"].as_str().unwrap_or(""));
        for (i, curve) in entry["curves"].as_array().into_iter().flatten().enumerate() {
            for (k, x) in curve.as_array().into_iter().flatten().enumerate() {
                s.push_str(&format!("{v},{scope},{i},{k},{}\n", x.as_f64().unwrap_or(f64::NAN)));
            }
        }
    }
    s
}

/// Reloads the artifacts of a run directory produced with `cfg`.
pub fn load_artifacts(cfg: &Config, root: &Path) -> Result<Artifacts> {
    let stages: Value = read_json(&root.join("reports").join("stages.json"))?;
    let dir_of = |name: &str| -> Result<PathBuf> {
        let rec = stages["stages"]
            .as_array()
            .into_iter()
            .flatten()
            .find(|s| s["stage"] == name)
            .ok_or_else(|| Error::MissingArtifact(format!("stage {name}")))?;
        let key = rec["key"].as_str().unwrap_or_default();
        Ok(root.join("cache").join(format!("{name}-{}", &key[..16.min(key.len())])))
    };
    let d = &cfg.domains;
    let domains = make_domains(cfg.seeds.domains, d.n_base, d.n_ood, d.dim, &d.params)?;
    let backbone = Backbone::load(&dir_of("backbone")?.join("backbone.ckpt"))?;
    let (layout, theta_init) = select_bias_params(&backbone, &BiasSelector::AllBias)?;
    let dataset = load_dataset(&dir_of("trajectories")?, &layout)?;
    let nets = cfg
        .drift
        .objectives
        .iter()
        .map(|&o| DriftNet::load(&dir_of(&format!("drift-{}", objective_name(o)))?.join("drift.ckpt")))
        .collect::<Result<Vec<_>>>()?;
    let tune = read_json(&dir_of("tune")?.join("tune.json"))?;
    Ok(Artifacts {
        domains,
        backbone,
        layout,
        theta_init,
        dataset,
        nets,
        tune,
    })
}
