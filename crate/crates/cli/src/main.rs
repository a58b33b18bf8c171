use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hyperflow::ablation::{ablation_sweep, AblationReport, Axis, SweepContext};
use hyperflow::cost::profile_cost;
use hyperflow::drift::{flow_matching_loss, train_drift, validation_groups, DriftNet, Objective, TaskCache};
use hyperflow::episodes::{load_episodes, make_domains, save_episodes, write_lines, DomainSpec, Episode, Severity, Split};
use hyperflow::eval::{aggregate, score_episodes, EvalReport, Method, Summary, Variant};
use hyperflow::flows::{self, FlowKind};
use hyperflow::model::{accuracy, meta_train_backbone, select_bias_params, Backbone, BiasLayout, BiasSelector, TaskBatch};
use hyperflow::pipeline::{benchmarks, episodes_for, load_artifacts, run_pipeline, Artifacts, Benchmark, Config};
use hyperflow::solver::{euler_adapt, finetune_adapt, hypernet_adapt, AdaptResult, SolveConfig};
use hyperflow::trajectories::{collect_dataset, endpoint_improvement_rate, TrajectoryStore};

#[derive(Parser)]
#[command(name = "hyperflow", version, about = "Gradient-free few-shot adaptation with a learned drift field")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArg {
    /// TOML config; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<Config> {
        match &self.config {
            Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display())),
            None => Ok(Config::default()),
        }
    }
}

#[derive(Args, Clone)]
struct RunArg {
    #[command(flatten)]
    config: ConfigArg,
    /// Directory of a finished `pipeline` run.
    #[arg(long)]
    run: PathBuf,
}

impl RunArg {
    fn load(&self) -> Result<(Config, Artifacts)> {
        let cfg = self.config.load()?;
        let art = load_artifacts(&cfg, &self.run).with_context(|| format!("loading run {}", self.run.display()))?;
        Ok((cfg, art))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupArg {
    Base,
    Ood,
}

impl From<GroupArg> for Severity {
    fn from(g: GroupArg) -> Severity {
        match g {
            GroupArg::Base => Severity::Base,
            GroupArg::Ood => Severity::Ood,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Linear,
    Cubic,
    Hypernet,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Objective {
        match o {
            ObjectiveArg::Linear => Objective::Linear,
            ObjectiveArg::Cubic => Objective::Cubic,
            ObjectiveArg::Hypernet => Objective::Hypernet,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Direct,
    #[value(name = "hyperflow-L", alias = "hyperflow-l")]
    HyperflowL,
    #[value(name = "hyperflow-C", alias = "hyperflow-c")]
    HyperflowC,
    Hypernet,
    BiasTune,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Direct => Variant::Direct,
            VariantArg::HyperflowL => Variant::HyperflowL,
            VariantArg::HyperflowC => Variant::HyperflowC,
            VariantArg::Hypernet => Variant::Hypernet,
            VariantArg::BiasTune => Variant::BiasTune,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Domains,
    Tasks,
    Inits,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Axis {
        match a {
            AxisArg::Domains => Axis::Domains,
            AxisArg::Tasks => Axis::Tasks,
            AxisArg::Inits => Axis::Inits,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate or inspect episode files.
    Episodes {
        #[command(subcommand)]
        cmd: EpisodesCmd,
    },
    /// Meta-train a backbone or score it without adaptation.
    Model {
        #[command(subcommand)]
        cmd: ModelCmd,
    },
    /// Collect or inspect fine-tuning trajectories.
    Traj {
        #[command(subcommand)]
        cmd: TrajCmd,
    },
    /// Interpolation diagnostics on a trajectory store.
    Flows {
        #[command(subcommand)]
        cmd: FlowsCmd,
    },
    /// Train a drift net or score it on validation trajectories.
    Drift {
        #[command(subcommand)]
        cmd: DriftCmd,
    },
    /// Adapt to episodes from a file; one JSON record per episode.
    Adapt {
        #[command(subcommand)]
        cmd: AdaptCmd,
    },
    /// Evaluate variants with the artifacts of a run.
    Eval {
        #[command(flatten)]
        run: RunArg,
        #[arg(long, value_enum, value_delimiter = ',')]
        variants: Vec<VariantArg>,
        #[arg(long, default_value = "various")]
        benchmark: String,
        #[arg(long, value_enum, default_value = "ood")]
        group: GroupArg,
        #[arg(long)]
        per_domain: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Time adaptation for every variant of a run.
    Profile {
        #[command(flatten)]
        run: RunArg,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Retrain the cubic drift net on subsets of the run's trajectories.
    Ablate {
        #[command(flatten)]
        run: RunArg,
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long, value_delimiter = ',', required = true)]
        levels: Vec<usize>,
    },
    /// Run every stage with caching.
    Pipeline {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, short, default_value = "run")]
        out: PathBuf,
        /// Print the default config as TOML and exit.
        #[arg(long)]
        print_default_config: bool,
    },
}

#[derive(Subcommand)]
enum EpisodesCmd {
    Gen {
        #[command(flatten)]
        config: ConfigArg,
        /// `various`, or a fixed benchmark such as `5w5s`.
        #[arg(long, default_value = "various")]
        benchmark: String,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "ood")]
        group: GroupArg,
        #[arg(long, default_value_t = 10)]
        per_domain: usize,
        /// Output file with header; bare lines on stdout when omitted.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    Inspect {
        path: PathBuf,
        /// Print this episode in full instead of a summary.
        #[arg(long)]
        index: Option<usize>,
    },
}

#[derive(Subcommand)]
enum ModelCmd {
    MetaTrain {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Query accuracy with the meta-trained biases on an episode file.
    EvalDirect {
        backbone: PathBuf,
        #[arg(long)]
        episodes: PathBuf,
    },
    Info {
        path: PathBuf,
    },
}

#[derive(Subcommand)]
enum TrajCmd {
    Collect {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    Stats {
        path: PathBuf,
    },
    Inspect {
        path: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

#[derive(Subcommand)]
enum FlowsCmd {
    /// Knot, C1 and integration checks of the cubic flow.
    Check {
        path: PathBuf,
        #[arg(long, default_value_t = 100)]
        limit: usize,
    },
    /// Print one interpolated sample.
    Sample {
        path: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        t: f64,
        #[arg(long, value_enum, default_value = "cubic")]
        kind: KindArg,
    },
}

#[derive(Subcommand)]
enum DriftCmd {
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        backbone: PathBuf,
        /// Directory written by `traj collect`.
        #[arg(long)]
        traj: PathBuf,
        #[arg(long, value_enum, default_value = "cubic")]
        objective: ObjectiveArg,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Flow-matching loss on the validation store.
    EvalMse {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        drift: PathBuf,
    },
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    episodes: PathBuf,
    /// Only the first `limit` episodes.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Subcommand)]
enum AdaptCmd {
    Euler {
        #[command(flatten)]
        common: AdaptArgs,
        #[arg(long)]
        drift: PathBuf,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        /// Defaults to T/N.
        #[arg(long)]
        eta: Option<f64>,
    },
    Hypernet {
        #[command(flatten)]
        common: AdaptArgs,
        #[arg(long)]
        drift: PathBuf,
    },
    Finetune {
        #[command(flatten)]
        common: AdaptArgs,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.03,0.1,0.3")]
        lr_grid: Vec<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Linear,
    Cubic,
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn domains(cfg: &Config) -> Result<Vec<DomainSpec>> {
    let d = &cfg.domains;
    Ok(make_domains(cfg.seeds.domains, d.n_base, d.n_ood, d.dim, &d.params)?)
}

fn benchmark(cfg: &Config, name: &str) -> Result<Benchmark> {
    match benchmarks(&cfg.eval).into_iter().find(|b| b.name == name) {
        Some(b) => Ok(b),
        None => bail!("unknown benchmark {name:?}"),
    }
}

fn base_domains(cfg: &Config) -> Result<Vec<DomainSpec>> {
    Ok(domains(cfg)?.into_iter().filter(|d| d.severity == Severity::Base).collect())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Episodes { cmd } => episodes(cmd)?,
        Cmd::Model { cmd } => model(cmd)?,
        Cmd::Traj { cmd } => traj(cmd)?,
        Cmd::Flows { cmd } => flows_cmd(cmd)?,
        Cmd::Drift { cmd } => drift(cmd)?,
        Cmd::Adapt { cmd } => adapt(cmd)?,
        Cmd::Eval {
            run,
            variants,
            benchmark: name,
            group,
            per_domain,
            json,
        } => {
            let (cfg, art) = run.load()?;
            let b = benchmark(&cfg, &name)?;
            let sev: Severity = group.into();
            let scope = if sev == Severity::Base { "base" } else { "ood" };
            let n = per_domain.unwrap_or(cfg.eval.test_episodes_per_domain);
            let test = episodes_for(&art.domains, sev, b.protocol, Split::Test, n, cfg.seeds.eval, b.name);
            let variants: Vec<Variant> = if variants.is_empty() { Variant::ALL.to_vec() } else { variants.into_iter().map(Into::into).collect() };
            let mut report = EvalReport {
                fingerprint: cfg.fingerprint(),
                rows: vec![],
            };
            for v in variants {
                let m = method(&cfg, &art, v, b.name, scope, cfg.solver.steps)?;
                let scores = score_episodes(&art.backbone, &art.layout, &art.theta_init, m, &test)?;
                report.rows.extend(aggregate(v, b.name, &scores, &art.domains));
            }
            if json {
                print_json(&report)?;
            } else {
                print!("{}", report.to_table());
            }
        }
        Cmd::Profile { run, episodes, repeats } => {
            let (cfg, art) = run.load()?;
            let b = benchmark(&cfg, "various")?;
            let eps: Vec<Episode> = episodes_for(&art.domains, Severity::Ood, b.protocol, Split::Test, episodes, cfg.seeds.eval, b.name)
                .into_iter()
                .take(episodes)
                .collect();
            let lr = [cfg.profile.finetune_lr];
            let mut list = Vec::new();
            for v in Variant::ALL {
                let m = match v {
                    Variant::BiasTune => Method::FineTune {
                        steps: cfg.profile.steps,
                        lr_grid: &lr,
                    },
                    _ => method(&cfg, &art, v, b.name, "ood", cfg.profile.steps)?,
                };
                list.push((v, m));
            }
            let mut rep = profile_cost(&art.backbone, &art.layout, &art.theta_init, &list, &eps, repeats)?;
            rep.fingerprint = cfg.fingerprint();
            print!("{}", rep.to_csv());
        }
        Cmd::Ablate { run, axis, levels } => {
            let (cfg, art) = run.load()?;
            let b = benchmark(&cfg, "various")?;
            let a = &cfg.ablation;
            let eps = |sev, split, n| episodes_for(&art.domains, sev, b.protocol, split, n, cfg.seeds.eval, b.name);
            let (val_ood, val_base) = (eps(Severity::Ood, Split::Val, a.val_episodes_per_domain), eps(Severity::Base, Split::Val, a.val_episodes_per_domain));
            let (test_ood, test_base) = (eps(Severity::Ood, Split::Test, a.test_episodes_per_domain), eps(Severity::Base, Split::Test, a.test_episodes_per_domain));
            let ctx = SweepContext {
                bb: &art.backbone,
                layout: &art.layout,
                theta_init: &art.theta_init,
                domains: &art.domains,
                dataset: &art.dataset,
                drift: cfg.drift.train_config(Objective::Cubic, cfg.seeds.drift),
                steps: cfg.solver.steps,
                eta_multipliers: &cfg.solver.eta_multipliers,
                val_ood: &val_ood,
                val_base: &val_base,
                test_ood: &test_ood,
                test_base: &test_base,
            };
            let rows = ablation_sweep(&ctx, axis.into(), &levels, art.net(Objective::Cubic).ok())?;
            let rep = AblationReport {
                fingerprint: cfg.fingerprint(),
                levels: rows,
            };
            print!("{}", rep.to_csv());
        }
        Cmd::Pipeline {
            config,
            out,
            print_default_config,
        } => {
            if print_default_config {
                print!("{}", Config::default().to_toml_string());
                return Ok(());
            }
            let cfg = config.load()?;
            let outcome = run_pipeline(&cfg, &out)?;
            for (s, (_, secs)) in outcome.stages.iter().zip(&outcome.seconds) {
                eprintln!("{:<16} {:<5} {:>8.1}s  {}", s.stage, if s.cache_hit { "hit" } else { "built" }, secs, &s.key[..16]);
            }
            let eval = fs::read_to_string(outcome.report_dir.join("eval.txt"))?;
            print!("{eval}");
            eprintln!("reports in {}", outcome.report_dir.display());
        }
    }
    Ok(())
}

fn episodes(cmd: EpisodesCmd) -> Result<()> {
    match cmd {
        EpisodesCmd::Gen {
            config,
            benchmark: name,
            split,
            group,
            per_domain,
            out,
        } => {
            let cfg = config.load()?;
            let b = benchmark(&cfg, &name)?;
            let eps = episodes_for(&domains(&cfg)?, group.into(), b.protocol, split.into(), per_domain, cfg.seeds.eval, b.name);
            match out {
                Some(p) => {
                    save_episodes(&eps, cfg.domains.dim, &p)?;
                    eprintln!("wrote {} episodes to {}", eps.len(), p.display());
                }
                None => write_lines(io::stdout().lock(), &eps)?,
            }
        }
        EpisodesCmd::Inspect { path, index } => {
            let (d, eps) = load_episodes(&path)?;
            match index {
                Some(i) => match eps.get(i) {
                    Some(ep) => print_json(ep)?,
                    None => bail!("file has {} episodes", eps.len()),
                },
                None => {
                    let mut out = io::stdout().lock();
                    writeln!(out, "d = {d}, {} episodes", eps.len())?;
                    writeln!(out, "{:>20} {:>6} {:>5} {:>4} {:>8} {:>6}", "id", "domain", "split", "way", "support", "query")?;
                    for ep in &eps {
                        writeln!(out, "{:>20} {:>6} {:>5?} {:>4} {:>8} {:>6}", ep.id, ep.domain, ep.split, ep.way, ep.support.len(), ep.query.len())?;
                    }
                }
            }
        }
    }
    Ok(())
}

fn model(cmd: ModelCmd) -> Result<()> {
    match cmd {
        ModelCmd::MetaTrain { config, out } => {
            let cfg = config.load()?;
            let bb = meta_train_backbone(&base_domains(&cfg)?, &cfg.meta, cfg.seeds.backbone)?;
            bb.save(&out)?;
            eprintln!("backbone {:?} checksum {:016x} -> {}", bb.dims(), bb.checksum(), out.display());
        }
        ModelCmd::EvalDirect { backbone, episodes } => {
            let bb = Backbone::load(&backbone)?;
            let (layout, theta) = select_bias_params(&bb, &BiasSelector::AllBias)?;
            let (_, eps) = load_episodes(&episodes)?;
            let scores = score_episodes(&bb, &layout, &theta, Method::Direct, &eps)?;
            let acc = Summary::of(&scores.iter().map(|s| s.accuracy).collect::<Vec<_>>());
            print_json(&acc)?;
        }
        ModelCmd::Info { path } => {
            let bb = Backbone::load(&path)?;
            let (layout, _) = select_bias_params(&bb, &BiasSelector::AllBias)?;
            print_json(&serde_json::json!({
                "dims": bb.dims(),
                "tau": bb.tau(),
                "checksum": format!("{:016x}", bb.checksum()),
                "bias_params": layout.len(),
                "layout_hash": format!("{:016x}", layout.hash()),
            }))?;
        }
    }
    Ok(())
}

fn traj(cmd: TrajCmd) -> Result<()> {
    match cmd {
        TrajCmd::Collect { config, backbone, out } => {
            let cfg = config.load()?;
            let bb = Backbone::load(&backbone)?;
            let (layout, theta) = select_bias_params(&bb, &BiasSelector::AllBias)?;
            let ds = collect_dataset(&bb, &layout, &theta, &base_domains(&cfg)?, &cfg.collect, cfg.seeds.collect)?;
            fs::create_dir_all(&out)?;
            ds.train.save(&out.join("train.gftr"))?;
            ds.val.save(&out.join("val.gftr"))?;
            save_episodes(&ds.train_episodes, cfg.domains.dim, &out.join("train-episodes.jsonl"))?;
            save_episodes(&ds.val_episodes, cfg.domains.dim, &out.join("val-episodes.jsonl"))?;
            eprintln!("{} train / {} val trajectories -> {}", ds.train.len(), ds.val.len(), out.display());
        }
        TrajCmd::Stats { path } => {
            let s = TrajectoryStore::load(&path, None)?;
            print_json(&serde_json::json!({
                "split": s.split,
                "trajectories": s.len(),
                "dim": s.dim,
                "steps": s.steps,
                "layout_hash": format!("{:016x}", s.layout_hash),
                "sim": s.sim,
                "improvement_rate": endpoint_improvement_rate(&s.trajectories),
                "stats": s.stats,
            }))?;
        }
        TrajCmd::Inspect { path, index } => {
            let s = TrajectoryStore::load(&path, None)?;
            let Some(t) = s.trajectories.get(index) else {
                bail!("store has {} trajectories", s.len());
            };
            print_json(&serde_json::json!({
                "episode_id": t.episode_id,
                "episode_offset": t.episode_offset,
                "init_seed": t.init_seed,
                "perturb_std": t.perturb_std,
                "losses": t.losses,
                "points": (0..=t.steps()).map(|k| t.point(k).to_vec()).collect::<Vec<_>>(),
            }))?;
        }
    }
    Ok(())
}

fn flows_cmd(cmd: FlowsCmd) -> Result<()> {
    match cmd {
        FlowsCmd::Check { path, limit } => {
            let s = TrajectoryStore::load(&path, None)?;
            let c = flows::check_store(&s, limit)?;
            print_json(&c)?;
            if c.max_knot_error > 1e-10 || c.max_c1_gap > 1e-9 {
                bail!("interpolation invariants violated");
            }
        }
        FlowsCmd::Sample { path, index, t, kind } => {
            let s = TrajectoryStore::load(&path, None)?;
            let Some(traj) = s.trajectories.get(index) else {
                bail!("store has {} trajectories", s.len());
            };
            let kind = match kind {
                KindArg::Linear => FlowKind::Linear,
                KindArg::Cubic => FlowKind::Cubic,
            };
            let f = flows::sample(traj, kind, t)?;
            print_json(&serde_json::json!({"t": f.t, "theta": f.theta, "v": f.v, "episode_id": f.episode_id}))?;
        }
    }
    Ok(())
}

struct TrajDir {
    bb: Backbone,
    layout: BiasLayout,
    theta: Vec<f64>,
    train: TrajectoryStore,
    val: TrajectoryStore,
    episodes: Vec<Episode>,
}

fn load_traj_dir(backbone: &Path, traj: &Path) -> Result<TrajDir> {
    let bb = Backbone::load(backbone)?;
    let (layout, theta) = select_bias_params(&bb, &BiasSelector::AllBias)?;
    let h = Some(layout.hash());
    let train = TrajectoryStore::load(&traj.join("train.gftr"), h)?;
    let val = TrajectoryStore::load(&traj.join("val.gftr"), h)?;
    let mut episodes = load_episodes(&traj.join("train-episodes.jsonl"))?.1;
    episodes.extend(load_episodes(&traj.join("val-episodes.jsonl"))?.1);
    Ok(TrajDir {
        bb,
        layout,
        theta,
        train,
        val,
        episodes,
    })
}

fn drift(cmd: DriftCmd) -> Result<()> {
    match cmd {
        DriftCmd::Train {
            config,
            backbone,
            traj,
            objective,
            out,
        } => {
            let cfg = config.load()?;
            let t = load_traj_dir(&backbone, &traj)?;
            let refs: Vec<&Episode> = t.episodes.iter().collect();
            let tc = cfg.drift.train_config(objective.into(), cfg.seeds.drift);
            let (net, report) = train_drift(&t.bb, &t.layout, &t.theta, &t.train, &t.val, &refs, &tc)?;
            net.save(&out)?;
            print_json(&report)?;
        }
        DriftCmd::EvalMse { config, backbone, traj, drift } => {
            let cfg = config.load()?;
            let t = load_traj_dir(&backbone, &traj)?;
            let net = DriftNet::load(&drift)?;
            net.check_backbone(&t.bb, &t.layout)?;
            let tasks = TaskCache::build(&t.bb, &t.layout, &t.theta, &t.episodes)?;
            let groups = validation_groups(&t.val, net.objective, cfg.drift.val_samples_per_trajectory, cfg.seeds.drift)?;
            let loss = flow_matching_loss(&net, &tasks, &groups)?;
            print_json(&serde_json::json!({"objective": net.objective, "convention": net.objective.convention(), "val_loss": loss}))?;
        }
    }
    Ok(())
}

fn adapt(cmd: AdaptCmd) -> Result<()> {
    let (common, solver): (AdaptArgs, Box<dyn Fn(&Backbone, &BiasLayout, &TaskBatch, &[f64]) -> hyperflow::Result<AdaptResult>>) = match cmd {
        AdaptCmd::Euler { common, drift, steps, eta } => {
            let net = DriftNet::load(&drift)?;
            let eta = eta.unwrap_or(net.steps as f64 / steps.max(1) as f64);
            (common, Box::new(move |bb, l, s, th| euler_adapt(&net, bb, l, s, th, &SolveConfig::new(steps, eta))))
        }
        AdaptCmd::Hypernet { common, drift } => {
            let net = DriftNet::load(&drift)?;
            (common, Box::new(move |bb, l, s, th| hypernet_adapt(&net, bb, l, s, th, true)))
        }
        AdaptCmd::Finetune { common, steps, lr_grid } => (common, Box::new(move |bb, l, s, th| finetune_adapt(bb, l, s, th, steps, &lr_grid))),
    };
    let bb = Backbone::load(&common.backbone)?;
    let (layout, theta) = select_bias_params(&bb, &BiasSelector::AllBias)?;
    let (_, eps) = load_episodes(&common.episodes)?;
    let mut out = io::stdout().lock();
    for ep in eps.iter().take(common.limit.unwrap_or(usize::MAX)) {
        let support = TaskBatch::support(ep)?;
        let record = match solver(&bb, &layout, &support, &theta) {
            Ok(r) => serde_json::json!({
                "episode_id": ep.id,
                "domain": ep.domain,
                "accuracy_before": accuracy(&bb, &layout, &theta, ep)?,
                "accuracy_after": accuracy(&bb, &layout, &r.theta, ep)?,
                "relative_loss": r.relative_losses(),
                "result": r,
            }),
            Err(e @ hyperflow::Error::Diverged { .. }) => serde_json::json!({"episode_id": ep.id, "domain": ep.domain, "error": e.to_string()}),
            Err(e) => return Err(e.into()),
        };
        serde_json::to_writer(&mut out, &record)?;
        writeln!(out)?;
    }
    Ok(())
}

fn method<'a>(cfg: &'a Config, art: &'a Artifacts, v: Variant, bench: &str, scope: &str, steps: usize) -> Result<Method<'a>> {
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
}

