use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use pftlab::estimation::{fit_dpo, fit_policy_mle, fit_reward_mle};
use pftlab::experiments::svg::{LinePlot, Series};
use pftlab::experiments::*;
use pftlab::optim::{FitReport, OptimizerConfig};
use pftlab::pipelines::{bon_distribution, expected_true_reward, soft_optimal_in_space, Regularizer};
use pftlab::policy::{causal_entropy, trajectory_distribution};
use pftlab::prefs::{generate_dataset, DatasetSpec, Labeler, PromptPool};
use pftlab::reward::RewardModel;
use pftlab::{
    unroll_gridworld, Error, GlobalReward, MazeSpec, Policy, PolicySpace, PreferenceDataset, RewardSpace, TokenTreeMdp,
};

#[derive(Parser)]
#[command(name = "pftlab", version, about = "Exact tree-MDP lab for preference fine-tuning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Base seed; replaces the seeds of a config (a seed list becomes S, S+1, ...).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv", value_parser = parse_format)]
    format: OutputFormat,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ParallelArgs {
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum Cmd {
    /// Numerical checks of the exact equivalences.
    CheckEquivalences(ExperimentArgs),
    /// Method comparison over horizons, dataset sizes and seeds.
    Sweep(ParallelArgs),
    /// Reward vs soft-value complexity on an unrolled maze.
    Maze(ExperimentArgs),
    /// Global vs local reward-model generalization and Best-of-N.
    RmReport(ParallelArgs),
    /// Label behavior-policy samples with a ground-truth reward.
    Data(DataGenArgs),
    /// Fit a reward model or a policy to a preference dataset.
    Fit {
        #[command(subcommand)]
        target: FitTarget,
    },
    /// Soft-optimal policy of a reward.
    SoftOpt(SoftOptArgs),
    /// Exact Best-of-N output distribution.
    Bon(BonArgs),
}

#[derive(Args)]
struct DataGenArgs {
    #[arg(long)]
    mdp: PathBuf,
    /// Ground-truth reward JSON.
    #[arg(long)]
    truth: PathBuf,
    /// Behavior policy JSON; uniform when omitted.
    #[arg(long)]
    behavior: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pairs: usize,
    /// bt-sample, argmax, or exact-weighted
    #[arg(long, default_value = "bt-sample", value_parser = parse_labeler)]
    labeler: Labeler,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct DataArgs {
    /// MDP or maze JSON.
    #[arg(long)]
    mdp: PathBuf,
    /// Preference dataset (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Ridge coefficient.
    #[arg(long, default_value_t = 1e-4)]
    ridge: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum FitTarget {
    /// Bradley-Terry MLE of a global reward.
    Rm {
        #[command(flatten)]
        data: DataArgs,
        /// tabular, terminal, or linear:<featurizer>
        #[arg(long, default_value = "tabular")]
        space: String,
    },
    /// Policy MLE on the local reward β Σ log π.
    Mle {
        #[command(flatten)]
        data: DataArgs,
        /// tabular or linear:<featurizer>
        #[arg(long, default_value = "tabular")]
        space: String,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
    },
    /// DPO against a reference policy (uniform when omitted).
    Dpo {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "tabular")]
        space: String,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SoftOptArgs {
    #[arg(long)]
    mdp: PathBuf,
    /// Reward JSON.
    #[arg(long)]
    reward: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// KL reference policy; entropy regularization when omitted.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value = "tabular")]
    space: String,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BonArgs {
    #[arg(long)]
    mdp: PathBuf,
    #[arg(long)]
    policy: PathBuf,
    /// Reward model that ranks the N samples.
    #[arg(long)]
    rm: PathBuf,
    /// Ground truth for scoring the output; defaults to the ranking model.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Comma-separated sample counts.
    #[arg(long, default_value = "1,2,4,8,16", value_delimiter = ',')]
    n: Vec<usize>,
    #[command(flatten)]
    common: Common,
}

fn parse_labeler(s: &str) -> Result<Labeler, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown labeler '{s}' (bt-sample, argmax, exact-weighted)"))
}

fn parse_format(s: &str) -> Result<OutputFormat, String> {
    OutputFormat::parse(s).map_err(|e| e.to_string())
}

/// Non-zero exit with a code: 1 for a failed asserted property, 2 otherwise.
struct Failure(u8, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(2, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::CheckEquivalences(a) => check(a),
        Cmd::Sweep(a) => sweep(a),
        Cmd::Maze(a) => maze(a),
        Cmd::RmReport(a) => rm_report(a),
        Cmd::Data(a) => data(a),
        Cmd::Fit { target } => fit(target),
        Cmd::SoftOpt(a) => soft_opt(a),
        Cmd::Bon(a) => bon(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    Ok(ExperimentConfig::load(path)?)
}

fn wrong_kind(path: &Path, found: &ExperimentConfig, want: &str) -> Failure {
    Failure(
        2,
        format!("{}: config is for '{}', not '{want}'", path.display(), found.name()),
    )
}

fn reseed(seeds: &mut [u64], base: u64) {
    for (i, s) in seeds.iter_mut().enumerate() {
        *s = base + i as u64;
    }
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(default))
}

fn report_claims(claims: &[ClaimResult]) -> Outcome {
    for c in claims {
        println!("{}", c.line());
    }
    let failed = claims.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure(1, format!("{failed} of {} claims failed", claims.len())));
    }
    Ok(())
}

fn metrics(claims: &[ClaimResult], start: Instant) -> serde_json::Value {
    json!({
        "claims_passed": claims.iter().filter(|c| c.passed).count(),
        "claims_total": claims.len(),
        "wall_time_s": start.elapsed().as_secs_f64(),
    })
}

fn check(a: ExperimentArgs) -> Outcome {
    let mut cfg = match &a.config {
        Some(p) => match load_config(p)? {
            ExperimentConfig::CheckEquivalences(c) => c,
            other => return Err(wrong_kind(p, &other, "check-equivalences")),
        },
        None => EquivalenceConfig::default(),
    };
    if let Some(s) = a.common.seed {
        reseed(&mut cfg.seeds, s);
        reseed(&mut cfg.simple_reward.seeds, s);
        cfg.soft_oracle.seed = s;
        cfg.projection.seed = s;
        cfg.gradients.seed = s;
    }
    let start = Instant::now();
    let report = check_equivalences(&cfg)?;
    let mut seeds = cfg.seeds.clone();
    seeds.extend([cfg.soft_oracle.seed, cfg.projection.seed, cfg.gradients.seed]);
    let dir = RunDir::create(&out_dir(&a.common, "check-equivalences"), &cfg, seeds)?;
    dir.write_rows("rows", &report.rows, a.common.format)?;
    dir.write_rows("lambda-trend", &report.lambda_trend, a.common.format)?;
    dir.write_json("summary.json", &json!({ "claims": report.claims, "flags": report.flags }))?;
    dir.write_json("metrics.json", &metrics(&report.claims, start))?;
    if !report.lambda_trend.is_empty() {
        let plot = LinePlot {
            title: "two-stage vs MLE gap against the ridge".into(),
            x_label: "log10 ridge".into(),
            y_label: "log10 max gap".into(),
            series: vec![Series {
                name: "max gap".into(),
                points: report
                    .lambda_trend
                    .iter()
                    .map(|p| (p.lambda.log10(), p.max_gap.max(1e-300).log10()))
                    .collect(),
            }],
        };
        dir.write_text("lambda-trend.svg", &plot.render())?;
    }
    for f in &report.flags {
        println!("note: {f}");
    }
    report_claims(&report.claims)
}

fn workers(w: Option<usize>) -> Result<usize, Failure> {
    match w {
        Some(0) => Err(Failure(2, "--workers must be at least 1".into())),
        Some(k) => Ok(k),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn sweep(a: ParallelArgs) -> Outcome {
    let mut cfg = match load_config(&a.config)? {
        ExperimentConfig::Sweep(c) => c,
        other => return Err(wrong_kind(&a.config, &other, "sweep")),
    };
    if let Some(s) = a.common.seed {
        reseed(&mut cfg.seeds, s);
    }
    let workers = workers(a.workers)?;
    let start = Instant::now();
    let report = gv_sweep(&cfg, workers)?;
    let dir = RunDir::create(&out_dir(&a.common, "sweep"), &cfg, cfg.seeds.clone())?;
    dir.write_rows("rows", &report.rows, a.common.format)?;
    dir.write_json("summary.json", &report.summary)?;
    let mut m = metrics(&report.summary.claims, start);
    m["workers"] = json!(workers);
    m["failed_fits"] = json!(report.rows.iter().filter(|r| !r.error.is_empty()).count());
    dir.write_json("metrics.json", &m)?;
    for (name, svg) in sweep::plots(&report.summary) {
        dir.write_text(&name, &svg)?;
    }
    report_claims(&report.summary.claims)
}

fn maze(a: ExperimentArgs) -> Outcome {
    let cfg = match &a.config {
        Some(p) => match load_config(p)? {
            ExperimentConfig::Maze(c) => c,
            other => return Err(wrong_kind(p, &other, "maze")),
        },
        None => MazeConfig::default(),
    };
    let start = Instant::now();
    let rows = maze_complexity_report(&cfg)?;
    let dir = RunDir::create(&out_dir(&a.common, "maze"), &cfg, a.common.seed.into_iter().collect())?;
    dir.write_rows("rows", &rows, a.common.format)?;
    dir.write_text("value-spread.svg", &maze::plot(&rows))?;
    let claim = ClaimResult {
        id: "maze-monotone".into(),
        description: "value-spread proxy non-decreasing in remaining horizon at constant reward size".into(),
        passed: maze::monotone(&rows),
        value: rows.last().map_or(0.0, |r| r.value_spread),
        threshold: rows.first().map_or(0.0, |r| r.value_spread),
        instances: rows.len(),
        note: String::new(),
    };
    let claims = vec![claim];
    dir.write_json("summary.json", &json!({ "claims": claims }))?;
    dir.write_json("metrics.json", &metrics(&claims, start))?;
    for r in &rows {
        println!(
            "h={} depth={} reward_size={} value_spread={:.6} distinct_q={}",
            r.remaining_horizon, r.depth, r.reward_size, r.value_spread, r.distinct_q
        );
    }
    report_claims(&claims)
}

fn rm_report(a: ParallelArgs) -> Outcome {
    let mut cfg = match load_config(&a.config)? {
        ExperimentConfig::RmReport(c) => c,
        other => return Err(wrong_kind(&a.config, &other, "rm-report")),
    };
    if let Some(s) = a.common.seed {
        reseed(&mut cfg.seeds, s);
    }
    let workers = workers(a.workers)?;
    let start = Instant::now();
    let report = rm_generalization_report(&cfg, workers)?;
    let dir = RunDir::create(&out_dir(&a.common, "rm-report"), &cfg, cfg.seeds.clone())?;
    dir.write_rows("validation", &report.validation, a.common.format)?;
    dir.write_rows("bon", &report.bon, a.common.format)?;
    dir.write_json("summary.json", &json!({ "claims": report.claims, "notes": report.notes }))?;
    let mut m = metrics(&report.claims, start);
    m["workers"] = json!(workers);
    dir.write_json("metrics.json", &m)?;
    for (cell, series) in bon_series(&report.bon) {
        let plot = LinePlot {
            title: format!("Best-of-N winrate, {cell}"),
            x_label: "N".into(),
            y_label: "winrate vs behavior".into(),
            series,
        };
        dir.write_text(&format!("bon-{cell}.svg"), &plot.render())?;
    }
    for n in &report.notes {
        println!("note: {n}");
    }
    report_claims(&report.claims)
}

/// Mean winrate per (cell, model, N) across seeds.
fn bon_series(rows: &[rm_report::BonRow]) -> BTreeMap<String, Vec<Series>> {
    let mut acc: BTreeMap<(String, &'static str), BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for r in rows {
        let e = acc
            .entry((r.cell.clone(), r.model.id()))
            .or_default()
            .entry(r.n)
            .or_default();
        e.0 += r.winrate;
        e.1 += 1;
    }
    let mut out: BTreeMap<String, Vec<Series>> = BTreeMap::new();
    for ((cell, model), by_n) in acc {
        out.entry(cell).or_default().push(Series {
            name: model.into(),
            points: by_n.into_iter().map(|(n, (s, k))| (n as f64, s / k as f64)).collect(),
        });
    }
    out
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure(2, format!("{}: {e}", path.display())))
}

fn with_path<T>(path: &Path, r: pftlab::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| Failure(2, format!("{}: {e}", path.display())))
}

/// A token-tree MDP, or a maze (recognized by its `width` field) unrolled into one.
fn load_mdp(path: &Path) -> Result<TokenTreeMdp, Failure> {
    let text = read(path)?;
    let value: serde_json::Value = with_path(path, serde_json::from_str(&text).map_err(Error::from))?;
    if value.get("width").is_some() {
        let spec = with_path(path, MazeSpec::from_json(&text))?;
        Ok(unroll_gridworld(&spec)?.mdp)
    } else {
        with_path(path, TokenTreeMdp::from_json(&text))
    }
}

fn load_policy(path: &Path) -> Result<Policy, Failure> {
    with_path(path, Policy::from_json(&read(path)?))
}

fn load_reward(path: &Path) -> Result<GlobalReward, Failure> {
    with_path(path, GlobalReward::from_json(&read(path)?))
}

fn load_data(path: &Path, mdp: &TokenTreeMdp) -> Result<PreferenceDataset, Failure> {
    let data = with_path(path, PreferenceDataset::read_jsonl(path))?;
    with_path(path, data.validate(mdp))?;
    Ok(data)
}

fn data(a: DataGenArgs) -> Outcome {
    let mdp = load_mdp(&a.mdp)?;
    let truth = load_reward(&a.truth)?;
    let behavior = match &a.behavior {
        Some(p) => load_policy(p)?,
        None => Policy::uniform(&mdp),
    };
    let spec = DatasetSpec {
        n_pairs: a.pairs,
        labeler: a.labeler,
        prompt_pool: PromptPool::Augmented,
        temperature: 1.0,
        seed: a.common.seed.unwrap_or(0),
    };
    let mut data = generate_dataset(&mdp, &behavior, &truth, &spec)?;
    data.provenance.ground_truth = a.truth.display().to_string();
    let cfg = json!({ "mdp": mdp, "truth": truth, "behavior": behavior, "spec": spec });
    let dir = RunDir::create(&out_dir(&a.common, "data"), &cfg, vec![spec.seed])?;
    let path = dir.path.join("data.jsonl");
    data.write_jsonl(&path)?;
    dir.write_json(
        "metrics.json",
        &json!({ "pairs": data.len(), "total_weight": data.total_weight(), "ties": data.provenance.ties }),
    )?;
    println!("{} pairs", data.len());
    println!("{}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct FitConfig<'a> {
    target: &'static str,
    mdp: &'a TokenTreeMdp,
    data: String,
    data_hash: String,
    space: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference: Option<&'a Policy>,
    optimizer: &'a OptimizerConfig,
}

fn fit(target: FitTarget) -> Outcome {
    let (args, space, beta, reference) = match &target {
        FitTarget::Rm { data, space } => (data, space, None, None),
        FitTarget::Mle { data, space, beta } => (data, space, Some(*beta), None),
        FitTarget::Dpo {
            data,
            space,
            beta,
            reference,
        } => (data, space, Some(*beta), Some(reference.clone())),
    };
    let mdp = load_mdp(&args.mdp)?;
    let data = load_data(&args.data, &mdp)?;
    let mut opt = OptimizerConfig::default().with_ridge(args.ridge);
    if let Some(s) = args.common.seed {
        opt.seed = s;
    }
    let reference = match reference {
        Some(Some(p)) => Some(load_policy(&p)?),
        Some(None) => Some(Policy::uniform(&mdp)),
        None => None,
    };
    let cfg = FitConfig {
        target: match target {
            FitTarget::Rm { .. } => "rm",
            FitTarget::Mle { .. } => "mle",
            FitTarget::Dpo { .. } => "dpo",
        },
        mdp: &mdp,
        data: args.data.display().to_string(),
        data_hash: config_hash(&data)?,
        space,
        beta,
        reference: reference.as_ref(),
        optimizer: &opt,
    };
    let root = out_dir(&args.common, "fit");
    let dir = RunDir::create(&root.join(config_hash(&cfg)?), &cfg, vec![opt.seed])?;
    let report: FitReport = match (&target, beta, &reference) {
        (FitTarget::Rm { .. }, _, _) => {
            let rs = RewardSpace::parse(space).map_err(|e| Failure(2, e.to_string()))?;
            let (r, report) = fit_reward_mle(&mdp, &data, &rs, &opt)?;
            dir.write_json("reward.json", &r)?;
            report
        }
        (FitTarget::Mle { .. }, Some(b), _) => {
            let ps = PolicySpace::parse(space).map_err(|e| Failure(2, e.to_string()))?;
            let (p, report) = fit_policy_mle(&mdp, &data, &ps, &opt, b)?;
            dir.write_json("policy.json", &p)?;
            report
        }
        (FitTarget::Dpo { .. }, Some(b), Some(r)) => {
            let ps = PolicySpace::parse(space).map_err(|e| Failure(2, e.to_string()))?;
            let (p, report) = fit_dpo(&mdp, &data, &ps, r, b, &opt)?;
            dir.write_json("policy.json", &p)?;
            report
        }
        _ => unreachable!("beta and reference are set per target"),
    };
    dir.write_json("metrics.json", &report)?;
    println!(
        "{} pairs, objective {:.6e}, grad {:.3e}, {} iterations, converged {}",
        data.len(),
        report.objective,
        report.grad_norm,
        report.iterations,
        report.converged
    );
    println!("{}", dir.path.display());
    Ok(())
}

fn soft_opt(a: SoftOptArgs) -> Outcome {
    let mdp = load_mdp(&a.mdp)?;
    let reward = load_reward(&a.reward)?;
    let space = PolicySpace::parse(&a.space).map_err(|e| Failure(2, e.to_string()))?;
    let regularizer = match &a.reference {
        Some(p) => Regularizer::Kl {
            reference: load_policy(p)?,
        },
        None => Regularizer::Entropy,
    };
    let mut opt = OptimizerConfig::exact();
    if let Some(s) = a.common.seed {
        opt.seed = s;
    }
    let cfg = json!({
        "mdp": mdp,
        "reward": reward,
        "beta": a.beta,
        "regularizer": regularizer,
        "space": space,
        "optimizer": opt,
    });
    let (policy, solver, projection) = soft_optimal_in_space(&mdp, &reward, &space, &regularizer, a.beta, &opt)?;
    let dir = RunDir::create(&out_dir(&a.common, "soft-opt"), &cfg, vec![opt.seed])?;
    dir.write_json("policy.json", &policy)?;
    let value = expected_true_reward(&mdp, &policy, &reward)?;
    let entropy = causal_entropy(&policy, &mdp)?;
    dir.write_json(
        "metrics.json",
        &json!({
            "expected_reward": value,
            "causal_entropy": entropy,
            "solver": solver,
            "projection": projection,
        }),
    )?;
    println!("expected reward {value:.6}, causal entropy {entropy:.6}");
    println!("{}", dir.path.display());
    Ok(())
}

#[derive(Serialize)]
struct BonRow {
    prompt: u32,
    n: usize,
    completion: String,
    base_prob: f64,
    bon_prob: f64,
    rm: f64,
    truth: f64,
}

fn bon(a: BonArgs) -> Outcome {
    let mdp = load_mdp(&a.mdp)?;
    let policy = load_policy(&a.policy)?;
    let rm = load_reward(&a.rm)?;
    let truth = match &a.truth {
        Some(p) => load_reward(p)?,
        None => rm.clone(),
    };
    if a.n.is_empty() || a.n.contains(&0) {
        return Err(Failure(2, "--n needs positive sample counts".into()));
    }
    let cfg = json!({ "mdp": mdp, "policy": policy, "rm": rm, "truth": truth, "n": a.n });
    let rm_bound = rm.bind(&mdp)?;
    let truth_bound = truth.bind(&mdp)?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &n in &a.n {
        let (mut e_rm, mut e_truth) = (0.0, 0.0);
        for (pi, (&prompt, &rho)) in mdp.prompts.iter().zip(&mdp.prompt_dist).enumerate() {
            let base = trajectory_distribution(&policy, &mdp, prompt)?;
            let out = bon_distribution(&mdp, &policy, &rm, prompt, n)?;
            let rv = rm_bound.leaf_values(pi)?;
            let tv = truth_bound.leaf_values(pi)?;
            for (leaf, t) in mdp.enumerate_trajectories(prompt)?.into_iter().enumerate() {
                e_rm += rho * out[leaf] * rv[leaf];
                e_truth += rho * out[leaf] * tv[leaf];
                rows.push(BonRow {
                    prompt,
                    n,
                    completion: t.actions.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(" "),
                    base_prob: base[leaf],
                    bon_prob: out[leaf],
                    rm: rv[leaf],
                    truth: tv[leaf],
                });
            }
        }
        println!("N={n}: expected rm {e_rm:.6}, expected truth {e_truth:.6}");
        summary.push(json!({ "n": n, "expected_rm": e_rm, "expected_truth": e_truth }));
    }
    let dir = RunDir::create(&out_dir(&a.common, "bon"), &cfg, a.common.seed.into_iter().collect())?;
    dir.write_rows("distribution", &rows, a.common.format)?;
    dir.write_json("metrics.json", &summary)?;
    let plot = LinePlot {
        title: "Best-of-N expected reward".into(),
        x_label: "N".into(),
        y_label: "expected reward".into(),
        series: ["expected_rm", "expected_truth"]
            .iter()
            .map(|k| Series {
                name: k.replace('_', " "),
                points: summary
                    .iter()
                    .map(|s| (s["n"].as_f64().unwrap_or(0.0), s[*k].as_f64().unwrap_or(0.0)))
                    .collect(),
            })
            .collect(),
    };
    dir.write_text("bon.svg", &plot.render())?;
    println!("{}", dir.path.display());
    Ok(())
}
