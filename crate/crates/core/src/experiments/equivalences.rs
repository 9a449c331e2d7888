//! Numerical checks of the exact equivalences: soft backward induction vs
//! enumeration, full-tabular projection, two-stage vs offline MLE and DPO,
//! simple-reward optimality, gradients, and the ridge trend.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::ClaimResult;
use crate::error::Result;
use crate::estimation::{fit_dpo, fit_policy_mle, fit_reward_mle, GlobalBtObjective, LocalBtObjective};
use crate::mdp::TokenTreeMdp;
use crate::optim::{numeric_gradient, relative_error, Objective, OptimizerConfig};
use crate::pipelines::{run_two_stage, soft_optimal_in_space, Regularizer};
use crate::policy::{trajectory_distribution, Policy, PolicySpace, TabularPolicy};
use crate::prefs::{generate_dataset, DatasetSpec, Labeler, PreferenceDataset, PromptPool};
use crate::reward::{bt_nll, GlobalReward, LocalReward, RewardSpace};
use crate::rng::Rng;
use crate::soft::{rkl_project, soft_backward_induction, soft_star_distribution, trajectory_mixture, RklObjective};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoftOracleConfig {
    pub instances: usize,
    pub max_alphabet: usize,
    pub max_horizon: usize,
    pub tolerance: f64,
    pub time_limit_s: f64,
    pub seed: u64,
}

impl Default for SoftOracleConfig {
    fn default() -> Self {
        SoftOracleConfig {
            instances: 100,
            max_alphabet: 4,
            max_horizon: 6,
            tolerance: 1e-10,
            time_limit_s: 10.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    pub instances: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            instances: 20,
            tolerance: 1e-8,
            seed: 1,
        }
    }
}

/// Brute-force search over a one-parameter reward: a uniform coarse grid,
/// then `zoom_levels` refinements of `2·zoom_points + 1` points around the
/// incumbent, each at a tenth of the previous spacing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
    pub zoom_levels: usize,
    pub zoom_points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lo: -6.0,
            hi: 6.0,
            step: 1e-2,
            zoom_levels: 5,
            zoom_points: 10,
        }
    }
}

impl GridSpec {
    pub fn finest_step(&self) -> f64 {
        self.step * 0.1f64.powi(self.zoom_levels as i32)
    }

    /// Minimizes `f` over the grid; returns `(argmin, min)`.
    pub fn minimize(&self, mut f: impl FnMut(f64) -> Result<f64>) -> Result<(f64, f64)> {
        let mut best = (f64::NAN, f64::INFINITY);
        let n = ((self.hi - self.lo) / self.step).round() as i64;
        for k in 0..=n {
            let x = self.lo + k as f64 * self.step;
            let v = f(x)?;
            if v < best.1 {
                best = (x, v);
            }
        }
        let mut step = self.step;
        for _ in 0..self.zoom_levels {
            step *= 0.1;
            let center = best.0;
            let m = self.zoom_points as i64;
            for k in -m..=m {
                let x = center + k as f64 * step;
                let v = f(x)?;
                if v < best.1 {
                    best = (x, v);
                }
            }
        }
        Ok(best)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimpleRewardConfig {
    pub alphabet_sizes: Vec<usize>,
    pub horizon: usize,
    pub seeds: Vec<u64>,
    /// One-parameter trajectory featurizer spanning the simple class.
    pub featurizer: String,
    pub tolerance: f64,
    pub grid: GridSpec,
}

impl Default for SimpleRewardConfig {
    fn default() -> Self {
        SimpleRewardConfig {
            alphabet_sizes: vec![2, 3],
            horizon: 3,
            seeds: (0..5).collect(),
            featurizer: "count-a".into(),
            tolerance: 1e-6,
            grid: GridSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradientConfig {
    pub points: usize,
    pub tolerance: f64,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradientConfig {
    fn default() -> Self {
        GradientConfig {
            points: 20,
            tolerance: 1e-5,
            step: 1e-5,
            seed: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EquivalenceConfig {
    pub alphabet_sizes: Vec<usize>,
    pub horizons: Vec<usize>,
    pub seeds: Vec<u64>,
    pub num_prompts: usize,
    /// Ground-truth rewards are tabular `scale · N(0, 1)`.
    pub reward_scale: f64,
    pub beta: f64,
    pub references_per_instance: usize,
    pub reference_scale: f64,
    pub tolerance: f64,
    pub mixture_tolerance: f64,
    /// Restricted policy class for the precondition-gated DPO check.
    pub restricted_space: Option<String>,
    /// Largest projection divergence at which the precondition counts as met.
    pub precondition_tolerance: f64,
    pub lambdas: Vec<f64>,
    pub soft_oracle: SoftOracleConfig,
    pub projection: ProjectionConfig,
    pub simple_reward: SimpleRewardConfig,
    pub gradients: GradientConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        EquivalenceConfig {
            alphabet_sizes: vec![2, 3],
            horizons: vec![1, 2, 3],
            seeds: (0..5).collect(),
            num_prompts: 1,
            reward_scale: 1.0,
            beta: 1.0,
            references_per_instance: 5,
            reference_scale: 1.0,
            tolerance: 1e-6,
            mixture_tolerance: 1e-8,
            restricted_space: Some("linear:depth-action".into()),
            precondition_tolerance: 1e-8,
            lambdas: vec![1e-2, 1e-4, 1e-6],
            soft_oracle: SoftOracleConfig::default(),
            projection: ProjectionConfig::default(),
            simple_reward: SimpleRewardConfig::default(),
            gradients: GradientConfig::default(),
            optimizer: OptimizerConfig::exact(),
        }
    }
}

/// One checked instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceRow {
    pub claim: String,
    pub instance: usize,
    pub alphabet_size: usize,
    pub horizon: usize,
    pub seed: u64,
    pub gap: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub lambda: f64,
    pub max_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub claims: Vec<ClaimResult>,
    pub rows: Vec<EquivalenceRow>,
    pub lambda_trend: Vec<LambdaPoint>,
    #[serde(default)]
    pub flags: Vec<String>,
}

/// Flag attached when the optimizer carries a ridge: the exact equivalences
/// only hold as the ridge vanishes, so their gaps are reported, not asserted.
pub const REGULARIZED_FLAG: &str = "regularized: equivalence asserted only in the λ→0 limit";

const RIDGE_SENSITIVE: [&str; 4] = ["two-stage-vs-mle", "two-stage-vs-dpo", "kl-mixture", "restricted-dpo"];

fn distributions(policy: &Policy, mdp: &TokenTreeMdp) -> Result<Vec<Vec<f64>>> {
    mdp.prompts
        .iter()
        .map(|&p| trajectory_distribution(policy, mdp, p))
        .collect()
}

fn sup_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}

fn random_tabular_reward(mdp: &TokenTreeMdp, rng: &mut Rng, scale: f64) -> GlobalReward {
    GlobalReward::TabularTrajectory {
        parameters: (0..mdp.num_prompts() * mdp.num_leaves())
            .map(|_| scale * rng.normal())
            .collect(),
    }
}

fn exact_data(mdp: &TokenTreeMdp, truth: &GlobalReward) -> Result<PreferenceDataset> {
    generate_dataset(
        mdp,
        &Policy::uniform(mdp),
        truth,
        &DatasetSpec {
            n_pairs: 0,
            labeler: Labeler::ExactWeighted,
            prompt_pool: PromptPool::Augmented,
            temperature: 1.0,
            seed: 0,
        },
    )
}

/// Folds per-instance rows of one claim into its result.
fn claim_from_rows(id: &str, description: &str, rows: &[EquivalenceRow], tolerance: f64) -> ClaimResult {
    let mine: Vec<&EquivalenceRow> = rows.iter().filter(|r| r.claim == id).collect();
    ClaimResult {
        id: id.into(),
        description: description.into(),
        passed: !mine.is_empty() && mine.iter().all(|r| r.passed),
        value: mine.iter().map(|r| r.gap).fold(0.0, f64::max),
        threshold: tolerance,
        instances: mine.len(),
        note: String::new(),
    }
}

struct Grid<'a> {
    cfg: &'a EquivalenceConfig,
}

impl Grid<'_> {
    /// `(instance, alphabet, horizon, seed, mdp, truth)` over the configured grid.
    fn instances(&self) -> Result<Vec<(usize, usize, usize, u64, TokenTreeMdp, GlobalReward)>> {
        let c = self.cfg;
        let mut out = Vec::new();
        for &a in &c.alphabet_sizes {
            for &h in &c.horizons {
                for &seed in &c.seeds {
                    let mdp = TokenTreeMdp::uniform(c.num_prompts, a, h)?;
                    let mut rng = Rng::derive(seed, (a * 100 + h) as u64);
                    let truth = random_tabular_reward(&mdp, &mut rng, c.reward_scale);
                    out.push((out.len(), a, h, seed, mdp, truth));
                }
            }
        }
        Ok(out)
    }
}

fn row(claim: &str, instance: usize, a: usize, h: usize, seed: u64, gap: f64, tol: f64) -> EquivalenceRow {
    EquivalenceRow {
        claim: claim.into(),
        instance,
        alphabet_size: a,
        horizon: h,
        seed,
        gap,
        tolerance: tol,
        passed: gap <= tol,
        note: String::new(),
    }
}

fn soft_oracle(cfg: &SoftOracleConfig, rows: &mut Vec<EquivalenceRow>) -> Result<f64> {
    let start = Instant::now();
    for k in 0..cfg.instances {
        let mut rng = Rng::derive(cfg.seed, k as u64);
        let a = 2 + rng.below(cfg.max_alphabet.max(2) as u64 - 1) as usize;
        let h = 1 + rng.below(cfg.max_horizon.max(1) as u64) as usize;
        let prompts = 1 + rng.below(2) as usize;
        let mdp = TokenTreeMdp::uniform(prompts, a, h)?;
        let r = random_tabular_reward(&mdp, &mut rng, 2.0);
        let reference: Option<Policy> = (k % 2 == 1).then(|| TabularPolicy::random(&mdp, &mut rng, 1.0).into());
        let sol = soft_backward_induction(&r, &mdp, reference.as_ref())?;
        let policy: Policy = sol.policy.into();
        let mut gap: f64 = 0.0;
        for &p in &mdp.prompts {
            let bi = trajectory_distribution(&policy, &mdp, p)?;
            let en = soft_star_distribution(&r, &mdp, p, reference.as_ref())?;
            gap = gap.max(sup_gap(&[bi], &[en]));
        }
        let mut rw = row("soft-oracle", k, a, h, cfg.seed, gap, cfg.tolerance);
        if reference.is_some() {
            rw.note = "reference".into();
        }
        rows.push(rw);
    }
    Ok(start.elapsed().as_secs_f64())
}

fn projection(cfg: &ProjectionConfig, opt: &OptimizerConfig, rows: &mut Vec<EquivalenceRow>) -> Result<()> {
    for k in 0..cfg.instances {
        let mut rng = Rng::derive(cfg.seed, k as u64);
        let a = 2 + rng.below(2) as usize;
        let h = 1 + rng.below(4) as usize;
        let mdp = TokenTreeMdp::uniform(1 + rng.below(2) as usize, a, h)?;
        let r = random_tabular_reward(&mdp, &mut rng, 2.0);
        let reference: Policy = TabularPolicy::random(&mdp, &mut rng, 1.0).into();
        let compiled = PolicySpace::FullTabular.compile(&mdp)?;
        for with_ref in [false, true] {
            let rf = with_ref.then_some(&reference);
            let targets = mdp
                .prompts
                .iter()
                .map(|&p| soft_star_distribution(&r, &mdp, p, rf))
                .collect::<Result<Vec<_>>>()?;
            let proj = rkl_project(&mdp, &targets, &compiled, opt)?;
            let bi: Policy = soft_backward_induction(&r, &mdp, rf)?.policy.into();
            let gap = sup_gap(&distributions(&proj.policy, &mdp)?, &distributions(&bi, &mdp)?);
            let mut rw = row("projection", k, a, h, cfg.seed, gap, cfg.tolerance);
            rw.note = if with_ref { "reference" } else { "no reference" }.into();
            rows.push(rw);
        }
    }
    Ok(())
}

fn two_stage_vs_offline(cfg: &EquivalenceConfig, rows: &mut Vec<EquivalenceRow>) -> Result<()> {
    let opt = &cfg.optimizer;
    for (k, a, h, seed, mdp, truth) in (Grid { cfg }).instances()? {
        let data = exact_data(&mdp, &truth)?;
        let two = run_two_stage(
            &mdp,
            &data,
            &RewardSpace::tabular(),
            &PolicySpace::FullTabular,
            &Regularizer::Entropy,
            cfg.beta,
            opt,
        )?;
        let (mle, _) = fit_policy_mle(&mdp, &data, &PolicySpace::FullTabular, opt, cfg.beta)?;
        let p_two = distributions(&two.policy, &mdp)?;
        rows.push(row(
            "two-stage-vs-mle",
            k,
            a,
            h,
            seed,
            sup_gap(&p_two, &distributions(&mle, &mdp)?),
            cfg.tolerance,
        ));
        for j in 0..cfg.references_per_instance {
            let mut rng = Rng::derive(seed, 1000 + (k * 100 + j) as u64);
            let reference: Policy = TabularPolicy::random(&mdp, &mut rng, cfg.reference_scale).into();
            let reg = Regularizer::Kl {
                reference: reference.clone(),
            };
            let (kl, _, _) = soft_optimal_in_space(&mdp, &two.reward, &PolicySpace::FullTabular, &reg, cfg.beta, opt)?;
            let (dpo, _) = fit_dpo(&mdp, &data, &PolicySpace::FullTabular, &reference, cfg.beta, opt)?;
            let p_kl = distributions(&kl, &mdp)?;
            let idx = k * cfg.references_per_instance + j;
            rows.push(row(
                "two-stage-vs-dpo",
                idx,
                a,
                h,
                seed,
                sup_gap(&p_kl, &distributions(&dpo, &mdp)?),
                cfg.tolerance,
            ));
            let p_ref = distributions(&reference, &mdp)?;
            let mix = p_ref
                .iter()
                .zip(&p_two)
                .map(|(r, t)| trajectory_mixture(r, t))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row("kl-mixture", idx, a, h, seed, sup_gap(&p_kl, &mix), cfg.mixture_tolerance));
        }
    }
    Ok(())
}

/// DPO in a restricted class against two-stage projected into it, only where
/// the class contains the unrestricted DPO optimum.
fn restricted(cfg: &EquivalenceConfig, space_id: &str, rows: &mut Vec<EquivalenceRow>) -> Result<()> {
    let opt = &cfg.optimizer;
    let space = PolicySpace::parse(space_id)?;
    for (k, a, h, seed, mdp, random_truth) in (Grid { cfg }).instances()? {
        let compiled = space.compile(&mdp)?;
        let mut rng = Rng::derive(seed, 5000 + k as u64);
        // Additive truth and an in-class reference put the optimum in a
        // depth-action class; the random tabular truth generally does not.
        let structured = GlobalReward::LinearFeatures {
            featurizer: "position-token".into(),
            parameters: (0..h * a).map(|_| cfg.reward_scale * rng.normal()).collect(),
        };
        let ref_params: Vec<f64> = (0..compiled.num_params()).map(|_| cfg.reference_scale * rng.normal()).collect();
        let reference = compiled.to_policy(&ref_params);
        for (label, truth) in [("structured", &structured), ("random", &random_truth)] {
            let data = exact_data(&mdp, truth)?;
            let (full, _) = fit_dpo(&mdp, &data, &PolicySpace::FullTabular, &reference, cfg.beta, opt)?;
            let proj = rkl_project(&mdp, &distributions(&full, &mdp)?, &compiled, opt)?;
            let divergence = proj.report.objective.max(0.0);
            let mut rw = row("restricted-dpo", k, a, h, seed, 0.0, cfg.tolerance);
            if divergence > cfg.precondition_tolerance {
                rw.note = format!("{label}: precondition unmet (divergence {divergence:.3e})");
                rows.push(rw);
                continue;
            }
            let (reward, _) = fit_reward_mle(&mdp, &data, &RewardSpace::tabular(), opt)?;
            let reg = Regularizer::Kl {
                reference: reference.clone(),
            };
            let (two, _, _) = soft_optimal_in_space(&mdp, &reward, &space, &reg, cfg.beta, opt)?;
            let (dpo, _) = fit_dpo(&mdp, &data, &space, &reference, cfg.beta, opt)?;
            rw.gap = sup_gap(&distributions(&two, &mdp)?, &distributions(&dpo, &mdp)?);
            rw.passed = rw.gap <= cfg.tolerance;
            rw.note = format!("{label}: precondition met");
            rows.push(rw);
        }
    }
    Ok(())
}

fn simple_reward(cfg: &EquivalenceConfig, rows: &mut Vec<EquivalenceRow>) -> Result<()> {
    let sc = &cfg.simple_reward;
    let opt = &cfg.optimizer;
    let space = RewardSpace::linear(&sc.featurizer);
    let mut k = 0;
    for &a in &sc.alphabet_sizes {
        for &seed in &sc.seeds {
            let mdp = TokenTreeMdp::uniform(cfg.num_prompts, a, sc.horizon)?;
            let truth = random_tabular_reward(&mdp, &mut Rng::derive(seed, 9000 + a as u64), cfg.reward_scale);
            let data = exact_data(&mdp, &truth)?;
            let nll_of = |r: &GlobalReward| -> Result<f64> {
                let (pi, _, _) =
                    soft_optimal_in_space(&mdp, r, &PolicySpace::FullTabular, &Regularizer::Entropy, cfg.beta, opt)?;
                Ok(bt_nll(&LocalReward::new(pi).with_beta(cfg.beta), &mdp, &data, 0.0, &[])?.pure_nll)
            };
            let (fitted, _) = fit_reward_mle(&mdp, &data, &space, opt)?;
            let two = nll_of(&fitted)?;
            let (theta, best) = sc.grid.minimize(|t| {
                nll_of(&GlobalReward::LinearFeatures {
                    featurizer: sc.featurizer.clone(),
                    parameters: vec![t],
                })
            })?;
            let mut rw = row("simple-reward", k, a, sc.horizon, seed, (two - best).abs(), sc.tolerance);
            rw.note = format!("fitted {:.6}, grid {theta:.7}", fitted.parameters()[0]);
            rows.push(rw);
            k += 1;
        }
    }
    Ok(())
}

fn gradients(cfg: &GradientConfig, rows: &mut Vec<EquivalenceRow>) -> Result<()> {
    let mdp = TokenTreeMdp::uniform(2, 3, 3)?;
    let mut rng = Rng::new(cfg.seed);
    let truth = random_tabular_reward(&mdp, &mut rng, 1.0);
    let behavior = Policy::uniform(&mdp);
    let data = generate_dataset(
        &mdp,
        &behavior,
        &truth,
        &DatasetSpec {
            n_pairs: 40,
            labeler: Labeler::BtSample,
            prompt_pool: PromptPool::Augmented,
            temperature: 1.0,
            seed: cfg.seed,
        },
    )?;
    let compiled = PolicySpace::FullTabular.compile(&mdp)?;
    let linear = PolicySpace::linear("depth-action").compile(&mdp)?;
    let reference = TabularPolicy::random(&mdp, &mut rng, 1.0);
    let ref_table = Policy::from(reference).log_table(&mdp)?;
    let targets: Vec<Vec<f64>> = mdp
        .prompts
        .iter()
        .map(|&p| soft_star_distribution(&truth, &mdp, p, None))
        .collect::<Result<_>>()?;
    let global = GlobalBtObjective::new(&mdp, &data, &RewardSpace::tabular(), 1e-3)?;
    let mle = LocalBtObjective::new(&mdp, &compiled, &data, None, 0.7, 1e-3, None)?;
    let dpo = LocalBtObjective::new(&mdp, &compiled, &data, Some(&ref_table), 0.7, 1e-3, None)?;
    let rkl = RklObjective::new(&mdp, &linear, &targets)?;
    let objectives: [(&str, &dyn DynObjective); 4] =
        [("grad-bt-global", &global), ("grad-mle", &mle), ("grad-dpo", &dpo), ("grad-rkl", &rkl)];
    for (name, f) in objectives {
        for k in 0..cfg.points {
            let x: Vec<f64> = (0..f.n()).map(|_| rng.normal()).collect();
            let (analytic, numeric) = f.both(&x, cfg.step);
            let err = relative_error(&analytic, &numeric, 1e-8);
            rows.push(row(name, k, mdp.alphabet_size, mdp.horizon, cfg.seed, err, cfg.tolerance));
        }
    }
    Ok(())
}

/// Object-safe view of an objective for the gradient table.
trait DynObjective {
    fn n(&self) -> usize;
    fn both(&self, x: &[f64], h: f64) -> (Vec<f64>, Vec<f64>);
}

impl<T: Objective> DynObjective for T {
    fn n(&self) -> usize {
        self.dim()
    }
    fn both(&self, x: &[f64], h: f64) -> (Vec<f64>, Vec<f64>) {
        let mut g = vec![0.0; self.dim()];
        self.value_grad(x, &mut g);
        (g, numeric_gradient(self, x, h))
    }
}

fn lambda_trend(cfg: &EquivalenceConfig) -> Result<Vec<LambdaPoint>> {
    let mut out = Vec::new();
    let instances = Grid { cfg }.instances()?;
    for &lambda in &cfg.lambdas {
        let opt = cfg.optimizer.clone().with_ridge(lambda);
        let mut worst: f64 = 0.0;
        for (_, _, _, _, mdp, truth) in &instances {
            let data = exact_data(mdp, truth)?;
            let two = run_two_stage(
                mdp,
                &data,
                &RewardSpace::tabular(),
                &PolicySpace::FullTabular,
                &Regularizer::Entropy,
                cfg.beta,
                &opt,
            )?;
            let (mle, _) = fit_policy_mle(mdp, &data, &PolicySpace::FullTabular, &opt, cfg.beta)?;
            worst = worst.max(sup_gap(&distributions(&two.policy, mdp)?, &distributions(&mle, mdp)?));
        }
        out.push(LambdaPoint { lambda, max_gap: worst });
    }
    Ok(out)
}

pub fn check_equivalences(cfg: &EquivalenceConfig) -> Result<EquivalenceReport> {
    cfg.optimizer.validate()?;
    let mut rows = Vec::new();
    let mut claims = Vec::new();

    let elapsed = soft_oracle(&cfg.soft_oracle, &mut rows)?;
    let mut c = claim_from_rows(
        "soft-oracle",
        "soft backward induction matches enumeration",
        &rows,
        cfg.soft_oracle.tolerance,
    );
    c.passed &= elapsed <= cfg.soft_oracle.time_limit_s;
    c.note = format!("{elapsed:.2}s for all instances (limit {}s)", cfg.soft_oracle.time_limit_s);
    claims.push(c);

    projection(&cfg.projection, &cfg.optimizer, &mut rows)?;
    claims.push(claim_from_rows(
        "projection",
        "full-tabular reverse-KL projection matches backward induction",
        &rows,
        cfg.projection.tolerance,
    ));

    two_stage_vs_offline(cfg, &mut rows)?;
    claims.push(claim_from_rows(
        "two-stage-vs-mle",
        "two-stage RLHF equals offline policy MLE on exact-weighted data",
        &rows,
        cfg.tolerance,
    ));
    claims.push(claim_from_rows(
        "two-stage-vs-dpo",
        "KL two-stage RLHF equals offline DPO on exact-weighted data",
        &rows,
        cfg.tolerance,
    ));
    claims.push(claim_from_rows(
        "kl-mixture",
        "KL two-stage distribution is the reference-weighted mixture",
        &rows,
        cfg.mixture_tolerance,
    ));

    if let Some(space) = &cfg.restricted_space {
        restricted(cfg, space, &mut rows)?;
        let mut c = claim_from_rows(
            "restricted-dpo",
            "restricted-class DPO equals projected two-stage where the class holds the optimum",
            &rows,
            cfg.tolerance,
        );
        let mine: Vec<&EquivalenceRow> = rows.iter().filter(|r| r.claim == "restricted-dpo").collect();
        let met = mine.iter().filter(|r| r.note.contains("met") && !r.note.contains("unmet")).count();
        c.note = format!("precondition met on {met} of {} instances", mine.len());
        claims.push(c);
    }

    simple_reward(cfg, &mut rows)?;
    let mut c = claim_from_rows(
        "simple-reward",
        "two-stage over a simple reward class attains the grid-best BT likelihood",
        &rows,
        cfg.simple_reward.tolerance,
    );
    let g = &cfg.simple_reward.grid;
    c.note = format!(
        "grid [{}, {}] step {}, {} zoom levels to step {:.0e}",
        g.lo,
        g.hi,
        g.step,
        g.zoom_levels,
        g.finest_step()
    );
    claims.push(c);

    gradients(&cfg.gradients, &mut rows)?;
    for (id, what) in [
        ("grad-bt-global", "global BT NLL"),
        ("grad-mle", "policy-MLE loss"),
        ("grad-dpo", "DPO loss"),
        ("grad-rkl", "reverse-KL projection loss"),
    ] {
        claims.push(claim_from_rows(
            id,
            &format!("analytic gradient of the {what} matches finite differences"),
            &rows,
            cfg.gradients.tolerance,
        ));
    }

    let trend = lambda_trend(cfg)?;
    if trend.len() > 1 {
        let mut sorted = trend.clone();
        sorted.sort_by(|a, b| b.lambda.total_cmp(&a.lambda));
        let monotone = sorted.windows(2).all(|w| w[1].max_gap <= w[0].max_gap);
        claims.push(ClaimResult {
            id: "ridge-trend".into(),
            description: "ridge-regularized two-stage/MLE gap shrinks with the ridge".into(),
            passed: monotone,
            value: sorted.last().map_or(0.0, |p| p.max_gap),
            threshold: sorted[0].max_gap,
            instances: sorted.len(),
            note: sorted
                .iter()
                .map(|p| format!("λ={:e}: {:.3e}", p.lambda, p.max_gap))
                .collect::<Vec<_>>()
                .join(", "),
        });
    }

    let mut flags = Vec::new();
    if cfg.optimizer.ridge > 0.0 {
        flags.push(REGULARIZED_FLAG.to_string());
        for c in claims.iter_mut().filter(|c| RIDGE_SENSITIVE.contains(&c.id.as_str())) {
            if !c.passed {
                c.passed = true;
                c.note = format!("{REGULARIZED_FLAG}; {}", c.note).trim_end_matches("; ").into();
            }
        }
    }
    Ok(EquivalenceReport {
        claims,
        rows,
        lambda_trend: trend,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EquivalenceConfig {
        EquivalenceConfig {
            alphabet_sizes: vec![2],
            horizons: vec![1, 2],
            seeds: vec![0, 1],
            references_per_instance: 2,
            soft_oracle: SoftOracleConfig {
                instances: 10,
                max_horizon: 4,
                ..Default::default()
            },
            projection: ProjectionConfig {
                instances: 3,
                ..Default::default()
            },
            simple_reward: SimpleRewardConfig {
                alphabet_sizes: vec![2],
                horizon: 2,
                seeds: vec![0],
                grid: GridSpec {
                    step: 0.05,
                    ..Default::default()
                },
                ..Default::default()
            },
            gradients: GradientConfig {
                points: 3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn small_grid_passes() {
        let r = check_equivalences(&small()).unwrap();
        for c in &r.claims {
            assert!(c.passed, "{}", c.line());
        }
        assert_eq!(r.lambda_trend.len(), 3);
    }

    #[test]
    fn restricted_check_reports_both_outcomes() {
        let r = check_equivalences(&small()).unwrap();
        let notes: Vec<&str> = r
            .rows
            .iter()
            .filter(|r| r.claim == "restricted-dpo")
            .map(|r| r.note.as_str())
            .collect();
        assert!(notes.iter().any(|n| n.starts_with("structured: precondition met")));
        assert!(notes.iter().any(|n| n.contains("unmet")));
    }

    #[test]
    fn ridge_runs_are_flagged_not_failed() {
        let mut cfg = small();
        cfg.optimizer = OptimizerConfig::exact().with_ridge(1e-2);
        let r = check_equivalences(&cfg).unwrap();
        assert_eq!(r.flags, vec![REGULARIZED_FLAG.to_string()]);
        let c = r.claims.iter().find(|c| c.id == "two-stage-vs-mle").unwrap();
        assert!(c.value > cfg.tolerance);
        assert!(c.passed && c.note.starts_with("regularized"));
    }

    #[test]
    fn grid_search_finds_quadratic_minimum() {
        let g = GridSpec::default();
        let (x, v) = g.minimize(|t| Ok((t - 1.234567).powi(2))).unwrap();
        assert!((x - 1.234567).abs() <= g.finest_step());
        assert!(v < 1e-12);
    }
}
