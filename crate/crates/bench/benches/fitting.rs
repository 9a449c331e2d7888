use criterion::{black_box, criterion_group, criterion_main, Criterion};

use pftlab::estimation::{fit_dpo, fit_policy_mle, fit_reward_mle};
use pftlab::optim::OptimizerConfig;
use pftlab::pipelines::bon_distribution;
use pftlab::prefs::{generate_dataset, DatasetSpec, Labeler, PromptPool};
use pftlab::{GlobalReward, Policy, PolicySpace, PreferenceDataset, RewardSpace, TokenTreeMdp};

fn setup() -> (TokenTreeMdp, GlobalReward, PreferenceDataset) {
    let mdp = TokenTreeMdp::uniform(2, 3, 3).unwrap();
    let truth = GlobalReward::count_first();
    let spec = DatasetSpec {
        n_pairs: 500,
        labeler: Labeler::BtSample,
        prompt_pool: PromptPool::Augmented,
        temperature: 1.0,
        seed: 0,
    };
    let data = generate_dataset(&mdp, &Policy::uniform(&mdp), &truth, &spec).unwrap();
    (mdp, truth, data)
}

fn fitters(c: &mut Criterion) {
    let (mdp, _, data) = setup();
    let cfg = OptimizerConfig::default();
    let reference = Policy::uniform(&mdp);
    let mut group = c.benchmark_group("fit");
    group.sample_size(20);
    group.bench_function("reward_mle/tabular", |b| {
        b.iter(|| fit_reward_mle(&mdp, black_box(&data), &RewardSpace::tabular(), &cfg).unwrap())
    });
    group.bench_function("policy_mle/tabular", |b| {
        b.iter(|| fit_policy_mle(&mdp, black_box(&data), &PolicySpace::FullTabular, &cfg, 1.0).unwrap())
    });
    group.bench_function("dpo/tabular", |b| {
        b.iter(|| fit_dpo(&mdp, black_box(&data), &PolicySpace::FullTabular, &reference, 1.0, &cfg).unwrap())
    });
    group.bench_function("dpo/linear-depth-action", |b| {
        let space = PolicySpace::linear("depth-action");
        b.iter(|| fit_dpo(&mdp, black_box(&data), &space, &reference, 1.0, &cfg).unwrap())
    });
    group.finish();
}

fn bon(c: &mut Criterion) {
    let mdp = TokenTreeMdp::uniform(1, 4, 5).unwrap();
    let policy = Policy::uniform(&mdp);
    let rm = GlobalReward::count_first();
    c.bench_function("bon_distribution/A4H5/N16", |b| {
        b.iter(|| bon_distribution(&mdp, black_box(&policy), &rm, 0, 16).unwrap())
    });
}

criterion_group!(benches, fitters, bon);
criterion_main!(benches);
