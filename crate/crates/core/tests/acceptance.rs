//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::path::PathBuf;
use std::time::Instant;

use pftlab::experiments::maze::monotone;
use pftlab::experiments::*;

fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&path).unwrap()
}

struct Outcome {
    criterion: usize,
    title: &'static str,
    passed: bool,
    details: Vec<String>,
}

fn from_claims(criterion: usize, title: &'static str, claims: &[&ClaimResult]) -> Outcome {
    Outcome {
        criterion,
        title,
        passed: !claims.is_empty() && claims.iter().all(|c| c.passed),
        details: claims.iter().map(|c| c.line()).collect(),
    }
}

fn pick<'a>(claims: &'a [ClaimResult], ids: &[&str]) -> Vec<&'a ClaimResult> {
    ids.iter()
        .map(|id| claims.iter().find(|c| c.id == *id).unwrap_or_else(|| panic!("missing claim {id}")))
        .collect()
}

fn equivalence_criteria(out: &mut Vec<Outcome>) {
    let ExperimentConfig::CheckEquivalences(cfg) = config("check-equivalences.json") else {
        panic!("check-equivalences.json holds another experiment");
    };
    let report = check_equivalences(&cfg).unwrap();
    let c = &report.claims;

    let oracle = pick(c, &["soft-oracle"]);
    let mut o = from_claims(1, "soft backward induction vs enumeration, >=100 instances, <10s", &oracle);
    o.passed &= oracle[0].instances >= 100;
    out.push(o);

    let proj = pick(c, &["projection"]);
    let mut o = from_claims(2, "full-tabular projection vs backward induction, with and without reference", &proj);
    o.passed &= proj[0].instances >= 40;
    out.push(o);

    let mle = pick(c, &["two-stage-vs-mle"]);
    let mut o = from_claims(3, "two-stage equals policy MLE over A{2,3} x H{1,2,3} x 5 seeds", &mle);
    o.passed &= cfg.alphabet_sizes == [2, 3] && cfg.horizons == [1, 2, 3] && cfg.seeds.len() >= 5;
    out.push(o);

    let dpo = pick(c, &["two-stage-vs-dpo", "kl-mixture"]);
    let mut o = from_claims(4, "KL two-stage equals DPO and the reference mixture, >=5 references", &dpo);
    o.passed &= cfg.references_per_instance >= 5;
    out.push(o);

    let simple = pick(c, &["simple-reward"]);
    let mut o = from_claims(5, "simple-reward two-stage attains the grid-best likelihood, >=5 instances", &simple);
    o.passed &= simple[0].instances >= 5;
    out.push(o);

    let grads = pick(c, &["grad-bt-global", "grad-mle", "grad-dpo", "grad-rkl"]);
    let mut o = from_claims(6, "analytic gradients vs finite differences at 20 points each", &grads);
    o.passed &= grads.iter().all(|g| g.instances >= 20 && g.threshold <= 1e-5);
    out.push(o);
}

fn sweep_criteria(out: &mut Vec<Outcome>) {
    let ExperimentConfig::Sweep(cfg) = config("sweep-acceptance.json") else {
        panic!("sweep-acceptance.json holds another experiment");
    };
    let start = Instant::now();
    let report = gv_sweep(&cfg, 4).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let claims: Vec<&ClaimResult> = report.summary.claims.iter().collect();
    let mut o = from_claims(7, "horizon-6 gap, horizon-1 null, lookup online null; >=20 seeds, <15 min on 4 workers", &claims);
    o.passed &= cfg.seeds.len() >= 20 && claims.len() == 3 && elapsed < 900.0;
    o.details.push(format!("{} rows in {elapsed:.1}s", report.rows.len()));
    out.push(o);

    // Same seeds, different worker count: the CSV must not change by a byte.
    let first = rows_to_csv(&report.rows).unwrap();
    let again = rows_to_csv(&gv_sweep(&cfg, 3).unwrap().rows).unwrap();
    let maze_cfg = MazeConfig::default();
    let maze_a = rows_to_csv(&maze_complexity_report(&maze_cfg).unwrap()).unwrap();
    let maze_b = rows_to_csv(&maze_complexity_report(&maze_cfg).unwrap()).unwrap();
    out.push(Outcome {
        criterion: 9,
        title: "same seeds give byte-identical CSVs (4 vs 3 workers)",
        passed: first.as_bytes() == again.as_bytes() && maze_a == maze_b,
        details: vec![format!("sweep csv {} bytes, maze csv {} bytes", first.len(), maze_a.len())],
    });
}

fn maze_criterion(out: &mut Vec<Outcome>) {
    let ExperimentConfig::Maze(cfg) = config("maze.json") else {
        panic!("maze.json holds another experiment");
    };
    let rows = maze_complexity_report(&cfg).unwrap();
    out.push(Outcome {
        criterion: 8,
        title: "maze value-spread proxy non-decreasing in remaining horizon, reward size constant",
        passed: rows.len() == cfg.maze.horizon + 1 && monotone(&rows),
        details: vec![rows
            .iter()
            .map(|r| format!("h={}: {:.4}", r.remaining_horizon, r.value_spread))
            .collect::<Vec<_>>()
            .join(", ")],
    });
}

#[test]
fn acceptance() {
    let mut out = Vec::new();
    equivalence_criteria(&mut out);
    sweep_criteria(&mut out);
    maze_criterion(&mut out);
    out.sort_by_key(|o| o.criterion);
    for o in &out {
        println!("{} criterion {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.criterion, o.title);
        for d in &o.details {
            println!("    {d}");
        }
    }
    let failed: Vec<usize> = out.iter().filter(|o| !o.passed).map(|o| o.criterion).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
