//! The nine acceptance criteria, one test per criterion. Each prints a
//! single `criterion N: PASS/FAIL — …` line (visible with
//! `--nocapture`); the test name itself gives the per-criterion verdict
//! in the default harness output.
//!
//! Criteria 6–8 are directional training comparisons; their runs are
//! shared through a lazily computed cache so the λ-pair, the ablation
//! grid, and the router comparison reuse the same baseline trainings.

mod common;

use std::collections::BTreeMap;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use dynfuse::ablate::variant_config;
use dynfuse::config::TrainConfig;
use dynfuse::losses::{bbc_loss, consistency_loss, spd_loss};
use dynfuse::router::RouteMode;
use dynfuse::tensor::Tensor;
use dynfuse::train::Trainer;
use dynfuse::verify::gradcheck_battery;
use dynfuse::Tape;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use common::*;

fn verdict(criterion: u32, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion}: {detail}");
}

// ---------------------------------------------------------------- C1

#[test]
fn criterion_1_reverse_mode_gradients_match_central_differences() {
    let t0 = Instant::now();
    let report = gradcheck_battery(&[0, 1, 2, 3, 4]).expect("battery runs");
    let elapsed = t0.elapsed();
    let in_budget = elapsed < Duration::from_secs(120);
    let detail = format!(
        "max rel err {:.3e} (tol {:.0e}, h 1e-4) over {} coordinates, {} blocks x 5 seeds, {:.1?}{}",
        report.max_rel_err(),
        report.tol,
        report.coords_checked(),
        report.results.len() / 5,
        elapsed,
        if in_budget { "" } else { " — OVER the 2 min budget" },
    );
    verdict(1, report.pass() && in_budget, &detail);
}

// ---------------------------------------------------------------- C2

#[test]
fn criterion_2_routing_distributions_stay_on_the_simplex() {
    let model = tiny_model(7);
    let mut rng = StdRng::seed_from_u64(2000);
    let mut worst: f64 = 0.0;
    let mut rows = 0usize;
    for _ in 0..1000 {
        let img = random_image(&mut rng, 2, 2, 3);
        let len = rng.gen_range(1..=6);
        let tokens = random_tokens(&mut rng, len, 9);
        let tape = Tape::new();
        let fwd = model
            .query_forward(&tape, &img, &tokens, &RouteMode::Learned)
            .expect("forward");
        for site in &fwd.sites {
            let sum: f64 = site.probs.iter().sum();
            assert!(
                site.probs.iter().all(|p| *p >= 0.0),
                "negative probability at layer {} source {:?}",
                site.layer,
                site.source
            );
            worst = worst.max((sum - 1.0).abs());
            rows += 1;
        }
        // The last site is the final aggregation distribution.
        assert!(
            fwd.sites.last().expect("sites").source.is_none(),
            "final aggregation site missing"
        );
    }
    let detail = format!(
        "{rows} routing rows over 1000 queries (incl. final aggregation), worst |sum−1| = {worst:.2e} (tol 1e-9)"
    );
    verdict(2, worst <= 1e-9, &detail);
}

// ---------------------------------------------------------------- C3

#[test]
fn criterion_3_propagation_equals_the_dense_triple_loop_oracle() {
    let mut rng = StdRng::seed_from_u64(3000);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = 4;
        let k = rng.gen_range(1..=4);
        let d = rng.gen_range(1..=8);
        let outputs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k * d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let expected = propagate_oracle(&outputs, &rows);

        let tape = Tape::new();
        let out_vars: Vec<_> = outputs
            .iter()
            .map(|o| tape.constant(Tensor::new(vec![k, d], o.clone()).unwrap()))
            .collect();
        let row_vars: Vec<_> = rows
            .iter()
            .map(|r| tape.constant(Tensor::new(vec![n], r.clone()).unwrap()))
            .collect();
        let inputs = dynfuse::router::propagate(&out_vars, &row_vars).expect("propagate");
        for (i, input) in inputs.iter().enumerate() {
            for (e, got) in input.value().data().iter().enumerate() {
                worst = worst.max((got - expected[i][e]).abs());
            }
        }
    }
    let detail =
        format!("100 random instances (4 modules), worst |Δ| = {worst:.2e} (tol 1e-12)");
    verdict(3, worst <= 1e-12, &detail);
}

// ---------------------------------------------------------------- C4

#[test]
fn criterion_4_loss_identities_and_goldens_reproduce() {
    let tape = Tape::new();
    let mut rng = StdRng::seed_from_u64(4000);

    // Single-query batch classification is exactly zero.
    let row: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let f_q = tape.constant(Tensor::from_rows(&[row.clone()]).unwrap());
    let f_t = tape.constant(Tensor::from_rows(&[row.clone()]).unwrap());
    let bbc_b1 = bbc_loss(&tape, f_q, f_t, 10.0).unwrap().value().data()[0];

    // Identical feature sets give exactly zero consistency.
    let feats: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let f = || tape.constant(Tensor::from_rows(&feats).unwrap());
    let cons_id = consistency_loss(&tape, f(), f(), f())
        .unwrap()
        .value()
        .data()[0];

    // Student == teacher gives exactly zero distillation.
    let logits: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let site = tape.constant(Tensor::new(vec![4], logits.clone()).unwrap());
    let spd_id = spd_loss(&tape, &[vec![site]], &[Some(logits.as_slice())], 2.0)
        .unwrap()
        .value()
        .data()[0];

    // Two-point distillation golden: student [2,0], teacher [0,2], τ=2.
    let student = tape.constant(Tensor::new(vec![2], vec![2.0, 0.0]).unwrap());
    let spd_golden = spd_loss(&tape, &[vec![student]], &[Some(&[0.0, 2.0])], 2.0)
        .unwrap()
        .value()
        .data()[0];

    // Orthogonal 2×2 classification golden: ln(1 + e^{−1}).
    let f_q = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let f_t = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let bbc_golden = bbc_loss(&tape, f_q, f_t, 1.0).unwrap().value().data()[0];

    let pass = bbc_b1 == 0.0
        && cons_id == 0.0
        && spd_id == 0.0
        && (spd_golden - 1.84847).abs() <= 1e-4
        && (bbc_golden - 0.31326).abs() <= 1e-5;
    let detail = format!(
        "bbc(B=1) = {bbc_b1:e}, consistency(f,f,f) = {cons_id:e}, spd(x,x,τ) = {spd_id:e} (all exact); \
         spd golden {spd_golden:.5} (want 1.84847 ± 1e-4), bbc golden {bbc_golden:.5} (want 0.31326 ± 1e-5)"
    );
    verdict(4, pass, &detail);
}

// ---------------------------------------------------------------- C5

#[test]
fn criterion_5_toy_preset_learns_to_the_recall_thresholds() {
    let cfg = TrainConfig::toy();
    assert_eq!((cfg.gallery_size, cfg.epochs, cfg.seed), (256, 30, 42));
    assert_eq!(cfg.n_eval_queries, 500);

    let t0 = Instant::now();
    let mut trainer = Trainer::new(cfg).expect("trainer");
    let history = trainer.train(|_, _| Ok(())).expect("training");
    let elapsed = t0.elapsed();

    let last = history.last().expect("epochs ran");
    let r1 = last.recall[&1];
    let r10 = last.recall[&10];
    let in_budget = elapsed < Duration::from_secs(600);

    // The recorded first verified run of this configuration; later runs
    // must stay in its neighborhood (loose tolerance: recall over 500
    // queries shifts by 0.002 per query, and libm differences across
    // platforms can move borderline rankings).
    let golden = include_str!("golden/toy_curve.tsv");
    let golden_last = golden
        .lines()
        .last()
        .expect("golden has rows")
        .split('\t')
        .map(|v| v.parse::<f64>().unwrap())
        .collect::<Vec<_>>();
    let (golden_epoch, golden_r1) = (golden_last[0] as usize, golden_last[2]);
    let near_golden = golden_epoch == last.epoch && (r1 - golden_r1).abs() <= 0.05;

    let pass = r1 >= 0.80 && r10 >= 0.98 && in_budget && near_golden;
    let detail = format!(
        "R@1 {r1:.3} (≥ 0.80), R@10 {r10:.3} (≥ 0.98) on {} held-out queries, {:.0?} (< 10 min); \
         golden final R@1 {golden_r1:.3} within 0.05: {near_golden}",
        trainer.eval_set.queries.len(),
        elapsed,
    );
    verdict(5, pass, &detail);
}

// ------------------------------------------------- shared runs for C6–C8

#[derive(Debug, Clone, Copy)]
struct RunSummary {
    r1: f64,
    r10: f64,
    mean_churn_6_30: f64,
}

/// Scaled-down toy used for the directional criteria: same task family and
/// schedule, narrower model and smaller data so the 21 trainings stay
/// tractable. 30 epochs are kept because criterion 6 averages churn over
/// epochs 6–30.
fn reduced_cfg() -> TrainConfig {
    let mut cfg = TrainConfig::toy();
    cfg.d = 16;
    cfg.n_train = 1500;
    cfg.gallery_size = 128;
    cfg.n_eval_queries = 200;
    cfg
}

fn run_summary(cfg: TrainConfig) -> RunSummary {
    let mut trainer = Trainer::new(cfg).expect("trainer");
    let history = trainer.train(|_, _| Ok(())).expect("training");
    let last = history.last().expect("epochs ran");
    let churns: Vec<f64> = history
        .iter()
        .filter(|m| m.epoch >= 6)
        .filter_map(|m| m.churn)
        .collect();
    RunSummary {
        r1: last.recall[&1],
        r10: last.recall[&10],
        mean_churn_6_30: churns.iter().sum::<f64>() / churns.len() as f64,
    }
}

const SHARED_SEEDS: [u64; 3] = [0, 1, 2];

fn shared_run(variant: &str, seed: u64) -> RunSummary {
    static CACHE: OnceLock<Mutex<BTreeMap<(String, u64), RunSummary>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(BTreeMap::new()));
    let key = (variant.to_string(), seed);
    if let Some(hit) = cache.lock().unwrap().get(&key) {
        return *hit;
    }
    let mut base = reduced_cfg();
    base.seed = seed;
    let cfg = variant_config(&base, variant).expect("known variant");
    let summary = run_summary(cfg);
    cache.lock().unwrap().insert(key, summary);
    summary
}

// ---------------------------------------------------------------- C6

#[test]
fn criterion_6_path_distillation_lowers_routing_churn() {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in SHARED_SEEDS {
        // `full` carries λ=0.6; the same configuration with the
        // distillation weight zeroed is the `baseline-cons-msr` grid row.
        let with = shared_run("full", seed).mean_churn_6_30;
        let without = shared_run("baseline-cons-msr", seed).mean_churn_6_30;
        if with < without {
            wins += 1;
        }
        parts.push(format!(
            "seed {seed}: λ=0.6 churn {with:.5} vs λ=0 churn {without:.5}"
        ));
    }
    let detail = format!(
        "mean churn over epochs 6–30 lower with distillation in {wins}/3 paired seeds — {}",
        parts.join("; ")
    );
    verdict(6, wins >= 2, &detail);
}

// ---------------------------------------------------------------- C7

#[test]
fn criterion_7_removing_the_residual_carry_module_hurts_most() {
    const REMOVALS: [&str; 4] = ["no-rcm", "no-jrm", "no-gtm", "no-cam"];
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in SHARED_SEEDS {
        let intact = shared_run("full", seed).r1;
        let drops: Vec<(f64, &str)> = REMOVALS
            .iter()
            .map(|v| (intact - shared_run(v, seed).r1, *v))
            .collect();
        let largest = drops
            .iter()
            .cloned()
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .expect("four removals");
        if largest.1 == "no-rcm" {
            wins += 1;
        }
        parts.push(format!(
            "seed {seed}: drops {} (largest: {})",
            drops
                .iter()
                .map(|(d, v)| format!("{v} {d:+.3}"))
                .collect::<Vec<_>>()
                .join(", "),
            largest.1
        ));
    }
    let detail = format!(
        "no-rcm is the largest R@1 drop in {wins}/3 seeds — {}",
        parts.join("; ")
    );
    verdict(7, wins >= 2, &detail);
}

// ---------------------------------------------------------------- C8

#[test]
fn criterion_8_modality_specific_routing_matches_or_beats_shared() {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in SHARED_SEEDS {
        let msr = shared_run("baseline-cons-msr", seed).r10;
        let sr = shared_run("baseline-cons-sr", seed).r10;
        if msr >= sr {
            wins += 1;
        }
        parts.push(format!("seed {seed}: MSR R@10 {msr:.3} vs SR R@10 {sr:.3}"));
    }
    let detail = format!(
        "MSR ≥ SR on R@10 in {wins}/3 seeds — {}",
        parts.join("; ")
    );
    verdict(8, wins >= 2, &detail);
}

// ---------------------------------------------------------------- C9

#[test]
fn criterion_9_runs_are_deterministic_and_checkpoints_roundtrip() {
    let mut cfg = TrainConfig::toy();
    cfg.epochs = 5;
    cfg.n_train = 48;
    cfg.batch_size = 8;
    cfg.gallery_size = 16;
    cfg.n_eval_queries = 10;
    cfg.d = 8;
    cfg.head_count = 2;
    cfg.layer_count = 2;
    cfg.eval_ks = vec![1, 5];

    // (a) Two identical seeded runs → bit-identical metrics logs.
    let serialize = |history: &[dynfuse::train::EpochMetrics]| -> String {
        history
            .iter()
            .map(|m| serde_json::to_string(m).unwrap())
            .collect::<Vec<_>>()
            .join("\n")
    };
    let run = |cfg: &TrainConfig| -> (String, Trainer) {
        let mut trainer = Trainer::new(cfg.clone()).expect("trainer");
        let history = trainer.train(|_, _| Ok(())).expect("training");
        (serialize(&history), trainer)
    };
    let (log_a, trainer_a) = run(&cfg);
    let (log_b, _) = run(&cfg);
    let identical = log_a == log_b;

    // (b) Checkpoint save/load roundtrip is bit-exact: the reloaded
    // snapshot equals the original and re-saving reproduces the exact
    // file bytes.
    let dir = tempfile::tempdir().unwrap();
    let (path_a, path_b) = (dir.path().join("ckpt_a"), dir.path().join("ckpt_b"));
    let ckpt = trainer_a.to_checkpoint();
    dynfuse::checkpoint::save_checkpoint(&path_a, &ckpt).expect("save");
    let loaded = dynfuse::checkpoint::load_checkpoint(&path_a).expect("load");
    dynfuse::checkpoint::save_checkpoint(&path_b, &loaded).expect("re-save");
    let roundtrip =
        loaded == ckpt && std::fs::read(&path_a).unwrap() == std::fs::read(&path_b).unwrap();

    // (c) Resume after an interruption matches the uninterrupted run for
    // three further epochs (several optimizer steps each).
    let mut short = cfg.clone();
    short.epochs = 2;
    let mut full = cfg.clone();
    full.epochs = 5;
    let (_, interrupted) = run(&short);
    let mut resume_ckpt = interrupted.to_checkpoint();
    resume_ckpt.config.epochs = 5;
    let mut resumed = Trainer::from_checkpoint(resume_ckpt).expect("resume");
    let tail = resumed.train(|_, _| Ok(())).expect("resumed training");
    let (full_log, _) = run(&full);
    let full_tail: Vec<&str> = full_log.lines().skip(2).collect();
    let resumed_tail: Vec<String> = tail
        .iter()
        .map(|m| serde_json::to_string(m).unwrap())
        .collect();
    let resume_matches = full_tail == resumed_tail.iter().map(|s| s.as_str()).collect::<Vec<_>>();

    let pass = identical && roundtrip && resume_matches;
    let detail = format!(
        "identical logs: {identical}; checkpoint roundtrip bit-exact: {roundtrip}; \
         resumed epochs 3–5 match uninterrupted: {resume_matches}"
    );
    verdict(9, pass, &detail);
}
