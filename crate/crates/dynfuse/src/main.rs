//! Command-line entry point: data generation, training, evaluation,
//! gradient verification, routing-trace export, and the ablation grid.
//!
//! stdout carries machine-readable results only (JSON lines, one object
//! per line); progress and diagnostics go to stderr. Exit codes: 0 on
//! success, 2 for configuration errors, 3 for a missing or corrupt
//! checkpoint, 4 for numerical failures, 1 otherwise.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use dynfuse::ablate::{ablation_tsv, run_ablation, VARIANTS};
use dynfuse::checkpoint::load_checkpoint;
use dynfuse::config::{apply_overrides, parse_config, TrainConfig};
use dynfuse::data::{
    generate_eval_set, generate_triplets, write_gallery, write_records, ItemUniverse,
};
use dynfuse::error::{Error, Result};
use dynfuse::eval::{eval_render_seed, evaluate_recall};
use dynfuse::train::{EpochMetrics, TraceRow, Trainer};
use dynfuse::verify::gradcheck_battery;

#[derive(Parser)]
#[command(
    name = "dynfuse",
    version,
    about = "Dynamic image-text fusion with learned soft routing on a synthetic compositional retrieval task"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset (training triplets, gallery, eval queries).
    GenData(CommonArgs),
    /// Train a model, writing metrics.log, per-epoch checkpoints, and curve data.
    Train(CommonArgs),
    /// Evaluate the newest checkpoint under --out on the held-out queries.
    Eval(CommonArgs),
    /// Verify reverse-mode gradients against finite differences for every block.
    Gradcheck(CommonArgs),
    /// Export per-query routing distributions for the newest checkpoint.
    TracePaths(CommonArgs),
    /// Train every ablation grid variant and emit a comparison table.
    Ablate(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML config file; keys mirror the training config fields.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Named preset: toy, fashioniq, shoes, fashion200k.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Override one config key (repeatable), e.g. --set lambda=0.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for metrics, checkpoints, traces, and tables.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Master seed override (equivalent to --set seed=N).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::TracePaths(a) => cmd_trace_paths(a),
        Cmd::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } => 2,
        Error::Checkpoint(_) => 3,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
        Error::Numerics(_) => 4,
        _ => 1,
    }
}

/// Resolve the effective configuration from preset/file/overrides/seed.
/// An unreadable config file is a configuration error, not an I/O one.
fn build_config(a: &CommonArgs) -> Result<TrainConfig> {
    let mut overrides = a.set.clone();
    if let Some(seed) = a.seed {
        overrides.push(format!("seed={seed}"));
    }
    parse_config(a.preset.as_deref(), a.config.as_deref(), &overrides).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!(
            "cannot read config file {}: {io}",
            a.config
                .as_deref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        )),
        other => other,
    })
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn cmd_gen_data(a: &CommonArgs) -> Result<()> {
    let cfg = build_config(a)?;
    let universe = ItemUniverse::generate(
        cfg.seed, cfg.attrs, cfg.values, cfg.grid_h, cfg.grid_w, cfg.c_in,
    )?;
    let records = generate_triplets(&universe, cfg.n_train, cfg.max_edits, cfg.seed)?;
    let eval = generate_eval_set(
        &universe,
        cfg.gallery_size,
        cfg.n_eval_queries,
        cfg.max_edits,
        cfg.seed,
    )?;
    fs::create_dir_all(&a.out)?;
    let train_path = a.out.join("train.jsonl");
    let queries_path = a.out.join("eval_queries.jsonl");
    let gallery_path = a.out.join("gallery.jsonl");
    write_records(&train_path, &records)?;
    write_records(&queries_path, &eval.queries)?;
    write_gallery(&gallery_path, &eval.gallery)?;
    emit(json!({
        "train_records": records.len(),
        "eval_queries": eval.queries.len(),
        "gallery_items": eval.gallery.len(),
        "vocab_size": cfg.vocab_size(),
        "files": [train_path, queries_path, gallery_path],
    }));
    Ok(())
}

fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

fn checkpoint_path(out: &Path, epoch: u64) -> PathBuf {
    checkpoint_dir(out).join(format!("epoch_{epoch}"))
}

/// The newest `epoch_N` checkpoint under `out`, or a checkpoint error.
fn latest_checkpoint(out: &Path) -> Result<PathBuf> {
    let dir = checkpoint_dir(out);
    let missing = || {
        Error::Checkpoint(format!(
            "no checkpoint found under {} (expected {}/epoch_N; run `train` first)",
            out.display(),
            dir.display()
        ))
    };
    let entries = fs::read_dir(&dir).map_err(|_| missing())?;
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name();
        let Some(epoch) = name
            .to_str()
            .and_then(|n| n.strip_prefix("epoch_"))
            .and_then(|n| n.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().map_or(true, |(b, _)| epoch > *b) {
            best = Some((epoch, entry.path()));
        }
    }
    best.map(|(_, p)| p).ok_or_else(missing)
}

fn write_curves(out: &Path, history: &[EpochMetrics]) -> Result<()> {
    let dir = out.join("curves");
    fs::create_dir_all(&dir)?;

    let mut loss = String::from("epoch\tbbc\tconsistency\tpath\ttotal\tlr\n");
    for m in history {
        loss.push_str(&format!(
            "{}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\n",
            m.epoch, m.loss_bbc, m.loss_cons, m.loss_path, m.loss_total, m.lr
        ));
    }
    fs::write(dir.join("loss.tsv"), loss)?;

    // Churn is undefined for the first epoch (no previous paths to compare
    // against), so that epoch is simply absent from the series.
    let mut churn = String::from("epoch\tchurn\n");
    for m in history {
        if let Some(c) = m.churn {
            churn.push_str(&format!("{}\t{:.9}\n", m.epoch, c));
        }
    }
    fs::write(dir.join("churn.tsv"), churn)?;

    let ks: Vec<usize> = history
        .first()
        .map(|m| m.recall.keys().copied().collect())
        .unwrap_or_default();
    let mut recall = String::from("epoch");
    for k in &ks {
        recall.push_str(&format!("\tr@{k}"));
    }
    recall.push('\n');
    for m in history {
        recall.push_str(&format!("{}", m.epoch));
        for k in &ks {
            match m.recall.get(k) {
                Some(v) => recall.push_str(&format!("\t{v:.6}")),
                None => recall.push_str("\t-"),
            }
        }
        recall.push('\n');
    }
    fs::write(dir.join("recall.tsv"), recall)?;
    Ok(())
}

fn cmd_train(a: &CommonArgs) -> Result<()> {
    let cfg = build_config(a)?;
    fs::create_dir_all(checkpoint_dir(&a.out))?;
    let mut metrics_file = fs::File::create(a.out.join("metrics.log"))?;
    let mut trainer = Trainer::new(cfg)?;
    let out_dir = a.out.clone();
    let history = trainer.train(|tr, m| {
        let line = serde_json::to_string(m)
            .map_err(|e| Error::Config(format!("serialize metrics: {e}")))?;
        writeln!(metrics_file, "{line}")?;
        dynfuse::checkpoint::save_checkpoint(
            &checkpoint_path(&out_dir, m.epoch as u64),
            &tr.to_checkpoint(),
        )?;
        eprintln!(
            "epoch {:>3}/{}: total {:.4} (bbc {:.4}, cons {:.4}, path {:.4}) r@1 {:.3} churn {}",
            m.epoch,
            tr.cfg.epochs,
            m.loss_total,
            m.loss_bbc,
            m.loss_cons,
            m.loss_path,
            m.recall.get(&1).copied().unwrap_or(f64::NAN),
            m.churn.map_or("-".to_string(), |c| format!("{c:.4}")),
        );
        Ok(())
    })?;
    write_curves(&a.out, &history)?;
    let last = history
        .last()
        .ok_or_else(|| Error::Config("training ran zero epochs".into()))?;
    emit(json!({
        "epochs": last.epoch,
        "loss_total": last.loss_total,
        "recall": last.recall,
        "checkpoint": checkpoint_path(&a.out, last.epoch as u64),
        "metrics_log": a.out.join("metrics.log"),
    }));
    Ok(())
}

/// Load the newest checkpoint under `out`, with `--set`/`--seed` applied
/// to its embedded configuration before the architecture is rebuilt.
fn load_trainer(a: &CommonArgs) -> Result<(Trainer, PathBuf)> {
    let path = latest_checkpoint(&a.out)?;
    let mut ckpt = load_checkpoint(&path).map_err(|e| match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            Error::Checkpoint(format!("checkpoint {} disappeared: {io}", path.display()))
        }
        other => other,
    })?;
    let mut overrides = a.set.clone();
    if let Some(seed) = a.seed {
        overrides.push(format!("seed={seed}"));
    }
    if !overrides.is_empty() {
        ckpt.config = apply_overrides(&ckpt.config, &overrides)?;
    }
    let trainer = Trainer::from_checkpoint(ckpt)?;
    Ok((trainer, path))
}

fn cmd_eval(a: &CommonArgs) -> Result<()> {
    let (trainer, path) = load_trainer(a)?;
    let cfg = &trainer.cfg;
    let recall = evaluate_recall(
        &trainer.model,
        &trainer.universe,
        &trainer.eval_set,
        cfg.sigma,
        eval_render_seed(cfg.seed),
        &cfg.eval_ks,
    )?;
    emit(json!({
        "checkpoint": path,
        "epoch": trainer.completed_epoch,
        "queries": trainer.eval_set.queries.len(),
        "gallery": trainer.eval_set.gallery.len(),
        "recall": recall,
    }));
    Ok(())
}

fn cmd_gradcheck(a: &CommonArgs) -> Result<()> {
    let seeds: Vec<u64> = match a.seed {
        Some(s) => vec![s],
        None => (0..5).collect(),
    };
    let report = gradcheck_battery(&seeds)?;
    for r in &report.results {
        eprintln!(
            "seed {} {:<24} max rel err {:.3e} over {} coords",
            r.seed, r.block, r.report.max_rel_err, r.report.coords_checked
        );
    }
    emit(json!({
        "pass": report.pass(),
        "max_rel_err": report.max_rel_err(),
        "tol": report.tol,
        "h": report.h,
        "coords_checked": report.coords_checked(),
        "blocks": report.results.len(),
        "seeds": seeds,
    }));
    if !report.pass() {
        let worst = report.worst().expect("non-empty battery");
        return Err(Error::Numerics(format!(
            "gradient check failed: block {} seed {} max rel err {:.3e} > {:.1e}",
            worst.block, worst.seed, worst.report.max_rel_err, report.tol
        )));
    }
    Ok(())
}

fn trace_line(row: &TraceRow) -> String {
    // Probabilities in shortest round-trip form, so the read-back simplex
    // validation sees the exact in-memory values.
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
        row.query_id,
        row.layer,
        row.source.unwrap_or("final"),
        row.probs[0],
        row.probs[1],
        row.probs[2],
        row.probs[3]
    )
}

fn cmd_trace_paths(a: &CommonArgs) -> Result<()> {
    let (trainer, path) = load_trainer(a)?;
    let rows = trainer.trace_paths()?;
    fs::create_dir_all(&a.out)?;
    let trace_path = a.out.join("traces.log");
    let mut text = String::from("query_id\tlayer\tsource\tp_cam\tp_jrm\tp_gtm\tp_rcm\n");
    for row in &rows {
        text.push_str(&trace_line(row));
    }
    fs::write(&trace_path, &text)?;

    // Read back and confirm every written row is still a distribution.
    let written = fs::read_to_string(&trace_path)?;
    for (i, line) in written.lines().enumerate().skip(1) {
        let probs: Vec<f64> = line
            .split('\t')
            .skip(3)
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Invariant(format!("traces.log line {}: {e}", i + 1)))?;
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Invariant(format!(
                "traces.log line {} sums to {sum}, not 1",
                i + 1
            )));
        }
    }
    emit(json!({
        "checkpoint": path,
        "queries": trainer.records.len(),
        "sites_per_query": trainer.model.net.site_count(),
        "rows": rows.len(),
        "traces_log": trace_path,
    }));
    Ok(())
}

fn cmd_ablate(a: &CommonArgs) -> Result<()> {
    let cfg = build_config(a)?;
    let seeds = [cfg.seed];
    let rows = run_ablation(&cfg, VARIANTS, &seeds, |variant, seed, m| {
        eprintln!(
            "{variant} (seed {seed}) epoch {:>3}: total {:.4} r@1 {:.3}",
            m.epoch,
            m.loss_total,
            m.recall.get(&1).copied().unwrap_or(f64::NAN),
        );
    })?;
    fs::create_dir_all(&a.out)?;
    let table_path = a.out.join("ablation.tsv");
    fs::write(&table_path, ablation_tsv(&rows, &cfg.eval_ks))?;
    for row in &rows {
        emit(json!({
            "variant": row.variant,
            "seed": row.seed,
            "recall": row.recall,
            "final_loss": row.final_loss,
        }));
    }
    eprintln!("wrote {}", table_path.display());
    Ok(())
}
