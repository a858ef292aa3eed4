//! Ablation grid: named configuration variants spanning router choice,
//! loss toggles, and per-module removal, plus a driver that trains each
//! variant and collects final retrieval metrics into a comparison table.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::RecallTable;
use crate::router::RouterKind;
use crate::train::{EpochMetrics, Trainer};

/// Grid variant names, in table order.
///
/// `baseline*` rows strip the method down (uniform routing, similarity
/// loss only) and add one ingredient at a time; `full` is the configured
/// method; `no-*` rows remove one fusion module from `full`. The residual
/// module removal is spelled `no-rcm`.
pub const VARIANTS: &[&str] = &[
    "baseline",
    "baseline-sr",
    "baseline-msr",
    "baseline-cons",
    "baseline-cons-sr",
    "baseline-cons-msr",
    "full",
    "no-rcm",
    "no-jrm",
    "no-gtm",
    "no-cam",
];

/// The four single-module removal variants, in table order.
pub const REMOVAL_VARIANTS: &[&str] = &["no-rcm", "no-jrm", "no-gtm", "no-cam"];

/// Derives one variant's configuration from a base configuration.
///
/// The base supplies every size/schedule knob; the variant overrides only
/// the router kind, the loss toggles, and the module-active flags.
pub fn variant_config(base: &TrainConfig, name: &str) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    // Stripped-down rows: uniform routing and similarity loss only, then
    // ingredients added back one at a time.
    fn strip(cfg: &mut TrainConfig, router: RouterKind, cons: bool) {
        cfg.router = router;
        cfg.use_consistency = cons;
        cfg.lambda = 0.0;
    }
    match name {
        "baseline" => strip(&mut cfg, RouterKind::Uniform, false),
        "baseline-sr" => strip(&mut cfg, RouterKind::Sr, false),
        "baseline-msr" => strip(&mut cfg, RouterKind::Msr, false),
        "baseline-cons" => strip(&mut cfg, RouterKind::Uniform, true),
        "baseline-cons-sr" => strip(&mut cfg, RouterKind::Sr, true),
        "baseline-cons-msr" => strip(&mut cfg, RouterKind::Msr, true),
        "full" => {}
        "no-rcm" => cfg.disable_rcm = true,
        "no-jrm" => cfg.disable_jrm = true,
        "no-gtm" => cfg.disable_gtm = true,
        "no-cam" => cfg.disable_cam = true,
        other => {
            return Err(Error::Config(format!(
                "unknown ablation variant {other:?}; known variants: {}",
                VARIANTS.join(", ")
            )))
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// One trained grid cell.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    /// Recall table from the final epoch.
    pub recall: RecallTable,
    pub final_loss: f64,
}

/// Trains every (variant, seed) cell serially and returns the rows in
/// grid order. `on_progress` fires after each finished epoch of each cell
/// so callers can log without waiting for the whole grid.
pub fn run_ablation<F>(
    base: &TrainConfig,
    variants: &[&str],
    seeds: &[u64],
    mut on_progress: F,
) -> Result<Vec<AblationRow>>
where
    F: FnMut(&str, u64, &EpochMetrics),
{
    let mut rows = Vec::with_capacity(variants.len() * seeds.len());
    for &variant in variants {
        for &seed in seeds {
            let mut cfg = variant_config(base, variant)?;
            cfg.seed = seed;
            let mut trainer = Trainer::new(cfg)?;
            let history = trainer.train(|_, m| {
                on_progress(variant, seed, m);
                Ok(())
            })?;
            let last = history
                .last()
                .ok_or_else(|| Error::Config("ablation requires at least one epoch".into()))?;
            rows.push(AblationRow {
                variant: variant.to_string(),
                seed,
                recall: last.recall.clone(),
                final_loss: last.loss_total,
            });
        }
    }
    Ok(rows)
}

/// Renders rows as a tab-separated table with a header, one line per
/// (variant, seed), recall columns in ascending cutoff order.
pub fn ablation_tsv(rows: &[AblationRow], ks: &[usize]) -> String {
    let mut out = String::from("variant\tseed");
    for k in ks {
        out.push_str(&format!("\tr@{k}"));
    }
    out.push_str("\tfinal_loss\n");
    for row in rows {
        out.push_str(&format!("{}\t{}", row.variant, row.seed));
        for k in ks {
            match row.recall.get(k) {
                Some(v) => out.push_str(&format!("\t{v:.6}")),
                None => out.push_str("\t-"),
            }
        }
        out.push_str(&format!("\t{:.6}\n", row.final_loss));
    }
    out
}
