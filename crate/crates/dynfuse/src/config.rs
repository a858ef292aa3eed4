//! Run configuration: one flat, fully-validated struct that the config
//! file, the named presets, and `--set` overrides all target.

use crate::error::{Error, Result};
use crate::fusion::MODULE_COUNT;
use crate::model::ModelConfig;
use crate::router::{NetConfig, RouterKind};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::str::FromStr;

/// How the distillation teacher is realized: a bank of routing logits
/// recorded last epoch, or a frozen copy of last epoch's parameters that is
/// re-run on each query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    Bank,
    ModelCopy,
}

/// Everything a run needs. Field names are exactly the config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    // Optimization.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    // Loss weights and temperatures.
    pub lambda: f64,
    pub tau_path: f64,
    pub tau_r: f64,
    pub bbc_scale: f64,
    pub use_consistency: bool,
    pub teacher: TeacherMode,
    // Architecture.
    pub layer_count: usize,
    pub d: usize,
    pub head_count: usize,
    pub router: RouterKind,
    pub disable_jrm: bool,
    pub disable_cam: bool,
    pub disable_gtm: bool,
    pub disable_rcm: bool,
    // Data world.
    pub attrs: usize,
    pub values: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub c_in: usize,
    pub sigma: f64,
    pub max_edits: usize,
    pub n_train: usize,
    pub gallery_size: usize,
    pub n_eval_queries: usize,
    pub eval_ks: Vec<usize>,
    // Reproducibility.
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale default: small enough to train in minutes on one core,
    /// rich enough that copying the reference cannot solve edited
    /// attributes.
    pub fn toy() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-6,
            lr_decay_epoch: 20,
            lr_decay_factor: 0.1,
            lambda: 0.6,
            tau_path: 2.0,
            tau_r: 1.0,
            bbc_scale: 10.0,
            use_consistency: true,
            teacher: TeacherMode::Bank,
            layer_count: 3,
            d: 32,
            head_count: 4,
            router: RouterKind::Msr,
            disable_jrm: false,
            disable_cam: false,
            disable_gtm: false,
            disable_rcm: false,
            attrs: 4,
            values: 6,
            grid_h: 4,
            grid_w: 4,
            c_in: 8,
            sigma: 0.05,
            max_edits: 2,
            n_train: 2000,
            gallery_size: 256,
            n_eval_queries: 500,
            eval_ks: vec![1, 10, 50],
            seed: 42,
        }
    }

    /// FashionIQ-style schedule at toy scale.
    pub fn fashioniq() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 32,
            lr: 1e-4,
            lr_decay_epoch: 50,
            lambda: 1.0,
            ..TrainConfig::toy()
        }
    }

    /// Shoes-style schedule at toy scale.
    pub fn shoes() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 1e-4,
            lr_decay_epoch: 15,
            lambda: 0.6,
            ..TrainConfig::toy()
        }
    }

    /// Fashion200K-style schedule at toy scale.
    pub fn fashion200k() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            lr: 1e-4,
            lr_decay_epoch: 30,
            lambda: 0.6,
            ..TrainConfig::toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(TrainConfig::toy()),
            "fashioniq" => Ok(TrainConfig::fashioniq()),
            "shoes" => Ok(TrainConfig::shoes()),
            "fashion200k" => Ok(TrainConfig::fashion200k()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}`; available: toy, fashioniq, shoes, fashion200k"
            ))),
        }
    }

    /// Which modules stay active, in the frozen module order.
    pub fn active_modules(&self) -> [bool; MODULE_COUNT] {
        [
            !self.disable_cam,
            !self.disable_jrm,
            !self.disable_gtm,
            !self.disable_rcm,
        ]
    }

    pub fn vocab_size(&self) -> usize {
        self.attrs + self.attrs * self.values + 2
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            net: NetConfig {
                d: self.d,
                head_count: self.head_count,
                layer_count: self.layer_count,
                tau_r: self.tau_r,
                router: self.router,
                active: self.active_modules(),
            },
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            c_in: self.c_in,
            vocab_size: self.vocab_size(),
        }
    }

    /// Milestone schedule: the configured rate before `lr_decay_epoch`,
    /// exactly `lr · lr_decay_factor` from that epoch on (1-based epochs).
    pub fn effective_lr(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("lr", self.lr),
            ("lr_decay_epoch", self.lr_decay_epoch as f64),
            ("lr_decay_factor", self.lr_decay_factor),
            ("tau_path", self.tau_path),
            ("tau_r", self.tau_r),
            ("bbc_scale", self.bbc_scale),
            ("layer_count", self.layer_count as f64),
            ("d", self.d as f64),
            ("head_count", self.head_count as f64),
            ("grid_h", self.grid_h as f64),
            ("grid_w", self.grid_w as f64),
            ("c_in", self.c_in as f64),
            ("n_train", self.n_train as f64),
            ("gallery_size", self.gallery_size as f64),
            ("n_eval_queries", self.n_eval_queries as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("lambda", self.lambda),
            ("sigma", self.sigma),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.d % self.head_count != 0 {
            return Err(Error::Config(format!(
                "head_count {} must divide d {}",
                self.head_count, self.d
            )));
        }
        if !self.active_modules().iter().any(|a| *a) {
            return Err(Error::Config(
                "all four modules disabled; at least one must stay active".into(),
            ));
        }
        if self.attrs < 2 || self.values < 2 {
            return Err(Error::Config(format!(
                "need at least 2 attributes and 2 values, got attrs={}, values={}",
                self.attrs, self.values
            )));
        }
        if self.values > self.c_in {
            return Err(Error::Config(format!(
                "values={} need one channel each but c_in={}",
                self.values, self.c_in
            )));
        }
        if self.attrs > self.grid_h * self.grid_w {
            return Err(Error::Config(format!(
                "attrs={} need one grid cell each but the grid has {}",
                self.attrs,
                self.grid_h * self.grid_w
            )));
        }
        if self.max_edits == 0 || self.max_edits > self.attrs {
            return Err(Error::Config(format!(
                "max_edits must be in 1..={}, got {}",
                self.attrs, self.max_edits
            )));
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(Error::Config(
                "eval_ks must be a non-empty list of positive cutoffs".into(),
            ));
        }
        Ok(())
    }
}

fn to_table(cfg: &TrainConfig) -> Result<toml::Table> {
    let text = toml::to_string(cfg).map_err(|e| Error::Config(format!("serialize config: {e}")))?;
    toml::Table::from_str(&text).map_err(|e| Error::Config(format!("re-parse config: {e}")))
}

fn merge_flat(base: &mut toml::Table, layer: toml::Table) {
    for (k, v) in layer {
        base.insert(k, v);
    }
}

/// Parse one `--set KEY=VALUE` pair. The value is read as a TOML literal
/// (numbers, booleans, arrays); anything that does not parse as one is
/// taken as a bare string, so `router=sr` works unquoted.
fn parse_override(pair: &str) -> Result<(String, toml::Value)> {
    let Some((key, value)) = pair.split_once('=') else {
        return Err(Error::Config(format!(
            "override `{pair}` is not of the form KEY=VALUE"
        )));
    };
    let key = key.trim().to_string();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{pair}` has an empty key")));
    }
    let value = value.trim();
    let literal = format!("x = {value}");
    let parsed = toml::Table::from_str(&literal)
        .ok()
        .and_then(|mut t| t.remove("x"));
    let v = match parsed {
        Some(v) => v,
        None => toml::Value::String(value.to_string()),
    };
    Ok((key, v))
}

/// Apply `--set KEY=VALUE` pairs on top of an existing configuration —
/// used to adjust a checkpoint's embedded configuration — and re-validate.
pub fn apply_overrides(cfg: &TrainConfig, overrides: &[String]) -> Result<TrainConfig> {
    let mut table = to_table(cfg)?;
    for pair in overrides {
        let (key, value) = parse_override(pair)?;
        table.insert(key, value);
    }
    let cfg: TrainConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Resolve a full configuration: start from `preset` (default `toy`),
/// overlay the config file if given, then apply `--set` pairs in order.
/// Unknown keys anywhere are rejected by name.
pub fn parse_config(
    preset: Option<&str>,
    config_path: Option<&Path>,
    overrides: &[String],
) -> Result<TrainConfig> {
    let base = TrainConfig::preset(preset.unwrap_or("toy"))?;
    let mut table = to_table(&base)?;
    if let Some(path) = config_path {
        let text = std::fs::read_to_string(path)?;
        let file_table = toml::Table::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge_flat(&mut table, file_table);
    }
    for pair in overrides {
        let (key, value) = parse_override(pair)?;
        table.insert(key, value);
    }
    let cfg: TrainConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_presets_pin_schedules_and_weights() {
        let fiq = TrainConfig::fashioniq();
        assert_eq!(
            (fiq.epochs, fiq.batch_size, fiq.lr_decay_epoch, fiq.lambda),
            (60, 32, 50, 1.0)
        );
        let shoes = TrainConfig::shoes();
        assert_eq!(
            (shoes.epochs, shoes.batch_size, shoes.lr_decay_epoch, shoes.lambda),
            (30, 16, 15, 0.6)
        );
        let f200k = TrainConfig::fashion200k();
        assert_eq!(
            (f200k.epochs, f200k.batch_size, f200k.lr_decay_epoch, f200k.lambda),
            (50, 64, 30, 0.6)
        );
        for cfg in [&fiq, &shoes, &f200k] {
            assert_eq!((cfg.lr, cfg.weight_decay), (1e-4, 1e-6));
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn toy_preset_matches_the_desk_scale_defaults() {
        let toy = TrainConfig::toy();
        assert_eq!((toy.d, toy.head_count, toy.layer_count), (32, 4, 3));
        assert_eq!((toy.grid_h, toy.grid_w, toy.c_in), (4, 4, 8));
        assert_eq!((toy.attrs, toy.values, toy.max_edits), (4, 6, 2));
        assert_eq!((toy.gallery_size, toy.n_eval_queries), (256, 500));
        assert_eq!((toy.epochs, toy.batch_size, toy.seed), (30, 16, 42));
        assert_eq!((toy.tau_r, toy.tau_path, toy.bbc_scale), (1.0, 2.0, 10.0));
        assert_eq!(toy.sigma, 0.05);
        assert_eq!(toy.vocab_size(), 4 + 24 + 2);
        toy.validate().unwrap();
    }

    #[test]
    fn unknown_preset_and_unknown_key_are_named() {
        let err = TrainConfig::preset("imagenet").unwrap_err();
        assert!(err.to_string().contains("imagenet"));
        let err = parse_config(None, None, &["warmup_steps=5".into()]).unwrap_err();
        assert!(err.to_string().contains("warmup_steps"), "{err}");
    }

    #[test]
    fn overrides_apply_after_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "epochs = 3\nlambda = 0.9\n").unwrap();
        let cfg = parse_config(Some("toy"), Some(&path), &["lambda=0".into()]).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.lambda, 0.0);
        assert_eq!(cfg.batch_size, 16); // untouched toy default
    }

    #[test]
    fn bare_string_overrides_parse() {
        let cfg = parse_config(None, None, &["router=sr".into(), "teacher=model_copy".into()])
            .unwrap();
        assert_eq!(cfg.router, RouterKind::Sr);
        assert_eq!(cfg.teacher, TeacherMode::ModelCopy);
        let cfg = parse_config(None, None, &["eval_ks=[1, 5]".into()]).unwrap();
        assert_eq!(cfg.eval_ks, vec![1, 5]);
        assert!(parse_config(None, None, &["epochs".into()]).is_err());
    }

    #[test]
    fn invariant_violations_are_config_errors() {
        let cases = [
            "epochs=0",
            "tau_path=0.0",
            "tau_r=-1.0",
            "head_count=5",
            "values=9",
            "attrs=20",
            "max_edits=0",
            "max_edits=9",
            "eval_ks=[]",
            "lambda=-0.5",
            "sigma=-0.1",
        ];
        for case in cases {
            let err = parse_config(None, None, &[case.to_string()]).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{case} should fail");
        }
        let err = parse_config(
            None,
            None,
            &[
                "disable_jrm=true".into(),
                "disable_cam=true".into(),
                "disable_gtm=true".into(),
                "disable_rcm=true".into(),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn lr_schedule_is_an_exact_milestone() {
        let cfg = TrainConfig::shoes();
        assert_eq!(cfg.effective_lr(1), 1e-4);
        assert_eq!(cfg.effective_lr(14), 1e-4);
        assert_eq!(cfg.effective_lr(15), 1e-4 * 0.1);
        assert_eq!(cfg.effective_lr(30), 1e-4 * 0.1);
    }

    #[test]
    fn disabled_modules_map_to_the_frozen_order() {
        let cfg = parse_config(None, None, &["disable_jrm=true".into()]).unwrap();
        assert_eq!(cfg.active_modules(), [true, false, true, true]);
        let mc = cfg.model_config();
        assert_eq!(mc.net.active, [true, false, true, true]);
        assert_eq!(mc.vocab_size, cfg.vocab_size());
    }

    #[test]
    fn config_file_roundtrips_through_toml() {
        let toy = TrainConfig::toy();
        let text = toml::to_string(&toy).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(toy, back);
    }
}
