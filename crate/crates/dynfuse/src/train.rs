//! The optimization loop: Adam with decoupled weight decay and a milestone
//! learning-rate schedule, per-epoch refresh of the distillation teacher's
//! path bank, path-churn instrumentation, and per-epoch recall evaluation.
//!
//! Default precision is f64 throughout the trainer.

use crate::checkpoint::Checkpoint;
use crate::config::{TeacherMode, TrainConfig};
use crate::data::{
    derive_seed, generate_eval_set, generate_triplets, EvalSet, ItemUniverse, TripletRecord,
    STREAM_BATCH_ORDER, STREAM_RENDER_REFERENCE, STREAM_RENDER_TARGET,
};
use crate::encoders::RawImage;
use crate::error::{Error, Result};
use crate::eval::{evaluate_recall, eval_render_seed, RecallTable};
use crate::losses::{bbc_loss, consistency_loss, log_softmax_f64, softmax_f64, spd_loss, total_loss, LossBreakdown};
use crate::model::Model;
use crate::params::{GradientMap, ParamSet};
use crate::router::RouteMode;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam first/second moments plus the step counter, aligned with the
/// parameter store's id order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
}

/// One routing decision exported by [`Trainer::trace_paths`]:
/// probabilities in frozen module order. `source` is `None` at the final
/// aggregation site.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub query_id: u64,
    pub layer: usize,
    pub source: Option<&'static str>,
    pub probs: [f64; 4],
}

impl AdamState {
    pub fn new(ps: &ParamSet<f64>) -> Self {
        let zeros: Vec<Tensor<f64>> = ps
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        AdamState { t: 0, m: zeros.clone(), v: zeros }
    }

    /// One update with bias correction and decoupled weight decay:
    /// θ ← θ − lr·m̂/(√v̂+ε) − lr·wd·θ.
    pub fn step(
        &mut self,
        ps: &mut ParamSet<f64>,
        grads: &GradientMap<f64>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        grads.validate_shapes(ps)?;
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let ids: Vec<_> = ps.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let g = grads.get(id).data().to_vec();
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let theta = ps.value_mut(id).data_mut();
            for j in 0..g.len() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                theta[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS) + lr * weight_decay * theta[j];
            }
        }
        Ok(())
    }
}

/// The distillation teacher's memory: flattened raw routing logits per
/// query id, recorded during the previous epoch. `for_epoch` is the epoch
/// that consumes these entries as its teacher.
#[derive(Debug, Clone, Default)]
pub struct PathBank {
    pub for_epoch: u64,
    entries: HashMap<u64, Vec<f64>>,
}

impl PathBank {
    pub fn empty() -> Self {
        PathBank::default()
    }

    /// Replace the bank with the records of a just-finished epoch. Later
    /// duplicates win; queries unseen this epoch are dropped by virtue of
    /// wholesale replacement. Every entry must match the architecture's
    /// flattened logit length.
    pub fn from_records(
        records: impl IntoIterator<Item = (u64, Vec<f64>)>,
        finished_epoch: u64,
        expected_len: usize,
    ) -> Result<Self> {
        let mut entries = HashMap::new();
        for (qid, logits) in records {
            if logits.len() != expected_len {
                return Err(Error::Invariant(format!(
                    "query {qid}: recorded {} routing logits, architecture has {expected_len}",
                    logits.len()
                )));
            }
            entries.insert(qid, logits);
        }
        Ok(PathBank { for_epoch: finished_epoch + 1, entries })
    }

    pub fn get(&self, query_id: u64) -> Option<&[f64]> {
        self.entries.get(&query_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries sorted by query id (checkpoint form).
    pub fn to_sorted(&self) -> Vec<(u64, Vec<f64>)> {
        let mut v: Vec<(u64, Vec<f64>)> =
            self.entries.iter().map(|(k, l)| (*k, l.clone())).collect();
        v.sort_by_key(|(k, _)| *k);
        v
    }

    pub fn from_sorted(for_epoch: u64, entries: Vec<(u64, Vec<f64>)>) -> Self {
        PathBank { for_epoch, entries: entries.into_iter().collect() }
    }

    fn map(&self) -> &HashMap<u64, Vec<f64>> {
        &self.entries
    }
}

/// Total-variation distance ½Σ|p−q| between two distributions.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Mean routing churn between two epochs' recorded logits: per shared
/// query, per routing site, the total-variation distance between the two
/// routing distributions softmax(logits/τ_r); averaged over sites, then
/// over shared queries (in sorted query order, so the sum is stable).
pub fn path_churn(
    prev: &HashMap<u64, Vec<f64>>,
    curr: &HashMap<u64, Vec<f64>>,
    site_width: usize,
    tau_r: f64,
) -> Result<f64> {
    if site_width == 0 || !(tau_r > 0.0) {
        return Err(Error::Config(format!(
            "churn needs a positive site width and temperature, got {site_width}, {tau_r}"
        )));
    }
    let mut shared: Vec<u64> = prev.keys().filter(|k| curr.contains_key(k)).copied().collect();
    if shared.is_empty() {
        return Err(Error::ChurnUndefined);
    }
    shared.sort_unstable();
    let mut total = 0.0;
    for qid in &shared {
        let (a, b) = (&prev[qid], &curr[qid]);
        if a.len() != b.len() || a.len() % site_width != 0 || a.is_empty() {
            return Err(Error::Invariant(format!(
                "query {qid}: logit rows of {} and {} cannot be compared site-wise (width {site_width})",
                a.len(),
                b.len()
            )));
        }
        let n_sites = a.len() / site_width;
        let mut site_sum = 0.0;
        for s in 0..n_sites {
            let lo = s * site_width;
            let hi = lo + site_width;
            let pa = softmax_f64(&a[lo..hi].iter().map(|x| x / tau_r).collect::<Vec<_>>());
            let pb = softmax_f64(&b[lo..hi].iter().map(|x| x / tau_r).collect::<Vec<_>>());
            site_sum += total_variation(&pa, &pb);
        }
        total += site_sum / n_sites as f64;
    }
    Ok(total / shared.len() as f64)
}

/// One line of the metrics log: loss means, retrieval quality, routing
/// churn (absent when undefined), and the effective learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_bbc: f64,
    pub loss_cons: f64,
    pub loss_path: f64,
    pub loss_total: f64,
    pub recall: RecallTable,
    pub churn: Option<f64>,
    pub lr: f64,
}

/// SPD value in plain f64 for logging when the term is excluded from the
/// graph (λ=0): same per-site KL, site mean, τ² scaling, and 1/B.
fn spd_value_f64(
    students: &[&[f64]],
    teachers: &[Option<&[f64]>],
    site_width: usize,
    tau_path: f64,
) -> f64 {
    let b = students.len();
    let mut total = 0.0;
    for (flat, teacher) in students.iter().zip(teachers) {
        let Some(t_flat) = teacher else { continue };
        let n_sites = flat.len() / site_width;
        let mut site_sum = 0.0;
        for s in 0..n_sites {
            let lo = s * site_width;
            let hi = lo + site_width;
            let sl: Vec<f64> = flat[lo..hi].iter().map(|x| x / tau_path).collect();
            let tl: Vec<f64> = t_flat[lo..hi].iter().map(|x| x / tau_path).collect();
            let ps = softmax_f64(&sl);
            let ls = log_softmax_f64(&sl);
            let lt = log_softmax_f64(&tl);
            site_sum += ps
                .iter()
                .zip(ls.iter().zip(&lt))
                .map(|(p, (a, b))| p * (a - b))
                .sum::<f64>();
        }
        total += site_sum / n_sites as f64;
    }
    total * tau_path * tau_path / b as f64
}

/// The training driver. All data (world, triplets, evaluation split,
/// rendered images) is regenerated deterministically from the config, so a
/// checkpoint plus the config is a complete description of a run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model<f64>,
    pub adam: AdamState,
    pub bank: PathBank,
    pub universe: ItemUniverse,
    pub records: Vec<TripletRecord>,
    pub eval_set: EvalSet,
    /// Last completed epoch (0 = untrained).
    pub completed_epoch: u64,
    /// Frozen previous-epoch model (teacher = model_copy mode only).
    pub teacher: Option<Model<f64>>,
    images: Vec<(RawImage, RawImage)>,
    epoch_record: Vec<(u64, Vec<f64>)>,
    sum_bbc: f64,
    sum_cons: f64,
    sum_path: f64,
    sum_total: f64,
    seen_queries: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let universe = ItemUniverse::generate(
            cfg.seed,
            cfg.attrs,
            cfg.values,
            cfg.grid_h,
            cfg.grid_w,
            cfg.c_in,
        )?;
        let records = generate_triplets(&universe, cfg.n_train, cfg.max_edits, cfg.seed)?;
        let eval_set = generate_eval_set(
            &universe,
            cfg.gallery_size,
            cfg.n_eval_queries,
            cfg.max_edits,
            cfg.seed,
        )?;
        let model = Model::init(cfg.model_config(), cfg.seed)?;
        let adam = AdamState::new(&model.ps);
        let mut images = Vec::with_capacity(records.len());
        for r in &records {
            let reference = universe.render_image(
                &r.reference,
                cfg.sigma,
                derive_seed(cfg.seed, STREAM_RENDER_REFERENCE, r.query_id),
            )?;
            let target = universe.render_image(
                &r.target,
                cfg.sigma,
                derive_seed(cfg.seed, STREAM_RENDER_TARGET, r.query_id),
            )?;
            images.push((reference, target));
        }
        Ok(Trainer {
            cfg,
            model,
            adam,
            bank: PathBank::empty(),
            universe,
            records,
            eval_set,
            completed_epoch: 0,
            teacher: None,
            images,
            epoch_record: Vec::new(),
            sum_bbc: 0.0,
            sum_cons: 0.0,
            sum_path: 0.0,
            sum_total: 0.0,
            seen_queries: 0,
        })
    }

    /// Shuffled record indices for an epoch, split into batches. Depends
    /// only on (seed, epoch).
    pub fn batches_for_epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let n = self.records.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng =
            StdRng::seed_from_u64(derive_seed(self.cfg.seed, STREAM_BATCH_ORDER, epoch as u64));
        for i in 0..n.saturating_sub(1) {
            let j = rng.gen_range(i..n);
            order.swap(i, j);
        }
        order.chunks(self.cfg.batch_size).map(|c| c.to_vec()).collect()
    }

    /// Reset the epoch accumulators and return the epoch's batches.
    pub fn begin_epoch(&mut self, epoch: usize) -> Vec<Vec<usize>> {
        self.epoch_record.clear();
        self.sum_bbc = 0.0;
        self.sum_cons = 0.0;
        self.sum_path = 0.0;
        self.sum_total = 0.0;
        self.seen_queries = 0;
        self.batches_for_epoch(epoch)
    }

    /// Teacher routing logits for one query, or None (SPD masked for it).
    fn teacher_logits(&self, record_idx: usize) -> Result<Option<Vec<f64>>> {
        let qid = self.records[record_idx].query_id;
        match self.cfg.teacher {
            TeacherMode::Bank => Ok(self.bank.get(qid).map(<[f64]>::to_vec)),
            TeacherMode::ModelCopy => match &self.teacher {
                None => Ok(None),
                Some(teacher) => {
                    let (reference, _) = &self.images[record_idx];
                    let tape = Tape::new();
                    let fwd = teacher.query_forward(
                        &tape,
                        reference,
                        &self.records[record_idx].tokens,
                        &RouteMode::Learned,
                    )?;
                    Ok(Some(fwd.flat_logits()))
                }
            },
        }
    }

    /// One optimizer step on a batch of record indices. Public so a resumed
    /// run can be stepped in lockstep with an uninterrupted one.
    pub fn step(
        &mut self,
        epoch: usize,
        step_idx: usize,
        batch: &[usize],
    ) -> Result<LossBreakdown> {
        self.step_inner(epoch, batch).map_err(|e| match e {
            Error::Numerics(msg) => {
                Error::Numerics(format!("epoch {epoch} step {step_idx}: {msg}"))
            }
            other => other,
        })
    }

    fn step_inner(&mut self, epoch: usize, batch: &[usize]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Invariant("empty batch".into()));
        }
        let cfg = &self.cfg;
        let spd_active = cfg.lambda > 0.0;
        // Teacher side first (immutable borrows of self).
        let mut teachers: Vec<Option<Vec<f64>>> = Vec::with_capacity(batch.len());
        for &idx in batch {
            teachers.push(if spd_active { self.teacher_logits(idx)? } else { None });
        }
        let tape = Tape::new();
        let mut f_q_rows = Vec::with_capacity(batch.len());
        let mut f_in_rows = Vec::with_capacity(batch.len());
        let mut f_t_rows = Vec::with_capacity(batch.len());
        let mut site_logits = Vec::with_capacity(batch.len());
        let mut flat_logits: Vec<(u64, Vec<f64>)> = Vec::with_capacity(batch.len());
        for &idx in batch {
            let record = &self.records[idx];
            let (reference, target) = &self.images[idx];
            let fwd = self.model.query_forward(&tape, reference, &record.tokens, &RouteMode::Learned)?;
            let f_t = self.model.target_feature(&tape, target)?;
            flat_logits.push((record.query_id, fwd.flat_logits()));
            site_logits.push(fwd.sites.iter().map(|s| s.logits).collect::<Vec<_>>());
            f_q_rows.push(fwd.f_q);
            f_in_rows.push(fwd.f_in);
            f_t_rows.push(f_t);
        }
        let f_q = tape.stack_rows(&f_q_rows)?;
        let f_in = tape.stack_rows(&f_in_rows)?;
        let f_t = tape.stack_rows(&f_t_rows)?;
        let bbc = bbc_loss(&tape, f_q, f_t, cfg.bbc_scale)?;
        let cons = if cfg.use_consistency {
            Some(consistency_loss(&tape, f_q, f_t, f_in)?)
        } else {
            None
        };
        let teacher_slices: Vec<Option<&[f64]>> =
            teachers.iter().map(|t| t.as_deref()).collect();
        let any_teacher = teacher_slices.iter().any(Option::is_some);
        let path = if spd_active && any_teacher {
            Some(spd_loss(&tape, &site_logits, &teacher_slices, cfg.tau_path)?)
        } else {
            None
        };
        let total = {
            let base = match cons {
                Some(c) => bbc.add(c)?,
                None => bbc,
            };
            total_loss(base, tape.constant(Tensor::scalar(0.0)), path, cfg.lambda)?
        };
        let total_value = total.scalar_value();
        if !total_value.is_finite() {
            return Err(Error::Numerics(format!("loss became {total_value}")));
        }
        let grads = tape.backward(total, &self.model.ps)?;
        self.adam.step(
            &mut self.model.ps,
            &grads,
            cfg.effective_lr(epoch),
            cfg.weight_decay,
        )?;
        // Log the SPD value even when it is excluded from the graph.
        let path_value = match &path {
            Some(p) => p.scalar_value(),
            None => {
                let students: Vec<&[f64]> =
                    flat_logits.iter().map(|(_, l)| l.as_slice()).collect();
                if teacher_slices.iter().any(Option::is_some) {
                    spd_value_f64(
                        &students,
                        &teacher_slices,
                        self.model.net.active_count(),
                        cfg.tau_path,
                    )
                } else {
                    0.0
                }
            }
        };
        let breakdown = LossBreakdown {
            bbc: bbc.scalar_value(),
            cons: cons.map(|c| c.scalar_value()).unwrap_or(0.0),
            path: path_value,
            total: total_value,
            lambda: cfg.lambda,
            tau_path: cfg.tau_path,
            batch_size: batch.len(),
        };
        self.epoch_record.append(&mut flat_logits);
        let b = batch.len() as f64;
        self.sum_bbc += breakdown.bbc * b;
        self.sum_cons += breakdown.cons * b;
        self.sum_path += breakdown.path * b;
        self.sum_total += breakdown.total * b;
        self.seen_queries += batch.len();
        Ok(breakdown)
    }

    /// Close out an epoch: compute churn against the previous epoch's
    /// recorded paths, refresh the teacher bank (and frozen teacher model),
    /// evaluate recall, and return the epoch's metrics line.
    pub fn finish_epoch(&mut self, epoch: usize) -> Result<EpochMetrics> {
        if self.seen_queries == 0 {
            return Err(Error::Invariant(format!(
                "epoch {epoch} finished without any steps"
            )));
        }
        let expected_len = self.model.net.path_logit_len();
        let curr = PathBank::from_records(
            self.epoch_record.drain(..),
            epoch as u64,
            expected_len,
        )?;
        let churn = if self.bank.is_empty() {
            None
        } else {
            match path_churn(
                self.bank.map(),
                curr.map(),
                self.model.net.active_count(),
                self.cfg.tau_r,
            ) {
                Ok(c) => Some(c),
                Err(Error::ChurnUndefined) => None,
                Err(e) => return Err(e),
            }
        };
        self.bank = curr;
        if self.cfg.teacher == TeacherMode::ModelCopy {
            self.teacher = Some(self.model.clone());
        }
        let recall = evaluate_recall(
            &self.model,
            &self.universe,
            &self.eval_set,
            self.cfg.sigma,
            eval_render_seed(self.cfg.seed),
            &self.cfg.eval_ks,
        )?;
        let denom = self.seen_queries as f64;
        let metrics = EpochMetrics {
            epoch,
            loss_bbc: self.sum_bbc / denom,
            loss_cons: self.sum_cons / denom,
            loss_path: self.sum_path / denom,
            loss_total: self.sum_total / denom,
            recall,
            churn,
            lr: self.cfg.effective_lr(epoch),
        };
        self.completed_epoch = epoch as u64;
        Ok(metrics)
    }

    /// Run one full epoch (begin, all steps, finish).
    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochMetrics> {
        let batches = self.begin_epoch(epoch);
        for (i, batch) in batches.iter().enumerate() {
            self.step(epoch, i, batch)?;
        }
        self.finish_epoch(epoch)
    }

    /// Train from the current state to the configured epoch count,
    /// invoking `on_epoch` after each epoch (checkpointing, logging).
    pub fn train<F>(&mut self, mut on_epoch: F) -> Result<Vec<EpochMetrics>>
    where
        F: FnMut(&Trainer, &EpochMetrics) -> Result<()>,
    {
        let mut all = Vec::new();
        let first = self.completed_epoch as usize + 1;
        for epoch in first..=self.cfg.epochs {
            let metrics = self.run_epoch(epoch)?;
            on_epoch(self, &metrics)?;
            all.push(metrics);
        }
        Ok(all)
    }

    /// Forward-only routing traces for every training record, in record
    /// order: one row per routing site with its 4-way probabilities in
    /// frozen module order (zeros at disabled modules).
    pub fn trace_paths(&self) -> Result<Vec<TraceRow>> {
        let sites = self.model.net.site_count();
        let mut rows = Vec::with_capacity(self.records.len() * sites);
        for (idx, record) in self.records.iter().enumerate() {
            let tape = Tape::new();
            let (reference, _) = &self.images[idx];
            let fwd =
                self.model
                    .query_forward(&tape, reference, &record.tokens, &RouteMode::Learned)?;
            for site in &fwd.sites {
                rows.push(TraceRow {
                    query_id: record.query_id,
                    layer: site.layer,
                    source: site.source.map(|m| m.label()),
                    probs: site.probs,
                });
            }
        }
        Ok(rows)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            epoch: self.completed_epoch,
            params: self
                .model
                .ps
                .iter()
                .map(|(_, name, t)| (name.to_string(), t.clone()))
                .collect(),
            adam_t: self.adam.t,
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
            bank_epoch: self.bank.for_epoch,
            bank: self.bank.to_sorted(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Trainer> {
        let mut trainer = Trainer::new(ckpt.config)?;
        if ckpt.params.len() != trainer.model.ps.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, architecture has {}",
                ckpt.params.len(),
                trainer.model.ps.len()
            )));
        }
        for (i, (name, value)) in ckpt.params.into_iter().enumerate() {
            let id = trainer.model.ps.id_by_name(&name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint parameter `{name}` not in architecture"))
            })?;
            if trainer.model.ps.get(id).shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, architecture wants {:?}",
                    value.shape(),
                    trainer.model.ps.get(id).shape()
                )));
            }
            let m = ckpt.adam_m[i].clone();
            let v = ckpt.adam_v[i].clone();
            trainer.adam.m[id.index()] = m;
            trainer.adam.v[id.index()] = v;
            trainer.model.ps.set(id, value);
        }
        trainer.adam.t = ckpt.adam_t;
        trainer.bank = PathBank::from_sorted(ckpt.bank_epoch, ckpt.bank);
        trainer.completed_epoch = ckpt.epoch;
        if trainer.cfg.teacher == TeacherMode::ModelCopy && trainer.completed_epoch > 0 {
            trainer.teacher = Some(trainer.model.clone());
        }
        Ok(trainer)
    }
}
