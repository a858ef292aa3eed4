//! Soft routing between fusion modules and the layered network assembly.
//!
//! Between adjacent layers, each source module gets a routing distribution
//! over next-layer modules; layer inputs are the probability-weighted sums
//! of the previous layer's outputs. After the last layer an aggregation
//! distribution mixes the module outputs into the composed query feature
//! f_q; f_in is the plain sum of the last layer's pooled inputs.
//!
//! Everything is soft (fully differentiable); "forcing" a path replaces the
//! learned distributions with caller-supplied constants, used by tests and
//! trace tooling.

use crate::error::{Error, Result};
use crate::fusion::{FusionLayerParams, ModuleKind, MODULE_COUNT};
use crate::nn::MlpParams;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Router architecture: modality-specific (separate image/text MLPs whose
/// logits add), single (one MLP on the concatenated features), or uniform
/// (no parameters, constant equal mixing — the no-router baseline).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouterKind {
    Msr,
    Sr,
    Uniform,
}

impl RouterKind {
    pub fn label(self) -> &'static str {
        match self {
            RouterKind::Msr => "msr",
            RouterKind::Sr => "sr",
            RouterKind::Uniform => "uniform",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        [RouterKind::Msr, RouterKind::Sr, RouterKind::Uniform]
            .into_iter()
            .find(|k| k.label() == s)
    }
}

/// Routing parameters for one (layer, source-module) site.
#[derive(Debug, Clone)]
pub enum RouterSiteParams {
    /// image-MLP(pooled output) + text-MLP(T_s), each D → D/2 → 4.
    Msr { img: MlpParams, txt: MlpParams },
    /// One MLP on concat(pooled output, T_s): 2D → D/2 → 4.
    Sr { mlp: MlpParams },
    /// Constant zero logits.
    Uniform,
}

impl RouterSiteParams {
    pub fn init<S: Scalar, R: rand::Rng>(
        kind: RouterKind,
        ps: &mut ParamSet<S>,
        prefix: &str,
        d: usize,
        rng: &mut R,
    ) -> Self {
        let hidden = (d / 2).max(1);
        match kind {
            RouterKind::Msr => RouterSiteParams::Msr {
                img: MlpParams::init(ps, &format!("{prefix}.img"), d, hidden, MODULE_COUNT, rng),
                txt: MlpParams::init(ps, &format!("{prefix}.txt"), d, hidden, MODULE_COUNT, rng),
            },
            RouterKind::Sr => RouterSiteParams::Sr {
                mlp: MlpParams::init(ps, &format!("{prefix}.mlp"), 2 * d, hidden, MODULE_COUNT, rng),
            },
            RouterKind::Uniform => RouterSiteParams::Uniform,
        }
    }

    /// Raw 4-way routing logits for one source module.
    /// `o_pooled` and `t_s` are length-D vectors.
    pub fn route_logits<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamSet<S>,
        o_pooled: Var<'t, S>,
        t_s: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let d = o_pooled.numel();
        match self {
            RouterSiteParams::Msr { img, txt } => {
                let li = img.apply(tape, ps, o_pooled.reshape(vec![1, d])?)?;
                let lt = txt.apply(tape, ps, t_s.reshape(vec![1, d])?)?;
                li.add(lt)?.reshape(vec![MODULE_COUNT])
            }
            RouterSiteParams::Sr { mlp } => {
                let joint = o_pooled
                    .reshape(vec![1, d])?
                    .concat(t_s.reshape(vec![1, d])?)?;
                mlp.apply(tape, ps, joint)?.reshape(vec![MODULE_COUNT])
            }
            RouterSiteParams::Uniform => {
                Ok(tape.constant(Tensor::zeros(vec![MODULE_COUNT])))
            }
        }
    }
}

/// Probability-weighted propagation between layers:
/// X_i = Σ_j R[j][i] · O_j, where row j of `rows` is source j's
/// distribution over target modules. Rows must be stochastic.
pub fn propagate<'t, S: Scalar>(
    outputs: &[Var<'t, S>],
    rows: &[Var<'t, S>],
) -> Result<Vec<Var<'t, S>>> {
    let n = outputs.len();
    if rows.len() != n {
        return Err(Error::shape("propagate", &[rows.len()], &[n]));
    }
    for (j, row) in rows.iter().enumerate() {
        let v = row.value();
        if v.numel() != n {
            return Err(Error::shape("propagate", v.shape(), &[n]));
        }
        let sum: f64 = v.data().iter().map(|p| p.to_f64_lossy()).sum();
        if (sum - 1.0).abs() > 1e-9 || v.data().iter().any(|p| p.to_f64_lossy() < 0.0) {
            return Err(Error::Invariant(format!(
                "routing row {j} is not a probability distribution (sum {sum})"
            )));
        }
    }
    let mut inputs = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc: Option<Var<'t, S>> = None;
        for j in 0..n {
            let weight = rows[j].select_row(i)?;
            let term = outputs[j].mul(weight)?;
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(term)?,
            });
        }
        inputs.push(acc.expect("n >= 1"));
    }
    Ok(inputs)
}

/// Network shape and routing hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub d: usize,
    pub head_count: usize,
    pub layer_count: usize,
    pub tau_r: f64,
    pub router: RouterKind,
    /// Active flag per module in [`ModuleKind::ALL`] order.
    pub active: [bool; MODULE_COUNT],
}

impl NetConfig {
    pub fn active_modules(&self) -> Vec<ModuleKind> {
        ModuleKind::ALL
            .into_iter()
            .filter(|m| self.active[m.index()])
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layer_count == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        if !(self.tau_r > 0.0) {
            return Err(Error::Config(format!(
                "routing temperature must be positive, got {}",
                self.tau_r
            )));
        }
        if self.active.iter().all(|a| !a) {
            return Err(Error::Config(
                "at least one fusion module must stay active".into(),
            ));
        }
        Ok(())
    }
}

/// The stacked fusion network: `layer_count` fusion layers, a router per
/// (inter-layer gap, source module), and a scalar aggregation head per
/// module for the final mixing distribution.
#[derive(Debug, Clone)]
pub struct FusionNetParams {
    pub cfg: NetConfig,
    pub layers: Vec<FusionLayerParams>,
    /// routers[gap][module_index]; gaps run between consecutive layers.
    pub routers: Vec<Vec<RouterSiteParams>>,
    /// One D → D/2 → 1 head per module (unused under the uniform router).
    pub agg_heads: Vec<MlpParams>,
}

impl FusionNetParams {
    pub fn init<S: Scalar, R: rand::Rng>(
        cfg: NetConfig,
        ps: &mut ParamSet<S>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.layer_count);
        for l in 0..cfg.layer_count {
            layers.push(FusionLayerParams::init(
                ps,
                &format!("net.l{l}"),
                cfg.d,
                cfg.head_count,
                rng,
            )?);
        }
        let mut routers = Vec::new();
        for gap in 0..cfg.layer_count.saturating_sub(1) {
            let mut per_source = Vec::with_capacity(MODULE_COUNT);
            for m in ModuleKind::ALL {
                per_source.push(RouterSiteParams::init(
                    cfg.router,
                    ps,
                    &format!("net.route{gap}.{}", m.label()),
                    cfg.d,
                    rng,
                ));
            }
            routers.push(per_source);
        }
        let hidden = (cfg.d / 2).max(1);
        let agg_heads = ModuleKind::ALL
            .into_iter()
            .map(|m| MlpParams::init(ps, &format!("net.agg.{}", m.label()), cfg.d, hidden, 1, rng))
            .collect();
        Ok(FusionNetParams {
            cfg,
            layers,
            routers,
            agg_heads,
        })
    }

    /// Number of routing sites per query: one per (gap, active source)
    /// plus the final aggregation site.
    pub fn site_count(&self) -> usize {
        let n_active = self.cfg.active_modules().len();
        (self.cfg.layer_count - 1) * n_active + 1
    }

    /// Length of the flattened per-query logit vector used for
    /// distillation: active-module logits at every site.
    pub fn path_logit_len(&self) -> usize {
        self.site_count() * self.cfg.active_modules().len()
    }

    /// Number of active modules — the width of every routing site.
    pub fn active_count(&self) -> usize {
        self.cfg.active_modules().len()
    }
}

/// How routing distributions are chosen during a forward pass.
#[derive(Debug, Clone)]
pub enum RouteMode<'a> {
    /// Learned soft routing.
    Learned,
    /// Constant distributions, one full 4-way row per site in site order
    /// (inactive entries must be 0). Used by tests and path tracing.
    Forced(&'a [[f64; MODULE_COUNT]]),
}

/// One routing decision the forward pass took.
#[derive(Debug, Clone)]
pub struct SiteRecord<'t, S: Scalar> {
    pub layer: usize,
    /// `None` marks the final aggregation site.
    pub source: Option<ModuleKind>,
    /// Raw logits over the active modules, still attached to the tape.
    pub logits: Var<'t, S>,
    /// softmax(logits / τ_r) expanded to fixed 4-way order (zeros at
    /// inactive modules), detached.
    pub probs: [f64; MODULE_COUNT],
}

/// Everything the network produces for one query.
pub struct QueryForward<'t, S: Scalar> {
    /// Composed query feature, length D.
    pub f_q: Var<'t, S>,
    /// Sum of pooled last-layer inputs, length D.
    pub f_in: Var<'t, S>,
    /// Routing decisions in frozen site order.
    pub sites: Vec<SiteRecord<'t, S>>,
    /// Module outputs per layer, indexed [layer][active-module slot],
    /// each K×D and still attached to the tape.
    pub layer_outputs: Vec<Vec<Var<'t, S>>>,
}

impl<'t, S: Scalar> QueryForward<'t, S> {
    /// Flattened raw logits over active modules, site-major — the path
    /// signature stored in the teacher bank.
    pub fn flat_logits(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for site in &self.sites {
            for v in site.logits.value().data() {
                out.push(v.to_f64_lossy());
            }
        }
        out
    }
}

impl FusionNetParams {
    /// Gathers the active-module entries of a 4-way logit vector into an
    /// [n_active] vector, preserving frozen order.
    fn gather_active<'t, S: Scalar>(
        &self,
        logits4: Var<'t, S>,
        active: &[ModuleKind],
    ) -> Result<Var<'t, S>> {
        if active.len() == MODULE_COUNT {
            return Ok(logits4);
        }
        let mut acc: Option<Var<'t, S>> = None;
        for m in active {
            let one = logits4.select_row(m.index())?;
            acc = Some(match acc {
                None => one,
                Some(a) => a.concat(one)?,
            });
        }
        Ok(acc.expect("at least one active module"))
    }

    /// Runs the full network for one query on the caller's tape.
    ///
    /// `x_r`: K×D reference positions; `t_w`: L×D word features; `t_s`:
    /// D sentence feature. Text features are fed unchanged to every layer;
    /// only the image pathway is routed.
    pub fn forward<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamSet<S>,
        x_r: Var<'t, S>,
        t_w: Var<'t, S>,
        t_s: Var<'t, S>,
        mode: &RouteMode<'_>,
    ) -> Result<QueryForward<'t, S>> {
        let active = self.cfg.active_modules();
        let n_active = active.len();
        let inv_tau = S::of(1.0 / self.cfg.tau_r);
        if let RouteMode::Forced(rows) = mode {
            if rows.len() != self.site_count() {
                return Err(Error::shape("forced_route", &[rows.len()], &[self.site_count()]));
            }
        }

        let mut sites: Vec<SiteRecord<'t, S>> = Vec::with_capacity(self.site_count());
        // Layer 0 inputs: the reference feature for every module.
        let mut inputs: Vec<Var<'t, S>> = vec![x_r; n_active];
        let mut last_outputs: Vec<Var<'t, S>> = Vec::new();
        let mut layer_outputs: Vec<Vec<Var<'t, S>>> = Vec::with_capacity(self.cfg.layer_count);

        for l in 0..self.cfg.layer_count {
            let mut outputs = Vec::with_capacity(n_active);
            for (slot, m) in active.iter().enumerate() {
                outputs.push(self.layers[l].apply(*m, tape, ps, inputs[slot], t_w, t_s)?);
            }
            layer_outputs.push(outputs.clone());
            if l + 1 < self.cfg.layer_count {
                let mut rows = Vec::with_capacity(n_active);
                for (slot, m) in active.iter().enumerate() {
                    let o_pooled = outputs[slot].mean_axis(0)?;
                    let logits4 =
                        self.routers[l][m.index()].route_logits(tape, ps, o_pooled, t_s)?;
                    let logits_active = self.gather_active(logits4, &active)?;
                    let decision = self.finish_site(
                        tape,
                        mode,
                        sites.len(),
                        l,
                        Some(*m),
                        &active,
                        logits_active,
                        inv_tau,
                    )?;
                    rows.push(decision.row_var);
                    sites.push(decision.site);
                }
                inputs = propagate(&outputs, &rows)?;
            } else {
                last_outputs = outputs;
            }
        }

        // Final aggregation: one scalar logit per active module.
        let pooled: Vec<Var<'t, S>> = last_outputs
            .iter()
            .map(|o| o.mean_axis(0))
            .collect::<Result<_>>()?;
        let agg_logits: Var<'t, S> = if matches!(self.cfg.router, RouterKind::Uniform) {
            tape.constant(Tensor::zeros(vec![n_active]))
        } else {
            let mut acc: Option<Var<'t, S>> = None;
            for (slot, m) in active.iter().enumerate() {
                let head = &self.agg_heads[m.index()];
                let logit = head
                    .apply(tape, ps, pooled[slot].reshape(vec![1, self.cfg.d])?)?
                    .reshape(vec![1])?;
                acc = Some(match acc {
                    None => logit,
                    Some(a) => a.concat(logit)?,
                });
            }
            acc.expect("at least one active module")
        };
        let agg_record = self.finish_site(
            tape,
            mode,
            sites.len(),
            self.cfg.layer_count - 1,
            None,
            &active,
            agg_logits,
            inv_tau,
        )?;
        let weights = agg_record.row_var;
        sites.push(agg_record.site);

        let mut mixed: Option<Var<'t, S>> = None;
        for slot in 0..n_active {
            let w = weights.select_row(slot)?;
            let term = last_outputs[slot].mul(w)?;
            mixed = Some(match mixed {
                None => term,
                Some(a) => a.add(term)?,
            });
        }
        let f_q = mixed.expect("at least one active module").mean_axis(0)?;

        // f_in: sum of the pooled inputs that fed the last layer.
        let mut f_in: Option<Var<'t, S>> = None;
        for input in &inputs {
            let p = input.mean_axis(0)?;
            f_in = Some(match f_in {
                None => p,
                Some(a) => a.add(p)?,
            });
        }
        let f_in = f_in.expect("at least one active module");

        Ok(QueryForward {
            f_q,
            f_in,
            sites,
            layer_outputs,
        })
    }

    /// Shared tail for both site kinds: apply temperature, softmax over
    /// active modules, expand probabilities to fixed 4-way order.
    #[allow(clippy::too_many_arguments)]
    fn finish_site<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        mode: &RouteMode<'_>,
        site_index: usize,
        layer: usize,
        source: Option<ModuleKind>,
        active: &[ModuleKind],
        logits_active: Var<'t, S>,
        inv_tau: S,
    ) -> Result<SiteDecision<'t, S>> {
        let (logits_active, row_var) = match mode {
            RouteMode::Learned => {
                let row = logits_active.scale(inv_tau)?.softmax(0)?;
                (logits_active, row)
            }
            RouteMode::Forced(rows) => {
                let full = &rows[site_index];
                let mut gathered = Vec::with_capacity(active.len());
                for m in active {
                    gathered.push(full[m.index()]);
                }
                let sum: f64 = gathered.iter().sum();
                if (sum - 1.0).abs() > 1e-9 || gathered.iter().any(|p| *p < 0.0) {
                    return Err(Error::Invariant(format!(
                        "forced routing row at site {site_index} is not a distribution"
                    )));
                }
                // Pseudo-logits that softmax back to the forced row, so
                // downstream consumers see consistent records.
                let pseudo: Vec<S> = gathered
                    .iter()
                    .map(|p| S::of(p.max(1e-300).ln()))
                    .collect();
                let logits = tape.constant(Tensor::new(vec![active.len()], pseudo)?);
                let row = tape.constant(Tensor::new(
                    vec![active.len()],
                    gathered.iter().map(|p| S::of(*p)).collect(),
                )?);
                (logits, row)
            }
        };
        let mut probs = [0.0f64; MODULE_COUNT];
        let row_vals = row_var.value();
        for (slot, m) in active.iter().enumerate() {
            probs[m.index()] = row_vals.data()[slot].to_f64_lossy();
        }
        Ok(SiteDecision {
            row_var,
            site: SiteRecord {
                layer,
                source,
                logits: logits_active,
                probs,
            },
        })
    }
}

struct SiteDecision<'t, S: Scalar> {
    row_var: Var<'t, S>,
    site: SiteRecord<'t, S>,
}
