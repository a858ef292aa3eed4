//! The four operation modules of the dynamic fusion network.
//!
//! Each maps (X: K×D, T_w: L×D, T_s: D) to a K×D output:
//! joint reasoning (JRM) concatenates the sentence feature per position,
//! projects, self-attends, and adds a feed-forward residual; cross
//! attention (CAM) attends image positions over word features; global
//! transformation (GTM) scales and shifts channels from the sentence
//! feature; residual connection (RCM) is layer normalization alone.
//! Parameters are never shared across modules or layers.

use crate::error::Result;
use crate::nn::{
    multi_head_attention, AttentionParams, FeedForwardParams, LayerNormParams,
};
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use serde::{Deserialize, Serialize};

/// Module identities in the frozen order used everywhere a per-module
/// vector appears (routing rows, distillation logits, aggregation weights,
/// trace records). The order is arbitrary but must never change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Cam,
    Jrm,
    Gtm,
    Rcm,
}

/// Number of operation modules.
pub const MODULE_COUNT: usize = 4;

impl ModuleKind {
    pub const ALL: [ModuleKind; MODULE_COUNT] =
        [ModuleKind::Cam, ModuleKind::Jrm, ModuleKind::Gtm, ModuleKind::Rcm];

    pub fn index(self) -> usize {
        match self {
            ModuleKind::Cam => 0,
            ModuleKind::Jrm => 1,
            ModuleKind::Gtm => 2,
            ModuleKind::Rcm => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ModuleKind::Cam => "cam",
            ModuleKind::Jrm => "jrm",
            ModuleKind::Gtm => "gtm",
            ModuleKind::Rcm => "rcm",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.label() == s)
    }
}

/// Joint reasoning: X_cat[k] = W_cat·concat(X[k], T_s), X_att =
/// self-attention over the K positions, output = FFN(X_att) + X_att.
/// No layer normalization anywhere in this module.
#[derive(Debug, Clone)]
pub struct JrmParams {
    pub w_cat: ParamId,
    pub attn: AttentionParams,
    pub ffn: FeedForwardParams,
}

impl JrmParams {
    pub fn init<S: Scalar, R: rand::Rng>(
        ps: &mut ParamSet<S>,
        prefix: &str,
        d: usize,
        head_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(JrmParams {
            w_cat: ps.add_weight(&format!("{prefix}.w_cat"), 2 * d, d, rng),
            attn: AttentionParams::init(ps, &format!("{prefix}.attn"), d, head_count, rng)?,
            ffn: FeedForwardParams::init(ps, &format!("{prefix}.ffn"), d, 4 * d, rng),
        })
    }

    /// The attended sequence X_att, exposed so the residual identity
    /// (zero FFN ⇒ output == X_att) is directly testable.
    pub fn attended<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamSet<S>,
        x: Var<'t, S>,
        t_s: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let x_cat = x.concat(t_s)?.matmul(tape.param(ps, self.w_cat))?;
        multi_head_attention(tape, ps, &self.attn, x_cat, x_cat, x_cat)
    }

    pub fn apply<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamSet<S>,
        x: Var<'t, S>,
        t_s: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let x_att = self.attended(tape, ps, x, t_s)?;
        self.ffn.apply(tape, ps, x_att)?.add(x_att)
    }
}

/// Cross attention: queries from image positions, keys/values from word
/// features, then layer normalization.
#[derive(Debug, Clone)]
pub struct CamParams {
    pub attn: AttentionParams,
    pub ln: LayerNormParams,
}

impl CamParams {
    pub fn init<S: Scalar, R: rand::Rng>(
        ps: &mut ParamSet<S>,
        prefix: &str,
        d: usize,
        head_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(CamParams {
            attn: AttentionParams::init(ps, &format!("{prefix}.attn"), d, head_count, rng)?,
            ln: LayerNormParams::init(ps, &format!("{prefix}.ln"), d),
        })
    }

    pub fn apply<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamSet<S>,
        x: Var<'t, S>,
        t_w: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let att = multi_head_attention(tape, ps, &self.attn, x, t_w, t_w)?;
        self.ln.apply(tape, ps, att)
    }
}

/// Global transformation: α = T_s·W_α, β = T_s·W_β, output =
/// LN(α ⊙ X + β) with α, β broadcast over positions (channel-wise scaling).
#[derive(Debug, Clone)]
pub struct GtmParams {
    pub w_alpha: ParamId,
    pub w_beta: ParamId,
    pub ln: LayerNormParams,
}

impl GtmParams {
    pub fn init<S: Scalar, R: rand::Rng>(
        ps: &mut ParamSet<S>,
        prefix: &str,
        d: usize,
        rng: &mut R,
    ) -> Self {
        GtmParams {
            w_alpha: ps.add_weight(&format!("{prefix}.w_alpha"), d, d, rng),
            w_beta: ps.add_weight(&format!("{prefix}.w_beta"), d, d, rng),
            ln: LayerNormParams::init(ps, &format!("{prefix}.ln"), d),
        }
    }

    pub fn apply<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamSet<S>,
        x: Var<'t, S>,
        t_s: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let d = t_s.numel();
        let t_row = t_s.reshape(vec![1, d])?;
        let alpha = t_row.matmul(tape.param(ps, self.w_alpha))?;
        let beta = t_row.matmul(tape.param(ps, self.w_beta))?;
        let transformed = x.mul(alpha)?.add(beta)?;
        self.ln.apply(tape, ps, transformed)
    }
}

/// Residual connection: layer normalization of the input, ignoring text.
#[derive(Debug, Clone)]
pub struct RcmParams {
    pub ln: LayerNormParams,
}

impl RcmParams {
    pub fn init<S: Scalar>(ps: &mut ParamSet<S>, prefix: &str, d: usize) -> Self {
        RcmParams {
            ln: LayerNormParams::init(ps, &format!("{prefix}.ln"), d),
        }
    }

    pub fn apply<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamSet<S>,
        x: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        self.ln.apply(tape, ps, x)
    }
}

/// One fusion layer holds an independent parameter set for each module.
#[derive(Debug, Clone)]
pub struct FusionLayerParams {
    pub cam: CamParams,
    pub jrm: JrmParams,
    pub gtm: GtmParams,
    pub rcm: RcmParams,
}

impl FusionLayerParams {
    pub fn init<S: Scalar, R: rand::Rng>(
        ps: &mut ParamSet<S>,
        prefix: &str,
        d: usize,
        head_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FusionLayerParams {
            cam: CamParams::init(ps, &format!("{prefix}.cam"), d, head_count, rng)?,
            jrm: JrmParams::init(ps, &format!("{prefix}.jrm"), d, head_count, rng)?,
            gtm: GtmParams::init(ps, &format!("{prefix}.gtm"), d, rng),
            rcm: RcmParams::init(ps, &format!("{prefix}.rcm"), d),
        })
    }

    pub fn apply<'t, S: Scalar>(
        &self,
        kind: ModuleKind,
        tape: &'t Tape<S>,
        ps: &ParamSet<S>,
        x: Var<'t, S>,
        t_w: Var<'t, S>,
        t_s: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        match kind {
            ModuleKind::Cam => self.cam.apply(tape, ps, x, t_w),
            ModuleKind::Jrm => self.jrm.apply(tape, ps, x, t_s),
            ModuleKind::Gtm => self.gtm.apply(tape, ps, x, t_s),
            ModuleKind::Rcm => self.rcm.apply(tape, ps, x),
        }
    }
}
