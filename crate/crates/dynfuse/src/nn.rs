//! Shared neural building blocks: affine maps, two-layer MLPs, layer
//! normalization, multi-head attention, and the position-wise feed-forward
//! block.
//!
//! Parameter structs hold [`ParamId`]s into a [`ParamSet`]; the `apply`
//! methods record the computation on a caller-supplied tape.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use rand::Rng;

/// Epsilon added to the variance inside every layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// y = x W + b, with x: n×d_in (or a d_in vector treated as one row by the
/// caller), W: d_in×d_out, b: d_out broadcast over rows.
#[derive(Debug, Clone)]
pub struct AffineParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl AffineParams {
    pub fn init<S: Scalar, R: Rng>(
        ps: &mut ParamSet<S>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        AffineParams {
            w: ps.add_weight(&format!("{prefix}.w"), d_in, d_out, rng),
            b: ps.add_bias(&format!("{prefix}.b"), d_out),
        }
    }

    pub fn apply<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamSet<S>,
        x: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        x.matmul(tape.param(ps, self.w))?.add(tape.param(ps, self.b))
    }
}

/// Two-layer MLP with ReLU: d_in → d_hidden → d_out.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub l1: AffineParams,
    pub l2: AffineParams,
}

impl MlpParams {
    pub fn init<S: Scalar, R: Rng>(
        ps: &mut ParamSet<S>,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        MlpParams {
            l1: AffineParams::init(ps, &format!("{prefix}.l1"), d_in, d_hidden, rng),
            l2: AffineParams::init(ps, &format!("{prefix}.l2"), d_hidden, d_out, rng),
        }
    }

    pub fn apply<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamSet<S>,
        x: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let h = self.l1.apply(tape, ps, x)?.relu();
        self.l2.apply(tape, ps, h)
    }
}

/// Learnable gain/bias pair for layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    /// gain initialized to ones, bias to zeros.
    pub fn init<S: Scalar>(ps: &mut ParamSet<S>, prefix: &str, d: usize) -> Self {
        LayerNormParams {
            gain: ps.add_filled(&format!("{prefix}.gain"), d, 1.0),
            bias: ps.add_bias(&format!("{prefix}.bias"), d),
        }
    }

    pub fn apply<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamSet<S>,
        x: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        x.layer_norm(
            tape.param(ps, self.gain),
            tape.param(ps, self.bias),
            S::of(LAYER_NORM_EPS),
        )
    }
}

/// Query/key/value projections plus an explicit output projection, all D×D.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub head_count: usize,
}

impl AttentionParams {
    pub fn init<S: Scalar, R: Rng>(
        ps: &mut ParamSet<S>,
        prefix: &str,
        d: usize,
        head_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if head_count == 0 || d % head_count != 0 {
            return Err(Error::Config(format!(
                "attention head_count {head_count} must divide model dim {d}"
            )));
        }
        Ok(AttentionParams {
            w_q: ps.add_weight(&format!("{prefix}.w_q"), d, d, rng),
            w_k: ps.add_weight(&format!("{prefix}.w_k"), d, d, rng),
            w_v: ps.add_weight(&format!("{prefix}.w_v"), d, d, rng),
            w_o: ps.add_weight(&format!("{prefix}.w_o"), d, d, rng),
            head_count,
        })
    }
}

/// Scaled dot-product multi-head attention: q: n×D, k/v: m×D → n×D.
/// Per-head scale is 1/sqrt(D / head_count).
pub fn multi_head_attention<'t, S: Scalar>(
    tape: &'t Tape<S>,
    ps: &ParamSet<S>,
    attn: &AttentionParams,
    q: Var<'t, S>,
    k: Var<'t, S>,
    v: Var<'t, S>,
) -> Result<Var<'t, S>> {
    let d = ps.get(attn.w_q).shape()[0];
    let dh = d / attn.head_count;
    let scale = S::of(1.0 / (dh as f64).sqrt());

    let qp = q.matmul(tape.param(ps, attn.w_q))?;
    let kp = k.matmul(tape.param(ps, attn.w_k))?;
    let vp = v.matmul(tape.param(ps, attn.w_v))?;

    let mut heads: Option<Var<'t, S>> = None;
    for h in 0..attn.head_count {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = qp.slice_cols(lo, hi)?;
        let kh = kp.slice_cols(lo, hi)?;
        let vh = vp.slice_cols(lo, hi)?;
        let scores = qh.matmul(kh.transpose()?)?.scale(scale)?;
        let weights = scores.softmax(1)?;
        let out_h = weights.matmul(vh)?;
        heads = Some(match heads {
            None => out_h,
            Some(acc) => acc.concat(out_h)?,
        });
    }
    let merged = heads.expect("head_count >= 1 enforced at init");
    merged.matmul(tape.param(ps, attn.w_o))
}

/// Position-wise feed-forward block: affine D→H, ReLU, affine H→D.
#[derive(Debug, Clone)]
pub struct FeedForwardParams {
    pub l1: AffineParams,
    pub l2: AffineParams,
}

impl FeedForwardParams {
    /// `hidden` defaults to 4·D at call sites.
    pub fn init<S: Scalar, R: Rng>(
        ps: &mut ParamSet<S>,
        prefix: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        FeedForwardParams {
            l1: AffineParams::init(ps, &format!("{prefix}.l1"), d, hidden, rng),
            l2: AffineParams::init(ps, &format!("{prefix}.l2"), hidden, d, rng),
        }
    }

    pub fn apply<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamSet<S>,
        x: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let h = self.l1.apply(tape, ps, x)?.relu();
        self.l2.apply(tape, ps, h)
    }
}
