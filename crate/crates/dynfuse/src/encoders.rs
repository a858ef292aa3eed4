//! Toy-scale image and text encoders.
//!
//! The image side is a per-position affine stack over grid cells followed by
//! a bias-free linear projection (the 1×1-convolution analogue) and a
//! reshape to K×D positions; the target feature is the mean over positions
//! from the *same* encoder. The text side is word embeddings into a
//! single-layer LSTM; the sentence feature is the elementwise max over the
//! per-word hidden states.

use crate::error::{Error, Result};
use crate::nn::AffineParams;
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Noisy rendering of an item on an H×W grid with C_in channels per cell,
/// stored row-major as (row, col, channel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawImage {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub data: Vec<f64>,
}

impl RawImage {
    pub fn new(h: usize, w: usize, c_in: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || c_in == 0 || data.len() != h * w * c_in {
            return Err(Error::shape("raw_image", &[h, w, c_in], &[data.len()]));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerics("raw_image: non-finite entry".into()));
        }
        Ok(RawImage { h, w, c_in, data })
    }
}

/// Per-position affine stack (C_in+K) → 2D → 2D (ReLU after each), then a
/// bias-free projection 2D → D. Each of the K = H·W cell rows enters as its
/// channel vector concatenated with that cell's position one-hot.
#[derive(Debug, Clone)]
pub struct ImageEncoderParams {
    pub l1: AffineParams,
    pub l2: AffineParams,
    pub proj: ParamId,
    pub c_in: usize,
    pub k: usize,
    pub d: usize,
}

impl ImageEncoderParams {
    pub fn init<S: Scalar, R: Rng>(
        ps: &mut ParamSet<S>,
        prefix: &str,
        c_in: usize,
        k: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        let wide = 2 * d;
        ImageEncoderParams {
            l1: AffineParams::init(ps, &format!("{prefix}.l1"), c_in + k, wide, rng),
            l2: AffineParams::init(ps, &format!("{prefix}.l2"), wide, wide, rng),
            proj: ps.add_weight(&format!("{prefix}.proj"), wide, d, rng),
            c_in,
            k,
            d,
        }
    }

    /// Each grid cell's channels with the cell's position one-hot
    /// appended: K×(C_in+K). The shared per-position stack is blind to
    /// row order, and the pooled target feature averages the rows away —
    /// without an explicit position signal, grids holding the same values
    /// in different cells would pool to identical features.
    fn augmented_input<S: Scalar>(&self, img: &RawImage) -> Tensor<S> {
        let (k, c) = (self.k, self.c_in);
        let mut data = vec![S::zero(); k * (c + k)];
        for r in 0..k {
            for ch in 0..c {
                data[r * (c + k) + ch] = S::of(img.data[r * c + ch]);
            }
            data[r * (c + k) + c + r] = S::one();
        }
        Tensor::new(vec![k, c + k], data).expect("sizes agree by construction")
    }

    /// X_r: K×D with K = H·W.
    pub fn encode_image<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamSet<S>,
        img: &RawImage,
    ) -> Result<Var<'t, S>> {
        if img.c_in != self.c_in {
            return Err(Error::Config(format!(
                "image has {} channels, encoder expects {}",
                img.c_in, self.c_in
            )));
        }
        if img.h * img.w != self.k {
            return Err(Error::Config(format!(
                "image has {}x{} cells, encoder expects {}",
                img.h, img.w, self.k
            )));
        }
        let x = tape.constant(self.augmented_input::<S>(img));
        let h1 = self.l1.apply(tape, ps, x)?.relu();
        let h2 = self.l2.apply(tape, ps, h1)?.relu();
        h2.matmul(tape.param(ps, self.proj))
    }

    /// X_t: D — the mean over the K position rows of `encode_image`, from
    /// the identical parameters (the encoder is shared).
    pub fn encode_target<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamSet<S>,
        img: &RawImage,
    ) -> Result<Var<'t, S>> {
        self.encode_image(tape, ps, img)?.mean_axis(0)
    }
}

/// Word embeddings plus a single LSTM layer with hidden width D.
/// Gate preactivations are packed in column order (input, forget, cell,
/// output).
#[derive(Debug, Clone)]
pub struct TextEncoderParams {
    pub embed: ParamId,
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub vocab_size: usize,
    pub d: usize,
}

impl TextEncoderParams {
    pub fn init<S: Scalar, R: Rng>(
        ps: &mut ParamSet<S>,
        prefix: &str,
        vocab_size: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        TextEncoderParams {
            embed: ps.add_weight(&format!("{prefix}.embed"), vocab_size, d, rng),
            w_x: ps.add_weight(&format!("{prefix}.w_x"), d, 4 * d, rng),
            w_h: ps.add_weight(&format!("{prefix}.w_h"), d, 4 * d, rng),
            b: ps.add_bias(&format!("{prefix}.b"), 4 * d),
            vocab_size,
            d,
        }
    }

    /// (T_w: L×D per-word hidden states, T_s: D elementwise max over words).
    pub fn encode_text<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamSet<S>,
        tokens: &[usize],
    ) -> Result<(Var<'t, S>, Var<'t, S>)> {
        if tokens.is_empty() {
            return Err(Error::shape("encode_text", &[0], &[1]));
        }
        for &t in tokens {
            if t >= self.vocab_size {
                return Err(Error::Vocab {
                    index: t,
                    vocab_size: self.vocab_size,
                });
            }
        }
        let d = self.d;
        let embed = tape.param(ps, self.embed);
        let w_x = tape.param(ps, self.w_x);
        let w_h = tape.param(ps, self.w_h);
        let b = tape.param(ps, self.b);

        let mut h = tape.constant(Tensor::zeros(vec![1, d]));
        let mut c = tape.constant(Tensor::zeros(vec![1, d]));
        let mut states = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let x = embed.select_row(t)?.reshape(vec![1, d])?;
            let pre = x.matmul(w_x)?.add(h.matmul(w_h)?)?.add(b)?;
            let i = pre.slice_cols(0, d)?.sigmoid();
            let f = pre.slice_cols(d, 2 * d)?.sigmoid();
            let g = pre.slice_cols(2 * d, 3 * d)?.tanh();
            let o = pre.slice_cols(3 * d, 4 * d)?.sigmoid();
            c = f.mul(c)?.add(i.mul(g)?)?;
            h = o.mul(c.tanh())?;
            states.push(h);
        }
        let t_w = tape.stack_rows(&states)?;
        let t_s = t_w.max_axis(0)?;
        Ok((t_w, t_s))
    }
}
