//! Straight-line f64 reference implementations shared by the integration
//! tests. Everything here is loop-and-accumulator arithmetic with no tape,
//! no Var, and no shared code with the library kernels, so a defect in the
//! graph machinery cannot hide in its own oracle.

#![allow(dead_code)]

use dynfuse::encoders::RawImage;
use dynfuse::model::{Model, ModelConfig};
use dynfuse::router::{NetConfig, RouterKind};
use rand::rngs::StdRng;
use rand::Rng;

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// Dense mixing of module outputs into next-layer inputs:
/// input_i = Σ_j rows[j][i] · outputs[j], elementwise over each output's
/// `numel` entries, accumulated in ascending j exactly like the library.
pub fn propagate_oracle(outputs: &[Vec<f64>], rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = outputs.len();
    let numel = outputs[0].len();
    let mut inputs = vec![vec![0.0; numel]; n];
    for i in 0..n {
        for j in 0..n {
            for e in 0..numel {
                inputs[i][e] += rows[j][i] * outputs[j][e];
            }
        }
    }
    inputs
}

fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Batch classification loss: cosine similarities scaled by `scale`, each
/// query scored against every batch target, cross-entropy toward its own.
pub fn bbc_oracle(f_q: &[Vec<f64>], f_t: &[Vec<f64>], scale: f64) -> f64 {
    let b = f_q.len();
    let nq: Vec<Vec<f64>> = f_q.iter().map(|r| l2_normalize(r)).collect();
    let nt: Vec<Vec<f64>> = f_t.iter().map(|r| l2_normalize(r)).collect();
    let mut total = 0.0;
    for i in 0..b {
        let sims: Vec<f64> = (0..b).map(|j| scale * dot(&nq[i], &nt[j])).collect();
        total += log_sum_exp(&sims) - sims[i];
    }
    total / b as f64
}

/// Gram-consistency loss: ‖G(f_q) − G(f_t)‖_F + ‖G(f_in) − G(f_t)‖_F with
/// unnormalized Gram matrices over the batch.
pub fn consistency_oracle(f_q: &[Vec<f64>], f_t: &[Vec<f64>], f_in: &[Vec<f64>]) -> f64 {
    let gram = |f: &[Vec<f64>]| -> Vec<Vec<f64>> {
        f.iter()
            .map(|ri| f.iter().map(|rj| dot(ri, rj)).collect())
            .collect()
    };
    let fro = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let (gq, gt, gi) = (gram(f_q), gram(f_t), gram(f_in));
    fro(&gq, &gt) + fro(&gi, &gt)
}

/// Path-distillation loss. `per_query_sites[q]` holds one logit vector per
/// routing site; `teachers[q]` the flat site-major teacher logits or None.
/// Per query: mean over sites of KL(student ‖ teacher) at temperature
/// `tau`, then scaled by τ²/B with absent teachers contributing zero.
pub fn spd_oracle(
    per_query_sites: &[Vec<Vec<f64>>],
    teachers: &[Option<Vec<f64>>],
    tau: f64,
) -> f64 {
    let b = per_query_sites.len();
    let mut total = 0.0;
    for (sites, teacher) in per_query_sites.iter().zip(teachers) {
        let Some(teacher_flat) = teacher else { continue };
        let mut offset = 0;
        let mut query_kl = 0.0;
        for site in sites {
            let n = site.len();
            let student: Vec<f64> = site.iter().map(|x| x / tau).collect();
            let tchr: Vec<f64> = teacher_flat[offset..offset + n]
                .iter()
                .map(|x| x / tau)
                .collect();
            offset += n;
            let p_s = softmax(&student);
            let ls = log_sum_exp(&student);
            let lt = log_sum_exp(&tchr);
            for k in 0..n {
                query_kl += p_s[k] * ((student[k] - ls) - (tchr[k] - lt));
            }
        }
        total += query_kl / sites.len() as f64;
    }
    total * tau * tau / b as f64
}

/// Small full-model setup shared by the forward-oracle and gradient tests:
/// 2×2 grid, 3 channels, D=8, two heads, three layers, four modules.
pub fn tiny_model_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        net: NetConfig {
            d: 8,
            head_count: 2,
            layer_count: 3,
            tau_r: 1.0,
            router: RouterKind::Msr,
            active: [true; 4],
        },
        grid_h: 2,
        grid_w: 2,
        c_in: 3,
        vocab_size,
    }
}

pub fn tiny_model(seed: u64) -> Model<f64> {
    Model::init(tiny_model_config(9), seed).expect("tiny config is valid")
}

pub fn random_image(rng: &mut StdRng, h: usize, w: usize, c_in: usize) -> RawImage {
    let data = (0..h * w * c_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
    RawImage::new(h, w, c_in, data).expect("dimensions agree")
}

pub fn random_tokens(rng: &mut StdRng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}
