//! Training losses: batch-based classification, Gram-matrix consistency,
//! and self-path distillation, plus their weighted total.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Per-batch loss values (detached), with the weights that combined them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bbc: f64,
    pub cons: f64,
    pub path: f64,
    pub total: f64,
    pub lambda: f64,
    pub tau_path: f64,
    pub batch_size: usize,
}

/// Batch-based classification: cosine similarities scaled by `scale`,
/// each query classified against its own target among the batch targets.
/// Mean row-wise cross-entropy of the B×B similarity matrix against the
/// diagonal.
pub fn bbc_loss<'t, S: Scalar>(
    _tape: &'t Tape<S>,
    f_q: Var<'t, S>,
    f_t: Var<'t, S>,
    scale: f64,
) -> Result<Var<'t, S>> {
    let (bq, bt) = (f_q.shape(), f_t.shape());
    if bq.len() != 2 || bt.len() != 2 || bq != bt {
        return Err(Error::shape("bbc_loss", &bq, &bt));
    }
    let nq = f_q.l2_normalize_rows()?;
    let nt = f_t.l2_normalize_rows()?;
    let sims = nq.matmul(nt.transpose()?)?.scale(S::of(scale))?;
    let lse = sims.logsumexp_rows()?;
    let diag = sims.diag()?;
    lse.sub(diag)?.mean_all()
}

/// Gram-matrix consistency: ‖f_q f_qᵀ − f_t f_tᵀ‖_F + ‖f_in f_inᵀ − f_t f_tᵀ‖_F.
/// Grams are unnormalized.
pub fn consistency_loss<'t, S: Scalar>(
    _tape: &'t Tape<S>,
    f_q: Var<'t, S>,
    f_t: Var<'t, S>,
    f_in: Var<'t, S>,
) -> Result<Var<'t, S>> {
    let (sq, st, si) = (f_q.shape(), f_t.shape(), f_in.shape());
    if sq.len() != 2 || sq != st || sq != si {
        return Err(Error::shape("consistency_loss", &sq, &st));
    }
    let gram = |f: Var<'t, S>| -> Result<Var<'t, S>> { f.matmul(f.transpose()?) };
    let m_q = gram(f_q)?;
    let m_t = gram(f_t)?;
    let m_in = gram(f_in)?;
    let fro = |a: Var<'t, S>, b: Var<'t, S>| -> Result<Var<'t, S>> {
        let d = a.sub(b)?;
        Ok(d.mul(d)?.sum_all()?.sqrt())
    };
    fro(m_q, m_t)?.add(fro(m_in, m_t)?)
}

/// Stable log-softmax in plain f64, matching the tape kernel's arithmetic
/// exactly (same max-subtraction and summation order) so that identical
/// student/teacher logits produce a distillation loss of exactly zero.
pub(crate) fn log_softmax_f64(xs: &[f64]) -> Vec<f64> {
    let mut mx = xs[0];
    for v in &xs[1..] {
        if *v > mx {
            mx = *v;
        }
    }
    let mut sum = 0.0;
    for v in xs {
        sum += (v - mx).exp();
    }
    let lse = mx + sum.ln();
    xs.iter().map(|v| v - lse).collect()
}

pub(crate) fn softmax_f64(xs: &[f64]) -> Vec<f64> {
    log_softmax_f64(xs).iter().map(|l| l.exp()).collect()
}

/// KL(p_s ‖ p_t) for one routing site under temperature softening.
/// `student_logits` stays on the tape; the teacher side is constant data.
pub fn spd_site_kl<'t, S: Scalar>(
    tape: &'t Tape<S>,
    student_logits: Var<'t, S>,
    teacher_logits: &[f64],
    tau_path: f64,
) -> Result<Var<'t, S>> {
    let n = student_logits.numel();
    if teacher_logits.len() != n {
        return Err(Error::Invariant(format!(
            "teacher logit length {} does not match site width {n}",
            teacher_logits.len()
        )));
    }
    let softened: Vec<f64> = teacher_logits.iter().map(|x| x / tau_path).collect();
    let ln_pt = log_softmax_f64(&softened);
    let ln_pt_t = tape.constant(Tensor::new(
        vec![n],
        ln_pt.iter().map(|v| S::of(*v)).collect(),
    )?);
    let scaled = student_logits.scale(S::of(1.0 / tau_path))?;
    let p_s = scaled.softmax(0)?;
    let ln_ps = scaled.log_softmax(0)?;
    p_s.mul(ln_ps.sub(ln_pt_t)?)?.sum_all()
}

/// Self-path distillation over a batch: per query, the mean over routing
/// sites of KL(student ‖ teacher) under τ_path softening; queries without
/// a teacher entry contribute 0 (the batch denominator stays B); the
/// average is scaled by τ_path².
pub fn spd_loss<'t, S: Scalar>(
    tape: &'t Tape<S>,
    per_query_site_logits: &[Vec<Var<'t, S>>],
    teachers: &[Option<&[f64]>],
    tau_path: f64,
) -> Result<Var<'t, S>> {
    let b = per_query_site_logits.len();
    if teachers.len() != b || b == 0 {
        return Err(Error::shape("spd_loss", &[teachers.len()], &[b]));
    }
    if !(tau_path > 0.0) {
        return Err(Error::Config(format!(
            "distillation temperature must be positive, got {tau_path}"
        )));
    }
    let mut acc: Option<Var<'t, S>> = None;
    for (sites, teacher) in per_query_site_logits.iter().zip(teachers) {
        let Some(teacher_flat) = teacher else { continue };
        let expected: usize = sites.iter().map(|s| s.numel()).sum();
        if teacher_flat.len() != expected {
            return Err(Error::Invariant(format!(
                "teacher path logits length {} does not match the current \
                 architecture's {expected}",
                teacher_flat.len()
            )));
        }
        let mut offset = 0;
        let mut query_kl: Option<Var<'t, S>> = None;
        for site in sites {
            let n = site.numel();
            let kl = spd_site_kl(tape, *site, &teacher_flat[offset..offset + n], tau_path)?;
            offset += n;
            query_kl = Some(match query_kl {
                None => kl,
                Some(a) => a.add(kl)?,
            });
        }
        let per_query = query_kl
            .expect("site list cannot be empty")
            .scale(S::of(1.0 / sites.len() as f64))?;
        acc = Some(match acc {
            None => per_query,
            Some(a) => a.add(per_query)?,
        });
    }
    let total = match acc {
        Some(a) => a,
        None => tape.constant(Tensor::scalar(S::zero())),
    };
    total.scale(S::of(tau_path * tau_path / b as f64))
}

/// Weighted total per the optimization objective:
/// total = bbc + cons + λ·path.
pub fn total_loss<'t, S: Scalar>(
    bbc: Var<'t, S>,
    cons: Var<'t, S>,
    path: Option<Var<'t, S>>,
    lambda: f64,
) -> Result<Var<'t, S>> {
    let base = bbc.add(cons)?;
    match path {
        Some(p) if lambda != 0.0 => base.add(p.scale(S::of(lambda))?),
        _ => Ok(base),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSet;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rows<'t>(tape: &'t Tape<f64>, data: &[&[f64]]) -> Var<'t, f64> {
        tape.constant(Tensor::from_rows(&data.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap())
    }

    #[test]
    fn bbc_single_query_is_exactly_zero() {
        let tape = Tape::new();
        let f_q = rows(&tape, &[&[0.3, -0.8]]);
        let f_t = rows(&tape, &[&[1.5, 0.2]]);
        let loss = bbc_loss(&tape, f_q, f_t, 10.0).unwrap();
        assert_eq!(loss.scalar_value(), 0.0);
    }

    #[test]
    fn bbc_orthonormal_pair_golden() {
        let tape = Tape::new();
        let f_q = rows(&tape, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let f_t = rows(&tape, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let loss = bbc_loss(&tape, f_q, f_t, 1.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln(); // 0.313261687...
        assert!((loss.scalar_value() - expected).abs() < 1e-12);
        assert!((loss.scalar_value() - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn bbc_is_invariant_to_positive_row_rescaling() {
        let tape = Tape::new();
        let mut rng = StdRng::seed_from_u64(4);
        let mut data: Vec<Vec<f64>> = Vec::new();
        for _ in 0..3 {
            data.push((0..5).map(|_| rng.gen_range(-1.0..1.0)).collect());
        }
        let f_t: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let base = {
            let f_q = tape.constant(Tensor::from_rows(&data).unwrap());
            let ft = tape.constant(Tensor::from_rows(&f_t).unwrap());
            bbc_loss(&tape, f_q, ft, 10.0).unwrap().scalar_value()
        };
        let scaled: Vec<Vec<f64>> = data
            .iter()
            .enumerate()
            .map(|(i, r)| r.iter().map(|v| v * (1.0 + i as f64 * 2.0)).collect())
            .collect();
        let rescaled = {
            let f_q = tape.constant(Tensor::from_rows(&scaled).unwrap());
            let ft = tape.constant(Tensor::from_rows(&f_t).unwrap());
            bbc_loss(&tape, f_q, ft, 10.0).unwrap().scalar_value()
        };
        assert!((base - rescaled).abs() < 1e-9);
    }

    #[test]
    fn bbc_vanishes_under_large_scale_with_diagonal_dominance() {
        let tape = Tape::new();
        let f_q = rows(&tape, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let loss = bbc_loss(&tape, f_q, f_q, 100.0).unwrap();
        assert!(loss.scalar_value() < 1e-12);
    }

    #[test]
    fn consistency_identical_features_give_exact_zero() {
        let tape = Tape::new();
        let f = rows(&tape, &[&[0.3, 1.0], &[-0.4, 0.9]]);
        let loss = consistency_loss(&tape, f, f, f).unwrap();
        assert_eq!(loss.scalar_value(), 0.0);
    }

    #[test]
    fn consistency_scalar_golden() {
        let tape = Tape::new();
        let f_q = rows(&tape, &[&[1.0]]);
        let f_t = rows(&tape, &[&[2.0]]);
        let f_in = rows(&tape, &[&[1.0]]);
        let loss = consistency_loss(&tape, f_q, f_t, f_in).unwrap();
        assert!((loss.scalar_value() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn consistency_is_invariant_to_negating_a_feature_set() {
        let tape = Tape::new();
        let f_q = rows(&tape, &[&[0.5, 2.0], &[1.0, -1.0]]);
        let f_t = rows(&tape, &[&[0.1, 0.4], &[0.2, 0.8]]);
        let f_in = rows(&tape, &[&[1.0, 1.0], &[0.0, 1.0]]);
        let neg: Vec<Vec<f64>> = f_q
            .value()
            .data()
            .chunks(2)
            .map(|r| r.iter().map(|v| -v).collect())
            .collect();
        let f_q_neg = tape.constant(Tensor::from_rows(&neg).unwrap());
        let a = consistency_loss(&tape, f_q, f_t, f_in).unwrap().scalar_value();
        let b = consistency_loss(&tape, f_q_neg, f_t, f_in)
            .unwrap()
            .scalar_value();
        assert_eq!(a, b);
    }

    #[test]
    fn consistency_batch_mismatch_is_shape_error() {
        let tape = Tape::new();
        let f_q = rows(&tape, &[&[1.0, 0.0]]);
        let f_t = rows(&tape, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let err = consistency_loss(&tape, f_q, f_t, f_q).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn spd_identical_logits_are_exactly_zero() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![4], vec![0.3, -1.0, 2.0, 0.1]).unwrap());
        let kl = spd_site_kl(&tape, logits, &[0.3, -1.0, 2.0, 0.1], 2.0).unwrap();
        assert_eq!(kl.scalar_value(), 0.0);
        let loss = spd_loss(
            &tape,
            &[vec![logits]],
            &[Some([0.3, -1.0, 2.0, 0.1].as_slice())],
            2.0,
        )
        .unwrap();
        assert_eq!(loss.scalar_value(), 0.0);
    }

    #[test]
    fn spd_two_point_golden() {
        let tape = Tape::<f64>::new();
        let student = tape.constant(Tensor::new(vec![2], vec![2.0, 0.0]).unwrap());
        let loss = spd_loss(&tape, &[vec![student]], &[Some([0.0, 2.0].as_slice())], 2.0).unwrap();
        // 4 * KL(softmax([1,0]) || softmax([0,1])) = 4 * 0.46211715...
        assert!((loss.scalar_value() - 1.84847).abs() < 1e-4);
    }

    #[test]
    fn spd_uniform_teacher_matches_direct_evaluation() {
        let tape = Tape::new();
        let raw = [10.0, 0.0, 0.0, 0.0];
        let student = tape.constant(Tensor::new(vec![4], raw.to_vec()).unwrap());
        let loss = spd_loss(&tape, &[vec![student]], &[Some([0.0; 4].as_slice())], 1.0).unwrap();
        let p = softmax_f64(&raw);
        let expected: f64 = p.iter().map(|pi| pi * (pi.ln() - 0.25f64.ln())).sum();
        assert!((loss.scalar_value() - expected).abs() < 1e-12);
    }

    #[test]
    fn spd_is_nonnegative_and_masks_missing_teachers() {
        let mut rng = StdRng::seed_from_u64(8);
        for _ in 0..50 {
            let tape = Tape::new();
            let s: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let t: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let sv = tape.constant(Tensor::new(vec![4], s).unwrap());
            let loss = spd_loss(&tape, &[vec![sv]], &[Some(t.as_slice())], 2.0).unwrap();
            assert!(loss.scalar_value() >= 0.0);
        }
        // Half the batch masked: denominator stays B.
        let tape = Tape::<f64>::new();
        let s1 = tape.constant(Tensor::new(vec![2], vec![2.0, 0.0]).unwrap());
        let s2 = tape.constant(Tensor::new(vec![2], vec![5.0, -1.0]).unwrap());
        let teacher = [0.0, 2.0];
        let masked = spd_loss(
            &tape,
            &[vec![s1], vec![s2]],
            &[Some(teacher.as_slice()), None],
            2.0,
        )
        .unwrap();
        let solo = spd_loss(&tape, &[vec![s1]], &[Some(teacher.as_slice())], 2.0).unwrap();
        assert!((masked.scalar_value() - solo.scalar_value() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn spd_teacher_side_gets_no_gradient() {
        let mut ps = ParamSet::<f64>::new();
        let teacher_param = ps.add("teacher", Tensor::new(vec![2], vec![0.0, 2.0]).unwrap());
        let student_param = ps.add("student", Tensor::new(vec![2], vec![2.0, 0.0]).unwrap());
        let tape = Tape::new();
        let student = tape.param(&ps, student_param);
        let teacher_vals = ps.get(teacher_param).data().to_vec();
        let loss = spd_loss(&tape, &[vec![student]], &[Some(teacher_vals.as_slice())], 2.0).unwrap();
        let grads = tape.backward(loss, &ps).unwrap();
        assert!(grads.get(teacher_param).data().iter().all(|g| *g == 0.0));
        assert!(grads.get(student_param).data().iter().any(|g| *g != 0.0));
    }

    #[test]
    fn spd_teacher_length_mismatch_is_invariant_error() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::new(vec![4], vec![0.0; 4]).unwrap());
        let err = spd_loss(&tape, &[vec![s]], &[Some([0.0; 3].as_slice())], 2.0).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
    }

    #[test]
    fn total_combines_parts_linearly() {
        let tape = Tape::<f64>::new();
        let c = |v: f64| tape.constant(Tensor::scalar(v));
        let total = total_loss(c(1.0), c(2.0), Some(c(3.0)), 0.6).unwrap();
        assert!((total.scalar_value() - 4.8).abs() < 1e-12);
        let no_path = total_loss(c(1.0), c(2.0), Some(c(3.0)), 0.0).unwrap();
        assert_eq!(no_path.scalar_value(), 3.0);
        let fashioniq_style = total_loss(c(0.5), c(0.25), Some(c(0.25)), 1.0).unwrap();
        assert!((fashioniq_style.scalar_value() - 1.0).abs() < 1e-12);
    }
}
