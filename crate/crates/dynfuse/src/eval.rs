//! Retrieval evaluation: rank the gallery by cosine similarity against each
//! composed query feature and report recall@K.

use crate::data::{derive_seed, EvalSet, ItemUniverse, STREAM_RENDER_GALLERY, STREAM_RENDER_REFERENCE};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::router::RouteMode;
use crate::scalar::Scalar;
use crate::tape::Tape;
use std::collections::{BTreeMap, HashMap};

/// recall@K keyed by K, in ascending K order.
pub type RecallTable = BTreeMap<usize, f64>;

/// Master seed for evaluation-time rendering, kept on a stream of its own
/// so evaluation noise never aliases training noise for matching ids.
pub fn eval_render_seed(master: u64) -> u64 {
    derive_seed(master, crate::data::STREAM_EVAL_RENDER, 0)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Eval("cosine similarity of a zero feature".into()));
    }
    Ok(dot / (na * nb))
}

/// Rank of `target_index` within the gallery for one query feature:
/// the number of gallery entries that beat it, where ties are broken by
/// the stable gallery index (an equal-similarity entry with a smaller
/// index ranks first).
pub fn target_rank(
    query: &[f64],
    gallery_feats: &[Vec<f64>],
    target_index: usize,
) -> Result<usize> {
    if target_index >= gallery_feats.len() {
        return Err(Error::Eval(format!(
            "target index {target_index} outside gallery of {}",
            gallery_feats.len()
        )));
    }
    let target_sim = cosine(query, &gallery_feats[target_index])?;
    let mut rank = 0usize;
    for (j, feat) in gallery_feats.iter().enumerate() {
        if j == target_index {
            continue;
        }
        let sim = cosine(query, feat)?;
        if sim > target_sim || (sim == target_sim && j < target_index) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// recall@K over precomputed features. `target_indices[i]` is the gallery
/// position of query i's true target.
pub fn recall_from_features(
    query_feats: &[Vec<f64>],
    target_indices: &[usize],
    gallery_feats: &[Vec<f64>],
    ks: &[usize],
) -> Result<RecallTable> {
    if query_feats.len() != target_indices.len() || query_feats.is_empty() {
        return Err(Error::Eval(format!(
            "{} query features for {} target indices",
            query_feats.len(),
            target_indices.len()
        )));
    }
    if gallery_feats.is_empty() {
        return Err(Error::Eval("empty gallery".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Eval("recall cutoffs must be positive and non-empty".into()));
    }
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|k| (*k, 0)).collect();
    for (q, t) in query_feats.iter().zip(target_indices) {
        let rank = target_rank(q, gallery_feats, *t)?;
        for (k, count) in hits.iter_mut() {
            if rank < *k {
                *count += 1;
            }
        }
    }
    let n = query_feats.len() as f64;
    Ok(hits.into_iter().map(|(k, c)| (k, c as f64 / n)).collect())
}

/// Full-model evaluation on an evaluation split: render every gallery item
/// and query reference (deterministic per-index seeds), embed them, and
/// score recall@K. Every query target must be present in the gallery.
pub fn evaluate_recall<S: Scalar>(
    model: &Model<S>,
    universe: &ItemUniverse,
    eval: &EvalSet,
    sigma: f64,
    data_seed: u64,
    ks: &[usize],
) -> Result<RecallTable> {
    let mut index_of: HashMap<&[usize], usize> = HashMap::new();
    for (i, item) in eval.gallery.iter().enumerate() {
        index_of.entry(item.as_slice()).or_insert(i);
    }
    let mut gallery_feats = Vec::with_capacity(eval.gallery.len());
    for (i, item) in eval.gallery.iter().enumerate() {
        let img = universe.render_image(
            item,
            sigma,
            derive_seed(data_seed, STREAM_RENDER_GALLERY, i as u64),
        )?;
        let tape = Tape::new();
        let feat = model.target_feature(&tape, &img)?;
        gallery_feats.push(feat.value().data().iter().map(|v| v.to_f64_lossy()).collect());
    }
    let mut query_feats = Vec::with_capacity(eval.queries.len());
    let mut target_indices = Vec::with_capacity(eval.queries.len());
    for q in &eval.queries {
        let target_index = *index_of.get(q.target.as_slice()).ok_or_else(|| {
            Error::Eval(format!("query {}: target item absent from gallery", q.query_id))
        })?;
        let img = universe.render_image(
            &q.reference,
            sigma,
            derive_seed(data_seed, STREAM_RENDER_REFERENCE, q.query_id),
        )?;
        let tape = Tape::new();
        let fwd = model.query_forward(&tape, &img, &q.tokens, &RouteMode::Learned)?;
        query_feats.push(fwd.f_q.value().data().iter().map(|v| v.to_f64_lossy()).collect());
        target_indices.push(target_index);
    }
    recall_from_features(&query_feats, &target_indices, &gallery_feats, ks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_eval_set;
    use crate::fusion::MODULE_COUNT;
    use crate::model::ModelConfig;
    use crate::router::{NetConfig, RouterKind};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn singleton_gallery_is_always_recalled() {
        let table = recall_from_features(
            &[vec![0.2, -0.4]],
            &[0],
            &[vec![1.0, 1.0]],
            &[1],
        )
        .unwrap();
        assert_eq!(table[&1], 1.0);
    }

    #[test]
    fn ranking_follows_cosine_and_ties_prefer_smaller_index() {
        let gallery = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![2.0, 0.0], // same direction as index 0: a cosine tie
        ];
        let query = vec![1.0, 0.0];
        // Index 0 wins its tie with index 2.
        assert_eq!(target_rank(&query, &gallery, 0).unwrap(), 0);
        // Index 2 loses the tie against index 0.
        assert_eq!(target_rank(&query, &gallery, 2).unwrap(), 1);
        assert_eq!(target_rank(&query, &gallery, 1).unwrap(), 2);
    }

    #[test]
    fn cosine_ranking_ignores_feature_magnitude() {
        let mut rng = StdRng::seed_from_u64(3);
        let gallery: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let query: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scaled: Vec<Vec<f64>> = gallery
            .iter()
            .map(|f| f.iter().map(|v| v * 7.5).collect())
            .collect();
        for t in 0..gallery.len() {
            assert_eq!(
                target_rank(&query, &gallery, t).unwrap(),
                target_rank(&query, &scaled, t).unwrap()
            );
        }
    }

    #[test]
    fn recall_is_non_decreasing_in_k() {
        let mut rng = StdRng::seed_from_u64(5);
        let gallery: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let queries: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let targets: Vec<usize> = (0..40).map(|_| rng.gen_range(0..50)).collect();
        let ks = [1, 2, 5, 10, 25, 50, 100];
        let table = recall_from_features(&queries, &targets, &gallery, &ks).unwrap();
        let vals: Vec<f64> = table.values().copied().collect();
        for pair in vals.windows(2) {
            assert!(pair[0] <= pair[1]);
        }
        assert_eq!(table[&100], table[&50]); // cutoffs beyond the gallery saturate
    }

    #[test]
    fn unrelated_features_score_at_chance_level() {
        let mut rng = StdRng::seed_from_u64(11);
        let g = 256usize;
        let gallery: Vec<Vec<f64>> = (0..g)
            .map(|_| (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let queries: Vec<Vec<f64>> = (0..1000)
            .map(|_| (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let targets: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..g)).collect();
        let table = recall_from_features(&queries, &targets, &gallery, &[1]).unwrap();
        // Chance is 1/256 ≈ 0.0039; allow generous sampling slack.
        assert!(table[&1] < 0.02, "R@1 {} is far above chance", table[&1]);
    }

    #[test]
    fn zero_feature_and_bad_cutoffs_are_eval_errors() {
        let gallery = vec![vec![1.0, 0.0]];
        assert!(matches!(
            recall_from_features(&[vec![0.0, 0.0]], &[0], &gallery, &[1]),
            Err(Error::Eval(_))
        ));
        assert!(matches!(
            recall_from_features(&[vec![1.0, 0.0]], &[0], &gallery, &[]),
            Err(Error::Eval(_))
        ));
        assert!(matches!(
            recall_from_features(&[vec![1.0, 0.0]], &[0], &gallery, &[0, 1]),
            Err(Error::Eval(_))
        ));
    }

    fn tiny_model() -> (Model<f64>, ItemUniverse) {
        let universe = ItemUniverse::generate(3, 4, 4, 2, 2, 4).unwrap();
        let cfg = ModelConfig {
            net: NetConfig {
                d: 8,
                head_count: 2,
                layer_count: 2,
                tau_r: 1.0,
                router: RouterKind::Msr,
                active: [true; MODULE_COUNT],
            },
            grid_h: 2,
            grid_w: 2,
            c_in: 4,
            vocab_size: universe.vocab_size(),
        };
        (Model::init(cfg, 5).unwrap(), universe)
    }

    #[test]
    fn untrained_model_evaluates_to_valid_recalls() {
        let (model, universe) = tiny_model();
        let eval = generate_eval_set(&universe, 16, 8, 2, 13).unwrap();
        let table = evaluate_recall(&model, &universe, &eval, 0.05, 13, &[1, 5, 16]).unwrap();
        assert_eq!(table.len(), 3);
        for (_, r) in &table {
            assert!((0.0..=1.0).contains(r));
        }
        assert_eq!(table[&16], 1.0); // cutoff equals the gallery size
        // Deterministic under identical inputs.
        let again = evaluate_recall(&model, &universe, &eval, 0.05, 13, &[1, 5, 16]).unwrap();
        assert_eq!(table, again);
    }

    #[test]
    fn absent_target_is_an_eval_error() {
        let (model, universe) = tiny_model();
        let mut eval = generate_eval_set(&universe, 8, 4, 2, 13).unwrap();
        // Point one query at an item outside the gallery.
        let outside = (0..4)
            .map(|i| {
                let item: Vec<usize> = vec![i % 4, (i + 1) % 4, (i + 2) % 4, (i + 3) % 4];
                item
            })
            .find(|item| !eval.gallery.contains(item))
            .expect("some item outside an 8-item gallery of 256");
        eval.queries[0].target = outside;
        let err = evaluate_recall(&model, &universe, &eval, 0.0, 13, &[1]).unwrap_err();
        assert!(matches!(err, Error::Eval(_)));
    }
}
