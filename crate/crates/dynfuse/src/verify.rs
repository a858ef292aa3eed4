//! Finite-difference verification battery.
//!
//! Every differentiable block — both encoders, each fusion module, each
//! learned router, each loss term, and the complete training objective —
//! is checked against central differences on tiny dimensions. Individual
//! blocks are probed exhaustively (every parameter coordinate); the
//! end-to-end objective is probed on a seeded random coordinate subset per
//! parameter, since two re-evaluations per coordinate over the whole
//! network would dominate the runtime without adding coverage the block
//! checks don't already give.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::data::derive_seed;
use crate::encoders::{ImageEncoderParams, RawImage, TextEncoderParams};
use crate::error::Result;
use crate::fusion::{CamParams, GtmParams, JrmParams, RcmParams};
use crate::gradcheck::{finite_diff_check, finite_diff_check_sampled, GradCheckReport};
use crate::losses::{bbc_loss, consistency_loss, spd_loss, total_loss};
use crate::model::{Model, ModelConfig};
use crate::params::ParamSet;
use crate::router::{NetConfig, RouteMode, RouterKind, RouterSiteParams};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Central-difference step.
pub const BATTERY_H: f64 = 1e-4;
/// Maximum tolerated relative error between analytic and numeric gradients.
pub const BATTERY_TOL: f64 = 1e-4;

// Tiny-but-nondegenerate dimensions shared by every block scenario.
const D: usize = 8;
const HEADS: usize = 2;
const GRID_H: usize = 2;
const GRID_W: usize = 2;
const K: usize = GRID_H * GRID_W;
const C_IN: usize = 3;
const VOCAB: usize = 9;
const WORDS: usize = 4;
const LAYERS: usize = 3;
const BATCH: usize = 2;
/// Coordinates probed per parameter in the end-to-end objective check.
const COMPOSITE_COORDS_PER_PARAM: usize = 8;

/// Result of one block check under one seed.
#[derive(Debug, Clone)]
pub struct BlockResult {
    pub seed: u64,
    pub block: &'static str,
    pub report: GradCheckReport,
}

/// Aggregated battery outcome across blocks and seeds.
#[derive(Debug, Clone)]
pub struct BatteryReport {
    pub results: Vec<BlockResult>,
    pub h: f64,
    pub tol: f64,
}

impl BatteryReport {
    pub fn pass(&self) -> bool {
        self.results.iter().all(|r| r.report.pass())
    }

    pub fn max_rel_err(&self) -> f64 {
        self.results
            .iter()
            .map(|r| r.report.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn coords_checked(&self) -> usize {
        self.results.iter().map(|r| r.report.coords_checked).sum()
    }

    /// The (seed, block) with the largest observed error, if any ran.
    pub fn worst(&self) -> Option<&BlockResult> {
        self.results
            .iter()
            .max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err))
    }
}

type BlockFn = fn(u64) -> Result<GradCheckReport>;

/// Every block in the battery, in run order.
pub const BLOCKS: &[(&str, BlockFn)] = &[
    ("image_encoder", check_image_encoder),
    ("text_encoder", check_text_encoder),
    ("jrm", check_jrm),
    ("cam", check_cam),
    ("gtm", check_gtm),
    ("rcm", check_rcm),
    ("router_msr", check_router_msr),
    ("router_sr", check_router_sr),
    ("bbc_loss", check_bbc_loss),
    ("consistency_loss", check_consistency_loss),
    ("path_distillation_loss", check_path_distillation_loss),
    ("composite_objective", check_composite_objective),
];

/// Runs the full battery: every block under every seed.
pub fn gradcheck_battery(seeds: &[u64]) -> Result<BatteryReport> {
    let mut results = Vec::with_capacity(seeds.len() * BLOCKS.len());
    for &seed in seeds {
        for (name, f) in BLOCKS {
            results.push(BlockResult {
                seed,
                block: name,
                report: f(seed)?,
            });
        }
    }
    Ok(BatteryReport {
        results,
        h: BATTERY_H,
        tol: BATTERY_TOL,
    })
}

/// Deterministic per-(seed, block) RNG, decorrelated from the data streams.
fn block_rng(seed: u64, block: u64) -> StdRng {
    StdRng::seed_from_u64(derive_seed(seed, 0x6b63_6568_u64, block))
}

fn rand_tensor(rng: &mut StdRng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

fn rand_image(rng: &mut StdRng) -> RawImage {
    let data = (0..GRID_H * GRID_W * C_IN)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    RawImage::new(GRID_H, GRID_W, C_IN, data).expect("dimensions agree by construction")
}

fn check_image_encoder(seed: u64) -> Result<GradCheckReport> {
    let mut rng = block_rng(seed, 0);
    let mut ps = ParamSet::<f64>::new();
    let enc = ImageEncoderParams::init(&mut ps, "img", C_IN, K, D, &mut rng);
    let img = rand_image(&mut rng);
    let probe_pos = rand_tensor(&mut rng, vec![K, D]);
    let probe_vec = rand_tensor(&mut rng, vec![D]);
    finite_diff_check(
        &mut ps,
        move |tape, ps| {
            let positions = enc.encode_image(tape, ps, &img)?;
            let pooled = enc.encode_target(tape, ps, &img)?;
            let a = positions.mul(tape.constant(probe_pos.clone()))?.sum_all()?;
            let b = pooled.mul(tape.constant(probe_vec.clone()))?.sum_all()?;
            a.add(b)
        },
        BATTERY_H,
        BATTERY_TOL,
    )
}

fn check_text_encoder(seed: u64) -> Result<GradCheckReport> {
    let mut rng = block_rng(seed, 1);
    let mut ps = ParamSet::<f64>::new();
    let enc = TextEncoderParams::init(&mut ps, "txt", VOCAB, D, &mut rng);
    let tokens: Vec<usize> = (0..WORDS).map(|_| rng.gen_range(0..VOCAB)).collect();
    let probe_words = rand_tensor(&mut rng, vec![WORDS, D]);
    let probe_sent = rand_tensor(&mut rng, vec![D]);
    finite_diff_check(
        &mut ps,
        move |tape, ps| {
            let (t_w, t_s) = enc.encode_text(tape, ps, &tokens)?;
            let a = t_w.mul(tape.constant(probe_words.clone()))?.sum_all()?;
            let b = t_s.mul(tape.constant(probe_sent.clone()))?.sum_all()?;
            a.add(b)
        },
        BATTERY_H,
        BATTERY_TOL,
    )
}

fn check_jrm(seed: u64) -> Result<GradCheckReport> {
    let mut rng = block_rng(seed, 2);
    let mut ps = ParamSet::<f64>::new();
    let module = JrmParams::init(&mut ps, "jrm", D, HEADS, &mut rng)?;
    let x = ps.add("x", rand_tensor(&mut rng, vec![K, D]));
    let t_s = ps.add("t_s", rand_tensor(&mut rng, vec![D]));
    let probe = rand_tensor(&mut rng, vec![K, D]);
    finite_diff_check(
        &mut ps,
        move |tape, ps| {
            let y = module.apply(tape, ps, tape.param(ps, x), tape.param(ps, t_s))?;
            y.mul(tape.constant(probe.clone()))?.sum_all()
        },
        BATTERY_H,
        BATTERY_TOL,
    )
}

fn check_cam(seed: u64) -> Result<GradCheckReport> {
    let mut rng = block_rng(seed, 3);
    let mut ps = ParamSet::<f64>::new();
    let module = CamParams::init(&mut ps, "cam", D, HEADS, &mut rng)?;
    let x = ps.add("x", rand_tensor(&mut rng, vec![K, D]));
    let t_w = ps.add("t_w", rand_tensor(&mut rng, vec![WORDS, D]));
    let probe = rand_tensor(&mut rng, vec![K, D]);
    finite_diff_check(
        &mut ps,
        move |tape, ps| {
            let y = module.apply(tape, ps, tape.param(ps, x), tape.param(ps, t_w))?;
            y.mul(tape.constant(probe.clone()))?.sum_all()
        },
        BATTERY_H,
        BATTERY_TOL,
    )
}

fn check_gtm(seed: u64) -> Result<GradCheckReport> {
    let mut rng = block_rng(seed, 4);
    let mut ps = ParamSet::<f64>::new();
    let module = GtmParams::init(&mut ps, "gtm", D, &mut rng);
    let x = ps.add("x", rand_tensor(&mut rng, vec![K, D]));
    let t_s = ps.add("t_s", rand_tensor(&mut rng, vec![D]));
    let probe = rand_tensor(&mut rng, vec![K, D]);
    finite_diff_check(
        &mut ps,
        move |tape, ps| {
            let y = module.apply(tape, ps, tape.param(ps, x), tape.param(ps, t_s))?;
            y.mul(tape.constant(probe.clone()))?.sum_all()
        },
        BATTERY_H,
        BATTERY_TOL,
    )
}

fn check_rcm(seed: u64) -> Result<GradCheckReport> {
    let mut rng = block_rng(seed, 5);
    let mut ps = ParamSet::<f64>::new();
    let module = RcmParams::init(&mut ps, "rcm", D);
    let x = ps.add("x", rand_tensor(&mut rng, vec![K, D]));
    let probe = rand_tensor(&mut rng, vec![K, D]);
    finite_diff_check(
        &mut ps,
        move |tape, ps| {
            let y = module.apply(tape, ps, tape.param(ps, x))?;
            y.mul(tape.constant(probe.clone()))?.sum_all()
        },
        BATTERY_H,
        BATTERY_TOL,
    )
}

fn check_router(seed: u64, block: u64, kind: RouterKind) -> Result<GradCheckReport> {
    let mut rng = block_rng(seed, block);
    let mut ps = ParamSet::<f64>::new();
    let site = RouterSiteParams::init(kind, &mut ps, "route", D, &mut rng);
    let o_pooled = ps.add("o_pooled", rand_tensor(&mut rng, vec![D]));
    let t_s = ps.add("t_s", rand_tensor(&mut rng, vec![D]));
    let probe = rand_tensor(&mut rng, vec![4]);
    let tau_r = 0.7;
    finite_diff_check(
        &mut ps,
        move |tape, ps| {
            let logits =
                site.route_logits(tape, ps, tape.param(ps, o_pooled), tape.param(ps, t_s))?;
            // Push through the temperature softmax the network applies, so
            // the normalized routing path is what gets differentiated.
            let p = logits.scale(1.0 / tau_r)?.softmax(0)?;
            p.mul(tape.constant(probe.clone()))?.sum_all()
        },
        BATTERY_H,
        BATTERY_TOL,
    )
}

fn check_router_msr(seed: u64) -> Result<GradCheckReport> {
    check_router(seed, 6, RouterKind::Msr)
}

fn check_router_sr(seed: u64) -> Result<GradCheckReport> {
    check_router(seed, 7, RouterKind::Sr)
}

fn check_bbc_loss(seed: u64) -> Result<GradCheckReport> {
    let mut rng = block_rng(seed, 8);
    let mut ps = ParamSet::<f64>::new();
    let f_q = ps.add("f_q", rand_tensor(&mut rng, vec![BATCH, D]));
    let f_t = ps.add("f_t", rand_tensor(&mut rng, vec![BATCH, D]));
    finite_diff_check(
        &mut ps,
        move |tape, ps| bbc_loss(tape, tape.param(ps, f_q), tape.param(ps, f_t), 5.0),
        BATTERY_H,
        BATTERY_TOL,
    )
}

fn check_consistency_loss(seed: u64) -> Result<GradCheckReport> {
    let mut rng = block_rng(seed, 9);
    let mut ps = ParamSet::<f64>::new();
    let f_q = ps.add("f_q", rand_tensor(&mut rng, vec![BATCH, D]));
    let f_t = ps.add("f_t", rand_tensor(&mut rng, vec![BATCH, D]));
    let f_in = ps.add("f_in", rand_tensor(&mut rng, vec![BATCH, D]));
    finite_diff_check(
        &mut ps,
        move |tape, ps| {
            consistency_loss(
                tape,
                tape.param(ps, f_q),
                tape.param(ps, f_t),
                tape.param(ps, f_in),
            )
        },
        BATTERY_H,
        BATTERY_TOL,
    )
}

fn check_path_distillation_loss(seed: u64) -> Result<GradCheckReport> {
    let mut rng = block_rng(seed, 10);
    let mut ps = ParamSet::<f64>::new();
    let sites_per_query = 3;
    let site_width = 4;
    let mut ids = Vec::new();
    for q in 0..BATCH {
        for s in 0..sites_per_query {
            ids.push(ps.add(
                &format!("q{q}_site{s}"),
                rand_tensor(&mut rng, vec![site_width]),
            ));
        }
    }
    // Query 0 has a teacher; query 1 is masked and must contribute zero
    // gradient, which the finite differences confirm.
    let teacher: Vec<Vec<f64>> = (0..sites_per_query)
        .map(|_| (0..site_width).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let teacher_flat: Vec<f64> = teacher.into_iter().flatten().collect();
    finite_diff_check(
        &mut ps,
        move |tape, ps| {
            let per_query: Vec<Vec<_>> = (0..BATCH)
                .map(|q| {
                    (0..sites_per_query)
                        .map(|s| tape.param(ps, ids[q * sites_per_query + s]))
                        .collect()
                })
                .collect();
            let teachers: Vec<Option<&[f64]>> = vec![Some(&teacher_flat[..]), None];
            spd_loss(tape, &per_query, &teachers, 2.0)
        },
        BATTERY_H,
        BATTERY_TOL,
    )
}

fn check_composite_objective(seed: u64) -> Result<GradCheckReport> {
    let mut rng = block_rng(seed, 11);
    let cfg = ModelConfig {
        net: NetConfig {
            d: D,
            head_count: HEADS,
            layer_count: LAYERS,
            tau_r: 1.0,
            router: RouterKind::Msr,
            active: [true; 4],
        },
        grid_h: GRID_H,
        grid_w: GRID_W,
        c_in: C_IN,
        vocab_size: VOCAB,
    };
    let model = Model::<f64>::init(cfg, seed)?;
    let image_enc = model.image_enc.clone();
    let text_enc = model.text_enc.clone();
    let net = model.net.clone();
    let mut ps = model.ps;

    let queries: Vec<(RawImage, Vec<usize>, RawImage)> = (0..BATCH)
        .map(|_| {
            let reference = rand_image(&mut rng);
            let tokens = (0..WORDS).map(|_| rng.gen_range(0..VOCAB)).collect();
            let target = rand_image(&mut rng);
            (reference, tokens, target)
        })
        .collect();

    // Teacher path signature for query 0, captured once at the unperturbed
    // parameters so it stays constant across perturbations. Query 1 is
    // masked.
    let teacher0: Vec<f64> = {
        let tape = Tape::new();
        let (reference, tokens, _) = &queries[0];
        let x_r = image_enc.encode_image(&tape, &ps, reference)?;
        let (t_w, t_s) = text_enc.encode_text(&tape, &ps, tokens)?;
        net.forward(&tape, &ps, x_r, t_w, t_s, &RouteMode::Learned)?
            .flat_logits()
    };

    let mut coord_rng = block_rng(seed, 12);
    finite_diff_check_sampled(
        &mut ps,
        move |tape, ps| {
            let mut f_q_rows = Vec::with_capacity(BATCH);
            let mut f_in_rows = Vec::with_capacity(BATCH);
            let mut f_t_rows = Vec::with_capacity(BATCH);
            let mut site_logits = Vec::with_capacity(BATCH);
            for (reference, tokens, target) in &queries {
                let x_r = image_enc.encode_image(tape, ps, reference)?;
                let (t_w, t_s) = text_enc.encode_text(tape, ps, tokens)?;
                let out = net.forward(tape, ps, x_r, t_w, t_s, &RouteMode::Learned)?;
                site_logits.push(out.sites.iter().map(|s| s.logits).collect::<Vec<_>>());
                f_q_rows.push(out.f_q);
                f_in_rows.push(out.f_in);
                f_t_rows.push(image_enc.encode_target(tape, ps, target)?);
            }
            let f_q = tape.stack_rows(&f_q_rows)?;
            let f_in = tape.stack_rows(&f_in_rows)?;
            let f_t = tape.stack_rows(&f_t_rows)?;
            let bbc = bbc_loss(tape, f_q, f_t, 5.0)?;
            let cons = consistency_loss(tape, f_q, f_t, f_in)?;
            let teachers: Vec<Option<&[f64]>> = vec![Some(&teacher0[..]), None];
            let path = spd_loss(tape, &site_logits, &teachers, 2.0)?;
            total_loss(bbc, cons, Some(path), 0.6)
        },
        BATTERY_H,
        BATTERY_TOL,
        COMPOSITE_COORDS_PER_PARAM,
        &mut coord_rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn battery_passes_on_seed_zero() {
        let report = gradcheck_battery(&[0]).unwrap();
        assert_eq!(report.results.len(), BLOCKS.len());
        assert!(report.coords_checked() > 1000);
        for r in &report.results {
            assert!(
                r.report.pass(),
                "block {} seed {} failed: max rel err {:.3e} at {:?}",
                r.block,
                r.seed,
                r.report.max_rel_err,
                r.report.worst_blocks().first().map(|b| &b.name),
            );
        }
        assert!(report.pass());
    }

    #[test]
    fn battery_measures_nonzero_but_small_error() {
        // Central differences never agree to the last bit, so a sound check
        // reports a strictly positive error well inside tolerance.
        let report = check_jrm(0).unwrap();
        assert!(report.max_rel_err > 0.0);
        assert!(report.max_rel_err < BATTERY_TOL);
    }

    #[test]
    fn battery_is_deterministic() {
        let a = gradcheck_battery(&[1]).unwrap();
        let b = gradcheck_battery(&[1]).unwrap();
        assert_eq!(a.coords_checked(), b.coords_checked());
        let ea: Vec<f64> = a.results.iter().map(|r| r.report.max_rel_err).collect();
        let eb: Vec<f64> = b.results.iter().map(|r| r.report.max_rel_err).collect();
        assert_eq!(ea, eb);
    }

    #[test]
    fn composite_probes_subset_of_coordinates() {
        let report = check_composite_objective(0).unwrap();
        let full: usize = {
            let cfg = ModelConfig {
                net: NetConfig {
                    d: D,
                    head_count: HEADS,
                    layer_count: LAYERS,
                    tau_r: 1.0,
                    router: RouterKind::Msr,
                    active: [true; 4],
                },
                grid_h: GRID_H,
                grid_w: GRID_W,
                c_in: C_IN,
                vocab_size: VOCAB,
            };
            Model::<f64>::init(cfg, 0).unwrap().ps.total_numel()
        };
        assert!(report.coords_checked > 0);
        assert!(report.coords_checked < full);
        // Every parameter block still appears in the report.
        assert!(report.blocks.len() > 50);
    }
}

