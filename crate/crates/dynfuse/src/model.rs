//! The full retrieval model: both encoders plus the routed fusion network,
//! owning one parameter store, with the per-query and per-target forward
//! passes used by training and evaluation.

use crate::data::{derive_seed, STREAM_PARAM_INIT};
use crate::encoders::{ImageEncoderParams, RawImage, TextEncoderParams};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::router::{FusionNetParams, NetConfig, QueryForward, RouteMode};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

/// Architecture description: fusion-network shape plus the encoder
/// interfaces (grid geometry, input channels, and vocabulary size).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub net: NetConfig,
    pub grid_h: usize,
    pub grid_w: usize,
    pub c_in: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::Config("grid dimensions must be positive".into()));
        }
        if self.c_in == 0 {
            return Err(Error::Config("c_in must be positive".into()));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config(format!(
                "vocabulary of {} cannot express any modification",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Model parameters and their layout. The parameter store is owned here;
/// forward passes borrow it together with a caller-provided tape.
#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub ps: ParamSet<S>,
    pub image_enc: ImageEncoderParams,
    pub text_enc: TextEncoderParams,
    pub net: FusionNetParams,
}

impl<S: Scalar> Model<S> {
    /// Fresh parameters, deterministic under `seed`.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let mut rng = StdRng::seed_from_u64(derive_seed(seed, STREAM_PARAM_INIT, 0));
        let image_enc = ImageEncoderParams::init(
            &mut ps,
            "img",
            cfg.c_in,
            cfg.grid_h * cfg.grid_w,
            cfg.net.d,
            &mut rng,
        );
        let text_enc =
            TextEncoderParams::init(&mut ps, "txt", cfg.vocab_size, cfg.net.d, &mut rng);
        let net = FusionNetParams::init(cfg.net.clone(), &mut ps, &mut rng)?;
        Ok(Model { cfg, ps, image_enc, text_enc, net })
    }

    /// Rebuild the parameter *layout* for a known config, then overwrite all
    /// values from another source (checkpoint loading). Uses a fixed seed;
    /// every value is expected to be replaced.
    pub fn with_layout(cfg: ModelConfig) -> Result<Self> {
        Model::init(cfg, 0)
    }

    /// Full composed forward for one query: encode, then route.
    pub fn query_forward<'t>(
        &self,
        tape: &'t Tape<S>,
        reference: &RawImage,
        tokens: &[usize],
        mode: &RouteMode<'_>,
    ) -> Result<QueryForward<'t, S>> {
        let x_r = self.image_enc.encode_image(tape, &self.ps, reference)?;
        let (t_w, t_s) = self.text_enc.encode_text(tape, &self.ps, tokens)?;
        self.net.forward(tape, &self.ps, x_r, t_w, t_s, mode)
    }

    /// Target-side feature: the shared image encoder pooled over positions.
    pub fn target_feature<'t>(
        &self,
        tape: &'t Tape<S>,
        target: &RawImage,
    ) -> Result<Var<'t, S>> {
        self.image_enc.encode_target(tape, &self.ps, target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::MODULE_COUNT;
    use crate::router::RouterKind;

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            net: NetConfig {
                d: 8,
                head_count: 2,
                layer_count: 3,
                tau_r: 1.0,
                router: RouterKind::Msr,
                active: [true; MODULE_COUNT],
            },
            grid_h: 2,
            grid_w: 2,
            c_in: 4,
            vocab_size: 22,
        }
    }

    #[test]
    fn init_is_deterministic_under_seed() {
        let a = Model::<f64>::init(toy_cfg(), 42).unwrap();
        let b = Model::<f64>::init(toy_cfg(), 42).unwrap();
        assert_eq!(a.ps.total_numel(), b.ps.total_numel());
        for (id, name, t) in a.ps.iter() {
            assert_eq!(t.data(), b.ps.get(id).data(), "{name}");
        }
        let c = Model::<f64>::init(toy_cfg(), 43).unwrap();
        let differs = a
            .ps
            .iter()
            .any(|(id, _, t)| t.data() != c.ps.get(id).data());
        assert!(differs);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = toy_cfg();
        cfg.vocab_size = 2;
        assert!(matches!(Model::<f64>::init(cfg, 0), Err(Error::Config(_))));
        let mut cfg = toy_cfg();
        cfg.c_in = 0;
        assert!(matches!(Model::<f64>::init(cfg, 0), Err(Error::Config(_))));
        let mut cfg = toy_cfg();
        cfg.grid_w = 0;
        assert!(matches!(Model::<f64>::init(cfg, 0), Err(Error::Config(_))));
        let mut cfg = toy_cfg();
        cfg.net.active = [false; MODULE_COUNT];
        assert!(matches!(Model::<f64>::init(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn query_and_target_forward_have_contract_shapes() {
        let model = Model::<f64>::init(toy_cfg(), 7).unwrap();
        let img = RawImage::new(2, 2, 4, vec![0.25; 16]).unwrap();
        let tape = Tape::new();
        let fwd = model
            .query_forward(&tape, &img, &[0, 3, 1, 10], &RouteMode::Learned)
            .unwrap();
        assert_eq!(fwd.f_q.shape(), vec![8]);
        assert_eq!(fwd.f_in.shape(), vec![8]);
        assert_eq!(fwd.sites.len(), model.net.site_count());
        let f_t = model.target_feature(&tape, &img).unwrap();
        assert_eq!(f_t.shape(), vec![8]);
        assert!(f_t.value().is_all_finite());
    }

    #[test]
    fn channel_mismatch_is_a_config_error() {
        let model = Model::<f64>::init(toy_cfg(), 7).unwrap();
        let img = RawImage::new(2, 2, 3, vec![0.0; 12]).unwrap();
        let tape = Tape::new();
        assert!(matches!(
            model.target_feature(&tape, &img),
            Err(Error::Config(_))
        ));
    }
}
