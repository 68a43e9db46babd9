//! Network assembly: backbone, fusion, refinement, and decoding, including
//! the ablation variants in which individual stages are replaced by
//! minimal-capacity stand-ins so output shapes stay identical across
//! variants.

use std::fs;
use std::path::Path;

use burn::module::{Ignored, Module, ModuleVisitor, Param};
use burn::optim::GradientsParams;
use burn::record::{FullPrecisionSettings, NamedMpkFileRecorder};
use burn::tensor::activation::sigmoid;
use burn::tensor::backend::{AutodiffBackend, Backend};
use burn::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::affm::{Affm, GuidanceMap, ProjectHigh};
use crate::backbone::{Backbone, BackboneSpec, FeaturePyramid};
use crate::blocks::{resample_to, ConvBlock, PlainConv};
use crate::cfdm::{Cfdm, DecoderConfig};
use crate::error::{Error, Result};
use crate::frm::{Frm, Level, REFINED_CHANNELS};

/// Which stages are active. The letters follow the ablation table:
/// A = Base, B = Base+CFDM, C = Base+AFFM+FRM, D = Base+FRM+CFDM, E = Full.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    Base,
    BaseCfdm,
    BaseAffmFrm,
    BaseFrmCfdm,
    Full,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Base,
        AblationVariant::BaseCfdm,
        AblationVariant::BaseAffmFrm,
        AblationVariant::BaseFrmCfdm,
        AblationVariant::Full,
    ];

    pub fn has_affm(self) -> bool {
        matches!(self, AblationVariant::BaseAffmFrm | AblationVariant::Full)
    }

    pub fn has_frm(self) -> bool {
        matches!(
            self,
            AblationVariant::BaseAffmFrm | AblationVariant::BaseFrmCfdm | AblationVariant::Full
        )
    }

    pub fn has_cfdm(self) -> bool {
        matches!(
            self,
            AblationVariant::BaseCfdm | AblationVariant::BaseFrmCfdm | AblationVariant::Full
        )
    }
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            AblationVariant::Base => "base",
            AblationVariant::BaseCfdm => "base+cfdm",
            AblationVariant::BaseAffmFrm => "base+affm+frm",
            AblationVariant::BaseFrmCfdm => "base+frm+cfdm",
            AblationVariant::Full => "full",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" | "a" => Ok(AblationVariant::Base),
            "base+cfdm" | "b" => Ok(AblationVariant::BaseCfdm),
            "base+affm+frm" | "c" => Ok(AblationVariant::BaseAffmFrm),
            "base+frm+cfdm" | "d" => Ok(AblationVariant::BaseFrmCfdm),
            "full" | "base+affm+frm+cfdm" | "e" => Ok(AblationVariant::Full),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

/// Everything needed to rebuild a network skeleton before loading weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub variant: AblationVariant,
    pub backbone: BackboneSpec,
    pub decoder: DecoderConfig,
}

impl NetworkConfig {
    pub fn new(variant: AblationVariant, backbone: BackboneSpec, decoder: DecoderConfig) -> Self {
        Self {
            variant,
            backbone,
            decoder,
        }
    }

    /// Desk-scale default: full variant on the small stub backbone.
    pub fn desk() -> Self {
        Self::new(
            AblationVariant::Full,
            BackboneSpec::stub(),
            DecoderConfig::default(),
        )
    }
}

/// The four supervised logit maps and the guidance map.
///
/// `o1..o3` sit at strides 4/8/16, `o4` at stride 8; in variants with
/// adaptive fusion enabled, `ggi` is exactly `sigmoid(o4)`.
#[derive(Debug, Clone)]
pub struct NetworkOutputs<B: Backend> {
    pub o1: Tensor<B, 4>,
    pub o2: Tensor<B, 4>,
    pub o3: Tensor<B, 4>,
    pub o4: Tensor<B, 4>,
    pub ggi: GuidanceMap<B>,
}

impl<B: Backend> NetworkOutputs<B> {
    pub fn logit_maps(&self) -> [&Tensor<B, 4>; 4] {
        [&self.o1, &self.o2, &self.o3, &self.o4]
    }
}

/// The assembled network. Stand-in layers exist only in the variants that
/// need them, so every parameter of a constructed model participates in its
/// forward pass.
#[derive(Module, Debug)]
pub struct Pfrnet<B: Backend> {
    backbone: Backbone<B>,
    project_high: ProjectHigh<B>,
    affm: Option<Affm<B>>,
    o4_standin: Option<PlainConv<B>>,
    frm: Option<Frm<B>>,
    frm_standin: Option<Vec<ConvBlock<B>>>,
    cfdm: Option<Cfdm<B>>,
    o_standin: Option<Vec<PlainConv<B>>>,
    config: Ignored<NetworkConfig>,
}

impl<B: Backend> Pfrnet<B> {
    pub fn new(config: &NetworkConfig, device: &B::Device) -> Result<Self> {
        config.backbone.validate()?;
        let channels = config.backbone.channels;
        let variant = config.variant;

        let backbone = Backbone::from_spec(&config.backbone, device)?;
        let project_high = ProjectHigh::new(channels, device)?;

        let affm = variant
            .has_affm()
            .then(|| Affm::new(channels, device))
            .transpose()?;
        let o4_standin = (!variant.has_affm())
            .then(|| PlainConv::new(crate::affm::FUSED_CHANNELS, 1, 1, 1, 1, device))
            .transpose()?;

        let frm = variant
            .has_frm()
            .then(|| Frm::new(channels, device))
            .transpose()?;
        let frm_standin = if variant.has_frm() {
            None
        } else {
            let convs = channels[..3]
                .iter()
                .map(|&c| ConvBlock::new(c, REFINED_CHANNELS, 3, device))
                .collect::<Result<Vec<_>>>()?;
            Some(convs)
        };

        let cfdm = variant
            .has_cfdm()
            .then(|| Cfdm::new(config.decoder, device))
            .transpose()?;
        let o_standin = if variant.has_cfdm() {
            None
        } else {
            let convs = (0..3)
                .map(|_| PlainConv::new(REFINED_CHANNELS, 1, 1, 1, 1, device))
                .collect::<Result<Vec<_>>>()?;
            Some(convs)
        };

        Ok(Self {
            backbone,
            project_high,
            affm,
            o4_standin,
            frm,
            frm_standin,
            cfdm,
            o_standin,
            config: Ignored(config.clone()),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config.0
    }

    pub fn variant(&self) -> AblationVariant {
        self.config.0.variant
    }

    fn fused_guidance(
        &self,
        pyramid: &FeaturePyramid<B>,
    ) -> Result<(Tensor<B, 4>, GuidanceMap<B>)> {
        let (x1, x2, x3) = self.project_high.forward(pyramid)?;
        match (&self.affm, &self.o4_standin) {
            (Some(affm), None) => affm.forward(&pyramid.f1, &x1, &x2, &x3),
            (None, Some(standin)) => {
                let x_h = Tensor::cat(vec![x1, x2, x3], 1);
                let o4 = standin.forward(x_h);
                let [b, _, h, w] = o4.dims();
                let ggi = GuidanceMap::constant(0.5, [b, 1, h, w], &o4.device());
                Ok((o4, ggi))
            }
            _ => unreachable!("construction pairs exactly one fusion path"),
        }
    }

    fn refined(
        &self,
        pyramid: &FeaturePyramid<B>,
        ggi: &GuidanceMap<B>,
    ) -> [Tensor<B, 4>; 3] {
        let fs = [&pyramid.f1, &pyramid.f2, &pyramid.f3];
        match (&self.frm, &self.frm_standin) {
            (Some(frm), None) => {
                std::array::from_fn(|i| frm.refine(fs[i].clone(), ggi, Level::ALL[i]))
            }
            (None, Some(convs)) => std::array::from_fn(|i| convs[i].forward(fs[i].clone())),
            _ => unreachable!("construction pairs exactly one refinement path"),
        }
    }

    fn decoded(
        &self,
        [rf1, rf2, rf3]: [Tensor<B, 4>; 3],
    ) -> Result<(Tensor<B, 4>, Tensor<B, 4>, Tensor<B, 4>)> {
        match (&self.cfdm, &self.o_standin) {
            (Some(cfdm), None) => cfdm.forward(rf1, rf2, rf3),
            (None, Some(convs)) => Ok((
                convs[0].forward(rf1),
                convs[1].forward(rf2),
                convs[2].forward(rf3),
            )),
            _ => unreachable!("construction pairs exactly one decoding path"),
        }
    }

    /// Full forward pass to the four logit maps plus guidance.
    pub fn forward(&self, image: Tensor<B, 4>) -> Result<NetworkOutputs<B>> {
        let pyramid = self.backbone.forward(image)?;
        let (o4, ggi) = self.fused_guidance(&pyramid)?;
        let refined = self.refined(&pyramid, &ggi);
        let (o1, o2, o3) = self.decoded(refined)?;
        Ok(NetworkOutputs {
            o1,
            o2,
            o3,
            o4,
            ggi,
        })
    }

    /// Prediction map in [0, 1] at the input resolution:
    /// `sigmoid(o1)` bilinearly resampled back to the image grid.
    pub fn predict(&self, image: Tensor<B, 4>) -> Result<Tensor<B, 4>> {
        let [_, _, h, w] = image.dims();
        let outputs = self.forward(image)?;
        Ok(resample_to(sigmoid(outputs.o1), [h, w]))
    }

    /// Writes the model weights (`model.mpk`) and the rebuild metadata
    /// (`network.json`) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let meta = serde_json::to_string_pretty(&self.config.0)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(dir.join("network.json"), meta)?;
        let recorder = NamedMpkFileRecorder::<FullPrecisionSettings>::default();
        self.clone()
            .save_file(dir.join("model"), &recorder)
            .map_err(|e| Error::Checkpoint(format!("saving model: {e}")))?;
        Ok(())
    }

    /// Rebuilds a model from a checkpoint directory written by [`save`].
    ///
    /// [`save`]: Pfrnet::save
    pub fn load(dir: &Path, device: &B::Device) -> Result<Self> {
        let meta_path = dir.join("network.json");
        let meta = fs::read_to_string(&meta_path).map_err(|e| {
            Error::Checkpoint(format!("reading {}: {e}", meta_path.display()))
        })?;
        let config: NetworkConfig =
            serde_json::from_str(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let recorder = NamedMpkFileRecorder::<FullPrecisionSettings>::default();
        let model = Self::new(&config, device)?
            .load_file(dir.join("model"), &recorder, device)
            .map_err(|e| Error::Checkpoint(format!("loading model: {e}")))?;
        Ok(model)
    }
}

struct CoverageVisitor<'a, B: AutodiffBackend> {
    grads: &'a GradientsParams,
    total: usize,
    nonzero: usize,
    _backend: std::marker::PhantomData<B>,
}

impl<'a, B: AutodiffBackend> ModuleVisitor<B> for CoverageVisitor<'a, B> {
    fn visit_float<const D: usize>(&mut self, param: &Param<Tensor<B, D>>) {
        let count = param.val().shape().num_elements();
        self.total += count;
        if let Some(grad) = self.grads.get::<B::InnerBackend, D>(param.id) {
            let nonzero: i64 = grad
                .not_equal_elem(0.0)
                .int()
                .sum()
                .into_scalar()
                .elem();
            self.nonzero += nonzero as usize;
        }
    }
}

/// Counts `(parameters_with_nonzero_gradient, total_parameters)` at scalar
/// granularity for one backward pass.
pub fn gradient_coverage<B: AutodiffBackend, M: Module<B>>(
    module: &M,
    grads: &GradientsParams,
) -> (usize, usize) {
    let mut visitor = CoverageVisitor::<B> {
        grads,
        total: 0,
        nonzero: 0,
        _backend: std::marker::PhantomData,
    };
    module.visit(&mut visitor);
    (visitor.nonzero, visitor.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use burn::backend::ndarray::NdArray;
    use burn::tensor::Distribution;

    type B = NdArray<f32>;

    fn device() -> <B as Backend>::Device {
        Default::default()
    }

    #[test]
    fn desk_forward_shapes() {
        let d = device();
        let net = Pfrnet::<B>::new(&NetworkConfig::desk(), &d).unwrap();
        let img = Tensor::random([2, 3, 64, 64], Distribution::Default, &d);
        let out = net.forward(img).unwrap();
        assert_eq!(out.o1.dims(), [2, 1, 16, 16]);
        assert_eq!(out.o2.dims(), [2, 1, 8, 8]);
        assert_eq!(out.o3.dims(), [2, 1, 4, 4]);
        assert_eq!(out.o4.dims(), [2, 1, 8, 8]);
        assert_eq!(out.ggi.values().dims(), [2, 1, 8, 8]);
    }

    #[test]
    fn all_variants_share_output_shapes() {
        let d = device();
        for variant in AblationVariant::ALL {
            let cfg = NetworkConfig::new(variant, BackboneSpec::stub(), DecoderConfig::default());
            let net = Pfrnet::<B>::new(&cfg, &d).unwrap();
            let img = Tensor::random([1, 3, 64, 64], Distribution::Default, &d);
            let out = net.forward(img).unwrap();
            assert_eq!(out.o1.dims(), [1, 1, 16, 16], "{variant}");
            assert_eq!(out.o2.dims(), [1, 1, 8, 8], "{variant}");
            assert_eq!(out.o3.dims(), [1, 1, 4, 4], "{variant}");
            assert_eq!(out.o4.dims(), [1, 1, 8, 8], "{variant}");
        }
    }

    #[test]
    fn base_variant_guidance_is_constant_half() {
        let d = device();
        let cfg = NetworkConfig::new(
            AblationVariant::Base,
            BackboneSpec::stub(),
            DecoderConfig::default(),
        );
        let net = Pfrnet::<B>::new(&cfg, &d).unwrap();
        let img = Tensor::random([1, 3, 64, 64], Distribution::Default, &d);
        let out = net.forward(img).unwrap();
        let dev: f32 = (out.ggi.values().clone() - 0.5).abs().max().into_scalar();
        assert_eq!(dev, 0.0);
    }

    #[test]
    fn predict_is_in_unit_range_at_input_resolution() {
        let d = device();
        let net = Pfrnet::<B>::new(&NetworkConfig::desk(), &d).unwrap();
        let img = Tensor::random([1, 3, 64, 64], Distribution::Default, &d);
        let pred = net.predict(img).unwrap();
        assert_eq!(pred.dims(), [1, 1, 64, 64]);
        let min: f32 = pred.clone().min().into_scalar();
        let max: f32 = pred.max().into_scalar();
        assert!((0.0..=1.0).contains(&min) && (0.0..=1.0).contains(&max));
    }

    #[test]
    fn predict_is_deterministic_in_eval_mode() {
        let d = device();
        let net = Pfrnet::<B>::new(&NetworkConfig::desk(), &d).unwrap();
        let img = Tensor::<B, 4>::ones([1, 3, 64, 64], &d) * 0.3;
        let a = net.predict(img.clone()).unwrap().to_data().to_vec::<f32>().unwrap();
        let b = net.predict(img).unwrap().to_data().to_vec::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn outputs_stay_finite_across_seeds() {
        let d = device();
        for seed in 0..20u64 {
            <B as Backend>::seed(&d, seed);
            let net = Pfrnet::<B>::new(&NetworkConfig::desk(), &d).unwrap();
            let img = Tensor::random([1, 3, 32, 32], Distribution::Normal(0.0, 2.0), &d);
            let out = net.forward(img).unwrap();
            for map in out.logit_maps() {
                assert!(
                    map.clone().is_finite().all().into_scalar(),
                    "non-finite output at seed {seed}"
                );
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let d = device();
        let net = Pfrnet::<B>::new(&NetworkConfig::desk(), &d).unwrap();
        let dir = tempfile::tempdir().unwrap();
        net.save(dir.path()).unwrap();
        let restored = Pfrnet::<B>::load(dir.path(), &d).unwrap();
        assert_eq!(restored.config(), net.config());
        let img = Tensor::<B, 4>::ones([1, 3, 64, 64], &d) * 0.7;
        let a = net.predict(img.clone()).unwrap();
        let b = restored.predict(img).unwrap();
        let diff: f32 = (a - b).abs().max().into_scalar();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn variant_parsing_round_trips() {
        for v in AblationVariant::ALL {
            let parsed: AblationVariant = v.to_string().parse().unwrap();
            assert_eq!(parsed, v);
        }
        assert!("nonsense".parse::<AblationVariant>().is_err());
    }
}
