//! The assembled multi-task network: shared encoder, segmentation head with
//! global reasoning, and the interaction head.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BoxFeatureLayer, Encoder, FeaturePyramid};
use crate::glore::{GisfSource, InjectionConfig, GISF_DIM};
use crate::labels::{NUM_INTERACTIONS, NUM_SEG_CLASSES};
use crate::nn::Mode;
use crate::params::{Init, ParamStore};
use crate::scenegraph::{Annotation, EdgeMode, GraphBundle, SceneGraphConfig, SceneGraphHead};
use crate::seghead::{SegHead, SegHeadConfig, SegOutput, SegVariant};
use crate::{Error, Result};

/// Architecture hyperparameters. Everything that changes parameter shapes
/// lives here and is stored with checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: SegVariant,
    pub edge_mode: EdgeMode,
    /// Inject pooled scene-graph edge features into the bottleneck latent
    /// space.
    pub sgfseg: bool,
    pub decoder_width: usize,
    pub dropout: f64,
    pub nodes: usize,
    pub latent_c5: usize,
    pub gisf_source: GisfSource,
    pub box_layer: BoxFeatureLayer,
    pub semantic_dim: usize,
    pub fused_dim: usize,
    pub readout_hidden: usize,
    pub trainable_semantics: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: SegVariant::MSLRGR,
            edge_mode: EdgeMode::Gisf,
            sgfseg: false,
            decoder_width: 64,
            dropout: 0.1,
            nodes: 16,
            latent_c5: 128,
            gisf_source: GisfSource::Reasoned,
            box_layer: BoxFeatureLayer::C5,
            semantic_dim: 64,
            fused_dim: 256,
            readout_hidden: 256,
            trainable_semantics: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn scene_graph(&self) -> SceneGraphConfig {
        SceneGraphConfig {
            visual_dim: self.box_layer.width(),
            semantic_dim: self.semantic_dim,
            fused_dim: self.fused_dim,
            hidden: self.readout_hidden,
            classes: NUM_INTERACTIONS,
            edge_mode: self.edge_mode,
            extra_dim: GISF_DIM,
            penultimate_dim: self.decoder_width,
            trainable_semantics: self.trainable_semantics,
        }
    }

    pub fn seg_head(&self) -> SegHeadConfig {
        SegHeadConfig {
            variant: self.variant,
            classes: NUM_SEG_CLASSES,
            decoder_width: self.decoder_width,
            dropout: self.dropout,
            nodes: self.nodes,
            latent_c5: self.latent_c5,
            gisf_source: self.gisf_source,
            injection: self.sgfseg.then(|| InjectionConfig {
                edge_dim: self.scene_graph().edge_dim(),
                width: GISF_DIM,
            }),
        }
    }
}

/// What a forward pass should compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tasks {
    pub segmentation: bool,
    pub interactions: bool,
}

impl Tasks {
    pub const BOTH: Tasks = Tasks {
        segmentation: true,
        interactions: true,
    };
    pub const SEGMENTATION: Tasks = Tasks {
        segmentation: true,
        interactions: false,
    };
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub pyramid: FeaturePyramid,
    pub seg: SegOutput,
    /// Per-frame E×13 interaction logits (empty when not requested).
    pub interactions: Vec<Tensor>,
    pub graphs: Vec<GraphBundle>,
}

/// Frame-level inputs of the interaction head that only depend on the
/// encoder and segmentation parameters; cached while those are frozen.
#[derive(Debug, Clone)]
pub struct FrozenFrameFeatures {
    pub visual: Tensor,
    pub gisf: Tensor,
    pub penultimate: Tensor,
}

#[derive(Debug)]
pub struct MultiTaskModel {
    config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    seg: SegHead,
    sg: SceneGraphHead,
}

impl MultiTaskModel {
    pub fn new(config: ModelConfig, dtype: DType) -> Result<Self> {
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!(
                "dropout {} is outside [0, 1)",
                config.dropout
            )));
        }
        let mut store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut root = Init::new(&mut store, &mut rng, "");
        let encoder = Encoder::new(&mut root.sub("encoder"))?;
        let seg = SegHead::new(&mut root, config.seg_head())?;
        let sg = SceneGraphHead::new(&mut root, config.scene_graph())?;
        Ok(Self {
            config,
            store,
            encoder,
            seg,
            sg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn seg_head(&self) -> &SegHead {
        &self.seg
    }

    pub fn scene_graph(&self) -> &SceneGraphHead {
        &self.sg
    }

    /// Runs the network on a B×3×H×W batch whose frames carry
    /// `annotations` (one per image; may be empty when interactions are not
    /// requested and injection is off).
    pub fn forward(
        &self,
        images: &Tensor,
        annotations: &[&Annotation],
        tasks: Tasks,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        let (b, _, h, w) = images.dims4()?;
        let need_graphs = tasks.interactions || self.config.sgfseg;
        if need_graphs && annotations.len() != b {
            return Err(Error::invalid(format!(
                "{b} images but {} annotations",
                annotations.len()
            )));
        }
        let images = images.to_dtype(self.dtype())?;
        let pyramid = self.encoder.encode(&images, mode)?;
        let mut graphs = Vec::new();
        if need_graphs {
            for (i, a) in annotations.iter().enumerate() {
                let visual = self.encoder.extract_box_features(
                    &images.get(i)?,
                    &a.boxes,
                    self.config.box_layer,
                )?;
                graphs.push(self.sg.graphs(&visual, a)?);
            }
        }
        let injection = if self.config.sgfseg {
            let unit = self.seg.bottleneck();
            let rows = graphs
                .iter()
                .map(|g| unit.summarize_edges(&g.edge_features))
                .collect::<Result<Vec<_>>>()?;
            Some(Tensor::stack(&rows, 0)?)
        } else {
            None
        };
        let seg = self
            .seg
            .segment(&pyramid, (h, w), injection.as_ref(), mode)?;
        let mut interactions = Vec::new();
        if tasks.interactions {
            for (i, g) in graphs.iter().enumerate() {
                let extra = self.frame_extra(&seg, i)?;
                interactions.push(self.sg.edge_readout(g, extra.as_ref())?);
            }
        }
        Ok(ForwardOutput {
            pyramid,
            seg,
            interactions,
            graphs,
        })
    }

    fn frame_extra(&self, seg: &SegOutput, i: usize) -> Result<Option<Tensor>> {
        match self.config.edge_mode {
            EdgeMode::None => Ok(None),
            EdgeMode::Gisf => self.sg.frame_extra(Some(&seg.gisf.get(i)?), None),
            EdgeMode::Pf => self.sg.frame_extra(None, Some(&seg.penultimate.get(i)?)),
        }
    }

    /// Evaluation-mode encoder/segmentation features of one frame for the
    /// interaction head. Only valid without scene-graph injection, where
    /// they do not depend on the interaction head.
    pub fn frozen_features(
        &self,
        image: &Tensor,
        annotation: &Annotation,
    ) -> Result<FrozenFrameFeatures> {
        if self.config.sgfseg {
            return Err(Error::invalid(
                "frame features depend on the interaction head when injection is on",
            ));
        }
        let image = image.to_dtype(self.dtype())?;
        let (_, h, w) = image.dims3()?;
        let visual = self
            .encoder
            .extract_box_features(&image, &annotation.boxes, self.config.box_layer)?
            .detach();
        let pyramid = self.encoder.encode(&image.unsqueeze(0)?, Mode::Eval)?;
        let seg = self.seg.segment(&pyramid, (h, w), None, Mode::Eval)?;
        Ok(FrozenFrameFeatures {
            visual,
            gisf: seg.gisf.get(0)?.detach(),
            penultimate: seg.penultimate.get(0)?.detach(),
        })
    }

    /// Interaction logits from cached frame features.
    pub fn interactions_from(
        &self,
        features: &FrozenFrameFeatures,
        annotation: &Annotation,
    ) -> Result<Tensor> {
        let g = self.sg.graphs(&features.visual, annotation)?;
        let extra = match self.config.edge_mode {
            EdgeMode::None => None,
            EdgeMode::Gisf => self.sg.frame_extra(Some(&features.gisf), None)?,
            EdgeMode::Pf => self.sg.frame_extra(None, Some(&features.penultimate))?,
        };
        self.sg.edge_readout(&g, extra.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use candle_core::Device;

    use super::*;
    use crate::geometry::NormBox;
    use crate::params::Group;

    fn annotation() -> Annotation {
        let mut t = [0u8; NUM_INTERACTIONS];
        t[3] = 1;
        Annotation {
            boxes: vec![
                NormBox::new(0.1, 0.1, 0.8, 0.9),
                NormBox::new(0.5, 0.2, 0.9, 0.6),
            ],
            semantics: vec![0, 2],
            edges: vec![[0, 1]],
            targets: vec![t],
        }
    }

    #[test]
    fn namespaces_partition_the_model() -> Result<()> {
        let m = MultiTaskModel::new(
            ModelConfig {
                sgfseg: true,
                edge_mode: EdgeMode::Pf,
                ..Default::default()
            },
            DType::F32,
        )?;
        let p = m.store().partition();
        assert!(p.w_sh.iter().all(|n| n.starts_with("encoder.")));
        assert!(p
            .w_seg
            .iter()
            .all(|n| n.starts_with("seg.") || n.starts_with("glore.")));
        assert!(p.w_sg.iter().all(|n| n.starts_with("sg.")));
        assert!(p.w_seg.iter().any(|n| n.contains("inject")));
        assert!(p.w_sg.iter().any(|n| n.contains("pf_compress")));
        assert!(!p.w_sg.iter().any(|n| n.contains("semantic_table")));
        let total = p.w_sh.len() + p.w_seg.len() + p.w_sg.len();
        assert_eq!(total, m.store().trainable().count());
        for g in Group::ALL {
            assert!(!p.group(g).is_empty());
        }
        Ok(())
    }

    #[test]
    fn cached_features_match_the_full_forward() -> Result<()> {
        for mode in [EdgeMode::Gisf, EdgeMode::Pf, EdgeMode::None] {
            let m = MultiTaskModel::new(
                ModelConfig {
                    variant: SegVariant::GR,
                    edge_mode: mode,
                    ..Default::default()
                },
                DType::F64,
            )?;
            let image = Tensor::randn(0f64, 1.0, (3, 64, 64), &Device::Cpu)?;
            let a = annotation();
            let full = m.forward(&image.unsqueeze(0)?, &[&a], Tasks::BOTH, Mode::Eval)?;
            let cached = m.interactions_from(&m.frozen_features(&image, &a)?, &a)?;
            let d = (&full.interactions[0] - cached)?
                .abs()?
                .max_all()?
                .to_scalar::<f64>()?;
            assert!(d < 1e-12, "{mode:?}: {d}");
        }
        Ok(())
    }

    #[test]
    fn logits_and_gisf_shapes() -> Result<()> {
        let m = MultiTaskModel::new(
            ModelConfig {
                sgfseg: true,
                ..Default::default()
            },
            DType::F32,
        )?;
        let images = Tensor::randn(0f32, 1.0, (2, 3, 64, 96), &Device::Cpu)?;
        let a = annotation();
        let out = m.forward(&images, &[&a, &a], Tasks::BOTH, Mode::Eval)?;
        assert_eq!(out.seg.logits.dims(), &[2, 8, 64, 96]);
        assert_eq!(out.seg.gisf.dims(), &[2, 64]);
        assert_eq!(out.interactions.len(), 2);
        assert_eq!(out.interactions[1].dims(), &[1, 13]);
        Ok(())
    }
}
