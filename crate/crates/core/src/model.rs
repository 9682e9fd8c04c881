//! Frozen backbone plus learnable pyramid network.

use candle_core::Tensor;

use crate::backbone::{Backbone, FeaturePyramid};
use crate::episodes::Episode;
use crate::error::{shape_err, Result};
use crate::evaluation::Segmenter;
use crate::mask::BinaryMask;
use crate::network::{total_loss, LossBreakdown, NetworkOutput, TbtNet};
use crate::ttl::Mode;

pub struct TbtModel {
    backbone: Backbone,
    net: TbtNet,
}

impl TbtModel {
    pub fn new(backbone: Backbone, net: TbtNet) -> Result<Self> {
        if backbone.block_counts() != net.config().block_counts {
            return Err(shape_err!(
                "backbone {} has blocks {:?} but the network expects {:?}",
                backbone.variant(),
                backbone.block_counts(),
                net.config().block_counts
            ));
        }
        Ok(Self { backbone, net })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn net(&self) -> &TbtNet {
        &self.net
    }

    /// Learnable parameters only; the backbone contributes none.
    pub fn learnable_param_count(&self) -> usize {
        self.net.learnable_param_count() + self.backbone.learnable_param_count()
    }

    pub fn pyramid(&self, image: &Tensor) -> Result<FeaturePyramid> {
        self.backbone.extract_pyramid(image)
    }

    pub fn forward(
        &self,
        query: &Tensor,
        support: &Tensor,
        support_mask: &BinaryMask,
        mode: &mut Mode<'_>,
    ) -> Result<NetworkOutput> {
        let q = self.pyramid(query)?;
        let s = self.pyramid(support)?;
        self.net.forward(&q, &s, support_mask, mode)
    }

    /// One-shot loss on the first support of an episode.
    pub fn episode_loss(
        &self,
        episode: &Episode,
        alpha: f64,
        mode: &mut Mode<'_>,
    ) -> Result<LossBreakdown> {
        let support = &episode.supports[0];
        let out = self.forward(&episode.query.image, &support.image, &support.mask, mode)?;
        total_loss(&out.logit_maps(), &episode.query.mask, alpha)
    }
}

impl Segmenter for TbtModel {
    fn support_logits(&self, episode: &Episode) -> Result<Vec<Tensor>> {
        let q = self.pyramid(&episode.query.image)?;
        episode
            .supports
            .iter()
            .map(|s| {
                let sp = self.pyramid(&s.image)?;
                Ok(self.net.forward(&q, &sp, &s.mask, &mut Mode::Eval)?.final_logits)
            })
            .collect()
    }
}
