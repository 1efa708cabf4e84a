//! Wiring of the trainable parts: vision encoder, aggregator, projectors.

use imitate_autodiff::{Graph, Tensor, Var};

use crate::config::{ObjectiveConfig, RunConfig};
use crate::encoders::{PyramidVars, VisionEncoder, STAGES};
use crate::error::{Error, Result};
use crate::hier_agg::{Aggregator, DropMasks};
use crate::objective::{total_loss, BatchLatents, LossBreakdown, Projectors};
use crate::params::{Bound, ParamStore};
use crate::rng;

#[derive(Clone, Debug)]
pub struct Model {
    pub vision: VisionEncoder,
    pub aggregator: Aggregator,
    pub projectors: Projectors,
    pub objective: ObjectiveConfig,
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Self {
        let widths = &cfg.encoders.widths;
        Self {
            vision: VisionEncoder::new(widths),
            aggregator: Aggregator::from_config(cfg),
            projectors: Projectors::new(widths[STAGES - 1], cfg.encoders.text_dim, &cfg.objective),
            objective: cfg.objective.clone(),
        }
    }

    /// Fresh parameters drawn from the `init` stream of `seed`.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut r = rng::stream(seed, "init", &[]);
        let mut store = ParamStore::new();
        self.vision.init(&mut store, &mut r);
        self.aggregator.init(&mut store, &mut r);
        self.projectors.init(&mut store, &mut r);
        store
    }

    /// Whether the enabled terms touch the multi-level features at all.
    pub fn uses_aggregator(&self) -> bool {
        self.objective.terms.uses_aggregator()
    }

    /// Visual latents for a `[2B, 1, H, W]` stack holding view 1 then view 2.
    pub fn visual_latents(&self, g: &mut Graph, p: &Bound, views: Var, masks: &[DropMasks; 2]) -> Result<BatchLatents> {
        let n = g.shape(views)[0];
        if n % 2 != 0 {
            return Err(Error::BatchMismatch(n / 2, n - n / 2));
        }
        let b = n / 2;
        let pyr = self.vision.forward(g, p, views)?;
        let mut out = BatchLatents::default();
        let vh1 = g.slice(pyr.high_level, 0, 0, b)?;
        let vh2 = g.slice(pyr.high_level, 0, b, b)?;
        out.z_vh1 = Some(vh1);
        out.z_vh2 = Some(vh2);
        if self.uses_aggregator() {
            out.z_vm1 = Some(self.multi_level(g, p, &pyr, 0, b, &masks[0])?);
            out.z_vm2 = Some(self.multi_level(g, p, &pyr, b, b, &masks[1])?);
        }
        Ok(out)
    }

    fn multi_level(
        &self,
        g: &mut Graph,
        p: &Bound,
        pyr: &PyramidVars,
        start: usize,
        len: usize,
        mask: &DropMasks,
    ) -> Result<Var> {
        let mut stages = Vec::with_capacity(STAGES);
        for &s in &pyr.stages {
            stages.push(g.slice(s, 0, start, len)?);
        }
        let stages: [Var; STAGES] = stages.try_into().expect("four stages");
        Ok(self.aggregator.forward(g, p, &stages, mask)?.z_vm)
    }

    /// Six-term objective for one batch. `tf` and `ti` are `[B, d_t]`.
    pub fn loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        views: Var,
        tf: &Tensor,
        ti: &Tensor,
        masks: &[DropMasks; 2],
    ) -> Result<LossBreakdown> {
        let mut latents = self.visual_latents(g, p, views, masks)?;
        latents.z_tf = Some(g.constant(tf.clone()));
        latents.z_ti = Some(g.constant(ti.clone()));
        total_loss(g, p, &latents, &self.projectors, &self.objective)
    }
}
