//! End-to-end gradient check of the training objective on a toy batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Fault, GradCheck, Tensor, DEFAULT_STEP};
use crate::encoder::{FeatureSequence, Modality};
use crate::error::{Error, Result};
use crate::losses::{dual_loss, BatchPairing, LossConfig};
use crate::model::{AlignmentModel, ModelConfig};
use crate::params::BoundParams;

/// Pass threshold on the worst relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Shape of the toy problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyCheck {
    pub batch: usize,
    pub tokens: usize,
    pub d_in: usize,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for ToyCheck {
    fn default() -> Self {
        Self {
            batch: 4,
            tokens: 5,
            d_in: 6,
            d: 8,
            heads: 2,
            layers: 2,
            step: DEFAULT_STEP,
            seed: 0,
        }
    }
}

/// Worst disagreement inside one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl ToyCheck {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("gradcheck.batch", self.batch),
            ("gradcheck.tokens", self.tokens),
            ("gradcheck.d_in", self.d_in),
            ("gradcheck.d", self.d),
            ("gradcheck.heads", self.heads),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::config("gradcheck.heads", "must divide gradcheck.d"));
        }
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::config("gradcheck.step", "must be finite and > 0"));
        }
        Ok(())
    }

    /// Compares tape gradients of the total loss with central differences
    /// for every parameter, curvature and token scales included.
    pub fn run(&self, loss: &LossConfig, fault: Option<Fault>) -> Result<Vec<ParamError>> {
        self.validate()?;
        loss.validate()?;
        let cfg = ModelConfig {
            d_text: self.d_in,
            d_pc: self.d_in,
            d: self.d,
            heads: self.heads,
            layers: self.layers,
            shared_encoder: false,
            curvature_init: 1.0,
            alpha_init: None,
        };
        let (model, store) = AlignmentModel::init(cfg, self.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2);
        let mut seqs = |m: Modality| -> Result<Vec<FeatureSequence>> {
            (0..self.batch)
                .map(|_| {
                    let data = (0..self.tokens * self.d_in)
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect();
                    FeatureSequence::new(self.tokens, self.d_in, data, m)
                })
                .collect()
        };
        let texts = seqs(Modality::Text)?;
        let pcs = seqs(Modality::PointCloud)?;
        // the first two pairs share a group so the multi-positive path runs
        let groups: Vec<usize> = (0..self.batch).map(|i| i.saturating_sub(1)).collect();
        let pairing = BatchPairing::from_groups(&groups, &groups)?;
        let text_refs: Vec<&FeatureSequence> = texts.iter().collect();
        let pc_refs: Vec<&FeatureSequence> = pcs.iter().collect();
        let inputs: Vec<Tensor> = store.iter().map(|(_, _, t)| t.clone()).collect();
        let check = GradCheck { step: self.step, fault };
        let report = check.run(&inputs, |_, vars| {
            let p = BoundParams::from_vars(vars.to_vec());
            let curv = model.diff_curvature(&p)?;
            let ht = model.roots(&p, &curv, &text_refs, Modality::Text)?;
            let hp = model.roots(&p, &curv, &pc_refs, Modality::PointCloud)?;
            Ok(dual_loss(ht, hp, &curv, &pairing, loss)?.total)
        })?;
        Ok(store
            .iter()
            .zip(report.inputs)
            .map(|((_, name, _), r)| ParamError {
                name: name.to_string(),
                max_rel_error: r.max_rel_error,
                index: r.worst_index,
                analytic: r.analytic,
                numeric: r.numeric,
            })
            .collect())
    }
}

pub fn worst(errors: &[ParamError]) -> Option<&ParamError> {
    errors.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
}
