//! Seeded mini-batch training of the alignment model.

mod checkpoint;
mod optim;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{lr_at, AdamW, OptimizerState};

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::encoder::{FeatureSequence, Modality};
use crate::error::{Error, Result};
use crate::losses::{dual_loss, BatchPairing, LossConfig};
use crate::model::{AlignmentModel, ModelConfig};
use crate::params::ParamStore;

/// Curvature range outside of which training is considered unstable.
pub const CURVATURE_WATCHDOG: (f64, f64) = (1e-3, 1e3);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub seed: u64,
    pub curvature_init: f64,
    /// Defaults to `1/sqrt(d)`.
    pub alpha_init: Option<f64>,
    pub shared_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 2e-3,
            beta1: 0.91,
            beta2: 0.9993,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            d: 64,
            heads: 4,
            layers: 2,
            seed: 0,
            curvature_init: 1.0,
            alpha_init: None,
            shared_encoder: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: &str| Err(Error::config(format!("train.{key}"), detail));
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr", "must be finite and >= 0");
        }
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(key, "must lie in (0, 1)");
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad("eps", "must be finite and > 0");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction", "must lie in [0, 1)");
        }
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad("heads", "must be positive and divide train.d");
        }
        if !(self.curvature_init.is_finite() && self.curvature_init > 0.0) {
            return bad("curvature_init", "must be finite and > 0");
        }
        if let Some(a) = self.alpha_init {
            if !(a.is_finite() && a > 0.0) {
                return bad("alpha_init", "must be finite and > 0");
            }
        }
        Ok(())
    }

    pub fn model_config(&self, d_text: usize, d_pc: usize) -> ModelConfig {
        ModelConfig {
            d_text,
            d_pc,
            d: self.d,
            heads: self.heads,
            layers: self.layers,
            shared_encoder: self.shared_encoder,
            curvature_init: self.curvature_init,
            alpha_init: self.alpha_init,
        }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Per-epoch summary. Losses are means over the epoch's batches;
/// `containment` pools every positive pair seen in the epoch; `c`, the
/// alphas and `lr` are the values after the epoch's last update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub loss_cont: f64,
    pub loss_ord: f64,
    pub c: f64,
    pub alpha_text: f64,
    pub alpha_pc: f64,
    pub containment: f64,
    pub lr: f64,
}

impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} loss={} loss_cont={} loss_ord={} c={} alpha_text={} alpha_pc={} containment={} lr={}",
            self.epoch,
            self.loss,
            self.loss_cont,
            self.loss_ord,
            self.c,
            self.alpha_text,
            self.alpha_pc,
            self.containment,
            self.lr
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: AlignmentModel,
    pub store: ParamStore,
    pub optimizer: OptimizerState,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub metrics: Vec<EpochMetrics>,
}

impl TrainedModel {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: *self.model.config(),
            train: self.train,
            loss: self.loss,
            params: self.store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            optimizer: self.optimizer.clone(),
        }
    }
}

pub fn steps_per_epoch(records: usize, batch_size: usize) -> usize {
    records.div_ceil(batch_size)
}

struct BatchOutcome {
    total: f64,
    cont: f64,
    ord: f64,
    contained: usize,
    pairs: usize,
}

fn run_batch(
    model: &AlignmentModel,
    store: &mut ParamStore,
    state: &mut OptimizerState,
    opt: &AdamW,
    loss: &LossConfig,
    ds: &Dataset,
    batch: &[usize],
    lr: f64,
) -> Result<BatchOutcome> {
    let texts: Vec<&FeatureSequence> = batch.iter().map(|&r| &ds.texts[ds.records[r].text]).collect();
    let pcs: Vec<&FeatureSequence> = batch.iter().map(|&r| &ds.pcs[ds.records[r].pc]).collect();
    let groups: Vec<u64> = batch.iter().map(|&r| ds.records[r].group).collect();
    let pairing = BatchPairing::from_groups(&groups, &groups)?;
    let (outcome, grads) = {
        let tape = Tape::new();
        let p = store.bind(&tape, true);
        let curv = model.diff_curvature(&p)?;
        let ht = model.roots(&p, &curv, &texts, Modality::Text)?;
        let hp = model.roots(&p, &curv, &pcs, Modality::PointCloud)?;
        let terms = dual_loss(ht, hp, &curv, &pairing, loss)?;
        let grads = tape.backward(terms.total)?;
        let outcome = BatchOutcome {
            total: terms.total.item(),
            cont: terms.contrastive.item(),
            ord: terms.ordering.item(),
            contained: terms.contained,
            pairs: terms.pairs,
        };
        (
            outcome,
            p.vars().iter().map(|v| grads.get_or_zeros(*v)).collect::<Vec<_>>(),
        )
    };
    opt.step(store, &grads, state, lr)?;
    let c = model.curvature(store)?.c();
    if !(CURVATURE_WATCHDOG.0..=CURVATURE_WATCHDOG.1).contains(&c) {
        return Err(Error::Numeric {
            op: "watchdog",
            detail: format!(
                "curvature {c} left [{}, {}]",
                CURVATURE_WATCHDOG.0, CURVATURE_WATCHDOG.1
            ),
        });
    }
    for m in [Modality::Text, Modality::PointCloud] {
        model.scale(store, m).map_err(|_| Error::Numeric {
            op: "watchdog",
            detail: format!("{} alpha is no longer finite and positive", m.tag()),
        })?;
    }
    Ok(outcome)
}

/// Trains from a fresh initialisation; `on_epoch` sees each epoch's metrics
/// as soon as they are known.
pub fn train(
    ds: &Dataset,
    cfg: &TrainConfig,
    loss: &LossConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainedModel> {
    cfg.validate()?;
    loss.validate()?;
    let (model, mut store) = AlignmentModel::init(cfg.model_config(ds.text_width(), ds.pc_width()), cfg.seed)?;
    let opt = cfg.optimizer();
    let mut state = OptimizerState::new(&store);
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle.set_stream(1);
    let per_epoch = steps_per_epoch(ds.records.len(), cfg.batch_size);
    let total = (cfg.epochs * per_epoch) as u64;
    let mut order: Vec<usize> = (0..ds.records.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut sum, mut sum_cont, mut sum_ord) = (0.0, 0.0, 0.0);
        let (mut contained, mut pairs) = (0, 0);
        let mut lr = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            lr = lr_at(state.step, total, cfg.lr, cfg.warmup_fraction)?;
            let out =
                run_batch(&model, &mut store, &mut state, &opt, loss, ds, batch, lr).map_err(|e| Error::Training {
                    epoch: epoch + 1,
                    batch: b,
                    source: Box::new(e),
                })?;
            sum += out.total;
            sum_cont += out.cont;
            sum_ord += out.ord;
            contained += out.contained;
            pairs += out.pairs;
        }
        let n = per_epoch as f64;
        let m = EpochMetrics {
            epoch: epoch + 1,
            loss: sum / n,
            loss_cont: sum_cont / n,
            loss_ord: sum_ord / n,
            c: model.curvature(&store)?.c(),
            alpha_text: model.scale(&store, Modality::Text)?.alpha(),
            alpha_pc: model.scale(&store, Modality::PointCloud)?.alpha(),
            containment: contained as f64 / pairs as f64,
            lr,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(TrainedModel {
        model,
        store,
        optimizer: state,
        train: *cfg,
        loss: *loss,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthSpec;

    fn tiny() -> (Dataset, TrainConfig) {
        let ds = SynthSpec {
            n_classes: 2,
            captions_per_class: 2,
            l_text: 3,
            l_pc: 4,
            width: 6,
            ..SynthSpec::default()
        }
        .generate()
        .unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 3,
            d: 8,
            heads: 2,
            layers: 1,
            ..TrainConfig::default()
        };
        (ds, cfg)
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (ds, cfg) = tiny();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 1,
            ..cfg
        };
        let trained = train(&ds, &cfg, &LossConfig::default(), |_| {}).unwrap();
        let (_, fresh) = AlignmentModel::init(*trained.model.config(), cfg.seed).unwrap();
        for ((_, _, a), (_, _, b)) in trained.store.iter().zip(fresh.iter()) {
            let bits = |t: &crate::autodiff::Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(trained.optimizer.step, 2);
    }

    #[test]
    fn same_seed_same_log() {
        let (ds, cfg) = tiny();
        let run = || {
            let mut lines = Vec::new();
            train(&ds, &cfg, &LossConfig::default(), |m| lines.push(m.to_string())).unwrap();
            lines
        };
        let a = run();
        assert_eq!(a.len(), 3);
        assert_eq!(a, run());
        assert!(a[0].starts_with("epoch=1 loss="));
        let other = TrainConfig { seed: 1, ..cfg };
        let b: Vec<String> = train(&ds, &other, &LossConfig::default(), |_| {})
            .unwrap()
            .metrics
            .iter()
            .map(|m| m.to_string())
            .collect();
        assert_ne!(a, b);
    }

    #[test]
    fn schedule_reaches_zero() {
        let (ds, cfg) = tiny();
        let trained = train(&ds, &cfg, &LossConfig::default(), |_| {}).unwrap();
        let total = (cfg.epochs * steps_per_epoch(ds.records.len(), cfg.batch_size)) as u64;
        assert_eq!(trained.optimizer.step, total);
        assert!(trained
            .metrics
            .iter()
            .all(|m| m.loss.is_finite() && (0.0..=1.0).contains(&m.containment)));
    }

    #[test]
    fn saturation_is_reported_with_its_batch() {
        let (ds, cfg) = tiny();
        let cfg = TrainConfig {
            alpha_init: Some(1e3),
            ..cfg
        };
        let err = train(&ds, &cfg, &LossConfig::default(), |_| {}).unwrap_err();
        assert!(matches!(err, Error::Training { epoch: 1, batch: 0, .. }), "{err}");
        assert!(matches!(err.root(), Error::Saturation { .. }));
    }

    #[test]
    fn config_validation_names_keys() {
        let bad = TrainConfig {
            beta2: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "train.beta2"));
        let bad = TrainConfig {
            warmup_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "train.warmup_fraction"));
    }
}
