//! Encoders, token scales and curvature assembled into one alignment model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate_batch, ModalityScale};
use crate::autodiff::{Tape, Tensor, Var};
use crate::encoder::{stack, EncoderConfig, EncoderParams, FeatureSequence, Modality};
use crate::error::{Error, Result};
use crate::geometry::{Curvature, LorentzPoint, OVERFLOW_GUARD};
use crate::manifold::DiffCurvature;
use crate::params::{BoundParams, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_text: usize,
    pub d_pc: usize,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    /// One encoder stack for both modalities instead of one each.
    pub shared_encoder: bool,
    pub curvature_init: f64,
    /// Defaults to `1/sqrt(d)`.
    pub alpha_init: Option<f64>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder(Modality::Text).validate()?;
        self.encoder(Modality::PointCloud).validate()?;
        if self.shared_encoder && self.d_text != self.d_pc {
            return Err(Error::usage(format!(
                "a shared encoder needs equal input widths, got {} and {}",
                self.d_text, self.d_pc
            )));
        }
        Curvature::new(self.curvature_init)?;
        ModalityScale::new(self.alpha())?;
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.alpha_init.unwrap_or(1.0 / (self.d as f64).sqrt())
    }

    fn encoder(&self, m: Modality) -> EncoderConfig {
        let d_in = match m {
            Modality::Text => self.d_text,
            Modality::PointCloud => self.d_pc,
        };
        EncoderConfig {
            d_in,
            d: self.d,
            heads: self.heads,
            layers: self.layers,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlignmentModel {
    cfg: ModelConfig,
    text: EncoderParams,
    pc: Option<EncoderParams>,
    log_c: ParamId,
    log_alpha_text: ParamId,
    log_alpha_pc: ParamId,
}

impl AlignmentModel {
    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let text_name = if cfg.shared_encoder { "shared" } else { "text" };
        let text = EncoderParams::init(&mut store, text_name, cfg.encoder(Modality::Text), &mut rng)?;
        let pc = if cfg.shared_encoder {
            None
        } else {
            Some(EncoderParams::init(
                &mut store,
                "pc",
                cfg.encoder(Modality::PointCloud),
                &mut rng,
            )?)
        };
        let log_c = store.add("log_c", Tensor::scalar(cfg.curvature_init.ln()), false)?;
        let la = cfg.alpha().ln();
        let log_alpha_text = store.add("text.log_alpha", Tensor::scalar(la), false)?;
        let log_alpha_pc = store.add("pc.log_alpha", Tensor::scalar(la), false)?;
        let model = Self {
            cfg,
            text,
            pc,
            log_c,
            log_alpha_text,
            log_alpha_pc,
        };
        Ok((model, store))
    }

    /// Rebuilds the model layout for `cfg` and adopts `values` by name.
    pub fn restore(cfg: ModelConfig, values: &[(String, Tensor)]) -> Result<(Self, ParamStore)> {
        let (model, mut store) = Self::init(cfg, 0)?;
        if values.len() != store.len() {
            return Err(Error::config(
                "checkpoint",
                format!("holds {} tensors, model expects {}", values.len(), store.len()),
            ));
        }
        let mut ordered = Vec::with_capacity(values.len());
        for (id, name, _) in store.iter() {
            let (stored_name, t) = &values[id.0];
            if stored_name != name {
                return Err(Error::config(
                    "checkpoint",
                    format!("tensor {} is `{stored_name}`, model expects `{name}`", id.0),
                ));
            }
            ordered.push(t.clone());
        }
        store
            .replace_values(ordered)
            .map_err(|e| Error::config("checkpoint", e.to_string()))?;
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn curvature(&self, store: &ParamStore) -> Result<Curvature> {
        Curvature::from_log(store.get(self.log_c).item())
    }

    pub fn scale(&self, store: &ParamStore, m: Modality) -> Result<ModalityScale> {
        ModalityScale::from_log(store.get(self.log_alpha(m)).item())
    }

    fn log_alpha(&self, m: Modality) -> ParamId {
        match m {
            Modality::Text => self.log_alpha_text,
            Modality::PointCloud => self.log_alpha_pc,
        }
    }

    fn encoder(&self, m: Modality) -> &EncoderParams {
        match (m, &self.pc) {
            (Modality::PointCloud, Some(pc)) => pc,
            _ => &self.text,
        }
    }

    pub fn diff_curvature<'t>(&self, p: &BoundParams<'t>) -> Result<DiffCurvature<'t>> {
        DiffCurvature::from_log(p.var(self.log_c))
    }

    /// Root embeddings `[n, d+1]` of `seqs` in input order. Sequences of
    /// different lengths are encoded in separate same-length groups.
    pub fn roots<'t>(
        &self,
        p: &BoundParams<'t>,
        curv: &DiffCurvature<'t>,
        seqs: &[&FeatureSequence],
        m: Modality,
    ) -> Result<Var<'t>> {
        if seqs.is_empty() {
            return Err(Error::usage("no sequences to embed"));
        }
        let tape = p.var(self.log_c).tape();
        let mut lengths: Vec<usize> = seqs.iter().map(|s| s.rows()).collect();
        lengths.sort_unstable();
        lengths.dedup();
        let mut parts = Vec::with_capacity(lengths.len());
        let mut order = Vec::with_capacity(seqs.len());
        for &len in &lengths {
            let idx: Vec<usize> = (0..seqs.len()).filter(|&i| seqs[i].rows() == len).collect();
            let group: Vec<&FeatureSequence> = idx.iter().map(|&i| seqs[i]).collect();
            let x = tape.constant(stack(&group)?);
            let z = self.encoder(m).forward(p, x)?;
            parts.push(aggregate_batch(z, p.var(self.log_alpha(m)), curv, OVERFLOW_GUARD)?.roots);
            order.extend(idx);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let all = tape.concat(&parts, 0)?;
        let mut inverse = vec![0; order.len()];
        for (pos, &i) in order.iter().enumerate() {
            inverse[i] = pos;
        }
        all.gather_rows(&inverse)
    }

    /// Root embeddings without gradients, `chunk` sequences per forward pass.
    pub fn embed(
        &self,
        store: &ParamStore,
        seqs: &[&FeatureSequence],
        m: Modality,
        chunk: usize,
    ) -> Result<Vec<LorentzPoint>> {
        let curvature = self.curvature(store)?;
        let mut out = Vec::with_capacity(seqs.len());
        for part in seqs.chunks(chunk.max(1)) {
            let tape = Tape::new();
            let p = store.bind(&tape, false);
            let curv = self.diff_curvature(&p)?;
            let roots = self.roots(&p, &curv, part, m)?;
            let v = roots.value();
            let w = v.shape()[1];
            for row in v.data().chunks(w) {
                out.push(LorentzPoint::from_coords(row.to_vec(), curvature)?);
            }
        }
        Ok(out)
    }
}
