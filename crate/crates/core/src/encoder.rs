//! Context encoder: a linear projection to the shared width followed by a
//! stack of pre-layer-norm self-attention blocks.
//!
//! Each block computes `x + MHA(LN(x))` and then `x + FFN(LN(x))`; the
//! residual stream is normalised once more after the last block. There are
//! no positional encodings, so the encoder is exactly permutation
//! equivariant over tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamId, ParamStore};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    #[serde(rename = "pointcloud")]
    PointCloud,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::PointCloud => "pc",
        }
    }
}

/// `L x D` matrix of local features for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    modality: Modality,
}

impl FeatureSequence {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>, modality: Modality) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::usage("feature sequences need at least one row and column"));
        }
        if data.len() != rows * cols {
            return Err(Error::usage(format!(
                "{rows}x{cols} feature sequence needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::usage("non-finite feature value"));
        }
        Ok(Self {
            rows,
            cols,
            data,
            modality,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }
}

/// Stacks equally shaped sequences into a `[B, L, D]` tensor.
pub fn stack(seqs: &[&FeatureSequence]) -> Result<Tensor> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::usage("cannot stack an empty batch"))?;
    let (l, d) = (first.rows, first.cols);
    let mut data = Vec::with_capacity(seqs.len() * l * d);
    for s in seqs {
        if s.rows != l || s.cols != d {
            return Err(Error::usage(format!(
                "batch mixes {}x{} and {l}x{d} sequences",
                s.rows, s.cols
            )));
        }
        data.extend_from_slice(&s.data);
    }
    Tensor::new(vec![seqs.len(), l, d], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_in: usize,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d == 0 || self.heads == 0 {
            return Err(Error::usage("encoder widths and head count must be positive"));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::usage(format!(
                "width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Linear {
    fn init(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut lin = Self::init_unbiased(store, name, fan_in, fan_out, rng)?;
        lin.bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), false)?);
        Ok(lin)
    }

    fn init_unbiased(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        Ok(Self {
            weight: store.add(format!("{name}.weight"), Tensor::new(vec![fan_in, fan_out], w)?, true)?,
            bias: None,
        })
    }

    /// `x W + b` over the last axis of `[.., fan_in]`.
    fn forward<'t>(&self, p: &BoundParams<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(p.var(self.weight))?;
        match self.bias {
            Some(b) => y.add(p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn init(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0), false)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d]), false)?,
        })
    }

    fn forward<'t>(&self, p: &BoundParams<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(LN_EPS)?.mul(p.var(self.gain))?.add(p.var(self.bias))
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm_attn: Norm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm_ffn: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
}

/// Parameter handles for one encoder stack inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct EncoderParams {
    cfg: EncoderConfig,
    proj: Linear,
    blocks: Vec<Block>,
    final_norm: Norm,
}

impl EncoderParams {
    /// Registers a fresh stack under `prefix` (Xavier-uniform projections,
    /// zero biases, unit norm gains).
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let proj = Linear::init(store, &format!("{prefix}.proj"), cfg.d_in, d, rng)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let name = |part: &str| format!("{prefix}.block{i}.{part}");
            blocks.push(Block {
                norm_attn: Norm::init(store, &name("norm_attn"), d)?,
                query: Linear::init(store, &name("query"), d, d, rng)?,
                // a key bias shifts every score in a row equally and
                // never receives gradient through the softmax
                key: Linear::init_unbiased(store, &name("key"), d, d, rng)?,
                value: Linear::init(store, &name("value"), d, d, rng)?,
                out: Linear::init(store, &name("out"), d, d, rng)?,
                norm_ffn: Norm::init(store, &name("norm_ffn"), d)?,
                ffn_in: Linear::init(store, &name("ffn_in"), d, 4 * d, rng)?,
                ffn_out: Linear::init(store, &name("ffn_out"), 4 * d, d, rng)?,
            });
        }
        let final_norm = Norm::init(store, &format!("{prefix}.final_norm"), d)?;
        Ok(Self {
            cfg,
            proj,
            blocks,
            final_norm,
        })
    }

    pub fn config(&self) -> EncoderConfig {
        self.cfg
    }

    /// Encodes a `[B, L, d_in]` batch into `[B, L, d]`.
    pub fn forward<'t>(&self, p: &BoundParams<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.cfg.d_in {
            return Err(Error::usage(format!(
                "encoder expects [B, L, {}] input, got {shape:?}",
                self.cfg.d_in
            )));
        }
        let mut h = self.proj.forward(p, x)?;
        for block in &self.blocks {
            let attn = self.attention(block, p, block.norm_attn.forward(p, h)?)?;
            h = h.add(attn)?;
            let hidden = block.ffn_in.forward(p, block.norm_ffn.forward(p, h)?)?.gelu()?;
            h = h.add(block.ffn_out.forward(p, hidden)?)?;
        }
        self.final_norm.forward(p, h)
    }

    fn attention<'t>(&self, block: &Block, p: &BoundParams<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let (b, l) = (s[0], s[1]);
        let (heads, d) = (self.cfg.heads, self.cfg.d);
        let dh = d / heads;
        // [B, L, d] -> [B*H, L, dh]
        let split = |t: Var<'t>| -> Result<Var<'t>> {
            t.reshape(&[b, l, heads, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b * heads, l, dh])
        };
        let q = split(block.query.forward(p, x)?)?;
        let k = split(block.key.forward(p, x)?)?;
        let v = split(block.value.forward(p, x)?)?;
        let scores = q.matmul(k.transpose()?)?.mul_scalar(1.0 / (dh as f64).sqrt())?;
        let weights = scores.softmax(2)?;
        let ctx = weights
            .matmul(v)?
            .reshape(&[b, heads, l, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, l, d])?;
        block.out.forward(p, ctx)
    }
}

/// Encodes one sequence with parameters from `store`, returning `L x d`
/// values row-major.
pub fn encode(seq: &FeatureSequence, params: &EncoderParams, store: &ParamStore) -> Result<Vec<f64>> {
    if seq.cols != params.cfg.d_in {
        return Err(Error::usage(format!(
            "sequence width {} does not match encoder input {}",
            seq.cols, params.cfg.d_in
        )));
    }
    let tape = Tape::new();
    let bound = store.bind(&tape, false);
    let x = tape.constant(stack(&[seq])?);
    let z = params.forward(&bound, x)?;
    let out = z.value().data().to_vec();
    Ok(out)
}
