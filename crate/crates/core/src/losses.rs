//! Multi-positive Lorentzian contrastive loss and the entailment-cone
//! ordering loss.
//!
//! Every loss exists twice: a plain `f64` version over [`LorentzPoint`]s and
//! a tape version used for training. The tests pin one against the other.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, LorentzPoint, ASIN_EPS, DEN_EPS};
use crate::manifold::{self, DiffCurvature};

/// Positive sets between `n_text` queries and `n_pc` point clouds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPairing {
    n_pc: usize,
    positives: Vec<Vec<usize>>,
    transpose: Vec<Vec<usize>>,
}

impl BatchPairing {
    /// `positives[i]` lists the point clouds matched to text `i`. Every text
    /// and every point cloud needs at least one partner.
    pub fn new(n_pc: usize, mut positives: Vec<Vec<usize>>) -> Result<Self> {
        if positives.is_empty() || n_pc == 0 {
            return Err(Error::usage("pairing needs at least one text and one point cloud"));
        }
        let mut transpose = vec![Vec::new(); n_pc];
        for (i, set) in positives.iter_mut().enumerate() {
            set.sort_unstable();
            set.dedup();
            if set.is_empty() {
                return Err(Error::usage(format!("text {i} has no positive")));
            }
            for &j in set.iter() {
                if j >= n_pc {
                    return Err(Error::usage(format!("text {i} points at pc {j}, batch has {n_pc}")));
                }
                transpose[j].push(i);
            }
        }
        if let Some(j) = transpose.iter().position(Vec::is_empty) {
            return Err(Error::usage(format!("point cloud {j} has no positive")));
        }
        Ok(Self {
            n_pc,
            positives,
            transpose,
        })
    }

    /// Text `i` and point cloud `j` are positive iff their groups match.
    pub fn from_groups<G: PartialEq>(text: &[G], pc: &[G]) -> Result<Self> {
        let positives = text
            .iter()
            .map(|g| pc.iter().enumerate().filter(|(_, h)| *h == g).map(|(j, _)| j).collect())
            .collect();
        Self::new(pc.len(), positives)
    }

    pub fn identity(b: usize) -> Result<Self> {
        Self::new(b, (0..b).map(|i| vec![i]).collect())
    }

    pub fn n_text(&self) -> usize {
        self.positives.len()
    }

    pub fn n_pc(&self) -> usize {
        self.n_pc
    }

    pub fn positives(&self, i: usize) -> &[usize] {
        &self.positives[i]
    }

    pub fn transpose(&self, j: usize) -> &[usize] {
        &self.transpose[j]
    }

    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        self.positives[i].binary_search(&j).is_ok()
    }

    /// All `(text, pc)` positive pairs in row order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.positives
            .iter()
            .enumerate()
            .flat_map(|(i, set)| set.iter().map(move |&j| (i, j)))
    }

    pub fn num_pairs(&self) -> usize {
        self.positives.iter().map(Vec::len).sum()
    }

    /// Row-major `[n_text, n_pc]` positive mask.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.n_text() * self.n_pc];
        for (i, j) in self.pairs() {
            m[i * self.n_pc + j] = true;
        }
        m
    }

    fn check_shape(&self, rows: usize, cols: usize) -> Result<()> {
        if rows != self.n_text() || cols != self.n_pc {
            return Err(Error::usage(format!(
                "pairing is {}x{}, similarities are {rows}x{cols}",
                self.n_text(),
                self.n_pc
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub k: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda: 0.2,
            k: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64, zero_ok: bool| v.is_finite() && (v > 0.0 || (zero_ok && v == 0.0));
        if !ok(self.tau, false) {
            return Err(Error::config("loss.tau", "must be finite and > 0"));
        }
        if !ok(self.lambda, true) {
            return Err(Error::config("loss.lambda", "must be finite and >= 0"));
        }
        if !ok(self.k, false) {
            return Err(Error::config("loss.k", "must be finite and > 0"));
        }
        Ok(())
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `s(i,j) = -d(h_t_i, h_p_j) / tau`, row-major `[n_t, n_p]`.
pub fn similarity_matrix(ht: &[LorentzPoint], hp: &[LorentzPoint], tau: f64) -> Result<Vec<Vec<f64>>> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::usage(format!("tau must be positive, got {tau}")));
    }
    ht.iter()
        .map(|a| {
            hp.iter()
                .map(|b| Ok(-geometry::lorentz_distance(a, b)? / tau))
                .collect()
        })
        .collect()
}

/// Symmetric multi-positive InfoNCE over a similarity matrix.
pub fn contrastive_loss(s: &[Vec<f64>], pairing: &BatchPairing) -> Result<f64> {
    let cols = s.first().map_or(0, Vec::len);
    if s.iter().any(|r| r.len() != cols) {
        return Err(Error::usage("ragged similarity matrix"));
    }
    pairing.check_shape(s.len(), cols)?;
    let t2p: f64 = s
        .iter()
        .enumerate()
        .map(|(i, row)| log_sum_exp(row.iter().copied()) - log_sum_exp(pairing.positives(i).iter().map(|&j| row[j])))
        .sum::<f64>()
        / s.len() as f64;
    let p2t: f64 = (0..cols)
        .map(|j| log_sum_exp(s.iter().map(|r| r[j])) - log_sum_exp(pairing.transpose(j).iter().map(|&i| s[i][j])))
        .sum::<f64>()
        / cols as f64;
    Ok(0.5 * (t2p + p2t))
}

/// Cone hinge for one pair, or `None` when the exterior angle is undefined.
fn pair_violation(t: &LorentzPoint, p: &LorentzPoint, k: f64) -> Result<Option<f64>> {
    match geometry::exterior_angle(t, p) {
        Ok(theta) => Ok(Some((theta - geometry::half_aperture(t, k)).max(0.0))),
        Err(Error::Degenerate(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Mean cone violation `max(0, theta - phi)` over all positive pairs.
pub fn ordering_loss(ht: &[LorentzPoint], hp: &[LorentzPoint], pairing: &BatchPairing, k: f64) -> Result<f64> {
    pairing.check_shape(ht.len(), hp.len())?;
    let mut total = 0.0;
    for (i, j) in pairing.pairs() {
        total += pair_violation(&ht[i], &hp[j], k)?.unwrap_or(0.0);
    }
    Ok(total / pairing.num_pairs() as f64)
}

/// `L_cont + lambda * L_ord`.
pub fn total_loss(ht: &[LorentzPoint], hp: &[LorentzPoint], pairing: &BatchPairing, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    let s = similarity_matrix(ht, hp, cfg.tau)?;
    Ok(contrastive_loss(&s, pairing)? + cfg.lambda * ordering_loss(ht, hp, pairing, cfg.k)?)
}

/// Fraction of positive pairs whose point cloud lies inside the text's cone.
/// Degenerate pairs count as contained.
pub fn containment_rate(ht: &[LorentzPoint], hp: &[LorentzPoint], pairing: &BatchPairing, k: f64) -> Result<f64> {
    pairing.check_shape(ht.len(), hp.len())?;
    let mut inside = 0usize;
    for (i, j) in pairing.pairs() {
        if pair_violation(&ht[i], &hp[j], k)?.is_none_or(|v| v == 0.0) {
            inside += 1;
        }
    }
    Ok(inside as f64 / pairing.num_pairs() as f64)
}

/// Tape version of [`similarity_matrix`] on `[n, d+1]` root tensors.
pub fn similarity<'t>(ht: Var<'t>, hp: Var<'t>, curv: &DiffCurvature<'t>, tau: f64) -> Result<Var<'t>> {
    let d = manifold::distance_from_inner(manifold::inner_pairwise(ht, hp)?, curv)?;
    d.mul_scalar(-1.0 / tau)
}

/// Tape version of [`contrastive_loss`].
pub fn contrastive<'t>(s: Var<'t>, pairing: &BatchPairing) -> Result<Var<'t>> {
    let shape = s.shape();
    if shape.len() != 2 {
        return Err(Error::usage(format!("similarities must be 2-D, got {shape:?}")));
    }
    pairing.check_shape(shape[0], shape[1])?;
    let mask = pairing.mask();
    let t2p = s.logsumexp(1)?.sub(s.logsumexp_masked(1, mask.clone())?)?.mean()?;
    let p2t = s.logsumexp(0)?.sub(s.logsumexp_masked(0, mask)?)?.mean()?;
    t2p.add(p2t)?.mul_scalar(0.5)
}

/// Tape ordering loss plus the containment count it observed.
#[derive(Debug, Clone, Copy)]
pub struct Ordering<'t> {
    pub loss: Var<'t>,
    pub contained: usize,
    pub pairs: usize,
}

fn rows_as_points(h: &Tensor, curvature: geometry::Curvature) -> Result<Vec<LorentzPoint>> {
    let w = h.shape()[1];
    h.data()
        .chunks(w)
        .map(|r| LorentzPoint::from_coords(r.to_vec(), curvature))
        .collect()
}

/// Tape version of [`ordering_loss`]. Degenerate pairs are left out of the
/// graph but still count in the denominator.
pub fn ordering<'t>(
    ht: Var<'t>,
    hp: Var<'t>,
    curv: &DiffCurvature<'t>,
    pairing: &BatchPairing,
    k: f64,
) -> Result<Ordering<'t>> {
    let (st, sp) = (ht.shape(), hp.shape());
    if st.len() != 2 || sp.len() != 2 {
        return Err(Error::usage("ordering expects [n, d+1] roots"));
    }
    pairing.check_shape(st[0], sp[0])?;
    let curvature = geometry::Curvature::new(curv.value())?;
    let pt = rows_as_points(&ht.value(), curvature)?;
    let pp = rows_as_points(&hp.value(), curvature)?;
    let (mut ti, mut pj, mut contained) = (Vec::new(), Vec::new(), 0);
    for (i, j) in pairing.pairs() {
        match pair_violation(&pt[i], &pp[j], k)? {
            Some(v) => {
                if v == 0.0 {
                    contained += 1;
                }
                ti.push(i);
                pj.push(j);
            }
            None => contained += 1,
        }
    }
    let n = pairing.num_pairs();
    let tape = ht.tape();
    if ti.is_empty() {
        let loss = tape.constant(Tensor::scalar(0.0));
        return Ok(Ordering {
            loss,
            contained,
            pairs: n,
        });
    }
    let a = ht.gather_rows(&ti)?;
    let b = hp.gather_rows(&pj)?;
    let ip = manifold::inner_rows(a, b)?;
    let norm_t = manifold::spatial(a)?.norm(1)?;
    let phi = tape
        .constant(Tensor::scalar(2.0 * k))
        .div(norm_t.mul(curv.sqrt_c)?)?
        .clamp(ASIN_EPS, 1.0)?
        .asin()?;
    let cip = ip.mul(curv.c)?;
    let num = manifold::time(b)?.add(manifold::time(a)?.mul(cip)?)?;
    let den = norm_t.mul(cip.square()?.add_scalar(-1.0)?.clamp_min(DEN_EPS)?.sqrt()?)?;
    let theta = num.div(den)?.clamp(-1.0, 1.0)?.acos()?;
    let loss = theta.sub(phi)?.relu()?.sum()?.mul_scalar(1.0 / n as f64)?;
    Ok(Ordering {
        loss,
        contained,
        pairs: n,
    })
}

/// Both loss terms and their combination on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub contrastive: Var<'t>,
    pub ordering: Var<'t>,
    pub contained: usize,
    pub pairs: usize,
}

pub fn dual_loss<'t>(
    ht: Var<'t>,
    hp: Var<'t>,
    curv: &DiffCurvature<'t>,
    pairing: &BatchPairing,
    cfg: &LossConfig,
) -> Result<LossTerms<'t>> {
    cfg.validate()?;
    let contrastive = contrastive(similarity(ht, hp, curv, cfg.tau)?, pairing)?;
    let ord = ordering(ht, hp, curv, pairing, cfg.k)?;
    let total = contrastive.add(ord.loss.mul_scalar(cfg.lambda)?)?;
    Ok(LossTerms {
        total,
        contrastive,
        ordering: ord.loss,
        contained: ord.contained,
        pairs: ord.pairs,
    })
}
