//! Contribution-aware pooling of context tokens into one root embedding.
//!
//! Tokens are scaled by a per-modality `alpha`, lifted, and weighted by a
//! softmax over their negative Lorentzian distance to the lifted token mean.
//! The weighted Euclidean sum of the scaled tokens is lifted once more to
//! give the root embedding.

use crate::autodiff::{Tape, Tensor, Var};
use crate::encoder::Modality;
use crate::error::{Error, Result};
use crate::geometry::{Curvature, LorentzPoint, OVERFLOW_GUARD};
use crate::manifold::{self, DiffCurvature};

/// Learnable token scale `alpha = exp(log_alpha)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModalityScale {
    log_alpha: f64,
}

impl ModalityScale {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::usage(format!("alpha must be finite and positive, got {alpha}")));
        }
        Ok(Self { log_alpha: alpha.ln() })
    }

    pub fn from_log(log_alpha: f64) -> Result<Self> {
        Self::new(log_alpha.exp())?;
        Ok(Self { log_alpha })
    }

    pub fn log_alpha(&self) -> f64 {
        self.log_alpha
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RootEmbedding {
    pub point: LorentzPoint,
    pub modality: Modality,
}

/// Tape outputs of [`aggregate_batch`].
#[derive(Debug, Clone, Copy)]
pub struct Aggregated<'t> {
    /// `[B, d+1]` root embeddings.
    pub roots: Var<'t>,
    /// `[B, L]` contribution weights.
    pub weights: Var<'t>,
    /// `[B, d]` weighted sum before the final lift.
    pub pooled: Var<'t>,
}

/// Pools a `[B, L, d]` batch of token matrices.
pub fn aggregate_batch<'t>(
    z: Var<'t>,
    log_alpha: Var<'t>,
    curv: &DiffCurvature<'t>,
    guard: f64,
) -> Result<Aggregated<'t>> {
    let shape = z.shape();
    if shape.len() != 3 || shape[1] == 0 {
        return Err(Error::usage(format!("aggregate expects [B, L>=1, d], got {shape:?}")));
    }
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let scaled = z.mul(log_alpha.exp()?)?;
    let anchor = manifold::lift(scaled.mean_axis(1)?, curv, guard)?;
    let leaves = manifold::lift(scaled, curv, guard)?;
    let dist = manifold::distance_from_inner(manifold::inner_rows(leaves, anchor)?, curv)?;
    let weights = dist.neg()?.softmax(1)?;
    let pooled = scaled.mul(weights)?.sum_axis(1)?.reshape(&[b, d])?;
    let roots = manifold::lift(pooled, curv, guard)?;
    Ok(Aggregated {
        roots,
        weights: weights.reshape(&[b, l])?,
        pooled,
    })
}

/// Pools one `rows x cols` token matrix (row-major) and returns the root
/// embedding with its contribution weights.
pub fn aggregate(
    z: &[f64],
    rows: usize,
    cols: usize,
    scale: ModalityScale,
    curvature: Curvature,
    modality: Modality,
) -> Result<(RootEmbedding, Vec<f64>)> {
    if rows == 0 || cols == 0 || z.len() != rows * cols {
        return Err(Error::usage(format!(
            "aggregate needs a non-empty {rows}x{cols} matrix, got {} values",
            z.len()
        )));
    }
    let tape = Tape::new();
    let zv = tape.constant(Tensor::new(vec![1, rows, cols], z.to_vec())?);
    let log_alpha = tape.constant(Tensor::scalar(scale.log_alpha()));
    let curv = DiffCurvature::from_log(tape.constant(Tensor::scalar(curvature.log_c())))?;
    let out = aggregate_batch(zv, log_alpha, &curv, OVERFLOW_GUARD)?;
    let coords = out.roots.value().data().to_vec();
    let point = LorentzPoint::from_coords(coords, curvature)?;
    let weights = out.weights.value().data().to_vec();
    Ok((RootEmbedding { point, modality }, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GradCheck;
    use crate::geometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit() -> Curvature {
        Curvature::default()
    }

    /// Straight-line evaluation through the plain `f64` geometry.
    fn reference(z: &[f64], rows: usize, cols: usize, alpha: f64, c: Curvature) -> (Vec<f64>, Vec<f64>) {
        let scaled: Vec<Vec<f64>> = z.chunks(cols).map(|r| r.iter().map(|x| alpha * x).collect()).collect();
        let mean: Vec<f64> = (0..cols)
            .map(|j| scaled.iter().map(|r| r[j]).sum::<f64>() / rows as f64)
            .collect();
        let anchor = geometry::lift(&mean, c).unwrap();
        let dists: Vec<f64> = scaled
            .iter()
            .map(|r| geometry::lorentz_distance(&geometry::lift(r, c).unwrap(), &anchor).unwrap())
            .collect();
        let e: Vec<f64> = dists.iter().map(|d| (-d).exp()).collect();
        let total: f64 = e.iter().sum();
        let w: Vec<f64> = e.iter().map(|x| x / total).collect();
        let pooled: Vec<f64> = (0..cols)
            .map(|j| (0..rows).map(|i| w[i] * scaled[i][j]).sum())
            .collect();
        (w, geometry::lift(&pooled, c).unwrap().coords().to_vec())
    }

    #[test]
    fn singleton_gets_full_weight() {
        let scale = ModalityScale::new(0.5).unwrap();
        let (root, w) = aggregate(&[0.4, -1.0, 2.0], 1, 3, scale, unit(), Modality::Text).unwrap();
        assert_eq!(w, vec![1.0]);
        let expect = geometry::lift(&[0.2, -0.5, 1.0], unit()).unwrap();
        for (a, b) in root.point.coords().iter().zip(expect.coords()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_rows_get_uniform_weights() {
        let row = [0.3, -0.7, 0.1];
        let z: Vec<f64> = row.iter().cycle().take(12).copied().collect();
        let (root, w) = aggregate(&z, 4, 3, ModalityScale::new(1.0).unwrap(), unit(), Modality::PointCloud).unwrap();
        assert!(w.iter().all(|&x| x == 0.25), "{w:?}");
        let expect = geometry::lift(&row, unit()).unwrap();
        for (a, b) in root.point.coords().iter().zip(expect.coords()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn outlier_golden_values() {
        let golden: serde_json::Value =
            serde_json::from_str(include_str!("../tests/fixtures/aggregation_golden.json")).unwrap();
        let floats = |k: &str| -> Vec<f64> {
            golden[k]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_f64().unwrap())
                .collect()
        };
        let z = [1.0, 0.0, 0.0, 1.0, 10.0, 10.0];
        let (root, w) = aggregate(&z, 3, 2, ModalityScale::new(1.0).unwrap(), unit(), Modality::Text).unwrap();
        for (a, b) in w.iter().zip(floats("weights")) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!(w[2] < w[0] && w[2] < w[1]);
        for (a, b) in root.point.coords().iter().zip(floats("root")) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn weights_and_convexity_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let (rows, cols) = (rng.random_range(1..8), rng.random_range(1..6));
            let z: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
            let alpha = rng.random_range(0.2..1.5);
            let c = Curvature::new(rng.random_range(0.5..2.0)).unwrap();
            let (root, w) = aggregate(&z, rows, cols, ModalityScale::new(alpha).unwrap(), c, Modality::Text).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&x| x > 0.0 && x <= 1.0));
            let (rw, rroot) = reference(&z, rows, cols, alpha, c);
            for (a, b) in w.iter().zip(&rw) {
                assert!((a - b).abs() < 1e-9);
            }
            for (a, b) in root.point.coords().iter().zip(&rroot) {
                assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
            }
            // pooled norm never exceeds the largest scaled row norm
            let max_row = z
                .chunks(cols)
                .map(|r| alpha * geometry::euclidean_norm(r))
                .fold(0.0, f64::max);
            let tape = Tape::new();
            let curv = DiffCurvature::from_log(tape.constant(Tensor::scalar(c.log_c()))).unwrap();
            let out = aggregate_batch(
                tape.constant(Tensor::new(vec![1, rows, cols], z.clone()).unwrap()),
                tape.constant(Tensor::scalar(alpha.ln())),
                &curv,
                OVERFLOW_GUARD,
            )
            .unwrap();
            let pooled_norm = geometry::euclidean_norm(out.pooled.value().data());
            assert!(pooled_norm <= max_row + 1e-12);
        }
    }

    #[test]
    fn saturation_propagates() {
        let z = [100.0, 0.0];
        let err = aggregate(&z, 1, 2, ModalityScale::new(1.0).unwrap(), unit(), Modality::Text).unwrap_err();
        assert!(matches!(err, Error::Saturation { .. }));
    }

    #[test]
    fn gradients_reach_alpha_and_curvature() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let z = Tensor::new(vec![2, 4, 3], (0..24).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
        let log_alpha = Tensor::scalar(0.7f64.ln());
        let log_c = Tensor::scalar(1.3f64.ln());
        let report = GradCheck::default()
            .run(&[z, log_alpha, log_c], |_, v| {
                let curv = DiffCurvature::from_log(v[2])?;
                let out = aggregate_batch(v[0], v[1], &curv, OVERFLOW_GUARD)?;
                // distance of each root to the origin: arccosh(sqrt(c) t)/sqrt(c)
                let t = manifold::time(out.roots)?;
                t.mul(curv.sqrt_c)?.clamp_min(1.0)?.acosh()?.div(curv.sqrt_c)?.sum()
            })
            .unwrap();
        for r in &report.inputs {
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
        assert!(report.inputs[1].analytic.abs() > 1e-6);
        assert!(report.inputs[2].analytic.abs() > 1e-6);
    }
}
