//! Training objective: L1 plus a weighted feature-space MSE.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, IdentityExtractor};
use crate::graph::{NodeId, Tape};
use crate::metrics::compensated_sum;
use crate::network::LossGraph;
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA_P: f64 = 0.002;

#[derive(Debug, Clone)]
pub struct LossConfig {
    pub lambda_p: f64,
    pub extractor: Arc<dyn FeatureExtractor>,
}

impl LossConfig {
    pub fn new(lambda_p: f64, extractor: Arc<dyn FeatureExtractor>) -> Result<Self> {
        if !(lambda_p.is_finite() && lambda_p >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda_p must be finite and >= 0, got {lambda_p}"
            )));
        }
        Ok(Self { lambda_p, extractor })
    }

    /// Pure L1.
    pub fn l1_only() -> Self {
        Self {
            lambda_p: 0.0,
            extractor: Arc::new(IdentityExtractor),
        }
    }

    fn uses_features(&self) -> bool {
        self.lambda_p > 0.0
    }
}

fn check_batch(pred: &[Tensor], target: &[Tensor]) -> Result<()> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "loss needs equal non-empty batches, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    for (p, t) in pred.iter().zip(target) {
        if p.shape() != t.shape() {
            return Err(Error::ShapeMismatch(format!(
                "prediction {:?} vs target {:?}",
                p.shape(),
                t.shape()
            )));
        }
    }
    Ok(())
}

fn batch_mean(pred: &[Tensor], target: &[Tensor], f: impl Fn(&Tensor, &Tensor) -> Result<f64>) -> Result<f64> {
    check_batch(pred, target)?;
    let per: Vec<f64> = pred
        .iter()
        .zip(target)
        .map(|(p, t)| f(p, t))
        .collect::<Result<_>>()?;
    Ok(compensated_sum(per.iter().copied()) / per.len() as f64)
}

fn mean_abs(a: &Tensor, b: &Tensor) -> f64 {
    compensated_sum(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs())) / a.len() as f64
}

fn mean_sq(a: &Tensor, b: &Tensor) -> f64 {
    compensated_sum(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y))) / a.len() as f64
}

/// Mean absolute error per example, averaged over the batch.
pub fn l1_loss(pred: &[Tensor], target: &[Tensor]) -> Result<f64> {
    batch_mean(pred, target, |p, t| Ok(mean_abs(p, t)))
}

/// Mean squared feature distance per example, averaged over the batch.
pub fn perceptual_loss(pred: &[Tensor], target: &[Tensor], extractor: &dyn FeatureExtractor) -> Result<f64> {
    batch_mean(pred, target, |p, t| {
        let fp = extractor.features(p)?;
        let ft = extractor.features(t)?;
        Ok(mean_sq(&fp, &ft))
    })
}

/// `(l1, perceptual, total)`; the extractor is not run when `lambda_p` is zero.
pub fn total_loss(pred: &[Tensor], target: &[Tensor], cfg: &LossConfig) -> Result<(f64, f64, f64)> {
    let l1 = l1_loss(pred, target)?;
    if !cfg.uses_features() {
        return Ok((l1, 0.0, l1));
    }
    let lp = perceptual_loss(pred, target, cfg.extractor.as_ref())?;
    Ok((l1, lp, l1 + cfg.lambda_p * lp))
}

/// Records the single-example objective on `tape`. Reported terms are `[l1, lp]`
/// (`lp` is a zero constant when features are skipped).
pub fn loss_on_tape<'p>(
    tape: &mut Tape<'p>,
    pred: NodeId,
    target: &Tensor,
    cfg: &'p LossConfig,
) -> Result<LossGraph> {
    let t = tape.constant(target.clone());
    let l1 = tape.mean_abs_diff(pred, t)?;
    if !cfg.uses_features() {
        let lp = tape.constant(Tensor::scalar(0.0));
        return Ok(LossGraph {
            total: l1,
            terms: vec![l1, lp],
        });
    }
    let fp = cfg.extractor.features_on_tape(tape, pred)?;
    let ft = tape.constant(cfg.extractor.features(target)?);
    let lp = tape.mean_sq_diff(fp, ft)?;
    let total = tape.weighted_sum(&[(l1, 1.0), (lp, cfg.lambda_p)])?;
    Ok(LossGraph {
        total,
        terms: vec![l1, lp],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::ConvDescriptor;

    fn t(v: f64) -> Tensor {
        Tensor::filled(3, 8, 8, v)
    }

    #[test]
    fn identical_is_zero() {
        let cfg = LossConfig::new(0.5, Arc::new(IdentityExtractor)).unwrap();
        assert_eq!(total_loss(&[t(0.3)], &[t(0.3)], &cfg).unwrap(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn constant_offset_l1() {
        let l = l1_loss(&[t(0.5), t(0.1)], &[t(0.3), t(0.3)]).unwrap();
        assert!((l - 0.2).abs() < 1e-12);
    }

    #[test]
    fn identity_extractor_gives_mse() {
        let a = Tensor::from_vec(1, 1, 2, vec![0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(1, 1, 2, vec![0.5, 0.0]).unwrap();
        let lp = perceptual_loss(&[a], &[b], &IdentityExtractor).unwrap();
        assert!((lp - 0.625).abs() < 1e-15);
    }

    #[test]
    fn lambda_zero_is_exact_l1_and_skips_features() {
        // A descriptor too deep for 8x8 inputs would fail if it were run.
        let deep = Arc::new(ConvDescriptor::default_deep(0).unwrap());
        let cfg = LossConfig::new(0.0, deep).unwrap();
        let (l1, lp, total) = total_loss(&[t(0.9)], &[t(0.2)], &cfg).unwrap();
        assert_eq!(total, l1);
        assert_eq!(lp, 0.0);
    }

    #[test]
    fn extractor_failure_surfaces() {
        let deep = Arc::new(ConvDescriptor::default_deep(0).unwrap());
        let cfg = LossConfig::new(0.1, deep).unwrap();
        assert!(total_loss(&[t(0.9)], &[t(0.2)], &cfg).is_err());
    }

    #[test]
    fn mismatched_batches_rejected() {
        assert!(l1_loss(&[t(0.1)], &[]).is_err());
        assert!(l1_loss(&[t(0.1)], &[Tensor::filled(3, 4, 8, 0.1)]).is_err());
        assert!(LossConfig::new(-1.0, Arc::new(IdentityExtractor)).is_err());
    }

    #[test]
    fn tape_matches_direct() {
        let d = Arc::new(ConvDescriptor::default_perceptual(2).unwrap());
        let cfg = LossConfig::new(0.3, d).unwrap();
        let p = Tensor::from_vec(3, 8, 8, (0..192).map(|i| (i as f64 * 0.37).sin().abs()).collect()).unwrap();
        let q = t(0.4);
        let mut tape = Tape::new(0);
        let n = tape.leaf(p.clone());
        let g = loss_on_tape(&mut tape, n, &q, &cfg).unwrap();
        let (l1, lp, total) = total_loss(&[p], &[q], &cfg).unwrap();
        assert!((tape.get(g.total).item() - total).abs() < 1e-12);
        assert!((tape.get(g.terms[0]).item() - l1).abs() < 1e-12);
        assert!((tape.get(g.terms[1]).item() - lp).abs() < 1e-12);
    }
}
