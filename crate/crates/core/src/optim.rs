//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::network::{to_storage, GradientStore, ParameterStore};

pub const DEFAULT_LR: f64 = 2e-4;

/// Moments are kept per parameter array, in [`ParameterStore::arrays`] order,
/// and rounded to `f32` like the parameters so checkpoints stay lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied updates; drives bias correction.
    pub step: u64,
    /// Updates rejected because of non-finite gradients.
    pub skipped: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepResult {
    Applied,
    SkippedNonFinite,
}

impl AdamState {
    pub fn new(params: &ParameterStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.arrays().map(|(_, a)| vec![0.0; a.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            skipped: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn check_against(&self, params: &ParameterStore) -> Result<()> {
        let lens: Vec<usize> = params.arrays().map(|(_, a)| a.len()).collect();
        let ok = |mom: &Vec<Vec<f64>>| {
            mom.len() == lens.len() && mom.iter().zip(&lens).all(|(a, n)| a.len() == *n)
        };
        if !ok(&self.m) || !ok(&self.v) {
            return Err(Error::ShapeMismatch(
                "optimizer moments do not mirror the parameters".into(),
            ));
        }
        Ok(())
    }

    /// One update. Non-finite gradients leave parameters and moments untouched.
    pub fn step(&mut self, params: &mut ParameterStore, grads: &GradientStore) -> Result<StepResult> {
        self.check_against(params)?;
        if !grads.is_finite() {
            self.skipped += 1;
            return Ok(StepResult::SkippedNonFinite);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .arrays_mut()
            .zip(grads.arrays())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            if p.len() != g.len() {
                return Err(Error::ShapeMismatch("gradient does not match parameter".into()));
            }
            for i in 0..p.len() {
                let gi = g[i];
                let mi = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                p[i] = to_storage(p[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps));
                m[i] = to_storage(mi);
                v[i] = to_storage(vi);
            }
        }
        Ok(StepResult::Applied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Layer, NetworkSpec};
    use crate::tensor::UpsampleMode;

    fn tiny() -> ParameterStore {
        let spec = NetworkSpec {
            name: "t".into(),
            layers: vec![Layer::Conv3x3 { in_ch: 1, out_ch: 1 }],
            dropout_rate: 0.0,
            dropout_everywhere: false,
            upsample: UpsampleMode::Bilinear,
        };
        ParameterStore::init(&spec, 1).unwrap()
    }

    fn grads_filled(params: &ParameterStore, v: f64) -> GradientStore {
        GradientStore::filled(params, v)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = tiny();
        let before = p.clone();
        let mut s = AdamState::new(&p, 1e-3);
        let r = s.step(&mut p, &GradientStore::zeros_like(&before)).unwrap();
        assert_eq!(r, StepResult::Applied);
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = tiny();
        let before = p.clone();
        let mut s = AdamState::new(&p, 1e-3);
        let g = grads_filled(&p, 1.0);
        s.step(&mut p, &g).unwrap();
        for ((_, a), (_, b)) in p.arrays().zip(before.arrays()) {
            for (x, y) in a.iter().zip(b) {
                assert!(((x - y) + 1e-3).abs() < 1e-6, "delta {}", x - y);
            }
        }
    }

    #[test]
    fn non_finite_gradients_are_skipped() {
        let mut p = tiny();
        let before = p.clone();
        let mut s = AdamState::new(&p, 1e-3);
        let g = grads_filled(&p, f64::NAN);
        let r = s.step(&mut p, &g).unwrap();
        assert_eq!(r, StepResult::SkippedNonFinite);
        assert_eq!(p, before);
        assert_eq!((s.step, s.skipped), (0, 1));
    }

    #[test]
    fn deterministic_trajectory() {
        let run = || {
            let mut p = tiny();
            let mut s = AdamState::new(&p, 2e-4);
            for k in 0..20 {
                let g = grads_filled(&p, (k as f64 * 0.37).sin());
                s.step(&mut p, &g).unwrap();
            }
            (p, s)
        };
        assert_eq!(run(), run());
    }
}
