//! Motion-weighted L1 + SSIM reconstruction loss as a fused tape op.

use std::rc::Rc;

use super::ssim::Ssim;
use crate::tensor::{CustomOp, Real, TensorError};

/// `mean_{c,p} w_p · (alpha·|r − t| + (1 − alpha)·(1 − SSIM_c(p)))` for a
/// `[1, 3, H, W]` reconstruction against a fixed planar target.
pub struct MotionLoss<S> {
    pub target: Rc<Vec<S>>,
    /// `H × W`, shared by the three channels
    pub weight: Rc<Vec<S>>,
    pub alpha: S,
    pub ssim: Rc<Ssim<S>>,
}

impl<S: Real> MotionLoss<S> {
    fn plane(&self) -> usize {
        self.ssim.height * self.ssim.width
    }

    fn check(&self, shape: &[usize]) -> Result<(), TensorError> {
        let want = [1, 3, self.ssim.height, self.ssim.width];
        if shape != want || self.target.len() != 3 * self.plane() || self.weight.len() != self.plane() {
            return Err(TensorError::shape(
                "motion_loss",
                format!("recon {shape:?}, expected {want:?} with matching target and weight"),
            ));
        }
        Ok(())
    }

    /// Loss value of a planar reconstruction.
    pub fn value(&self, recon: &[S]) -> S {
        let n = self.plane();
        let (alpha, one) = (self.alpha, S::one());
        let mut acc = S::zero();
        for c in 0..3 {
            let (r, t) = (&recon[c * n..(c + 1) * n], &self.target[c * n..(c + 1) * n]);
            let map = if alpha < one { Some(self.ssim.plane_map(r, t)) } else { None };
            for p in 0..n {
                let mut e = alpha * (r[p] - t[p]).abs();
                if let Some(m) = &map {
                    e = e + (one - alpha) * (one - m[p]);
                }
                acc = acc + self.weight[p] * e;
            }
        }
        acc / S::lit((3 * n) as f64)
    }
}

impl<S: Real> CustomOp<S> for MotionLoss<S> {
    fn name(&self) -> &'static str {
        "motion_loss"
    }

    fn forward(&self, inputs: &[(&[S], &[usize])]) -> Result<(Vec<S>, Vec<usize>), TensorError> {
        let (recon, shape) = inputs[0];
        self.check(shape)?;
        Ok((vec![self.value(recon)], Vec::new()))
    }

    fn backward(&self, inputs: &[(&[S], &[usize])], grad_out: &[S], needs: &[bool]) -> Vec<Option<Vec<S>>> {
        if !needs[0] {
            return vec![None];
        }
        let recon = inputs[0].0;
        let n = self.plane();
        let (alpha, one) = (self.alpha, S::one());
        let scale = grad_out[0] / S::lit((3 * n) as f64);
        let mut grad = vec![S::zero(); 3 * n];
        for c in 0..3 {
            let (r, t) = (&recon[c * n..(c + 1) * n], &self.target[c * n..(c + 1) * n]);
            let g = &mut grad[c * n..(c + 1) * n];
            for p in 0..n {
                let d = r[p] - t[p];
                let sign = if d > S::zero() {
                    one
                } else if d < S::zero() {
                    -one
                } else {
                    S::zero()
                };
                g[p] = scale * self.weight[p] * alpha * sign;
            }
            if alpha < one {
                let upstream: Vec<S> = self.weight.iter().map(|&w| -scale * (one - alpha) * w).collect();
                let (_, gs) = self.ssim.plane_map_vjp(r, t, &upstream);
                for (gp, s) in g.iter_mut().zip(gs) {
                    *gp = *gp + s;
                }
            }
        }
        vec![Some(grad)]
    }
}
