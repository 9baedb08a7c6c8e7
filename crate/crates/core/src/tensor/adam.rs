use super::{Real, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Cosine decay from `base` to `floor` over `total` steps.
pub fn cosine_lr(base: f64, floor: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// First/second moment estimates for a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    step: u64,
}

impl<S: Real> AdamState<S> {
    pub fn new(config: AdamConfig, params: &[&Tensor<S>]) -> Self {
        AdamState {
            config,
            m: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update using each parameter's `grad` field.
    /// Parameters without a gradient still advance their moments with zero.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], lr: f64) -> Result<(), TensorError> {
        if params.len() != self.m.len() {
            return Err(TensorError::shape(
                "adam_step",
                format!("state for {} params, got {}", self.m.len(), params.len()),
            ));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let step_size = S::lit(lr / bc1);
        let inv_bc2 = S::lit(1.0 / bc2);
        let eps = S::lit(c.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if m.len() != p.numel() {
                return Err(TensorError::shape("adam_step", "moment/parameter size mismatch"));
            }
            let Some(g) = p.grad().map(|g| g.to_vec()) else {
                for (mi, vi) in m.iter_mut().zip(v.iter_mut()) {
                    *mi = *mi * b1;
                    *vi = *vi * b2;
                }
                continue;
            };
            let data = p.data_mut();
            for i in 0..data.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (S::one() - b1) * gi;
                v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                data[i] = data[i] - step_size * m[i] / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Tensor<f64> {
        Tensor::new(vec![1], vec![x]).unwrap().into_param()
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [1e-3, 1.0, 250.0] {
            let mut p = scalar(0.0);
            let cfg = AdamConfig {
                lr: 0.01,
                ..Default::default()
            };
            let mut st = AdamState::new(cfg, &[&p]);
            p.accumulate_grad(&[g]).unwrap();
            st.step(&mut [&mut p], cfg.lr).unwrap();
            assert!((p.data()[0].abs() - 0.01).abs() < 1e-6, "g={g}: {}", p.data()[0]);
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = scalar(0.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut st = AdamState::new(cfg, &[&p]);
        for _ in 0..500 {
            let x = p.data()[0];
            p.zero_grad();
            p.accumulate_grad(&[2.0 * (x - 3.0)]).unwrap();
            st.step(&mut [&mut p], cfg.lr).unwrap();
        }
        assert!((p.data()[0] - 3.0).abs() < 1e-2, "{}", p.data()[0]);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar(1.25);
        let mut st = AdamState::new(AdamConfig::default(), &[&p]);
        for _ in 0..10 {
            p.zero_grad();
            p.accumulate_grad(&[0.0]).unwrap();
            st.step(&mut [&mut p], 1e-3).unwrap();
        }
        assert!((p.data()[0] - 1.25).abs() < 1e-12);
        assert_eq!(st.steps(), 10);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1.0, 0.0, 0, 10), 1.0);
        assert!((cosine_lr(1.0, 1e-6, 10, 10) - 1e-6).abs() < 1e-15);
        assert!((cosine_lr(1.0, 0.0, 5, 10) - 0.5).abs() < 1e-12);
    }
}
