//! Windowed SSIM with an analytic gradient.
//!
//! 11×11 Gaussian window (σ = 1.5), `C1 = 0.01²`, `C2 = 0.03²` on unit-range
//! data. Window statistics near the border use the renormalized blur.

use crate::filter::Blur;
use crate::tensor::Real;

pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_RADIUS: usize = 5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

/// SSIM evaluator for planar images of one size.
#[derive(Debug, Clone)]
pub struct Ssim<S> {
    blur: Blur<S>,
    pub height: usize,
    pub width: usize,
}

/// Window statistics kept for the backward pass, one plane each.
struct Stats<S> {
    mx: Vec<S>,
    my: Vec<S>,
    a: Vec<S>,
    b: Vec<S>,
    c: Vec<S>,
    d: Vec<S>,
}

impl<S: Real> Ssim<S> {
    pub fn new(height: usize, width: usize) -> Self {
        Ssim {
            blur: Blur::new(SSIM_SIGMA, SSIM_RADIUS, height, width),
            height,
            width,
        }
    }

    fn stats(&self, x: &[S], y: &[S]) -> Stats<S> {
        let g = |v: &[S]| self.blur.apply(v);
        let prod = |a: &[S], b: &[S]| a.iter().zip(b).map(|(&p, &q)| p * q).collect::<Vec<S>>();
        let mx = g(x);
        let my = g(y);
        let exx = g(&prod(x, x));
        let eyy = g(&prod(y, y));
        let exy = g(&prod(x, y));
        let (c1, c2, two) = (S::lit(C1), S::lit(C2), S::lit(2.0));
        let n = x.len();
        let (mut a, mut b, mut c, mut d) = (vec![S::zero(); n], vec![S::zero(); n], vec![S::zero(); n], vec![S::zero(); n]);
        for i in 0..n {
            let (p, q) = (mx[i], my[i]);
            a[i] = two * p * q + c1;
            b[i] = two * (exy[i] - p * q) + c2;
            c[i] = p * p + q * q + c1;
            d[i] = (exx[i] - p * p) + (eyy[i] - q * q) + c2;
        }
        Stats { mx, my, a, b, c, d }
    }

    /// Per-pixel SSIM of one plane.
    pub fn plane_map(&self, x: &[S], y: &[S]) -> Vec<S> {
        let s = self.stats(x, y);
        (0..x.len()).map(|i| s.a[i] * s.b[i] / (s.c[i] * s.d[i])).collect()
    }

    /// Returns the map and `x ↦ Σ_i g_i · ∂map_i/∂x`, for upstream `g`.
    pub fn plane_map_vjp(&self, x: &[S], y: &[S], g: &[S]) -> (Vec<S>, Vec<S>) {
        let st = self.stats(x, y);
        let n = x.len();
        let two = S::lit(2.0);
        let mut map = vec![S::zero(); n];
        let mut g_mx = vec![S::zero(); n];
        let mut g_exx = vec![S::zero(); n];
        let mut g_exy = vec![S::zero(); n];
        for i in 0..n {
            let (a, b, c, d) = (st.a[i], st.b[i], st.c[i], st.d[i]);
            let cd = c * d;
            let s = a * b / cd;
            map[i] = s;
            let (p, q) = (st.mx[i], st.my[i]);
            // A, B, C, D as functions of (mx, exx, exy) with y fixed
            let ds_dmx = two * q * (b - a) / cd - two * p * s * (S::one() / c - S::one() / d);
            g_mx[i] = g[i] * ds_dmx;
            g_exx[i] = -g[i] * s / d;
            g_exy[i] = g[i] * two * a / cd;
        }
        let t_mx = self.blur.apply_adjoint(&g_mx);
        let t_exx = self.blur.apply_adjoint(&g_exx);
        let t_exy = self.blur.apply_adjoint(&g_exy);
        let grad = (0..n)
            .map(|i| t_mx[i] + two * x[i] * t_exx[i] + y[i] * t_exy[i])
            .collect();
        (map, grad)
    }

    /// Map of a planar `C × H × W` image pair, per channel.
    pub fn map(&self, x: &[S], y: &[S]) -> Vec<S> {
        let n = self.height * self.width;
        x.chunks_exact(n)
            .zip(y.chunks_exact(n))
            .flat_map(|(a, b)| self.plane_map(a, b))
            .collect()
    }

    /// Mean of the per-channel maps.
    pub fn mean(&self, x: &[S], y: &[S]) -> f64 {
        let m = self.map(x, y);
        m.iter().map(|v| v.as_f64()).sum::<f64>() / m.len() as f64
    }
}
