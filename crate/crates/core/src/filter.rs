//! Separable Gaussian filtering with border renormalization.
//!
//! Out-of-image taps are dropped and the remaining weights rescaled to sum
//! to one, so constant images stay constant up to the border.

use crate::tensor::Real;

/// Normalized 1-D Gaussian taps over `[-radius, radius]`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Precomputed separable filter for one image size.
#[derive(Debug, Clone)]
pub struct Blur<S> {
    taps: Vec<S>,
    radius: usize,
    height: usize,
    width: usize,
    inv_norm_x: Vec<S>,
    inv_norm_y: Vec<S>,
}

fn inv_norms<S: Real>(taps: &[S], radius: usize, len: usize) -> Vec<S> {
    (0..len)
        .map(|p| {
            let mut z = S::zero();
            for (i, &t) in taps.iter().enumerate() {
                let q = p as isize + i as isize - radius as isize;
                if q >= 0 && (q as usize) < len {
                    z = z + t;
                }
            }
            S::one() / z
        })
        .collect()
}

impl<S: Real> Blur<S> {
    pub fn new(sigma: f64, radius: usize, height: usize, width: usize) -> Self {
        let taps: Vec<S> = gaussian_kernel(sigma, radius).into_iter().map(S::lit).collect();
        Blur {
            inv_norm_x: inv_norms(&taps, radius, width),
            inv_norm_y: inv_norms(&taps, radius, height),
            taps,
            radius,
            height,
            width,
        }
    }

    fn pass_x(&self, src: &[S], dst: &mut [S], adjoint: bool) {
        let (w, r) = (self.width, self.radius);
        let mut scaled = vec![S::zero(); if adjoint { w } else { 0 }];
        for (srow, drow) in src.chunks_exact(w).zip(dst.chunks_exact_mut(w)) {
            let row: &[S] = if adjoint {
                for ((s, &v), &n) in scaled.iter_mut().zip(srow).zip(&self.inv_norm_x) {
                    *s = v * n;
                }
                &scaled
            } else {
                srow
            };
            for (x, d) in drow.iter_mut().enumerate() {
                let lo = x.saturating_sub(r);
                let hi = (x + r + 1).min(w);
                let taps = &self.taps[lo + r - x..];
                let acc = row[lo..hi]
                    .iter()
                    .zip(taps)
                    .fold(S::zero(), |a, (&v, &t)| a + t * v);
                *d = if adjoint { acc } else { acc * self.inv_norm_x[x] };
            }
        }
    }

    fn pass_y(&self, src: &[S], dst: &mut [S], adjoint: bool) {
        let (h, w, r) = (self.height as isize, self.width, self.radius as isize);
        dst.iter_mut().for_each(|d| *d = S::zero());
        for y in 0..self.height {
            let drow = &mut dst[y * w..(y + 1) * w];
            for (i, &t) in self.taps.iter().enumerate() {
                let q = y as isize + i as isize - r;
                if q < 0 || q >= h {
                    continue;
                }
                let q = q as usize;
                let coef = if adjoint { t * self.inv_norm_y[q] } else { t };
                let srow = &src[q * w..(q + 1) * w];
                for (d, &s) in drow.iter_mut().zip(srow) {
                    *d = *d + coef * s;
                }
            }
            if !adjoint {
                let n = self.inv_norm_y[y];
                drow.iter_mut().for_each(|d| *d = *d * n);
            }
        }
    }

    /// Filters one `height × width` plane.
    pub fn apply(&self, src: &[S]) -> Vec<S> {
        let mut tmp = vec![S::zero(); src.len()];
        let mut out = vec![S::zero(); src.len()];
        self.pass_x(src, &mut tmp, false);
        self.pass_y(&tmp, &mut out, false);
        out
    }

    /// Transpose of [`Self::apply`].
    pub fn apply_adjoint(&self, src: &[S]) -> Vec<S> {
        let mut tmp = vec![S::zero(); src.len()];
        let mut out = vec![S::zero(); src.len()];
        self.pass_y(src, &mut tmp, true);
        self.pass_x(&tmp, &mut out, true);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(1.5, 5);
        assert_eq!(k.len(), 11);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((k[0] - k[10]).abs() < 1e-15);
    }

    #[test]
    fn constant_plane_is_preserved() {
        let b = Blur::<f64>::new(1.5, 5, 7, 4);
        let out = b.apply(&[0.3; 28]);
        assert!(out.iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn adjoint_identity() {
        let b = Blur::<f64>::new(1.5, 5, 6, 9);
        let x: Vec<f64> = (0..54).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..54).map(|i| ((i * 13) % 7) as f64 * 0.5).collect();
        let lhs: f64 = b.apply(&x).iter().zip(&y).map(|(a, c)| a * c).sum();
        let rhs: f64 = x.iter().zip(b.apply_adjoint(&y)).map(|(a, c)| a * c).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
