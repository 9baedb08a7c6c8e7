//! Dense motion estimation and per-pixel motion masks for loss weighting.

use std::path::Path;

use crate::dataio::{write_pgm, DataError, Frame, VideoSequence};
use crate::filter::Blur;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MotionMethod {
    /// Horn–Schunck dense flow
    #[default]
    HornSchunck,
    /// blurred absolute luma difference as a direction-free pseudo-flow
    TemporalDiff,
}

impl MotionMethod {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hs" => Some(MotionMethod::HornSchunck),
            "tdiff" => Some(MotionMethod::TemporalDiff),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionMethod::HornSchunck => "hs",
            MotionMethod::TemporalDiff => "tdiff",
        }
    }
}

/// Per-pixel displacement in px/frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            u: vec![0.0; height * width],
            v: vec![0.0; height * width],
        }
    }

    pub fn magnitude(&self) -> Vec<f32> {
        self.u.iter().zip(&self.v).map(|(a, b)| a.hypot(*b)).collect()
    }
}

/// Dense estimator between two luma planes.
pub trait FlowEstimator {
    fn estimate(&self, a: &[f32], b: &[f32], height: usize, width: usize) -> FlowField;
}

#[derive(Debug, Clone, Copy)]
pub struct HornSchunck {
    pub iterations: usize,
    /// smoothness weight; the regularizer is `alpha^2`
    pub alpha: f32,
    /// Gaussian pre-smoothing of both planes; 0 disables it
    pub presmooth: f64,
}

impl Default for HornSchunck {
    fn default() -> Self {
        HornSchunck {
            iterations: 100,
            alpha: 0.5,
            presmooth: 1.0,
        }
    }
}

impl FlowEstimator for HornSchunck {
    fn estimate(&self, a: &[f32], b: &[f32], height: usize, width: usize) -> FlowField {
        let (a, b) = if self.presmooth > 0.0 {
            let blur = Blur::<f32>::new(self.presmooth, (3.0 * self.presmooth).ceil() as usize, height, width);
            (blur.apply(a), blur.apply(b))
        } else {
            (a.to_vec(), b.to_vec())
        };
        let (a, b) = (a.as_slice(), b.as_slice());
        let (h, w) = (height as isize, width as isize);
        let at = |img: &[f32], y: isize, x: isize| {
            img[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize]
        };
        let n = height * width;
        let (mut ex, mut ey, mut et) = (vec![0.0f32; n], vec![0.0f32; n], vec![0.0f32; n]);
        // derivatives averaged over the 2×2×2 cube
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) as usize;
                let (a00, a01, a10, a11) = (at(a, y, x), at(a, y, x + 1), at(a, y + 1, x), at(a, y + 1, x + 1));
                let (b00, b01, b10, b11) = (at(b, y, x), at(b, y, x + 1), at(b, y + 1, x), at(b, y + 1, x + 1));
                ex[i] = 0.25 * ((a01 - a00) + (a11 - a10) + (b01 - b00) + (b11 - b10));
                ey[i] = 0.25 * ((a10 - a00) + (a11 - a01) + (b10 - b00) + (b11 - b01));
                et[i] = 0.25 * ((b00 - a00) + (b01 - a01) + (b10 - a10) + (b11 - a11));
            }
        }
        let alpha2 = self.alpha * self.alpha;
        let mut u = vec![0.0f32; n];
        let mut v = vec![0.0f32; n];
        let mut nu = vec![0.0f32; n];
        let mut nv = vec![0.0f32; n];
        for _ in 0..self.iterations {
            for y in 0..h {
                for x in 0..w {
                    let avg = |f: &[f32]| {
                        (at(f, y - 1, x) + at(f, y + 1, x) + at(f, y, x - 1) + at(f, y, x + 1)) / 6.0
                            + (at(f, y - 1, x - 1)
                                + at(f, y - 1, x + 1)
                                + at(f, y + 1, x - 1)
                                + at(f, y + 1, x + 1))
                                / 12.0
                    };
                    let i = (y * w + x) as usize;
                    let (ub, vb) = (avg(&u), avg(&v));
                    let r = (ex[i] * ub + ey[i] * vb + et[i]) / (alpha2 + ex[i] * ex[i] + ey[i] * ey[i]);
                    nu[i] = ub - ex[i] * r;
                    nv[i] = vb - ey[i] * r;
                }
            }
            std::mem::swap(&mut u, &mut nu);
            std::mem::swap(&mut v, &mut nv);
        }
        FlowField {
            height,
            width,
            u,
            v,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TemporalDiff {
    pub sigma: f64,
}

impl Default for TemporalDiff {
    fn default() -> Self {
        TemporalDiff { sigma: 1.5 }
    }
}

impl TemporalDiff {
    pub fn radius(&self) -> usize {
        (3.0 * self.sigma).ceil() as usize
    }
}

impl FlowEstimator for TemporalDiff {
    fn estimate(&self, a: &[f32], b: &[f32], height: usize, width: usize) -> FlowField {
        let diff: Vec<f32> = a.iter().zip(b).map(|(x, y)| (y - x).abs()).collect();
        let blur = Blur::<f32>::new(self.sigma, self.radius(), height, width);
        FlowField {
            height,
            width,
            u: blur.apply(&diff),
            v: vec![0.0; height * width],
        }
    }
}

pub fn compute_flow(a: &Frame, b: &Frame, method: MotionMethod) -> Result<FlowField, DataError> {
    if a.height != b.height || a.width != b.width {
        return Err(DataError::Invalid(format!(
            "flow between {}x{} and {}x{} frames",
            a.height, a.width, b.height, b.width
        )));
    }
    let (la, lb) = (a.luma(), b.luma());
    Ok(match method {
        MotionMethod::HornSchunck => HornSchunck::default().estimate(&la, &lb, a.height, a.width),
        MotionMethod::TemporalDiff => TemporalDiff::default().estimate(&la, &lb, a.height, a.width),
    })
}

/// Linear-interpolated percentile, `p` in `[0, 100]`.
pub fn percentile(values: &[f32], p: f64) -> f32 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let pos = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = (pos - lo as f64) as f32;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Motion intensity in `[0, 1]` per `(view, frame)` pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionMaskSet {
    pub views: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub beta: f32,
    pub percentile: f64,
    /// view-major, `H × W` each
    masks: Vec<Vec<f32>>,
}

impl MotionMaskSet {
    /// All-ones masks: every pixel gets full weight.
    pub fn uniform(views: usize, frames: usize, height: usize, width: usize) -> Self {
        MotionMaskSet {
            views,
            frames,
            height,
            width,
            beta: 1.0,
            percentile: 100.0,
            masks: vec![vec![1.0; height * width]; views * frames],
        }
    }

    pub fn mask(&self, view: usize, t: usize) -> &[f32] {
        &self.masks[view * self.frames + t]
    }

    /// `(1 - beta) + beta * mask`
    pub fn effective_weight(&self, view: usize, t: usize) -> Vec<f32> {
        let floor = 1.0 - self.beta;
        self.mask(view, t).iter().map(|m| floor + self.beta * m).collect()
    }

    pub fn dump_pgm(&self, dir: &Path) -> Result<(), DataError> {
        for v in 0..self.views {
            for t in 0..self.frames {
                let path = dir.join(format!("v{v:02}")).join(format!("m{t:04}.pgm"));
                write_pgm(&path, self.width, self.height, self.mask(v, t))?;
            }
        }
        Ok(())
    }
}

pub fn build_masks(
    video: &VideoSequence,
    method: MotionMethod,
    p: f64,
    beta: f32,
) -> Result<MotionMaskSet, DataError> {
    let (n, t_len, h, w) = (video.views, video.frames, video.height, video.width);
    if t_len < 2 {
        log::warn!("motion masks need at least 2 frames; using uniform weights");
        let mut m = MotionMaskSet::uniform(n, t_len, h, w);
        m.beta = beta;
        m.percentile = p;
        return Ok(m);
    }
    let mut masks = Vec::with_capacity(n * t_len);
    for v in 0..n {
        let mut raw: Vec<Vec<f32>> = (0..t_len - 1)
            .map(|j| {
                compute_flow(video.frame(v, j), video.frame(v, j + 1), method).map(|f| f.magnitude())
            })
            .collect::<Result<_, _>>()?;
        raw.push(raw[t_len - 2].clone());
        let all: Vec<f32> = raw.iter().flatten().copied().collect();
        let scale = percentile(&all, p);
        for m in raw {
            masks.push(if scale > 1e-12 {
                m.iter().map(|x| (x / scale).clamp(0.0, 1.0)).collect()
            } else {
                vec![0.0; h * w]
            });
        }
    }
    Ok(MotionMaskSet {
        views: n,
        frames: t_len,
        height: h,
        width: w,
        beta,
        percentile: p,
        masks,
    })
}
