//! PSNR, SSIM and Bjøntegaard delta rate.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dataio::Frame;
use crate::training::Ssim;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("BD-rate needs at least 4 points per curve, got {0}")]
    TooFewPoints(usize),
    #[error("quality ranges do not overlap")]
    NoOverlap,
    #[error("invalid rate point: {0}")]
    BadPoint(String),
    #[error("csv line {line}: {detail}")]
    Csv { line: usize, detail: String },
}

fn check_pair(x: &[Frame], y: &[Frame]) -> Result<(), MetricsError> {
    if x.len() != y.len() || x.is_empty() {
        return Err(MetricsError::Shape(format!("{} vs {} frames", x.len(), y.len())));
    }
    for (a, b) in x.iter().zip(y) {
        if a.height != b.height || a.width != b.width {
            return Err(MetricsError::Shape(format!(
                "{}x{} vs {}x{}",
                a.height, a.width, b.height, b.width
            )));
        }
    }
    Ok(())
}

fn sse(a: &Frame, b: &Frame) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            d * d
        })
        .sum()
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// PSNR of the MSE pooled over every frame; `+inf` for identical inputs.
pub fn psnr(x: &[Frame], y: &[Frame]) -> Result<f64, MetricsError> {
    check_pair(x, y)?;
    let total: f64 = x.iter().zip(y).map(|(a, b)| sse(a, b)).sum();
    let count: usize = x.iter().map(|f| f.data.len()).sum();
    Ok(psnr_from_mse(total / count as f64))
}

pub fn psnr_per_frame(x: &[Frame], y: &[Frame]) -> Result<Vec<f64>, MetricsError> {
    check_pair(x, y)?;
    Ok(x.iter()
        .zip(y)
        .map(|(a, b)| psnr_from_mse(sse(a, b) / a.data.len() as f64))
        .collect())
}

pub fn ssim_frame(x: &Frame, y: &Frame) -> f64 {
    Ssim::<f64>::new(x.height, x.width).mean(&x.to_planar(), &y.to_planar())
}

/// Mean scalar SSIM over frames.
pub fn ssim(x: &[Frame], y: &[Frame]) -> Result<f64, MetricsError> {
    check_pair(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| ssim_frame(a, b)).sum::<f64>() / x.len() as f64)
}

pub fn ssim_per_frame(x: &[Frame], y: &[Frame]) -> Result<Vec<f64>, MetricsError> {
    check_pair(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| ssim_frame(a, b)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RDPoint {
    pub bpp: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QualityKey {
    Psnr,
    Ssim,
}

impl QualityKey {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "psnr" => Some(QualityKey::Psnr),
            "ssim" => Some(QualityKey::Ssim),
            _ => None,
        }
    }

    fn of(self, p: &RDPoint) -> f64 {
        match self {
            QualityKey::Psnr => p.psnr,
            QualityKey::Ssim => p.ssim,
        }
    }
}

pub const RD_CSV_HEADER: &str = "bpp,psnr,ssim";

pub fn rd_to_csv(points: &[RDPoint]) -> String {
    let mut s = format!("{RD_CSV_HEADER}\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.bpp, p.psnr, p.ssim);
    }
    s
}

pub fn rd_from_csv(text: &str) -> Result<Vec<RDPoint>, MetricsError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == RD_CSV_HEADER => {}
        other => {
            return Err(MetricsError::Csv {
                line: other.map_or(1, |(i, _)| i + 1),
                detail: format!("expected header `{RD_CSV_HEADER}`"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let bad = |detail: String| MetricsError::Csv { line: i + 1, detail };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(bad(format!("expected 3 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("not a number: `{s}`")));
        let p = RDPoint {
            bpp: num(f[0])?,
            psnr: num(f[1])?,
            ssim: num(f[2])?,
        };
        if !(p.bpp > 0.0) {
            return Err(bad(format!("bpp must be positive, got {}", p.bpp)));
        }
        out.push(p);
    }
    Ok(out)
}

/// Least-squares cubic in the normalized quality `x`.
fn fit_cubic(x: &[f64], y: &[f64]) -> [f64; 4] {
    let a = DMatrix::from_fn(x.len(), 4, |i, j| x[i].powi(j as i32));
    let b = DVector::from_column_slice(y);
    let sol = a.svd(true, true).solve(&b, 1e-14).expect("SVD with both factors");
    [sol[0], sol[1], sol[2], sol[3]]
}

fn integral(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let prim = |x: f64| c[0] * x + c[1] * x * x / 2.0 + c[2] * x.powi(3) / 3.0 + c[3] * x.powi(4) / 4.0;
    prim(hi) - prim(lo)
}

/// Average rate difference of `test` against `anchor` at equal quality, in percent.
pub fn bd_rate(anchor: &[RDPoint], test: &[RDPoint], key: QualityKey) -> Result<f64, MetricsError> {
    for curve in [anchor, test] {
        if curve.len() < 4 {
            return Err(MetricsError::TooFewPoints(curve.len()));
        }
        if let Some(p) = curve.iter().find(|p| !(p.bpp > 0.0) || !key.of(p).is_finite()) {
            return Err(MetricsError::BadPoint(format!("{p:?}")));
        }
    }
    let qa: Vec<f64> = anchor.iter().map(|p| key.of(p)).collect();
    let qt: Vec<f64> = test.iter().map(|p| key.of(p)).collect();
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = (min(&qa).max(min(&qt)), max(&qa).min(max(&qt)));
    if !(hi > lo) {
        return Err(MetricsError::NoOverlap);
    }
    // shared affine normalization keeps the Vandermonde system well conditioned
    let all: Vec<f64> = qa.iter().chain(&qt).copied().collect();
    let center = 0.5 * (min(&all) + max(&all));
    let half = (0.5 * (max(&all) - min(&all))).max(1e-12);
    let norm = |q: &[f64]| q.iter().map(|v| (v - center) / half).collect::<Vec<f64>>();
    let ra: Vec<f64> = anchor.iter().map(|p| p.bpp.log10()).collect();
    let rt: Vec<f64> = test.iter().map(|p| p.bpp.log10()).collect();
    let ca = fit_cubic(&norm(&qa), &ra);
    let ct = fit_cubic(&norm(&qt), &rt);
    let (xl, xh) = ((lo - center) / half, (hi - center) / half);
    let diff = (integral(&ct, xl, xh) - integral(&ca, xl, xh)) / (xh - xl);
    Ok(100.0 * (10f64.powf(diff) - 1.0))
}
