//! Encode-time optimization: the motion-aware loss, training and
//! quantization-aware fine-tuning.

mod loss;
mod ssim;

pub use loss::MotionLoss;
pub use ssim::{Ssim, C1, C2, SSIM_RADIUS, SSIM_SIGMA};

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::compress::{fake_quantize, CompressError, PruneMask};
use crate::dataio::{Frame, VideoSequence};
use crate::model::Model;
use crate::motion::MotionMaskSet;
use crate::tensor::{cosine_lr, AdamConfig, AdamState, Real, Tape, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub finetune_epochs: usize,
    /// L1 weight; SSIM gets `1 - alpha`
    pub alpha: f64,
    pub lr: f64,
    /// cosine floor
    pub lr_min: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 2,
            finetune_epochs: 100,
            alpha: 0.7,
            lr: 5e-4,
            lr_min: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// PSNR of the reconstructions seen during the epoch
    pub psnr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,psnr,seconds\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.loss, r.psnr, r.seconds);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Model state captured when training diverged.
pub struct Snapshot(pub Box<Model<f64>>);

impl fmt::Debug for Snapshot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Snapshot({} params)", self.0.param_count())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(TensorError),
    #[error("non-finite value at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
        snapshot: Snapshot,
    },
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error("video does not match model: {0}")]
    Mismatch(String),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

/// Pixelwise SSIM map of two frames, planar per channel.
pub fn ssim_map(x: &Frame, y: &Frame) -> Result<Vec<f64>, TrainError> {
    if x.height != y.height || x.width != y.width {
        return Err(TrainError::Mismatch(format!(
            "ssim of {}x{} and {}x{}",
            x.height, x.width, y.height, y.width
        )));
    }
    Ok(Ssim::<f64>::new(x.height, x.width).map(&x.to_planar(), &y.to_planar()))
}

/// Scalar loss of one frame; `weight` is `H × W`.
pub fn motion_loss(recon: &Frame, target: &Frame, weight: &[f32], alpha: f64) -> Result<f64, TrainError> {
    if recon.height != target.height || recon.width != target.width || weight.len() != recon.pixels() {
        return Err(TrainError::Mismatch("loss operands differ in size".into()));
    }
    let op = MotionLoss {
        target: Rc::new(target.to_planar::<f64>()),
        weight: Rc::new(weight.iter().map(|&w| w as f64).collect()),
        alpha,
        ssim: Rc::new(Ssim::new(recon.height, recon.width)),
    };
    Ok(op.value(&recon.to_planar()))
}

/// Per-(view, frame) targets in the training precision.
struct Targets<S> {
    frames: usize,
    images: Vec<Rc<Vec<S>>>,
    weights: Vec<Rc<Vec<S>>>,
}

impl<S: Real> Targets<S> {
    fn new(video: &VideoSequence, masks: &MotionMaskSet) -> Self {
        let mut images = Vec::new();
        let mut weights = Vec::new();
        for v in 0..video.views {
            for t in 0..video.frames {
                images.push(Rc::new(video.frame(v, t).to_planar()));
                let w = masks.effective_weight(v, t);
                weights.push(Rc::new(w.iter().map(|&x| S::lit(x as f64)).collect()));
            }
        }
        Targets {
            frames: video.frames,
            images,
            weights,
        }
    }

    fn index(&self, t: usize, v: usize) -> usize {
        v * self.frames + t
    }
}

fn check_inputs<S: Real>(
    model: &Model<S>,
    video: &VideoSequence,
    masks: &MotionMaskSet,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let g = &model.grid.config;
    let (h, w) = model.output_size();
    if (video.views, video.frames, video.height, video.width) != (g.views, g.frames, h, w) {
        return Err(TrainError::Mismatch(format!(
            "video {}x{} of {}x{}, model {}x{} of {h}x{w}",
            video.views, video.frames, video.height, video.width, g.views, g.frames
        )));
    }
    if (masks.views, masks.frames, masks.height, masks.width) != (video.views, video.frames, h, w) {
        return Err(TrainError::Mismatch("motion masks do not match the video".into()));
    }
    if cfg.batch_size == 0 || !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(TrainError::Mismatch("batch_size must be >= 1 and alpha in [0, 1]".into()));
    }
    Ok(())
}

/// Quantization-aware forward: pruned positions and the quantizer.
struct Qat<'a> {
    mask: &'a PruneMask,
    bits: u32,
}

impl Qat<'_> {
    fn effective<S: Real>(&self, model: &Model<S>) -> Result<Model<S>, TrainError> {
        let mut eff = model.clone();
        for (i, t) in eff.tensors_mut().into_iter().enumerate() {
            t.zero_grad();
            if let Some(keep) = self.mask.keep(i) {
                for (x, &k) in t.data_mut().iter_mut().zip(keep) {
                    if !k {
                        *x = S::zero();
                    }
                }
            }
            let q = fake_quantize(t.data(), self.bits)?;
            t.data_mut().copy_from_slice(&q);
        }
        Ok(eff)
    }

    fn mask_grads<S: Real>(&self, params: &mut [&mut Tensor<S>]) {
        for (i, t) in params.iter_mut().enumerate() {
            if let (Some(keep), Some(g)) = (self.mask.keep(i), t.grad_mut()) {
                for (x, &k) in g.iter_mut().zip(keep) {
                    if !k {
                        *x = S::zero();
                    }
                }
            }
        }
    }
}

fn diverged<S: Real>(model: &Model<S>, epoch: usize, step: usize, detail: String) -> TrainError {
    TrainError::Diverged {
        epoch,
        step,
        detail,
        snapshot: Snapshot(Box::new(model.cast())),
    }
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

fn run<S: Real>(
    model: &mut Model<S>,
    video: &VideoSequence,
    masks: &MotionMaskSet,
    cfg: &TrainConfig,
    epochs: usize,
    qat: Option<Qat<'_>>,
) -> Result<TrainLog, TrainError> {
    check_inputs(model, video, masks, cfg)?;
    let targets = Targets::<S>::new(video, masks);
    let (h, w) = model.output_size();
    let ssim = Rc::new(Ssim::<S>::new(h, w));
    let alpha = S::lit(cfg.alpha);

    let mut pairs: Vec<(usize, usize)> = (0..video.views)
        .flat_map(|v| (0..video.frames).map(move |t| (t, v)))
        .collect();
    let steps_per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let total_steps = epochs * steps_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = {
        let refs: Vec<&Tensor<S>> = model.named_tensors().into_iter().map(|(_, t)| t).collect();
        AdamState::new(
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            &refs,
        )
    };
    let mut log = TrainLog::default();
    let start = Instant::now();
    let mut step = 0;
    for epoch in 0..epochs {
        pairs.shuffle(&mut rng);
        let (mut loss_sum, mut sq_err, mut count) = (0.0f64, 0.0f64, 0usize);
        for batch in pairs.chunks(cfg.batch_size) {
            let eff = match &qat {
                Some(q) => Some(q.effective(model)?),
                None => None,
            };
            let net = eff.as_ref().unwrap_or(model);
            let mut tape = Tape::new();
            let vars = net.bind(&mut tape);
            let mut total = None;
            for &(t, v) in batch {
                let idx = targets.index(t, v);
                let recon = match net.forward(&mut tape, &vars, t, v) {
                    Ok(r) => r,
                    Err(TensorError::NonFinite { op }) => {
                        return Err(diverged(model, epoch, step, format!("forward produced non-finite values in {op}")))
                    }
                    Err(e) => return Err(e.into()),
                };
                for (r, y) in tape.value(recon).iter().zip(targets.images[idx].iter()) {
                    let d = (*r - *y).as_f64();
                    sq_err += d * d;
                }
                count += 3 * h * w;
                let l = tape.custom(
                    &[recon],
                    Box::new(MotionLoss {
                        target: targets.images[idx].clone(),
                        weight: targets.weights[idx].clone(),
                        alpha,
                        ssim: ssim.clone(),
                    }),
                )?;
                total = Some(match total {
                    None => l,
                    Some(acc) => tape.add(acc, l)?,
                });
            }
            let total = total.expect("non-empty batch");
            let loss = tape.scalar_mul(total, S::lit(1.0 / batch.len() as f64))?;
            let value = tape.value(loss)[0].as_f64();
            if !value.is_finite() {
                return Err(diverged(model, epoch, step, format!("loss is {value}")));
            }
            loss_sum += value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            let mut params = model.tensors_mut();
            params.iter_mut().for_each(|p| p.zero_grad());
            grads.apply_to(&mut params)?;
            if let Some(q) = &qat {
                q.mask_grads(&mut params);
            }
            adam.step(&mut params, cosine_lr(cfg.lr, cfg.lr_min, step, total_steps))?;
            params.iter_mut().for_each(|p| p.zero_grad());
            drop(params);
            if let Some(q) = &qat {
                q.mask.apply(model);
            }
            if model.tensors_mut().iter().any(|t| !t.is_finite()) {
                return Err(diverged(model, epoch, step, "parameters became non-finite".into()));
            }
            step += 1;
        }
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / pairs.len() as f64,
            psnr: psnr_from_mse(sq_err / count as f64),
            seconds: start.elapsed().as_secs_f64(),
        };
        log::debug!("epoch {epoch}: loss {:.6} psnr {:.3}", rec.loss, rec.psnr);
        log.records.push(rec);
    }
    Ok(log)
}

/// Overfits `model` to `video` for `cfg.epochs` epochs.
pub fn train<S: Real>(
    model: &mut Model<S>,
    video: &VideoSequence,
    masks: &MotionMaskSet,
    cfg: &TrainConfig,
) -> Result<TrainLog, TrainError> {
    run(model, video, masks, cfg, cfg.epochs, None)
}

/// `cfg.finetune_epochs` of training through the pruning mask and a
/// `bits`-bit quantizer, with straight-through gradients. `bits = 32`
/// disables quantization.
pub fn finetune<S: Real>(
    model: &mut Model<S>,
    video: &VideoSequence,
    masks: &MotionMaskSet,
    cfg: &TrainConfig,
    mask: &PruneMask,
    bits: u32,
) -> Result<TrainLog, TrainError> {
    mask.apply(model);
    run(model, video, masks, cfg, cfg.finetune_epochs, Some(Qat { mask, bits }))
}
