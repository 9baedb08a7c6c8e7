//! End-to-end encode and decode of a multi-view sequence.

use std::time::Instant;

use thiserror::Error;

use crate::compress::{
    decode_model, encode_model, measure_bpp, prune_global, CompressError, Decoded, Encoded, PayloadMode, PruneMask,
};
use crate::config::{Config, ConfigError};
use crate::dataio::{DataError, VideoSequence};
use crate::metrics::{psnr, ssim, MetricsError};
use crate::model::Model;
use crate::motion::{build_masks, MotionMaskSet};
use crate::tensor::TensorError;
use crate::training::{finetune, train, TrainError, TrainLog};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("bitstream: {0}")]
    Compress(#[from] CompressError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug)]
pub struct EncodeOutcome {
    pub encoded: Encoded,
    pub train_log: TrainLog,
    pub finetune_log: Option<TrainLog>,
    /// decoder-side reconstruction rounded to 8 bits
    pub reconstruction: VideoSequence,
    pub bpp: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub seconds: f64,
}

pub fn motion_masks(video: &VideoSequence, cfg: &Config) -> Result<MotionMaskSet, CodecError> {
    Ok(match cfg.motion {
        Some(method) => build_masks(video, method, cfg.percentile, cfg.beta)?,
        None => MotionMaskSet::uniform(video.views, video.frames, video.height, video.width),
    })
}

pub fn new_model(video: &VideoSequence, cfg: &Config) -> Result<Model<f32>, CodecError> {
    let grid = cfg.grid_config(video.views, video.frames, video.height, video.width)?;
    let net = cfg.net_config(&grid)?;
    Ok(Model::random(grid, net, cfg.seed)?)
}

/// Rendered frames rounded to 8 bits, as the decoder writes them.
pub fn reconstruct(model: &Model<f32>) -> Result<VideoSequence, CodecError> {
    Ok(model.render_all()?.quantize8())
}

/// Trains, prunes, fine-tunes, quantizes and entropy-codes `video`.
pub fn encode_sequence(video: &VideoSequence, cfg: &Config) -> Result<EncodeOutcome, CodecError> {
    cfg.validate()?;
    let start = Instant::now();
    let masks = motion_masks(video, cfg)?;
    let mut model = new_model(video, cfg)?;
    let tc = cfg.train_config();
    let train_log = train(&mut model, video, &masks, &tc)?;
    let mut mask = None;
    let mut finetune_log = None;
    if cfg.sparsity > 0.0 || cfg.finetune_epochs > 0 {
        let m = if cfg.sparsity > 0.0 {
            prune_global(&model, cfg.sparsity, cfg.prune_scope)?
        } else {
            PruneMask::keep_all(&model)
        };
        finetune_log = Some(finetune(&mut model, video, &masks, &tc, &m, cfg.bits)?);
        mask = Some(m);
    }
    let mode = if cfg.bits == 32 {
        PayloadMode::Fp32
    } else {
        PayloadMode::Huffman
    };
    let encoded = encode_model(&model, mask.as_ref(), mode, cfg.bits)?;
    let reconstruction = reconstruct(&encoded.dequantized)?;
    let bpp = measure_bpp(encoded.bytes.len(), video.views, video.frames, video.height, video.width);
    let psnr = psnr(reconstruction.all_frames(), video.all_frames())?;
    let ssim = ssim(reconstruction.all_frames(), video.all_frames())?;
    Ok(EncodeOutcome {
        encoded,
        train_log,
        finetune_log,
        reconstruction,
        bpp,
        psnr,
        ssim,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn decode_stream(bytes: &[u8]) -> Result<(Decoded, VideoSequence), CodecError> {
    let decoded = decode_model(bytes)?;
    let frames = reconstruct(&decoded.model)?;
    Ok((decoded, frames))
}
