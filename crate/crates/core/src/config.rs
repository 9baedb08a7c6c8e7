//! Plain-text `key=value` configuration with validated defaults.

use std::fmt::Write as _;

use thiserror::Error;

use crate::compress::PruneScope;
use crate::multigrid::GridConfig;
use crate::motion::MotionMethod;
use crate::synthesis::{default_channels, NetConfig};
use crate::tensor::Activation;
use crate::training::TrainConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {detail}")]
    Syntax { line: usize, detail: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("`{key}`: {detail}")]
    Value { key: String, detail: String },
}

fn value_err(key: &str, detail: impl Into<String>) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        detail: detail.into(),
    }
}

/// Splits `key=value` lines. Blank lines and `#` comments are skipped;
/// repeated keys are kept in order.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: i + 1,
                detail: format!("expected key=value, got `{line}`"),
            });
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                detail: "empty key".into(),
            });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Latent channel counts of the rate ladder and the net width used with each.
pub const QUALITY_LADDER: [(usize, f64); 5] = [(20, 0.5), (30, 0.75), (40, 1.0), (60, 1.25), (80, 1.5)];

/// Every tunable of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub latent_channels: usize,
    /// explicit split overrides; `None` uses the 9:1 default
    pub c1: Option<usize>,
    pub c2: Option<usize>,
    pub upscales: Vec<usize>,
    /// explicit stage widths; empty uses the default schedule times `width_mult`
    pub channels: Vec<usize>,
    pub width_mult: f64,
    pub ge_channels: usize,
    pub activation: Activation,
    /// `None` trains with uniform weights
    pub motion: Option<MotionMethod>,
    pub percentile: f64,
    pub beta: f32,
    pub alpha: f64,
    pub lr: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub finetune_epochs: usize,
    pub seed: u64,
    pub sparsity: f64,
    pub prune_scope: PruneScope,
    pub bits: u32,
}

impl Default for Config {
    fn default() -> Self {
        let train = TrainConfig::default();
        Config {
            latent_channels: 40,
            c1: None,
            c2: None,
            upscales: vec![2, 2, 2],
            channels: Vec::new(),
            width_mult: 1.0,
            ge_channels: 2,
            activation: Activation::Gelu,
            motion: Some(MotionMethod::HornSchunck),
            percentile: 98.0,
            beta: 0.5,
            alpha: train.alpha,
            lr: train.lr,
            lr_min: train.lr_min,
            epochs: train.epochs,
            batch_size: train.batch_size,
            finetune_epochs: train.finetune_epochs,
            seed: train.seed,
            sparsity: 0.4,
            prune_scope: PruneScope::SynthesisOnly,
            bits: 8,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| value_err(key, format!("cannot parse `{v}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>, ConfigError> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        for (key, v) in parse_key_values(text)? {
            cfg.set(&key, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "latent_channels" => self.latent_channels = parse_num(key, v)?,
            "c1" => self.c1 = Some(parse_num(key, v)?),
            "c2" => self.c2 = Some(parse_num(key, v)?),
            "upscales" => self.upscales = parse_list(key, v)?,
            "channels" => self.channels = parse_list(key, v)?,
            "width_mult" => self.width_mult = parse_num(key, v)?,
            "ge_channels" => self.ge_channels = parse_num(key, v)?,
            "activation" => {
                self.activation = match v {
                    "gelu" => Activation::Gelu,
                    "relu" => Activation::Relu,
                    _ => return Err(value_err(key, format!("expected gelu|relu, got `{v}`"))),
                }
            }
            "motion" => {
                self.motion = match v {
                    "none" => None,
                    _ => Some(
                        MotionMethod::parse(v)
                            .ok_or_else(|| value_err(key, format!("expected hs|tdiff|none, got `{v}`")))?,
                    ),
                }
            }
            "percentile" => self.percentile = parse_num(key, v)?,
            "beta" => self.beta = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "lr_min" => self.lr_min = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "finetune_epochs" => self.finetune_epochs = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "sparsity" => self.sparsity = parse_num(key, v)?,
            "prune_scope" => {
                self.prune_scope = PruneScope::parse(v)
                    .ok_or_else(|| value_err(key, format!("expected synthesis_only|all, got `{v}`")))?
            }
            "bits" => self.bits = parse_num(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Sets the latent channels and width from the rate ladder.
    pub fn set_quality(&mut self, c: usize) -> Result<(), ConfigError> {
        let &(c, mult) = QUALITY_LADDER
            .iter()
            .find(|(q, _)| *q == c)
            .ok_or_else(|| value_err("quality", format!("{c} is not one of 20,30,40,60,80")))?;
        self.latent_channels = c;
        self.width_mult = mult;
        self.c1 = None;
        self.c2 = None;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |ok: bool, key: &str, detail: &str| if ok { Ok(()) } else { Err(value_err(key, detail)) };
        check(self.latent_channels >= 1, "latent_channels", "must be >= 1")?;
        if let (Some(c1), Some(c2)) = (self.c1, self.c2) {
            check(c1 + c2 >= 1, "c1", "c1 + c2 must be >= 1")?;
        }
        check(!self.upscales.is_empty(), "upscales", "need at least one stage")?;
        check(self.upscales.iter().all(|&s| (1..=16).contains(&s)), "upscales", "factors must be in 1..=16")?;
        check(
            self.channels.is_empty() || self.channels.len() == self.upscales.len(),
            "channels",
            "needs one entry per upscale factor",
        )?;
        check(self.channels.iter().all(|&c| c >= 1), "channels", "widths must be >= 1")?;
        check(self.width_mult > 0.0 && self.width_mult.is_finite(), "width_mult", "must be positive")?;
        check(self.ge_channels <= 255, "ge_channels", "must fit in one byte")?;
        check((0.0..=100.0).contains(&self.percentile), "percentile", "must be in [0, 100]")?;
        check((0.0..=1.0).contains(&self.beta), "beta", "must be in [0, 1]")?;
        check((0.0..=1.0).contains(&self.alpha), "alpha", "must be in [0, 1]")?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be positive")?;
        check(self.lr_min >= 0.0 && self.lr_min <= self.lr, "lr_min", "must be in [0, lr]")?;
        check(self.batch_size >= 1, "batch_size", "must be >= 1")?;
        check((0.0..1.0).contains(&self.sparsity), "sparsity", "must be in [0, 1)")?;
        check((2..=8).contains(&self.bits) || self.bits == 32, "bits", "must be in 2..=8 or 32")?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("latent_channels", self.latent_channels.to_string());
        if let Some(c1) = self.c1 {
            put("c1", c1.to_string());
        }
        if let Some(c2) = self.c2 {
            put("c2", c2.to_string());
        }
        put("upscales", join(&self.upscales));
        put("channels", join(&self.channels));
        put("width_mult", self.width_mult.to_string());
        put("ge_channels", self.ge_channels.to_string());
        put(
            "activation",
            match self.activation {
                Activation::Gelu => "gelu",
                Activation::Relu => "relu",
            }
            .into(),
        );
        put("motion", self.motion.map_or("none", |m| m.name()).into());
        put("percentile", self.percentile.to_string());
        put("beta", self.beta.to_string());
        put("alpha", self.alpha.to_string());
        put("lr", self.lr.to_string());
        put("lr_min", self.lr_min.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("finetune_epochs", self.finetune_epochs.to_string());
        put("seed", self.seed.to_string());
        put("sparsity", self.sparsity.to_string());
        put("prune_scope", self.prune_scope.name().into());
        put("bits", self.bits.to_string());
        s
    }

    /// Latent grid for a `views × frames` sequence of `height × width` frames.
    pub fn grid_config(
        &self,
        views: usize,
        frames: usize,
        height: usize,
        width: usize,
    ) -> Result<GridConfig, ConfigError> {
        let s: usize = self.upscales.iter().product();
        if height % s != 0 || width % s != 0 {
            return Err(value_err(
                "upscales",
                format!("total factor {s} does not divide the {height}x{width} frame"),
            ));
        }
        let (h, w) = (height / s, width / s);
        if h > 255 || w > 255 {
            return Err(value_err("upscales", format!("latent {h}x{w} exceeds 255")));
        }
        let c = self.latent_channels;
        let grid = match (self.c1, self.c2) {
            (None, None) => GridConfig::with_channels(frames, views, h, w, c),
            (Some(c1), None) => GridConfig::custom(frames, views, h, w, c1, c.saturating_sub(c1)),
            (None, Some(c2)) => GridConfig::custom(frames, views, h, w, c.saturating_sub(c2), c2),
            (Some(c1), Some(c2)) => GridConfig::custom(frames, views, h, w, c1, c2),
        };
        grid.map_err(|e| value_err("latent_channels", e.to_string()))
    }

    pub fn net_config(&self, grid: &GridConfig) -> Result<NetConfig, ConfigError> {
        let channels = if self.channels.is_empty() {
            default_channels(self.upscales.len(), self.width_mult)
        } else {
            self.channels.clone()
        };
        let net = NetConfig {
            in_channels: grid.channels(),
            upscales: self.upscales.clone(),
            channels,
            activation: self.activation,
            ge_channels: self.ge_channels,
            frames: grid.frames,
            views: grid.views,
            h: grid.h,
            w: grid.w,
        };
        net.validate().map_err(|e| value_err("channels", e.to_string()))?;
        Ok(net)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            finetune_epochs: self.finetune_epochs,
            alpha: self.alpha,
            lr: self.lr,
            lr_min: self.lr_min,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blank_lines() {
        let kv = parse_key_values("# header\n\na = 1 # trailing\nb=x,y\n").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "x,y".into())]);
        assert!(matches!(parse_key_values("novalue"), Err(ConfigError::Syntax { line: 1, .. })));
    }

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        assert_eq!(Config::from_text(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.alpha, 0.7);
        assert_eq!(cfg.epochs, 300);
        assert_eq!(cfg.batch_size, 2);
        assert_eq!(cfg.finetune_epochs, 100);
        assert_eq!(cfg.sparsity, 0.4);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert_eq!(Config::from_text("colour=red"), Err(ConfigError::UnknownKey("colour".into())));
        assert!(Config::from_text("alpha=1.5").is_err());
        assert!(Config::from_text("bits=9").is_err());
        assert!(Config::from_text("motion=farneback").is_err());
        assert!(Config::from_text("upscales=2,2\nchannels=8").is_err());
        let cfg = Config::from_text("motion=none\nupscales=2,3\nchannels=8,4\nbits=32").unwrap();
        assert_eq!(cfg.motion, None);
        assert_eq!(cfg.channels, vec![8, 4]);
    }

    #[test]
    fn quality_ladder() {
        let mut cfg = Config::default();
        for (c, mult) in QUALITY_LADDER {
            cfg.set_quality(c).unwrap();
            assert_eq!(cfg.latent_channels, c);
            assert_eq!(cfg.width_mult, mult);
        }
        assert!(cfg.set_quality(50).is_err());
    }

    #[test]
    fn builders_follow_frame_geometry() {
        let cfg = Config::default();
        let grid = cfg.grid_config(4, 8, 48, 64).unwrap();
        assert_eq!((grid.h, grid.w, grid.c1, grid.c2), (6, 8, 36, 4));
        let net = cfg.net_config(&grid).unwrap();
        assert_eq!(net.output_size(), (48, 64));
        assert_eq!(net.channels, vec![64, 48, 32]);
        assert!(cfg.grid_config(1, 2, 50, 64).is_err());
    }
}
