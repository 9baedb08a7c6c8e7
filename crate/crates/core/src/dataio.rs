//! Multi-view frame sequences: PPM interchange and a synthetic generator.
//!
//! On-disk layout is `v{view:02}/f{frame:04}.ppm` (binary P6, maxval 255).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::parse_key_values;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("{path}: frame is {got:?}, sequence is {want:?}")]
    Dims {
        path: PathBuf,
        got: (usize, usize),
        want: (usize, usize),
    },
    #[error("invalid sequence: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One RGB frame, row-major `H × W × 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, DataError> {
        if data.len() != height * width * 3 {
            return Err(DataError::Invalid(format!(
                "{height}x{width} frame needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Frame {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Frame {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// Planar `3 × H × W` copy.
    pub fn to_planar<S: crate::tensor::Real>(&self) -> Vec<S> {
        let n = self.pixels();
        let mut out = vec![S::zero(); 3 * n];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + p] = S::lit(px[c] as f64);
            }
        }
        out
    }

    pub fn from_planar<S: crate::tensor::Real>(height: usize, width: usize, planar: &[S]) -> Self {
        let n = height * width;
        let mut data = vec![0.0f32; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                data[p * 3 + c] = planar[c * n + p].as_f64() as f32;
            }
        }
        Frame {
            height,
            width,
            data,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Self {
        Frame {
            height,
            width,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantize8(&self) -> Frame {
        Frame::from_bytes(self.height, self.width, &self.to_bytes())
    }

    /// ITU-R BT.601 luma.
    pub fn luma(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `N` views × `T` frames, stored view-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub views: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<Frame>,
}

impl VideoSequence {
    /// `frames` is view-major: index `v * T + t`.
    pub fn new(views: usize, frames_per_view: usize, frames: Vec<Frame>) -> Result<Self, DataError> {
        if views == 0 || frames_per_view == 0 {
            return Err(DataError::Invalid("empty sequence".into()));
        }
        if frames.len() != views * frames_per_view {
            return Err(DataError::Invalid(format!(
                "{} frames for {views}x{frames_per_view}",
                frames.len()
            )));
        }
        let (height, width) = (frames[0].height, frames[0].width);
        if frames.iter().any(|f| f.height != height || f.width != width) {
            return Err(DataError::Invalid("frames differ in size".into()));
        }
        Ok(VideoSequence {
            views,
            frames: frames_per_view,
            height,
            width,
            data: frames,
        })
    }

    pub fn frame(&self, view: usize, t: usize) -> &Frame {
        &self.data[view * self.frames + t]
    }

    pub fn all_frames(&self) -> &[Frame] {
        &self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.views * self.frames * self.height * self.width
    }

    pub fn quantize8(&self) -> VideoSequence {
        VideoSequence {
            data: self.data.iter().map(Frame::quantize8).collect(),
            ..self.clone()
        }
    }
}

pub fn frame_path(root: &Path, view: usize, t: usize) -> PathBuf {
    root.join(format!("v{view:02}")).join(format!("f{t:04}.ppm"))
}

fn write_pnm(path: &Path, magic: &str, width: usize, height: usize, body: &[u8]) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    write!(f, "{magic}\n{width} {height}\n255\n").map_err(io_err(path))?;
    f.write_all(body).map_err(io_err(path))
}

pub fn write_ppm(path: &Path, frame: &Frame) -> Result<(), DataError> {
    write_pnm(path, "P6", frame.width, frame.height, &frame.to_bytes())
}

/// 8-bit grayscale dump, `round(value * 255)`.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<(), DataError> {
    let body: Vec<u8> = values.iter().map(|&v| to_u8(v)).collect();
    write_pnm(path, "P5", width, height, &body)
}

fn parse_pnm(path: &Path, bytes: &[u8], magic: &[u8]) -> Result<(usize, usize, usize), DataError> {
    let bad = |detail: String| DataError::Parse {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(bad(format!(
            "expected {} header",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed header field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header field out of range".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after header".into()));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(format!("maxval {maxval} unsupported, need 255")));
    }
    Ok((width, height, pos + 1))
}

pub fn read_ppm(path: &Path) -> Result<Frame, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (width, height, off) = parse_pnm(path, &bytes, b"P6")?;
    let need = width * height * 3;
    if bytes.len() < off + need {
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            detail: format!("truncated pixel data: {} of {need} bytes", bytes.len() - off),
        });
    }
    Ok(Frame::from_bytes(height, width, &bytes[off..off + need]))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f32>), DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (width, height, off) = parse_pnm(path, &bytes, b"P5")?;
    let need = width * height;
    if bytes.len() < off + need {
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            detail: "truncated pixel data".into(),
        });
    }
    Ok((
        width,
        height,
        bytes[off..off + need].iter().map(|&b| b as f32 / 255.0).collect(),
    ))
}

pub fn save_sequence(root: &Path, seq: &VideoSequence) -> Result<(), DataError> {
    for v in 0..seq.views {
        for t in 0..seq.frames {
            write_ppm(&frame_path(root, v, t), seq.frame(v, t))?;
        }
    }
    Ok(())
}

/// Reads every `v??/f????.ppm` under `root`, counting views and frames from 0.
pub fn load_sequence(root: &Path) -> Result<VideoSequence, DataError> {
    let mut views = 0;
    while root.join(format!("v{views:02}")).is_dir() {
        views += 1;
    }
    if views == 0 {
        return Err(DataError::Io {
            path: root.join("v00"),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no view directories"),
        });
    }
    let mut frames = 0;
    while frame_path(root, 0, frames).is_file() {
        frames += 1;
    }
    if frames == 0 {
        let path = frame_path(root, 0, 0);
        return Err(DataError::Io {
            path,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "missing frame"),
        });
    }
    let mut out = Vec::with_capacity(views * frames);
    let mut dims = None;
    for v in 0..views {
        for t in 0..frames {
            let path = frame_path(root, v, t);
            let f = read_ppm(&path)?;
            let got = (f.height, f.width);
            match dims {
                None => dims = Some(got),
                Some(want) if want != got => return Err(DataError::Dims { path, got, want }),
                _ => {}
            }
            out.push(f);
        }
    }
    VideoSequence::new(views, frames, out)
}

/// One textured rectangle moving at constant velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthObject {
    pub x: i64,
    pub y: i64,
    pub w: usize,
    pub h: usize,
    /// px per frame
    pub vx: i64,
    pub vy: i64,
    /// horizontal px per view
    pub disparity: i64,
    pub color: [f32; 3],
}

impl SynthObject {
    pub fn origin(&self, view: usize, t: usize) -> (i64, i64) {
        (
            self.x + self.vx * t as i64 + self.disparity * view as i64,
            self.y + self.vy * t as i64,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub views: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// horizontal background shift per view, px
    pub bg_disparity: i64,
    pub objects: Vec<SynthObject>,
}

impl SynthSpec {
    /// Two objects sized relative to the frame, one moving right and one
    /// moving down, both kept inside the frame for every `(view, frame)`.
    pub fn desk(views: usize, frames: usize, height: usize, width: usize, seed: u64) -> Self {
        let span = frames.saturating_sub(1) as i64;
        let w0 = (width / 4).max(2);
        let h0 = (height / 4).max(2);
        let w1 = (width / 6).max(2);
        let h1 = (height / 3).max(2);
        SynthSpec {
            views,
            frames,
            height,
            width,
            seed,
            bg_disparity: 1,
            objects: vec![
                SynthObject {
                    x: 1,
                    y: (height / 6) as i64,
                    w: w0,
                    h: h0,
                    vx: ((width as i64 - w0 as i64 - 2 - views as i64) / span.max(1)).clamp(0, 2),
                    vy: 0,
                    disparity: 1,
                    color: [0.9, 0.25, 0.2],
                },
                SynthObject {
                    x: (width * 3 / 5) as i64,
                    y: 1,
                    w: w1,
                    h: h1,
                    vx: 0,
                    vy: ((height as i64 - h1 as i64 - 2) / span.max(1)).clamp(0, 1),
                    disparity: -1,
                    color: [0.15, 0.35, 0.95],
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.views == 0 || self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(DataError::Invalid("synthetic spec has an empty dimension".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.w == 0 || o.h == 0 {
                return Err(DataError::Invalid(format!("object {i} has zero size")));
            }
            for v in 0..self.views {
                for t in 0..self.frames {
                    let (x, y) = o.origin(v, t);
                    if x < 0
                        || y < 0
                        || x + o.w as i64 > self.width as i64
                        || y + o.h as i64 > self.height as i64
                    {
                        return Err(DataError::Invalid(format!(
                            "object {i} leaves the frame at view {v}, frame {t} (origin {x},{y})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Plain-text `key=value` form; objects are
    /// `object=x,y,w,h,vx,vy,disparity,r,g,b`, one line each.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "views={}\nframes={}\nheight={}\nwidth={}\nseed={}\nbg_disparity={}\n",
            self.views, self.frames, self.height, self.width, self.seed, self.bg_disparity
        );
        for o in &self.objects {
            s.push_str(&format!(
                "object={},{},{},{},{},{},{},{},{},{}\n",
                o.x, o.y, o.w, o.h, o.vx, o.vy, o.disparity, o.color[0], o.color[1], o.color[2]
            ));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let bad = |m: String| DataError::Invalid(m);
        let mut spec = SynthSpec {
            views: 0,
            frames: 0,
            height: 0,
            width: 0,
            seed: 0,
            bg_disparity: 0,
            objects: Vec::new(),
        };
        let pairs = parse_key_values(text).map_err(|e| bad(e.to_string()))?;
        for (key, value) in pairs {
            let num = |v: &str| -> Result<u64, DataError> {
                v.parse().map_err(|_| bad(format!("{key}: not an integer: {v}")))
            };
            match key.as_str() {
                "views" => spec.views = num(&value)? as usize,
                "frames" => spec.frames = num(&value)? as usize,
                "height" => spec.height = num(&value)? as usize,
                "width" => spec.width = num(&value)? as usize,
                "seed" => spec.seed = num(&value)?,
                "bg_disparity" => {
                    spec.bg_disparity = value.parse().map_err(|_| bad(format!("bg_disparity: {value}")))?
                }
                "object" => {
                    let f: Vec<&str> = value.split(',').map(str::trim).collect();
                    if f.len() != 10 {
                        return Err(bad(format!("object needs 10 fields, got {}", f.len())));
                    }
                    let i = |s: &str| s.parse::<i64>().map_err(|_| bad(format!("object field {s}")));
                    let c = |s: &str| s.parse::<f32>().map_err(|_| bad(format!("object colour {s}")));
                    spec.objects.push(SynthObject {
                        x: i(f[0])?,
                        y: i(f[1])?,
                        w: i(f[2])?.max(0) as usize,
                        h: i(f[3])?.max(0) as usize,
                        vx: i(f[4])?,
                        vy: i(f[5])?,
                        disparity: i(f[6])?,
                        color: [c(f[7])?, c(f[8])?, c(f[9])?],
                    });
                }
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn hash01(seed: u64, a: i64, b: i64, c: u64) -> f32 {
    // splitmix64 finalizer over the packed lattice coordinates
    let mut z = seed
        ^ (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ c.wrapping_mul(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 40) as f32 / (1u64 << 24) as f32
}

fn value_noise(seed: u64, x: f32, y: f32, cell: f32, channel: u64) -> f32 {
    let (gx, gy) = (x / cell, y / cell);
    let (ix, iy) = (gx.floor() as i64, gy.floor() as i64);
    let (fx, fy) = (gx - ix as f32, gy - iy as f32);
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (smooth(fx), smooth(fy));
    let v00 = hash01(seed, ix, iy, channel);
    let v10 = hash01(seed, ix + 1, iy, channel);
    let v01 = hash01(seed, ix, iy + 1, channel);
    let v11 = hash01(seed, ix + 1, iy + 1, channel);
    let top = v00 + (v10 - v00) * sx;
    let bot = v01 + (v11 - v01) * sx;
    top + (bot - top) * sy
}

/// Synthetic sequence plus per-`(view, frame)` object masks (view-major).
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(VideoSequence, Vec<Vec<bool>>), DataError> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut frames = Vec::with_capacity(spec.views * spec.frames);
    let mut masks = Vec::with_capacity(spec.views * spec.frames);
    for v in 0..spec.views {
        let shift = (spec.bg_disparity * v as i64) as f32;
        let mut background = vec![0.0f32; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                let sx = x as f32 + shift;
                for c in 0..3u64 {
                    let coarse = value_noise(spec.seed, sx, y as f32, 12.0, c);
                    let fine = value_noise(spec.seed ^ 0x5555, sx, y as f32, 5.0, c);
                    background[(y * w + x) * 3 + c as usize] = 0.2 + 0.45 * coarse + 0.15 * fine;
                }
            }
        }
        for t in 0..spec.frames {
            let mut data = background.clone();
            let mut mask = vec![false; h * w];
            for (oi, o) in spec.objects.iter().enumerate() {
                let (ox, oy) = o.origin(v, t);
                for dy in 0..o.h {
                    for dx in 0..o.w {
                        let (px, py) = (ox as usize + dx, oy as usize + dy);
                        // texture travels with the object
                        let pattern = value_noise(spec.seed ^ (oi as u64 + 1) * 0x77, dx as f32, dy as f32, 3.0, 7);
                        let shade = 0.7 + 0.3 * pattern;
                        for c in 0..3 {
                            data[(py * w + px) * 3 + c] = (o.color[c] * shade).clamp(0.0, 1.0);
                        }
                        mask[py * w + px] = true;
                    }
                }
            }
            frames.push(Frame {
                height: h,
                width: w,
                data,
            });
            masks.push(mask);
        }
    }
    Ok((VideoSequence::new(spec.views, spec.frames, frames)?, masks))
}
