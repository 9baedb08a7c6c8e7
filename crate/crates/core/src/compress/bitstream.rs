//! The MGNR container. All integers are little-endian.
//!
//! ```text
//! "MGNR" | version u8 | flags u8 | T u16 | N u16 | H u16 | W u16 | h u8 | w u8
//! | c1 u16 | c2 u16 | M u8 | upscales M×u8 | channels M×u16 | ge_channels u8
//! | tensor_count u16 | code lengths 256×u8
//! | per tensor: name_len u8, name, rank u8, dims rank×u32, scale f32,
//!   zero_point i16, pruned u8, [keep bitmap ceil(n/8) bytes], payload_bit_len u32, payload
//! | CRC32 of everything before it
//! ```
//!
//! Flags: bit0 grid embeddings, bit1 raw 8-bit symbols, bit2 raw f32 values,
//! bit3 ReLU activation. With neither bit1 nor bit2 the symbols are coded
//! with the single global Huffman table. A pruned tensor stores a keep
//! bitmap and only the kept symbols; the encoder picks per tensor whichever
//! of bitmap or inline coding is smaller.

use super::huffman::{histogram, code_lengths, BitReader, BitWriter, Codebook};
use super::quant::{dequantize, quantize, QuantSpec};
use super::{CompressError, PruneMask};
use crate::model::Model;
use crate::multigrid::GridConfig;
use crate::synthesis::NetConfig;
use crate::tensor::{Activation, Tensor};

pub const MAGIC: &[u8; 4] = b"MGNR";
pub const VERSION: u8 = 1;

const FLAG_GE: u8 = 1;
const FLAG_RAW8: u8 = 1 << 1;
const FLAG_FP32: u8 = 1 << 2;
const FLAG_RELU: u8 = 1 << 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadMode {
    /// unquantized f32 values
    Fp32,
    /// quantized symbols, one byte each
    Raw8,
    /// quantized symbols, global canonical Huffman code
    Huffman,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub flags: u8,
    pub frames: usize,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub h: usize,
    pub w: usize,
    pub c1: usize,
    pub c2: usize,
    pub upscales: Vec<usize>,
    pub channels: Vec<usize>,
    pub ge_channels: usize,
    pub tensor_count: usize,
}

impl Header {
    pub fn mode(&self) -> PayloadMode {
        if self.flags & FLAG_FP32 != 0 {
            PayloadMode::Fp32
        } else if self.flags & FLAG_RAW8 != 0 {
            PayloadMode::Raw8
        } else {
            PayloadMode::Huffman
        }
    }

    pub fn activation(&self) -> Activation {
        if self.flags & FLAG_RELU != 0 {
            Activation::Relu
        } else {
            Activation::Gelu
        }
    }

    fn configs(&self) -> Result<(GridConfig, NetConfig), CompressError> {
        let bad = |detail: String| CompressError::Invalid { field: "header", detail };
        let grid = GridConfig::custom(self.frames, self.views, self.h, self.w, self.c1, self.c2)
            .map_err(|e| bad(e.to_string()))?;
        let net = NetConfig {
            in_channels: self.c1 + self.c2,
            upscales: self.upscales.clone(),
            channels: self.channels.clone(),
            activation: self.activation(),
            ge_channels: self.ge_channels,
            frames: self.frames,
            views: self.views,
            h: self.h,
            w: self.w,
        };
        net.validate().map_err(|e| bad(e.to_string()))?;
        if net.output_size() != (self.height, self.width) {
            return Err(bad(format!(
                "latent {}x{} with upscales {:?} does not give {}x{}",
                self.h, self.w, self.upscales, self.height, self.width
            )));
        }
        Ok((grid, net))
    }
}

/// Per-tensor record as stored.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub scale: f32,
    pub zero_point: i16,
    pub pruned: bool,
    pub bitmap_bytes: usize,
    pub payload_bits: u64,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn payload_bytes(&self) -> usize {
        self.payload_bits.div_ceil(8) as usize
    }
}

/// Size split of a stream: payload bytes versus everything else.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamStats {
    pub total_bytes: usize,
    pub payload_bytes: usize,
    /// header, tables, per-tensor metadata, bitmaps, CRC
    pub overhead_bytes: usize,
    pub bitmap_bytes: usize,
}

impl StreamStats {
    fn of(total: usize, tensors: &[TensorInfo]) -> Self {
        let payload: usize = tensors.iter().map(|t| t.payload_bytes()).sum();
        StreamStats {
            total_bytes: total,
            payload_bytes: payload,
            overhead_bytes: total - payload,
            bitmap_bytes: tensors.iter().map(|t| t.bitmap_bytes).sum(),
        }
    }

    pub fn overhead_fraction(&self) -> f64 {
        self.overhead_bytes as f64 / self.total_bytes as f64
    }
}

#[derive(Debug, Clone)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub tensors: Vec<TensorInfo>,
    pub stats: StreamStats,
    /// weights exactly as the decoder will reconstruct them
    pub dequantized: Model<f32>,
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub header: Header,
    pub tensors: Vec<TensorInfo>,
    pub stats: StreamStats,
    pub model: Model<f32>,
}

/// `8 · bytes / (N · T · H · W)`
pub fn measure_bpp(bytes: usize, views: usize, frames: usize, height: usize, width: usize) -> f64 {
    8.0 * bytes as f64 / (views * frames * height * width) as f64
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        out[i / 8] |= 0x80 >> (i % 8);
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect()
}

/// One tensor ready for writing.
struct Record {
    info: TensorInfo,
    bitmap: Vec<u8>,
    payload: Vec<u8>,
}

fn to_u16(field: &'static str, v: usize) -> Result<u16, CompressError> {
    u16::try_from(v).map_err(|_| CompressError::Invalid {
        field,
        detail: format!("{v} does not fit in 16 bits"),
    })
}

fn to_u8(field: &'static str, v: usize) -> Result<u8, CompressError> {
    u8::try_from(v).map_err(|_| CompressError::Invalid {
        field,
        detail: format!("{v} does not fit in 8 bits"),
    })
}

/// Serializes `model` (pruned by `mask`, if any). `bits` is ignored in FP32 mode.
pub fn encode_model(
    model: &Model<f32>,
    mask: Option<&PruneMask>,
    mode: PayloadMode,
    bits: u32,
) -> Result<Encoded, CompressError> {
    let mut model = model.clone();
    if let Some(m) = mask {
        if m.tensor_count() != model.tensor_count() {
            return Err(CompressError::Invalid {
                field: "mask",
                detail: format!("{} masks for {} tensors", m.tensor_count(), model.tensor_count()),
            });
        }
        m.apply(&mut model);
    }
    let keep_of = |i: usize| mask.and_then(|m| m.keep(i));
    let named: Vec<(String, Tensor<f32>)> = model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let mut dequantized = model.clone();

    let mut quantized: Vec<(Vec<u8>, QuantSpec)> = Vec::new();
    if mode != PayloadMode::Fp32 {
        for (_, t) in &named {
            quantized.push(quantize(t.data(), bits)?);
        }
        for (dst, (sym, spec)) in dequantized.tensors_mut().into_iter().zip(&quantized) {
            dst.data_mut().copy_from_slice(&dequantize(sym, spec));
        }
    }

    let mut lengths = [0u8; 256];
    let book = if mode == PayloadMode::Huffman {
        let mut freq = [0u64; 256];
        for (sym, _) in &quantized {
            for (f, c) in freq.iter_mut().zip(histogram(sym)) {
                *f += c;
            }
        }
        lengths = code_lengths(&freq);
        Some(Codebook::from_lengths(&lengths)?)
    } else {
        None
    };

    let mut records = Vec::with_capacity(named.len());
    for (i, (name, t)) in named.iter().enumerate() {
        let n = t.numel();
        let mut info = TensorInfo {
            name: name.clone(),
            shape: t.shape().to_vec(),
            scale: 1.0,
            zero_point: 0,
            pruned: false,
            bitmap_bytes: 0,
            payload_bits: 0,
        };
        if mode == PayloadMode::Fp32 {
            let payload: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            info.payload_bits = 32 * n as u64;
            records.push(Record {
                info,
                bitmap: Vec::new(),
                payload,
            });
            continue;
        }
        let (sym, spec) = &quantized[i];
        info.scale = spec.scale;
        info.zero_point = spec.zero_point;
        let cost = |s: &mut dyn Iterator<Item = u8>| -> u64 {
            match &book {
                Some(b) => b.cost(s).expect("global table covers every symbol"),
                None => 8 * s.count() as u64,
            }
        };
        let inline_bits = cost(&mut sym.iter().copied());
        let mut chosen: Option<&[bool]> = None;
        if let Some(keep) = keep_of(i) {
            let sparse_bits = cost(&mut sym.iter().zip(keep).filter(|(_, &k)| k).map(|(&s, _)| s));
            if 8 * n.div_ceil(8) as u64 + sparse_bits < inline_bits {
                chosen = Some(keep);
            }
        }
        let coded: Vec<u8> = match chosen {
            Some(keep) => sym.iter().zip(keep).filter(|(_, &k)| k).map(|(&s, _)| s).collect(),
            None => sym.clone(),
        };
        let bitmap = chosen.map(pack_bits).unwrap_or_default();
        let (payload, payload_bits) = match &book {
            Some(b) => {
                let mut w = BitWriter::default();
                b.encode(&coded, &mut w)?;
                let bits = w.bit_len();
                (w.into_bytes(), bits)
            }
            None => {
                let bits = 8 * coded.len() as u64;
                (coded, bits)
            }
        };
        info.pruned = chosen.is_some();
        info.bitmap_bytes = bitmap.len();
        info.payload_bits = payload_bits;
        records.push(Record { info, bitmap, payload });
    }

    let cfg_g = &model.grid.config;
    let cfg_n = &model.net.config;
    let (height, width) = cfg_n.output_size();
    let mut flags = 0u8;
    if cfg_n.ge_enabled() {
        flags |= FLAG_GE;
    }
    if cfg_n.activation == Activation::Relu {
        flags |= FLAG_RELU;
    }
    flags |= match mode {
        PayloadMode::Fp32 => FLAG_FP32,
        PayloadMode::Raw8 => FLAG_RAW8,
        PayloadMode::Huffman => 0,
    };

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(flags);
    for (field, v) in [
        ("T", cfg_g.frames),
        ("N", cfg_g.views),
        ("H", height),
        ("W", width),
    ] {
        out.extend_from_slice(&to_u16(field, v)?.to_le_bytes());
    }
    out.push(to_u8("h", cfg_g.h)?);
    out.push(to_u8("w", cfg_g.w)?);
    out.extend_from_slice(&to_u16("c1", cfg_g.c1)?.to_le_bytes());
    out.extend_from_slice(&to_u16("c2", cfg_g.c2)?.to_le_bytes());
    out.push(to_u8("M", cfg_n.stages())?);
    for &s in &cfg_n.upscales {
        out.push(to_u8("upscales", s)?);
    }
    for &c in &cfg_n.channels {
        out.extend_from_slice(&to_u16("channels", c)?.to_le_bytes());
    }
    out.push(to_u8("ge_channels", cfg_n.ge_channels)?);
    out.extend_from_slice(&to_u16("tensor_count", records.len())?.to_le_bytes());
    out.extend_from_slice(&lengths);
    for r in &records {
        out.push(to_u8("name_len", r.info.name.len())?);
        out.extend_from_slice(r.info.name.as_bytes());
        out.push(to_u8("shape_rank", r.info.shape.len())?);
        for &d in &r.info.shape {
            let d = u32::try_from(d).map_err(|_| CompressError::Invalid {
                field: "dims",
                detail: format!("{d} does not fit in 32 bits"),
            })?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&r.info.scale.to_le_bytes());
        out.extend_from_slice(&r.info.zero_point.to_le_bytes());
        out.push(r.info.pruned as u8);
        out.extend_from_slice(&r.bitmap);
        let bits = u32::try_from(r.info.payload_bits).map_err(|_| CompressError::Invalid {
            field: "payload_bit_len",
            detail: "payload exceeds 2^32 bits".into(),
        })?;
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(&r.payload);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());

    let tensors: Vec<TensorInfo> = records.into_iter().map(|r| r.info).collect();
    let stats = StreamStats::of(out.len(), &tensors);
    Ok(Encoded {
        bytes: out,
        tensors,
        stats,
        dequantized,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], CompressError> {
        if self.bytes.len() - self.pos < n {
            return Err(CompressError::Truncated { field });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &'static str) -> Result<u8, CompressError> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16, CompressError> {
        let b = self.take(2, field)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, CompressError> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Checks magic, version and CRC, then parses the header only.
pub fn read_header(bytes: &[u8]) -> Result<Header, CompressError> {
    let body = verify(bytes)?;
    let mut r = Reader { bytes: body, pos: 6 };
    parse_header(&mut r, body[5])
}

fn verify(bytes: &[u8]) -> Result<&[u8], CompressError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let mut got = [0u8; 4];
        for (g, b) in got.iter_mut().zip(bytes) {
            *g = *b;
        }
        return Err(CompressError::BadMagic(got));
    }
    if bytes.len() < 6 + 4 {
        return Err(CompressError::Truncated { field: "header" });
    }
    if bytes[4] != VERSION {
        return Err(CompressError::BadVersion(bytes[4]));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CompressError::Crc { stored, computed });
    }
    Ok(body)
}

fn parse_header(r: &mut Reader<'_>, flags: u8) -> Result<Header, CompressError> {
    let frames = r.u16("T")? as usize;
    let views = r.u16("N")? as usize;
    let height = r.u16("H")? as usize;
    let width = r.u16("W")? as usize;
    let h = r.u8("h")? as usize;
    let w = r.u8("w")? as usize;
    let c1 = r.u16("c1")? as usize;
    let c2 = r.u16("c2")? as usize;
    let m = r.u8("M")? as usize;
    let upscales = (0..m).map(|_| r.u8("upscales").map(|v| v as usize)).collect::<Result<_, _>>()?;
    let channels = (0..m).map(|_| r.u16("channels").map(|v| v as usize)).collect::<Result<_, _>>()?;
    let ge_channels = r.u8("ge_channels")? as usize;
    if (flags & FLAG_GE != 0) != (ge_channels > 0) {
        return Err(CompressError::Invalid {
            field: "flags",
            detail: format!("GE flag disagrees with ge_channels={ge_channels}"),
        });
    }
    let tensor_count = r.u16("tensor_count")? as usize;
    Ok(Header {
        flags,
        frames,
        views,
        height,
        width,
        h,
        w,
        c1,
        c2,
        upscales,
        channels,
        ge_channels,
        tensor_count,
    })
}

pub fn decode_model(bytes: &[u8]) -> Result<Decoded, CompressError> {
    let body = verify(bytes)?;
    let mut r = Reader { bytes: body, pos: 6 };
    let header = parse_header(&mut r, body[5])?;
    let (grid, net) = header.configs()?;
    let mut model = Model::<f32>::zeros(grid, net).map_err(|e| CompressError::Invalid {
        field: "header",
        detail: e.to_string(),
    })?;
    if header.tensor_count != model.tensor_count() {
        return Err(CompressError::Invalid {
            field: "tensor_count",
            detail: format!("{} stored, header implies {}", header.tensor_count, model.tensor_count()),
        });
    }
    let mut lengths = [0u8; 256];
    lengths.copy_from_slice(r.take(256, "code_lengths")?);
    let mode = header.mode();
    let book = match mode {
        PayloadMode::Huffman => Some(Codebook::from_lengths(&lengths)?),
        _ => None,
    };
    let expected: Vec<(String, Vec<usize>)> = model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let mut tensors = Vec::with_capacity(expected.len());
    for ((want_name, want_shape), dst) in expected.into_iter().zip(model.tensors_mut()) {
        let name_len = r.u8("name_len")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec()).map_err(|_| CompressError::Invalid {
            field: "name",
            detail: "not utf-8".into(),
        })?;
        let rank = r.u8("shape_rank")? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<_, _>>()?;
        if name != want_name || shape != want_shape {
            return Err(CompressError::Invalid {
                field: "tensor",
                detail: format!("got {name} {shape:?}, expected {want_name} {want_shape:?}"),
            });
        }
        let n = dst.numel();
        let sb = r.take(4, "scale")?;
        let scale = f32::from_le_bytes([sb[0], sb[1], sb[2], sb[3]]);
        let zero_point = r.u16("zero_point")? as i16;
        let pruned = match r.u8("pruned")? {
            0 => false,
            1 => true,
            v => {
                return Err(CompressError::Invalid {
                    field: "pruned",
                    detail: format!("flag {v}"),
                })
            }
        };
        let keep = if pruned {
            Some(unpack_bits(r.take(n.div_ceil(8), "bitmap")?, n))
        } else {
            None
        };
        let payload_bits = r.u32("payload_bit_len")? as u64;
        let payload = r.take(payload_bits.div_ceil(8) as usize, "payload")?;
        let coded_count = keep.as_ref().map_or(n, |k| k.iter().filter(|&&x| x).count());
        let values: Vec<f32> = match mode {
            PayloadMode::Fp32 => {
                if pruned || payload_bits != 32 * n as u64 {
                    return Err(CompressError::Invalid {
                        field: "payload_bit_len",
                        detail: format!("{name}: {payload_bits} bits for {n} f32 values"),
                    });
                }
                payload
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect()
            }
            _ => {
                let coded = match &book {
                    Some(b) => b.decode(&mut BitReader::new(payload, payload_bits), coded_count)?,
                    None => {
                        if payload_bits != 8 * coded_count as u64 {
                            return Err(CompressError::Invalid {
                                field: "payload_bit_len",
                                detail: format!("{name}: {payload_bits} bits for {coded_count} symbols"),
                            });
                        }
                        payload.to_vec()
                    }
                };
                if !(scale.is_finite() && scale > 0.0) {
                    return Err(CompressError::Invalid {
                        field: "scale",
                        detail: format!("{name}: {scale}"),
                    });
                }
                let spec = QuantSpec {
                    scale,
                    zero_point,
                    bits: 8,
                };
                let symbols = match &keep {
                    Some(k) => {
                        let mut it = coded.into_iter();
                        let zp = zero_point.clamp(0, 255) as u8;
                        k.iter().map(|&kept| if kept { it.next().unwrap_or(zp) } else { zp }).collect()
                    }
                    None => coded,
                };
                let mut v = dequantize(&symbols, &spec);
                if let Some(k) = &keep {
                    // pruned positions decode to exactly zero
                    for (x, &kept) in v.iter_mut().zip(k) {
                        if !kept {
                            *x = 0.0;
                        }
                    }
                }
                v
            }
        };
        dst.data_mut().copy_from_slice(&values);
        tensors.push(TensorInfo {
            name,
            shape,
            scale,
            zero_point,
            pruned,
            bitmap_bytes: keep.as_ref().map_or(0, |_| n.div_ceil(8)),
            payload_bits,
        });
    }
    if r.pos != body.len() {
        return Err(CompressError::Invalid {
            field: "trailer",
            detail: format!("{} unexpected bytes before CRC", body.len() - r.pos),
        });
    }
    let stats = StreamStats::of(bytes.len(), &tensors);
    Ok(Decoded {
        header,
        tensors,
        stats,
        model,
    })
}
