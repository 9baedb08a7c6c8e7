//! Weight compression: pruning, quantization, entropy coding and the
//! container format.

mod bitstream;
mod huffman;
mod prune;
mod quant;

pub use bitstream::{
    decode_model, encode_model, measure_bpp, read_header, Decoded, Encoded, Header, PayloadMode, StreamStats,
    TensorInfo, MAGIC, VERSION,
};
pub use huffman::{
    code_lengths, entropy, histogram, huffman_decode, huffman_encode, BitReader, BitWriter, Codebook, MAX_CODE_LEN,
};
pub use prune::{prune_global, prune_values, PruneMask, PruneScope};
pub use quant::{dequantize, fake_quantize, quantize, QuantSpec};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompressError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("stream truncated in field `{field}`")]
    Truncated { field: &'static str },
    #[error("invalid field `{field}`: {detail}")]
    Invalid { field: &'static str, detail: String },
}
