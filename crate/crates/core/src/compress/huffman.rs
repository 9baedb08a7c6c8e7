//! Canonical Huffman coding over byte symbols, MSB-first bit order.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::CompressError;

/// Longest code the coder will emit.
pub const MAX_CODE_LEN: u8 = 24;

fn raw_lengths(freq: &[u64; 256]) -> [u8; 256] {
    let mut lengths = [0u8; 256];
    let used: Vec<usize> = (0..256).filter(|&s| freq[s] > 0).collect();
    match used.len() {
        0 => return lengths,
        1 => {
            lengths[used[0]] = 1;
            return lengths;
        }
        _ => {}
    }
    // leaves are nodes 0..256, internal nodes follow; ties resolve by node id
    let mut parent: Vec<usize> = vec![usize::MAX; 256];
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> = used.iter().map(|&s| Reverse((freq[s], s))).collect();
    while heap.len() > 1 {
        let Reverse((wa, a)) = heap.pop().expect("two nodes");
        let Reverse((wb, b)) = heap.pop().expect("two nodes");
        let id = parent.len();
        parent.push(usize::MAX);
        parent[a] = id;
        parent[b] = id;
        heap.push(Reverse((wa + wb, id)));
    }
    for &s in &used {
        let (mut depth, mut n) = (0u32, s);
        while parent[n] != usize::MAX {
            n = parent[n];
            depth += 1;
        }
        lengths[s] = depth.min(255) as u8;
    }
    lengths
}

/// Code lengths for a symbol histogram; unused symbols get length 0.
pub fn code_lengths(freq: &[u64; 256]) -> [u8; 256] {
    let mut f = *freq;
    loop {
        let lengths = raw_lengths(&f);
        if lengths.iter().all(|&l| l <= MAX_CODE_LEN) {
            return lengths;
        }
        // flatten the distribution until the tree is shallow enough
        for x in f.iter_mut().filter(|x| **x > 0) {
            *x = (*x / 2).max(1);
        }
    }
}

pub fn histogram(symbols: &[u8]) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &s in symbols {
        h[s as usize] += 1;
    }
    h
}

/// Canonical code assignment plus decoding tables.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub lengths: [u8; 256],
    codes: [u32; 256],
    /// symbols sorted by `(length, symbol)`
    sorted: Vec<u8>,
    /// per length: first canonical code, count, index of first symbol in `sorted`
    first: [u32; MAX_CODE_LEN as usize + 1],
    count: [u32; MAX_CODE_LEN as usize + 1],
    offset: [u32; MAX_CODE_LEN as usize + 1],
}

impl Codebook {
    pub fn from_lengths(lengths: &[u8; 256]) -> Result<Self, CompressError> {
        let bad = |detail: String| CompressError::Invalid {
            field: "code_lengths",
            detail,
        };
        if let Some(l) = lengths.iter().find(|&&l| l > MAX_CODE_LEN) {
            return Err(bad(format!("length {l} exceeds {MAX_CODE_LEN}")));
        }
        let kraft: u64 = lengths
            .iter()
            .filter(|&&l| l > 0)
            .map(|&l| 1u64 << (MAX_CODE_LEN - l))
            .sum();
        if kraft > 1u64 << MAX_CODE_LEN {
            return Err(bad("lengths violate the Kraft inequality".into()));
        }
        let mut sorted: Vec<u8> = (0..=255u8).filter(|&s| lengths[s as usize] > 0).collect();
        sorted.sort_by_key(|&s| (lengths[s as usize], s));
        let n = MAX_CODE_LEN as usize + 1;
        let (mut first, mut count, mut offset) = ([0u32; 25], [0u32; 25], [0u32; 25]);
        for &s in &sorted {
            count[lengths[s as usize] as usize] += 1;
        }
        let mut codes = [0u32; 256];
        let (mut code, mut idx) = (0u32, 0u32);
        for len in 1..n {
            first[len] = code;
            offset[len] = idx;
            for &s in &sorted[idx as usize..(idx + count[len]) as usize] {
                codes[s as usize] = code;
                code += 1;
            }
            idx += count[len];
            code <<= 1;
        }
        Ok(Codebook {
            lengths: *lengths,
            codes,
            sorted,
            first,
            count,
            offset,
        })
    }

    /// Total bits needed for `symbols`, or `None` if one has no code.
    pub fn cost(&self, symbols: impl IntoIterator<Item = u8>) -> Option<u64> {
        let mut bits = 0u64;
        for s in symbols {
            let l = self.lengths[s as usize];
            if l == 0 {
                return None;
            }
            bits += l as u64;
        }
        Some(bits)
    }

    pub fn encode(&self, symbols: &[u8], out: &mut BitWriter) -> Result<(), CompressError> {
        for &s in symbols {
            let l = self.lengths[s as usize];
            if l == 0 {
                return Err(CompressError::Invalid {
                    field: "symbols",
                    detail: format!("symbol {s} has no code"),
                });
            }
            out.push(self.codes[s as usize], l);
        }
        Ok(())
    }

    pub fn decode(&self, input: &mut BitReader<'_>, count: usize) -> Result<Vec<u8>, CompressError> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut code = 0u32;
            let mut len = 0usize;
            loop {
                let bit = input.bit().ok_or(CompressError::Truncated { field: "payload" })?;
                code = (code << 1) | bit as u32;
                len += 1;
                if len > MAX_CODE_LEN as usize {
                    return Err(CompressError::Invalid {
                        field: "payload",
                        detail: "invalid code".into(),
                    });
                }
                let rel = code.wrapping_sub(self.first[len]);
                if code >= self.first[len] && rel < self.count[len] {
                    out.push(self.sorted[(self.offset[len] + rel) as usize]);
                    break;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bits: u64,
}

impl BitWriter {
    pub fn push(&mut self, code: u32, len: u8) {
        for i in (0..len).rev() {
            let bit = (code >> i) & 1;
            if self.bits % 8 == 0 {
                self.bytes.push(0);
            }
            if bit == 1 {
                *self.bytes.last_mut().expect("byte allocated") |= 0x80 >> (self.bits % 8);
            }
            self.bits += 1;
        }
    }

    pub fn bit_len(&self) -> u64 {
        self.bits
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
    limit: u64,
}

impl<'a> BitReader<'a> {
    /// Reads at most `bit_len` bits of `bytes`.
    pub fn new(bytes: &'a [u8], bit_len: u64) -> Self {
        BitReader {
            bytes,
            pos: 0,
            limit: bit_len.min(bytes.len() as u64 * 8),
        }
    }

    pub fn bit(&mut self) -> Option<u8> {
        if self.pos >= self.limit {
            return None;
        }
        let b = (self.bytes[(self.pos / 8) as usize] >> (7 - self.pos % 8)) & 1;
        self.pos += 1;
        Some(b)
    }
}

/// Code lengths, payload bytes and payload bit count for `symbols`.
pub fn huffman_encode(symbols: &[u8]) -> Result<([u8; 256], Vec<u8>, u64), CompressError> {
    if symbols.is_empty() {
        return Err(CompressError::Invalid {
            field: "symbols",
            detail: "empty stream".into(),
        });
    }
    let lengths = code_lengths(&histogram(symbols));
    let book = Codebook::from_lengths(&lengths)?;
    let mut w = BitWriter::default();
    book.encode(symbols, &mut w)?;
    let bits = w.bit_len();
    Ok((lengths, w.into_bytes(), bits))
}

pub fn huffman_decode(lengths: &[u8; 256], payload: &[u8], bit_len: u64, count: usize) -> Result<Vec<u8>, CompressError> {
    let book = Codebook::from_lengths(lengths)?;
    book.decode(&mut BitReader::new(payload, bit_len), count)
}

/// Shannon entropy of the empirical distribution, bits/symbol.
pub fn entropy(symbols: &[u8]) -> f64 {
    let n = symbols.len() as f64;
    histogram(symbols)
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_symbol_uses_one_bit() {
        let (lengths, payload, bits) = huffman_encode(b"aaaa").unwrap();
        assert_eq!(bits, 4);
        assert_eq!(lengths[b'a' as usize], 1);
        assert_eq!(huffman_decode(&lengths, &payload, bits, 4).unwrap(), b"aaaa");
    }

    #[test]
    fn uniform_alphabet_is_eight_bits() {
        let s: Vec<u8> = (0..=255u8).cycle().take(256 * 4).collect();
        let (lengths, _, bits) = huffman_encode(&s).unwrap();
        assert!(lengths.iter().all(|&l| l == 8));
        assert_eq!(bits, 8 * s.len() as u64);
    }

    #[test]
    fn dyadic_lengths() {
        let s = [0u8, 0, 1, 2];
        let (lengths, payload, bits) = huffman_encode(&s).unwrap();
        assert_eq!((lengths[0], lengths[1], lengths[2]), (1, 2, 2));
        assert_eq!(bits as f64 / 4.0, 1.5);
        assert_eq!(huffman_decode(&lengths, &payload, bits, 4).unwrap(), s);
    }

    #[test]
    fn extreme_skew_is_length_limited() {
        // Fibonacci frequencies produce a maximally deep tree
        let mut freq = [0u64; 256];
        let (mut a, mut b) = (1u64, 1u64);
        for f in freq.iter_mut().take(40) {
            *f = a;
            (a, b) = (b, a + b);
        }
        let lengths = code_lengths(&freq);
        assert!(lengths.iter().all(|&l| l <= MAX_CODE_LEN));
        assert!(Codebook::from_lengths(&lengths).is_ok());
    }

    #[test]
    fn bad_tables_rejected() {
        let mut l = [0u8; 256];
        l[0] = 1;
        l[1] = 1;
        l[2] = 1;
        assert!(Codebook::from_lengths(&l).is_err());
        assert!(huffman_encode(&[]).is_err());
    }
}
