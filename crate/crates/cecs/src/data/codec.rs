//! Bit-exact codecs: binary PPM (P6) and PGM (P5) with maxval 255, and the
//! RAWT tensor format (magic "RAWT", u32 LE rank, u32 LE dims, f32 LE values
//! row-major). Pixel tensors use the [0,1] value range.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Caps decoded element counts so corrupt headers cannot trigger huge
/// allocations.
const MAX_ELEMENTS: usize = 1 << 28;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads whitespace-separated ASCII integers, treating `#` to end-of-line as
/// a comment, as netpbm headers allow.
struct TokenReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> TokenReader<'a> {
    fn err(&self, reason: &str) -> Error {
        Error::Undecodable { path: self.source.to_string(), reason: reason.to_string() }
    }

    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn integer(&mut self) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected an integer in header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("header integer out of range"))
    }

    /// Consumes the single whitespace byte that separates header and payload.
    fn payload(mut self) -> Result<&'a [u8]> {
        if self.pos >= self.bytes.len() {
            return Err(self.err("missing payload"));
        }
        if !matches!(self.bytes[self.pos], b' ' | b'\t' | b'\r' | b'\n') {
            return Err(self.err("header not terminated by whitespace"));
        }
        self.pos += 1;
        Ok(&self.bytes[self.pos..])
    }
}

fn encode_netpbm(t: &Tensor, channels: usize, magic: &str) -> Result<Vec<u8>> {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut out = format!("{}\n{} {}\n255\n", magic, w, h).into_bytes();
    out.reserve(t.numel());
    for v in t.data() {
        out.push(quantize(*v));
    }
    debug_assert_eq!(t.numel(), h * w * channels);
    Ok(out)
}

fn decode_netpbm(bytes: &[u8], channels: usize, magic: &str, source: &str) -> Result<Tensor> {
    let found = bytes.get(..2).map(|m| String::from_utf8_lossy(m).into_owned());
    if found.as_deref() != Some(magic) {
        return Err(Error::BadMagic {
            expected: magic.to_string(),
            found: found.unwrap_or_default(),
        });
    }
    let mut reader = TokenReader { bytes, pos: 2, source };
    let w = reader.integer()?;
    let h = reader.integer()?;
    let maxval = reader.integer()?;
    if maxval != 255 {
        return Err(Error::Undecodable {
            path: source.to_string(),
            reason: format!("unsupported maxval {} (only 255)", maxval),
        });
    }
    if w == 0 || h == 0 {
        return Err(Error::Undecodable {
            path: source.to_string(),
            reason: "zero image dimension".to_string(),
        });
    }
    let numel = h
        .checked_mul(w)
        .and_then(|p| p.checked_mul(channels))
        .filter(|&p| p <= MAX_ELEMENTS)
        .ok_or_else(|| Error::DimensionOverflow(format!("{}x{}x{}", h, w, channels)))?;
    let payload = reader.payload()?;
    if payload.len() < numel {
        return Err(Error::TruncatedPayload { declared: numel, found: payload.len() });
    }
    let data = payload[..numel].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::from_vec(vec![h, w, channels], data)
}

/// Encodes a [h,w,3] image as binary PPM.
pub fn encode_ppm(t: &Tensor) -> Result<Vec<u8>> {
    if t.rank() != 3 || t.shape()[2] != 3 {
        return Err(Error::InvalidTensor(format!("PPM needs [h,w,3], got {:?}", t.shape())));
    }
    encode_netpbm(t, 3, "P6")
}

pub fn decode_ppm(bytes: &[u8], source: &str) -> Result<Tensor> {
    decode_netpbm(bytes, 3, "P6", source)
}

/// Encodes a [h,w] or [h,w,1] grayscale image as binary PGM.
pub fn encode_pgm(t: &Tensor) -> Result<Vec<u8>> {
    let ok = t.rank() == 2 || (t.rank() == 3 && t.shape()[2] == 1);
    if !ok {
        return Err(Error::InvalidTensor(format!(
            "PGM needs [h,w] or [h,w,1], got {:?}",
            t.shape()
        )));
    }
    encode_netpbm(t, 1, "P5")
}

/// Decodes to [h,w,1] so grayscale images slot into the image pipeline.
pub fn decode_pgm(bytes: &[u8], source: &str) -> Result<Tensor> {
    decode_netpbm(bytes, 1, "P5", source)
}

/// Appends one RAWT record. Values are narrowed to f32.
pub fn encode_rawt_into(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    if t.rank() > 4 {
        return Err(Error::DimensionOverflow(format!("rank {} exceeds 4", t.rank())));
    }
    for &d in t.shape() {
        if d > u32::MAX as usize {
            return Err(Error::DimensionOverflow(format!("dimension {}", d)));
        }
    }
    out.extend_from_slice(b"RAWT");
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(())
}

pub fn encode_rawt(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode_rawt_into(t, &mut out)?;
    Ok(out)
}

/// Decodes one RAWT record starting at `*offset`, advancing it past the
/// record.
pub fn decode_rawt_at(bytes: &[u8], offset: &mut usize, source: &str) -> Result<Tensor> {
    let buf = &bytes[(*offset).min(bytes.len())..];
    let take = |from: usize, len: usize| -> Result<&[u8]> {
        buf.get(from..from + len).ok_or(Error::TruncatedPayload {
            declared: from + len,
            found: buf.len(),
        })
    };
    let magic = take(0, 4)?;
    if magic != b"RAWT" {
        return Err(Error::BadMagic {
            expected: "RAWT".to_string(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let rank = u32::from_le_bytes(take(4, 4)?.try_into().unwrap()) as usize;
    if rank > 4 {
        return Err(Error::DimensionOverflow(format!("rank {} exceeds 4", rank)));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut pos = 8;
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize);
        pos += 4;
    }
    let numel: usize = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).filter(
        |&p| p <= MAX_ELEMENTS,
    )
    .ok_or_else(|| Error::DimensionOverflow(format!("{:?}", shape)))?;
    let payload = take(pos, numel * 4)?;
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    *offset += pos + numel * 4;
    Tensor::from_vec(shape, data).map_err(|e| Error::Undecodable {
        path: source.to_string(),
        reason: e.to_string(),
    })
}

/// Decodes a buffer holding exactly one RAWT record.
pub fn decode_rawt(bytes: &[u8], source: &str) -> Result<Tensor> {
    let mut offset = 0;
    let t = decode_rawt_at(bytes, &mut offset, source)?;
    if offset != bytes.len() {
        return Err(Error::Undecodable {
            path: source.to_string(),
            reason: format!("{} trailing bytes after record", bytes.len() - offset),
        });
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_rng;
    use rand::Rng;

    #[test]
    fn ppm_roundtrip_on_8bit_grid() {
        let data: Vec<f64> = (0..4 * 3 * 3).map(|i| ((i * 7) % 256) as f64 / 255.0).collect();
        let t = Tensor::from_vec(vec![4, 3, 3], data).unwrap();
        let bytes = encode_ppm(&t).unwrap();
        let back = decode_ppm(&bytes, "mem").unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn pgm_roundtrip_and_rank2_export() {
        let heat = Tensor::from_vec(vec![2, 2], vec![0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0])
            .unwrap();
        let bytes = encode_pgm(&heat).unwrap();
        let back = decode_pgm(&bytes, "mem").unwrap();
        assert_eq!(back.shape(), &[2, 2, 1]);
        assert_eq!(back.data(), heat.data());
    }

    #[test]
    fn header_comments_and_padding_are_tolerated() {
        let mut bytes = b"P6 # comment\n# another line\n 2\t1 # size\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let t = decode_ppm(&bytes, "mem").unwrap();
        assert_eq!(t.shape(), &[1, 2, 3]);
        assert_eq!(t.data()[0], 1.0 / 255.0);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 0, 0, 0, 0, 0]);
        assert!(matches!(decode_ppm(&bytes, "mem"), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn short_payload_is_truncated_error() {
        let mut bytes = b"P6\n4 4\n255\n".to_vec();
        bytes.extend_from_slice(&[7; 10]);
        match decode_ppm(&bytes, "mem") {
            Err(Error::TruncatedPayload { declared, found }) => {
                assert_eq!(declared, 48);
                assert_eq!(found, 10);
            }
            other => panic!("expected truncated payload, got {:?}", other),
        }
    }

    #[test]
    fn unsupported_maxval_is_rejected() {
        let mut bytes = b"P6\n1 1\n17\n".to_vec();
        bytes.extend_from_slice(&[0, 0, 0]);
        assert!(matches!(decode_ppm(&bytes, "mem"), Err(Error::Undecodable { .. })));
    }

    #[test]
    fn rawt_roundtrips_all_ranks() {
        let mut rng = seed_rng(&[51]);
        for rank in 0..=4usize {
            let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..5)).collect();
            let numel: usize = shape.iter().product();
            let data: Vec<f64> =
                (0..numel).map(|_| rng.random_range(-10.0f32..10.0) as f64).collect();
            let t = Tensor::from_vec(shape, data).unwrap();
            let bytes = encode_rawt(&t).unwrap();
            let back = decode_rawt(&bytes, "mem").unwrap();
            assert_eq!(back.shape(), t.shape());
            assert_eq!(back.data(), t.data());
        }
    }

    #[test]
    fn rawt_multi_record_stream() {
        let a = Tensor::from_vec(vec![2], vec![1.5, -2.25]).unwrap();
        let b = Tensor::scalar(7.0).unwrap();
        let mut buf = Vec::new();
        encode_rawt_into(&a, &mut buf).unwrap();
        encode_rawt_into(&b, &mut buf).unwrap();
        let mut off = 0;
        let ra = decode_rawt_at(&buf, &mut off, "mem").unwrap();
        let rb = decode_rawt_at(&buf, &mut off, "mem").unwrap();
        assert_eq!(off, buf.len());
        assert_eq!(ra.data(), a.data());
        assert_eq!(rb.data(), b.data());
    }

    #[test]
    fn rawt_rejects_bad_magic_rank_and_truncation() {
        assert!(matches!(decode_rawt(b"RAWX\x00\x00\x00\x00", "mem"), Err(Error::BadMagic { .. })));
        let mut high_rank = b"RAWT".to_vec();
        high_rank.extend_from_slice(&9u32.to_le_bytes());
        assert!(matches!(decode_rawt(&high_rank, "mem"), Err(Error::DimensionOverflow(_))));
        let mut short = Vec::new();
        encode_rawt_into(&Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), &mut short)
            .unwrap();
        short.truncate(short.len() - 2);
        assert!(matches!(decode_rawt(&short, "mem"), Err(Error::TruncatedPayload { .. })));
    }

    #[test]
    fn quantize_rounds_to_nearest() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-0.5), 0);
        assert_eq!(quantize(2.0), 255);
        assert_eq!(quantize(127.4 / 255.0), 127);
    }
}
