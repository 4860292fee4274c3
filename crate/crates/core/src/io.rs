//! SBT4 tensor and SBMK mask files.
//!
//! SBT4: `b"SBT4"`, version u8 = 1, dtype u8 (0 f32, 1 f64), layout u8
//! (0 channels-last, 1 channels-first), reserved u8, then n, h, w, c as
//! little-endian u32, then the elements little-endian in layout order.
//!
//! SBMK: `b"SBMK"`, version u8 = 1, then n, h, w as little-endian u32, then
//! `n*h*w` bytes each 0 or 1.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dims4, Element, Layout, Tensor4D};
use crate::tiling::BinaryMask;

const TENSOR_MAGIC: &[u8; 4] = b"SBT4";
const MASK_MAGIC: &[u8; 4] = b"SBMK";
const VERSION: u8 = 1;
const TENSOR_HEADER: usize = 24;
const MASK_HEADER: usize = 17;

fn format_err(format: &'static str, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        format,
        offset,
        msg: msg.into(),
    }
}

fn u32_at(buf: &[u8], at: usize) -> usize {
    u32::from_le_bytes(buf[at..at + 4].try_into().unwrap()) as usize
}

fn dim_u32(format: &'static str, v: usize) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| format_err(format, 0, format!("dimension {v} does not fit in u32")))
}

pub fn encode_tensor<T: Element>(x: &Tensor4D<T>) -> Result<Vec<u8>> {
    let d = x.dims();
    let width = std::mem::size_of::<T>();
    let mut out = Vec::with_capacity(TENSOR_HEADER + d.len() * width);
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE);
    out.push(match x.layout() {
        Layout::ChannelsLast => 0,
        Layout::ChannelsFirst => 1,
    });
    out.push(0);
    for v in [d.n, d.h, d.w, d.c] {
        out.extend_from_slice(&dim_u32("SBT4", v)?);
    }
    for &v in x.data() {
        if width == 4 {
            out.extend_from_slice(&(v.widen() as f32).to_le_bytes());
        } else {
            out.extend_from_slice(&v.widen().to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses an SBT4 buffer whose dtype must match `T`.
pub fn decode_tensor<T: Element>(buf: &[u8]) -> Result<Tensor4D<T>> {
    const F: &str = "SBT4";
    if buf.len() < TENSOR_HEADER {
        return Err(format_err(
            F,
            buf.len(),
            format!("truncated header: {} of {TENSOR_HEADER} bytes", buf.len()),
        ));
    }
    if &buf[..4] != TENSOR_MAGIC {
        return Err(format_err(F, 0, format!("bad magic {:?}", &buf[..4])));
    }
    if buf[4] != VERSION {
        return Err(format_err(F, 4, format!("unsupported version {}", buf[4])));
    }
    if buf[5] != T::DTYPE {
        return Err(format_err(
            F,
            5,
            format!("dtype code {} but {} was requested", buf[5], T::DTYPE),
        ));
    }
    let layout = match buf[6] {
        0 => Layout::ChannelsLast,
        1 => Layout::ChannelsFirst,
        v => return Err(format_err(F, 6, format!("unknown layout code {v}"))),
    };
    let dims = Dims4::new(u32_at(buf, 8), u32_at(buf, 12), u32_at(buf, 16), u32_at(buf, 20));
    let width = std::mem::size_of::<T>();
    let need = dims
        .n
        .checked_mul(dims.h)
        .and_then(|v| v.checked_mul(dims.w))
        .and_then(|v| v.checked_mul(dims.c))
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| format_err(F, 8, format!("dims {dims} overflow")))?;
    let payload = &buf[TENSOR_HEADER..];
    if payload.len() != need {
        return Err(format_err(
            F,
            TENSOR_HEADER + payload.len().min(need),
            format!("payload is {} bytes, dims {dims} need {need}", payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(width)
        .map(|b| {
            if width == 4 {
                T::narrow(f32::from_le_bytes(b.try_into().unwrap()) as f64)
            } else {
                T::narrow(f64::from_le_bytes(b.try_into().unwrap()))
            }
        })
        .collect();
    Tensor4D::from_vec(dims, layout, data)
}

pub fn encode_mask(m: &BinaryMask) -> Result<Vec<u8>> {
    let (n, h, w) = m.dims();
    let mut out = Vec::with_capacity(MASK_HEADER + m.bits().len());
    out.extend_from_slice(MASK_MAGIC);
    out.push(VERSION);
    for v in [n, h, w] {
        out.extend_from_slice(&dim_u32("SBMK", v)?);
    }
    out.extend_from_slice(m.bits());
    Ok(out)
}

pub fn decode_mask(buf: &[u8]) -> Result<BinaryMask> {
    const F: &str = "SBMK";
    if buf.len() < MASK_HEADER {
        return Err(format_err(
            F,
            buf.len(),
            format!("truncated header: {} of {MASK_HEADER} bytes", buf.len()),
        ));
    }
    if &buf[..4] != MASK_MAGIC {
        return Err(format_err(F, 0, format!("bad magic {:?}", &buf[..4])));
    }
    if buf[4] != VERSION {
        return Err(format_err(F, 4, format!("unsupported version {}", buf[4])));
    }
    let (n, h, w) = (u32_at(buf, 5), u32_at(buf, 9), u32_at(buf, 13));
    if n == 0 || h == 0 || w == 0 {
        return Err(format_err(F, 5, format!("mask dims {n}x{h}x{w} must be positive")));
    }
    let need = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| format_err(F, 5, "dims overflow"))?;
    let payload = &buf[MASK_HEADER..];
    if payload.len() != need {
        return Err(format_err(
            F,
            MASK_HEADER + payload.len().min(need),
            format!("payload is {} bytes, dims {n}x{h}x{w} need {need}", payload.len()),
        ));
    }
    if let Some(pos) = payload.iter().position(|&b| b > 1) {
        return Err(format_err(
            F,
            MASK_HEADER + pos,
            format!("mask byte {} is not 0 or 1", payload[pos]),
        ));
    }
    BinaryMask::new(n, h, w, payload.to_vec())
}

pub fn write_tensor<T: Element>(path: impl AsRef<Path>, x: &Tensor4D<T>) -> Result<()> {
    fs::write(path, encode_tensor(x)?)?;
    Ok(())
}

pub fn read_tensor<T: Element>(path: impl AsRef<Path>) -> Result<Tensor4D<T>> {
    decode_tensor(&fs::read(path)?)
}

pub fn write_mask(path: impl AsRef<Path>, m: &BinaryMask) -> Result<()> {
    fs::write(path, encode_mask(m)?)?;
    Ok(())
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    decode_mask(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tensor_round_trip_both_dtypes_and_layouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4D::<f32>::random(Dims4::new(2, 3, 4, 5), &mut rng, -2.0, 2.0);
        for t in [x.clone(), x.transpose_layout()] {
            assert_eq!(decode_tensor::<f32>(&encode_tensor(&t).unwrap()).unwrap(), t);
            let t64 = t.cast::<f64>();
            assert_eq!(decode_tensor::<f64>(&encode_tensor(&t64).unwrap()).unwrap(), t64);
        }
    }

    #[test]
    fn header_layout() {
        let x = Tensor4D::<f32>::filled(Dims4::new(1, 1, 1, 2), Layout::ChannelsFirst, 1.5);
        let b = encode_tensor(&x).unwrap();
        assert_eq!(&b[..8], &[b'S', b'B', b'T', b'4', 1, 0, 1, 0]);
        assert_eq!(&b[8..24], &[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[24..28], &1.5f32.to_le_bytes());
        assert_eq!(b.len(), 32);
    }

    #[test]
    fn tensor_errors_carry_offsets() {
        let x = Tensor4D::<f32>::zeros(Dims4::new(1, 2, 2, 1), Layout::ChannelsLast);
        let good = encode_tensor(&x).unwrap();
        let offset = |r: Result<Tensor4D<f32>>| match r {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        };
        assert_eq!(offset(decode_tensor(&good[..10])), 10);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(offset(decode_tensor(&bad)), 0);
        let mut bad = good.clone();
        bad[4] = 9;
        assert_eq!(offset(decode_tensor(&bad)), 4);
        let mut bad = good.clone();
        bad[6] = 7;
        assert_eq!(offset(decode_tensor(&bad)), 6);
        assert_eq!(offset(decode_tensor(&good[..good.len() - 1])), good.len() - 1);
        assert!(matches!(
            decode_tensor::<f64>(&good),
            Err(Error::Format { offset: 5, .. })
        ));
    }

    #[test]
    fn mask_round_trip_and_errors() {
        let m = BinaryMask::from_fn(2, 3, 5, |i, y, x| (i + y * x) % 3 == 0);
        let b = encode_mask(&m).unwrap();
        assert_eq!(b.len(), 17 + 30);
        assert_eq!(decode_mask(&b).unwrap(), m);
        let mut bad = b.clone();
        bad[20] = 2;
        assert!(matches!(decode_mask(&bad), Err(Error::Format { offset: 20, .. })));
        assert!(matches!(decode_mask(&b[..16]), Err(Error::Format { offset: 16, .. })));
    }
}
