//! Binary tensor serialization.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset 0   magic "GFT1"
//! offset 4   u8 dtype (0 = f32, 1 = f64)
//! offset 5   u8 rank (1..=8)
//! offset 6   rank u32 extents, each positive
//! then       row-major elements
//! ```
//!
//! Read errors carry the byte offset at which the stream stopped making
//! sense.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};

pub const TENSOR_MAGIC: &[u8; 4] = b"GFT1";
pub const MAX_RANK: usize = 8;

pub fn write_tensor<T: Scalar, W: Write>(out: &mut W, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(6 + 4 * t.shape().len() + t.numel() * T::DTYPE.byte_width());
    if t.shape().len() > MAX_RANK {
        return Err(Error::contract(
            "write_tensor",
            format!("rank {} exceeds the format limit {MAX_RANK}", t.shape().len()),
        ));
    }
    if let Some(&e) = t.shape().iter().find(|&&e| e > u32::MAX as usize) {
        return Err(Error::contract(
            "write_tensor",
            format!("extent {e} does not fit in 32 bits"),
        ));
    }
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.push(T::DTYPE.code());
    buf.push(t.shape().len() as u8);
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads a tensor whose element type is `T`; a stored dtype that differs from
/// `T` is a format error, not a cast.
pub fn read_tensor<T: Scalar, R: Read>(src: &mut R) -> Result<Tensor<T>> {
    let mut offset = 0u64;
    let mut magic = [0u8; 4];
    read_exact_at(src, &mut magic, &mut offset)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:02x?}, want \"GFT1\"")));
    }
    let mut head = [0u8; 2];
    read_exact_at(src, &mut head, &mut offset)?;
    let dtype = Dtype::from_code(head[0])
        .ok_or_else(|| Error::format(4, format!("unknown dtype code {}", head[0])))?;
    if dtype != T::DTYPE {
        return Err(Error::format(
            4,
            format!("stored dtype {:?} does not match requested {:?}", dtype, T::DTYPE),
        ));
    }
    let rank = head[1] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::format(5, format!("rank {rank} outside 1..={MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = offset;
        let mut ext = [0u8; 4];
        read_exact_at(src, &mut ext, &mut offset)?;
        let e = u32::from_le_bytes(ext);
        if e == 0 {
            return Err(Error::format(at, format!("extent {i} is zero")));
        }
        shape.push(e as usize);
    }
    let numel: usize = shape.iter().product();
    let width = T::DTYPE.byte_width();
    let mut raw = vec![0u8; numel * width];
    read_exact_at(src, &mut raw, &mut offset)?;
    let data = raw.chunks_exact(width).map(T::read_le).collect();
    Ok(Tensor::from_vec(&shape, data))
}

fn read_exact_at<R: Read>(src: &mut R, buf: &mut [u8], offset: &mut u64) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match src.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::format(
                    *offset + filled as u64,
                    format!("unexpected end of stream, needed {} more bytes", buf.len() - filled),
                ))
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    *offset += buf.len() as u64;
    Ok(())
}
