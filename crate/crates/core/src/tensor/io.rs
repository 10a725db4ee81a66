//! NFT1 binary tensor format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "NFT1"
//! 4       1     dtype code (0 = f32, 1 = f64)
//! 5       1     ndim (always 4)
//! 6       32    dims n, c, h, w as u64 little-endian
//! 38      ...   payload, little-endian, row-major
//! ```

use std::io::{Read, Write};

use super::{DType, Element, Shape, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NFT1";
pub const HEADER_LEN: usize = 38;

pub fn encode<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(4);
    for d in t.shape().dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Header fields of an NFT1 blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub dtype: DType,
    pub shape: Shape,
}

/// Parses the header; `base` is the blob's offset in the enclosing file and
/// is only used to report error positions.
pub fn decode_header(bytes: &[u8], base: u64) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            base + bytes.len() as u64,
            format!("truncated NFT1 header ({} of {HEADER_LEN} bytes)", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(base, format!("bad magic {:?}, expected \"NFT1\"", &bytes[..4])));
    }
    let dtype = DType::from_code(bytes[4])
        .ok_or_else(|| Error::format(base + 4, format!("unknown dtype code {}", bytes[4])))?;
    if bytes[5] != 4 {
        return Err(Error::format(base + 5, format!("ndim must be 4, got {}", bytes[5])));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 6 + 8 * i;
        let v = u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
        *d = usize::try_from(v).map_err(|_| Error::format(base + off as u64, "dimension too large"))?;
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])
        .map_err(|e| Error::format(base + 6, e.to_string()))?;
    Ok(Header { dtype, shape })
}

/// Decodes a blob that must hold exactly one tensor of element type `T`.
pub fn decode<T: Element>(bytes: &[u8], base: u64) -> Result<Tensor<T>> {
    let header = decode_header(bytes, base)?;
    if header.dtype != T::DTYPE {
        return Err(Error::format(
            base + 4,
            format!("dtype is {}, expected {}", header.dtype, T::DTYPE),
        ));
    }
    let esize = T::DTYPE.size();
    let want = header
        .shape
        .numel()
        .checked_mul(esize)
        .ok_or_else(|| Error::format(base + 6, "payload size overflows"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != want {
        return Err(Error::format(
            base + HEADER_LEN as u64,
            format!("payload is {} bytes, header implies {want}", payload.len()),
        ));
    }
    let data = payload.chunks_exact(esize).map(T::read_le).collect();
    Tensor::from_vec(header.shape, data)
}

pub fn write<T: Element>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

pub fn read<T: Element>(r: &mut impl Read) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes, 0)
}

pub fn save<T: Element>(path: impl AsRef<std::path::Path>, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode(t))?;
    Ok(())
}

pub fn load<T: Element>(path: impl AsRef<std::path::Path>) -> Result<Tensor<T>> {
    decode(&std::fs::read(path)?, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::tensor::Rng;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::<f32>::from_vec((1, 2, 1, 1), vec![1.0, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"NFT1");
        assert_eq!(b[4], 0);
        assert_eq!(b[5], 4);
        assert_eq!(&b[6..14], &1u64.to_le_bytes());
        assert_eq!(&b[14..22], &2u64.to_le_bytes());
        assert_eq!(&b[38..42], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 38 + 8);
    }

    #[test]
    fn rejects_corruption_with_offsets() {
        let t = Tensor::<f64>::zeros((1, 1, 2, 2)).unwrap();
        let mut b = encode(&t);
        b[1] = b'X';
        match decode::<f64>(&b, 100) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 100),
            other => panic!("unexpected {other:?}"),
        }
        let b = encode(&t);
        assert!(matches!(decode::<f32>(&b, 0), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(decode::<f64>(&b[..b.len() - 1], 0), Err(Error::Format { offset: 38, .. })));
        assert!(matches!(decode::<f64>(&b[..10], 0), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn round_trip(n in 1usize..3, c in 1usize..4, h in 1usize..4, w in 1usize..4, seed in any::<u64>()) {
            let t = Tensor::<f64>::randn((n, c, h, w), &mut Rng::new(seed)).unwrap();
            prop_assert_eq!(decode::<f64>(&encode(&t), 0).unwrap(), t.clone());
            let t32 = t.cast::<f32>();
            prop_assert_eq!(decode::<f32>(&encode(&t32), 0).unwrap(), t32);
        }
    }
}
