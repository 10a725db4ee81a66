//! `.nfc` checkpoint container.
//!
//! ```text
//! offset 0   "NFC1"
//!        4   u64 LE  header length H
//!       12   H bytes JSON header
//!   12 + H   u64 LE  entry count
//!            per entry: u32 LE name length, UTF-8 name,
//!                       u64 LE payload length, NFT1 tensor
//! ```
//!
//! Entries are named `layer{i}.{param}` and written in model order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::tensor::{io as nft, DType, Element, Rng};
use crate::train::AdamConfig;

pub const MAGIC: &[u8; 4] = b"NFC1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub dtype: DType,
    pub flow: FlowConfig,
    pub optimizer: AdamConfig,
    pub step: u64,
    pub actnorm_initialized: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
}

impl CheckpointHeader {
    pub fn for_model<T: Element>(model: &FlowModel<T>, optimizer: AdamConfig, step: u64) -> Self {
        CheckpointHeader {
            dtype: T::DTYPE,
            flow: model.config().clone(),
            optimizer,
            step,
            actnorm_initialized: model.actnorm_flags(),
            dataset: None,
        }
    }
}

pub fn encode<T: Element>(model: &FlowModel<T>, header: &CheckpointHeader) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let params = model.params();
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, p) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let bytes = nft::encode(&p.value);
        out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&bytes);
    }
    Ok(out)
}

pub fn save<T: Element>(path: impl AsRef<Path>, model: &FlowModel<T>, header: &CheckpointHeader) -> Result<()> {
    std::fs::write(path, encode(model, header)?)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.pos as u64,
                format!("truncated {what}: need {len} bytes, {} left", self.bytes.len() - self.pos),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.pos as u64;
        usize::try_from(self.u64(what)?).map_err(|_| Error::format(at, format!("{what} does not fit in memory")))
    }
}

fn read_header(c: &mut Cursor<'_>) -> Result<CheckpointHeader> {
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"NFC1\"")));
    }
    let len = c.len("header length")?;
    let at = c.pos as u64;
    let json = c.take(len, "header")?;
    serde_json::from_slice(json).map_err(|e| Error::format(at, format!("invalid header: {e}")))
}

pub fn decode_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    read_header(&mut Cursor { bytes, pos: 0 })
}

/// Rebuilds a model of element type `T`; fails if the checkpoint was written
/// with another dtype.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<(FlowModel<T>, CheckpointHeader)> {
    let mut c = Cursor { bytes, pos: 0 };
    let header = read_header(&mut c)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Config(format!(
            "checkpoint holds {} parameters, requested {}",
            header.dtype,
            T::DTYPE
        )));
    }
    let mut model = FlowModel::<T>::new(header.flow.clone(), &mut Rng::new(0))?;
    let count_at = c.pos as u64;
    let count = c.len("entry count")?;
    let mut params = model.params_mut();
    if count != params.len() {
        return Err(Error::format(
            count_at,
            format!("model has {} parameters, checkpoint lists {count}", params.len()),
        ));
    }
    for (name, p) in params.iter_mut() {
        let at = c.pos as u64;
        let nlen = c.u32("entry name length")? as usize;
        let got = c.take(nlen, "entry name")?;
        if got != name.as_bytes() {
            return Err(Error::format(
                at,
                format!("expected entry `{name}`, found `{}`", String::from_utf8_lossy(got)),
            ));
        }
        let plen = c.len("entry length")?;
        let base = c.pos as u64;
        let t = nft::decode::<T>(c.take(plen, "entry payload")?, base)?;
        if t.shape() != p.value.shape() {
            return Err(Error::format(
                base,
                format!("`{name}` must be {}, got {}", p.value.shape(), t.shape()),
            ));
        }
        p.value = t;
    }
    drop(params);
    if c.pos != bytes.len() {
        return Err(Error::format(c.pos as u64, "trailing bytes after last entry"));
    }
    model.set_actnorm_flags(&header.actnorm_initialized)?;
    Ok((model, header))
}

pub fn load<T: Element>(path: impl AsRef<Path>) -> Result<(FlowModel<T>, CheckpointHeader)> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn model() -> FlowModel<f32> {
        let mut rng = Rng::new(4);
        let mut m = FlowModel::new(FlowConfig::new(3, 4, 4, 1, 2).with_hidden(4), &mut rng).unwrap();
        drop(m.forward(&Tensor::randn((4, 3, 4, 4), &mut rng).unwrap()).unwrap());
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let header = CheckpointHeader::for_model(&m, AdamConfig::default(), 7);
        let bytes = encode(&m, &header).unwrap();
        let (back, h) = decode::<f32>(&bytes).unwrap();
        assert_eq!(h, header);
        assert_eq!(back.actnorm_flags(), vec![true, true]);
        for ((na, a), (nb, b)) in m.params().iter().zip(back.params()) {
            assert_eq!(na, &nb);
            assert_eq!(a.value, b.value);
        }
        assert_eq!(encode(&back, &h).unwrap(), bytes);
        assert!(m.params()[0].0.starts_with("layer1."));
    }

    #[test]
    fn corruption_reports_offsets() {
        let m = model();
        let bytes = encode(&m, &CheckpointHeader::for_model(&m, AdamConfig::default(), 0)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let e = decode::<f32>(&bad).unwrap_err();
        assert!(matches!(e, Error::Format { offset: 0, .. }), "{e}");
        assert!(matches!(decode::<f32>(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        assert!(matches!(decode::<f64>(&bytes), Err(Error::Config(_))));
    }
}
