//! MVLT tensor files.
//!
//! Layout: the 4-byte magic `MVLT`, a version byte (1), a dtype byte
//! (0 = f32, 1 = f64), a rank byte, `rank` little-endian `u32` dimensions,
//! then the row-major little-endian payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const MVLT_MAGIC: [u8; 4] = *b"MVLT";
pub const MVLT_VERSION: u8 = 1;

const HEADER_LEN: usize = 7;

/// A decoded tensor in whichever precision the file stored.
#[derive(Clone, Debug, PartialEq)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            DynTensor::F32(_) => Dtype::F32,
            DynTensor::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.shape(),
            DynTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`; exact when `T` matches the stored dtype.
    pub fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        match self {
            DynTensor::F32(t) => t.cast(),
            DynTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode_mvlt<T: Scalar>(tensor: &Tensor<T>) -> Vec<u8> {
    let rank = tensor.rank();
    assert!(rank <= u8::MAX as usize, "rank {rank} does not fit the MVLT header");
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * rank + tensor.len() * T::DTYPE.size());
    out.extend_from_slice(&MVLT_MAGIC);
    out.push(MVLT_VERSION);
    out.push(T::DTYPE.code());
    out.push(rank as u8);
    for &d in tensor.shape() {
        let d = u32::try_from(d).expect("dimension exceeds u32");
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    out
}

fn decode_payload<T: Scalar>(shape: &[usize], payload: &[u8]) -> Result<Tensor<T>> {
    let data = payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn decode_mvlt(bytes: &[u8]) -> Result<DynTensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            "header",
            format!("expected at least {HEADER_LEN} bytes, found {}", bytes.len()),
        ));
    }
    if bytes[..4] != MVLT_MAGIC {
        return Err(Error::format(
            "magic",
            format!("expected \"MVLT\", found {:?}", &bytes[..4]),
        ));
    }
    if bytes[4] != MVLT_VERSION {
        return Err(Error::format(
            "version",
            format!("expected {MVLT_VERSION}, found {}", bytes[4]),
        ));
    }
    let dtype =
        Dtype::from_code(bytes[5]).ok_or_else(|| Error::format("dtype", format!("unknown dtype code {}", bytes[5])))?;
    let rank = bytes[6] as usize;
    let dims_end = HEADER_LEN + 4 * rank;
    if bytes.len() < dims_end {
        return Err(Error::format(
            "dims",
            format!("expected {dims_end} header bytes, found {}", bytes.len()),
        ));
    }
    let shape: Vec<usize> = bytes[HEADER_LEN..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(Error::format("dims", format!("zero dimension in {shape:?}")));
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("dims", format!("element count of {shape:?} overflows")))?;
    let expected = count * dtype.size();
    let payload = &bytes[dims_end..];
    if payload.len() != expected {
        return Err(Error::format(
            "payload",
            format!("expected {expected} bytes, found {}", payload.len()),
        ));
    }
    Ok(match dtype {
        Dtype::F32 => DynTensor::F32(decode_payload(&shape, payload)?),
        Dtype::F64 => DynTensor::F64(decode_payload(&shape, payload)?),
    })
}

pub fn save_mvlt<T: Scalar>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    super::write_file(path.as_ref(), &encode_mvlt(tensor))
}

pub fn load_mvlt(path: impl AsRef<Path>) -> Result<DynTensor> {
    decode_mvlt(&super::read_file(path.as_ref())?)
}
