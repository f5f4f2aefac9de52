//! Binary weight checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"FSEGCKPT"  u32 version  u32 tensor_count
//! per tensor:  u16 name_len  name (UTF-8)  u8 rank  u32 dims[rank]  f32 payload
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FSEGCKPT";
pub const VERSION: u32 = 1;

/// A named tensor as stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

pub fn write_checkpoint<W: Write>(mut out: W, tensors: &[NamedTensor]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&u32_len(tensors.len(), "tensor count")?.to_le_bytes())?;
    for nt in tensors {
        let name = nt.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {}", nt.name)))?;
        out.write_all(&name_len.to_le_bytes())?;
        out.write_all(name)?;
        let rank = u8::try_from(nt.tensor.rank())
            .map_err(|_| Error::Format(format!("rank too large for {}", nt.name)))?;
        out.write_all(&[rank])?;
        for &d in nt.tensor.dims() {
            out.write_all(&u32_len(d, "dimension")?.to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(nt.tensor.len() * 4);
        for v in nt.tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&payload)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<NamedTensor>> {
    let mut magic = [0u8; 8];
    read_exact(&mut input, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut input)? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let mut len = [0u8; 2];
        read_exact(&mut input, &mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact(&mut input, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        read_exact(&mut input, &mut rank)?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            dims.push(read_u32(&mut input)? as usize);
        }
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        read_exact(&mut input, &mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::new(dims, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        tensors.push(NamedTensor { name, tensor });
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(tensors)
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} exceeds u32")))
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes_are_exact() {
        let t = NamedTensor {
            name: "b".into(),
            tensor: Tensor::new(vec![2], vec![1.0, -2.5]).unwrap(),
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[t]).unwrap();
        let mut expected = b"FSEGCKPT".to_vec();
        expected.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0]);
        expected.extend_from_slice(&[1, 0, b'b', 1, 2, 0, 0, 0]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_checkpoint(&b"NOTACKPT"[..]), Err(Error::Format(_))));
        let t = NamedTensor {
            name: "w".into(),
            tensor: Tensor::zeros(&[3]),
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[t]).unwrap();
        buf.pop();
        assert!(matches!(read_checkpoint(&buf[..]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn roundtrip(dims in prop::collection::vec(1usize..4, 1..4), name in "[a-z0-9._]{0,12}", seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| ((i as u32 ^ seed) as f32).sin()).collect();
            let t = NamedTensor { name, tensor: Tensor::new(dims, data).unwrap() };
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, std::slice::from_ref(&t)).unwrap();
            prop_assert_eq!(read_checkpoint(&buf[..]).unwrap(), vec![t]);
        }
    }
}
