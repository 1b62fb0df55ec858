//! ADTN tensor container: `"ADTN"`, version byte `0x01`, rank byte, rank
//! little-endian `u32` extents, then the row-major little-endian `f32`
//! payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Scalar, Tensor, MAX_RANK};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ADTN";
pub const VERSION: u8 = 0x01;

pub fn encoded_len(shape: &[usize]) -> usize {
    6 + 4 * shape.len() + 4 * shape.iter().product::<usize>()
}

pub fn write<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(encoded_len(t.shape()));
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(t.rank() as u8);
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent {e} overflows u32")))?;
        buf.extend_from_slice(&e.to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read<T: Scalar>(r: &mut impl Read) -> Result<Tensor<T>> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected \"ADTN\"", &head[..4])));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported ADTN version {:#04x}", head[4])));
    }
    let rank = head[5] as usize;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut e = [0u8; 4];
        r.read_exact(&mut e)?;
        shape.push(u32::from_le_bytes(e) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(&shape, data)
}

pub fn to_bytes<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(t.shape()));
    write(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn from_bytes<T: Scalar>(mut bytes: &[u8]) -> Result<Tensor<T>> {
    read(&mut bytes)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, to_bytes(t))?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::new(&[2, 1], vec![1.0, -2.5]).unwrap();
        let bytes = to_bytes(&t);
        assert_eq!(&bytes[..4], b"ADTN");
        assert_eq!(bytes[4], 0x01);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        assert_eq!(&bytes[10..14], &1u32.to_le_bytes());
        assert_eq!(&bytes[14..18], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[18..22], &(-2.5f32).to_le_bytes());
        assert_eq!(bytes.len(), encoded_len(t.shape()));
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let mut bytes = to_bytes(&Tensor::<f32>::zeros(&[3]));
        bytes[0] = b'X';
        assert!(matches!(from_bytes::<f32>(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let bytes = to_bytes(&Tensor::<f32>::zeros(&[4, 4]));
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless(shape in prop::collection::vec(1usize..5, 0..=4), seed in any::<u32>()) {
            let t = Tensor::<f32>::from_fn(&shape, |i| ((i as u32 ^ seed) as f32).sin() * 1e3);
            let back: Tensor<f32> = from_bytes(&to_bytes(&t)).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
