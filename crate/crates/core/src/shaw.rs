//! The `SHAW` weight container: magic `SHAW`, version u32, then per-tensor
//! records of name length + UTF-8 name, rank, dims as u32 little-endian,
//! and a raw little-endian f32 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SHAW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ShawTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl ShawTensor {
    pub fn new(name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Self {
        ShawTensor {
            name: name.into(),
            dims: dims.iter().map(|&d| d as u32).collect(),
            data,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn element_count(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

pub fn write_to(w: &mut impl Write, tensors: &[ShawTensor]) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
        for d in &t.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        if t.element_count() != t.data.len() {
            return Err(Error::WeightFormat(format!(
                "tensor '{}': dims {:?} disagree with payload length {}",
                t.name,
                t.dims,
                t.data.len()
            )));
        }
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_from(r: &mut impl Read) -> Result<Vec<ShawTensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::WeightFormat("truncated header".into()))?;
    if magic != MAGIC {
        return Err(Error::WeightFormat(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let version = read_u32(r).ok_or_else(|| Error::WeightFormat("truncated version".into()))?;
    if version != VERSION {
        return Err(Error::WeightFormat(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }

    let mut tensors = Vec::new();
    loop {
        let name_len = match read_u32(r) {
            Some(n) => n as usize,
            None => break, // clean EOF between records
        };
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| Error::WeightFormat("truncated tensor name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::WeightFormat("tensor name is not UTF-8".into()))?;
        let rank = read_u32(r)
            .ok_or_else(|| Error::WeightFormat(format!("truncated rank for '{name}'")))?
            as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(
                read_u32(r)
                    .ok_or_else(|| Error::WeightFormat(format!("truncated dims for '{name}'")))?,
            );
        }
        let count: usize = dims.iter().map(|&d| d as usize).product();
        let mut payload = vec![0u8; count * 4];
        r.read_exact(&mut payload)
            .map_err(|_| Error::WeightFormat(format!("truncated payload for '{name}'")))?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push(ShawTensor { name, dims, data });
    }
    Ok(tensors)
}

pub fn write_file(path: impl AsRef<Path>, tensors: &[ShawTensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<ShawTensor>> {
    let mut r = BufReader::new(File::open(path)?);
    read_from(&mut r)
}

fn read_u32(r: &mut impl Read) -> Option<u32> {
    let mut buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return None,
            Ok(0) => return None, // partial u32 at EOF, caller treats as truncation
            Ok(n) => filled += n,
            Err(_) => return None,
        }
    }
    Some(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_bit_exactly() {
        let tensors = vec![
            ShawTensor::new("a.weight", &[2, 3], vec![1.0, -2.5, 0.0, 3.25, f32::MIN_POSITIVE, 7.0]),
            ShawTensor::new("a.bias", &[3], vec![0.1, 0.2, 0.3]),
            ShawTensor::new("empty", &[0], vec![]),
        ];
        let mut buf = Vec::new();
        write_to(&mut buf, &tensors).unwrap();
        assert_eq!(&buf[..4], b"SHAW");
        let back = read_from(&mut &buf[..]).unwrap();
        assert_eq!(tensors.len(), back.len());
        for (t, b) in tensors.iter().zip(&back) {
            assert_eq!(t.name, b.name);
            assert_eq!(t.dims, b.dims);
            assert_eq!(
                t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut buf = Vec::new();
        write_to(&mut buf, &[ShawTensor::new("w", &[2], vec![1.0, 2.0])]).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_from(&mut &bad[..]), Err(Error::WeightFormat(_))));

        let cut = &buf[..buf.len() - 3];
        assert!(matches!(read_from(&mut &cut[..]), Err(Error::WeightFormat(_))));
    }
}
