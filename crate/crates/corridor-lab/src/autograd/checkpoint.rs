//! Bit-exact named-tensor checkpoint files.
//!
//! Layout: magic `CLTF`, version u32, tensor count u32; then per tensor:
//! name length u32 + UTF-8 bytes, ndim u32, dims u32 each, values f64.
//! All integers and floats little-endian.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CLTF";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        let t = Self { name: name.into(), shape, values };
        assert_eq!(t.shape.iter().product::<usize>(), t.values.len());
        t
    }
}

pub fn save_named_tensors(path: &Path, tensors: &[NamedTensor]) -> io::Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)
}

pub fn load_named_tensors(path: &Path) -> io::Result<Vec<NamedTensor>> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    let mut pos = 0usize;
    let bad = |msg: &str| io::Error::new(io::ErrorKind::InvalidData, msg.to_string());
    let take = |pos: &mut usize, n: usize| -> io::Result<&[u8]> {
        if *pos + n > data.len() {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated checkpoint"));
        }
        let s = &data[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad("unsupported checkpoint version"));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| bad("tensor name is not UTF-8"))?;
        let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        out.push(NamedTensor { name, shape, values });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cltf");
        let tensors = vec![
            NamedTensor::new("enc.w", vec![2, 3], vec![1.5, -2.25, 0.1, f64::MIN_POSITIVE, 1e300, -0.0]),
            NamedTensor::new("enc.b", vec![2], vec![0.0, 7.0]),
        ];
        save_named_tensors(&path, &tensors).unwrap();
        let loaded = load_named_tensors(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (a, b) in tensors.iter().zip(&loaded) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            // Bit-level comparison, not float equality.
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // Saving the loaded tensors reproduces the file byte for byte.
        let path2 = dir.path().join("model2.cltf");
        save_named_tensors(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.cltf");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(load_named_tensors(&path).is_err());
    }
}
