//! Binary tensor files.
//!
//! `PAT1`: magic, u32 rank, rank x u32 dims, then little-endian f32 data in
//! row-major order. `PAT8` has the same layout with f64 data and is used
//! wherever a round trip must be bit-exact (checkpoints, optimizer state).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::params::{ParamSet, Role};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn magic(self) -> &'static [u8; 4] {
        match self {
            Precision::F32 => b"PAT1",
            Precision::F64 => b"PAT8",
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Precision::F32 => "pat",
            Precision::F64 => "pat8",
        }
    }
}

pub fn encode(a: &Array, precision: Precision) -> Vec<u8> {
    let width = if precision == Precision::F32 { 4 } else { 8 };
    let mut out = Vec::with_capacity(8 + 4 * a.rank() + width * a.len());
    out.extend_from_slice(precision.magic());
    out.extend_from_slice(&(a.rank() as u32).to_le_bytes());
    for &d in a.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match precision {
        Precision::F32 => a.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Precision::F64 => a.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Array> {
    let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    if bytes.len() < 8 {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    let precision = match &bytes[..4] {
        b"PAT1" => Precision::F32,
        b"PAT8" => Precision::F64,
        m => return Err(bad(format!("bad magic {m:?}"))),
    };
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let rank = u32_at(4);
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(bad(format!("truncated dims for rank {rank}")));
    }
    let shape: Vec<usize> = (0..rank).map(|i| u32_at(8 + 4 * i)).collect();
    let n: usize = shape.iter().product();
    let width = if precision == Precision::F32 { 4 } else { 8 };
    if bytes.len() != header + width * n {
        return Err(bad(format!("payload is {} bytes, shape {shape:?} needs {}", bytes.len() - header, width * n)));
    }
    let payload = &bytes[header..];
    let data: Vec<f64> = match precision {
        Precision::F32 => {
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
        }
        Precision::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    Array::new(shape, data)
}

pub fn write(path: &Path, a: &Array, precision: Precision) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(a, precision)).map_err(|e| Error::io(path, e))
}

/// Reads either precision; the magic decides.
pub fn read(path: &Path) -> Result<Array> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightManifest {
    role: Role,
    tensors: Vec<WeightEntry>,
}

/// Writes a named tensor map as a directory of tensor files plus
/// `manifest.json`. Names may contain dots; they are kept out of filenames.
pub fn save_arrays(dir: &Path, role: Role, arrays: &IndexMap<String, Array>, precision: Precision) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::with_capacity(arrays.len());
    for (i, (name, a)) in arrays.iter().enumerate() {
        let file = format!("{i:03}.{}", precision.extension());
        write(&dir.join(&file), a, precision)?;
        tensors.push(WeightEntry { name: name.clone(), file, shape: a.shape().to_vec() });
    }
    let manifest = WeightManifest { role, tensors };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_arrays(dir: &Path) -> Result<(Role, IndexMap<String, Array>)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: WeightManifest = serde_json::from_str(&text)?;
    let mut out = IndexMap::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let file: PathBuf = dir.join(&e.file);
        let a = read(&file)?;
        if a.shape() != e.shape.as_slice() {
            return Err(Error::Format { path: file, reason: format!("shape {:?}, manifest says {:?}", a.shape(), e.shape) });
        }
        out.insert(e.name, a);
    }
    Ok((manifest.role, out))
}

pub fn save_params(dir: &Path, p: &ParamSet, precision: Precision) -> Result<()> {
    save_arrays(dir, p.role(), &p.arrays(), precision)
}

pub fn load_params(dir: &Path) -> Result<ParamSet> {
    let (role, arrays) = load_arrays(dir)?;
    Ok(ParamSet::from_arrays(role, arrays))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let a = Array::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode(&a, Precision::F32);
        assert_eq!(&b[..4], b"PAT1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let a = Array::new(vec![3], vec![0.1, 1.0 / 3.0, -7e-300]).unwrap();
        let back = decode(&encode(&a, Precision::F64), Path::new("mem")).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn f32_round_trip_rounds_to_single() {
        let a = Array::new(vec![1], vec![0.1]).unwrap();
        let back = decode(&encode(&a, Precision::F32), Path::new("mem")).unwrap();
        assert_eq!(back.data()[0], 0.1f32 as f64);
    }

    #[test]
    fn truncated_payload_rejected() {
        let a = Array::zeros(&[4]);
        let mut b = encode(&a, Precision::F32);
        b.pop();
        assert!(decode(&b, Path::new("x")).is_err());
    }
}
