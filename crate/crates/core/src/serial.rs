//! On-disk tensor and checkpoint format.
//!
//! One tensor per file: magic "DTC1", little-endian u32 rank, u32 extents,
//! then the data as little-endian f32 regardless of the in-memory scalar type.
//! A checkpoint directory holds one file per parameter plus a plain-text
//! manifest mapping names to shapes; loading cross-checks both directions.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DTC1";
const MAX_RANK: u32 = 8;

pub fn write_tensor<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let file = fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: bad magic {:?}", path.display(), magic)));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let rank = u32::from_le_bytes(u32buf);
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Format(format!("{}: unreasonable rank {}", path.display(), rank)));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        r.read_exact(&mut u32buf)?;
        shape.push(u32::from_le_bytes(u32buf) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        r.read_exact(&mut u32buf)?;
        data.push(S::from_f64(f32::from_le_bytes(u32buf) as f64));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format(format!(
            "{}: trailing bytes after {} elements",
            path.display(),
            numel
        )));
    }
    Tensor::from_vec(&shape, data)
}

fn shape_string(shape: &[usize]) -> String {
    shape.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("bad shape component {p:?}")))
        })
        .collect()
}

/// Write every parameter of `set` into `dir` (one .dtc file each) plus a
/// manifest.txt of `name = HxWx...` lines in name order.
pub fn save_params<S: Scalar>(dir: &Path, set: &ParamSet<S>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for p in set.iter() {
        write_tensor(&dir.join(format!("{}.dtc", p.name)), &p.tensor)?;
        manifest.push_str(&format!("{} = {}\n", p.name, shape_string(p.tensor.shape())));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Load a checkpoint saved by [`save_params`] into an existing set with
/// matching names and shapes (i.e. a freshly initialised model). Missing or
/// extra names and any shape mismatch are consistency errors.
pub fn load_params_into<S: Scalar>(dir: &Path, set: &mut ParamSet<S>) -> Result<()> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Format(format!("{}: {}", manifest_path.display(), e)))?;
    let mut seen = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, shape_s) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!("manifest line {}: missing '='", lineno + 1))
        })?;
        let name = name.trim();
        let shape = parse_shape(shape_s.trim())?;
        let tensor: Tensor<S> = read_tensor(&dir.join(format!("{name}.dtc")))?;
        if tensor.shape() != shape.as_slice() {
            return Err(Error::Consistency(format!(
                "{name}: manifest says {:?}, file holds {:?}",
                shape,
                tensor.shape()
            )));
        }
        let param = set.get_mut(name)?;
        if param.tensor.shape() != shape.as_slice() {
            return Err(Error::Consistency(format!(
                "{name}: model wants {:?}, checkpoint holds {:?}",
                param.tensor.shape(),
                shape
            )));
        }
        param.tensor = tensor;
        seen.push(name.to_string());
    }
    let want: Vec<String> = set.names().map(|s| s.to_string()).collect();
    if seen.len() != want.len() {
        let missing: Vec<&String> = want.iter().filter(|n| !seen.contains(n)).collect();
        return Err(Error::Consistency(format!(
            "checkpoint has {} of {} parameters; missing {:?}",
            seen.len(),
            want.len(),
            missing
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use crate::rng::Rng;

    #[test]
    fn tensor_roundtrip_exact_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dtc");
        let t = Tensor::<f32>::from_fn(&[3, 4, 2], |i| (i as f32) * 0.37 - 1.0);
        write_tensor(&path, &t).unwrap();
        let back: Tensor<f32> = read_tensor(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.dtc");
        fs::write(&path, b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_tensor::<f32>(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_and_trailing_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dtc");
        let t = Tensor::<f32>::from_fn(&[4], |i| i as f32);
        write_tensor(&path, &t).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(read_tensor::<f32>(&path).is_err());
        let mut extended = bytes.clone();
        extended.push(0);
        fs::write(&path, &extended).unwrap();
        assert!(matches!(read_tensor::<f32>(&path), Err(Error::Format(_))));
    }

    #[test]
    fn params_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(21);
        let mut set = ParamSet::<f32>::new();
        set.register("a.w", &[3, 2], Init::Uniform { lo: -1.0, hi: 1.0 }, &mut rng).unwrap();
        set.register("b.bias", &[5], Init::Uniform { lo: -1.0, hi: 1.0 }, &mut rng).unwrap();
        save_params(dir.path(), &set).unwrap();

        let mut fresh = ParamSet::<f32>::new();
        let mut rng2 = Rng::new(4242);
        fresh.register("a.w", &[3, 2], Init::Uniform { lo: -1.0, hi: 1.0 }, &mut rng2).unwrap();
        fresh.register("b.bias", &[5], Init::Uniform { lo: -1.0, hi: 1.0 }, &mut rng2).unwrap();
        assert!(!fresh.bit_eq(&set));
        load_params_into(dir.path(), &mut fresh).unwrap();
        assert!(fresh.bit_eq(&set));
    }

    #[test]
    fn missing_parameter_is_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(3);
        let mut set = ParamSet::<f32>::new();
        set.register("only.w", &[2], Init::Zeros, &mut rng).unwrap();
        save_params(dir.path(), &set).unwrap();
        let mut bigger = ParamSet::<f32>::new();
        bigger.register("only.w", &[2], Init::Zeros, &mut rng).unwrap();
        bigger.register("extra.w", &[2], Init::Zeros, &mut rng).unwrap();
        assert!(matches!(
            load_params_into(dir.path(), &mut bigger),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(3);
        let mut set = ParamSet::<f32>::new();
        set.register("w", &[2, 2], Init::Zeros, &mut rng).unwrap();
        save_params(dir.path(), &set).unwrap();
        let mut other = ParamSet::<f32>::new();
        other.register("w", &[4], Init::Zeros, &mut rng).unwrap();
        assert!(matches!(load_params_into(dir.path(), &mut other), Err(Error::Consistency(_))));
    }
}
