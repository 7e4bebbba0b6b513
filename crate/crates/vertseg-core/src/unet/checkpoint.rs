//! Checkpoint file format.
//!
//! Little-endian binary layout:
//!
//! ```text
//! magic    4 bytes  "VSEG"
//! version  u32      currently 1
//! config   5 x u32  depth, base_channels, in_channels, out_channels, kernel
//! count    u32      number of parameter tensors
//! per tensor, in build order:
//!   ndim   u32
//!   dims   ndim x u32
//!   data   product(dims) x f32, raw little-endian
//! ```
//!
//! Save followed by load is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{UNetConfig, UNetModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"VSEG";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32, path: &Path) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn save_checkpoint(model: &UNetModel<f32>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
    write_u32(&mut w, CHECKPOINT_VERSION, path)?;
    let cfg = model.config();
    for v in [
        cfg.depth,
        cfg.base_channels,
        cfg.in_channels,
        cfg.out_channels,
        cfg.kernel,
    ] {
        write_u32(&mut w, v as u32, path)?;
    }
    write_u32(&mut w, model.params().len() as u32, path)?;
    for tensor in model.params() {
        write_u32(&mut w, tensor.shape().len() as u32, path)?;
        for &d in tensor.shape() {
            write_u32(&mut w, d as u32, path)?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<UNetModel<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic, not a checkpoint file",
            path.display()
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version} (expected {CHECKPOINT_VERSION})",
            path.display()
        )));
    }
    let config = UNetConfig {
        depth: read_u32(&mut r, path)? as usize,
        base_channels: read_u32(&mut r, path)? as usize,
        in_channels: read_u32(&mut r, path)? as usize,
        out_channels: read_u32(&mut r, path)? as usize,
        kernel: read_u32(&mut r, path)? as usize,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;

    let specs = config.param_specs();
    let count = read_u32(&mut r, path)? as usize;
    if count != specs.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {count} tensors stored but the config implies {}",
            path.display(),
            specs.len()
        )));
    }
    let mut names = Vec::with_capacity(count);
    let mut params = Vec::with_capacity(count);
    for spec in specs {
        let ndim = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        if shape != spec.shape {
            return Err(Error::Checkpoint(format!(
                "{}: parameter {} has shape {shape:?}, expected {:?}",
                path.display(),
                spec.name,
                spec.shape
            )));
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        names.push(spec.name);
        params.push(Tensor::new(shape, data)?.with_requires_grad(true));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Checkpoint(format!(
            "{}: trailing bytes after the final tensor",
            path.display()
        )));
    }
    Ok(UNetModel::from_parts(config, names, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> UNetConfig {
        UNetConfig {
            depth: 2,
            base_channels: 4,
            in_channels: 1,
            out_channels: 1,
            kernel: 3,
        }
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = UNetModel::<f32>::build(small_config(), 77).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config(), model.config());
        assert_eq!(loaded.names(), model.names());
        for (a, b) in model.params().iter().zip(loaded.params()) {
            assert_eq!(a.shape(), b.shape());
            assert_eq!(a.data(), b.data());
        }

        // Saving the loaded model reproduces the file byte for byte.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = UNetModel::<f32>::build(small_config(), 1).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn trailing_bytes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = UNetModel::<f32>::build(small_config(), 1).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));
    }
}
