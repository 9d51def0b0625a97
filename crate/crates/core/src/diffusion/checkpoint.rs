//! `DNZ1` model checkpoints: magic, `u32` parameter count, then for each
//! parameter a `u32` name length, the UTF-8 name and a `TNS1` tensor.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::diffusion::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::tensor::{read_u32, Tensor};

const MAGIC: &[u8; 4] = b"DNZ1";

pub fn write_checkpoint<W: Write>(model: &Denoiser, w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(model.params().len() as u32).to_le_bytes())?;
    for (name, t) in model.params() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        t.write_to(w)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Denoiser> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let count = read_u32(r)? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len > 4096 {
            return Err(Error::Format(format!("parameter name of {len} bytes")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let t = Tensor::read_from(r)?;
        params.insert(name, t);
    }
    Denoiser::from_params(params)
}

pub fn save_checkpoint(model: &Denoiser, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Denoiser> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::denoiser::DenoiserConfig;
    use crate::rng::seeded;

    #[test]
    fn round_trip_is_bit_exact() {
        let m = Denoiser::new(DenoiserConfig::default(), &mut seeded(4));
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"DNZ1");
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_checkpoint(&mut &b"NOPE\0\0\0\0"[..]).is_err());
        let m = Denoiser::new(DenoiserConfig::default(), &mut seeded(4));
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
