//! Binary checkpoint: magic, version, the model configuration as
//! `key = value` text, the vocabulary size, then every parameter as
//! `(name, shape, little-endian f64 data)`, closed by a CRC32 of all
//! preceding bytes.

use std::fs;
use std::path::Path;

use super::{ModelConfig, ParameterSet};
use crate::error::{Error, Result};
use crate::run::kv::KvFile;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PIMICKPT";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ParameterSet) -> Result<()> {
    params.check_shapes(config)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, VERSION);
    put_bytes(&mut buf, config.to_kv().as_bytes());
    buf.extend_from_slice(&(params.num_items() as u64).to_le_bytes());
    let named = params.named();
    put_u32(&mut buf, named.len() as u32);
    for (name, t) in named {
        put_bytes(&mut buf, name.as_bytes());
        put_u32(&mut buf, t.shape().len() as u32);
        for &s in t.shape() {
            buf.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParameterSet)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<(ModelConfig, ParameterSet)> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, at: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let text = String::from_utf8(r.bytes()?.to_vec())
        .map_err(|_| Error::Checkpoint("configuration block is not UTF-8".into()))?;
    let mut kv = KvFile::parse(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let config = ModelConfig::from_kv(&mut kv).map_err(|e| Error::Checkpoint(e.to_string()))?;
    kv.finish().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let num_items = r.u64()? as usize;

    let expected = ParameterSet::expected_shapes(&config, num_items);
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, configuration needs {}",
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let name = String::from_utf8_lossy(r.bytes()?).into_owned();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|s| s as usize))
            .collect::<Result<Vec<_>>>()?;
        if &name != want_name || &shape != want_shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} {shape:?} does not match expected {want_name} {want_shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(shape, data)?.with_grad());
    }
    if r.at != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }

    // Any init fills the layout; the stored tensors then overwrite it.
    let mut params = ParameterSet::init(
        &config,
        num_items,
        &mut rand::rngs::mock::StepRng::new(0, 0),
    );
    for (slot, t) in params.tensors_mut().into_iter().zip(tensors) {
        *slot = t;
    }
    Ok((config, params))
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    put_u32(buf, b.len() as u32);
    buf.extend_from_slice(b);
}

struct Reader<'b> {
    buf: &'b [u8],
    at: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.buf[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'b [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn small() -> (ModelConfig, ParameterSet) {
        let cfg = ModelConfig {
            dim: 4,
            max_len: 5,
            interests: 2,
            layers: 1,
            interval_threshold: 8,
            ..ModelConfig::default()
        };
        let p = ParameterSet::init(&cfg, 7, &mut ChaCha8Rng::seed_from_u64(1));
        (cfg, p)
    }

    #[test]
    fn round_trip_is_exact() {
        let (cfg, p) = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_checkpoint(&path, &cfg, &p).unwrap();
        let (cfg2, p2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(p, p2);
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let (cfg, p) = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_checkpoint(&path, &cfg, &p).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(matches!(decode(b"hello"), Err(Error::Checkpoint(_))));
    }
}
