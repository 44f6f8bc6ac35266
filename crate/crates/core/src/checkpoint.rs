//! Checkpoint container: magic "FIFA", format version, then a count-prefixed
//! table of named tensors (name length, name bytes, rank, dims, little-endian
//! f64 values). Round trips are byte-exact.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::NetworkParams;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FIFA";
const VERSION: u32 = 1;

pub fn save(params: &NetworkParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::contract(
                "checkpoint",
                format!("{}: truncated file", self.path.display()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load(path: &Path) -> Result<NetworkParams> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut cur = Cursor { buf: &raw, pos: 0, path };
    if cur.take(4)? != MAGIC {
        return Err(Error::contract(
            "checkpoint",
            format!("{}: bad magic (not a FIFA checkpoint)", path.display()),
        ));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::contract(
            "checkpoint",
            format!("{}: unsupported version {version}", path.display()),
        ));
    }
    let count = cur.u32()? as usize;
    let mut params = NetworkParams::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::contract("checkpoint", "non-utf8 parameter name"))?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = cur.take(numel * 8)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    if cur.pos != raw.len() {
        return Err(Error::contract(
            "checkpoint",
            format!("{}: trailing bytes after table", path.display()),
        ));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, NetworkConfig};

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = std::env::temp_dir().join("fifa_ckpt_test");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        let cfg = NetworkConfig {
            input_h: 16,
            input_w: 16,
            landmarks: 3,
            base_channels: 4,
            hourglass_depth: 2,
            attention_heads: 2,
            feature_dim: 8,
        };
        let params = init_params(&cfg, 42).unwrap();
        let p1 = dir.join("a.ckpt");
        let p2 = dir.join("b.ckpt");
        save(&params, &p1).unwrap();
        let loaded = load(&p1).unwrap();
        save(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        // values and order survive
        assert_eq!(params.len(), loaded.len());
        for ((na, ta), (nb, tb)) in params.iter().zip(loaded.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            assert!(ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        let dir = std::env::temp_dir().join("fifa_ckpt_bad");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        let bad = dir.join("bad.ckpt");
        fs::write(&bad, b"not a checkpoint").unwrap();
        assert!(load(&bad).is_err());

        let cfg = NetworkConfig {
            input_h: 16,
            input_w: 16,
            landmarks: 2,
            base_channels: 2,
            hourglass_depth: 1,
            attention_heads: 1,
            feature_dim: 4,
        };
        let params = init_params(&cfg, 1).unwrap();
        let good = dir.join("good.ckpt");
        save(&params, &good).unwrap();
        let mut bytes = fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&bad, &bytes).unwrap();
        assert!(load(&bad).is_err());
        let _ = fs::remove_dir_all(&dir);
    }
}
