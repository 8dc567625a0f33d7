//! Binary layout, little-endian throughout:
//!
//! ```text
//! "UTNC"  u16 version
//! u32 config length, config JSON (architecture)
//! u32 tensor count
//! per tensor: u16 name length, name bytes, u8 rank, u32 extents[rank], f32 payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::ArchConfig;
use crate::error::{Error, Result};
use crate::network::UtNet;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"UTNC";
pub const CHECKPOINT_VERSION: u16 = 1;

fn encode(cfg: &ArchConfig, store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let tensors: Vec<(&str, &Tensor<f32>)> = store.params().chain(store.buffers()).collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes through a sibling temporary file and a rename.
pub fn save_checkpoint(path: &Path, cfg: &ArchConfig, store: &ParamStore<f32>) -> Result<()> {
    let bytes = encode(cfg, store)?;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()
    };
    if let Err(e) = write() {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(&tmp, e));
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint into its architecture and named tensors, in file order.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(ArchConfig, Vec<(String, Tensor<f32>)>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic, not a model checkpoint".into()));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let len = r.u32("config length")? as usize;
    let cfg: ArchConfig =
        serde_json::from_slice(r.take(len, "config")?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("extent").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("extent overflow".into()))?, &name)?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((cfg, tensors))
}

/// Rebuilds the model layout from the stored architecture and fills every tensor.
pub fn load_checkpoint(path: &Path) -> Result<(UtNet, ParamStore<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (cfg, tensors) = read_checkpoint(&bytes)?;
    cfg.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let (net, mut store) = UtNet::init(&cfg, 0)?;
    let expected = store.params().count() + store.buffers().count();
    if tensors.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, model has {expected}",
            tensors.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for (name, t) in tensors {
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("tensor {name} stored twice")));
        }
        store.assign(&name, t).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    }
    Ok((net, store))
}
