//! Binary checkpoint format for named tensors.
//!
//! Layout (all integers little-endian):
//!   magic `SSILCKPT` | version u32 | tensor count u32
//!   per tensor: name length u16 | UTF-8 name | rank u8 | dims u32 each |
//!               values f64 each
//!   trailing CRC32 over every preceding byte.
//!
//! The trailing CRC doubles as a content hash: the frozen language model
//! records it at freeze time.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Mat;

pub const MAGIC: &[u8; 8] = b"SSILCKPT";
pub const VERSION: u32 = 1;

/// CRC-32 (IEEE 802.3), table-driven.
pub fn crc32(bytes: &[u8]) -> u32 {
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0u32; 256];
        for (i, entry) in t.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *entry = c;
        }
        t
    });
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}

/// Serialize named tensors to the payload bytes (everything before the CRC).
pub fn serialize(tensors: &[(&str, &Mat)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in tensors {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(2u8); // all parameters here are matrices
        buf.extend_from_slice(&(m.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(m.cols as u32).to_le_bytes());
        for v in &m.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Content hash of a parameter set: CRC32 of its serialized payload.
pub fn content_hash(p: &impl ParamSet) -> u32 {
    let named: Vec<(&str, &Mat)> = p.param_names().into_iter().zip(p.params()).collect();
    crc32(&serialize(&named))
}

pub fn save(path: &Path, p: &impl ParamSet) -> Result<()> {
    let named: Vec<(&str, &Mat)> = p.param_names().into_iter().zip(p.params()).collect();
    let payload = serialize(&named);
    let crc = crc32(&payload);
    let file = File::create(path).map_err(|e| Error::Data(format!("create {path:?}: {e}")))?;
    let mut w = BufWriter::new(file);
    w.write_all(&payload)
        .and_then(|_| w.write_all(&crc.to_le_bytes()))
        .and_then(|_| w.flush())
        .map_err(|e| Error::Data(format!("write {path:?}: {e}")))
}

/// Load a checkpoint into an existing parameter set. Names, order and
/// shapes must match; the trailing CRC is verified.
pub fn load(path: &Path, p: &mut impl ParamSet) -> Result<()> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Data(format!("read {path:?}: {e}")))?;
    let tensors = parse(&bytes)?;
    let names = p.param_names();
    if tensors.len() != names.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            names.len()
        )));
    }
    for ((name, mat), (want_name, slot)) in
        tensors.into_iter().zip(names.iter().zip(p.params_mut()))
    {
        if name != *want_name {
            return Err(Error::Data(format!(
                "checkpoint tensor `{name}` where `{want_name}` expected"
            )));
        }
        if mat.rows != slot.rows || mat.cols != slot.cols {
            return Err(Error::Data(format!(
                "tensor `{name}`: checkpoint shape {}x{} vs model {}x{}",
                mat.rows, mat.cols, slot.rows, slot.cols
            )));
        }
        slot.data = mat.data;
    }
    Ok(())
}

fn parse(bytes: &[u8]) -> Result<Vec<(String, Mat)>> {
    let bad = |m: &str| Error::Data(format!("malformed checkpoint: {m}"));
    if bytes.len() < MAGIC.len() + 8 + 4 {
        return Err(bad("truncated header"));
    }
    let (payload, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32(payload) != stored {
        return Err(bad("CRC mismatch"));
    }
    if &payload[..8] != MAGIC {
        return Err(bad("wrong magic"));
    }
    let mut pos = 8;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > payload.len() {
            return Err(bad("truncated payload"));
        }
        let s = &payload[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        if rank != 2 {
            return Err(bad(&format!("tensor `{name}` has rank {rank}, expected 2")));
        }
        let numel: usize = dims.iter().product();
        let raw = take(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Mat::from_vec(dims[0], dims[1], data)));
    }
    if pos != payload.len() {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok(out)
}
