//! Parameter checkpoints.
//!
//! Layout: an ASCII header
//!
//! ```text
//! srstereo-checkpoint 1
//! kind <stereo|edge>
//! config <byte length>
//! <config TOML>
//! tensor <name> <dim>x<dim>... <element offset> <element count>
//! ...
//! data <total elements>
//! ```
//!
//! followed by the parameters as little-endian `f64`, in header order.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use srstereo_core::params::ParamStore;
use srstereo_core::Tensor;

use crate::error::{AppError, AppResult};

const MAGIC: &str = "srstereo-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    /// Model section of the run configuration, as TOML.
    pub config: String,
    pub params: ParamStore,
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut head = format!("{MAGIC}\nkind {}\nconfig {}\n{}", ck.kind, ck.config.len(), ck.config);
    let mut offset = 0;
    for (name, t) in ck.params.iter() {
        let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
        head.push_str(&format!("tensor {name} {} {offset} {}\n", dims.join("x"), t.len()));
        offset += t.len();
    }
    head.push_str(&format!("data {offset}\n"));
    let mut out = head.into_bytes();
    out.reserve(8 * offset);
    for (_, t) in ck.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> AppError {
    AppError::Format(format!("checkpoint: {}", msg.into()))
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize) -> AppResult<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
}

pub fn decode(bytes: &[u8]) -> AppResult<Checkpoint> {
    let mut pos = 0;
    if take_line(bytes, &mut pos)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic line)"));
    }
    let kind = take_line(bytes, &mut pos)?.strip_prefix("kind ").ok_or_else(|| bad("missing kind"))?.to_string();
    let clen: usize = take_line(bytes, &mut pos)?
        .strip_prefix("config ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing config length"))?;
    let config = bytes.get(pos..pos + clen).ok_or_else(|| bad("truncated config"))?;
    let config = String::from_utf8(config.to_vec()).map_err(|_| bad("config is not UTF-8"))?;
    pos += clen;
    let mut entries = Vec::new();
    let total = loop {
        let line = take_line(bytes, &mut pos)?;
        if let Some(n) = line.strip_prefix("data ") {
            break n.parse::<usize>().map_err(|_| bad("bad data count"))?;
        }
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != 5 || f[0] != "tensor" {
            return Err(bad(format!("bad tensor line {line:?}")));
        }
        let shape = f[2]
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad(format!("bad shape in {line:?}")))?;
        let offset: usize = f[3].parse().map_err(|_| bad("bad offset"))?;
        let len: usize = f[4].parse().map_err(|_| bad("bad length"))?;
        if shape.iter().product::<usize>() != len {
            return Err(bad(format!("shape/length mismatch in {line:?}")));
        }
        entries.push((f[1].to_string(), shape, offset, len));
    };
    let data = &bytes[pos..];
    if data.len() != 8 * total {
        return Err(bad(format!("expected {} data bytes, found {}", 8 * total, data.len())));
    }
    let mut params = ParamStore::new();
    for (name, shape, offset, len) in entries {
        if offset + len > total {
            return Err(bad(format!("tensor {name} out of range")));
        }
        let vals = data[8 * offset..8 * (offset + len)]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if params.position(&name).is_some() {
            return Err(bad(format!("duplicate tensor {name}")));
        }
        params.add(&name, Tensor::from_vec(&shape, vals));
    }
    Ok(Checkpoint { kind, config, params })
}

pub fn save(path: &Path, ck: &Checkpoint) -> AppResult<String> {
    let bytes = encode(ck);
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load(path: &Path) -> AppResult<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| AppError::Usage(format!("cannot read checkpoint {}: {e}", path.display())))?;
    decode(&bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> AppResult<String> {
    Ok(sha256_hex(&fs::read(path)?))
}
