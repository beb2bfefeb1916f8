//! Versioned little-endian checkpoint files.
//!
//! ```text
//! magic    8 bytes  "SCTCKPT\0"
//! version  u32
//! crc32    u32      over every byte that follows
//! arch     u32 length + JSON {spec, schedule}
//! params   u64 count + f64 values
//! shadows  u32 count, then per shadow:
//!          u32 name length + UTF-8 name, f64 decay, u64 updates, f64 values (count = params)
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Result};
use crate::net::{ConsistencyNet, EmaShadow, NetSpec};
use crate::schedule::NoiseSchedule;

pub const MAGIC: &[u8; 8] = b"SCTCKPT\0";
pub const VERSION: u32 = 1;
const HEADER: usize = 16;

#[derive(Serialize, Deserialize)]
struct Arch {
    spec: NetSpec,
    schedule: NoiseSchedule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedShadow {
    pub name: String,
    pub shadow: EmaShadow,
}

pub fn encode(net: &ConsistencyNet, shadows: &[NamedShadow]) -> Vec<u8> {
    let arch = serde_json::to_vec(&Arch {
        spec: net.spec().clone(),
        schedule: *net.schedule(),
    })
    .expect("architecture serializes");
    let mut body = Vec::new();
    body.extend((arch.len() as u32).to_le_bytes());
    body.extend(&arch);
    body.extend((net.params().len() as u64).to_le_bytes());
    net.params().iter().for_each(|p| body.extend(p.to_le_bytes()));
    body.extend((shadows.len() as u32).to_le_bytes());
    for s in shadows {
        body.extend((s.name.len() as u32).to_le_bytes());
        body.extend(s.name.as_bytes());
        body.extend(s.shadow.decay.to_le_bytes());
        body.extend(s.shadow.updates.to_le_bytes());
        s.shadow.params.iter().for_each(|p| body.extend(p.to_le_bytes()));
    }
    let mut out = Vec::with_capacity(HEADER + body.len());
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend(crc32fast::hash(&body).to_le_bytes());
    out.extend(body);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ConsistencyNet, Vec<NamedShadow>)> {
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated.into());
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::Magic.into());
    }
    if bytes.len() < HEADER {
        return Err(CheckpointError::Truncated.into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::Version(version).into());
    }
    let stored = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes"));
    let body = &bytes[HEADER..];
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed }.into());
    }
    let mut r = Reader { buf: body };
    let arch_len = r.u32()? as usize;
    let arch: Arch = serde_json::from_slice(r.take(arch_len)?)
        .map_err(|e| CheckpointError::Malformed(format!("architecture: {e}")))?;
    let n = r.u64()? as usize;
    if n != arch.spec.param_count() {
        return Err(CheckpointError::Malformed(format!(
            "parameter count {n} does not match architecture ({})",
            arch.spec.param_count()
        ))
        .into());
    }
    let params = r.f64s(n)?;
    let net = ConsistencyNet::from_parts(arch.spec, arch.schedule, params)?;
    let count = r.u32()?;
    let mut shadows = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("shadow name is not UTF-8".into()))?;
        let decay = r.f64()?;
        let updates = r.u64()?;
        let params = r.f64s(n)?;
        shadows.push(NamedShadow {
            name,
            shadow: EmaShadow { decay, params, updates },
        });
    }
    if !r.buf.is_empty() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", r.buf.len())).into());
    }
    Ok((net, shadows))
}

pub fn save_checkpoint(net: &ConsistencyNet, shadows: &[NamedShadow], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(net, shadows))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ConsistencyNet, Vec<NamedShadow>)> {
    decode(&std::fs::read(path)?)
}
