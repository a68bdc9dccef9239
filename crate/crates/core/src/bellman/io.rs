//! Binary Q-table files.
//!
//! Little-endian layout: the 8-byte magic (which doubles as the format
//! version), mode `u8`, `|S|`, `|A|`, `kappa` as `u32`, `gamma` and the final
//! residual as `f64`, the seed as `u64`, the environment name as a `u32`
//! length plus UTF-8 bytes, the values as `f64` in `(s, a, rank)` order, and a
//! CRC-32 of everything before it.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::table::{QMeta, QTable, TableLayout};
use super::Mode;

pub const MAGIC: &[u8; 8] = b"GMFSQT01";
const MAGIC_FAMILY: &[u8; 6] = b"GMFSQT";

pub fn save_qtable(q: &QTable, path: &Path) -> Result<()> {
    let l = q.layout();
    let name = q.meta.env_name.as_bytes();
    let mut buf = Vec::with_capacity(64 + name.len() + 8 * q.values().len());
    buf.extend_from_slice(MAGIC);
    buf.push(match l.mode() {
        Mode::Joint => 0,
        Mode::Marginal => 1,
    });
    for d in [l.n_states(), l.n_actions()] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&l.kappa().to_le_bytes());
    buf.extend_from_slice(&q.meta.gamma.to_le_bytes());
    buf.extend_from_slice(&q.meta.residual.to_le_bytes());
    buf.extend_from_slice(&q.meta.seed.to_le_bytes());
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name);
    for v in q.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt("truncated Q-table file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads a table written by [`save_qtable`]. Unknown format versions,
/// truncation, checksum failures and inconsistent sizes are errors.
pub fn load_qtable(path: &Path) -> Result<QTable> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC_FAMILY.len()] != MAGIC_FAMILY {
        return Err(Error::Corrupt("not a Q-table file".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Version(
            String::from_utf8_lossy(&bytes[MAGIC_FAMILY.len()..MAGIC.len()]).into_owned(),
        ));
    }
    if bytes.len() < MAGIC.len() + 4 {
        return Err(Error::Corrupt("truncated Q-table file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let mode = match r.take(1)?[0] {
        0 => Mode::Joint,
        1 => Mode::Marginal,
        m => return Err(Error::Corrupt(format!("unknown table mode {m}"))),
    };
    let n_states = r.u32()? as usize;
    let n_actions = r.u32()? as usize;
    let kappa = r.u32()?;
    let gamma = r.f64()?;
    let residual = r.f64()?;
    let seed = r.u64()?;
    let name_len = r.u32()? as usize;
    let env_name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::Corrupt("environment name is not UTF-8".into()))?;
    let remaining = body.len() - r.pos;
    if remaining % 8 != 0 {
        return Err(Error::Corrupt("payload is not a whole number of f64".into()));
    }
    let layout = TableLayout::with_dims(n_states, n_actions, mode, kappa, u64::MAX, true)
        .map_err(|e| Error::Corrupt(format!("bad table header: {e}")))?;
    if remaining / 8 != layout.len() {
        return Err(Error::Corrupt(format!(
            "payload holds {} values, header implies {}",
            remaining / 8,
            layout.len()
        )));
    }
    let mut values = Vec::with_capacity(layout.len());
    for _ in 0..layout.len() {
        values.push(r.f64()?);
    }
    QTable::from_values(
        Arc::new(layout),
        values,
        QMeta {
            gamma,
            env_name,
            seed,
            iterations: 0,
            residual,
        },
    )
}
