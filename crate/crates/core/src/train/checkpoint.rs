//! Parameter snapshots: a text header listing `name<TAB>rows<TAB>cols` per
//! parameter, a `--` line, then all values as little-endian f64 in header
//! order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &str = "fbmtl-checkpoint 1";

/// Values of every parameter, in store order.
pub type Snapshot = Vec<Tensor>;

pub fn snapshot(store: &ParamStore) -> Snapshot {
    store.entries().iter().map(|e| e.value.clone()).collect()
}

pub fn restore(store: &mut ParamStore, snap: &Snapshot) -> Result<()> {
    if snap.len() != store.len() {
        return Err(Error::Checkpoint(format!("snapshot has {} tensors, model has {}", snap.len(), store.len())));
    }
    for (e, t) in store.entries_mut().iter_mut().zip(snap) {
        if e.value.shape() != t.shape() {
            return Err(Error::Checkpoint(format!("{}: shape {:?} vs {:?}", e.name, t.shape(), e.value.shape())));
        }
        e.value = t.clone();
    }
    Ok(())
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{MAGIC}")?;
    for e in store.entries() {
        writeln!(out, "{}\t{}\t{}", e.name, e.value.rows(), e.value.cols())?;
    }
    writeln!(out, "--")?;
    for e in store.entries() {
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads values into a store built for the same topology.
pub fn load(store: &mut ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let sep = b"\n--\n";
    let split = bytes
        .windows(sep.len())
        .position(|w| w == sep)
        .ok_or_else(|| bad("missing header terminator".into()))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8".into()))?;
    let mut blob = &bytes[split + sep.len()..];
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("not a checkpoint file".into()));
    }
    let listed: Vec<&str> = lines.collect();
    if listed.len() != store.len() {
        return Err(bad(format!("{} parameters stored, model has {}", listed.len(), store.len())));
    }
    let mut values = Vec::with_capacity(listed.len());
    for (line, e) in listed.iter().zip(store.entries()) {
        let f: Vec<&str> = line.split('\t').collect();
        let shape = match f.as_slice() {
            [name, r, c] if *name == e.name => (r.parse::<usize>(), c.parse::<usize>()),
            _ => return Err(bad(format!("expected parameter {}, found {line:?}", e.name))),
        };
        let (r, c) = match shape {
            (Ok(r), Ok(c)) if (r, c) == e.value.shape() => (r, c),
            _ => return Err(bad(format!("{}: stored shape {line:?} does not match {:?}", e.name, e.value.shape()))),
        };
        if blob.len() < r * c * 8 {
            return Err(bad("truncated value blob".into()));
        }
        let data = blob[..r * c * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        blob = &blob[r * c * 8..];
        values.push(Tensor::new(r, c, data));
    }
    if !blob.is_empty() {
        return Err(bad("trailing bytes after the last parameter".into()));
    }
    restore(store, &values)
}
