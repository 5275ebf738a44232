//! Output formats: flat little-endian binary fields with a one-line text header, CSV tables and
//! JSON summaries.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::Lattice;

const MAGIC: &str = "wavelab-field";

/// Writes named real arrays in C order after a header line
/// `wavelab-field n=<n> h=<h> components=<names> [key=value …]`.
pub fn write_fields(path: &Path, lattice: &Lattice, components: &[(&str, &[f64])], meta: &[(&str, String)]) -> Result<()> {
    for (name, data) in components {
        if data.len() != lattice.len() {
            return Err(Error::LatticeMismatch(format!("component {name} has {} values, lattice {}", data.len(), lattice.len())));
        }
        if name.is_empty() || name.contains([',', ' ', '=', '\n']) {
            return Err(Error::Format(format!("bad component name '{name}'")));
        }
    }
    for (k, v) in meta {
        if k.is_empty() || k.contains([' ', '=', '\n']) || v.contains([' ', '\n']) || ["n", "h", "components"].contains(k) {
            return Err(Error::Format(format!("bad metadata entry {k}={v}")));
        }
    }
    let names: Vec<&str> = components.iter().map(|c| c.0).collect();
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "{MAGIC} n={} h={:?} components={}", lattice.n(), lattice.h(), names.join(","))?;
    for (k, v) in meta {
        write!(w, " {k}={v}")?;
    }
    writeln!(w)?;
    for (_, data) in components {
        for x in data.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Contents of a field file.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldFile {
    pub lattice: Lattice,
    pub components: Vec<(String, Vec<f64>)>,
    pub meta: BTreeMap<String, String>,
}

impl FieldFile {
    pub fn component(&self, name: &str) -> Option<&[f64]> {
        self.components.iter().find(|c| c.0 == name).map(|c| c.1.as_slice())
    }
}

/// Reads a file written by [`write_fields`].
pub fn read_fields(path: &Path) -> Result<FieldFile> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = String::new();
    r.read_line(&mut header)?;
    let mut parts = header.trim_end().split(' ');
    if parts.next() != Some(MAGIC) {
        return Err(Error::Format("missing field header".into()));
    }
    let mut meta = BTreeMap::new();
    for p in parts {
        let (k, v) = p.split_once('=').ok_or_else(|| Error::Format(format!("bad header token '{p}'")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let mut take = |key: &str| meta.remove(key).ok_or_else(|| Error::Format(format!("header lacks {key}")));
    let n: usize = take("n")?.parse().map_err(|e| Error::Format(format!("n: {e}")))?;
    let h: f64 = take("h")?.parse().map_err(|e| Error::Format(format!("h: {e}")))?;
    let names = take("components")?;
    let lattice = Lattice::new(n, h)?;
    let mut components = Vec::new();
    let mut buf = vec![0u8; 8 * lattice.len()];
    for name in names.split(',') {
        r.read_exact(&mut buf).map_err(|_| Error::Format(format!("truncated component {name}")))?;
        let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        components.push((name.to_string(), data));
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format("trailing bytes after last component".into()));
    }
    Ok(FieldFile { lattice, components, meta })
}

/// Serializes rows to a CSV file with a header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let l = Lattice::new(8, 0.5).unwrap();
        let u: Vec<f64> = (0..l.len()).map(|i| (i as f64).sin()).collect();
        let v: Vec<f64> = (0..l.len()).map(|i| -(i as f64) * 1e-3).collect();
        let p = dir.path().join("f.bin");
        write_fields(&p, &l, &[("u", &u), ("v", &v)], &[("seed", "7".into())]).unwrap();
        let f = read_fields(&p).unwrap();
        assert_eq!(f.lattice, l);
        assert_eq!(f.component("u").unwrap(), &u[..]);
        assert_eq!(f.component("v").unwrap(), &v[..]);
        assert_eq!(f.meta["seed"], "7");
        assert!(write_fields(&p, &l, &[("u", &u[1..])], &[]).is_err());
        assert!(write_fields(&p, &l, &[("u", &u)], &[("n", "3".into())]).is_err());
        std::fs::write(&p, b"nonsense\n").unwrap();
        assert!(matches!(read_fields(&p), Err(Error::Format(_))));
    }
}
