//! Binary checkpoint container.
//!
//! ```text
//! magic    8 bytes  "MDICOCK\0"
//! version  u32 LE
//! kind     u32 LE length + UTF-8
//! meta     u64 LE length + JSON
//! count    u32 LE
//! count x  { path: u32 len + UTF-8, group: u8 (0 param, 1 buffer),
//!            rows: u32, cols: u32, rows*cols f32 LE row-major }
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::params::ParamBundle;

pub const MAGIC: &[u8; 8] = b"MDICOCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub params: ParamBundle,
    pub buffers: ParamBundle,
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn write_container(path: &Path, kind: &str, meta: &serde_json::Value, params: &ParamBundle, buffers: &ParamBundle) -> Result<()> {
    let mut out = Vec::with_capacity(16 + 4 * (params.num_values() + buffers.num_values()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    push_str(&mut out, kind);
    let json = serde_json::to_vec(meta).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&((params.len() + buffers.len()) as u32).to_le_bytes());
    for (group, bundle) in [(0u8, params), (1u8, buffers)] {
        for (name, m) in bundle.iter() {
            push_str(&mut out, name);
            out.push(group);
            out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
            for &v in m.iter() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    path: &'a Path,
}

impl Reader<'_> {
    fn corrupt(&self, what: &str) -> Error {
        Error::Checkpoint(format!("{}: corrupt checkpoint ({what})", self.path.display()))
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let remaining = self.cur.get_ref().len() as u64 - self.cur.position();
        if (n as u64) > remaining {
            return Err(self.corrupt(what));
        }
        let mut buf = vec![0; n];
        self.cur.read_exact(&mut buf).map_err(|_| self.corrupt(what))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.bytes(n, what)?).map_err(|_| self.corrupt(what))
    }
}

pub fn read_container(path: &Path) -> Result<Container> {
    let data = fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let mut r = Reader {
        cur: Cursor::new(&data),
        path,
    };
    if r.bytes(8, "magic").ok().as_deref() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint (bad magic)", path.display())));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: checkpoint version {version}, expected {CHECKPOINT_VERSION}",
            path.display()
        )));
    }
    let kind = r.string("kind")?;
    let meta_len = r.u64("metadata length")? as usize;
    let meta_bytes = r.bytes(meta_len, "metadata")?;
    let meta = serde_json::from_slice(&meta_bytes).map_err(|_| r.corrupt("metadata"))?;
    let count = r.u32("tensor count")?;
    let mut params = ParamBundle::new();
    let mut buffers = ParamBundle::new();
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let group = r.bytes(1, "tensor group")?[0];
        let rows = r.u32("tensor rows")? as usize;
        let cols = r.u32("tensor cols")? as usize;
        let raw = r.bytes(rows * cols * 4, "tensor data")?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let m = Array2::from_shape_vec((rows, cols), values).map_err(|_| r.corrupt("tensor shape"))?;
        match group {
            0 => params.insert(name, m),
            1 => buffers.insert(name, m),
            _ => return Err(r.corrupt("tensor group")),
        }
    }
    if (r.cur.position() as usize) != data.len() {
        return Err(r.corrupt("trailing bytes"));
    }
    Ok(Container {
        kind,
        meta,
        params,
        buffers,
    })
}

/// Checks that `found` has exactly the paths and shapes of `expected`.
pub fn check_layout(what: &str, expected: &ParamBundle, found: &ParamBundle) -> Result<()> {
    for (path, m) in expected.iter() {
        match found.get(path) {
            None => return Err(Error::Checkpoint(format!("{what} `{path}` missing from checkpoint"))),
            Some(f) if f.dim() != m.dim() => {
                return Err(Error::Checkpoint(format!(
                    "{what} `{path}` has shape {:?} in checkpoint, model expects {:?}",
                    f.dim(),
                    m.dim()
                )))
            }
            _ => {}
        }
    }
    if let Some(extra) = found.paths().find(|p| !expected.contains(p)) {
        return Err(Error::Checkpoint(format!("unexpected {what} `{extra}` in checkpoint")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle() -> (ParamBundle, ParamBundle) {
        let mut p = ParamBundle::new();
        p.insert("a.w", Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f32 as f64 * 0.25));
        p.insert("a.b", Array2::zeros((1, 3)));
        let mut b = ParamBundle::new();
        b.insert("bn.running_mean", Array2::ones((1, 3)));
        (p, b)
    }

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let (p, b) = bundle();
        let meta = serde_json::json!({"d": 3});
        write_container(&path, "test", &meta, &p, &b).unwrap();
        let c = read_container(&path).unwrap();
        assert_eq!(c.kind, "test");
        assert_eq!(c.meta, meta);
        assert_eq!(c.params, p);
        assert_eq!(c.buffers, b);
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let (p, b) = bundle();
        write_container(&path, "test", &serde_json::json!({}), &p, &b).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_container(&path), Err(Error::Checkpoint(_))));
        fs::write(&path, b"hello world, not a checkpoint").unwrap();
        let err = read_container(&path).unwrap_err();
        assert!(err.to_string().contains("magic"));
        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        fs::write(&path, bad_version).unwrap();
        assert!(read_container(&path).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn layout_mismatch() {
        let (p, _) = bundle();
        let mut q = p.clone();
        q.insert("a.w", Array2::zeros((2, 4)));
        assert!(check_layout("parameter", &p, &q).is_err());
        let mut r = p.clone();
        r.insert("extra", Array2::zeros((1, 1)));
        assert!(check_layout("parameter", &p, &r).is_err());
        assert!(check_layout("parameter", &p, &p).is_ok());
    }
}
