//! File formats: binary tensor blobs, binary log shards, and human-readable
//! key-value configs. All binary payloads are little-endian with versioned
//! magic headers; all writers emit bytes in a fixed order so identical
//! inputs produce identical files.

use crate::TdError;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"TDWB";
pub const WEIGHTS_VERSION: u32 = 1;

/// Named tensors plus string metadata, written as one self-describing blob.
#[derive(Clone, Debug, Default)]
pub struct TensorBlob {
    pub tensors: Vec<(String, usize, usize, Vec<f64>)>,
    pub meta: BTreeMap<String, String>,
}

impl TensorBlob {
    pub fn push(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>) {
        assert_eq!(rows * cols, data.len(), "tensor {name} shape mismatch");
        self.tensors.push((name.to_string(), rows, cols, data));
    }

    pub fn get(&self, name: &str) -> Option<(usize, usize, &[f64])> {
        self.tensors
            .iter()
            .find(|(n, _, _, _)| n == name)
            .map(|(_, r, c, d)| (*r, *c, d.as_slice()))
    }

    pub fn require(&self, name: &str, path: &Path) -> Result<(usize, usize, &[f64]), TdError> {
        self.get(name)
            .ok_or_else(|| TdError::format(path, format!("missing tensor {name}")))
    }

    pub fn write(&self, path: &Path) -> Result<(), TdError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(WEIGHTS_MAGIC);
        buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, rows, cols, data) in &self.tensors {
            write_str(&mut buf, name);
            buf.extend_from_slice(&(*rows as u32).to_le_bytes());
            buf.extend_from_slice(&(*cols as u32).to_le_bytes());
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            write_str(&mut buf, k);
            write_str(&mut buf, v);
        }
        std::fs::write(path, &buf).map_err(|e| TdError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, TdError> {
        let bytes = std::fs::read(path).map_err(|e| TdError::io(path, e))?;
        let mut r = Cursor { bytes: &bytes, at: 0, path };
        let magic = r.take(4)?;
        if magic != WEIGHTS_MAGIC {
            return Err(TdError::format(path, "bad magic; not a tensor blob"));
        }
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(TdError::format(path, format!("unsupported blob version {version}")));
        }
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let mut data = vec![0.0; rows * cols];
            for v in &mut data {
                *v = r.f64()?;
            }
            tensors.push((name, rows, cols, data));
        }
        let m = r.u32()? as usize;
        let mut meta = BTreeMap::new();
        for _ in 0..m {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        Ok(TensorBlob { tensors, meta })
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    let b = s.as_bytes();
    assert!(b.len() <= u16::MAX as usize);
    buf.extend_from_slice(&(b.len() as u16).to_le_bytes());
    buf.extend_from_slice(b);
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TdError> {
        if self.at + n > self.bytes.len() {
            return Err(TdError::format(self.path, "truncated file"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TdError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TdError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, TdError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, TdError> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        let s = self.take(len)?;
        String::from_utf8(s.to_vec()).map_err(|_| TdError::format(self.path, "bad utf-8 string"))
    }
}

/// Ordered key-value text document: one `key = value` per line, `#` comments.
/// `f64` values are formatted with the shortest round-tripping decimal
/// representation, so write/read is bit-exact.
#[derive(Clone, Debug, Default)]
pub struct KvDoc {
    pairs: Vec<(String, String)>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        let v = value.to_string();
        if let Some(p) = self.pairs.iter_mut().find(|(k, _)| k == key) {
            p.1 = v;
        } else {
            self.pairs.push((key.to_string(), v));
        }
    }

    pub fn set_f64(&mut self, key: &str, value: f64) {
        // `{}` on f64 prints the shortest string that parses back exactly.
        self.set(key, format!("{value}"));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, TdError> {
        self.get(key).ok_or_else(|| TdError::Config(format!("missing key {key}")))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64, TdError> {
        self.require(key)?
            .parse()
            .map_err(|_| TdError::Config(format!("key {key} is not a number")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize, TdError> {
        self.require(key)?
            .parse()
            .map_err(|_| TdError::Config(format!("key {key} is not an integer")))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64, TdError> {
        self.require(key)?
            .parse()
            .map_err(|_| TdError::Config(format!("key {key} is not an integer")))
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.pairs {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TdError> {
        let mut doc = KvDoc::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TdError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            doc.pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(doc)
    }

    pub fn write(&self, path: &Path) -> Result<(), TdError> {
        std::fs::write(path, self.to_text()).map_err(|e| TdError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, TdError> {
        let text = std::fs::read_to_string(path).map_err(|e| TdError::io(path, e))?;
        Self::from_text(&text)
    }
}

pub const LOG_MAGIC: &[u8; 4] = b"TDLG";
pub const LOG_VERSION: u32 = 1;

/// Binary driving-log shard: fixed-rate state/actuator/control rows plus
/// per-wheel map observations (normals, projected features, validity).
#[derive(Clone, Debug)]
pub struct LogShard {
    pub dt: f64,
    pub n_pca: usize,
    pub states: Vec<[f64; 6]>,
    pub actuators: Vec<[f64; 4]>,
    pub controls: Vec<[f64; 3]>,
    pub normals: Vec<[[f64; 3]; 4]>,
    /// row-major [rows][wheel][bucket][n_pca], stored f32.
    pub features: Vec<f32>,
    /// row-major [rows][wheel][bucket], 1 = valid.
    pub validity: Vec<i8>,
    pub n_buckets: usize,
}

impl LogShard {
    pub fn write(&self, path: &Path) -> Result<(), TdError> {
        let rows = self.states.len();
        let mut buf: Vec<u8> = Vec::with_capacity(64 + rows * (13 * 8 + 12 * 8));
        buf.extend_from_slice(LOG_MAGIC);
        buf.extend_from_slice(&LOG_VERSION.to_le_bytes());
        buf.extend_from_slice(&(rows as u64).to_le_bytes());
        buf.extend_from_slice(&(self.n_pca as u32).to_le_bytes());
        buf.extend_from_slice(&(self.n_buckets as u32).to_le_bytes());
        buf.extend_from_slice(&self.dt.to_le_bytes());
        for row in &self.states {
            for v in row {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for row in &self.actuators {
            for v in row {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for row in &self.controls {
            for v in row {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for row in &self.normals {
            for wheel in row {
                for v in wheel {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        for v in &self.features {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.validity {
            buf.push(*v as u8);
        }
        std::fs::write(path, &buf).map_err(|e| TdError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, TdError> {
        let bytes = std::fs::read(path).map_err(|e| TdError::io(path, e))?;
        let mut r = Cursor { bytes: &bytes, at: 0, path };
        if r.take(4)? != LOG_MAGIC {
            return Err(TdError::format(path, "bad magic; not a log shard"));
        }
        let version = r.u32()?;
        if version != LOG_VERSION {
            return Err(TdError::format(path, format!("unsupported log version {version}")));
        }
        let rows = r.u64()? as usize;
        let n_pca = r.u32()? as usize;
        let n_buckets = r.u32()? as usize;
        let dt = r.f64()?;
        let mut states = Vec::with_capacity(rows);
        for _ in 0..rows {
            let mut a = [0.0; 6];
            for v in &mut a {
                *v = r.f64()?;
            }
            states.push(a);
        }
        let mut actuators = Vec::with_capacity(rows);
        for _ in 0..rows {
            let mut a = [0.0; 4];
            for v in &mut a {
                *v = r.f64()?;
            }
            actuators.push(a);
        }
        let mut controls = Vec::with_capacity(rows);
        for _ in 0..rows {
            let mut a = [0.0; 3];
            for v in &mut a {
                *v = r.f64()?;
            }
            controls.push(a);
        }
        let mut normals = Vec::with_capacity(rows);
        for _ in 0..rows {
            let mut a = [[0.0; 3]; 4];
            for w in &mut a {
                for v in w.iter_mut() {
                    *v = r.f64()?;
                }
            }
            normals.push(a);
        }
        let nf = rows * 4 * n_buckets * n_pca;
        let mut features = Vec::with_capacity(nf);
        for _ in 0..nf {
            features.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()));
        }
        let nv = rows * 4 * n_buckets;
        let mut validity = Vec::with_capacity(nv);
        for _ in 0..nv {
            validity.push(r.take(1)?[0] as i8);
        }
        Ok(LogShard { dt, n_pca, states, actuators, controls, normals, features, validity, n_buckets })
    }
}

/// Copy a file's bytes through a buffered reader; used by determinism checks.
pub fn file_bytes(path: &Path) -> Result<Vec<u8>, TdError> {
    let mut f = std::fs::File::open(path).map_err(|e| TdError::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| TdError::io(path, e))?;
    Ok(buf)
}

/// Write a text report, creating parent directories as needed.
pub fn write_text(path: &Path, text: &str) -> Result<(), TdError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| TdError::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| TdError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| TdError::io(path, e))
}
