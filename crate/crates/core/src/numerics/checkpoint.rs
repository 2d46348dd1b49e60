//! Parameter checkpoints: a text manifest plus one little-endian f32 blob.
//!
//! ```text
//! manifest.txt
//!   agglomerator-checkpoint 1
//!   blob weights.bin <total bytes>
//!   <param path> [<d0>,<d1>,...] <byte offset>      (one line per parameter)
//! weights.bin
//!   the parameters' values as IEEE-754 binary32 little-endian, row-major,
//!   concatenated in manifest order with no padding
//! ```
//!
//! A scalar parameter has shape `[]`. Values are always stored as 32-bit
//! floats regardless of the training precision.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "weights.bin";
const HEADER: &str = "agglomerator-checkpoint 1";

/// One manifest entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub path: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Entry {
    pub fn byte_len(&self) -> usize {
        numel(&self.shape) * 4
    }
}

/// A checkpoint read from disk.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
    pub blob: Vec<u8>,
}

impl Checkpoint {
    pub fn entry(&self, path: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.path == path)
    }

    /// Raw bytes of one parameter.
    pub fn bytes(&self, entry: &Entry) -> &[u8] {
        &self.blob[entry.offset..entry.offset + entry.byte_len()]
    }

    pub fn values(&self, entry: &Entry) -> Vec<f32> {
        self.bytes(entry)
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect()
    }

    /// Hex SHA-256 of the blob.
    pub fn digest(&self) -> String {
        hex_digest(&self.blob)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn format_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join(","))
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    let inner = s.strip_prefix('[')?.strip_suffix(']')?;
    if inner.is_empty() {
        return Some(Vec::new());
    }
    inner.split(',').map(|d| d.parse().ok()).collect()
}

/// Serialises a parameter store. Returns the blob digest.
pub fn save<T: Scalar>(store: &ParamStore<T>, dir: &Path) -> Result<String> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(store.numel() * 4);
    let mut lines = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        lines.push(format!("{} {} {}", p.name, format_shape(p.value.shape()), blob.len()));
        for v in p.value.data() {
            blob.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    let mut manifest = format!("{HEADER}\nblob {BLOB_FILE} {}\n", blob.len());
    for l in lines {
        manifest.push_str(&l);
        manifest.push('\n');
    }
    let bp = dir.join(BLOB_FILE);
    fs::write(&bp, &blob).map_err(|e| Error::io(&bp, e))?;
    let mp = dir.join(MANIFEST_FILE);
    fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))?;
    Ok(hex_digest(&blob))
}

pub fn read(dir: &Path) -> Result<Checkpoint> {
    let mp = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", mp.display()));
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(bad("missing header line".into()));
    }
    let blob_line = lines.next().ok_or_else(|| bad("missing blob line".into()))?;
    let parts: Vec<&str> = blob_line.split(' ').collect();
    let (blob_name, blob_len) = match parts.as_slice() {
        ["blob", name, len] => (*name, len.parse::<usize>().map_err(|_| bad(format!("bad blob length `{len}`")))?),
        _ => return Err(bad(format!("malformed blob line `{blob_line}`"))),
    };
    let mut entries = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let parts: Vec<&str> = line.split(' ').collect();
        let [path, shape, offset] = parts.as_slice() else {
            return Err(bad(format!("malformed entry `{line}`")));
        };
        let shape = parse_shape(shape).ok_or_else(|| bad(format!("bad shape in `{line}`")))?;
        let offset = offset.parse().map_err(|_| bad(format!("bad offset in `{line}`")))?;
        entries.push(Entry {
            path: path.to_string(),
            shape,
            offset,
        });
    }
    let bp = dir.join(blob_name);
    let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    if blob.len() != blob_len {
        return Err(bad(format!("blob has {} bytes, manifest says {blob_len}", blob.len())));
    }
    if let Some(e) = entries.iter().find(|e| e.offset + e.byte_len() > blob.len()) {
        return Err(bad(format!("entry `{}` runs past the blob", e.path)));
    }
    Ok(Checkpoint { entries, blob })
}

/// Loads every parameter of `store` from `dir`; names and shapes must match
/// exactly and the checkpoint may not carry unknown parameters.
pub fn load<T: Scalar>(store: &mut ParamStore<T>, dir: &Path) -> Result<Checkpoint> {
    let ck = read(dir)?;
    load_from(store, &ck, false)?;
    Ok(ck)
}

/// Loads the parameters present in `ck`; with `partial`, store parameters
/// missing from the checkpoint are left untouched.
pub fn load_from<T: Scalar>(store: &mut ParamStore<T>, ck: &Checkpoint, partial: bool) -> Result<()> {
    for e in &ck.entries {
        if store.find(&e.path).is_none() {
            return Err(Error::Checkpoint(format!("unknown parameter `{}`", e.path)));
        }
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let Some(e) = ck.entry(&name) else {
            if partial {
                continue;
            }
            return Err(Error::Checkpoint(format!("missing parameter `{name}`")));
        };
        let data = ck.values(e).into_iter().map(|v| T::from_f64_lossy(f64::from(v))).collect();
        store.set_value(id, Tensor::from_vec(&e.shape, data)?).map_err(|_| {
            Error::Checkpoint(format!(
                "shape of `{name}`: checkpoint {:?}, model {:?}",
                e.shape,
                store.get(id).value.shape()
            ))
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f32>::new();
        s.add("a.w", Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap());
        s.add("mix", Tensor::scalar(7.0));
        save(&s, dir.path()).unwrap();
        let manifest = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(
            manifest,
            "agglomerator-checkpoint 1\nblob weights.bin 20\na.w [2,2] 0\nmix [] 16\n"
        );
        let blob = fs::read(dir.path().join(BLOB_FILE)).unwrap();
        assert_eq!(&blob[16..20], &7.0f32.to_le_bytes());

        let mut t = ParamStore::<f32>::new();
        t.add("a.w", Tensor::zeros(&[2, 2]));
        t.add("mix", Tensor::scalar(0.0));
        load(&mut t, dir.path()).unwrap();
        assert_eq!(t.value(t.find("a.w").unwrap()), s.value(s.find("a.w").unwrap()));
    }

    #[test]
    fn shape_mismatch_and_unknown_names_fail() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::zeros(&[3]));
        save(&s, dir.path()).unwrap();
        let mut wrong = ParamStore::<f64>::new();
        wrong.add("w", Tensor::zeros(&[4]));
        assert!(load(&mut wrong, dir.path()).is_err());
        let mut other = ParamStore::<f64>::new();
        other.add("v", Tensor::zeros(&[3]));
        assert!(load(&mut other, dir.path()).is_err());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::zeros(&[3]));
        save(&s, dir.path()).unwrap();
        fs::write(dir.path().join(BLOB_FILE), [0u8; 8]).unwrap();
        assert!(read(dir.path()).is_err());
    }
}
