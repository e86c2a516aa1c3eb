use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Module;

pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "params.bin";
const HEADER: &str = "amalgam-checkpoint v1";

fn digest(body: &str, blob: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(body.as_bytes());
    h.update(blob);
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn fail(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Writes `manifest.txt` and `params.bin` into `dir`.
///
/// The manifest lists `path<TAB>shape<TAB>offset<TAB>count` per parameter in
/// enumeration order, then a sha256 over the manifest body and the blob.
pub fn save_checkpoint<M: Module<f32> + ?Sized>(net: &M, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut body = format!("{HEADER}\n");
    let mut blob = Vec::new();
    let mut offset = 0usize;
    net.visit_params("", &mut |name, p| {
        let shape = p.value.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        let count = p.value.numel();
        writeln!(body, "{name}\t{shape}\t{offset}\t{count}").expect("string write");
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += count * 4;
    });
    let sum = digest(&body, &blob);
    fs::write(dir.join(BLOB), &blob)?;
    fs::write(dir.join(MANIFEST), format!("{body}sha256\t{sum}\n"))?;
    Ok(())
}

struct Entry {
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

/// Loads parameters saved by [`save_checkpoint`] into `net`, whose parameter
/// paths and shapes must match exactly.
pub fn load_checkpoint<M: Module<f32> + ?Sized>(net: &mut M, dir: &Path) -> Result<()> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| fail(&manifest_path, e.to_string()))?;
    let blob = fs::read(dir.join(BLOB)).map_err(|e| fail(&dir.join(BLOB), e.to_string()))?;
    let trimmed = text.strip_suffix('\n').ok_or_else(|| fail(&manifest_path, "truncated manifest"))?;
    let (body, sum_line) = trimmed
        .rsplit_once('\n')
        .ok_or_else(|| fail(&manifest_path, "manifest has no checksum line"))?;
    let body = format!("{body}\n");
    let expected = sum_line
        .strip_prefix("sha256\t")
        .ok_or_else(|| fail(&manifest_path, "malformed checksum line"))?;
    if digest(&body, &blob) != expected {
        return Err(fail(&manifest_path, "checksum mismatch: manifest or blob is corrupted"));
    }

    let mut lines = body.lines();
    if lines.next() != Some(HEADER) {
        return Err(fail(&manifest_path, "unrecognised header"));
    }
    let mut entries = BTreeMap::new();
    let mut expected_offset = 0usize;
    for line in lines {
        let bad = || fail(&manifest_path, format!("malformed entry {line:?}"));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(bad());
        }
        let shape = cols[1]
            .split('x')
            .map(|d| d.parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        let offset: usize = cols[2].parse().map_err(|_| bad())?;
        let count: usize = cols[3].parse().map_err(|_| bad())?;
        if offset != expected_offset || shape.iter().product::<usize>() != count {
            return Err(bad());
        }
        expected_offset += count * 4;
        entries.insert(cols[0].to_string(), Entry { shape, offset, count });
    }
    if expected_offset != blob.len() {
        return Err(fail(
            &dir.join(BLOB),
            format!("blob holds {} bytes, manifest describes {expected_offset}", blob.len()),
        ));
    }

    let mut known = BTreeMap::new();
    net.visit_params("", &mut |name, p| {
        known.insert(name.to_string(), p.value.shape().to_vec());
    });
    let unknown: Vec<&str> = entries.keys().filter(|k| !known.contains_key(*k)).map(String::as_str).collect();
    if !unknown.is_empty() {
        return Err(fail(dir, format!("unknown parameter paths in checkpoint: {}", unknown.join(", "))));
    }
    let missing: Vec<&str> = known.keys().filter(|k| !entries.contains_key(*k)).map(String::as_str).collect();
    if !missing.is_empty() {
        return Err(fail(dir, format!("parameters missing from checkpoint: {}", missing.join(", "))));
    }
    if let Some((name, shape)) = known.iter().find(|(k, s)| entries[*k].shape != **s) {
        return Err(fail(dir, format!("shape mismatch at {name}: checkpoint {:?}, network {shape:?}", entries[name].shape)));
    }
    net.visit_params_mut("", &mut |name, p| {
        let e = &entries[name];
        let bytes = &blob[e.offset..e.offset + e.count * 4];
        for (dst, chunk) in p.value.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    });
    Ok(())
}
