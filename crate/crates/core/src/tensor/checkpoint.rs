//! Parameter serialization: a text header (magic, key-value metadata, one
//! `tensor <name> <shape> <offset>` line per tensor) followed by the raw
//! little-endian 64-bit values in declared order. Offsets are bytes from the
//! start of the payload and must be contiguous.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::Tensor;

const MAGIC: &str = "HTOC-CKPT";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {MAGIC}")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u16 },
    #[error("malformed header line: {line:?}")]
    HeaderParse { line: String },
    #[error("tensor {name}: offset {found} does not match running offset {expected}")]
    BadOffset {
        name: String,
        found: usize,
        expected: usize,
    },
    #[error("payload truncated at byte offset {offset} (need {needed} bytes)")]
    Truncated { offset: usize, needed: usize },
}

/// Write metadata plus named tensors. Byte-identical output for identical
/// inputs; tensors are laid out in the order given.
pub fn save(
    path: &Path,
    meta: &[(String, String)],
    tensors: &[(&str, &Tensor)],
) -> Result<(), CheckpointError> {
    let mut header = format!("{MAGIC} {VERSION}\n");
    for (k, v) in meta {
        header.push_str(&format!("{k} = {v}\n"));
    }
    let mut offset = 0usize;
    for (name, t) in tensors {
        debug_assert!(!name.contains(' '), "tensor name with space: {name}");
        let dims = t
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        header.push_str(&format!("tensor {name} {dims} {offset}\n"));
        offset += t.numel() * 8;
    }
    header.push_str("end\n");

    let mut buf = Vec::with_capacity(header.len() + offset);
    buf.extend_from_slice(header.as_bytes());
    for (_, t) in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Load metadata and tensors, validating magic, version, offsets, and
/// payload length.
pub fn load(path: &Path) -> Result<(Vec<(String, String)>, Vec<(String, Tensor)>), CheckpointError> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;

    let first = read_line(&bytes, &mut pos)?;
    let mut it = first.split_whitespace();
    if it.next() != Some(MAGIC) {
        return Err(CheckpointError::BadMagic);
    }
    let version: u16 = it
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CheckpointError::HeaderParse { line: first.clone() })?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }

    let mut meta = Vec::new();
    let mut specs: Vec<(String, Vec<usize>, usize)> = Vec::new();
    loop {
        let line = read_line(&bytes, &mut pos)?;
        if line == "end" {
            break;
        }
        if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(CheckpointError::HeaderParse { line });
            }
            let shape: Vec<usize> = parts[1]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| CheckpointError::HeaderParse { line: line.clone() })?;
            let offset: usize = parts[2]
                .parse()
                .map_err(|_| CheckpointError::HeaderParse { line: line.clone() })?;
            specs.push((parts[0].to_string(), shape, offset));
        } else if let Some((k, v)) = line.split_once(" = ") {
            meta.push((k.to_string(), v.to_string()));
        } else {
            return Err(CheckpointError::HeaderParse { line });
        }
    }

    let payload = &bytes[pos..];
    let mut tensors = Vec::with_capacity(specs.len());
    let mut running = 0usize;
    for (name, shape, offset) in specs {
        if offset != running {
            return Err(CheckpointError::BadOffset {
                name,
                found: offset,
                expected: running,
            });
        }
        let n: usize = shape.iter().product();
        let nbytes = n * 8;
        if offset + nbytes > payload.len() {
            return Err(CheckpointError::Truncated {
                offset: pos + payload.len(),
                needed: offset + nbytes - payload.len(),
            });
        }
        let mut data = Vec::with_capacity(n);
        for chunk in payload[offset..offset + nbytes].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        tensors.push((
            name,
            Tensor::new(shape, data).expect("validated shape/data length"),
        ));
        running = offset + nbytes;
    }
    Ok((meta, tensors))
}

fn read_line(bytes: &[u8], pos: &mut usize) -> Result<String, CheckpointError> {
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos] != b'\n' {
        *pos += 1;
    }
    if *pos >= bytes.len() {
        return Err(CheckpointError::Truncated {
            offset: start,
            needed: 1,
        });
    }
    let line = String::from_utf8_lossy(&bytes[start..*pos]).into_owned();
    *pos += 1;
    Ok(line)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_tensors() -> Vec<(String, Tensor)> {
        let mut rng = crate::stream::stream(3, &[7]);
        vec![
            ("a.w".to_string(), Tensor::randn(vec![3, 4], 0.7, &mut rng)),
            ("a.b".to_string(), Tensor::randn(vec![4], 0.7, &mut rng)),
            ("b.w".to_string(), Tensor::randn(vec![2, 2], 0.7, &mut rng)),
        ]
    }

    #[test]
    fn roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.htc");
        let ts = sample_tensors();
        let refs: Vec<(&str, &Tensor)> = ts.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let meta = vec![("arch.k".to_string(), "32".to_string())];
        save(&path, &meta, &refs).unwrap();
        let (meta2, loaded) = load(&path).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(loaded.len(), ts.len());
        for ((n1, t1), (n2, t2)) in ts.iter().zip(&loaded) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.data(), t2.data());
        }
    }

    #[test]
    fn deterministic_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("1.htc"), dir.path().join("2.htc"));
        let ts = sample_tensors();
        let refs: Vec<(&str, &Tensor)> = ts.iter().map(|(n, t)| (n.as_str(), t)).collect();
        save(&p1, &[], &refs).unwrap();
        save(&p2, &[], &refs).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.htc");
        std::fs::write(&path, b"NOPE 1\nend\n").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.htc");
        std::fs::write(&path, b"HTOC-CKPT 9\nend\n").unwrap();
        assert!(matches!(
            load(&path),
            Err(CheckpointError::Version { found: 9 })
        ));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.htc");
        let ts = sample_tensors();
        let refs: Vec<(&str, &Tensor)> = ts.iter().map(|(n, t)| (n.as_str(), t)).collect();
        save(&path, &[], &refs).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 16);
        std::fs::write(&path, &bytes).unwrap();
        match load(&path) {
            Err(CheckpointError::Truncated { needed, .. }) => assert_eq!(needed, 16),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }
}
