//! Model checkpoints: a text manifest followed by raw little-endian f64
//! payloads, one file per model.
//!
//! ```text
//! VCKPT1
//! meta <key>=<value>        (zero or more)
//! tensor <name> <d0> <d1> ...
//! end
//! <f64 LE payload of each tensor, manifest order>
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::Tensor;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint manifest: {0}")]
    BadManifest(String),
    #[error("bad tensor payload for {name}: {reason}")]
    BadPayload { name: String, reason: String },
}

pub fn save_checkpoint(
    path: &Path,
    meta: &[(String, String)],
    tensors: &[(&str, &Tensor)],
) -> Result<(), CheckpointError> {
    for (name, _) in tensors {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(CheckpointError::BadManifest(format!("tensor name {name:?}")));
        }
    }
    for (k, v) in meta {
        if k.is_empty() || k.contains(char::is_whitespace) || k.contains('=') {
            return Err(CheckpointError::BadManifest(format!("meta key {k:?}")));
        }
        if v.contains('\n') {
            return Err(CheckpointError::BadManifest(format!("meta value for {k} has newline")));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(b"VCKPT1\n")?;
    for (k, v) in meta {
        writeln!(w, "meta {k}={v}")?;
    }
    for (name, t) in tensors {
        write!(w, "tensor {name}")?;
        for d in &t.shape {
            write!(w, " {d}")?;
        }
        writeln!(w)?;
    }
    w.write_all(b"end\n")?;
    for (_, t) in tensors {
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

#[allow(clippy::type_complexity)]
pub fn load_checkpoint(
    path: &Path,
) -> Result<(Vec<(String, String)>, Vec<(String, Tensor)>), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    // manifest is everything up to the "end" line
    loop {
        let mut b = [0u8; 1];
        if r.read(&mut b)? == 0 {
            return Err(CheckpointError::BadManifest("missing end marker".into()));
        }
        header.push(b[0]);
        if header.ends_with(b"\nend\n") || header == b"end\n" {
            break;
        }
        if header.len() > 1 << 20 {
            return Err(CheckpointError::BadManifest("manifest over 1MiB".into()));
        }
    }
    let text = std::str::from_utf8(&header)
        .map_err(|_| CheckpointError::BadManifest("manifest not utf-8".into()))?;
    let mut lines = text.lines();
    if lines.next() != Some("VCKPT1") {
        return Err(CheckpointError::BadManifest("bad magic".into()));
    }
    let mut meta = Vec::new();
    let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
    for line in lines {
        if line == "end" {
            break;
        }
        if let Some(rest) = line.strip_prefix("meta ") {
            let (k, v) = rest
                .split_once('=')
                .ok_or_else(|| CheckpointError::BadManifest(format!("meta line {line:?}")))?;
            meta.push((k.to_string(), v.to_string()));
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let mut parts = rest.split_whitespace();
            let name = parts
                .next()
                .ok_or_else(|| CheckpointError::BadManifest("tensor line without name".into()))?;
            let shape: Vec<usize> = parts
                .map(|p| {
                    p.parse::<usize>().map_err(|_| {
                        CheckpointError::BadManifest(format!("bad extent {p:?} for {name}"))
                    })
                })
                .collect::<Result<_, _>>()?;
            if shape.is_empty() || shape.iter().any(|&d| d == 0) {
                return Err(CheckpointError::BadManifest(format!("bad shape for {name}")));
            }
            specs.push((name.to_string(), shape));
        } else {
            return Err(CheckpointError::BadManifest(format!("unknown line {line:?}")));
        }
    }
    let mut tensors = Vec::with_capacity(specs.len());
    for (name, shape) in specs {
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf).map_err(|e| CheckpointError::BadPayload {
            name: name.clone(),
            reason: e.to_string(),
        })?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::BadPayload {
            name: name.clone(),
            reason: e.to_string(),
        })?;
        tensors.push((name, t));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::BadManifest("trailing bytes after payload".into()));
    }
    Ok((meta, tensors))
}
