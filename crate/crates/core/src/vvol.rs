//! VVOL file format.
//!
//! A text header line
//! `VVOL1 nx ny nz sx sy sz dtype`
//! followed by one newline and a raw little-endian payload in the canonical
//! x-fastest layout. `dtype` is `f32` (scalar volume), `u8` (label volume) or
//! `probC` with `C` the class count; `probC` payloads store C planes of f32
//! per voxel, class-major.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::volume::{voxel_count, Dims, LabelVolume, ProbVolume, Spacing, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum VvolError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad VVOL header: {0}")]
    BadHeader(String),
    #[error("expected dtype {want}, found {got}")]
    WrongDtype { want: String, got: String },
    #[error("payload truncated: wanted {want} bytes, got {got}")]
    Truncated { want: usize, got: usize },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dtype {
    F32,
    U8,
    Prob(usize),
}

impl Dtype {
    fn tag(&self) -> String {
        match self {
            Dtype::F32 => "f32".to_string(),
            Dtype::U8 => "u8".to_string(),
            Dtype::Prob(c) => format!("prob{c}"),
        }
    }

    fn parse(s: &str) -> Result<Dtype, VvolError> {
        match s {
            "f32" => Ok(Dtype::F32),
            "u8" => Ok(Dtype::U8),
            _ => {
                if let Some(c) = s.strip_prefix("prob") {
                    let c: usize = c
                        .parse()
                        .map_err(|_| VvolError::BadHeader(format!("bad dtype {s}")))?;
                    if c < 2 {
                        return Err(VvolError::BadHeader(format!("prob dtype needs C >= 2: {s}")));
                    }
                    Ok(Dtype::Prob(c))
                } else {
                    Err(VvolError::BadHeader(format!("unknown dtype {s}")))
                }
            }
        }
    }
}

/// Any of the three payload kinds a VVOL file can hold.
#[derive(Clone, Debug, PartialEq)]
pub enum Vvol {
    Scalar(Volume),
    Labels(LabelVolume),
    Probs(ProbVolume),
}

fn write_header<W: Write>(w: &mut W, dims: Dims, spacing: Spacing, dtype: &Dtype) -> io::Result<()> {
    writeln!(
        w,
        "VVOL1 {} {} {} {} {} {} {}",
        dims.0,
        dims.1,
        dims.2,
        spacing.0,
        spacing.1,
        spacing.2,
        dtype.tag()
    )
}

fn read_header<R: Read>(r: &mut R) -> Result<(Dims, Spacing, Dtype), VvolError> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(VvolError::BadHeader("unexpected end of file".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        if line.len() > 256 {
            return Err(VvolError::BadHeader("header line too long".into()));
        }
        line.push(byte[0]);
    }
    let line = String::from_utf8(line).map_err(|_| VvolError::BadHeader("not utf-8".into()))?;
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 8 || parts[0] != "VVOL1" {
        return Err(VvolError::BadHeader(line));
    }
    let dim = |s: &str| -> Result<usize, VvolError> {
        s.parse()
            .map_err(|_| VvolError::BadHeader(format!("bad dim {s}")))
    };
    let sp = |s: &str| -> Result<f64, VvolError> {
        s.parse()
            .map_err(|_| VvolError::BadHeader(format!("bad spacing {s}")))
    };
    let dims = (dim(parts[1])?, dim(parts[2])?, dim(parts[3])?);
    let spacing = (sp(parts[4])?, sp(parts[5])?, sp(parts[6])?);
    let dtype = Dtype::parse(parts[7])?;
    Ok((dims, spacing, dtype))
}

fn read_exact_payload<R: Read>(r: &mut R, want: usize) -> Result<Vec<u8>, VvolError> {
    let mut buf = vec![0u8; want];
    let mut got = 0;
    while got < want {
        let n = r.read(&mut buf[got..])?;
        if n == 0 {
            return Err(VvolError::Truncated { want, got });
        }
        got += n;
    }
    Ok(buf)
}

pub fn write_vvol<W: Write>(w: &mut W, v: &Vvol) -> Result<(), VvolError> {
    match v {
        Vvol::Scalar(vol) => {
            write_header(w, vol.dims(), vol.spacing(), &Dtype::F32)?;
            for &x in vol.data() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        Vvol::Labels(l) => {
            write_header(w, l.dims(), l.spacing(), &Dtype::U8)?;
            w.write_all(l.labels())?;
        }
        Vvol::Probs(p) => {
            write_header(w, p.dims(), p.spacing(), &Dtype::Prob(p.num_classes()))?;
            for &x in p.probs() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_vvol<R: Read>(r: &mut R) -> Result<Vvol, VvolError> {
    let (dims, spacing, dtype) = read_header(r)?;
    let nvox = voxel_count(dims);
    match dtype {
        Dtype::F32 => {
            let bytes = read_exact_payload(r, nvox * 4)?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            Ok(Vvol::Scalar(Volume::new(dims, spacing, data)?))
        }
        Dtype::U8 => {
            let labels = read_exact_payload(r, nvox)?;
            // the header does not carry a class count: infer it, floor 2
            let num_classes = labels.iter().copied().max().unwrap_or(0).max(1) as usize + 1;
            Ok(Vvol::Labels(LabelVolume::new(
                dims,
                spacing,
                labels,
                num_classes,
            )?))
        }
        Dtype::Prob(c) => {
            let bytes = read_exact_payload(r, nvox * c * 4)?;
            let probs = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            Ok(Vvol::Probs(ProbVolume::new(dims, spacing, c, probs)?))
        }
    }
}

pub fn save(path: &Path, v: &Vvol) -> Result<(), VvolError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_vvol(&mut w, v)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vvol, VvolError> {
    read_vvol(&mut BufReader::new(File::open(path)?))
}

pub fn load_volume(path: &Path) -> Result<Volume, VvolError> {
    match load(path)? {
        Vvol::Scalar(v) => Ok(v),
        other => Err(VvolError::WrongDtype {
            want: "f32".into(),
            got: dtype_of(&other),
        }),
    }
}

pub fn load_labels(path: &Path) -> Result<LabelVolume, VvolError> {
    match load(path)? {
        Vvol::Labels(l) => Ok(l),
        other => Err(VvolError::WrongDtype {
            want: "u8".into(),
            got: dtype_of(&other),
        }),
    }
}

pub fn load_probs(path: &Path) -> Result<ProbVolume, VvolError> {
    match load(path)? {
        Vvol::Probs(p) => Ok(p),
        other => Err(VvolError::WrongDtype {
            want: "probC".into(),
            got: dtype_of(&other),
        }),
    }
}

fn dtype_of(v: &Vvol) -> String {
    match v {
        Vvol::Scalar(_) => "f32".into(),
        Vvol::Labels(_) => "u8".into(),
        Vvol::Probs(p) => format!("prob{}", p.num_classes()),
    }
}
