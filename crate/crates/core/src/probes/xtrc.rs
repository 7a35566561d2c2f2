//! External trace dumps.
//!
//! `XTRC`: magic, then little-endian u32 version, n_samples,
//! points_per_sample and dim, then `n * points * dim` f32 values,
//! sample-major. Labels live in a sibling `<path>.labels` file of u32 per
//! sample. `MHEAD`: magic, u32 vocab, u32 dim, f32 row-major head matrix.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use super::ProbeError;

const XTRC_MAGIC: &[u8; 4] = b"XTRC";
const XTRC_VERSION: u32 = 1;
const MHEAD_MAGIC: &[u8; 5] = b"MHEAD";

/// `data[[sample, point, dim]]`, plus optional per-sample labels.
#[derive(Debug, Clone, PartialEq)]
pub struct XtrcTrace {
    pub data: Array3<f32>,
    pub labels: Option<Vec<u32>>,
}

impl XtrcTrace {
    /// Norm of every point of every sample.
    pub fn norm_trajectories(&self) -> Vec<Vec<f64>> {
        self.data
            .outer_iter()
            .map(|s| {
                s.outer_iter()
                    .map(|p| p.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt())
                    .collect()
            })
            .collect()
    }

    /// Sample `i` as a points x dim matrix.
    pub fn sample(&self, i: usize) -> Array2<f64> {
        self.data.index_axis(ndarray::Axis(0), i).mapv(|v| v as f64)
    }
}

fn labels_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".labels");
    PathBuf::from(s)
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().expect("4 bytes"))
}

fn f32s(bytes: &[u8]) -> Result<Vec<f32>, ProbeError> {
    let v: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(ProbeError::Format("payload contains NaN or infinite values".into()));
    }
    Ok(v)
}

pub fn write_xtrc(path: &Path, trace: &XtrcTrace) -> Result<(), ProbeError> {
    let (n, p, d) = trace.data.dim();
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(XTRC_MAGIC)?;
    for v in [XTRC_VERSION, n as u32, p as u32, d as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in trace.data.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    if let Some(labels) = &trace.labels {
        if labels.len() != n {
            return Err(ProbeError::Input(format!("{} labels for {n} samples", labels.len())));
        }
        let bytes: Vec<u8> = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
        std::fs::write(labels_path(path), bytes)?;
    }
    Ok(())
}

pub fn read_xtrc(path: &Path) -> Result<XtrcTrace, ProbeError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..4] != XTRC_MAGIC {
        return Err(ProbeError::Format("missing XTRC magic".into()));
    }
    let version = u32_at(&bytes, 4);
    if version != XTRC_VERSION {
        return Err(ProbeError::Format(format!("unsupported XTRC version {version}")));
    }
    let (n, p, d) = (u32_at(&bytes, 8) as usize, u32_at(&bytes, 12) as usize, u32_at(&bytes, 16) as usize);
    let expected = n
        .checked_mul(p)
        .and_then(|x| x.checked_mul(d))
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| ProbeError::Format("declared shape overflows".into()))?;
    if bytes.len() - 20 != expected {
        return Err(ProbeError::Format(format!(
            "shape {n}x{p}x{d} needs {expected} payload bytes, file has {}",
            bytes.len() - 20
        )));
    }
    let data = Array3::from_shape_vec((n, p, d), f32s(&bytes[20..])?).expect("length checked");
    let lp = labels_path(path);
    let labels = if lp.exists() {
        let lb = std::fs::read(&lp)?;
        if lb.len() != 4 * n {
            return Err(ProbeError::Format(format!("labels file holds {} bytes for {n} samples", lb.len())));
        }
        Some((0..n).map(|i| u32_at(&lb, 4 * i)).collect())
    } else {
        None
    };
    Ok(XtrcTrace { data, labels })
}

pub fn write_mhead(path: &Path, head: &Array2<f32>) -> Result<(), ProbeError> {
    let mut out = Vec::with_capacity(13 + 4 * head.len());
    out.extend_from_slice(MHEAD_MAGIC);
    out.extend_from_slice(&(head.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(head.ncols() as u32).to_le_bytes());
    for v in head.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_mhead(path: &Path) -> Result<Array2<f32>, ProbeError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 13 || &bytes[..5] != MHEAD_MAGIC {
        return Err(ProbeError::Format("missing MHEAD magic".into()));
    }
    let (v, d) = (u32_at(&bytes, 5) as usize, u32_at(&bytes, 9) as usize);
    if bytes.len() - 13 != v * d * 4 {
        return Err(ProbeError::Format(format!("head {v}x{d} does not match payload of {} bytes", bytes.len() - 13)));
    }
    Ok(Array2::from_shape_vec((v, d), f32s(&bytes[13..])?).expect("length checked"))
}
