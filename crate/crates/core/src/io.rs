//! On-disk formats.
//!
//! `TNSR v1` layout (all integers little-endian):
//!
//! ```text
//! offset 0  b"TNSR"
//!        4  version   u8 = 1
//!        5  dtype     u8 = 0 (f32)
//!        6  ndim      u8 (1..=4)
//!        7  reserved  u8 = 0
//!        8  extents   ndim × u32
//!        .  payload   row-major f32
//! ```
//!
//! Masks are 8-bit binary PGM (`P5`, 0/255). Weight bundles are directories
//! holding one TNSR file per tensor plus a `manifest.json` listing names and
//! shapes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

pub const TNSR_MAGIC: &[u8; 4] = b"TNSR";
pub const TNSR_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn encode_tnsr(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.ndim() + 4 * t.len());
    out.extend_from_slice(TNSR_MAGIC);
    out.extend_from_slice(&[TNSR_VERSION, DTYPE_F32, t.ndim() as u8, 0]);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tnsr(bytes: &[u8]) -> Result<Tensor<f32>> {
    let bad = |msg: String| Error::Format(format!("TNSR: {msg}"));
    if bytes.len() < 8 || &bytes[..4] != TNSR_MAGIC {
        return Err(bad("missing magic".into()));
    }
    let (version, dtype, ndim) = (bytes[4], bytes[5], bytes[6] as usize);
    if version != TNSR_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    if dtype != DTYPE_F32 {
        return Err(bad(format!("unsupported dtype {dtype}")));
    }
    if !(1..=4).contains(&ndim) {
        return Err(bad(format!("ndim {ndim} out of range")));
    }
    let header = 8 + 4 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated header".into()));
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != 4 * n {
        return Err(bad(format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            4 * n
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_tnsr(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_bytes(path, &encode_tnsr(t))
}

pub fn read_tnsr(path: &Path) -> Result<Tensor<f32>> {
    decode_tnsr(&read_bytes(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let (h, w) = mask.dims();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.data().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    write_bytes(path, &encode_pgm(mask))
}

/// Reads an 8-bit grayscale PNM; pixels at or above half range are foreground.
pub fn read_pgm(path: &Path) -> Result<Mask> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = img.dimensions();
    Mask::new(
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(|v| v >= 128).collect(),
    )
}

/// Reads a mask from either a PGM or a binary-valued TNSR map.
pub fn read_mask(path: &Path) -> Result<Mask> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("tnsr") => Mask::from_binary_tensor(&read_tnsr(path)?),
        _ => read_pgm(path),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format: String,
    pub tensors: Vec<BundleEntry>,
}

pub const BUNDLE_FORMAT: &str = "tnsr-bundle/1";

pub fn write_bundle(dir: &Path, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = BundleManifest {
        format: BUNDLE_FORMAT.into(),
        tensors: Vec::new(),
    };
    for (name, t) in tensors {
        let file = format!("{name}.tnsr");
        write_tnsr(&dir.join(&file), t)?;
        manifest.tensors.push(BundleEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    write_bytes(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}

pub fn read_bundle(dir: &Path) -> Result<BTreeMap<String, Tensor<f32>>> {
    let manifest: BundleManifest =
        serde_json::from_slice(&read_bytes(&dir.join("manifest.json"))?)?;
    if manifest.format != BUNDLE_FORMAT {
        return Err(Error::Format(format!(
            "bundle format `{}` is not {BUNDLE_FORMAT}",
            manifest.format
        )));
    }
    let mut out = BTreeMap::new();
    for entry in manifest.tensors {
        let t = read_tnsr(&dir.join(&entry.file))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!(
                "bundle tensor `{}` has shape {:?}, manifest says {:?}",
                entry.name,
                t.shape(),
                entry.shape
            )));
        }
        out.insert(entry.name, t);
    }
    Ok(out)
}

/// Files in `dir` with the given extension, sorted by name.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().and_then(|e| e.to_str()) == Some(ext))
        .collect();
    out.sort();
    Ok(out)
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}
