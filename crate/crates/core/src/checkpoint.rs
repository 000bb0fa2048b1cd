//! Single-file tensor archives (safetensors) with a JSON manifest stored in
//! the header metadata.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::nn::{Element, Sequential};

const MANIFEST_KEY: &str = "manifest";

/// Converts a stored tensor to `E`, accepting f32, f64, f16 and bf16 data.
pub fn decode_values<E: Element>(view: &TensorView<'_>) -> Result<Vec<E>, String> {
    let bytes = view.data();
    let out = match view.dtype() {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| E::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| E::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|c| E::from_f64(half_to_f64(u16::from_le_bytes([c[0], c[1]]))))
            .collect(),
        Dtype::BF16 => bytes
            .chunks_exact(2)
            .map(|c| E::from_f64(f32::from_bits((u16::from_le_bytes([c[0], c[1]]) as u32) << 16) as f64))
            .collect(),
        other => return Err(format!("unsupported dtype {other:?}")),
    };
    Ok(out)
}

fn half_to_f64(h: u16) -> f64 {
    let sign = if h & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((h >> 10) & 0x1f) as i32;
    let frac = (h & 0x3ff) as f64;
    match exp {
        0 => sign * frac * 2f64.powi(-24),
        31 if frac == 0.0 => sign * f64::INFINITY,
        31 => f64::NAN,
        _ => sign * (1.0 + frac / 1024.0) * 2f64.powi(exp - 15),
    }
}

fn encode<E: Element>(values: &[E]) -> (Dtype, Vec<u8>) {
    if std::mem::size_of::<E>() == 4 {
        (Dtype::F32, values.iter().flat_map(|v| (v.to_f64() as f32).to_le_bytes()).collect())
    } else {
        (Dtype::F64, values.iter().flat_map(|v| v.to_f64().to_le_bytes()).collect())
    }
}

/// Tensors collected for writing.
#[derive(Debug, Default)]
pub struct ArchiveWriter {
    entries: Vec<(String, Vec<usize>, Dtype, Vec<u8>)>,
}

impl ArchiveWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<E: Element>(&mut self, name: impl Into<String>, shape: &[usize], values: &[E]) {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        let (dtype, bytes) = encode(values);
        self.entries.push((name.into(), shape.to_vec(), dtype, bytes));
    }

    /// Every parameter and buffer of `net`, named `<prefix>.<path>`.
    pub fn push_network<E: Element>(&mut self, prefix: &str, net: &Sequential<E>) {
        net.visit_params(prefix, &mut |name, p| self.push(name, &p.shape, &p.value));
        net.visit_buffers(prefix, &mut |name, b| self.push(name, &b.shape, &b.value));
    }

    /// Writes to a sibling temporary file and renames it into place, so a
    /// crash never leaves a truncated archive at `path`.
    pub fn write(&self, path: &Path, manifest: &serde_json::Value) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut tmp = PathBuf::from(path);
        tmp.as_mut_os_string().push(".tmp");
        let views = self
            .entries
            .iter()
            .map(|(name, shape, dtype, bytes)| {
                TensorView::new(*dtype, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let info = Some(HashMap::from([(MANIFEST_KEY.to_string(), manifest.to_string())]));
        safetensors::serialize_to_file(views, &info, &tmp).map_err(|e| Error::Checkpoint(format!("{}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

/// A loaded archive. Tensors are decoded on request.
#[derive(Debug)]
pub struct Archive {
    path: PathBuf,
    bytes: Vec<u8>,
    manifest: serde_json::Value,
}

impl Archive {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, meta) = SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{} is not a tensor archive: {e}", path.display())))?;
        let raw = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(MANIFEST_KEY))
            .ok_or_else(|| Error::Checkpoint(format!("{} has no manifest", path.display())))?;
        let manifest = serde_json::from_str(raw)?;
        Ok(Self {
            path: path.to_path_buf(),
            bytes,
            manifest,
        })
    }

    pub fn manifest(&self) -> &serde_json::Value {
        &self.manifest
    }

    fn tensors(&self) -> Result<SafeTensors<'_>> {
        SafeTensors::deserialize(&self.bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", self.path.display())))
    }

    pub fn names(&self) -> Result<Vec<String>> {
        let mut names: Vec<String> = self.tensors()?.names().into_iter().cloned().collect();
        names.sort();
        Ok(names)
    }

    pub fn get<E: Element>(&self, name: &str) -> Result<Option<(Vec<usize>, Vec<E>)>> {
        let st = self.tensors()?;
        let Ok(view) = st.tensor(name) else {
            return Ok(None);
        };
        let values = decode_values(&view).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        Ok(Some((view.shape().to_vec(), values)))
    }

    /// Fetches a tensor that must exist with the given shape.
    pub fn require<E: Element>(&self, name: &str, shape: &[usize]) -> Result<Vec<E>> {
        let (got, values) = self
            .get(name)?
            .ok_or_else(|| Error::Checkpoint(format!("{} lacks tensor {name}", self.path.display())))?;
        if got != shape {
            return Err(Error::Checkpoint(format!("tensor {name} has shape {got:?}, expected {shape:?}")));
        }
        Ok(values)
    }

    /// Overwrites every parameter and buffer of `net` from `<prefix>.<path>` entries.
    pub fn load_network<E: Element>(&self, prefix: &str, net: &mut Sequential<E>) -> Result<()> {
        let mut err = None;
        net.visit_params_mut(prefix, &mut |name, p| {
            if err.is_none() {
                match self.require(name, &p.shape) {
                    Ok(v) => p.value = v,
                    Err(e) => err = Some(e),
                }
            }
        });
        net.visit_buffers_mut(prefix, &mut |name, b| {
            if err.is_none() {
                match self.require(name, &b.shape) {
                    Ok(v) => b.value = v,
                    Err(e) => err = Some(e),
                }
            }
        });
        err.map_or(Ok(()), Err)
    }
}
