//! Flat little-endian parameter archive.
//!
//! Layout:
//!
//! ```text
//! b"XDRA" | u32 version
//! u32 manifest_len | manifest (JSON)
//! u32 array_count
//! per array: u32 name_len | name | u32 rows | u32 cols | u8 frozen | rows*cols f64
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::Parameters;
use super::Matrix;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"XDRA";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterEntry {
    /// Full parameter path of the adapter's `A` array, minus the `.a` suffix.
    pub path: String,
    pub rank: usize,
    pub alpha: f64,
    pub scale: f64,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub adapters: Vec<AdapterEntry>,
    pub frozen: Vec<String>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub struct Archive {
    pub manifest: Manifest,
    pub arrays: BTreeMap<String, (Matrix, bool)>,
}

pub fn manifest_for<P: Parameters>(kind: &str, model: &P, extra: serde_json::Value) -> Manifest {
    let params = model.params();
    let adapters = params
        .iter()
        .filter_map(|p| {
            p.lora.map(|m| AdapterEntry {
                path: p.name.trim_end_matches(".a").to_string(),
                rank: m.rank,
                alpha: m.alpha,
                scale: m.scale,
                frozen: p.frozen,
            })
        })
        .collect();
    let frozen = params.iter().filter(|p| p.frozen).map(|p| p.name.clone()).collect();
    Manifest { kind: kind.to_string(), adapters, frozen, extra }
}

pub fn encode<P: Parameters>(model: &P, manifest: &Manifest) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let m = serde_json::to_vec(manifest)?;
    out.extend_from_slice(&(m.len() as u32).to_le_bytes());
    out.extend_from_slice(&m);
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        out.push(p.frozen as u8);
        for v in p.value.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Archive("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Archive> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Archive("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Archive(format!("unsupported version {version}")));
    }
    let mlen = r.u32()? as usize;
    let manifest: Manifest = serde_json::from_slice(r.take(mlen)?)?;
    let count = r.u32()? as usize;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| Error::Archive(e.to_string()))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let frozen = r.take(1)?[0] != 0;
        let raw = r.take(rows * cols * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        arrays.insert(name, (Matrix::from_vec(rows, cols, data)?, frozen));
    }
    if r.pos != buf.len() {
        return Err(Error::Archive("trailing bytes".into()));
    }
    Ok(Archive { manifest, arrays })
}

/// Copies every array of `archive` into the identically named parameter of
/// `model`. The model must have exactly the archived parameter set.
pub fn load_into<P: Parameters>(archive: &Archive, model: &mut P) -> Result<()> {
    let mut params = model.params_mut();
    if params.len() != archive.arrays.len() {
        return Err(Error::Archive(format!(
            "archive holds {} arrays, model expects {}",
            archive.arrays.len(),
            params.len()
        )));
    }
    for p in params.iter_mut() {
        let (m, _) = archive.arrays.get(&p.name).ok_or_else(|| Error::Archive(format!("missing array `{}`", p.name)))?;
        if m.shape() != p.value.shape() {
            return Err(Error::Archive(format!("shape mismatch for `{}`", p.name)));
        }
        *p.value = m.clone();
    }
    Ok(())
}

pub fn save<P: Parameters>(path: &Path, model: &P, manifest: &Manifest) -> Result<()> {
    let bytes = encode(model, manifest)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::lora::LoraLinear;
    use crate::nn::rng::RngSeed;

    #[test]
    fn round_trip_preserves_values_and_manifest() {
        let mut rng = RngSeed::new(3, "arch").stream();
        let mut l = LoraLinear::new(4, 3, true, &mut rng);
        l.add_adapter("books", 2, 4.0, &mut rng).unwrap();
        l.freeze_base();
        let manifest = manifest_for("linear", &l, serde_json::json!({"seed": 3}));
        assert_eq!(manifest.adapters.len(), 1);
        assert_eq!(manifest.adapters[0].scale, 2.0);
        assert_eq!(manifest.frozen, vec!["weight".to_string(), "bias".to_string()]);
        let bytes = encode(&l, &manifest).unwrap();
        let arch = decode(&bytes).unwrap();
        assert_eq!(arch.manifest, manifest);
        let mut fresh = LoraLinear::new(4, 3, true, &mut rng);
        fresh.add_adapter("books", 2, 4.0, &mut rng).unwrap();
        load_into(&arch, &mut fresh).unwrap();
        assert_eq!(fresh.weight, l.weight);
        assert_eq!(fresh.adapters()[0].a, l.adapters()[0].a);
    }

    #[test]
    fn truncated_archive_rejected() {
        let m = Matrix::zeros(2, 2);
        let bytes = encode(&m, &Manifest::default()).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Archive(_))));
    }

    #[test]
    fn values_are_little_endian_f64() {
        let m = Matrix::from_vec(1, 1, vec![1.5]).unwrap();
        let bytes = encode(&m, &Manifest::default()).unwrap();
        assert_eq!(&bytes[bytes.len() - 8..], &1.5f64.to_le_bytes());
    }
}
