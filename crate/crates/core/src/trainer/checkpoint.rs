//! Checkpoints: a JSON manifest beside a little-endian blob of parameters and
//! optional Adam moments, stored at the scalar width they were trained in.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::networks::{ArchConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::{AdamHyper, AdamState, Tensor};

const FORMAT: &str = "retinex-mef-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offsets into the blob.
    pub offset: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_offset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_offset: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub step: u64,
    pub lr: f64,
    pub hyper: AdamHyper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub arch: ArchConfig,
    /// Epochs completed when written.
    pub epoch: usize,
    pub has_optimizer: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerMeta>,
    pub tensors: Vec<TensorEntry>,
    pub blob: String,
    pub blob_bytes: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub adam: Option<AdamState<T>>,
    pub epoch: usize,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Blob path belonging to a manifest path.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn push<T: Scalar>(blob: &mut Vec<u8>, values: &[T]) -> usize {
    let offset = blob.len();
    for &v in values {
        v.write_le(blob);
    }
    offset
}

impl<T: Scalar> Checkpoint<T> {
    /// Writes `path` (manifest) and its `.bin` blob. Returns the blob hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        let mut blob = Vec::new();
        let mut tensors: Vec<TensorEntry> = self
            .params
            .named()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset: push(&mut blob, t.data()),
                m_offset: None,
                v_offset: None,
            })
            .collect();
        if let Some(adam) = &self.adam {
            for (e, m) in tensors.iter_mut().zip(&adam.m) {
                e.m_offset = Some(push(&mut blob, m));
            }
            for (e, v) in tensors.iter_mut().zip(&adam.v) {
                e.v_offset = Some(push(&mut blob, v));
            }
        }
        let blob_file = blob_path(path);
        let sha256 = sha256_hex(&blob);
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            dtype: T::DTYPE.into(),
            arch: self.params.arch().clone(),
            epoch: self.epoch,
            has_optimizer: self.adam.is_some(),
            optimizer: self.adam.as_ref().map(|a| OptimizerMeta { step: a.step, lr: a.lr, hyper: a.hyper }),
            tensors,
            blob: blob_file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            blob_bytes: blob.len(),
            sha256: sha256.clone(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(&blob_file, &blob)?;
        fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(sha256)
    }

    /// Loads a checkpoint, optionally insisting on an architecture. A blob
    /// stored at another width is converted.
    pub fn load(path: &Path, expected: Option<&ArchConfig>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| corrupt(format!("{}: bad manifest: {e}", path.display())))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(corrupt(format!("unsupported format {} v{}", manifest.format, manifest.version)));
        }
        if let Some(want) = expected {
            if *want != manifest.arch {
                return Err(corrupt(format!(
                    "checkpoint architecture {} differs from requested {}",
                    serde_json::to_string(&manifest.arch)?,
                    serde_json::to_string(want)?
                )));
            }
        }
        let blob_file = path.with_file_name(&manifest.blob);
        let blob = fs::read(&blob_file).map_err(|e| corrupt(format!("{}: {e}", blob_file.display())))?;
        if blob.len() != manifest.blob_bytes {
            return Err(corrupt(format!("blob is {} bytes, manifest says {}", blob.len(), manifest.blob_bytes)));
        }
        if sha256_hex(&blob) != manifest.sha256 {
            return Err(corrupt("blob hash does not match manifest"));
        }
        match manifest.dtype.as_str() {
            d if d == T::DTYPE => decode::<T>(&manifest, &blob),
            "f32" => Ok(decode::<f32>(&manifest, &blob)?.cast()),
            "f64" => Ok(decode::<f64>(&manifest, &blob)?.cast()),
            other => Err(corrupt(format!("unknown dtype {other}"))),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Checkpoint<U> {
        let conv = |xs: &Vec<Vec<T>>| -> Vec<Vec<U>> {
            xs.iter().map(|v| v.iter().map(|x| U::of(x.as_f64())).collect()).collect()
        };
        Checkpoint {
            params: self.params.cast(),
            adam: self.adam.as_ref().map(|a| AdamState { m: conv(&a.m), v: conv(&a.v), step: a.step, lr: a.lr, hyper: a.hyper }),
            epoch: self.epoch,
        }
    }
}

fn read_vec<T: Scalar>(blob: &[u8], offset: usize, n: usize, name: &str) -> Result<Vec<T>> {
    let end = n.checked_mul(T::BYTES).and_then(|b| b.checked_add(offset));
    let bytes = end
        .and_then(|end| blob.get(offset..end))
        .ok_or_else(|| corrupt(format!("tensor {name} extends past the blob")))?;
    Ok(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
}

fn decode<T: Scalar>(manifest: &Manifest, blob: &[u8]) -> Result<Checkpoint<T>> {
    let mut named = Vec::with_capacity(manifest.tensors.len());
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let data = read_vec::<T>(blob, e.offset, n, &e.name)?;
        named.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        if manifest.has_optimizer {
            let (mo, vo) = e
                .m_offset
                .zip(e.v_offset)
                .ok_or_else(|| corrupt(format!("tensor {} lacks optimizer offsets", e.name)))?;
            m.push(read_vec::<T>(blob, mo, n, &e.name)?);
            v.push(read_vec::<T>(blob, vo, n, &e.name)?);
        }
    }
    let params = ModelParams::from_named(manifest.arch.clone(), named).map_err(|e| corrupt(e.to_string()))?;
    let adam = match (&manifest.optimizer, manifest.has_optimizer) {
        (Some(meta), true) => Some(AdamState { m, v, step: meta.step, lr: meta.lr, hyper: meta.hyper }),
        (None, false) => None,
        _ => return Err(corrupt("optimizer flag and metadata disagree")),
    };
    Ok(Checkpoint { params, adam, epoch: manifest.epoch })
}

/// Hash recorded in a manifest, for run records.
pub fn manifest_hash(path: &Path) -> Result<String> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| corrupt(format!("{}: bad manifest: {e}", path.display())))?;
    Ok(manifest.sha256)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::BlockVariant;

    fn sample<T: Scalar>() -> Checkpoint<T> {
        let params = ModelParams::<T>::init(ArchConfig::default(), 5).unwrap();
        let mut adam = AdamState::new(params.tensors(), 3e-4, AdamHyper::default());
        adam.step = 17;
        for (i, m) in adam.m.iter_mut().enumerate() {
            m.iter_mut().enumerate().for_each(|(j, x)| *x = T::of((i * 31 + j) as f64 * 1e-7));
        }
        for v in &mut adam.v {
            v.iter_mut().enumerate().for_each(|(j, x)| *x = T::of(j as f64 * 1e-9));
        }
        Checkpoint { params, adam: Some(adam), epoch: 3 }
    }

    fn bits_equal<T: Scalar>(a: &[T], b: &[T]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
    }

    #[test]
    fn round_trip_bitwise_both_widths() {
        let tmp = tempfile::tempdir().unwrap();
        let c32 = sample::<f32>();
        let p = tmp.path().join("a.json");
        c32.save(&p).unwrap();
        assert_eq!(Checkpoint::<f32>::load(&p, None).unwrap(), c32);
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(manifest.dtype, "f32");
        assert_eq!(manifest.blob_bytes, 3 * 4 * c32.params.param_count());

        let c64 = sample::<f64>();
        let p = tmp.path().join("b.json");
        c64.save(&p).unwrap();
        let back = Checkpoint::<f64>::load(&p, Some(&ArchConfig::default())).unwrap();
        for (a, b) in back.params.tensors().iter().zip(c64.params.tensors()) {
            assert!(bits_equal(a.data(), b.data()));
        }
        let (ba, ca) = (back.adam.unwrap(), c64.adam.unwrap());
        assert_eq!(ba.step, 17);
        assert!(ba.m.iter().zip(&ca.m).all(|(x, y)| bits_equal(x, y)));
        assert!(ba.v.iter().zip(&ca.v).all(|(x, y)| bits_equal(x, y)));
    }

    #[test]
    fn without_optimizer() {
        let tmp = tempfile::tempdir().unwrap();
        let c = Checkpoint { adam: None, ..sample::<f32>() };
        let p = tmp.path().join("c.json");
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::<f32>::load(&p, None).unwrap(), c);
    }

    #[test]
    fn converts_width_on_load() {
        let tmp = tempfile::tempdir().unwrap();
        let c = sample::<f32>();
        let p = tmp.path().join("c.json");
        c.save(&p).unwrap();
        let wide = Checkpoint::<f64>::load(&p, None).unwrap();
        assert_eq!(wide.params.tensors()[0].data()[0] as f32, c.params.tensors()[0].data()[0]);
    }

    #[test]
    fn truncated_blob_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("c.json");
        sample::<f32>().save(&p).unwrap();
        let b = blob_path(&p);
        let bytes = fs::read(&b).unwrap();
        fs::write(&b, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(Checkpoint::<f32>::load(&p, None), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn flipped_byte_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("c.json");
        sample::<f32>().save(&p).unwrap();
        let b = blob_path(&p);
        let mut bytes = fs::read(&b).unwrap();
        bytes[100] ^= 1;
        fs::write(&b, &bytes).unwrap();
        let err = Checkpoint::<f32>::load(&p, None).unwrap_err();
        assert!(err.to_string().contains("hash"));
    }

    #[test]
    fn arch_mismatch_names_both() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("c.json");
        sample::<f32>().save(&p).unwrap();
        let other = ArchConfig { block: BlockVariant::TransposedAttention, ..Default::default() };
        let msg = Checkpoint::<f32>::load(&p, Some(&other)).unwrap_err().to_string();
        assert!(msg.contains("simple_residual") && msg.contains("transposed_attention"), "{msg}");
    }

    #[test]
    fn missing_files_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(Checkpoint::<f32>::load(&tmp.path().join("none.json"), None).is_err());
        let p = tmp.path().join("c.json");
        sample::<f32>().save(&p).unwrap();
        fs::remove_file(blob_path(&p)).unwrap();
        assert_eq!(Checkpoint::<f32>::load(&p, None).unwrap_err().class(), "checkpoint");
    }
}
