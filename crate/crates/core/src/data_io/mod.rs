//! Exposure sequences on disk and in memory, image codecs, component dumps
//! and the synthetic scene generator.

pub mod codec;
pub mod rmef;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use codec::{read_image, write_image};
pub use synth::{synth_dataset, synth_sequence, SynthConfig};

const IMAGE_EXTS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

/// Ground-truth components of a synthetic scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Oracle {
    /// `3×H×W`, shared by every frame.
    pub reflectance: Tensor<f32>,
    /// One `1×H×W` map per frame.
    pub illum: Vec<Tensor<f32>>,
    /// One `3×H×W` map per frame.
    pub glare: Vec<Tensor<f32>>,
}

/// Co-registered frames of one scene, ordered by increasing exposure.
#[derive(Clone, Debug)]
pub struct ExposureSequence {
    pub scene_id: String,
    pub images: Vec<Tensor<f32>>,
    pub under_idx: usize,
    pub over_idx: usize,
    pub oracle: Option<Oracle>,
}

impl ExposureSequence {
    pub fn new(
        scene_id: String,
        images: Vec<Tensor<f32>>,
        under_idx: usize,
        over_idx: usize,
        oracle: Option<Oracle>,
    ) -> Result<Self> {
        let seq = Self { scene_id, images, under_idx, over_idx, oracle };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.images.len();
        if j < 2 {
            return Err(Error::shape(format!("sequence {} has {j} images, need at least 2", self.scene_id)));
        }
        let shape = self.images[0].shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape(format!("expected 3xHxW images, got {shape:?}")));
        }
        if let Some(bad) = self.images.iter().find(|im| im.shape() != shape) {
            return Err(Error::shape(format!("image shape {:?} differs from {shape:?}", bad.shape())));
        }
        if self.under_idx >= j || self.over_idx >= j || self.under_idx == self.over_idx {
            return Err(Error::shape(format!(
                "invalid extremes ({}, {}) for {j} images",
                self.under_idx, self.over_idx
            )));
        }
        if let Some(o) = &self.oracle {
            o.check(&self.images)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn height(&self) -> usize {
        self.images[0].shape()[1]
    }

    pub fn width(&self) -> usize {
        self.images[0].shape()[2]
    }

    pub fn under(&self) -> &Tensor<f32> {
        &self.images[self.under_idx]
    }

    pub fn over(&self) -> &Tensor<f32> {
        &self.images[self.over_idx]
    }
}

impl Oracle {
    fn check(&self, images: &[Tensor<f32>]) -> Result<()> {
        if self.illum.len() != images.len() || self.glare.len() != images.len() {
            return Err(Error::shape("oracle frame count differs from image count"));
        }
        let shape = images[0].shape();
        let hw = shape[1] * shape[2];
        if self.reflectance.shape() != shape {
            return Err(Error::shape("oracle reflectance shape differs from images"));
        }
        let r = self.reflectance.data();
        for (j, img) in images.iter().enumerate() {
            if self.illum[j].shape() != [1, shape[1], shape[2]] || self.glare[j].shape() != shape {
                return Err(Error::shape(format!("oracle frame {j} has wrong shape")));
            }
            let (l, g) = (self.illum[j].data(), self.glare[j].data());
            for (i, &v) in img.data().iter().enumerate() {
                let model = (l[i % hw] * (r[i] + g[i])).clamp(0.0, 1.0);
                if (model - v).abs() > 1.0 / 255.0 {
                    return Err(Error::shape(format!("frame {j} deviates from its oracle at element {i}")));
                }
            }
        }
        Ok(())
    }
}

fn ingest(path: &Path, msg: impl Into<String>) -> Error {
    Error::Ingest { path: path.to_path_buf(), msg: msg.into() }
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| ingest(dir, e.to_string()))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| ingest(dir, e.to_string()))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn oracle_paths(dir: &Path, j: usize) -> (PathBuf, PathBuf) {
    (dir.join(format!("illum_{j:03}.rmef")), dir.join(format!("glare_{j:03}.rmef")))
}

fn load_oracle(dir: &Path, frames: usize) -> Result<Oracle> {
    let reflectance = rmef::read(&dir.join("reflectance.rmef"))?;
    let mut illum = Vec::with_capacity(frames);
    let mut glare = Vec::with_capacity(frames);
    for j in 0..frames {
        let (lp, gp) = oracle_paths(dir, j);
        illum.push(rmef::read(&lp)?);
        glare.push(rmef::read(&gp)?);
    }
    Ok(Oracle { reflectance, illum, glare })
}

/// Loads every PNG/PPM image in `dir` in filename order. The first file is the
/// under-exposed extreme and the last the over-exposed one. An `oracle/`
/// subdirectory, when present, is loaded as ground truth.
pub fn load_sequence(dir: &Path) -> Result<ExposureSequence> {
    let files = image_files(dir)?;
    if files.len() < 2 {
        return Err(ingest(dir, format!("found {} images, need at least 2", files.len())));
    }
    let mut images: Vec<Tensor<f32>> = Vec::with_capacity(files.len());
    for f in &files {
        let img = read_image(f).map_err(|e| ingest(f, e.to_string()))?;
        if let Some(first) = images.first() {
            if first.shape() != img.shape() {
                return Err(ingest(f, format!("size {:?} differs from {:?}", img.shape(), first.shape())));
            }
        }
        images.push(img);
    }
    let oracle_dir = dir.join("oracle");
    let oracle = if oracle_dir.is_dir() {
        Some(load_oracle(&oracle_dir, images.len()).map_err(|e| ingest(&oracle_dir, e.to_string()))?)
    } else {
        None
    };
    let scene_id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let j = images.len();
    ExposureSequence::new(scene_id, images, 0, j - 1, oracle).map_err(|e| ingest(dir, e.to_string()))
}

/// Every subdirectory of `root` holding a sequence, sorted by scene id.
pub fn load_dataset(root: &Path) -> Result<Vec<ExposureSequence>> {
    let entries = fs::read_dir(root).map_err(|e| ingest(root, e.to_string()))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let seqs = dirs.iter().map(|d| load_sequence(d)).collect::<Result<Vec<_>>>()?;
    if seqs.is_empty() {
        return Err(ingest(root, "no scene directories"));
    }
    Ok(seqs)
}

/// Writes `<root>/<scene>/img_NNN.png` plus `oracle/` dumps when present.
pub fn write_sequence(root: &Path, seq: &ExposureSequence) -> Result<PathBuf> {
    let dir = root.join(&seq.scene_id);
    fs::create_dir_all(&dir)?;
    for (j, img) in seq.images.iter().enumerate() {
        write_image(&dir.join(format!("img_{j:03}.png")), img)?;
    }
    if let Some(o) = &seq.oracle {
        let od = dir.join("oracle");
        rmef::write(&od.join("reflectance.rmef"), &o.reflectance)?;
        for j in 0..o.illum.len() {
            let (lp, gp) = oracle_paths(&od, j);
            rmef::write(&lp, &o.illum[j])?;
            rmef::write(&gp, &o.glare[j])?;
        }
    }
    Ok(dir)
}

/// Train/test partition by scene id, reproducible from the seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn new(scene_ids: &[String], test_count: usize, seed: u64) -> Result<Self> {
        if test_count > scene_ids.len() {
            return Err(Error::config(format!(
                "test count {test_count} exceeds {} scenes",
                scene_ids.len()
            )));
        }
        let mut ids = scene_ids.to_vec();
        ids.sort();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let train_count = ids.len() - test_count;
        let mut test = ids.split_off(train_count);
        ids.sort();
        test.sort();
        Ok(Self { seed, train: ids, test })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> SynthConfig {
        SynthConfig { height: 12, width: 10, frames: 3, seed: 3, glare_radius: 1, ..Default::default() }
    }

    #[test]
    fn three_images_give_extremes_0_2() {
        let tmp = tempfile::tempdir().unwrap();
        let seq = synth_sequence(&tiny_cfg()).unwrap();
        let dir = write_sequence(tmp.path(), &seq).unwrap();
        let back = load_sequence(&dir).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!((back.under_idx, back.over_idx), (0, 2));
        assert_eq!(back.scene_id, seq.scene_id);
        for (a, b) in back.images.iter().zip(&seq.images) {
            assert!(a.max_abs_diff(b) <= 1.0 / 510.0 + 1e-7);
        }
        assert_eq!(back.oracle, seq.oracle);
    }

    #[test]
    fn mixed_sizes_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        write_image(&tmp.path().join("a.png"), &Tensor::full(&[3, 4, 4], 0.2f32)).unwrap();
        write_image(&tmp.path().join("b.png"), &Tensor::full(&[3, 5, 4], 0.2f32)).unwrap();
        match load_sequence(tmp.path()) {
            Err(Error::Ingest { path, .. }) => assert!(path.ends_with("b.png")),
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn sixteen_bit_png_scaled() {
        let tmp = tempfile::tempdir().unwrap();
        let img = Tensor::full(&[3, 2, 2], 0.3f32);
        codec::write_png16(&tmp.path().join("a.png"), &img).unwrap();
        codec::write_png16(&tmp.path().join("b.png"), &img).unwrap();
        let seq = load_sequence(tmp.path()).unwrap();
        let q = codec::quantize16(0.3) as f32 / 65535.0;
        assert!(seq.images[0].data().iter().all(|&v| v == q));
    }

    #[test]
    fn unreadable_file_named() {
        let tmp = tempfile::tempdir().unwrap();
        write_image(&tmp.path().join("a.png"), &Tensor::full(&[3, 4, 4], 0.2f32)).unwrap();
        fs::write(tmp.path().join("b.png"), b"not a png").unwrap();
        let err = load_sequence(tmp.path()).unwrap_err();
        assert_eq!(err.class(), "ingest");
        assert!(err.to_string().contains("b.png"));
    }

    #[test]
    fn single_image_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        write_image(&tmp.path().join("a.png"), &Tensor::full(&[3, 4, 4], 0.2f32)).unwrap();
        assert!(load_sequence(tmp.path()).is_err());
    }

    #[test]
    fn invariants_enforced() {
        let img = Tensor::full(&[3, 2, 2], 0.5f32);
        assert!(ExposureSequence::new("s".into(), vec![img.clone()], 0, 0, None).is_err());
        assert!(ExposureSequence::new("s".into(), vec![img.clone(), img.clone()], 1, 1, None).is_err());
        let bad_oracle = Oracle {
            reflectance: Tensor::full(&[3, 2, 2], 0.1),
            illum: vec![Tensor::full(&[1, 2, 2], 1.0); 2],
            glare: vec![Tensor::zeros(&[3, 2, 2]); 2],
        };
        assert!(ExposureSequence::new("s".into(), vec![img.clone(), img], 0, 1, Some(bad_oracle)).is_err());
    }

    #[test]
    fn dataset_sorted_and_split_deterministic() {
        let tmp = tempfile::tempdir().unwrap();
        for seq in synth_dataset(&tiny_cfg(), 5).unwrap().iter().rev() {
            write_sequence(tmp.path(), seq).unwrap();
        }
        let ds = load_dataset(tmp.path()).unwrap();
        let ids: Vec<String> = ds.iter().map(|s| s.scene_id.clone()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);

        let a = DatasetSplit::new(&ids, 2, 11).unwrap();
        let b = DatasetSplit::new(&ids, 2, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len() + a.test.len(), 5);
        assert!(a.test.iter().all(|t| !a.train.contains(t)));
        let path = tmp.path().join("split.json");
        a.save(&path).unwrap();
        assert_eq!(DatasetSplit::load(&path).unwrap(), a);
        assert!(DatasetSplit::new(&ids, 6, 0).is_err());
    }
}
