//! Unsupervised training: per step, pair each scene's extremes with a frame
//! drawn from the same sequence, decompose, reconstruct and descend the
//! weighted objective with Adam.

mod checkpoint;
mod oracle;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::ExposureSequence;
use crate::error::{Error, Result};
use crate::losses::{objective, LossValues, ObjectiveConfig, ObjectiveInputs};
use crate::networks::{self, ArchConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::{AdamHyper, AdamState, Graph, Tensor};

pub use checkpoint::{blob_path, manifest_hash, sha256_hex, Checkpoint, Manifest, OptimizerMeta, TensorEntry};
pub use oracle::{evaluate_oracle, OracleReport, SceneReport, NAIVE_EPS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Epochs between learning-rate halvings.
    pub lr_halving_period: usize,
    pub seed: u64,
    pub objective: ObjectiveConfig,
    pub arch: ArchConfig,
    pub adam: AdamHyper,
    pub crop_size: usize,
    /// Crops drawn from every scene per epoch.
    pub crops_per_scene: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 4,
            lr0: 1e-4,
            lr_halving_period: 20,
            seed: 0,
            objective: ObjectiveConfig::default(),
            arch: ArchConfig::default(),
            adam: AdamHyper::default(),
            crop_size: 64,
            crops_per_scene: 1,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.lr_halving_period == 0 || self.crops_per_scene == 0 {
            return Err(Error::config("lr_halving_period and crops_per_scene must be positive"));
        }
        if self.crop_size < 4 {
            return Err(Error::config(format!("crop_size {} is too small", self.crop_size)));
        }
        self.objective.weights.validate()?;
        self.arch.validate()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_slice(&fs::read(path)?)?;
        Ok(cfg)
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        lr_at(self.lr0, self.lr_halving_period, epoch)
    }

    pub fn steps_per_epoch(&self, scenes: usize) -> usize {
        (scenes * self.crops_per_scene).div_ceil(self.batch_size)
    }
}

/// `lr0 · 0.5^⌊epoch / period⌋`
pub fn lr_at(lr0: f64, period: usize, epoch: usize) -> f64 {
    lr0 * 0.5f64.powi((epoch / period.max(1)) as i32)
}

/// Uniform draw over every frame of the sequence, extremes included.
pub fn sample_aux<R: Rng>(seq: &ExposureSequence, rng: &mut R) -> Result<usize> {
    if seq.images.is_empty() {
        return Err(Error::shape(format!("sequence {} has no images", seq.scene_id)));
    }
    Ok(rng.gen_range(0..seq.images.len()))
}

/// Under, over and auxiliary crops stacked as `B×3×h×w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub under: Tensor<T>,
    pub over: Tensor<T>,
    pub aux: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropSpec {
    pub scene: usize,
    pub aux: usize,
    pub y: usize,
    pub x: usize,
    pub size: usize,
    pub flip: bool,
}

fn crop<T: Scalar>(img: &Tensor<f32>, c: &CropSpec) -> Tensor<T> {
    let (ch, _, w) = img.dims3().expect("validated sequence");
    let s = c.size;
    let d = img.data();
    Tensor::from_fn(&[ch, s, s], |i| {
        let (k, rem) = (i / (s * s), i % (s * s));
        let (yy, xx) = (rem / s, rem % s);
        let sx = if c.flip { s - 1 - xx } else { xx };
        T::of(d[k * img.shape()[1] * w + (c.y + yy) * w + c.x + sx] as f64)
    })
}

/// Seeded epoch plan: shuffled scene visits, one crop, flip and auxiliary frame
/// per visit. Each epoch uses its own ChaCha stream, so any epoch is
/// reproducible on its own (resume needs no sampler state).
pub fn epoch_plan(data: &[ExposureSequence], cfg: &TrainConfig, epoch: usize) -> Result<Vec<Vec<CropSpec>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64 + 1);
    let mut visits: Vec<usize> = (0..data.len()).flat_map(|s| std::iter::repeat_n(s, cfg.crops_per_scene)).collect();
    for i in (1..visits.len()).rev() {
        visits.swap(i, rng.gen_range(0..=i));
    }
    let size = data.iter().map(|s| s.height().min(s.width())).min().unwrap_or(0).min(cfg.crop_size);
    let specs = visits
        .into_iter()
        .map(|scene| {
            let seq = &data[scene];
            let aux = sample_aux(seq, &mut rng)?;
            let y = rng.gen_range(0..=seq.height() - size);
            let x = rng.gen_range(0..=seq.width() - size);
            let flip = rng.gen_bool(0.5);
            Ok(CropSpec { scene, aux, y, x, size, flip })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(specs.chunks(cfg.batch_size).map(<[CropSpec]>::to_vec).collect())
}

pub fn assemble_batch<T: Scalar>(data: &[ExposureSequence], specs: &[CropSpec]) -> Result<Batch<T>> {
    let pick = |f: &dyn Fn(&ExposureSequence, &CropSpec) -> usize| -> Result<Tensor<T>> {
        let items: Vec<Tensor<T>> = specs.iter().map(|c| crop(&data[c.scene].images[f(&data[c.scene], c)], c)).collect();
        Tensor::stack(&items)
    };
    Ok(Batch {
        under: pick(&|s, _| s.under_idx)?,
        over: pick(&|s, _| s.over_idx)?,
        aux: pick(&|_, c| c.aux)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub components: LossValues,
    pub total: f64,
}

/// One forward/backward pass and Adam update. Gradients are cleared afterwards.
pub fn train_step<T: Scalar>(
    batch: &Batch<T>,
    params: &mut ModelParams<T>,
    adam: &mut AdamState<T>,
    objective_cfg: &ObjectiveConfig,
) -> Result<(LossValues, f64)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let under = g.constant(&batch.under);
    let over = g.constant(&batch.over);
    let image = g.constant(&batch.aux);
    let illum = networks::illum_estimate(&mut g, &bound, image)?;
    let r_hat = networks::reflectance_extract(&mut g, &bound, under, over)?;
    let glare = networks::glare_estimate(&mut g, &bound, r_hat, illum)?;
    let (refl, _) = networks::reconstruct(&mut g, illum, r_hat, glare)?;
    let inputs = ObjectiveInputs { illum, r_hat, refl, image };
    let (total, terms) = objective(&mut g, &inputs, objective_cfg)?;
    let vars = bound.vars;
    let values = terms.values(&g);
    let total_v = g.item(total).as_f64();
    if !values.all_finite() || !total_v.is_finite() {
        return Err(Error::NonFiniteLoss { step: adam.step, components: format!("{values:?} total={total_v}") });
    }
    g.backward(total)?;
    params.zero_grad();
    params.accumulate_grads(&g, &vars)?;
    adam.step(params.tensors_mut())?;
    params.zero_grad();
    Ok((values, total_v))
}

/// Fresh parameters and optimizer for a config.
pub fn init_state<T: Scalar>(cfg: &TrainConfig) -> Result<Checkpoint<T>> {
    let params = ModelParams::init(cfg.arch.clone(), cfg.seed)?;
    let adam = AdamState::new(params.tensors(), cfg.lr0, cfg.adam);
    Ok(Checkpoint { params, adam: Some(adam), epoch: 0 })
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
    /// Keep one checkpoint per epoch instead of only the latest.
    pub keep_all: bool,
}

pub struct TrainOutcome<T> {
    pub checkpoint: Checkpoint<T>,
    pub history: Vec<StepReport>,
    /// Manifest of the last written checkpoint, if any.
    pub checkpoint_path: Option<PathBuf>,
}

/// Runs the remaining epochs of `start` (or a fresh state) over `data`.
pub fn train_loop<T: Scalar>(
    data: &[ExposureSequence],
    cfg: &TrainConfig,
    start: Option<Checkpoint<T>>,
    out: &TrainOutput,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    for seq in data {
        seq.validate()?;
    }
    let mut state = match start {
        Some(c) => {
            if *c.params.arch() != cfg.arch {
                return Err(Error::CorruptCheckpoint(format!(
                    "checkpoint architecture {} differs from requested {}",
                    serde_json::to_string(c.params.arch())?,
                    serde_json::to_string(&cfg.arch)?
                )));
            }
            c
        }
        None => init_state(cfg)?,
    };
    let mut adam = state
        .adam
        .take()
        .unwrap_or_else(|| AdamState::new(state.params.tensors(), cfg.lr0, cfg.adam));

    let mut log = match &out.dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::options().create(true).append(true).open(dir.join("train_log.jsonl"))?))
        }
        None => None,
    };
    let mut history = Vec::new();
    let mut checkpoint_path = None;
    for epoch in state.epoch..cfg.epochs {
        adam.lr = cfg.lr(epoch);
        for specs in epoch_plan(data, cfg, epoch)? {
            let batch = assemble_batch::<T>(data, &specs)?;
            let (components, total) = train_step(&batch, &mut state.params, &mut adam, &cfg.objective)?;
            let report = StepReport { epoch, step: adam.step, lr: adam.lr, components, total };
            if let Some(w) = log.as_mut() {
                serde_json::to_writer(&mut *w, &report)?;
                w.write_all(b"\n")?;
            }
            history.push(report);
        }
        log::info!(
            "epoch {} lr {:.3e} loss {:.5}",
            epoch,
            adam.lr,
            history.last().map_or(f64::NAN, |r| r.total)
        );
        state.epoch = epoch + 1;
        if let Some(dir) = &out.dir {
            if let Some(w) = log.as_mut() {
                w.flush()?;
            }
            let name = if out.keep_all { format!("epoch_{:03}.json", epoch + 1) } else { "last.json".into() };
            let path = dir.join(name);
            let snapshot = Checkpoint { params: state.params.clone(), adam: Some(adam.clone()), epoch: state.epoch };
            snapshot.save(&path)?;
            checkpoint_path = Some(path);
        }
    }
    state.adam = Some(adam);
    Ok(TrainOutcome { checkpoint: state, history, checkpoint_path })
}
