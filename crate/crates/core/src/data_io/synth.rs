//! Procedural scenes with known reflectance, illumination and glare.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ExposureSequence, Oracle};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const R_LO: f32 = 0.05;
const R_HI: f32 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Frames per sequence.
    pub frames: usize,
    pub seed: u64,
    pub octaves: usize,
    /// Lattice spacing of the coarsest octave in pixels; 0 picks a third of the scene.
    pub cell: usize,
    /// Amplitude ratio between successive noise octaves.
    pub persistence: f64,
    /// Exposure scalars of the darkest and brightest frame.
    pub gamut: [f64; 2],
    pub glare_threshold: f64,
    pub glare_strength: f64,
    pub glare_radius: usize,
    /// Rectangles pasted over the noise to create hard edges.
    pub edge_shapes: usize,
    /// Range of the illumination ramp before exposure scaling.
    pub ramp: [f64; 2],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 96,
            width: 96,
            frames: 4,
            seed: 0,
            octaves: 4,
            cell: 0,
            persistence: 0.5,
            gamut: [0.25, 1.4],
            glare_threshold: 0.6,
            glare_strength: 0.5,
            glare_radius: 3,
            edge_shapes: 6,
            ramp: [0.6, 1.0],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.gamut;
        if !(0.0 < lo && lo < hi && hi <= 1.5) {
            return Err(Error::config(format!("gamut must satisfy 0 < lo < hi <= 1.5, got [{lo}, {hi}]")));
        }
        if self.frames < 2 {
            return Err(Error::config("frames must be at least 2"));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::config("scene must be at least 2x2"));
        }
        let [rlo, rhi] = self.ramp;
        if !(0.0 < rlo && rlo <= rhi) {
            return Err(Error::config(format!("ramp must satisfy 0 < lo <= hi, got [{rlo}, {rhi}]")));
        }
        if !(self.persistence > 0.0) {
            return Err(Error::config("persistence must be positive"));
        }
        if self.octaves == 0 {
            return Err(Error::config("octaves must be positive"));
        }
        if !(self.glare_threshold > 0.0) || !(self.glare_strength >= 0.0) {
            return Err(Error::config("glare threshold must be > 0 and strength >= 0"));
        }
        Ok(())
    }

    /// Exposure scalar of frame `j`, geometric between the gamut ends.
    pub fn exposure(&self, j: usize) -> f64 {
        let [lo, hi] = self.gamut;
        lo * (hi / lo).powf(j as f64 / (self.frames - 1) as f64)
    }
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise in roughly [0, 1].
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cfg: &SynthConfig) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    let mut cell = if cfg.cell == 0 { (h.max(w) as f32 / 3.0).max(2.0) } else { cfg.cell as f32 };
    let persistence = cfg.persistence as f32;
    let mut amp = 1.0f32;
    let mut total = 0.0f32;
    for _ in 0..cfg.octaves {
        let gh = (h as f32 / cell).ceil() as usize + 2;
        let gw = (w as f32 / cell).ceil() as usize + 2;
        let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.gen::<f32>()).collect();
        for y in 0..h {
            let fy = y as f32 / cell;
            let (y0, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
            for x in 0..w {
                let fx = x as f32 / cell;
                let (x0, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
                let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
                let top = at(y0, x0) + (at(y0, x0 + 1) - at(y0, x0)) * tx;
                let bot = at(y0 + 1, x0) + (at(y0 + 1, x0 + 1) - at(y0 + 1, x0)) * tx;
                out[y * w + x] += amp * (top + (bot - top) * ty);
            }
        }
        total += amp;
        amp *= persistence;
        cell = (cell * 0.5).max(1.0);
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn reflectance(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Tensor<f32> {
    let (h, w) = (cfg.height, cfg.width);
    let hw = h * w;
    let mut data = Vec::with_capacity(3 * hw);
    for _ in 0..3 {
        data.extend(value_noise(rng, h, w, cfg));
    }
    for _ in 0..cfg.edge_shapes {
        let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (y1, x1) = ((y0 + rng.gen_range(h / 8..=h / 2 + 1)).min(h), (x0 + rng.gen_range(w / 8..=w / 2 + 1)).min(w));
        let color: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        for (c, &col) in color.iter().enumerate() {
            for y in y0..y1 {
                for x in x0..x1 {
                    let v = &mut data[c * hw + y * w + x];
                    *v = 0.3 * *v + 0.7 * col;
                }
            }
        }
    }
    let (lo, hi) = data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(f32::EPSILON);
    for v in &mut data {
        *v = (R_LO + (R_HI - R_LO) * (*v - lo) / span).clamp(R_LO, R_HI);
    }
    Tensor::new(vec![3, h, w], data).expect("sized above")
}

/// Smooth planar ramp spanning `ramp` along a random direction.
fn illumination_base(rng: &mut ChaCha8Rng, h: usize, w: usize, ramp: [f64; 2]) -> Vec<f32> {
    let theta = rng.gen::<f32>() * std::f32::consts::TAU;
    let (dy, dx) = (theta.sin(), theta.cos());
    let proj: Vec<f32> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f32 / (h - 1) as f32, (i % w) as f32 / (w - 1) as f32);
            y * dy + x * dx
        })
        .collect();
    let (lo, hi) = proj.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(f32::EPSILON);
    let (a, b) = (ramp[0] as f32, (ramp[1] - ramp[0]) as f32);
    proj.iter().map(|&v| a + b * (v - lo) / span).collect()
}

fn box_blur(src: &[f32], h: usize, w: usize, r: usize) -> Vec<f32> {
    if r == 0 {
        return src.to_vec();
    }
    let r = r as isize;
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for d in -r..=r {
                    let (yy, xx) = if horizontal {
                        (y as isize, (x as isize + d).clamp(0, w as isize - 1))
                    } else {
                        ((y as isize + d).clamp(0, h as isize - 1), x as isize)
                    };
                    acc += src[yy as usize * w + xx as usize];
                }
                out[y * w + x] = acc / (2 * r + 1) as f32;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Glare for one frame: blurred excess over the threshold, zero wherever the
/// pre-glare luminance stays at or below it.
fn glare(l: &[f32], r: &Tensor<f32>, cfg: &SynthConfig) -> Tensor<f32> {
    let (h, w) = (cfg.height, cfg.width);
    let hw = h * w;
    let rd = r.data();
    let t = cfg.glare_threshold as f32;
    let x: Vec<f32> = (0..hw).map(|p| l[p] * (rd[p] + rd[hw + p] + rd[2 * hw + p]) / 3.0).collect();
    let excess: Vec<f32> = x.iter().map(|&v| (v - t).max(0.0)).collect();
    let blurred = box_blur(&excess, h, w, cfg.glare_radius);
    let s = cfg.glare_strength as f32;
    let g: Vec<f32> = (0..hw).map(|p| if x[p] > t { s * blurred[p] } else { 0.0 }).collect();
    Tensor::new(vec![3, h, w], g.repeat(3)).expect("sized above")
}

/// Generates a seeded sequence together with its ground-truth components.
pub fn synth_sequence(cfg: &SynthConfig) -> Result<ExposureSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (cfg.height, cfg.width);
    let hw = h * w;
    let r = reflectance(&mut rng, cfg);
    let base = illumination_base(&mut rng, h, w, cfg.ramp);

    let mut images = Vec::with_capacity(cfg.frames);
    let mut illum = Vec::with_capacity(cfg.frames);
    let mut glares = Vec::with_capacity(cfg.frames);
    for j in 0..cfg.frames {
        let e = cfg.exposure(j) as f32;
        let l: Vec<f32> = base.iter().map(|&b| e * b).collect();
        let g = glare(&l, &r, cfg);
        let img: Vec<f32> = (0..3 * hw)
            .map(|i| (l[i % hw] * (r.data()[i] + g.data()[i])).clamp(0.0, 1.0))
            .collect();
        images.push(Tensor::new(vec![3, h, w], img)?);
        illum.push(Tensor::new(vec![1, h, w], l)?);
        glares.push(g);
    }
    let oracle = Oracle { reflectance: r, illum, glare: glares };
    ExposureSequence::new(format!("synth_{:06}", cfg.seed), images, 0, cfg.frames - 1, Some(oracle))
}

/// `count` scenes with seeds `cfg.seed, cfg.seed + 1, ...`.
pub fn synth_dataset(cfg: &SynthConfig, count: usize) -> Result<Vec<ExposureSequence>> {
    (0..count as u64)
        .map(|i| synth_sequence(&SynthConfig { seed: cfg.seed + i, ..cfg.clone() }))
        .collect()
}
