//! Inference: decompose an under/over pair, then fuse or sweep exposure.

use std::path::Path;

use crate::curve::{self, FusionRequest};
use crate::data_io::{codec, rmef};
use crate::error::{Error, Result};
use crate::networks::{self, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Every component of `I_x = L_x · (R̂ + G_x)` for both inputs, each `C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition<T> {
    pub l_u: Tensor<T>,
    pub l_o: Tensor<T>,
    pub r_hat: Tensor<T>,
    pub r_u: Tensor<T>,
    pub r_o: Tensor<T>,
    pub g_u: Tensor<T>,
    pub g_o: Tensor<T>,
}

fn batched<T: Scalar>(img: &Tensor<T>, what: &str) -> Result<Tensor<T>> {
    match img.shape() {
        [3, _, _] => Ok(img.clone().unsqueeze0()),
        [1, 3, _, _] => Ok(img.clone()),
        s => Err(Error::shape(format!("{what} must be 3xHxW, got {s:?}"))),
    }
}

fn unbatched<T: Scalar>(t: Tensor<T>) -> Tensor<T> {
    let s = t.shape()[1..].to_vec();
    t.reshape(&s).expect("leading batch axis of one")
}

/// Runs the three networks on a co-registered pair.
pub fn decompose<T: Scalar>(under: &Tensor<T>, over: &Tensor<T>, params: &ModelParams<T>) -> Result<Decomposition<T>> {
    let (u, o) = (batched(under, "underexposed image")?, batched(over, "overexposed image")?);
    if u.shape() != o.shape() {
        return Err(Error::shape(format!("under/over sizes differ: {:?} vs {:?}", u.shape(), o.shape())));
    }
    let mut g = Graph::new();
    let m = params.bind(&mut g, false);
    let (iu, io) = (g.constant_owned(u), g.constant_owned(o));
    let l_u = networks::illum_estimate(&mut g, &m, iu)?;
    let l_o = networks::illum_estimate(&mut g, &m, io)?;
    let r_hat = networks::reflectance_extract(&mut g, &m, iu, io)?;
    let g_u = networks::glare_estimate(&mut g, &m, r_hat, l_u)?;
    let g_o = networks::glare_estimate(&mut g, &m, r_hat, l_o)?;
    let r_u = g.add(r_hat, g_u)?;
    let r_o = g.add(r_hat, g_o)?;
    let take = |v| unbatched(g.tensor(v));
    Ok(Decomposition {
        l_u: take(l_u),
        l_o: take(l_o),
        r_hat: take(r_hat),
        r_u: take(r_u),
        r_o: take(r_o),
        g_u: take(g_u),
        g_o: take(g_o),
    })
}

/// Illumination and reconstruction `Î = L·(R̂ + G)` of an arbitrary frame
/// against a shared reflectance.
pub fn reconstruct_frame<T: Scalar>(
    image: &Tensor<T>,
    r_hat: &Tensor<T>,
    params: &ModelParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let m = params.bind(&mut g, false);
    let i = g.constant_owned(batched(image, "image")?);
    let r = g.constant_owned(batched(r_hat, "reflectance")?);
    let l = networks::illum_estimate(&mut g, &m, i)?;
    let glare = networks::glare_estimate(&mut g, &m, r, l)?;
    let (_, i_hat) = networks::reconstruct(&mut g, l, r, glare)?;
    Ok((unbatched(g.tensor(l)), unbatched(g.tensor(i_hat))))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fused<T> {
    /// `L̂ · R̂` before clamping.
    pub raw: Tensor<T>,
    /// `raw` clamped to [0, 1].
    pub image: Tensor<T>,
    pub illum: Tensor<T>,
    pub k: f64,
    /// `mean(L̂)`.
    pub exposure: f64,
}

fn modulate<T: Scalar>(illum: &Tensor<T>, r_hat: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = r_hat.dims3()?;
    if illum.shape() != [1, h, w] {
        return Err(Error::shape(format!("illumination {:?} does not match reflectance {:?}", illum.shape(), r_hat.shape())));
    }
    let hw = h * w;
    let l = illum.data();
    let data = r_hat.data().iter().enumerate().map(|(i, &r)| l[i % hw] * r).collect();
    Tensor::new(vec![c, h, w], data)
}

/// `I_f = L̂ · R̂` with `L̂` remapped by the requested curve.
pub fn fuse<T: Scalar>(dec: &Decomposition<T>, req: &FusionRequest) -> Result<Fused<T>> {
    let (illum, k) = curve::resolve_request(&dec.l_u, &dec.l_o, req)?;
    let raw = modulate(&illum, &dec.r_hat)?;
    let image = raw.map(|v| v.max(T::zero()).min(T::one()));
    let exposure = curve::exposure_of(&illum)?;
    Ok(Fused { raw, image, illum, k, exposure })
}

/// One fusion per target exposure, in grid order.
pub fn adjust_sweep<T: Scalar>(dec: &Decomposition<T>, grid: &[f64]) -> Result<Vec<Fused<T>>> {
    if grid.is_empty() {
        return Err(Error::config("exposure grid is empty"));
    }
    if let Some(w) = grid.windows(2).find(|w| !(w[1] > w[0])) {
        return Err(Error::config(format!("exposure grid not strictly increasing at {} -> {}", w[0], w[1])));
    }
    let (min, max) = curve::achievable_range(&dec.l_u, &dec.l_o)?;
    if let Some(&target) = grid.iter().find(|&&e| !(e > min && e < max)) {
        return Err(Error::Range { target, min, max });
    }
    grid.iter().map(|&e| fuse(dec, &FusionRequest::target(e))).collect()
}

/// Parses `start:stop:step` into an inclusive grid.
pub fn parse_sweep(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config(format!("sweep '{spec}' is not start:stop:step")))?;
    let [start, stop, step] = parts[..] else {
        return Err(Error::config(format!("sweep '{spec}' is not start:stop:step")));
    };
    if !(step > 0.0) || stop < start {
        return Err(Error::config(format!("sweep '{spec}' needs step > 0 and stop >= start")));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).map(|v| (v * 1e12).round() / 1e12).collect())
}

/// Writes `<name>.rmef` raw dumps and `<name>.png` min-max previews.
pub fn dump_components<T: Scalar>(dir: &Path, dec: &Decomposition<T>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let items = [
        ("l_u", &dec.l_u),
        ("l_o", &dec.l_o),
        ("r_hat", &dec.r_hat),
        ("r_u", &dec.r_u),
        ("r_o", &dec.r_o),
        ("g_u", &dec.g_u),
        ("g_o", &dec.g_o),
    ];
    for (name, map) in items {
        rmef::write(&dir.join(format!("{name}.rmef")), map)?;
        let preview = codec::normalize_for_preview(&map.cast::<f32>());
        codec::write_image(&dir.join(format!("{name}.png")), &preview)?;
    }
    Ok(())
}
