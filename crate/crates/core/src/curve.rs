//! Controllable exposure fusion curve `f(x; k) = kx / (kx + (1−k)(1−x))`.
//!
//! The curve is evaluated in `f64` regardless of the map's storage type, so
//! a fused map and the exposure reported for it always come from the same
//! arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_K: f64 = 0.5;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 100;

/// `f(x; k)` without domain checks.
///
/// Corners follow continuity in `x`: `f(0; k) = 0` and `f(1; k) = 1` for
/// every `k`, which fixes the two 0/0 points `(x, k) = (0, 1)` and `(1, 0)`.
/// `k = 0.5` is the identity exactly.
#[inline]
pub fn curve_unchecked(x: f64, k: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else if k == 0.5 {
        x
    } else {
        let a = k * x;
        a / (a + (1.0 - k) * (1.0 - x))
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {v} outside [0, 1]")))
    }
}

/// `f(x; k)` for `x, k ∈ [0, 1]`.
pub fn curve_eval(x: f64, k: f64) -> Result<f64> {
    check_unit("x", x)?;
    check_unit("k", k)?;
    Ok(curve_unchecked(x, k))
}

/// Elementwise `f(·; k)` over a map with values in `[0, 1]`.
pub fn curve_map<T: Scalar>(map: &Tensor<T>, k: f64) -> Result<Tensor<T>> {
    check_unit("k", k)?;
    if let Some(bad) = map.data().iter().find(|v| !(T::zero()..=T::one()).contains(*v)) {
        return Err(Error::Domain(format!("map value {bad} outside [0, 1]")));
    }
    Ok(map.map(|v| T::of(curve_unchecked(v.as_f64(), k))))
}

fn midpoint_map<T: Scalar>(under: &Tensor<T>, over: &Tensor<T>) -> Result<Tensor<T>> {
    if under.shape() != over.shape() {
        return Err(Error::shape(format!(
            "illumination maps differ in shape: {:?} vs {:?}",
            under.shape(),
            over.shape()
        )));
    }
    if under.is_empty() {
        return Err(Error::shape("empty illumination map"));
    }
    let half = T::of(0.5);
    let data = under.data().iter().zip(over.data()).map(|(&a, &b)| (a + b) * half).collect();
    Tensor::new(under.shape().to_vec(), data)
}

/// `L̂ = f((L_u + L_o)/2; k)`; with `k = 0.5` this is the plain average.
pub fn fuse_illumination<T: Scalar>(under: &Tensor<T>, over: &Tensor<T>, k: f64) -> Result<Tensor<T>> {
    curve_map(&midpoint_map(under, over)?, k)
}

/// Mean of all elements.
pub fn exposure_of<T: Scalar>(map: &Tensor<T>) -> Result<f64> {
    if map.is_empty() {
        return Err(Error::shape("exposure of an empty map"));
    }
    Ok(map.data().iter().map(|v| v.as_f64()).sum::<f64>() / map.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    DirectK { k: f64 },
    TargetExposure { exposure: f64 },
}

/// Either a curve parameter or an exposure level to invert for one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionRequest {
    pub mode: FusionMode,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FusionRequest {
    fn default() -> Self {
        FusionRequest::direct(DEFAULT_K)
    }
}

impl FusionRequest {
    pub fn direct(k: f64) -> Self {
        FusionRequest { mode: FusionMode::DirectK { k }, tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER }
    }

    pub fn target(exposure: f64) -> Self {
        FusionRequest { mode: FusionMode::TargetExposure { exposure }, tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::config(format!("tolerance must be positive, got {}", self.tol)));
        }
        match self.mode {
            FusionMode::DirectK { k } => check_unit("k", k),
            FusionMode::TargetExposure { exposure } if exposure > 0.0 && exposure < 1.0 => Ok(()),
            FusionMode::TargetExposure { exposure } => {
                Err(Error::Domain(format!("target exposure {exposure} outside (0, 1)")))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KSolution {
    pub k: f64,
    pub achieved: f64,
    pub iterations: usize,
}

/// Exposure reachable by `f(m; k)` as `k` runs over `[0, 1]`.
pub fn achievable_range<T: Scalar>(under: &Tensor<T>, over: &Tensor<T>) -> Result<(f64, f64)> {
    let m = midpoint_map(under, over)?;
    Ok((mean_curve(&m, 0.0), mean_curve(&m, 1.0)))
}

fn mean_curve<T: Scalar>(m: &Tensor<T>, k: f64) -> f64 {
    // Round through T exactly as `curve_map` does, so the solved k reproduces
    // the exposure of the map that is actually built.
    let s: f64 = m.data().iter().map(|v| T::of(curve_unchecked(v.as_f64(), k)).as_f64()).sum();
    s / m.len() as f64
}

/// Bisection for `k` with `|mean(f(m; k)) − target| ≤ tol`, `m = (L_u + L_o)/2`.
///
/// The mean is strictly increasing in `k` whenever some `m` lies in (0, 1).
pub fn solve_k<T: Scalar>(
    under: &Tensor<T>,
    over: &Tensor<T>,
    target: f64,
    tol: f64,
    max_iter: usize,
) -> Result<KSolution> {
    if !(tol > 0.0) {
        return Err(Error::config(format!("tolerance must be positive, got {tol}")));
    }
    let m = midpoint_map(under, over)?;
    if let Some(bad) = m.data().iter().find(|v| !(T::zero()..=T::one()).contains(*v)) {
        return Err(Error::Domain(format!("illumination value {bad} outside [0, 1]")));
    }
    let (min, max) = (mean_curve(&m, 0.0), mean_curve(&m, 1.0));
    if !(target > min && target < max) {
        return Err(Error::Range { target, min, max });
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for it in 1..=max_iter {
        let mid = 0.5 * (lo + hi);
        let e = mean_curve(&m, mid);
        if (e - target).abs() <= tol {
            return Ok(KSolution { k: mid, achieved: e, iterations: it });
        }
        if e < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Numerical(format!(
        "k bisection did not reach tolerance {tol} for target {target} in {max_iter} iterations"
    )))
}

/// The fused illumination for a request and the `k` used.
pub fn resolve_request<T: Scalar>(under: &Tensor<T>, over: &Tensor<T>, req: &FusionRequest) -> Result<(Tensor<T>, f64)> {
    req.validate()?;
    let k = match req.mode {
        FusionMode::DirectK { k } => k,
        FusionMode::TargetExposure { exposure } => solve_k(under, over, exposure, req.tol, req.max_iter)?.k,
    };
    Ok((fuse_illumination(under, over, k)?, k))
}

/// Rows `(x, k, f(x; k))` for `samples` evenly spaced `x` in `[0, 1]` and each `k`.
pub fn curve_table(samples: usize, ks: &[f64]) -> Result<Vec<(f64, f64, f64)>> {
    if samples < 2 {
        return Err(Error::config("curve table needs at least 2 samples"));
    }
    let mut rows = Vec::with_capacity(samples * ks.len());
    for &k in ks {
        for i in 0..samples {
            let x = i as f64 / (samples - 1) as f64;
            rows.push((x, k, curve_eval(x, k)?));
        }
    }
    Ok(rows)
}
