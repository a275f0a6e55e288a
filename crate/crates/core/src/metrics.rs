//! Fusion quality metrics between a fused image `F` and its sources `A`, `B`.
//!
//! Inputs are `C×H×W` maps in [0, 1]. Structural and histogram metrics work
//! on the unweighted channel mean; histograms use the levels `⌊255·v⌋`.
//! `Q_ncie` re-bins those levels by rank into 256 equal-frequency bins.

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const BINS: usize = 256;

/// Per-source values `(F vs A, F vs B)` beside the aggregate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerSource {
    pub a: f64,
    pub b: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub nmi: f64,
    pub q_ncie: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub cc: f64,
    pub nmi_sources: PerSource,
    pub ssim_sources: PerSource,
    pub psnr_sources: PerSource,
    pub cc_sources: PerSource,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "nmi,q_ncie,ssim,psnr,cc";

    pub fn csv_fields(&self) -> String {
        format!("{:.6},{:.6},{:.6},{:.6},{:.6}", self.nmi, self.q_ncie, self.ssim, self.psnr, self.cc)
    }

    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let n = reports.len().max(1) as f64;
        let avg = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let avg_src = |f: &dyn Fn(&MetricReport) -> PerSource| PerSource {
            a: reports.iter().map(|r| f(r).a).sum::<f64>() / n,
            b: reports.iter().map(|r| f(r).b).sum::<f64>() / n,
        };
        MetricReport {
            nmi: avg(&|r| r.nmi),
            q_ncie: avg(&|r| r.q_ncie),
            ssim: avg(&|r| r.ssim),
            psnr: avg(&|r| r.psnr),
            cc: avg(&|r| r.cc),
            nmi_sources: avg_src(&|r| r.nmi_sources),
            ssim_sources: avg_src(&|r| r.ssim_sources),
            psnr_sources: avg_src(&|r| r.psnr_sources),
            cc_sources: avg_src(&|r| r.cc_sources),
        }
    }
}

fn same_shape<T: Scalar>(f: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if f.shape() != a.shape() || f.shape() != b.shape() {
        return Err(Error::shape(format!(
            "metric inputs differ in shape: {:?}, {:?}, {:?}",
            f.shape(),
            a.shape(),
            b.shape()
        )));
    }
    if f.is_empty() {
        return Err(Error::shape("metric inputs are empty"));
    }
    Ok(())
}

/// Channel-mean luminance of a `C×H×W` map, with its height and width.
pub fn gray<T: Scalar>(img: &Tensor<T>) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = img.dims3()?;
    let hw = h * w;
    let d = img.data();
    let g = (0..hw).map(|p| (0..c).map(|k| d[k * hw + p].as_f64()).sum::<f64>() / c as f64).collect();
    Ok((g, h, w))
}

/// 8-bit levels `⌊255·v⌋`, clamped.
pub fn levels(gray: &[f64]) -> Vec<u8> {
    gray.iter().map(|&v| (255.0 * v).floor().clamp(0.0, 255.0) as u8).collect()
}

fn psnr_pair(x: &[f64], y: &[f64]) -> f64 {
    let mse = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

fn as_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

/// Mean of `PSNR(F, A)` and `PSNR(F, B)` with peak 1, capped at 100 dB.
pub fn psnr<T: Scalar>(f: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<PerSource> {
    same_shape(f, a, b)?;
    let (f, a, b) = (as_f64(f), as_f64(a), as_f64(b));
    Ok(PerSource { a: psnr_pair(&f, &a), b: psnr_pair(&f, &b) })
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) || constant(y) || sxx == 0.0 || syy == 0.0 {
        log::warn!("correlation with a constant image is undefined; reporting 0");
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Pearson correlation of the luminance of `F` with each source.
pub fn cc<T: Scalar>(f: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<PerSource> {
    same_shape(f, a, b)?;
    let (f, a, b) = (gray(f)?.0, gray(a)?.0, gray(b)?.0);
    Ok(PerSource { a: pearson(&f, &a), b: pearson(&f, &b) })
}

fn entropy(counts: &[u64], total: f64, base: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum::<f64>()
        / base.ln()
}

/// Marginal and joint entropies `(H(x), H(y), H(x, y))` of two level maps.
pub fn entropies(x: &[u8], y: &[u8], base: f64) -> (f64, f64, f64) {
    let mut hx = [0u64; BINS];
    let mut hy = [0u64; BINS];
    let mut joint = vec![0u64; BINS * BINS];
    for (&a, &b) in x.iter().zip(y) {
        hx[a as usize] += 1;
        hy[b as usize] += 1;
        joint[a as usize * BINS + b as usize] += 1;
    }
    let n = x.len() as f64;
    (entropy(&hx, n, base), entropy(&hy, n, base), entropy(&joint, n, base))
}

fn nmi_term(f: &[u8], s: &[u8]) -> f64 {
    let (hf, hs, hj) = entropies(f, s, 2.0);
    let denom = hf + hs;
    if denom == 0.0 {
        return 0.0;
    }
    (hf + hs - hj) / denom
}

/// `2·MI(F,A)/(H(F)+H(A))` and likewise for B; the aggregate is their sum.
pub fn nmi<T: Scalar>(f: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<PerSource> {
    same_shape(f, a, b)?;
    let (f, a, b) = (levels(&gray(f)?.0), levels(&gray(a)?.0), levels(&gray(b)?.0));
    Ok(PerSource { a: 2.0 * nmi_term(&f, &a), b: 2.0 * nmi_term(&f, &b) })
}

/// Equal-frequency bins: pixels sorted by level (ties by position) and cut
/// into 256 rank groups, so every marginal is uniform.
pub fn rank_bins(lv: &[u8]) -> Vec<u8> {
    let n = lv.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| lv[i]);
    let mut out = vec![0u8; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = (rank * BINS / n) as u8;
    }
    out
}

fn ncc(x: &[u8], y: &[u8]) -> f64 {
    let (hx, hy, hj) = entropies(x, y, BINS as f64);
    hx + hy - hj
}

/// Nonlinear correlation information entropy of `{A, B, F}`.
pub fn q_ncie<T: Scalar>(f: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(f, a, b)?;
    let ranked = |t: &Tensor<T>| -> Result<Vec<u8>> { Ok(rank_bins(&levels(&gray(t)?.0))) };
    let (f, a, b) = (ranked(f)?, ranked(a)?, ranked(b)?);
    let (ab, af, bf) = (ncc(&a, &b), ncc(&a, &f), ncc(&b, &f));
    let m = Matrix3::new(1.0, ab, af, ab, 1.0, bf, af, bf, 1.0);
    let eig = SymmetricEigen::new(m).eigenvalues;
    let sum: f64 = eig.iter().sum();
    if (sum - 3.0).abs() > 1e-9 {
        return Err(Error::Numerical(format!("correlation eigenvalues sum to {sum}, expected 3")));
    }
    let log_b = (BINS as f64).ln();
    let h: f64 = eig
        .iter()
        .map(|&l| l.max(0.0) / 3.0)
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln() / log_b)
        .sum();
    Ok((1.0 + h).clamp(0.0, 1.0))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-mode separable Gaussian filter.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..SSIM_WINDOW).map(|i| k[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

/// Single-scale SSIM of two luminance maps.
pub fn ssim_gray(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let k = gaussian_kernel();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mx = filter_valid(x, h, w, &k);
    let my = filter_valid(y, h, w, &k);
    let sxx = filter_valid(&prod(x, x), h, w, &k);
    let syy = filter_valid(&prod(y, y), h, w, &k);
    let sxy = filter_valid(&prod(x, y), h, w, &k);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

pub fn ssim<T: Scalar>(f: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<PerSource> {
    same_shape(f, a, b)?;
    let (fg, h, w) = gray(f)?;
    Ok(PerSource { a: ssim_gray(&fg, &gray(a)?.0, h, w)?, b: ssim_gray(&fg, &gray(b)?.0, h, w)? })
}

/// Every metric for one fused image.
pub fn evaluate<T: Scalar>(f: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<MetricReport> {
    let nmi_s = nmi(f, a, b)?;
    let ssim_s = ssim(f, a, b)?;
    let psnr_s = psnr(f, a, b)?;
    let cc_s = cc(f, a, b)?;
    Ok(MetricReport {
        nmi: nmi_s.a + nmi_s.b,
        q_ncie: q_ncie(f, a, b)?,
        ssim: 0.5 * (ssim_s.a + ssim_s.b),
        psnr: 0.5 * (psnr_s.a + psnr_s.b),
        cc: 0.5 * (cc_s.a + cc_s.b),
        nmi_sources: nmi_s,
        ssim_sources: ssim_s,
        psnr_sources: psnr_s,
        cc_sources: cc_s,
    })
}

#[cfg(test)]
mod tests;
