//! Scores a trained model against synthetic ground truth.

use serde::{Deserialize, Serialize};

use crate::data_io::ExposureSequence;
use crate::error::{Error, Result};
use crate::networks::ModelParams;
use crate::pipeline::{decompose, reconstruct_frame};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor of the illumination in the naive `I_o / L_o` reflectance.
pub const NAIVE_EPS: f64 = 1e-3;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub scene_id: String,
    /// `mean|R̂ − R_true|`
    pub mae_r_hat: f64,
    /// `mean|I_o / max(L_o, ε) − R_true|`
    pub mae_naive: f64,
    /// `mean max(0, L_j·R̂ − I_j)` over every frame
    pub suppression: f64,
    /// `mean|Î_j − I_j|` over every frame
    pub recon_mae: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub scenes: Vec<SceneReport>,
    pub mae_r_hat: f64,
    pub mae_naive: f64,
    pub suppression: f64,
    pub recon_mae: f64,
}

fn mean_abs_diff<T: Scalar>(a: &[T], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x.as_f64() - y as f64).abs()).sum::<f64>() / a.len() as f64
}

fn cast_in<T: Scalar>(t: &Tensor<f32>) -> Tensor<T> {
    t.cast()
}

pub fn evaluate_oracle<T: Scalar>(params: &ModelParams<T>, scenes: &[ExposureSequence]) -> Result<OracleReport> {
    if scenes.is_empty() {
        return Err(Error::config("no scenes to evaluate"));
    }
    let mut report = OracleReport::default();
    for seq in scenes {
        let oracle = seq
            .oracle
            .as_ref()
            .ok_or_else(|| Error::config(format!("scene {} has no oracle", seq.scene_id)))?;
        let r_true = oracle.reflectance.data();
        let dec = decompose(&cast_in::<T>(seq.under()), &cast_in::<T>(seq.over()), params)?;
        let hw = seq.height() * seq.width();

        let over = seq.over().data();
        let l_o = dec.l_o.data();
        let naive: f64 = (0..over.len())
            .map(|i| (over[i] as f64 / l_o[i % hw].as_f64().max(NAIVE_EPS) - r_true[i] as f64).abs())
            .sum::<f64>()
            / over.len() as f64;

        let (mut supp, mut recon) = (0.0, 0.0);
        for img in &seq.images {
            let (l, i_hat) = reconstruct_frame(&cast_in::<T>(img), &dec.r_hat, params)?;
            let (l, r, d) = (l.data(), dec.r_hat.data(), img.data());
            supp += (0..d.len())
                .map(|i| (l[i % hw].as_f64() * r[i].as_f64() - d[i] as f64).max(0.0))
                .sum::<f64>()
                / d.len() as f64;
            recon += mean_abs_diff(i_hat.data(), d);
        }
        let frames = seq.images.len() as f64;
        report.scenes.push(SceneReport {
            scene_id: seq.scene_id.clone(),
            mae_r_hat: mean_abs_diff(dec.r_hat.data(), r_true),
            mae_naive: naive,
            suppression: supp / frames,
            recon_mae: recon / frames,
        });
    }
    let n = report.scenes.len() as f64;
    report.mae_r_hat = report.scenes.iter().map(|s| s.mae_r_hat).sum::<f64>() / n;
    report.mae_naive = report.scenes.iter().map(|s| s.mae_naive).sum::<f64>() / n;
    report.suppression = report.scenes.iter().map(|s| s.suppression).sum::<f64>() / n;
    report.recon_mae = report.scenes.iter().map(|s| s.recon_mae).sum::<f64>() / n;
    Ok(report)
}
