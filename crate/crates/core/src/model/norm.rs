// SPDX-License-Identifier: MIT OR Apache-2.0

use super::NormOffset;
use crate::error::{Error, Result};

/// `sqrt(mean(x^2) + eps)`.
pub fn rms_denominator(x: &[f64], eps: f64) -> f64 {
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    (mean_sq + eps).sqrt()
}

/// RMSNorm: `x / sqrt(mean(x^2) + eps) * gamma_eff`.
pub fn rms_norm(x: &[f64], scale: &[f64], eps: f64, offset: NormOffset) -> Result<Vec<f64>> {
    if x.len() != scale.len() {
        return Err(Error::DimensionMismatch { context: "rms_norm scale".into(), expected: x.len(), got: scale.len() });
    }
    let denom = rms_denominator(x, eps);
    Ok(normalize_with(x, scale, denom, offset))
}

pub(crate) fn normalize_with(x: &[f64], scale: &[f64], denom: f64, offset: NormOffset) -> Vec<f64> {
    x.iter()
        .zip(scale)
        .map(|(v, s)| {
            let g = match offset {
                NormOffset::PlainGamma => *s,
                NormOffset::OnePlusGamma => 1.0 + s,
            };
            v / denom * g
        })
        .collect()
}
