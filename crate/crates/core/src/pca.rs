// SPDX-License-Identifier: MIT OR Apache-2.0

//! Principal components by power iteration with deflation.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Change in direction below which iteration stops.
pub const CONVERGENCE_TOL: f64 = 1e-9;
pub const MAX_ITERATIONS: usize = 10_000;
const INIT_SEED: u64 = 0x5043_415f_494e_4954;

#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalComponent {
    /// Unit vector; the entry of largest magnitude is positive.
    pub vector: Array1<f64>,
    pub variance: f64,
    pub explained_variance_ratio: f64,
    pub iterations: usize,
}

/// Sample covariance of mean-centered rows (divides by `n - 1`).
pub fn covariance(samples: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let n = samples.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("pca needs at least 2 samples, got {n}")));
    }
    let mean = samples.mean_axis(Axis(0)).expect("non-empty");
    let centered = &samples - &mean;
    Ok(centered.t().dot(&centered) / (n as f64 - 1.0))
}

/// Top-`k` principal components of `samples` (rows are observations).
///
/// Deterministic: the start vectors come from a fixed seed and every
/// component is re-orthogonalized against the earlier ones each step.
pub fn pca(samples: ArrayView2<'_, f64>, k: usize) -> Result<Vec<PrincipalComponent>> {
    let d = samples.ncols();
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!("pca k = {k} must be in 1..={d}")));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("pca samples".into()));
    }
    let mut cov = covariance(samples)?;
    let trace: f64 = cov.diag().sum();
    let scale = cov.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if trace <= 0.0 || trace <= f64::EPSILON * scale * d as f64 {
        return Err(Error::ZeroVariance);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(INIT_SEED);
    let mut found: Vec<PrincipalComponent> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v: Array1<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        orthogonalize(&mut v, &found);
        normalize(&mut v);
        let mut iterations = 0;
        while iterations < MAX_ITERATIONS {
            iterations += 1;
            let mut next = cov.dot(&v);
            orthogonalize(&mut next, &found);
            let norm = next.dot(&next).sqrt();
            if norm <= trace * 1e-15 {
                // Remaining variance is zero: any orthogonal unit vector will do.
                break;
            }
            next /= norm;
            // Compare up to sign.
            let delta = (&next - &v).dot(&(&next - &v)).sqrt().min((&next + &v).dot(&(&next + &v)).sqrt());
            v = next;
            if delta < CONVERGENCE_TOL {
                break;
            }
        }
        let lambda = v.dot(&cov.dot(&v)).max(0.0);
        orient(&mut v);
        // Deflate so later components never see this one.
        let outer = v.view().insert_axis(Axis(1)).dot(&v.view().insert_axis(Axis(0)));
        cov.scaled_add(-lambda, &outer);
        found.push(PrincipalComponent {
            vector: v,
            variance: lambda,
            explained_variance_ratio: (lambda / trace).clamp(0.0, 1.0),
            iterations,
        });
    }
    Ok(found)
}

fn orthogonalize(v: &mut Array1<f64>, basis: &[PrincipalComponent]) {
    // Two passes keep the residual orthogonal to double precision.
    for _ in 0..2 {
        for pc in basis {
            let c = v.dot(&pc.vector);
            v.scaled_add(-c, &pc.vector);
        }
    }
}

fn normalize(v: &mut Array1<f64>) {
    let n = v.dot(v).sqrt();
    if n > 0.0 {
        *v /= n;
    }
}

fn orient(v: &mut Array1<f64>) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.mapv_inplace(|x| -x);
    }
}

/// Cosine similarity; zero if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
