// SPDX-License-Identifier: MIT OR Apache-2.0

//! Power-iteration PCA against a dense symmetric eigendecomposition.

use circuit_lens_core::pca::{covariance, pca};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn eig_oracle(x: &Array2<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let cov = covariance(x.view()).unwrap();
    let d = cov.nrows();
    let m = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let e = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
    let vals = order.iter().map(|&i| e.eigenvalues[i]).collect();
    let vecs = order.iter().map(|&i| e.eigenvectors.column(i).iter().copied().collect()).collect();
    (vals, vecs)
}

fn gaussian_data(seed: u64, n: usize, scales: &[f64]) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Normal::new(0.0, 1.0).unwrap();
    let d = scales.len();
    // a random rotation keeps the principal axes off the coordinate axes
    let raw = DMatrix::from_fn(d, d, |_, _| z.sample(&mut rng));
    let q = raw.qr().q();
    let mut x = Array2::zeros((n, d));
    for r in 0..n {
        let latent: Vec<f64> = scales.iter().map(|s| s * z.sample(&mut rng)).collect();
        for c in 0..d {
            x[[r, c]] = (0..d).map(|k| q[(c, k)] * latent[k]).sum::<f64>() + 3.0;
        }
    }
    x
}

#[test]
fn matches_eigendecomposition() {
    let x = gaussian_data(1, 400, &[5.0, 3.0, 2.0, 1.0, 0.5, 0.2]);
    let pcs = pca(x.view(), 4).unwrap();
    let (vals, vecs) = eig_oracle(&x);
    let trace: f64 = vals.iter().sum();
    for (k, pc) in pcs.iter().enumerate() {
        let dot: f64 = pc.vector.iter().zip(&vecs[k]).map(|(a, b)| a * b).sum();
        assert!(dot.abs() > 1.0 - 1e-7, "component {k}: |dot| {}", dot.abs());
        assert!((pc.variance - vals[k]).abs() < 1e-8 * vals[0], "component {k}");
        assert!((pc.explained_variance_ratio - vals[k] / trace).abs() < 1e-9);
    }
}

#[test]
fn separated_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let z = Normal::new(0.0, 0.1).unwrap();
    let d = 10;
    let u: Vec<f64> = {
        let v: Vec<f64> = (0..d).map(|i| (i as f64 + 1.0).sin()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    };
    let x = Array2::from_shape_fn((60, d), |(r, c)| if r % 2 == 0 { 4.0 } else { -4.0 } * u[c] + z.sample(&mut rng));
    let pc1 = &pca(x.view(), 1).unwrap()[0];
    let cos: f64 = pc1.vector.iter().zip(&u).map(|(a, b)| a * b).sum();
    assert!(cos.abs() >= 0.99);
    let (_, vecs) = eig_oracle(&x);
    let oracle_cos: f64 = vecs[0].iter().zip(&u).map(|(a, b)| a * b).sum();
    assert!((cos.abs() - oracle_cos.abs()).abs() < 1e-9);
}

#[test]
fn deterministic() {
    let x = gaussian_data(2, 50, &[2.0, 1.0, 0.5]);
    assert_eq!(pca(x.view(), 3).unwrap(), pca(x.view(), 3).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn components_orthonormal_and_ratios_ordered(seed in any::<u64>(), n in 3usize..30, d in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Normal::new(0.0, 1.0).unwrap();
        let x = Array2::from_shape_fn((n, d), |_| z.sample(&mut rng));
        let k = d.min(n - 1);
        let pcs = pca(x.view(), k).unwrap();
        for i in 0..k {
            prop_assert!((pcs[i].vector.dot(&pcs[i].vector).sqrt() - 1.0).abs() <= 1e-10);
            for j in 0..i {
                prop_assert!(pcs[i].vector.dot(&pcs[j].vector).abs() <= 1e-8);
            }
        }
        let total: f64 = pcs.iter().map(|p| p.explained_variance_ratio).sum();
        prop_assert!(total <= 1.0 + 1e-9);
        for w in pcs.windows(2) {
            prop_assert!(w[1].explained_variance_ratio <= w[0].explained_variance_ratio + 1e-9);
        }
    }
}
