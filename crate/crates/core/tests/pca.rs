mod common;

use common::{gaussian_matrix, rng};
use introspect_core::reduce::{fit_pca, project, reconstruct};
use introspect_core::Matrix;

fn covariance(x: &Matrix) -> Vec<Vec<f64>> {
    let (n, d) = (x.rows(), x.cols());
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.get(i, j) as f64).sum::<f64>() / n as f64).collect();
    let mut c = vec![vec![0.0; d]; d];
    for row in x.iter_rows() {
        for a in 0..d {
            for b in 0..d {
                c[a][b] += (row[a] as f64 - mean[a]) * (row[b] as f64 - mean[b]);
            }
        }
    }
    c.iter_mut().flatten().for_each(|v| *v /= (n - 1) as f64);
    c
}

/// Cyclic Jacobi eigensolver; returns (values, vectors as rows), sorted descending.
fn jacobi(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = a.len();
    let mut v: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..d).flat_map(|p| (0..d).filter(move |&q| q != p).map(move |q| (p, q))).map(|(p, q)| a[p][q].powi(2)).sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..d).map(|k| v[k][i]).collect()).collect();
    (values, vectors)
}

#[test]
fn matches_jacobi_eigendecomposition() {
    let mut r = rng(21);
    let scales = [4.0, 3.0, 2.2, 1.5, 1.0, 0.6, 0.3, 0.1];
    let x = gaussian_matrix(&mut r, 600, 8, &scales);
    let pca = fit_pca(&x, 5).unwrap();
    let (values, vectors) = jacobi(covariance(&x));
    let total: f64 = values.iter().sum();
    for i in 0..5 {
        let got = pca.explained_variance[i] as f64;
        assert!((got - values[i]).abs() < 1e-4 * values[i], "axis {i}: {got} vs {}", values[i]);
        let ratio = pca.explained_variance_ratio[i] as f64;
        assert!((ratio - values[i] / total).abs() < 1e-5);
        let dot: f64 = pca.components.row(i).iter().zip(&vectors[i]).map(|(&a, b)| a as f64 * b).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-4, "axis {i} alignment {dot}");
    }
}

#[test]
fn isotropic_data_spreads_variance_evenly() {
    let x = gaussian_matrix(&mut rng(22), 40_000, 4, &[1.0; 4]);
    let pca = fit_pca(&x, 4).unwrap();
    for r in &pca.explained_variance_ratio {
        assert!((r - 0.25).abs() < 0.01, "{:?}", pca.explained_variance_ratio);
    }
}

#[test]
fn full_rank_projection_is_an_isometry_and_inverts() {
    let x = gaussian_matrix(&mut rng(23), 200, 6, &[3.0, 1.0, 0.5, 2.0, 0.2, 1.5]);
    let pca = fit_pca(&x, 6).unwrap();
    let y = project(&pca, &x).unwrap();
    for (a, b) in [(0, 1), (5, 77), (120, 199), (3, 3)] {
        let dx: f64 = x.row(a).iter().zip(x.row(b)).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum();
        let dy: f64 = y.row(a).iter().zip(y.row(b)).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum();
        assert!((dx.sqrt() - dy.sqrt()).abs() < 1e-4 * (1.0 + dx.sqrt()));
    }
    let back = reconstruct(&pca, &y).unwrap();
    for (p, q) in back.as_slice().iter().zip(x.as_slice()) {
        assert!((p - q).abs() < 1e-4);
    }
}

#[test]
fn translation_does_not_change_projections() {
    let x = gaussian_matrix(&mut rng(24), 300, 5, &[2.0, 1.0, 0.7, 0.4, 0.1]);
    let shift = [10.0f32, -3.0, 0.5, 7.0, -1.0];
    let shifted = Matrix::from_rows(&x.iter_rows().map(|r| r.iter().zip(&shift).map(|(a, b)| a + b).collect::<Vec<_>>()).collect::<Vec<_>>()).unwrap();
    let (a, b) = (fit_pca(&x, 3).unwrap(), fit_pca(&shifted, 3).unwrap());
    for (p, q) in a.components.as_slice().iter().zip(b.components.as_slice()) {
        assert!((p - q).abs() < 1e-4);
    }
    let (ya, yb) = (project(&a, &x).unwrap(), project(&b, &shifted).unwrap());
    for (p, q) in ya.as_slice().iter().zip(yb.as_slice()) {
        assert!((p - q).abs() < 1e-3);
    }
}

#[test]
fn projected_columns_are_uncorrelated() {
    let x = gaussian_matrix(&mut rng(25), 500, 10, &[5.0, 4.0, 3.0, 2.0, 1.0, 1.0, 0.5, 0.5, 0.2, 0.1]);
    let pca = fit_pca(&x, 4).unwrap();
    let cov = covariance(&project(&pca, &x).unwrap());
    for a in 0..4 {
        for b in 0..4 {
            if a == b {
                assert!((cov[a][a] - pca.explained_variance[a] as f64).abs() < 1e-3 * cov[a][a]);
            } else {
                assert!(cov[a][b].abs() < 1e-3, "cov[{a}][{b}] = {}", cov[a][b]);
            }
        }
    }
}
