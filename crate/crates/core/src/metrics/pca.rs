use crate::error::{invalid, Result};
use crate::lazystrike::FeatureMap;

/// Eigen-decompose a symmetric `n×n` matrix (row-major) by cyclic Jacobi
/// rotations.
///
/// Returns eigenvalues in descending order and the matching unit eigenvectors
/// as rows of an `n×n` matrix.
pub fn jacobi_eigen(matrix: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 || matrix.len() != n * n {
        return Err(invalid(format!("jacobi_eigen needs an {n}x{n} matrix")));
    }
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| (p + 1..n).map(move |q| (p, q)))
            .map(|(p, q)| a[p * n + q] * a[p * n + q])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order.iter().flat_map(|&i| (0..n).map(move |k| (k, i))).map(|(k, i)| v[k * n + i]).collect();
    Ok((values, vectors))
}

/// Principal components of a feature map's patch rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    pub n_components: usize,
    /// `N × n_components` projections of the centred rows.
    pub scores: Vec<f64>,
    /// `n_components × D` unit directions; all-zero beyond the data's rank.
    pub components: Vec<f64>,
    /// Population variance along each component.
    pub explained_variance: Vec<f64>,
    pub explained_ratio: Vec<f64>,
    pub mean: Vec<f64>,
}

impl PcaResult {
    /// Scores of component `c` for every patch.
    pub fn component_scores(&self, c: usize) -> Vec<f64> {
        self.scores.iter().skip(c).step_by(self.n_components).copied().collect()
    }
}

/// Project patch features onto their top principal components.
///
/// The eigenproblem is solved on whichever of the `D×D` covariance or the
/// `N×N` Gram matrix is smaller. Each direction is signed so that its
/// largest-magnitude loading is positive.
pub fn pca_project(x: &FeatureMap, n_components: usize) -> Result<PcaResult> {
    let (n, d) = (x.n_patches(), x.dim());
    if n_components == 0 || n_components > n {
        return Err(invalid(format!("cannot take {n_components} components from {n} patches")));
    }
    let mean = x.mean_pool();
    let centred: Vec<f64> = x.values().chunks(d).flat_map(|r| r.iter().zip(&mean).map(|(v, m)| v - m)).collect();
    let at = |i: usize, j: usize| centred[i * d + j];

    // Candidate directions in feature space with their variances.
    let mut dirs: Vec<(f64, Vec<f64>)> = Vec::new();
    if d <= n {
        let mut cov = vec![0.0; d * d];
        for a in 0..d {
            for b in a..d {
                let s = (0..n).map(|i| at(i, a) * at(i, b)).sum::<f64>() / n as f64;
                cov[a * d + b] = s;
                cov[b * d + a] = s;
            }
        }
        let (vals, vecs) = jacobi_eigen(&cov, d)?;
        for (k, &lambda) in vals.iter().enumerate() {
            dirs.push((lambda, vecs[k * d..(k + 1) * d].to_vec()));
        }
    } else {
        let mut gram = vec![0.0; n * n];
        for a in 0..n {
            for b in a..n {
                let s = (0..d).map(|j| at(a, j) * at(b, j)).sum::<f64>() / n as f64;
                gram[a * n + b] = s;
                gram[b * n + a] = s;
            }
        }
        let (vals, vecs) = jacobi_eigen(&gram, n)?;
        for (k, &lambda) in vals.iter().enumerate() {
            let u = &vecs[k * n..(k + 1) * n];
            let mut dir: Vec<f64> = (0..d).map(|j| (0..n).map(|i| u[i] * at(i, j)).sum()).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                dir.iter_mut().for_each(|v| *v /= norm);
            }
            dirs.push((lambda, dir));
        }
    }

    let total: f64 = dirs.iter().map(|(l, _)| l.max(0.0)).sum();
    let top = dirs.first().map_or(0.0, |(l, _)| *l);
    let rank_tol = 1e-12 * top.max(f64::MIN_POSITIVE);

    let mut components = vec![0.0; n_components * d];
    let mut explained_variance = vec![0.0; n_components];
    for (c, (lambda, dir)) in dirs.into_iter().take(n_components).enumerate() {
        if lambda <= rank_tol {
            continue;
        }
        let pivot = (0..d).fold(0, |best, j| if dir[j].abs() > dir[best].abs() { j } else { best });
        let sign = if dir[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            components[c * d + j] = sign * dir[j];
        }
        explained_variance[c] = lambda;
    }
    let explained_ratio = explained_variance
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    let mut scores = vec![0.0; n * n_components];
    for i in 0..n {
        for c in 0..n_components {
            scores[i * n_components + c] = (0..d).map(|j| at(i, j) * components[c * d + j]).sum();
        }
    }
    Ok(PcaResult { n_components, scores, components, explained_variance, explained_ratio, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_map(n: usize, d: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        FeatureMap::new(n, 1, d, (0..n * d).map(|_| normal.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn jacobi_matches_nalgebra() {
        let x = random_map(6, 6, 1);
        let mut sym = vec![0.0; 36];
        for i in 0..6 {
            for j in 0..6 {
                sym[i * 6 + j] = x.get(i, j) + x.get(j, i);
            }
        }
        let (vals, vecs) = jacobi_eigen(&sym, 6).unwrap();
        let m = nalgebra::DMatrix::from_row_slice(6, 6, &sym);
        let mut oracle: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
        oracle.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in vals.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        // A v = λ v for each returned pair.
        for k in 0..6 {
            let v = &vecs[k * 6..(k + 1) * 6];
            for i in 0..6 {
                let av: f64 = (0..6).map(|j| sym[i * 6 + j] * v[j]).sum();
                assert!((av - vals[k] * v[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rank_one_data() {
        let dir = [0.6, -0.8, 0.0];
        let coeffs = [1.0, -2.0, 0.5, 3.0, 0.0];
        let vals: Vec<f64> = coeffs.iter().flat_map(|c| dir.iter().map(move |v| c * v)).collect();
        let x = FeatureMap::new(5, 1, 3, vals).unwrap();
        let p = pca_project(&x, 3).unwrap();
        // Largest loading (-0.8) is flipped positive.
        for (a, b) in p.components[..3].iter().zip([-0.6, 0.8, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p.explained_ratio[0] - 1.0).abs() < 1e-12);
        assert_eq!(&p.components[3..], &[0.0; 6]);
        assert_eq!(&p.explained_variance[1..], &[0.0, 0.0]);
    }

    #[test]
    fn isotropic_sample_has_balanced_eigenvalues() {
        let x = random_map(1000, 2, 5);
        let p = pca_project(&x, 2).unwrap();
        let ratio = p.explained_variance[1] / p.explained_variance[0];
        assert!(ratio > 0.8, "{ratio}");
    }

    #[test]
    fn translation_invariant() {
        let x = random_map(7, 4, 6);
        let shifted = FeatureMap::new(
            7,
            1,
            4,
            x.values().chunks(4).flat_map(|r| r.iter().zip([3.0, -1.0, 10.0, 0.5]).map(|(a, b)| a + b)).collect(),
        )
        .unwrap();
        let a = pca_project(&x, 3).unwrap();
        let b = pca_project(&shifted, 3).unwrap();
        for (u, v) in a.scores.iter().zip(&b.scores) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn full_reconstruction_both_routes() {
        for (n, d) in [(12, 5), (4, 9)] {
            let x = random_map(n, d, (n * d) as u64);
            let k = n.min(d);
            let p = pca_project(&x, k).unwrap();
            for i in 0..n {
                for j in 0..d {
                    let recon: f64 = p.mean[j] + (0..k).map(|c| p.scores[i * k + c] * p.components[c * d + j]).sum::<f64>();
                    assert!((recon - x.get(i, j)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn gram_and_covariance_routes_agree() {
        // Same data, once as 6 patches of width 4 (covariance) and its
        // variance spectrum checked against a wide copy padded with zero channels (Gram).
        let x = random_map(6, 4, 8);
        let wide_vals: Vec<f64> = x.values().chunks(4).flat_map(|r| r.iter().copied().chain([0.0; 6])).collect();
        let wide = FeatureMap::new(6, 1, 10, wide_vals).unwrap();
        let a = pca_project(&x, 3).unwrap();
        let b = pca_project(&wide, 3).unwrap();
        for c in 0..3 {
            assert!((a.explained_variance[c] - b.explained_variance[c]).abs() < 1e-10);
            for i in 0..6 {
                assert!((a.scores[i * 3 + c] - b.scores[i * 3 + c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn too_many_components() {
        assert!(pca_project(&random_map(2, 5, 1), 3).is_err());
        assert!(pca_project(&random_map(2, 5, 1), 0).is_err());
    }
}
