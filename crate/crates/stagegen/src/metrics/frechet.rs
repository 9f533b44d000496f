//! Gaussian moment estimation and the Fréchet distance
//! `d² = ‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`, with the cross term
//! computed in the stable symmetric form `(Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2}`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Gaussian summary of an embedded image set: sample mean, unbiased
/// covariance, and the sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Two-pass batch estimate: sample mean and unbiased covariance (divisor
/// `n − 1`). Needs `n ≥ 2`.
pub fn gaussian_stats(embeddings: &[Vec<f64>]) -> Result<GaussianStats> {
    const OP: &str = "gaussian_stats";
    if embeddings.len() < 2 {
        return Err(Error::Metrics(format!(
            "{OP}: need at least 2 samples, got {}",
            embeddings.len()
        )));
    }
    let d = embeddings[0].len();
    if d == 0 || embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::Metrics(format!("{OP}: inconsistent embedding dims")));
    }
    let n = embeddings.len();
    let mut mean = DVector::zeros(d);
    for e in embeddings {
        for (i, &v) in e.iter().enumerate() {
            mean[i] += v;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for e in embeddings {
        let centered = DVector::from_column_slice(e) - &mean;
        cov.syger(1.0, &centered, &centered, 1.0);
    }
    cov /= (n - 1) as f64;
    // syger fills the lower triangle; mirror it.
    for i in 0..d {
        for j in i + 1..d {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    Ok(GaussianStats { mean, cov, n })
}

/// Single-pass (Welford) accumulator; matches the batch path to ~1e-12.
#[derive(Debug, Clone)]
pub struct StreamingStats {
    n: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl StreamingStats {
    pub fn new(dim: usize) -> Self {
        StreamingStats {
            n: 0,
            mean: DVector::zeros(dim),
            m2: DMatrix::zeros(dim, dim),
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.mean.len(), "embedding dim changed mid-stream");
        self.n += 1;
        let x = DVector::from_column_slice(x);
        let delta = &x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = &x - &self.mean;
        // m2 += delta · delta2ᵀ
        self.m2 += delta * delta2.transpose();
    }

    pub fn finalize(self) -> Result<GaussianStats> {
        if self.n < 2 {
            return Err(Error::Metrics(format!(
                "streaming stats: need at least 2 samples, got {}",
                self.n
            )));
        }
        let mut cov = self.m2 / (self.n - 1) as f64;
        // The rank-1 updates are not exactly symmetric in floating point.
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(GaussianStats {
            mean: self.mean,
            cov,
            n: self.n,
        })
    }
}

/// Principal square root of a symmetric PSD matrix via eigendecomposition;
/// eigenvalues pushed below zero by roundoff are clamped to 0.
pub fn matrix_sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    const OP: &str = "matrix_sqrt_psd";
    if !m.is_square() {
        return Err(Error::Metrics(format!("{OP}: matrix is {}x{}", m.nrows(), m.ncols())));
    }
    let scale = m.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let asym = (m - m.transpose()).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if asym > 1e-9 * scale {
        return Err(Error::Metrics(format!(
            "{OP}: matrix asymmetry {asym:e} exceeds tolerance"
        )));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&sqrt_vals) * v.transpose())
}

/// Squared Fréchet distance between two Gaussian summaries. Symmetric,
/// zero for identical stats; a small negative numerical residue clamps to 0.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats, eps_reg: f64) -> Result<f64> {
    const OP: &str = "frechet_distance";
    if a.dim() != b.dim() {
        return Err(Error::Metrics(format!(
            "{OP}: dim mismatch {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let d = a.dim();
    let reg = DMatrix::identity(d, d) * eps_reg;
    let cov_a = &a.cov + &reg;
    let cov_b = &b.cov + &reg;

    let sqrt_a = matrix_sqrt_psd(&cov_a)?;
    let inner = &sqrt_a * &cov_b * &sqrt_a;
    let cross = matrix_sqrt_psd(&inner)?;

    let mean_term = (&a.mean - &b.mean).norm_squared();
    let d2 = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    Ok(d2.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stats_1d(mean: f64, var: f64) -> GaussianStats {
        GaussianStats {
            mean: DVector::from_vec(vec![mean]),
            cov: DMatrix::from_vec(1, 1, vec![var]),
            n: 100,
        }
    }

    pub(crate) fn random_psd_stats(dim: usize, seed: u64) -> GaussianStats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.random::<f64>() - 0.5);
        let cov = &a * a.transpose();
        let mean = DVector::from_fn(dim, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        GaussianStats { mean, cov, n: 50 }
    }

    #[test]
    fn batch_stats_reference_cases() {
        let same = vec![vec![1.5, -2.0]; 5];
        let s = gaussian_stats(&same).unwrap();
        assert_eq!(s.mean.as_slice(), &[1.5, -2.0]);
        assert!(s.cov.iter().all(|&v| v == 0.0));

        let two = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        let s = gaussian_stats(&two).unwrap();
        assert_eq!(s.mean.as_slice(), &[1.0, 0.0]);
        // unbiased divisor (n−1) = 1
        assert_eq!(s.cov[(0, 0)], 2.0);
        assert_eq!(s.cov[(0, 1)], 0.0);
        assert_eq!(s.cov[(1, 1)], 0.0);
        assert_eq!(s.n, 2);
    }

    #[test]
    fn stats_require_two_samples() {
        assert!(gaussian_stats(&[vec![1.0]]).is_err());
    }

    #[test]
    fn streaming_matches_batch_to_tight_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let data: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..6).map(|_| rng.random::<f64>() * 3.0 - 1.0).collect())
            .collect();
        let batch = gaussian_stats(&data).unwrap();
        let mut stream = StreamingStats::new(6);
        for x in &data {
            stream.push(x);
        }
        let streamed = stream.finalize().unwrap();
        assert_eq!(streamed.n, batch.n);
        assert!((&streamed.mean - &batch.mean).amax() <= 1e-10);
        assert!((&streamed.cov - &batch.cov).amax() <= 1e-10);
    }

    #[test]
    fn sqrt_reference_cases() {
        let id = DMatrix::<f64>::identity(4, 4);
        assert!((matrix_sqrt_psd(&id).unwrap() - &id).amax() <= 1e-12);

        let diag = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let s = matrix_sqrt_psd(&diag).unwrap();
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        assert!((s - expected).amax() <= 1e-12);
    }

    #[test]
    fn sqrt_reconstructs_seeded_psd_matrices() {
        for seed in [1u64, 2, 3, 4] {
            let stats = random_psd_stats(12, seed);
            let m = stats.cov;
            let s = matrix_sqrt_psd(&m).unwrap();
            let err = (&s * &s - &m).norm() / m.norm();
            assert!(err <= 1e-6, "seed {seed}: relative Frobenius error {err}");
        }
    }

    #[test]
    fn sqrt_recovers_the_original_root() {
        for seed in [5u64, 6] {
            let root = matrix_sqrt_psd(&random_psd_stats(8, seed).cov).unwrap();
            let recovered = matrix_sqrt_psd(&(&root * &root)).unwrap();
            let err = (&recovered - &root).norm() / root.norm();
            assert!(err <= 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn sqrt_rejects_asymmetric_input() {
        let mut m = DMatrix::<f64>::identity(3, 3);
        m[(0, 1)] = 0.5;
        assert!(matrix_sqrt_psd(&m).is_err());
    }

    #[test]
    fn frechet_closed_forms() {
        // identical stats
        let s = random_psd_stats(5, 9);
        assert!(frechet_distance(&s, &s, 1e-6).unwrap() <= 1e-8);

        // 1-D: (Δμ)² + (σ₁ − σ₂)² with equal variances → 1
        let d = frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(1.0, 1.0), 0.0).unwrap();
        assert!((d - 1.0).abs() <= 1e-9, "1-D case: {d}");

        // 2-D commuting diagonals: 2 + (1+4+1+4) − 2(2+2) = 4
        let a = GaussianStats {
            mean: DVector::from_vec(vec![0.0, 0.0]),
            cov: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0])),
            n: 10,
        };
        let b = GaussianStats {
            mean: DVector::from_vec(vec![1.0, 1.0]),
            cov: DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0])),
            n: 10,
        };
        let d = frechet_distance(&a, &b, 0.0).unwrap();
        assert!((d - 4.0).abs() <= 1e-9, "2-D diagonal case: {d}");
    }

    #[test]
    fn frechet_is_symmetric_and_translation_invariant() {
        for seed in 0..10u64 {
            let a = random_psd_stats(6, seed * 2 + 100);
            let b = random_psd_stats(6, seed * 2 + 101);
            let ab = frechet_distance(&a, &b, 1e-6).unwrap();
            let ba = frechet_distance(&b, &a, 1e-6).unwrap();
            assert!((ab - ba).abs() <= 1e-9, "seed {seed}: {ab} vs {ba}");

            let shift = DVector::from_fn(6, |i, _| (i as f64) * 0.7 - 1.3);
            let a2 = GaussianStats {
                mean: &a.mean + &shift,
                cov: a.cov.clone(),
                n: a.n,
            };
            let b2 = GaussianStats {
                mean: &b.mean + &shift,
                cov: b.cov.clone(),
                n: b.n,
            };
            let shifted = frechet_distance(&a2, &b2, 1e-6).unwrap();
            assert!(
                (ab - shifted).abs() <= 1e-9,
                "seed {seed}: translation changed the distance: {ab} vs {shifted}"
            );
        }
    }
}
