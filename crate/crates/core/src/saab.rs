//! One-stage Saab transform: a constant DC kernel plus PCA kernels fitted on
//! the mean-removed (AC) part of each patch.
//!
//! The AC second-moment matrix is eigendecomposed inside the (L-1)-dimensional
//! complement of the DC direction, so the DC kernel is exact by construction
//! and never competes with zero-variance AC directions.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{jacobi_eigen, SquareMatrix};

/// AC eigenvalues at or below this fraction of the total patch energy are
/// treated as zero when reporting rank deficiency.
const RANK_TOL: f64 = 1e-10;

/// Square `size x size x 3` patch geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchConfig {
    pub size: usize,
    pub channels: usize,
}

impl PatchConfig {
    pub fn square(size: usize) -> Self {
        PatchConfig { size, channels: 3 }
    }

    /// Patch vector length `L = s * s * c`.
    pub fn dim(&self) -> usize {
        self.size * self.size * self.channels
    }
}

impl std::fmt::Display for PatchConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.size, self.size, self.channels)
    }
}

/// Orthonormal Saab kernels, row 0 = DC, rows 1.. = AC by descending energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BankRepr", into = "BankRepr")]
pub struct SaabFilterBank {
    config: PatchConfig,
    /// Row-major `L x L`.
    kernels: Vec<f64>,
    energies: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BankRepr {
    config: PatchConfig,
    kernels: Vec<Vec<f64>>,
    energies: Vec<f64>,
}

impl From<SaabFilterBank> for BankRepr {
    fn from(b: SaabFilterBank) -> Self {
        let l = b.dim();
        BankRepr { config: b.config, kernels: b.kernels.chunks(l).map(<[f64]>::to_vec).collect(), energies: b.energies }
    }
}

impl TryFrom<BankRepr> for SaabFilterBank {
    type Error = Error;

    fn try_from(r: BankRepr) -> Result<Self> {
        let l = r.config.dim();
        if r.kernels.len() != l || r.kernels.iter().any(|k| k.len() != l) || r.energies.len() != l {
            return Err(Error::Shape(format!("filter bank arrays do not match L = {l}")));
        }
        Ok(SaabFilterBank {
            config: r.config,
            kernels: r.kernels.into_iter().flatten().collect(),
            energies: r.energies,
        })
    }
}

impl SaabFilterBank {
    pub fn config(&self) -> PatchConfig {
        self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    pub fn kernel(&self, k: usize) -> &[f64] {
        let l = self.dim();
        &self.kernels[k * l..(k + 1) * l]
    }

    /// Per-channel energy fractions (sum to one).
    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    /// Number of stored filter parameters, counted as one per channel.
    pub fn filter_count(&self) -> usize {
        self.dim()
    }

    /// Saab coefficients of one patch: `K * patch`.
    pub fn transform(&self, patch: &[f64]) -> Result<Vec<f64>> {
        let l = self.dim();
        if patch.len() != l {
            return Err(Error::Shape(format!("patch length {} != L = {l}", patch.len())));
        }
        Ok(self.kernels.chunks_exact(l).map(|k| dot(k, patch)).collect())
    }

    /// Largest deviation of `K * K^T` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let l = self.dim();
        let mut worst: f64 = 0.0;
        for i in 0..l {
            for j in 0..l {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(self.kernel(i), self.kernel(j)) - want).abs());
            }
        }
        worst
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Channel energy fractions for plotting.
pub fn energy_percentages(bank: &SaabFilterBank) -> Vec<f64> {
    bank.energies.clone()
}

/// Streaming sufficient statistics for a Saab fit. Partial accumulators can
/// be merged, which keeps parallel reductions exact when the merge order is
/// fixed.
#[derive(Debug, Clone)]
pub struct SecondMoments {
    l: usize,
    count: usize,
    /// Upper triangle of the AC outer-product sum, row-major `L x L`.
    ac_outer: Vec<f64>,
    ac_sum: Vec<f64>,
    dc_sq_sum: f64,
}

impl SecondMoments {
    pub fn new(l: usize) -> Self {
        SecondMoments { l, count: 0, ac_outer: vec![0.0; l * l], ac_sum: vec![0.0; l], dc_sq_sum: 0.0 }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, patch: &[f64]) {
        debug_assert_eq!(patch.len(), self.l);
        let l = self.l;
        let mean = patch.iter().sum::<f64>() / l as f64;
        // DC coefficient is sum / sqrt(L) = mean * sqrt(L).
        self.dc_sq_sum += mean * mean * l as f64;
        let mut ac = [0.0f64; 64];
        let ac = &mut ac[..l];
        for (a, &p) in ac.iter_mut().zip(patch) {
            *a = p - mean;
        }
        for i in 0..l {
            self.ac_sum[i] += ac[i];
            let row = &mut self.ac_outer[i * l..(i + 1) * l];
            let ai = ac[i];
            for j in i..l {
                row[j] += ai * ac[j];
            }
        }
        self.count += 1;
    }

    pub fn merge(&mut self, other: &SecondMoments) {
        assert_eq!(self.l, other.l, "merging moments of different patch sizes");
        self.count += other.count;
        self.dc_sq_sum += other.dc_sq_sum;
        for (a, b) in self.ac_outer.iter_mut().zip(&other.ac_outer) {
            *a += b;
        }
        for (a, b) in self.ac_sum.iter_mut().zip(&other.ac_sum) {
            *a += b;
        }
    }
}

/// Diagnostics produced alongside a fitted bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub samples: usize,
    /// AC eigenvalues (mean squared coefficient), descending.
    pub ac_eigenvalues: Vec<f64>,
    /// Number of AC channels with non-negligible variance.
    pub ac_rank: usize,
    /// Norm of the AC ensemble mean, which the fit assumes to be near zero.
    pub residual_mean_norm: f64,
    /// Largest `|C v - lambda v|` over AC eigenpairs, relative to `|C|_F`.
    pub max_relative_residual: f64,
}

impl FitReport {
    pub fn is_degenerate(&self) -> bool {
        self.ac_rank < self.ac_eigenvalues.len()
    }

    /// Channel indices (bank numbering) with zero AC variance.
    pub fn degenerate_channels(&self) -> Vec<usize> {
        (self.ac_rank + 1..=self.ac_eigenvalues.len()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SaabFit {
    pub bank: SaabFilterBank,
    pub report: FitReport,
}

/// Fits a bank on an `N x L` patch matrix.
pub fn fit_saab(patches: ArrayView2<'_, f64>, config: PatchConfig) -> Result<SaabFit> {
    let (n, l) = patches.dim();
    if l != config.dim() {
        return Err(Error::Shape(format!("patch width {l} != L = {} for {config}", config.dim())));
    }
    if n < l {
        return Err(Error::InsufficientData(format!("{n} patches for L = {l}")));
    }
    if patches.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite patch value".into()));
    }
    let mut moments = SecondMoments::new(l);
    for row in patches.rows() {
        match row.as_slice() {
            Some(s) => moments.push(s),
            None => moments.push(&row.to_vec()),
        }
    }
    fit_from_moments(&moments, config)
}

/// Orthonormal basis of the complement of the all-ones direction
/// (Helmert contrasts). Row `j` is the `j`-th basis vector.
fn dc_complement_basis(l: usize) -> Vec<Vec<f64>> {
    (1..l)
        .map(|j| {
            let norm = ((j * (j + 1)) as f64).sqrt();
            let mut v = vec![0.0; l];
            v[..j].iter_mut().for_each(|x| *x = 1.0 / norm);
            v[j] = -(j as f64) / norm;
            v
        })
        .collect()
}

pub fn fit_from_moments(moments: &SecondMoments, config: PatchConfig) -> Result<SaabFit> {
    let l = config.dim();
    if moments.l != l {
        return Err(Error::Shape(format!("moments for L = {}, config has L = {l}", moments.l)));
    }
    if moments.count < l {
        return Err(Error::InsufficientData(format!("{} patches for L = {l}", moments.count)));
    }
    let inv_n = 1.0 / moments.count as f64;
    let cov = SquareMatrix::from_fn(l, |i, j| {
        let (i, j) = (i.min(j), i.max(j));
        moments.ac_outer[i * l + j] * inv_n
    });

    // Project onto the DC complement: C' = B C B^T.
    let basis = dc_complement_basis(l);
    let m = l - 1;
    let cb: Vec<Vec<f64>> = basis.iter().map(|b| (0..l).map(|i| dot(cov.row(i), b)).collect()).collect();
    let reduced = SquareMatrix::from_fn(m, |p, q| dot(&basis[p], &cb[q]));
    let eig = jacobi_eigen(&reduced);

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.values[b].total_cmp(&eig.values[a]).then(a.cmp(&b)));

    let mut kernels = Vec::with_capacity(l * l);
    let dc = 1.0 / (l as f64).sqrt();
    kernels.extend(std::iter::repeat_n(dc, l));
    let mut ac_eigenvalues = Vec::with_capacity(m);
    for &k in &order {
        let mut kernel = vec![0.0; l];
        for (p, b) in basis.iter().enumerate() {
            let w = eig.vectors[(p, k)];
            for (x, bi) in kernel.iter_mut().zip(b) {
                *x += w * bi;
            }
        }
        // Sign convention: largest-magnitude entry positive (first on ties).
        let pivot = kernel
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(bi, bv), (i, &v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) })
            .0;
        if kernel[pivot] < 0.0 {
            kernel.iter_mut().for_each(|x| *x = -*x);
        }
        kernels.extend_from_slice(&kernel);
        ac_eigenvalues.push(eig.values[k].max(0.0));
    }

    let scale = cov.frobenius();
    let max_relative_residual = if scale > 0.0 {
        (1..l)
            .map(|k| {
                let v = &kernels[k * l..(k + 1) * l];
                let lambda = dot(v, &(0..l).map(|i| dot(cov.row(i), v)).collect::<Vec<_>>());
                (0..l).map(|i| (dot(cov.row(i), v) - lambda * v[i]).powi(2)).sum::<f64>().sqrt()
            })
            .fold(0.0, f64::max)
            / scale
    } else {
        0.0
    };

    let dc_energy = moments.dc_sq_sum * inv_n;
    let total = dc_energy + ac_eigenvalues.iter().sum::<f64>();
    let ac_rank = ac_eigenvalues.iter().filter(|&&v| v > RANK_TOL * total).count();
    let energies = if total > 0.0 {
        std::iter::once(dc_energy).chain(ac_eigenvalues.iter().copied()).map(|e| e / total).collect()
    } else {
        let mut e = vec![0.0; l];
        e[0] = 1.0;
        e
    };

    let residual_mean_norm = moments.ac_sum.iter().map(|s| (s * inv_n).powi(2)).sum::<f64>().sqrt();

    Ok(SaabFit {
        bank: SaabFilterBank { config, kernels, energies },
        report: FitReport {
            samples: moments.count,
            ac_eigenvalues,
            ac_rank,
            residual_mean_norm,
            max_relative_residual,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian_patches(n: usize, l: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, l), |_| rng.sample(StandardNormal))
    }

    #[test]
    fn dc_kernel_is_constant() {
        for s in [2, 3, 4] {
            let cfg = PatchConfig::square(s);
            let fit = fit_saab(gaussian_patches(200, cfg.dim(), s as u64).view(), cfg).unwrap();
            let dc = 1.0 / (cfg.dim() as f64).sqrt();
            assert!(fit.bank.kernel(0).iter().all(|&v| v == dc));
            assert!(fit.bank.orthonormality_error() < 1e-12);
        }
    }

    #[test]
    fn isotropic_eigenvalues_are_close() {
        let cfg = PatchConfig::square(2);
        let fit = fit_saab(gaussian_patches(20_000, 12, 1).view(), cfg).unwrap();
        let ev = &fit.report.ac_eigenvalues;
        // AC part of N(0, I) has covariance I - 11^T/L on the complement.
        for v in ev {
            assert!((v - 1.0).abs() < 0.1, "{ev:?}");
        }
        assert!(ev.windows(2).all(|w| w[0] >= w[1]));
        assert!(!fit.report.is_degenerate());
    }

    #[test]
    fn constant_patches_are_all_dc() {
        let cfg = PatchConfig::square(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let patches =
            Array2::from_shape_fn((100, 27), |_| 0.0) + &Array2::from_shape_fn((100, 1), |_| rng.random::<f64>());
        let fit = fit_saab(patches.view(), cfg).unwrap();
        assert!(fit.report.ac_eigenvalues.iter().all(|&v| v.abs() < 1e-15));
        assert_eq!(fit.report.ac_rank, 0);
        assert!(fit.report.is_degenerate());
        assert_eq!(fit.bank.energies()[0], 1.0);
        assert!(fit.bank.energies()[1..].iter().all(|&e| e < 1e-15));
        assert!(fit.bank.orthonormality_error() < 1e-12);
    }

    #[test]
    fn rank_deficient_fit_keeps_zero_channels_last() {
        // Patches vary only along two AC directions.
        let cfg = PatchConfig::square(2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let patches = Array2::from_shape_fn((300, 12), |_| 0.0);
        let mut patches = patches;
        for mut row in patches.rows_mut() {
            let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            for (i, v) in row.iter_mut().enumerate() {
                *v = 0.5 + a * if i % 2 == 0 { 1.0 } else { -1.0 } + b * if i < 6 { 0.3 } else { -0.3 };
            }
        }
        let fit = fit_saab(patches.view(), cfg).unwrap();
        assert_eq!(fit.report.ac_rank, 2);
        assert_eq!(fit.report.degenerate_channels(), (3..12).collect::<Vec<_>>());
        assert!(fit.bank.orthonormality_error() < 1e-10);
    }

    #[test]
    fn errors() {
        let cfg = PatchConfig::square(2);
        assert!(matches!(fit_saab(gaussian_patches(11, 12, 0).view(), cfg), Err(Error::InsufficientData(_))));
        assert!(matches!(fit_saab(gaussian_patches(50, 27, 0).view(), cfg), Err(Error::Shape(_))));
        let fit = fit_saab(gaussian_patches(50, 12, 0).view(), cfg).unwrap();
        assert!(matches!(fit.bank.transform(&[0.0; 11]), Err(Error::Shape(_))));
    }

    #[test]
    fn transform_of_constant_patch() {
        let cfg = PatchConfig::square(3);
        let fit = fit_saab(gaussian_patches(500, 27, 2).view(), cfg).unwrap();
        let c = fit.bank.transform(&[0.7; 27]).unwrap();
        assert!((c[0] - 0.7 * 27f64.sqrt()).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn transform_matches_naive_dot_products() {
        let cfg = PatchConfig::square(3);
        let fit = fit_saab(gaussian_patches(500, 27, 3).view(), cfg).unwrap();
        let x: Vec<f64> = gaussian_patches(1, 27, 9).iter().copied().collect();
        let coeffs = fit.bank.transform(&x).unwrap();
        for (k, c) in coeffs.iter().enumerate() {
            let naive: f64 = fit.bank.kernel(k).iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((c - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn white_noise_dc_energy_near_one_over_l() {
        let cfg = PatchConfig::square(2);
        let fit = fit_saab(gaussian_patches(20_000, 12, 8).view(), cfg).unwrap();
        let e = energy_percentages(&fit.bank);
        assert!((e.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(e.iter().all(|&v| v >= 0.0));
        assert!((e[0] - 1.0 / 12.0).abs() < 0.2 / 12.0, "{}", e[0]);
    }

    #[test]
    fn fit_is_bit_deterministic() {
        let cfg = PatchConfig::square(4);
        let p = gaussian_patches(400, 48, 12);
        let a = fit_saab(p.view(), cfg).unwrap().bank;
        let b = fit_saab(p.view(), cfg).unwrap().bank;
        assert_eq!(a, b);
    }

    #[test]
    fn shift_changes_only_dc() {
        let cfg = PatchConfig::square(2);
        let p = gaussian_patches(300, 12, 13);
        let bank = fit_saab(p.view(), cfg).unwrap().bank;
        let x: Vec<f64> = p.row(0).to_vec();
        let shifted: Vec<f64> = x.iter().map(|v| v + 0.25).collect();
        let a = bank.transform(&x).unwrap();
        let b = bank.transform(&shifted).unwrap();
        assert!((b[0] - a[0] - 0.25 * 12f64.sqrt()).abs() < 1e-12);
        for k in 1..12 {
            assert!((a[k] - b[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn moments_merge_equals_single_pass() {
        let p = gaussian_patches(100, 12, 14);
        let mut whole = SecondMoments::new(12);
        let mut a = SecondMoments::new(12);
        let mut b = SecondMoments::new(12);
        for (i, row) in p.rows().into_iter().enumerate() {
            whole.push(row.as_slice().unwrap());
            if i < 40 { &mut a } else { &mut b }.push(row.as_slice().unwrap());
        }
        a.merge(&b);
        assert_eq!(a.count(), whole.count());
        let fa = fit_from_moments(&a, PatchConfig::square(2)).unwrap();
        let fw = fit_from_moments(&whole, PatchConfig::square(2)).unwrap();
        for (x, y) in fa.report.ac_eigenvalues.iter().zip(&fw.report.ac_eigenvalues) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn bank_json_roundtrip() {
        let cfg = PatchConfig::square(2);
        let bank = fit_saab(gaussian_patches(100, 12, 15).view(), cfg).unwrap().bank;
        let json = serde_json::to_string(&bank).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["kernels"].as_array().unwrap().len(), 12);
        assert_eq!(serde_json::from_str::<SaabFilterBank>(&json).unwrap(), bank);
        let mut bad = v.clone();
        bad["energies"] = serde_json::json!([1.0]);
        assert!(serde_json::from_value::<SaabFilterBank>(bad).is_err());
    }
}
