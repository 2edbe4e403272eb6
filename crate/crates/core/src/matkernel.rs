//! Dense symmetric-matrix kernel: eigendecomposition, PSD square roots, matrix
//! powers, spectral norms and Loewner-order checks.
//!
//! Eigendecompositions come from nalgebra's symmetric QR solver; everything
//! else (ordering, clamping, spectral functions, band checks) lives here.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Eigenvalues in `[-PSD_CLAMP, 0)` are treated as round-off and clamped to 0.
pub const PSD_CLAMP: f64 = 1e-10;

/// A finite, symmetric square matrix. Construction symmetrizes the input.
///
/// Serializes as `{"dim": d, "entries": [row-major]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SymMatrixDoc", into = "SymMatrixDoc")]
pub struct SymMatrix(DMatrix<f64>);

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SymMatrixDoc {
    dim: usize,
    entries: Vec<f64>,
}

impl TryFrom<SymMatrixDoc> for SymMatrix {
    type Error = LabError;

    fn try_from(doc: SymMatrixDoc) -> Result<Self> {
        SymMatrix::from_row_slice(doc.dim, &doc.entries)
    }
}

impl From<SymMatrix> for SymMatrixDoc {
    fn from(m: SymMatrix) -> Self {
        SymMatrixDoc { dim: m.dim(), entries: m.to_row_major() }
    }
}

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(LabError::NotSquare { rows: m.nrows(), cols: m.ncols() });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(LabError::NonFinite);
        }
        Ok(Self::symmetrize(m))
    }

    /// Wraps a matrix known to be finite and square, symmetrizing it.
    pub(crate) fn symmetrize(m: DMatrix<f64>) -> Self {
        let t = m.transpose();
        SymMatrix((m + t) * 0.5)
    }

    pub fn from_row_slice(dim: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(LabError::DimensionMismatch { expected: dim * dim, got: entries.len() });
        }
        Self::new(DMatrix::from_row_slice(dim, dim, entries))
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix(DMatrix::identity(dim, dim))
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix(DMatrix::zeros(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn scale(&self, c: f64) -> SymMatrix {
        SymMatrix(&self.0 * c)
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 - &other.0)
    }

    /// Row-major entries, the layout used by every JSON document.
    pub fn to_row_major(&self) -> Vec<f64> {
        self.0.transpose().as_slice().to_vec()
    }

    pub fn eig(&self) -> Result<EigDecomp> {
        eig_sym(self)
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Largest absolute eigenvalue.
    pub fn spectral_norm(&self) -> f64 {
        let ev = self.0.clone().symmetric_eigenvalues();
        ev.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.0.clone().symmetric_eigenvalues().min()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.0.clone().symmetric_eigenvalues().max()
    }

    /// `m^k` through the eigendecomposition.
    pub fn pow(&self, k: u32) -> Result<SymMatrix> {
        Ok(self.eig()?.map(|l| l.powi(k as i32)))
    }

    /// Inverse of a strictly positive definite matrix.
    pub fn inverse_pd(&self) -> Result<SymMatrix> {
        let e = self.eig()?;
        let min = e.min_eigenvalue();
        if min <= 0.0 {
            return Err(LabError::NotPd { min_eigenvalue: min });
        }
        Ok(e.map(|l| 1.0 / l))
    }

    pub fn psd_sqrt(&self) -> Result<SymMatrix> {
        psd_sqrt(self)
    }

    /// Quadratic form `v^T m v`.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        v.dot(&(&self.0 * v))
    }
}

/// Eigenvalues sorted descending with matching orthonormal eigenvector columns.
#[derive(Clone, Debug)]
pub struct EigDecomp {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl EigDecomp {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues[self.dim() - 1]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// `V f(Λ) V^T`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let d = self.dim();
        let v = &self.eigenvectors;
        let mut scaled = v.clone();
        for j in 0..d {
            let fj = f(self.eigenvalues[j]);
            scaled.column_mut(j).scale_mut(fj);
        }
        SymMatrix::symmetrize(scaled * v.transpose())
    }

    pub fn reconstruct(&self) -> SymMatrix {
        self.map(|l| l)
    }

    /// `u_j^T m u_j` for every eigenvector `u_j`.
    pub fn coefficients(&self, m: &DMatrix<f64>) -> Vec<f64> {
        (0..self.dim())
            .map(|j| {
                let u = self.eigenvectors.column(j);
                u.dot(&(m * u))
            })
            .collect()
    }
}

pub fn eig_sym(m: &SymMatrix) -> Result<EigDecomp> {
    if m.0.iter().any(|v| !v.is_finite()) {
        return Err(LabError::NonFinite);
    }
    let SymmetricEigen { eigenvalues, eigenvectors } = SymmetricEigen::new(m.0.clone());
    let d = eigenvalues.len();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eigenvalues[j].total_cmp(&eigenvalues[i]));
    let values = DVector::from_iterator(d, order.iter().map(|&i| eigenvalues[i]));
    let mut vectors = DMatrix::zeros(d, d);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eigenvectors.column(src));
    }
    Ok(EigDecomp { eigenvalues: values, eigenvectors: vectors })
}

pub fn psd_sqrt(m: &SymMatrix) -> Result<SymMatrix> {
    let e = eig_sym(m)?;
    let min = e.min_eigenvalue();
    if min < -PSD_CLAMP {
        return Err(LabError::NotPsd { min_eigenvalue: min });
    }
    Ok(e.map(|l| l.max(0.0).sqrt()))
}

/// `m^k` for a general square matrix by binary exponentiation.
pub fn matrix_power(m: &DMatrix<f64>, k: u32) -> DMatrix<f64> {
    let mut result = DMatrix::identity(m.nrows(), m.ncols());
    let mut base = m.clone();
    let mut e = k;
    while e > 0 {
        if e & 1 == 1 {
            result = &result * &base;
        }
        e >>= 1;
        if e > 0 {
            base = &base * &base;
        }
    }
    result
}

/// Largest singular value of a general matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Outcome of a Loewner band check `lo·ref ≼ a ≼ hi·ref`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BandCheck {
    pub inside: bool,
    /// Signed distance of the worst eigenvalue of `ref^{-1/2} a ref^{-1/2}`
    /// to the band; negative when outside.
    pub margin: f64,
    pub relative_eigenvalues: Vec<f64>,
}

/// Checks `lo·ref ≼ a ≼ hi·ref` through the spectrum of `ref^{-1/2} a ref^{-1/2}`.
pub fn loewner_band(a: &SymMatrix, reference: &SymMatrix, lo: f64, hi: f64) -> Result<BandCheck> {
    if a.dim() != reference.dim() {
        return Err(LabError::DimensionMismatch { expected: reference.dim(), got: a.dim() });
    }
    let e = eig_sym(reference)?;
    let min = e.min_eigenvalue();
    if min <= 0.0 {
        return Err(LabError::NotPd { min_eigenvalue: min });
    }
    let inv_sqrt = e.map(|l| 1.0 / l.sqrt());
    let rel = SymMatrix::symmetrize(inv_sqrt.as_matrix() * a.as_matrix() * inv_sqrt.as_matrix());
    let ev = eig_sym(&rel)?.eigenvalues;
    let margin = ev.iter().map(|&l| (l - lo).min(hi - l)).fold(f64::INFINITY, f64::min);
    let tol = 1e-9 * lo.abs().max(hi.abs()).max(1.0);
    Ok(BandCheck {
        inside: margin >= -tol,
        margin,
        relative_eigenvalues: ev.iter().copied().collect(),
    })
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix with sign fix).
pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `Q diag(spectrum) Q^T` for a random orthogonal `Q`.
pub fn random_with_spectrum<R: Rng + ?Sized>(spectrum: &[f64], rng: &mut R) -> SymMatrix {
    let q = random_orthogonal(spectrum.len(), rng);
    let d = DMatrix::from_diagonal(&DVector::from_column_slice(spectrum));
    SymMatrix::symmetrize(&q * d * q.transpose())
}

/// Symmetric matrix with i.i.d. N(0,1) upper triangle.
pub fn random_symmetric<R: Rng + ?Sized>(d: usize, rng: &mut R) -> SymMatrix {
    let mut m = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let v: f64 = rng.sample(StandardNormal);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    SymMatrix(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn identity_eigenvalues() {
        let e = eig_sym(&SymMatrix::identity(3)).unwrap();
        assert_eq!(e.eigenvalues.as_slice(), &[1.0, 1.0, 1.0]);
        let vtv = e.eigenvectors.transpose() * &e.eigenvectors;
        assert!((vtv - DMatrix::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn diagonal_eigenpairs() {
        let e = eig_sym(&SymMatrix::from_diagonal(&[1.0, 3.0]).unwrap()).unwrap();
        assert_eq!(e.eigenvalues.as_slice(), &[3.0, 1.0]);
        assert!((e.eigenvectors[(1, 0)].abs() - 1.0).abs() < 1e-14);
        assert!((e.eigenvectors[(0, 1)].abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn random_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_symmetric(5, &mut rng);
        let e = eig_sym(&m).unwrap();
        assert!(e.eigenvalues.as_slice().windows(2).all(|w| w[0] >= w[1]));
        assert!(rel_frob(e.reconstruct().as_matrix(), m.as_matrix()) < 1e-10);
        let vtv = e.eigenvectors.transpose() * &e.eigenvectors;
        assert!((vtv - DMatrix::identity(5, 5)).norm() < 1e-10);
    }

    #[test]
    fn non_finite_rejected() {
        let mut m = DMatrix::identity(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(SymMatrix::new(m), Err(LabError::NonFinite)));
        assert!(matches!(
            SymMatrix::new(DMatrix::zeros(2, 3)),
            Err(LabError::NotSquare { .. })
        ));
    }

    #[test]
    fn construction_symmetrizes() {
        let m = SymMatrix::from_row_slice(2, &[1.0, 2.0, 4.0, 1.0]).unwrap();
        assert_eq!(m.as_matrix()[(0, 1)], 3.0);
        assert_eq!(m.as_matrix()[(1, 0)], 3.0);
    }

    #[test]
    fn sqrt_examples() {
        assert_eq!(psd_sqrt(&SymMatrix::identity(3)).unwrap(), SymMatrix::identity(3));
        let r = psd_sqrt(&SymMatrix::from_diagonal(&[4.0, 9.0]).unwrap()).unwrap();
        assert!((r.as_matrix() - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).norm() < 1e-14);
    }

    #[test]
    fn sqrt_of_random_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = DMatrix::from_fn(4, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let m = SymMatrix::new(&g * g.transpose()).unwrap();
        let r = psd_sqrt(&m).unwrap();
        assert!(r.min_eigenvalue() >= 0.0);
        assert!(rel_frob(&(r.as_matrix() * r.as_matrix()), m.as_matrix()) < 1e-9);
    }

    #[test]
    fn sqrt_clamps_tiny_negatives_and_rejects_real_ones() {
        let m = SymMatrix::from_diagonal(&[1.0, -5e-11]).unwrap();
        let r = psd_sqrt(&m).unwrap();
        assert_eq!(r.as_matrix()[(1, 1)], 0.0);
        let bad = SymMatrix::from_diagonal(&[1.0, -1e-6]).unwrap();
        assert!(matches!(psd_sqrt(&bad), Err(LabError::NotPsd { .. })));
    }

    #[test]
    fn band_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = DMatrix::from_fn(3, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
        let r = SymMatrix::new(&g * g.transpose() + DMatrix::identity(3, 3)).unwrap();

        let same = loewner_band(&r, &r, 0.9, 1.1).unwrap();
        assert!(same.inside);
        assert!((same.margin - 0.1).abs() < 1e-9);

        assert!(!loewner_band(&r.scale(2.0), &r, 0.9, 1.1).unwrap().inside);

        // perturbation of spectral norm 0.05 relative to ref: eigenvalues of
        // ref^{-1/2} E ref^{-1/2} are bounded by 0.05 / λ_min(ref) ≤ 0.05
        let p = random_symmetric(3, &mut rng);
        let p = p.scale(0.05 / p.spectral_norm());
        let perturbed = r.add(&p);
        let check = loewner_band(&perturbed, &r, 0.9, 1.1).unwrap();
        let bound = 0.05 / r.min_eigenvalue();
        assert!(bound < 0.1);
        assert!(check.inside);
        assert!(check.relative_eigenvalues.iter().all(|l| (l - 1.0).abs() <= bound + 1e-12));
    }

    #[test]
    fn band_requires_pd_reference() {
        let r = SymMatrix::from_diagonal(&[1.0, 0.0]).unwrap();
        assert!(matches!(
            loewner_band(&SymMatrix::identity(2), &r, 0.5, 2.0),
            Err(LabError::NotPd { .. })
        ));
    }

    #[test]
    fn degenerate_band_is_equality() {
        let r = SymMatrix::from_diagonal(&[2.0, 0.5]).unwrap();
        assert!(loewner_band(&r.scale(1.3), &r, 1.3, 1.3).unwrap().inside);
        let off = r.scale(1.3).add(&SymMatrix::from_diagonal(&[1e-4, 0.0]).unwrap());
        assert!(!loewner_band(&off, &r, 1.3, 1.3).unwrap().inside);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn eig_power_matches_repeated_product(seed in any::<u64>(), d in 1usize..=8, k in 0u32..=12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_symmetric(d, &mut rng).scale(0.5);
            let by_eig = m.pow(k).unwrap();
            let mut prod = DMatrix::identity(d, d);
            for _ in 0..k {
                prod = &prod * m.as_matrix();
            }
            let scale = m.spectral_norm().powi(k as i32).max(1e-300);
            prop_assert!((by_eig.as_matrix() - &prod).norm() / scale <= 1e-9 * (d as f64));
            prop_assert!((matrix_power(m.as_matrix(), k) - &prod).norm() / scale <= 1e-9 * (d as f64));
        }

        #[test]
        fn trace_similarity_invariance(seed in any::<u64>(), d in 1usize..=5, l in 1u32..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = DMatrix::from_fn(d, d + 2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let sigma = &g * g.transpose() / (d as f64 + 2.0);
            let ga = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let a = SymMatrix::new(&ga * ga.transpose() / (2.0 * d as f64)).unwrap();
            let ah = a.psd_sqrt().unwrap();
            let eye = DMatrix::<f64>::identity(d, d);
            let sym = &eye - ah.as_matrix() * &sigma * ah.as_matrix();
            let lhs = matrix_power(&sym, 2 * l).trace();
            let rhs = matrix_power(&(&eye - &sigma * a.as_matrix()), 2 * l).trace();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0));
        }
    }
}
