//! Small dense complex linear algebra and density-matrix validity checks.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;

pub const I: C64 = C64::new(0.0, 1.0);

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Tolerances applied by [`validate_density`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Max-entry norm of A - A^H.
    pub herm: f64,
    /// |Tr A - 1|.
    pub trace: f64,
    /// Smallest admissible eigenvalue is -psd.
    pub psd: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { herm: 1e-10, trace: 1e-10, psd: 1e-8 }
    }
}

/// A Hermitian, trace-one, positive semidefinite matrix (within [`Tolerances`]).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(CMatrix);

impl DensityMatrix {
    pub fn mat(&self) -> &CMatrix {
        &self.0
    }
    pub fn into_inner(self) -> CMatrix {
        self.0
    }
    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
    /// Wraps a matrix already known to be a state (e.g. the output of [`project_density`]).
    pub fn new_unchecked(m: CMatrix) -> Self {
        DensityMatrix(m)
    }
    pub fn maximally_mixed(dim: usize) -> Self {
        DensityMatrix(CMatrix::identity(dim, dim).unscale(dim as f64))
    }
}

pub fn validate_density(mat: &CMatrix, tol: &Tolerances) -> Result<DensityMatrix> {
    if !mat.is_square() {
        return Err(Error::NotSquare { rows: mat.nrows(), cols: mat.ncols() });
    }
    if mat.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("density matrix"));
    }
    let mut violations = Vec::new();
    let herm_dev = max_abs(&(mat - mat.adjoint()));
    if herm_dev > tol.herm {
        violations.push(Violation::NonHermitian { deviation: herm_dev });
    }
    let tr_dev = (mat.trace() - C64::new(1.0, 0.0)).norm();
    if tr_dev > tol.trace {
        violations.push(Violation::TraceDeviation { deviation: tr_dev });
    }
    let (evals, _) = herm_eig(&hermitize(mat));
    let min_ev = evals.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_ev < -tol.psd {
        violations.push(Violation::NegativeEigenvalue { eigenvalue: min_ev });
    }
    if violations.is_empty() {
        Ok(DensityMatrix(mat.clone()))
    } else {
        Err(Error::InvalidDensity(violations))
    }
}

/// Bloch coordinates Q_i = Tr(rho sigma_i) of a qubit state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlochVector {
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
}

impl BlochVector {
    pub fn new(q1: f64, q2: f64, q3: f64) -> Self {
        BlochVector { q1, q2, q3 }
    }

    pub fn norm(&self) -> f64 {
        (self.q1 * self.q1 + self.q2 * self.q2 + self.q3 * self.q3).sqrt()
    }

    /// rho = (1 + Q . sigma)/2.
    pub fn to_matrix(&self) -> CMatrix {
        let [s1, s2, s3] = pauli();
        (CMatrix::identity(2, 2) + s1 * c(self.q1, 0.0) + s2 * c(self.q2, 0.0) + s3 * c(self.q3, 0.0)).unscale(2.0)
    }

    pub fn from_matrix(m: &CMatrix) -> Result<Self> {
        if m.nrows() != 2 || m.ncols() != 2 {
            return Err(Error::DimensionMismatch { expected: 2, found: m.nrows() });
        }
        let [s1, s2, s3] = pauli();
        Ok(BlochVector { q1: (m * s1).trace().re, q2: (m * s2).trace().re, q3: (m * s3).trace().re })
    }
}

/// sigma^1, sigma^2, sigma^3.
pub fn pauli() -> [CMatrix; 3] {
    let z = c(0.0, 0.0);
    let o = c(1.0, 0.0);
    [
        CMatrix::from_row_slice(2, 2, &[z, o, o, z]),
        CMatrix::from_row_slice(2, 2, &[z, -I, I, z]),
        CMatrix::from_row_slice(2, 2, &[o, z, z, -o]),
    ]
}

pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn hermitize(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()).unscale(2.0)
}

pub fn comm(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a * b - b * a
}

pub fn anticomm(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a * b + b * a
}

pub fn scalar(z: f64, dim: usize) -> CMatrix {
    CMatrix::identity(dim, dim) * c(z, 0.0)
}

/// Eigenvalues (ascending) and eigenvectors of a Hermitian matrix.
pub fn herm_eig(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let eig = m.clone().symmetric_eigen();
    let mut idx: Vec<usize> = (0..m.nrows()).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = CMatrix::from_fn(m.nrows(), m.nrows(), |r, k| eig.eigenvectors[(r, idx[k])]);
    (vals, vecs)
}

/// f applied to the spectrum of a Hermitian matrix.
pub fn herm_fn(m: &CMatrix, f: impl Fn(f64) -> f64) -> CMatrix {
    let (vals, v) = herm_eig(m);
    let d = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(vals.len(), vals.iter().map(|&x| c(f(x), 0.0))));
    &v * d * v.adjoint()
}

/// Result of [`project_density`].
#[derive(Debug, Clone)]
pub struct Projection {
    pub state: CMatrix,
    /// Trace of the Hermitized input before renormalization.
    pub trace_before: f64,
    /// Most negative eigenvalue removed by clipping (0 when none).
    pub clipped: f64,
}

/// Hermitize, clip eigenvalues at 0, renormalize the trace.
///
/// nalgebra's complex Cholesky accepts indefinite inputs, so positivity is always read off
/// the spectrum.
pub fn project_density(m: &CMatrix) -> Projection {
    let h = hermitize(m);
    let tr = h.trace().re;
    let (vals, v) = herm_eig(&h);
    let clipped = vals.iter().cloned().fold(0.0, f64::min);
    if clipped >= 0.0 {
        return Projection { state: h.unscale(tr), trace_before: tr, clipped: 0.0 };
    }
    let d = nalgebra::DVector::from_iterator(vals.len(), vals.iter().map(|&x| c(x.max(0.0), 0.0)));
    let p = &v * CMatrix::from_diagonal(&d) * v.adjoint();
    let ptr = p.trace().re;
    Projection { state: hermitize(&p).unscale(ptr), trace_before: tr, clipped }
}

/// A linear map on dim x dim matrices, stored as its dim^2 x dim^2 matrix acting on
/// column-stacked coefficients (entry (i, j) sits at i + j*dim).
#[derive(Debug, Clone, PartialEq)]
pub struct Superop {
    pub dim: usize,
    pub mat: CMatrix,
}

impl Superop {
    pub fn from_fn(dim: usize, f: impl Fn(&CMatrix) -> CMatrix) -> Self {
        let n = dim * dim;
        let mut mat = CMatrix::zeros(n, n);
        for j in 0..dim {
            for i in 0..dim {
                let mut e = CMatrix::zeros(dim, dim);
                e[(i, j)] = c(1.0, 0.0);
                let img = f(&e);
                mat.set_column(i + j * dim, &vec_of(&img));
            }
        }
        Superop { dim, mat }
    }

    pub fn zero(dim: usize) -> Self {
        Superop { dim, mat: CMatrix::zeros(dim * dim, dim * dim) }
    }

    pub fn identity(dim: usize) -> Self {
        Superop { dim, mat: CMatrix::identity(dim * dim, dim * dim) }
    }

    pub fn apply(&self, v: &CMatrix) -> CMatrix {
        unvec(&(&self.mat * vec_of(v)), self.dim)
    }
}

pub fn vec_of(m: &CMatrix) -> nalgebra::DVector<C64> {
    nalgebra::DVector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &nalgebra::DVector<C64>, dim: usize) -> CMatrix {
    CMatrix::from_column_slice(dim, dim, v.as_slice())
}

/// exp(A) by scaling and squaring a truncated Taylor series.
pub fn expm(a: &CMatrix) -> Result<CMatrix> {
    if a.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("exponent"));
    }
    let n = a.nrows();
    let norm1 = (0..n).map(|j| a.column(j).iter().map(|z| z.norm()).sum::<f64>()).fold(0.0, f64::max);
    // ||A / 2^s||_1 <= 1/2 keeps the 20-term remainder below 1e-25.
    let s = if norm1 > 0.5 { (norm1 / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = a.unscale(2f64.powi(s));
    let mut term = CMatrix::identity(n, n);
    let mut sum = term.clone();
    for k in 1..=20 {
        term = &term * &scaled / c(k as f64, 0.0);
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    if sum.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("matrix exponential"));
    }
    Ok(sum)
}

/// exp(t * generator) applied to v.
pub fn matrix_exp_apply(generator: &Superop, t: f64, v: &CMatrix) -> Result<CMatrix> {
    assert!(t >= 0.0, "propagation time must be non-negative");
    if v.nrows() != generator.dim || v.ncols() != generator.dim {
        return Err(Error::DimensionMismatch { expected: generator.dim, found: v.nrows() });
    }
    let e = expm(&(&generator.mat * c(t, 0.0)))?;
    Ok(unvec(&(e * vec_of(v)), generator.dim))
}

/// Random matrices with i.i.d. standard complex Gaussian entries (E|z|^2 = 1).
pub mod random {
    use super::*;

    pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> C64 {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        c(re, im) * std::f64::consts::FRAC_1_SQRT_2
    }

    pub fn gaussian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> CMatrix {
        CMatrix::from_fn(dim, dim, |_, _| complex_normal(rng))
    }

    pub fn hermitian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> CMatrix {
        hermitize(&gaussian(dim, rng))
    }

    /// Haar unitary via QR with phase correction.
    pub fn unitary<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> CMatrix {
        let qr = gaussian(dim, rng).qr();
        let (q, r) = (qr.q(), qr.r());
        let phases = nalgebra::DVector::from_iterator(
            dim,
            (0..dim).map(|i| {
                let d = r[(i, i)];
                if d.norm() > 0.0 {
                    d / d.norm()
                } else {
                    c(1.0, 0.0)
                }
            }),
        );
        q * CMatrix::from_diagonal(&phases)
    }

    /// V diag(lambda) V^H with lambda drawn uniformly on the simplex.
    pub fn density<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> CMatrix {
        let w: Vec<f64> = (0..dim).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
        let s: f64 = w.iter().sum();
        let v = unitary(dim, rng);
        let d = nalgebra::DVector::from_iterator(dim, w.iter().map(|x| c(x / s, 0.0)));
        hermitize(&(&v * CMatrix::from_diagonal(&d) * v.adjoint()))
    }

    pub fn pure<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> CMatrix {
        let psi = nalgebra::DVector::from_fn(dim, |_, _| complex_normal(rng));
        let psi = psi.unscale(psi.norm());
        &psi * psi.adjoint()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn maximally_mixed_is_valid() {
        assert!(validate_density(&scalar(0.5, 2), &Tolerances::default()).is_ok());
    }

    #[test]
    fn overlong_bloch_vector_is_negative() {
        let m = BlochVector::new(0.0, 0.0, 1.2).to_matrix();
        match validate_density(&m, &Tolerances::default()) {
            Err(Error::InvalidDensity(v)) => {
                assert_eq!(v.len(), 1);
                match v[0] {
                    Violation::NegativeEigenvalue { eigenvalue } => assert!((eigenvalue + 0.1).abs() < 1e-14),
                    ref other => panic!("unexpected {other:?}"),
                }
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tiny_trace_perturbation_is_accepted() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut m = random::density(3, &mut rng);
        m[(0, 0)] += c(3e-11, 0.0);
        assert!(validate_density(&m, &Tolerances::default()).is_ok());
        m[(0, 0)] += c(1e-9, 0.0);
        assert!(matches!(validate_density(&m, &Tolerances::default()), Err(Error::InvalidDensity(_))));
    }

    #[test]
    fn bloch_poles_and_center() {
        assert!(max_abs(&(BlochVector::new(0.0, 0.0, 0.0).to_matrix() - scalar(0.5, 2))) < 1e-15);
        let up = BlochVector::new(0.0, 0.0, 1.0).to_matrix();
        assert!((up[(0, 0)] - c(1.0, 0.0)).norm() < 1e-15 && up[(1, 1)].norm() < 1e-15);
        assert!(matches!(BlochVector::from_matrix(&scalar(1.0, 3)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn exp_of_zero_and_scalar_generators() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let v = random::gaussian(2, &mut rng);
        let out = matrix_exp_apply(&Superop::zero(2), 1.7, &v).unwrap();
        assert!(max_abs(&(&out - &v)) < 1e-15);
        let lam = 0.8;
        let g = Superop { dim: 2, mat: CMatrix::identity(4, 4) * c(-lam, 0.0) };
        let out = matrix_exp_apply(&g, 2.5, &v).unwrap();
        assert!(max_abs(&(out - &v * c((-lam * 2.5f64).exp(), 0.0))) < 1e-14);
    }

    /// Independent oracle: fourth-order Taylor steps, step halving until two successive
    /// refinements agree to 1e-12.
    fn series_oracle(g: &Superop, t: f64, v: &CMatrix) -> CMatrix {
        let run = |steps: usize| {
            let h = t / steps as f64;
            let mut x = vec_of(v);
            for _ in 0..steps {
                let mut term = x.clone();
                let mut acc = x.clone();
                for k in 1..=4 {
                    term = &g.mat * term * c(h / k as f64, 0.0);
                    acc += &term;
                }
                x = acc;
            }
            unvec(&x, g.dim)
        };
        let mut steps = 8;
        let mut prev = run(steps);
        loop {
            steps *= 2;
            let next = run(steps);
            if max_abs(&(&next - &prev)) < 1e-12 {
                return next;
            }
            prev = next;
        }
    }

    #[test]
    fn exp_matches_series_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let g = Superop { dim: 2, mat: random::gaussian(4, &mut rng) };
        let v = random::gaussian(2, &mut rng);
        let fast = matrix_exp_apply(&g, 0.1, &v).unwrap();
        let slow = series_oracle(&g, 0.1, &v);
        assert!(max_abs(&(fast - slow)) < 1e-10);
    }

    #[test]
    fn expm_rejects_overflow() {
        let g = Superop { dim: 1, mat: scalar(800.0, 1) };
        assert!(matches!(matrix_exp_apply(&g, 1.0, &scalar(1.0, 1)), Err(Error::NonFinite(_))));
    }

    #[test]
    fn projection_clips_and_renormalizes() {
        let m = BlochVector::new(0.0, 0.0, 1.2).to_matrix();
        let p = project_density(&m);
        assert!((p.clipped + 0.1).abs() < 1e-14);
        assert!(validate_density(&p.state, &Tolerances::default()).is_ok());
        let good = BlochVector::new(0.3, -0.2, 0.1).to_matrix();
        let q = project_density(&good);
        assert_eq!(q.clipped, 0.0);
        assert!(max_abs(&(q.state - good)) < 1e-15);
    }

    #[test]
    fn superop_from_fn_matches_direct_application() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a = random::gaussian(3, &mut rng);
        let b = random::gaussian(3, &mut rng);
        let x = random::gaussian(3, &mut rng);
        let s = Superop::from_fn(3, |m| &a * m * &b);
        assert!(max_abs(&(s.apply(&x) - &a * &x * &b)) < 1e-13);
    }
}
