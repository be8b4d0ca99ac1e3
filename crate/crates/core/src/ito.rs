//! Finite-dimensional checks of the quantum Ito algebra behind the dilation.
//!
//! Unbounded P, N, H are replaced by arbitrary finite matrices; the identities checked
//! here are algebraic, so they hold for any stand-ins.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{anticomm, c, comm, max_abs, random, CMatrix, C64, I};

#[derive(Debug, Clone, PartialEq)]
pub struct DilationData {
    pub p: CMatrix,
    pub n: CMatrix,
    pub h: CMatrix,
    pub nbar: f64,
}

impl DilationData {
    pub fn new(p: CMatrix, n: CMatrix, h: CMatrix, nbar: f64) -> Result<Self> {
        let d = p.nrows();
        for m in [&n, &h] {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::DimensionMismatch { expected: d, found: m.nrows() });
            }
        }
        if max_abs(&(&h - h.adjoint())) > 1e-12 {
            return Err(Error::ConfigInvalid("H stand-in must be Hermitian".into()));
        }
        if !(nbar >= 0.0) {
            return Err(Error::ConfigInvalid("nbar must be non-negative".into()));
        }
        Ok(DilationData { p, n, h, nbar })
    }

    /// Gaussian stand-ins; P is Hermitian when `hermitian_p` is set.
    pub fn random<R: Rng + ?Sized>(dim: usize, nbar: f64, hermitian_p: bool, rng: &mut R) -> Self {
        let p = if hermitian_p { random::hermitian(dim, rng) } else { random::gaussian(dim, rng) };
        DilationData { p, n: random::gaussian(dim, rng), h: random::hermitian(dim, rng), nbar }
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    /// P + iN.
    pub fn cal_p(&self) -> CMatrix {
        &self.p + &self.n * I
    }

    /// N' = (1 + nbar) N - nbar N^H.
    pub fn n_prime(&self) -> CMatrix {
        &self.n * c(1.0 + self.nbar, 0.0) - self.n.adjoint() * c(self.nbar, 0.0)
    }

    /// H + (P N' + N'^H P)/2.
    pub fn cal_h(&self) -> CMatrix {
        let np = self.n_prime();
        &self.h + (&self.p * &np + np.adjoint() * &self.p) * c(0.5, 0.0)
    }

    /// i[H', A] + nbar (P A P^H - {P P^H, A}/2) + (1 + nbar)(P^H A P - {P^H P, A}/2), with P = P + iN.
    pub fn dual_generator(&self, a: &CMatrix) -> CMatrix {
        let cp = self.cal_p();
        let cpd = cp.adjoint();
        comm(&self.cal_h(), a) * I
            + (&cp * a * &cpd - anticomm(&(&cp * &cpd), a) * c(0.5, 0.0)) * c(self.nbar, 0.0)
            + (&cpd * a * &cp - anticomm(&(&cpd * &cp), a) * c(0.5, 0.0)) * c(1.0 + self.nbar, 0.0)
    }

    /// -i[H', rho] + nbar (P^H rho P - {P P^H, rho}/2) + (1 + nbar)(P rho P^H - {P^H P, rho}/2).
    pub fn generator(&self, rho: &CMatrix) -> CMatrix {
        let cp = self.cal_p();
        let cpd = cp.adjoint();
        comm(&self.cal_h(), rho) * (-I)
            + (&cpd * rho * &cp - anticomm(&(&cp * &cpd), rho) * c(0.5, 0.0)) * c(self.nbar, 0.0)
            + (&cp * rho * &cpd - anticomm(&(&cpd * &cp), rho) * c(0.5, 0.0)) * c(1.0 + self.nbar, 0.0)
    }

    /// L*(AB) - L*(A) B - A L*(B).
    pub fn leibniz_defect(&self, a: &CMatrix, b: &CMatrix) -> CMatrix {
        self.dual_generator(&(a * b)) - self.dual_generator(a) * b - a * self.dual_generator(b)
    }

    /// ([P, A][P^H, B], [P^H, A][P, B]).
    fn defect_basis(&self, a: &CMatrix, b: &CMatrix) -> (CMatrix, CMatrix) {
        let cp = self.cal_p();
        let cpd = cp.adjoint();
        (comm(&cp, a) * comm(&cpd, b), comm(&cpd, a) * comm(&cp, b))
    }

    fn check_dims(&self, ms: &[&CMatrix]) -> Result<()> {
        for m in ms {
            if m.nrows() != self.dim() || m.ncols() != self.dim() {
                return Err(Error::DimensionMismatch { expected: self.dim(), found: m.nrows() });
            }
        }
        Ok(())
    }
}

/// Max-entry deviation of the Leibniz defect from -nbar [P,A][P^H,B] - (1+nbar)[P^H,A][P,B].
pub fn leibniz_residual(data: &DilationData, a: &CMatrix, b: &CMatrix) -> Result<f64> {
    data.check_dims(&[a, b])?;
    let (x1, x2) = data.defect_basis(a, b);
    let expect = x1 * c(-data.nbar, 0.0) - x2 * c(1.0 + data.nbar, 0.0);
    Ok(max_abs(&(data.leibniz_defect(a, b) - expect)))
}

/// |Tr(L*(A) rho) - Tr(A L(rho))|.
pub fn duality_residual(data: &DilationData, a: &CMatrix, rho: &CMatrix) -> Result<f64> {
    data.check_dims(&[a, rho])?;
    Ok(((data.dual_generator(a) * rho).trace() - (a * data.generator(rho)).trace()).norm())
}

/// ||G + G^H + nbar P P^H + (1+nbar) P^H P||_max with G = -(iH' + (nbar P P^H + (1+nbar) P^H P)/2):
/// the dt coefficient of d(U^H U) under dxi dxi^H = (1+nbar) dt, dxi^H dxi = nbar dt.
/// Vanishes exactly when H' is Hermitian, i.e. for Hermitian P.
pub fn unitarity_drift_residual(data: &DilationData) -> f64 {
    let cp = data.cal_p();
    let cpd = cp.adjoint();
    let quad = &cp * &cpd * c(data.nbar, 0.0) + &cpd * &cp * c(1.0 + data.nbar, 0.0);
    let g = -(data.cal_h() * I + &quad * c(0.5, 0.0));
    max_abs(&(&g + g.adjoint() + quad))
}

/// Least-squares identification of the Leibniz defect as alpha [P,A][P^H,B] + beta [P^H,A][P,B].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseFit {
    pub alpha: (f64, f64),
    pub beta: (f64, f64),
    /// -Re alpha: the occupation multiplying Q(A) Q^H(B) with Q(A) = i[P, A].
    pub nbar: f64,
    /// |beta + 1 + nbar|: consistency of the second coefficient with the fitted nbar.
    pub consistency: f64,
    /// Max-entry residual of the fitted ansatz over all samples.
    pub residual: f64,
}

pub fn derive_noise_coefficients<R: Rng + ?Sized>(
    data: &DilationData,
    samples: usize,
    rng: &mut R,
) -> Result<NoiseFit> {
    if samples < 10 {
        return Err(Error::ConfigInvalid("at least 10 samples are required".into()));
    }
    let d = data.dim();
    let mut rows = Vec::with_capacity(samples);
    let (mut g11, mut g12, mut g22) = (0.0, C64::new(0.0, 0.0), 0.0);
    let (mut r1, mut r2) = (C64::new(0.0, 0.0), C64::new(0.0, 0.0));
    let mut scale: f64 = 0.0;
    for _ in 0..samples {
        let a = random::gaussian(d, rng);
        let b = random::gaussian(d, rng);
        let defect = data.leibniz_defect(&a, &b);
        let (x1, x2) = data.defect_basis(&a, &b);
        g11 += x1.norm_squared();
        g22 += x2.norm_squared();
        g12 += x1.dotc(&x2);
        r1 += x1.dotc(&defect);
        r2 += x2.dotc(&defect);
        scale = scale.max(max_abs(&defect)).max(max_abs(&x1));
        rows.push((defect, x1, x2));
    }
    let det = g11 * g22 - g12.norm_sqr();
    if scale < 1e-12 || det <= 1e-12 * g11.max(g22).max(1e-300).powi(2) {
        return Err(Error::IllConditionedFit(scale));
    }
    // [g11 g12; conj(g12) g22] [alpha; beta] = [r1; r2]
    let alpha = (r1 * g22 - g12 * r2) / det;
    let beta = (r2 * g11 - g12.conj() * r1) / det;
    let residual = rows.iter().map(|(dfc, x1, x2)| max_abs(&(dfc - x1 * alpha - x2 * beta))).fold(0.0, f64::max);
    let nbar = -alpha.re;
    Ok(NoiseFit {
        alpha: (alpha.re, alpha.im),
        beta: (beta.re, beta.im),
        nbar,
        consistency: (beta + C64::new(1.0 + nbar, 0.0)).norm(),
        residual,
    })
}
