//! Discrete transition pairs from continuum moduli, and the tilt parameter v.

use serde::{Deserialize, Serialize};

use crate::discrete::{TiltAngles, TransitionPair};
use crate::error::{Error, Result};
use crate::linalg::{c, herm_eig, herm_fn, max_abs, CMatrix, C64};

/// Continuum moduli plus the lattice discretization delta^2 = epsilon.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub h: CMatrix,
    pub n: CMatrix,
    pub m: CMatrix,
    pub nbar: f64,
    pub epsilon: f64,
    pub delta: f64,
}

impl ModelParams {
    pub fn new(h: CMatrix, n: CMatrix, epsilon: f64) -> Result<Self> {
        let dim = h.nrows();
        let p = ModelParams { m: CMatrix::zeros(dim, dim), h, n, nbar: 0.0, epsilon, delta: epsilon.sqrt() };
        p.validate()?;
        Ok(p)
    }

    pub fn with_m(mut self, m: CMatrix) -> Result<Self> {
        self.m = m;
        self.validate()?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.h.nrows();
        for (name, mat) in [("N", &self.n), ("M", &self.m)] {
            if mat.nrows() != d || mat.ncols() != d {
                return Err(Error::ConfigInvalid(format!(
                    "{name} has shape {}x{}, expected {d}x{d}",
                    mat.nrows(),
                    mat.ncols()
                )));
            }
        }
        if max_abs(&(&self.h - self.h.adjoint())) > 1e-12 {
            return Err(Error::ConfigInvalid("H is not Hermitian".into()));
        }
        if !(self.epsilon > 0.0) || !(self.nbar >= 0.0) {
            return Err(Error::ConfigInvalid("epsilon must be positive and nbar non-negative".into()));
        }
        if (self.delta * self.delta - self.epsilon).abs() > 1e-15 {
            return Err(Error::ConfigInvalid("delta^2 must equal epsilon".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairMode {
    /// The small-epsilon expansion as written.
    Truncated,
    /// The expansion right-multiplied by S^{-1/2}, S = B+^H B+ + B-^H B-.
    Unitarized,
}

/// B+- = (1 +- delta N - epsilon (iH +- M + N^H N / 2)) / sqrt 2, optionally unitarized.
pub fn build_transition_pair(params: &ModelParams, mode: PairMode) -> Result<TransitionPair> {
    params.validate()?;
    let d = params.dim();
    let id = CMatrix::identity(d, d);
    let dl = c(params.delta, 0.0);
    let eps = c(params.epsilon, 0.0);
    let k = &params.h * c(0.0, 1.0) + params.n.adjoint() * &params.n * c(0.5, 0.0);
    let s2 = c(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    let bp = (&id + &params.n * dl - (&k + &params.m) * eps) * s2;
    let bm = (&id - &params.n * dl - (&k - &params.m) * eps) * s2;
    match mode {
        PairMode::Truncated => Ok(TransitionPair::new(bp, bm)),
        PairMode::Unitarized => {
            let s = crate::linalg::hermitize(&(bp.adjoint() * &bp + bm.adjoint() * &bm));
            let (vals, _) = herm_eig(&s);
            if vals[0] < 1e-12 {
                return Err(Error::SingularNormalization(vals[0]));
            }
            let inv_sqrt = herm_fn(&s, |x| 1.0 / x.sqrt());
            Ok(TransitionPair::new(bp * &inv_sqrt, bm * inv_sqrt))
        }
    }
}

/// Unimodular tilt parameter of a continuum tilted trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltParameter {
    pub v: C64,
}

impl TiltParameter {
    pub fn new(v: C64) -> Result<Self> {
        if (v.norm_sqr() - 1.0).abs() > 1e-12 {
            return Err(Error::ConfigInvalid(format!("tilt parameter must be unimodular, |v| = {}", v.norm())));
        }
        Ok(TiltParameter { v })
    }
}

/// v = (cos t + i sin t sin f) / sqrt(1 - sin^2 t cos^2 f).
pub fn tilt_v(u: TiltAngles) -> Result<TiltParameter> {
    let (st, ct) = u.theta.sin_cos();
    let (sf, cf) = u.phi.sin_cos();
    let q = st * st * cf * cf;
    if q >= 1.0 - 1e-12 {
        return Err(Error::DegenerateDirection(format!("sin^2(theta) cos^2(phi) = {q}")));
    }
    Ok(TiltParameter { v: c(ct, st * sf) / (1.0 - q).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{pauli, scalar};
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn trivial_moduli_give_balanced_pair() {
        let p = ModelParams::new(CMatrix::zeros(2, 2), CMatrix::zeros(2, 2), 1e-3).unwrap();
        let pair = build_transition_pair(&p, PairMode::Truncated).unwrap();
        assert!(max_abs(&(&pair.bplus - scalar(std::f64::consts::FRAC_1_SQRT_2, 2))) < 1e-16);
        assert!(pair.unitarity_residual <= 1e-15);
    }

    #[test]
    fn truncation_residual_is_exactly_eps_squared_k_dagger_k() {
        // With M = 0 the odd orders cancel and S - 1 = eps^2 K^H K, K = iH + N^H N / 2.
        let [_, s2, s3] = pauli();
        let h = -s2.clone();
        let n = s3 * c(3.0, 0.0);
        let eps = 1e-4;
        let p = ModelParams::new(h.clone(), n.clone(), eps).unwrap();
        let tr = build_transition_pair(&p, PairMode::Truncated).unwrap();
        let k = &h * c(0.0, 1.0) + n.adjoint() * &n * c(0.5, 0.0);
        let expect = eps * eps * max_abs(&(k.adjoint() * k));
        assert!((tr.unitarity_residual - expect).abs() < 1e-3 * expect, "{} vs {expect}", tr.unitarity_residual);
        let un = build_transition_pair(&p, PairMode::Unitarized).unwrap();
        assert!(un.unitarity_residual <= 1e-12);
        let diff = max_abs(&(&tr.bplus - &un.bplus)).max(max_abs(&(&tr.bminus - &un.bminus)));
        assert!(diff <= eps.powf(1.5), "{diff}");
    }

    #[test]
    fn tilt_parameter_values() {
        assert_eq!(tilt_v(TiltAngles { theta: 0.0, phi: 1.3 }).unwrap().v, c(1.0, 0.0));
        let v = tilt_v(TiltAngles { theta: FRAC_PI_2, phi: FRAC_PI_2 }).unwrap().v;
        assert!((v - c(0.0, 1.0)).norm() < 1e-15);
        let v = tilt_v(TiltAngles { theta: std::f64::consts::PI, phi: 0.4 }).unwrap().v;
        assert!((v + c(1.0, 0.0)).norm() < 1e-15);
        assert!(matches!(tilt_v(TiltAngles { theta: FRAC_PI_2, phi: 0.0 }), Err(Error::DegenerateDirection(_))));
    }

    #[test]
    fn non_hermitian_h_rejected() {
        let [s1, _, _] = pauli();
        let h = s1 * c(0.0, 1.0);
        assert!(matches!(ModelParams::new(h, CMatrix::zeros(2, 2), 1e-2), Err(Error::ConfigInvalid(_))));
    }
}
