//! Deterministic propagation of the averaged dynamics: exact exponentials per momentum
//! pair, an explicit finite-difference solver for the position-diagonal field, and the
//! comparison against binned trajectory ensembles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c, comm, expm, matrix_exp_apply, max_abs, unvec, vec_of, CMatrix, Superop, I};
use crate::sde::{dissipator, SimpleTrajState, ThermalCoefficients};

/// X -> -(p-q)^2 X / 2 - i(p-q)(N X + X N^H) - i[H, X] + L_N(X).
pub fn momentum_generator(p: f64, q: f64, h: &CMatrix, n: &CMatrix) -> Superop {
    thermal_momentum_generator(p, q, h, n, 0.0)
}

/// Momentum-space generator at temperature nbar (nbar = 0 gives [`momentum_generator`]).
pub fn thermal_momentum_generator(p: f64, q: f64, h: &CMatrix, n: &CMatrix, nbar: f64) -> Superop {
    Superop::from_fn(h.nrows(), |x| thermal_lindblad_rhs(x, p, q, h, n, nbar))
}

/// -i[H, X] - kappa (p-q)^2 X / 2 - i(p-q)(N' X + X N'^H) + (1+nbar) L_N(X) + nbar L_{N^H}(X).
pub fn thermal_lindblad_rhs(x: &CMatrix, p: f64, q: f64, h: &CMatrix, n: &CMatrix, nbar: f64) -> CMatrix {
    let tc = ThermalCoefficients::new(n, nbar);
    let k = p - q;
    let nd = n.adjoint();
    comm(h, x) * (-I) - x * c(0.5 * tc.kappa * k * k, 0.0) - (&tc.n_prime * x + x * tc.n_prime.adjoint()) * c(0.0, k)
        + dissipator(n, n, x) * c(1.0 + nbar, 0.0)
        + dissipator(&nd, &nd, x) * c(nbar, 0.0)
}

pub fn momentum_pair_propagate(p: f64, q: f64, rho0: &CMatrix, h: &CMatrix, n: &CMatrix, t: f64) -> Result<CMatrix> {
    matrix_exp_apply(&momentum_generator(p, q, h, n), t, rho0)
}

/// exp(t G) for a fixed generator, reused across many initial matrices.
#[derive(Debug, Clone)]
pub struct Propagator {
    pub dim: usize,
    pub mat: CMatrix,
}

impl Propagator {
    pub fn new(g: &Superop, t: f64) -> Result<Self> {
        Ok(Propagator { dim: g.dim, mat: expm(&(&g.mat * c(t, 0.0)))? })
    }

    pub fn apply(&self, x: &CMatrix) -> CMatrix {
        unvec(&(&self.mat * vec_of(x)), self.dim)
    }
}

/// Internal matrices on a uniform position grid, x_i = x0 + i dx.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionDiagonalField {
    pub x0: f64,
    pub dx: f64,
    pub cells: Vec<CMatrix>,
}

impl PositionDiagonalField {
    /// All mass in the cell nearest to `x`, as a density (rho / dx).
    pub fn delta(x0: f64, dx: f64, n: usize, x: f64, rho: &CMatrix) -> Self {
        let mut cells = vec![CMatrix::zeros(rho.nrows(), rho.ncols()); n];
        let i = ((x - x0) / dx).round() as usize;
        cells[i] = rho / c(dx, 0.0);
        PositionDiagonalField { x0, dx, cells }
    }

    /// rho(x) = density(x) rho0, normalized on the grid.
    pub fn from_density(x0: f64, dx: f64, n: usize, density: impl Fn(f64) -> f64, rho0: &CMatrix) -> Self {
        let mut f = PositionDiagonalField {
            x0,
            dx,
            cells: (0..n).map(|i| rho0 * c(density(x0 + dx * i as f64), 0.0)).collect(),
        };
        let m = f.mass();
        for cell in &mut f.cells {
            *cell /= c(m, 0.0);
        }
        f
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x0 + self.dx * i as f64
    }

    /// sum_i dx Tr rho(x_i).
    pub fn mass(&self) -> f64 {
        self.cells.iter().map(|m| m.trace().re).sum::<f64>() * self.dx
    }

    pub fn moments(&self) -> (f64, f64) {
        let m = self.mass();
        let mean = (0..self.cells.len()).map(|i| self.x(i) * self.cells[i].trace().re).sum::<f64>() * self.dx / m;
        let var = (0..self.cells.len()).map(|i| (self.x(i) - mean).powi(2) * self.cells[i].trace().re).sum::<f64>()
            * self.dx
            / m;
        (mean, var)
    }

    /// Mass in the outermost `width` cells on each side.
    pub fn boundary_mass(&self, width: usize) -> f64 {
        let n = self.cells.len();
        let w = width.min(n);
        (0..w).chain(n - w..n).map(|i| self.cells[i].trace().re.abs()).sum::<f64>() * self.dx
    }

    /// Cell integrals dx rho(x_i) accumulated into bins by cell center.
    /// Integrals over bins, each cell spread uniformly over [x_i - dx/2, x_i + dx/2] and split
    /// across the bins it overlaps.
    pub fn bin_blocks(&self, edges: &[f64]) -> Vec<CMatrix> {
        let d = self.cells[0].nrows();
        let mut out = vec![CMatrix::zeros(d, d); edges.len() - 1];
        for (i, cell) in self.cells.iter().enumerate() {
            let (lo, hi) = (self.x(i) - 0.5 * self.dx, self.x(i) + 0.5 * self.dx);
            let first = edges.partition_point(|&e| e <= lo).saturating_sub(1);
            for b in first..out.len() {
                if edges[b] >= hi {
                    break;
                }
                let overlap = hi.min(edges[b + 1]) - lo.max(edges[b]);
                if overlap > 0.0 {
                    out[b] += cell * c(overlap, 0.0);
                }
            }
        }
        out
    }
}

pub fn bin_index(edges: &[f64], x: f64) -> Option<usize> {
    if x < edges[0] || x >= edges[edges.len() - 1] {
        return None;
    }
    let b = edges.partition_point(|&e| e <= x);
    Some(b - 1)
}

pub fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins).map(|b| lo + (hi - lo) * b as f64 / bins as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftScheme {
    /// Face flux is the mean of the two cell fluxes.
    Central,
    /// Face flux taken from the upwind cell by the sign of U = 2 Re N (scalar fields only).
    Upwind,
}

/// Explicit conservative scheme for
/// d rho = -i[H, rho] + (kappa/2) rho'' - (N rho + rho N^H)' + L_N(rho) with no-flux ends.
#[derive(Debug, Clone)]
pub struct DiagonalPde {
    pub dx: f64,
    pub kappa: f64,
    pub scheme: DriftScheme,
    h: Vec<CMatrix>,
    n: Vec<CMatrix>,
}

impl DiagonalPde {
    pub fn new(
        field: &PositionDiagonalField,
        h: &dyn Fn(f64) -> CMatrix,
        n: &dyn Fn(f64) -> CMatrix,
        kappa: f64,
        scheme: DriftScheme,
    ) -> Result<Self> {
        if kappa < 1.0 {
            return Err(Error::ConfigInvalid(format!("kappa = {kappa} must be at least 1")));
        }
        let dim = field.cells[0].nrows();
        if scheme == DriftScheme::Upwind && dim != 1 {
            return Err(Error::ConfigInvalid("upwind drift needs a scalar field".into()));
        }
        let xs: Vec<f64> = (0..field.cells.len()).map(|i| field.x(i)).collect();
        Ok(DiagonalPde {
            dx: field.dx,
            kappa,
            scheme,
            h: xs.iter().map(|&x| h(x)).collect(),
            n: xs.iter().map(|&x| n(x)).collect(),
        })
    }

    pub fn stability_bound(&self) -> f64 {
        0.4 * self.dx * self.dx / self.kappa
    }

    pub fn step(&self, f: &PositionDiagonalField, dt: f64) -> Result<PositionDiagonalField> {
        let bound = self.stability_bound();
        if dt > bound * (1.0 + 1e-12) {
            return Err(Error::CflViolation { dt, bound });
        }
        let m = f.cells.len();
        let dx = self.dx;
        let j: Vec<CMatrix> = (0..m).map(|i| &self.n[i] * &f.cells[i] + &f.cells[i] * self.n[i].adjoint()).collect();
        // face k sits between cells k-1 and k; faces 0 and m are closed
        let mut flux = vec![CMatrix::zeros(f.cells[0].nrows(), f.cells[0].ncols()); m + 1];
        for k in 1..m {
            let diff = (&f.cells[k] - &f.cells[k - 1]) * c(0.5 * self.kappa / dx, 0.0);
            let adv = match self.scheme {
                DriftScheme::Central => (&j[k - 1] + &j[k]) * c(0.5, 0.0),
                DriftScheme::Upwind => {
                    let u = 0.5 * (2.0 * self.n[k - 1][(0, 0)].re + 2.0 * self.n[k][(0, 0)].re);
                    if u >= 0.0 {
                        j[k - 1].clone()
                    } else {
                        j[k].clone()
                    }
                }
            };
            flux[k] = adv - diff;
        }
        let cells = (0..m)
            .map(|i| {
                let local = comm(&self.h[i], &f.cells[i]) * (-I) + dissipator(&self.n[i], &self.n[i], &f.cells[i]);
                &f.cells[i] + (local - (&flux[i + 1] - &flux[i]) / c(dx, 0.0)) * c(dt, 0.0)
            })
            .collect();
        Ok(PositionDiagonalField { x0: f.x0, dx, cells })
    }
}

pub fn diagonal_pde_step(
    field: &PositionDiagonalField,
    h: &dyn Fn(f64) -> CMatrix,
    n: &dyn Fn(f64) -> CMatrix,
    dt: f64,
    kappa: f64,
) -> Result<PositionDiagonalField> {
    let scheme = if field.cells[0].nrows() == 1 { DriftScheme::Upwind } else { DriftScheme::Central };
    DiagonalPde::new(field, h, n, kappa, scheme)?.step(field, dt)
}

/// Bin integrals of rho_t(x) for homogeneous (H, N) and initial data rho0 at x = x0,
/// from exp(t G_k) rho0 integrated over k = p - q by the trapezoid rule on [-kmax, kmax].
pub fn fourier_bin_blocks(
    rho0: &CMatrix,
    x0: f64,
    h: &CMatrix,
    n: &CMatrix,
    nbar: f64,
    t: f64,
    edges: &[f64],
    dk: f64,
) -> Result<Vec<CMatrix>> {
    let kappa = 1.0 + 2.0 * nbar;
    // e^{-kappa k^2 t / 2} < e^{-40} beyond kmax
    let kmax = (80.0 / (kappa * t)).sqrt();
    let nk = (2.0 * kmax / dk).ceil() as usize;
    let dk = 2.0 * kmax / nk as f64;
    let d = rho0.nrows();
    let mut out = vec![CMatrix::zeros(d, d); edges.len() - 1];
    for s in 0..=nk {
        let k = -kmax + dk * s as f64;
        let w = if s == 0 || s == nk { 0.5 * dk } else { dk };
        let rk = matrix_exp_apply(&thermal_momentum_generator(k, 0.0, h, n, nbar), t, rho0)?;
        for (b, win) in edges.windows(2).enumerate() {
            let (a0, a1) = (win[0] - x0, win[1] - x0);
            let f = if k.abs() < 1e-14 {
                c(a1 - a0, 0.0)
            } else {
                (c(0.0, k * a1).exp() - c(0.0, k * a0).exp()) / c(0.0, k)
            };
            out[b] += &rk * (f * (w / (2.0 * std::f64::consts::PI)));
        }
    }
    Ok(out)
}

/// Distance between binned trajectory averages and a reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AverageReport {
    /// sup over bins of |Tr difference|.
    pub sup_trace: f64,
    /// sup over bins of the max-entry norm of the matrix difference.
    pub sup_matrix: f64,
    pub paths: usize,
    pub outside: usize,
}

/// (1/n) sum over paths ending in each bin of rho_t.
pub fn bin_ensemble(states: &[SimpleTrajState], edges: &[f64]) -> (Vec<CMatrix>, usize) {
    let d = states[0].rho.nrows();
    let mut out = vec![CMatrix::zeros(d, d); edges.len() - 1];
    let mut outside = 0;
    let w = c(1.0 / states.len() as f64, 0.0);
    for s in states {
        match bin_index(edges, s.x) {
            Some(b) => out[b] += &s.rho * w,
            None => outside += 1,
        }
    }
    (out, outside)
}

pub fn compare_bins(a: &[CMatrix], b: &[CMatrix]) -> (f64, f64) {
    a.iter().zip(b).fold((0.0, 0.0), |(st, sm), (x, y)| {
        let d = x - y;
        (f64::max(st, d.trace().norm()), f64::max(sm, max_abs(&d)))
    })
}

pub fn trajectory_average_check(states: &[SimpleTrajState], reference: &[CMatrix], edges: &[f64]) -> AverageReport {
    let (bins, outside) = bin_ensemble(states, edges);
    let (sup_trace, sup_matrix) = compare_bins(&bins, reference);
    AverageReport { sup_trace, sup_matrix, paths: states.len(), outside }
}
