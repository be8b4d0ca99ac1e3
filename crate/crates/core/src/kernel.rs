//! Momentum-space kernels rho(p_i, p_j): a grid of small internal matrices.
//!
//! Blocks are stored row-major over (i, j), each block column-major like `CMatrix`.
//! The slice helpers below avoid per-block allocation in the trajectory hot loops.

use crate::error::{Error, Result};
use crate::linalg::{c, CMatrix, C64};

#[derive(Debug, Clone, PartialEq)]
pub struct MomentumGrid {
    pub p: Vec<f64>,
    pub w: Vec<f64>,
}

impl MomentumGrid {
    /// `n` equispaced momenta on [lo, hi] with trapezoid weights.
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Self {
        assert!(n >= 2 && hi > lo);
        let dp = (hi - lo) / (n - 1) as f64;
        let p = (0..n).map(|i| lo + dp * i as f64).collect();
        let w = (0..n).map(|i| if i == 0 || i == n - 1 { 0.5 * dp } else { dp }).collect();
        MomentumGrid { p, w }
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.p[1] - self.p[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentumKernel {
    pub grid: MomentumGrid,
    pub dim: usize,
    pub data: Vec<C64>,
}

impl MomentumKernel {
    pub fn zeros(grid: MomentumGrid, dim: usize) -> Self {
        let g = grid.len();
        MomentumKernel { grid, dim, data: vec![C64::new(0.0, 0.0); g * g * dim * dim] }
    }

    /// rho(p, q) = f(p) conj(f(q)) rho0, normalized so that sum_i w_i Tr rho(p_i, p_i) = 1.
    pub fn product(grid: MomentumGrid, f: impl Fn(f64) -> C64, rho0: &CMatrix) -> Self {
        let dim = rho0.nrows();
        let amps: Vec<C64> = grid.p.iter().map(|&p| f(p)).collect();
        let mut k = MomentumKernel::zeros(grid, dim);
        let g = k.grid.len();
        for i in 0..g {
            for j in 0..g {
                let z = amps[i] * amps[j].conj();
                let blk = k.block_mut(i, j);
                for (b, r) in blk.iter_mut().zip(rho0.iter()) {
                    *b = z * r;
                }
            }
        }
        let total = k.total_trace();
        k.scale(1.0 / total);
        k
    }

    /// Diagonal kernel rho(p, p) = density(p) rho0, zero off the diagonal.
    pub fn diagonal(grid: MomentumGrid, density: impl Fn(f64) -> f64, rho0: &CMatrix) -> Self {
        let dim = rho0.nrows();
        let mut k = MomentumKernel::zeros(grid, dim);
        for i in 0..k.grid.len() {
            let d = density(k.grid.p[i]);
            let blk = k.block_mut(i, i);
            for (b, r) in blk.iter_mut().zip(rho0.iter()) {
                *b = r * d;
            }
        }
        let total = k.total_trace();
        k.scale(1.0 / total);
        k
    }

    #[inline]
    pub fn block_len(&self) -> usize {
        self.dim * self.dim
    }

    #[inline]
    pub fn block(&self, i: usize, j: usize) -> &[C64] {
        let b = self.block_len();
        let off = (i * self.grid.len() + j) * b;
        &self.data[off..off + b]
    }

    #[inline]
    pub fn block_mut(&mut self, i: usize, j: usize) -> &mut [C64] {
        let b = self.block_len();
        let off = (i * self.grid.len() + j) * b;
        &mut self.data[off..off + b]
    }

    pub fn block_matrix(&self, i: usize, j: usize) -> CMatrix {
        CMatrix::from_column_slice(self.dim, self.dim, self.block(i, j))
    }

    pub fn set_block(&mut self, i: usize, j: usize, m: &CMatrix) {
        self.block_mut(i, j).copy_from_slice(m.as_slice());
    }

    /// Tr rho(p_i, p_i).
    pub fn diag_trace(&self, i: usize) -> f64 {
        trace(self.dim, self.block(i, i)).re
    }

    /// w_i Tr rho(p_i, p_i), a probability vector for normalized kernels.
    pub fn diagonal_masses(&self) -> Vec<f64> {
        (0..self.grid.len()).map(|i| self.grid.w[i] * self.diag_trace(i)).collect()
    }

    pub fn total_trace(&self) -> f64 {
        self.diagonal_masses().iter().sum()
    }

    pub fn scale(&mut self, s: f64) {
        for z in &mut self.data {
            *z *= s;
        }
    }

    /// max over (i, j) of |rho(p_i, p_j) - rho(p_j, p_i)^H|.
    pub fn hermitian_defect(&self) -> f64 {
        let g = self.grid.len();
        let d = self.dim;
        let mut worst: f64 = 0.0;
        for i in 0..g {
            for j in 0..g {
                let a = self.block(i, j);
                let b = self.block(j, i);
                for r in 0..d {
                    for s in 0..d {
                        worst = worst.max((a[r + s * d] - b[s + r * d].conj()).norm());
                    }
                }
            }
        }
        worst
    }

    /// Mean momentum sum_i w_i p_i Tr rho(p_i, p_i).
    pub fn mean_momentum(&self) -> f64 {
        self.diagonal_masses().iter().zip(&self.grid.p).map(|(m, p)| m * p).sum()
    }

    /// Mass of the position density (1/2pi) sum w_i w_j e^{i(p_i - p_j)x} Tr rho(p_i, p_j)
    /// integrated over each bin [edges[b], edges[b+1]).
    pub fn position_bin_masses(&self, edges: &[f64]) -> Vec<f64> {
        self.position_bin_blocks(edges).iter().map(|m| m.trace().re).collect()
    }

    /// Internal matrix integrated over each position bin.
    pub fn position_bin_blocks(&self, edges: &[f64]) -> Vec<CMatrix> {
        let g = self.grid.len();
        let mut out = vec![CMatrix::zeros(self.dim, self.dim); edges.len().saturating_sub(1)];
        for (b, win) in edges.windows(2).enumerate() {
            let (x0, x1) = (win[0], win[1]);
            let mut acc = CMatrix::zeros(self.dim, self.dim);
            for i in 0..g {
                for j in 0..g {
                    let k = self.grid.p[i] - self.grid.p[j];
                    // integral of e^{ikx} over [x0, x1]
                    let f = if k.abs() < 1e-12 {
                        c(x1 - x0, 0.0)
                    } else {
                        (C64::new(0.0, k * x1).exp() - C64::new(0.0, k * x0).exp()) / C64::new(0.0, k)
                    };
                    let wgt = f * (self.grid.w[i] * self.grid.w[j] / (2.0 * std::f64::consts::PI));
                    for (a, z) in acc.iter_mut().zip(self.block(i, j)) {
                        *a += wgt * z;
                    }
                }
            }
            out[b] = acc;
        }
        out
    }

    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        let dev = (self.total_trace() - 1.0).abs();
        if dev > tol {
            Err(Error::QuadratureDrift(dev))
        } else {
            Ok(())
        }
    }
}

#[inline]
pub fn trace(d: usize, a: &[C64]) -> C64 {
    (0..d).map(|r| a[r + r * d]).sum()
}

/// out = a * b (column-major d x d blocks).
#[inline]
pub fn mul(d: usize, a: &[C64], b: &[C64], out: &mut [C64]) {
    for s in 0..d {
        for r in 0..d {
            let mut acc = C64::new(0.0, 0.0);
            for k in 0..d {
                acc += a[r + k * d] * b[k + s * d];
            }
            out[r + s * d] = acc;
        }
    }
}

/// out = a * b^H.
#[inline]
pub fn mul_adj(d: usize, a: &[C64], b: &[C64], out: &mut [C64]) {
    for s in 0..d {
        for r in 0..d {
            let mut acc = C64::new(0.0, 0.0);
            for k in 0..d {
                acc += a[r + k * d] * b[s + k * d].conj();
            }
            out[r + s * d] = acc;
        }
    }
}

/// out = a * x * b^H, using `tmp` as scratch.
#[inline]
pub fn sandwich(d: usize, a: &[C64], x: &[C64], b: &[C64], tmp: &mut [C64], out: &mut [C64]) {
    mul(d, a, x, tmp);
    mul_adj(d, tmp, b, out);
}
