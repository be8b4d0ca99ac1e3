//! Euler-Maruyama integrators for the continuum quantum-trajectory equations.
//!
//! Every step takes its Gaussian increment(s) as input, so the same noise stream can be
//! replayed through different integrators. The internal state is projected back onto
//! density matrices after each step.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::kernel::{mul, mul_adj, trace, MomentumKernel};
use crate::linalg::{c, comm, project_density, CMatrix, C64, I};
use crate::scaling::TiltParameter;

/// Largest tolerated |Tr rho - 1| before projection.
pub const PROJECTION_LIMIT: f64 = 0.1;

/// a rho b^H - (b^H a rho + rho b^H a) / 2.
pub fn dissipator(a: &CMatrix, b: &CMatrix, rho: &CMatrix) -> CMatrix {
    let bda = b.adjoint() * a;
    a * rho * b.adjoint() - (&bda * rho + rho * &bda) * c(0.5, 0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LindbladTerms {
    /// L_N(rho) = N rho N^H - {N^H N, rho}/2.
    pub l: CMatrix,
    /// D_N(rho) = N rho + rho N^H - rho U_N.
    pub d: CMatrix,
    /// U_N = Tr(N rho + rho N^H).
    pub u: f64,
}

pub fn lindblad_terms(rho: &CMatrix, n: &CMatrix) -> LindbladTerms {
    let l = dissipator(n, n, rho);
    let s = n * rho + rho * n.adjoint();
    let u = s.trace().re;
    let d = s - rho * c(u, 0.0);
    LindbladTerms { l, d, u }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimpleTrajState {
    pub rho: CMatrix,
    pub x: f64,
    pub t: f64,
}

impl SimpleTrajState {
    pub fn new(rho: CMatrix, x: f64) -> Self {
        SimpleTrajState { rho, x, t: 0.0 }
    }
}

/// rho + (-i[H, rho] + l) dt + d * noise, then projection; x + u dt + x_noise.
fn euler_update(
    s: &SimpleTrajState,
    h: &CMatrix,
    l: &CMatrix,
    d: &CMatrix,
    u: f64,
    dt: f64,
    noise_rho: f64,
    noise_x: f64,
) -> Result<SimpleTrajState> {
    let drift = comm(h, &s.rho) * (-I) + l;
    let raw = &s.rho + drift * c(dt, 0.0) + d * c(noise_rho, 0.0);
    let proj = project_density(&raw);
    if (proj.trace_before - 1.0).abs() > PROJECTION_LIMIT || !proj.trace_before.is_finite() {
        return Err(Error::ProjectionOverflow(proj.trace_before - 1.0));
    }
    Ok(SimpleTrajState { rho: proj.state, x: s.x + u * dt + noise_x, t: s.t + dt })
}

/// drho = (-i[H, rho] + L_N(rho)) dt + D_N(rho) dB, dX = U_N(rho) dt + dB.
pub fn simple_step(s: &SimpleTrajState, h: &CMatrix, n: &CMatrix, dt: f64, db: f64) -> Result<SimpleTrajState> {
    let t = lindblad_terms(&s.rho, n);
    euler_update(s, h, &t.l, &t.d, t.u, dt, db, db)
}

/// Simple step with coefficients frozen at the pre-step position.
pub fn inhomogeneous_step(
    s: &SimpleTrajState,
    h: &dyn Fn(f64) -> CMatrix,
    n: &dyn Fn(f64) -> CMatrix,
    dt: f64,
    db: f64,
) -> Result<SimpleTrajState> {
    simple_step(s, &h(s.x), &n(s.x), dt, db)
}

/// Thermal coefficients: kappa = 1 + 2 nbar, N' = (1 + nbar) N - nbar N^H.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermalCoefficients {
    pub kappa: f64,
    pub n_prime: CMatrix,
}

impl ThermalCoefficients {
    pub fn new(n: &CMatrix, nbar: f64) -> Self {
        ThermalCoefficients { kappa: 1.0 + 2.0 * nbar, n_prime: n * c(1.0 + nbar, 0.0) - n.adjoint() * c(nbar, 0.0) }
    }
}

/// drho = (-i[H, rho] + L'_N) dt + D'_N sqrt(kappa) dB, dX = U'_N dt + sqrt(kappa) dB,
/// with L'_N = (1 + nbar) L_N + nbar L_{N^H} and kappa D'_N = N' rho + rho N'^H - rho U'_N.
pub fn thermal_step(
    s: &SimpleTrajState,
    h: &CMatrix,
    n: &CMatrix,
    nbar: f64,
    dt: f64,
    db: f64,
) -> Result<SimpleTrajState> {
    assert!(nbar >= 0.0, "thermal occupation must be non-negative");
    let tc = ThermalCoefficients::new(n, nbar);
    let l =
        dissipator(n, n, &s.rho) * c(1.0 + nbar, 0.0) + dissipator(&n.adjoint(), &n.adjoint(), &s.rho) * c(nbar, 0.0);
    let sum = &tc.n_prime * &s.rho + &s.rho * tc.n_prime.adjoint();
    let u = sum.trace().re;
    let d = (sum - &s.rho * c(u, 0.0)) / c(tc.kappa, 0.0);
    let sk = tc.kappa.sqrt();
    euler_update(s, h, &l, &d, u, dt, sk * db, sk * db)
}

/// Constant metric G^{mu nu} (noise covariance) with its inverse and Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    pub g: DMatrix<f64>,
    pub g_inv: DMatrix<f64>,
    pub chol: DMatrix<f64>,
}

impl Metric {
    pub fn new(g: DMatrix<f64>) -> Result<Self> {
        if !g.is_square() || (&g - g.transpose()).amax() > 1e-12 {
            return Err(Error::NonSpdMetric);
        }
        let ch = g.clone().cholesky().ok_or(Error::NonSpdMetric)?;
        let chol = ch.l();
        let g_inv = ch.inverse();
        Ok(Metric { g, g_inv, chol })
    }

    pub fn identity(d: usize) -> Self {
        Metric::new(DMatrix::identity(d, d)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.g.nrows()
    }

    /// dB with covariance G dt.
    pub fn sample<R: Rng + ?Sized>(&self, dt: f64, rng: &mut R) -> Vec<f64> {
        let z =
            nalgebra::DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| crate::rng::normal(rng) * dt.sqrt()));
        (&self.chol * z).iter().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdimState {
    pub rho: CMatrix,
    pub x: Vec<f64>,
    pub t: f64,
}

/// L_N(rho) = G_{mu nu} (N^mu rho N^{nu H} - {N^{nu H} N^mu, rho}/2).
pub fn ddim_lindblad(rho: &CMatrix, ns: &[CMatrix], metric: &Metric) -> CMatrix {
    let d = ns.len();
    let mut acc: Option<CMatrix> = None;
    for mu in 0..d {
        for nu in 0..d {
            let gl = metric.g_inv[(mu, nu)];
            if gl == 0.0 {
                continue;
            }
            let term = dissipator(&ns[mu], &ns[nu], rho) * c(gl, 0.0);
            acc = Some(match acc {
                None => term,
                Some(a) => a + term,
            });
        }
    }
    acc.unwrap_or_else(|| CMatrix::zeros(rho.nrows(), rho.ncols()))
}

/// drho = (-i[H, rho] + L_N(rho)) dt + D_mu(rho) dB^mu, dX^mu = U^mu dt + dB^mu,
/// with G^{mu nu} D_nu = N^mu rho + rho N^{mu H} - rho U^mu.
pub fn ddim_step(
    s: &DdimState,
    h: &CMatrix,
    ns: &[CMatrix],
    metric: &Metric,
    dt: f64,
    db: &[f64],
) -> Result<DdimState> {
    let d = metric.dim();
    if ns.len() != d || db.len() != d || s.x.len() != d {
        return Err(Error::DimensionMismatch { expected: d, found: ns.len().min(db.len()).min(s.x.len()) });
    }
    let l = ddim_lindblad(&s.rho, ns, metric);
    let mut us = Vec::with_capacity(d);
    let mut raw_d = Vec::with_capacity(d);
    for n in ns {
        let sum = n * &s.rho + &s.rho * n.adjoint();
        let u = sum.trace().re;
        raw_d.push(sum - &s.rho * c(u, 0.0));
        us.push(u);
    }
    // noise = sum_nu D_nu dB^nu = sum_{nu, mu} G_{nu mu} raw_d[mu] dB^nu
    let mut noise: Option<CMatrix> = None;
    for mu in 0..d {
        let coeff: f64 = (0..d).map(|nu| metric.g_inv[(nu, mu)] * db[nu]).sum();
        let term = &raw_d[mu] * c(coeff, 0.0);
        noise = Some(match noise {
            None => term,
            Some(a) => a + term,
        });
    }
    let noise = noise.expect("d >= 1");
    let drift = comm(h, &s.rho) * (-I) + l;
    let raw = &s.rho + drift * c(dt, 0.0) + noise;
    let proj = project_density(&raw);
    if (proj.trace_before - 1.0).abs() > PROJECTION_LIMIT || !proj.trace_before.is_finite() {
        return Err(Error::ProjectionOverflow(proj.trace_before - 1.0));
    }
    let x = s.x.iter().zip(&us).zip(db).map(|((x, u), b)| x + u * dt + b).collect();
    Ok(DdimState { rho: proj.state, x, t: s.t + dt })
}

/// Momentum kernel of a tilted continuum trajectory together with its signal Y.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumKernelCont {
    pub kernel: MomentumKernel,
    pub y: f64,
    pub t: f64,
}

/// Tilted continuum integrator with per-momentum matrices precomputed.
///
/// With N_p = N - i p and K_p = -i(H + p (N + N^H)/2) - N_p^H N_p / 2 the generator is
/// K_p rho + rho K_q^H + N_p rho N_q^H and the noise coefficient is
/// conj(v) N_p rho + v rho N_q^H - U rho.
#[derive(Debug, Clone)]
pub struct TiltedSde {
    pub dim: usize,
    pub v: C64,
    np: Vec<CMatrix>,
    kp: Vec<CMatrix>,
    ap: Vec<CMatrix>,
    /// Only pairs with |i - j| <= band are evolved; others are held at zero.
    pub band: Option<usize>,
}

impl TiltedSde {
    pub fn new(h: &CMatrix, n: &CMatrix, v: TiltParameter, grid: &crate::kernel::MomentumGrid) -> Self {
        let d = h.nrows();
        let id = CMatrix::identity(d, d);
        let sym = (n + n.adjoint()) * c(0.5, 0.0);
        let np: Vec<CMatrix> = grid.p.iter().map(|&p| n - &id * c(0.0, p)).collect();
        let kp = grid
            .p
            .iter()
            .zip(&np)
            .map(|(&p, npm)| (h + &sym * c(p, 0.0)) * (-I) - npm.adjoint() * npm * c(0.5, 0.0))
            .collect();
        let ap = np.iter().map(|m| m * v.v.conj()).collect();
        TiltedSde { dim: d, v: v.v, np, kp, ap, band: None }
    }

    pub fn with_band(mut self, band: usize) -> Self {
        self.band = Some(band);
        self
    }

    /// U_{N,v} = sum_i w_i 2 Re Tr(conj(v) N_p rho(p, p)).
    pub fn signal_drift(&self, k: &MomentumKernel) -> f64 {
        let d = self.dim;
        (0..k.grid.len())
            .map(|i| {
                let (a, x) = (self.ap[i].as_slice(), k.block(i, i));
                let tr: C64 = (0..d).flat_map(|r| (0..d).map(move |q| a[r + q * d] * x[q + r * d])).sum();
                2.0 * k.grid.w[i] * tr.re
            })
            .sum()
    }

    /// Euler-Maruyama step with shared scalar increment `db`, then trace renormalization.
    pub fn step(&self, s: &MomentumKernelCont, dt: f64, db: f64) -> Result<MomentumKernelCont> {
        let mut out = s.clone();
        self.step_in_place(&mut out, dt, db, &mut TiltedScratch::default())?;
        Ok(out)
    }

    /// As [`TiltedSde::step`], reusing `scratch`; `s` is untouched on error.
    pub fn step_in_place(
        &self,
        s: &mut MomentumKernelCont,
        dt: f64,
        db: f64,
        scratch: &mut TiltedScratch,
    ) -> Result<()> {
        let d = self.dim;
        let dd = d * d;
        let k = &s.kernel;
        let g = k.grid.len();
        let u = self.signal_drift(k);
        // M_p = K_p dt + (A_p - U/2) dB, so rho' = rho + M_p rho + rho M_q^H + dt N_p rho N_q^H.
        scratch.mp.clear();
        for i in 0..g {
            let (kp, ap) = (self.kp[i].as_slice(), self.ap[i].as_slice());
            for r in 0..dd {
                let diag = if r % (d + 1) == 0 { 0.5 * u } else { 0.0 };
                scratch.mp.push(kp[r] * dt + (ap[r] - diag) * db);
            }
        }
        scratch.next.clear();
        scratch.next.resize(k.data.len(), C64::new(0.0, 0.0));
        scratch.tmp.resize(4 * dd, C64::new(0.0, 0.0));
        let mp = &scratch.mp;
        let next = &mut scratch.next;
        let (t1, rest) = scratch.tmp.split_at_mut(dd);
        let (t2, rest) = rest.split_at_mut(dd);
        let (t3, t4) = rest.split_at_mut(dd);
        for i in 0..g {
            for j in i..g {
                if let Some(b) = self.band {
                    if j - i > b {
                        continue;
                    }
                }
                let off = (i * g + j) * dd;
                if d == 1 {
                    let x = k.data[off];
                    let z = x * (1.0 + mp[i] + mp[j].conj() + self.np[i][0] * self.np[j][0].conj() * dt);
                    next[off] = z;
                    next[j * g + i] = z.conj();
                    continue;
                }
                let x = k.block(i, j);
                mul(d, &mp[i * dd..(i + 1) * dd], x, t1);
                mul_adj(d, x, &mp[j * dd..(j + 1) * dd], t2);
                mul(d, self.np[i].as_slice(), x, t3);
                mul_adj(d, t3, self.np[j].as_slice(), t4);
                for r in 0..dd {
                    next[off + r] = x[r] + t1[r] + t2[r] + t4[r] * dt;
                }
                if j != i {
                    let dst = (j * g + i) * dd;
                    for r in 0..d {
                        for q in 0..d {
                            next[dst + r + q * d] = next[off + q + r * d].conj();
                        }
                    }
                }
            }
        }
        let tot: f64 = (0..g).map(|i| k.grid.w[i] * trace(d, &next[(i * g + i) * dd..(i * g + i + 1) * dd]).re).sum();
        if (tot - 1.0).abs() > PROJECTION_LIMIT || !tot.is_finite() {
            return Err(Error::ProjectionOverflow(tot - 1.0));
        }
        let r = 1.0 / tot;
        for z in next.iter_mut() {
            *z *= r;
        }
        std::mem::swap(&mut s.kernel.data, next);
        s.y += u * dt + db;
        s.t += dt;
        Ok(())
    }
}

/// Reusable buffers for [`TiltedSde::step_in_place`].
#[derive(Debug, Clone, Default)]
pub struct TiltedScratch {
    mp: Vec<C64>,
    next: Vec<C64>,
    tmp: Vec<C64>,
}

/// One tilted continuum step; see [`TiltedSde`] to amortize the setup.
pub fn tilted_momentum_step(
    s: &MomentumKernelCont,
    h: &CMatrix,
    n: &CMatrix,
    v: TiltParameter,
    dt: f64,
    db: f64,
) -> Result<MomentumKernelCont> {
    TiltedSde::new(h, n, v, &s.kernel.grid).step(s, dt, db)
}

/// Runs `steps` simple steps from `s0` with increments drawn from `rng`.
pub fn simple_path<R: Rng + ?Sized>(
    s0: &SimpleTrajState,
    h: &CMatrix,
    n: &CMatrix,
    dt: f64,
    steps: usize,
    rng: &mut R,
) -> Result<SimpleTrajState> {
    let sq = dt.sqrt();
    let mut s = s0.clone();
    for _ in 0..steps {
        s = simple_step(&s, h, n, dt, sq * crate::rng::normal(rng))?;
    }
    Ok(s)
}
