//! Exact discrete-time engines: path enumeration, tilted walks on Z_N, and open quantum
//! random walk maps and trajectories.
//!
//! Step functions take an explicit uniform draw in [0, 1) so every step consumes exactly
//! one variate; outcome `+` is selected when `draw < p_plus`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::kernel::{mul, mul_adj, sandwich, trace, MomentumGrid, MomentumKernel};
use crate::linalg::{c, max_abs, CMatrix, C64};

pub const MAX_ENUMERATION_STEPS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Plus,
    Minus,
}

impl Outcome {
    pub fn sign(self) -> i64 {
        match self {
            Outcome::Plus => 1,
            Outcome::Minus => -1,
        }
    }
}

/// Measurement direction of the probe spin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltAngles {
    pub theta: f64,
    pub phi: f64,
}

impl TiltAngles {
    /// Overlaps [<+u|+>, <+u|->, <-u|+>, <-u|->].
    pub fn overlaps(&self) -> [C64; 4] {
        let (s, co) = (0.5 * self.theta).sin_cos();
        let e = C64::from_polar(1.0, -0.5 * self.phi);
        let ec = e.conj();
        [e * co, ec * s, -e * s, ec * co]
    }

    /// (<o u|+>, <o u|->) for outcome o.
    pub fn overlap_pair(&self, o: Outcome) -> (C64, C64) {
        let ov = self.overlaps();
        match o {
            Outcome::Plus => (ov[0], ov[1]),
            Outcome::Minus => (ov[2], ov[3]),
        }
    }
}

/// Left and right transition matrices with B+^H B+ + B-^H B- = 1 up to the recorded residual.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionPair {
    pub bplus: CMatrix,
    pub bminus: CMatrix,
    pub unitarity_residual: f64,
}

impl TransitionPair {
    pub fn new(bplus: CMatrix, bminus: CMatrix) -> Self {
        let d = bplus.nrows();
        let s = bplus.adjoint() * &bplus + bminus.adjoint() * &bminus;
        let unitarity_residual = max_abs(&(s - CMatrix::identity(d, d)));
        TransitionPair { bplus, bminus, unitarity_residual }
    }

    pub fn dim(&self) -> usize {
        self.bplus.nrows()
    }

    pub fn get(&self, o: Outcome) -> &CMatrix {
        match o {
            Outcome::Plus => &self.bplus,
            Outcome::Minus => &self.bminus,
        }
    }

    pub fn is_exact(&self) -> bool {
        self.unitarity_residual <= 1e-12
    }

    /// B+- = 1 / sqrt 2, the unbiased walk.
    pub fn balanced(dim: usize) -> Self {
        let b = CMatrix::identity(dim, dim) * c(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        TransitionPair::new(b.clone(), b)
    }

    /// An exact pair (V1 cos A, V2 sin A) W built from unitaries and a Hermitian angle matrix.
    pub fn random_exact<R: rand::Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        use crate::linalg::{herm_fn, random};
        let a = random::hermitian(dim, rng);
        let cos = herm_fn(&a, f64::cos);
        let sin = herm_fn(&a, f64::sin);
        let w = random::unitary(dim, rng);
        let bp = random::unitary(dim, rng) * cos * &w;
        let bm = random::unitary(dim, rng) * sin * &w;
        // One polish by S^{-1/2} removes the eigen-solver residual of cos^2 + sin^2.
        let s = crate::linalg::hermitize(&(bp.adjoint() * &bp + bm.adjoint() * &bm));
        let fix = herm_fn(&s, |x| 1.0 / x.sqrt());
        TransitionPair::new(bp * &fix, bm * fix)
    }
}

/// One walk of the probe register: its outcome sequence, ordered product and endpoint.
#[derive(Debug, Clone)]
pub struct PathAmplitude {
    /// Outcomes in time order.
    pub path: Vec<Outcome>,
    /// B_{w_n} ... B_{w_1}.
    pub amplitude: CMatrix,
    pub endpoint: i64,
}

impl PathAmplitude {
    /// Tr(B[w] rho0 B[w]^H).
    pub fn weight(&self, rho0: &CMatrix) -> f64 {
        (&self.amplitude * rho0 * self.amplitude.adjoint()).trace().re
    }
}

/// All 2^n ordered products of B+- with their lattice endpoints.
pub fn enumerate_parallel_state(pair: &TransitionPair, x0: i64, n: usize) -> Result<Vec<PathAmplitude>> {
    if n > MAX_ENUMERATION_STEPS {
        return Err(Error::BudgetExceeded { steps: n, limit: MAX_ENUMERATION_STEPS });
    }
    let d = pair.dim();
    let mut paths = vec![PathAmplitude { path: Vec::new(), amplitude: CMatrix::identity(d, d), endpoint: x0 }];
    for _ in 0..n {
        let mut next = Vec::with_capacity(paths.len() * 2);
        for p in &paths {
            for o in [Outcome::Plus, Outcome::Minus] {
                let mut path = p.path.clone();
                path.push(o);
                next.push(PathAmplitude {
                    path,
                    amplitude: pair.get(o) * &p.amplitude,
                    endpoint: p.endpoint + o.sign(),
                });
            }
        }
        paths = next;
    }
    Ok(paths)
}

/// Tilted walk on Z_N in momentum representation.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltedWalkState {
    pub phi: Vec<C64>,
}

impl TiltedWalkState {
    pub fn new(phi: Vec<C64>) -> Result<Self> {
        if phi.len() < 2 {
            return Err(Error::ConfigInvalid("tilted walk needs at least 2 sites".into()));
        }
        let norm: f64 = phi.iter().map(|z| z.norm_sqr()).sum();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(Error::ConfigInvalid(format!("momentum amplitudes have norm^2 {norm}")));
        }
        Ok(TiltedWalkState { phi })
    }

    pub fn sites(&self) -> usize {
        self.phi.len()
    }

    pub fn masses(&self) -> Vec<f64> {
        self.phi.iter().map(|z| z.norm_sqr()).collect()
    }

    /// psi_x = N^{-1/2} sum_k phi_k e^{2 pi i k x / N}.
    pub fn position_amplitudes(&self) -> Vec<C64> {
        let n = self.sites();
        let s = 1.0 / (n as f64).sqrt();
        (0..n)
            .map(|x| (0..n).map(|k| self.phi[k] * C64::from_polar(s, 2.0 * PI * (k * x % n) as f64 / n as f64)).sum())
            .collect()
    }
}

/// cos(4 pi k / N + phi) for every momentum index.
pub fn tilt_cosines(n: usize, u: TiltAngles) -> Vec<f64> {
    (0..n).map(|k| (4.0 * PI * k as f64 / n as f64 + u.phi).cos()).collect()
}

/// p+ = (1 + sin(theta) sum_l cos(4 pi l / N + phi) |phi_l|^2) / 2.
pub fn tilted_walk_p_plus(masses: &[f64], u: TiltAngles) -> f64 {
    let cs = tilt_cosines(masses.len(), u);
    0.5 * (1.0 + u.theta.sin() * cs.iter().zip(masses).map(|(c, m)| c * m).sum::<f64>())
}

/// Amplitude update for a given outcome; returns the unnormalized state and p_o.
pub fn tilted_walk_branch(state: &TiltedWalkState, u: TiltAngles, o: Outcome) -> (Vec<C64>, f64) {
    let n = state.sites();
    let (a, b) = u.overlap_pair(o);
    let fs: Vec<C64> = (0..n)
        .map(|k| {
            let e = C64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64);
            (a * e + b * e.conj()) * std::f64::consts::FRAC_1_SQRT_2
        })
        .collect();
    let out: Vec<C64> = state.phi.iter().zip(&fs).map(|(p, f)| p * f).collect();
    let prob = out.iter().map(|z| z.norm_sqr()).sum();
    (out, prob)
}

pub fn tilted_walk_step(state: &TiltedWalkState, u: TiltAngles, draw: f64) -> Result<(TiltedWalkState, Outcome, f64)> {
    let p_plus = tilted_walk_p_plus(&state.masses(), u);
    if p_plus.min(1.0 - p_plus) < 1e-12 && u.theta.sin().abs() > 1.0 - 1e-12 {
        return Err(Error::DegenerateDirection(format!("p+ = {p_plus:e} at sin(theta) = +-1")));
    }
    let o = if draw < p_plus { Outcome::Plus } else { Outcome::Minus };
    let (phi, prob) = tilted_walk_branch(state, u, o);
    let s = 1.0 / prob.sqrt();
    Ok((TiltedWalkState { phi: phi.into_iter().map(|z| z * s).collect() }, o, p_plus))
}

/// Mass-only form of the tilted walk: |phi_k|^2 evolves by (1 +- sin(theta) cos_k)/(2 p+-)
/// independently of the phases, which is all the collapse statistics need.
#[derive(Debug, Clone)]
pub struct MassWalk {
    plus: Vec<f64>,
    minus: Vec<f64>,
    sin_cos: Vec<f64>,
}

impl MassWalk {
    pub fn new(n: usize, u: TiltAngles) -> Self {
        let s = u.theta.sin();
        let sin_cos: Vec<f64> = tilt_cosines(n, u).iter().map(|c| s * c).collect();
        MassWalk {
            plus: sin_cos.iter().map(|x| 1.0 + x).collect(),
            minus: sin_cos.iter().map(|x| 1.0 - x).collect(),
            sin_cos,
        }
    }

    pub fn p_plus(&self, m: &[f64]) -> f64 {
        0.5 * (1.0 + self.sin_cos.iter().zip(m).map(|(a, b)| a * b).sum::<f64>())
    }

    /// Updates `m` in place and returns the outcome.
    pub fn step(&self, m: &mut [f64], draw: f64) -> Outcome {
        let p = self.p_plus(m);
        let (o, f, prob) =
            if draw < p { (Outcome::Plus, &self.plus, p) } else { (Outcome::Minus, &self.minus, 1.0 - p) };
        let s = 0.5 / prob;
        for (x, g) in m.iter_mut().zip(f) {
            *x *= g * s;
        }
        // Rounding drift is removed so the masses stay a probability vector over long runs.
        let tot: f64 = m.iter().sum();
        let r = 1.0 / tot;
        for x in m.iter_mut() {
            *x *= r;
        }
        o
    }
}

/// Position-diagonal field over lattice sites origin, origin+1, ... (positions times delta).
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeField {
    pub origin: i64,
    pub cells: Vec<CMatrix>,
}

impl LatticeField {
    pub fn delta_at(x0: i64, rho: CMatrix) -> Self {
        LatticeField { origin: x0, cells: vec![rho] }
    }

    pub fn total_trace(&self) -> f64 {
        self.cells.iter().map(|m| m.trace().re).sum()
    }

    pub fn site_masses(&self) -> Vec<(i64, f64)> {
        self.cells.iter().enumerate().map(|(i, m)| (self.origin + i as i64, m.trace().re)).collect()
    }
}

/// rho'(x) = B+ rho(x - delta) B+^H + B- rho(x + delta) B-^H.
pub fn qrw_map_step(field: &LatticeField, pair: &TransitionPair) -> LatticeField {
    qrw_map_step_with(field, |_| pair.clone())
}

/// Inhomogeneous map: the pair is evaluated at each walker's starting site.
pub fn qrw_map_step_with(field: &LatticeField, pair_at: impl Fn(i64) -> TransitionPair) -> LatticeField {
    let d = field.cells.first().map(|m| m.nrows()).unwrap_or(1);
    let n = field.cells.len();
    let mut cells = vec![CMatrix::zeros(d, d); n + 2];
    for (i, rho) in field.cells.iter().enumerate() {
        let pair = pair_at(field.origin + i as i64);
        // site origin+i moves to origin+i+1 (index i+2) or origin+i-1 (index i)
        cells[i + 2] += &pair.bplus * rho * pair.bplus.adjoint();
        cells[i] += &pair.bminus * rho * pair.bminus.adjoint();
    }
    LatticeField { origin: field.origin - 1, cells }
}

/// Internal state and lattice site of a simple trajectory (position = site * delta).
#[derive(Debug, Clone, PartialEq)]
pub struct OqrwDiagonalState {
    pub rho: CMatrix,
    pub site: i64,
}

/// (p+, p-) = (Tr B+ rho B+^H, Tr B- rho B-^H).
pub fn branch_probabilities(rho: &CMatrix, pair: &TransitionPair) -> (f64, f64) {
    let pp = (&pair.bplus * rho * pair.bplus.adjoint()).trace().re;
    let pm = (&pair.bminus * rho * pair.bminus.adjoint()).trace().re;
    (pp, pm)
}

pub fn simple_trajectory_step(
    state: &OqrwDiagonalState,
    pair: &TransitionPair,
    draw: f64,
) -> Result<(OqrwDiagonalState, Outcome)> {
    let (pp, pm) = branch_probabilities(&state.rho, pair);
    let o = if draw * (pp + pm) < pp { Outcome::Plus } else { Outcome::Minus };
    let prob = if o == Outcome::Plus { pp } else { pm };
    if prob < 1e-300 {
        return Err(Error::ZeroProbabilityBranch(prob));
    }
    let b = pair.get(o);
    let rho = crate::linalg::hermitize(&(b * &state.rho * b.adjoint())).unscale(prob);
    Ok((OqrwDiagonalState { rho, site: state.site + o.sign() }, o))
}

/// Precomputed tilted-trajectory step: U+-(p) = e^{-i delta p} <+-u|+> B+ + e^{i delta p} <+-u|-> B-.
#[derive(Debug, Clone)]
pub struct TiltedOqrw {
    pub dim: usize,
    pub grid: MomentumGrid,
    /// U+(p_i) blocks, then U-(p_i) blocks.
    pub u_plus: Vec<CMatrix>,
    pub u_minus: Vec<CMatrix>,
    /// max_i ||U+^H U+ + U-^H U- - 1||_max over the grid.
    pub povm_residual: f64,
}

impl TiltedOqrw {
    pub fn new(pair: &TransitionPair, u: TiltAngles, delta: f64, grid: MomentumGrid) -> Result<Self> {
        let pmax = grid.p.iter().fold(0.0f64, |a, p| a.max(p.abs()));
        if delta * pmax > 0.5 {
            return Err(Error::ConfigInvalid(format!("delta * p_max = {} exceeds 0.5", delta * pmax)));
        }
        let d = pair.dim();
        let build = |o: Outcome| -> Vec<CMatrix> {
            let (a, b) = u.overlap_pair(o);
            grid.p
                .iter()
                .map(|&p| {
                    let e = C64::from_polar(1.0, -delta * p);
                    &pair.bplus * (e * a) + &pair.bminus * (e.conj() * b)
                })
                .collect()
        };
        let u_plus = build(Outcome::Plus);
        let u_minus = build(Outcome::Minus);
        let id = CMatrix::identity(d, d);
        let povm_residual = u_plus
            .iter()
            .zip(&u_minus)
            .map(|(a, b)| max_abs(&(a.adjoint() * a + b.adjoint() * b - &id)))
            .fold(0.0, f64::max);
        Ok(TiltedOqrw { dim: d, grid, u_plus, u_minus, povm_residual })
    }

    fn ops(&self, o: Outcome) -> &[CMatrix] {
        match o {
            Outcome::Plus => &self.u_plus,
            Outcome::Minus => &self.u_minus,
        }
    }

    /// p_o = sum_i w_i Tr(U_o(p_i) rho(p_i, p_i) U_o(p_i)^H).
    pub fn branch_probability(&self, k: &MomentumKernel, o: Outcome) -> f64 {
        let d = self.dim;
        let mut tmp = vec![C64::new(0.0, 0.0); d * d];
        let mut out = vec![C64::new(0.0, 0.0); d * d];
        self.ops(o)
            .iter()
            .enumerate()
            .map(|(i, u)| {
                sandwich(d, u.as_slice(), k.block(i, i), u.as_slice(), &mut tmp, &mut out);
                k.grid.w[i] * trace(d, &out).re
            })
            .sum()
    }

    /// Unnormalized branch kernel U_o(p) rho(p, q) U_o(q)^H.
    pub fn branch(&self, k: &MomentumKernel, o: Outcome) -> MomentumKernel {
        let d = self.dim;
        let g = self.grid.len();
        let ops = self.ops(o);
        let mut next = MomentumKernel::zeros(k.grid.clone(), d);
        let mut tmp = vec![C64::new(0.0, 0.0); d * d];
        for i in 0..g {
            for j in 0..g {
                let mut out = vec![C64::new(0.0, 0.0); d * d];
                mul(d, ops[i].as_slice(), k.block(i, j), &mut tmp);
                mul_adj(d, &tmp, ops[j].as_slice(), &mut out);
                next.block_mut(i, j).copy_from_slice(&out);
            }
        }
        next
    }

    pub fn step(&self, k: &MomentumKernel, draw: f64) -> Result<(MomentumKernel, Outcome)> {
        let pp = self.branch_probability(k, Outcome::Plus);
        let pm = self.branch_probability(k, Outcome::Minus);
        let drift = (pp + pm - 1.0).abs();
        if drift > 1e-6 {
            return Err(Error::QuadratureDrift(drift));
        }
        let o = if draw * (pp + pm) < pp { Outcome::Plus } else { Outcome::Minus };
        let prob = if o == Outcome::Plus { pp } else { pm };
        if prob < 1e-300 {
            return Err(Error::ZeroProbabilityBranch(prob));
        }
        let mut next = self.branch(k, o);
        next.scale(1.0 / prob);
        Ok((next, o))
    }
}

/// One tilted-trajectory step; see [`TiltedOqrw`] to amortize the setup over many steps.
pub fn tilted_trajectory_step(
    k: &MomentumKernel,
    pair: &TransitionPair,
    u: TiltAngles,
    delta: f64,
    draw: f64,
) -> Result<(MomentumKernel, Outcome)> {
    TiltedOqrw::new(pair, u, delta, k.grid.clone())?.step(k, draw)
}

/// Rejects angles that are rational multiples of pi/2 with small denominators.
pub fn check_generic_angle(phi: f64) -> Result<()> {
    let r = phi / (0.5 * PI);
    for q in 1..=64u32 {
        let x = r * q as f64;
        if (x - x.round()).abs() < 1e-9 {
            return Err(Error::ConfigInvalid(format!("phi = {phi} is a rational multiple of pi/2 (denominator {q})")));
        }
    }
    Ok(())
}

/// Length of the shortest cyclic window containing every index with mass above `floor`.
pub fn cyclic_support_len(m: &[f64], floor: f64) -> usize {
    let n = m.len();
    let occ: Vec<usize> = (0..n).filter(|&k| m[k] > floor).collect();
    if occ.is_empty() {
        return 0;
    }
    let mut max_gap = 0;
    for w in 0..occ.len() {
        let a = occ[w];
        let b = occ[(w + 1) % occ.len()];
        let gap = (b + n - a) % n;
        let gap = if gap == 0 { n } else { gap };
        max_gap = max_gap.max(gap);
    }
    n - max_gap + 1
}

/// Result of one collapse run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseRun {
    pub peak: usize,
    pub steps: usize,
    pub peak_mass: f64,
}

/// Runs the mass walk until the largest mass exceeds `threshold` or `max_steps` elapse;
/// the peak is the argmax at exit.
pub fn collapse_run<R: rand::Rng + ?Sized>(
    walk: &MassWalk,
    m0: &[f64],
    max_steps: usize,
    threshold: f64,
    rng: &mut R,
) -> CollapseRun {
    let mut m = m0.to_vec();
    let mut steps = 0;
    let argmax = |m: &[f64]| m.iter().enumerate().fold((0, f64::MIN), |b, (i, &x)| if x > b.1 { (i, x) } else { b });
    let mut best = argmax(&m);
    while steps < max_steps && best.1 <= threshold {
        walk.step(&mut m, rng.random::<f64>());
        steps += 1;
        // The argmax scan is amortized: masses move slowly relative to the threshold.
        if steps % 16 == 0 || steps == max_steps {
            best = argmax(&m);
        }
    }
    CollapseRun { peak: best.0, steps, peak_mass: best.1 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{pauli, random, scalar};
    use crate::rng::stream;
    use rand::Rng;

    fn random_state<R: Rng>(n: usize, rng: &mut R) -> TiltedWalkState {
        let phi: Vec<C64> = (0..n).map(|_| random::complex_normal(rng)).collect();
        let s = phi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        TiltedWalkState::new(phi.into_iter().map(|z| z / s).collect()).unwrap()
    }

    #[test]
    fn balanced_enumeration_is_binomial() {
        let paths = enumerate_parallel_state(&TransitionPair::balanced(1), 5, 3).unwrap();
        assert_eq!(paths.len(), 8);
        let rho = scalar(1.0, 1);
        for p in &paths {
            assert!((p.weight(&rho) - 0.125).abs() < 1e-15);
        }
        for (x, count) in [(8, 1), (6, 3), (4, 3), (2, 1)] {
            assert_eq!(paths.iter().filter(|p| p.endpoint == x).count(), count);
        }
        let empty = enumerate_parallel_state(&TransitionPair::balanced(2), 0, 0).unwrap();
        assert_eq!(empty.len(), 1);
        assert!(max_abs(&(&empty[0].amplitude - scalar(1.0, 2))) == 0.0);
        assert!(matches!(
            enumerate_parallel_state(&TransitionPair::balanced(1), 0, 21),
            Err(Error::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn enumeration_conserves_probability() {
        let mut rng = stream(1, 0);
        let pair = TransitionPair::random_exact(3, &mut rng);
        assert!(pair.is_exact());
        let rho = random::density(3, &mut rng);
        let total: f64 = enumerate_parallel_state(&pair, 0, 6).unwrap().iter().map(|p| p.weight(&rho)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn untilted_walk_keeps_masses() {
        let mut rng = stream(2, 0);
        let s = random_state(16, &mut rng);
        let u = TiltAngles { theta: 0.0, phi: 0.7 };
        assert!((tilted_walk_p_plus(&s.masses(), u) - 0.5).abs() < 1e-15);
        let (s2, _, _) = tilted_walk_step(&s, u, 0.3).unwrap();
        for (a, b) in s.masses().iter().zip(s2.masses()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn sharp_momentum_outcome_law() {
        let n = 32;
        let u = TiltAngles { theta: 0.6, phi: 0.6 };
        for k0 in [0, 5, 17] {
            let mut phi = vec![C64::new(0.0, 0.0); n];
            phi[k0] = C64::new(0.0, 1.0);
            let s = TiltedWalkState::new(phi).unwrap();
            let expect = 0.5 * (1.0 + 0.6f64.sin() * (4.0 * PI * k0 as f64 / n as f64 + 0.6).cos());
            assert!((tilted_walk_p_plus(&s.masses(), u) - expect).abs() < 1e-15);
            let (_, p) = tilted_walk_branch(&s, u, Outcome::Plus);
            assert!((p - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn walk_masses_are_a_martingale() {
        let mut rng = stream(3, 0);
        let u = TiltAngles { theta: 1.1, phi: -0.4 };
        let s = random_state(24, &mut rng);
        let (up, pp) = tilted_walk_branch(&s, u, Outcome::Plus);
        let (um, pm) = tilted_walk_branch(&s, u, Outcome::Minus);
        assert!((pp + pm - 1.0).abs() < 1e-14);
        // p+ |phi+|^2 / p+ + p- |phi-|^2 / p-
        for k in 0..24 {
            assert!((up[k].norm_sqr() + um[k].norm_sqr() - s.phi[k].norm_sqr()).abs() < 1e-12);
        }
    }

    #[test]
    fn mass_walk_tracks_amplitude_walk() {
        let mut rng = stream(4, 0);
        let u = TiltAngles { theta: 0.6, phi: 0.6 };
        let mut s = random_state(16, &mut rng);
        let walk = MassWalk::new(16, u);
        let mut m = s.masses();
        for _ in 0..200 {
            let d: f64 = rng.random();
            let (next, o, _) = tilted_walk_step(&s, u, d).unwrap();
            assert_eq!(walk.step(&mut m, d), o);
            s = next;
        }
        for (a, b) in m.iter().zip(s.masses()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn map_shift_and_binomial_spreading() {
        let shift = TransitionPair::new(scalar(1.0, 1), scalar(0.0, 1));
        let f = qrw_map_step(&LatticeField::delta_at(3, scalar(1.0, 1)), &shift);
        let masses: Vec<_> = f.site_masses().into_iter().filter(|(_, m)| *m > 0.0).collect();
        assert_eq!(masses, vec![(4, 1.0)]);

        let mut f = LatticeField::delta_at(0, scalar(0.5, 2));
        let pair = TransitionPair::balanced(2);
        for _ in 0..6 {
            f = qrw_map_step(&f, &pair);
        }
        for (x, m) in f.site_masses() {
            let expect = if (x + 6) % 2 == 0 {
                let j = ((x + 6) / 2) as u64;
                (1..=j).fold(1.0, |acc, i| acc * (6 - i + 1) as f64 / i as f64) / 64.0
            } else {
                0.0
            };
            assert!((m - expect).abs() < 1e-15, "site {x}: {m} vs {expect}");
        }
    }

    #[test]
    fn map_trace_audit_over_many_steps() {
        let mut rng = stream(5, 0);
        let pair = TransitionPair::random_exact(2, &mut rng);
        let mut f = LatticeField::delta_at(0, random::density(2, &mut rng));
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            f = qrw_map_step(&f, &pair);
            worst = worst.max((f.total_trace() - 1.0).abs());
        }
        assert!(worst <= 1e-12, "{worst}");
    }

    #[test]
    fn projective_pair_collapses() {
        let [_, _, s3] = pauli();
        let pp = (scalar(1.0, 2) + &s3).unscale(2.0);
        let pm = (scalar(1.0, 2) - &s3).unscale(2.0);
        let pair = TransitionPair::new(pp, pm);
        let q = 0.3;
        let rho = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![c(q, 0.0), c(1.0 - q, 0.0)]));
        let st = OqrwDiagonalState { rho, site: 0 };
        assert_eq!(branch_probabilities(&st.rho, &pair), (q, 1.0 - q));
        let (next, o) = simple_trajectory_step(&st, &pair, 0.29).unwrap();
        assert_eq!(o, Outcome::Plus);
        assert_eq!(next.site, 1);
        assert!((next.rho[(0, 0)] - c(1.0, 0.0)).norm() < 1e-15 && next.rho[(1, 1)].norm() < 1e-15);
    }

    #[test]
    fn posterior_average_is_the_map() {
        let mut rng = stream(6, 0);
        let pair = TransitionPair::random_exact(3, &mut rng);
        let rho = random::density(3, &mut rng);
        let st = OqrwDiagonalState { rho: rho.clone(), site: 0 };
        let (pp, pm) = branch_probabilities(&rho, &pair);
        let (a, _) = simple_trajectory_step(&st, &pair, 0.0).unwrap();
        let (b, _) = simple_trajectory_step(&st, &pair, 1.0 - 1e-16).unwrap();
        let avg = a.rho * c(pp, 0.0) + b.rho * c(pm, 0.0);
        let map = &pair.bplus * &rho * pair.bplus.adjoint() + &pair.bminus * &rho * pair.bminus.adjoint();
        assert!(max_abs(&(avg - map)) < 1e-12);
    }

    fn smooth_kernel(dim: usize) -> MomentumKernel {
        let grid = MomentumGrid::uniform(-3.0, 3.0, 25);
        let rho0 = crate::linalg::scalar(1.0 / dim as f64, dim);
        MomentumKernel::product(grid, |p| c((PI * p / 6.0).cos().powi(2), 0.2 * p), &rho0)
    }

    #[test]
    fn tilted_povm_and_martingale() {
        let mut rng = stream(7, 0);
        let pair = TransitionPair::random_exact(2, &mut rng);
        let u = TiltAngles { theta: 0.8, phi: 0.3 };
        let k = smooth_kernel(2);
        let t = TiltedOqrw::new(&pair, u, 0.1, k.grid.clone()).unwrap();
        assert!(t.povm_residual <= 1e-12);
        let pp = t.branch_probability(&k, Outcome::Plus);
        let bp = t.branch(&k, Outcome::Plus);
        let bm = t.branch(&k, Outcome::Minus);
        for i in 0..k.grid.len() {
            let avg = bp.diag_trace(i) + bm.diag_trace(i);
            assert!((avg - k.diag_trace(i)).abs() < 1e-12);
        }
        let (next, o) = t.step(&k, 0.5).unwrap();
        assert_eq!(o, if 0.5 < pp { Outcome::Plus } else { Outcome::Minus });
        assert!(next.check_normalized(1e-8).is_ok());
        assert!(next.hermitian_defect() < 1e-12);
    }

    #[test]
    fn untilted_trajectory_matches_simple_outcome_law() {
        let mut rng = stream(8, 0);
        let pair = TransitionPair::random_exact(2, &mut rng);
        let rho0 = random::density(2, &mut rng);
        let grid = MomentumGrid::uniform(-1.0, 1.0, 5);
        let k = MomentumKernel::diagonal(grid, |p| if p.abs() < 1e-12 { 1.0 } else { 0.0 }, &rho0);
        let t = TiltedOqrw::new(&pair, TiltAngles { theta: 0.0, phi: 0.0 }, 0.1, k.grid.clone()).unwrap();
        let (pp, _) = branch_probabilities(&rho0, &pair);
        assert!((t.branch_probability(&k, Outcome::Plus) - pp).abs() < 1e-13);
    }

    #[test]
    fn coarse_momentum_range_rejected() {
        let grid = MomentumGrid::uniform(-10.0, 10.0, 5);
        let r = TiltedOqrw::new(&TransitionPair::balanced(1), TiltAngles { theta: 0.1, phi: 0.2 }, 0.1, grid);
        assert!(matches!(r, Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn generic_angle_and_support_checks() {
        assert!(check_generic_angle(0.6).is_ok());
        assert!(check_generic_angle(PI / 3.0).is_err());
        let mut m = vec![0.0; 64];
        m[62] = 0.5;
        m[3] = 0.5;
        assert_eq!(cyclic_support_len(&m, 0.0), 6);
        m[30] = 0.1;
        assert_eq!(cyclic_support_len(&m, 0.0), 33);
    }
}
