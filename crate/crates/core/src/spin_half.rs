//! Spin-half gyroscope: H = -w0 s2, N = a s3, with real internal state Q1 = sin t, Q3 = cos t.
//!
//! Conventions: 2W(t) = ln|sin t| - (w0/a^2) cot t, g(t) = -2a sin t, and every waiting
//! time is a passage of the unwrapped angle through the next multiple of pi below it.

use std::f64::consts::PI;

use nalgebra::Matrix3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c, expm, pauli, CMatrix, C64};
use crate::quad::integrate_pieces;
use crate::rng::{normal, par_map, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinHalfParams {
    pub a: f64,
    pub omega0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Oscillatory,
    Critical,
    Ballistic,
}

impl SpinHalfParams {
    /// a = 0 is admitted: it is the pure Rabi limit used as a control.
    pub fn new(a: f64, omega0: f64) -> Result<Self> {
        if !(a >= 0.0 && a.is_finite() && omega0 > 0.0 && omega0.is_finite()) {
            return Err(Error::ConfigInvalid(format!("need a >= 0 and omega0 > 0, got a = {a}, omega0 = {omega0}")));
        }
        Ok(SpinHalfParams { a, omega0 })
    }

    pub fn regime(&self) -> Regime {
        let (a2, w2) = (self.a * self.a, 2.0 * self.omega0);
        if (a2 - w2).abs() <= 1e-12 * w2 {
            Regime::Critical
        } else if a2 > w2 {
            Regime::Ballistic
        } else {
            Regime::Oscillatory
        }
    }

    /// w0 / a^2.
    pub fn ratio(&self) -> f64 {
        self.omega0 / (self.a * self.a)
    }

    pub fn hamiltonian(&self) -> CMatrix {
        -pauli()[1].clone() * c(self.omega0, 0.0)
    }

    pub fn coupling(&self) -> CMatrix {
        pauli()[2].clone() * c(self.a, 0.0)
    }

    /// min(1e-3, 0.01 / a^2): resolves the strong drift near the well.
    pub fn theta_dt(&self) -> f64 {
        if self.a == 0.0 {
            1e-3
        } else {
            1e-3f64.min(0.01 / (self.a * self.a))
        }
    }

    /// The asymptotic mean wait a^2 / w0^2.
    pub fn tau_asymptotic(&self) -> f64 {
        self.a * self.a / (self.omega0 * self.omega0)
    }

    /// 1 + 4 a^4 / w0^2.
    pub fn deff_closed_form(&self) -> f64 {
        1.0 + 4.0 * self.a.powi(4) / (self.omega0 * self.omega0)
    }
}

/// One Euler-Maruyama step of the real Bloch SDE.
pub fn bloch_sde_step(q1: f64, q3: f64, p: &SpinHalfParams, dt: f64, db: f64) -> (f64, f64) {
    let (a, w) = (p.a, p.omega0);
    let n3 = q3 + 2.0 * w * q1 * dt + 2.0 * a * (1.0 - q3 * q3) * db;
    let n1 = q1 - 2.0 * (w * q3 + a * a * q1) * dt - 2.0 * a * q1 * q3 * db;
    let norm = (n1 * n1 + n3 * n3).sqrt();
    if norm > 1.0 + 1e-8 {
        (n1 / norm, n3 / norm)
    } else {
        (n1, n3)
    }
}

/// Unwrapped angle step; at multiples of pi the noise vanishes and the drift is -2 w0.
pub fn theta_sde_step(theta: f64, p: &SpinHalfParams, dt: f64, db: f64) -> f64 {
    let (s, co) = theta.sin_cos();
    theta - 2.0 * (p.omega0 + p.a * p.a * s * co) * dt - 2.0 * p.a * s * db
}

/// sqrt(det rho) = sqrt(1 - Q1^2 - Q3^2) / 2.
pub fn purity_root(q1: f64, q3: f64) -> f64 {
    0.5 * (1.0 - q1 * q1 - q3 * q3).max(0.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlochState {
    pub q1: f64,
    pub q3: f64,
    pub x: f64,
    /// ln sqrt(det rho), carried by its own Ito equation: reading it off (Q1, Q3) would take
    /// the square root of the O(dt^2) per-step error in 1 - |Q|^2 once the state is nearly pure.
    pub log_root: f64,
}

impl BlochState {
    pub fn new(q1: f64, q3: f64, x: f64) -> Self {
        BlochState { q1, q3, x, log_root: purity_root(q1, q3).ln() }
    }

    /// sqrt(det rho).
    pub fn root(&self) -> f64 {
        self.log_root.exp()
    }
}

/// Runs the Bloch SDE together with dX = 2a Q3 dt + dB and
/// d ln sqrt(det rho) = -2a^2 (1 + Q3^2) dt - 2a Q3 dB, recording the state after each
/// checkpoint step count (ascending).
pub fn bloch_run<R: Rng + ?Sized>(
    p: &SpinHalfParams,
    s0: BlochState,
    dt: f64,
    checkpoints: &[usize],
    rng: &mut R,
) -> Vec<BlochState> {
    let mut s = s0;
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut done = 0;
    let a2 = p.a * p.a;
    for &target in checkpoints {
        while done < target {
            let db = normal(rng) * dt.sqrt();
            let x = s.x + 2.0 * p.a * s.q3 * dt + db;
            let log_root = s.log_root - 2.0 * a2 * (1.0 + s.q3 * s.q3) * dt - 2.0 * p.a * s.q3 * db;
            let (q1, q3) = bloch_sde_step(s.q1, s.q3, p, dt, db);
            s = BlochState { q1, q3, x, log_root };
            done += 1;
        }
        out.push(s);
    }
    out
}

/// Sampled path of the unwrapped angle and the measurement record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaPath {
    pub stream: u64,
    pub t: Vec<f64>,
    pub theta: Vec<f64>,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaRun {
    pub theta0: f64,
    pub horizon: f64,
    pub theta: f64,
    pub x: f64,
    /// Times at which the angle first dropped below successive multiples of pi.
    pub passages: Vec<f64>,
    /// Integral of |cos theta| over [0, horizon].
    pub abs_cos_integral: f64,
    /// Largest excursion above the most recently passed multiple of pi.
    pub gate_excess: f64,
    pub path: Option<ThetaPath>,
}

impl ThetaRun {
    /// Successive waits; the first is kept only if the run started on a gate.
    pub fn waiting_times(&self) -> Vec<f64> {
        let on_gate = (self.theta0 / PI - (self.theta0 / PI).round()).abs() < 1e-12;
        let mut prev = if on_gate { Some(0.0) } else { None };
        let mut out = Vec::with_capacity(self.passages.len());
        for &t in &self.passages {
            if let Some(p) = prev {
                out.push(t - p);
            }
            prev = Some(t);
        }
        out
    }
}

/// Integrates the angle SDE and dX = 2a cos t dt + dB up to `horizon`. `stride` > 0 records
/// every stride-th step.
pub fn integrate_theta<R: Rng + ?Sized>(
    p: &SpinHalfParams,
    theta0: f64,
    horizon: f64,
    dt: f64,
    stride: usize,
    stream_id: u64,
    rng: &mut R,
) -> ThetaRun {
    let steps = (horizon / dt).round() as usize;
    let sdt = dt.sqrt();
    let mut next_gate = PI * ((theta0 / PI).ceil() - 1.0);
    if (theta0 / PI).fract() == 0.0 {
        next_gate = theta0 - PI;
    }
    let mut last_gate = f64::INFINITY;
    let (mut th, mut x) = (theta0, 0.0);
    let mut passages = Vec::new();
    let (mut abs_cos, mut excess) = (0.0, f64::NEG_INFINITY);
    let mut path = (stride > 0).then(|| ThetaPath { stream: stream_id, t: vec![0.0], theta: vec![th], x: vec![0.0] });
    for i in 0..steps {
        let db = normal(rng) * sdt;
        let (s, co) = th.sin_cos();
        abs_cos += co.abs() * dt;
        let nth = th - 2.0 * (p.omega0 + p.a * p.a * s * co) * dt - 2.0 * p.a * s * db;
        x += 2.0 * p.a * co * dt + db;
        if nth < next_gate {
            let frac = (th - next_gate) / (th - nth);
            passages.push((i as f64 + frac) * dt);
            last_gate = next_gate;
            next_gate -= PI;
        }
        th = nth;
        if last_gate.is_finite() {
            excess = excess.max(th - last_gate);
        }
        if let Some(pp) = path.as_mut() {
            if (i + 1) % stride == 0 {
                pp.t.push((i + 1) as f64 * dt);
                pp.theta.push(th);
                pp.x.push(x);
            }
        }
    }
    ThetaRun { theta0, horizon, theta: th, x, passages, abs_cos_integral: abs_cos, gate_excess: excess, path }
}

/// Parallel ensemble of angle runs; run i uses stream (seed, i) and starts at theta0.
pub fn theta_ensemble(
    p: &SpinHalfParams,
    theta0: f64,
    horizon: f64,
    paths: usize,
    seed: u64,
    stride: usize,
) -> Vec<ThetaRun> {
    let dt = p.theta_dt();
    par_map(paths as u64, |i| integrate_theta(p, theta0, horizon, dt, stride, i, &mut stream(seed, i)))
}

/// 2W(theta).
pub fn two_w(theta: f64, p: &SpinHalfParams) -> f64 {
    let (s, co) = theta.sin_cos();
    s.abs().ln() - p.ratio() * co / s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Potential {
    pub params: SpinHalfParams,
    /// Drift zeros in (0, pi), ascending: local maximum then local minimum of W.
    pub extrema: Vec<f64>,
}

impl Potential {
    pub fn w(&self, theta: f64) -> f64 {
        0.5 * two_w(theta, &self.params)
    }

    /// e^{-2W} g^{-2}; not normalizable on (0, pi).
    pub fn invariant_density(&self, theta: f64) -> f64 {
        let s = theta.sin();
        (-two_w(theta, &self.params)).exp() / (4.0 * self.params.a * self.params.a * s * s)
    }

    /// The well bottom reduced to (-pi/2, 0].
    pub fn theta_star(&self) -> Option<f64> {
        self.extrema.last().map(|t| t - PI)
    }
}

/// Extrema solve sin 2t = -2 w0 / a^2.
pub fn potential_and_invariant(p: &SpinHalfParams) -> Potential {
    let extrema = match p.regime() {
        Regime::Oscillatory => vec![],
        Regime::Critical => vec![0.75 * PI],
        Regime::Ballistic => {
            let h = (2.0 * p.ratio()).asin();
            vec![0.5 * (PI + h), PI - 0.5 * h]
        }
    };
    Potential { params: *p, extrema }
}

/// Probability of leaving [lo, hi] through lo, starting from theta.
pub fn exit_probability(lo: f64, theta: f64, hi: f64, p: &SpinHalfParams) -> Result<f64> {
    let k = (lo / PI).floor();
    if !(lo < theta && theta <= hi && hi < (k + 1.0) * PI) || p.a == 0.0 {
        return Err(Error::WindowViolation(lo, theta, hi));
    }
    let pot = potential_and_invariant(p);
    let shift = k * PI;
    let mut peak = two_w(hi, p);
    let mut cuts = vec![lo, theta, hi];
    for e in pot.extrema.iter().map(|e| e + shift) {
        if e > lo && e < hi {
            peak = peak.max(two_w(e, p));
            cuts.push(e);
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();
    let f = |t: f64| {
        let v = two_w(t, p) - peak;
        if v.is_finite() {
            v.exp()
        } else {
            0.0
        }
    };
    let split = cuts.iter().position(|&x| x == theta).unwrap();
    let upper = integrate_pieces(&f, &cuts[split..], 1e-13)?;
    let lower = integrate_pieces(&f, &cuts[..=split], 1e-13)?;
    if lower + upper <= 0.0 {
        return Err(Error::QuadratureNonConvergence(lower + upper));
    }
    Ok((upper / (lower + upper)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "method")]
pub enum WaitMethod {
    Quadrature,
    Asymptotic,
    MonteCarlo { paths: usize, horizon: f64, seed: u64 },
}

/// Mean time for the angle to travel from pi to 0.
pub fn mean_wait_time(p: &SpinHalfParams, method: WaitMethod) -> Result<f64> {
    match method {
        WaitMethod::Asymptotic => Ok(p.tau_asymptotic()),
        WaitMethod::Quadrature => wait_quadrature(p),
        WaitMethod::MonteCarlo { paths, horizon, seed } => {
            let waits: Vec<f64> =
                theta_ensemble(p, 0.0, horizon, paths, seed, 0).iter().flat_map(|r| r.waiting_times()).collect();
            if waits.is_empty() {
                return Err(Error::InsufficientJumps(0));
            }
            Ok(waits.iter().sum::<f64>() / waits.len() as f64)
        }
    }
}

/// (a^2 / 2 w0^2) int_0^inf du e^-u int_0^pi dv sqrt((u sin v - r cos v)^2 + r^2 sin^2 v), r = w0/a^2.
fn wait_quadrature(p: &SpinHalfParams) -> Result<f64> {
    if p.a == 0.0 {
        return Ok(0.0);
    }
    let r = p.ratio();
    let inner = |u: f64| -> f64 {
        let f = |v: f64| {
            let (s, co) = v.sin_cos();
            ((u * s - r * co).powi(2) + r * r * s * s).sqrt()
        };
        // The first term changes sign at tan v = r/u; split there.
        let kink = (r / u.max(1e-300)).atan();
        integrate_pieces(&f, &[0.0, kink, PI], 1e-13).unwrap_or(f64::NAN)
    };
    let outer = |u: f64| (-u).exp() * inner(u);
    let v = integrate_pieces(&outer, &[0.0, 1.0, 5.0, 20.0, 60.0], 1e-11)?;
    if !v.is_finite() {
        return Err(Error::QuadratureNonConvergence(v));
    }
    Ok(v / (2.0 * r * p.omega0))
}

/// Expected occupation density of the angle during one pi -> 0 passage:
/// l(t) = 2 e^{-2W(t)} g(t)^{-2} int_0^t e^{2W}, written as
/// (1 / 2 w0) int_0^inf e^-u (sin^2 t + (cos t + b u sin t)^2)^{-3/2} du with b = a^2 / w0.
pub fn occupation_density(theta: f64, p: &SpinHalfParams) -> Result<f64> {
    let (s, co) = theta.sin_cos();
    let b = 1.0 / p.ratio();
    let f = |u: f64| (-u).exp() * (s * s + (co + b * u * s).powi(2)).powf(-1.5);
    let mut cuts = vec![0.0];
    let u0 = -co / (b * s);
    if u0 > 0.0 && u0 < 700.0 {
        let w = 10.0 / b;
        cuts.extend([(u0 - w).max(0.0), u0, u0 + w].into_iter().filter(|&x| x > 0.0));
    }
    let end = cuts.last().copied().unwrap_or(0.0) + 60.0;
    cuts.push(end);
    cuts.dedup();
    Ok(integrate_pieces(&f, &cuts, 1e-12)? / (2.0 * p.omega0))
}

/// (int l, int |cos| l) over (0, pi).
pub fn occupation_moments(p: &SpinHalfParams) -> Result<(f64, f64)> {
    let pot = potential_and_invariant(p);
    let mut cuts = vec![0.0, 0.5 * PI, PI];
    cuts.extend(pot.extrema.iter().copied());
    let near_pi = PI - 4.0 * p.ratio();
    if near_pi > 0.5 * PI {
        cuts.push(near_pi);
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let l = |t: f64| occupation_density(t, p).unwrap_or(f64::NAN);
    let mass = integrate_pieces(&l, &cuts, 1e-9)?;
    let cosm = integrate_pieces(&|t| t.cos().abs() * l(t), &cuts, 1e-9)?;
    if !(mass.is_finite() && cosm.is_finite()) {
        return Err(Error::QuadratureNonConvergence(mass));
    }
    Ok((mass, cosm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpStatistics {
    pub passages: usize,
    pub waits: Vec<f64>,
    /// 1 / mean wait, in physical time.
    pub fitted_rate: f64,
    /// Mean wait used to normalize the waits before the KS test.
    pub tau_bar: f64,
    /// KS distance of waits / tau_bar to the unit exponential.
    pub ks_distance: f64,
    /// Pooled lag-1 autocorrelation of consecutive waits within each run.
    pub lag1: f64,
}

pub fn jump_statistics(runs: &[ThetaRun], tau_bar: f64) -> Result<JumpStatistics> {
    let per_run: Vec<Vec<f64>> = runs.iter().map(|r| r.waiting_times()).collect();
    let waits: Vec<f64> = per_run.iter().flatten().copied().collect();
    if waits.len() < 100 {
        return Err(Error::InsufficientJumps(waits.len()));
    }
    let n = waits.len() as f64;
    let mean = waits.iter().sum::<f64>() / n;
    let var = waits.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
    let (mut num, mut pairs) = (0.0, 0usize);
    for run in &per_run {
        for w in run.windows(2) {
            num += (w[0] - mean) * (w[1] - mean);
            pairs += 1;
        }
    }
    let lag1 = if pairs > 0 && var > 0.0 { num / pairs as f64 / var } else { 0.0 };
    let mut sorted: Vec<f64> = waits.iter().map(|w| w / tau_bar).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let ks = sorted
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let f = 1.0 - (-s).exp();
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    Ok(JumpStatistics { passages: waits.len(), waits, fitted_rate: 1.0 / mean, tau_bar, ks_distance: ks, lag1 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubicRoots {
    pub k: f64,
    /// The root continued from 0 at k = 0.
    pub gamma0: (f64, f64),
    pub others: [(f64, f64); 2],
    /// 1 - 2 gamma0 / k^2; absent at k = 0.
    pub deff: Option<f64>,
    pub deff_closed_form: f64,
    /// The other two roots form a complex pair (oscillatory side).
    pub complex_pair: bool,
}

fn cubic_roots(p: &SpinHalfParams, k: f64) -> [C64; 3] {
    let (a2, w) = (p.a * p.a, p.omega0);
    let c2 = 2.0 * a2;
    let c1 = 4.0 * k * k * a2 + 4.0 * w * w;
    let c0 = 8.0 * k * k * a2 * a2;
    let comp = Matrix3::new(-c2, -c1, -c0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    let ev = comp.complex_eigenvalues();
    let poly = |g: C64| ((g + c2) * g + c1) * g + c0;
    let dpoly = |g: C64| (3.0 * g + 2.0 * c2) * g + c1;
    let mut out = [C64::new(0.0, 0.0); 3];
    for (o, &g0) in out.iter_mut().zip(ev.iter()) {
        let mut g = g0;
        for _ in 0..3 {
            let d = dpoly(g);
            if d.norm() == 0.0 {
                break;
            }
            g -= poly(g) / d;
        }
        *o = g;
    }
    out
}

/// Roots of g^3 + 2a^2 g^2 + (4k^2 a^2 + 4 w0^2) g + 8 k^2 a^4, tracked from k = 0.
pub fn deff_from_cubic(p: &SpinHalfParams, k: f64) -> Result<CubicRoots> {
    const STEPS: usize = 64;
    let mut g0 = C64::new(0.0, 0.0);
    let mut roots = cubic_roots(p, 0.0);
    for j in 0..=STEPS {
        let kj = k * j as f64 / STEPS as f64;
        roots = cubic_roots(p, kj);
        let mut d: Vec<(f64, usize)> = roots.iter().enumerate().map(|(i, r)| ((r - g0).norm(), i)).collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if d[1].0 <= 2.0 * d[0].0 {
            return Err(Error::RootTrackingAmbiguity(kj));
        }
        g0 = roots[d[0].1];
        roots.swap(0, d[0].1);
    }
    let complex_pair = roots[1].im.abs() > 1e-12 * (1.0 + roots[1].norm());
    Ok(CubicRoots {
        k,
        gamma0: (g0.re, g0.im),
        others: [(roots[1].re, roots[1].im), (roots[2].re, roots[2].im)],
        deff: (k != 0.0).then(|| 1.0 - 2.0 * g0.re / (k * k)),
        deff_closed_form: p.deff_closed_form(),
        complex_pair,
    })
}

/// (E, R, S)_t = (E[e^{ikX}], E[Q3 e^{ikX}], E[Q1 e^{ikX}]) by exact exponentiation.
pub fn moment_ode_integrate(p: &SpinHalfParams, k: f64, t: f64, init: [C64; 3]) -> Result<[C64; 3]> {
    let (a, w) = (p.a, p.omega0);
    let h = -0.5 * k * k;
    let ika = C64::new(0.0, 2.0 * k * a);
    #[rustfmt::skip]
    let gen = CMatrix::from_row_slice(3, 3, &[
        c(h, 0.0), ika, c(0.0, 0.0),
        ika, c(h, 0.0), c(2.0 * w, 0.0),
        c(0.0, 0.0), c(-2.0 * w, 0.0), c(h - 2.0 * a * a, 0.0),
    ]);
    let prop = expm(&(gen * c(t, 0.0)))?;
    let v = prop * nalgebra::DVector::from_column_slice(&init);
    Ok([v[0], v[1], v[2]])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeffEstimate {
    pub t: f64,
    pub paths: usize,
    pub estimate: f64,
    pub stderr: f64,
}

/// Var(X_t)/t over `paths` angle runs started uniformly on [0, pi), with a 50-group jackknife.
pub fn deff_monte_carlo(p: &SpinHalfParams, t: f64, paths: usize, seed: u64) -> Result<DeffEstimate> {
    let tau = mean_wait_time(p, WaitMethod::Quadrature)?;
    if t < 50.0 * tau * (1.0 - 1e-9) {
        return Err(Error::InsufficientTime { t, min: 50.0 * tau });
    }
    const GROUPS: usize = 50;
    if paths < 2 * GROUPS {
        return Err(Error::ConfigInvalid(format!("need at least {} paths", 2 * GROUPS)));
    }
    let dt = p.theta_dt();
    let xs = par_map(paths as u64, |i| {
        let mut rng = stream(seed, i);
        let th0 = rng.random::<f64>() * PI;
        integrate_theta(p, th0, t, dt, 0, i, &mut rng).x
    });
    // Per-group power sums; leave-one-group-out variances.
    let mut sums = vec![(0.0, 0.0, 0usize); GROUPS];
    for (i, x) in xs.iter().enumerate() {
        let g = &mut sums[i % GROUPS];
        g.0 += x;
        g.1 += x * x;
        g.2 += 1;
    }
    let tot = sums.iter().fold((0.0, 0.0, 0usize), |a, g| (a.0 + g.0, a.1 + g.1, a.2 + g.2));
    let var = |s1: f64, s2: f64, n: usize| (s2 - s1 * s1 / n as f64) / (n as f64 - 1.0);
    let est = var(tot.0, tot.1, tot.2) / t;
    let loo: Vec<f64> = sums.iter().map(|g| var(tot.0 - g.0, tot.1 - g.1, tot.2 - g.2) / t).collect();
    let m = loo.iter().sum::<f64>() / GROUPS as f64;
    let se = ((GROUPS as f64 - 1.0) / GROUPS as f64 * loo.iter().map(|v| (v - m).powi(2)).sum::<f64>()).sqrt();
    Ok(DeffEstimate { t, paths, estimate: est, stderr: se })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::integrate;

    fn params(a: f64, w: f64) -> SpinHalfParams {
        SpinHalfParams::new(a, w).unwrap()
    }

    #[test]
    fn bloch_step_on_circle_matches_angle_step() {
        let p = params(1.5, 0.7);
        let dt = 1e-4;
        for (th, db) in [(0.3f64, 0.004), (2.0, -0.01), (-1.1, 0.0)] {
            let (q1, q3) = bloch_sde_step(th.sin(), th.cos(), &p, dt, db);
            let nth = theta_sde_step(th, &p, dt, db);
            // Ito corrections differ at O(db^2) = O(dt).
            assert!((q1 - nth.sin()).abs() <= 10.0 * dt + 10.0 * db * db, "{th}");
            assert!((q3 - nth.cos()).abs() <= 10.0 * dt + 10.0 * db * db, "{th}");
        }
    }

    #[test]
    fn zero_coupling_rotates_at_twice_omega() {
        let p = params(0.0, 1.3);
        let dt = 1e-5;
        let (mut q1, mut q3) = (0.0, 1.0);
        for _ in 0..100_000 {
            (q1, q3) = bloch_sde_step(q1, q3, &p, dt, 0.37);
        }
        // theta = -2 w0 t with Q1 = sin theta, Q3 = cos theta.
        let th: f64 = -2.0 * 1.3;
        assert!((q3 - th.cos()).abs() < 1e-4 && (q1 - th.sin()).abs() < 1e-4);
    }

    #[test]
    fn gate_has_no_noise() {
        let p = params(4.0, 1.0);
        assert_eq!(theta_sde_step(0.0, &p, 1e-3, 5.0), -2e-3);
        assert_eq!(theta_sde_step(0.0, &p, 1e-3, -5.0), -2e-3);
    }

    #[test]
    fn potential_shape() {
        let p = params(2.0, 1.0);
        assert!(two_w(0.5 * PI, &p).abs() < 1e-15);
        assert!(potential_and_invariant(&params(1.0, 1.0)).extrema.is_empty());
        assert_eq!(potential_and_invariant(&params(2f64.sqrt(), 1.0)).extrema, vec![0.75 * PI]);
        let p16 = params(4.0, 1.0);
        let pot = potential_and_invariant(&p16);
        assert_eq!(pot.extrema.len(), 2);
        let r = p16.ratio();
        assert!((pot.theta_star().unwrap() + r).abs() <= r * r);
        // Local maximum then local minimum.
        let [m1, m2] = [pot.extrema[0], pot.extrema[1]];
        assert!(pot.w(m1) > pot.w(m1 - 1e-3) && pot.w(m1) > pot.w(m1 + 1e-3));
        assert!(pot.w(m2) < pot.w(m2 - 1e-4) && pot.w(m2) < pot.w(m2 + 1e-4));
    }

    #[test]
    fn exit_probability_limits_and_monotonicity() {
        let p = params(2.0, 1.0);
        assert_eq!(exit_probability(0.5, 2.5, 2.5, &p).unwrap(), 0.0);
        assert!(exit_probability(0.5, 0.5 + 1e-9, 2.5, &p).unwrap() > 1.0 - 1e-6);
        let mut prev = 1.0;
        for i in 1..=20 {
            let v = exit_probability(0.5, 0.5 + 0.1 * i as f64, 2.5, &p).unwrap();
            assert!(v <= prev + 1e-12);
            prev = v;
        }
        assert!(matches!(exit_probability(-0.1, 1.0, 2.0, &p), Err(Error::WindowViolation(..))));
        assert!(matches!(exit_probability(1.0, 1.0, 2.0, &p), Err(Error::WindowViolation(..))));
        // Shifted windows are equivalent by periodicity.
        let a = exit_probability(0.4, 1.3, 2.9, &p).unwrap();
        let b = exit_probability(0.4 - 3.0 * PI, 1.3 - 3.0 * PI, 2.9 - 3.0 * PI, &p).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn quadrature_wait_approaches_asymptote() {
        assert_eq!(mean_wait_time(&params(4.0, 1.0), WaitMethod::Asymptotic).unwrap(), 16.0);
        let mut prev = f64::INFINITY;
        for a2 in [8.0f64, 16.0, 32.0, 64.0] {
            let p = params(a2.sqrt(), 1.0);
            let q = mean_wait_time(&p, WaitMethod::Quadrature).unwrap();
            let dev = (q / a2 - 1.0).abs();
            assert!(dev < prev, "{a2}: {q}");
            prev = dev;
        }
    }

    #[test]
    fn occupation_density_integrates_to_mean_wait() {
        for a in [2.0, 4.0] {
            let p = params(a, 1.0);
            let (mass, _) = occupation_moments(&p).unwrap();
            let tau = mean_wait_time(&p, WaitMethod::Quadrature).unwrap();
            assert!((mass / tau - 1.0).abs() < 1e-6, "{a}: {mass} vs {tau}");
        }
    }

    #[test]
    fn occupation_density_matches_raw_double_integral() {
        // Direct oracle: 2 e^{-2W(t)} g^{-2} int_0^t e^{2W}, at points away from the singular ends.
        let p = params(1.2, 1.0);
        for th in [0.6, 1.4, 2.2] {
            let inner = integrate(&|v: f64| two_w(v, &p).exp(), 1e-9, th, 1e-14).unwrap();
            let g2 = 4.0 * p.a * p.a * th.sin().powi(2);
            let raw = 2.0 * (-two_w(th, &p)).exp() / g2 * inner;
            let l = occupation_density(th, &p).unwrap();
            assert!((l / raw - 1.0).abs() < 1e-8, "{th}: {l} vs {raw}");
        }
    }

    #[test]
    fn cubic_roots_at_zero_and_small_k() {
        let p = params(3.0, 1.0);
        let r0 = deff_from_cubic(&p, 0.0).unwrap();
        assert_eq!(r0.gamma0, (0.0, 0.0));
        let disc = (81.0f64 - 4.0).sqrt();
        let mut others = [r0.others[0].0, r0.others[1].0];
        others.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((others[0] - (-9.0 - disc)).abs() < 1e-10 && (others[1] - (-9.0 + disc)).abs() < 1e-10);
        let r = deff_from_cubic(&p, 1e-3).unwrap();
        assert!((-r.gamma0.0 / 1e-6 / 162.0 - 1.0).abs() < 0.01);
        assert_eq!(r.deff_closed_form, 325.0);
        assert_eq!(params(2.0, 1.0).deff_closed_form(), 65.0);
        assert!(deff_from_cubic(&params(1.0, 1.0), 1e-3).unwrap().complex_pair);
    }

    #[test]
    fn moment_ode_trivial_wavenumber() {
        let p = params(1.0, 1.0);
        let v = moment_ode_integrate(&p, 0.0, 3.0, [c(1.0, 0.0), c(0.2, 0.0), c(0.5, 0.0)]).unwrap();
        assert!((v[0] - c(1.0, 0.0)).norm() < 1e-12);
        // R, S relax to zero without measurement back-action on E.
        assert!(v[1].norm() < 0.2 && v[2].norm() < 0.5);
    }

    #[test]
    fn passages_recorded_below_each_multiple_of_pi() {
        let p = params(0.0, 1.0);
        let run = integrate_theta(&p, 0.0, 5.0, 1e-3, 0, 0, &mut stream(1, 0));
        // Deterministic rotation at rate 2: passages at k pi / 2.
        assert_eq!(run.passages.len(), 3);
        for (k, t) in run.passages.iter().enumerate() {
            assert!((t - (k + 1) as f64 * PI / 2.0).abs() < 1e-9);
        }
        assert_eq!(run.waiting_times().len(), 3);
        assert!((run.abs_cos_integral - 5.0 * 2.0 / PI).abs() < 0.1);
    }

    #[test]
    fn log_root_tracks_the_bloch_purity_along_a_path() {
        // Pathwise the two integrations agree to the Euler error; at small dt and early times
        // that is far below the value itself.
        let p = params(1.0, 0.5);
        let s0 = BlochState::new(0.6, 0.0, 0.0);
        let states = bloch_run(&p, s0, 1e-5, &[2_000, 10_000, 20_000], &mut crate::rng::stream(5, 0));
        for s in states {
            let direct = purity_root(s.q1, s.q3);
            assert!((s.root() - direct).abs() <= 0.01 * direct, "{} vs {direct}", s.root());
        }
    }
}
