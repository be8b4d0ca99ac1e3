//! Browser bindings for three interactive views: the spin-half potential W(theta), a sampled
//! angle / measurement path, and the momentum collapse of the tilted walk.
//!
//! Everything returns flat `Float64Array`s so the page can plot them without a framework.

use oqbm::discrete::{MassWalk, TiltAngles};
use oqbm::harness::{packet_amplitudes, Packet};
use oqbm::rng::stream;
use oqbm::spin_half::{integrate_theta, potential_and_invariant, SpinHalfParams};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn params(a: f64, omega0: f64) -> Result<SpinHalfParams, JsError> {
    SpinHalfParams::new(a, omega0).map_err(|e| JsError::new(&e.to_string()))
}

/// W(theta) and the unnormalized invariant density on `points` interior angles of (0, pi),
/// interleaved as [theta, w, density, ...]. W is shifted so its minimum is zero.
#[wasm_bindgen]
pub fn potential_curve(a: f64, omega0: f64, points: usize) -> Result<Vec<f64>, JsError> {
    let p = params(a, omega0)?;
    let pot = potential_and_invariant(&p);
    let thetas: Vec<f64> = (1..=points).map(|j| std::f64::consts::PI * j as f64 / (points + 1) as f64).collect();
    let ws: Vec<f64> = thetas.iter().map(|&t| pot.w(t)).collect();
    let w_min = ws.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut out = Vec::with_capacity(3 * points);
    for (t, w) in thetas.iter().zip(&ws) {
        out.extend([*t, w - w_min, pot.invariant_density(*t)]);
    }
    Ok(out)
}

/// Bottom of the well of W reduced to (-pi/2, 0], or NaN in the oscillatory regime.
#[wasm_bindgen]
pub fn theta_star(a: f64, omega0: f64) -> Result<f64, JsError> {
    Ok(potential_and_invariant(&params(a, omega0)?).theta_star().unwrap_or(f64::NAN))
}

/// One path of the unwrapped angle and the position record, interleaved as [t, theta, x, ...]
/// with at most about `samples` rows.
#[wasm_bindgen]
pub fn sample_spin_path(a: f64, omega0: f64, horizon: f64, samples: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    let p = params(a, omega0)?;
    if !(horizon > 0.0 && samples > 0) {
        return Err(JsError::new("horizon and samples must be positive"));
    }
    let dt = p.theta_dt();
    let steps = (horizon / dt).round().max(1.0) as usize;
    let stride = (steps / samples).max(1);
    let run = integrate_theta(&p, 0.0, horizon, dt, stride, 0, &mut stream(seed, 0));
    let path = run.path.expect("stride > 0 records the path");
    let mut out = Vec::with_capacity(3 * path.t.len());
    for i in 0..path.t.len() {
        out.extend([path.t[i], path.theta[i], path.x[i]]);
    }
    Ok(out)
}

/// Momentum masses of the tilted walk under repeated measurement, from four Gaussian packets.
#[wasm_bindgen]
pub struct CollapseDemo {
    walk: MassWalk,
    masses: Vec<f64>,
    initial: Vec<f64>,
    rng: ChaCha8Rng,
    steps: u32,
}

#[wasm_bindgen]
impl CollapseDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(sites: usize, theta: f64, phi: f64, seed: u64) -> Result<CollapseDemo, JsError> {
        if sites < 32 {
            return Err(JsError::new("need at least 32 sites"));
        }
        let packets = [(17.0, 0.0), (19.5, 1.1), (22.5, 2.3), (25.0, 4.0)].map(|(center, phase)| Packet {
            center,
            width: 0.7,
            phase,
        });
        let amps = packet_amplitudes(sites, &packets, Some([16, 26])).map_err(|e| JsError::new(&e.to_string()))?;
        let masses: Vec<f64> = amps.iter().map(|z| z.norm_sqr()).collect();
        Ok(CollapseDemo {
            walk: MassWalk::new(sites, TiltAngles { theta, phi }),
            initial: masses.clone(),
            masses,
            rng: stream(seed, 0),
            steps: 0,
        })
    }

    /// Advances `n` measured steps and returns the largest mass.
    pub fn advance(&mut self, n: u32) -> f64 {
        for _ in 0..n {
            let draw = self.rng.random::<f64>();
            self.walk.step(&mut self.masses, draw);
        }
        self.steps += n;
        self.peak()
    }

    pub fn masses(&self) -> Vec<f64> {
        self.masses.clone()
    }

    /// Collapse probabilities: the initial momentum law.
    pub fn initial(&self) -> Vec<f64> {
        self.initial.clone()
    }

    pub fn peak(&self) -> f64 {
        self.masses.iter().cloned().fold(0.0, f64::max)
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }
}
