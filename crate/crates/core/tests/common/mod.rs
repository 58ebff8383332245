//! Shared fixtures and independent reference computations for the integration tests.

#![allow(dead_code)]

use aoi_outage::control_loop::SystemModel;
use aoi_outage::montecarlo::Scenario;
use aoi_outage::scenario::ScenarioFile;
use aoi_outage::statespace::RealMatrix;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn table1_file() -> ScenarioFile {
    ScenarioFile::preset("table1_platoon").unwrap()
}

pub fn table1_scenario() -> Scenario {
    table1_file().to_scenario().unwrap()
}

/// Table-1 plant with the input matrix replaced by `b`.
pub fn with_input(scenario: &Scenario, b: RealMatrix) -> Scenario {
    let m = &scenario.model;
    let model = SystemModel::new(
        m.a().clone(),
        b,
        m.noise_cov().clone(),
        m.cost_row().clone(),
        m.x_aim().to_vec(),
        m.delta_g(),
    )
    .unwrap();
    Scenario {
        model,
        ..scenario.clone()
    }
}

pub fn to_na(m: &RealMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Steady-state variance of `g x` for the loop `x(t+1) = A x + B u + w` whose
/// controller sees `x(t - age)`, replays its own inputs and applies
/// `u = B⁺ (x_aim - A x̂)`.
///
/// Computed from the closed-loop impulse response: an impulse entering
/// `x(s+1)` is propagated through plant and controller with no further noise,
/// and `Var(g x) = Σ_k (g D_k) Σ (g D_k)ᵀ` over the response matrices `D_k`.
pub fn closed_loop_cost_variance(model: &SystemModel, age: usize) -> f64 {
    let a = to_na(model.a());
    let b = to_na(model.b());
    let sigma = to_na(model.noise_cov());
    let g = to_na(model.cost_row());
    let n = a.nrows();
    let bp = b.clone().pseudo_inverse(1e-13).unwrap();
    let a_age = a.pow(age as u32);

    // d[k]: response of x(s + k); u[k]: response of u(s + k).
    let mut d: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, n)];
    let mut u: Vec<DMatrix<f64>> = Vec::new();
    let mut var = 0.0;
    let mut quiet = 0;
    for k in 0..20_000usize {
        // Estimate at time s + k built from x(s + k - age) and the inputs since then.
        let mut x_hat = if k >= age { &a_age * &d[k - age] } else { DMatrix::zeros(n, n) };
        let mut a_pow = DMatrix::<f64>::identity(n, n);
        for tau in 1..=age {
            if k >= tau {
                x_hat += &a_pow * &b * &u[k - tau];
            }
            a_pow = &a_pow * &a;
        }
        let uk = -(&bp * &a * x_hat);
        let mut next = &a * &d[k] + &b * &uk;
        if k == 0 {
            next += DMatrix::<f64>::identity(n, n);
        }
        u.push(uk);
        let gd = &g * &next;
        var += (&gd * &sigma * gd.transpose())[(0, 0)];
        quiet = if next.abs().max() < 1e-15 { quiet + 1 } else { 0 };
        d.push(next);
        if quiet > age + 2 {
            break;
        }
    }
    var
}

/// Gauss–Legendre nodes and weights on [-1, 1] by Newton iteration on P_n.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

/// Upper normal tail by composite Gauss–Legendre quadrature of the density over
/// `[y, y + 40]`, summed smallest panels first.
pub fn q_quadrature(y: f64, rule: &[(f64, f64)]) -> f64 {
    let width = 0.125;
    let panels = (40.0 / width) as usize;
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let mut parts: Vec<f64> = (0..panels)
        .map(|p| {
            let lo = y + p as f64 * width;
            let half = 0.5 * width;
            let mid = lo + half;
            rule.iter()
                .map(|(x, w)| {
                    let u = mid + half * x;
                    w * half * (-0.5 * u * u).exp()
                })
                .sum::<f64>()
        })
        .collect();
    parts.reverse();
    norm * parts.iter().sum::<f64>()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn from_na(m: &DMatrix<f64>) -> RealMatrix {
    let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
    RealMatrix::from_rows(&rows).unwrap()
}

/// Random `A = P D P⁻¹` with real `P` and `D` block diagonal (real eigenvalues and
/// rotation-scaling blocks), spectral radius at most `radius`.
pub fn random_diagonalizable(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> DMatrix<f64> {
    let mut d = DMatrix::<f64>::zeros(n, n);
    let mut i = 0;
    while i < n {
        if i + 1 < n && rng.random_bool(0.5) {
            let r = rng.random_range(0.05..radius);
            let th = rng.random_range(0.1..std::f64::consts::PI - 0.1);
            let (re, im) = (r * th.cos(), r * th.sin());
            d[(i, i)] = re;
            d[(i + 1, i + 1)] = re;
            d[(i, i + 1)] = -im;
            d[(i + 1, i)] = im;
            i += 2;
        } else {
            d[(i, i)] = rng.random_range(-radius..radius);
            i += 1;
        }
    }
    let p = random_matrix(rng, n, n) * 0.5 + DMatrix::<f64>::identity(n, n) * 1.5;
    let p_inv = p.clone().try_inverse().unwrap();
    &p * d * p_inv
}

pub fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let l = random_matrix(rng, n, n);
    &l * l.transpose()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
