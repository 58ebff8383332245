//! Closed-form outage model: error variance as a function of age, Gaussian tail
//! probability of leaving the cost band, and its convexity in the variance.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::control_loop::SystemModel;
use crate::error::{Error, Result};
use crate::statespace::{eig_decompose, transform_covariance, PowerCache, RealMatrix};

/// Which powers of `A` enter the error sum for age `α`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceConvention {
    /// `τ = 1 ..= α+1`, the index range printed with the closed form.
    PaperShifted,
    /// `τ = 0 ..= α`, obtained by unrolling the loop one step.
    #[default]
    Accumulation,
}

impl VarianceConvention {
    pub fn exponents(self, age: u32) -> std::ops::RangeInclusive<u32> {
        match self {
            VarianceConvention::PaperShifted => 1..=age + 1,
            VarianceConvention::Accumulation => 0..=age,
        }
    }

    pub fn other(self) -> Self {
        match self {
            VarianceConvention::PaperShifted => VarianceConvention::Accumulation,
            VarianceConvention::Accumulation => VarianceConvention::PaperShifted,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VarianceConvention::PaperShifted => "paper_shifted",
            VarianceConvention::Accumulation => "accumulation",
        }
    }
}

impl fmt::Display for VarianceConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VarianceConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_shifted" => Ok(VarianceConvention::PaperShifted),
            "accumulation" => Ok(VarianceConvention::Accumulation),
            other => Err(Error::Usage(format!("unknown variance convention `{other}`"))),
        }
    }
}

/// Coordinate along which convexity of `p_out` is assessed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InflectionAxis {
    /// Second derivative taken in `v = σ_G²`; inflection at `ΔG²/3`.
    Variance,
    /// Second derivative taken in `σ_G`; inflection at `σ_G² = ΔG²/2`.
    #[default]
    StdDev,
}

impl InflectionAxis {
    pub const ALL: [InflectionAxis; 2] = [InflectionAxis::Variance, InflectionAxis::StdDev];

    /// Analytic inflection, expressed as a variance.
    pub fn threshold(self, delta_g: f64) -> f64 {
        match self {
            InflectionAxis::Variance => delta_g * delta_g / 3.0,
            InflectionAxis::StdDev => delta_g * delta_g / 2.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InflectionAxis::Variance => "variance",
            InflectionAxis::StdDev => "std_dev",
        }
    }
}

impl fmt::Display for InflectionAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InflectionAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variance" => Ok(InflectionAxis::Variance),
            "std_dev" => Ok(InflectionAxis::StdDev),
            other => Err(Error::Usage(format!("unknown inflection axis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Convex,
    Concave,
    Inflection,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Convex => "convex",
            Regime::Concave => "concave",
            Regime::Inflection => "inflection",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutagePoint {
    pub age: u32,
    pub sigma_g_sq: f64,
    pub p_out: f64,
    pub regime: Regime,
}

/// Upper tail of the standard normal, `0.5 erfc(y / √2)`.
pub fn q_function(y: f64) -> f64 {
    0.5 * libm::erfc(y / std::f64::consts::SQRT_2)
}

fn check_age(age: u32) -> Result<()> {
    if age == 0 {
        Err(Error::InvalidAge(age))
    } else {
        Ok(())
    }
}

fn quadratic_form(row: &[f64], sigma: &RealMatrix) -> f64 {
    let n = row.len();
    let mut acc = 0.0;
    for i in 0..n {
        if row[i] == 0.0 {
            continue;
        }
        let s = sigma.row(i);
        acc += row[i] * s.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
    }
    acc
}

/// `σ_G² = Σ_τ (g A^τ) Σ (g A^τ)ᵀ` over the convention's exponent range,
/// using cached matrix powers.
pub fn error_variance(model: &SystemModel, age: u32, conv: VarianceConvention) -> Result<f64> {
    check_age(age)?;
    let range = conv.exponents(age);
    let cache = PowerCache::new(model.a(), *range.end())?;
    let g = model.cost_row();
    let sigma = model.noise_cov();
    let mut total = 0.0;
    for tau in range {
        let row = g.matmul(cache.get(tau).expect("cache covers range"))?;
        total += quadratic_form(row.row(0), sigma);
    }
    Ok(total.max(0.0))
}

/// Same quantity through the eigendecomposition `A = P Λ P⁻¹`:
/// `Σ_τ g' Λ^τ Σ' (Λᴴ)^τ g'ᴴ` with `g' = g P` and `Σ' = P⁻¹ Σ P⁻ᴴ`.
pub fn error_variance_diag(
    model: &SystemModel,
    age: u32,
    conv: VarianceConvention,
    tol: f64,
) -> Result<f64> {
    check_age(age)?;
    let eig = eig_decompose(model.a(), tol)?;
    if !eig.diagonalizable {
        return Err(Error::NotDiagonalizable {
            condition: eig.condition,
            residual: eig.residual,
        });
    }
    let n = model.states();
    let g = model.cost_row().to_complex();
    let g_prime = &g * &eig.vectors;
    let sigma_prime = transform_covariance(&eig.vectors, model.noise_cov())?;

    let mut total = Complex64::new(0.0, 0.0);
    let mut magnitude = 0.0;
    for tau in conv.exponents(age) {
        let h: Vec<Complex64> = (0..n)
            .map(|i| g_prime[(0, i)] * eig.values[i].powu(tau))
            .collect();
        for i in 0..n {
            for j in 0..n {
                let term = h[i] * sigma_prime[(i, j)] * h[j].conj();
                total += term;
                magnitude += term.norm();
            }
        }
    }
    if total.im.abs() > 1e-10 * magnitude.max(1.0) {
        return Err(Error::ImaginaryResidue {
            real: total.re,
            imag: total.im,
        });
    }
    Ok(total.re.max(0.0))
}

/// `2 Q(ΔG / σ_G)`, with `σ_G² = 0` mapped to 0.
pub fn outage_probability(delta_g: f64, sigma_g_sq: f64) -> f64 {
    if sigma_g_sq <= 0.0 {
        return 0.0;
    }
    (2.0 * q_function(delta_g / sigma_g_sq.sqrt())).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InflectionPoint {
    pub axis: InflectionAxis,
    /// `ΔG²/2`, the closed-form value.
    pub paper_value: f64,
    /// Numerically located inflection along `axis`, as a variance.
    pub numeric_value: f64,
}

const GRID_POINTS_PER_DECADE: usize = 400;
const GRID_DECADES: i32 = 4;
const DIFF_STEP: f64 = 1e-4;

// Central second difference of p_out along the axis coordinate `s`. Returns 0
// where p_out is subnormal, since the difference there is rounding noise.
fn second_difference(delta_g: f64, axis: InflectionAxis, s: f64) -> f64 {
    let f = |c: f64| match axis {
        InflectionAxis::Variance => outage_probability(delta_g, c),
        InflectionAxis::StdDev => outage_probability(delta_g, c * c),
    };
    let h = s * DIFF_STEP;
    let low = f(s - h);
    if low < f64::MIN_POSITIVE {
        return 0.0;
    }
    f(s + h) - 2.0 * f(s) + low
}

fn axis_coordinate(axis: InflectionAxis, variance: f64) -> f64 {
    match axis {
        InflectionAxis::Variance => variance,
        InflectionAxis::StdDev => variance.sqrt(),
    }
}

/// Variance grid `ΔG² · 10^[-4, 4]`, geometric with 400 points per decade.
pub fn inflection_grid(delta_g: f64) -> Vec<f64> {
    let d2 = delta_g * delta_g;
    let count = GRID_POINTS_PER_DECADE * (2 * GRID_DECADES) as usize;
    (0..=count)
        .map(|i| {
            let exp = -GRID_DECADES as f64 + i as f64 / GRID_POINTS_PER_DECADE as f64;
            d2 * 10f64.powf(exp)
        })
        .collect()
}

/// Signs of the second difference over [`inflection_grid`], zeros dropped.
pub fn curvature_signs(delta_g: f64, axis: InflectionAxis) -> Vec<(f64, f64)> {
    inflection_grid(delta_g)
        .into_iter()
        .map(|v| (v, second_difference(delta_g, axis, axis_coordinate(axis, v))))
        .filter(|(_, d)| *d != 0.0)
        .map(|(v, d)| (v, d.signum()))
        .collect()
}

/// Locates the convex-to-concave switch of `p_out` along `axis` by scanning the
/// geometric grid for a sign change and bisecting it to `1e-12` relative.
pub fn inflection_variance(delta_g: f64, axis: InflectionAxis) -> Result<InflectionPoint> {
    if !(delta_g > 0.0 && delta_g.is_finite()) {
        return Err(Error::Usage(format!(
            "band half-width must be positive, got {delta_g}"
        )));
    }
    let signs = curvature_signs(delta_g, axis);
    let (lo, hi) = signs
        .windows(2)
        .find(|w| w[0].1 > 0.0 && w[1].1 < 0.0)
        .map(|w| (w[0].0, w[1].0))
        .ok_or_else(|| Error::InvalidModel("no curvature sign change on the grid".into()))?;

    let mut lo = axis_coordinate(axis, lo);
    let mut hi = axis_coordinate(axis, hi);
    while (hi - lo) > 1e-12 * hi {
        let mid = 0.5 * (lo + hi);
        if second_difference(delta_g, axis, mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s = 0.5 * (lo + hi);
    let numeric_value = match axis {
        InflectionAxis::Variance => s,
        InflectionAxis::StdDev => s * s,
    };
    Ok(InflectionPoint {
        axis,
        paper_value: delta_g * delta_g / 2.0,
        numeric_value,
    })
}

/// Convex below the axis threshold, concave above, inflection within `1e-9` relative.
pub fn classify_regime(delta_g: f64, sigma_g_sq: f64, axis: InflectionAxis) -> Regime {
    let threshold = axis.threshold(delta_g);
    if (sigma_g_sq - threshold).abs() <= 1e-9 * threshold {
        Regime::Inflection
    } else if sigma_g_sq < threshold {
        Regime::Convex
    } else {
        Regime::Concave
    }
}

pub fn outage_curve(
    model: &SystemModel,
    ages: &[u32],
    conv: VarianceConvention,
    axis: InflectionAxis,
) -> Result<Vec<OutagePoint>> {
    if ages.is_empty() {
        return Err(Error::EmptyInput("ages"));
    }
    ages.iter()
        .map(|&age| {
            let sigma_g_sq = error_variance(model, age, conv)?;
            Ok(OutagePoint {
                age,
                sigma_g_sq,
                p_out: outage_probability(model.delta_g(), sigma_g_sq),
                regime: classify_regime(model.delta_g(), sigma_g_sq, axis),
            })
        })
        .collect()
}
