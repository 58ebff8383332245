//! Monte-Carlo validation of the outage model.
//!
//! Every episode owns a ChaCha8 stream selected by `(base_seed, episode_index)`,
//! episodes are reduced in fixed chunks, and [`aggregate`] sorts its inputs
//! before pooling, so results do not depend on the thread schedule.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::aoi_link::{aoi_stationary_pmf, LinkModel};
use crate::control_loop::{LoopState, NoiseSampler, SystemModel};
use crate::error::{Error, Result};
use crate::outage_model::{error_variance, outage_probability, q_function, VarianceConvention};

const EPISODE_CHUNK: u64 = 256;

/// One Monte-Carlo experiment. `model` carries the unit noise shape; the
/// simulated covariance is `noise_scale² · model.noise_cov()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub model: SystemModel,
    pub noise_scale: f64,
    pub link: LinkModel,
    pub x0: Vec<f64>,
    /// Steps simulated per episode.
    pub horizon: u64,
    pub episodes: u64,
    /// Leading states excluded from statistics.
    pub warmup: u64,
    /// Post-warmup states are counted every `sample_stride` steps.
    pub sample_stride: u64,
    pub base_seed: u64,
    pub convention: VarianceConvention,
    pub history_depth: usize,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.horizon <= self.warmup {
            return Err(Error::scenario(
                "simulation.horizon",
                format!("horizon {} must exceed warmup {}", self.horizon, self.warmup),
            ));
        }
        if self.episodes == 0 {
            return Err(Error::scenario("simulation.episodes", "at least one episode is required"));
        }
        if self.sample_stride == 0 {
            return Err(Error::scenario("simulation.sample_stride", "stride must be at least 1"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::scenario("system.noise_scale", "noise scale must be finite and nonnegative"));
        }
        if self.x0.len() != self.model.states() {
            return Err(Error::scenario(
                "simulation.x0",
                format!("expected {} entries, got {}", self.model.states(), self.x0.len()),
            ));
        }
        self.link.validate()?;
        if let Some(max) = self.link.max_age() {
            if max as usize > self.history_depth {
                return Err(Error::HistoryOverflow {
                    age: max,
                    depth: self.history_depth,
                });
            }
        }
        Ok(())
    }

    /// Model with the scaled noise covariance actually simulated.
    pub fn effective_model(&self) -> Result<SystemModel> {
        let s2 = self.noise_scale * self.noise_scale;
        self.model.with_noise_cov(self.model.noise_cov().scaled(s2))
    }

    /// Post-warmup states counted per episode.
    pub fn counted_per_episode(&self) -> u64 {
        (self.horizon - self.warmup) / self.sample_stride
    }

    pub fn with_noise_scale(&self, noise_scale: f64) -> Self {
        Self {
            noise_scale,
            ..self.clone()
        }
    }

    pub fn with_link(&self, link: LinkModel) -> Self {
        Self {
            link,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, base_seed: u64) -> Self {
        Self {
            base_seed,
            ..self.clone()
        }
    }
}

/// Running count, mean and sum of squared deviations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = self.count + other.count;
        let delta = other.mean - self.mean;
        let w = other.count as f64 / n as f64;
        self.mean += delta * w;
        self.m2 += other.m2 + delta * delta * self.count as f64 * w;
        self.count = n;
    }

    /// Unbiased sample variance; 0 for fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct AgeBucket {
    pub steps: u64,
    pub outages: u64,
    pub moments: Moments,
}

impl AgeBucket {
    fn merge(&mut self, other: &AgeBucket) {
        self.steps += other.steps;
        self.outages += other.outages;
        self.moments.merge(&other.moments);
    }
}

/// Counters from one or more episodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunStats {
    pub seed: u64,
    pub first_episode: u64,
    pub episodes: u64,
    pub counted_steps: u64,
    pub outage_steps: u64,
    /// Per-age counters; the age is that of the information behind the control
    /// that produced the counted state.
    pub by_age: BTreeMap<u32, AgeBucket>,
    /// Moments of `g x - G_aim` over counted states.
    pub moments: Moments,
}

impl RunStats {
    fn empty(seed: u64, episode: u64) -> Self {
        Self {
            seed,
            first_episode: episode,
            episodes: 0,
            counted_steps: 0,
            outage_steps: 0,
            by_age: BTreeMap::new(),
            moments: Moments::default(),
        }
    }

    pub fn age_histogram(&self) -> BTreeMap<u32, u64> {
        self.by_age.iter().map(|(k, b)| (*k, b.steps)).collect()
    }

    /// Sample variance of `g x - G_aim`.
    pub fn empirical_variance(&self) -> f64 {
        self.moments.variance()
    }

    pub fn outage_rate(&self) -> Option<f64> {
        (self.counted_steps > 0).then(|| self.outage_steps as f64 / self.counted_steps as f64)
    }

    fn merge(&mut self, other: &RunStats) {
        self.seed = self.seed.min(other.seed);
        self.first_episode = self.first_episode.min(other.first_episode);
        self.episodes += other.episodes;
        self.counted_steps += other.counted_steps;
        self.outage_steps += other.outage_steps;
        for (age, bucket) in &other.by_age {
            self.by_age.entry(*age).or_default().merge(bucket);
        }
        self.moments.merge(&other.moments);
    }

    fn sort_key(&self) -> (u64, u64, u64, u64, u64, u64, u64) {
        (
            self.seed,
            self.first_episode,
            self.episodes,
            self.counted_steps,
            self.outage_steps,
            self.moments.mean.to_bits(),
            self.moments.m2.to_bits(),
        )
    }
}

/// Random stream of one episode: ChaCha8 seeded with `base_seed`, stream `episode`.
pub fn episode_rng(base_seed: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(episode);
    rng
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for sub-experiment `tag` of a run seeded with `base`.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    splitmix64(base ^ splitmix64(tag.wrapping_add(0x0005_DEEC_E66D)))
}

struct EpisodeRunner<'a> {
    scenario: &'a Scenario,
    model: SystemModel,
    noise: NoiseSampler,
}

impl<'a> EpisodeRunner<'a> {
    fn new(scenario: &'a Scenario) -> Result<Self> {
        scenario.validate()?;
        let model = scenario.effective_model()?;
        let noise = NoiseSampler::new(model.noise_cov())?;
        Ok(Self {
            scenario,
            model,
            noise,
        })
    }

    fn run(&self, episode: u64) -> Result<RunStats> {
        let sc = self.scenario;
        let mut rng = episode_rng(sc.base_seed, episode);
        let mut state = LoopState::new(&self.model, sc.x0.clone(), sc.history_depth)?;
        let mut stats = RunStats::empty(sc.base_seed, episode);
        stats.episodes = 1;
        for _ in 0..sc.horizon {
            let rec = state.advance(&self.model, &sc.link, &self.noise, &mut rng)?;
            let observed = rec.t + 1;
            if observed <= sc.warmup || !(observed - sc.warmup).is_multiple_of(sc.sample_stride) {
                continue;
            }
            let dev = self.model.deviation(state.x());
            let outage = dev.abs() > self.model.delta_g();
            stats.counted_steps += 1;
            stats.outage_steps += outage as u64;
            stats.moments.push(dev);
            let bucket = stats.by_age.entry(rec.age).or_default();
            bucket.steps += 1;
            bucket.outages += outage as u64;
            bucket.moments.push(dev);
        }
        Ok(stats)
    }
}

/// Simulates one episode of `scenario`.
pub fn run_episode(scenario: &Scenario, episode_index: u64) -> Result<RunStats> {
    EpisodeRunner::new(scenario)?.run(episode_index)
}

/// Runs all episodes of `scenario` on the current rayon pool.
pub fn run_scenario(scenario: &Scenario) -> Result<RunStats> {
    let runner = EpisodeRunner::new(scenario)?;
    let chunks = scenario.episodes.div_ceil(EPISODE_CHUNK);
    let partial: Vec<RunStats> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * EPISODE_CHUNK;
            let end = (start + EPISODE_CHUNK).min(scenario.episodes);
            let mut acc = RunStats::empty(scenario.base_seed, start);
            for ep in start..end {
                acc.merge(&runner.run(ep)?);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    aggregate(&partial)
}

/// Pools counters and moments. The result depends only on the multiset of inputs.
pub fn aggregate(stats: &[RunStats]) -> Result<RunStats> {
    if stats.is_empty() {
        return Err(Error::EmptyInput("run statistics"));
    }
    let mut sorted: Vec<&RunStats> = stats.iter().collect();
    sorted.sort_by_key(|s| s.sort_key());
    let mut acc = sorted[0].clone();
    for s in &sorted[1..] {
        acc.merge(s);
    }
    Ok(acc)
}

/// Two-sided standard normal quantile `z` with `P(|Z| <= z) = confidence`.
pub fn normal_quantile_two_sided(confidence: f64) -> f64 {
    let tail = 0.5 * (1.0 - confidence);
    let (mut lo, mut hi) = (0.0_f64, 40.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if q_function(mid) > tail {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateEstimate {
    pub p_sim: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_half_width: f64,
}

impl RateEstimate {
    pub fn contains(&self, p: f64) -> bool {
        p >= self.ci_low && p <= self.ci_high
    }
}

/// Wilson score interval for `successes` out of `trials`.
pub fn wilson_interval(successes: u64, trials: u64, confidence: f64) -> Result<RateEstimate> {
    if trials == 0 {
        return Err(Error::ZeroSteps);
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Usage(format!("confidence must lie in (0, 1), got {confidence}")));
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z = normal_quantile_two_sided(confidence);
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    Ok(RateEstimate {
        p_sim: p,
        ci_low: if successes == 0 { 0.0 } else { (center - half).max(0.0) },
        ci_high: if successes == trials { 1.0 } else { (center + half).min(1.0) },
        ci_half_width: half,
    })
}

pub fn estimate_rate(stats: &RunStats, confidence: f64) -> Result<RateEstimate> {
    wilson_interval(stats.outage_steps, stats.counted_steps, confidence)
}

/// Age condition of a comparison cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgeSpec {
    /// Link pinned to this age.
    Fixed(u32),
    /// The scenario's Bernoulli link, compared against the age-averaged model.
    Stationary,
}

impl fmt::Display for AgeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgeSpec::Fixed(a) => write!(f, "{a}"),
            AgeSpec::Stationary => f.write_str("stationary"),
        }
    }
}

impl Serialize for AgeSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            AgeSpec::Fixed(a) => s.serialize_u32(*a),
            AgeSpec::Stationary => s.serialize_str("stationary"),
        }
    }
}

impl std::str::FromStr for AgeSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "stationary" {
            return Ok(AgeSpec::Stationary);
        }
        match s.parse::<u32>() {
            Ok(a) if a >= 1 => Ok(AgeSpec::Fixed(a)),
            _ => Err(Error::Usage(format!("invalid age `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub noise_scale: f64,
    pub age: AgeSpec,
    pub p_sim: f64,
    pub ci_half_width: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_model: f64,
    pub within_ci: bool,
    pub counted_steps: u64,
    pub empirical_variance: f64,
    /// Model variance of the fixed-age cells; `None` for stationary rows.
    pub model_variance: Option<f64>,
}

/// Age-averaged model outage under Bernoulli(p) reception.
pub fn stationary_outage(
    model: &SystemModel,
    p: f64,
    conv: VarianceConvention,
    max_age: u32,
) -> Result<f64> {
    let mut total = 0.0;
    let mut mass = 0.0;
    for k in 1..=max_age {
        let w = aoi_stationary_pmf(p, k);
        total += w * outage_probability(model.delta_g(), error_variance(model, k, conv)?);
        mass += w;
        if 1.0 - mass < 1e-16 {
            break;
        }
    }
    Ok(total)
}

/// Model outage for a cell under `conv`, plus the fixed-age variance.
pub fn model_prediction(
    scenario: &Scenario,
    age: AgeSpec,
    conv: VarianceConvention,
) -> Result<(f64, Option<f64>)> {
    let model = scenario.effective_model()?;
    match age {
        AgeSpec::Fixed(a) => {
            let v = error_variance(&model, a, conv)?;
            Ok((outage_probability(model.delta_g(), v), Some(v)))
        }
        AgeSpec::Stationary => match scenario.link {
            LinkModel::Bernoulli { p } => Ok((
                stationary_outage(&model, p, conv, scenario.history_depth as u32)?,
                None,
            )),
            _ => Err(Error::Usage("stationary comparison needs a bernoulli link".into())),
        },
    }
}

/// Simulated statistics for one cell of a comparison grid.
pub fn simulate_cell(
    scenario: &Scenario,
    noise_scale: f64,
    age: AgeSpec,
    cell_index: u64,
) -> Result<(Scenario, RunStats)> {
    let mut cell = scenario
        .with_noise_scale(noise_scale)
        .with_seed(derive_seed(scenario.base_seed, cell_index));
    if let AgeSpec::Fixed(a) = age {
        cell.link = LinkModel::fixed_age(a)?;
    }
    let stats = run_scenario(&cell)?;
    Ok((cell, stats))
}

pub fn compare_row(
    cell: &Scenario,
    stats: &RunStats,
    age: AgeSpec,
    conv: VarianceConvention,
    confidence: f64,
) -> Result<ComparisonRow> {
    let rate = estimate_rate(stats, confidence)?;
    let (p_model, model_variance) = model_prediction(cell, age, conv)?;
    Ok(ComparisonRow {
        noise_scale: cell.noise_scale,
        age,
        p_sim: rate.p_sim,
        ci_half_width: rate.ci_half_width,
        ci_low: rate.ci_low,
        ci_high: rate.ci_high,
        p_model,
        within_ci: rate.contains(p_model),
        counted_steps: stats.counted_steps,
        empirical_variance: stats.empirical_variance(),
        model_variance,
    })
}

/// Runs every `(noise, age)` cell and compares the simulated outage rate with
/// the model under the scenario's convention.
pub fn compare(
    scenario: &Scenario,
    noise_grid: &[f64],
    age_grid: &[AgeSpec],
    confidence: f64,
) -> Result<Vec<ComparisonRow>> {
    if noise_grid.is_empty() {
        return Err(Error::EmptyInput("noise grid"));
    }
    if age_grid.is_empty() {
        return Err(Error::EmptyInput("age grid"));
    }
    let mut rows = Vec::with_capacity(noise_grid.len() * age_grid.len());
    for (i, &noise) in noise_grid.iter().enumerate() {
        for (j, &age) in age_grid.iter().enumerate() {
            let index = (i * age_grid.len() + j) as u64;
            let (cell, stats) = simulate_cell(scenario, noise, age, index)?;
            rows.push(compare_row(&cell, &stats, age, scenario.convention, confidence)?);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct Calibration {
    pub selected: VarianceConvention,
    pub empirical_variance: f64,
    pub candidates: Vec<(VarianceConvention, f64)>,
}

/// Picks the convention whose fixed-age variance is closest (in log ratio) to
/// the simulated variance of `g x - G_aim`.
pub fn calibrate_convention(scenario: &Scenario, noise_scale: f64, age: u32) -> Result<Calibration> {
    let cell = scenario
        .with_noise_scale(noise_scale)
        .with_link(LinkModel::fixed_age(age)?)
        .with_seed(derive_seed(scenario.base_seed, u64::MAX));
    let stats = run_scenario(&cell)?;
    let empirical = stats.empirical_variance();
    let model = cell.effective_model()?;
    let candidates = [VarianceConvention::PaperShifted, VarianceConvention::Accumulation]
        .into_iter()
        .map(|c| Ok((c, error_variance(&model, age, c)?)))
        .collect::<Result<Vec<_>>>()?;
    let selected = candidates
        .iter()
        .min_by(|a, b| {
            let da = (empirical / a.1).ln().abs();
            let db = (empirical / b.1).ln().abs();
            da.total_cmp(&db)
        })
        .map(|c| c.0)
        .expect("two candidates");
    Ok(Calibration {
        selected,
        empirical_variance: empirical,
        candidates,
    })
}

/// Pearson chi-square of an age histogram against a pmf on `1, 2, ...`.
///
/// Consecutive ages form bins while their expected count is at least
/// `min_expected`; the remaining mass goes to a single tail bin. Returns the
/// statistic and its degrees of freedom.
pub fn chi_square_statistic(
    histogram: &BTreeMap<u32, u64>,
    pmf: impl Fn(u32) -> f64,
    min_expected: f64,
) -> (f64, usize) {
    let total: u64 = histogram.values().sum();
    let n = total as f64;
    let mut stat = 0.0;
    let mut bins: usize = 0;
    let mut mass = 0.0;
    let mut seen = 0u64;
    let mut k = 1;
    loop {
        let expected = n * pmf(k);
        if expected < min_expected || n * (1.0 - mass - pmf(k)) < min_expected {
            break;
        }
        let observed = histogram.get(&k).copied().unwrap_or(0);
        stat += (observed as f64 - expected).powi(2) / expected;
        mass += pmf(k);
        seen += observed;
        bins += 1;
        k += 1;
    }
    let tail_expected = n * (1.0 - mass);
    let tail_observed = (total - seen) as f64;
    if tail_expected > 0.0 {
        stat += (tail_observed - tail_expected).powi(2) / tail_expected;
        bins += 1;
    }
    (stat, bins.saturating_sub(1))
}
