//! The closed loop: plant, age-aware estimator, pseudo-inverse controller and
//! the step that ties them to the uplink.
//!
//! Step ordering at time `t`: the uplink is sampled, the controller memory and
//! age are updated, the controller estimates `x(t)` from what it holds, emits
//! `u(t)`, noise `w(t)` is drawn, and the plant advances to `x(t+1)`. The
//! controller is handed `x(0)` at start, so the age is 0 until the first
//! update event and the first control acts on the exact initial state.

use std::collections::VecDeque;

use nalgebra::SymmetricEigen;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::aoi_link::{aoi_step, sample_reception, AoiState, LinkModel};
use crate::error::{Error, Result};
use crate::statespace::{pseudo_inverse, PseudoInverse, RealMatrix};

/// Default number of past controls kept by the controller.
pub const DEFAULT_HISTORY_DEPTH: usize = 512;

const PSD_TOLERANCE: f64 = 1e-12;

/// Plant, controller target and outage band.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    a: RealMatrix,
    b: RealMatrix,
    noise_cov: RealMatrix,
    cost_row: RealMatrix,
    x_aim: Vec<f64>,
    delta_g: f64,
    b_pinv: PseudoInverse,
}

impl SystemModel {
    pub fn new(
        a: RealMatrix,
        b: RealMatrix,
        noise_cov: RealMatrix,
        cost_row: RealMatrix,
        x_aim: Vec<f64>,
        delta_g: f64,
    ) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::NonSquare {
                rows: a.rows(),
                cols: a.cols(),
            });
        }
        let n = a.rows();
        if b.rows() != n {
            return Err(Error::Dimension(format!(
                "input matrix has {} rows, system has {n} states",
                b.rows()
            )));
        }
        if noise_cov.rows() != n || noise_cov.cols() != n {
            return Err(Error::Dimension(format!(
                "noise covariance is {}x{}, expected {n}x{n}",
                noise_cov.rows(),
                noise_cov.cols()
            )));
        }
        if cost_row.rows() != 1 || cost_row.cols() != n {
            return Err(Error::Dimension(format!(
                "cost row is {}x{}, expected 1x{n}",
                cost_row.rows(),
                cost_row.cols()
            )));
        }
        if x_aim.len() != n {
            return Err(Error::Dimension(format!(
                "target state has {} entries, expected {n}",
                x_aim.len()
            )));
        }
        if x_aim.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("target state must be finite".into()));
        }
        if !(delta_g > 0.0 && delta_g.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "band half-width must be positive, got {delta_g}"
            )));
        }
        check_psd(&noise_cov)?;
        let b_pinv = pseudo_inverse(&b);
        Ok(Self {
            a,
            b,
            noise_cov,
            cost_row,
            x_aim,
            delta_g,
            b_pinv,
        })
    }

    /// Same plant and band with a different noise covariance.
    pub fn with_noise_cov(&self, noise_cov: RealMatrix) -> Result<Self> {
        Self::new(
            self.a.clone(),
            self.b.clone(),
            noise_cov,
            self.cost_row.clone(),
            self.x_aim.clone(),
            self.delta_g,
        )
    }

    pub fn a(&self) -> &RealMatrix {
        &self.a
    }

    pub fn b(&self) -> &RealMatrix {
        &self.b
    }

    pub fn noise_cov(&self) -> &RealMatrix {
        &self.noise_cov
    }

    pub fn cost_row(&self) -> &RealMatrix {
        &self.cost_row
    }

    pub fn x_aim(&self) -> &[f64] {
        &self.x_aim
    }

    pub fn delta_g(&self) -> f64 {
        self.delta_g
    }

    pub fn b_pinv(&self) -> &RealMatrix {
        &self.b_pinv.matrix
    }

    pub fn states(&self) -> usize {
        self.a.rows()
    }

    pub fn inputs(&self) -> usize {
        self.b.cols()
    }

    /// True when `B B+ = I`, i.e. the controller can cancel any state offset.
    pub fn full_row_rank_input(&self) -> bool {
        self.b_pinv.rank == self.states()
    }

    pub fn cost(&self, x: &[f64]) -> f64 {
        self.cost_row.row(0).iter().zip(x).map(|(g, v)| g * v).sum()
    }

    pub fn g_aim(&self) -> f64 {
        self.cost(&self.x_aim)
    }

    /// `(G_min, G_max)`, symmetric around `G_aim`.
    pub fn band(&self) -> (f64, f64) {
        let c = self.g_aim();
        (c - self.delta_g, c + self.delta_g)
    }

    /// `g x - G_aim`.
    pub fn deviation(&self, x: &[f64]) -> f64 {
        self.cost(x) - self.g_aim()
    }

    pub fn is_outage(&self, x: &[f64]) -> bool {
        self.deviation(x).abs() > self.delta_g
    }
}

fn check_psd(sigma: &RealMatrix) -> Result<()> {
    if !sigma.is_symmetric(1e-12) {
        return Err(Error::NotSymmetric);
    }
    let scale = sigma.max_abs().max(1.0);
    let eig = SymmetricEigen::new(sigma.to_nalgebra());
    if let Some(min) = eig
        .eigenvalues
        .iter()
        .copied()
        .find(|&v| v < -PSD_TOLERANCE * scale)
    {
        return Err(Error::NotPositiveSemidefinite { eigenvalue: min });
    }
    Ok(())
}

/// Draws `w ~ N(0, Σ)` as `L z` with `L = V sqrt(max(D, 0))` from the symmetric
/// eigendecomposition of `Σ`; null directions are skipped.
#[derive(Debug, Clone)]
pub struct NoiseSampler {
    dim: usize,
    columns: Vec<Vec<f64>>,
}

impl NoiseSampler {
    pub fn new(noise_cov: &RealMatrix) -> Result<Self> {
        check_psd(noise_cov)?;
        let n = noise_cov.rows();
        let scale = noise_cov.max_abs().max(f64::MIN_POSITIVE);
        let eig = SymmetricEigen::new(noise_cov.to_nalgebra());
        let mut columns = Vec::new();
        for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda <= 1e-14 * scale || noise_cov.max_abs() == 0.0 {
                continue;
            }
            let s = lambda.sqrt();
            columns.push((0..n).map(|i| eig.eigenvectors[(i, k)] * s).collect());
        }
        Ok(Self { dim: n, columns })
    }

    pub fn rank(&self) -> usize {
        self.columns.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for col in &self.columns {
            let z: f64 = rng.sample(StandardNormal);
            for (o, c) in out.iter_mut().zip(col) {
                *o += c * z;
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.sample_into(rng, &mut out);
        out
    }
}

/// What the controller knows: the freshest received state and its own past controls.
#[derive(Debug, Clone)]
pub struct ControllerMemory {
    last_state: Vec<f64>,
    last_state_time: u64,
    // front is u(t-1)
    controls: VecDeque<Vec<f64>>,
    depth: usize,
}

impl ControllerMemory {
    pub fn new(state: Vec<f64>, time: u64, depth: usize) -> Self {
        Self {
            last_state: state,
            last_state_time: time,
            controls: VecDeque::with_capacity(depth),
            depth,
        }
    }

    /// Stores a received state if it is fresher than the one held.
    pub fn receive(&mut self, state: &[f64], time: u64) -> bool {
        if time <= self.last_state_time {
            return false;
        }
        self.last_state.copy_from_slice(state);
        self.last_state_time = time;
        true
    }

    pub fn push_control(&mut self, u: &[f64]) {
        if self.depth == 0 {
            return;
        }
        let mut buf = if self.controls.len() == self.depth {
            self.controls.pop_back().expect("non-empty history")
        } else {
            vec![0.0; u.len()]
        };
        buf.copy_from_slice(u);
        self.controls.push_front(buf);
    }

    /// `u(t - tau)` for `tau >= 1`.
    pub fn control(&self, tau: usize) -> Option<&[f64]> {
        tau.checked_sub(1)
            .and_then(|i| self.controls.get(i))
            .map(|v| v.as_slice())
    }

    pub fn last_state(&self) -> &[f64] {
        &self.last_state
    }

    pub fn last_state_time(&self) -> u64 {
        self.last_state_time
    }

    pub fn history_len(&self) -> usize {
        self.controls.len()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }
}

fn check_history(mem: &ControllerMemory, age: u32) -> Result<()> {
    if age as usize > mem.depth {
        return Err(Error::HistoryOverflow {
            age,
            depth: mem.depth,
        });
    }
    if age as usize > mem.controls.len() {
        return Err(Error::InsufficientHistory {
            needed: age as usize,
            available: mem.controls.len(),
        });
    }
    Ok(())
}

fn estimate_into(
    model: &SystemModel,
    mem: &ControllerMemory,
    age: u32,
    out: &mut [f64],
    tmp: &mut [f64],
) -> Result<()> {
    check_history(mem, age)?;
    out.copy_from_slice(&mem.last_state);
    // Replay the noise-free dynamics from x(t-age) with the controls actually sent.
    for tau in (1..=age as usize).rev() {
        let u = mem.control(tau).expect("history checked");
        model.a.mul_vec_into(out, tmp);
        model.b.mul_vec_add_into(u, tmp);
        out.copy_from_slice(tmp);
    }
    Ok(())
}

/// `A^age x(t-age) + sum_{τ=1}^{age} A^{τ-1} B u(t-τ)`, from controller memory only.
pub fn estimate_state(model: &SystemModel, mem: &ControllerMemory, age: u32) -> Result<Vec<f64>> {
    let n = model.states();
    let mut out = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    estimate_into(model, mem, age, &mut out, &mut tmp)?;
    Ok(out)
}

fn control_into(model: &SystemModel, x_hat: &[f64], u: &mut [f64], tmp: &mut [f64]) {
    model.a.mul_vec_into(x_hat, tmp);
    for (t, aim) in tmp.iter_mut().zip(&model.x_aim) {
        *t = aim - *t;
    }
    model.b_pinv.matrix.mul_vec_into(tmp, u);
}

/// `B+ (x_aim - A x̂)`.
pub fn control_signal(model: &SystemModel, x_hat: &[f64]) -> Vec<f64> {
    let mut u = vec![0.0; model.inputs()];
    let mut tmp = vec![0.0; model.states()];
    control_into(model, x_hat, &mut u, &mut tmp);
    u
}

/// `A x + B u + w`.
pub fn plant_step(model: &SystemModel, x: &[f64], u: &[f64], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; model.states()];
    plant_into(model, x, u, w, &mut out);
    out
}

fn plant_into(model: &SystemModel, x: &[f64], u: &[f64], w: &[f64], out: &mut [f64]) {
    model.a.mul_vec_into(x, out);
    model.b.mul_vec_add_into(u, out);
    for (o, wi) in out.iter_mut().zip(w) {
        *o += wi;
    }
}

/// Outcome of one loop step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepRecord {
    /// Time at which the control was applied.
    pub t: u64,
    /// Age of the controller's information at `t`.
    pub age: u32,
    /// Whether a fresher state arrived during this step.
    pub received: bool,
}

#[derive(Debug, Clone)]
struct Scratch {
    x_hat: Vec<f64>,
    tmp: Vec<f64>,
    next: Vec<f64>,
}

/// Full state of one closed-loop episode.
#[derive(Debug, Clone)]
pub struct LoopState {
    t: u64,
    x: Vec<f64>,
    aoi: AoiState,
    mem: ControllerMemory,
    // sensor packets in flight, front is x(t-1)
    outbox: VecDeque<Vec<f64>>,
    last_control: Vec<f64>,
    last_noise: Vec<f64>,
    scratch: Scratch,
}

impl LoopState {
    pub fn new(model: &SystemModel, x0: Vec<f64>, history_depth: usize) -> Result<Self> {
        let n = model.states();
        if x0.len() != n {
            return Err(Error::Dimension(format!(
                "initial state has {} entries, expected {n}",
                x0.len()
            )));
        }
        Ok(Self {
            t: 0,
            mem: ControllerMemory::new(x0.clone(), 0, history_depth),
            x: x0,
            aoi: AoiState::INITIAL,
            outbox: VecDeque::new(),
            last_control: vec![0.0; model.inputs()],
            last_noise: vec![0.0; n],
            scratch: Scratch {
                x_hat: vec![0.0; n],
                tmp: vec![0.0; n],
                next: vec![0.0; n],
            },
        })
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn aoi(&self) -> AoiState {
        self.aoi
    }

    pub fn memory(&self) -> &ControllerMemory {
        &self.mem
    }

    /// Control applied in the most recent step.
    pub fn last_control(&self) -> &[f64] {
        &self.last_control
    }

    /// Noise injected in the most recent step.
    pub fn last_noise(&self) -> &[f64] {
        &self.last_noise
    }

    /// Advances one step with `w(t)` drawn from `noise`.
    pub fn advance<R: Rng + ?Sized>(
        &mut self,
        model: &SystemModel,
        link: &LinkModel,
        noise: &NoiseSampler,
        rng: &mut R,
    ) -> Result<StepRecord> {
        let record = self.update_link(link, rng);
        self.act(model, link, record.age)?;
        noise.sample_into(rng, &mut self.last_noise);
        self.finish(model, link);
        Ok(record)
    }

    /// Advances one step with a caller-supplied `w(t)`.
    pub fn advance_with_noise<R: Rng + ?Sized>(
        &mut self,
        model: &SystemModel,
        link: &LinkModel,
        w: &[f64],
        rng: &mut R,
    ) -> Result<StepRecord> {
        if w.len() != self.x.len() {
            return Err(Error::Dimension(format!(
                "noise has {} entries, expected {}",
                w.len(),
                self.x.len()
            )));
        }
        let record = self.update_link(link, rng);
        self.act(model, link, record.age)?;
        self.last_noise.copy_from_slice(w);
        self.finish(model, link);
        Ok(record)
    }

    fn update_link<R: Rng + ?Sized>(&mut self, link: &LinkModel, rng: &mut R) -> StepRecord {
        let t = self.t;
        let mut received = false;
        if t >= 1 {
            let lag = link.packet_lag() as usize;
            let delivered = sample_reception(link, t, rng);
            if delivered && self.outbox.len() >= lag {
                received = self.mem.receive(&self.outbox[lag - 1], t - lag as u64);
            }
            self.aoi = match link {
                LinkModel::FixedAge { .. } => AoiState::new((t - self.mem.last_state_time) as u32),
                _ => aoi_step(self.aoi, received),
            };
        }
        debug_assert_eq!(self.aoi.age() as u64, t - self.mem.last_state_time);
        StepRecord {
            t,
            age: self.aoi.age(),
            received,
        }
    }

    fn act(&mut self, model: &SystemModel, _link: &LinkModel, age: u32) -> Result<()> {
        let Scratch { x_hat, tmp, .. } = &mut self.scratch;
        estimate_into(model, &self.mem, age, x_hat, tmp)?;
        control_into(model, x_hat, &mut self.last_control, tmp);
        Ok(())
    }

    fn finish(&mut self, model: &SystemModel, link: &LinkModel) {
        plant_into(
            model,
            &self.x,
            &self.last_control,
            &self.last_noise,
            &mut self.scratch.next,
        );
        let lag = link.packet_lag() as usize;
        let mut packet = if self.outbox.len() >= lag {
            self.outbox.pop_back().expect("non-empty outbox")
        } else {
            vec![0.0; self.x.len()]
        };
        packet.copy_from_slice(&self.x);
        self.outbox.push_front(packet);
        self.mem.push_control(&self.last_control);
        std::mem::swap(&mut self.x, &mut self.scratch.next);
        self.t += 1;
    }
}

/// Functional form of [`LoopState::advance`].
pub fn closed_loop_step<R: Rng + ?Sized>(
    model: &SystemModel,
    state: &LoopState,
    link: &LinkModel,
    noise: &NoiseSampler,
    rng: &mut R,
) -> Result<LoopState> {
    let mut next = state.clone();
    next.advance(model, link, noise, rng)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statespace::mat_power;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table1(sigma2: f64) -> SystemModel {
        SystemModel::new(
            RealMatrix::from_rows(&[[1.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap(),
            RealMatrix::column_vector(&[0.5, 0.5, 0.0]).unwrap(),
            RealMatrix::from_diagonal(&[0.0, sigma2, 0.0]).unwrap(),
            RealMatrix::row_vector(&[1.0, 0.0, 0.0]).unwrap(),
            vec![-90.0, 0.0, 25.0],
            12.5,
        )
        .unwrap()
    }

    fn identity_model(n: usize) -> SystemModel {
        SystemModel::new(
            RealMatrix::identity(n),
            RealMatrix::identity(n),
            RealMatrix::zeros(n, n),
            RealMatrix::row_vector(&vec![1.0; n]).unwrap(),
            vec![0.0; n],
            1.0,
        )
        .unwrap()
    }

    fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    #[test]
    fn model_validation() {
        let a = RealMatrix::identity(2);
        let b = RealMatrix::identity(2);
        let g = RealMatrix::row_vector(&[1.0, 0.0]).unwrap();
        let bad_sigma = RealMatrix::from_diagonal(&[1.0, -0.5]).unwrap();
        assert!(matches!(
            SystemModel::new(a.clone(), b.clone(), bad_sigma, g.clone(), vec![0.0; 2], 1.0),
            Err(Error::NotPositiveSemidefinite { .. })
        ));
        let asym = RealMatrix::from_rows(&[[1.0, 0.2], [0.0, 1.0]]).unwrap();
        assert!(matches!(
            SystemModel::new(a.clone(), b.clone(), asym, g.clone(), vec![0.0; 2], 1.0),
            Err(Error::NotSymmetric)
        ));
        assert!(SystemModel::new(a.clone(), b.clone(), RealMatrix::zeros(2, 2), g.clone(), vec![0.0; 2], 0.0).is_err());
        assert!(SystemModel::new(a.clone(), b, RealMatrix::zeros(2, 2), g, vec![0.0; 3], 1.0).is_err());
    }

    #[test]
    fn band_is_symmetric_around_target_cost() {
        let m = table1(1.0);
        assert_eq!(m.g_aim(), -90.0);
        assert_eq!(m.band(), (-102.5, -77.5));
        assert!(!m.is_outage(&[-102.0, 0.0, 25.0]));
        assert!(m.is_outage(&[-103.0, 0.0, 25.0]));
    }

    #[test]
    fn plant_examples() {
        let m = identity_model(1);
        assert_eq!(plant_step(&m, &[0.0], &[1.0], &[2.0]), vec![3.0]);
        assert_eq!(plant_step(&m, &[0.0], &[0.0], &[0.0]), vec![0.0]);
        let t1 = table1(1.0);
        assert_eq!(
            plant_step(&t1, &[-90.0, 0.0, 25.0], &[0.0], &[0.0; 3]),
            vec![-90.0, 0.0, 25.0]
        );
    }

    #[test]
    fn control_examples() {
        let m = SystemModel::new(
            RealMatrix::from_rows(&[[0.5, 0.1], [0.0, 2.0]]).unwrap(),
            RealMatrix::identity(2),
            RealMatrix::zeros(2, 2),
            RealMatrix::row_vector(&[1.0, 0.0]).unwrap(),
            vec![1.0, -1.0],
            1.0,
        )
        .unwrap();
        // A x̂ = x_aim gives zero control.
        let x_hat = [2.1, -0.5];
        let ax = m.a().mul_vec(&x_hat);
        assert!((ax[0] - 1.0).abs() < 1e-15 && (ax[1] + 1.0).abs() < 1e-15);
        assert!(control_signal(&m, &x_hat).iter().all(|u| u.abs() < 1e-14));
        // B = I gives x_aim - A x̂.
        let x_hat = [0.3, 0.7];
        let ax = m.a().mul_vec(&x_hat);
        let u = control_signal(&m, &x_hat);
        assert!((u[0] - (1.0 - ax[0])).abs() < 1e-14);
        assert!((u[1] - (-1.0 - ax[1])).abs() < 1e-14);

        // Table-1 input column: u = d1 + d2 with d = x_aim - A x̂.
        let t1 = table1(1.0);
        let x_hat = [-80.0, 3.0, 24.0];
        let ax = t1.a().mul_vec(&x_hat);
        let d: Vec<f64> = t1.x_aim().iter().zip(&ax).map(|(a, b)| a - b).collect();
        let u = control_signal(&t1, &x_hat);
        assert_eq!(u.len(), 1);
        assert!((u[0] - (d[0] + d[1])).abs() < 1e-12);
    }

    #[test]
    fn estimator_single_step() {
        let t1 = table1(1.0);
        let x0 = vec![-88.0, 1.5, 25.0];
        let u0 = vec![-0.7];
        let mut mem = ControllerMemory::new(x0.clone(), 10, 8);
        mem.push_control(&u0);
        let est = estimate_state(&t1, &mem, 1).unwrap();
        let expected = add(&t1.a().mul_vec(&x0), &t1.b().mul_vec(&u0));
        assert_eq!(est, expected);
    }

    #[test]
    fn estimator_reports_missing_history() {
        let t1 = table1(1.0);
        let mut mem = ControllerMemory::new(vec![0.0; 3], 0, 4);
        mem.push_control(&[0.0]);
        assert!(matches!(
            estimate_state(&t1, &mem, 2),
            Err(Error::InsufficientHistory { needed: 2, available: 1 })
        ));
        assert!(matches!(
            estimate_state(&t1, &mem, 5),
            Err(Error::HistoryOverflow { age: 5, depth: 4 })
        ));
    }

    #[test]
    fn estimation_error_is_accumulated_noise() {
        // Brute-force two-step expansion: x̂(t) - x(t) = -(w(t-1) + A w(t-2)).
        let t1 = table1(1.0);
        let link = LinkModel::fixed_age(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut state = LoopState::new(&t1, t1.x_aim().to_vec(), 16).unwrap();
        let mut noises: Vec<Vec<f64>> = Vec::new();
        for k in 0..12 {
            let w = vec![0.1 * k as f64 - 0.3, (k as f64).sin(), 0.05 * k as f64];
            state.advance_with_noise(&t1, &link, &w, &mut rng).unwrap();
            noises.push(w);
        }
        // Next step acts at t = 12 with age 2.
        let mut probe = state.clone();
        let rec = probe.update_link(&link, &mut rng);
        assert_eq!(rec.age, 2);
        let est = estimate_state(&t1, probe.memory(), rec.age).unwrap();
        let t = noises.len();
        let aw = t1.a().mul_vec(&noises[t - 2]);
        let acc = add(&noises[t - 1], &aw);
        for i in 0..3 {
            assert!((est[i] - probe.x()[i] + acc[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_noise_perfect_link_hits_target() {
        let m = SystemModel::new(
            RealMatrix::from_rows(&[[1.1, 0.4], [-0.3, 0.8]]).unwrap(),
            RealMatrix::from_rows(&[[1.0, 0.5], [0.0, 2.0]]).unwrap(),
            RealMatrix::zeros(2, 2),
            RealMatrix::row_vector(&[1.0, 1.0]).unwrap(),
            vec![3.0, -2.0],
            0.5,
        )
        .unwrap();
        assert!(m.full_row_rank_input());
        let link = LinkModel::bernoulli(1.0).unwrap();
        let noise = NoiseSampler::new(m.noise_cov()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut state = LoopState::new(&m, vec![10.0, 7.0], 8).unwrap();
        for _ in 0..20 {
            state.advance(&m, &link, &noise, &mut rng).unwrap();
            for (x, aim) in state.x().iter().zip(m.x_aim()) {
                assert!((x - aim).abs() < 1e-9);
            }
            assert!(!m.is_outage(state.x()));
        }
    }

    #[test]
    fn table1_equilibrium_is_preserved() {
        let m = table1(0.0);
        let noise = NoiseSampler::new(m.noise_cov()).unwrap();
        assert_eq!(noise.rank(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for link in [
            LinkModel::bernoulli(0.3).unwrap(),
            LinkModel::fixed_age(3).unwrap(),
            LinkModel::periodic(4).unwrap(),
        ] {
            let mut state = LoopState::new(&m, m.x_aim().to_vec(), 64).unwrap();
            for _ in 0..200 {
                state.advance(&m, &link, &noise, &mut rng).unwrap();
                assert_eq!(state.x(), m.x_aim());
            }
        }
    }

    #[test]
    fn control_depends_only_on_memory() {
        let m = table1(1.0);
        let link = LinkModel::fixed_age(3).unwrap();
        let noise = NoiseSampler::new(m.noise_cov()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut state = LoopState::new(&m, m.x_aim().to_vec(), 32).unwrap();
        for _ in 0..10 {
            state.advance(&m, &link, &noise, &mut rng).unwrap();
        }
        let mut a = state.clone();
        let mut b = state.clone();
        b.x = vec![1e3, -1e3, 0.0];
        let mut rng_a = ChaCha8Rng::seed_from_u64(99);
        let mut rng_b = ChaCha8Rng::seed_from_u64(99);
        a.advance(&m, &link, &noise, &mut rng_a).unwrap();
        b.advance(&m, &link, &noise, &mut rng_b).unwrap();
        assert_eq!(a.last_control(), b.last_control());
    }

    #[test]
    fn fixed_age_pins_age_after_start() {
        let m = table1(1.0);
        let link = LinkModel::fixed_age(4).unwrap();
        let noise = NoiseSampler::new(m.noise_cov()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut state = LoopState::new(&m, m.x_aim().to_vec(), 16).unwrap();
        let ages: Vec<u32> = (0..10)
            .map(|_| state.advance(&m, &link, &noise, &mut rng).unwrap().age)
            .collect();
        assert_eq!(ages, vec![0, 1, 2, 3, 4, 4, 4, 4, 4, 4]);
    }

    #[test]
    fn long_outage_overflows_history() {
        let m = table1(1.0);
        let link = LinkModel::periodic(50).unwrap();
        let noise = NoiseSampler::new(m.noise_cov()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut state = LoopState::new(&m, m.x_aim().to_vec(), 10).unwrap();
        let err = (0..50)
            .map(|_| state.advance(&m, &link, &noise, &mut rng))
            .find_map(|r| r.err());
        assert!(matches!(err, Some(Error::HistoryOverflow { age: 11, depth: 10 })));
    }

    #[test]
    fn sampled_noise_matches_covariance() {
        let sigma = RealMatrix::from_rows(&[[2.0, 0.6, 0.0], [0.6, 1.0, 0.0], [0.0, 0.0, 0.0]]).unwrap();
        let sampler = NoiseSampler::new(&sigma).unwrap();
        assert_eq!(sampler.rank(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 200_000;
        let mut acc = [[0.0; 3]; 3];
        for _ in 0..n {
            let w = sampler.sample(&mut rng);
            for i in 0..3 {
                for j in 0..3 {
                    acc[i][j] += w[i] * w[j];
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let emp = acc[i][j] / n as f64;
                assert!((emp - sigma[(i, j)]).abs() < 0.02, "({i},{j}) {emp}");
            }
        }
    }

    proptest! {
        #[test]
        fn input_times_control_projects_onto_range(
            b in prop::collection::vec(-1.0..1.0f64, 6),
            x in prop::collection::vec(-5.0..5.0f64, 3),
        ) {
            let a = RealMatrix::from_rows(&[[0.9, 0.2, 0.0], [0.0, 1.1, -0.3], [0.1, 0.0, 0.7]]).unwrap();
            let b = RealMatrix::new(3, 2, b).unwrap();
            let m = SystemModel::new(
                a.clone(), b.clone(), RealMatrix::zeros(3, 3),
                RealMatrix::row_vector(&[1.0, 0.0, 0.0]).unwrap(),
                vec![1.0, 2.0, 3.0], 1.0,
            ).unwrap();
            let u = control_signal(&m, &x);
            let bu = b.mul_vec(&u);
            // Orthogonal projector onto range(B): B (B^T B)^-1 B^T, via the normal equations.
            let d: Vec<f64> = m.x_aim().iter().zip(a.mul_vec(&x)).map(|(p, q)| p - q).collect();
            let bt = b.transpose();
            let btb = bt.matmul(&b).unwrap().to_nalgebra();
            prop_assume!(btb.determinant().abs() > 1e-6);
            let rhs = nalgebra::DVector::from_vec(bt.mul_vec(&d));
            let coef = btb.lu().solve(&rhs).unwrap();
            let proj = b.mul_vec(coef.as_slice());
            for (p, q) in bu.iter().zip(&proj) {
                prop_assert!((p - q).abs() <= 1e-9 * (1.0 + q.abs()));
            }
        }

        #[test]
        fn noise_accumulation_identity(seed in any::<u64>(), age in 1u32..=4) {
            // With B B+ = I: x(t+1) - x_aim = sum_{τ=0}^{age} A^τ w(t-τ).
            let a = RealMatrix::from_rows(&[[1.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.9]]).unwrap();
            let m = SystemModel::new(
                a.clone(), RealMatrix::identity(3), RealMatrix::identity(3),
                RealMatrix::row_vector(&[1.0, 0.0, 0.0]).unwrap(), vec![-90.0, 0.0, 25.0], 12.5,
            ).unwrap();
            let link = LinkModel::fixed_age(age).unwrap();
            let noise = NoiseSampler::new(m.noise_cov()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut state = LoopState::new(&m, m.x_aim().to_vec(), 16).unwrap();
            let mut ws = Vec::new();
            for t in 0..30usize {
                let rec = state.advance(&m, &link, &noise, &mut rng).unwrap();
                ws.push(state.last_noise().to_vec());
                let mut acc = vec![0.0; 3];
                for tau in 0..=(rec.age as usize).min(t) {
                    let term = mat_power(&a, tau as u32).unwrap().mul_vec(&ws[t - tau]);
                    acc = add(&acc, &term);
                }
                for (i, want) in acc.iter().enumerate() {
                    prop_assert!((state.x()[i] - m.x_aim()[i] - want).abs() < 1e-9);
                }
            }
        }
    }
}
