//! Monte Carlo simulation of the reflected diffusion
//! `dX = ∇D(X)dt + √(2D(X)) dW` on the unit square with exponential-clock
//! killing at rate `q`. Used as an independent check of the PDE forward map.
//!
//! Reflection is coordinate-wise mirror folding; the killing integral is
//! accumulated with the left-endpoint rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{gradient, integrate, ScalarField};
use crate::point_process::{BinPartition, CountVector};

/// Fold a point back into `[0, 1]²` by repeated mirror reflection.
pub fn reflect(x: f64, y: f64) -> (f64, f64) {
    (fold(x), fold(y))
}

#[inline]
fn fold(mut v: f64) -> f64 {
    loop {
        if v < 0.0 {
            v = -v;
        } else if v > 1.0 {
            v = 2.0 - v;
        } else {
            return v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Alive,
    Bound,
    Censored,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleState {
    pub x: f64,
    pub y: f64,
    /// Accumulated `∫₀ᵗ q(X_s) ds`.
    pub killing: f64,
    /// Standard exponential clock threshold.
    pub threshold: f64,
    pub time: f64,
    pub status: Status,
}

impl ParticleState {
    pub fn new(x: f64, y: f64, threshold: f64) -> Self {
        ParticleState { x, y, killing: 0.0, threshold, time: 0.0, status: Status::Alive }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BindingEvent {
    pub x: f64,
    pub y: f64,
    pub time: f64,
    pub censored: bool,
}

/// Diffusivity with its precomputed gradient.
#[derive(Debug, Clone)]
pub struct Diffusivity {
    d: ScalarField,
    dx: ScalarField,
    dy: ScalarField,
}

impl Diffusivity {
    pub fn new(d: ScalarField) -> Result<Self> {
        if !(d.min() > 0.0) {
            return Err(Error::domain("diffusivity must be positive"));
        }
        let (dx, dy) = gradient(&d);
        Ok(Diffusivity { d, dx, dy })
    }

    pub fn field(&self) -> &ScalarField {
        &self.d
    }

    pub fn gradient(&self) -> (&ScalarField, &ScalarField) {
        (&self.dx, &self.dy)
    }
}

/// One Euler–Maruyama step driven by the given standard normal pair.
#[inline]
pub fn em_step_with_noise(state: &ParticleState, diffusivity: &Diffusivity, dt: f64, xi: (f64, f64)) -> ParticleState {
    let (x, y) = (state.x, state.y);
    let d = diffusivity.d.bilinear(x, y);
    let gx = diffusivity.dx.bilinear(x, y);
    let gy = diffusivity.dy.bilinear(x, y);
    let s = (2.0 * d * dt).sqrt();
    let (nx, ny) = reflect(x + gx * dt + s * xi.0, y + gy * dt + s * xi.1);
    ParticleState { x: nx, y: ny, time: state.time + dt, ..*state }
}

/// `X' = reflect(X + ∇D(X)dt + √(2D(X)dt)·ξ)` with D and ∇D interpolated
/// bilinearly.
pub fn em_step<R: Rng + ?Sized>(
    state: &ParticleState,
    diffusivity: &Diffusivity,
    dt: f64,
    rng: &mut R,
) -> ParticleState {
    let xi: (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
    em_step_with_noise(state, diffusivity, dt, xi)
}

/// Draws initial positions from a density sampled on the grid: a node is
/// chosen with probability ∝ φ·(dual cell area), then the point is placed
/// uniformly in that node's dual cell.
#[derive(Debug, Clone)]
pub struct StartSampler {
    cdf: Vec<f64>,
    n: usize,
}

impl StartSampler {
    pub fn new(phi: &ScalarField) -> Result<Self> {
        if phi.min() < 0.0 {
            return Err(Error::domain("initial density must be nonnegative"));
        }
        let g = phi.grid();
        let mut acc = 0.0;
        let cdf: Vec<f64> = phi
            .values()
            .iter()
            .enumerate()
            .map(|(k, v)| {
                acc += v * g.weight(k);
                acc
            })
            .collect();
        if !(acc > 0.0) {
            return Err(Error::domain("initial density has zero mass"));
        }
        Ok(StartSampler { cdf, n: g.n() })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let total = *self.cdf.last().unwrap();
        let u = rng.random::<f64>() * total;
        let k = self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1);
        let h = 1.0 / (self.n - 1) as f64;
        let (i, j) = (k % self.n, k / self.n);
        let jitter = |c: usize, rng: &mut R| {
            let centre = c as f64 * h;
            let lo = (centre - 0.5 * h).max(0.0);
            let hi = (centre + 0.5 * h).min(1.0);
            lo + (hi - lo) * rng.random::<f64>()
        };
        let x = jitter(i, rng);
        let y = jitter(j, rng);
        (x, y)
    }
}

/// Reflected diffusion with killing rate `q` and initial density `φ`.
#[derive(Debug, Clone)]
pub struct KilledDiffusion {
    pub diffusivity: Diffusivity,
    pub q: ScalarField,
    start: StartSampler,
}

impl KilledDiffusion {
    pub fn new(d: &ScalarField, q: &ScalarField, phi: &ScalarField) -> Result<Self> {
        if q.min() < 0.0 {
            return Err(Error::domain("killing rate must be nonnegative"));
        }
        if d.grid() != q.grid() || d.grid() != phi.grid() {
            return Err(Error::config("D, q and φ live on different grids"));
        }
        let mass = integrate(phi);
        if (mass - 1.0).abs() > 1e-6 {
            log::warn!("initial density integrates to {mass}, sampling its normalised version");
        }
        Ok(KilledDiffusion { diffusivity: Diffusivity::new(d.clone())?, q: q.clone(), start: StartSampler::new(phi)? })
    }

    pub fn start_sampler(&self) -> &StartSampler {
        &self.start
    }
}

/// Simulate one particle until its clock fires or the horizon is reached.
pub fn simulate_binding<R: Rng + ?Sized>(model: &KilledDiffusion, dt: f64, horizon: f64, rng: &mut R) -> BindingEvent {
    let (x0, y0) = model.start.sample(rng);
    let threshold: f64 = rng.sample(Exp1);
    run_particle(ParticleState::new(x0, y0, threshold), model, dt, horizon, rng)
}

/// Advance an already initialised particle to binding or censoring.
pub fn run_particle<R: Rng + ?Sized>(
    mut state: ParticleState,
    model: &KilledDiffusion,
    dt: f64,
    horizon: f64,
    rng: &mut R,
) -> BindingEvent {
    while state.time < horizon {
        let rate = model.q.bilinear(state.x, state.y);
        let next = state.killing + rate * dt;
        if next >= state.threshold && rate > 0.0 {
            // crossing time inside the step, position frozen at its left end
            let time = state.time + (state.threshold - state.killing) / rate;
            state.killing = state.threshold;
            state.status = Status::Bound;
            return BindingEvent { x: state.x, y: state.y, time, censored: false };
        }
        state.killing = next;
        state = em_step(&state, &model.diffusivity, dt, rng);
    }
    BindingEvent { x: state.x, y: state.y, time: horizon, censored: true }
}

/// Per-worker RNG stream derived from a master seed.
pub fn worker_rng(seed: u64, worker: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(worker as u64);
    rng
}

/// Split `total` items over `workers` contiguous chunks.
pub(crate) fn partition(total: usize, workers: usize) -> Vec<(usize, usize)> {
    let workers = workers.max(1);
    (0..workers).map(|w| (w * total / workers, (w + 1) * total / workers)).collect()
}

/// Simulate `n_particles` binding events. Results depend only on
/// `(seed, workers)`, whatever the thread pool size.
pub fn simulate_events(
    n_particles: usize,
    model: &KilledDiffusion,
    dt: f64,
    horizon: f64,
    seed: u64,
    workers: usize,
) -> Vec<BindingEvent> {
    partition(n_particles, workers)
        .into_par_iter()
        .enumerate()
        .map(|(w, (a, b))| {
            let mut rng = worker_rng(seed, w);
            (a..b).map(|_| simulate_binding(model, dt, horizon, &mut rng)).collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCounts {
    pub counts: CountVector,
    /// Bound particles whose location falls outside every bin.
    pub outside: u64,
    pub censored: u64,
}

pub fn bin_events(events: &[BindingEvent], bins: &BinPartition) -> ParticleCounts {
    let mut counts = vec![0u64; bins.len()];
    let (mut outside, mut censored) = (0, 0);
    for e in events {
        if e.censored {
            censored += 1;
        } else if let Some(b) = bins.locate(e.x, e.y) {
            counts[b] += 1;
        } else {
            outside += 1;
        }
    }
    ParticleCounts { counts: CountVector(counts), outside, censored }
}

pub fn empirical_bin_counts(
    n_particles: usize,
    model: &KilledDiffusion,
    bins: &BinPartition,
    dt: f64,
    horizon: f64,
    seed: u64,
    workers: usize,
) -> ParticleCounts {
    bin_events(&simulate_events(n_particles, model, dt, horizon, seed, workers), bins)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeynmanKacEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Monte Carlo estimate of `u(x) = E_x ∫₀^∞ φ(X_t) exp(−∫₀ᵗ q(X_s)ds) dt`,
/// truncated at `horizon` (or once the discount drops below e⁻⁴⁰).
#[allow(clippy::too_many_arguments)]
pub fn feynman_kac_estimate(
    point: (f64, f64),
    diffusivity: &Diffusivity,
    q: &ScalarField,
    phi: &ScalarField,
    dt: f64,
    horizon: f64,
    n_paths: usize,
    seed: u64,
    workers: usize,
) -> Result<FeynmanKacEstimate> {
    let (x0, y0) = point;
    if !(0.0..=1.0).contains(&x0) || !(0.0..=1.0).contains(&y0) {
        return Err(Error::domain("starting point outside the unit square"));
    }
    if !q.values().iter().any(|&v| v > 0.0) {
        return Err(Error::domain("Feynman–Kac estimate needs q > 0 somewhere"));
    }
    if n_paths < 2 {
        return Err(Error::config("need at least two paths for a standard error"));
    }
    let sums: Vec<(f64, f64)> = partition(n_paths, workers)
        .into_par_iter()
        .enumerate()
        .map(|(w, (a, b))| {
            let mut rng = worker_rng(seed, w);
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in a..b {
                let v = fk_path(x0, y0, diffusivity, q, phi, dt, horizon, &mut rng);
                s += v;
                s2 += v * v;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = sums.iter().fold((0.0, 0.0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
    let m = n_paths as f64;
    let mean = s / m;
    let var = ((s2 - m * mean * mean) / (m - 1.0)).max(0.0);
    Ok(FeynmanKacEstimate { mean, std_error: (var / m).sqrt() })
}

#[allow(clippy::too_many_arguments)]
fn fk_path<R: Rng + ?Sized>(
    x0: f64,
    y0: f64,
    diffusivity: &Diffusivity,
    q: &ScalarField,
    phi: &ScalarField,
    dt: f64,
    horizon: f64,
    rng: &mut R,
) -> f64 {
    let mut state = ParticleState::new(x0, y0, f64::INFINITY);
    let mut total = 0.0;
    while state.time < horizon && state.killing < 40.0 {
        let rate = q.bilinear(state.x, state.y);
        let source = phi.bilinear(state.x, state.y);
        // exact integral of the discount over the step at frozen rate
        let step_weight = if rate > 0.0 { -(-rate * dt).exp_m1() / rate } else { dt };
        total += source * (-state.killing).exp() * step_weight;
        state.killing += rate * dt;
        state = em_step(&state, diffusivity, dt, rng);
    }
    total
}

/// Write binding events as CSV `x,y,time,censored`.
pub fn write_events_csv<W: std::io::Write>(events: &[BindingEvent], mut out: W) -> std::io::Result<()> {
    writeln!(out, "x,y,time,censored")?;
    for e in events {
        writeln!(out, "{:.16e},{:.16e},{:.16e},{}", e.x, e.y, e.time, u8::from(e.censored))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Grid, Rect};

    fn grid() -> Grid {
        Grid::new(17).unwrap()
    }

    #[test]
    fn reflection_examples() {
        assert_eq!(reflect(0.5, 0.5), (0.5, 0.5));
        let (x, y) = reflect(-0.1, 0.5);
        assert!((x - 0.1).abs() < 1e-15 && y == 0.5);
        let (x, y) = reflect(1.15, -0.05);
        assert!((x - 0.85).abs() < 1e-12 && (y - 0.05).abs() < 1e-15);
        let (x, _) = reflect(3.3, 0.0);
        assert!((x - 0.7).abs() < 1e-12);
    }

    #[test]
    fn constant_diffusivity_increments_have_variance_dt() {
        let g = grid();
        let diff = Diffusivity::new(ScalarField::constant(g, 0.5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dt = 1e-6;
        let m = 100_000;
        let mut s2 = 0.0;
        for _ in 0..m {
            let st = ParticleState::new(0.5, 0.5, 1.0);
            let next = em_step(&st, &diff, dt, &mut rng);
            s2 += (next.x - 0.5).powi(2);
        }
        let var = s2 / m as f64;
        // variance estimate of a Gaussian: std error dt·√(2/m)
        let se = dt * (2.0 / m as f64).sqrt();
        assert!((var - dt).abs() < 3.0 * se, "{var}");
    }

    #[test]
    fn half_steps_agree_with_full_step_in_mean() {
        let g = grid();
        let diff = Diffusivity::new(ScalarField::from_fn(g, |x, y| 0.5 + 0.3 * x * y)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dt = 1e-3;
        let m = 20_000;
        let (mut full, mut half) = (0.0, 0.0);
        for _ in 0..m {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            let c: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            let st = ParticleState::new(0.4, 0.6, 1.0);
            let one = em_step_with_noise(&st, &diff, dt, ((a + c) / 2f64.sqrt(), (b + e) / 2f64.sqrt()));
            let two = em_step_with_noise(&em_step_with_noise(&st, &diff, dt / 2.0, (a, b)), &diff, dt / 2.0, (c, e));
            full += one.x - st.x;
            half += two.x - st.x;
        }
        // mean drift ∂xD = 0.3·y = 0.18 per unit time
        let diff_mean = (full - half).abs() / m as f64;
        assert!(diff_mean < 5.0 * dt * dt + 1e-5, "{diff_mean}");
        assert!((full / m as f64 - 0.18 * dt).abs() < 5e-4);
    }

    #[test]
    fn reflection_keeps_particles_inside() {
        let g = grid();
        let diff = Diffusivity::new(ScalarField::constant(g, 0.5)).unwrap();
        let st = ParticleState::new(0.001, 0.5, 1.0);
        let next = em_step_with_noise(&st, &diff, 1e-2, (-25.0, 40.0));
        assert!((0.0..=1.0).contains(&next.x) && (0.0..=1.0).contains(&next.y));
        for seed in 0..108u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = ParticleState::new(rng.random(), rng.random(), 1.0);
            for _ in 0..10_000 {
                s = em_step(&s, &diff, 1e-3, &mut rng);
                assert!((0.0..=1.0).contains(&s.x) && (0.0..=1.0).contains(&s.y));
            }
        }
    }

    #[test]
    fn no_killing_always_censors() {
        let g = grid();
        let model = KilledDiffusion::new(
            &ScalarField::constant(g, 0.5),
            &ScalarField::zeros(g),
            &ScalarField::constant(g, 1.0),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let e = simulate_binding(&model, 1e-2, 1.0, &mut rng);
            assert!(e.censored);
            assert_eq!(e.time, 1.0);
        }
    }

    #[test]
    fn constant_rate_binding_time_is_exponential() {
        let g = grid();
        let c = 2.0;
        let model = KilledDiffusion::new(
            &ScalarField::constant(g, 0.7),
            &ScalarField::constant(g, c),
            &ScalarField::constant(g, 1.0),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = 10_000;
        let times: Vec<f64> = (0..m).map(|_| simulate_binding(&model, 1e-3, 50.0, &mut rng).time).collect();
        let mean = times.iter().sum::<f64>() / m as f64;
        let se = (1.0 / c) / (m as f64).sqrt();
        assert!((mean - 1.0 / c).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn uniform_equilibrium_binds_uniformly() {
        let g = grid();
        let model = KilledDiffusion::new(
            &ScalarField::constant(g, 0.5),
            &ScalarField::constant(g, 3.0),
            &ScalarField::constant(g, 1.0),
        )
        .unwrap();
        let bins = BinPartition::new(g, Rect::UNIT, 2).unwrap();
        let m = 4000;
        let pc = empirical_bin_counts(m, &model, &bins, 1e-3, 50.0, 6, 4);
        assert_eq!(pc.censored, 0);
        assert_eq!(pc.outside, 0);
        let p = 0.25;
        let sd = (m as f64 * p * (1.0 - p)).sqrt();
        for &c in &pc.counts.0 {
            assert!((c as f64 - m as f64 * p).abs() < 3.0 * sd, "{:?}", pc.counts);
        }
    }

    #[test]
    fn zero_particles_give_zero_counts() {
        let g = grid();
        let model = KilledDiffusion::new(
            &ScalarField::constant(g, 0.5),
            &ScalarField::constant(g, 1.0),
            &ScalarField::constant(g, 1.0),
        )
        .unwrap();
        let bins = BinPartition::new(g, Rect::UNIT, 2).unwrap();
        let pc = empirical_bin_counts(0, &model, &bins, 1e-3, 1.0, 1, 3);
        assert!(pc.counts.0.iter().all(|&c| c == 0));
    }

    #[test]
    fn worker_partition_is_deterministic() {
        let g = grid();
        let model = KilledDiffusion::new(
            &ScalarField::constant(g, 0.5),
            &ScalarField::constant(g, 5.0),
            &ScalarField::from_fn(g, |x, _| 0.5 + x),
        )
        .unwrap();
        let a = simulate_events(500, &model, 1e-3, 10.0, 9, 4);
        let b = simulate_events(500, &model, 1e-3, 10.0, 9, 4);
        assert_eq!(a, b);
        assert_eq!(partition(10, 3), vec![(0, 3), (3, 6), (6, 10)]);
    }

    #[test]
    fn feynman_kac_constant_case() {
        let g = grid();
        let diff = Diffusivity::new(ScalarField::constant(g, 0.5)).unwrap();
        let one = ScalarField::constant(g, 1.0);
        let est = feynman_kac_estimate((0.3, 0.6), &diff, &one, &one, 1e-3, 100.0, 200, 1, 2).unwrap();
        assert!((est.mean - 1.0).abs() <= (3.0 * est.std_error).max(1e-9), "{est:?}");
        let zero = ScalarField::zeros(g);
        let est = feynman_kac_estimate((0.3, 0.6), &diff, &one, &zero, 1e-3, 100.0, 50, 1, 2).unwrap();
        assert_eq!(est.mean, 0.0);
    }

    #[test]
    fn start_sampler_matches_density() {
        let g = grid();
        let phi = ScalarField::from_fn(g, |x, _| 2.0 * x).normalized().unwrap();
        let s = StartSampler::new(&phi).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = 40_000;
        let mean = (0..m).map(|_| s.sample(&mut rng).0).sum::<f64>() / m as f64;
        // E[x] = 2/3 for density 2x
        assert!((mean - 2.0 / 3.0).abs() < 0.01, "{mean}");
    }
}
