//! Preconditioned Crank–Nicolson sampling of the posterior over the latent
//! field W given Poisson bin counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ScalarField;
use crate::pde::{assemble, solve_elliptic_with};
use crate::point_process::{bin_intensities, log_likelihood, BinPartition, CountVector, IntensityVector};
use crate::prior::{link, link_counted, rescale_factor, GpSampler, LinkConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub stride: usize,
    /// Initial pCN step size.
    pub beta: f64,
    pub target_acceptance: f64,
    pub adapt_window: usize,
    pub seed: u64,
    /// Recompute the cached log-likelihood from scratch this often (0 = never).
    pub cache_check_every: usize,
    /// Relative residual tolerance of the forward solves.
    pub solver_tolerance: f64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            iterations: 15_000,
            burn_in: 5_000,
            stride: 200,
            beta: 0.1,
            target_acceptance: 0.25,
            adapt_window: 100,
            seed: 0,
            cache_check_every: 500,
            solver_tolerance: 1e-12,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.iterations {
            return Err(Error::config(format!(
                "burn-in ({}) must be smaller than the number of iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.stride == 0 {
            return Err(Error::config("thinning stride must be at least 1"));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::config(format!("pCN step must lie in (0, 1], got {}", self.beta)));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::config("target acceptance must lie in (0, 1)"));
        }
        if self.adapt_window == 0 {
            return Err(Error::config("adaptation window must be at least 1"));
        }
        if !(self.solver_tolerance > 0.0) {
            return Err(Error::config("solver tolerance must be positive"));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        (self.iterations - self.burn_in) / self.stride
    }
}

/// Observed counts and their sample scale n.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub counts: CountVector,
    pub n: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub intensities: IntensityVector,
    /// Solution usable as a warm start for the next evaluation.
    pub solution: Option<ScalarField>,
    pub clamped: usize,
}

/// Map from latent field to bin intensities.
pub trait ForwardModel: Sync {
    fn evaluate(&self, w: &ScalarField, warm: Option<&ScalarField>) -> Result<ForwardOutput>;

    /// Diffusivity associated with a latent field, when the model has one.
    fn diffusivity(&self, _w: &ScalarField) -> Option<ScalarField> {
        None
    }
}

/// `W ↦ Λ_{link(W)}` through the elliptic solve.
#[derive(Debug, Clone)]
pub struct PdeForward {
    pub q: ScalarField,
    pub phi: ScalarField,
    pub bins: BinPartition,
    pub link: LinkConfig,
    pub tolerance: f64,
}

impl PdeForward {
    pub fn new(q: ScalarField, phi: ScalarField, bins: BinPartition, link: LinkConfig, tolerance: f64) -> Result<Self> {
        link.validate()?;
        if q.grid() != bins.grid() || phi.grid() != bins.grid() {
            return Err(Error::config("q, φ and bins must share one grid"));
        }
        Ok(PdeForward { q, phi, bins, link, tolerance })
    }

    pub fn solve(&self, w: &ScalarField, warm: Option<&ScalarField>) -> Result<(ScalarField, usize)> {
        let (d, clamped) = link_counted(w, &self.link);
        let op = assemble(&d, &self.q)?;
        Ok((solve_elliptic_with(&op, &self.phi, warm, self.tolerance)?.field, clamped))
    }
}

impl ForwardModel for PdeForward {
    fn evaluate(&self, w: &ScalarField, warm: Option<&ScalarField>) -> Result<ForwardOutput> {
        let (u, clamped) = self.solve(w, warm)?;
        let intensities = bin_intensities(&u, &self.q, &self.bins)?;
        Ok(ForwardOutput { intensities, solution: Some(u), clamped })
    }

    fn diffusivity(&self, w: &ScalarField) -> Option<ScalarField> {
        Some(link(w, &self.link))
    }
}

/// Rescaled prior `W = scale·ζ·w` used as the pCN reference measure.
#[derive(Debug, Clone)]
pub struct PcnPrior {
    pub sampler: GpSampler,
    pub cutoff: ScalarField,
    pub scale: f64,
}

impl PcnPrior {
    pub fn new(sampler: GpSampler, cutoff: ScalarField, scale: f64) -> Result<Self> {
        if cutoff.grid() != sampler.grid() {
            return Err(Error::config("cutoff and sampler live on different grids"));
        }
        if !(scale > 0.0) {
            return Err(Error::config(format!("prior scale must be positive, got {scale}")));
        }
        Ok(PcnPrior { sampler, cutoff, scale })
    }

    /// Prior with the sample-size rescaling `n^{−d/(4α+2d)}`.
    pub fn rescaled(sampler: GpSampler, cutoff: ScalarField, n: f64, alpha: f64) -> Result<Self> {
        PcnPrior::new(sampler, cutoff, rescale_factor(n, alpha)?)
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> ScalarField {
        self.sampler.sample(rng).mul(&self.cutoff).scale(self.scale)
    }

    /// Prior marginal variance at node `k`.
    pub fn variance_at(&self, k: usize) -> f64 {
        let z = self.scale * self.cutoff.values()[k];
        let active = self.sampler.active().binary_search(&k).is_ok();
        if active {
            z * z * self.sampler.marginal_variance()
        } else {
            0.0
        }
    }
}

/// `W′ = √(1−β²)·W + β·ξ` with ξ a fresh prior draw.
pub fn pcn_propose<R: Rng + ?Sized>(w: &ScalarField, beta: f64, prior: &PcnPrior, rng: &mut R) -> ScalarField {
    let xi = prior.draw(rng);
    pcn_combine(w, &xi, beta)
}

pub fn pcn_combine(w: &ScalarField, xi: &ScalarField, beta: f64) -> ScalarField {
    let a = (1.0 - beta * beta).max(0.0).sqrt();
    w.zip_with(xi, |w, x| a * w + beta * x)
}

/// `β·exp(0.5·(rate − 0.25))` clamped to `[1e−4, 1]`.
pub fn adapt_beta(rate: f64, beta: f64) -> f64 {
    adapt_beta_towards(rate, beta, 0.25)
}

pub fn adapt_beta_towards(rate: f64, beta: f64, target: f64) -> f64 {
    (beta * (0.5 * (rate - target)).exp()).clamp(1e-4, 1.0)
}

#[derive(Debug, Clone)]
pub struct ChainState {
    pub w: ScalarField,
    pub log_likelihood: f64,
    pub solution: Option<ScalarField>,
    pub iteration: usize,
    pub proposed: usize,
    pub accepted: usize,
    pub clamped: usize,
    pub solver_failures: usize,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Accepted,
    Rejected,
    SolverFailed,
}

impl ChainState {
    pub fn new<F: ForwardModel>(w: ScalarField, data: &Observation, forward: &F, seed: u64) -> Result<Self> {
        let out = forward.evaluate(&w, None)?;
        let ll = log_likelihood(&out.intensities, &data.counts, data.n);
        if ll == f64::NEG_INFINITY {
            return Err(Error::domain("initial state has zero likelihood"));
        }
        Ok(ChainState {
            w,
            log_likelihood: ll,
            solution: out.solution,
            iteration: 0,
            proposed: 0,
            accepted: 0,
            clamped: out.clamped,
            solver_failures: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Recompute the log-likelihood of the current W from scratch.
    pub fn fresh_log_likelihood<F: ForwardModel>(&self, data: &Observation, forward: &F) -> Result<f64> {
        let out = forward.evaluate(&self.w, None)?;
        Ok(log_likelihood(&out.intensities, &data.counts, data.n))
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// One Metropolis step with a pCN proposal.
pub fn pcn_step<F: ForwardModel>(
    state: &mut ChainState,
    data: &Observation,
    forward: &F,
    prior: &PcnPrior,
    beta: f64,
) -> StepOutcome {
    let proposal = pcn_propose(&state.w, beta, prior, &mut state.rng);
    let u: f64 = state.rng.random();
    state.iteration += 1;
    state.proposed += 1;
    let out = match forward.evaluate(&proposal, state.solution.as_ref()) {
        Ok(out) => out,
        Err(e) => {
            log::debug!("forward solve failed at iteration {}: {e}", state.iteration);
            state.solver_failures += 1;
            return StepOutcome::SolverFailed;
        }
    };
    state.clamped += out.clamped;
    let ll = log_likelihood(&out.intensities, &data.counts, data.n);
    if ll == f64::NEG_INFINITY || !(ll - state.log_likelihood >= u.ln()) {
        return StepOutcome::Rejected;
    }
    state.w = proposal;
    state.log_likelihood = ll;
    state.solution = out.solution;
    state.accepted += 1;
    StepOutcome::Accepted
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub iterations: usize,
    pub burn_in: usize,
    pub stride: usize,
    pub retained: usize,
    pub acceptance_rate: f64,
    pub burn_in_acceptance_rate: f64,
    pub initial_beta: f64,
    pub final_beta: f64,
    pub beta_trace: Vec<f64>,
    /// `(iteration, log-likelihood)` every `trace_every` iterations.
    pub log_likelihood_trace: Vec<(usize, f64)>,
    pub clamped: usize,
    pub solver_failures: usize,
    pub max_cache_discrepancy: f64,
    pub cache_checks: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct PosteriorSummary {
    pub mean_w: ScalarField,
    /// Pointwise sample variance of the retained W.
    pub variance_w: ScalarField,
    pub mean_d: Option<ScalarField>,
    /// `n·Λ` at the posterior mean.
    pub fitted: IntensityVector,
    pub report: ChainReport,
}

impl PosteriorSummary {
    pub fn retained(&self) -> usize {
        self.report.retained
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.report.acceptance_rate
    }
}

/// Run a chain from W ≡ 0 with burn-in adaptation of β and thinning.
pub fn run_chain<F: ForwardModel>(
    config: &ChainConfig,
    data: &Observation,
    forward: &F,
    prior: &PcnPrior,
) -> Result<PosteriorSummary> {
    config.validate()?;
    let grid = prior.sampler.grid();
    let mut state = ChainState::new(ScalarField::zeros(grid), data, forward, config.seed)?;
    let mut beta = config.beta;
    let mut beta_trace = vec![beta];
    let trace_every = (config.iterations / 1000).max(1);
    let mut ll_trace = vec![(0, state.log_likelihood)];
    let (mut window_accepts, mut burn_accepts) = (0usize, 0usize);
    let mut sum = vec![0.0; grid.len()];
    let mut sum_sq = vec![0.0; grid.len()];
    let mut retained = 0usize;
    let (mut max_discrepancy, mut cache_checks) = (0.0f64, 0usize);

    for k in 1..=config.iterations {
        let outcome = pcn_step(&mut state, data, forward, prior, beta);
        let accepted = outcome == StepOutcome::Accepted;
        if k <= config.burn_in {
            window_accepts += usize::from(accepted);
            burn_accepts += usize::from(accepted);
            if k % config.adapt_window == 0 {
                let rate = window_accepts as f64 / config.adapt_window as f64;
                beta = adapt_beta_towards(rate, beta, config.target_acceptance);
                beta_trace.push(beta);
                window_accepts = 0;
            }
        } else if (k - config.burn_in).is_multiple_of(config.stride) {
            retained += 1;
            for ((s, s2), &v) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(state.w.values()) {
                *s += v;
                *s2 += v * v;
            }
        }
        if k % trace_every == 0 {
            ll_trace.push((k, state.log_likelihood));
        }
        if config.cache_check_every > 0 && k % config.cache_check_every == 0 {
            let fresh = state.fresh_log_likelihood(data, forward)?;
            max_discrepancy = max_discrepancy.max((fresh - state.log_likelihood).abs());
            cache_checks += 1;
        }
        if state.proposed >= 100 && 2 * state.solver_failures > state.proposed {
            return Err(Error::ChainAborted { failed: state.solver_failures, proposed: state.proposed });
        }
    }

    let m = retained as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
    let var: Vec<f64> = sum_sq
        .iter()
        .zip(&mean)
        .map(|(s2, mu)| if retained > 1 { ((s2 - m * mu * mu) / (m - 1.0)).max(0.0) } else { 0.0 })
        .collect();
    let mean_w = ScalarField::from_vec_unchecked(grid, mean);
    let fitted = forward.evaluate(&mean_w, None)?;
    let post_accepted = state.accepted - burn_accepts;
    let report = ChainReport {
        iterations: config.iterations,
        burn_in: config.burn_in,
        stride: config.stride,
        retained,
        acceptance_rate: post_accepted as f64 / (config.iterations - config.burn_in) as f64,
        burn_in_acceptance_rate: if config.burn_in > 0 { burn_accepts as f64 / config.burn_in as f64 } else { 0.0 },
        initial_beta: config.beta,
        final_beta: beta,
        beta_trace,
        log_likelihood_trace: ll_trace,
        clamped: state.clamped,
        solver_failures: state.solver_failures,
        max_cache_discrepancy: max_discrepancy,
        cache_checks,
        seed: config.seed,
    };
    Ok(PosteriorSummary {
        mean_d: forward.diffusivity(&mean_w),
        variance_w: ScalarField::from_vec_unchecked(grid, var),
        fitted: IntensityVector(fitted.intensities.0.iter().map(|l| l * data.n).collect()),
        mean_w,
        report,
    })
}

/// Average posterior means of independent chains, weighted by retained count.
pub fn merge_means(summaries: &[PosteriorSummary]) -> Result<ScalarField> {
    let first = summaries.first().ok_or_else(|| Error::config("no chains to merge"))?;
    let total: usize = summaries.iter().map(PosteriorSummary::retained).sum();
    if total == 0 {
        return Err(Error::config("merged chains retained no samples"));
    }
    let mut acc = ScalarField::zeros(first.mean_w.grid());
    for s in summaries {
        if s.mean_w.grid() != acc.grid() {
            return Err(Error::config("chains live on different grids"));
        }
        acc = acc.add(&s.mean_w.scale(s.retained() as f64 / total as f64));
    }
    Ok(acc)
}
