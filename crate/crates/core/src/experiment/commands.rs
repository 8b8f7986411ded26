use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, killing_field, ExperimentConfig, RescaleMode, Truth};
use crate::error::{Error, Result};
use crate::grid::{discrete_norm, Grid, NormOrder, RegionMask, ScalarField};
use crate::mcmc::{run_chain, ChainConfig, ChainReport, Observation, PcnPrior, PdeForward, PosteriorSummary};
use crate::particles::{bin_events, simulate_events, worker_rng, write_events_csv, KilledDiffusion};
use crate::pde::{assemble, solve_elliptic_with, CG_TOLERANCE};
use crate::point_process::{
    bin_intensities, histogram_estimator, l1_distance, sample_counts, write_counts_csv, write_intensities_csv,
    BinPartition, CountVector, IntensityVector,
};
use crate::prior::{link, make_cutoff, rescale_factor, GpSampler};

/// Machine-readable outcome of one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub flags: BTreeMap<String, bool>,
    pub files: Vec<String>,
}

impl StudyReport {
    fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        StudyReport {
            command: command.to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            metrics: BTreeMap::new(),
            flags: BTreeMap::new(),
            files: Vec::new(),
        }
    }

    fn metric(&mut self, key: &str, value: f64) {
        self.metrics.insert(key.to_string(), value);
    }

    fn flag(&mut self, key: &str, value: bool) {
        self.flags.insert(key.to_string(), value);
    }

    pub fn passed(&self) -> bool {
        self.flags.values().all(|&v| v)
    }
}

/// Output directory plus the list of files written so far.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Outputs { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        self.files.push(name.to_string());
        Ok(BufWriter::new(File::create(self.dir.join(name))?))
    }

    fn field(&mut self, name: &str, f: &ScalarField) -> Result<()> {
        let mut w = self.create(name)?;
        f.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn table(&mut self, name: &str, header: &str, rows: &[String]) -> Result<()> {
        let mut w = self.create(name)?;
        writeln!(w, "{header}")?;
        for r in rows {
            writeln!(w, "{r}")?;
        }
        w.flush()?;
        Ok(())
    }

    fn finish(mut self, mut report: StudyReport, started: Instant) -> Result<StudyReport> {
        let name = format!("{}.json", report.command);
        self.files.push(name.clone());
        report.files = self.files.clone();
        let mut w = BufWriter::new(File::create(self.dir.join(&name))?);
        serde_json::to_writer_pretty(&mut w, &report)?;
        writeln!(w)?;
        w.flush()?;
        // wall-clock time goes to a separate file
        let timing = serde_json::json!({ "command": report.command, "seconds": started.elapsed().as_secs_f64() });
        std::fs::write(self.dir.join(format!("{}_timing.json", report.command)), format!("{timing:#}\n"))?;
        Ok(report)
    }
}

fn e(v: f64) -> String {
    format!("{v:.16e}")
}

/// Forward solution for the truth: `u`, per-bin intensities and CG iterations.
pub struct ForwardSolution {
    pub u: ScalarField,
    pub intensities: IntensityVector,
    pub iterations: usize,
}

pub fn solve_truth(truth: &Truth, bins: &BinPartition) -> Result<ForwardSolution> {
    let op = assemble(&truth.d0, &truth.q)?;
    let sol = solve_elliptic_with(&op, &truth.phi, None, 1e-12)?;
    let intensities = bin_intensities(&sol.field, &truth.q, bins)?;
    Ok(ForwardSolution { u: sol.field, intensities, iterations: sol.report.iterations })
}

/// `forward`: truth fields, PDE solution and bin intensities.
pub fn cmd_forward(cfg: &ExperimentConfig, out: &Path) -> Result<StudyReport> {
    let started = Instant::now();
    cfg.validate()?;
    let truth = cfg.truth_fields()?;
    let bins = cfg.partition(cfg.bins)?;
    let sol = solve_truth(&truth, &bins)?;
    let mut o = Outputs::new(out)?;
    o.field("d0.csv", &truth.d0)?;
    o.field("q.csv", &truth.q)?;
    o.field("phi.csv", &truth.phi)?;
    o.field("u.csv", &sol.u)?;
    o.field("lambda.csv", &sol.u.mul(&truth.q))?;
    let mut w = o.create("intensities.csv")?;
    write_intensities_csv(&bins, &sol.intensities, &mut w)?;
    w.flush()?;
    let mut r = StudyReport::new("forward", cfg);
    let total = sol.intensities.total();
    r.metric("total_intensity", total);
    r.metric("cg_iterations", sol.iterations as f64);
    r.metric("u_min", sol.u.min());
    r.metric("u_max", sol.u.max());
    r.flag("intensities_sum_to_one", (total - 1.0).abs() <= 2e-3);
    o.finish(r, started)
}

/// Counts drawn from the truth intensities at scale `n`.
pub fn synthesize(
    cfg: &ExperimentConfig,
    bins: &BinPartition,
    n: f64,
    seed: u64,
) -> Result<(CountVector, IntensityVector)> {
    let truth = cfg.truth_fields()?;
    let sol = solve_truth(&truth, bins)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((sample_counts(&sol.intensities, n, &mut rng)?, sol.intensities))
}

/// `synth`: Poisson bin counts for the configured truth.
pub fn cmd_synth(cfg: &ExperimentConfig, out: &Path) -> Result<StudyReport> {
    let started = Instant::now();
    cfg.validate()?;
    let bins = cfg.partition(cfg.bins)?;
    let (counts, lambda0) = synthesize(cfg, &bins, cfg.n, derive_seed(cfg.seed, "synth"))?;
    let mut o = Outputs::new(out)?;
    let mut w = o.create("counts.csv")?;
    write_counts_csv(&bins, &counts, &mut w)?;
    w.flush()?;
    let mut w = o.create("truth_intensities.csv")?;
    write_intensities_csv(&bins, &lambda0, &mut w)?;
    w.flush()?;
    let mut r = StudyReport::new("synth", cfg);
    r.metric("total_count", counts.total() as f64);
    r.metric("expected_total", cfg.n * lambda0.total());
    o.finish(r, started)
}

/// `particles`: Monte Carlo binding locations against the PDE intensities.
pub fn cmd_particles(cfg: &ExperimentConfig, out: &Path) -> Result<StudyReport> {
    let started = Instant::now();
    cfg.validate()?;
    let p = &cfg.particles;
    let truth = cfg.truth_fields()?;
    let bins = cfg.partition(p.bins)?;
    let sol = solve_truth(&truth, &bins)?;
    let model = KilledDiffusion::new(&truth.d0, &truth.q, &truth.phi)?;
    let events = simulate_events(p.count, &model, p.dt, p.horizon, derive_seed(cfg.seed, "particles"), p.workers);
    let binned = bin_events(&events, &bins);
    let m = p.count as f64;
    let hash = cfg.hash();
    let mut rows = Vec::new();
    let (mut chi2, mut within) = (0.0, 0usize);
    for (i, (&c, &l)) in binned.counts.0.iter().zip(&sol.intensities.0).enumerate() {
        let expected = m * l;
        let z = if expected > 0.0 { (c as f64 - expected) / expected.sqrt() } else { 0.0 };
        chi2 += z * z;
        let ok = z.abs() <= 4.0;
        within += usize::from(ok);
        rows.push(format!("{hash},{i},{c},{},{},{}", e(expected), e(z), u8::from(ok)));
    }
    let mut o = Outputs::new(out)?;
    let mut w = o.create("particle_counts.csv")?;
    write_counts_csv(&bins, &binned.counts, &mut w)?;
    w.flush()?;
    o.table("particle_comparison.csv", "config_hash,bin_index,count,expected,z,within_4sd", &rows)?;
    if p.write_events {
        let mut w = o.create("binding_events.csv")?;
        write_events_csv(&events, &mut w)?;
        w.flush()?;
    }
    let mut r = StudyReport::new("particles", cfg);
    r.metric("particles", m);
    r.metric("chi_square", chi2);
    r.metric("bins_within_4sd", within as f64);
    r.metric("censored_fraction", if m > 0.0 { binned.censored as f64 / m } else { 0.0 });
    r.metric("outside_fraction", if m > 0.0 { binned.outside as f64 / m } else { 0.0 });
    r.metric("quadrant_asymmetry", quadrant_asymmetry(&binned.counts, bins.side()));
    r.flag("oracle_agreement", within + 1 >= bins.len());
    o.finish(r, started)
}

/// `(max − min)/mean` of the four quadrant totals (0 for odd lattices or no counts).
fn quadrant_asymmetry(counts: &CountVector, side: usize) -> f64 {
    if side % 2 == 1 {
        return 0.0;
    }
    let half = side / 2;
    let mut q = [0.0f64; 4];
    for (b, &c) in counts.0.iter().enumerate() {
        let (bx, by) = (b % side, b / side);
        q[usize::from(bx >= half) + 2 * usize::from(by >= half)] += c as f64;
    }
    let mean = q.iter().sum::<f64>() / 4.0;
    if mean == 0.0 {
        return 0.0;
    }
    let (lo, hi) = q.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    (hi - lo) / mean
}

/// Prior used by the chain at sample scale `n`.
pub fn build_prior(cfg: &ExperimentConfig, n: f64) -> Result<PcnPrior> {
    let grid = cfg.grid()?;
    let cutoff = make_cutoff(grid, &cfg.window, &cfg.support, cfg.cutoff_margin())?;
    let support = RegionMask::from_rect_interior(grid, &cfg.support);
    let sampler = GpSampler::new(cfg.prior.matern, grid, &support)?;
    let scale = match cfg.prior.rescale {
        RescaleMode::SampleSize => rescale_factor(n.max(1.0), cfg.prior.rescale_alpha)?,
        RescaleMode::None => 1.0,
    };
    PcnPrior::new(sampler, cutoff, scale)
}

/// Run one chain on counts for the configured truth.
pub fn posterior(
    cfg: &ExperimentConfig,
    bins: &BinPartition,
    counts: CountVector,
    n: f64,
    chain: &ChainConfig,
) -> Result<PosteriorSummary> {
    let truth = cfg.truth_fields()?;
    let forward = PdeForward::new(truth.q, truth.phi, bins.clone(), cfg.prior.link, chain.solver_tolerance)?;
    let prior = build_prior(cfg, n)?;
    run_chain(chain, &Observation { counts, n }, &forward, &prior)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct McmcFile {
    config_hash: String,
    n: f64,
    bins: usize,
    prior_scale: f64,
    chain: ChainReport,
}

/// `mcmc`: synthesise counts and sample the posterior.
pub fn cmd_mcmc(cfg: &ExperimentConfig, out: &Path) -> Result<StudyReport> {
    let started = Instant::now();
    cfg.validate()?;
    let bins = cfg.partition(cfg.bins)?;
    let (counts, _) = synthesize(cfg, &bins, cfg.n, derive_seed(cfg.seed, "synth"))?;
    let chain = ChainConfig { seed: derive_seed(cfg.seed, "chain"), ..cfg.chain };
    let s = posterior(cfg, &bins, counts, cfg.n, &chain)?;
    let mut o = Outputs::new(out)?;
    o.field("posterior_mean_w.csv", &s.mean_w)?;
    o.field("posterior_var_w.csv", &s.variance_w)?;
    if let Some(d) = &s.mean_d {
        o.field("posterior_mean_d.csv", d)?;
    }
    let mut w = o.create("fitted_intensities.csv")?;
    write_intensities_csv(&bins, &s.fitted, &mut w)?;
    w.flush()?;
    let file = McmcFile {
        config_hash: cfg.hash(),
        n: cfg.n,
        bins: cfg.bins,
        prior_scale: build_prior(cfg, cfg.n)?.scale,
        chain: s.report.clone(),
    };
    let mut w = o.create("chain.json")?;
    serde_json::to_writer_pretty(&mut w, &file)?;
    writeln!(w)?;
    w.flush()?;
    let mut r = StudyReport::new("mcmc", cfg);
    r.metric("acceptance_rate", s.report.acceptance_rate);
    r.metric("final_beta", s.report.final_beta);
    r.metric("retained", s.report.retained as f64);
    r.metric("max_cache_discrepancy", s.report.max_cache_discrepancy);
    r.metric("solver_failures", s.report.solver_failures as f64);
    r.metric("clamped", s.report.clamped as f64);
    r.flag("cache_coherent", s.report.max_cache_discrepancy <= 1e-8);
    o.finish(r, started)
}

/// Error metrics of a posterior mean against the truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub l1_error: f64,
    pub l2_error: f64,
    pub baseline_l1_error: f64,
    pub baseline_l2_error: f64,
    pub lambda_l1_error: f64,
    pub baseline_lambda_l1_error: f64,
    /// Distance between the argmax of `D̄ − link(0)` and of `D₀ − link(0)`.
    pub peak_distance: f64,
}

pub fn recovery(cfg: &ExperimentConfig, truth: &Truth, mean_w: &ScalarField) -> Result<Recovery> {
    if mean_w.grid() != truth.grid {
        return Err(Error::config("posterior mean and truth live on different grids"));
    }
    let link_cfg = &cfg.prior.link;
    let d_bar = link(mean_w, link_cfg);
    let base = link(&ScalarField::zeros(truth.grid), link_cfg);
    let norm = |f: &ScalarField, o| discrete_norm(f, o, None);
    let lambda = |d: &ScalarField| -> Result<ScalarField> {
        let u = solve_elliptic_with(&assemble(d, &truth.q)?, &truth.phi, None, CG_TOLERANCE)?.field;
        Ok(u.mul(&truth.q))
    };
    let lambda0 = lambda(&truth.d0)?;
    let g = truth.grid;
    let peak = |f: &ScalarField| g.node(f.sub(&base).argmax());
    let (a, b) = (peak(&d_bar), peak(&truth.d0));
    Ok(Recovery {
        l1_error: norm(&d_bar.sub(&truth.d0), NormOrder::L1)?,
        l2_error: norm(&d_bar.sub(&truth.d0), NormOrder::L2)?,
        baseline_l1_error: norm(&base.sub(&truth.d0), NormOrder::L1)?,
        baseline_l2_error: norm(&base.sub(&truth.d0), NormOrder::L2)?,
        lambda_l1_error: norm(&lambda(&d_bar)?.sub(&lambda0), NormOrder::L1)?,
        baseline_lambda_l1_error: norm(&lambda(&base)?.sub(&lambda0), NormOrder::L1)?,
        peak_distance: ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt(),
    })
}

/// `eval`: compare the posterior mean in `run_dir` with the truth.
pub fn cmd_eval(cfg: &ExperimentConfig, run_dir: &Path, out: &Path) -> Result<StudyReport> {
    let started = Instant::now();
    cfg.validate()?;
    let chain_path = run_dir.join("chain.json");
    let file: McmcFile = serde_json::from_reader(BufReader::new(File::open(&chain_path)?))?;
    if file.config_hash != cfg.hash() {
        return Err(Error::config(format!(
            "{} was produced by config {} but the current config is {}",
            chain_path.display(),
            file.config_hash,
            cfg.hash()
        )));
    }
    let mean_w = ScalarField::read_csv(BufReader::new(File::open(run_dir.join("posterior_mean_w.csv"))?))?;
    let truth = cfg.truth_fields()?;
    let bins = cfg.partition(cfg.bins)?;
    let rec = recovery(cfg, &truth, &mean_w)?;
    let (counts, lambda0) = synthesize(cfg, &bins, cfg.n, derive_seed(cfg.seed, "synth"))?;
    let d_bar = link(&mean_w, &cfg.prior.link);
    let u_bar = solve_elliptic_with(&assemble(&d_bar, &truth.q)?, &truth.phi, None, CG_TOLERANCE)?.field;
    let fitted = bin_intensities(&u_bar, &truth.q, &bins)?;
    let hash = cfg.hash();
    let rows: Vec<String> = (0..bins.len())
        .map(|i| format!("{hash},{i},{},{},{}", counts.0[i], e(cfg.n * fitted.0[i]), e(cfg.n * lambda0.0[i])))
        .collect();
    let errors = vec![
        format!("{hash},posterior,{},{},{}", e(rec.l1_error), e(rec.l2_error), e(rec.lambda_l1_error)),
        format!(
            "{hash},baseline,{},{},{}",
            e(rec.baseline_l1_error),
            e(rec.baseline_l2_error),
            e(rec.baseline_lambda_l1_error)
        ),
    ];
    let mut o = Outputs::new(out)?;
    o.table("eval_bins.csv", "config_hash,bin_index,observed,fitted,truth", &rows)?;
    o.table("eval_errors.csv", "config_hash,estimate,d_l1,d_l2,lambda_l1", &errors)?;
    let mut r = StudyReport::new("eval", cfg);
    r.metric("d_l1_error", rec.l1_error);
    r.metric("d_l2_error", rec.l2_error);
    r.metric("baseline_d_l1_error", rec.baseline_l1_error);
    r.metric("baseline_d_l2_error", rec.baseline_l2_error);
    r.metric("lambda_l1_error", rec.lambda_l1_error);
    r.metric("baseline_lambda_l1_error", rec.baseline_lambda_l1_error);
    r.metric("peak_distance", rec.peak_distance);
    if let Ok(h) = histogram_estimator(&counts, cfg.n.max(f64::MIN_POSITIVE), &bins) {
        r.metric("histogram_l1_error", l1_distance(&h.intensities, &lambda0));
        r.metric("posterior_l1_error", l1_distance(&fitted, &lambda0));
    }
    r.flag("halves_baseline_error", rec.l2_error <= 0.5 * rec.baseline_l2_error);
    r.flag("peak_located", rec.peak_distance <= 0.15);
    o.finish(r, started)
}

/// Bin lattice side for sample scale `n`: `K ≈ √n`, capped at the largest
/// grid-aligned square lattice not exceeding it.
pub fn contraction_side(grid: Grid, cfg: &ExperimentConfig, n: f64) -> Result<(usize, usize)> {
    let target = n.sqrt().round().max(1.0) as usize;
    let (i0, i1, _, _) =
        cfg.window.node_extents(&grid).ok_or_else(|| Error::config("window is not aligned to the grid"))?;
    let cells = i1 - i0;
    let side = (1..=cells).filter(|s| cells % s == 0 && s * s <= target).max().unwrap_or(1);
    Ok((target, side))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionRow {
    pub n: f64,
    pub k_target: usize,
    pub k: usize,
    pub l2_error: Option<f64>,
    pub baseline_l2_error: f64,
    pub acceptance_rate: f64,
    pub failure: Option<String>,
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let m = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|(x, y)| (x.ln(), y.ln())).unzip();
    let (mx, my) = (lx.iter().sum::<f64>() / m, ly.iter().sum::<f64>() / m);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// `study-contraction`: recovery error against the sample scale.
pub fn cmd_study_contraction(cfg: &ExperimentConfig, out: &Path) -> Result<StudyReport> {
    let started = Instant::now();
    cfg.validate()?;
    let grid = cfg.grid()?;
    let truth = cfg.truth_fields()?;
    let rows: Vec<ContractionRow> = cfg
        .contraction
        .ns
        .par_iter()
        .enumerate()
        .map(|(i, &n)| contraction_run(cfg, grid, &truth, i, n))
        .collect::<Result<_>>()?;
    let hash = cfg.hash();
    let table: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{hash},{},{},{},{},{},{},{}",
                e(r.n),
                r.k_target,
                r.k,
                r.l2_error.map_or("nan".into(), e),
                e(r.baseline_l2_error),
                e(r.acceptance_rate),
                r.failure.as_deref().unwrap_or("")
            )
        })
        .collect();
    let ok: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.l2_error.map(|v| (r.n, v))).collect();
    let monotone = ok.windows(2).all(|w| w[1].1 <= 1.1 * w[0].1);
    let slope = if ok.len() >= 2 { log_log_slope(&ok) } else { f64::NAN };
    let mut o = Outputs::new(out)?;
    o.table("contraction.csv", "config_hash,n,k_target,k,l2_error,baseline_l2_error,acceptance_rate,failure", &table)?;
    let mut r = StudyReport::new("study-contraction", cfg);
    r.metric("log_log_slope", slope);
    r.metric("runs", rows.len() as f64);
    r.metric("failed_runs", rows.iter().filter(|r| r.failure.is_some()).count() as f64);
    r.flag("non_increasing", monotone && ok.len() == rows.len());
    r.flag("negative_slope", slope < 0.0);
    o.finish(r, started)
}

fn contraction_run(cfg: &ExperimentConfig, grid: Grid, truth: &Truth, i: usize, n: f64) -> Result<ContractionRow> {
    let (k_target, side) = contraction_side(grid, cfg, n)?;
    let bins = BinPartition::new(grid, cfg.window, side)?;
    let base = link(&ScalarField::zeros(grid), &cfg.prior.link);
    let baseline_l2_error = discrete_norm(&base.sub(&truth.d0), NormOrder::L2, None)?;
    let mut row = ContractionRow {
        n,
        k_target,
        k: side * side,
        l2_error: None,
        baseline_l2_error,
        acceptance_rate: f64::NAN,
        failure: None,
    };
    let (counts, _) = synthesize(cfg, &bins, n, derive_seed(cfg.seed, &format!("contraction-synth-{i}")))?;
    let chain = ChainConfig { seed: derive_seed(cfg.seed, &format!("contraction-chain-{i}")), ..cfg.chain };
    match posterior(cfg, &bins, counts, n, &chain) {
        Ok(s) => {
            row.l2_error = Some(recovery(cfg, truth, &s.mean_w)?.l2_error);
            row.acceptance_rate = s.report.acceptance_rate;
        }
        Err(err) => {
            log::warn!("contraction run at n = {n} failed: {err}");
            row.failure = Some(err.to_string().replace(',', ";"));
        }
    }
    Ok(row)
}

/// Exceedance frequencies of `‖Λ̂ − Λ‖₁ ≥ t·√(K/n)` over replications.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationResult {
    pub distances: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub exceedances: Vec<usize>,
}

pub fn concentration(k: usize, n: f64, reps: usize, thresholds: &[f64], seed: u64) -> Result<ConcentrationResult> {
    if k == 0 || !(n > 0.0) {
        return Err(Error::config("concentration study needs at least one bin and n > 0"));
    }
    let lambda = IntensityVector::uniform(k, 1.0);
    let distances: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = worker_rng(seed, rep);
            let y = sample_counts(&lambda, n, &mut rng)?;
            let hat = IntensityVector(y.0.iter().map(|&c| c as f64 / n).collect());
            Ok(l1_distance(&hat, &lambda))
        })
        .collect::<Result<_>>()?;
    let scale = (k as f64 / n).sqrt();
    let exceedances = thresholds.iter().map(|t| distances.iter().filter(|&&d| d >= t * scale).count()).collect();
    Ok(ConcentrationResult { distances, thresholds: thresholds.to_vec(), exceedances })
}

/// `study-concentration`: histogram deviations for uniform intensities.
pub fn cmd_study_concentration(cfg: &ExperimentConfig, out: &Path) -> Result<StudyReport> {
    let started = Instant::now();
    cfg.validate()?;
    let c = &cfg.concentration;
    let res = concentration(c.bins, c.n, c.reps, &c.thresholds, derive_seed(cfg.seed, "concentration"))?;
    let hash = cfg.hash();
    let scale = (c.bins as f64 / c.n).sqrt();
    let reference = (-(c.bins as f64)).exp();
    let reps = c.reps.max(1) as f64;
    let rows: Vec<String> = res
        .thresholds
        .iter()
        .zip(&res.exceedances)
        .map(|(t, &x)| format!("{hash},{},{},{x},{},{}", e(*t), e(t * scale), e(x as f64 / reps), e(reference)))
        .collect();
    let mean = res.distances.iter().sum::<f64>() / reps;
    let mut o = Outputs::new(out)?;
    o.table("concentration.csv", "config_hash,t,threshold,exceedances,frequency,reference", &rows)?;
    let mut r = StudyReport::new("study-concentration", cfg);
    r.metric("mean_l1", mean);
    r.metric("sqrt_k_over_n", scale);
    r.flag("mean_below_sqrt_k_over_n", mean <= scale);
    r.flag("frequencies_non_increasing", res.exceedances.windows(2).all(|w| w[1] <= w[0]) || !sorted(&res.thresholds));
    o.finish(r, started)
}

fn sorted(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] <= w[1])
}

/// `‖D₁ − D₂‖_{L²} / ‖u₁ − u₂‖_{H²(Ω₀₀)}`, or `None` when the solutions
/// coincide to solver precision.
pub fn stability_ratio(
    d1: &ScalarField,
    d2: &ScalarField,
    q: &ScalarField,
    phi: &ScalarField,
    window: &RegionMask,
) -> Result<(f64, f64, Option<f64>)> {
    let solve =
        |d: &ScalarField| -> Result<ScalarField> { Ok(solve_elliptic_with(&assemble(d, q)?, phi, None, 1e-12)?.field) };
    let (u1, u2) = (solve(d1)?, solve(d2)?);
    let du = u1.sub(&u2);
    let num = discrete_norm(&d1.sub(d2), NormOrder::L2, None)?;
    let den = discrete_norm(&du, NormOrder::H2, Some(window))?;
    let degenerate = du.max_abs() <= 1e-9 * u1.max_abs();
    Ok((num, den, (!degenerate).then(|| num / den)))
}

/// `study-stability`: empirical inverse-continuity ratios for prior pairs.
pub fn cmd_study_stability(cfg: &ExperimentConfig, out: &Path) -> Result<StudyReport> {
    let started = Instant::now();
    cfg.validate()?;
    let s = &cfg.stability;
    let truth = cfg.truth_fields()?;
    let grid = truth.grid;
    let window = RegionMask::from_rect(grid, &cfg.window);
    let shape = killing_field(cfg, &cfg.truth.q, 1.0)?;
    let shape = shape.scale(s.q_level / shape.max());
    let prior = PcnPrior::new(
        GpSampler::new(cfg.prior.matern, grid, &RegionMask::from_rect_interior(grid, &cfg.support))?,
        truth.cutoff.clone(),
        1.0,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "stability"));
    let pairs: Vec<(ScalarField, ScalarField)> = (0..s.pairs)
        .map(|_| {
            let a = link(&prior.draw(&mut rng), &cfg.prior.link);
            let b = link(&prior.draw(&mut rng), &cfg.prior.link);
            (a, b)
        })
        .collect();
    let hash = cfg.hash();
    let mut rows = Vec::new();
    let mut r = StudyReport::new("study-stability", cfg);
    for &scale in &s.q_scales {
        let q = shape.scale(scale);
        let results: Vec<(f64, f64, Option<f64>)> =
            pairs.par_iter().map(|(a, b)| stability_ratio(a, b, &q, &truth.phi, &window)).collect::<Result<_>>()?;
        let mut ratios: Vec<f64> = results.iter().filter_map(|r| r.2).collect();
        for (i, (num, den, ratio)) in results.iter().enumerate() {
            rows.push(format!(
                "{hash},{},{i},{},{},{},{}",
                e(scale),
                e(*num),
                e(*den),
                ratio.map_or("nan".into(), e),
                u8::from(ratio.is_none())
            ));
        }
        ratios.sort_by(f64::total_cmp);
        let max = ratios.last().copied().unwrap_or(f64::NAN);
        let median = if ratios.is_empty() { f64::NAN } else { ratios[ratios.len() / 2] };
        r.metric(&format!("max_ratio_q{scale}"), max);
        r.metric(&format!("median_ratio_q{scale}"), median);
        r.metric(&format!("degenerate_pairs_q{scale}"), (results.len() - ratios.len()) as f64);
    }
    let mut o = Outputs::new(out)?;
    o.table("stability.csv", "config_hash,q_scale,pair,d_l2,u_h2,ratio,degenerate", &rows)?;
    o.finish(r, started)
}
