//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::time::Instant;

use killdiff_core::experiment::{
    build_prior, cmd_eval, cmd_forward, cmd_mcmc, cmd_particles, cmd_study_concentration, cmd_study_contraction,
    cmd_study_stability, cmd_synth, concentration, derive_seed, ExperimentConfig, StudyReport,
};
use killdiff_core::grid::{discrete_norm, Grid, NormOrder, Rect, ScalarField};
use killdiff_core::mcmc::{run_chain, ChainConfig, Observation, PdeForward};
use killdiff_core::pde::{assemble, eigen_smallest, solve_elliptic, time_average};
use killdiff_core::point_process::{divergences, kl_exact, CountVector, IntensityVector};
use killdiff_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

/// Smooth random field in `[lo, hi]` built from a few cosine modes.
fn random_field(g: Grid, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> ScalarField {
    let modes: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| (rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let raw =
        ScalarField::from_fn(g, |x, y| modes.iter().map(|(a, b, p)| (PI * (a * x + b * y) + p).cos()).sum::<f64>());
    let (min, max) = (raw.min(), raw.max());
    raw.map(|v| lo + (hi - lo) * (v - min) / (max - min).max(1e-12))
}

/// `u = 2 + cos πx cos πy` with `D = 1 + xy/2`, `q = 1 + x`.
fn manufactured(n: usize) -> Result<(f64, f64)> {
    let g = Grid::new(n)?;
    let d = ScalarField::from_fn(g, |x, y| 1.0 + 0.5 * x * y);
    let q = ScalarField::from_fn(g, |x, _| 1.0 + x);
    let phi = ScalarField::from_fn(g, |x, y| {
        let (cx, cy, sx, sy) = ((PI * x).cos(), (PI * y).cos(), (PI * x).sin(), (PI * y).sin());
        let dd = 1.0 + 0.5 * x * y;
        let div = dd * (-2.0 * PI * PI * cx * cy) - 0.5 * y * PI * sx * cy - 0.5 * x * PI * cx * sy;
        -div + (1.0 + x) * (2.0 + cx * cy)
    });
    let exact = ScalarField::from_fn(g, |x, y| 2.0 + (PI * x).cos() * (PI * y).cos());
    let started = Instant::now();
    let u = solve_elliptic(&assemble(&d, &q)?, &phi)?;
    let secs = started.elapsed().as_secs_f64();
    Ok((u.sub(&exact).max_abs(), secs))
}

fn criterion_1() -> Result<Outcome> {
    let (e33, t33) = manufactured(33)?;
    let (e65, t65) = manufactured(65)?;
    let ratio = e33 / e65;
    outcome(
        (3.4..=4.6).contains(&ratio) && t33 < 1.0 && t65 < 1.0,
        format!("error 33² {e33:.3e}, 65² {e65:.3e}, ratio {ratio:.3}; solves {t33:.3}s / {t65:.3}s"),
    )
}

fn criterion_2() -> Result<Outcome> {
    let mut worst = 0.0f64;
    for n in [33, 65] {
        let g = Grid::new(n)?;
        let op = assemble(&ScalarField::constant(g, 0.5), &ScalarField::constant(g, 1.0))?;
        let u = solve_elliptic(&op, &ScalarField::constant(g, 1.0))?;
        worst = worst.max(u.map(|v| v - 1.0).max_abs());
    }
    outcome(worst <= 1e-8, format!("max |u − 1| = {worst:.2e}"))
}

fn criterion_3() -> Result<Outcome> {
    let g = Grid::new(33)?;
    let window = Rect::centered(0.125);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    let mut slack = f64::INFINITY;
    for _ in 0..20 {
        let d = random_field(g, rng.random_range(0.05..0.5), rng.random_range(1.0..20.0), &mut rng);
        let q_min = rng.random_range(1.0..2.0);
        let bump = random_field(g, 0.0, rng.random_range(1.0..50.0), &mut rng);
        let inside = ScalarField::from_fn(g, |x, y| if window.contains(x, y) { 1.0 } else { 0.0 });
        let q = inside.mul(&bump).map(|b| q_min + b);
        let phi = random_field(g, rng.random_range(0.01..1.0), rng.random_range(1.0..5.0), &mut rng);
        let u = solve_elliptic(&assemble(&d, &q)?, &phi)?;
        let lower = phi.min() / q.max() - 1e-6;
        let upper = phi.max() + 1e-6;
        if u.min() < lower || u.max() > upper {
            violations += 1;
        }
        slack = slack.min(u.min() - lower).min(upper - u.max());
    }
    outcome(violations == 0, format!("{violations} violations on 20 triples, smallest slack {slack:.3e}"))
}

fn criterion_4() -> Result<Outcome> {
    let g = Grid::new(65)?;
    let op = assemble(&ScalarField::constant(g, 0.5), &ScalarField::zeros(g))?;
    let pairs = eigen_smallest(&op, 5)?;
    let l = PI * PI / 2.0;
    let exact = [0.0, l, l, 2.0 * l, 4.0 * l];
    let mut ok = pairs[0].value.abs() <= 1e-8;
    let mut worst = 0.0f64;
    for (p, &e) in pairs.iter().zip(&exact).skip(1) {
        let rel = (p.value - e).abs() / e;
        worst = worst.max(rel);
        ok &= rel <= 0.01;
    }
    let window = Rect::centered(0.125);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut gaps = Vec::new();
    for _ in 0..3 {
        let d = random_field(g, 0.1, 2.0, &mut rng);
        let q = ScalarField::from_fn(g, |x, y| if window.contains(x, y) { 0.5 } else { 0.0 });
        gaps.push(eigen_smallest(&assemble(&d, &q)?, 1)?[0].value);
    }
    let min_gap = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        ok && min_gap > 0.0,
        format!(
            "λ = [{}], λ₀ = {:.1e}, worst relative error {worst:.2e}; λ₀ with q = 0.5 on the window ≥ {min_gap:.3e}",
            pairs.iter().map(|p| format!("{:.4}", p.value)).collect::<Vec<_>>().join(", "),
            pairs[0].value
        ),
    )
}

fn criterion_5() -> Result<Outcome> {
    let cfg = ExperimentConfig::preset("desk")?;
    let truth = cfg.truth_fields()?;
    let u = solve_elliptic(&assemble(&truth.d0, &truth.q)?, &truth.phi)?;
    let lambda1 = eigen_smallest(&assemble(&truth.d0, &truth.q)?, 1)?[0].value;
    let t = 10.0 / lambda1;
    let avg = time_average(&truth.d0, &truth.q, &truth.phi, t, t / 2000.0)?;
    let rel = discrete_norm(&avg.sub(&u), NormOrder::L2, None)? / discrete_norm(&u, NormOrder::L2, None)?;
    outcome(rel <= 0.02, format!("λ₁ = {lambda1:.4}, T = {t:.4e}, relative L² gap {rel:.3e}"))
}

fn criterion_6(tmp: &Path) -> Result<Outcome> {
    let started = Instant::now();
    let mut within = Vec::new();
    for seed in 1..=3 {
        let cfg = ExperimentConfig { seed, ..ExperimentConfig::preset("desk")? };
        let r = cmd_particles(&cfg, &tmp.join(format!("particles_{seed}")))?;
        within.push(r.metrics["bins_within_4sd"] as usize);
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        within.iter().all(|&w| w >= 15) && secs <= 600.0,
        format!("bins within 4√(nΛ) per seed {within:?} of 16, 10⁵ particles each, {secs:.1}s"),
    )
}

fn criterion_7() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0;
    let mut max_ratio = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(2..=64);
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let mass = rng.random_range(0.2..1.0) / raw.iter().sum::<f64>();
        let lambda0 = IntensityVector(raw.iter().map(|v| v * mass).collect());
        let lambda = IntensityVector(lambda0.0.iter().map(|l| l * (1.0 + rng.random_range(-0.499..0.499))).collect());
        let n = 10f64.powf(rng.random_range(0.0..6.0));
        let div = divergences(&lambda, &lambda0);
        assert!(div.dinf < 0.5);
        let kl = kl_exact(&lambda, &lambda0, n)?;
        let bound = 2.0 * n * div.d2_squared;
        if kl > bound {
            violations += 1;
        }
        max_ratio = max_ratio.max(kl / bound);
    }
    let spot = kl_exact(&IntensityVector(vec![0.6, 0.4]), &IntensityVector(vec![0.5, 0.5]), 10.0)?;
    let spot_bound =
        2.0 * 10.0 * divergences(&IntensityVector(vec![0.6, 0.4]), &IntensityVector(vec![0.5, 0.5])).d2_squared;
    let spot_ok = (spot - 0.204).abs() < 5e-4 && spot <= spot_bound && (spot_bound - 0.8).abs() < 1e-12;
    outcome(
        violations == 0 && spot_ok,
        format!(
            "{violations} violations on 100 pairs (max KL/bound {max_ratio:.3}); spot KL {spot:.4} ≤ {spot_bound:.3}"
        ),
    )
}

fn criterion_8() -> Result<Outcome> {
    let (k, n) = (36, 1e4);
    let res = concentration(k, n, 500, &[3.0], derive_seed(8, "concentration"))?;
    let mean = res.distances.iter().sum::<f64>() / res.distances.len() as f64;
    let scale = (k as f64 / n).sqrt();
    outcome(
        res.exceedances[0] == 0 && mean <= scale,
        format!(
            "{} exceedances of 3√(K/n) in 500 reps; mean ‖Λ̂ − Λ‖₁ = {mean:.4} vs √(K/n) = {scale:.4}",
            res.exceedances[0]
        ),
    )
}

fn criterion_9() -> Result<Outcome> {
    let cfg = ExperimentConfig::preset("desk")?;
    let truth = cfg.truth_fields()?;
    let bins = cfg.partition(cfg.bins)?;
    let forward = PdeForward::new(truth.q.clone(), truth.phi.clone(), bins.clone(), cfg.prior.link, 1e-10)?;
    let prior = build_prior(&cfg, 0.0)?;
    let chain = ChainConfig { iterations: 6000, burn_in: 1000, stride: 1, seed: 9, ..ChainConfig::default() };
    let data = Observation { counts: CountVector(vec![0; bins.len()]), n: 0.0 };
    let s = run_chain(&chain, &data, &forward, &prior)?;
    let g = truth.grid;
    let probes = [(8, 8), (16, 16), (12, 20), (22, 10), (24, 24)].map(|(i, j)| g.index(i, j));
    let m = s.report.retained as f64;
    let mut ok = s.report.final_beta == 1.0;
    let mut lines = Vec::new();
    for &k in &probes {
        let prior_var = prior.variance_at(k);
        let (mean, var) = (s.mean_w.values()[k], s.variance_w.values()[k]);
        let se = (var / m).sqrt();
        let z = mean / se;
        let rel = (var - prior_var).abs() / prior_var;
        ok &= z.abs() <= 3.0 && rel <= 0.1;
        lines.push(format!("z {z:+.2} var {rel:.3}"));
    }
    outcome(ok, format!("final β {}, {} samples; {}", s.report.final_beta, s.report.retained, lines.join("; ")))
}

fn criterion_10(tmp: &Path) -> Result<Outcome> {
    let started = Instant::now();
    let cfg = ExperimentConfig::preset("desk")?;
    let run = tmp.join("recovery");
    cmd_mcmc(&cfg, &run)?;
    let r = cmd_eval(&cfg, &run, &tmp.join("recovery_eval"))?;
    let secs = started.elapsed().as_secs_f64();
    let mean_d = ScalarField::read_csv(std::io::BufReader::new(fs::File::open(run.join("posterior_mean_d.csv"))?))?;
    let (x, y) = mean_d.grid().node(mean_d.argmax());
    let peak = ((x - 0.5).powi(2) + (y - 0.7).powi(2)).sqrt();
    let (l2, base) = (r.metrics["d_l2_error"], r.metrics["baseline_d_l2_error"]);
    outcome(
        l2 <= 0.5 * base && peak <= 0.15 && secs <= 1800.0,
        format!(
            "L² error {l2:.4} vs baseline {base:.4} (ratio {:.3}, need ≤ 0.5); peak offset {peak:.4}; {secs:.1}s",
            l2 / base
        ),
    )
}

fn criterion_11(tmp: &Path) -> Result<Outcome> {
    let cfg = ExperimentConfig::preset("desk")?;
    let r = cmd_study_contraction(&cfg, &tmp.join("contraction"))?;
    let table = fs::read_to_string(tmp.join("contraction").join("contraction.csv"))?;
    let errors: Vec<String> = table
        .lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            format!("n {} K {} L² {}", c[1], c[3], c[4])
        })
        .collect();
    outcome(
        r.flags["non_increasing"] && r.flags["negative_slope"],
        format!("slope {:.3}; rows [{}]", r.metrics["log_log_slope"], errors.join(" | ")),
    )
}

fn small_config() -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::preset("desk")?;
    cfg.seed = 12;
    cfg.particles.count = 2_000;
    cfg.particles.write_events = true;
    cfg.chain = ChainConfig { iterations: 300, burn_in: 100, stride: 10, cache_check_every: 100, ..cfg.chain };
    cfg.contraction.ns = vec![1e3, 1e4];
    cfg.concentration.reps = 50;
    cfg.stability.pairs = 3;
    Ok(cfg)
}

fn run_all(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<StudyReport>> {
    Ok(vec![
        cmd_forward(cfg, &dir.join("forward"))?,
        cmd_particles(cfg, &dir.join("particles"))?,
        cmd_synth(cfg, &dir.join("synth"))?,
        cmd_mcmc(cfg, &dir.join("mcmc"))?,
        cmd_eval(cfg, &dir.join("mcmc"), &dir.join("eval"))?,
        cmd_study_contraction(cfg, &dir.join("contraction"))?,
        cmd_study_concentration(cfg, &dir.join("concentration"))?,
        cmd_study_stability(cfg, &dir.join("stability"))?,
    ])
}

fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut files = BTreeMap::new();
    for sub in fs::read_dir(dir)? {
        let sub = sub?.path();
        for f in fs::read_dir(&sub)? {
            let f = f?.path();
            let name = f.file_name().unwrap().to_string_lossy().into_owned();
            if name.ends_with("_timing.json") {
                continue;
            }
            let key = format!("{}/{name}", sub.file_name().unwrap().to_string_lossy());
            files.insert(key, fs::read(&f)?);
        }
    }
    Ok(files)
}

fn criterion_12(tmp: &Path) -> Result<Outcome> {
    let cfg = small_config()?;
    let (a, b) = (tmp.join("det_a"), tmp.join("det_b"));
    let reports = run_all(&cfg, &a)?;
    run_all(&cfg, &b)?;
    let (fa, fb) = (snapshot(&a)?, snapshot(&b)?);
    let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
    let same_names = fa.keys().eq(fb.keys());
    outcome(
        same_names && differing.is_empty() && reports.len() == 8,
        format!("{} files from 8 commands compared, {} differ {:?}", fa.len(), differing.len(), differing),
    )
}

type Criterion<'a> = (&'a str, Box<dyn Fn() -> Result<Outcome> + 'a>);

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<Criterion> = vec![
        ("manufactured solution, second order", Box::new(criterion_1)),
        ("constant-coefficient exactness", Box::new(criterion_2)),
        ("maximum-principle bounds", Box::new(criterion_3)),
        ("Neumann spectrum and spectral gap", Box::new(criterion_4)),
        ("time-average identity", Box::new(criterion_5)),
        ("particle oracle", Box::new(|| criterion_6(tmp.path()))),
        ("KL bound", Box::new(criterion_7)),
        ("histogram concentration", Box::new(criterion_8)),
        ("pCN prior reproduction", Box::new(criterion_9)),
        ("end-to-end recovery", Box::new(|| criterion_10(tmp.path()))),
        ("contraction monotonicity", Box::new(|| criterion_11(tmp.path()))),
        ("determinism", Box::new(|| criterion_12(tmp.path()))),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let (pass, detail) = match run() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {tag} {name} ({:.1}s): {detail}", i + 1, started.elapsed().as_secs_f64());
        if !pass {
            failed.push(i + 1);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all 12 criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
